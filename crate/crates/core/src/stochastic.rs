//! Euler-Maruyama simulation of the stochastic models underlying the three
//! operator families, with invariant-measure and metastable-transition
//! statistics.
//!
//! * overdamped: `dx = -gamma grad V dt + sqrt(2 gamma T) dw`
//! * kinetic:    `dx = y dt, dy = -gamma y dt - grad V dt + sqrt(2 gamma T) dw`
//! * chain:      `dx = y dt, dy = (-grad V + z) dt, dz = gamma (x - z) dt
//!                + sqrt(2 gamma T_j) dw_j` (noise on the bath variables only)
//!
//! At equal temperatures `T = h/2` the invariant density is the Maxwellian
//! `exp(-2 Phi / h)`, which the histogram checks compare against.
//! Trajectories draw from per-trajectory ChaCha streams keyed by
//! `(seed, trajectory index)`, so ensembles are bit-exactly reproducible and
//! trivially parallel.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::potential::{CriticalPointReport, ScalarField};
use crate::susy::{FamilyTag, SusySpec};
use crate::vecops;

#[derive(Debug, Error)]
pub enum StochasticError {
    #[error("parameter out of range: {0}")]
    BadParameter(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("dt = {dt} exceeds the stability bound 0.1/Lip(b) ~ {bound:.3e}")]
    DtTooLarge { dt: f64, bound: f64 },
    #[error("trajectory {traj} blew up beyond 1e6 at t = {t}; decrease dt")]
    Blowup { traj: usize, t: f64 },
    #[error("effective sample count {got} below 10 x bins = {need}")]
    TooFewSamples { got: usize, need: usize },
    #[error("tube radius {r} too large for wells separated by {separation}")]
    TubeTooLarge { r: f64, separation: f64 },
    #[error("fewer than 30 transitions observed ({0}); lengthen the runs")]
    TooFewTransitions(usize),
    #[error("no exact marginal available for axes {0:?} of this family")]
    UnsupportedMarginal(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SdeFamily {
    Overdamped,
    Kinetic,
    Chain,
}

type DriftFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// Drift/diffusion data of one model; `D = sigma sigma^T / 2`.
pub struct SdeModel {
    pub dim: usize,
    pub family: SdeFamily,
    drift: std::sync::Arc<DriftFn>,
    /// Constant `dim x m` noise map.
    pub sigma: DMatrix<f64>,
    pub temperatures: Vec<f64>,
}

impl SdeModel {
    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out);
    }

    pub fn diffusion(&self) -> DMatrix<f64> {
        0.5 * &self.sigma * self.sigma.transpose()
    }
}

pub fn make_overdamped(v: &ScalarField, gamma: f64, t: f64) -> Result<SdeModel, StochasticError> {
    if gamma <= 0.0 || t < 0.0 {
        return Err(StochasticError::BadParameter(format!(
            "need gamma > 0 and T >= 0, got gamma={gamma}, T={t}"
        )));
    }
    let n = v.dim();
    let vg = v.clone();
    Ok(SdeModel {
        dim: n,
        family: SdeFamily::Overdamped,
        drift: std::sync::Arc::new(move |x, out| {
            let g = vg.grad(x);
            for i in 0..g.len() {
                out[i] = -gamma * g[i];
            }
        }),
        sigma: DMatrix::from_diagonal_element(n, n, (2.0 * gamma * t).sqrt()),
        temperatures: vec![t],
    })
}

/// Kinetic Langevin; `gamma = 0` with `T = 0` is the Hamiltonian limit.
pub fn make_kinetic(v: &ScalarField, gamma: f64, t: f64) -> Result<SdeModel, StochasticError> {
    if gamma < 0.0 || t < 0.0 {
        return Err(StochasticError::BadParameter(format!(
            "need gamma >= 0 and T >= 0, got gamma={gamma}, T={t}"
        )));
    }
    let n = v.dim();
    let vg = v.clone();
    let mut sigma = DMatrix::zeros(2 * n, n);
    for i in 0..n {
        sigma[(n + i, i)] = (2.0 * gamma * t).sqrt();
    }
    Ok(SdeModel {
        dim: 2 * n,
        family: SdeFamily::Kinetic,
        drift: std::sync::Arc::new(move |xy, out| {
            let (x, y) = xy.split_at(n);
            let g = vg.grad(x);
            for i in 0..n {
                out[i] = y[i];
                out[n + i] = -gamma * y[i] - g[i];
            }
        }),
        sigma,
        temperatures: vec![t],
    })
}

/// Two-oscillator chain with baths at `(T1, T2)`; variables ordered
/// `(x1, x2, y1, y2, z1, z2)`, blocks of size `d`.
pub fn make_chain(
    v1: &ScalarField,
    v2: &ScalarField,
    vc: &ScalarField,
    gamma: f64,
    t1: f64,
    t2: f64,
) -> Result<SdeModel, StochasticError> {
    if gamma <= 0.0 || t1 < 0.0 || t2 < 0.0 {
        return Err(StochasticError::BadParameter(format!(
            "need gamma > 0 and T1, T2 >= 0, got gamma={gamma}, T1={t1}, T2={t2}"
        )));
    }
    let d = v1.dim();
    if v2.dim() != d || vc.dim() != d {
        return Err(StochasticError::DimensionMismatch(format!(
            "chain potentials must share one dimension, got {}, {}, {}",
            d,
            v2.dim(),
            vc.dim()
        )));
    }
    let dim = 6 * d;
    let (g1, g2, gc) = (v1.clone(), v2.clone(), vc.clone());
    let mut sigma = DMatrix::zeros(dim, 2 * d);
    for i in 0..d {
        sigma[(4 * d + i, i)] = (2.0 * gamma * t1).sqrt();
        sigma[(5 * d + i, d + i)] = (2.0 * gamma * t2).sqrt();
    }
    Ok(SdeModel {
        dim,
        family: SdeFamily::Chain,
        drift: std::sync::Arc::new(move |u, out| {
            let x1 = &u[0..d];
            let x2 = &u[d..2 * d];
            let y = &u[2 * d..4 * d];
            let z1 = &u[4 * d..5 * d];
            let z2 = &u[5 * d..6 * d];
            let w: Vec<f64> = x2.iter().zip(x1).map(|(a, b)| a - b).collect();
            let dv1 = g1.grad(x1);
            let dv2 = g2.grad(x2);
            let dvc = gc.grad(&w);
            for i in 0..2 * d {
                out[i] = y[i]; // dx = y
            }
            for i in 0..d {
                out[2 * d + i] = -(dv1[i] - dvc[i]) + z1[i]; // dy1
                out[3 * d + i] = -(dv2[i] + dvc[i]) + z2[i]; // dy2
                out[4 * d + i] = gamma * (x1[i] - z1[i]); // dz1
                out[5 * d + i] = gamma * (x2[i] - z2[i]); // dz2
            }
        }),
        sigma,
        temperatures: vec![t1, t2],
    })
}

/// Snapshots of an ensemble, flat layout `[traj][snapshot][component]`.
#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryEnsemble {
    pub dim: usize,
    pub n_traj: usize,
    pub dt: f64,
    pub t_end: f64,
    pub seed: u64,
    pub stride: usize,
    pub snapshot_times: Vec<f64>,
    #[serde(skip)]
    pub data: Vec<f64>,
}

impl TrajectoryEnsemble {
    pub fn n_snapshots(&self) -> usize {
        self.snapshot_times.len()
    }

    pub fn state(&self, traj: usize, snap: usize) -> &[f64] {
        let base = (traj * self.n_snapshots() + snap) * self.dim;
        &self.data[base..base + self.dim]
    }
}

/// Explicit Euler-Maruyama with per-trajectory ChaCha streams. All
/// trajectories start at `initial`; snapshots are taken every `stride` steps
/// (step 0 excluded, final step always included).
pub fn simulate_ensemble(
    model: &SdeModel,
    initial: &[f64],
    n_traj: usize,
    t_end: f64,
    dt: f64,
    seed: u64,
    stride: usize,
) -> Result<TrajectoryEnsemble, StochasticError> {
    if initial.len() != model.dim {
        return Err(StochasticError::DimensionMismatch(format!(
            "initial point has {} components, model has {}",
            initial.len(),
            model.dim
        )));
    }
    if !(dt > 0.0) || !(t_end > 0.0) || n_traj == 0 || stride == 0 {
        return Err(StochasticError::BadParameter(
            "need dt > 0, t_end > 0, n_traj > 0, stride > 0".into(),
        ));
    }
    let bound = 0.1 / lipschitz_estimate(model, initial, seed);
    if dt > bound {
        return Err(StochasticError::DtTooLarge { dt, bound });
    }

    let n_steps = (t_end / dt).round() as usize;
    let snap_steps: Vec<usize> = (1..=n_steps)
        .filter(|s| s % stride == 0 || *s == n_steps)
        .collect();
    let snapshot_times: Vec<f64> = snap_steps.iter().map(|&s| s as f64 * dt).collect();
    let n_snap = snap_steps.len();
    let m = model.sigma.ncols();
    let sqrt_dt = dt.sqrt();

    let rows: Result<Vec<Vec<f64>>, StochasticError> = (0..n_traj)
        .into_par_iter()
        .map(|traj| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(traj as u64 + 1);
            let mut x = initial.to_vec();
            let mut b = vec![0.0; model.dim];
            let mut xi = vec![0.0; m];
            let mut out = Vec::with_capacity(n_snap * model.dim);
            let mut next_snap = 0usize;
            for step in 1..=n_steps {
                model.drift(&x, &mut b);
                for e in xi.iter_mut() {
                    *e = rng.sample::<f64, _>(StandardNormal);
                }
                for i in 0..model.dim {
                    let mut noise = 0.0;
                    for j in 0..m {
                        noise += model.sigma[(i, j)] * xi[j];
                    }
                    x[i] += b[i] * dt + noise * sqrt_dt;
                    if x[i].abs() > 1e6 {
                        return Err(StochasticError::Blowup {
                            traj,
                            t: step as f64 * dt,
                        });
                    }
                }
                if next_snap < n_snap && step == snap_steps[next_snap] {
                    out.extend_from_slice(&x);
                    next_snap += 1;
                }
            }
            Ok(out)
        })
        .collect();

    let mut data = Vec::with_capacity(n_traj * n_snap * model.dim);
    for row in rows? {
        data.extend(row);
    }
    Ok(TrajectoryEnsemble {
        dim: model.dim,
        n_traj,
        dt,
        t_end,
        seed,
        stride,
        snapshot_times,
        data,
    })
}

/// Crude Lipschitz estimate of the drift by sampled difference quotients in
/// a box of half-width 1 around the start point.
fn lipschitz_estimate(model: &SdeModel, around: &[f64], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51c);
    let mut worst: f64 = 1e-6;
    let mut ba = vec![0.0; model.dim];
    let mut bb = vec![0.0; model.dim];
    for _ in 0..64 {
        let a: Vec<f64> = around
            .iter()
            .map(|&c| c + rng.random_range(-1.0..1.0))
            .collect();
        let delta: Vec<f64> = (0..model.dim).map(|_| rng.random_range(-0.1..0.1)).collect();
        let b: Vec<f64> = a.iter().zip(&delta).map(|(x, d)| x + d).collect();
        model.drift(&a, &mut ba);
        model.drift(&b, &mut bb);
        let num: f64 = ba
            .iter()
            .zip(&bb)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        let den = vecops::norm(&delta).max(1e-12);
        worst = worst.max(num / den);
    }
    worst
}

// ---------------------------------------------------------------------------
// invariant-measure distance

/// Total-variation distance between the post-burn-in empirical histogram on
/// the chosen axes (at most 2) and the exact Maxwellian marginal
/// `exp(-2 Phi / h)` of `spec` on the same bins. Mass outside the histogram
/// box is compared in a single overflow bin.
pub fn invariant_distance(
    ensemble: &TrajectoryEnsemble,
    spec: &SusySpec,
    h: f64,
    axes: &[usize],
    bins: usize,
    bounds: &[(f64, f64)],
    burn_in: f64,
) -> Result<f64, StochasticError> {
    assert!(!axes.is_empty() && axes.len() <= 2 && bounds.len() == axes.len());
    let n_snap = ensemble.n_snapshots();
    let first = ((n_snap as f64) * burn_in).floor() as usize;
    let eff = ensemble.n_traj * n_snap.saturating_sub(first);
    let total_bins = bins.pow(axes.len() as u32);
    if eff < 10 * total_bins {
        return Err(StochasticError::TooFewSamples {
            got: eff,
            need: 10 * total_bins,
        });
    }

    // empirical histogram
    let mut counts = vec![0.0f64; total_bins];
    let mut overflow = 0.0f64;
    let width: Vec<f64> = bounds.iter().map(|&(lo, hi)| (hi - lo) / bins as f64).collect();
    for traj in 0..ensemble.n_traj {
        for snap in first..n_snap {
            let s = ensemble.state(traj, snap);
            let mut idx = 0usize;
            let mut inside = true;
            for (k, &ax) in axes.iter().enumerate() {
                let (lo, hi) = bounds[k];
                let v = s[ax];
                if v < lo || v >= hi {
                    inside = false;
                    break;
                }
                idx = idx * bins + ((v - lo) / width[k]) as usize;
            }
            if inside {
                counts[idx] += 1.0;
            } else {
                overflow += 1.0;
            }
        }
    }
    let total = eff as f64;
    for c in counts.iter_mut() {
        *c /= total;
    }
    overflow /= total;

    let (exact, exact_overflow) = maxwellian_marginal_mass(spec, h, axes, bins, bounds)?;
    let mut tv = (overflow - exact_overflow).abs();
    for (e, c) in exact.iter().zip(&counts) {
        tv += (e - c).abs();
    }
    Ok(0.5 * tv)
}

/// Exact per-bin mass of the Maxwellian marginal, plus the mass outside the
/// histogram box. Uses family structure: position marginals by quadrature,
/// velocity marginals are Gaussian, bath variables are position-Gaussian
/// convolutions.
fn maxwellian_marginal_mass(
    spec: &SusySpec,
    h: f64,
    axes: &[usize],
    bins: usize,
    bounds: &[(f64, f64)],
) -> Result<(Vec<f64>, f64), StochasticError> {
    let unsupported = || StochasticError::UnsupportedMarginal(axes.to_vec());
    // marginal density evaluated on a fine 1-D/2-D quadrature grid spanning a
    // widened box, then integrated over bins
    match spec.family {
        FamilyTag::Witten => {
            if axes.iter().any(|&a| a >= spec.dim) || spec.dim > 2 {
                return Err(unsupported());
            }
            let density = |pt: &[f64]| (-2.0 * spec.phase.eval(pt) / h).exp();
            marginal_by_quadrature(&density, spec.dim, axes, bins, bounds)
        }
        FamilyTag::Kfp => {
            let n = spec.dim / 2;
            if n > 2 {
                return Err(unsupported());
            }
            // density factorizes into position and Gaussian velocity parts
            let all_position = axes.iter().all(|&a| a < n);
            let all_velocity = axes.iter().all(|&a| a >= n && a < 2 * n);
            if all_position {
                let phase = spec.phase.clone();
                let density = move |x: &[f64]| {
                    // phi(x, 0) = V(x)
                    let mut full = x.to_vec();
                    full.extend(std::iter::repeat_n(0.0, n));
                    (-2.0 * phase.eval(&full) / h).exp()
                };
                marginal_by_quadrature(&density, n, axes, bins, bounds)
            } else if all_velocity {
                gaussian_marginal_mass(h, axes.len(), bins, bounds)
            } else if axes.len() == 2 && axes[0] < n && axes[1] >= n {
                // product of an x-marginal and a Gaussian y-marginal
                let phase = spec.phase.clone();
                let density = move |x: &[f64]| {
                    let mut full = x.to_vec();
                    full.extend(std::iter::repeat_n(0.0, n));
                    (-2.0 * phase.eval(&full) / h).exp()
                };
                let (px, ox) =
                    marginal_by_quadrature(&density, n, &[axes[0]], bins, &bounds[..1])?;
                let (py, oy) = gaussian_marginal_mass(h, 1, bins, &bounds[1..])?;
                let mut mass = vec![0.0; bins * bins];
                for i in 0..bins {
                    for j in 0..bins {
                        mass[i * bins + j] = px[i] * py[j];
                    }
                }
                let overflow = 1.0 - (1.0 - ox) * (1.0 - oy);
                Ok((mass, overflow))
            } else {
                Err(unsupported())
            }
        }
        FamilyTag::Chain => {
            let d = spec.dim / 6;
            if d != 1 {
                return Err(unsupported());
            }
            // Phi = Veff(x1,x2) + |y|^2/2 + |z-x|^2/2
            let phase = spec.phase.clone();
            let veff_density = move |x: &[f64]| {
                let full = [x[0], x[1], 0.0, 0.0, x[0], x[1]];
                (-2.0 * phase.eval(&full) / h).exp()
            };
            let all_position = axes.iter().all(|&a| a < 2);
            let all_velocity = axes.iter().all(|&a| (2..4).contains(&a));
            let all_bath = axes.iter().all(|&a| (4..6).contains(&a));
            if all_position {
                marginal_by_quadrature(&veff_density, 2, axes, bins, bounds)
            } else if all_velocity && axes.len() == 1 {
                gaussian_marginal_mass(h, 1, bins, bounds)
            } else if all_bath && axes.len() == 1 {
                // z_j = x_j + gaussian: convolve the x-marginal
                let xj = axes[0] - 4;
                bath_marginal_mass(&veff_density, xj, h, bins, bounds)
            } else {
                Err(unsupported())
            }
        }
        FamilyTag::Custom => Err(unsupported()),
    }
}

/// Composite-midpoint quadrature of `density` over a widened box, reduced to
/// the requested axes and integrated over the bins.
fn marginal_by_quadrature(
    density: &dyn Fn(&[f64]) -> f64,
    dim: usize,
    axes: &[usize],
    bins: usize,
    bounds: &[(f64, f64)],
) -> Result<(Vec<f64>, f64), StochasticError> {
    // widened quadrature box: histogram box inflated by half its width on
    // each side, other axes spanned symmetrically wide
    let wide: Vec<(f64, f64)> = (0..dim)
        .map(|a| match axes.iter().position(|&ax| ax == a) {
            Some(k) => {
                let (lo, hi) = bounds[k];
                let half = 0.5 * (hi - lo);
                (lo - half, hi + half)
            }
            None => (-12.0, 12.0),
        })
        .collect();
    let n_quad = if dim == 1 { 20_001 } else { 1201 };
    let steps: Vec<f64> = wide.iter().map(|&(lo, hi)| (hi - lo) / n_quad as f64).collect();

    let total_bins = bins.pow(axes.len() as u32);
    let mut mass = vec![0.0f64; total_bins];
    let mut inside_total = 0.0f64;
    let mut grand_total = 0.0f64;
    let width: Vec<f64> = bounds.iter().map(|&(lo, hi)| (hi - lo) / bins as f64).collect();

    let mut idx = vec![0usize; dim];
    let mut pt = vec![0.0f64; dim];
    let cells: usize = vec![n_quad; dim].iter().product();
    for _ in 0..cells {
        for a in 0..dim {
            pt[a] = wide[a].0 + (idx[a] as f64 + 0.5) * steps[a];
        }
        let w: f64 = density(&pt) * steps.iter().product::<f64>();
        grand_total += w;
        let mut bin = 0usize;
        let mut inside = true;
        for (k, &ax) in axes.iter().enumerate() {
            let (lo, hi) = bounds[k];
            if pt[ax] < lo || pt[ax] >= hi {
                inside = false;
                break;
            }
            bin = bin * bins + ((pt[ax] - lo) / width[k]) as usize;
        }
        if inside {
            mass[bin] += w;
            inside_total += w;
        }
        for a in (0..dim).rev() {
            idx[a] += 1;
            if idx[a] < n_quad {
                break;
            }
            idx[a] = 0;
        }
    }
    for m in mass.iter_mut() {
        *m /= grand_total;
    }
    Ok((mass, (grand_total - inside_total) / grand_total))
}

/// Bin masses of a centered Gaussian with variance `h/2` per axis.
fn gaussian_marginal_mass(
    h: f64,
    n_axes: usize,
    bins: usize,
    bounds: &[(f64, f64)],
) -> Result<(Vec<f64>, f64), StochasticError> {
    let sigma = (0.5 * h).sqrt();
    let cdf = |x: f64| 0.5 * (1.0 + erf(x / (sigma * std::f64::consts::SQRT_2)));
    let per_axis: Vec<Vec<f64>> = (0..n_axes)
        .map(|k| {
            let (lo, hi) = bounds[k];
            let w = (hi - lo) / bins as f64;
            (0..bins)
                .map(|b| cdf(lo + (b + 1) as f64 * w) - cdf(lo + b as f64 * w))
                .collect()
        })
        .collect();
    let total_bins = bins.pow(n_axes as u32);
    let mut mass = vec![0.0; total_bins];
    let mut inside = 0.0;
    for flat in 0..total_bins {
        let mut rem = flat;
        let mut p = 1.0;
        for pa in per_axis.iter().rev() {
            p *= pa[rem % bins];
            rem /= bins;
        }
        mass[flat] = p;
        inside += p;
    }
    Ok((mass, 1.0 - inside))
}

/// Marginal of `z_j = x_j + N(0, h/2)`: convolution of the position marginal
/// with the bath Gaussian.
fn bath_marginal_mass(
    veff_density: &dyn Fn(&[f64]) -> f64,
    xj: usize,
    h: f64,
    bins: usize,
    bounds: &[(f64, f64)],
) -> Result<(Vec<f64>, f64), StochasticError> {
    let (lo, hi) = bounds[0];
    let half = 0.5 * (hi - lo);
    // fine grid for the x_j marginal
    let nq = 2001;
    let (qlo, qhi) = (lo - half - 3.0, hi + half + 3.0);
    let dxq = (qhi - qlo) / nq as f64;
    let other_range: Vec<f64> = (0..nq)
        .map(|i| qlo + (i as f64 + 0.5) * dxq)
        .collect();
    let mut px = vec![0.0f64; nq];
    for (i, &xi) in other_range.iter().enumerate() {
        let mut acc = 0.0;
        for &xo in &other_range {
            let pt = if xj == 0 { [xi, xo] } else { [xo, xi] };
            acc += veff_density(&pt);
        }
        px[i] = acc;
    }
    let z: f64 = px.iter().sum::<f64>() * dxq;
    for p in px.iter_mut() {
        *p /= z;
    }
    // convolve against the Gaussian and integrate over bins
    let sigma = (0.5 * h).sqrt();
    let cdf = |x: f64| 0.5 * (1.0 + erf(x / (sigma * std::f64::consts::SQRT_2)));
    let w = (hi - lo) / bins as f64;
    let mut mass = vec![0.0f64; bins];
    let mut inside = 0.0f64;
    for b in 0..bins {
        let (blo, bhi) = (lo + b as f64 * w, lo + (b + 1) as f64 * w);
        let mut acc = 0.0;
        for (i, &xi) in other_range.iter().enumerate() {
            acc += px[i] * (cdf(bhi - xi) - cdf(blo - xi)) * dxq;
        }
        mass[b] = acc;
        inside += acc;
    }
    Ok((mass, 1.0 - inside))
}

// Abramowitz-Stegun 7.1.26, |error| < 1.5e-7; adequate against Monte Carlo
// noise.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

// ---------------------------------------------------------------------------
// transition statistics

#[derive(Debug, Clone, Serialize)]
pub struct TransitionStats {
    pub n_forward: usize,
    pub n_backward: usize,
    /// Mean first-passage time from ball(U_-1, r) to ball(U_1, r).
    pub mean_forward: f64,
    pub mean_backward: f64,
    pub sem_forward: f64,
    pub sem_backward: f64,
}

impl TransitionStats {
    pub fn n_total(&self) -> usize {
        self.n_forward + self.n_backward
    }
}

/// First-passage times between the two wells of a double-well report. The
/// clock starts on entry into one ball and stops on first entry into the
/// other; the x-block of the state is compared against the well locations.
pub fn transition_statistics(
    ensemble: &TrajectoryEnsemble,
    wells: &CriticalPointReport,
    r: f64,
) -> Result<TransitionStats, StochasticError> {
    if !wells.is_double_well {
        return Err(StochasticError::BadParameter(
            "transition statistics need a double-well report".into(),
        ));
    }
    let mins = wells.wells();
    let (a, b) = (&mins[0].location, &mins[1].location);
    let separation: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt();
    if 2.0 * r >= separation {
        return Err(StochasticError::TubeTooLarge { r, separation });
    }
    let xdim = a.len();

    let mut fwd: Vec<f64> = Vec::new();
    let mut bwd: Vec<f64> = Vec::new();
    for traj in 0..ensemble.n_traj {
        let mut clock_a: Option<f64> = None;
        let mut clock_b: Option<f64> = None;
        for (snap, &t) in ensemble.snapshot_times.iter().enumerate() {
            let s = ensemble.state(traj, snap);
            let da: f64 = s[..xdim]
                .iter()
                .zip(a)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            let db: f64 = s[..xdim]
                .iter()
                .zip(b)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            if da < r {
                if let Some(t0) = clock_b.take() {
                    bwd.push(t - t0);
                }
                if clock_a.is_none() {
                    clock_a = Some(t);
                }
            } else if db < r {
                if let Some(t0) = clock_a.take() {
                    fwd.push(t - t0);
                }
                if clock_b.is_none() {
                    clock_b = Some(t);
                }
            }
        }
    }
    if fwd.len() + bwd.len() < 30 {
        return Err(StochasticError::TooFewTransitions(fwd.len() + bwd.len()));
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n.max(1.0);
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        (mean, (var / n.max(1.0)).sqrt())
    };
    let (mean_forward, sem_forward) = stats(&fwd);
    let (mean_backward, sem_backward) = stats(&bwd);
    Ok(TransitionStats {
        n_forward: fwd.len(),
        n_backward: bwd.len(),
        mean_forward,
        mean_backward,
        sem_forward,
        sem_backward,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::{builtin, find_critical_points};
    use crate::susy::{assemble_chain, assemble_kfp, assemble_witten};

    fn quad() -> ScalarField {
        builtin("quadratic", &[]).unwrap()
    }

    #[test]
    fn diffusion_matrices() {
        let gamma = 1.3;
        let t = 0.4;
        let od = make_overdamped(&quad(), gamma, t).unwrap();
        let d = od.diffusion();
        assert!((d[(0, 0)] - gamma * t).abs() < 1e-14);

        let ki = make_kinetic(&quad(), gamma, t).unwrap();
        let d = ki.diffusion();
        assert_eq!(d[(0, 0)], 0.0);
        assert!((d[(1, 1)] - gamma * t).abs() < 1e-14);

        let vc = builtin("paper_sec6_Vc", &[]).unwrap();
        let v2 = builtin("paper_sec6_V2", &[]).unwrap();
        let v1 = builtin("paper_sec6_V1", &[]).unwrap();
        let ch = make_chain(&v1, &v2, &vc, gamma, 0.3, 0.7).unwrap();
        let d = ch.diffusion();
        for i in 0..4 {
            assert_eq!(d[(i, i)], 0.0);
        }
        assert!((d[(4, 4)] - gamma * 0.3).abs() < 1e-14);
        assert!((d[(5, 5)] - gamma * 0.7).abs() < 1e-14);
    }

    #[test]
    fn zero_noise_zero_drift_is_constant() {
        let flat = ScalarField::new_analytic(
            1,
            |_| 0.0,
            |_| vec![0.0],
            |_| nalgebra::DMatrix::from_element(1, 1, 0.0),
            "",
        );
        let model = make_overdamped(&flat, 1.0, 0.0).unwrap();
        let ens = simulate_ensemble(&model, &[0.7], 3, 1.0, 0.01, 9, 10).unwrap();
        for traj in 0..3 {
            for snap in 0..ens.n_snapshots() {
                assert_eq!(ens.state(traj, snap), &[0.7]);
            }
        }
    }

    #[test]
    fn zero_temperature_is_gradient_flow() {
        let model = make_overdamped(&quad(), 1.0, 0.0).unwrap();
        assert_eq!(model.sigma.abs().max(), 0.0);
        let ens = simulate_ensemble(&model, &[1.0], 1, 2.0, 0.001, 1, 2000).unwrap();
        // dx = -x dt: x(2) = e^{-2} + O(dt)
        let got = ens.state(0, ens.n_snapshots() - 1)[0];
        assert!((got - (-2.0_f64).exp()).abs() < 2e-3, "{got}");
    }

    #[test]
    fn hamiltonian_limit_conserves_energy() {
        let model = make_kinetic(&quad(), 0.0, 0.0).unwrap();
        let dt = 0.001;
        let ens = simulate_ensemble(&model, &[1.0, 0.0], 1, 1.0, dt, 1, 100).unwrap();
        let energy = |s: &[f64]| 0.5 * s[0] * s[0] + 0.5 * s[1] * s[1];
        let e0 = 0.5;
        for snap in 0..ens.n_snapshots() {
            let e = energy(ens.state(0, snap));
            assert!((e - e0).abs() <= 5.0 * dt, "energy drift {}", e - e0);
        }
    }

    #[test]
    fn ou_stationary_variance() {
        let t_temp = 0.3;
        let model = make_overdamped(&quad(), 1.0, t_temp).unwrap();
        let n_traj = 20_000;
        let ens = simulate_ensemble(&model, &[0.0], n_traj, 10.0, 0.002, 42, 5000).unwrap();
        let last = ens.n_snapshots() - 1;
        let mean_sq: f64 = (0..n_traj)
            .map(|k| {
                let x = ens.state(k, last)[0];
                x * x
            })
            .sum::<f64>()
            / n_traj as f64;
        // Var(X^2) = 2 T^2 for a centered Gaussian
        let se = t_temp * (2.0 / n_traj as f64).sqrt();
        assert!(
            (mean_sq - t_temp).abs() <= 3.0 * se,
            "E[X^2] = {mean_sq} vs T = {t_temp} (3se = {})",
            3.0 * se
        );
    }

    #[test]
    fn kinetic_quadratic_stationary_covariance() {
        let t_temp = 0.2;
        let model = make_kinetic(&quad(), 1.0, t_temp).unwrap();
        let n_traj = 20_000;
        let ens = simulate_ensemble(&model, &[0.0, 0.0], n_traj, 12.0, 0.002, 7, 6000).unwrap();
        let last = ens.n_snapshots() - 1;
        let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
        for k in 0..n_traj {
            let s = ens.state(k, last);
            xx += s[0] * s[0];
            yy += s[1] * s[1];
            xy += s[0] * s[1];
        }
        let n = n_traj as f64;
        let se = t_temp * (2.0 / n).sqrt();
        assert!((xx / n - t_temp).abs() <= 4.0 * se, "xx {}", xx / n);
        assert!((yy / n - t_temp).abs() <= 4.0 * se, "yy {}", yy / n);
        assert!((xy / n).abs() <= 4.0 * se, "xy {}", xy / n);
    }

    #[test]
    fn reproducible_from_seed() {
        let model = make_overdamped(&builtin("quartic_double_well", &[1.0]).unwrap(), 1.0, 0.1)
            .unwrap();
        let a = simulate_ensemble(&model, &[1.0], 8, 1.0, 0.005, 123, 50).unwrap();
        let b = simulate_ensemble(&model, &[1.0], 8, 1.0, 0.005, 123, 50).unwrap();
        assert_eq!(a.data, b.data);
        let c = simulate_ensemble(&model, &[1.0], 8, 1.0, 0.005, 124, 50).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn dt_stability_gate() {
        let model = make_overdamped(&builtin("paper_sec6_V1", &[]).unwrap(), 1.0, 0.1).unwrap();
        assert!(matches!(
            simulate_ensemble(&model, &[0.0], 1, 1.0, 0.5, 1, 10),
            Err(StochasticError::DtTooLarge { .. })
        ));
    }

    #[test]
    fn ou_invariant_histogram_close_and_mismatched_far() {
        let t_temp = 0.25;
        let h = 2.0 * t_temp;
        let model = make_overdamped(&quad(), 1.0, t_temp).unwrap();
        let spec = assemble_witten(1.0, &quad()).unwrap();
        let ens = simulate_ensemble(&model, &[0.0], 2000, 60.0, 0.005, 3, 200).unwrap();
        let d = invariant_distance(&ens, &spec, h, &[0], 50, &[(-2.5, 2.5)], 0.5).unwrap();
        assert!(d <= 0.03, "TV distance {d}");
        // Maxwellian at twice the temperature is visibly different
        let d2 = invariant_distance(&ens, &spec, 2.0 * h, &[0], 50, &[(-2.5, 2.5)], 0.5).unwrap();
        assert!(d2 >= 0.15, "mismatched TV distance {d2}");
    }

    #[test]
    fn too_few_samples_rejected() {
        let model = make_overdamped(&quad(), 1.0, 0.1).unwrap();
        let spec = assemble_witten(1.0, &quad()).unwrap();
        let ens = simulate_ensemble(&model, &[0.0], 3, 1.0, 0.01, 5, 100).unwrap();
        assert!(matches!(
            invariant_distance(&ens, &spec, 0.2, &[0], 50, &[(-2.0, 2.0)], 0.5),
            Err(StochasticError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn kinetic_invariant_marginals() {
        let t_temp = 0.25;
        let h = 2.0 * t_temp;
        let v = quad();
        let model = make_kinetic(&v, 1.0, t_temp).unwrap();
        let spec = assemble_kfp(1.0, &v).unwrap();
        let ens = simulate_ensemble(&model, &[0.0, 0.0], 2000, 60.0, 0.005, 11, 200).unwrap();
        let dx = invariant_distance(&ens, &spec, h, &[0], 40, &[(-2.5, 2.5)], 0.5).unwrap();
        let dy = invariant_distance(&ens, &spec, h, &[1], 40, &[(-2.5, 2.5)], 0.5).unwrap();
        let dxy = invariant_distance(
            &ens,
            &spec,
            h,
            &[0, 1],
            14,
            &[(-2.0, 2.0), (-2.0, 2.0)],
            0.5,
        )
        .unwrap();
        assert!(dx <= 0.03, "x-marginal {dx}");
        assert!(dy <= 0.03, "y-marginal {dy}");
        assert!(dxy <= 0.06, "joint {dxy}");
    }

    #[test]
    fn chain_drift_zeros_are_critical_points() {
        let v1 = builtin("paper_sec6_V1", &[]).unwrap();
        let v2 = builtin("paper_sec6_V2", &[]).unwrap();
        let vc = builtin("paper_sec6_Vc", &[]).unwrap();
        let model = make_chain(&v1, &v2, &vc, 1.0, 0.5, 0.5).unwrap();
        let spec = assemble_chain(1.0, &v1, &v2, &vc).unwrap();
        let crit = find_critical_points(
            &spec.phase,
            &[
                (-2.0, 2.0),
                (-1.0, 1.0),
                (-1.0, 1.0),
                (-1.0, 1.0),
                (-2.0, 2.0),
                (-1.0, 1.0),
            ],
            3,
            1e-10,
            1e-6,
        )
        .unwrap();
        assert_eq!(crit.points.len(), 3);
        let mut b = vec![0.0; 6];
        for p in &crit.points {
            model.drift(&p.location, &mut b);
            assert!(vecops::norm(&b) <= 1e-8, "drift {b:?} at {:?}", p.location);
            // the critical points are (x_j, 0, x_j)
            assert!((p.location[0] - p.location[4]).abs() < 1e-8);
            assert!((p.location[1] - p.location[5]).abs() < 1e-8);
            assert!(p.location[2].abs() < 1e-8 && p.location[3].abs() < 1e-8);
        }
    }

    #[test]
    fn double_well_transitions_are_symmetric() {
        let v = builtin("quartic_double_well", &[1.0]).unwrap();
        let h = 0.25;
        let model = make_overdamped(&v, 1.0, 0.5 * h).unwrap();
        let crit = find_critical_points(&v, &[(-2.0, 2.0)], 30, 1e-10, 1e-6).unwrap();
        let report = crate::potential::barrier_report(&crit.points);
        let ens = simulate_ensemble(&model, &[-1.0], 64, 400.0, 0.005, 21, 20).unwrap();
        let stats = transition_statistics(&ens, &report, 0.3).unwrap();
        assert!(stats.n_total() >= 30);
        let diff = (stats.mean_forward - stats.mean_backward).abs();
        let two_se = 2.0 * (stats.sem_forward + stats.sem_backward);
        assert!(
            diff <= two_se.max(0.35 * stats.mean_forward),
            "fwd {} +- {}, bwd {} +- {}",
            stats.mean_forward,
            stats.sem_forward,
            stats.mean_backward,
            stats.sem_backward
        );

        // tube radius sanity
        assert!(matches!(
            transition_statistics(&ens, &report, 1.2),
            Err(StochasticError::TubeTooLarge { .. })
        ));
    }
}
