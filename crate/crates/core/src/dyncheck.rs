//! Numerical verification of the dynamical hypotheses behind the
//! hypocoercive estimates:
//!
//! * the critical set `{x : p_0(x) = 0, c(x) = 0}` is finite, with phase-space
//!   critical points `rho_j = (x_j, 0)`;
//! * near each `rho_j` the time-averaged symbol
//!   `<p~>_{T0}(rho) = (1/T0) int p~ o exp(t H_{p1}) dt`,
//!   `p~ = p_0 + <xi>^-2 p_2`, is comparable to `|rho - rho_j|^2` from both
//!   sides;
//! * away from the critical set it stays above a positive floor;
//! * along the drift flow `exp(t nu)`, `p_0` exceeds a threshold on a set of
//!   times of positive measure.
//!
//! The `H_{p1}` flow integrates `x' = c(x)`, `xi' = 2 phi''(x) C xi` with
//! fixed-step RK4, doubling the step count until two successive answers agree;
//! `p_1` is a conserved quantity of this flow and is used as the step-size
//! check.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::susy::SusySpec;
use crate::vecops;

#[derive(Debug, Error)]
pub enum DyncheckError {
    #[error("no critical point found from any seed")]
    NoCriticalPoints,
    #[error("flow step too large: p1 drifted by {drift:.3e} (relative) over |t| = {t}")]
    StepTooLarge { drift: f64, t: f64 },
    #[error("flow left the safe region (|x| > 1e6) at t = {0}")]
    FlowBlowup(f64),
    #[error("quadrature did not converge to 1e-6 relative after {0} doublings")]
    QuadratureNotConverged(usize),
    #[error("T0 must be positive, got {0}")]
    BadT0(f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
}

impl PhasePoint {
    pub fn rest(x: Vec<f64>) -> Self {
        let xi = vec![0.0; x.len()];
        PhasePoint { x, xi }
    }

    pub fn dist(&self, other: &PhasePoint) -> f64 {
        let dx: f64 = self
            .x
            .iter()
            .zip(&other.x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let dxi: f64 = self
            .xi
            .iter()
            .zip(&other.xi)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (dx + dxi).sqrt()
    }
}

/// `p~ = p_0(x) + <xi>^-2 p_2(x, xi)`.
pub fn p_tilde(spec: &SusySpec, p: &PhasePoint) -> f64 {
    let xi2: f64 = vecops::dot(&p.xi, &p.xi);
    spec.p0(&p.x) + spec.p2(&p.xi) / (1.0 + xi2)
}

/// Zeros of the stacked system `(B phi'(x), 2 C phi'(x)) = 0` by
/// Gauss-Newton from a uniform seed lattice; for invertible `A` these are
/// exactly the critical points of the phase, returned as `(x_j, 0)`.
pub fn critical_set(
    spec: &SusySpec,
    bounds: &[(f64, f64)],
    seeds_per_axis: usize,
    newton_tol: f64,
) -> Result<Vec<PhasePoint>, DyncheckError> {
    let dim = spec.dim;
    let b = spec.matrix.b().clone();
    let c2 = 2.0 * spec.matrix.c();
    let residual = |x: &[f64]| -> Vec<f64> {
        let g = nalgebra::DVector::from_column_slice(&spec.phase.grad(x));
        let top = &b * &g;
        let bot = &c2 * &g;
        top.iter().chain(bot.iter()).copied().collect()
    };
    let jacobian = |x: &[f64]| -> nalgebra::DMatrix<f64> {
        let hess = spec.phase.hess(x);
        let top = &b * &hess;
        let bot = &c2 * &hess;
        let mut j = nalgebra::DMatrix::zeros(2 * dim, dim);
        j.view_mut((0, 0), (dim, dim)).copy_from(&top);
        j.view_mut((dim, 0), (dim, dim)).copy_from(&bot);
        j
    };

    let n_seeds = seeds_per_axis.pow(dim as u32);
    let mut found: Vec<Vec<f64>> = Vec::new();
    let mut multi = vec![0usize; dim];
    for _ in 0..n_seeds {
        let seed: Vec<f64> = (0..dim)
            .map(|i| {
                let (lo, hi) = bounds[i];
                lo + (multi[i] as f64 + 0.5) * (hi - lo) / seeds_per_axis as f64
            })
            .collect();
        for i in (0..dim).rev() {
            multi[i] += 1;
            if multi[i] < seeds_per_axis {
                break;
            }
            multi[i] = 0;
        }

        let mut x = seed;
        let mut r = residual(&x);
        let mut rn = vecops::norm(&r);
        let mut ok = false;
        for _ in 0..100 {
            if rn <= newton_tol {
                ok = true;
                break;
            }
            let j = jacobian(&x);
            let jt = j.transpose();
            let lhs = &jt * &j;
            let rhs = -(&jt * nalgebra::DVector::from_column_slice(&r));
            let Some(delta) = lhs.lu().solve(&rhs) else {
                break;
            };
            let mut s = 1.0;
            let mut improved = false;
            for _ in 0..30 {
                let xt: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + s * d).collect();
                let rt = residual(&xt);
                let rtn = vecops::norm(&rt);
                if rtn < rn {
                    x = xt;
                    r = rt;
                    rn = rtn;
                    improved = true;
                    break;
                }
                s *= 0.5;
            }
            if !improved {
                break;
            }
        }
        if ok {
            let inside = x
                .iter()
                .zip(bounds)
                .all(|(&xi, &(lo, hi))| xi >= lo && xi <= hi);
            let dup = found.iter().any(|p| {
                p.iter()
                    .zip(&x)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
                    <= 10.0 * newton_tol.max(1e-12)
            });
            if inside && !dup {
                found.push(x);
            }
        }
    }
    if found.is_empty() {
        return Err(DyncheckError::NoCriticalPoints);
    }
    found.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(found.into_iter().map(PhasePoint::rest).collect())
}

fn flow_rhs(spec: &SusySpec, p: &PhasePoint, out_x: &mut [f64], out_xi: &mut [f64]) {
    let c = spec.transport_coeff(&p.x);
    out_x.copy_from_slice(&c);
    // xi' = 2 phi''(x) C xi
    let hess = spec.phase.hess(&p.x);
    let cxi = spec.matrix.c() * nalgebra::DVector::from_column_slice(&p.xi);
    let hxi = hess * cxi * 2.0;
    out_xi.copy_from_slice(hxi.as_slice());
}

fn rk4_step(spec: &SusySpec, p: &PhasePoint, dt: f64) -> PhasePoint {
    let n = p.x.len();
    let mut kx = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut kxi = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut stage = p.clone();
    flow_rhs(spec, &stage, &mut kx[0], &mut kxi[0]);
    for s in 1..4 {
        let c = if s == 3 { dt } else { 0.5 * dt };
        for i in 0..n {
            stage.x[i] = p.x[i] + c * kx[s - 1][i];
            stage.xi[i] = p.xi[i] + c * kxi[s - 1][i];
        }
        flow_rhs(spec, &stage, &mut kx[s], &mut kxi[s]);
    }
    let mut out = p.clone();
    for i in 0..n {
        out.x[i] += dt / 6.0 * (kx[0][i] + 2.0 * kx[1][i] + 2.0 * kx[2][i] + kx[3][i]);
        out.xi[i] += dt / 6.0 * (kxi[0][i] + 2.0 * kxi[1][i] + 2.0 * kxi[2][i] + kxi[3][i]);
    }
    out
}

/// `exp(t H_{p1}) rho` with `n_steps` RK4 steps.
pub fn hp1_flow(
    spec: &SusySpec,
    rho: &PhasePoint,
    t: f64,
    n_steps: usize,
) -> Result<PhasePoint, DyncheckError> {
    let dt = t / n_steps as f64;
    let p1_start = spec.p1(&rho.x, &rho.xi);
    let mut p = rho.clone();
    for k in 0..n_steps {
        p = rk4_step(spec, &p, dt);
        if p.x.iter().any(|v| v.abs() > 1e6) {
            return Err(DyncheckError::FlowBlowup(dt * (k + 1) as f64));
        }
    }
    let p1_end = spec.p1(&p.x, &p.xi);
    let scale = p1_start.abs().max(1.0);
    let drift = (p1_end - p1_start).abs() / scale;
    if drift > 1e-8 * t.abs().max(1.0) {
        return Err(DyncheckError::StepTooLarge {
            drift,
            t: t.abs(),
        });
    }
    Ok(p)
}

/// `exp(t H_{p1}) rho` with the step count doubled from 2048 until two
/// successive endpoints agree to 1e-6.
pub fn hp1_flow_adaptive(
    spec: &SusySpec,
    rho: &PhasePoint,
    t: f64,
) -> Result<PhasePoint, DyncheckError> {
    if t == 0.0 {
        return Ok(rho.clone());
    }
    let mut n = 2048usize;
    let mut prev = hp1_flow(spec, rho, t, n)?;
    for _ in 0..6 {
        n *= 2;
        let cur = hp1_flow(spec, rho, t, n)?;
        let scale = vecops::norm(&cur.x).max(vecops::norm(&cur.xi)).max(1.0);
        if prev.dist(&cur) <= 1e-6 * scale {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(DyncheckError::QuadratureNotConverged(6))
}

/// Composite-Simpson time average of `p~` along the flow over the window
/// `[t_lo, t_hi]`, with point doubling to 1e-6 relative.
fn time_average_window(
    spec: &SusySpec,
    rho: &PhasePoint,
    t_lo: f64,
    t_hi: f64,
) -> Result<f64, DyncheckError> {
    let simpson = |n_intervals: usize| -> Result<f64, DyncheckError> {
        let dt = (t_hi - t_lo) / n_intervals as f64;
        // march once from t_lo to t_hi, sampling every node
        let steps_per_interval = (2048 / n_intervals).max(4);
        let mut p = hp1_flow(spec, rho, t_lo, 2048)?;
        let mut acc = p_tilde(spec, &p);
        for k in 1..=n_intervals {
            p = hp1_flow(spec, &p, dt, steps_per_interval)?;
            let w = if k == n_intervals {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * p_tilde(spec, &p);
        }
        Ok(acc * dt / 3.0 / (t_hi - t_lo))
    };
    let mut n = 64usize;
    let mut prev = simpson(n)?;
    for _ in 0..6 {
        n *= 2;
        let cur = simpson(n)?;
        if (cur - prev).abs() <= 1e-6 * cur.abs().max(1e-300) {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(DyncheckError::QuadratureNotConverged(6))
}

/// `<p~>_{T0}(rho)`, the symmetric-window time average.
pub fn time_average(spec: &SusySpec, rho: &PhasePoint, t0: f64) -> Result<f64, DyncheckError> {
    if !(t0 > 0.0) {
        return Err(DyncheckError::BadT0(t0));
    }
    time_average_window(spec, rho, -0.5 * t0, 0.5 * t0)
}

/// Shifted-window average, exposed for the flow-shift invariance check.
pub fn time_average_shifted(
    spec: &SusySpec,
    rho: &PhasePoint,
    t0: f64,
    shift: f64,
) -> Result<f64, DyncheckError> {
    if !(t0 > 0.0) {
        return Err(DyncheckError::BadT0(t0));
    }
    time_average_window(spec, rho, shift - 0.5 * t0, shift + 0.5 * t0)
}

/// Fraction of uniformly sampled `t in [-T0/2, T0/2]` with
/// `p_0(exp(t nu) x0) >= threshold`. The `nu` flow is the `x`-part of the
/// `H_{p1}` flow.
pub fn nu_flow_measure(
    spec: &SusySpec,
    x0: &[f64],
    t0: f64,
    threshold: f64,
    samples: usize,
) -> Result<f64, DyncheckError> {
    if !(t0 > 0.0) {
        return Err(DyncheckError::BadT0(t0));
    }
    let rho = PhasePoint::rest(x0.to_vec());
    let run = |substeps: usize| -> Result<usize, DyncheckError> {
        let mut hits = 0usize;
        // march backward then forward through the uniform t-samples
        let dt = t0 / samples as f64;
        let mut p = hp1_flow(spec, &rho, -0.5 * t0 + 0.5 * dt, 1024)?;
        if spec.p0(&p.x) >= threshold {
            hits += 1;
        }
        for _ in 1..samples {
            p = hp1_flow(spec, &p, dt, substeps)?;
            if spec.p0(&p.x) >= threshold {
                hits += 1;
            }
        }
        Ok(hits)
    };
    let mut sub = 8usize.max(2048 / samples);
    let mut prev = run(sub)?;
    for _ in 0..4 {
        sub *= 2;
        let cur = run(sub)?;
        if cur == prev {
            return Ok(cur as f64 / samples as f64);
        }
        prev = cur;
    }
    Ok(prev as f64 / samples as f64)
}

// ---------------------------------------------------------------------------
// aggregated hypothesis verification

#[derive(Debug, Clone, Serialize)]
pub struct HypothesisPlan {
    pub t0: f64,
    /// Radii of the near-critical ladder (for example 1e-1, 1e-2, 1e-3).
    pub radii: Vec<f64>,
    pub sphere_samples: usize,
    /// Two-sided comparability constant of the near check.
    pub ratio_c: f64,
    /// Box for the critical-point search (x-space).
    pub crit_bounds: Vec<(f64, f64)>,
    pub crit_seeds_per_axis: usize,
    /// Phase-space sampling box for the far check, `(x, xi)` per coordinate.
    pub far_bounds: Vec<(f64, f64)>,
    pub far_samples: usize,
    pub far_floor: f64,
    /// Points closer than this to the critical set are excluded from the far
    /// and measure checks.
    pub exclusion_radius: f64,
    pub measure_threshold: f64,
    pub measure_floor: f64,
    pub measure_base_points: usize,
    pub measure_time_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NearRatio {
    pub radius: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HypothesisReport {
    pub critical_set: Vec<PhasePoint>,
    pub near_ratios: Vec<NearRatio>,
    pub far_min: f64,
    pub measure_fractions: Vec<(Vec<f64>, f64)>,
    pub pass_near: bool,
    pub pass_far: bool,
    pub pass_measure: bool,
    pub pass: bool,
    pub plan: HypothesisPlan,
    /// Sub-checks that could not be evaluated (flow failures etc.); any entry
    /// fails the report.
    pub incidents: Vec<String>,
}

/// Run the three dynamical checks and aggregate. The report is always
/// produced; numerical failures are recorded as incidents and fail the
/// corresponding flag.
pub fn verify_hypotheses(spec: &SusySpec, plan: &HypothesisPlan) -> HypothesisReport {
    let mut incidents = Vec::new();
    let critical_set = match critical_set(spec, &plan.crit_bounds, plan.crit_seeds_per_axis, 1e-9)
    {
        Ok(c) => c,
        Err(e) => {
            incidents.push(format!("critical set: {e}"));
            Vec::new()
        }
    };
    let dim = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);

    // near-critical two-sided quadratic comparability
    let mut near_ratios = Vec::new();
    let mut pass_near = !critical_set.is_empty();
    for &radius in &plan.radii {
        let mut min_ratio = f64::MAX;
        let mut max_ratio: f64 = 0.0;
        for rho_j in &critical_set {
            for _ in 0..plan.sphere_samples {
                let mut dir: Vec<f64> = (0..2 * dim)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                let dn = vecops::norm(&dir);
                vecops::scale_in_place(&mut dir, radius / dn);
                let rho = PhasePoint {
                    x: rho_j.x.iter().zip(&dir[..dim]).map(|(a, d)| a + d).collect(),
                    xi: rho_j
                        .xi
                        .iter()
                        .zip(&dir[dim..])
                        .map(|(a, d)| a + d)
                        .collect(),
                };
                match time_average(spec, &rho, plan.t0) {
                    Ok(avg) => {
                        let ratio = avg / (radius * radius);
                        min_ratio = min_ratio.min(ratio);
                        max_ratio = max_ratio.max(ratio);
                    }
                    Err(e) => incidents.push(format!("near check at r={radius}: {e}")),
                }
            }
        }
        pass_near &= min_ratio >= 1.0 / plan.ratio_c && max_ratio <= plan.ratio_c;
        near_ratios.push(NearRatio {
            radius,
            min_ratio,
            max_ratio,
        });
    }

    // uniform positivity away from the critical set
    let mut far_min = f64::MAX;
    let mut far_evaluated = 0usize;
    while far_evaluated < plan.far_samples {
        let x: Vec<f64> = (0..dim)
            .map(|i| {
                let (lo, hi) = plan.far_bounds[i];
                rng.random_range(lo..hi)
            })
            .collect();
        let xi: Vec<f64> = (0..dim)
            .map(|i| {
                let (lo, hi) = plan.far_bounds[dim + i];
                rng.random_range(lo..hi)
            })
            .collect();
        let rho = PhasePoint { x, xi };
        let close = critical_set
            .iter()
            .any(|c| rho.dist(c) < plan.exclusion_radius);
        if close {
            continue;
        }
        far_evaluated += 1;
        match time_average(spec, &rho, plan.t0) {
            Ok(avg) => far_min = far_min.min(avg),
            Err(e) => incidents.push(format!("far check: {e}")),
        }
    }
    let pass_far = far_min >= plan.far_floor && far_evaluated > 0;

    // measure condition along the drift flow
    let mut measure_fractions = Vec::new();
    let mut pass_measure = true;
    let mut base_found = 0usize;
    let mut attempts = 0usize;
    while base_found < plan.measure_base_points && attempts < 100 * plan.measure_base_points {
        attempts += 1;
        let x: Vec<f64> = (0..dim)
            .map(|i| {
                let (lo, hi) = plan.far_bounds[i];
                rng.random_range(lo..hi)
            })
            .collect();
        let close = critical_set.iter().any(|c| {
            x.iter()
                .zip(&c.x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                < plan.exclusion_radius
        });
        if close {
            continue;
        }
        base_found += 1;
        match nu_flow_measure(
            spec,
            &x,
            plan.t0,
            plan.measure_threshold,
            plan.measure_time_samples,
        ) {
            Ok(frac) => {
                pass_measure &= frac >= plan.measure_floor;
                measure_fractions.push((x, frac));
            }
            Err(e) => {
                incidents.push(format!("measure check: {e}"));
                pass_measure = false;
            }
        }
    }

    let pass = pass_near && pass_far && pass_measure && incidents.is_empty();
    HypothesisReport {
        critical_set,
        near_ratios,
        far_min,
        measure_fractions,
        pass_near,
        pass_far,
        pass_measure,
        pass,
        plan: plan.clone(),
        incidents,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::builtin;
    use crate::susy::{assemble_chain, assemble_kfp, assemble_witten};

    fn kfp_quartic() -> SusySpec {
        assemble_kfp(1.0, &builtin("quartic_double_well", &[1.0]).unwrap()).unwrap()
    }

    #[test]
    fn critical_sets_of_the_three_families() {
        // Witten quadratic: single point at the origin
        let w = assemble_witten(1.0, &builtin("quadratic", &[]).unwrap()).unwrap();
        let cs = critical_set(&w, &[(-1.0, 1.0)], 8, 1e-9).unwrap();
        assert_eq!(cs.len(), 1);
        assert!(cs[0].x[0].abs() < 1e-8 && cs[0].xi[0] == 0.0);

        // KFP double well: (x*, 0) for x* in {-1, 0, 1}
        let k = kfp_quartic();
        let cs = critical_set(&k, &[(-1.6, 1.6), (-1.0, 1.0)], 8, 1e-9).unwrap();
        assert_eq!(cs.len(), 3);
        let mut xs: Vec<f64> = cs.iter().map(|p| p.x[0]).collect();
        xs.sort_by(|a, b| a.total_cmp(b));
        assert!((xs[0] + 1.0).abs() < 1e-7 && xs[1].abs() < 1e-7 && (xs[2] - 1.0).abs() < 1e-7);
        for p in &cs {
            assert!(p.x[1].abs() < 1e-7, "y component {:?}", p.x);
        }

        // chain: (x_j, 0, x_j) with x_j critical for the effective potential
        let c = assemble_chain(
            1.0,
            &builtin("paper_sec6_V1", &[]).unwrap(),
            &builtin("paper_sec6_V2", &[]).unwrap(),
            &builtin("paper_sec6_Vc", &[]).unwrap(),
        )
        .unwrap();
        let cs = critical_set(
            &c,
            &[
                (-1.6, 1.6),
                (-0.6, 0.6),
                (-0.5, 0.5),
                (-0.5, 0.5),
                (-1.6, 1.6),
                (-0.6, 0.6),
            ],
            3,
            1e-9,
        )
        .unwrap();
        assert_eq!(cs.len(), 3);
        for p in &cs {
            assert!((p.x[0] - p.x[4]).abs() < 1e-7);
            assert!((p.x[1] - p.x[5]).abs() < 1e-7);
            assert!(p.x[2].abs() < 1e-7 && p.x[3].abs() < 1e-7);
        }
    }

    #[test]
    fn flow_identity_and_conservation() {
        let spec = kfp_quartic();
        let rho = PhasePoint {
            x: vec![0.4, -0.3],
            xi: vec![0.2, 0.7],
        };
        let back = hp1_flow_adaptive(&spec, &rho, 0.0).unwrap();
        assert_eq!(back.x, rho.x);

        let p1_before = spec.p1(&rho.x, &rho.xi);
        let flowed = hp1_flow(&spec, &rho, 1.3, 4096).unwrap();
        let p1_after = spec.p1(&flowed.x, &flowed.xi);
        assert!(
            (p1_after - p1_before).abs() <= 1e-8 * p1_before.abs().max(1.0) * 1.3,
            "p1 {p1_before} -> {p1_after}"
        );
    }

    #[test]
    fn kfp_quadratic_flow_is_a_rotation() {
        // V = x^2/2: x' = y, y' = -x and the same for (xi, eta)
        let spec = assemble_kfp(1.0, &builtin("quadratic", &[]).unwrap()).unwrap();
        let rho = PhasePoint {
            x: vec![0.8, -0.1],
            xi: vec![0.3, 0.5],
        };
        let t = 0.7;
        let got = hp1_flow_adaptive(&spec, &rho, t).unwrap();
        let (c, s) = (t.cos(), t.sin());
        let want_x = [rho.x[0] * c + rho.x[1] * s, -rho.x[0] * s + rho.x[1] * c];
        let want_xi = [rho.xi[0] * c + rho.xi[1] * s, -rho.xi[0] * s + rho.xi[1] * c];
        for i in 0..2 {
            assert!((got.x[i] - want_x[i]).abs() <= 1e-8, "x[{i}]");
            assert!((got.xi[i] - want_xi[i]).abs() <= 1e-8, "xi[{i}]");
        }
    }

    #[test]
    fn time_average_vanishes_on_critical_orbit() {
        let spec = kfp_quartic();
        let rho = PhasePoint::rest(vec![1.0, 0.0]);
        let avg = time_average(&spec, &rho, 1.0).unwrap();
        assert!(avg.abs() <= 1e-10, "average {avg}");
    }

    #[test]
    fn witten_average_is_pointwise_value() {
        // C = 0: the flow is trivial
        let spec = assemble_witten(1.0, &builtin("quartic_double_well", &[1.0]).unwrap()).unwrap();
        let rho = PhasePoint {
            x: vec![0.3],
            xi: vec![-0.8],
        };
        let avg = time_average(&spec, &rho, 1.0).unwrap();
        let want = p_tilde(&spec, &rho);
        assert!((avg - want).abs() <= 1e-9 * want.max(1.0));
    }

    #[test]
    fn near_critical_average_is_quadratic() {
        let spec = assemble_kfp(1.0, &builtin("quadratic", &[]).unwrap()).unwrap();
        // rho = (0, eps, 0, 0): <p~> ~ eps^2 with bounded ratio
        for eps in [1e-1, 1e-2, 1e-3] {
            let rho = PhasePoint {
                x: vec![0.0, eps],
                xi: vec![0.0, 0.0],
            };
            let avg = time_average(&spec, &rho, 1.0).unwrap();
            let ratio = avg / (eps * eps);
            assert!(
                (1.0 / 50.0..=50.0).contains(&ratio),
                "eps {eps}: ratio {ratio}"
            );
        }
    }

    #[test]
    fn average_is_flow_shift_invariant() {
        let spec = kfp_quartic();
        let rho = PhasePoint {
            x: vec![0.5, 0.2],
            xi: vec![-0.1, 0.4],
        };
        let t0 = 1.0;
        let s = 0.37;
        let flowed = hp1_flow_adaptive(&spec, &rho, s).unwrap();
        let a = time_average(&spec, &flowed, t0).unwrap();
        let b = time_average_shifted(&spec, &rho, t0, s).unwrap();
        assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-3), "{a} vs {b}");
    }

    #[test]
    fn measure_zero_at_critical_point_positive_off_it() {
        let spec = kfp_quartic();
        // critical point: fraction 0 at any positive threshold
        let f = nu_flow_measure(&spec, &[1.0, 0.0], 1.0, 1e-8, 101).unwrap();
        assert_eq!(f, 0.0);
        // large |y0|: transport sweeps x; p0 = gamma/2 y^2 already large
        let f = nu_flow_measure(&spec, &[0.0, 3.0], 1.0, 1e-3, 101).unwrap();
        assert!(f >= 0.9, "fraction {f}");
    }

    fn default_plan(dim: usize, xbox: f64) -> HypothesisPlan {
        HypothesisPlan {
            t0: 1.0,
            radii: vec![1e-1, 1e-2, 1e-3],
            sphere_samples: 40,
            ratio_c: 50.0,
            crit_bounds: vec![(-xbox, xbox); dim],
            crit_seeds_per_axis: if dim > 2 { 3 } else { 8 },
            far_bounds: vec![(-1.5, 1.5); 2 * dim],
            far_samples: 60,
            far_floor: 1e-3,
            exclusion_radius: 0.25,
            measure_threshold: 1e-3,
            measure_floor: 1e-3,
            measure_base_points: 12,
            measure_time_samples: 101,
            seed: 42,
        }
    }

    #[test]
    fn hypotheses_pass_for_witten_and_kfp() {
        let w = assemble_witten(1.0, &builtin("quartic_double_well", &[1.0]).unwrap()).unwrap();
        let rep = verify_hypotheses(&w, &default_plan(1, 1.6));
        assert!(rep.pass, "witten report {rep:?}");

        let k = kfp_quartic();
        let rep = verify_hypotheses(&k, &default_plan(2, 1.6));
        assert!(
            rep.pass,
            "kfp: near {:?} far {} measure pass {} incidents {:?}",
            rep.near_ratios, rep.far_min, rep.pass_measure, rep.incidents
        );
    }

    #[test]
    fn non_morse_phase_fails_near_ratio() {
        // phi = x^4/4 has a degenerate critical point at 0
        let quartic_flat = crate::potential::ScalarField::new_analytic(
            1,
            |x| 0.25 * x[0].powi(4),
            |x| vec![x[0].powi(3)],
            |x| nalgebra::DMatrix::from_element(1, 1, 3.0 * x[0] * x[0]),
            "degenerate at the origin",
        );
        let spec = assemble_witten(1.0, &quartic_flat).unwrap();
        let rep = verify_hypotheses(&spec, &default_plan(1, 1.0));
        assert!(!rep.pass_near, "near ratios {:?}", rep.near_ratios);
        assert!(!rep.pass);
    }
}
