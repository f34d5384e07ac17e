//! Scalar potentials and phases: critical points, Morse classification,
//! barrier heights, sublevel-set topology and well quasimodes.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::grid::Grid;
use crate::vecops;

type EvalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;
type HessFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// A smooth scalar function of `dim` variables with gradient and Hessian.
///
/// Derivatives are analytic when supplied and central finite differences
/// otherwise (step `1e-6 * (1 + |x_i|)` per axis). The `growth_note` records
/// the user's assertion about boundedness of derivatives of order >= 2; it is
/// carried as metadata and never machine-checked.
#[derive(Clone)]
pub struct ScalarField {
    dim: usize,
    eval: Arc<EvalFn>,
    grad: Option<Arc<GradFn>>,
    hess: Option<Arc<HessFn>>,
    growth_note: String,
}

impl std::fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScalarField")
            .field("dim", &self.dim)
            .field("analytic_grad", &self.grad.is_some())
            .field("analytic_hess", &self.hess.is_some())
            .field("growth_note", &self.growth_note)
            .finish()
    }
}

impl ScalarField {
    pub fn from_eval(
        dim: usize,
        eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        growth_note: impl Into<String>,
    ) -> Self {
        ScalarField {
            dim,
            eval: Arc::new(eval),
            grad: None,
            hess: None,
            growth_note: growth_note.into(),
        }
    }

    pub fn new_analytic(
        dim: usize,
        eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        hess: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
        growth_note: impl Into<String>,
    ) -> Self {
        ScalarField {
            dim,
            eval: Arc::new(eval),
            grad: Some(Arc::new(grad)),
            hess: Some(Arc::new(hess)),
            growth_note: growth_note.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn growth_note(&self) -> &str {
        &self.growth_note
    }

    pub fn has_analytic_derivatives(&self) -> bool {
        self.grad.is_some() && self.hess.is_some()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        (self.eval)(x)
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        match &self.grad {
            Some(g) => g(x),
            None => self.fd_grad(x),
        }
    }

    pub fn hess(&self, x: &[f64]) -> DMatrix<f64> {
        match &self.hess {
            Some(h) => h(x),
            // Differencing the gradient keeps full accuracy when the
            // gradient is analytic and stays adequate for Morse
            // classification when it is itself a finite difference.
            None => self.fd_hess(x),
        }
    }

    fn fd_grad(&self, x: &[f64]) -> Vec<f64> {
        let mut xp = x.to_vec();
        let mut g = vec![0.0; self.dim];
        for i in 0..self.dim {
            let step = 1e-6 * (1.0 + x[i].abs());
            xp[i] = x[i] + step;
            let fp = self.eval(&xp);
            xp[i] = x[i] - step;
            let fm = self.eval(&xp);
            xp[i] = x[i];
            g[i] = (fp - fm) / (2.0 * step);
        }
        g
    }

    fn fd_hess(&self, x: &[f64]) -> DMatrix<f64> {
        let mut xp = x.to_vec();
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for j in 0..self.dim {
            let step = 1e-6 * (1.0 + x[j].abs());
            xp[j] = x[j] + step;
            let gp = self.grad(&xp);
            xp[j] = x[j] - step;
            let gm = self.grad(&xp);
            xp[j] = x[j];
            for i in 0..self.dim {
                h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
            }
        }
        // symmetrize, the cross differences never agree exactly
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                let s = 0.5 * (h[(i, j)] + h[(j, i)]);
                h[(i, j)] = s;
                h[(j, i)] = s;
            }
        }
        h
    }
}

/// Built-in potential catalog, addressed by name plus parameter list.
pub fn builtin(name: &str, params: &[f64]) -> Result<ScalarField, PotentialError> {
    let wrong_arity = |expected: usize| PotentialError::BadBuiltin {
        name: name.to_string(),
        reason: format!("expected {expected} parameter(s), got {}", params.len()),
    };
    match name {
        "quadratic" => {
            if !params.is_empty() {
                return Err(wrong_arity(0));
            }
            Ok(ScalarField::new_analytic(
                1,
                |x| 0.5 * x[0] * x[0],
                |x| vec![x[0]],
                |_| DMatrix::from_element(1, 1, 1.0),
                "all derivatives of order >= 2 bounded",
            ))
        }
        "quartic_double_well" => {
            if params.len() != 1 {
                return Err(wrong_arity(1));
            }
            let a2 = params[0] * params[0];
            Ok(ScalarField::new_analytic(
                1,
                move |x| {
                    let u = x[0] * x[0] - a2;
                    0.25 * u * u
                },
                move |x| vec![x[0] * (x[0] * x[0] - a2)],
                move |x| DMatrix::from_element(1, 1, 3.0 * x[0] * x[0] - a2),
                "second derivative unbounded at infinity; use on a compact box",
            ))
        }
        "paper_sec6_V1" => {
            if !params.is_empty() {
                return Err(wrong_arity(0));
            }
            Ok(ScalarField::new_analytic(
                1,
                |x| 0.5 * x[0] * x[0] + sec6_sqrt(x[0]),
                |x| vec![x[0] + sec6_sqrt_d1(x[0])],
                |x| DMatrix::from_element(1, 1, 1.0 + sec6_sqrt_d2(x[0])),
                "all derivatives of order >= 2 bounded",
            ))
        }
        "paper_sec6_V2" => {
            if !params.is_empty() {
                return Err(wrong_arity(0));
            }
            Ok(ScalarField::new_analytic(
                1,
                |x| 5.0 * x[0] * x[0],
                |x| vec![10.0 * x[0]],
                |_| DMatrix::from_element(1, 1, 10.0),
                "all derivatives of order >= 2 bounded",
            ))
        }
        "paper_sec6_Vc" => {
            if !params.is_empty() {
                return Err(wrong_arity(0));
            }
            Ok(ScalarField::new_analytic(
                1,
                |x| 0.1 * x[0].cos(),
                |x| vec![-0.1 * x[0].sin()],
                |x| DMatrix::from_element(1, 1, -0.1 * x[0].cos()),
                "all derivatives bounded",
            ))
        }
        // V1(x) - x^2/2: the effective double-well potential of the chain.
        "paper_sec6_effective" => {
            if !params.is_empty() {
                return Err(wrong_arity(0));
            }
            Ok(ScalarField::new_analytic(
                1,
                |x| sec6_sqrt(x[0]),
                |x| vec![sec6_sqrt_d1(x[0])],
                |x| DMatrix::from_element(1, 1, sec6_sqrt_d2(x[0])),
                "all derivatives of order >= 2 bounded",
            ))
        }
        "polynomial" => {
            if params.is_empty() {
                return Err(PotentialError::BadBuiltin {
                    name: name.to_string(),
                    reason: "polynomial needs at least one coefficient".into(),
                });
            }
            let c: Vec<f64> = params.to_vec();
            let c1: Vec<f64> = c
                .iter()
                .enumerate()
                .skip(1)
                .map(|(i, &ci)| i as f64 * ci)
                .collect();
            let c2: Vec<f64> = c1
                .iter()
                .enumerate()
                .skip(1)
                .map(|(i, &ci)| i as f64 * ci)
                .collect();
            let horner = |c: &[f64], x: f64| c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci);
            let (ca, cb, cc) = (c.clone(), c1.clone(), c2.clone());
            Ok(ScalarField::new_analytic(
                1,
                move |x| horner(&ca, x[0]),
                move |x| vec![horner(&cb, x[0])],
                move |x| DMatrix::from_element(1, 1, horner(&cc, x[0])),
                "derivative bounds depend on the degree; use on a compact box",
            ))
        }
        other => Err(PotentialError::BadBuiltin {
            name: other.to_string(),
            reason: "unknown potential name".into(),
        }),
    }
}

// 5 sqrt((x^2-1)^2 + 1) and its first two derivatives.
fn sec6_sqrt(x: f64) -> f64 {
    let u = x * x - 1.0;
    5.0 * (u * u + 1.0).sqrt()
}

fn sec6_sqrt_d1(x: f64) -> f64 {
    let u = x * x - 1.0;
    let g = (u * u + 1.0).sqrt();
    10.0 * x * u / g
}

fn sec6_sqrt_d2(x: f64) -> f64 {
    let u = x * x - 1.0;
    let g2 = u * u + 1.0;
    let g = g2.sqrt();
    10.0 * ((u + 2.0 * x * x) - 2.0 * x * x * u * u / g2) / g
}

#[derive(Debug, Clone, Serialize)]
pub struct CriticalPoint {
    pub location: Vec<f64>,
    pub value: f64,
    /// Morse index: number of negative Hessian eigenvalues.
    pub index: usize,
    pub hess_eigs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CriticalSearch {
    pub points: Vec<CriticalPoint>,
    /// Seeds whose Newton iteration did not converge (non-fatal).
    pub seed_failures: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Topology {
    DoubleWell,
    WellAndSea,
    SingleWell,
    Unsupported,
}

#[derive(Debug, Clone, Serialize)]
pub struct CriticalPointReport {
    pub points: Vec<CriticalPoint>,
    /// `(index into points of the well, S_j = phi(saddle) - phi(well))`.
    pub barriers: Vec<(usize, f64)>,
    pub is_double_well: bool,
    pub is_well_and_sea: bool,
    pub topology: Topology,
}

impl CriticalPointReport {
    pub fn min_barrier(&self) -> Option<f64> {
        self.barriers
            .iter()
            .map(|&(_, s)| s)
            .min_by(|a, b| a.total_cmp(b))
    }

    pub fn saddle(&self) -> Option<&CriticalPoint> {
        self.points.iter().find(|p| p.index == 1)
    }

    pub fn wells(&self) -> Vec<&CriticalPoint> {
        self.points.iter().filter(|p| p.index == 0).collect()
    }
}

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("unknown or malformed builtin potential `{name}`: {reason}")]
    BadBuiltin { name: String, reason: String },
    #[error("no critical point found from any seed")]
    NoCriticalPoints,
    #[error("non-Morse critical point at {location:?}: |hess eigenvalue| = {eig:.3e} < {tol:.3e}")]
    NonMorse {
        location: Vec<f64>,
        eig: f64,
        tol: f64,
    },
    #[error("no grid node lies below level {level}")]
    EmptySublevel { level: f64 },
    #[error("sublevel components at the two cutoff levels disagree about the well: {0}")]
    BadTopology(String),
    #[error("dimension mismatch: field has dim {field}, expected {expected}")]
    DimensionMismatch { field: usize, expected: usize },
}

/// Damped-Newton search for the critical points of `field` inside `bounds`.
///
/// Seeds form a uniform lattice of `seeds_per_axis^dim` cell centers.
/// Converged points are deduplicated with merge radius `10 * newton_tol`,
/// Morse-classified and sorted by field value.
pub fn find_critical_points(
    field: &ScalarField,
    bounds: &[(f64, f64)],
    seeds_per_axis: usize,
    newton_tol: f64,
    morse_tol: f64,
) -> Result<CriticalSearch, PotentialError> {
    if bounds.len() != field.dim() {
        return Err(PotentialError::DimensionMismatch {
            field: field.dim(),
            expected: bounds.len(),
        });
    }
    let dim = field.dim();
    let n_seeds = seeds_per_axis.pow(dim as u32);
    let mut accepted: Vec<Vec<f64>> = Vec::new();
    let mut seed_failures = 0usize;

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

        match newton_from_seed(field, &seed, bounds, newton_tol) {
            Some(x) => {
                let dup = accepted.iter().any(|p| {
                    p.iter()
                        .zip(&x)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                        <= 10.0 * newton_tol
                });
                if !dup {
                    accepted.push(x);
                }
            }
            None => seed_failures += 1,
        }
    }

    if accepted.is_empty() {
        return Err(PotentialError::NoCriticalPoints);
    }

    let mut points = Vec::with_capacity(accepted.len());
    for x in accepted {
        let h = field.hess(&x);
        let sym = 0.5 * (&h + h.transpose());
        let eigs = sym.symmetric_eigen().eigenvalues;
        let mut hess_eigs: Vec<f64> = eigs.iter().copied().collect();
        hess_eigs.sort_by(|a, b| a.total_cmp(b));
        let min_abs = hess_eigs.iter().map(|e| e.abs()).fold(f64::MAX, f64::min);
        if min_abs < morse_tol {
            return Err(PotentialError::NonMorse {
                location: x,
                eig: min_abs,
                tol: morse_tol,
            });
        }
        let index = hess_eigs.iter().filter(|&&e| e < 0.0).count();
        points.push(CriticalPoint {
            value: field.eval(&x),
            location: x,
            index,
            hess_eigs,
        });
    }
    points.sort_by(|a, b| {
        a.value
            .total_cmp(&b.value)
            .then_with(|| a.location[0].total_cmp(&b.location[0]))
    });
    Ok(CriticalSearch {
        points,
        seed_failures,
    })
}

fn newton_from_seed(
    field: &ScalarField,
    seed: &[f64],
    bounds: &[(f64, f64)],
    tol: f64,
) -> Option<Vec<f64>> {
    let mut x = seed.to_vec();
    let mut g = field.grad(&x);
    let mut gn = vecops::norm(&g);
    for _ in 0..100 {
        if gn <= tol {
            // reject points that wandered out of the box
            let inside = x
                .iter()
                .zip(bounds)
                .all(|(&xi, &(lo, hi))| xi >= lo && xi <= hi);
            return inside.then_some(x);
        }
        let h = field.hess(&x);
        let delta = h.lu().solve(&-DVector::from_column_slice(&g))?;
        // step halving until |grad| decreases
        let mut s = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let xt: Vec<f64> = x.iter().zip(delta.iter()).map(|(xi, d)| xi + s * d).collect();
            let gt = field.grad(&xt);
            let gtn = vecops::norm(&gt);
            if gtn < gn {
                x = xt;
                g = gt;
                gn = gtn;
                improved = true;
                break;
            }
            s *= 0.5;
        }
        if !improved {
            return None;
        }
        let diverged = x.iter().zip(bounds).any(|(&xi, &(lo, hi))| {
            let margin = 0.5 * (hi - lo);
            xi < lo - margin || xi > hi + margin
        });
        if diverged {
            return None;
        }
    }
    None
}

/// Barrier heights and well topology per the double-well / well-and-sea
/// hypotheses. Barriers are computed only when exactly one index-1 point
/// exists; unsupported topologies yield a report with both flags false.
pub fn barrier_report(points: &[CriticalPoint]) -> CriticalPointReport {
    let saddles: Vec<&CriticalPoint> = points.iter().filter(|p| p.index == 1).collect();
    let n_minima = points.iter().filter(|p| p.index == 0).count();

    let mut barriers = Vec::new();
    if saddles.len() == 1 && (1..=2).contains(&n_minima) {
        let s = saddles[0].value;
        for (i, p) in points.iter().enumerate() {
            if p.index == 0 && p.value < s {
                barriers.push((i, s - p.value));
            }
        }
    }
    let is_double_well = points.len() == 3 && saddles.len() == 1 && n_minima == 2;
    let is_well_and_sea = points.len() == 2 && saddles.len() == 1 && n_minima == 1;
    let topology = if is_double_well {
        Topology::DoubleWell
    } else if is_well_and_sea {
        Topology::WellAndSea
    } else if points.len() == 1 && n_minima == 1 {
        Topology::SingleWell
    } else {
        Topology::Unsupported
    };
    CriticalPointReport {
        points: points.to_vec(),
        barriers,
        is_double_well,
        is_well_and_sea,
        topology,
    }
}

/// Flood-fill labeling of the interior grid nodes with `field < level` into
/// face-connected components, sorted by component minimum.
#[derive(Debug, Clone)]
pub struct SublevelLabels {
    /// One entry per interior node; `None` above the level.
    pub labels: Vec<Option<u32>>,
    pub n_components: usize,
    pub component_min: Vec<f64>,
}

impl SublevelLabels {
    pub fn component_containing(&self, grid: &Grid, x: &[f64]) -> Option<u32> {
        self.labels[grid.nearest_interior_node(x)?]
    }
}

pub fn sublevel_components(
    field: &ScalarField,
    level: f64,
    grid: &Grid,
) -> Result<SublevelLabels, PotentialError> {
    if grid.dim() != field.dim() {
        return Err(PotentialError::DimensionMismatch {
            field: field.dim(),
            expected: grid.dim(),
        });
    }
    let values = grid.sample_interior(|x| field.eval(x));
    let below: Vec<bool> = values.iter().map(|&v| v < level).collect();
    if !below.iter().any(|&b| b) {
        return Err(PotentialError::EmptySublevel { level });
    }

    let shape = grid.interior_shape();
    let strides = grid.interior_strides();
    let dim = grid.dim();
    let mut labels: Vec<Option<u32>> = vec![None; values.len()];
    let mut raw_min: Vec<f64> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    let mut multi = vec![0usize; dim];

    for start in 0..values.len() {
        if !below[start] || labels[start].is_some() {
            continue;
        }
        let label = raw_min.len() as u32;
        let mut comp_min = f64::MAX;
        stack.push(start);
        labels[start] = Some(label);
        while let Some(node) = stack.pop() {
            comp_min = comp_min.min(values[node]);
            grid.interior_multi(node, &mut multi);
            for ax in 0..dim {
                if multi[ax] > 0 {
                    let nb = node - strides[ax];
                    if below[nb] && labels[nb].is_none() {
                        labels[nb] = Some(label);
                        stack.push(nb);
                    }
                }
                if multi[ax] + 1 < shape[ax] {
                    let nb = node + strides[ax];
                    if below[nb] && labels[nb].is_none() {
                        labels[nb] = Some(label);
                        stack.push(nb);
                    }
                }
            }
        }
        raw_min.push(comp_min);
    }

    // relabel so that component 0 has the smallest minimum
    let mut order: Vec<usize> = (0..raw_min.len()).collect();
    order.sort_by(|&a, &b| raw_min[a].total_cmp(&raw_min[b]));
    let mut remap = vec![0u32; raw_min.len()];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new as u32;
    }
    for l in labels.iter_mut().flatten() {
        *l = remap[*l as usize];
    }
    let mut component_min = vec![0.0; raw_min.len()];
    for (old, &m) in raw_min.iter().enumerate() {
        component_min[remap[old] as usize] = m;
    }
    Ok(SublevelLabels {
        labels,
        n_components: component_min.len(),
        component_min,
    })
}

fn quintic_smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 + s * (-15.0 + 6.0 * s))
}

/// Fraction of `epsilon0` by which the cutoff stays below the saddle level.
/// At the saddle level itself the sublevel set is pinched, and a grid without
/// a node exactly on the saddle connects the two components through the
/// pinch; backing off keeps the discrete components honest and the cutoff
/// compactly supported inside its component.
const CUTOFF_MARGIN: f64 = 0.1;

/// Well quasimode: the sampled `exp(-(phi - phi(well))/h)` times a smooth
/// cutoff supported in the well's sublevel component just below
/// `saddle_level`, equal to 1 inside the component at
/// `saddle_level - epsilon0`. Unit discrete l2 norm.
pub fn quasimode(
    field: &ScalarField,
    well: &CriticalPoint,
    saddle_level: f64,
    h: f64,
    epsilon0: f64,
    grid: &Grid,
) -> Result<Vec<f64>, PotentialError> {
    assert!(well.index == 0, "quasimode wants an index-0 critical point");
    assert!(epsilon0 > 0.0 && h > 0.0);
    let hi_level = saddle_level - CUTOFF_MARGIN * epsilon0;
    let hi = sublevel_components(field, hi_level, grid)?;
    let lo = sublevel_components(field, saddle_level - epsilon0, grid)?;

    let comp_hi = hi
        .component_containing(grid, &well.location)
        .ok_or_else(|| PotentialError::BadTopology("well outside upper sublevel set".into()))?;
    let comp_lo = lo
        .component_containing(grid, &well.location)
        .ok_or_else(|| PotentialError::BadTopology("well outside lower sublevel set".into()))?;
    // every node of the lower component must sit in the well's upper component
    for (i, &l) in lo.labels.iter().enumerate() {
        if l == Some(comp_lo) && hi.labels[i] != Some(comp_hi) {
            return Err(PotentialError::BadTopology(
                "lower component leaks out of the upper component".into(),
            ));
        }
    }

    let values = grid.sample_interior(|x| field.eval(x));
    let mut v = vec![0.0; values.len()];
    let ramp = (1.0 - CUTOFF_MARGIN) * epsilon0;
    for i in 0..values.len() {
        if hi.labels[i] != Some(comp_hi) {
            continue;
        }
        let chi = if lo.labels[i] == Some(comp_lo) {
            1.0
        } else {
            quintic_smoothstep((hi_level - values[i]) / ramp)
        };
        if chi > 0.0 {
            v[i] = chi * (-(values[i] - well.value) / h).exp();
        }
    }
    let n = vecops::norm(&v);
    if n == 0.0 {
        return Err(PotentialError::BadTopology(
            "quasimode vanished on the grid".into(),
        ));
    }
    vecops::scale_in_place(&mut v, 1.0 / n);
    Ok(v)
}
