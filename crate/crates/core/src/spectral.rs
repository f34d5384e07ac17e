//! Low-lying spectrum of a discretized operator near zero.
//!
//! Eigenvalues of smallest modulus come from shift-invert Arnoldi at shift 0
//! (regularized to 1e-12 when the factorization is unusable), with one sparse
//! LU shared between the direct and the transposed system, so left
//! eigenvectors cost no second factorization. Ritz values are extracted from
//! the real Hessenberg matrix through its real Schur form, which keeps simple
//! real eigenvalues exactly real and complex ones in exact conjugate pairs.
//!
//! The quadratic-model eigenvalue ladder at a critical point `x_c`,
//!
//! ```text
//! mu_k = sum_l (2 nu_l + 1) r_l - tr(B phi''(x_c)),   nu in N^n,
//! ```
//!
//! is computed from the real `2n x 2n` matrix `[[C H, B], [H B H, H C]]`
//! (`H = phi''(x_c)`), whose eigenvalues `r_l` with positive real part are
//! `1/(2i)` times the Hamilton-map eigenvalues of the quadratic symbol with
//! positive imaginary part. The subtracted trace is the subprincipal symbol
//! of the operator, which the quantization of the principal symbol alone
//! would miss.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::disc::{discretize, DiscError, SparseOperator};
use crate::fit::{linear_fit, LinearFit};
use crate::grid::{Grid, GridError};
use crate::potential::{
    barrier_report, find_critical_points, PotentialError, ScalarField, Topology,
};
use crate::sparse::LuFactors;
use crate::susy::{assemble_kfp, assemble_witten, SusyError, SusySpec};
use crate::vecops;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("factorization failure: {0}")]
    FactorizationFailure(String),
    #[error("Arnoldi did not converge after {cycles} restart cycles (worst residual {worst:.3e})")]
    NoConvergence { cycles: usize, worst: f64 },
    #[error("Schur/eigenvalue extraction failed on the projected matrix")]
    SchurFailed,
    #[error("cannot certify the count: largest computed |lambda| = {largest:.3e} < 2 x radius {radius:.3e}")]
    InsufficientK { largest: f64, radius: f64 },
    #[error("relative gap {gap:.3e} between selected and remaining eigenvalues below 1e-6")]
    GapTooSmall { gap: f64 },
    #[error("left eigenvectors were not computed for this result")]
    MissingLeftVectors,
    #[error("sweep needs at least 4 h-values, got {0}")]
    InsufficientSamples(usize),
    #[error("potential topology unsupported for a splitting sweep: {0}")]
    UnsupportedTopology(String),
    #[error("computed mu_1 = {0:.6e} is not positive; refine the discretization")]
    NonPositiveMu1(f64),
    #[error("computed mu_1 = {0} has a non-negligible imaginary part")]
    ComplexMu1(Complex64),
    #[error("quadratic model is degenerate: {got} eigenvalues with positive real part, expected {expected}")]
    ModelDegenerate { got: usize, expected: usize },
    #[error(transparent)]
    Disc(#[from] DiscError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Susy(#[from] SusyError),
}

#[derive(Debug, Clone, Copy)]
pub struct EigsOptions {
    pub k: usize,
    /// Residual tolerance relative to the matrix infinity norm.
    pub tol: f64,
    pub max_restarts: usize,
    /// Seed for the Krylov start vector.
    pub seed: u64,
    pub compute_left: bool,
}

impl Default for EigsOptions {
    fn default() -> Self {
        EigsOptions {
            k: 4,
            tol: 1e-12,
            max_restarts: 8,
            seed: 42,
            compute_left: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpectralResult {
    /// Sorted by modulus, complex-conjugate pairs kept together.
    pub eigenvalues: Vec<Complex64>,
    /// Unit-norm right eigenvectors, one per eigenvalue.
    pub right_vectors: Vec<Vec<Complex64>>,
    /// Unit-norm left eigenvectors (eigenvectors of the transpose).
    pub left_vectors: Option<Vec<Vec<Complex64>>>,
    /// `|P v - lambda v|` per right pair.
    pub residuals: Vec<f64>,
    pub h: f64,
    /// Modulus of the largest computed eigenvalue; the region in which the
    /// result can certify eigenvalue counts.
    pub disc_radius_used: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DiscCount {
    pub count: usize,
    /// Distance from the disc boundary to the nearest computed eigenvalue
    /// outside it.
    pub gap_margin: f64,
}

pub struct SpectralProjection {
    pub rank: usize,
    pub right_basis: Vec<Vec<Complex64>>,
    /// Rescaled so that `(left_i | right_i) = 1`.
    pub left_basis: Vec<Vec<Complex64>>,
    pub operator_norm_estimate: f64,
}

// ---------------------------------------------------------------------------
// complex vector helpers

fn c_dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn c_norm(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

fn real_to_complex(v: &[f64]) -> Vec<Complex64> {
    v.iter().map(|&x| Complex64::new(x, 0.0)).collect()
}

impl SpectralProjection {
    pub fn apply(&self, u: &[Complex64]) -> Vec<Complex64> {
        let n = u.len();
        let mut out = vec![Complex64::new(0.0, 0.0); n];
        for (v, w) in self.right_basis.iter().zip(&self.left_basis) {
            let c = c_dot(w, u);
            for i in 0..n {
                out[i] += c * v[i];
            }
        }
        out
    }

    pub fn apply_real(&self, u: &[f64]) -> Vec<Complex64> {
        self.apply(&real_to_complex(u))
    }
}

// ---------------------------------------------------------------------------
// Arnoldi

struct ArnoldiOutcome {
    eigenvalues: Vec<Complex64>,
    vectors: Vec<Vec<Complex64>>,
    residuals: Vec<f64>,
}

/// Shift-invert Arnoldi in real arithmetic. `solve` applies `(A - sigma)^-1`
/// (or its transpose); `matvec` applies `A` (or its transpose) for residuals.
///
/// Near-kernel directions make `|A^-1|` so large that their scale would
/// wreck every other Ritz value extracted from the same Hessenberg matrix
/// (the backward error of the small eigenvalue problem is absolute). They
/// are therefore locked first by inverse iteration and deflated from the
/// Krylov basis.
fn shift_invert_arnoldi(
    solve: &dyn Fn(&[f64]) -> Vec<f64>,
    matvec: &dyn Fn(&[f64]) -> Vec<f64>,
    n: usize,
    sigma: f64,
    opts: &EigsOptions,
    scale: f64,
) -> Result<ArnoldiOutcome, SpectralError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let tol_abs = opts.tol * scale.max(1.0);

    // lock explosive directions (amplification beyond 1e10 per solve)
    let mut locked: Vec<Vec<f64>> = Vec::new();
    let mut locked_pairs: Vec<(Complex64, Vec<Complex64>, f64)> = Vec::new();
    for _ in 0..opts.k.min(2) {
        let mut probe: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        orthogonalize_against(&mut probe, &locked);
        let pn = vecops::norm(&probe);
        if pn == 0.0 {
            break;
        }
        vecops::scale_in_place(&mut probe, 1.0 / pn);
        let mut z = solve(&probe);
        orthogonalize_against(&mut z, &locked);
        let amp = vecops::norm(&z);
        if !(amp > 1e10) || !amp.is_finite() {
            break;
        }
        // settle by one more iteration
        vecops::scale_in_place(&mut z, 1.0 / amp);
        let mut z2 = solve(&z);
        orthogonalize_against(&mut z2, &locked);
        let n2 = vecops::norm(&z2);
        let v = if n2.is_finite() && n2 > 0.0 {
            vecops::scale_in_place(&mut z2, 1.0 / n2);
            z2
        } else {
            z
        };
        let av = matvec(&v);
        let lambda = vecops::dot(&v, &av);
        let mut r2 = 0.0;
        for j in 0..n {
            let d = av[j] - lambda * v[j];
            r2 += d * d;
        }
        locked_pairs.push((
            Complex64::new(lambda, 0.0),
            real_to_complex(&v),
            r2.sqrt(),
        ));
        locked.push(v);
    }

    let k_arnoldi = opts.k.saturating_sub(locked.len());
    if k_arnoldi == 0 {
        let (eigenvalues, vectors, residuals) = split_pairs(locked_pairs);
        return Ok(ArnoldiOutcome {
            eigenvalues,
            vectors,
            residuals,
        });
    }

    let mut start: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut m = (4 * opts.k + 20).min(n - locked.len());
    let mut worst = f64::MAX;

    for _cycle in 0..opts.max_restarts.max(1) {
        let nrm = vecops::norm(&start);
        if nrm == 0.0 {
            start = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        }
        let (basis, hess, steps) = arnoldi_iterate(solve, &start, m, &locked);
        let hm = hess.view((0, 0), (steps, steps)).clone_owned();
        let thetas = hm.complex_eigenvalues();

        // order Ritz values of (A - sigma)^-1 by descending modulus and keep
        // k of them, never splitting a conjugate pair
        let mut order: Vec<usize> = (0..steps).collect();
        order.sort_by(|&a, &b| thetas[b].norm().total_cmp(&thetas[a].norm()));
        let mut keep: Vec<usize> = Vec::new();
        for &i in &order {
            if keep.len() >= k_arnoldi {
                let continues_pair = thetas[i].im != 0.0
                    && keep.last().is_some_and(|&l| thetas[l] == thetas[i].conj());
                if !continues_pair {
                    break;
                }
            }
            keep.push(i);
        }

        let mut eigenvalues = Vec::new();
        let mut vectors = Vec::new();
        let mut residuals = Vec::new();
        let mut unconverged: Vec<Vec<Complex64>> = Vec::new();
        let mut done: Vec<Complex64> = Vec::new();
        worst = 0.0;

        for &i in &keep {
            let theta = thetas[i];
            if theta.norm() == 0.0 || done.iter().any(|&t| t == theta) {
                continue;
            }
            let y = hessenberg_eigvec(&hm, theta, opts.seed ^ 0x9e37)?;
            let conj_mate = if theta.im != 0.0 {
                let yc: Vec<Complex64> = y.iter().map(|z| z.conj()).collect();
                Some((theta.conj(), yc))
            } else {
                None
            };
            done.push(theta);
            if let Some((tc, _)) = &conj_mate {
                done.push(*tc);
            }
            for (th, yv) in std::iter::once((theta, y)).chain(conj_mate) {
                let lambda = Complex64::new(sigma, 0.0) + 1.0 / th;
                // Ritz vector x = V y
                let mut x = vec![Complex64::new(0.0, 0.0); n];
                for (j, col) in basis.iter().take(steps).enumerate() {
                    let c = yv[j];
                    for (xi, &bi) in x.iter_mut().zip(col) {
                        *xi += c * bi;
                    }
                }
                let nx = c_norm(&x);
                for xi in &mut x {
                    *xi /= nx;
                }
                // residual |A x - lambda x|
                let re: Vec<f64> = x.iter().map(|z| z.re).collect();
                let im: Vec<f64> = x.iter().map(|z| z.im).collect();
                let are = matvec(&re);
                let aim = matvec(&im);
                let mut r2 = 0.0;
                for j in 0..n {
                    let ax = Complex64::new(are[j], aim[j]);
                    r2 += (ax - lambda * x[j]).norm_sqr();
                }
                let res = r2.sqrt();
                worst = worst.max(res);
                if res > tol_abs {
                    unconverged.push(x.clone());
                }
                eigenvalues.push(lambda);
                vectors.push(x);
                residuals.push(res);
            }
        }

        let k_eff = k_arnoldi.min(n - locked.len());
        if unconverged.is_empty() && eigenvalues.len() >= k_eff {
            let (mut ev, mut vs, mut rs) = split_pairs(locked_pairs);
            ev.extend(eigenvalues);
            vs.extend(vectors);
            rs.extend(residuals);
            return Ok(ArnoldiOutcome {
                eigenvalues: ev,
                vectors: vs,
                residuals: rs,
            });
        }
        // restart spanning all current targets plus a random kick, weighted
        // toward the unconverged directions
        let mut s: Vec<f64> = (0..n).map(|_| 0.01 * rng.random_range(-1.0..1.0)).collect();
        for x in &vectors {
            for (si, z) in s.iter_mut().zip(x) {
                *si += z.re + 0.1 * z.im;
            }
        }
        for x in &unconverged {
            for (si, z) in s.iter_mut().zip(x) {
                *si += 10.0 * (z.re + 0.1 * z.im);
            }
        }
        if !s.iter().all(|v| v.is_finite()) || vecops::norm(&s) < 1e-300 {
            s = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        }
        start = s;
        m = (m + 2 * opts.k + 8).min(n);
    }
    Err(SpectralError::NoConvergence {
        cycles: opts.max_restarts,
        worst,
    })
}

fn orthogonalize_against(w: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let c = vecops::dot(b, w);
            vecops::axpy(w, -c, b);
        }
        if basis.is_empty() {
            break;
        }
    }
}

fn split_pairs(
    pairs: Vec<(Complex64, Vec<Complex64>, f64)>,
) -> (Vec<Complex64>, Vec<Vec<Complex64>>, Vec<f64>) {
    let mut ev = Vec::with_capacity(pairs.len());
    let mut vs = Vec::with_capacity(pairs.len());
    let mut rs = Vec::with_capacity(pairs.len());
    for (e, v, r) in pairs {
        ev.push(e);
        vs.push(v);
        rs.push(r);
    }
    (ev, vs, rs)
}

/// Arnoldi with modified Gram-Schmidt and one reorthogonalization pass,
/// deflating the `locked` directions. Returns the orthonormal basis, the
/// (m+1) x m Hessenberg matrix and the number of completed steps (early exit
/// on lucky breakdown).
fn arnoldi_iterate(
    solve: &dyn Fn(&[f64]) -> Vec<f64>,
    start: &[f64],
    m: usize,
    locked: &[Vec<f64>],
) -> (Vec<Vec<f64>>, DMatrix<f64>, usize) {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    let mut v0 = start.to_vec();
    orthogonalize_against(&mut v0, locked);
    let nrm = vecops::norm(&v0);
    vecops::scale_in_place(&mut v0, 1.0 / nrm);
    basis.push(v0);
    let mut hess = DMatrix::<f64>::zeros(m + 1, m);
    let mut steps = m;

    for j in 0..m {
        let mut w = solve(&basis[j]);
        orthogonalize_against(&mut w, locked);
        let wscale = vecops::norm(&w).max(1e-300);
        for pass in 0..2 {
            for (i, b) in basis.iter().enumerate() {
                let c = vecops::dot(b, &w);
                if pass == 0 {
                    hess[(i, j)] = c;
                } else {
                    hess[(i, j)] += c;
                }
                vecops::axpy(&mut w, -c, b);
            }
        }
        let beta = vecops::norm(&w);
        hess[(j + 1, j)] = beta;
        if !beta.is_finite() {
            steps = j;
            break;
        }
        if beta <= 1e-13 * wscale {
            steps = j + 1;
            break;
        }
        vecops::scale_in_place(&mut w, 1.0 / beta);
        basis.push(w);
    }
    (basis, hess, steps)
}

/// Eigenvector of an upper Hessenberg matrix by complex inverse iteration at
/// a slightly perturbed Ritz value.
fn hessenberg_eigvec(
    h: &DMatrix<f64>,
    theta: Complex64,
    seed: u64,
) -> Result<Vec<Complex64>, SpectralError> {
    let m = h.nrows();
    // the shift must miss the Ritz value by a sliver; widen it if the
    // factorization comes out exactly singular
    for pert_scale in [1e-13, 1e-10, 1e-7] {
        let pert = pert_scale * (1.0 + theta.norm());
        let shifted = DMatrix::from_fn(m, m, |i, j| {
            let mut z = Complex64::new(h[(i, j)], 0.0);
            if i == j {
                z -= theta + Complex64::new(pert, pert);
            }
            z
        });
        let lu = shifted.lu();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = nalgebra::DVector::from_fn(m, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        y /= Complex64::new(y.norm(), 0.0);
        let mut ok = true;
        for _ in 0..3 {
            let Some(solved) = lu.solve(&y) else {
                ok = false;
                break;
            };
            let nrm = solved.norm();
            if !nrm.is_finite() || nrm == 0.0 {
                ok = false;
                break;
            }
            y = solved / Complex64::new(nrm, 0.0);
        }
        if ok {
            return Ok(y.iter().copied().collect());
        }
    }
    Err(SpectralError::SchurFailed)
}

// ---------------------------------------------------------------------------
// public entry points

/// Eigenvalues of smallest modulus with right (and optionally left)
/// eigenvectors.
pub fn eigs_near_zero(
    op: &SparseOperator,
    opts: &EigsOptions,
) -> Result<SpectralResult, SpectralError> {
    let n = op.dim();
    let scale = op.matrix.norm_inf();
    let mut lu = op
        .matrix
        .factor_shifted(0.0)
        .map_err(|e| SpectralError::FactorizationFailure(e.to_string()))?;
    if !lu_usable(&lu) {
        lu = op
            .matrix
            .factor_shifted(1e-12)
            .map_err(|e| SpectralError::FactorizationFailure(e.to_string()))?;
        if !lu_usable(&lu) {
            return Err(SpectralError::FactorizationFailure(
                "singular beyond the 1e-12 regularization".into(),
            ));
        }
    }
    let sigma = lu.shift();

    let solve = |v: &[f64]| lu.solve(v);
    let matvec = |v: &[f64]| op.matrix.matvec(v).expect("dimension checked");
    let right = shift_invert_arnoldi(&solve, &matvec, n, sigma, opts, scale)?;

    let mut result = SpectralResult {
        eigenvalues: right.eigenvalues,
        right_vectors: right.vectors,
        left_vectors: None,
        residuals: right.residuals,
        h: op.h,
        disc_radius_used: 0.0,
    };

    if opts.compute_left {
        let solve_t = |v: &[f64]| lu.solve_transpose(v);
        let matvec_t = |v: &[f64]| op.matrix.matvec_transpose(v).expect("dimension checked");
        let mut lopts = *opts;
        lopts.seed = opts.seed.wrapping_add(1);
        let left = shift_invert_arnoldi(&solve_t, &matvec_t, n, sigma, &lopts, scale)?;
        // pair left vectors to right eigenvalues greedily by distance
        let mut lefts: Vec<Option<Vec<Complex64>>> = vec![None; result.eigenvalues.len()];
        let mut used = vec![false; left.eigenvalues.len()];
        for (i, &lam) in result.eigenvalues.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (j, &mu) in left.eigenvalues.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let d = (lam - mu).norm();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
                lefts[i] = Some(left.vectors[j].clone());
            }
        }
        if lefts.iter().any(|l| l.is_none()) {
            return Err(SpectralError::NoConvergence {
                cycles: opts.max_restarts,
                worst: f64::NAN,
            });
        }
        result.left_vectors = Some(lefts.into_iter().map(Option::unwrap).collect());
    }

    // sort by modulus, conjugate pairs adjacent
    let mut order: Vec<usize> = (0..result.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        result.eigenvalues[a]
            .norm()
            .total_cmp(&result.eigenvalues[b].norm())
            .then(result.eigenvalues[a].im.total_cmp(&result.eigenvalues[b].im))
    });
    result.eigenvalues = order.iter().map(|&i| result.eigenvalues[i]).collect();
    result.right_vectors = order
        .iter()
        .map(|&i| result.right_vectors[i].clone())
        .collect();
    result.residuals = order.iter().map(|&i| result.residuals[i]).collect();
    if let Some(lv) = result.left_vectors.take() {
        result.left_vectors = Some(order.iter().map(|&i| lv[i].clone()).collect());
    }
    result.disc_radius_used = result.eigenvalues.last().map(|l| l.norm()).unwrap_or(0.0);
    Ok(result)
}

fn lu_usable(lu: &LuFactors) -> bool {
    let probe = vec![1.0; lu.dim()];
    let x = lu.solve(&probe);
    x.iter().all(|v| v.is_finite()) && vecops::norm(&x) < 1e100
}

/// Count of computed eigenvalues with `|lambda| < radius`, certified only
/// when the computed set reaches out to `2 x radius`.
pub fn count_in_disc(result: &SpectralResult, radius: f64) -> Result<DiscCount, SpectralError> {
    let largest = result.disc_radius_used;
    if largest < 2.0 * radius {
        return Err(SpectralError::InsufficientK { largest, radius });
    }
    let count = result
        .eigenvalues
        .iter()
        .filter(|l| l.norm() < radius)
        .count();
    let gap_margin = result
        .eigenvalues
        .iter()
        .map(|l| l.norm())
        .filter(|&m| m >= radius)
        .fold(f64::MAX, f64::min)
        - radius;
    Ok(DiscCount { count, gap_margin })
}

/// Spectral projection onto the eigenvalues selected by `indices`, with a
/// randomized power-iteration estimate of its operator norm.
pub fn projection(
    result: &SpectralResult,
    indices: &[usize],
) -> Result<SpectralProjection, SpectralError> {
    let lefts = result
        .left_vectors
        .as_ref()
        .ok_or(SpectralError::MissingLeftVectors)?;
    // relative gap between selected and unselected eigenvalues
    let mut gap = f64::MAX;
    for (j, lam) in result.eigenvalues.iter().enumerate() {
        if indices.contains(&j) {
            continue;
        }
        for &i in indices {
            let li = result.eigenvalues[i];
            let rel = (li - lam).norm() / li.norm().max(lam.norm()).max(1e-300);
            gap = gap.min(rel);
        }
    }
    if gap < 1e-6 {
        return Err(SpectralError::GapTooSmall { gap });
    }

    let mut right_basis = Vec::new();
    let mut left_basis = Vec::new();
    for &i in indices {
        let v = result.right_vectors[i].clone();
        let mut w = lefts[i].clone();
        let d = c_dot(&w, &v);
        if d.norm() < 1e-300 {
            return Err(SpectralError::GapTooSmall { gap: d.norm() });
        }
        let s = d.conj().inv();
        for wi in &mut w {
            *wi *= s;
        }
        right_basis.push(v);
        left_basis.push(w);
    }

    let proj = SpectralProjection {
        rank: indices.len(),
        right_basis,
        left_basis,
        operator_norm_estimate: 0.0,
    };
    let norm = projection_norm_estimate(&proj, result.right_vectors[0].len(), 0xA11CE);
    Ok(SpectralProjection {
        operator_norm_estimate: norm,
        ..proj
    })
}

/// Randomized power iteration on `Pi* Pi`.
fn projection_norm_estimate(proj: &SpectralProjection, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), 0.0))
        .collect();
    let adjoint = |u: &[Complex64]| -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); u.len()];
        for (v, w) in proj.right_basis.iter().zip(&proj.left_basis) {
            let c = c_dot(v, u);
            for i in 0..u.len() {
                out[i] += c * w[i];
            }
        }
        out
    };
    let mut est = 0.0;
    for _ in 0..60 {
        let pz = proj.apply(&z);
        let apz = adjoint(&pz);
        let nz = c_norm(&apz);
        if nz < 1e-300 {
            return 0.0;
        }
        let new_est = c_norm(&pz);
        for (zi, ai) in z.iter_mut().zip(&apz) {
            *zi = ai / nz;
        }
        if (new_est - est).abs() <= 1e-10 * new_est.max(1.0) {
            est = new_est;
            break;
        }
        est = new_est;
    }
    est
}

/// Overlap of a (real, unit) quasimode with the selected eigenvectors.
#[derive(Debug, Clone, Serialize)]
pub struct OverlapReport {
    /// Largest single-eigenvector overlap `|<v_i, f>|`.
    pub best_overlap: f64,
    /// Index (into the result) attaining it.
    pub best_index: usize,
    /// Norm of the orthogonal projection of `f` onto the selected span.
    pub subspace_overlap: f64,
}

pub fn quasimode_overlap(result: &SpectralResult, indices: &[usize], f: &[f64]) -> OverlapReport {
    let fc = real_to_complex(f);
    let mut best = (0.0, indices[0]);
    for &i in indices {
        let o = c_dot(&result.right_vectors[i], &fc).norm();
        if o > best.0 {
            best = (o, i);
        }
    }
    // Gram-Schmidt on the selected vectors, then project
    let mut basis: Vec<Vec<Complex64>> = Vec::new();
    for &i in indices {
        let mut v = result.right_vectors[i].clone();
        for q in &basis {
            let c = c_dot(q, &v);
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= c * qi;
            }
        }
        let nv = c_norm(&v);
        if nv > 1e-12 {
            for vi in &mut v {
                *vi /= nv;
            }
            basis.push(v);
        }
    }
    let sub: f64 = basis
        .iter()
        .map(|q| c_dot(q, &fc).norm_sqr())
        .sum::<f64>()
        .sqrt();
    OverlapReport {
        best_overlap: best.0,
        best_index: best.1,
        subspace_overlap: sub,
    }
}

// ---------------------------------------------------------------------------
// quadratic model at a critical point

pub mod hamilton {
    use super::*;

    /// Real matrix `[[C H, B], [H B H, H C]]` whose eigenvalues are
    /// `1/(2i)` times the Hamilton-map eigenvalues of the quadratic symbol at
    /// the critical point `x_c`.
    pub fn reduced_hamilton_matrix(spec: &SusySpec, x_c: &[f64]) -> DMatrix<f64> {
        let n = spec.dim;
        let b = spec.matrix.b();
        let c = spec.matrix.c();
        let h = spec.phase.hess(x_c);
        let ch = c * &h;
        let hbh = &h * b * &h;
        let hc = &h * c;
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&ch);
        m.view_mut((0, n), (n, n)).copy_from(b);
        m.view_mut((n, 0), (n, n)).copy_from(&hbh);
        m.view_mut((n, n), (n, n)).copy_from(&hc);
        m
    }

    /// The `n` eigenvalues `r_l` with positive real part.
    pub fn stable_rates(spec: &SusySpec, x_c: &[f64]) -> Result<Vec<Complex64>, SpectralError> {
        let m = reduced_hamilton_matrix(spec, x_c);
        let eigs = m.complex_eigenvalues();
        let mut rates: Vec<Complex64> = eigs.iter().copied().filter(|e| e.re > 1e-12).collect();
        if rates.len() != spec.dim {
            return Err(SpectralError::ModelDegenerate {
                got: rates.len(),
                expected: spec.dim,
            });
        }
        rates.sort_by(|a, b| a.im.total_cmp(&b.im).then(a.re.total_cmp(&b.re)));
        Ok(rates)
    }

    /// Ladder `sum_l (2 nu_l + 1) r_l - tr(B phi''(x_c))` restricted to
    /// `|mu| <= max_modulus`, sorted by modulus. These are the `mu` such
    /// that the operator's low-lying eigenvalues are `h mu + o(h)`.
    pub fn model_eigenvalues(
        spec: &SusySpec,
        x_c: &[f64],
        max_modulus: f64,
    ) -> Result<Vec<Complex64>, SpectralError> {
        let rates = stable_rates(spec, x_c)?;
        let hess = spec.phase.hess(x_c);
        let sub_trace: f64 = (spec.matrix.b() * hess).trace();
        let base: Complex64 = rates.iter().sum::<Complex64>() - sub_trace;
        let caps: Vec<usize> = rates
            .iter()
            .map(|r| ((max_modulus + base.norm()) / (2.0 * r.re)).ceil() as usize + 1)
            .collect();
        let mut out = Vec::new();
        let mut nu = vec![0usize; rates.len()];
        'outer: loop {
            let mu = base
                + nu.iter()
                    .zip(&rates)
                    .map(|(&k, r)| 2.0 * k as f64 * r)
                    .sum::<Complex64>();
            if mu.norm() <= max_modulus {
                out.push(mu);
            }
            for i in (0..nu.len()).rev() {
                nu[i] += 1;
                if nu[i] <= caps[i] {
                    continue 'outer;
                }
                nu[i] = 0;
            }
            break;
        }
        out.sort_by(|a, b| a.norm().total_cmp(&b.norm()).then(a.im.total_cmp(&b.im)));
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// splitting sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SweepFamily {
    Witten,
    Kfp,
}

#[derive(Clone)]
pub struct SweepConfig {
    pub family: SweepFamily,
    pub gamma: f64,
    pub v: ScalarField,
    /// Box for the critical-point search in the potential variables.
    pub v_bounds: Vec<(f64, f64)>,
    /// Box for the grid, one entry per operator variable.
    pub grid_bounds: Vec<(f64, f64)>,
    /// Grid spacing is at most `h / spacing_rule` (resolution rule).
    pub spacing_rule: f64,
    pub k: usize,
    pub tol: f64,
    pub max_restarts: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SplittingFit {
    pub samples: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `a_1(h) = (mu_1 / h) e^{2 S_eff / h}`.
    pub prefactors: Vec<f64>,
    pub s_eff: f64,
    pub is_double_well: bool,
}

impl SweepConfig {
    fn assemble(&self) -> Result<SusySpec, SpectralError> {
        Ok(match self.family {
            SweepFamily::Witten => assemble_witten(self.gamma, &self.v)?,
            SweepFamily::Kfp => assemble_kfp(self.gamma, &self.v)?,
        })
    }
}

/// One eigensolve of the sweep: the smallest nonzero (metastable) eigenvalue
/// at this `h`, which must be real and positive.
pub fn metastable_eigenvalue(
    cfg: &SweepConfig,
    h: f64,
    is_double_well: bool,
) -> Result<f64, SpectralError> {
    let spec = cfg.assemble()?;
    let grid = Grid::from_spacing(&cfg.grid_bounds, h / cfg.spacing_rule)?;
    let op = discretize(&spec, &grid, h)?;
    let opts = EigsOptions {
        k: cfg.k,
        tol: cfg.tol,
        max_restarts: cfg.max_restarts,
        seed: cfg.seed,
        compute_left: false,
    };
    let res = eigs_near_zero(&op, &opts)?;
    let mu1 = if is_double_well {
        res.eigenvalues[1]
    } else {
        res.eigenvalues[0]
    };
    if mu1.im.abs() > 1e-10 * mu1.norm() + 1e-14 {
        return Err(SpectralError::ComplexMu1(mu1));
    }
    if mu1.re <= 0.0 {
        return Err(SpectralError::NonPositiveMu1(mu1.re));
    }
    Ok(mu1.re)
}

/// Sweep `mu_1` over `h`, regress `ln(mu_1/h)` on `1/h` and tabulate the
/// prefactor sequence. The slope is to be compared with `-2 S_eff`,
/// `S_eff = min_j S_j`.
pub fn splitting_sweep(cfg: &SweepConfig, h_values: &[f64]) -> Result<SplittingFit, SpectralError> {
    if h_values.len() < 4 {
        return Err(SpectralError::InsufficientSamples(h_values.len()));
    }
    let crit = find_critical_points(&cfg.v, &cfg.v_bounds, 60, 1e-10, 1e-6)?;
    let report = barrier_report(&crit.points);
    let s_eff = match report.topology {
        Topology::DoubleWell | Topology::WellAndSea => report.min_barrier().unwrap(),
        other => {
            return Err(SpectralError::UnsupportedTopology(format!(
                "{other:?}: need a double well or a well and the sea"
            )))
        }
    };
    let is_double_well = report.is_double_well;

    use rayon::prelude::*;
    let samples: Result<Vec<(f64, f64)>, SpectralError> = h_values
        .par_iter()
        .map(|&h| metastable_eigenvalue(cfg, h, is_double_well).map(|mu| (h, mu)))
        .collect();
    let samples = samples?;

    let xs: Vec<f64> = samples.iter().map(|&(h, _)| 1.0 / h).collect();
    let ys: Vec<f64> = samples.iter().map(|&(h, mu)| (mu / h).ln()).collect();
    let LinearFit {
        slope,
        intercept,
        r_squared,
    } = linear_fit(&xs, &ys);
    let prefactors = samples
        .iter()
        .map(|&(h, mu)| (mu / h) * (2.0 * s_eff / h).exp())
        .collect();
    Ok(SplittingFit {
        samples,
        slope,
        intercept,
        r_squared,
        prefactors,
        s_eff,
        is_double_well,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disc::discretize_maxwellian;
    use crate::grid::Axis;
    use crate::potential::builtin;

    fn harmonic_witten_op(h: f64, n: usize) -> (SusySpec, SparseOperator) {
        let spec = assemble_witten(1.0, &builtin("quadratic", &[]).unwrap()).unwrap();
        let grid = Grid::new(vec![Axis::new(-6.0, 6.0, n)]).unwrap();
        let op = discretize(&spec, &grid, h).unwrap();
        (spec, op)
    }

    #[test]
    fn harmonic_witten_spectrum() {
        let h = 0.05;
        let (_, op) = harmonic_witten_op(h, 3001);
        let res = eigs_near_zero(
            &op,
            &EigsOptions {
                k: 4,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            res.eigenvalues[0].norm() <= 1e-8,
            "lambda0 {}",
            res.eigenvalues[0]
        );
        for (i, want) in [(1usize, h), (2, 2.0 * h), (3, 3.0 * h)] {
            let got = res.eigenvalues[i];
            assert!(got.im == 0.0, "harmonic eigenvalue {i} has im {}", got.im);
            assert!(
                (got.re - want).abs() <= 1e-4 * want,
                "eig {i}: {} vs {want}",
                got.re
            );
        }
        for r in &res.residuals {
            assert!(*r <= 1e-12 * op.matrix.norm_inf().max(1.0));
        }
    }

    #[test]
    fn shift_invert_matches_dense_oracle() {
        // oracle: dense complex eigenvalues of the same matrix
        let h = 0.1;
        let (_, op) = harmonic_witten_op(h, 203);
        let res = eigs_near_zero(
            &op,
            &EigsOptions {
                k: 5,
                ..Default::default()
            },
        )
        .unwrap();
        let dense = op.matrix.to_dense().complex_eigenvalues();
        let mut dvals: Vec<Complex64> = dense.iter().copied().collect();
        dvals.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
        for (i, lam) in res.eigenvalues.iter().enumerate() {
            let best = dvals
                .iter()
                .map(|d| (d - lam).norm())
                .fold(f64::MAX, f64::min);
            assert!(best <= 1e-8, "eig {i} = {lam} off dense by {best:.3e}");
        }

        // kinetic operator, small 2-D grid
        let spec = assemble_kfp(1.0, &builtin("quadratic", &[]).unwrap()).unwrap();
        let grid = Grid::new(vec![Axis::new(-3.0, 3.0, 25), Axis::new(-3.0, 3.0, 25)]).unwrap();
        let op = discretize(&spec, &grid, 0.4).unwrap();
        let res = eigs_near_zero(
            &op,
            &EigsOptions {
                k: 6,
                ..Default::default()
            },
        )
        .unwrap();
        let dense = op.matrix.to_dense().complex_eigenvalues();
        let mut dvals: Vec<Complex64> = dense.iter().copied().collect();
        dvals.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
        for lam in &res.eigenvalues {
            let best = dvals
                .iter()
                .map(|d| (d - lam).norm())
                .fold(f64::MAX, f64::min);
            assert!(best <= 1e-8, "kfp eig {lam} off dense by {best:.3e}");
        }
    }

    #[test]
    fn conjugate_symmetry_of_spectrum() {
        let spec = assemble_kfp(1.0, &builtin("quadratic", &[]).unwrap()).unwrap();
        let grid = Grid::new(vec![Axis::new(-3.5, 3.5, 71), Axis::new(-3.5, 3.5, 71)]).unwrap();
        let op = discretize(&spec, &grid, 0.2).unwrap();
        let res = eigs_near_zero(
            &op,
            &EigsOptions {
                k: 6,
                ..Default::default()
            },
        )
        .unwrap();
        for lam in &res.eigenvalues {
            let conj_present = res
                .eigenvalues
                .iter()
                .any(|m| (m - lam.conj()).norm() <= 1e-9 * (1.0 + lam.norm()));
            assert!(conj_present, "conjugate of {lam} missing");
        }
    }

    #[test]
    fn kfp_quadratic_matches_hamilton_model() {
        let h = 0.1;
        let spec = assemble_kfp(1.0, &builtin("quadratic", &[]).unwrap()).unwrap();
        let grid = Grid::new(vec![Axis::new(-3.6, 3.6, 181), Axis::new(-3.6, 3.6, 181)]).unwrap();
        let op = discretize(&spec, &grid, h).unwrap();
        let res = eigs_near_zero(
            &op,
            &EigsOptions {
                k: 6,
                compute_left: false,
                ..Default::default()
            },
        )
        .unwrap();
        let model = hamilton::model_eigenvalues(&spec, &[0.0, 0.0], 2.5).unwrap();
        // frozen closed form: drift eigenvalues (1 +- i sqrt 3)/2 for gamma=1
        let lp = Complex64::new(0.5, 0.75_f64.sqrt());
        assert!((model[1] - lp.conj()).norm() < 1e-12 || (model[1] - lp).norm() < 1e-12);
        assert!((model[3] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        for i in 1..4 {
            let want = h * model[i];
            let got = res.eigenvalues[i];
            assert!(
                (got - want).norm() <= 0.02 * want.norm(),
                "eig {i}: {got} vs model {want}"
            );
        }
        assert!(res.eigenvalues[0].norm() <= 0.02 * h);
    }

    #[test]
    fn hamilton_rates_witten_harmonic() {
        for gamma in [0.5, 1.0, 2.0] {
            let spec = assemble_witten(gamma, &builtin("quadratic", &[]).unwrap()).unwrap();
            let rates = hamilton::stable_rates(&spec, &[0.0]).unwrap();
            assert_eq!(rates.len(), 1);
            assert!((rates[0] - Complex64::new(0.5 * gamma, 0.0)).norm() < 1e-12);
            let model = hamilton::model_eigenvalues(&spec, &[0.0], 3.5 * gamma).unwrap();
            for (i, mu) in model.iter().take(4).enumerate() {
                assert!((mu - Complex64::new(gamma * i as f64, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn double_well_counts_and_projection() {
        let h = 0.1;
        let spec = assemble_witten(1.0, &builtin("quartic_double_well", &[1.0]).unwrap()).unwrap();
        let grid = Grid::new(vec![Axis::new(-2.5, 2.5, 251)]).unwrap();
        let op = discretize(&spec, &grid, h).unwrap();
        let res = eigs_near_zero(
            &op,
            &EigsOptions {
                k: 5,
                ..Default::default()
            },
        )
        .unwrap();

        // precisely 2 eigenvalues in D(0, h/10); mu0 ~ 0, mu1 real positive
        let count = count_in_disc(&res, h / 10.0).unwrap();
        assert_eq!(count.count, 2);
        assert!(res.eigenvalues[0].norm() <= 1e-10);
        let mu1 = res.eigenvalues[1];
        assert!(mu1.im.abs() <= 1e-10 * mu1.norm() + 1e-14);
        assert!(mu1.re > 0.0);

        // projection onto the metastable pair
        let proj = projection(&res, &[0, 1]).unwrap();
        assert_eq!(proj.rank, 2);
        // Pi applied to the Maxwellian reproduces it
        let m = discretize_maxwellian(&spec, &grid, h).unwrap();
        let pm = proj.apply_real(&m);
        let mut diff = 0.0;
        for (a, b) in pm.iter().zip(&m) {
            diff += (a - Complex64::new(*b, 0.0)).norm_sqr();
        }
        assert!(diff.sqrt() <= 1e-8, "Pi m - m = {:.3e}", diff.sqrt());

        // idempotency on random vectors
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let u: Vec<f64> = (0..op.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pu = proj.apply_real(&u);
            let ppu = proj.apply(&pu);
            let num: f64 = ppu
                .iter()
                .zip(&pu)
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                .sqrt();
            let den = c_norm(&pu).max(1e-300);
            assert!(num / den <= 1e-8, "idempotency {:.3e}", num / den);
        }

        // biorthogonality of the normalized pair bases
        let lefts = res.left_vectors.as_ref().unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let d = c_dot(&lefts[i], &res.right_vectors[j]).norm();
                let dii = c_dot(&lefts[i], &res.right_vectors[i]).norm();
                if i != j {
                    assert!(d / dii <= 1e-8, "biorth {i}{j} = {:.3e}", d / dii);
                }
            }
        }
    }

    #[test]
    fn well_and_sea_single_small_eigenvalue() {
        // x^2 - x^3: one well at 0, saddle at 2/3
        let h = 0.1;
        let v = builtin("polynomial", &[0.0, 0.0, 1.0, -1.0]).unwrap();
        let spec = assemble_witten(1.0, &v).unwrap();
        let grid = Grid::new(vec![Axis::new(-1.1, 2.1, 161)]).unwrap();
        let op = discretize(&spec, &grid, h).unwrap();
        let res = eigs_near_zero(
            &op,
            &EigsOptions {
                k: 4,
                compute_left: false,
                ..Default::default()
            },
        )
        .unwrap();
        let count = count_in_disc(&res, h / 10.0).unwrap();
        assert_eq!(count.count, 1);
        let mu1 = res.eigenvalues[0];
        assert!(mu1.re > 0.0 && mu1.im == 0.0);
        // exponentially small but nonzero
        assert!(mu1.re < 0.01 && mu1.re > 1e-6, "mu1 = {}", mu1.re);
    }

    #[test]
    fn harmonic_count_radius_half_gap() {
        let h = 0.08;
        let (_, op) = harmonic_witten_op(h, 1001);
        let res = eigs_near_zero(
            &op,
            &EigsOptions {
                k: 4,
                compute_left: false,
                ..Default::default()
            },
        )
        .unwrap();
        let count = count_in_disc(&res, 0.5 * h).unwrap();
        assert_eq!(count.count, 1);
    }

    #[test]
    fn insufficient_k_detected() {
        let h = 0.1;
        let (_, op) = harmonic_witten_op(h, 501);
        let res = eigs_near_zero(
            &op,
            &EigsOptions {
                k: 2,
                compute_left: false,
                ..Default::default()
            },
        )
        .unwrap();
        // largest computed is ~ h; certifying radius h needs coverage to 2h
        assert!(matches!(
            count_in_disc(&res, h),
            Err(SpectralError::InsufficientK { .. })
        ));
    }

    #[test]
    fn quasimode_overlap_single_well() {
        let h = 0.1;
        let (spec, op) = harmonic_witten_op(h, 1201);
        let res = eigs_near_zero(
            &op,
            &EigsOptions {
                k: 2,
                compute_left: false,
                ..Default::default()
            },
        )
        .unwrap();
        let well = crate::potential::CriticalPoint {
            location: vec![0.0],
            value: 0.0,
            index: 0,
            hess_eigs: vec![1.0],
        };
        let q = crate::potential::quasimode(&spec.phase, &well, 2.0, h, 0.5, &op.grid).unwrap();
        let rep = quasimode_overlap(&res, &[0], &q);
        assert!(rep.best_overlap >= 0.999, "overlap {}", rep.best_overlap);
        assert_eq!(rep.best_index, 0);

        // a deterministic noise vector has negligible overlap
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut noise: Vec<f64> = (0..op.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = vecops::norm(&noise);
        vecops::scale_in_place(&mut noise, 1.0 / n);
        let rep = quasimode_overlap(&res, &[0], &noise);
        assert!(rep.best_overlap <= 0.1, "noise overlap {}", rep.best_overlap);
    }

    #[test]
    fn splitting_sweep_quartic_well() {
        let cfg = SweepConfig {
            family: SweepFamily::Witten,
            gamma: 1.0,
            v: builtin("quartic_double_well", &[1.0]).unwrap(),
            v_bounds: vec![(-2.0, 2.0)],
            grid_bounds: vec![(-2.5, 2.5)],
            spacing_rule: 5.0,
            k: 3,
            tol: 1e-12,
            max_restarts: 8,
            seed: 42,
        };
        let hs = [0.065, 0.08, 0.1, 0.125];
        let fit = splitting_sweep(&cfg, &hs).unwrap();
        assert!((fit.s_eff - 0.25).abs() < 1e-9);
        assert!(
            (fit.slope + 0.5).abs() <= 0.05 * 0.5,
            "slope {} vs -0.5",
            fit.slope
        );
        assert!(fit.r_squared >= 0.999);
        for a in &fit.prefactors {
            assert!(*a > 0.0);
        }
        let (maxp, minp) = fit
            .prefactors
            .iter()
            .fold((f64::MIN, f64::MAX), |(mx, mn), &a| (mx.max(a), mn.min(a)));
        assert!(maxp / minp <= 1.5, "prefactor spread {}", maxp / minp);
    }

    #[test]
    fn sweep_needs_four_points() {
        let cfg = SweepConfig {
            family: SweepFamily::Witten,
            gamma: 1.0,
            v: builtin("quartic_double_well", &[1.0]).unwrap(),
            v_bounds: vec![(-2.0, 2.0)],
            grid_bounds: vec![(-2.5, 2.5)],
            spacing_rule: 5.0,
            k: 3,
            tol: 1e-12,
            max_restarts: 8,
            seed: 42,
        };
        assert!(matches!(
            splitting_sweep(&cfg, &[0.1, 0.12, 0.15]),
            Err(SpectralError::InsufficientSamples(3))
        ));
    }
}
