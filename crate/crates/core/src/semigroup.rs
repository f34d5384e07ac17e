//! Heat semigroup `u(t) = e^{-tP/h} u_0` by Crank-Nicolson time stepping,
//! and the return-to-equilibrium decomposition check
//!
//! ```text
//! r(t) = | u(t) - sum_i e^{-t lambda_i / h} Pi_i u_0 |
//! ```
//!
//! over the metastable eigenvalues, whose decay rate is compared against the
//! spectral gap `Re lambda_next / h`.
//!
//! One step solves `(I + dt/(2h) P) u_{n+1} = (I - dt/(2h) P) u_n`; the left
//! factorization is computed once. Since the symmetric part of the
//! discretized `P` is positive semidefinite, the step map is a contraction,
//! matching the continuum semigroup.

use serde::Serialize;
use thiserror::Error;

use crate::disc::{DiscError, SparseOperator};
use crate::fit::linear_fit;
use crate::sparse::{CsrBuilder, LuFactors, SparseError};
use crate::spectral::{projection, SpectralError, SpectralResult};
use crate::vecops;

#[derive(Debug, Error)]
pub enum SemigroupError {
    #[error("time step must be positive, got {0}")]
    BadDt(f64),
    #[error("factorization of the implicit step failed: {0}")]
    FactorizationFailure(String),
    #[error("state norm grew by more than 10% in one step at t = {t}: accretivity violated")]
    StepRejected { t: f64 },
    #[error("remainder never entered the fit window [1e-10, 1e-2] x |u0|")]
    WindowEmpty,
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Disc(#[from] DiscError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// Trajectory sampler for `e^{-tP/h} u0` with a fixed step.
pub struct Evolution<'a> {
    op: &'a SparseOperator,
    lhs: LuFactors,
    half: f64,
    dt: f64,
    time: f64,
    state: Vec<f64>,
}

pub fn evolve<'a>(
    op: &'a SparseOperator,
    u0: &[f64],
    dt: f64,
) -> Result<Evolution<'a>, SemigroupError> {
    if !(dt > 0.0) {
        return Err(SemigroupError::BadDt(dt));
    }
    let half = dt / (2.0 * op.h);
    let n = op.dim();
    let mut builder = CsrBuilder::new(n);
    for i in 0..n {
        builder.add(i, i, 1.0);
        for (c, v) in op.matrix.row(i) {
            builder.add(i, c, half * v);
        }
    }
    let lhs = builder
        .build()
        .factor_shifted(0.0)
        .map_err(|e| SemigroupError::FactorizationFailure(e.to_string()))?;
    Ok(Evolution {
        op,
        lhs,
        half,
        dt,
        time: 0.0,
        state: u0.to_vec(),
    })
}

impl Evolution<'_> {
    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn step(&mut self) -> Result<(), SemigroupError> {
        let pu = self.op.matrix.matvec(&self.state)?;
        let rhs: Vec<f64> = self
            .state
            .iter()
            .zip(&pu)
            .map(|(u, p)| u - self.half * p)
            .collect();
        let next = self.lhs.solve(&rhs);
        let grow = vecops::norm(&next) / vecops::norm(&self.state).max(1e-300);
        if !grow.is_finite() || grow > 1.1 {
            return Err(SemigroupError::StepRejected { t: self.time });
        }
        self.state = next;
        self.time += self.dt;
        Ok(())
    }

    /// Advance to the step count nearest to `t` (the sampler lives on the
    /// grid `n * dt`).
    pub fn advance_to(&mut self, t: f64) -> Result<&[f64], SemigroupError> {
        let target = (t / self.dt).round() as i64;
        let current = (self.time / self.dt).round() as i64;
        for _ in current..target {
            self.step()?;
        }
        Ok(&self.state)
    }

    /// States sampled at the requested times (snapped to the step grid).
    pub fn sample_at(&mut self, times: &[f64]) -> Result<Vec<(f64, Vec<f64>)>, SemigroupError> {
        let mut out = Vec::with_capacity(times.len());
        for &t in times {
            self.advance_to(t)?;
            out.push((self.time, self.state.clone()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvolutionReport {
    pub times: Vec<f64>,
    pub remainder_norms: Vec<f64>,
    pub state_norms: Vec<f64>,
    /// Log-linear decay rate of the remainder over the fit window.
    pub fitted_rate: f64,
    /// `Re lambda_next / h` from the spectral result.
    pub gap: f64,
    pub ratio: f64,
    pub dt_used: f64,
    /// Remainder non-increasing (to 1e-12 slack) for `t >= 5 dt`.
    pub monotone_after_transient: bool,
}

/// Window for the decay fit, relative to `|u0|`.
const FIT_WINDOW: (f64, f64) = (1e-10, 1e-2);

/// Propagate `u0`, subtract the metastable part
/// `sum_i e^{-t lambda_i/h} Pi_i u0`, fit the decay rate of the remainder
/// and compare with the spectral gap.
pub fn equilibration_report(
    op: &SparseOperator,
    spectral: &SpectralResult,
    meta_indices: &[usize],
    u0: &[f64],
    times: &[f64],
    dt: f64,
) -> Result<EvolutionReport, SemigroupError> {
    let h = op.h;
    // rank-1 projections per metastable eigenvalue
    let projections: Vec<_> = meta_indices
        .iter()
        .map(|&i| projection(spectral, &[i]))
        .collect::<Result<_, _>>()?;
    let coeffs: Vec<Vec<num_complex::Complex64>> = projections
        .iter()
        .map(|p| p.apply_real(u0))
        .collect();

    let gap = spectral
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(i, _)| !meta_indices.contains(i))
        .map(|(_, l)| l.re)
        .fold(f64::MAX, f64::min)
        / h;

    let u0n = vecops::norm(u0);
    let mut evo = evolve(op, u0, dt)?;
    let mut remainder_norms = Vec::with_capacity(times.len());
    let mut state_norms = Vec::with_capacity(times.len());
    let mut sampled_times = Vec::with_capacity(times.len());
    for &t in times {
        evo.advance_to(t)?;
        let t = evo.time();
        let u = evo.state();
        let mut r2 = 0.0;
        for j in 0..u.len() {
            let mut meta = num_complex::Complex64::new(0.0, 0.0);
            for (&mi, c) in meta_indices.iter().zip(&coeffs) {
                let lam = spectral.eigenvalues[mi];
                meta += (-t * lam / h).exp() * c[j];
            }
            r2 += (num_complex::Complex64::new(u[j], 0.0) - meta).norm_sqr();
        }
        sampled_times.push(t);
        remainder_norms.push(r2.sqrt());
        state_norms.push(vecops::norm(u));
    }

    let monotone_after_transient = sampled_times
        .windows(2)
        .zip(remainder_norms.windows(2))
        .filter(|(ts, _)| ts[0] >= 5.0 * dt)
        .all(|(_, rs)| rs[1] <= rs[0] + 1e-12 * u0n);

    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (&t, &r) in sampled_times.iter().zip(&remainder_norms) {
        if r >= FIT_WINDOW.0 * u0n && r <= FIT_WINDOW.1 * u0n {
            xs.push(t);
            ys.push(r.ln());
        }
    }
    if xs.len() < 2 {
        return Err(SemigroupError::WindowEmpty);
    }
    let fit = linear_fit(&xs, &ys);
    let fitted_rate = -fit.slope;
    Ok(EvolutionReport {
        times: sampled_times,
        remainder_norms,
        state_norms,
        fitted_rate,
        gap,
        ratio: fitted_rate / gap,
        dt_used: dt,
        monotone_after_transient,
    })
}
