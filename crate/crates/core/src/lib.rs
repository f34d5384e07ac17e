//! Numerical laboratory for supersymmetric second-order operators of
//! Kramers-Fokker-Planck type.
//!
//! The operators handled here are determined by a constant invertible matrix
//! `A = B + C` (`B` symmetric positive semidefinite, `C` antisymmetric) and a
//! scalar phase `phi`, through the degree-zero twisted Laplacian
//!
//! ```text
//! P = sum_jk hD_j B_jk hD_k + <B phi', phi'> - h tr(B phi'')
//!   + sum_jk ( (d_k phi) C_jk h d_j + h d_j o C_jk (d_k phi) ).
//! ```
//!
//! Three families are built in: the Witten Laplacian (`A = (gamma/2) I`),
//! the kinetic Kramers-Fokker-Planck operator, and the generator of a pair of
//! anharmonic oscillators coupled to equal-temperature heat baths. The crate
//! discretizes them on tensor grids, computes the exponentially small
//! low-lying spectrum with spectral projections, propagates the heat
//! semigroup, simulates the underlying stochastic dynamics, and verifies the
//! dynamical hypotheses (critical-set finiteness, averaged-symbol lower
//! bounds, flow measure condition) by direct integration.

pub mod disc;
pub mod dyncheck;
pub mod fit;
pub mod grid;
pub mod potential;
pub mod semigroup;
pub mod sparse;
pub mod spectral;
pub mod stochastic;
pub mod susy;

pub(crate) mod vecops {
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn norm(a: &[f64]) -> f64 {
        dot(a, a).sqrt()
    }

    pub fn scale_in_place(a: &mut [f64], s: f64) {
        for x in a {
            *x *= s;
        }
    }

    pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += alpha * xi;
        }
    }
}
