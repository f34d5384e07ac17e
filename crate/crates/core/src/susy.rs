//! Supersymmetric operator data `(A = B + C, phi)` and the three model
//! families built from it.
//!
//! The operator determined by a spec is
//!
//! ```text
//! P u = -h^2 sum_jk B_jk d_j d_k u + (<B phi', phi'> - h tr(B phi'')) u
//!       + sum_jk ( (d_k phi) C_jk h d_j u + h d_j (C_jk (d_k phi) u) )
//! ```
//!
//! with principal symbol `p = <B xi, xi> + 2 i <C phi', xi> + <B phi', phi'>`.
//! Families:
//!
//! * Witten:  `A = (gamma/2) I`, `phi = V`;
//! * kinetic (Kramers-Fokker-Planck): `A = 1/2 [[0, I], [-I, gamma I]]`,
//!   `phi(x, y) = V(x) + y^2/2`;
//! * oscillator chain at equal bath temperatures:
//!   `A = 1/2 [[0, I, 0], [-I, 0, 0], [0, 0, gamma I]]`,
//!   `phi(x, y, z) = V(x) + y^2/2 + z^2/2 - z.x`,
//!   `V(x) = V1(x1) + V2(x2) + Vc(x2 - x1)`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::potential::ScalarField;

const ANTISYM_TOL: f64 = 1e-12;
const PSD_TOL: f64 = -1e-12;

#[derive(Debug, Error)]
pub enum SusyError {
    #[error("matrix A must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix A is singular or nearly so (condition estimate {cond:.3e})")]
    Singular { cond: f64 },
    #[error("symmetric part B has eigenvalue {eig:.3e} < 0")]
    NotPsd { eig: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("friction gamma must be positive, got {0}")]
    BadGamma(f64),
}

/// Constant coefficient matrix with its symmetric/antisymmetric split.
#[derive(Debug, Clone)]
pub struct SusyMatrix {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    condition: f64,
}

impl SusyMatrix {
    pub fn new(a: DMatrix<f64>) -> Result<Self, SusyError> {
        if a.nrows() != a.ncols() {
            return Err(SusyError::NotSquare {
                rows: a.nrows(),
                cols: a.ncols(),
            });
        }
        let b = 0.5 * (&a + a.transpose());
        let c = 0.5 * (&a - a.transpose());
        let svd = a.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !condition.is_finite() || smin <= f64::EPSILON * smax * a.nrows() as f64 {
            return Err(SusyError::Singular { cond: condition });
        }
        let min_eig = b.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < PSD_TOL {
            return Err(SusyError::NotPsd { eig: min_eig });
        }
        Ok(SusyMatrix { a, b, c, condition })
    }

    pub fn side(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// `B + C` recomposes `A` exactly and `C` is antisymmetric to 1e-12;
    /// used by the property tests.
    pub fn split_residual(&self) -> (f64, f64) {
        let recomposed = &self.b + &self.c;
        let rec = (&recomposed - &self.a).abs().max();
        let anti = (&self.c + self.c.transpose()).abs().max();
        debug_assert!(anti <= ANTISYM_TOL);
        (rec, anti)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FamilyTag {
    Witten,
    Kfp,
    Chain,
    Custom,
}

#[derive(Debug, Clone)]
pub struct SusySpec {
    pub matrix: SusyMatrix,
    pub phase: ScalarField,
    pub dim: usize,
    pub family: FamilyTag,
    pub gamma: f64,
}

impl SusySpec {
    pub fn new(
        matrix: SusyMatrix,
        phase: ScalarField,
        family: FamilyTag,
        gamma: f64,
    ) -> Result<Self, SusyError> {
        if matrix.side() != phase.dim() {
            return Err(SusyError::DimensionMismatch(format!(
                "matrix side {} vs phase dimension {}",
                matrix.side(),
                phase.dim()
            )));
        }
        Ok(SusySpec {
            dim: phase.dim(),
            matrix,
            phase,
            family,
            gamma,
        })
    }

    /// Transport coefficients `c(x) = 2 C phi'(x)`; the drift vector field
    /// `nu = sum_j c_j d_j` of the first-order part.
    pub fn transport_coeff(&self, x: &[f64]) -> Vec<f64> {
        let g = self.phase.grad(x);
        let cg = self.matrix.c() * DVector::from_column_slice(&g);
        (2.0 * cg).iter().copied().collect()
    }

    /// `p_0(x) = <B phi', phi'>`.
    pub fn p0(&self, x: &[f64]) -> f64 {
        let g = DVector::from_column_slice(&self.phase.grad(x));
        (self.matrix.b() * &g).dot(&g)
    }

    /// `p_2(x, xi) = <B xi, xi>`.
    pub fn p2(&self, xi: &[f64]) -> f64 {
        let xi = DVector::from_column_slice(xi);
        (self.matrix.b() * &xi).dot(&xi)
    }

    /// `p_1(x, xi) = 2 <C phi'(x), xi>`.
    pub fn p1(&self, x: &[f64], xi: &[f64]) -> f64 {
        crate::vecops::dot(&self.transport_coeff(x), xi)
    }
}

/// Witten family: `A = (gamma/2) I`, `phi = V`.
pub fn assemble_witten(gamma: f64, v: &ScalarField) -> Result<SusySpec, SusyError> {
    if gamma <= 0.0 {
        return Err(SusyError::BadGamma(gamma));
    }
    let n = v.dim();
    let a = DMatrix::from_diagonal_element(n, n, 0.5 * gamma);
    SusySpec::new(SusyMatrix::new(a)?, v.clone(), FamilyTag::Witten, gamma)
}

/// Phase of the kinetic family, `phi(x, y) = V(x) + |y|^2 / 2` on `R^{2n}`.
pub fn kfp_phase(v: &ScalarField) -> ScalarField {
    let n = v.dim();
    let (ve, vg, vh) = (v.clone(), v.clone(), v.clone());
    ScalarField::new_analytic(
        2 * n,
        move |xy| {
            let (x, y) = xy.split_at(n);
            ve.eval(x) + 0.5 * crate::vecops::dot(y, y)
        },
        move |xy| {
            let (x, y) = xy.split_at(n);
            let mut g = vg.grad(x);
            g.extend_from_slice(y);
            g
        },
        move |xy| {
            let (x, _) = xy.split_at(n);
            let hx = vh.hess(x);
            let mut h = DMatrix::zeros(2 * n, 2 * n);
            h.view_mut((0, 0), (n, n)).copy_from(&hx);
            for i in 0..n {
                h[(n + i, n + i)] = 1.0;
            }
            h
        },
        v.growth_note().to_string(),
    )
}

/// Kinetic (Kramers-Fokker-Planck) family.
pub fn assemble_kfp(gamma: f64, v: &ScalarField) -> Result<SusySpec, SusyError> {
    if gamma <= 0.0 {
        return Err(SusyError::BadGamma(gamma));
    }
    let n = v.dim();
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        a[(i, n + i)] = 0.5;
        a[(n + i, i)] = -0.5;
        a[(n + i, n + i)] = 0.5 * gamma;
    }
    SusySpec::new(SusyMatrix::new(a)?, kfp_phase(v), FamilyTag::Kfp, gamma)
}

/// Classical energy of the chain at reference temperature one:
/// `Phi = V1(x1) + V2(x2) + Vc(x2 - x1) + |y|^2/2 + |z|^2/2 - z.x`
/// in the variable order `(x1, x2, y1, y2, z1, z2)`, each block of size `d`.
pub fn chain_phase(
    v1: &ScalarField,
    v2: &ScalarField,
    vc: &ScalarField,
) -> Result<ScalarField, SusyError> {
    let d = v1.dim();
    if v2.dim() != d || vc.dim() != d {
        return Err(SusyError::DimensionMismatch(format!(
            "chain potentials must share one dimension, got {}, {}, {}",
            d,
            v2.dim(),
            vc.dim()
        )));
    }
    let dim = 6 * d;
    let (e1, e2, ec) = (v1.clone(), v2.clone(), vc.clone());
    let (g1, g2, gc) = (v1.clone(), v2.clone(), vc.clone());
    let (h1, h2, hc) = (v1.clone(), v2.clone(), vc.clone());
    let split = move |u: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let part = |k: usize| u[k * d..(k + 1) * d].to_vec();
        (part(0), part(1), part(2), part(3), part(4), part(5))
    };
    let sp_e = split.clone();
    let sp_g = split.clone();
    let sp_h = split;
    let note = format!(
        "composite of: [{}], [{}], [{}]",
        v1.growth_note(),
        v2.growth_note(),
        vc.growth_note()
    );
    Ok(ScalarField::new_analytic(
        dim,
        move |u| {
            let (x1, x2, y1, y2, z1, z2) = sp_e(u);
            let w: Vec<f64> = x2.iter().zip(&x1).map(|(a, b)| a - b).collect();
            let sq = |v: &[f64]| 0.5 * crate::vecops::dot(v, v);
            e1.eval(&x1) + e2.eval(&x2) + ec.eval(&w) + sq(&y1) + sq(&y2) + sq(&z1) + sq(&z2)
                - crate::vecops::dot(&z1, &x1)
                - crate::vecops::dot(&z2, &x2)
        },
        move |u| {
            let (x1, x2, y1, y2, z1, z2) = sp_g(u);
            let w: Vec<f64> = x2.iter().zip(&x1).map(|(a, b)| a - b).collect();
            let dv1 = g1.grad(&x1);
            let dv2 = g2.grad(&x2);
            let dvc = gc.grad(&w);
            let mut g = Vec::with_capacity(6 * d);
            for i in 0..d {
                g.push(dv1[i] - dvc[i] - z1[i]);
            }
            for i in 0..d {
                g.push(dv2[i] + dvc[i] - z2[i]);
            }
            g.extend_from_slice(&y1);
            g.extend_from_slice(&y2);
            for i in 0..d {
                g.push(z1[i] - x1[i]);
            }
            for i in 0..d {
                g.push(z2[i] - x2[i]);
            }
            g
        },
        move |u| {
            let (x1, x2, _, _, _, _) = sp_h(u);
            let w: Vec<f64> = x2.iter().zip(&x1).map(|(a, b)| a - b).collect();
            let hv1 = h1.hess(&x1);
            let hv2 = h2.hess(&x2);
            let hvc = hc.hess(&w);
            let mut h = DMatrix::zeros(6 * d, 6 * d);
            for i in 0..d {
                for j in 0..d {
                    h[(i, j)] = hv1[(i, j)] + hvc[(i, j)];
                    h[(d + i, d + j)] = hv2[(i, j)] + hvc[(i, j)];
                    h[(i, d + j)] = -hvc[(i, j)];
                    h[(d + i, j)] = -hvc[(i, j)];
                }
            }
            for i in 0..2 * d {
                h[(2 * d + i, 2 * d + i)] = 1.0; // y block
                h[(4 * d + i, 4 * d + i)] = 1.0; // z block
                h[(i, 4 * d + i)] = -1.0; // x-z coupling
                h[(4 * d + i, i)] = -1.0;
            }
            h
        },
        note,
    ))
}

/// Two-oscillator chain coupled to equal-temperature baths.
pub fn assemble_chain(
    gamma: f64,
    v1: &ScalarField,
    v2: &ScalarField,
    vc: &ScalarField,
) -> Result<SusySpec, SusyError> {
    if gamma <= 0.0 {
        return Err(SusyError::BadGamma(gamma));
    }
    let phase = chain_phase(v1, v2, vc)?;
    let d2 = 2 * v1.dim();
    let dim = 3 * d2;
    let mut a = DMatrix::zeros(dim, dim);
    for i in 0..d2 {
        a[(i, d2 + i)] = 0.5;
        a[(d2 + i, i)] = -0.5;
        a[(2 * d2 + i, 2 * d2 + i)] = 0.5 * gamma;
    }
    SusySpec::new(SusyMatrix::new(a)?, phase, FamilyTag::Chain, gamma)
}

/// Principal symbol `p_2 + i p_1 + p_0` at `(x, xi)`.
pub fn principal_symbol(spec: &SusySpec, x: &[f64], xi: &[f64]) -> Complex64 {
    Complex64::new(spec.p2(xi) + spec.p0(x), spec.p1(x, xi))
}

/// Pointwise action of the continuum operator on a test function `u`
/// supplying value, gradient and Hessian (a [`ScalarField`]).
pub fn apply_continuum(spec: &SusySpec, u: &ScalarField, x: &[f64], h: f64) -> f64 {
    let n = spec.dim;
    let b = spec.matrix.b();
    let c = spec.matrix.c();
    let phi_g = spec.phase.grad(x);
    let phi_h = spec.phase.hess(x);
    let uv = u.eval(x);
    let ug = u.grad(x);
    let uh = u.hess(x);

    let mut out = 0.0;
    // -h^2 B_jk d_j d_k u  +  <B phi', phi'> u  -  h tr(B phi'') u
    for j in 0..n {
        for k in 0..n {
            out += -h * h * b[(j, k)] * uh[(j, k)];
            out += b[(j, k)] * phi_g[j] * phi_g[k] * uv;
            out -= h * b[(j, k)] * phi_h[(k, j)] * uv;
        }
    }
    // (d_k phi) C_jk h d_j u  +  h d_j ( C_jk (d_k phi) u )
    for j in 0..n {
        for k in 0..n {
            let cjk = c[(j, k)];
            if cjk == 0.0 {
                continue;
            }
            out += cjk * phi_g[k] * h * ug[j];
            out += h * cjk * (phi_h[(j, k)] * uv + phi_g[k] * ug[j]);
        }
    }
    out
}

/// Exact Maxwellian `exp(-(phi - ref)/h)` as a test function, for kernel
/// checks of `apply_continuum`.
pub fn maxwellian_field(spec: &SusySpec, h: f64, reference: f64) -> ScalarField {
    let (pe, pg, ph) = (spec.phase.clone(), spec.phase.clone(), spec.phase.clone());
    let (pg2, ph2) = (spec.phase.clone(), spec.phase.clone());
    ScalarField::new_analytic(
        spec.dim,
        move |x| (-(pe.eval(x) - reference) / h).exp(),
        move |x| {
            let f = (-(pg.eval(x) - reference) / h).exp();
            pg2.grad(x).iter().map(|g| -g / h * f).collect()
        },
        move |x| {
            let f = (-(ph.eval(x) - reference) / h).exp();
            let g = ph2.grad(x);
            let hess = ph2.hess(x);
            let n = g.len();
            DMatrix::from_fn(n, n, |i, j| (-hess[(i, j)] / h + g[i] * g[j] / (h * h)) * f)
        },
        "gaussian-type decay",
    )
}
