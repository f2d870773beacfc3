//! The Hessian kernel of the reduced loss as a symmetric operator on velocity
//! fields over the particles, its spectrum, and the evolution-equation check.
//!
//! A velocity field is an `N x (k + d)` matrix with one row per particle. The
//! operator is assembled by central differences of the analytic gradient field:
//! `H[v](theta_p) = (G(mu + eps v; theta_p) - G(mu - eps v; theta_p)) / (2 eps)`
//! where `G(nu; theta) = grad delta L(nu, theta)` and `theta_p` stays fixed.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::dynamics::{activations, apply_step, dual_field, gradient_at, gradient_field, gradient_from_dual, l2_norm, Objective};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::linalg;
use crate::math;
use crate::objective::{CovPack, Problem};
use crate::quadrature::features_from_activations;

/// Largest `N (k + d)` for which the dense operator is assembled.
pub const HESSIAN_BUDGET: usize = 20_000;
pub const DEFAULT_FD_STEP: f64 = 1e-4;

fn check_step(eps: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidConfig("finite-difference step must lie in [1e-6, 1e-3]"));
    }
    Ok(())
}

/// Action of the Hessian operator on a velocity field `v` (`N x (k + d)`).
pub fn apply_hessian(problem: &Problem, mu: &Ensemble, v: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    check_step(eps)?;
    mu.require_uniform("apply_hessian")?;
    let plus = apply_step(mu, v, -eps, false)?;
    let minus = apply_step(mu, v, eps, false)?;
    let gp = gradient_at(problem, &plus, mu, Objective::Reduced)?;
    let gm = gradient_at(problem, &minus, mu, Objective::Reduced)?;
    Ok((gp - gm) / (2.0 * eps))
}

/// Dense matrix `A` of the operator in particle coordinates: entry
/// `A[(p, c), (j, i)]` is the derivative of `G(theta_p)_c` with respect to
/// coordinate `i` of particle `j`. Block `(p, j)` equals `H(theta_p, theta_j) / N`,
/// the kernel carrying the particle mass `1/N`.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianOperator {
    pub matrix: DMatrix<f64>,
    pub n: usize,
    pub m: usize,
    pub fd_step: f64,
    pub source: u64,
}

impl HessianOperator {
    /// `||A - A^T||_F / ||A||_F`.
    pub fn asymmetry(&self) -> f64 {
        let norm = self.matrix.norm();
        if norm == 0.0 {
            return 0.0;
        }
        (&self.matrix - self.matrix.transpose()).norm() / norm
    }

    /// Kernel value `H(theta_p, theta_j)` (`m x m`).
    pub fn kernel_block(&self, p: usize, j: usize) -> DMatrix<f64> {
        self.matrix.view((p * self.m, j * self.m), (self.m, self.m)) * self.n as f64
    }

    pub fn apply(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let flat = flatten(v);
        unflatten(&(&self.matrix * flat), self.n, self.m)
    }
}

pub fn flatten(v: &DMatrix<f64>) -> DVector<f64> {
    let (n, m) = v.shape();
    DVector::from_fn(n * m, |r, _| v[(r / m, r % m)])
}

pub fn unflatten(v: &DVector<f64>, n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |p, c| v[p * m + c])
}

/// Assembles the operator column by column. Moving one particle changes the
/// model features by a rank-one term, and the gradient field at fixed
/// particles is linear in the dual field, so each column costs one dual
/// evaluation per side plus one linear map.
pub fn hessian_matrix(problem: &Problem, mu: &Ensemble, eps: f64) -> Result<HessianOperator> {
    check_step(eps)?;
    mu.require_uniform("hessian_matrix")?;
    problem.check_model(mu)?;
    let (n, k, d) = (mu.len(), mu.k(), mu.d());
    let m = k + d;
    if n * m > HESSIAN_BUDGET {
        return Err(Error::Budget {
            what: "Hessian operator",
            size: n * m,
            limit: HESSIAN_BUDGET,
        });
    }
    let x = problem.eval().samples();
    let samples = x.nrows();
    let act = problem.act();
    let a = mu.a_matrix();
    let (s, ds) = activations(&mu.w_matrix(), x, act);
    let h = features_from_activations(mu, &s);
    let inv_n = 1.0 / n as f64;
    let mut matrix = DMatrix::zeros(n * m, n * m);
    let mut h_plus = h.clone();
    let mut h_minus = h.clone();

    for (j, particle) in mu.particles().iter().enumerate() {
        for i in 0..m {
            h_plus.copy_from(&h);
            h_minus.copy_from(&h);
            if i < k {
                for col in 0..samples {
                    let delta = eps * inv_n * s[(j, col)];
                    h_plus[(i, col)] += delta;
                    h_minus[(i, col)] -= delta;
                }
            } else {
                let c = i - k;
                for col in 0..samples {
                    let z = (0..d).map(|t| particle.w[t] * x[(col, t)]).sum::<f64>();
                    let shift = eps * x[(col, c)];
                    let dp = act.value(z + shift) - s[(j, col)];
                    let dm = act.value(z - shift) - s[(j, col)];
                    for r in 0..k {
                        h_plus[(r, col)] += inv_n * particle.a[r] * dp;
                        h_minus[(r, col)] += inv_n * particle.a[r] * dm;
                    }
                }
            }
            let up = dual_field(problem, &h_plus, Objective::Reduced)?.u;
            let um = dual_field(problem, &h_minus, Objective::Reduced)?.u;
            let du = (up - um) / (2.0 * eps);
            let g = gradient_from_dual(&a, &s, &ds, &du, x);
            let column = j * m + i;
            for p in 0..n {
                for c in 0..m {
                    matrix[(p * m + c, column)] = g[(p, c)];
                }
            }
        }
    }
    Ok(HessianOperator {
        matrix,
        n,
        m,
        fd_step: eps,
        source: mu.fingerprint(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    /// Ascending eigenvalues of the symmetrized operator matrix.
    pub eigenvalues: Vec<f64>,
    pub lambda_0: f64,
    /// Eigenfield of `lambda_0` as `N x (k + d)`, normalized so that
    /// `(1/N) sum_p ||psi_0(theta_p)||^2 = 1`.
    pub psi_0: DMatrix<f64>,
    /// `|(1/N) sum_p psi_0(theta_p) . grad delta L(theta_p)|`.
    pub alpha: f64,
    pub asymmetry: f64,
}

/// Full spectrum of the operator together with the most unstable eigenfield
/// and its alignment with the gradient field `grad` (`N x (k + d)`).
pub fn eigen(op: &HessianOperator, grad: &DMatrix<f64>) -> Result<SpectralReport> {
    let (vals, vecs) = linalg::sym_eigen_large(&op.matrix)?;
    let lambda_0 = vals[0];
    let psi = unflatten(&vecs.column(0).into_owned(), op.n, op.m) * math::sqrt(op.n as f64);
    let alpha = (psi.dot(grad) / op.n as f64).abs();
    Ok(SpectralReport {
        eigenvalues: vals,
        lambda_0,
        psi_0: psi,
        alpha,
        asymmetry: op.asymmetry(),
    })
}

/// Assembles the operator at `mu` and returns its spectral report.
pub fn spectrum(problem: &Problem, mu: &Ensemble, eps: f64) -> Result<SpectralReport> {
    let op = hessian_matrix(problem, mu, eps)?;
    let field = gradient_field(problem, mu, Objective::Reduced)?;
    eigen(&op, &field.grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvoReport {
    /// Relative residual of `dG/dt = -H[G]` after one Euler step; `NaN` when
    /// the gradient field vanishes.
    pub residual: f64,
    pub grad_norm: f64,
    /// The gradient field is (numerically) zero: `mu` is a critical point and
    /// the check carries no information.
    pub degenerate: bool,
}

/// One Euler step of the particle flow with step `dt`, comparing the change of
/// the gradient field at the original particles with the operator action.
pub fn evo_check(problem: &Problem, mu: &Ensemble, dt: f64, eps: f64) -> Result<EvoReport> {
    if !(dt > 0.0 && dt <= 1e-3) {
        return Err(Error::InvalidConfig("evolution check needs 0 < dt <= 1e-3"));
    }
    let g0 = gradient_field(problem, mu, Objective::Reduced)?.grad;
    let grad_norm = l2_norm(&g0);
    if grad_norm < 1e-12 {
        return Ok(EvoReport {
            residual: f64::NAN,
            grad_norm,
            degenerate: true,
        });
    }
    let next = apply_step(mu, &g0, dt, false)?;
    let g1 = gradient_at(problem, &next, mu, Objective::Reduced)?;
    let hg = apply_hessian(problem, mu, &g0, eps)?;
    let resid = (g1 - &g0) / dt + &hg;
    Ok(EvoReport {
        residual: l2_norm(&resid) / l2_norm(&hg),
        grad_norm,
        degenerate: false,
    })
}

/// The term `t(theta, theta') = (a'^T S^{-1} a) (p(theta) . p(theta'))` with
/// `p(theta) = E[sigma(w.x) h°(x)]`, one of the pieces of the second
/// variation.
pub fn first_trace_term(problem: &Problem, pack: &CovPack, theta: &[f64], theta2: &[f64]) -> f64 {
    let k = pack.k();
    let a = DVector::from_column_slice(&theta[..k]);
    let a2 = DVector::from_column_slice(&theta2[..k]);
    let (p1, _) = teacher_moment(problem, &theta[k..]);
    let (p2, _) = teacher_moment(problem, &theta2[k..]);
    (a2.transpose() * &pack.w_opt * a)[(0, 0)] * p1.dot(&p2)
}

/// `(p(w), Jp(w))` with `Jp = E[sigma'(w.x) h°(x) x^T]` (`k° x d`).
fn teacher_moment(problem: &Problem, w: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let x = problem.eval().samples();
    let ht = problem.teacher_features();
    let (mm, d) = x.shape();
    let act = problem.act();
    let mut sv = DVector::zeros(mm);
    let mut dsv = DVector::zeros(mm);
    for r in 0..mm {
        let z: f64 = (0..d).map(|c| w[c] * x[(r, c)]).sum();
        let (v, dv) = act.value_and_derivative(z);
        sv[r] = v;
        dsv[r] = dv;
    }
    let p = ht * &sv / mm as f64;
    let mut weighted = x.clone();
    for r in 0..mm {
        weighted.row_mut(r).scale_mut(dsv[r]);
    }
    let jp = ht * weighted / mm as f64;
    (p, jp)
}

/// Analytic mixed second derivative `grad_theta grad_theta'^T t` as an
/// `m x m` matrix with blocks `[[aa', aw'], [wa', ww']]`.
pub fn first_trace_term_blocks(problem: &Problem, pack: &CovPack, theta: &[f64], theta2: &[f64]) -> DMatrix<f64> {
    let k = pack.k();
    let d = theta.len() - k;
    let a = DVector::from_column_slice(&theta[..k]);
    let a2 = DVector::from_column_slice(&theta2[..k]);
    let (p1, j1) = teacher_moment(problem, &theta[k..]);
    let (p2, j2) = teacher_moment(problem, &theta2[k..]);
    let sinv = &pack.w_opt;
    let coupling = (a2.transpose() * sinv * &a)[(0, 0)];
    let mut out = DMatrix::zeros(k + d, k + d);
    out.view_mut((0, 0), (k, k)).copy_from(&(sinv * p1.dot(&p2)));
    out.view_mut((0, k), (k, d)).copy_from(&(sinv * &a2 * (p1.transpose() * &j2)));
    out.view_mut((k, 0), (d, k)).copy_from(&(j1.transpose() * &p2 * (a.transpose() * sinv)));
    out.view_mut((k, k), (d, d)).copy_from(&(j1.transpose() * &j2 * coupling));
    out
}

/// Mixed second central differences of `t` in `(theta, theta')`.
pub fn first_trace_term_fd(problem: &Problem, pack: &CovPack, theta: &[f64], theta2: &[f64], eps: f64) -> DMatrix<f64> {
    let m = theta.len();
    let mut out = DMatrix::zeros(m, m);
    for r in 0..m {
        for c in 0..m {
            let mut total = 0.0;
            for (sr, sc, sign) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                let mut t1 = theta.to_vec();
                let mut t2 = theta2.to_vec();
                t1[r] += sr * eps;
                t2[c] += sc * eps;
                total += sign * first_trace_term(problem, pack, &t1, &t2);
            }
            out[(r, c)] = total / (4.0 * eps * eps);
        }
    }
    out
}
