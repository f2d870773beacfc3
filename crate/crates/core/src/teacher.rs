//! Teacher measures and specially constructed model ensembles.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::activation::Activation;
use crate::ensemble::{gaussian, sphere, Ensemble, Particle};
use crate::error::{Error, Result};
use crate::linalg;
use crate::quadrature::{cov_from_features, feature_values, EvalSet};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherSpec {
    /// Teacher feature dimension `k°`.
    pub k: usize,
    /// Number of teacher atoms `N°`.
    pub n: usize,
    /// Dimension of the span of the teacher's `a` vectors; `rank < k` gives a
    /// degenerate teacher with singular `Sigma_oo`.
    pub rank: usize,
    /// Per-coordinate standard deviation of the teacher's first-layer weights.
    pub w_std: f64,
}

impl TeacherSpec {
    pub fn new(k: usize, n: usize) -> Self {
        TeacherSpec {
            k,
            n,
            rank: k,
            w_std: 1.0,
        }
    }
}

/// Draws a teacher ensemble and rescales its second layer so that
/// `Sigma_oo = P / k` on the evaluation set, where `P` is the projector onto
/// the span of the `a` vectors (the identity unless the teacher is degenerate).
pub fn build_teacher(spec: &TeacherSpec, e: &EvalSet, act: Activation, rng: &mut Rng) -> Result<Ensemble> {
    if spec.rank == 0 || spec.rank > spec.k || spec.n == 0 {
        return Err(Error::InvalidConfig("teacher needs 1 <= rank <= k and n >= 1"));
    }
    let d = e.d();
    let basis = if spec.rank < spec.k {
        random_orthonormal(spec.k, spec.rank, rng)
    } else {
        DMatrix::identity(spec.k, spec.k)
    };
    let particles = (0..spec.n)
        .map(|_| {
            let low = DVector::from_vec(sphere(spec.rank, 1.0, rng));
            let a = &basis * low;
            Particle::new(a.iter().copied().collect(), gaussian(d, spec.w_std, rng))
        })
        .collect();
    let raw = Ensemble::uniform(particles)?;
    whiten(&raw, e, act)
}

/// Applies `a -> T a` with `T = Sigma^{+1/2} / sqrt(k)` so that the rescaled
/// covariance equals `P / k` on the range of `Sigma`.
pub fn whiten(mu: &Ensemble, e: &EvalSet, act: Activation) -> Result<Ensemble> {
    let h = feature_values(mu, e.samples(), act)?;
    let sigma = cov_from_features(&h, &h);
    let k = mu.k() as f64;
    let t = linalg::psd_inverse_sqrt(&sigma, 1e-9) / crate::math::sqrt(k);
    transform_a(mu, &t)
}

/// Applies a linear map to every second-layer vector.
pub fn transform_a(mu: &Ensemble, t: &DMatrix<f64>) -> Result<Ensemble> {
    let particles = mu
        .particles()
        .iter()
        .map(|p| {
            let a = t * DVector::from_column_slice(&p.a);
            Particle::new(a.iter().copied().collect(), p.w.clone())
        })
        .collect();
    mu.with_particles(particles)
}

/// Critical point of the reduced loss that is not a global minimum.
///
/// The teacher's atoms are kept with their `a` vectors projected off a unit
/// direction `z`; `n_extra` new atoms with `a = c_j z` are appended, where the
/// coefficients `c` make the scalar feature `sum_j c_j sigma(w_j.x)`
/// uncorrelated with every teacher feature on the evaluation set. The residual
/// is then `z z^T h°`, which is orthogonal to every direction the model can
/// reach at first order, and the loss equals `z^T Sigma_oo z / 2`.
pub fn degenerate_saddle(
    teacher: &Ensemble,
    n_extra: usize,
    w_std: f64,
    e: &EvalSet,
    act: Activation,
    rng: &mut Rng,
) -> Result<Ensemble> {
    let k = teacher.k();
    let d = teacher.d();
    if n_extra <= k {
        return Err(Error::InvalidConfig("degenerate saddle needs more than k extra atoms"));
    }
    teacher.require_uniform("degenerate saddle")?;
    let z = DVector::from_vec(sphere(k, 1.0, rng));
    let proj = DMatrix::identity(k, k) - &z * z.transpose();

    let extra_w: Vec<Vec<f64>> = (0..n_extra).map(|_| gaussian(d, w_std, rng)).collect();
    let probe_particles = extra_w
        .iter()
        .enumerate()
        .map(|(j, w)| {
            let mut a = alloc::vec![0.0; n_extra];
            a[j] = 1.0;
            Particle::new(a, w.clone())
        })
        .collect();
    // rows of this ensemble's output are the individual sigma(w_j.x)
    let probe = Ensemble::new(probe_particles, alloc::vec![1.0 / n_extra as f64; n_extra])?;
    let s = feature_values(&probe, e.samples(), act)? * n_extra as f64;
    let h_teacher = feature_values(teacher, e.samples(), act)?;
    let g = cov_from_features(&h_teacher, &s);
    let (_, sv, v) = linalg::svd(&(g.transpose() * &g));
    let top = sv.first().copied().unwrap_or(0.0);
    let mut c = DVector::zeros(n_extra);
    for (i, &val) in sv.iter().enumerate() {
        if val <= 1e-12 * top {
            let coef = gaussian(1, 1.0, rng)[0];
            c += v.column(i) * coef;
        }
    }
    let cmax = c.amax();
    if cmax == 0.0 {
        return Err(Error::InvalidConfig("no decorrelated direction found"));
    }
    c /= cmax;

    let mut particles: Vec<Particle> = teacher
        .particles()
        .iter()
        .map(|p| {
            let a = &proj * DVector::from_column_slice(&p.a);
            Particle::new(a.iter().copied().collect(), p.w.clone())
        })
        .collect();
    let scale = teacher.len() as f64 / n_extra as f64;
    for (j, w) in extra_w.into_iter().enumerate() {
        let a = &z * (c[j] * scale);
        particles.push(Particle::new(a.iter().copied().collect(), w));
    }
    Ensemble::uniform(particles)
}

/// `k x r` matrix with orthonormal columns.
pub fn random_orthonormal(k: usize, r: usize, rng: &mut Rng) -> DMatrix<f64> {
    let g = DMatrix::from_vec(k, r, gaussian(k * r, 1.0, rng));
    let qr = nalgebra::linalg::QR::new(g);
    qr.q().columns(0, r).into_owned()
}

/// Random rotation-type matrix with spectral norm exactly `norm`.
pub fn random_contraction(k: usize, norm: f64, rng: &mut Rng) -> DMatrix<f64> {
    let g = DMatrix::from_vec(k, k, gaussian(k * k, 1.0, rng));
    let s = linalg::spectral_norm(&g);
    g * (norm / s)
}
