//! Particle ensembles: weighted empirical measures on the parameter space
//! `Theta = R^k x R^d`, each particle a vector-valued neuron `x -> a * sigma(w.x)`.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DMatrix;
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::linalg;
use crate::math;
use crate::Rng;

/// A single neuron `theta = (a, w)` with output `a * sigma(w.x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    /// Second-layer direction, length `k`.
    pub a: Vec<f64>,
    /// First-layer weight, length `d`.
    pub w: Vec<f64>,
}

impl Particle {
    pub fn new(a: Vec<f64>, w: Vec<f64>) -> Self {
        Particle { a, w }
    }

    pub fn zeros(k: usize, d: usize) -> Self {
        Particle {
            a: vec![0.0; k],
            w: vec![0.0; d],
        }
    }

    /// Coordinates stacked as `(a, w)`, length `k + d`.
    pub fn coords(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.a.len() + self.w.len());
        out.extend_from_slice(&self.a);
        out.extend_from_slice(&self.w);
        out
    }

    pub fn from_coords(coords: &[f64], k: usize) -> Self {
        Particle {
            a: coords[..k].to_vec(),
            w: coords[k..].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(&self.w).all(|v| v.is_finite())
    }

    pub fn a_norm(&self) -> f64 {
        norm(&self.a)
    }

    /// Rescales `a` onto the closed unit ball if it lies outside.
    pub fn project_a(&mut self) {
        let n = self.a_norm();
        if n > 1.0 {
            self.a.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Evaluates a single neuron at `x`.
pub fn h_particle(theta: &Particle, x: &[f64], act: Activation) -> Result<Vec<f64>> {
    if theta.w.len() != x.len() {
        return Err(Error::DimensionMismatch {
            context: "h_particle input",
            expected: theta.w.len(),
            got: x.len(),
        });
    }
    let s = act.value(dot(&theta.w, x));
    Ok(theta.a.iter().map(|ai| ai * s).collect())
}

/// Weighted empirical measure `sum_j weight_j * delta_{theta_j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    particles: Vec<Particle>,
    weights: Vec<f64>,
    k: usize,
    d: usize,
}

const WEIGHT_TOL: f64 = 1e-12;

impl Ensemble {
    /// Builds a weighted ensemble, checking dimensions and normalization.
    pub fn new(particles: Vec<Particle>, weights: Vec<f64>) -> Result<Self> {
        let first = particles.first().ok_or(Error::EmptyEnsemble)?;
        let (k, d) = (first.a.len(), first.w.len());
        if weights.len() != particles.len() {
            return Err(Error::DimensionMismatch {
                context: "ensemble weights",
                expected: particles.len(),
                got: weights.len(),
            });
        }
        for p in &particles {
            if p.a.len() != k {
                return Err(Error::DimensionMismatch {
                    context: "particle a",
                    expected: k,
                    got: p.a.len(),
                });
            }
            if p.w.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "particle w",
                    expected: d,
                    got: p.w.len(),
                });
            }
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig("ensemble weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidConfig("ensemble weights must sum to 1"));
        }
        Ok(Ensemble {
            particles,
            weights,
            k,
            d,
        })
    }

    /// Uniform ensemble `(1/N) sum_j delta_{theta_j}`.
    pub fn uniform(particles: Vec<Particle>) -> Result<Self> {
        let n = particles.len();
        if n == 0 {
            return Err(Error::EmptyEnsemble);
        }
        Self::new(particles, vec![1.0 / n as f64; n])
    }

    /// Uniform ensemble from an `N x k` matrix of `a` rows and `N x d` matrix of
    /// `w` rows.
    pub fn from_matrices(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<Self> {
        if a.nrows() != w.nrows() {
            return Err(Error::DimensionMismatch {
                context: "from_matrices rows",
                expected: a.nrows(),
                got: w.nrows(),
            });
        }
        let particles = (0..a.nrows())
            .map(|j| {
                Particle::new(
                    a.row(j).iter().copied().collect(),
                    w.row(j).iter().copied().collect(),
                )
            })
            .collect();
        Self::uniform(particles)
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.len() as f64;
        self.weights.iter().all(|w| (w - u).abs() <= 1e-15)
    }

    pub fn require_uniform(&self, context: &'static str) -> Result<()> {
        if self.is_uniform() {
            Ok(())
        } else {
            Err(Error::NotUniform(context))
        }
    }

    /// `N x k` matrix whose rows are the `a` vectors.
    pub fn a_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.k, |j, i| self.particles[j].a[i])
    }

    /// `N x d` matrix whose rows are the `w` vectors.
    pub fn w_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.d, |j, i| self.particles[j].w[i])
    }

    /// `N x (k + d)` matrix of stacked particle coordinates.
    pub fn coord_matrix(&self) -> DMatrix<f64> {
        let m = self.k + self.d;
        DMatrix::from_fn(self.len(), m, |j, i| {
            let p = &self.particles[j];
            if i < self.k {
                p.a[i]
            } else {
                p.w[i - self.k]
            }
        })
    }

    /// Replaces the particle coordinates keeping the weights.
    pub fn with_coord_matrix(&self, coords: &DMatrix<f64>) -> Result<Self> {
        if coords.shape() != (self.len(), self.k + self.d) {
            return Err(Error::DimensionMismatch {
                context: "coordinate matrix",
                expected: self.len() * (self.k + self.d),
                got: coords.len(),
            });
        }
        let particles = (0..self.len())
            .map(|j| {
                let row: Vec<f64> = coords.row(j).iter().copied().collect();
                Particle::from_coords(&row, self.k)
            })
            .collect();
        Ok(Ensemble {
            particles,
            weights: self.weights.clone(),
            k: self.k,
            d: self.d,
        })
    }

    /// Replaces the particles keeping the weights.
    pub fn with_particles(&self, particles: Vec<Particle>) -> Result<Self> {
        Ensemble::new(particles, self.weights.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.particles.iter().all(Particle::is_finite)
    }

    /// 64-bit FNV-1a fingerprint of dimensions, weights and coordinates.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.k as u64);
        h.write_u64(self.d as u64);
        h.write_u64(self.len() as u64);
        for (p, w) in self.particles.iter().zip(&self.weights) {
            h.write_u64(w.to_bits());
            for v in p.a.iter().chain(&p.w) {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }
}

/// Evaluates the mean-field network `h_mu(x) = sum_j weight_j a_j sigma(w_j.x)`.
pub fn h_ensemble(mu: &Ensemble, x: &[f64], act: Activation) -> Result<Vec<f64>> {
    if mu.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if x.len() != mu.d {
        return Err(Error::DimensionMismatch {
            context: "h_ensemble input",
            expected: mu.d,
            got: x.len(),
        });
    }
    let mut out = vec![0.0; mu.k];
    for (p, &wt) in mu.particles.iter().zip(&mu.weights) {
        let s = wt * act.value(dot(&p.w, x));
        for (o, ai) in out.iter_mut().zip(&p.a) {
            *o += s * ai;
        }
    }
    Ok(out)
}

/// A linear map `R` on the second layer with spectral norm at most one.
#[derive(Debug, Clone, PartialEq)]
pub struct Rotation {
    matrix: DMatrix<f64>,
}

/// Slack allowed on the unit spectral-norm bound.
pub const ROTATION_NORM_TOL: f64 = 1e-9;

impl Rotation {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let norm = linalg::spectral_norm(&matrix);
        if norm > 1.0 + ROTATION_NORM_TOL {
            return Err(Error::RotationNorm(norm));
        }
        Ok(Rotation { matrix })
    }

    pub fn identity(k: usize) -> Self {
        Rotation {
            matrix: DMatrix::identity(k, k),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    fn require_square(&self) -> Result<usize> {
        let (r, c) = self.matrix.shape();
        if r != c {
            return Err(Error::RotationShape { rows: r, cols: c });
        }
        Ok(r)
    }
}

/// Largest second-layer dimension for which the `2^k`-term hull decomposition
/// is attempted.
pub const MAX_HULL_DIM: usize = 20;

/// Writes `R` as a convex combination `sum_j alpha_j Q_j` of orthogonal matrices.
///
/// With the SVD `R = U D V^T`, every sign pattern `s in {+-1}^k` contributes
/// `Q_s = U diag(s) V^T` with weight `prod_i (1 + s_i d_i) / 2`. Zero-weight
/// terms are dropped.
pub fn hull_decompose(rotation: &Rotation) -> Result<Vec<(f64, DMatrix<f64>)>> {
    let k = rotation.require_square()?;
    if k > MAX_HULL_DIM {
        return Err(Error::HullTooLarge(k));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let (u, s, v) = linalg::svd(rotation.matrix());
    // singular values within the norm tolerance of 1 are extreme already
    let d: Vec<f64> = s
        .iter()
        .map(|&x| if x >= 1.0 - 1e-12 { 1.0 } else { x.max(0.0) })
        .collect();
    let mut terms = Vec::new();
    for pattern in 0u32..(1u32 << k) {
        let mut weight = 1.0;
        for (i, di) in d.iter().enumerate() {
            let sign = if pattern >> i & 1 == 0 { 1.0 } else { -1.0 };
            weight *= (1.0 + sign * di) / 2.0;
        }
        if weight == 0.0 {
            continue;
        }
        let mut us = u.clone();
        for i in 0..k {
            if pattern >> i & 1 == 1 {
                us.column_mut(i).neg_mut();
            }
        }
        terms.push((weight, &us * v.transpose()));
    }
    Ok(terms)
}

/// Rotation pushforward `R#mu = sum_j alpha_j (Q_j # mu)` realized through the
/// hull decomposition, so that `h_{R#mu}(x) = R h_mu(x)`.
pub fn rotate_pushforward(mu: &Ensemble, rotation: &Rotation) -> Result<Ensemble> {
    let k = rotation.require_square()?;
    if k != mu.k {
        return Err(Error::DimensionMismatch {
            context: "rotation vs ensemble k",
            expected: mu.k,
            got: k,
        });
    }
    let terms = hull_decompose(rotation)?;
    let mut particles = Vec::with_capacity(terms.len() * mu.len());
    let mut weights = Vec::with_capacity(terms.len() * mu.len());
    for (alpha, q) in &terms {
        for (p, &wt) in mu.particles.iter().zip(&mu.weights) {
            let a = q * nalgebra::DVector::from_column_slice(&p.a);
            particles.push(Particle::new(a.iter().copied().collect(), p.w.clone()));
            weights.push(alpha * wt);
        }
    }
    renormalize(&mut weights);
    Ensemble::new(particles, weights)
}

/// Mixture `(1 - s) mu + s nu`.
pub fn mix(mu: &Ensemble, nu: &Ensemble, s: f64) -> Result<Ensemble> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidMixture(s));
    }
    if mu.k != nu.k || mu.d != nu.d {
        return Err(Error::DimensionMismatch {
            context: "mixture dimensions",
            expected: mu.k + mu.d,
            got: nu.k + nu.d,
        });
    }
    if s == 0.0 {
        return Ok(mu.clone());
    }
    if s == 1.0 {
        return Ok(nu.clone());
    }
    let mut particles = mu.particles.clone();
    particles.extend(nu.particles.iter().cloned());
    let mut weights: Vec<f64> = mu.weights.iter().map(|w| (1.0 - s) * w).collect();
    weights.extend(nu.weights.iter().map(|w| s * w));
    renormalize(&mut weights);
    Ensemble::new(particles, weights)
}

/// Parameters of the resampling distribution `pi`: `a` uniform on the sphere of
/// radius `a_scale`, `w ~ N(0, w_std^2 I_d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiConfig {
    pub a_scale: f64,
    pub w_std: f64,
    /// Emit particles in pairs `(a, w), (-a, w)`: the sample mean of `a` is
    /// exactly zero and the pair's network output cancels identically.
    pub antithetic: bool,
}

impl Default for PiConfig {
    fn default() -> Self {
        PiConfig {
            a_scale: 0.5,
            w_std: 1.0,
            antithetic: true,
        }
    }
}

/// Draws `n` particles from `pi`.
pub fn sample_pi(n: usize, k: usize, d: usize, cfg: &PiConfig, rng: &mut Rng) -> Result<Vec<Particle>> {
    if cfg.antithetic && n % 2 != 0 {
        return Err(Error::InvalidConfig("antithetic sampling needs an even count"));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let a = sphere(k, cfg.a_scale, rng);
        let w = gaussian(d, cfg.w_std, rng);
        if cfg.antithetic {
            let neg: Vec<f64> = a.iter().map(|v| -v).collect();
            out.push(Particle::new(a, w.clone()));
            out.push(Particle::new(neg, w));
        } else {
            out.push(Particle::new(a, w));
        }
    }
    Ok(out)
}

/// `sum_j weight_j ||a_j|| ||w_j||`.
pub fn path_norm(mu: &Ensemble) -> f64 {
    mu.particles
        .iter()
        .zip(&mu.weights)
        .map(|(p, w)| w * norm(&p.a) * norm(&p.w))
        .sum()
}

/// Second moment of the `a` marginal, `sum_j weight_j ||a_j||^2`.
pub fn second_moment_a(mu: &Ensemble) -> f64 {
    mu.particles
        .iter()
        .zip(&mu.weights)
        .map(|(p, w)| w * dot(&p.a, &p.a))
        .sum()
}

/// Uniform ensemble over `n` distinct particles of `mu` chosen without
/// replacement. Returns `mu` itself (reweighted uniformly) when `n >= N`.
pub fn subsample(mu: &Ensemble, n: usize, rng: &mut Rng) -> Result<Ensemble> {
    if n >= mu.len() {
        return Ensemble::uniform(mu.particles.clone());
    }
    let mut picked = index::sample(rng, mu.len(), n).into_vec();
    picked.sort_unstable();
    Ensemble::uniform(picked.into_iter().map(|j| mu.particles[j].clone()).collect())
}

/// Random initialization: `a` uniform on the sphere of radius `a_radius`,
/// `w ~ N(0, I_d / d)`.
pub fn random_init(n: usize, k: usize, d: usize, a_radius: f64, rng: &mut Rng) -> Result<Ensemble> {
    let w_std = 1.0 / math::sqrt(d as f64);
    let particles = (0..n)
        .map(|_| {
            let a = sphere(k, a_radius, rng);
            let w = gaussian(d, w_std, rng);
            Particle::new(a, w)
        })
        .collect();
    Ensemble::uniform(particles)
}

pub(crate) fn sphere(k: usize, radius: f64, rng: &mut Rng) -> Vec<f64> {
    loop {
        let g = gaussian(k, 1.0, rng);
        let n = norm(&g);
        if n > 1e-300 {
            return g.into_iter().map(|v| radius * v / n).collect();
        }
    }
}

pub(crate) fn gaussian(n: usize, std: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[inline]
pub(crate) fn norm(x: &[f64]) -> f64 {
    math::sqrt(dot(x, x))
}

fn renormalize(weights: &mut [f64]) {
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter_mut().for_each(|w| *w /= total);
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}
