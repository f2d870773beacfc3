//! Fixed Monte-Carlo quadrature: every expectation over inputs is an average
//! over one seeded evaluation set.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::sync::Arc;
use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::activation::Activation;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::linalg;
use crate::math;
use crate::{seeded_rng, Rng};

/// Minimum evaluation-set size accepted for training and probes.
pub const MIN_EVAL_SIZE: usize = 256;
pub const DEFAULT_EVAL_SIZE: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum InputDist {
    /// `x ~ N(0, I_d)`.
    #[default]
    Gaussian,
    /// Uniform on `[-sqrt(3), sqrt(3)]^d`, unit variance per coordinate.
    Uniform,
}

impl InputDist {
    pub fn name(self) -> &'static str {
        match self {
            InputDist::Gaussian => "gaussian",
            InputDist::Uniform => "uniform",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "gaussian" => Ok(InputDist::Gaussian),
            "uniform" => Ok(InputDist::Uniform),
            other => Err(Error::UnknownDistribution(other.to_string())),
        }
    }
}

/// Everything needed to regenerate an evaluation set bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EvalDescriptor {
    pub seed: u64,
    pub m: usize,
    pub d: usize,
    pub dist: InputDist,
}

impl EvalDescriptor {
    pub fn draw(&self) -> Result<EvalSet> {
        draw_eval_set(self.seed, self.m, self.d, self.dist)
    }
}

/// `M x d` matrix of input samples, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    descriptor: EvalDescriptor,
    samples: DMatrix<f64>,
}

pub fn draw_eval_set(seed: u64, m: usize, d: usize, dist: InputDist) -> Result<EvalSet> {
    if m == 0 {
        return Err(Error::InvalidConfig("evaluation set needs at least one sample"));
    }
    let mut rng = seeded_rng(seed);
    let samples = sample_inputs(m, d, dist, &mut rng);
    Ok(EvalSet {
        descriptor: EvalDescriptor { seed, m, d, dist },
        samples,
    })
}

/// `rows x d` matrix of fresh input draws.
pub fn sample_inputs(rows: usize, d: usize, dist: InputDist, rng: &mut Rng) -> DMatrix<f64> {
    let mut samples = DMatrix::zeros(rows, d);
    let half_width = math::sqrt(3.0);
    for row in 0..rows {
        for col in 0..d {
            samples[(row, col)] = match dist {
                InputDist::Gaussian => StandardNormal.sample(rng),
                InputDist::Uniform => half_width * (2.0 * rng.random::<f64>() - 1.0),
            };
        }
    }
    samples
}

impl EvalSet {
    /// Wraps explicit samples; the descriptor records `seed` only as a label.
    pub fn from_samples(samples: DMatrix<f64>, seed: u64, dist: InputDist) -> Self {
        EvalSet {
            descriptor: EvalDescriptor {
                seed,
                m: samples.nrows(),
                d: samples.ncols(),
                dist,
            },
            samples,
        }
    }

    pub fn descriptor(&self) -> EvalDescriptor {
        self.descriptor
    }

    pub fn seed(&self) -> u64 {
        self.descriptor.seed
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn m(&self) -> usize {
        self.samples.nrows()
    }

    pub fn d(&self) -> usize {
        self.samples.ncols()
    }

    pub fn sample(&self, m: usize) -> alloc::vec::Vec<f64> {
        self.samples.row(m).iter().copied().collect()
    }

    /// Empirical moments `(M2, M4) = (mean ||x||^2, mean ||x||^4)`.
    pub fn moments(&self) -> (f64, f64) {
        let mut m2 = 0.0;
        let mut m4 = 0.0;
        for row in self.samples.row_iter() {
            let sq = row.norm_squared();
            m2 += sq;
            m4 += sq * sq;
        }
        let m = self.m() as f64;
        (m2 / m, m4 / m)
    }
}

/// `k x M` matrix whose column `m` is `h_mu(x_m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: DMatrix<f64>,
    pub source: u64,
    pub eval_seed: u64,
}

/// Pre-activations `Z = W X^T` (`N x rows(x)`).
pub fn preactivations(mu: &Ensemble, x: &DMatrix<f64>) -> DMatrix<f64> {
    linalg::matmul(&mu.w_matrix(), false, x, true)
}

/// `k x rows(x)` matrix of network outputs at the rows of `x`.
pub fn feature_values(mu: &Ensemble, x: &DMatrix<f64>, act: Activation) -> Result<DMatrix<f64>> {
    if x.ncols() != mu.d() {
        return Err(Error::DimensionMismatch {
            context: "feature inputs",
            expected: mu.d(),
            got: x.ncols(),
        });
    }
    let mut s = preactivations(mu, x);
    s.apply(|z| *z = act.value(*z));
    Ok(features_from_activations(mu, &s))
}

/// `A^T diag(weights) S` for activations `S` (`N x M`).
pub fn features_from_activations(mu: &Ensemble, s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = mu.a_matrix();
    for (j, &wt) in mu.weights().iter().enumerate() {
        a.row_mut(j).scale_mut(wt);
    }
    linalg::matmul(&a, true, s, false)
}

pub fn features(mu: &Ensemble, e: &EvalSet, act: Activation) -> Result<FeatureMatrix> {
    Ok(FeatureMatrix {
        values: feature_values(mu, e.samples(), act)?,
        source: mu.fingerprint(),
        eval_seed: e.seed(),
    })
}

/// Memo of feature matrices keyed by ensemble fingerprint, evaluation-set
/// seed and activation.
#[derive(Debug, Default)]
pub struct FeatureCache {
    entries: BTreeMap<(u64, u64, Activation), Arc<FeatureMatrix>>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, mu: &Ensemble, e: &EvalSet, act: Activation) -> Result<Arc<FeatureMatrix>> {
        let key = (mu.fingerprint(), e.seed(), act);
        if let Some(hit) = self.entries.get(&key) {
            return Ok(Arc::clone(hit));
        }
        let fm = Arc::new(features(mu, e, act)?);
        self.entries.insert(key, Arc::clone(&fm));
        Ok(fm)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// `(1/M) H1 H2^T` for feature matrices sharing the same columns.
pub fn cov_from_features(h1: &DMatrix<f64>, h2: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(h1.ncols(), h2.ncols(), "feature matrices on different sample sets");
    let mut c = linalg::matmul(h1, false, h2, true);
    c /= h1.ncols() as f64;
    c
}

/// `Sigma_{mu,nu} = (1/M) sum_m h_mu(x_m) h_nu(x_m)^T`.
pub fn cov(mu: &Ensemble, nu: &Ensemble, e: &EvalSet, act: Activation) -> Result<DMatrix<f64>> {
    let hm = feature_values(mu, e.samples(), act)?;
    let hn = feature_values(nu, e.samples(), act)?;
    Ok(cov_from_features(&hm, &hn))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaSpectrum {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub rank: usize,
}

/// Relative threshold (times `trace / k`) below which eigenvalues of `Sigma`
/// count as zero.
pub const RANK_TOL: f64 = 1e-10;

pub fn spectrum_of(sigma: &DMatrix<f64>) -> SigmaSpectrum {
    let vals = linalg::sym_eigenvalues(sigma);
    let k = sigma.nrows().max(1) as f64;
    let cut = RANK_TOL * linalg::trace(sigma) / k;
    SigmaSpectrum {
        lambda_min: vals.first().copied().unwrap_or(0.0),
        lambda_max: vals.last().copied().unwrap_or(0.0),
        rank: vals.iter().filter(|&&v| v > cut).count(),
    }
}

pub fn sigma_spectrum(mu: &Ensemble, e: &EvalSet, act: Activation) -> Result<SigmaSpectrum> {
    let h = feature_values(mu, e.samples(), act)?;
    Ok(spectrum_of(&cov_from_features(&h, &h)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{h_ensemble, mix, random_init, Particle};
    use alloc::vec;

    #[test]
    fn same_seed_same_samples() {
        let a = draw_eval_set(7, 300, 5, InputDist::Gaussian).unwrap();
        let b = draw_eval_set(7, 300, 5, InputDist::Gaussian).unwrap();
        assert_eq!(a, b);
        let c = draw_eval_set(8, 300, 5, InputDist::Gaussian).unwrap();
        assert_ne!(a.samples(), c.samples());
    }

    #[test]
    fn unknown_distribution_is_an_error() {
        assert!(matches!(
            InputDist::from_name("cauchy"),
            Err(Error::UnknownDistribution(_))
        ));
        assert_eq!(InputDist::from_name("uniform"), Ok(InputDist::Uniform));
    }

    #[test]
    fn gaussian_moments() {
        let e = draw_eval_set(1, 100_000, 20, InputDist::Gaussian).unwrap();
        for c in 0..20 {
            let col = e.samples().column(c);
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 100_000.0;
            assert!((var - 1.0).abs() < 0.05);
        }
        let (m2, _) = e.moments();
        assert!((m2 / 20.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn features_match_pointwise_evaluation() {
        let e = draw_eval_set(2, 64, 4, InputDist::Gaussian).unwrap();
        let mut rng = seeded_rng(3);
        let mu = random_init(9, 3, 4, 0.5, &mut rng).unwrap();
        let f = features(&mu, &e, Activation::Sigmoid).unwrap();
        for m in 0..e.m() {
            let h = h_ensemble(&mu, &e.sample(m), Activation::Sigmoid).unwrap();
            for i in 0..3 {
                assert!((f.values[(i, m)] - h[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cache_returns_same_object() {
        let e = draw_eval_set(2, 64, 4, InputDist::Gaussian).unwrap();
        let mut rng = seeded_rng(3);
        let mu = random_init(9, 3, 4, 0.5, &mut rng).unwrap();
        let mut cache = FeatureCache::new();
        let a = cache.get(&mu, &e, Activation::Sigmoid).unwrap();
        let b = cache.get(&mu, &e, Activation::Sigmoid).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn rank_one_covariance_for_single_direction() {
        let e = draw_eval_set(4, 512, 3, InputDist::Gaussian).unwrap();
        let p = Particle::new(vec![1.0, 0.0, 0.0], vec![0.3, -0.2, 0.5]);
        let mu = Ensemble::uniform(vec![p.clone()]).unwrap();
        let c = cov(&mu, &mu, &e, Activation::Sigmoid).unwrap();
        let mut expect = 0.0;
        for m in 0..e.m() {
            let z: f64 = (0..3).map(|i| p.w[i] * e.samples()[(m, i)]).sum();
            let s = 1.0 / (1.0 + libm::exp(-z));
            expect += s * s;
        }
        expect /= e.m() as f64;
        assert!((c[(0, 0)] - expect).abs() < 1e-14);
        assert_eq!(c[(1, 1)], 0.0);
        assert_eq!(sigma_spectrum(&mu, &e, Activation::Sigmoid).unwrap().rank, 1);
    }

    #[test]
    fn cross_covariance_transposes_and_is_bilinear() {
        let e = draw_eval_set(5, 400, 4, InputDist::Gaussian).unwrap();
        let mut rng = seeded_rng(6);
        let mu = random_init(7, 3, 4, 0.5, &mut rng).unwrap();
        let nu = random_init(5, 3, 4, 0.5, &mut rng).unwrap();
        let rho = random_init(6, 2, 4, 0.5, &mut rng).unwrap();
        let act = Activation::Sigmoid;
        let a = cov(&mu, &nu, &e, act).unwrap();
        let b = cov(&nu, &mu, &e, act).unwrap();
        assert_eq!(a, b.transpose());
        let m = mix(&mu, &nu, 0.3).unwrap();
        let lhs = cov(&m, &rho, &e, act).unwrap();
        let rhs = cov(&mu, &rho, &e, act).unwrap() * 0.7 + cov(&nu, &rho, &e, act).unwrap() * 0.3;
        assert!((lhs - rhs).abs().max() < 1e-12);
    }

    #[test]
    fn spectrum_bounded_by_activation_sup() {
        let e = draw_eval_set(9, 512, 6, InputDist::Gaussian).unwrap();
        let mut rng = seeded_rng(10);
        for _ in 0..10 {
            let mu = random_init(30, 4, 6, 1.0, &mut rng).unwrap();
            let s = sigma_spectrum(&mu, &e, Activation::Sigmoid).unwrap();
            assert!(s.lambda_min >= -1e-12);
            assert!(s.lambda_max <= 1.0);
        }
    }
}
