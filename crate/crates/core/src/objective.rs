//! Transformer risk, the closed-form attention optimum and the reduced
//! objective obtained by eliminating the attention matrix.

use nalgebra::{DMatrix, DVector};

use crate::activation::Activation;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::linalg;
use crate::quadrature::{cov_from_features, feature_values, sample_inputs, EvalSet};
use crate::Rng;

/// Default relative ridge added to `Sigma_mm` before inversion.
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// A learning problem: teacher, quadrature, activation and ridge.
#[derive(Debug, Clone)]
pub struct Problem {
    teacher: Ensemble,
    eval: EvalSet,
    act: Activation,
    ridge: f64,
    h_teacher: DMatrix<f64>,
    sigma_oo: DMatrix<f64>,
}

impl Problem {
    pub fn new(teacher: Ensemble, eval: EvalSet, act: Activation) -> Result<Self> {
        Self::with_ridge(teacher, eval, act, DEFAULT_RIDGE)
    }

    pub fn with_ridge(teacher: Ensemble, eval: EvalSet, act: Activation, ridge: f64) -> Result<Self> {
        if !(ridge >= 0.0) {
            return Err(Error::InvalidConfig("ridge must be nonnegative"));
        }
        let h_teacher = feature_values(&teacher, eval.samples(), act)?;
        let sigma_oo = cov_from_features(&h_teacher, &h_teacher);
        Ok(Problem {
            teacher,
            eval,
            act,
            ridge,
            h_teacher,
            sigma_oo,
        })
    }

    /// Same teacher and activation on a different evaluation set.
    pub fn on_eval_set(&self, eval: EvalSet) -> Result<Self> {
        Self::with_ridge(self.teacher.clone(), eval, self.act, self.ridge)
    }

    pub fn teacher(&self) -> &Ensemble {
        &self.teacher
    }

    pub fn eval(&self) -> &EvalSet {
        &self.eval
    }

    pub fn act(&self) -> Activation {
        self.act
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn d(&self) -> usize {
        self.eval.d()
    }

    pub fn k_teacher(&self) -> usize {
        self.teacher.k()
    }

    /// `k° x M` teacher features on the evaluation set.
    pub fn teacher_features(&self) -> &DMatrix<f64> {
        &self.h_teacher
    }

    pub fn sigma_oo(&self) -> &DMatrix<f64> {
        &self.sigma_oo
    }

    /// `k x M` model features on the evaluation set.
    pub fn features(&self, mu: &Ensemble) -> Result<DMatrix<f64>> {
        self.check_model(mu)?;
        feature_values(mu, self.eval.samples(), self.act)
    }

    pub fn check_model(&self, mu: &Ensemble) -> Result<()> {
        if mu.d() != self.d() {
            return Err(Error::DimensionMismatch {
                context: "model input dimension",
                expected: self.d(),
                got: mu.d(),
            });
        }
        Ok(())
    }

    /// Reduced objective and its covariance bundle.
    pub fn reduced_loss(&self, mu: &Ensemble) -> Result<CovPack> {
        let h = self.features(mu)?;
        self.cov_pack(&h)
    }

    pub fn cov_pack(&self, h: &DMatrix<f64>) -> Result<CovPack> {
        CovPack::new(h, &self.h_teacher, &self.sigma_oo, self.ridge)
    }

    /// `L_TF(mu, W)` by direct quadrature of the squared prediction error.
    pub fn loss_tf(&self, mu: &Ensemble, w: &DMatrix<f64>) -> Result<f64> {
        let h = self.features(mu)?;
        self.loss_tf_from_features(&h, w)
    }

    pub fn loss_tf_from_features(&self, h: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<f64> {
        check_attention(w, h.nrows())?;
        let sigma_om = cov_from_features(&self.h_teacher, h);
        let p = sigma_om * w;
        let mut r = self.h_teacher.clone();
        linalg::gemm(-1.0, &p, false, h, false, 1.0, &mut r);
        Ok(0.5 * r.norm_squared() / h.ncols() as f64)
    }

    /// `L_TF(mu, W)` through the trace identity
    /// `tr S_oo / 2 - tr(S_om W S_mo) + tr(W^T S_mo S_om W S_mm) / 2`.
    pub fn loss_tf_trace(&self, mu: &Ensemble, w: &DMatrix<f64>) -> Result<f64> {
        let h = self.features(mu)?;
        check_attention(w, h.nrows())?;
        let sigma_mm = cov_from_features(&h, &h);
        let sigma_om = cov_from_features(&self.h_teacher, &h);
        let sigma_mo = sigma_om.transpose();
        let first = 0.5 * linalg::trace(&self.sigma_oo);
        let second = linalg::trace_of_product(&(&sigma_om * w), &sigma_mo);
        let third = 0.5 * linalg::trace_of_product(&(w.transpose() * &sigma_mo * &sigma_om * w), &sigma_mm);
        Ok(first - second + third)
    }

    /// Canonical minimizer `W = Sigma_mm^{-1}` (ridge-regularized).
    pub fn attention_optimum(&self, mu: &Ensemble) -> Result<DMatrix<f64>> {
        Ok(self.reduced_loss(mu)?.w_opt)
    }

    /// One explicit step of the attention gradient flow
    /// `W' = W - eta_w S_mo S_om (W S_mm - I)`.
    pub fn attention_gd_step(&self, mu: &Ensemble, w: &DMatrix<f64>, eta_w: f64) -> Result<DMatrix<f64>> {
        let h = self.features(mu)?;
        check_attention(w, h.nrows())?;
        Ok(attention_step_from_features(&self.h_teacher, &h, w, eta_w))
    }

    /// Monte-Carlo estimate of the finite-prompt risk with `n` context pairs,
    /// tasks `v ~ N(0, I)` and fresh inputs.
    pub fn finite_prompt_loss(
        &self,
        mu: &Ensemble,
        w: &DMatrix<f64>,
        n: usize,
        prompts: usize,
        rng: &mut Rng,
    ) -> Result<f64> {
        if n == 0 || prompts == 0 {
            return Err(Error::InvalidConfig("finite prompt loss needs n >= 1 and prompts >= 1"));
        }
        self.check_model(mu)?;
        check_attention(w, mu.k())?;
        let dist = self.eval.descriptor().dist;
        let k_o = self.k_teacher();
        let mut total = 0.0;
        for _ in 0..prompts {
            let v = DVector::from_vec(crate::ensemble::gaussian(k_o, 1.0, rng));
            let x = sample_inputs(n + 1, self.d(), dist, rng);
            let h = feature_values(mu, &x, self.act)?;
            let h_o = feature_values(&self.teacher, &x, self.act)?;
            let y = h_o.transpose() * &v;
            let ctx = h.columns(0, n) * y.rows(0, n) / n as f64;
            let pred = (ctx.transpose() * w * h.column(n))[(0, 0)];
            let err = y[n] - pred;
            total += 0.5 * err * err;
        }
        Ok(total / prompts as f64)
    }

    /// In-context test error on a scalar task `g`. The context average
    /// `g_bar = E[g h_mu]` uses the problem's evaluation set; the error and
    /// the projection floor `inf_v E(g - v^T h°)^2` are computed on `query`.
    pub fn test_error(
        &self,
        mu: &Ensemble,
        w: &DMatrix<f64>,
        g: &dyn Fn(&[f64]) -> f64,
        query: &EvalSet,
    ) -> Result<TestError> {
        self.check_model(mu)?;
        check_attention(w, mu.k())?;
        let h = self.features(mu)?;
        let g_ctx = eval_scalar(g, &self.eval);
        let g_bar = &h * &g_ctx / self.eval.m() as f64;

        let hq = feature_values(mu, query.samples(), self.act)?;
        let gq = eval_scalar(g, query);
        let pred = hq.transpose() * (w.transpose() * g_bar);
        let error = (&gq - pred).norm_squared() / query.m() as f64;

        let ho = feature_values(&self.teacher, query.samples(), self.act)?;
        let floor = projection_floor(&ho, &gq);
        Ok(TestError { error, floor })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestError {
    pub error: f64,
    pub floor: f64,
}

fn eval_scalar(g: &dyn Fn(&[f64]) -> f64, e: &EvalSet) -> DVector<f64> {
    DVector::from_fn(e.m(), |m, _| g(&e.sample(m)))
}

/// `min_v (1/M) ||g - H^T v||^2` by least squares.
pub fn projection_floor(h: &DMatrix<f64>, g: &DVector<f64>) -> f64 {
    let m = h.ncols() as f64;
    let gram = h * h.transpose() / m;
    let rhs = h * g / m;
    let svd = nalgebra::linalg::SVD::new(gram, true, true);
    let v = svd.solve(&rhs, 1e-12).unwrap_or_else(|_| DVector::zeros(h.nrows()));
    (g - h.transpose() * v).norm_squared() / m
}

fn check_attention(w: &DMatrix<f64>, k: usize) -> Result<()> {
    if w.shape() != (k, k) {
        return Err(Error::DimensionMismatch {
            context: "attention matrix",
            expected: k,
            got: w.nrows(),
        });
    }
    Ok(())
}

fn attention_step_from_features(
    h_teacher: &DMatrix<f64>,
    h: &DMatrix<f64>,
    w: &DMatrix<f64>,
    eta_w: f64,
) -> DMatrix<f64> {
    let k = h.nrows();
    let sigma_mm = cov_from_features(h, h);
    let sigma_om = cov_from_features(h_teacher, h);
    let grad = sigma_om.transpose() * &sigma_om * (w * sigma_mm - DMatrix::identity(k, k));
    w - grad * eta_w
}

/// Covariance bundle of a model ensemble against the teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct CovPack {
    pub sigma_mm: DMatrix<f64>,
    pub sigma_om: DMatrix<f64>,
    pub sigma_oo: DMatrix<f64>,
    /// Ridge-regularized inverse of `Sigma_mm`, which is also the attention
    /// optimum.
    pub w_opt: DMatrix<f64>,
    /// Regression coefficient `Sigma_om Sigma_mm^{-1}`.
    pub b: DMatrix<f64>,
    /// Residual matrix `(Sigma_oo - B Sigma_mo) / 2`.
    pub l_mat: DMatrix<f64>,
    pub loss: f64,
    pub r_lo: f64,
    pub r_hi: f64,
    /// Relative ridge `eps` (the shift added is `eps * tr(Sigma_mm) / k`).
    pub ridge: f64,
}

impl CovPack {
    pub fn new(h: &DMatrix<f64>, h_teacher: &DMatrix<f64>, sigma_oo: &DMatrix<f64>, ridge: f64) -> Result<Self> {
        let k = h.nrows();
        let sigma_mm = cov_from_features(h, h);
        let sigma_om = cov_from_features(h_teacher, h);
        let tr = linalg::trace(&sigma_mm);
        if !(tr > 0.0) || !tr.is_finite() {
            return Err(Error::SingularCovariance { lambda_min: 0.0 });
        }
        let mut reg = sigma_mm.clone();
        let shift = ridge * tr / k as f64;
        for i in 0..k {
            reg[(i, i)] += shift;
        }
        let w_opt = linalg::spd_inverse(&reg).ok_or_else(|| Error::SingularCovariance {
            lambda_min: linalg::sym_eigenvalues(&reg)[0],
        })?;
        if w_opt.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularCovariance {
                lambda_min: linalg::sym_eigenvalues(&reg)[0],
            });
        }
        let b = &sigma_om * &w_opt;
        let explained = &b * sigma_om.transpose();
        let l_mat = linalg::symmetrize(&((sigma_oo - explained) * 0.5));
        let loss = linalg::trace(&l_mat);
        let vals = linalg::sym_eigenvalues(sigma_oo);
        Ok(CovPack {
            sigma_mm,
            sigma_om,
            sigma_oo: sigma_oo.clone(),
            w_opt,
            b,
            l_mat,
            loss,
            r_lo: vals.first().copied().unwrap_or(0.0),
            r_hi: vals.last().copied().unwrap_or(0.0),
            ridge,
        })
    }

    pub fn k(&self) -> usize {
        self.sigma_mm.nrows()
    }

    pub fn k_teacher(&self) -> usize {
        self.sigma_oo.nrows()
    }

    /// `L_TF(mu, 0) = tr(Sigma_oo) / 2`, the trivial upper bound.
    pub fn zero_readout_loss(&self) -> f64 {
        0.5 * linalg::trace(&self.sigma_oo)
    }

    /// Best achievable loss for a rank-`k` feature map:
    /// half the sum of all but the top `k` eigenvalues of `Sigma_oo`.
    pub fn rank_floor(&self) -> f64 {
        let vals = linalg::sym_eigenvalues(&self.sigma_oo);
        let drop = vals.len().saturating_sub(self.k());
        0.5 * vals[..drop].iter().sum::<f64>()
    }
}
