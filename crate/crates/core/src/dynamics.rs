//! Particle gradient descent on the functional derivative, attention-layer
//! descent, birth-death resampling, Gaussian-process perturbations and the
//! training loop that combines them.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
use rand::seq::index;

use crate::activation::Activation;
use crate::ensemble::{gaussian, mix, sample_pi, Ensemble, Particle, PiConfig};
use crate::error::{Error, Result};
use crate::linalg;
use crate::math;
use crate::objective::{CovPack, Problem};
use crate::quadrature::{cov_from_features, feature_values, sample_inputs, spectrum_of};
use crate::{seeded_rng, Rng};

pub use crate::ensemble::second_moment_a;

/// Which objective drives the particles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective<'a> {
    /// Reduced loss with the attention matrix at its closed-form optimum.
    Reduced,
    /// Transformer risk at a fixed attention matrix.
    Attention(&'a DMatrix<f64>),
}

/// Dual field `U` (`k x M`) of an objective: the first variation is
/// `delta L(theta) = -(1/M) sum_m u_m . h_theta(x_m)`.
#[derive(Debug, Clone)]
pub struct Dual {
    pub u: DMatrix<f64>,
    pub loss: f64,
    /// Covariance bundle, present for the reduced objective.
    pub pack: Option<CovPack>,
}

/// Dual field from model features `h` (`k x M`) and teacher features.
///
/// For the reduced loss `U = B^T zeta - (eps / k) ||B||_F^2 h` where the second
/// term is the derivative of the ridge shift; it makes `∫ delta L dmu = 0`
/// hold exactly.
pub fn dual_field(problem: &Problem, h: &DMatrix<f64>, objective: Objective<'_>) -> Result<Dual> {
    dual_field_with(problem, h, problem.teacher_features(), objective)
}

fn dual_field_with(
    problem: &Problem,
    h: &DMatrix<f64>,
    h_teacher: &DMatrix<f64>,
    objective: Objective<'_>,
) -> Result<Dual> {
    let m = h.ncols() as f64;
    match objective {
        Objective::Reduced => {
            let sigma_oo = cov_from_features(h_teacher, h_teacher);
            let pack = CovPack::new(h, h_teacher, &sigma_oo, problem.ridge())?;
            let mut zeta = h_teacher.clone();
            linalg::gemm(-1.0, &pack.b, false, h, false, 1.0, &mut zeta);
            let mut u = linalg::matmul(&pack.b, true, &zeta, false);
            let coef = problem.ridge() / h.nrows() as f64 * pack.b.norm_squared();
            if coef != 0.0 {
                u -= h * coef;
            }
            Ok(Dual {
                u,
                loss: pack.loss,
                pack: Some(pack),
            })
        }
        Objective::Attention(w) => {
            let sigma_om = cov_from_features(h_teacher, h);
            let p = &sigma_om * w;
            let mut r = h_teacher.clone();
            linalg::gemm(-1.0, &p, false, h, false, 1.0, &mut r);
            let wh = w * h;
            let t = linalg::matmul(&r, false, &wh, true) / m;
            let mut u = linalg::matmul(&p, true, &r, false);
            linalg::gemm(1.0, &t, true, h_teacher, false, 1.0, &mut u);
            Ok(Dual {
                u,
                loss: 0.5 * r.norm_squared() / m,
                pack: None,
            })
        }
    }
}

/// Activations `S` and derivatives `S'` (`N x rows(x)`) of a set of first-layer
/// weights.
pub fn activations(w: &DMatrix<f64>, x: &DMatrix<f64>, act: Activation) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut s = linalg::matmul(w, false, x, true);
    let mut ds = DMatrix::zeros(s.nrows(), s.ncols());
    for (z, dz) in s.as_mut_slice().iter_mut().zip(ds.as_mut_slice().iter_mut()) {
        let (v, dv) = act.value_and_derivative(*z);
        *z = v;
        *dz = dv;
    }
    (s, ds)
}

/// Gradients `grad_theta delta L(theta_j)` stacked as rows `(grad_a, grad_w)`
/// for particles with second layers `a` (`N x k`) and activations `s`, `ds`.
pub fn gradient_from_dual(
    a: &DMatrix<f64>,
    s: &DMatrix<f64>,
    ds: &DMatrix<f64>,
    u: &DMatrix<f64>,
    x: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = a.nrows();
    let k = a.ncols();
    let d = x.ncols();
    let scale = -1.0 / x.nrows() as f64;
    let ga = {
        let mut g = DMatrix::zeros(n, k);
        linalg::gemm(scale, s, false, u, true, 0.0, &mut g);
        g
    };
    let mut c = linalg::matmul(a, false, u, false);
    c.component_mul_assign(ds);
    let mut gw = DMatrix::zeros(n, d);
    linalg::gemm(scale, &c, false, x, false, 0.0, &mut gw);
    let mut out = DMatrix::zeros(n, k + d);
    out.columns_mut(0, k).copy_from(&ga);
    out.columns_mut(k, d).copy_from(&gw);
    out
}

/// Gradient field of the first variation over the particles of `mu`.
#[derive(Debug, Clone)]
pub struct Field {
    /// `N x (k + d)` rows `grad delta L(mu, theta_j)`.
    pub grad: DMatrix<f64>,
    pub loss: f64,
    /// `k x M` model features.
    pub h: DMatrix<f64>,
    pub dual: Dual,
}

pub fn gradient_field(problem: &Problem, mu: &Ensemble, objective: Objective<'_>) -> Result<Field> {
    problem.check_model(mu)?;
    let x = problem.eval().samples();
    field_on(problem, mu, x, problem.teacher_features(), objective)
}

fn field_on(
    problem: &Problem,
    mu: &Ensemble,
    x: &DMatrix<f64>,
    h_teacher: &DMatrix<f64>,
    objective: Objective<'_>,
) -> Result<Field> {
    let pre = Preactivated::new(problem, mu, x);
    pre.field(problem, mu, x, h_teacher, objective)
}

/// Activations and features of an ensemble on a set of inputs, computed once
/// so that the attention matrix can be updated before the dual field.
struct Preactivated {
    s: DMatrix<f64>,
    ds: DMatrix<f64>,
    h: DMatrix<f64>,
}

impl Preactivated {
    fn new(problem: &Problem, mu: &Ensemble, x: &DMatrix<f64>) -> Self {
        let (s, ds) = activations(&mu.w_matrix(), x, problem.act());
        let h = crate::quadrature::features_from_activations(mu, &s);
        Preactivated { s, ds, h }
    }

    fn field(
        self,
        problem: &Problem,
        mu: &Ensemble,
        x: &DMatrix<f64>,
        h_teacher: &DMatrix<f64>,
        objective: Objective<'_>,
    ) -> Result<Field> {
        let dual = dual_field_with(problem, &self.h, h_teacher, objective)?;
        let grad = gradient_from_dual(&mu.a_matrix(), &self.s, &self.ds, &dual.u, x);
        Ok(Field {
            grad,
            loss: dual.loss,
            h: self.h,
            dual,
        })
    }
}

/// Gradient of the first variation of `mu`'s objective evaluated at the
/// particles of `at` (which need not belong to `mu`).
pub fn gradient_at(problem: &Problem, mu: &Ensemble, at: &Ensemble, objective: Objective<'_>) -> Result<DMatrix<f64>> {
    let h = problem.features(mu)?;
    let dual = dual_field(problem, &h, objective)?;
    let x = problem.eval().samples();
    let (s, ds) = activations(&at.w_matrix(), x, problem.act());
    Ok(gradient_from_dual(&at.a_matrix(), &s, &ds, &dual.u, x))
}

/// `delta L / delta mu` of the reduced loss at `theta`, normalized so that its
/// `mu`-average is zero.
pub fn func_deriv(problem: &Problem, mu: &Ensemble, theta: &Particle) -> Result<f64> {
    let h = problem.features(mu)?;
    let dual = dual_field(problem, &h, Objective::Reduced)?;
    let single = Ensemble::uniform(vec![theta.clone()])?;
    let ht = feature_values(&single, problem.eval().samples(), problem.act())?;
    Ok(-dual.u.dot(&ht) / ht.ncols() as f64)
}

/// `(grad_a, grad_w)` of `func_deriv` at `theta`.
pub fn grad_func_deriv(problem: &Problem, mu: &Ensemble, theta: &Particle) -> Result<(Vec<f64>, Vec<f64>)> {
    let single = Ensemble::uniform(vec![theta.clone()])?;
    let g = gradient_at(problem, mu, &single, Objective::Reduced)?;
    let k = theta.a.len();
    let row: Vec<f64> = g.row(0).iter().copied().collect();
    Ok((row[..k].to_vec(), row[k..].to_vec()))
}

/// Simultaneous update `theta_j -= eta * grad delta L(mu, theta_j)`.
pub fn gd_step(problem: &Problem, mu: &Ensemble, eta: f64, project_a: bool) -> Result<Ensemble> {
    mu.require_uniform("gd_step")?;
    let field = gradient_field(problem, mu, Objective::Reduced)?;
    apply_step(mu, &field.grad, eta, project_a)
}

pub fn apply_step(mu: &Ensemble, grad: &DMatrix<f64>, eta: f64, project_a: bool) -> Result<Ensemble> {
    let mut coords = mu.coord_matrix();
    coords -= grad * eta;
    let mut next = mu.with_coord_matrix(&coords)?;
    if project_a {
        next = project(&next)?;
    }
    Ok(next)
}

fn project(mu: &Ensemble) -> Result<Ensemble> {
    let particles = mu
        .particles()
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q.project_a();
            q
        })
        .collect();
    mu.with_particles(particles)
}

/// Replaces `floor(gamma N)` uniformly chosen particles by fresh draws from
/// `pi`. Returns the new ensemble and the number of replaced particles; zero
/// when `gamma N < 1`.
pub fn birth_death(mu: &Ensemble, gamma: f64, pi: &PiConfig, rng: &mut Rng) -> Result<(Ensemble, usize)> {
    mu.require_uniform("birth_death")?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidConfig("gamma must lie in [0, 1)"));
    }
    let count = math::floor(gamma * mu.len() as f64) as usize;
    if count == 0 {
        return Ok((mu.clone(), 0));
    }
    let draw = if pi.antithetic { count + count % 2 } else { count };
    let fresh = sample_pi(draw, mu.k(), mu.d(), pi, rng)?;
    let mut chosen = index::sample(rng, mu.len(), count).into_vec();
    chosen.sort_unstable();
    let mut particles = mu.particles().to_vec();
    for (slot, p) in chosen.into_iter().zip(fresh) {
        particles[slot] = p;
    }
    Ok((mu.with_particles(particles)?, count))
}

/// Exact mixture form of birth-death, `(1 - gamma) mu + gamma pi_n`.
pub fn birth_death_mixture(mu: &Ensemble, gamma: f64, pi: &PiConfig, n_pi: usize, rng: &mut Rng) -> Result<Ensemble> {
    let fresh = sample_pi(n_pi, mu.k(), mu.d(), pi, rng)?;
    mix(mu, &Ensemble::uniform(fresh)?, gamma)
}

/// Squared-exponential kernel parameters of the perturbation field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpConfig {
    pub sigma_p: f64,
    pub ell: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig { sigma_p: 0.1, ell: 1.0 }
    }
}

/// Largest ensemble for which the dense Gram factorization is attempted.
pub const GP_MAX_PARTICLES: usize = 10_000;
const GP_JITTER: f64 = 1e-10;
const GP_MAX_JITTER: f64 = 1e-2;

/// Samples an `N x (k + d)` velocity field whose columns are independent
/// Gaussian processes with kernel `sigma_p^2 exp(-|theta - theta'|^2 / (2 ell^2))`
/// evaluated at the particles. Coincident particles receive identical values.
pub fn gp_field(mu: &Ensemble, gp: &GpConfig, rng: &mut Rng) -> Result<DMatrix<f64>> {
    let n = mu.len();
    let m = mu.k() + mu.d();
    if n > GP_MAX_PARTICLES {
        return Err(Error::Budget {
            what: "GP perturbation",
            size: n,
            limit: GP_MAX_PARTICLES,
        });
    }
    if gp.sigma_p == 0.0 {
        return Ok(DMatrix::zeros(n, m));
    }
    let coords = mu.coord_matrix();
    let mut unique: Vec<usize> = Vec::new();
    let mut slot = vec![0usize; n];
    for j in 0..n {
        let found = unique.iter().position(|&u| coords.row(u) == coords.row(j));
        slot[j] = match found {
            Some(pos) => pos,
            None => {
                unique.push(j);
                unique.len() - 1
            }
        };
    }
    let nu = unique.len();
    let var = gp.sigma_p * gp.sigma_p;
    let inv = 1.0 / (2.0 * gp.ell * gp.ell);
    let gram = DMatrix::from_fn(nu, nu, |i, j| {
        let diff = coords.row(unique[i]) - coords.row(unique[j]);
        var * math::exp(-diff.norm_squared() * inv)
    });
    let mut jitter = GP_JITTER;
    let chol = loop {
        let mut g = gram.clone();
        for i in 0..nu {
            g[(i, i)] += jitter;
        }
        if let Some(c) = nalgebra::linalg::Cholesky::new(g) {
            break c;
        }
        jitter *= 10.0;
        if jitter > GP_MAX_JITTER * var.max(1e-300) {
            return Err(Error::CholeskyFailed { jitter });
        }
    };
    let z = DMatrix::from_vec(nu, m, gaussian(nu * m, 1.0, rng));
    let xi_unique = chol.l() * z;
    Ok(DMatrix::from_fn(n, m, |j, c| xi_unique[(slot[j], c)]))
}

/// `theta_j -= eta_p xi(theta_j)` for a freshly sampled GP field `xi`.
pub fn gp_perturb(mu: &Ensemble, gp: &GpConfig, eta_p: f64, rng: &mut Rng) -> Result<Ensemble> {
    let xi = gp_field(mu, gp, rng)?;
    apply_step(mu, &xi, eta_p, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Mode {
    /// Joint descent on particles and the attention matrix.
    Attention,
    /// Descent on the reduced loss, no resampling events.
    #[default]
    Static,
    /// Descent on the reduced loss with birth-death and GP perturbations.
    Modified,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Attention => "attention",
            Mode::Static => "static",
            Mode::Modified => "modified",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "attention" => Some(Mode::Attention),
            "static" => Some(Mode::Static),
            "modified" => Some(Mode::Modified),
            _ => None,
        }
    }

    pub const ALL: [Mode; 3] = [Mode::Attention, Mode::Static, Mode::Modified];
}

/// Initial attention matrix in attention mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionInit {
    Zero,
    #[default]
    Optimum,
}

/// Full-batch descent on the fixed evaluation set, or a fresh minibatch of
/// inputs every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Batch {
    #[default]
    Full,
    Stochastic { size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    /// Attention step size in units of the inverse Lipschitz constant
    /// `1 / (lambda_max(S_mo S_om) lambda_max(S_mm))`, so values below `2`
    /// are stable. `0` keeps `W` at the closed-form optimum.
    pub eta_w: f64,
    /// Attention updates per particle step.
    pub w_steps: usize,
    /// Backtracking line search on the particle step: `eta` becomes the
    /// largest step tried, halved until the loss decreases sufficiently.
    /// Ignored for stochastic batches.
    pub backtrack: bool,
    pub gamma: f64,
    pub eta_p: f64,
    /// Minimum number of steps between perturbations.
    pub tau: usize,
    /// Birth-death fires when the relative loss decrease over a window is at
    /// most `delta_b`.
    pub delta_b: f64,
    /// Perturbation fires when the relative decrease is at most `delta_p`.
    pub delta_p: f64,
    /// Window length of the improvement test.
    pub window: usize,
    /// Stop once the loss is at most `epsilon`.
    pub epsilon: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub gp: GpConfig,
    pub pi: PiConfig,
    pub mode: Mode,
    pub project_a: bool,
    pub attention_init: AttentionInit,
    pub batch: Batch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 0.05,
            eta_w: 1.0,
            w_steps: 1,
            backtrack: false,
            gamma: 0.05,
            eta_p: 0.1,
            tau: 500,
            delta_b: 0.01,
            delta_p: 0.01,
            window: 100,
            epsilon: 0.0,
            max_steps: 1000,
            seed: 0,
            gp: GpConfig::default(),
            pi: PiConfig::default(),
            mode: Mode::Static,
            project_a: false,
            attention_init: AttentionInit::Optimum,
            batch: Batch::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::InvalidConfig("eta must be positive"));
        }
        if !(0.0..2.0).contains(&self.eta_w) {
            return Err(Error::InvalidConfig("eta_w must lie in [0, 2)"));
        }
        if self.w_steps == 0 {
            return Err(Error::InvalidConfig("w_steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig("gamma must lie in [0, 1)"));
        }
        if !(self.delta_b >= self.delta_p && self.delta_p >= 0.0) {
            return Err(Error::InvalidConfig("need delta_b >= delta_p >= 0"));
        }
        if self.window == 0 {
            return Err(Error::InvalidConfig("window must be positive"));
        }
        if let Batch::Stochastic { size } = self.batch {
            if size == 0 {
                return Err(Error::InvalidConfig("minibatch size must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Event {
    #[default]
    None,
    BirthDeath,
    Perturb,
    /// Both events fired at the same window boundary.
    Both,
}

impl Event {
    pub fn name(self) -> &'static str {
        match self {
            Event::None => "none",
            Event::BirthDeath => "birth_death",
            Event::Perturb => "perturb",
            Event::Both => "birth_death+perturb",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub m_a: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Event applied just before this state was reached.
    pub event: Event,
    /// `||grad delta L||` in `L^2(mu)`.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    MaxSteps,
    Aborted { step: usize },
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub status: Status,
    pub final_ensemble: Ensemble,
    pub final_attention: Option<DMatrix<f64>>,
}

impl TrainLog {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn initial_loss(&self) -> f64 {
        self.records.first().map_or(f64::NAN, |r| r.loss)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Optional per-step observer: receives each record together with the
/// ensemble it describes.
pub type Observer<'a> = &'a mut dyn FnMut(&StepRecord, &Ensemble);

/// Runs the training loop.
pub fn train(problem: &Problem, mu0: &Ensemble, cfg: &TrainConfig) -> Result<TrainLog> {
    train_observed(problem, mu0, cfg, &mut |_, _| {})
}

pub fn train_observed(problem: &Problem, mu0: &Ensemble, cfg: &TrainConfig, observer: Observer<'_>) -> Result<TrainLog> {
    cfg.validate()?;
    mu0.require_uniform("train")?;
    problem.check_model(mu0)?;
    let mut rng = seeded_rng(cfg.seed);
    let mut batch_rng = seeded_rng(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut mu = mu0.clone();
    let mut w = match cfg.mode {
        Mode::Attention => Some(match cfg.attention_init {
            AttentionInit::Zero => DMatrix::zeros(mu.k(), mu.k()),
            AttentionInit::Optimum => problem.attention_optimum(&mu)?,
        }),
        _ => None,
    };
    let mut records = Vec::new();
    let mut pending = Event::None;
    let mut window_ref = f64::NAN;
    let mut last_perturb = 0usize;
    let mut status = Status::MaxSteps;
    let mut eta = cfg.eta;
    let mut carried: Option<Preactivated> = None;

    for step in 0..=cfg.max_steps {
        let batch = match cfg.batch {
            Batch::Full => None,
            Batch::Stochastic { size } => {
                let x = sample_inputs(size, problem.d(), problem.eval().descriptor().dist, &mut batch_rng);
                let ht = feature_values(problem.teacher(), &x, problem.act())?;
                Some((x, ht))
            }
        };
        let (x, ht) = match &batch {
            None => (problem.eval().samples(), problem.teacher_features()),
            Some((x, ht)) => (x, ht),
        };
        let pre = match carried.take() {
            Some(pre) => pre,
            None => Preactivated::new(problem, &mu, x),
        };
        if step > 0 {
            if let Some(wm) = &mut w {
                *wm = if cfg.eta_w > 0.0 {
                    attention_steps(ht, &pre.h, wm, cfg.eta_w, cfg.w_steps)
                } else {
                    match problem.attention_optimum(&mu) {
                        Ok(opt) => opt,
                        Err(Error::SingularCovariance { .. }) => {
                            status = Status::Aborted { step };
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                };
            }
        }
        let objective = match (&w, cfg.eta_w) {
            (Some(wm), eta_w) if eta_w > 0.0 => Objective::Attention(wm),
            _ => Objective::Reduced,
        };
        let field = match pre.field(problem, &mu, x, ht, objective) {
            Ok(f) => f,
            Err(Error::SingularCovariance { .. }) => {
                status = Status::Aborted { step };
                break;
            }
            Err(e) => return Err(e),
        };
        let loss = field.loss;
        let spec = spectrum_of(&cov_from_features(&field.h, &field.h));
        let grad_norm = l2_norm(&field.grad);
        let record = StepRecord {
            step,
            loss,
            m_a: second_moment_a(&mu),
            sigma_min: spec.lambda_min,
            sigma_max: spec.lambda_max,
            event: pending,
            grad_norm,
        };
        pending = Event::None;
        observer(&record, &mu);
        records.push(record);
        if !loss.is_finite() || !mu.is_finite() {
            status = Status::Aborted { step };
            break;
        }
        if loss <= cfg.epsilon {
            status = Status::Converged;
            break;
        }
        if step == cfg.max_steps {
            break;
        }
        if step == 0 {
            window_ref = loss;
        }

        if cfg.backtrack && batch.is_none() {
            let decrease = grad_norm * grad_norm;
            eta = (2.0 * eta).min(cfg.eta);
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                let trial = apply_step(&mu, &field.grad, eta, cfg.project_a)?;
                let trial_pre = Preactivated::new(problem, &trial, x);
                let trial_loss = objective_loss(problem, &trial_pre.h, ht, objective);
                if matches!(trial_loss, Ok(l) if l <= loss - ARMIJO * eta * decrease) {
                    accepted = Some((trial, trial_pre));
                    break;
                }
                eta *= 0.5;
            }
            match accepted {
                Some((trial, trial_pre)) => {
                    mu = trial;
                    carried = Some(trial_pre);
                }
                None => mu = apply_step(&mu, &field.grad, eta, cfg.project_a)?,
            }
        } else {
            mu = apply_step(&mu, &field.grad, cfg.eta, cfg.project_a)?;
        }

        let t = step + 1;
        if cfg.mode == Mode::Modified && t % cfg.window == 0 && t < cfg.max_steps {
            let improvement = if window_ref > 0.0 { (window_ref - loss) / window_ref } else { 0.0 };
            window_ref = loss;
            let mut fired_bd = false;
            let mut fired_p = false;
            if improvement <= cfg.delta_b {
                let (next, count) = birth_death(&mu, cfg.gamma, &cfg.pi, &mut rng)?;
                mu = next;
                fired_bd = count > 0;
            }
            if improvement <= cfg.delta_p && t - last_perturb > cfg.tau {
                mu = gp_perturb(&mu, &cfg.gp, cfg.eta_p, &mut rng)?;
                last_perturb = t;
                fired_p = true;
            }
            if fired_bd || fired_p {
                carried = None;
                eta = cfg.eta;
            }
            pending = match (fired_bd, fired_p) {
                (true, true) => Event::Both,
                (true, false) => Event::BirthDeath,
                (false, true) => Event::Perturb,
                (false, false) => Event::None,
            };
        }
    }

    Ok(TrainLog {
        records,
        status,
        final_ensemble: mu,
        final_attention: w,
    })
}

const MAX_BACKTRACKS: usize = 40;
const ARMIJO: f64 = 1e-4;

fn objective_loss(problem: &Problem, h: &DMatrix<f64>, h_teacher: &DMatrix<f64>, objective: Objective<'_>) -> Result<f64> {
    match objective {
        Objective::Reduced => {
            let sigma_oo = cov_from_features(h_teacher, h_teacher);
            Ok(CovPack::new(h, h_teacher, &sigma_oo, problem.ridge())?.loss)
        }
        Objective::Attention(w) => {
            let sigma_om = cov_from_features(h_teacher, h);
            let p = sigma_om * w;
            let mut r = h_teacher.clone();
            linalg::gemm(-1.0, &p, false, h, false, 1.0, &mut r);
            Ok(0.5 * r.norm_squared() / h.ncols() as f64)
        }
    }
}

/// `steps` attention updates `W <- W - eta G(W)` with the relative step `eta`
/// scaled by the inverse Lipschitz constant of the attention gradient.
pub fn attention_steps(h_teacher: &DMatrix<f64>, h: &DMatrix<f64>, w: &DMatrix<f64>, eta: f64, steps: usize) -> DMatrix<f64> {
    let k = h.nrows();
    let sigma_mm = cov_from_features(h, h);
    let sigma_om = cov_from_features(h_teacher, h);
    let gram = sigma_om.transpose() * &sigma_om;
    let top = |m: &DMatrix<f64>| linalg::sym_eigenvalues(m).iter().fold(0.0f64, |acc, &v| acc.max(v));
    let lip = top(&gram) * top(&sigma_mm);
    if !(lip > 0.0) {
        return w.clone();
    }
    let step = eta / lip;
    let mut w = w.clone();
    let mut resid = DMatrix::<f64>::zeros(k, k);
    for _ in 0..steps {
        resid.gemm(1.0, &w, &sigma_mm, 0.0);
        for i in 0..k {
            resid[(i, i)] -= 1.0;
        }
        w.gemm(-step, &gram, &resid, 1.0);
    }
    w
}

/// `sqrt((1/N) sum_j ||g_j||^2)`.
pub fn l2_norm(field: &DMatrix<f64>) -> f64 {
    math::sqrt(field.norm_squared() / field.nrows().max(1) as f64)
}

/// Loss of `mu` under the objective a mode trains on.
pub fn mode_loss(problem: &Problem, mu: &Ensemble, w: Option<&DMatrix<f64>>) -> Result<f64> {
    match w {
        Some(w) => problem.loss_tf(mu, w),
        None => Ok(problem.reduced_loss(mu)?.loss),
    }
}

/// `(1/N) sum_j ||v_j||^2` and mean of `a` for diagnostics.
pub fn mean_a(mu: &Ensemble) -> DVector<f64> {
    let mut out = DVector::zeros(mu.k());
    for (p, w) in mu.particles().iter().zip(mu.weights()) {
        out += DVector::from_column_slice(&p.a) * *w;
    }
    out
}
