//! Figure reproductions, the finite-width scaling study and the
//! propagation-of-chaos study.

use icfl_core::dynamics::{train, train_observed, Mode, Status, TrainLog};
use icfl_core::ensemble::{h_ensemble, path_norm, subsample};
use icfl_core::landscape::probe;
use icfl_core::objective::{CovPack, Problem, TestError};
use icfl_core::quadrature::{feature_values, spectrum_of, EvalDescriptor};
use icfl_core::spectral::{spectrum, SpectralReport};
use icfl_core::{seeded_rng, Ensemble};
use rand::Rng as _;

use crate::error::{LabError, Result};
use crate::io::{num, train_table, Provenance, ProbeJson, SpectrumJson, Table};
use crate::scenario::Scenario;
use crate::stats::{loglog_slope, smooth_log, spearman};

/// Widths of the scaling study.
pub const SCALING_WIDTHS: [usize; 7] = [50, 100, 200, 400, 800, 1600, 3200];
/// Widths of the chaos study and its reference width.
pub const CHAOS_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const CHAOS_REFERENCE: usize = 1024;
/// Length of the window used to smooth curves before comparing them.
pub const SMOOTHING: usize = 100;

fn provenance(scn: &Scenario) -> Provenance {
    Provenance {
        scenario: scn.hash(),
        seed: scn.seed,
    }
}

/// Runs training and turns a numerical abort into an error.
pub fn run(problem: &Problem, mu0: &Ensemble, scn: &Scenario, mode: Mode, seed: u64) -> Result<TrainLog> {
    let log = train(problem, mu0, &scn.train_config(mode, seed))?;
    check_status(&log)?;
    Ok(log)
}

fn check_status(log: &TrainLog) -> Result<()> {
    match log.status {
        Status::Aborted { step } => Err(LabError::Aborted { step }),
        _ => Ok(()),
    }
}

/// First step at which the loss is at most `ratio` times its initial value.
pub fn steps_to_ratio(log: &TrainLog, ratio: f64) -> Option<usize> {
    let l0 = log.initial_loss();
    log.records.iter().find(|r| r.loss <= ratio * l0).map(|r| r.step)
}

/// Largest relative gap between two smoothed loss curves from `from` on.
pub fn curve_gap(a: &[f64], b: &[f64], from: usize) -> f64 {
    let n = a.len().min(b.len());
    let sa = smooth_log(&a[..n], SMOOTHING);
    let sb = smooth_log(&b[..n], SMOOTHING);
    (from.min(n)..n)
        .map(|t| (sa[t] - sb[t]).abs() / sb[t])
        .fold(0.0, f64::max)
}

/// End of the initial transient: the first step at which `log` has lost one
/// order of magnitude.
pub fn transient_end(log: &TrainLog) -> usize {
    steps_to_ratio(log, 0.1).unwrap_or(log.records.len())
}

/// Single training run.
pub struct TrainRun {
    pub table: Table,
    pub log: TrainLog,
}

pub fn run_train(scn: &Scenario) -> Result<TrainRun> {
    let problem = scn.problem()?;
    let mu0 = scn.init_model(scn.seed)?;
    let log = train(&problem, &mu0, &scn.train_config(scn.train.mode, scn.seed))?;
    Ok(TrainRun {
        table: train_table(&log, provenance(scn)),
        log,
    })
}

pub struct Fig1a {
    pub table: Table,
    pub runs: Vec<(Mode, TrainLog)>,
}

impl Fig1a {
    pub fn log(&self, mode: Mode) -> &TrainLog {
        &self.runs.iter().find(|(m, _)| *m == mode).expect("all modes run").1
    }

    /// Largest relative gap between the smoothed attention and static curves
    /// once a full smoothing window past the transient is available.
    pub fn attention_static_gap(&self) -> f64 {
        let st = self.log(Mode::Static);
        let at = self.log(Mode::Attention);
        let from = transient_end(st).max(transient_end(at)) + SMOOTHING;
        curve_gap(&at.losses(), &st.losses(), from)
    }
}

fn require_matched(scn: &Scenario) -> Result<()> {
    if scn.teacher_k != scn.k {
        return Err(LabError::Mismatch(format!(
            "this experiment needs teacher_k = k, got {} and {}",
            scn.teacher_k, scn.k
        )));
    }
    Ok(())
}

fn curves_table(scn: &Scenario, runs: &[(u64, Mode, TrainLog)]) -> Table {
    let mut t = Table::new(provenance(scn), &["seed", "step", "mode", "loss"]);
    for (seed, mode, log) in runs {
        for r in &log.records {
            t.push(vec![seed.to_string(), r.step.to_string(), mode.name().to_string(), num(r.loss)]);
        }
    }
    t
}

/// Attention, static and modified training from one initialization.
pub fn run_fig1a(scn: &Scenario) -> Result<Fig1a> {
    require_matched(scn)?;
    let problem = scn.problem()?;
    let mu0 = scn.init_model(scn.seed)?;
    let mut runs = Vec::new();
    for mode in Mode::ALL {
        runs.push((mode, run(&problem, &mu0, scn, mode, scn.seed)?));
    }
    let mut table = Table::new(provenance(scn), &["step", "mode", "loss"]);
    for (mode, log) in &runs {
        for r in &log.records {
            table.push(vec![r.step.to_string(), mode.name().to_string(), num(r.loss)]);
        }
    }
    Ok(Fig1a { table, runs })
}

pub struct Fig1b {
    pub table: Table,
    pub lambda_min_oo: f64,
    /// `(seed, static final loss, modified final loss)`.
    pub finals: Vec<(u64, f64, f64)>,
}

impl Fig1b {
    pub fn wins(&self) -> usize {
        self.finals.iter().filter(|(_, s, m)| m < s).count()
    }
}

/// Static against modified training on a degenerate teacher, over
/// `scn.seeds` initializations.
pub fn run_fig1b(scn: &Scenario) -> Result<Fig1b> {
    require_matched(scn)?;
    if scn.teacher_rank == 0 || scn.teacher_rank >= scn.teacher_k {
        return Err(LabError::Mismatch("fig1b needs 0 < teacher_rank < teacher_k".into()));
    }
    let problem = scn.problem()?;
    let lambda_min_oo = spectrum_of(problem.sigma_oo()).lambda_min;
    let mut runs = Vec::new();
    let mut finals = Vec::new();
    for i in 0..scn.seeds as u64 {
        let seed = scn.seed + i;
        let mu0 = scn.init_model(seed)?;
        let st = run(&problem, &mu0, scn, Mode::Static, seed)?;
        let md = run(&problem, &mu0, scn, Mode::Modified, seed)?;
        finals.push((seed, st.final_loss(), md.final_loss()));
        runs.push((seed, Mode::Static, st));
        runs.push((seed, Mode::Modified, md));
    }
    Ok(Fig1b {
        table: curves_table(scn, &runs),
        lambda_min_oo,
        finals,
    })
}

pub struct Fig1c {
    pub table: Table,
    pub log: TrainLog,
    /// Best loss reachable with `k` features.
    pub floor: f64,
}

impl Fig1c {
    /// Relative improvement over the last `span` steps.
    pub fn tail_improvement(&self, span: usize) -> f64 {
        let l = self.log.losses();
        let last = l[l.len() - 1];
        let before = l[l.len().saturating_sub(span + 1)];
        (before - last) / before
    }
}

/// Static training of a `k`-feature model on a teacher with more features.
pub fn run_fig1c(scn: &Scenario) -> Result<Fig1c> {
    if scn.teacher_k <= scn.k {
        return Err(LabError::Mismatch("fig1c needs teacher_k > k".into()));
    }
    let problem = scn.problem()?;
    let mu0 = scn.init_model(scn.seed)?;
    let log = run(&problem, &mu0, scn, Mode::Static, scn.seed)?;
    let floor = problem.reduced_loss(&mu0)?.rank_floor();
    let mut table = Table::new(provenance(scn), &["step", "loss", "floor"]);
    for r in &log.records {
        table.push(vec![r.step.to_string(), num(r.loss), num(floor)]);
    }
    Ok(Fig1c { table, log, floor })
}

pub struct Fig1dPoint {
    pub step: usize,
    pub loss: f64,
    pub test: TestError,
}

pub struct Fig1d {
    pub table: Table,
    pub points: Vec<Fig1dPoint>,
}

impl Fig1d {
    pub fn spearman(&self) -> f64 {
        let l: Vec<f64> = self.points.iter().map(|p| p.loss).collect();
        let e: Vec<f64> = self.points.iter().map(|p| p.test.error).collect();
        spearman(&l, &e)
    }
}

/// Query set for test errors, disjoint from the training quadrature.
pub fn query_descriptor(scn: &Scenario) -> EvalDescriptor {
    EvalDescriptor {
        seed: scn.eval_seed.wrapping_add(0x5eed),
        ..scn.eval_descriptor()
    }
}

/// Test error of the in-context norm task `g(x) = ||h_teacher(x)||` along a
/// static training trajectory.
pub fn run_fig1d(scn: &Scenario) -> Result<Fig1d> {
    require_matched(scn)?;
    let problem = scn.problem()?;
    let query = query_descriptor(scn).draw()?;
    let teacher = problem.teacher().clone();
    let act = problem.act();
    let g = move |x: &[f64]| {
        h_ensemble(&teacher, x, act)
            .map(|h| h.iter().map(|v| v * v).sum::<f64>().sqrt())
            .unwrap_or(f64::NAN)
    };
    let mu0 = scn.init_model(scn.seed)?;
    let cfg = scn.train_config(Mode::Static, scn.seed);
    let every = scn.record_every.max(1);
    let mut points = Vec::new();
    let mut failure = None;
    let log = train_observed(&problem, &mu0, &cfg, &mut |rec, mu| {
        if failure.is_some() || (rec.step % every != 0 && rec.step != cfg.max_steps) {
            return;
        }
        let test = problem
            .reduced_loss(mu)
            .and_then(|pack| problem.test_error(mu, &pack.w_opt, &g, &query));
        match test {
            Ok(test) => points.push(Fig1dPoint {
                step: rec.step,
                loss: rec.loss,
                test,
            }),
            Err(e) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    check_status(&log)?;
    let mut table = Table::new(provenance(scn), &["step", "loss", "test_error", "floor"]);
    for p in &points {
        table.push(vec![p.step.to_string(), num(p.loss), num(p.test.error), num(p.test.floor)]);
    }
    Ok(Fig1d { table, points })
}

pub struct Scaling {
    pub table: Table,
    /// `(N, mean error over draws)`.
    pub means: Vec<(usize, f64)>,
    pub teacher_path_norm: f64,
    /// Path norms of every draw.
    pub path_norms: Vec<f64>,
    /// Error of the duplicate-teacher control.
    pub control: f64,
}

impl Scaling {
    pub fn slope(&self) -> f64 {
        let n: Vec<f64> = self.means.iter().map(|m| m.0 as f64).collect();
        let e: Vec<f64> = self.means.iter().map(|m| m.1).collect();
        loglog_slope(&n, &e)
    }

    pub fn path_norm_fraction(&self, factor: f64) -> f64 {
        let ok = self.path_norms.iter().filter(|&&p| p <= factor * self.teacher_path_norm).count();
        ok as f64 / self.path_norms.len() as f64
    }
}

/// `N` atoms drawn independently from the uniform measure over the
/// teacher's atoms.
pub fn resample(teacher: &Ensemble, n: usize, rng: &mut icfl_core::Rng) -> Result<Ensemble> {
    let atoms = teacher.particles();
    let picked = (0..n).map(|_| atoms[rng.random_range(0..atoms.len())].clone()).collect();
    Ok(Ensemble::uniform(picked)?)
}

fn sq_distance(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> f64 {
    (a - b).norm_squared() / a.ncols() as f64
}

/// Approximation error of width-`N` resamplings of the teacher.
pub fn finite_width_scaling(scn: &Scenario) -> Result<Scaling> {
    let problem = scn.problem()?;
    let teacher = problem.teacher();
    let x = problem.eval().samples();
    let ht = problem.teacher_features();
    let teacher_path_norm = path_norm(teacher);
    let mut rng = seeded_rng(scn.seed);
    let mut table = Table::new(provenance(scn), &["n", "draw", "error", "path_norm"]);
    let mut means = Vec::new();
    let mut path_norms = Vec::new();
    for &n in &SCALING_WIDTHS {
        let mut total = 0.0;
        for draw in 0..scn.draws {
            let nu = resample(teacher, n, &mut rng)?;
            let err = sq_distance(&feature_values(&nu, x, problem.act())?, ht);
            let pn = path_norm(&nu);
            total += err;
            path_norms.push(pn);
            table.push(vec![n.to_string(), draw.to_string(), num(err), num(pn)]);
        }
        means.push((n, total / scn.draws as f64));
    }
    let copy = subsample(teacher, teacher.len(), &mut rng)?;
    let control = sq_distance(&feature_values(&copy, x, problem.act())?, ht);
    table.push(vec![teacher.len().to_string(), "copy".into(), num(control), num(path_norm(&copy))]);
    Ok(Scaling {
        table,
        means,
        teacher_path_norm,
        path_norms,
        control,
    })
}

pub struct Chaos {
    pub table: Table,
    /// `(seed, distances per width in CHAOS_WIDTHS order)`.
    pub distances: Vec<(u64, Vec<f64>)>,
}

impl Chaos {
    pub fn monotone_fraction(&self) -> f64 {
        let ok = self
            .distances
            .iter()
            .filter(|(_, d)| d.windows(2).all(|w| w[1] <= w[0]))
            .count();
        ok as f64 / self.distances.len() as f64
    }

    pub fn extremes_ordered(&self) -> usize {
        self.distances.iter().filter(|(_, d)| d[0] > d[d.len() - 1]).count()
    }
}

/// Static training at growing widths from nested initializations, compared
/// with the reference width by the sup-distance of loss trajectories.
pub fn chaos_experiment(scn: &Scenario) -> Result<Chaos> {
    let problem = scn.problem()?;
    let cfg_scn = Scenario {
        train: icfl_core::dynamics::TrainConfig {
            max_steps: scn.horizon,
            ..scn.train
        },
        ..scn.clone()
    };
    let mut table = Table::new(provenance(scn), &["seed", "n", "distance"]);
    let mut distances = Vec::new();
    for i in 0..scn.seeds as u64 {
        let seed = scn.seed + i;
        let full = scn.init_model_n(CHAOS_REFERENCE, seed)?;
        let reference = run(&problem, &full, &cfg_scn, Mode::Static, seed)?.losses();
        let mut row = Vec::new();
        for &n in &CHAOS_WIDTHS {
            let nested = Ensemble::uniform(full.particles()[..n].to_vec())?;
            let l = run(&problem, &nested, &cfg_scn, Mode::Static, seed)?.losses();
            let dist = l.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            table.push(vec![seed.to_string(), n.to_string(), num(dist)]);
            row.push(dist);
        }
        table.push(vec![seed.to_string(), CHAOS_REFERENCE.to_string(), num(0.0)]);
        distances.push((seed, row));
    }
    Ok(Chaos { table, distances })
}

/// Ensemble that `probe` and `spectrum` inspect when none is given.
pub fn default_subject(scn: &Scenario) -> Result<Ensemble> {
    scn.init_model(scn.seed)
}

pub fn run_probe(scn: &Scenario, mu: &Ensemble) -> Result<(ProbeJson, CovPack)> {
    let problem = scn.problem()?;
    let pack = problem.reduced_loss(mu)?;
    let report = probe(&problem, mu, scn.band_delta)?;
    Ok((ProbeJson::new(&report, &pack, provenance(scn)), pack))
}

/// Spectrum of the Hessian operator on a subsample of `scn.n_spec` particles.
pub fn run_spectrum(scn: &Scenario, mu: &Ensemble) -> Result<(SpectrumJson, SpectralReport)> {
    let problem = scn.problem()?;
    let sub = subsample(mu, scn.n_spec, &mut seeded_rng(scn.seed))?;
    let report = spectrum(&problem, &sub, scn.fd_step)?;
    let loss = problem.reduced_loss(&sub)?.loss;
    Ok((SpectrumJson::new(&report, sub.len(), loss, provenance(scn)), report))
}
