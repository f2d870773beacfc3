//! Experiment scenarios: a flat `key = value` configuration covering the
//! teacher, the model, the quadrature and the training loop.

use std::fmt::Write as _;
use std::path::PathBuf;

use icfl_core::dynamics::{AttentionInit, Batch, GpConfig, Mode, TrainConfig};
use icfl_core::ensemble::{random_init, Ensemble, PiConfig};
use icfl_core::objective::{Problem, DEFAULT_RIDGE};
use icfl_core::quadrature::{EvalDescriptor, InputDist, MIN_EVAL_SIZE};
use icfl_core::teacher::{build_teacher, TeacherSpec};
use icfl_core::{seeded_rng, Activation};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub out: PathBuf,

    pub d: usize,
    pub activation: Activation,
    pub input_dist: InputDist,
    pub quadrature_size: usize,
    pub eval_seed: u64,
    pub ridge: f64,

    pub teacher_k: usize,
    pub teacher_n: usize,
    /// Rank of the span of the teacher's `a` vectors; `0` means full rank.
    pub teacher_rank: usize,
    pub teacher_w_std: f64,
    pub teacher_seed: u64,

    pub k: usize,
    pub n: usize,
    pub init_radius: f64,

    pub train: TrainConfig,

    /// Number of seeds in multi-seed experiments.
    pub seeds: usize,
    /// Snapshot interval for trajectory diagnostics.
    pub record_every: usize,
    /// Steps of each chaos run.
    pub horizon: usize,
    /// Independent draws per width in the scaling study.
    pub draws: usize,
    /// Particle count used for spectral work.
    pub n_spec: usize,
    pub fd_step: f64,
    /// Slope threshold of the accelerated-convergence band.
    pub band_delta: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        let d = 20;
        Scenario {
            name: "default".into(),
            seed: 0,
            out: PathBuf::from("out"),
            d,
            activation: Activation::Sigmoid,
            input_dist: InputDist::Gaussian,
            quadrature_size: 1024,
            eval_seed: 1,
            ridge: DEFAULT_RIDGE,
            teacher_k: 5,
            teacher_n: 500,
            teacher_rank: 0,
            teacher_w_std: 1.0 / (d as f64).sqrt(),
            teacher_seed: 2,
            k: 5,
            n: 500,
            init_radius: 0.5,
            train: TrainConfig {
                eta: 0.05,
                eta_w: 1.0,
                w_steps: 20_000,
                max_steps: 3000,
                pi: PiConfig {
                    w_std: 1.0 / (d as f64).sqrt(),
                    ..PiConfig::default()
                },
                ..TrainConfig::default()
            },
            seeds: 10,
            record_every: 50,
            horizon: 200,
            draws: 20,
            n_spec: 200,
            fd_step: 1e-4,
            band_delta: 1e-4,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| LabError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(LabError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        }),
    }
}

impl Scenario {
    /// Named starting points for the bundled experiments.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Scenario {
            name: name.to_string(),
            ..Scenario::default()
        };
        let scn = match name {
            "default" | "train" | "fig1a" | "fig1d" => base,
            "fig1b" => Scenario {
                teacher_rank: 3,
                ..base
            },
            "fig1c" => Scenario {
                teacher_k: 7,
                ..base
            },
            "scaling" => Scenario {
                quadrature_size: 2048,
                ..base
            },
            "chaos" => Scenario {
                quadrature_size: 1024,
                horizon: 200,
                ..base
            },
            _ => return Err(LabError::UnknownPreset(name.to_string())),
        };
        Ok(scn)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "name" => self.name = value.to_string(),
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "d" => self.d = parse(key, value)?,
            "activation" => {
                self.activation = Activation::from_name(value).ok_or_else(|| LabError::BadValue {
                    key: key.to_string(),
                    value: value.to_string(),
                })?
            }
            "input_dist" => self.input_dist = InputDist::from_name(value)?,
            "quadrature_size" => self.quadrature_size = parse(key, value)?,
            "eval_seed" => self.eval_seed = parse(key, value)?,
            "ridge" => self.ridge = parse(key, value)?,
            "teacher_k" => self.teacher_k = parse(key, value)?,
            "teacher_n" => self.teacher_n = parse(key, value)?,
            "teacher_rank" => self.teacher_rank = parse(key, value)?,
            "teacher_w_std" => self.teacher_w_std = parse(key, value)?,
            "teacher_seed" => self.teacher_seed = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "n" => self.n = parse(key, value)?,
            "init_radius" => self.init_radius = parse(key, value)?,
            "eta" => t.eta = parse(key, value)?,
            "eta_w" => t.eta_w = parse(key, value)?,
            "w_steps" => t.w_steps = parse(key, value)?,
            "backtrack" => t.backtrack = parse_bool(key, value)?,
            "gamma" => t.gamma = parse(key, value)?,
            "eta_p" => t.eta_p = parse(key, value)?,
            "tau" => t.tau = parse(key, value)?,
            "delta_b" => t.delta_b = parse(key, value)?,
            "delta_p" => t.delta_p = parse(key, value)?,
            "window" => t.window = parse(key, value)?,
            "epsilon" => t.epsilon = parse(key, value)?,
            "max_steps" => t.max_steps = parse(key, value)?,
            "sigma_p" => t.gp.sigma_p = parse(key, value)?,
            "ell" => t.gp.ell = parse(key, value)?,
            "pi_a_scale" => t.pi.a_scale = parse(key, value)?,
            "pi_w_std" => t.pi.w_std = parse(key, value)?,
            "pi_antithetic" => t.pi.antithetic = parse_bool(key, value)?,
            "mode" => {
                t.mode = Mode::from_name(value).ok_or_else(|| LabError::BadValue {
                    key: key.to_string(),
                    value: value.to_string(),
                })?
            }
            "project_a" => t.project_a = parse_bool(key, value)?,
            "attention_init" => {
                t.attention_init = match value {
                    "zero" => AttentionInit::Zero,
                    "optimum" => AttentionInit::Optimum,
                    _ => {
                        return Err(LabError::BadValue {
                            key: key.to_string(),
                            value: value.to_string(),
                        })
                    }
                }
            }
            "batch" => {
                t.batch = match value {
                    "full" => Batch::Full,
                    "stochastic" => Batch::Stochastic { size: 1024 },
                    _ => {
                        return Err(LabError::BadValue {
                            key: key.to_string(),
                            value: value.to_string(),
                        })
                    }
                }
            }
            "batch_size" => {
                let size = parse(key, value)?;
                if let Batch::Stochastic { size: s } = &mut t.batch {
                    *s = size;
                } else {
                    t.batch = Batch::Stochastic { size };
                }
            }
            "seeds" => self.seeds = parse(key, value)?,
            "record_every" => self.record_every = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "draws" => self.draws = parse(key, value)?,
            "n_spec" => self.n_spec = parse(key, value)?,
            "fd_step" => self.fd_step = parse(key, value)?,
            "band_delta" => self.band_delta = parse(key, value)?,
            _ => return Err(LabError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every setting as `(key, value)` in a fixed order; `set` accepts each
    /// pair back.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let mut v = vec![
            ("name", self.name.clone()),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("d", self.d.to_string()),
            ("activation", self.activation.name().to_string()),
            ("input_dist", self.input_dist.name().to_string()),
            ("quadrature_size", self.quadrature_size.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
            ("ridge", self.ridge.to_string()),
            ("teacher_k", self.teacher_k.to_string()),
            ("teacher_n", self.teacher_n.to_string()),
            ("teacher_rank", self.teacher_rank.to_string()),
            ("teacher_w_std", self.teacher_w_std.to_string()),
            ("teacher_seed", self.teacher_seed.to_string()),
            ("k", self.k.to_string()),
            ("n", self.n.to_string()),
            ("init_radius", self.init_radius.to_string()),
            ("eta", t.eta.to_string()),
            ("eta_w", t.eta_w.to_string()),
            ("w_steps", t.w_steps.to_string()),
            ("backtrack", t.backtrack.to_string()),
            ("gamma", t.gamma.to_string()),
            ("eta_p", t.eta_p.to_string()),
            ("tau", t.tau.to_string()),
            ("delta_b", t.delta_b.to_string()),
            ("delta_p", t.delta_p.to_string()),
            ("window", t.window.to_string()),
            ("epsilon", t.epsilon.to_string()),
            ("max_steps", t.max_steps.to_string()),
            ("sigma_p", t.gp.sigma_p.to_string()),
            ("ell", t.gp.ell.to_string()),
            ("pi_a_scale", t.pi.a_scale.to_string()),
            ("pi_w_std", t.pi.w_std.to_string()),
            ("pi_antithetic", t.pi.antithetic.to_string()),
            ("mode", t.mode.name().to_string()),
            ("project_a", t.project_a.to_string()),
            (
                "attention_init",
                match t.attention_init {
                    AttentionInit::Zero => "zero",
                    AttentionInit::Optimum => "optimum",
                }
                .to_string(),
            ),
        ];
        match t.batch {
            Batch::Full => v.push(("batch", "full".into())),
            Batch::Stochastic { size } => {
                v.push(("batch", "stochastic".into()));
                v.push(("batch_size", size.to_string()));
            }
        }
        v.extend([
            ("seeds", self.seeds.to_string()),
            ("record_every", self.record_every.to_string()),
            ("horizon", self.horizon.to_string()),
            ("draws", self.draws.to_string()),
            ("n_spec", self.n_spec.to_string()),
            ("fd_step", self.fd_step.to_string()),
            ("band_delta", self.band_delta.to_string()),
        ]);
        v
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses a configuration file on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(LabError::Syntax { line: i + 1 })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// FNV-1a hash of the canonical text form, excluding the output directory.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (k, v) in self.pairs() {
            if k == "out" {
                continue;
            }
            for b in k.bytes().chain([b'=']).chain(v.bytes()).chain([b'\n']) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn validate(&self) -> Result<()> {
        if self.quadrature_size < MIN_EVAL_SIZE {
            return Err(LabError::Mismatch(format!(
                "quadrature_size {} below the minimum {MIN_EVAL_SIZE}",
                self.quadrature_size
            )));
        }
        if self.d == 0 || self.k == 0 || self.n == 0 || self.teacher_k == 0 || self.teacher_n == 0 {
            return Err(LabError::Mismatch("dimensions and counts must be positive".into()));
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn eval_descriptor(&self) -> EvalDescriptor {
        EvalDescriptor {
            seed: self.eval_seed,
            m: self.quadrature_size,
            d: self.d,
            dist: self.input_dist,
        }
    }

    pub fn teacher_spec(&self) -> TeacherSpec {
        TeacherSpec {
            k: self.teacher_k,
            n: self.teacher_n,
            rank: if self.teacher_rank == 0 { self.teacher_k } else { self.teacher_rank },
            w_std: self.teacher_w_std,
        }
    }

    pub fn problem(&self) -> Result<Problem> {
        self.validate()?;
        let eval = self.eval_descriptor().draw()?;
        let mut rng = seeded_rng(self.teacher_seed);
        let teacher = build_teacher(&self.teacher_spec(), &eval, self.activation, &mut rng)?;
        Ok(Problem::with_ridge(teacher, eval, self.activation, self.ridge)?)
    }

    /// Random model initialization for `seed`.
    pub fn init_model(&self, seed: u64) -> Result<Ensemble> {
        self.init_model_n(self.n, seed)
    }

    pub fn init_model_n(&self, n: usize, seed: u64) -> Result<Ensemble> {
        let mut rng = seeded_rng(seed.wrapping_mul(0x9e37_79b9).wrapping_add(17));
        Ok(random_init(n, self.k, self.d, self.init_radius, &mut rng)?)
    }

    pub fn train_config(&self, mode: Mode, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            seed,
            ..self.train
        }
    }

    pub fn gp(&self) -> GpConfig {
        self.train.gp
    }
}
