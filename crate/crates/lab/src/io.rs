//! File formats: provenance-stamped CSV, the versioned ensemble table and
//! JSON reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use icfl_core::dynamics::{StepRecord, TrainLog};
use icfl_core::landscape::ProbeReport;
use icfl_core::objective::CovPack;
use icfl_core::spectral::SpectralReport;
use icfl_core::{Ensemble, Particle};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, LabError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const ENSEMBLE_MAGIC: &str = "# icfl-ensemble v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub scenario: u64,
    pub seed: u64,
}

impl Provenance {
    pub fn line(&self) -> String {
        format!("# scenario={:016x} seed={} version={VERSION}", self.scenario, self.seed)
    }

    pub fn parse(line: &str) -> Option<Self> {
        let rest = line.strip_prefix("# ")?;
        let mut scenario = None;
        let mut seed = None;
        for field in rest.split_whitespace() {
            match field.split_once('=')? {
                ("scenario", v) => scenario = u64::from_str_radix(v, 16).ok(),
                ("seed", v) => seed = v.parse().ok(),
                _ => {}
            }
        }
        Some(Provenance {
            scenario: scenario?,
            seed: seed?,
        })
    }
}

/// An in-memory CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub provenance: Provenance,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(provenance: Provenance, columns: &[&str]) -> Self {
        Table {
            provenance,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_text(&self) -> String {
        let mut s = self.provenance.line();
        s.push('\n');
        s.push_str(&self.columns.join(","));
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, detail: &str| LabError::Format {
            what: "csv",
            line,
            detail: detail.to_string(),
        };
        let mut lines = text.lines();
        let provenance = lines
            .next()
            .and_then(Provenance::parse)
            .ok_or_else(|| bad(1, "missing provenance line"))?;
        let columns: Vec<String> = lines
            .next()
            .ok_or_else(|| bad(2, "missing header"))?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: Vec<String> = line.split(',').map(str::to_string).collect();
            if row.len() != columns.len() {
                return Err(bad(i + 3, "wrong number of fields"));
            }
            rows.push(row);
        }
        Ok(Table {
            provenance,
            columns,
            rows,
        })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Values of a numeric column.
    pub fn numbers(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column(name).ok_or_else(|| LabError::Format {
            what: "csv",
            line: 2,
            detail: format!("no column `{name}`"),
        })?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r[c].parse().map_err(|_| LabError::Format {
                    what: "csv",
                    line: i + 3,
                    detail: format!("`{}` is not a number", r[c]),
                })
            })
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_text())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Table::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn num(v: f64) -> String {
    format!("{v:e}")
}

pub const TRAIN_COLUMNS: [&str; 6] = ["step", "loss", "m_a", "sigma_min", "sigma_max", "event"];

fn record_row(r: &StepRecord) -> Vec<String> {
    vec![
        r.step.to_string(),
        num(r.loss),
        num(r.m_a),
        num(r.sigma_min),
        num(r.sigma_max),
        r.event.name().to_string(),
    ]
}

pub fn train_table(log: &TrainLog, provenance: Provenance) -> Table {
    let mut t = Table::new(provenance, &TRAIN_COLUMNS);
    for r in &log.records {
        t.push(record_row(r));
    }
    t
}

/// Writes an ensemble as text: a magic line, `N k d`, then one row per
/// particle `weight a_1..a_k w_1..w_d`.
pub fn ensemble_to_text(mu: &Ensemble) -> String {
    let mut s = format!("{ENSEMBLE_MAGIC}\n{} {} {}\n", mu.len(), mu.k(), mu.d());
    for (p, w) in mu.particles().iter().zip(mu.weights()) {
        s.push_str(&num(*w));
        for v in p.a.iter().chain(&p.w) {
            let _ = write!(s, " {}", num(*v));
        }
        s.push('\n');
    }
    s
}

pub fn ensemble_from_text(text: &str) -> Result<Ensemble> {
    let bad = |line: usize, detail: &str| LabError::Format {
        what: "ensemble",
        line,
        detail: detail.to_string(),
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(ENSEMBLE_MAGIC) {
        return Err(bad(1, "unsupported header"));
    }
    let dims: Vec<usize> = lines
        .next()
        .ok_or_else(|| bad(2, "missing dimensions"))?
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| bad(2, "bad dimension")))
        .collect::<Result<_>>()?;
    let [n, k, d] = dims[..] else {
        return Err(bad(2, "expected `N k d`"));
    };
    let mut particles = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| bad(i + 3, "bad number")))
            .collect::<Result<_>>()?;
        if vals.len() != 1 + k + d {
            return Err(bad(i + 3, "wrong number of fields"));
        }
        weights.push(vals[0]);
        particles.push(Particle::new(vals[1..1 + k].to_vec(), vals[1 + k..].to_vec()));
    }
    if particles.len() != n {
        return Err(bad(2, "particle count does not match the header"));
    }
    Ok(Ensemble::new(particles, weights)?)
}

pub fn write_ensemble(path: &Path, mu: &Ensemble) -> Result<()> {
    write_file(path, &ensemble_to_text(mu))
}

pub fn read_ensemble(path: &Path) -> Result<Ensemble> {
    ensemble_from_text(&fs::read_to_string(path).map_err(io_err(path))?)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovPackJson {
    pub sigma_mm: Vec<Vec<f64>>,
    pub sigma_om: Vec<Vec<f64>>,
    pub sigma_oo: Vec<Vec<f64>>,
    pub w_opt: Vec<Vec<f64>>,
    pub loss: f64,
    pub r_lo: f64,
    pub r_hi: f64,
    pub ridge: f64,
}

impl From<&CovPack> for CovPackJson {
    fn from(p: &CovPack) -> Self {
        CovPackJson {
            sigma_mm: rows(&p.sigma_mm),
            sigma_om: rows(&p.sigma_om),
            sigma_oo: rows(&p.sigma_oo),
            w_opt: rows(&p.w_opt),
            loss: p.loss,
            r_lo: p.r_lo,
            r_hi: p.r_hi,
            ridge: p.ridge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeJson {
    pub scenario: String,
    pub seed: u64,
    pub version: String,
    pub loss: f64,
    pub slope: f64,
    pub curvature: f64,
    pub rotation: Vec<Vec<f64>>,
    pub band: String,
    pub r_lo: f64,
    pub accel_lo: f64,
    pub accel_hi: f64,
    pub vacuous: bool,
    pub guarantee: bool,
    pub nuclear_norm: f64,
    pub sym_slope: f64,
    pub sym_curvature: f64,
    pub cov: CovPackJson,
}

impl ProbeJson {
    pub fn new(report: &ProbeReport, pack: &CovPack, provenance: Provenance) -> Self {
        ProbeJson {
            scenario: format!("{:016x}", provenance.scenario),
            seed: provenance.seed,
            version: VERSION.to_string(),
            loss: report.loss,
            slope: report.slope,
            curvature: report.curvature,
            rotation: rows(report.rotation.matrix()),
            band: report.band.band.name().to_string(),
            r_lo: report.band.r_lo,
            accel_lo: report.band.accel_lo,
            accel_hi: report.band.accel_hi,
            vacuous: report.band.vacuous,
            guarantee: report.band.guarantee,
            nuclear_norm: report.nuclear_norm,
            sym_slope: report.sym_slope,
            sym_curvature: report.sym_curvature,
            cov: pack.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumJson {
    pub scenario: String,
    pub seed: u64,
    pub version: String,
    pub n: usize,
    pub loss: f64,
    pub lambda_0: f64,
    pub alpha: f64,
    pub asymmetry: f64,
    pub eigenvalues: Vec<f64>,
}

impl SpectrumJson {
    pub fn new(report: &SpectralReport, n: usize, loss: f64, provenance: Provenance) -> Self {
        SpectrumJson {
            scenario: format!("{:016x}", provenance.scenario),
            seed: provenance.seed,
            version: VERSION.to_string(),
            n,
            loss,
            lambda_0: report.lambda_0,
            alpha: report.alpha,
            asymmetry: report.asymmetry,
            eigenvalues: report.eigenvalues.clone(),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, &text)
}
