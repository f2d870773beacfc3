use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use icfl_core::dynamics::Mode;
use icfl_lab::experiments as exp;
use icfl_lab::io::{self, write_json};
use icfl_lab::{LabError, Scenario};

#[derive(Parser)]
#[command(name = "icfl", version, about = "Mean-field in-context feature learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its log and final ensemble.
    Train(Common),
    /// Landscape probe (loss, steepest homotopy slope, band) as JSON.
    Probe(Inspect),
    /// Spectrum of the Hessian operator as JSON.
    Spectrum(Inspect),
    /// Attention, static and modified training curves.
    Fig1a(Common),
    /// Static against modified training on a degenerate teacher.
    Fig1b(Common),
    /// Misspecified model with fewer features than the teacher.
    Fig1c(Common),
    /// In-context test error along a training trajectory.
    Fig1d(Common),
    /// Approximation error of finite-width resamplings of the teacher.
    Scaling(Common),
    /// Loss-trajectory distance between widths from nested initializations.
    Chaos(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training mode: attention, static or modified.
    #[arg(long)]
    mode: Option<String>,
    /// Number of quadrature points.
    #[arg(long)]
    quadrature_size: Option<usize>,
    /// Overrides any configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct Inspect {
    #[command(flatten)]
    common: Common,
    /// Ensemble table to inspect instead of the scenario's initialization.
    #[arg(long)]
    ensemble: Option<PathBuf>,
}

fn scenario(preset: &str, c: &Common) -> Result<Scenario> {
    let mut scn = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut scn = Scenario::preset(preset)?;
            scn.apply_text(&text)?;
            scn
        }
        None => Scenario::preset(preset)?,
    };
    if let Some(seed) = c.seed {
        scn.seed = seed;
    }
    if let Some(out) = &c.out {
        scn.out = out.clone();
    }
    if let Some(mode) = &c.mode {
        scn.set("mode", mode)?;
    }
    if let Some(m) = c.quadrature_size {
        scn.quadrature_size = m;
    }
    for kv in &c.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("`{kv}` is not KEY=VALUE"))?;
        scn.set(k.trim(), v.trim())?;
    }
    scn.validate()?;
    Ok(scn)
}

fn subject(scn: &Scenario, path: &Option<PathBuf>) -> Result<icfl_core::Ensemble> {
    Ok(match path {
        Some(p) => io::read_ensemble(p)?,
        None => exp::default_subject(scn)?,
    })
}

fn finish(scn: &Scenario, name: &str, table: &io::Table, summary: &[(&str, String)]) -> Result<()> {
    let path = scn.out.join(format!("{name}.csv"));
    table.write(&path)?;
    io::write_file(&scn.out.join(format!("{name}.config")), &scn.to_text())?;
    println!("wrote {}", path.display());
    for (k, v) in summary {
        println!("{k}: {v}");
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let scn = scenario("train", &c)?;
            let run = exp::run_train(&scn)?;
            io::write_ensemble(&scn.out.join("train_final.ens"), &run.log.final_ensemble)?;
            finish(
                &scn,
                "train",
                &run.table,
                &[
                    ("mode", scn.train.mode.name().to_string()),
                    ("status", format!("{:?}", run.log.status)),
                    ("final_loss", io::num(run.log.final_loss())),
                ],
            )?;
            if let icfl_core::dynamics::Status::Aborted { step } = run.log.status {
                return Err(LabError::Aborted { step }.into());
            }
        }
        Command::Probe(i) => {
            let scn = scenario("default", &i.common)?;
            let mu = subject(&scn, &i.ensemble)?;
            let (json, _) = exp::run_probe(&scn, &mu)?;
            let path = scn.out.join("probe.json");
            write_json(&path, &json)?;
            println!("wrote {}", path.display());
            println!("loss: {:e} slope: {:e} band: {}", json.loss, json.slope, json.band);
        }
        Command::Spectrum(i) => {
            let scn = scenario("default", &i.common)?;
            let mu = subject(&scn, &i.ensemble)?;
            let (json, _) = exp::run_spectrum(&scn, &mu)?;
            let path = scn.out.join("spectrum.json");
            write_json(&path, &json)?;
            println!("wrote {}", path.display());
            println!("lambda_0: {:e} alpha: {:e}", json.lambda_0, json.alpha);
        }
        Command::Fig1a(c) => {
            let scn = scenario("fig1a", &c)?;
            let r = exp::run_fig1a(&scn)?;
            let mut summary: Vec<(&str, String)> = Mode::ALL
                .iter()
                .map(|&m| (m.name(), format!("final relative loss {:e}", r.log(m).final_loss() / r.log(m).initial_loss())))
                .collect();
            summary.push(("attention_static_gap", format!("{:.4}", r.attention_static_gap())));
            finish(&scn, "fig1a", &r.table, &summary)?;
        }
        Command::Fig1b(c) => {
            let scn = scenario("fig1b", &c)?;
            let r = exp::run_fig1b(&scn)?;
            finish(
                &scn,
                "fig1b",
                &r.table,
                &[
                    ("lambda_min_sigma_oo", io::num(r.lambda_min_oo)),
                    ("modified_wins", format!("{}/{}", r.wins(), r.finals.len())),
                ],
            )?;
        }
        Command::Fig1c(c) => {
            let scn = scenario("fig1c", &c)?;
            let r = exp::run_fig1c(&scn)?;
            finish(
                &scn,
                "fig1c",
                &r.table,
                &[
                    ("final_loss", io::num(r.log.final_loss())),
                    ("floor", io::num(r.floor)),
                    ("tail_improvement", io::num(r.tail_improvement(1000))),
                ],
            )?;
        }
        Command::Fig1d(c) => {
            let scn = scenario("fig1d", &c)?;
            let r = exp::run_fig1d(&scn)?;
            finish(&scn, "fig1d", &r.table, &[("spearman", format!("{:.4}", r.spearman()))])?;
        }
        Command::Scaling(c) => {
            let scn = scenario("scaling", &c)?;
            let r = exp::finite_width_scaling(&scn)?;
            finish(
                &scn,
                "scaling",
                &r.table,
                &[
                    ("slope", format!("{:.4}", r.slope())),
                    ("path_norm_within_3x", format!("{:.3}", r.path_norm_fraction(3.0))),
                    ("copy_control", io::num(r.control)),
                ],
            )?;
        }
        Command::Chaos(c) => {
            let scn = scenario("chaos", &c)?;
            let r = exp::chaos_experiment(&scn)?;
            finish(
                &scn,
                "chaos",
                &r.table,
                &[
                    ("monotone_fraction", format!("{:.2}", r.monotone_fraction())),
                    ("n64_above_n512", format!("{}/{}", r.extremes_ordered(), r.distances.len())),
                ],
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.downcast_ref::<LabError>().is_some_and(LabError::is_numerical);
            if numerical {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
