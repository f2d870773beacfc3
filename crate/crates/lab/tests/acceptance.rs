//! Acceptance suite: one pass/fail line per criterion. Exits non-zero when any
//! criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use icfl_core::dynamics::{birth_death_mixture, gradient_field, train, Mode, Objective, TrainConfig};
use icfl_core::ensemble::{random_init, PiConfig, Rotation};
use icfl_core::landscape::{first_order_slope, homotopy_scan, second_order_curvature, steepest_rotation};
use icfl_core::objective::Problem;
use icfl_core::quadrature::{draw_eval_set, feature_values, InputDist};
use icfl_core::spectral::{evo_check, first_trace_term_blocks, first_trace_term_fd, hessian_matrix, spectrum};
use icfl_core::teacher::{build_teacher, degenerate_saddle, random_contraction, random_orthonormal, transform_a, TeacherSpec};
use icfl_core::{seeded_rng, Activation, Ensemble};
use icfl_lab::experiments as exp;
use icfl_lab::Scenario;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;

type Outcome = Result<(bool, String), String>;

struct Report {
    failed: usize,
    total: usize,
    filter: Vec<String>,
}

impl Report {
    fn check(&mut self, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) {
        if !self.filter.is_empty() && !self.filter.iter().any(|f| name.contains(f.as_str())) {
            return;
        }
        let t0 = Instant::now();
        let outcome = f();
        let elapsed = t0.elapsed();
        let (mut ok, mut detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        if let Some(b) = budget {
            if elapsed > b {
                ok = false;
                detail.push_str(&format!("; over time budget {:?}", b));
            }
        }
        self.total += 1;
        if !ok {
            self.failed += 1;
        }
        println!(
            "{} {name} [{:.1}s]: {detail}",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn problem(seed: u64, m: usize, d: usize, k: usize, n_teacher: usize) -> Problem {
    let e = draw_eval_set(seed, m, d, InputDist::Gaussian).unwrap();
    let spec = TeacherSpec {
        w_std: 1.0 / (d as f64).sqrt(),
        ..TeacherSpec::new(k, n_teacher)
    };
    let t = build_teacher(&spec, &e, Activation::Sigmoid, &mut seeded_rng(seed + 100)).unwrap();
    Problem::new(t, e, Activation::Sigmoid).unwrap()
}

fn gradient_oracle() -> Outcome {
    let (k, d, n, m) = (5, 20, 64, 4096);
    let p = problem(1, m, d, k, 200);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for trial in 0..5u64 {
        let mu = random_init(n, k, d, 0.5, &mut seeded_rng(10 + trial)).map_err(s)?;
        let grad = gradient_field(&p, &mu, Objective::Reduced).map_err(s)?.grad;
        let coords = mu.coord_matrix();
        let mut rng = seeded_rng(20 + trial);
        for _ in 0..20 {
            let j = rng.random_range(0..n);
            let mut fd = DVector::zeros(k + d);
            for c in 0..k + d {
                let mut plus = coords.clone();
                plus[(j, c)] += h;
                let mut minus = coords.clone();
                minus[(j, c)] -= h;
                let lp = p.reduced_loss(&mu.with_coord_matrix(&plus).map_err(s)?).map_err(s)?.loss;
                let lm = p.reduced_loss(&mu.with_coord_matrix(&minus).map_err(s)?).map_err(s)?.loss;
                fd[c] = (lp - lm) / (2.0 * h);
            }
            let an = grad.row(j).transpose() / n as f64;
            worst = worst.max((an - &fd).norm() / fd.norm());
        }
    }
    Ok((worst <= 1e-4, format!("max relative error {worst:.2e} over 100 particles (tol 1e-4)")))
}

fn attention_closed_form() -> Outcome {
    let p = problem(2, 2048, 20, 5, 300);
    // a linear image of the whitened teacher with condition number 4
    let mut rng = seeded_rng(3);
    let q1 = random_orthonormal(5, 5, &mut rng);
    let q2 = random_orthonormal(5, 5, &mut rng);
    let t = q1 * DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.25, 1.5, 1.75, 2.0])) * q2.transpose();
    let mu = transform_a(p.teacher(), &t).map_err(s)?;
    let pack = p.reduced_loss(&mu).map_err(s)?;
    let lip = {
        let g = pack.sigma_om.transpose() * &pack.sigma_om;
        let top = |m: DMatrix<f64>| SymmetricEigen::new(m).eigenvalues.max();
        top(g) * top(pack.sigma_mm.clone())
    };
    let eta = 1.0 / lip;
    let err = |w: &DMatrix<f64>| (&pack.sigma_om * (w - &pack.w_opt) * &pack.sigma_mm).norm();
    let mut w = DMatrix::zeros(5, 5);
    let mut prev = err(&w);
    let mut worst_ratio = 0.0f64;
    let mut reached = None;
    for t in 1..=10_000 {
        w = p.attention_gd_step(&mu, &w, eta).map_err(s)?;
        let e = err(&w);
        worst_ratio = worst_ratio.max(e / prev);
        prev = e;
        if e <= 1e-6 {
            reached = Some(t);
            break;
        }
    }
    Ok((
        reached.is_some() && worst_ratio < 1.0,
        format!("reached 1e-6 at step {reached:?}, max per-step error ratio {worst_ratio:.4}"),
    ))
}

fn landscape_formulas() -> Outcome {
    let (k, d) = (3, 5);
    let p = problem(3, 512, d, k, 30);
    let mut rng = seeded_rng(4);
    let (mut worst1, mut worst2) = (0.0f64, 0.0f64);
    let mut beaten = 0;
    for trial in 0..100u64 {
        let mu = random_init(20, k, d, 0.5, &mut seeded_rng(1000 + trial)).map_err(s)?;
        let pack = p.reduced_loss(&mu).map_err(s)?;
        let r = Rotation::new(random_contraction(k, rng.random_range(0.2..1.0), &mut rng)).map_err(s)?;
        let h1 = 1e-5;
        let l = homotopy_scan(&p, &mu, &r, &[0.0, h1, 2.0 * h1]).map_err(s)?;
        let fd1 = (-3.0 * l[0].1 + 4.0 * l[1].1 - l[2].1) / (2.0 * h1);
        let an1 = first_order_slope(&pack, &r).map_err(s)?;
        worst1 = worst1.max((fd1 - an1).abs() / an1.abs());
        let h2 = 1e-5;
        let l = homotopy_scan(&p, &mu, &r, &[0.0, h2, 2.0 * h2, 3.0 * h2]).map_err(s)?;
        let fd2 = (2.0 * l[0].1 - 5.0 * l[1].1 + 4.0 * l[2].1 - l[3].1) / (h2 * h2);
        let an2 = second_order_curvature(&pack, &r).map_err(s)?;
        worst2 = worst2.max((fd2 - an2).abs() / an2.abs());

        if trial < 5 {
            let (_, steepest) = steepest_rotation(&pack).map_err(s)?;
            let best_random = (0..500)
                .map(|_| {
                    let r = Rotation::new(random_contraction(k, rng.random_range(0.0..1.0), &mut rng)).unwrap();
                    first_order_slope(&pack, &r).unwrap()
                })
                .fold(f64::INFINITY, f64::min);
            if steepest <= best_random + 1e-12 {
                beaten += 1;
            }
        }
    }
    Ok((
        worst1 <= 1e-3 && worst2 <= 1e-2 && beaten == 5,
        format!(
            "first-order max rel err {worst1:.2e} (tol 1e-3), second-order {worst2:.2e} (tol 1e-2), steepest beats 500 random rotations in {beaten}/5"
        ),
    ))
}

fn benign_band() -> Outcome {
    let (k, d) = (5, 20);
    let p = problem(5, 512, d, k, 200);
    let r_lo = p.reduced_loss(p.teacher()).map_err(s)?.r_lo;
    let mut starts: Vec<Ensemble> = (0..10u64)
        .map(|i| random_init(200, k, d, 0.5, &mut seeded_rng(50 + i)).unwrap())
        .collect();
    starts.push(p.teacher().clone());
    let saddle = degenerate_saddle(p.teacher(), 40, 1.0 / (d as f64).sqrt(), p.eval(), p.act(), &mut seeded_rng(6))
        .map_err(s)?;
    starts.push(saddle);
    let cfg = TrainConfig {
        eta: 0.05,
        max_steps: 1000,
        ..TrainConfig::default()
    };
    let (mut small, mut violations, mut low, mut high) = (0, 0, 0, 0);
    for (i, mu0) in starts.iter().enumerate() {
        let log = train(&p, mu0, &TrainConfig { seed: i as u64, ..cfg }).map_err(s)?;
        for r in log.records.iter().filter(|r| r.grad_norm <= 1e-5) {
            small += 1;
            if r.loss <= 1e-4 {
                low += 1;
            } else if r.loss >= 0.5 * r_lo - 1e-3 {
                high += 1;
            } else {
                violations += 1;
            }
        }
    }
    Ok((
        violations == 0 && small > 0,
        format!("{small} near-critical snapshots: {low} near zero, {high} above r_lo/2, {violations} in between"),
    ))
}

fn hessian_operator() -> Outcome {
    let (k, d) = (5, 20);
    let p = problem(7, 1024, d, k, 150);
    let eps = icfl_core::spectral::DEFAULT_FD_STEP;
    let mu = random_init(200, k, d, 0.5, &mut seeded_rng(8)).map_err(s)?;
    let op = hessian_matrix(&p, &mu, eps).map_err(s)?;
    let asym = op.asymmetry();

    let pack = p.reduced_loss(&mu).map_err(s)?;
    let mut worst_block = 0.0f64;
    for (i, j) in [(0, 1), (3, 3), (10, 42)] {
        let t1 = mu.particles()[i].coords();
        let t2 = mu.particles()[j].coords();
        let an = first_trace_term_blocks(&p, &pack, &t1, &t2);
        let fd = first_trace_term_fd(&p, &pack, &t1, &t2, 1e-4);
        worst_block = worst_block.max((&an - &fd).norm() / an.norm());
    }

    let at_teacher = spectrum(&p, p.teacher(), eps).map_err(s)?.lambda_0;
    let teacher150 = p.teacher();
    let saddle = degenerate_saddle(teacher150, 50, 1.0 / (d as f64).sqrt(), p.eval(), p.act(), &mut seeded_rng(9))
        .map_err(s)?;
    let at_saddle = spectrum(&p, &saddle, eps).map_err(s)?.lambda_0;
    Ok((
        asym <= 1e-6 && worst_block <= 1e-3 && at_teacher >= -1e-4 && at_saddle < 0.0,
        format!(
            "asymmetry {asym:.2e}, trace-term blocks rel err {worst_block:.2e}, lambda_min at teacher {at_teacher:.2e}, lambda_0 at saddle {at_saddle:.2e} (N = 200)"
        ),
    ))
}

fn evolution_equation() -> Outcome {
    let p = problem(11, 1024, 20, 5, 200);
    let mu = random_init(50, 5, 20, 0.5, &mut seeded_rng(12)).map_err(s)?;
    let eps = icfl_core::spectral::DEFAULT_FD_STEP;
    let r1 = evo_check(&p, &mu, 1e-4, eps).map_err(s)?.residual;
    let r2 = evo_check(&p, &mu, 5e-5, eps).map_err(s)?.residual;
    let factor = r2 / r1;
    Ok((
        r1 <= 0.05 && factor <= 0.7,
        format!("residual {r1:.2e} at dt=1e-4, {r2:.2e} at dt=5e-5 (factor {factor:.3})"),
    ))
}

fn birth_death_invariance() -> Outcome {
    let p = problem(13, 1024, 20, 5, 200);
    let pi = PiConfig {
        antithetic: true,
        w_std: 1.0 / 20f64.sqrt(),
        ..PiConfig::default()
    };
    let mut worst = 0.0f64;
    for i in 0..5u64 {
        let mu = random_init(100, 5, 20, 0.5, &mut seeded_rng(14 + i)).map_err(s)?;
        let before = p.reduced_loss(&mu).map_err(s)?.loss;
        let next = birth_death_mixture(&mu, 0.05, &pi, 40, &mut seeded_rng(30 + i)).map_err(s)?;
        let after = p.reduced_loss(&next).map_err(s)?.loss;
        worst = worst.max((after - before).abs());
    }
    Ok((worst <= 1e-10, format!("max loss change {worst:.2e} over 5 ensembles (tol 1e-10)")))
}

fn fig1a() -> Outcome {
    let scn = Scenario::preset("fig1a").map_err(s)?;
    let r = exp::run_fig1a(&scn).map_err(s)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for mode in Mode::ALL {
        let reach = exp::steps_to_ratio(r.log(mode), 1e-2);
        ok &= matches!(reach, Some(t) if t <= 20_000);
        parts.push(format!("{} reaches 1e-2 at {reach:?}", mode.name()));
    }
    let gap = r.attention_static_gap();
    ok &= gap <= 0.1;
    parts.push(format!("attention/static smoothed gap {gap:.3} (tol 0.1)"));
    Ok((ok, parts.join(", ")))
}

fn fig1b() -> Outcome {
    let scn = Scenario::preset("fig1b").map_err(s)?;
    let r = exp::run_fig1b(&scn).map_err(s)?;
    let wins = r.wins();
    let ratios: Vec<String> = r.finals.iter().map(|(_, st, md)| format!("{:.3}", md / st)).collect();
    Ok((
        wins >= 7,
        format!(
            "modified below static in {wins}/{} seeds (need 7), final ratios modified/static [{}], lambda_min(Sigma_oo) {:.1e}",
            r.finals.len(),
            ratios.join(" "),
            r.lambda_min_oo
        ),
    ))
}

fn fig1c() -> Outcome {
    let scn = Scenario::preset("fig1c").map_err(s)?;
    let r = exp::run_fig1c(&scn).map_err(s)?;
    let p = scn.problem().map_err(s)?;
    let ht = p.teacher_features();
    let sigma_oo = ht * ht.transpose() / ht.ncols() as f64;
    let mut vals: Vec<f64> = SymmetricEigen::new(sigma_oo).eigenvalues.iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    let floor = 0.5 * vals[..scn.teacher_k - scn.k].iter().sum::<f64>();
    let last = r.log.final_loss();
    let tail = r.tail_improvement(1000);
    Ok((
        last >= floor - 1e-9 && tail < 0.01,
        format!("final loss {last:.5e} vs floor {floor:.5e}, improvement over last 1000 steps {:.3}%", 100.0 * tail),
    ))
}

fn fig1d() -> Outcome {
    let scn = Scenario::preset("fig1d").map_err(s)?;
    let r = exp::run_fig1d(&scn).map_err(s)?;
    let rho = r.spearman();
    let last = r.points.last().ok_or("no snapshots")?;
    let p = scn.problem().map_err(s)?;
    let query = exp::query_descriptor(&scn).draw().map_err(s)?;
    let hq = feature_values(p.teacher(), query.samples(), p.act()).map_err(s)?;
    let g = DVector::from_iterator(hq.ncols(), hq.column_iter().map(|c| c.norm()));
    let a = hq.transpose();
    let coef = a.clone().svd(true, true).solve(&g, 1e-14)?;
    let floor = (&g - a * coef).norm_squared() / g.len() as f64;
    let first = &r.points[0];
    Ok((
        rho > 0.8 && last.test.error >= floor - 1e-6 && first.test.error >= 2.0 * last.test.error,
        format!(
            "Spearman {rho:.3} over {} snapshots, test error {:.4e} -> {:.4e} (need a 2x drop), floor {floor:.4e}",
            r.points.len(),
            first.test.error,
            last.test.error
        ),
    ))
}

fn scaling() -> Outcome {
    let scn = Scenario::preset("scaling").map_err(s)?;
    let r = exp::finite_width_scaling(&scn).map_err(s)?;
    let slope = r.slope();
    Ok((
        (slope + 1.0).abs() <= 0.2,
        format!(
            "log-log slope {slope:.3}, duplicate-teacher control {:.1e}, path norm within 3x teacher in {:.0}% of draws",
            r.control,
            100.0 * r.path_norm_fraction(3.0)
        ),
    ))
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_icfl"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .stdout(std::process::Stdio::null())
        .status()
        .map_err(s)?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("icfl {args:?} failed with {status}"))
    }
}

fn determinism() -> Outcome {
    let root = std::env::temp_dir().join(format!("icfl-acceptance-{}", std::process::id()));
    let commands: [(&[&str], &str); 4] = [
        (
            &["train", "--seed", "3", "--mode", "modified", "--quadrature-size", "512", "--set", "max_steps=60", "--set", "window=20", "--set", "delta_b=1", "--set", "delta_p=1", "--set", "tau=10"],
            "train.csv",
        ),
        (&["train", "--seed", "3", "--mode", "attention", "--quadrature-size", "512", "--set", "max_steps=20"], "train.csv"),
        (&["probe", "--seed", "5", "--quadrature-size", "512"], "probe.json"),
        (&["scaling", "--seed", "7", "--quadrature-size", "256", "--set", "draws=3"], "scaling.csv"),
    ];
    let mut identical = 0;
    for (i, (args, file)) in commands.iter().enumerate() {
        let outs: Vec<PathBuf> = (0..2).map(|r| root.join(format!("{i}-{r}"))).collect();
        for o in &outs {
            run_cli(o, args)?;
        }
        let a = std::fs::read(outs[0].join(file)).map_err(s)?;
        let b = std::fs::read(outs[1].join(file)).map_err(s)?;
        if a == b && !a.is_empty() {
            identical += 1;
        }
    }
    let _ = std::fs::remove_dir_all(&root);
    Ok((
        identical == commands.len(),
        format!("{identical}/{} commands produced byte-identical output on rerun", commands.len()),
    ))
}

fn main() {
    let filter = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut report = Report {
        failed: 0,
        total: 0,
        filter,
    };
    let min = |m: u64| Some(Duration::from_secs(60 * m));
    report.check("gradient oracle", min(1), gradient_oracle);
    report.check("attention closed form", Some(Duration::from_secs(10)), attention_closed_form);
    report.check("landscape formulas", min(5), landscape_formulas);
    report.check("benign band", None, benign_band);
    report.check("hessian operator", min(10), hessian_operator);
    report.check("evolution equation", None, evolution_equation);
    report.check("birth-death invariance", None, birth_death_invariance);
    report.check("fig1a", min(30), fig1a);
    report.check("fig1b", None, fig1b);
    report.check("fig1c", None, fig1c);
    report.check("fig1d", None, fig1d);
    report.check("finite-width scaling", None, scaling);
    report.check("determinism", None, determinism);
    println!("{} of {} criteria passed", report.total - report.failed, report.total);
    if report.failed > 0 {
        std::process::exit(1);
    }
}
