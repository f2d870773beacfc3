use std::process::Command;

use icfl_lab::io::{self, Provenance, Table};
use icfl_lab::Scenario;

#[test]
fn resolved_config_reproduces_the_scenario() {
    for name in ["default", "fig1b", "fig1c", "scaling", "chaos"] {
        let mut scn = Scenario::preset(name).unwrap();
        scn.set("eta", "0.03").unwrap();
        scn.set("batch_size", "64").unwrap();
        let mut back = Scenario::preset("default").unwrap();
        back.apply_text(&scn.to_text()).unwrap();
        assert_eq!(back.hash(), scn.hash(), "{name}");
        assert_eq!(back.to_text(), scn.to_text());
    }
}

#[test]
fn hash_tracks_every_key_but_out() {
    let base = Scenario::preset("default").unwrap();
    let mut moved = base.clone();
    moved.set("out", "elsewhere").unwrap();
    assert_eq!(moved.hash(), base.hash());
    for (key, value) in [("seed", "3"), ("teacher_rank", "2"), ("mode", "modified"), ("ridge", "1e-6")] {
        let mut s = base.clone();
        s.set(key, value).unwrap();
        assert_ne!(s.hash(), base.hash(), "{key}");
    }
}

#[test]
fn bad_settings_are_rejected() {
    let mut s = Scenario::preset("default").unwrap();
    assert!(s.set("no_such_key", "1").is_err());
    assert!(s.set("eta", "fast").is_err());
    assert!(s.apply_text("d 20").is_err());
    assert!(Scenario::preset("fig9").is_err());
}

#[test]
fn ensemble_file_round_trips() {
    let scn = Scenario::preset("default").unwrap();
    let mu = scn.init_model_n(12, 4).unwrap();
    let back = io::ensemble_from_text(&io::ensemble_to_text(&mu)).unwrap();
    assert_eq!(back.fingerprint(), mu.fingerprint());
}

fn icfl(dir: &std::path::Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_icfl")).args(args).arg("--out").arg(dir).output().unwrap()
}

#[test]
fn train_writes_log_config_and_ensemble() {
    let dir = std::env::temp_dir().join(format!("icfl-train-{}", std::process::id()));
    let args = [
        "train", "--quadrature-size", "256", "--set", "n=20", "--set", "max_steps=10", "--set", "teacher_n=40",
    ];
    let out = icfl(&dir, &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let table = Table::read(&dir.join("train.csv")).unwrap();
    assert_eq!(table.rows.len(), 11);
    let losses = table.numbers("loss").unwrap();
    assert!(losses.iter().all(|l| l.is_finite() && *l >= 0.0));
    assert!(losses[10] < losses[0]);

    let text = std::fs::read_to_string(dir.join("train.config")).unwrap();
    let mut scn = Scenario::preset("train").unwrap();
    scn.apply_text(&text).unwrap();
    assert_eq!(table.provenance, Provenance { scenario: scn.hash(), seed: 0 });
    assert_eq!(io::read_ensemble(&dir.join("train_final.ens")).unwrap().len(), 20);

    let again = icfl(&dir, &["train", "--config", dir.join("train.config").to_str().unwrap()]);
    assert!(again.status.success());
    assert_eq!(Table::read(&dir.join("train.csv")).unwrap().rows, table.rows);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = std::env::temp_dir().join(format!("icfl-bad-{}", std::process::id()));
    let out = icfl(&dir, &["train", "--set", "bogus=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}
