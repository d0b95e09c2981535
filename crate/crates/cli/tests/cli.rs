use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use beamsel::dataset::Dataset;
use beamsel::eval::read_report;
use beamsel::model::checkpoint::Checkpoint;
use beamsel::model::predict;
use beamsel::train::Split;
use beamsel_cli::{EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL};

const SMALL: &str = "\
seed = 3
[scene]
user_grid_spacing = 2.0
user_rows = 2
[train]
epochs = 2
[sweep]
fractions = [0.5, 1.0]
[gradcheck]
samples = 2
max_entries_per_tensor = 4
";

fn beamsel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_beamsel"))
        .args(args)
        .env("BEAMSEL_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = beamsel(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn generate(dir: &Path, config: &str) -> String {
    let out = dir.join("run");
    let out = out.to_str().unwrap().to_owned();
    ok(&["generate", "--config", config, "--out", &out]);
    out
}

#[test]
fn generate_train_eval_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = generate(tmp.path(), &cfg);
    let run = Path::new(&out);
    for f in ["config.toml", "dataset.txt", "split.txt", "scene.txt", "generate.log"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let stdout = ok(&["train", "--config", &cfg, "--out", &out]);
    assert!(stdout.contains("2 epochs"), "{stdout}");
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().filter(|l| !l.starts_with('#')).count(), 3);

    let stdout = ok(&["eval", "--config", &cfg, "--out", &out, "--beams", "1,3", "--diagnostics"]);
    assert!(stdout.starts_with("bs_accuracy"), "{stdout}");
    assert!(stdout.contains("b=3"));
    assert!(run.join("diagnostics.csv").exists());

    ok(&["sweep", "--config", &cfg, "--out", &out]);
    let sweep = fs::read_to_string(run.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().filter(|l| !l.starts_with('#')).count(), 3);
}

#[test]
fn eval_report_matches_direct_prediction() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = generate(tmp.path(), &cfg);
    ok(&["train", "--config", &cfg, "--out", &out]);
    ok(&["eval", "--config", &cfg, "--out", &out, "--beams", "1"]);

    let run = Path::new(&out);
    let report = read_report(&run.join("report.csv")).unwrap();
    let dataset = Dataset::read(&run.join("dataset.txt")).unwrap();
    let split = Split::read(&run.join("split.txt")).unwrap();
    let ckpt = Checkpoint::load(&run.join("checkpoint.bin")).unwrap();
    let (mut bs_hits, mut total_hits) = (0usize, 0usize);
    for &i in &split.test {
        let s = &dataset.samples[i];
        let p = predict(&ckpt.params, &ckpt.header.norm.normalize(&s.features), 1).unwrap();
        let bs_ok = p.bs_index == s.label.bs_index;
        bs_hits += bs_ok as usize;
        total_hits += (bs_ok && p.beams[0] == s.label.beam_index) as usize;
    }
    let n = split.test.len() as f64;
    assert_eq!(report.sample_count, split.test.len());
    assert!((report.bs_accuracy - bs_hits as f64 / n).abs() < 1e-12);
    assert!((report.total_accuracy_at(1) - total_hits as f64 / n).abs() < 1e-12);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let out = out.to_str().unwrap();
        ok(&["generate", "--config", &cfg, "--out", out]);
        ok(&["train", "--config", &cfg, "--out", out]);
        ok(&["eval", "--config", &cfg, "--out", out]);
        runs.push(tmp.path().join(name));
    }
    for f in ["dataset.txt", "split.txt", "scene.txt", "checkpoint.bin", "history.csv", "report.csv"] {
        assert_eq!(fs::read(runs[0].join(f)).unwrap(), fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_errors_exit_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[scene]\nmmw_sites = []\n");
    let out = beamsel(&["generate", "--config", &cfg, "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = beamsel(&["generate", "--preset", "city"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn missing_or_mismatched_data_exits_with_data_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let missing = tmp.path().join("nope.txt");
    let out = beamsel(&["train", "--config", &cfg, "--dataset", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));

    let out = generate(tmp.path(), &cfg);
    ok(&["train", "--config", &cfg, "--out", &out]);
    let other = write_config(tmp.path(), &SMALL.replace("seed = 3", "seed = 4"));
    let other_out = tmp.path().join("other");
    let other_out = other_out.to_str().unwrap();
    ok(&["generate", "--config", &other, "--out", other_out]);
    let ckpt = Path::new(&out).join("checkpoint.bin");
    let res = beamsel(&["eval", "--config", &other, "--out", other_out, "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(EXIT_DATA));
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_tensor() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("g");
    let out = out.to_str().unwrap();
    let report = ok(&["gradcheck", "--config", &cfg, "--out", out]);
    assert!(report.contains("beam_rates"), "{report}");
    assert!(Path::new(out).join("gradcheck.txt").exists());

    let bad = beamsel(&["gradcheck", "--config", &cfg, "--out", out, "--corrupt", "bs_logits.weight"]);
    assert_eq!(bad.status.code(), Some(EXIT_NUMERICAL), "{}", String::from_utf8_lossy(&bad.stdout));

    let unknown = beamsel(&["gradcheck", "--config", &cfg, "--out", out, "--corrupt", "nope"]);
    assert_eq!(unknown.status.code(), Some(EXIT_CONFIG));
}
