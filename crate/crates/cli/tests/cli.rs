use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use barrier_synth_cli::exit;

/// Small, quick variant of the shipped example.
const QUICK: &str = r#"
[system]
name = "double_integrator"

[sampling]
lower = [-10.0, -40.0]
upper = [0.0, 40.0]
n_min = 243
n_first = 243
delta = 0.05
n_max = 6561
seed = 4

[fit]
probes = 32

[fit.search]
restarts = 2
evals_per_param = 30
subsample = 2000

[simulate]
horizon = 1.0
sweep_grid = 3
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("cfg.toml");
    fs::write(&path, text).unwrap();
    path
}

fn cli(cfg: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_barrier-synth"))
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .unwrap()
}

fn code(o: &Output) -> u8 {
    o.status.code().unwrap() as u8
}

#[test]
fn dry_run_touches_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUICK);
    let out = dir.path().join("out");
    let o = cli(&cfg, &out, &["--dry-run", "pipeline"]);
    assert_eq!(code(&o), exit::OK, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}

#[test]
fn usage_and_config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad = write_config(dir.path(), &QUICK.replace("probes = 32", "probes = \"many\""));
    assert_eq!(code(&cli(&bad, &out, &["pipeline"])), exit::USAGE);
    assert_eq!(
        code(&cli(&dir.path().join("missing.toml"), &out, &["pipeline"])),
        exit::USAGE
    );
    let good = write_config(dir.path(), QUICK);
    assert_eq!(code(&cli(&good, &out, &["explode"])), exit::USAGE);
    assert_eq!(code(&cli(&good, &out, &["--threads", "0", "sample"])), exit::USAGE);
}

#[test]
fn missing_intermediate_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUICK);
    let out = dir.path().join("out");
    let o = cli(&cfg, &out, &["boundary"]);
    assert_eq!(code(&o), exit::INTEGRITY, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn non_convergence_exits_three_and_keeps_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &QUICK
            .replace("delta = 0.05", "delta = 1e-9")
            .replace("n_max = 6561", "n_max = 2187"),
    );
    let out = dir.path().join("out");
    let o = cli(&cfg, &out, &["pipeline"]);
    assert_eq!(code(&o), exit::NOT_CONVERGED, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("samples.jsonl").exists());
    assert!(out.join("convergence.csv").exists());
    assert!(!out.join("boundary.jsonl").exists());
}

#[test]
fn stages_run_individually_and_cache_by_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUICK);
    let out = dir.path().join("out");
    for stage in ["sample", "boundary", "fit", "simulate"] {
        let o = cli(&cfg, &out, &[stage]);
        assert_eq!(code(&o), exit::OK, "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = cli(&cfg, &out, &["pipeline"]);
    assert_eq!(code(&o), exit::OK);
    let log = String::from_utf8_lossy(&o.stderr);
    assert!(log.contains("sample: reusing"), "{log}");
    assert!(log.contains("simulate: reusing"), "{log}");
    assert!(out.join("report.md").exists());

    let before = fs::read(out.join("fit_multi.json")).unwrap();
    // Damage one intermediate: only it and its dependents rerun.
    let mut text = fs::read_to_string(out.join("fit_nonuniform.json")).unwrap();
    text.push(' ');
    fs::write(out.join("fit_nonuniform.json"), text).unwrap();
    let o = cli(&cfg, &out, &["pipeline"]);
    assert_eq!(code(&o), exit::OK);
    let log = String::from_utf8_lossy(&o.stderr);
    assert!(log.contains("boundary: reusing"), "{log}");
    assert!(log.contains("fit: reusing fit_uniform.json"), "{log}");
    assert!(log.contains("fit nonuniform:"), "{log}");
    assert_eq!(fs::read(out.join("fit_multi.json")).unwrap(), before);

    // A deleted file is regenerated byte for byte.
    let samples = fs::read(out.join("samples.jsonl")).unwrap();
    fs::remove_file(out.join("samples.jsonl")).unwrap();
    assert_eq!(code(&cli(&cfg, &out, &["pipeline"])), exit::OK);
    assert_eq!(fs::read(out.join("samples.jsonl")).unwrap(), samples);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUICK);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&cli(&cfg, &a, &["sample"])), exit::OK);
    assert_eq!(code(&cli(&cfg, &b, &["--seed", "9", "sample"])), exit::OK);
    assert_ne!(
        fs::read(a.join("samples.jsonl")).unwrap(),
        fs::read(b.join("samples.jsonl")).unwrap()
    );
}
