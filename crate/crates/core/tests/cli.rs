use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gossip-langevin"))
}

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let path = dir.join("config.in.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin().args(args).arg("--config").arg(config).arg("--out").arg(out).output().unwrap()
}

fn small_quadratic(agents: usize, a: f64, step: f64, sigma: f64) -> Value {
    json!({
        "topology": {"kind": "ring"},
        "agents": agents,
        "potential": {"kind": "quadratic", "components": vec![json!({"a": [[a]], "b": [0.0]}); agents]},
        "schedule": {"step": {"constant": step}, "anneal": "constant", "sigma": sigma},
        "steps": 200,
        "replicas": 4,
        "seed": 1,
        "out": "unused",
        "init": {"kind": "point", "point": [1.0]}
    })
}

#[test]
fn spectra_reports_ring4_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_quadratic(4, 1.0, 0.1, 0.1));
    let out = run(&["spectra"], &cfg, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&std::fs::read(dir.path().join("spectra.json")).unwrap()).unwrap();
    let text = report.to_string();
    assert!(text.contains("beta"), "{text}");
    assert!(dir.path().join("config.json").exists());
}

#[test]
fn single_agent_network_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_quadratic(1, 1.0, 0.1, 0.1));
    let out = run(&["spectra"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn malformed_config_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"topology\": 3}").unwrap();
    assert_eq!(run(&["bounds"], &path, dir.path()).status.code(), Some(2));
    let missing = dir.path().join("absent.json");
    assert_eq!(run(&["bounds"], &missing, dir.path()).status.code(), Some(2));
}

#[test]
fn inapplicable_bounds_exit_with_vacuous_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["bounds"], &shipped("convergence_diminishing.json"), dir.path());
    assert_eq!(out.status.code(), Some(4));
    let report: Value = serde_json::from_slice(&std::fs::read(dir.path().join("bounds.json")).unwrap()).unwrap();
    assert_eq!(report["vacuous"], json!(true));
}

#[test]
fn applicable_bounds_exit_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["bounds"], &shipped("consensus_fine_sde.json"), dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn stiff_potential_with_large_step_diverges() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_quadratic(4, 1000.0, 0.5, 1.0);
    cfg["steps"] = json!(2000);
    let cfg = write_config(dir.path(), &cfg);
    let out = run(&["convergence"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn selftest_passes_and_names_injected_faults() {
    let clean = bin().arg("selftest").output().unwrap();
    assert_eq!(clean.status.code(), Some(0), "{}", String::from_utf8_lossy(&clean.stdout));

    let weights = bin().args(["selftest", "--inject-corrupt-weights"]).output().unwrap();
    assert_ne!(weights.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&weights.stdout);
    assert!(stdout.contains("FAIL double_stochasticity"), "{stdout}");

    let plan = bin().args(["selftest", "--inject-permuted-assignment"]).output().unwrap();
    assert_ne!(plan.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&plan.stdout);
    assert!(stdout.contains("FAIL ot_bruteforce_equivalence"), "{stdout}");
}

#[test]
fn convergence_writes_series_plot_and_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["convergence", "--config"])
        .arg(shipped("convergence_constant.json"))
        .args(["--steps", "1000", "--replicas", "32", "--seed", "9", "--h", "const:0.02", "--sigma", "0.5", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["series.csv", "trajectory.csv", "fit.json", "plot.svg", "config.json"] {
        assert!(dir.path().join(file).exists(), "missing {file}");
    }
    let echo: Value = serde_json::from_slice(&std::fs::read(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["steps"], json!(1000));
    assert_eq!(echo["replicas"], json!(32));
    assert_eq!(echo["seed"], json!(9));
    assert_eq!(echo["schedule"]["sigma"], json!(0.5));
    assert_eq!(echo["schedule"]["step"], json!({"constant": 0.02}));
    let series = std::fs::read_to_string(dir.path().join("series.csv")).unwrap();
    assert!(series.starts_with("k,w2_gaussian,w2_empirical,w2_discrete,recursion_bound,limit_bound"));
    assert!(std::fs::read_to_string(dir.path().join("plot.svg")).unwrap().contains("<svg"));
}

#[test]
fn consensus_writes_energy_series() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["consensus", "--config"])
        .arg(shipped("consensus_ring8.json"))
        .args(["--steps", "2000", "--replicas", "4", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let series = std::fs::read_to_string(dir.path().join("series.csv")).unwrap();
    assert!(series.starts_with("k,mean_energy,w2_dirac"));
    assert!(series.lines().count() > 10);
}

#[test]
fn step_override_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["bounds", "--config"])
        .arg(shipped("convergence_constant.json"))
        .args(["--h", "fast", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
