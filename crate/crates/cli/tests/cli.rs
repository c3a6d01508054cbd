//! The `branch-mpc` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use branch_mpc::sim::{Metrics, SimLog};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_branch-mpc")).args(args).output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn read_log(path: &Path) -> SimLog {
    SimLog::read_jsonl(std::io::BufReader::new(std::fs::File::open(path).unwrap())).unwrap()
}

#[test]
fn run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = bin(&[
        "run", "--scenario", "overtake", "--alpha", "0.9", "--seed", "7", "--duration", "0.5", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let log = read_log(&out.join("log.jsonl"));
    assert_eq!(log.seed, 7);
    assert_eq!(log.records.len(), 6);
    assert!(log.records.iter().all(|r| r.tree.is_none()));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], Metrics::CSV_HEADER);
    assert_eq!(lines.len(), 2);
    assert!(text(&o.stderr).contains("1-alpha"));

    // the resolved config reproduces the run
    let again = dir.path().join("again");
    let o = bin(&[
        "run", "--config", out.join("config.toml").to_str().unwrap(), "--trees", "--out",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let log2 = read_log(&again.join("log.jsonl"));
    assert!(log2.records[..5].iter().all(|r| r.tree.is_some()));
    for (a, b) in log.records.iter().zip(&log2.records) {
        assert_eq!(a.ego, b.ego);
    }
}

#[test]
fn alpha_out_of_range_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["run", "--alpha", "1.5", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains("alpha"), "{}", text(&o.stderr));
    assert!(!dir.path().join("log.jsonl").exists());
}

#[test]
fn malformed_config_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "kind = \"merge\"\nseed = 4\n\n[planner]\nsqp_iterations = \"two\"\n").unwrap();
    let o = bin(&["run", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let err = text(&o.stderr);
    assert!(err.contains(&format!("{}:5:", path.display())), "{err}");
    assert!(err.contains("planner.sqp_iterations"), "{err}");

    std::fs::write(&path, "seed = 4\nwat = 1\n").unwrap();
    let o = bin(&["run", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    let err = text(&o.stderr);
    assert!(!o.status.success());
    assert!(err.contains(":2:1") && err.contains("wat"), "{err}");

    std::fs::write(&path, "seed = = 4\n").unwrap();
    let o = bin(&["run", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains(":1:"), "{}", text(&o.stderr));
}

#[test]
fn sweep_writes_one_row_per_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&[
        "sweep", "--scenario", "quadruped", "--alphas", "0.1,0.5,0.9", "--duration", "0.3", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("alpha,scenario"));
    let alphas: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(alphas, ["0.1", "0.5", "0.9"]);
    for a in alphas {
        assert!(dir.path().join(format!("alpha_{a}/log.jsonl")).exists());
    }
}

#[test]
fn verify_passes_and_reports_residuals() {
    let o = bin(&["verify"]);
    let out = text(&o.stdout);
    assert!(o.status.success(), "{out}");
    let rows: Vec<&str> = out.lines().filter(|l| l.contains("max_residual=")).collect();
    assert!(rows.len() >= 9, "{out}");
    assert!(rows.iter().all(|r| r.contains(" PASS ")), "{out}");
}

#[test]
fn verify_catches_an_injected_jacobian_bug() {
    let o = bin(&["verify", "--inject-jacobian-bug"]);
    let out = text(&o.stdout);
    assert!(!o.status.success(), "{out}");
    let failing: Vec<&str> = out.lines().filter(|l| l.contains(" FAIL ")).collect();
    assert!(failing.iter().any(|l| l.starts_with("dynamics_jacobian")), "{out}");
}

#[test]
fn unknown_scenario_is_a_usage_error() {
    let o = bin(&["run", "--scenario", "parking"]);
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains("parking"));
}
