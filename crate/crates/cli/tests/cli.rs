use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kolmo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kolmo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

#[test]
fn multiindex_delta_four_prints_bell_many_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = kolmo(&["multiindex", "--class", "delta", "--k", "4", "--out", &out_arg(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 15);
    let saved = fs::read_to_string(out.join("multiindex_delta_k4.txt")).unwrap();
    assert_eq!(saved.lines().count(), 15);
}

#[test]
fn multiindex_tau_three_has_thirteen_entries() {
    let tmp = tempfile::tempdir().unwrap();
    let o = kolmo(&["multiindex", "--class", "tau", "--k", "3", "--out", &out_arg(tmp.path())]);
    assert_eq!(o.status.code(), Some(0));
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 13);
}

#[test]
fn empty_config_is_a_usage_error_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("empty.conf");
    fs::write(&cfg, "# nothing here\n\n").unwrap();
    let out = tmp.path().join("never");
    let o = kolmo(&["forward", "--config", cfg.to_str().unwrap(), "--out", &out_arg(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn unknown_config_key_reports_its_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.conf");
    fs::write(&cfg, "M = 32\n# comment\nwidth = 3\n").unwrap();
    let out = tmp.path().join("never");
    let o = kolmo(&["forward", "--config", cfg.to_str().unwrap(), "--out", &out_arg(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn bad_flag_value_exits_with_two() {
    let o = kolmo(&["derivative", "--k", "two"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn forward_writes_density_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("fwd.conf");
    fs::write(&cfg, "M = 32\nT = 0.01 # short\ndt = 1e-3\nK = 2\n").unwrap();
    let out = tmp.path().join("fwd");
    let o = kolmo(&["forward", "--config", cfg.to_str().unwrap(), "--out", &out_arg(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("forward.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("x,value"));
    assert_eq!(csv.lines().count(), 33);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("K = 2"));
    assert!(manifest.contains("PASS mass drift"));
    assert!(manifest.contains("overall = PASS"));
}

#[test]
fn flags_override_config_and_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("fwd.conf");
    fs::write(&cfg, "M = 64\nT = 0.02\ndt = 1e-3\n").unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = kolmo(&["forward", "--config", cfg.to_str().unwrap(), "--M", "32", "--out", &out_arg(dir)]);
        assert_eq!(o.status.code(), Some(0));
    }
    let fa = fs::read(a.join("forward.csv")).unwrap();
    assert_eq!(fa, fs::read(b.join("forward.csv")).unwrap());
    assert_eq!(String::from_utf8(fa).unwrap().lines().count(), 33);
}

#[test]
fn model_file_and_field_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("model.conf"), "model = aggregation\nV = v.csv\n").unwrap();
    let mut v = String::from("x,value\n");
    let mut mu = String::from("x,value\n");
    for j in 0..32 {
        let x = j as f64 / 32.0;
        v.push_str(&format!("{x},{}\n", (2.0 * std::f64::consts::PI * x).cos()));
        mu.push_str(&format!("{x},{}\n", 1.0 + 0.3 * (2.0 * std::f64::consts::PI * x).sin()));
    }
    fs::write(tmp.path().join("v.csv"), v).unwrap();
    fs::write(tmp.path().join("mu.csv"), mu).unwrap();
    let cfg = tmp.path().join("run.conf");
    fs::write(&cfg, "model = model.conf\nmu0 = mu.csv\nT = 0.01\ndt = 1e-3\n").unwrap();
    let out = tmp.path().join("out");
    let o = kolmo(&["backward", "--config", cfg.to_str().unwrap(), "--out", &out_arg(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("backward.csv")).unwrap();
    assert_eq!(csv.lines().count(), 33);
}

#[test]
fn missing_model_file_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = kolmo(&["forward", "--model", "/nonexistent/model.conf", "--out", &out_arg(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn verify_expansion_reports_second_order_slope() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("exp");
    let o = kolmo(&["verify-expansion", "--k", "1", "--out", &out_arg(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    let gate = manifest
        .lines()
        .map(str::trim_start)
        .find(|l| (l.starts_with("PASS ") || l.starts_with("FAIL ")) && l.contains("remainder slope"))
        .unwrap();
    assert!(gate.starts_with("PASS remainder slope"), "{gate}");
    let csv = fs::read_to_string(out.join("expansion_k1.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("eps,remainder,slope"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn duality_check_passes_on_a_small_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let o = kolmo(&["duality-check", "--M", "64", "--T", "0.1", "--dt", "2e-5", "--out", &out_arg(tmp.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(tmp.path().join("duality.csv").exists());
}

#[test]
fn second_derivative_kernel_on_a_lattice() {
    let tmp = tempfile::tempdir().unwrap();
    let o = kolmo(&[
        "derivative", "--k", "2", "--M", "64", "--stride", "8", "--T", "0.02", "--dt", "1e-4",
        "--out", &out_arg(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let csv = fs::read_to_string(tmp.path().join("kernel_k2.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("z1,z2,value"));
    assert_eq!(csv.lines().count(), 1 + 64);
}

#[test]
fn short_chaos_run_fails_the_replication_gate_but_writes_its_report() {
    let tmp = tempfile::tempdir().unwrap();
    let o = kolmo(&[
        "chaos", "--M", "64", "--K", "2", "--Ns", "10,20", "--reps", "20", "--T", "0.02", "--dt", "1e-3",
        "--seed", "3", "--out", &out_arg(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    let csv = fs::read_to_string(tmp.path().join("chaos.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("N,mean_error,stderr,reps"));
    assert!(lines.next().unwrap().starts_with("10,"));
    let manifest = fs::read_to_string(tmp.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("FAIL replications"));
    assert!(manifest.contains("overall = FAIL"));
}

#[test]
fn accept_subset_runs_the_multiindex_criterion() {
    let tmp = tempfile::tempdir().unwrap();
    let o = kolmo(&["accept", "--only", "9", "--out", &out_arg(tmp.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("criterion  9 [PASS]"));
    let manifest = fs::read_to_string(tmp.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("only = 9"));
    assert!(tmp.path().join("multiindex.csv").exists());
}

#[test]
fn accept_rejects_unknown_criterion() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("never");
    let o = kolmo(&["accept", "--only", "13", "--out", &out_arg(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}
