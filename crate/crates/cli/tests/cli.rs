use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hoplab::summary::Summary;
use tempfile::TempDir;

const SWEEP: &str = r#"{
  "kind": "beta_sweep",
  "seed": 11,
  "laws": [{"kind": "exponential", "lambda": 2.0}],
  "model": {"alpha": 1.0},
  "grid": [0, 1, 2],
  "samples": {"n": 60, "env_samples": 4, "draws": 400}
}"#;

fn hoplab(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hoplab"));
    cmd.args(args).env_remove("HOPLAB_WORKERS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn hoplab")
}

fn write_manifest(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run_ok(manifest: &Path, out: &Path, extra: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut args = vec!["run", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = hoplab(&args, envs);
    assert!(o.status.success(), "hoplab failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn summary(out: &Path) -> Summary {
    serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

fn data_rows(out: &Path) -> Vec<String> {
    fs::read_to_string(out.join("results.csv")).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn beta_sweep_writes_one_row_per_beta_and_method() {
    let tmp = TempDir::new().unwrap();
    let manifest = write_manifest(tmp.path(), "sweep.json", SWEEP);
    let out = tmp.path().join("run");
    run_ok(&manifest, &out, &[], &[]);
    let rows = data_rows(&out);
    assert_eq!(rows.len(), 9);
    for method in ["variational_full", "variational_nn", "nn_analytic"] {
        let betas: Vec<&String> = rows.iter().filter(|r| r.contains(&format!("/{method}/beta="))).collect();
        assert_eq!(betas.len(), 3, "{method}");
    }
    let header = fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(header.lines().next().unwrap().ends_with("master_seed,sub_seed_label,manifest_hash"));
    let s = summary(&out);
    assert_eq!(s.rows, 9);
    assert_eq!(s.master_seed, 11);
    assert_eq!(s.fits.len(), 3);
    assert!(out.join("fits.csv").is_file() && out.join("manifest.json").is_file());
}

#[test]
fn reruns_are_byte_identical_across_worker_counts() {
    let tmp = TempDir::new().unwrap();
    let manifest = write_manifest(tmp.path(), "sweep.json", SWEEP);
    let runs = [
        (tmp.path().join("a"), vec!["--workers", "1"], vec![]),
        (tmp.path().join("b"), vec!["--workers", "3"], vec![]),
        (tmp.path().join("c"), vec![], vec![("HOPLAB_WORKERS", "2")]),
        (tmp.path().join("d"), vec![], vec![]),
    ];
    let mut csvs = Vec::new();
    for (out, extra, envs) in &runs {
        run_ok(&manifest, out, extra, envs);
        csvs.push((fs::read(out.join("results.csv")).unwrap(), fs::read(out.join("fits.csv")).unwrap()));
    }
    assert!(csvs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn l_sweep_fits_gap_exponent_against_prediction() {
    let tmp = TempDir::new().unwrap();
    let manifest = write_manifest(
        tmp.path(),
        "l.json",
        r#"{
  "kind": "L_sweep",
  "seed": 3,
  "laws": [{"kind": "exponential", "lambda": 2.0}],
  "model": {"alpha": 1.0},
  "grid": [100, 200, 400],
  "samples": {"seeds": 2}
}"#,
    );
    let out = tmp.path().join("run");
    run_ok(&manifest, &out, &[], &[]);
    assert_eq!(data_rows(&out).len(), 6);
    let s = summary(&out);
    let gap = s.fits.iter().find(|f| f.experiment.starts_with("gap_exponent/")).expect("gap fit");
    assert_eq!(gap.predicted, Some(-2.0));
    assert_eq!(gap.n_points, 3);
    let cheeger = s.fits.iter().find(|f| f.experiment.starts_with("cheeger_exponent/")).expect("cheeger fit");
    assert_eq!(cheeger.predicted, Some(-1.5));
}

#[test]
fn seed_override_changes_seed_and_hash() {
    let tmp = TempDir::new().unwrap();
    let manifest = write_manifest(tmp.path(), "sweep.json", SWEEP);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(&manifest, &a, &[], &[]);
    run_ok(&manifest, &b, &["--seed", "12"], &[]);
    let (sa, sb) = (summary(&a), summary(&b));
    assert_eq!(sb.master_seed, 12);
    assert_ne!(sa.manifest_hash, sb.manifest_hash);
    assert_ne!(data_rows(&a), data_rows(&b));
    let resolved = fs::read_to_string(b.join("manifest.json")).unwrap();
    assert!(resolved.contains("\"seed\": 12"));
}

#[test]
fn missing_seed_can_come_from_the_command_line() {
    let tmp = TempDir::new().unwrap();
    let manifest = write_manifest(tmp.path(), "sweep.json", &SWEEP.replace("\"seed\": 11,", ""));
    let out = tmp.path().join("run");
    let o = hoplab(&["run", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("master seed"));
    run_ok(&manifest, &out, &["--seed", "5"], &[]);
    assert_eq!(summary(&out).master_seed, 5);
}

#[test]
fn report_renders_and_is_idempotent() {
    let tmp = TempDir::new().unwrap();
    let manifest = write_manifest(tmp.path(), "sweep.json", SWEEP);
    let runs = tmp.path().join("runs");
    run_ok(&manifest, &runs.join("sweep"), &[], &[]);
    let first = hoplab(&["report", runs.to_str().unwrap()], &[]);
    assert!(first.status.success());
    let text = String::from_utf8(first.stdout).unwrap();
    assert_eq!(text.matches("== beta_sweep (beta_sweep) ==").count(), 1);
    assert!(text.contains("experiment") && text.contains("predicted"));
    let saved = fs::read_to_string(runs.join("report.txt")).unwrap();
    assert_eq!(saved, text);
    let second = hoplab(&["report", runs.to_str().unwrap()], &[]);
    assert_eq!(String::from_utf8(second.stdout).unwrap(), text);
    let direct = hoplab(&["report", runs.join("sweep").to_str().unwrap()], &[]);
    assert_eq!(String::from_utf8(direct.stdout).unwrap(), text);
}

#[test]
fn report_rejects_empty_and_malformed_directories() {
    let tmp = TempDir::new().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = hoplab(&["report", empty.to_str().unwrap()], &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no run outputs"));

    let manifest = write_manifest(tmp.path(), "sweep.json", SWEEP);
    let out = tmp.path().join("run");
    run_ok(&manifest, &out, &[], &[]);
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    let truncated: Vec<&str> = csv.lines().take(4).collect();
    fs::write(out.join("results.csv"), truncated.join("\n") + "\n").unwrap();
    let o = hoplab(&["report", out.to_str().unwrap()], &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("rows"));

    fs::write(out.join("summary.json"), "{\"kind\": 3").unwrap();
    let o = hoplab(&["report", out.to_str().unwrap()], &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("malformed"));
}

#[test]
fn invalid_inputs_exit_nonzero() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let cases = [
        SWEEP.replace("[0, 1, 2]", "[2, 1]"),
        SWEEP.replace("\"lambda\": 2.0", "\"lambda\": -2.0"),
        SWEEP.replace("beta_sweep", "no_such_kind"),
        SWEEP.replace("\"n\": 60", "\"n\": 60, \"eps_trunc\": 2.0"),
        "{ not json".to_string(),
    ];
    for (i, text) in cases.iter().enumerate() {
        let manifest = write_manifest(tmp.path(), &format!("bad{i}.json"), text);
        let o = hoplab(&["run", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
        assert!(!o.status.success(), "case {i} accepted");
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "), "case {i}");
    }
    assert!(!out.join("results.csv").exists());

    let manifest = write_manifest(tmp.path(), "sweep.json", SWEEP);
    for bad in ["0", "two", "-1"] {
        let o =
            hoplab(&["run", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()], &[("HOPLAB_WORKERS", bad)]);
        assert!(!o.status.success(), "HOPLAB_WORKERS={bad} accepted");
    }
    let o = hoplab(&["run", tmp.path().join("absent.json").to_str().unwrap(), "--out", "x"], &[]);
    assert!(!o.status.success());
}

#[test]
fn disconnected_problem_is_a_numerical_failure() {
    let tmp = TempDir::new().unwrap();
    let manifest = write_manifest(
        tmp.path(),
        "far.json",
        r#"{
  "kind": "variational",
  "seed": 1,
  "laws": [{"kind": "exponential", "lambda": 1.0}],
  "model": {"alpha": 0.5},
  "grid": [64],
  "samples": {"n": 200, "env_samples": 2}
}"#,
    );
    let out = tmp.path().join("run");
    let o = hoplab(&["run", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("numerical failure: "), "{err}");
    assert!(err.contains("beta = 64"), "{err}");
}

#[test]
fn every_kind_runs_at_small_size() {
    let law = r#"[{"kind": "exponential", "lambda": 2.0}]"#;
    let cases = [
        ("msd", r#""model": {"alpha": 1.0}, "grid": [0, 1], "samples": {"replicas": 20, "horizon": 50}"#, 2),
        ("variational", r#""model": {"alpha": 1.0}, "grid": [0, 1], "samples": {"n": 40, "env_samples": 3}"#, 2),
        ("nn_analytic", r#""model": {"alpha": 1.0}, "grid": [0, 1], "samples": {"draws": 200}"#, 2),
        (
            "beta_sweep",
            r#""model": {"alpha": 1.0}, "grid": [0, 1], "methods": ["msd", "variational_nn"], "samples": {"n": 40, "env_samples": 3, "replicas": 20, "horizon": 50}"#,
            4,
        ),
        ("spectral_scan", r#""model": {"alpha": 1.0}, "grid": [20, 40], "samples": {"seeds": 2}"#, 4),
        ("cheeger_scan", r#""model": {"alpha": 1.0}, "grid": [20, 40], "samples": {"seeds": 2}"#, 4),
        ("L_sweep", r#""model": {"alpha": 1.0}, "grid": [20, 40], "samples": {"seeds": 2}"#, 4),
        ("certificate", r#""model": {"alpha": 1.0}, "grid": [1.0], "samples": {"order": 4, "draws": 200}"#, 0),
        (
            "bounds_crosscheck",
            r#""model": {"alpha": 0.5}, "grid": [1], "samples": {"n": 40, "env_samples": 3, "moment_samples": 2000, "upper_n": 20, "upper_env_samples": 5}"#,
            3,
        ),
    ];
    let tmp = TempDir::new().unwrap();
    for (kind, body, rows) in cases {
        let text = format!("{{\"kind\": \"{kind}\", \"seed\": 2, \"laws\": {law}, {body}}}");
        let manifest = write_manifest(tmp.path(), &format!("{kind}.json"), &text);
        let out = tmp.path().join(kind);
        run_ok(&manifest, &out, &[], &[]);
        let s = summary(&out);
        assert_eq!(s.kind, kind);
        assert_eq!(s.rows, data_rows(&out).len());
        if rows > 0 {
            assert_eq!(s.rows, rows, "{kind}");
        } else {
            assert!(s.rows > 0 && !s.checks.is_empty(), "{kind}");
        }
    }
    let o = hoplab(&["report", tmp.path().to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8(o.stdout).unwrap().matches("== ").count(), 9);
}
