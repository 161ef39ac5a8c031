use std::path::Path;
use std::process::Command;

use rbsde_control_cli::{read_report, report_diff, run, DiffError, RunConfig};

fn config(body: &str, out: &Path) -> RunConfig {
    let mut c = RunConfig::parse(body).unwrap();
    c.output_dir = out.to_path_buf();
    c
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rbsde-control"))
}

#[test]
fn invariants_on_constant_obstacle_pass_without_push() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(
        "problem = \"constant_obstacle\"\ngrids = [{ nt = 20, nx = 40 }]\nsuites = [\"invariants\"]\n",
        dir.path(),
    );
    let report = run(&c, true).unwrap();
    assert!(report.passed);
    let suite = report.suite("invariants").unwrap();
    assert_eq!(suite.metrics["grid0.k_mass"], 0.0);
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn oracle_on_american_put_meets_binomial_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(
        "problem = \"american_put\"\ngrids = [{ nt = 200, nx = 400, x_lo = 20, x_hi = 300 }]\nsuites = [\"oracle\"]\n",
        dir.path(),
    );
    let report = run(&c, true).unwrap();
    let gap = report.suite("oracle").unwrap().metrics["grid0.binomial_gap_rel"];
    assert!(gap <= 5e-3, "{gap}");
    assert!(report.passed);
    for file in ["value_lattice_grid0.csv", "value_hjb_grid0.csv"] {
        assert!(dir.path().join(file).exists(), "{file}");
    }
}

#[test]
fn empty_suites_is_a_parse_error() {
    let err = RunConfig::parse("problem = \"american_put\"\ngrids = [{ nt = 10, nx = 20 }]\nsuites = []\n").unwrap_err();
    assert!(err.to_string().contains("suites"));
}

#[test]
fn reports_are_reproducible_after_normalization() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(
        "problem = \"american_put\"\ngrids = [{ nt = 20, nx = 40, x_lo = 20, x_hi = 300 }]\nsuites = [\"stability\", \"bruteforce\"]\nseed = 4\n",
        dir.path(),
    );
    run(&c, true).unwrap();
    let first = std::fs::read(dir.path().join("report.json")).unwrap();
    run(&c, true).unwrap();
    let second = std::fs::read(dir.path().join("report.json")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn diff_shows_dpp_gap_shrinking_under_refinement() {
    let dir = tempfile::tempdir().unwrap();
    let body = |nt: usize, nx: usize| {
        format!("problem = \"american_put\"\ngrids = [{{ nt = {nt}, nx = {nx}, x_lo = 20, x_hi = 300 }}]\nsuites = [\"dpp\"]\n")
    };
    let coarse = run(&config(&body(50, 100), &dir.path().join("a")), true).unwrap();
    let fine = run(&config(&body(100, 200), &dir.path().join("b")), true).unwrap();
    let diff = report_diff(&coarse, &fine).unwrap();
    let line = diff.lines().find(|l| l.starts_with("dpp.grid0.dpp_max_abs_gap:")).unwrap();
    let ratio: f64 = line.rsplit("(x").next().unwrap().trim_end_matches(')').parse().unwrap();
    assert!(ratio < 1.0, "{line}");
    assert_eq!(report_diff(&fine, &fine.clone()).unwrap(), "");
}

#[test]
fn disjoint_suites_do_not_diff() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(
        &config(
            "problem = \"constant_obstacle\"\ngrids = [{ nt = 10, nx = 20 }]\nsuites = [\"invariants\"]\n",
            &dir.path().join("a"),
        ),
        true,
    )
    .unwrap();
    let b = run(
        &config(
            "problem = \"constant_obstacle\"\ngrids = [{ nt = 10, nx = 20 }]\nsuites = [\"oracle\"]\n",
            &dir.path().join("b"),
        ),
        true,
    )
    .unwrap();
    assert!(matches!(report_diff(&a, &b), Err(DiffError::KeyMismatch { .. })));
}

#[test]
fn binary_exit_status_follows_pass_fail() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.toml");
    std::fs::write(
        &good,
        "problem = \"constant_obstacle\"\ngrids = [{ nt = 10, nx = 20 }]\nsuites = [\"invariants\"]\n",
    )
    .unwrap();
    let status = binary()
        .args(["--config", good.to_str().unwrap(), "--output", dir.path().join("o1").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stdout));

    // Too few time steps for the dpp window: the suite fails inside the report.
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "problem = \"constant_obstacle\"\ngrids = [{ nt = 2, nx = 20 }]\nsuites = [\"dpp\"]\n").unwrap();
    let out = dir.path().join("o2");
    let status = binary()
        .args(["--config", bad.to_str().unwrap(), "--output", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));
    let report = read_report(&out.join("report.json")).unwrap();
    assert!(!report.passed && report.suites[0].error.is_some());
}

#[test]
fn binary_reports_config_position_and_lists_problems() {
    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("broken.toml");
    std::fs::write(&broken, "problem = \"american_put\"\n\ngrids = [{ nt = 10 nx = 20 }]\n").unwrap();
    let out = binary().args(["--config", broken.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let out = binary().arg("--list-problems").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l == "american_put"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(
        &path,
        "problem = \"constant_obstacle\"\ngrids = [{ nt = 10, nx = 20 }]\nsuites = [\"bruteforce\"]\nseed = 1\n",
    )
    .unwrap();
    let out = dir.path().join("o");
    let status = binary()
        .args(["--config", path.to_str().unwrap(), "--output", out.to_str().unwrap(), "--seed", "99"])
        .args(["--normalize-timestamps"])
        .output()
        .unwrap();
    assert!(status.status.success());
    let report = read_report(&out.join("report.json")).unwrap();
    assert_eq!(report.seed, 99);
    assert_eq!(report.started_unix_s, 0);
}
