use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn diana(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diana"))
        .args(args)
        .env_remove("DIANA_OUT_DIR")
        .output()
        .expect("spawn diana")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn field<'a>(header: &'a str, row: &'a str, name: &str) -> &'a str {
    let i = header.split(',').position(|c| c == name).unwrap();
    row.split(',').nth(i).unwrap()
}

#[test]
fn run_writes_priorities_and_queues() {
    let dir = tempfile::tempdir().unwrap();
    let out = diana(&["run", "--scenario", path(&scenario("priorities.scenario")), "--out", path(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let jobs = fs::read_to_string(dir.path().join("jobs.csv")).unwrap();
    let mut lines = jobs.lines();
    let header = lines.next().unwrap();
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    let at_start = |owner: &str, submit: &str| {
        let row = rows
            .iter()
            .find(|r| field(header, r, "owner") == owner && field(header, r, "submit") == submit)
            .unwrap();
        (field(header, row, "priority_at_start"), field(header, row, "queue_at_start"))
    };
    assert_eq!(at_start("A", "1.00000"), ("0.458647", "Q2"));
    assert_eq!(at_start("A", "2.00000"), ("-0.630556", "Q4"));
    assert_eq!(at_start("B", "3.00000"), ("0.697479", "Q1"));
    for name in ["sites.csv", "site_stats.csv", "migrations.csv", "summary.csv"] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = diana(&[
            "run",
            "--scenario",
            path(&scenario("overload.scenario")),
            "--seed",
            "7",
            "--job-count",
            "200",
            "--out",
            path(dir.path()),
        ]);
        assert!(out.status.success());
    }
    for name in ["jobs.csv", "sites.csv", "site_stats.csv", "migrations.csv", "summary.csv"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn out_dir_defaults_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_diana"))
        .args(["run", "--scenario", path(&scenario("priorities.scenario"))])
        .env("DIANA_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("jobs.csv").is_file());
}

#[test]
fn bulk_group_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = diana(&["run", "--scenario", path(&scenario("bulk.scenario")), "--out", path(dir.path())]);
    assert!(out.status.success());
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    let header = lines.next().unwrap();
    let row = lines.next().unwrap();
    assert_eq!(field(header, row, "jobs"), "10000");
    let makespan: f64 = field(header, row, "makespan").parse().unwrap();
    assert!((makespan - 10.0).abs() < 0.01, "makespan {makespan}");
}

#[test]
fn compare_writes_means_per_policy() {
    let dir = tempfile::tempdir().unwrap();
    let out = diana(&[
        "compare",
        "--scenario",
        path(&scenario("sweep.scenario")),
        "--policies",
        "diana,greedy,fcfs",
        "--seeds",
        "1,2",
        "--job-count",
        "60",
        "--jobs",
        "2",
        "--out",
        path(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 9);
    let keys: Vec<String> = rows
        .iter()
        .map(|r| r.split(',').take(2).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(
        keys,
        [
            "diana,1", "diana,2", "greedy,1", "greedy,2", "fcfs,1", "fcfs,2", "diana,mean", "greedy,mean",
            "fcfs,mean"
        ]
    );
}

#[test]
fn compare_needs_two_policies() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = scenario("sweep.scenario");
    let one = diana(&["compare", "--scenario", path(&sweep), "--policies", "diana", "--out", path(dir.path())]);
    assert_eq!(one.status.code(), Some(2));
    let none = diana(&["compare", "--scenario", path(&sweep), "--out", path(dir.path())]);
    assert_eq!(none.status.code(), Some(2));
    let bad = diana(&["compare", "--scenario", path(&sweep), "--policies", "diana,lottery"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(!dir.path().join("compare.csv").exists());
}

#[test]
fn validate_accepts_bundled_scenarios() {
    for name in ["bulk.scenario", "priorities.scenario", "sweep.scenario", "overload.scenario", "little.scenario"] {
        let out = diana(&["validate", "--scenario", path(&scenario(name))]);
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(out.stderr.is_empty(), "{name} warned");
    }
}

#[test]
fn validate_reports_parse_location() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.scenario");
    fs::write(&file, "[config\nthrs = 0.5\n").unwrap();
    let out = diana(&["validate", "--scenario", path(&file)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 1"), "{err}");
}

#[test]
fn validate_warns_on_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("extra.scenario");
    let mut text = fs::read_to_string(scenario("priorities.scenario")).unwrap();
    text.insert_str(0, "colour = \"blue\"\n");
    fs::write(&file, text).unwrap();
    let out = diana(&["validate", "--scenario", path(&file)]);
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("warning") && err.contains("colour"), "{err}");
}
