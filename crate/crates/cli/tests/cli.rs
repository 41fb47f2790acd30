use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use elopt::stats::RandomSource;

fn elopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elopt"))
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

fn field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .parse()
        .unwrap()
}

fn write_normal(path: &Path, seed: u64, n: usize) -> Vec<f64> {
    let mut rng = RandomSource::new(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    let body: String = std::iter::once("xi".to_string())
        .chain(xs.iter().map(|x| format!("{x}")))
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(path, body).unwrap();
    xs
}

#[test]
fn value_interval_is_ordered_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("s.csv");
    write_normal(&data, 1, 40);
    let args = [
        "ci-value",
        "--problem",
        "quadratic",
        "--data",
        data.to_str().unwrap(),
        "--beta",
        "0.05",
        "--method",
        "el",
    ];
    let a = elopt(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    let text = stdout(&a);
    assert!(field(&text, "lower") <= field(&text, "upper"));
    assert_eq!(field(&text, "df"), 2.0);
    assert_eq!(stdout(&elopt(&args)), text);
}

#[test]
fn clt2_needs_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("s.csv");
    fs::write(&data, "0.1\n-0.3\n0.7\n").unwrap();
    let o = elopt(&[
        "ci-value",
        "--problem",
        "quadratic",
        "--data",
        data.to_str().unwrap(),
        "--method",
        "clt2",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("at least 4"), "{}", stderr(&o));
}

#[test]
fn srp_at_sample_optimum_starts_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("s.csv");
    let xs = write_normal(&data, 2, 30);
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let o = elopt(&[
        "ci-gap",
        "--problem",
        "quadratic",
        "--data",
        data.to_str().unwrap(),
        "--method",
        "srp",
        "--solution",
        &format!("{mean}"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(field(&text, "lower"), 0.0);
    assert!(field(&text, "upper") >= 0.0);
}

#[test]
fn input_errors_have_distinct_messages() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("s.csv");
    write_normal(&data, 3, 20);
    let path = data.to_str().unwrap();

    let wrong_solution = elopt(&[
        "ci-gap",
        "--problem",
        "quadratic",
        "--data",
        path,
        "--solution",
        "0.1,0.2",
    ]);
    assert_eq!(wrong_solution.status.code(), Some(2));
    assert!(stderr(&wrong_solution).contains("solution has 2 entries"));

    let two_cols = dir.path().join("two.csv");
    fs::write(&two_cols, "1,2\n3,4\n5,6\n").unwrap();
    let wrong_data = elopt(&[
        "ci-value",
        "--problem",
        "cvar",
        "--data",
        two_cols.to_str().unwrap(),
    ]);
    assert_eq!(wrong_data.status.code(), Some(2));
    assert!(stderr(&wrong_data).contains("data column"));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "1\n2\nabc\n").unwrap();
    let malformed = elopt(&[
        "ci-value",
        "--problem",
        "quadratic",
        "--data",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(malformed.status.code(), Some(2));
    assert!(stderr(&malformed).contains("malformed CSV"));

    let missing = elopt(&[
        "ci-value",
        "--problem",
        "quadratic",
        "--data",
        "/nonexistent/s.csv",
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("cannot read data file"));

    let usage = elopt(&["ci-value", "--problem", "quadratic"]);
    assert_eq!(usage.status.code(), Some(1));
    let method = elopt(&[
        "ci-value",
        "--problem",
        "quadratic",
        "--data",
        path,
        "--method",
        "srp",
    ]);
    assert_eq!(method.status.code(), Some(1));
}

#[test]
fn el_gap_brackets_true_gap_in_most_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let mut hits = 0;
    for seed in 0..10 {
        let data = dir.path().join(format!("s{seed}.csv"));
        write_normal(&data, 100 + seed, 100);
        let o = elopt(&[
            "ci-gap",
            "--problem",
            "quadratic",
            "--data",
            data.to_str().unwrap(),
            "--solution",
            "0.62",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let text = stdout(&o);
        if field(&text, "lower") <= 0.39 && 0.39 <= field(&text, "upper") {
            hits += 1;
        }
    }
    assert!(hits >= 7, "{hits}/10");
}

const TABLE1: &str = "problem = \"quadratic\"\nmode = \"value\"\nsample_sizes = [10, 50, 100]\nreplications = 3\nmethods = [\"EL\", \"CLT\", \"CLT2\"]\n";

#[test]
fn bench_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("t1.toml");
    fs::write(&cfg, TABLE1).unwrap();
    let out = dir.path().join("out");
    let o = elopt(&[
        "bench",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--jobs",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("coverage.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "method,n,coverage,mean_lower,mean_upper,mean_width,sd_width,failures"
    );
    assert_eq!(lines.len(), 1 + 9);
    assert!(out.join("coverage.md").exists());
    assert_eq!(
        fs::read_to_string(out.join("records.csv"))
            .unwrap()
            .lines()
            .count(),
        1 + 27
    );
    assert!(stdout(&o).contains("truth=1.0000"));
}

#[test]
fn bench_seed_changes_records_not_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("t1.toml");
    fs::write(&cfg, TABLE1).unwrap();
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = elopt(&[
            "bench",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(out.join("records.csv")).unwrap()
    };
    let a = run("1", "a");
    let b = run("1", "b");
    let c = run("2", "c");
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.lines().next(), c.lines().next());
    assert_eq!(a.lines().count(), c.lines().count());
}

#[test]
fn bench_lists_every_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(
        &cfg,
        "problem = \"quadratic\"\nreplicatons = 5\nbeta = 1.5\n",
    )
    .unwrap();
    let o = elopt(&["bench", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("replicatons"), "{err}");
    assert!(err.contains("beta"), "{err}");
}

#[test]
fn problems_list_names_builtins() {
    let o = elopt(&["problems-list"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for name in ["quadratic", "cvar", "portfolio"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{text}");
    }
}
