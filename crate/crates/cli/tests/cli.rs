use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::Instant;

use painet::data::read_dataset;

fn painet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_painet"))
        .args(args)
        .env_remove("PAINET_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec![
        "generate",
        "--n-particles",
        "6",
        "--frames",
        "4",
        "--samples",
        "20",
        "--out",
        s(&out),
    ];
    args.extend_from_slice(extra);
    let o = painet(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("dataset.txt")
}

fn train(dir: &Path, data: &Path, name: &str, extra: &[&str]) -> (Output, PathBuf) {
    let out = dir.join(name);
    let mut args = vec![
        "train",
        "--data",
        s(data),
        "--hidden",
        "8",
        "--mlp-hidden",
        "8",
        "--horizon",
        "4",
        "--out",
        s(&out),
    ];
    args.extend_from_slice(extra);
    (painet(&args), out)
}

#[test]
fn generate_writes_a_parseable_dataset_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let path = generate(dir.path(), "d", &["--seed", "5"]);
    let ds = read_dataset(&path).unwrap();
    assert_eq!(
        (ds.samples.len(), ds.particles(), ds.frames(), ds.seed),
        (20, 6, 4, 5)
    );
    let snap = std::fs::read_to_string(dir.path().join("d/resolved.conf")).unwrap();
    assert!(snap.lines().any(|l| l == "seed=5"));
    assert!(snap.lines().any(|l| l == "sim.particles=6"));
}

#[test]
fn generate_is_byte_reproducible_and_replays_from_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "a", &["--seed", "9", "--spring-k", "7.5"]);
    let b = generate(dir.path(), "b", &["--seed", "9", "--spring-k", "7.5"]);
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let snap = dir.path().join("a/resolved.conf");
    let out = dir.path().join("replay");
    let o = painet(&["generate", "--config", s(&snap), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(bytes, std::fs::read(out.join("dataset.txt")).unwrap());
    let c = generate(dir.path(), "c", &["--seed", "10", "--spring-k", "7.5"]);
    assert_ne!(bytes, std::fs::read(&c).unwrap());
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, extra: &[&str], name: &str| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_painet"));
        cmd.args([
            "generate",
            "--samples",
            "2",
            "--n-particles",
            "3",
            "--frames",
            "2",
            "--out",
            s(&out),
        ]);
        cmd.args(extra)
            .env_remove("PAINET_SEED")
            .stdout(Stdio::null());
        if let Some(v) = env {
            cmd.env("PAINET_SEED", v);
        }
        assert!(cmd.status().unwrap().success());
        read_dataset(&out.join("dataset.txt")).unwrap().seed
    };
    assert_eq!(run(None, &[], "a"), 0);
    assert_eq!(run(Some("11"), &[], "b"), 11);
    assert_eq!(run(Some("11"), &["--set", "seed=12"], "c"), 12);
    assert_eq!(
        run(Some("11"), &["--set", "seed=12", "--seed", "13"], "d"),
        13
    );
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    for args in [
        vec!["generate", "--samples", "0"],
        vec!["generate", "--dt", "abc"],
        vec!["generate", "--dt", "-0.1"],
        vec!["generate", "--set", "sim.bogus=1"],
        vec!["verify", "--suite", "nonsense"],
        vec!["eval", "--task", "s2x"],
    ] {
        let mut a = args.clone();
        a.extend(["--out", s(&out)]);
        let o = painet(&a);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
    }
    assert!(!out.join("dataset.txt").exists());
}

#[test]
fn missing_dataset_exits_1_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.txt");
    let (o, _) = train(dir.path(), &missing, "m", &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
}

#[test]
fn divergent_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "d", &[]);
    let (o, _) = train(dir.path(), &data, "m", &["--epochs", "3", "--lr", "1e12"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn tiny_run_is_fast_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "d", &[]);
    let start = Instant::now();
    let (o, a) = train(dir.path(), &data, "a", &["--epochs", "30", "--lr", "3e-3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(start.elapsed().as_secs_f64() < 60.0);
    let (o, b) = train(dir.path(), &data, "b", &["--epochs", "30", "--lr", "3e-3"]);
    assert_eq!(code(&o), 0);
    let read = |p: &Path, f: &str| std::fs::read(p.join(f)).unwrap();
    assert_eq!(read(&a, "loss.csv"), read(&b, "loss.csv"));
    assert_eq!(read(&a, "model.painet"), read(&b, "model.painet"));
    let curve = String::from_utf8(read(&a, "loss.csv")).unwrap();
    assert!(curve.starts_with("epoch,train,val\n"));
    assert_eq!(curve.lines().count(), 31);
}

#[test]
fn zero_learning_rate_gives_a_flat_curve() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "d", &[]);
    let (o, out) = train(dir.path(), &data, "m", &["--epochs", "4", "--lr", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let curve = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    let rows: Vec<&str> = curve
        .lines()
        .skip(1)
        .map(|l| l.split_once(',').unwrap().1)
        .collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| *r == rows[0]), "{curve}");
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn eval_tasks_and_baseline_columns() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "d", &[]);
    let (o, m) = train(dir.path(), &data, "m", &["--epochs", "2"]);
    assert_eq!(code(&o), 0);
    let model = m.join("model.painet");
    let eval = |task: &str, extra: &[&str], name: &str| {
        let out = dir.path().join(name);
        let mut args = vec![
            "eval",
            "--model",
            s(&model),
            "--data",
            s(&data),
            "--task",
            task,
            "--out",
            s(&out),
        ];
        args.extend_from_slice(extra);
        (painet(&args), out)
    };

    let (o, out) = eval("s2t", &[], "t");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("linear: F-MSE="));
    let rows = read_csv(&out.join("eval.csv"));
    assert_eq!(rows[0], ["step", "mse", "linear_mse"]);
    assert_eq!(rows.len(), 5);
    let metrics = read_csv(&out.join("metrics.csv"));
    assert_eq!(metrics[0], ["metric", "model", "linear"]);
    assert!(metrics.iter().any(|r| r[0] == "a_mse"));

    let (o, out) = eval("s2s", &[], "s");
    assert_eq!(code(&o), 0);
    let rows = read_csv(&out.join("eval.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1][0], "4");
    let metrics = read_csv(&out.join("metrics.csv"));
    assert!(metrics.iter().any(|r| r[0] == "f_mse"));
    assert!(!metrics.iter().any(|r| r[0] == "a_mse"));
    assert!(!stdout(&o).contains("A-MSE"));

    let (o, _) = eval("s2t", &["--horizon", "3"], "h");
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("horizon"));
}

#[test]
fn overfit_run_scores_near_zero_on_its_training_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = painet(&[
        "generate",
        "--n-particles",
        "5",
        "--frames",
        "3",
        "--samples",
        "1",
        "--split",
        "1,0,0",
        "--seed",
        "2",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let data = out.join("dataset.txt");
    let m = dir.path().join("m");
    let o = painet(&[
        "train",
        "--data",
        s(&data),
        "--hidden",
        "16",
        "--mlp-hidden",
        "32",
        "--horizon",
        "3",
        "--epochs",
        "300",
        "--patience",
        "300",
        "--lr",
        "3e-3",
        "--out",
        s(&m),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let e = dir.path().join("e");
    let model = m.join("model.painet");
    let o = painet(&[
        "eval",
        "--model",
        s(&model),
        "--data",
        s(&data),
        "--split",
        "train",
        "--out",
        s(&e),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = read_csv(&e.join("metrics.csv"));
    let row = metrics.iter().find(|r| r[0] == "a_mse").unwrap();
    let (model, linear): (f64, f64) = (row[1].parse().unwrap(), row[2].parse().unwrap());
    assert!(model < 0.05 * linear, "model {model} vs linear {linear}");
}

#[test]
fn verify_reports_one_line_per_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    let o = painet(&[
        "verify",
        "--suite",
        "descent",
        "--trials",
        "100",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = stdout(&o);
    let line = line.trim();
    let v: f64 = line
        .strip_prefix("descent: max_violation=")
        .and_then(|r| r.strip_suffix(" PASS"))
        .unwrap_or_else(|| panic!("{line}"))
        .parse()
        .unwrap();
    assert!(v <= 1e-9);
    assert_eq!(read_csv(&out.join("verify.csv")).len(), 2);

    let o = painet(&[
        "verify",
        "--suite",
        "equivariance",
        "--trials",
        "3",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3);
    assert!(stdout(&o).lines().all(|l| l.ends_with(" PASS")));
}

#[test]
fn zero_tolerance_exercises_the_failure_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    let o = painet(&[
        "verify",
        "--suite",
        "matrix-vs-pairwise",
        "--trials",
        "2",
        "--tolerance",
        "0",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 4);
    assert!(stdout(&o).trim().ends_with("FAIL"));
    assert!(stderr(&o).contains("max_abs_diff="), "{}", stderr(&o));
}

#[test]
fn scale_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = painet(&[
        "scale",
        "--particles",
        "4,8",
        "--horizons",
        "2,3",
        "--repeats",
        "1",
        "--set",
        "model.hidden=8",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = read_csv(&out.join("scaling.csv"));
    assert_eq!(rows[0], ["N", "T", "time_ms", "mem_bytes"]);
    assert_eq!(rows.len(), 5);
}
