use std::path::Path;
use std::process::{Command, Output};

fn siting(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_siting")).current_dir(dir).args(args).output().unwrap()
}

fn tiny_config(dir: &Path) {
    std::fs::write(
        dir.join("tiny.toml"),
        "population = 2\nepochs = 2\ntimesteps_per_epoch = 48\nupdates_per_epoch = 2\nnsga_population = 10\nnsga_generations = 3\ntrials = 20\n",
    )
    .unwrap();
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(siting(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(siting(dir.path(), &["train"]).status.code(), Some(2));
    assert_eq!(siting(dir.path(), &["baseline", "--city", "x", "--method", "annealing"]).status.code(), Some(2));
    assert_eq!(siting(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = siting(dir.path(), &["dump-constraints", "--city", "missing.txt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.txt"));
    let out = siting(dir.path(), &["citygen", "--preset", "atlantis"]);
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(dir.path().join("bad.toml"), "no_such_key = 1\n").unwrap();
    let out = siting(dir.path(), &["--config", "bad.toml", "citygen", "--desk", "30"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pipeline_citygen_train_baseline_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_config(d);
    assert!(siting(d, &["--seed", "3", "citygen", "--desk", "40", "--out", "city.txt"]).status.success());
    assert!(d.join("city.txt").exists());

    let out = siting(d, &["--config", "tiny.toml", "train", "--city", "city.txt", "--out", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.json", "metrics.tsv", "hv_curve.tsv", "archive.jsonl", "checkpoints/policy_0.bin"] {
        assert!(d.join("run").join(f).exists(), "missing {f}");
    }

    for method in ["random", "beam", "nsga2"] {
        let out = siting(d, &["--config", "tiny.toml", "baseline", "--city", "city.txt", "--method", method, "--out", method]);
        assert!(out.status.success(), "{method}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(d.join(method).join("result.json").exists());
    }

    let out = siting(d, &["evaluate", "--city", "city.txt", "run", "random", "beam", "nsga2"]);
    assert!(out.status.success());
    let table = String::from_utf8_lossy(&out.stdout);
    assert_eq!(table.lines().count(), 5, "{table}");
    assert!(table.lines().next().unwrap().contains("HV"));

    let out = siting(d, &["export-front", "--archive", "run/archive.jsonl"]);
    assert!(out.status.success());
    let tsv = String::from_utf8_lossy(&out.stdout);
    assert!(tsv.starts_with("id\tpolicy"));
    assert!(tsv.lines().count() >= 2);

    let out = siting(d, &["dump-constraints", "--city", "city.txt"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("Budget"));
}

#[test]
fn citygen_is_deterministic_in_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a.txt", "b.txt"] {
        assert!(siting(d, &["--seed", "11", "citygen", "--desk", "30", "--out", name]).status.success());
    }
    assert!(siting(d, &["--seed", "12", "citygen", "--desk", "30", "--out", "c.txt"]).status.success());
    let read = |n: &str| std::fs::read(d.join(n)).unwrap();
    assert_eq!(read("a.txt"), read("b.txt"));
    assert_ne!(read("a.txt"), read("c.txt"));
}
