use std::path::Path;
use std::process::{Command, Output};

fn scrpo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scrpo"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SCRPO_OUT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

const SMALL: &[&str] = &[
    "--set", "model.d_model=16",
    "--set", "model.n_heads=2",
    "--set", "model.d_ff=32",
    "--set", "task.difficulties=[1]",
    "--set", "task.train_size=60",
    "--set", "task.eval_size=20",
    "--set", "trainer.iterations=10",
    "--set", "trainer.batch_prompts=4",
    "--set", "trainer.eval_every=5",
    "--set", "trainer.eval_k=2",
    "--set", "trainer.checkpoint_every=5",
    "--set", "sampler.max_new_tokens=48",
    "--set", "stage2.records=2",
    "--set", "warm_start.steps=40",
    "--set", "warm_start.batch=8",
    "--set", "warm_start.problems=20",
    "--set", "warm_start.lr=0.01",
    "--set", "ablation.no_vbf=true",
];

fn train_small(dir: &Path) -> Output {
    let mut args = vec!["train", "--out", "run"];
    args.extend_from_slice(SMALL);
    scrpo(&args, dir)
}

#[test]
fn unknown_override_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = scrpo(&["train", "--set", "trainer.no_such_field=3"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn invalid_value_and_bad_flags_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&scrpo(&["train", "--set", "vbf.acc_low=0.9"], dir.path())), 1);
    assert_eq!(code(&scrpo(&["train", "--set", "trainer.iterations"], dir.path())), 1);
    assert_eq!(code(&scrpo(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&scrpo(&["report", "--metrics", "m.jsonl", "--format", "xml"], dir.path())), 1);
}

#[test]
fn missing_policy_file_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = scrpo(&["eval", "--policy", "absent.bin"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let good = scrpo(&["gradcheck", "--seed", "0"], dir.path());
    assert_eq!(code(&good), 0);
    assert!(String::from_utf8_lossy(&good.stdout).contains("max relative error"));
    let bad = scrpo(&["gradcheck", "--seed", "0", "--corrupt-scale", "1.01"], dir.path());
    assert_eq!(code(&bad), 3);
}

#[test]
fn empty_metrics_file_warns_without_failing() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("m.jsonl"), "").unwrap();
    let o = scrpo(&["report", "--metrics", "m.jsonl"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 1);
}

#[test]
fn train_report_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_small(dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    for f in ["config.resolved.toml", "metrics.jsonl", "events.jsonl", "timing.jsonl", "vbf.jsonl", "pool.jsonl", "policy.bin"] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let records = metrics.lines().count();
    let stage2: Vec<u64> = metrics
        .lines()
        .filter(|l| l.contains("\"stage\":\"self_correction\""))
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["iteration"].as_u64().unwrap()
        })
        .collect();
    assert!(!stage2.is_empty());
    assert!(stage2.iter().all(|i| i % 5 == 0), "{stage2:?}");

    let csv = scrpo(&["report", "--metrics", "run/metrics.jsonl", "--out", "series.csv"], dir.path());
    assert_eq!(code(&csv), 0);
    let text = std::fs::read_to_string(dir.path().join("series.csv")).unwrap();
    assert_eq!(text.lines().count(), records + 1);
    assert!(text.starts_with("iteration,stage,"));

    let table = scrpo(
        &["report", "--metrics", "run/metrics.jsonl", "--metrics", "run/metrics.jsonl", "--label", "a", "--label", "b"],
        dir.path(),
    );
    assert_eq!(code(&table), 0);
    let table = String::from_utf8_lossy(&table.stdout);
    assert!(table.contains("| a |") && table.contains("| b |"), "{table}");

    let pool = scrpo(&["inspect-pool", "--pool", "run/pool.jsonl"], dir.path());
    assert_eq!(code(&pool), 0);
    assert!(String::from_utf8_lossy(&pool.stdout).starts_with("records: "));

    let mut args = vec!["eval", "--policy", "run/policy.bin", "--k", "1"];
    args.extend_from_slice(SMALL);
    let e = scrpo(&args, dir.path());
    assert_eq!(code(&e), 0, "{}", String::from_utf8_lossy(&e.stderr));
    assert!(String::from_utf8_lossy(&e.stdout).contains("greedy accuracy"));

    let e = scrpo(&["eval", "--policy", "run/policy.bin"], dir.path());
    assert_eq!(code(&e), 1, "desk shape differs from the saved policy");
}

#[test]
fn halted_run_resumes_to_the_same_metrics() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_small(dir.path())), 0);
    let mut args = vec!["train", "--out", "split", "--halt-after", "5"];
    args.extend_from_slice(SMALL);
    assert_eq!(code(&scrpo(&args, dir.path())), 0);
    let mut args = vec!["train", "--out", "split", "--resume"];
    args.extend_from_slice(SMALL);
    let o = scrpo(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let a = std::fs::read(dir.path().join("run/metrics.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("split/metrics.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn out_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--set", "trainer.iterations=1", "--set", "trainer.eval_every=0"]);
    let o = Command::new(env!("CARGO_BIN_EXE_scrpo"))
        .args(&args)
        .current_dir(dir.path())
        .env("SCRPO_OUT", "elsewhere")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("elsewhere/train/metrics.jsonl").exists());
}
