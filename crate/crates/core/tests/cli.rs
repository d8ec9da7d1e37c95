mod common;

use std::path::Path;
use std::process::{Command, Output};

use obrs_align::trace::write_trace_file;

const SMALL_SIM: &str = "sim.noise_grid = 0, 1\nsim.trials_per_level = 4\nsim.vocab_size = 20\n";

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_obrs-align"));
    cmd.env_remove("OBRS_ALIGN_SEED");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn usage_errors_exit_one() {
    let out = run(bin().arg("verify").arg("--bogus"));
    assert_eq!(out.status.code(), Some(1));
    let out = run(bin().arg("frobnicate"));
    assert_eq!(out.status.code(), Some(1));
    let out = run(bin().arg("--help"));
    assert_eq!(out.status.code(), Some(0));
    let out = run(bin().args(["verify", "--tol=-1"]));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_writes_csv_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("sim.conf");
    write(&conf, SMALL_SIM);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let lam = dir.path().join("lambda.csv");
    for path in [&a, &b] {
        let out = run(bin()
            .arg("simulate")
            .arg("--config")
            .arg(&conf)
            .arg("--out")
            .arg(path)
            .arg("--lambda-out")
            .arg(&lam));
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    let first = std::fs::read(&a).unwrap();
    assert_eq!(first, std::fs::read(&b).unwrap());
    let text = String::from_utf8(first).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("eta,trial,kl_pq,z,kl_post,ratio"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 8);
    for row in rows.iter().filter(|r| r[0] == 0.0) {
        assert_eq!(row[2], 0.0);
        assert_eq!(row[3], 1.0);
        assert_eq!(row[4], 0.0);
    }
    assert!(rows.iter().filter(|r| r[0] == 1.0).all(|r| r[4] < r[2]));
    let sweep = std::fs::read_to_string(&lam).unwrap();
    assert!(sweep.starts_with("eta,trial,lambda,kl_pq,z,kl_post,ratio\n"));
}

#[test]
fn seed_precedence_is_flag_then_env_then_file() {
    let dir = tempfile::tempdir().unwrap();
    let simulate = |name: &str, file_seed: u64, env: Option<&str>, flag: Option<u64>| -> Vec<u8> {
        let conf = dir.path().join(format!("{name}.conf"));
        write(&conf, &format!("seed = {file_seed}\n{SMALL_SIM}"));
        let csv = dir.path().join(format!("{name}.csv"));
        let mut cmd = bin();
        cmd.arg("simulate").arg("--config").arg(&conf).arg("--out").arg(&csv);
        if let Some(e) = env {
            cmd.env("OBRS_ALIGN_SEED", e);
        }
        if let Some(s) = flag {
            cmd.arg("--seed").arg(s.to_string());
        }
        let out = run(&mut cmd);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        std::fs::read(&csv).unwrap()
    };
    let s1 = simulate("s1", 1, None, None);
    let s2 = simulate("s2", 2, None, None);
    let s3 = simulate("s3", 3, None, None);
    assert_ne!(s1, s2);
    assert_eq!(simulate("env", 1, Some("2"), None), s2);
    assert_eq!(simulate("flag", 1, Some("2"), Some(3)), s3);

    let conf = dir.path().join("bad.conf");
    write(&conf, SMALL_SIM);
    let out = run(bin()
        .env("OBRS_ALIGN_SEED", "twelve")
        .arg("simulate")
        .arg("--config")
        .arg(&conf)
        .arg("--out")
        .arg(dir.path().join("bad.csv")));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("OBRS_ALIGN_SEED"));
}

#[test]
fn verify_fixed_pair_and_unit_budget() {
    let out = run(bin().args(["verify", "--fixed-pair", "--budgets", "0.7", "--instances", "1"]));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("lambda 1.000000000000"), "{text}");
    assert!(text.contains("0 failures"));

    let out = run(bin().args(["verify", "--budgets", "1.0", "--instances", "20"]));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("20 cases, 0 failures"));

    let out = run(bin().args(["verify", "--size", "40"]));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zbench_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("z.csv");
    let out = run(bin().args(["zbench", "--example", "--k", "1,4", "--out"]).arg(&csv));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
        .collect();
    assert!((rows[0][3] - 1.0 / 3.0).abs() <= 1e-12);
    assert!((rows[1][3] - 1.0).abs() <= 1e-12);
}

#[test]
fn train_toy_writes_logs_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let start = std::time::Instant::now();
    let out = run(bin()
        .args(["train-toy", "--scheme", "on_policy", "--seeds", "2", "--steps", "200", "--out"])
        .arg(dir.path()));
    assert!(start.elapsed().as_secs() < 60);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for seed in 0..2 {
        let log = std::fs::read_to_string(dir.path().join(format!("on_policy_seed{seed}.jsonl"))).unwrap();
        assert_eq!(log.lines().count(), 200);
        let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        for key in ["step", "reward_mean", "kl_actor_policy", "acceptance_rate", "grad_norm", "collapsed"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("on_policy_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["final_rewards"].as_array().unwrap().len(), 2);

    let out = run(bin().args(["train-toy", "--scheme", "nonsense", "--out"]).arg(dir.path()));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn analyze_trace_outputs_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let ctxs = common::contexts(8, 30, 1.0, 2);
    let (records, _) = common::sampled_batch(&ctxs, 500, 5, 3);
    write_trace_file(&trace, &records).unwrap();
    let csv = dir.path().join("w.csv");
    let json = dir.path().join("w.json");
    let analyze = |trace: &Path| {
        run(bin()
            .args(["analyze-trace", "--seed", "4", "--trace"])
            .arg(trace)
            .arg("--out-csv")
            .arg(&csv)
            .arg("--out-json")
            .arg(&json))
    };
    let out = analyze(&trace);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 501);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(summary["tokens"], 500);
    let first = std::fs::read(&csv).unwrap();
    analyze(&trace);
    assert_eq!(std::fs::read(&csv).unwrap(), first);

    let broken = dir.path().join("broken.jsonl");
    let text = std::fs::read_to_string(&trace).unwrap();
    let mut lines: Vec<String> = text.lines().take(3).map(str::to_string).collect();
    let v: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
    let mut obj = v.as_object().unwrap().clone();
    obj.remove("logp_ref");
    lines[2] = serde_json::to_string(&obj).unwrap();
    write(&broken, &(lines.join("\n") + "\n"));
    let out = analyze(&broken);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("logp_ref") && err.contains("line 3"), "{err}");

    let masked = dir.path().join("masked.jsonl");
    let line = |pos: usize| {
        format!(
            "{{\"token_id\":0,\"logp_inf\":-0.001,\"logp_ref\":-50.0,\"logp_new\":-50.0,\"advantage\":1.0,\"group_id\":0,\"trajectory_id\":0,\"position\":{pos},\"topk_inf\":[[0,-0.001]],\"topk_new\":[[1,-0.0001],[0,-50.0]]}}\n"
        )
    };
    write(&masked, &(0..5).map(line).collect::<String>());
    let out = analyze(&masked);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    let out = analyze(&dir.path().join("absent.jsonl"));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("absent.jsonl"));
}
