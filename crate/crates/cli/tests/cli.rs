//! End-to-end tests of the `twig` binary: schema contracts, determinism,
//! exit codes, and cross-command consistency.

use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn twig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twig"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn tmp_path(name: &str) -> PathBuf {
    let mut p = std::env::temp_dir();
    p.push(format!("twig-cli-test-{}-{name}", std::process::id()));
    p
}

#[test]
fn gen_is_byte_deterministic() {
    let a = twig(&["gen", "--seed", "11", "--max-tokens", "12"]);
    let b = twig(&["gen", "--seed", "11", "--max-tokens", "12"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let v = stdout_json(&a);
    assert_eq!(v["seed"], 11);
    assert!(v["logit_checksum"].as_str().unwrap().len() == 16);
}

#[test]
fn fastv_with_full_retention_matches_greedy() {
    let greedy = stdout_json(&twig(&["gen", "--seed", "4", "--max-tokens", "10"]));
    let fastv = stdout_json(&twig(&[
        "gen",
        "--mode",
        "fastv",
        "--seed",
        "4",
        "--max-tokens",
        "10",
        "--r",
        "24",
    ]));
    assert_eq!(greedy["tokens"], fastv["tokens"]);
    assert_eq!(greedy["logit_checksum"], fastv["logit_checksum"]);
    assert_eq!(fastv["kept_visual"].as_array().unwrap().len(), 24);
}

#[test]
fn malformed_config_exits_2_with_field_path() {
    let path = tmp_path("bad.json");
    std::fs::write(&path, r#"{"model": {"num_layers": true}}"#).unwrap();
    let out = twig(&["gen", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let v: Value = serde_json::from_slice(&out.stdout).expect("error JSON");
    let message = v["error"]["message"].as_str().unwrap();
    assert!(message.contains("model.num_layers"), "message: {message}");
    assert_eq!(v["error"]["exit"], 2);
    std::fs::remove_file(&path).ok();
}

#[test]
fn conflicting_retention_flags_exit_2() {
    let out = twig(&["gen", "--mode", "fastv", "--r", "4", "--target-rbar", "8", "--kf", "6"]);
    assert_eq!(out.status.code(), Some(2));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["error"]["message"].as_str().unwrap().contains("mutually exclusive"));
}

#[test]
fn ssd_defaults_and_schema() {
    let v = stdout_json(&twig(&["ssd", "--seed", "2", "--max-tokens", "16"]));
    assert_eq!(v["delta"], 5);
    assert_eq!(v["theta"], 0.6);
    for key in ["tokens", "iterations", "tok_ar", "target_forwards", "kept_visual"] {
        assert!(!v[key].is_null(), "missing {key}");
    }
}

#[test]
fn ssd_verifies_against_greedy_over_seeds() {
    for seed in 0..20 {
        let v = stdout_json(&twig(&[
            "ssd",
            "--seed",
            &seed.to_string(),
            "--max-tokens",
            "16",
            "--verify-against-greedy",
        ]));
        assert_eq!(v["equivalence"], "pass", "seed {seed}");
    }
}

#[test]
fn ssd_trace_file_is_consistent_jsonl() {
    let path = tmp_path("trace.jsonl");
    let v = stdout_json(&twig(&[
        "ssd",
        "--seed",
        "6",
        "--max-tokens",
        "20",
        "--trace-out",
        path.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<Value> =
        text.lines().map(|l| serde_json::from_str(l).expect("JSONL line")).collect();
    let (records, summary) = lines.split_at(lines.len() - 1);
    assert_eq!(records.len(), v["iterations"].as_u64().unwrap() as usize);
    let mut committed = 0u64;
    for rec in records {
        let accepted = rec["accepted"].as_u64().unwrap();
        assert!(accepted <= rec["drafted"].as_array().unwrap().len() as u64);
        committed += accepted + u64::from(!rec["correction"].is_null());
    }
    assert_eq!(committed, v["num_tokens"].as_u64().unwrap());
    assert_eq!(summary[0]["tokens"], v["num_tokens"]);
    assert_eq!(summary[0]["target_forwards"], v["target_forwards"]);
    std::fs::remove_file(&path).ok();
}

#[test]
fn prune_solve_reproduces_published_rows() {
    for (target, want_r) in [(192u64, 227u64), (128, 134), (64, 41)] {
        let v = stdout_json(&twig(&[
            "prune-solve",
            "--target-rbar",
            &target.to_string(),
            "--m",
            "576",
            "--k",
            "2",
            "--kf",
            "24",
            "--l",
            "32",
        ]));
        assert_eq!(v["r"].as_u64().unwrap(), want_r, "target {target}");
        assert_eq!(v["rbar_check"].as_u64().unwrap(), target);
        assert_eq!(v["occupancy"].as_array().unwrap().len(), 32);
    }
    // Infeasible target is a usage error.
    let out = twig(&[
        "prune-solve", "--target-rbar", "9", "--m", "576", "--k", "2", "--kf", "24", "--l", "32",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn export_attn_full_retention_keeps_everything() {
    let out = twig(&["export-attn", "--layer", "2", "--seed", "9", "--r", "24"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "# seed=9");
    assert_eq!(lines.next().unwrap(), "index,score,kept");
    let mut count = 0;
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 3);
        assert_eq!(cols[0].parse::<usize>().unwrap(), count);
        // Score text round-trips through f64 losslessly.
        let score: f64 = cols[1].parse().unwrap();
        assert_eq!(format!("{score}"), cols[1]);
        assert_eq!(cols[2], "true");
        count += 1;
    }
    assert_eq!(count, 24);
}

#[test]
fn export_attn_rejects_out_of_range_layer() {
    let out = twig(&["export-attn", "--layer", "100"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn export_attn_twig_scores_match_ssd_selection() {
    // The kept set in the CSV equals the kept_visual the decoder reports.
    let csv = twig(&["export-attn", "--twig-attn", "--seed", "3", "--r", "12"]);
    assert!(csv.status.success());
    let text = String::from_utf8(csv.stdout).unwrap();
    let kept_csv: Vec<usize> = text
        .lines()
        .skip(2)
        .filter(|l| l.ends_with("true"))
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    let v = stdout_json(&twig(&["ssd", "--seed", "3", "--max-tokens", "8", "--r", "12"]));
    let kept_ssd: Vec<usize> =
        v["kept_visual"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as usize).collect();
    assert_eq!(kept_csv, kept_ssd);
}

#[test]
fn train_emits_schedule_csv() {
    let out = twig(&[
        "train", "--steps", "6", "--batch-size", "4", "--examples", "8", "--lr", "0.001",
        "--seed", "5",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "# seed=5");
    assert_eq!(lines.next().unwrap(), "step,lr,loss");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|c| c.parse::<f64>().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0][1], 0.0, "warmup starts at zero lr");
    assert!(rows.iter().all(|r| r[2].is_finite()));
}

#[test]
fn bench_emits_expected_columns() {
    let out = twig(&["bench", "--s-list", "4,8", "--max-tokens", "8", "--seed", "1"]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "# seed=1");
    let header = lines.next().unwrap();
    assert_eq!(
        header,
        "config_id,s,prefill_s,decode_s,tokens,tok_ar,target_forwards,\
         flops_prefill_pruned,flops_prefill_full"
    );
    let rows: Vec<Vec<String>> =
        lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows.len(), 2);
    for (row, s) in rows.iter().zip([4usize, 8]) {
        assert_eq!(row.len(), 9);
        assert_eq!(row[1].parse::<usize>().unwrap(), s);
        assert!(row[4].parse::<usize>().unwrap() <= s);
        let pruned: u64 = row[7].parse().unwrap();
        let full: u64 = row[8].parse().unwrap();
        assert!(pruned < full);
    }
    // Fanout respects TWIG_THREADS and produces the same deterministic fields.
    let threaded = Command::new(env!("CARGO_BIN_EXE_twig"))
        .args(["bench", "--s-list", "4,8", "--max-tokens", "8", "--seed", "1"])
        .env("TWIG_THREADS", "2")
        .output()
        .unwrap();
    assert!(threaded.status.success());
    let t = String::from_utf8(threaded.stdout).unwrap();
    let stable = |s: &str| -> Vec<String> {
        s.lines()
            .skip(2)
            .map(|l| {
                let c: Vec<&str> = l.split(',').collect();
                format!("{},{},{},{},{},{},{}", c[0], c[1], c[4], c[5], c[6], c[7], c[8])
            })
            .collect()
    };
    assert_eq!(stable(&text), stable(&t));
}

#[test]
fn weights_round_trip_through_container() {
    let base = tmp_path("base.twg");
    let twig_file = tmp_path("twig.twg");

    let saved = stdout_json(&twig(&[
        "gen", "--seed", "8", "--max-tokens", "10", "--save-weights",
        base.to_str().unwrap(),
    ]));
    let loaded = stdout_json(&twig(&[
        "gen", "--seed", "8", "--max-tokens", "10", "--weights",
        base.to_str().unwrap(),
    ]));
    assert_eq!(saved["tokens"], loaded["tokens"]);
    assert_eq!(saved["logit_checksum"], loaded["logit_checksum"]);

    let saved = stdout_json(&twig(&[
        "ssd", "--seed", "8", "--max-tokens", "10", "--save-weights",
        twig_file.to_str().unwrap(),
    ]));
    let loaded = stdout_json(&twig(&[
        "ssd", "--seed", "8", "--max-tokens", "10", "--weights",
        twig_file.to_str().unwrap(),
    ]));
    assert_eq!(saved["tokens"], loaded["tokens"]);
    assert_eq!(saved["tok_ar"], loaded["tok_ar"]);

    // A base-only container is rejected where a twig is required.
    let out = twig(&["ssd", "--weights", base.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    std::fs::remove_file(&base).ok();
    std::fs::remove_file(&twig_file).ok();
}
