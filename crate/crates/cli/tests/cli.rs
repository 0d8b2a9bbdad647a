//! End-to-end command-line tests: exit codes, reproducibility, and the
//! cross-command file contracts.

use std::fs;
use std::path::Path;

use tinyzamba_cli::run;

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["tinyzamba".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    run(argv)
}

fn tiny_config_json(dir: &Path) -> std::path::PathBuf {
    // small enough that every command is fast
    let cfg = serde_json::json!({
        "vocab_size": 258,
        "d_model": 32,
        "n_mamba_layers": 2,
        "attn_every": 1,
        "n_shared_blocks": 2,
        "rotary": {"d_emb": 16, "base": 10000.0, "s": 1.0, "enabled": true},
        "lora_attention": false,
        "lora_mlp": true,
        "lora_rank": 4,
        "lora_alpha": 8.0,
        "ssm_expand": 2,
        "ssm_heads": 2,
        "ssm_state": 8,
        "ssm_conv_width": 4,
        "attn_heads": 2,
        "attn_head_dim": 16,
        "mlp_expansion": 2,
        "max_seq_len": 512,
        "dtype": "F32"
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn unknown_subcommand_exits_2() {
    assert_eq!(cli(&["frobnicate"]), 2);
    assert_eq!(cli(&["generate", "--bogus-flag"]), 2);
}

#[test]
fn missing_inputs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(cli(&["build", "--preset", "no-such-preset", "--out", out.to_str().unwrap()]), 1);
    assert_eq!(
        cli(&["generate", "--model", "/nonexistent.ckpt", "--prompt", "hi", "--out", out.to_str().unwrap()]),
        1
    );
}

#[test]
fn build_writes_checkpoint_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config_json(dir.path());
    let out = dir.path().join("out");
    assert_eq!(
        cli(&["build", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()]),
        0
    );
    assert!(out.join("model.ckpt").exists());
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["resolved"]["d_model"], 32);
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config_json(dir.path());
    let build_out = dir.path().join("model");
    assert_eq!(
        cli(&["build", "--config", cfg.to_str().unwrap(), "--out", build_out.to_str().unwrap()]),
        0
    );
    let ckpt = build_out.join("model.ckpt");
    let (o1, o2) = (dir.path().join("g1"), dir.path().join("g2"));
    for out in [&o1, &o2] {
        assert_eq!(
            cli(&[
                "generate",
                "--model",
                ckpt.to_str().unwrap(),
                "--prompt",
                "hello",
                "--n-tokens",
                "24",
                "--sampler",
                "topk:20,0.7",
                "--seed",
                "5",
                "--out",
                out.to_str().unwrap(),
            ]),
            0
        );
    }
    let b1 = fs::read(o1.join("generated.txt")).unwrap();
    let b2 = fs::read(o2.join("generated.txt")).unwrap();
    assert_eq!(b1, b2, "seeded generation must be byte-identical");
}

#[test]
fn bench_table_matches_analytic_kv_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config_json(dir.path());
    let build_out = dir.path().join("model");
    assert_eq!(cli(&["build", "--config", cfg.to_str().unwrap(), "--out", build_out.to_str().unwrap()]), 0);
    let out = dir.path().join("bench");
    assert_eq!(
        cli(&[
            "bench",
            "--model",
            build_out.join("model.ckpt").to_str().unwrap(),
            "--lens",
            "4,8",
            "--gen-len",
            "2",
            "--repeats",
            "1",
            "--out",
            out.to_str().unwrap(),
        ]),
        0
    );
    let table = fs::read_to_string(out.join("bench_table.tsv")).unwrap();
    let mut lines = table.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("context_len"));
    // config: 2 mamba layers, attn_every 1 -> 2 sites; layer-matched pure = 4 layers -> ratio 2
    for line in lines {
        let cols: Vec<&str> = line.split('\t').collect();
        let ratio: f64 = cols[5].parse().unwrap();
        assert!((ratio - 2.0).abs() < 1e-9, "analytic ratio column: {ratio}");
        let kv_h: usize = cols[3].parse().unwrap();
        let kv_p: usize = cols[4].parse().unwrap();
        assert_eq!(kv_p, 2 * kv_h);
    }
    assert!(out.join("bench.jsonl").exists());
}

#[test]
fn passkey_grid_has_expected_shape_and_stubs_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pk");
    assert_eq!(
        cli(&[
            "passkey", "--stub", "echo", "--lens", "64,128", "--depths", "0,50,100", "--samples",
            "2", "--key-len", "5", "--out", out.to_str().unwrap(),
        ]),
        0
    );
    let table = fs::read_to_string(out.join("passkey_matrix.tsv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 1 + 2 * 3, "header + 3x2 matrix");
    for line in &lines[1..] {
        assert!(line.ends_with("1.0000"), "echo stub row: {line}");
    }
    let out2 = dir.path().join("pk_rand");
    assert_eq!(
        cli(&[
            "passkey", "--stub", "random", "--lens", "64", "--depths", "50", "--samples", "4",
            "--key-len", "6", "--out", out2.to_str().unwrap(),
        ]),
        0
    );
    let table = fs::read_to_string(out2.join("passkey_matrix.tsv")).unwrap();
    assert!(table.lines().nth(1).unwrap().ends_with("0.0000"));
}

#[test]
fn quantize_then_qlora_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config_json(dir.path());
    let build_out = dir.path().join("model");
    assert_eq!(cli(&["build", "--config", cfg.to_str().unwrap(), "--out", build_out.to_str().unwrap()]), 0);
    let qout = dir.path().join("quant");
    assert_eq!(
        cli(&[
            "quantize",
            "--model",
            build_out.join("model.ckpt").to_str().unwrap(),
            "--out",
            qout.to_str().unwrap(),
        ]),
        0
    );
    assert!(qout.join("model_q4.ckpt").exists());
    let footprint: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(qout.join("footprint.json")).unwrap()).unwrap();
    assert!(footprint["ratio"].as_f64().unwrap() < 1.0);

    let data_path = dir.path().join("ft.json");
    let seqs: Vec<Vec<u32>> = vec![vec![72, 105, 32, 116, 104, 101, 114, 101]; 2];
    fs::write(&data_path, serde_json::to_string(&seqs).unwrap()).unwrap();
    let lout = dir.path().join("lora");
    assert_eq!(
        cli(&[
            "qlora",
            "--quantized",
            qout.join("model_q4.ckpt").to_str().unwrap(),
            "--data",
            data_path.to_str().unwrap(),
            "--steps",
            "3",
            "--quantize-adapters",
            "--out",
            lout.to_str().unwrap(),
        ]),
        0
    );
    assert!(lout.join("adapters.lora").exists());
    assert!(lout.join("adapters_q4.json").exists());
}

#[test]
fn train_and_extend_context_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config_json(dir.path());
    let build_out = dir.path().join("model");
    assert_eq!(cli(&["build", "--config", cfg.to_str().unwrap(), "--out", build_out.to_str().unwrap()]), 0);

    let plan = serde_json::json!({
        "schedule": {
            "phase1": {"lr_max": 1e-3, "lr_min": 1e-4, "warmup_steps": 1, "total_steps": 3},
            "anneal": {"rewarm_rule": "Midpoint", "lr_final": 1e-5, "rewarm_steps": 1, "total_steps": 3}
        },
        "mixer": {"replay_fraction": 0.6, "seed": 1},
        "curriculum": null,
        "adam": {"beta1": 0.9, "beta2": 0.95, "eps": 1e-8, "weight_decay": 0.1, "clip_norm": 1.0},
        "batch_size": 1,
        "checkpoint_every": 0
    });
    let plan_path = dir.path().join("plan.json");
    fs::write(&plan_path, plan.to_string()).unwrap();
    let data = serde_json::json!({
        "phase1": [[1, 2, 3, 4, 5, 6], [7, 8, 9, 10, 11, 12]],
        "anneal": [[20, 21, 22, 23, 24, 25]]
    });
    let data_path = dir.path().join("data.json");
    fs::write(&data_path, data.to_string()).unwrap();
    let tout = dir.path().join("train");
    assert_eq!(
        cli(&[
            "train",
            "--model",
            build_out.join("model.ckpt").to_str().unwrap(),
            "--plan",
            plan_path.to_str().unwrap(),
            "--data",
            data_path.to_str().unwrap(),
            "--out",
            tout.to_str().unwrap(),
        ]),
        0
    );
    let metrics = fs::read_to_string(tout.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    assert!(tout.join("model.ckpt").exists());

    let corpus = dir.path().join("corpus.txt");
    fs::write(&corpus, "the quick brown fox jumps over the lazy dog. ".repeat(40)).unwrap();
    let eout = dir.path().join("extend");
    assert_eq!(
        cli(&[
            "extend-context",
            "--model",
            tout.join("model.ckpt").to_str().unwrap(),
            "--corpus",
            corpus.to_str().unwrap(),
            "--start-len",
            "16",
            "--target-len",
            "64",
            "--double-every",
            "2",
            "--steps",
            "6",
            "--batch-size",
            "1",
            "--out",
            eout.to_str().unwrap(),
        ]),
        0
    );
    let metrics = fs::read_to_string(eout.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    // curriculum doubled on schedule: 16, 16, 32, 32, 64, 64
    let lens: Vec<u64> = metrics
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["seq_len"].as_u64().unwrap())
        .collect();
    assert_eq!(lens, vec![16, 16, 32, 32, 64, 64]);
}
