use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_lipadapt");

/// A model and corpus small enough for every subcommand to finish in
/// seconds.
const TINY: &str = r#"{
  "experiment": {
    "model": {
      "d_model": 8, "d_dec": 8, "encoder_blocks": 1, "heads": 2, "ff_dim": 8,
      "decoder_blocks": 1, "decoder_heads": 2, "decoder_ff_dim": 8,
      "vocab_size": 128, "max_frames": 256, "frame_h": 12, "frame_w": 12,
      "channels": 1, "conv_channels": [2, 2]
    },
    "corpus": {
      "num_speakers": 2, "baseline_speakers": 2, "baseline_minutes": 0.5,
      "train_minutes": 1.0, "valid_minutes": 0.2, "test_minutes": 0.2,
      "checkpoints": [0.5, 1.0],
      "render": { "height": 12, "width": 12, "base_frames": 3, "frame_rate": 12.5 }
    },
    "baseline": { "steps": 20 },
    "plan": { "vision_steps": 3, "language_updates": 3, "grad_accum": 1 },
    "budget_minutes": 1.0
  },
  "plan": { "vision_steps": 3, "language_updates": 3, "grad_accum": 1 },
  "sweep_budgets": [0.5, 1.0],
  "scenario": { "primary_only": 3, "secondary_only": 3, "shared": 2 }
}"#;

fn run(root: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("LIPADAPT_OUT", root)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    std::fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn usage_errors_exit_one_with_usage_on_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["compare", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(out.stdout.is_empty());
    for args in [&["adapt", "--level", "sideways"][..], &["adapt"], &[], &["sweep", "--budgets", "x"]] {
        let out = run(tmp.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?}");
    }
    let out = run(tmp.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn invalid_config_is_a_usage_error_and_missing_checkpoint_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"plan": {"n_prompt": "ten"}}"#).unwrap();
    let out = run(tmp.path(), &["adapt", "--level", "language", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    let cfg = tiny_config(tmp.path());
    let out = run(tmp.path(), &["adapt", "--level", "vision", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no baseline checkpoint"));
}

#[test]
fn flags_override_the_config_file_and_the_merge_is_persisted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"seed": 5, "workers": 2, "sweep_budgets": [2.0, 4.0]}"#).unwrap();
    let out_dir = tmp.path().join("stats");
    let manifest = tmp.path().join("m.jsonl");
    std::fs::write(&manifest, "").unwrap();
    let out = run(
        tmp.path(),
        &[
            "dataset", "stats", "--manifest", manifest.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
            "--seed", "7", "--out", out_dir.to_str().unwrap(),
        ],
    );
    assert_ok(&out);
    let resolved = read_json(&out_dir.join("run_config.json"));
    assert_eq!(resolved["seed"], 7);
    assert_eq!(resolved["workers"], 2);
    assert_eq!(resolved["sweep_budgets"], serde_json::json!([2.0, 4.0]));
    assert_eq!(resolved["plan"]["seed"], 7);
    assert_eq!(resolved["experiment"]["corpus"]["seed"], 7);
    // Untouched defaults survive the merge.
    assert_eq!(resolved["plan"]["vision_steps"], 300);
    assert_eq!(resolved["plan"]["language_updates"], 70);
}

#[test]
fn adapt_defaults_follow_the_reference_recipe() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("a");
    let out = run(tmp.path(), &["adapt", "--level", "vision", "--out", out_dir.to_str().unwrap()]);
    // No checkpoint: a runtime failure, but the resolved plan is written first.
    assert_eq!(out.status.code(), Some(2));
    let plan = &read_json(&out_dir.join("run_config.json"))["plan"];
    assert_eq!(plan["vision_steps"], 300);
    assert_eq!(plan["lora"]["rank"], 8);
    assert_eq!(plan["lora"]["alpha"], 16.0);
    assert_eq!(plan["vision_schedule"]["base_lr"], 1e-4);
    assert_eq!(plan["vision_schedule"]["min_lr"], 1e-5);
    assert_eq!(plan["vision_schedule"]["period_steps"], 5000);
    assert_eq!(plan["language_updates"], 70);
    let sweep = read_json(&out_dir.join("run_config.json"))["sweep_budgets"].clone();
    assert_eq!(sweep, serde_json::json!([1.0, 5.0, 15.0, 30.0, 45.0]));
}

#[test]
fn gen_corpus_writes_under_the_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = run(tmp.path(), &["gen-corpus", "--config", &cfg, "--workers", "2"]);
    assert_ok(&out);
    let dir = tmp.path().join("gen-corpus");
    let manifest = std::fs::read_to_string(dir.join("manifest.jsonl")).unwrap();
    let rows: Vec<Value> = manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!rows.is_empty());
    for r in &rows {
        assert!(dir.join(r["path"].as_str().unwrap()).exists());
    }
}

#[test]
fn dataset_build_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        assert_ok(&run(tmp.path(), &["dataset", "build", "--config", &cfg, "--seed", "3", "--out", dir.to_str().unwrap()]));
    }
    for file in ["manifest.jsonl", "stats.json", "stats.tsv", "matches.json", "identities.json"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    let matches = read_json(&a.join("matches.json"));
    assert_eq!(matches.as_array().unwrap().len(), 2);

    let stats = tmp.path().join("stats");
    let out = run(
        tmp.path(),
        &["dataset", "stats", "--manifest", a.join("manifest.jsonl").to_str().unwrap(), "--out", stats.to_str().unwrap()],
    );
    assert_ok(&out);
    assert_eq!(std::fs::read(stats.join("stats.tsv")).unwrap(), std::fs::read(a.join("stats.tsv")).unwrap());
}

#[test]
fn baseline_adapt_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    assert_ok(&run(tmp.path(), &["train-baseline", "--config", &cfg]));
    let base_dir = tmp.path().join("train-baseline");
    let base_blob = std::fs::read(base_dir.join("base.bin")).unwrap();

    let a = tmp.path().join("adapt-a");
    let b = tmp.path().join("adapt-b");
    for dir in [&a, &b] {
        let out = run(
            tmp.path(),
            &[
                "adapt", "--level", "both", "--speaker", "S2", "--minutes", "1", "--targets", "wq,wv", "--rank", "2",
                "--alpha", "4", "--np", "3", "--lr-scale", "10", "--config", &cfg, "--out", dir.to_str().unwrap(),
            ],
        );
        assert_ok(&out);
    }
    for file in ["adapters.bin", "manifest.json", "summary.json"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    assert_eq!(std::fs::read(base_dir.join("base.bin")).unwrap(), base_blob);
    let summary = read_json(&a.join("summary.json"));
    assert_eq!(summary["base_hash_before"], summary["base_hash_after"]);
    // r·(d_in + d_out) for two 8×8 matrices in one block, plus 3×8 prompt rows
    // and the border cells of both 12×12 convolution inputs (1 and 2 channels).
    let t = &summary["trainable"];
    assert_eq!(t["backend_lora"], 2 * 2 * (8 + 8));
    assert_eq!(t["input_prompt"], 3 * 8);
    assert_eq!(t["padding_prompt"], (1 + 2) * (14 * 14 - 12 * 12));

    let eval_dir = tmp.path().join("eval");
    let out = run(
        tmp.path(),
        &[
            "eval", "--adapters", a.to_str().unwrap(), "--speakers", "S2", "--config", &cfg, "--out",
            eval_dir.to_str().unwrap(),
        ],
    );
    assert_ok(&out);
    let report = read_json(&eval_dir.join("report.json"));
    assert_eq!(report["mean_wer"], summary["adapted"]["mean_wer"]);
    assert!(std::fs::read_to_string(eval_dir.join("report.tsv")).unwrap().contains("Mean"));
}

#[test]
fn experiment_tables_run_on_a_tiny_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    assert_ok(&run(tmp.path(), &["train-baseline", "--config", &cfg]));
    let ckpt = tmp.path().join("train-baseline");
    let ckpt = ckpt.to_str().unwrap();
    let out = run(tmp.path(), &["compare", "--config", &cfg, "--checkpoint", ckpt]);
    assert_ok(&out);
    let table = read_json(&tmp.path().join("compare").join("table.json"));
    assert_eq!(table["rows"].as_array().unwrap().len(), 11);

    assert_ok(&run(tmp.path(), &["sweep", "--config", &cfg, "--checkpoint", ckpt, "--budgets", "0.5,1"]));
    let sweep = read_json(&tmp.path().join("sweep").join("table.json"));
    assert_eq!(sweep["rows"].as_array().unwrap().len(), 2);

    assert_ok(&run(tmp.path(), &["ablate", "--config", &cfg, "--checkpoint", ckpt, "--speaker", "S2"]));
    let ablation = read_json(&tmp.path().join("ablate").join("table.json"));
    assert_eq!(ablation["rows"].as_array().unwrap().len(), 8);
    assert_eq!(ablation["speaker"], "S2");
}
