//! End-to-end checks of the command-line surface: every subcommand, the
//! documented exit codes, and artifact determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tadet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tadet"))
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    let json = serde_json::json!({
        "model": {
            "num_encoder_layers": 1,
            "num_decoder_layers": 2,
            "num_queries": 8,
            "model_dim": 16,
            "num_heads": 2,
            "mlp_dim": 32,
            "num_classes": 3,
            "feature_dim": 8,
        },
        "data": {
            "synth": {
                "seq_len": 32,
                "feature_dim": 8,
                "num_classes": 3,
                "min_instances": 1,
                "max_instances": 2,
                "min_width_frac": 0.1,
                "max_width_frac": 0.3,
                "train_videos": 8,
                "test_videos": 4,
                "seed": 5
            }
        },
        "optimizer": { "lr": 1e-3 },
        "epochs": 2,
        "batch_size": 4,
        "checkpoint_every": 1,
        "seed": 3
    });
    std::fs::write(&path, serde_json::to_string_pretty(&json).unwrap()).unwrap();
    path
}

fn expect_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn dir_digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    entries
}

#[test]
fn gen_data_is_deterministic_and_guards_overwrites() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");

    let run = |out: &Path| {
        let o = tadet()
            .args(["gen-data", "--config"])
            .arg(&cfg)
            .arg("--output")
            .arg(out)
            .output()
            .unwrap();
        expect_success(&o, "gen-data");
        let text = String::from_utf8_lossy(&o.stdout).into_owned();
        assert!(text.contains("8 train / 4 test"), "{text}");
    };
    run(&out_a);
    run(&out_b);
    assert_eq!(dir_digest(&out_a.join("dataset")), dir_digest(&out_b.join("dataset")));

    // A second run into the same non-empty directory requires --force.
    let refused = tadet()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--output")
        .arg(&out_a)
        .output()
        .unwrap();
    assert_eq!(refused.status.code(), Some(1));
    let forced = tadet()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--output")
        .arg(&out_a)
        .arg("--force")
        .output()
        .unwrap();
    expect_success(&forced, "gen-data --force");
}

#[test]
fn train_logs_finite_losses_and_ablation_flags_work() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    let gen = tadet()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--output")
        .arg(&out)
        .output()
        .unwrap();
    expect_success(&gen, "gen-data");

    let train = tadet()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(out.join("dataset"))
        .arg("--output")
        .arg(&out)
        .output()
        .unwrap();
    expect_success(&train, "train");

    // One run directory with a log whose losses are finite and whose
    // feedback terms are logged.
    let run_dir = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("train_"))
        .expect("train output dir");
    let log = std::fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
    let mut saw_epoch = false;
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["kind"] == "epoch" {
            saw_epoch = true;
            for key in ["loss_total", "loss_detr", "loss_fb_enc", "loss_fb_dec"] {
                let x = v[key].as_f64().unwrap();
                assert!(x.is_finite(), "{key} not finite: {x}");
            }
            assert!(v["loss_fb_enc"].as_f64().unwrap() > 0.0);
        }
        if v["kind"] == "run_meta" {
            assert!(v["config_hash"].as_str().unwrap().len() == 16);
        }
    }
    assert!(saw_epoch);

    // Ablations train without feedback.
    for flag in ["--no-encoder", "--no-decoder-sa"] {
        let ablate = tadet()
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--data")
            .arg(out.join("dataset"))
            .arg("--output")
            .arg(tmp.path().join(format!("ablate{flag}")))
            .args([flag, "--feedback", "off", "--epochs", "1"])
            .output()
            .unwrap();
        expect_success(&ablate, flag);
    }

    // Feedback with an ablated module is a config error (exit 1).
    let bad = tadet()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(out.join("dataset"))
        .arg("--output")
        .arg(tmp.path().join("bad"))
        .args(["--no-encoder", "--epochs", "1"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn resume_reproduces_the_final_checkpoint_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("w");
    expect_success(
        &tadet().args(["gen-data", "--config"]).arg(&cfg).arg("--output").arg(&out).output().unwrap(),
        "gen-data",
    );
    let data = out.join("dataset");

    // Straight 2-epoch run.
    let full = tmp.path().join("full");
    expect_success(
        &tadet()
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--data")
            .arg(&data)
            .arg("--output")
            .arg(&full)
            .output()
            .unwrap(),
        "train full",
    );
    let full_dir = std::fs::read_dir(&full)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("train_"))
        .unwrap();

    // Resume from the periodic epoch-1 checkpoint of the same config.
    let epoch1 = full_dir.join("model_epoch_0001.ckpt");
    assert!(epoch1.exists(), "periodic checkpoint missing");

    let resumed = tmp.path().join("resumed");
    expect_success(
        &tadet()
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--data")
            .arg(&data)
            .arg("--output")
            .arg(&resumed)
            .arg("--resume")
            .arg(&epoch1)
            .output()
            .unwrap(),
        "train resumed",
    );
    let resumed_dir = std::fs::read_dir(&resumed)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("train_"))
        .unwrap();

    let a = std::fs::read(full_dir.join("model_final.ckpt")).unwrap();
    let b = std::fs::read(resumed_dir.join("model_final.ckpt")).unwrap();
    assert_eq!(a, b, "resumed checkpoint differs from uninterrupted run");
}

#[test]
fn eval_scores_injected_results_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("e");
    expect_success(
        &tadet().args(["gen-data", "--config"]).arg(&cfg).arg("--output").arg(&out).output().unwrap(),
        "gen-data",
    );
    let data_dir = out.join("dataset");

    // Perfect results built straight from the annotations.
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data_dir.join("manifest.json")).unwrap()).unwrap();
    let seq_len = manifest["seq_len"].as_u64().unwrap() as f64;
    let mut results = Vec::new();
    for entry in manifest["test"].as_array().unwrap() {
        let ann_path = data_dir.join(entry["annotations"].as_str().unwrap());
        let anns: Vec<serde_json::Value> =
            serde_json::from_str(&std::fs::read_to_string(ann_path).unwrap()).unwrap();
        let detections: Vec<serde_json::Value> = anns
            .iter()
            .map(|a| {
                serde_json::json!({
                    "start": a["start"].as_f64().unwrap() / seq_len,
                    "end": a["end"].as_f64().unwrap() / seq_len,
                    "class": a["class"],
                    "score": 0.9,
                })
            })
            .collect();
        results.push(serde_json::json!({ "id": entry["id"], "detections": detections }));
    }
    let results_path = tmp.path().join("perfect.json");
    std::fs::write(&results_path, serde_json::to_string_pretty(&results).unwrap()).unwrap();

    let eval_out = tmp.path().join("eval1");
    let run = tadet()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data_dir)
        .arg("--results")
        .arg(&results_path)
        .arg("--output")
        .arg(&eval_out)
        .output()
        .unwrap();
    expect_success(&run, "eval --results");
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["map"]["average_map"].as_f64().unwrap(), 1.0);

    // Re-scoring the emitted results file reproduces the metrics exactly.
    let eval_out2 = tmp.path().join("eval2");
    let rerun = tadet()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data_dir)
        .arg("--results")
        .arg(eval_out.join("results.json"))
        .arg("--output")
        .arg(&eval_out2)
        .output()
        .unwrap();
    expect_success(&rerun, "eval re-score");
    let metrics2: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_out2.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["map"], metrics2["map"]);

    // Empty predictions score zero.
    let empty: Vec<serde_json::Value> = results
        .iter()
        .map(|r| serde_json::json!({ "id": r["id"], "detections": [] }))
        .collect();
    let empty_path = tmp.path().join("empty.json");
    std::fs::write(&empty_path, serde_json::to_string(&empty).unwrap()).unwrap();
    let eval_out3 = tmp.path().join("eval3");
    let run = tadet()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data_dir)
        .arg("--results")
        .arg(&empty_path)
        .arg("--output")
        .arg(&eval_out3)
        .output()
        .unwrap();
    expect_success(&run, "eval empty");
    let metrics3: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_out3.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics3["map"]["average_map"].as_f64().unwrap(), 0.0);
}

#[test]
fn diversity_cli_matches_direct_library_call() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("d");
    expect_success(
        &tadet().args(["gen-data", "--config"]).arg(&cfg).arg("--output").arg(&out).output().unwrap(),
        "gen-data",
    );
    let data_dir = out.join("dataset");
    expect_success(
        &tadet()
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--data")
            .arg(&data_dir)
            .arg("--output")
            .arg(&out)
            .args(["--epochs", "1"])
            .output()
            .unwrap(),
        "train",
    );
    let run_dir = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("train_"))
        .unwrap();
    let ckpt = run_dir.join("model_final.ckpt");

    let div_out = tmp.path().join("divout");
    let run = tadet()
        .args(["diversity"])
        .arg("--data")
        .arg(&data_dir)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--output")
        .arg(&div_out)
        .args(["--samples", "4", "--export-attention"])
        .output()
        .unwrap();
    expect_success(&run, "diversity");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(div_out.join("diversity.json")).unwrap()).unwrap();

    // Same numbers through the library.
    let restored = tadet_core::checkpoint::restore(&ckpt).unwrap();
    let (dataset, _) = tadet_core::data::load_dataset(&data_dir).unwrap();
    let direct = tadet_core::diversity::diversity_report(
        &restored.model,
        &dataset.test,
        4,
        restored.header.config.seed,
        &restored.header.config_hash,
    )
    .unwrap();
    let cli_enc: Vec<f64> =
        report["enc_self"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(cli_enc, direct.enc_self);
    let cli_dec: Vec<f64> =
        report["dec_self"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(cli_dec, direct.dec_self);
    assert_eq!(report["sample_count"].as_u64().unwrap() as usize, direct.sample_count);

    // Attention export wrote one CSV per map plus the manifest.
    let attention_dir = div_out.join("attention");
    assert!(attention_dir.join("manifest.json").exists());
    assert!(attention_dir.join("enc_self_0.csv").exists());
    assert!(attention_dir.join("dec_self_1.csv").exists());
    assert!(attention_dir.join("cross_0.csv").exists());

    // Rerunning diversity reproduces the report bitwise.
    let div_out2 = tmp.path().join("divout2");
    expect_success(
        &tadet()
            .args(["diversity"])
            .arg("--data")
            .arg(&data_dir)
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--output")
            .arg(&div_out2)
            .args(["--samples", "4"])
            .output()
            .unwrap(),
        "diversity again",
    );
    let again = std::fs::read_to_string(div_out2.join("diversity.json")).unwrap();
    let first = std::fs::read_to_string(div_out.join("diversity.json")).unwrap();
    assert_eq!(first, again);
}

#[test]
fn grad_check_succeeds_and_bad_input_exits_one() {
    let ok = tadet().arg("grad-check").output().unwrap();
    expect_success(&ok, "grad-check");
    assert!(String::from_utf8_lossy(&ok.stdout).contains("end_to_end_toy_loss"));

    let missing = tadet()
        .args(["train", "--data", "/nonexistent/dataset"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
}
