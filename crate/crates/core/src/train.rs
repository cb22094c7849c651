//! The optimization loop: per-sample graphs evaluated in parallel across a
//! batch, gradients reduced in stable sample order, Adam updates, JSON-line
//! logging and periodic checkpoints. All per-epoch randomness derives from
//! (seed, epoch), so resuming from a checkpoint replays the exact schedule.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, Tape};
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{resize_linear, window_slice, Dataset, VideoSample};
use crate::error::{Error, Result};
use crate::feedback::{feedback_terms, GuidanceMode};
use crate::matching::{detr_loss, total_loss};
use crate::model::Model;

/// One JSON line in the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    RunMeta {
        config_hash: String,
        seed: u64,
        start_epoch: usize,
    },
    Step {
        step: u64,
        epoch: usize,
        loss_total: f64,
        loss_detr: f64,
        loss_fb_enc: f64,
        loss_fb_dec: f64,
    },
    Epoch {
        epoch: usize,
        lr: f64,
        loss_total: f64,
        loss_detr: f64,
        loss_fb_enc: f64,
        loss_fb_dec: f64,
    },
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub epochs_run: usize,
    pub config_hash: String,
    /// Total losses of the first ten optimizer steps, for reproducibility
    /// checks.
    pub first_step_losses: Vec<f64>,
    pub final_epoch_loss: f64,
}

struct SampleOutput {
    grads: Vec<Vec<f64>>,
    total: f64,
    detr: f64,
    fb_enc: f64,
    fb_dec: f64,
}

fn run_sample(
    model: &Model,
    sample: &VideoSample,
    cfg: &ExperimentConfig,
    dropout_stream: u64,
) -> Result<SampleOutput> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(dropout_stream);
    let needs_rng = cfg.model.dropout > 0.0;
    let fwd = model.forward(&mut tape, &sample.features, true, needs_rng.then_some(&mut rng))?;

    let detr = detr_loss(&mut tape, &fwd.predictions, &sample.segments, &cfg.loss.weights, cfg.loss.aux_loss)?;
    let fb = feedback_terms(&mut tape, &fwd.bundle, &cfg.feedback)?;
    let total = total_loss(
        &mut tape,
        detr,
        fb.encoder,
        fb.decoder,
        cfg.feedback.lambda_e,
        cfg.feedback.lambda_d,
    )?;

    let total_value = tape.value(total).item();
    if !total_value.is_finite() {
        return Err(Error::NonFinite(format!("loss {total_value} on sample {}", sample.id)));
    }
    let grads = tape.backward(total)?;
    let per_param: Vec<Vec<f64>> = fwd
        .param_leaves
        .iter()
        .map(|&leaf| match grads.get(leaf) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(leaf).numel()],
        })
        .collect();
    Ok(SampleOutput {
        grads: per_param,
        total: total_value,
        detr: tape.value(detr).item(),
        fb_enc: fb.encoder.map_or(0.0, |n| tape.value(n).item()),
        fb_dec: fb.decoder.map_or(0.0, |n| tape.value(n).item()),
    })
}

/// Apply the configured resize/windowing to a training split. Windows
/// become independent samples; short sequences pass through untouched.
pub fn preprocess_training_samples(cfg: &ExperimentConfig, samples: &[VideoSample]) -> Result<Vec<VideoSample>> {
    let mut out = Vec::with_capacity(samples.len());
    for sample in samples {
        let sample = match cfg.data.resize_to {
            Some(len) if sample.features.rows() != len => VideoSample {
                id: sample.id.clone(),
                features: resize_linear(&sample.features, len)?,
                segments: sample.segments.clone(),
            },
            _ => sample.clone(),
        };
        let w = &cfg.data.windowing;
        if w.enabled && sample.features.rows() > w.window {
            for window in window_slice(&sample, w.window, w.overlap)? {
                out.push(window.sample);
            }
        } else {
            out.push(sample);
        }
    }
    Ok(out)
}

/// Train a model on the dataset's train split. `resume` continues from a
/// previous checkpoint (same config hash) bitwise-identically to an
/// uninterrupted run.
pub fn train(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if dataset.feature_dim != cfg.model.feature_dim {
        return Err(Error::Config(format!(
            "dataset feature dim {} does not match model {}",
            dataset.feature_dim, cfg.model.feature_dim
        )));
    }
    if cfg.feedback.guidance != GuidanceMode::Off {
        if cfg.model.num_encoder_layers == 0 && cfg.feedback.lambda_e != 0.0 {
            return Err(Error::Config(
                "encoder feedback requires at least one encoder layer; \
                 set lambda_e to 0 or switch feedback off"
                    .into(),
            ));
        }
        if !cfg.model.decoder_self_attention && cfg.feedback.lambda_d != 0.0 {
            return Err(Error::Config(
                "decoder feedback requires decoder self-attention; \
                 set lambda_d to 0 or switch feedback off"
                    .into(),
            ));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let config_hash = cfg.hash();

    let train_samples = preprocess_training_samples(cfg, &dataset.train)?;
    if train_samples.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }

    let (mut model, mut adam, start_epoch) = match resume {
        Some(path) => {
            let restored = checkpoint::restore(path)?;
            if restored.header.config_hash != config_hash {
                return Err(Error::Config(format!(
                    "resume checkpoint hash {} does not match config {}",
                    restored.header.config_hash, config_hash
                )));
            }
            let adam = restored.adam.ok_or_else(|| {
                Error::Config("checkpoint lacks optimizer state; cannot resume".into())
            })?;
            (restored.model, adam, restored.header.epoch)
        }
        None => {
            let model = Model::new(cfg.model.clone(), cfg.seed)?;
            let adam = Adam::new(&model.params().sizes());
            (model, adam, 0)
        }
    };

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(if start_epoch == 0 {
        std::fs::File::create(&log_path)?
    } else {
        std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?
    });
    let meta = LogRecord::RunMeta { config_hash: config_hash.clone(), seed: cfg.seed, start_epoch };
    writeln!(log, "{}", serde_json::to_string(&meta)?)?;
    let checkpoint_path = out_dir.join("model_final.ckpt");

    let mut first_step_losses = Vec::new();
    let mut final_epoch_loss = f64::NAN;
    for epoch in start_epoch..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        // Stream space: 0 = shuffling offset base, high bit = dropout.
        shuffle_rng.set_stream(1 + epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let outputs: Vec<SampleOutput> = batch
                .par_iter()
                .enumerate()
                .map(|(pos, &idx)| {
                    let stream = (1 << 32) | ((epoch as u64) << 20) | ((batch_idx as u64) << 8) | pos as u64;
                    run_sample(&model, &train_samples[idx], cfg, stream)
                })
                .collect::<Result<_>>()?;

            // Deterministic reduction in batch order, independent of the
            // thread schedule.
            let inv = 1.0 / outputs.len() as f64;
            let mut grads: Vec<Vec<f64>> = model
                .params()
                .iter()
                .map(|p| vec![0.0; p.value.numel()])
                .collect();
            for out in &outputs {
                for (acc, g) in grads.iter_mut().zip(&out.grads) {
                    for (a, &v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= inv;
                }
            }

            let mut params: Vec<&mut [f64]> = model.params_data_mut();
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            adam.step(&mut params, &grad_refs, lr).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!(
                    "epoch {epoch} step {}: {msg}",
                    adam.step_count + 1
                )),
                other => other,
            })?;

            let batch_mean = |f: fn(&SampleOutput) -> f64| -> f64 {
                outputs.iter().map(f).sum::<f64>() * inv
            };
            let step_losses = (
                batch_mean(|o| o.total),
                batch_mean(|o| o.detr),
                batch_mean(|o| o.fb_enc),
                batch_mean(|o| o.fb_dec),
            );
            if adam.step_count <= 10 {
                first_step_losses.push(step_losses.0);
                let record = LogRecord::Step {
                    step: adam.step_count,
                    epoch,
                    loss_total: step_losses.0,
                    loss_detr: step_losses.1,
                    loss_fb_enc: step_losses.2,
                    loss_fb_dec: step_losses.3,
                };
                writeln!(log, "{}", serde_json::to_string(&record)?)?;
            }
            sums.0 += step_losses.0;
            sums.1 += step_losses.1;
            sums.2 += step_losses.2;
            sums.3 += step_losses.3;
            batches += 1;
        }

        let inv_b = 1.0 / batches as f64;
        final_epoch_loss = sums.0 * inv_b;
        let record = LogRecord::Epoch {
            epoch,
            lr,
            loss_total: sums.0 * inv_b,
            loss_detr: sums.1 * inv_b,
            loss_fb_enc: sums.2 * inv_b,
            loss_fb_dec: sums.3 * inv_b,
        };
        writeln!(log, "{}", serde_json::to_string(&record)?)?;
        log.flush()?;

        let completed = epoch + 1;
        if cfg.checkpoint_every > 0 && completed % cfg.checkpoint_every == 0 && completed < cfg.epochs {
            let path = out_dir.join(format!("model_epoch_{completed:04}.ckpt"));
            checkpoint::save(&path, &model, Some(&adam), cfg, completed)?;
        }
    }

    checkpoint::save(&checkpoint_path, &model, Some(&adam), cfg, cfg.epochs)?;
    Ok(TrainSummary {
        checkpoint: checkpoint_path,
        log: log_path,
        epochs_run: cfg.epochs - start_epoch,
        config_hash,
        first_step_losses,
        final_epoch_loss,
    })
}

/// Read back the log records of a training run.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("log line: {e}"))))
        .collect()
}
