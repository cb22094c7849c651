//! Diversity of attention maps: distance from the nearest rank-one matrix.
//!
//! A collapsed self-attention map is (numerically) rank one, so a small
//! diversity value diagnoses temporal collapse. The residual uses the
//! l1/linf composite norm with a column-median center: the exact joint
//! minimizer has no closed form, and the metric is only used
//! comparatively, so a consistent surrogate is enough.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::data::VideoSample;
use crate::error::{Error, Result};
use crate::model::Model;

/// sqrt(max-column-abs-sum * max-row-abs-sum).
pub fn composite_norm(e: &Tensor) -> f64 {
    let (m, n) = (e.rows(), e.cols());
    let mut col_sums = vec![0.0f64; n];
    let mut max_row = 0.0f64;
    for i in 0..m {
        let mut row_sum = 0.0;
        for j in 0..n {
            let a = e.at(i, j).abs();
            row_sum += a;
            col_sums[j] += a;
        }
        max_row = max_row.max(row_sum);
    }
    let max_col = col_sums.into_iter().fold(0.0f64, f64::max);
    (max_col * max_row).sqrt()
}

/// Column-median rank-one fit: returns the center vector `a` (median of
/// each column, even counts averaged) and d = composite_norm(A - 1 a^T).
pub fn rank1_residual(a: &Tensor) -> (Vec<f64>, f64) {
    let (m, n) = (a.rows(), a.cols());
    let mut center = Vec::with_capacity(n);
    for j in 0..n {
        let mut col: Vec<f64> = (0..m).map(|i| a.at(i, j)).collect();
        col.sort_by(|x, y| x.partial_cmp(y).expect("finite entries"));
        let med = if m % 2 == 1 {
            col[m / 2]
        } else {
            0.5 * (col[m / 2 - 1] + col[m / 2])
        };
        center.push(med);
    }
    let mut residual = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        for j in 0..n {
            residual.set(i, j, a.at(i, j) - center[j]);
        }
    }
    (center, composite_norm(&residual))
}

/// Diversity d(A) of an attention map.
pub fn diversity(a: &Tensor) -> f64 {
    rank1_residual(a).1
}

/// Mean per-layer diversity of a model's self-attention over sampled videos.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiversityReport {
    pub config_hash: String,
    pub seed: u64,
    pub sample_count: usize,
    /// Mean d(A) per encoder layer.
    pub enc_self: Vec<f64>,
    /// Mean d(A) per decoder layer.
    pub dec_self: Vec<f64>,
}

/// Forward passes (no gradients) over `sample_count` videos drawn without
/// replacement from `samples` under the seed; per-layer diversities are
/// averaged in stable sample order.
pub fn diversity_report(
    model: &Model,
    samples: &[VideoSample],
    sample_count: usize,
    seed: u64,
    config_hash: &str,
) -> Result<DiversityReport> {
    if sample_count == 0 {
        return Err(Error::Config("diversity report over zero samples".into()));
    }
    if samples.is_empty() {
        return Err(Error::Config("diversity report needs a non-empty dataset".into()));
    }
    let take = sample_count.min(samples.len());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut chosen: Vec<usize> = order.into_iter().take(take).collect();
    chosen.sort_unstable();

    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = chosen
        .par_iter()
        .map(|&idx| sample_diversities(model, &samples[idx]))
        .collect::<Result<_>>()?;

    let n_enc = per_sample.first().map_or(0, |(e, _)| e.len());
    let n_dec = per_sample.first().map_or(0, |(_, d)| d.len());
    let mut enc_mean = vec![0.0; n_enc];
    let mut dec_mean = vec![0.0; n_dec];
    for (enc, dec) in &per_sample {
        for (acc, v) in enc_mean.iter_mut().zip(enc) {
            *acc += v;
        }
        for (acc, v) in dec_mean.iter_mut().zip(dec) {
            *acc += v;
        }
    }
    let k = per_sample.len() as f64;
    enc_mean.iter_mut().for_each(|v| *v /= k);
    dec_mean.iter_mut().for_each(|v| *v /= k);

    Ok(DiversityReport {
        config_hash: config_hash.to_string(),
        seed,
        sample_count: take,
        enc_self: enc_mean,
        dec_self: dec_mean,
    })
}

fn sample_diversities(model: &Model, sample: &VideoSample) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &sample.features, false, None)?;
    let enc = fwd.bundle.enc_self.iter().map(|&id| diversity(tape.value(id))).collect();
    let dec = fwd.bundle.dec_self.iter().map(|&id| diversity(tape.value(id))).collect();
    Ok((enc, dec))
}

/// Entry in the attention-export manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportedMap {
    pub kind: String,
    pub layer: usize,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionExport {
    pub sample_id: String,
    pub maps: Vec<ExportedMap>,
}

/// Dump every attention map of one forward pass as CSV files
/// (`{kind}_{layer}.csv`) plus a JSON manifest, into `dir`.
pub fn export_attention(model: &Model, sample: &VideoSample, dir: &Path) -> Result<AttentionExport> {
    std::fs::create_dir_all(dir)?;
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &sample.features, false, None)?;
    let mut maps = Vec::new();
    let groups: [(&str, &[crate::autodiff::NodeId]); 3] = [
        ("enc_self", &fwd.bundle.enc_self),
        ("dec_self", &fwd.bundle.dec_self),
        ("cross", &fwd.bundle.cross),
    ];
    for (kind, ids) in groups {
        for (layer, &id) in ids.iter().enumerate() {
            let map = tape.value(id);
            let file = format!("{kind}_{layer}.csv");
            write_matrix_csv(&dir.join(&file), map)?;
            maps.push(ExportedMap {
                kind: kind.to_string(),
                layer,
                file,
                rows: map.rows(),
                cols: map.cols(),
            });
        }
    }
    let export = AttentionExport { sample_id: sample.id.clone(), maps };
    let manifest = serde_json::to_string_pretty(&export)?;
    std::fs::write(dir.join("manifest.json"), manifest)?;
    Ok(export)
}

/// One CSV row per matrix row; values printed with full round-trip precision.
pub fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = line.split(',').map(str::parse).collect();
        rows.push(row.map_err(|e| Error::Format(format!("bad csv number: {e}")))?);
    }
    Tensor::from_rows(&rows)
}
