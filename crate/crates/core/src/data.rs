//! Synthetic untrimmed-feature generation, feature-file I/O, and the
//! windowing/resizing preprocessing.
//!
//! Real video backbones are out of scope; the generator plants per-class
//! pattern vectors in Gaussian background noise so detection is learnable
//! at desk scale, and the loader accepts precomputed features from disk.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fileio;
use crate::matching::Segment;

/// One untrimmed video: features (T x D_feat) and normalized ground truth.
#[derive(Debug, Clone)]
pub struct VideoSample {
    pub id: String,
    pub features: Tensor,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SynthConfig {
    pub seq_len: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Instance width bounds as fractions of the sequence length.
    pub min_width_frac: f64,
    pub max_width_frac: f64,
    /// Minimum gap between instances, in frames.
    pub min_gap: usize,
    pub noise_sigma: f64,
    pub train_videos: usize,
    pub test_videos: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seq_len: 64,
            feature_dim: 32,
            num_classes: 5,
            min_instances: 1,
            max_instances: 5,
            min_width_frac: 0.05,
            max_width_frac: 0.4,
            min_gap: 2,
            noise_sigma: 0.5,
            train_videos: 200,
            test_videos: 64,
            seed: 1,
        }
    }
}

impl SynthConfig {
    fn min_width_frames(&self) -> usize {
        ((self.min_width_frac * self.seq_len as f64).round() as usize).max(1)
    }

    fn max_width_frames(&self) -> usize {
        ((self.max_width_frac * self.seq_len as f64).round() as usize).max(self.min_width_frames())
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_instances == 0 {
            return Err(Error::Config("at least one instance per video is required".into()));
        }
        if self.min_instances > self.max_instances {
            return Err(Error::Config("min_instances exceeds max_instances".into()));
        }
        if self.num_classes == 0 || self.feature_dim == 0 || self.seq_len == 0 {
            return Err(Error::Config("classes, feature_dim and seq_len must be positive".into()));
        }
        if !(self.min_width_frac > 0.0 && self.min_width_frac <= self.max_width_frac && self.max_width_frac <= 1.0) {
            return Err(Error::Config("width fractions must satisfy 0 < min <= max <= 1".into()));
        }
        if self.max_instances * (self.min_width_frames() + self.min_gap) > self.seq_len {
            return Err(Error::Config(format!(
                "{} instances of >= {} frames with gap {} cannot fit in {} frames",
                self.max_instances,
                self.min_width_frames(),
                self.min_gap,
                self.seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub train: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; the lower bound keeps ln() finite.
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Per-class pattern vectors, drawn once from the dataset seed (stream 0).
fn class_patterns(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    (0..cfg.num_classes)
        .map(|_| (0..cfg.feature_dim).map(|_| standard_normal(&mut rng)).collect())
        .collect()
}

/// Amplitude envelope: ramps over the first and last two frames of an
/// instance, flat at one in between.
fn boundary_ramp(offset: usize, width: usize) -> f64 {
    let up = (offset as f64 + 1.0) / 3.0;
    let down = (width - offset) as f64 / 3.0;
    up.min(down).min(1.0)
}

fn generate_video(
    cfg: &SynthConfig,
    patterns: &[Vec<f64>],
    stream: u64,
    id: String,
) -> Result<VideoSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let t = cfg.seq_len;
    let d = cfg.feature_dim;

    // Pick instance count and widths, then pack left to right with random
    // slack; retry when a draw does not fit.
    let (count, widths, starts) = 'packing: {
        for _attempt in 0..1000 {
            let count = rng.gen_range(cfg.min_instances..=cfg.max_instances);
            let widths: Vec<usize> = (0..count)
                .map(|_| rng.gen_range(cfg.min_width_frames()..=cfg.max_width_frames()))
                .collect();
            let occupied: usize = widths.iter().sum::<usize>() + (count - 1) * cfg.min_gap;
            if occupied > t {
                continue;
            }
            let mut budget = t - occupied;
            let mut cursor = 0usize;
            let mut starts = Vec::with_capacity(count);
            for w in &widths {
                let slack = rng.gen_range(0..=budget);
                budget -= slack;
                cursor += slack;
                starts.push(cursor);
                cursor += w + cfg.min_gap;
            }
            break 'packing (count, widths, starts);
        }
        return Err(Error::Config("could not pack instances; widen the sequence".into()));
    };

    let mut features = Tensor::zeros(vec![t, d]);
    for v in features.data_mut().iter_mut() {
        *v = cfg.noise_sigma * standard_normal(&mut rng);
    }
    let mut segments = Vec::with_capacity(count);
    for i in 0..count {
        let class_id = rng.gen_range(0..cfg.num_classes);
        let (start, width) = (starts[i], widths[i]);
        for o in 0..width {
            let amp = boundary_ramp(o, width);
            let frame = start + o;
            for j in 0..d {
                let cur = features.at(frame, j);
                features.set(frame, j, cur + amp * patterns[class_id][j]);
            }
        }
        segments.push(Segment::from_interval(
            start as f64 / t as f64,
            (start + width) as f64 / t as f64,
            class_id,
            1.0,
        ));
    }
    Ok(VideoSample { id, features, segments })
}

/// Fully deterministic synthetic dataset: same config, same bytes.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let patterns = class_patterns(cfg);
    // Stream 0 is the pattern stream; videos start at 1.
    let train = (0..cfg.train_videos)
        .map(|i| generate_video(cfg, &patterns, 1 + i as u64, format!("train_{i:04}")))
        .collect::<Result<Vec<_>>>()?;
    let test = (0..cfg.test_videos)
        .map(|i| {
            generate_video(
                cfg,
                &patterns,
                1 + cfg.train_videos as u64 + i as u64,
                format!("test_{i:04}"),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { num_classes: cfg.num_classes, feature_dim: cfg.feature_dim, train, test })
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureHeader {
    t: usize,
    d_feat: usize,
}

/// Annotation record: frame units, normalized by the video length on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub start: f64,
    pub end: f64,
    pub class: usize,
}

pub fn write_feature_file(path: &Path, features: &Tensor) -> Result<()> {
    let header = serde_json::to_string(&FeatureHeader {
        t: features.rows(),
        d_feat: features.cols(),
    })?;
    fileio::write_framed(path, &header, features.data())
}

pub fn write_annotation_file(path: &Path, seq_len: usize, segments: &[Segment]) -> Result<()> {
    let records: Vec<AnnotationRecord> = segments
        .iter()
        .map(|s| {
            let (start, end) = s.interval();
            AnnotationRecord {
                start: start * seq_len as f64,
                end: end * seq_len as f64,
                class: s.class_id,
            }
        })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&records)?)?;
    Ok(())
}

/// Load a feature file plus its annotation JSON into a validated sample.
pub fn load_feature_file(
    feature_path: &Path,
    annotation_path: &Path,
    num_classes: usize,
    id: String,
) -> Result<VideoSample> {
    let (header, payload) = fileio::read_framed(feature_path)?;
    let header: FeatureHeader = serde_json::from_str(&header)
        .map_err(|e| Error::Format(format!("feature header: {e}")))?;
    if payload.len() != header.t * header.d_feat {
        return Err(Error::Format(format!(
            "payload holds {} values but header says {} x {}",
            payload.len(),
            header.t,
            header.d_feat
        )));
    }
    let features = Tensor::new(vec![header.t, header.d_feat], payload)?;

    let text = std::fs::read_to_string(annotation_path)?;
    let records: Vec<AnnotationRecord> =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("annotations: {e}")))?;
    let t = header.t as f64;
    let mut segments = Vec::with_capacity(records.len());
    for r in &records {
        if r.end < r.start {
            return Err(Error::Format(format!("annotation ends ({}) before it starts ({})", r.end, r.start)));
        }
        if r.start < 0.0 || r.end > t {
            return Err(Error::Format(format!(
                "annotation [{}, {}] outside video of length {t}",
                r.start, r.end
            )));
        }
        if r.class >= num_classes {
            return Err(Error::Format(format!(
                "unknown class id {} (dataset has {num_classes})",
                r.class
            )));
        }
        segments.push(Segment::from_interval(r.start / t, r.end / t, r.class, 1.0));
    }
    Ok(VideoSample { id, features, segments })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub features: String,
    pub annotations: String,
}

/// Dataset directory manifest listing sample ids and file paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub seed: u64,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub seq_len: usize,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

pub fn save_dataset(dir: &Path, dataset: &Dataset, seq_len: usize, config_hash: &str, seed: u64) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let write_split = |samples: &[VideoSample]| -> Result<Vec<ManifestEntry>> {
        samples
            .iter()
            .map(|s| {
                let features = format!("{}.feat", s.id);
                let annotations = format!("{}.json", s.id);
                write_feature_file(&dir.join(&features), &s.features)?;
                write_annotation_file(&dir.join(&annotations), s.features.rows(), &s.segments)?;
                Ok(ManifestEntry { id: s.id.clone(), features, annotations })
            })
            .collect()
    };
    let manifest = DatasetManifest {
        config_hash: config_hash.to_string(),
        seed,
        num_classes: dataset.num_classes,
        feature_dim: dataset.feature_dim,
        seq_len,
        train: write_split(&dataset.train)?,
        test: write_split(&dataset.test)?,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Format(format!("no manifest at {}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let load_split = |entries: &[ManifestEntry]| -> Result<Vec<VideoSample>> {
        entries
            .iter()
            .map(|e| {
                load_feature_file(
                    &dir.join(&e.features),
                    &dir.join(&e.annotations),
                    manifest.num_classes,
                    e.id.clone(),
                )
            })
            .collect()
    };
    let dataset = Dataset {
        num_classes: manifest.num_classes,
        feature_dim: manifest.feature_dim,
        train: load_split(&manifest.train)?,
        test: load_split(&manifest.test)?,
    };
    Ok((dataset, manifest))
}

/// A window cut from a longer sample, with enough bookkeeping to map
/// detections back into global coordinates.
#[derive(Debug, Clone)]
pub struct Window {
    pub start_frame: usize,
    pub window_len: usize,
    pub source_len: usize,
    pub sample: VideoSample,
}

impl Window {
    /// Map a window-local segment back to global normalized coordinates.
    pub fn to_global(&self, seg: &Segment) -> Segment {
        let (ls, le) = (seg.center - seg.width / 2.0, seg.center + seg.width / 2.0);
        let gs = (ls * self.window_len as f64 + self.start_frame as f64) / self.source_len as f64;
        let ge = (le * self.window_len as f64 + self.start_frame as f64) / self.source_len as f64;
        Segment::from_interval(gs, ge, seg.class_id, seg.score)
    }
}

/// Slice a sample into overlapping windows. The stride is `win - overlap`;
/// the last window is padded by repeating the final frame. Ground-truth
/// segments are clipped per window and dropped when less than half of the
/// original span survives the clip.
pub fn window_slice(sample: &VideoSample, win: usize, overlap: usize) -> Result<Vec<Window>> {
    if win == 0 || overlap >= win {
        return Err(Error::Config(format!("window {win} must exceed overlap {overlap}")));
    }
    let t = sample.features.rows();
    let d = sample.features.cols();
    let stride = win - overlap;
    let mut windows = Vec::new();
    let mut start = 0usize;
    loop {
        let mut features = Tensor::zeros(vec![win, d]);
        for i in 0..win {
            // Frames beyond the source repeat the last real frame.
            let src = (start + i).min(t - 1);
            for j in 0..d {
                features.set(i, j, sample.features.at(src, j));
            }
        }
        let mut segments = Vec::new();
        for gt in &sample.segments {
            let (gs, ge) = gt.interval();
            let (a, b) = (gs * t as f64, ge * t as f64);
            let lo = a.max(start as f64);
            let hi = b.min((start + win) as f64);
            let clipped = hi - lo;
            if clipped <= 0.0 || clipped < 0.5 * (b - a) {
                continue;
            }
            segments.push(Segment::from_interval(
                (lo - start as f64) / win as f64,
                (hi - start as f64) / win as f64,
                gt.class_id,
                gt.score,
            ));
        }
        windows.push(Window {
            start_frame: start,
            window_len: win,
            source_len: t,
            sample: VideoSample {
                id: format!("{}@{}", sample.id, start),
                features,
                segments,
            },
        });
        if start + win >= t {
            break;
        }
        start += stride;
    }
    Ok(windows)
}

/// Per-channel linear interpolation onto `target_len` uniformly spaced
/// points over [0, T-1]; endpoints are preserved exactly.
pub fn resize_linear(features: &Tensor, target_len: usize) -> Result<Tensor> {
    let t = features.rows();
    let d = features.cols();
    if t < 2 {
        return Err(Error::Config(format!("resize needs at least 2 frames, got {t}")));
    }
    if target_len == 0 {
        return Err(Error::Config("resize target must be positive".into()));
    }
    let mut out = Tensor::zeros(vec![target_len, d]);
    for i in 0..target_len {
        let pos = if target_len == 1 {
            0.0
        } else {
            i as f64 * (t - 1) as f64 / (target_len - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(t - 1);
        let frac = pos - lo as f64;
        for j in 0..d {
            let v = (1.0 - frac) * features.at(lo, j) + frac * features.at(hi, j);
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Paths used by the generated-dataset layout.
pub fn dataset_dir(root: &Path) -> PathBuf {
    root.join("dataset")
}
