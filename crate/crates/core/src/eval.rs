//! Post-processing and detection scoring.
//!
//! SoftNMS decays overlapping scores instead of discarding detections, and
//! mAP follows the temporal-detection protocol: greedy score-ordered
//! matching at each tIoU threshold, all-point interpolated PR area, mean
//! over classes that have ground truth.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::autodiff::Tape;
use crate::data::{window_slice, VideoSample};
use crate::error::{Error, Result};
use crate::matching::{segment_iou, Segment};
use crate::model::Model;

/// Score decay applied to overlapping detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NmsDecay {
    /// score *= (1 - IoU) when IoU exceeds the threshold.
    Linear { iou_thresh: f64 },
    /// score *= exp(-IoU^2 / sigma) for every overlap.
    Gaussian { sigma: f64 },
}

impl Default for NmsDecay {
    fn default() -> Self {
        NmsDecay::Linear { iou_thresh: 0.40 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalConfig {
    /// SoftNMS on/off (set prediction can in principle skip it).
    pub nms: bool,
    pub decay: NmsDecay,
    /// Detections kept per video after post-processing.
    pub top_k: usize,
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            nms: true,
            decay: NmsDecay::default(),
            top_k: 200,
            thresholds: vec![0.3, 0.4, 0.5, 0.6, 0.7],
        }
    }
}

fn by_score_start_end(a: &Segment, b: &Segment) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| {
            let (sa, ea) = a.interval();
            let (sb, eb) = b.interval();
            sa.partial_cmp(&sb).unwrap_or(Ordering::Equal).then(
                ea.partial_cmp(&eb).unwrap_or(Ordering::Equal),
            )
        })
}

/// Iterative SoftNMS over one class's scored predictions. Deterministic:
/// ties break by (score desc, start asc, end asc). Scores never increase.
pub fn soft_nms(preds: &[Segment], decay: NmsDecay, top_k: usize) -> Vec<Segment> {
    let mut pool: Vec<Segment> = preds.to_vec();
    let mut survivors: Vec<Segment> = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let best = pool
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| by_score_start_end(a, b))
            .map(|(i, _)| i)
            .expect("nonempty pool");
        let winner = pool.swap_remove(best);
        for p in pool.iter_mut() {
            let iou = segment_iou(&winner, p);
            match decay {
                NmsDecay::Linear { iou_thresh } => {
                    if iou > iou_thresh {
                        p.score *= 1.0 - iou;
                    }
                }
                NmsDecay::Gaussian { sigma } => {
                    p.score *= (-iou * iou / sigma).exp();
                }
            }
        }
        survivors.push(winner);
    }
    survivors.sort_by(by_score_start_end);
    survivors.truncate(top_k);
    survivors
}

/// Average precision for one class at one tIoU threshold.
///
/// `detections` carry the index of the video they belong to; `gts` is the
/// per-video list of this class's ground truths. Returns `None` when there
/// is no ground truth (the class is skipped, not scored zero).
pub fn average_precision(detections: &[(usize, Segment)], gts: &[Vec<Segment>], tiou: f64) -> Option<f64> {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return None;
    }
    let mut dets = detections.to_vec();
    dets.sort_by(|a, b| by_score_start_end(&a.1, &b.1).then(a.0.cmp(&b.0)));

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(dets.len());
    for (video, det) in &dets {
        let candidates = &gts[*video];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in candidates.iter().enumerate() {
            if matched[*video][gi] {
                continue;
            }
            let iou = segment_iou(det, gt);
            if iou >= tiou && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[*video][gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }

    // All-point interpolated area under the precision-recall curve.
    let mut cum_tp = 0usize;
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    for (i, &hit) in tp.iter().enumerate() {
        cum_tp += usize::from(hit);
        precision.push(cum_tp as f64 / (i + 1) as f64);
        recall.push(cum_tp as f64 / num_gt as f64);
    }
    let mut running_max = 0.0f64;
    let mut interp = vec![0.0; precision.len()];
    for i in (0..precision.len()).rev() {
        running_max = running_max.max(precision[i]);
        interp[i] = running_max;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..recall.len() {
        ap += (recall[i] - prev_recall) * interp[i];
        prev_recall = recall[i];
    }
    Some(ap)
}

/// Detection results for one video, in global normalized coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoResult {
    pub id: String,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub start: f64,
    pub end: f64,
    pub class: usize,
    pub score: f64,
}

impl DetectionRecord {
    pub fn to_segment(&self) -> Segment {
        Segment::from_interval(self.start, self.end, self.class, self.score)
    }

    pub fn from_segment(seg: &Segment) -> Self {
        let (start, end) = seg.interval();
        DetectionRecord { start, end, class: seg.class_id, score: seg.score }
    }
}

/// mAP per threshold plus their average.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    pub map_per_threshold: Vec<f64>,
    pub average_map: f64,
    /// Classes that had ground truth and entered the mean.
    pub scored_classes: Vec<usize>,
}

/// Score detection results against ground truth at the given thresholds.
pub fn mean_ap(results: &[VideoResult], ground_truth: &[VideoSample], thresholds: &[f64]) -> Result<MapReport> {
    if thresholds.is_empty() {
        return Err(Error::Config("at least one tIoU threshold is required".into()));
    }
    // Stable video index mapping by ground-truth order.
    let index_of = |id: &str| ground_truth.iter().position(|v| v.id == id);
    let mut detections_by_class: Vec<Vec<(usize, Segment)>> = Vec::new();
    let mut classes: BTreeSet<usize> = BTreeSet::new();
    for video in ground_truth {
        for gt in &video.segments {
            classes.insert(gt.class_id);
        }
    }
    let max_class = classes.iter().max().copied().unwrap_or(0);
    detections_by_class.resize(max_class + 1, Vec::new());
    for result in results {
        let Some(vi) = index_of(&result.id) else {
            return Err(Error::Format(format!("results reference unknown video {}", result.id)));
        };
        for det in &result.detections {
            if det.class <= max_class {
                detections_by_class[det.class].push((vi, det.to_segment()));
            }
        }
    }
    let gts_for = |class: usize| -> Vec<Vec<Segment>> {
        ground_truth
            .iter()
            .map(|v| v.segments.iter().filter(|s| s.class_id == class).copied().collect())
            .collect()
    };

    let scored_classes: Vec<usize> = classes.into_iter().collect();
    let mut map_per_threshold = Vec::with_capacity(thresholds.len());
    for &tiou in thresholds {
        let mut sum = 0.0;
        let mut count = 0usize;
        for &class in &scored_classes {
            let gts = gts_for(class);
            if let Some(ap) = average_precision(&detections_by_class[class], &gts, tiou) {
                sum += ap;
                count += 1;
            }
        }
        map_per_threshold.push(if count == 0 { 0.0 } else { sum / count as f64 });
    }
    let average_map = map_per_threshold.iter().sum::<f64>() / map_per_threshold.len() as f64;
    Ok(MapReport {
        thresholds: thresholds.to_vec(),
        map_per_threshold,
        average_map,
        scored_classes,
    })
}

/// Windowing applied at inference time.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct InferenceWindowing {
    pub enabled: bool,
    pub window: usize,
    pub overlap: usize,
}

impl Default for InferenceWindowing {
    fn default() -> Self {
        InferenceWindowing { enabled: false, window: 128, overlap: 32 }
    }
}

/// Run the model over one video and produce post-processed detections in
/// global normalized coordinates.
pub fn detect_video(
    model: &Model,
    sample: &VideoSample,
    windowing: &InferenceWindowing,
    eval_cfg: &EvalConfig,
) -> Result<Vec<Segment>> {
    let mut raw: Vec<Segment> = Vec::new();
    if windowing.enabled && sample.features.rows() > windowing.window {
        for window in window_slice(sample, windowing.window, windowing.overlap)? {
            for local in query_detections(model, &window.sample)? {
                raw.push(window.to_global(&local));
            }
        }
    } else {
        raw.extend(query_detections(model, sample)?);
    }

    let num_classes = model.config().num_classes;
    let mut kept: Vec<Segment> = Vec::new();
    for class in 0..num_classes {
        let class_preds: Vec<Segment> = raw.iter().filter(|s| s.class_id == class).copied().collect();
        if class_preds.is_empty() {
            continue;
        }
        if eval_cfg.nms {
            kept.extend(soft_nms(&class_preds, eval_cfg.decay, eval_cfg.top_k));
        } else {
            kept.extend(class_preds);
        }
    }
    kept.sort_by(|a, b| by_score_start_end(a, b).then(a.class_id.cmp(&b.class_id)));
    kept.truncate(eval_cfg.top_k);
    Ok(kept)
}

/// One detection per (query, non-background class) from the last decoder
/// layer, scored by softmax probability.
fn query_detections(model: &Model, sample: &VideoSample) -> Result<Vec<Segment>> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &sample.features, false, None)?;
    let pred = fwd.predictions.last().expect("decoder has layers").detach(&tape);
    let num_queries = pred.class_logits.rows();
    let num_classes = pred.class_logits.cols() - 1;
    let mut out = Vec::with_capacity(num_queries * num_classes);
    for q in 0..num_queries {
        let row = pred.class_logits.row(q);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let center = pred.segments.at(q, 0);
        let width = pred.segments.at(q, 1);
        for class in 0..num_classes {
            out.push(Segment::new(center, width, class, exps[class] / z));
        }
    }
    Ok(out)
}

/// Detect over a whole split, producing serializable per-video results.
pub fn run_detection(
    model: &Model,
    samples: &[VideoSample],
    windowing: &InferenceWindowing,
    eval_cfg: &EvalConfig,
) -> Result<Vec<VideoResult>> {
    use rayon::prelude::*;
    samples
        .par_iter()
        .map(|sample| {
            let dets = detect_video(model, sample, windowing, eval_cfg)?;
            Ok(VideoResult {
                id: sample.id.clone(),
                detections: dets.iter().map(DetectionRecord::from_segment).collect(),
            })
        })
        .collect()
}
