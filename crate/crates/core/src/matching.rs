//! Bipartite matching and the set-based detection objective.
//!
//! Ground truths are matched to query predictions by a Hungarian solve over
//! a class/L1/IoU cost, then the loss applies cross-entropy on all queries
//! (unmatched ones as background) plus regression terms on matched pairs.
//! Matching is done on detached values; gradients flow only through the
//! loss terms.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{LayerPrediction, Prediction};

/// One action interval as normalized (center, width), with class and score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub center: f64,
    pub width: f64,
    pub class_id: usize,
    pub score: f64,
}

impl Segment {
    pub fn new(center: f64, width: f64, class_id: usize, score: f64) -> Self {
        Segment { center, width, class_id, score }
    }

    /// (start, end) clamped to [0, 1]; start <= end always holds.
    pub fn interval(&self) -> (f64, f64) {
        let start = (self.center - self.width / 2.0).clamp(0.0, 1.0);
        let end = (self.center + self.width / 2.0).clamp(0.0, 1.0);
        (start.min(end), end.max(start))
    }

    pub fn from_interval(start: f64, end: f64, class_id: usize, score: f64) -> Self {
        Segment {
            center: 0.5 * (start + end),
            width: end - start,
            class_id,
            score,
        }
    }
}

/// 1-D interval IoU on clamped intervals. Zero when disjoint or when the
/// union is degenerate.
pub fn segment_iou(a: &Segment, b: &Segment) -> f64 {
    let (sa, ea) = a.interval();
    let (sb, eb) = b.interval();
    let inter = (ea.min(eb) - sa.max(sb)).max(0.0);
    let union = (ea - sa) + (eb - sb) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Detection loss weights. Feedback weights live in the feedback config.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_l1: f64,
    pub w_iou: f64,
    /// Cross-entropy weight on the background class; 40 queries against a
    /// handful of instances would otherwise drown the signal.
    pub background_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_cls: 2.0, w_l1: 2.0, w_iou: 5.0, background_weight: 0.1 }
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Pair-wise matching cost, (num_gt x num_queries):
/// cost[i][j] = -w_cls p_j(c_i) + w_l1 |t_i - t_j|_1 + w_iou (1 - IoU).
pub fn match_cost_matrix(pred: &Prediction, gts: &[Segment], weights: &LossWeights) -> Result<Tensor> {
    let num_queries = pred.class_logits.rows();
    let num_classes_plus_bg = pred.class_logits.cols();
    if gts.len() > num_queries {
        return Err(Error::Capacity(format!(
            "{} ground truths exceed {} queries",
            gts.len(),
            num_queries
        )));
    }
    if let Some(bad) = gts.iter().find(|g| g.class_id + 1 >= num_classes_plus_bg) {
        return Err(Error::Config(format!("ground-truth class {} out of range", bad.class_id)));
    }
    let probs: Vec<Vec<f64>> = (0..num_queries).map(|q| softmax_row(pred.class_logits.row(q))).collect();
    let mut cost = Tensor::zeros(vec![gts.len(), num_queries]);
    for (i, gt) in gts.iter().enumerate() {
        for j in 0..num_queries {
            let pc = pred.segments.at(j, 0);
            let pw = pred.segments.at(j, 1);
            let l1 = (gt.center - pc).abs() + (gt.width - pw).abs();
            let pseg = Segment::new(pc, pw, gt.class_id, 1.0);
            let iou = segment_iou(gt, &pseg);
            let value = -weights.w_cls * probs[j][gt.class_id]
                + weights.w_l1 * l1
                + weights.w_iou * (1.0 - iou);
            cost.set(i, j, value);
        }
    }
    Ok(cost)
}

/// Minimal-cost injective assignment of all rows to columns (m <= n).
///
/// Among cost-equal optima the lexicographically smallest assignment
/// vector is returned, so tied inputs (duplicated ground truths,
/// hand-built tests) resolve reproducibly.
pub fn hungarian(cost: &Tensor) -> Result<Vec<usize>> {
    let (m, n) = (cost.rows(), cost.cols());
    if m > n {
        return Err(Error::Capacity(format!("{m} rows exceed {n} columns")));
    }
    if !cost.all_finite() {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let (mut assign, u, v) = solve_lap(cost);
    let base_total = assignment_cost(cost, &assign);

    // Lexicographic refinement. Complementary slackness says any edge in an
    // optimal assignment has zero reduced cost under the optimal potentials,
    // so only those edges are worth probing; the tolerance over-includes and
    // the exact sum comparison below decides.
    let scale = cost.data().iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    let tol = 1e-9 * (1.0 + scale);
    for r in 0..m {
        let current = assign[r];
        for c in 0..current {
            if assign[..r].contains(&c) {
                continue;
            }
            if (cost.at(r, c) - u[r] - v[c]).abs() > tol {
                continue;
            }
            if let Some(candidate) = complete_assignment(cost, &assign[..r], r, c) {
                if assignment_cost(cost, &candidate) == base_total {
                    assign = candidate;
                    break;
                }
            }
        }
    }
    Ok(assign)
}

fn assignment_cost(cost: &Tensor, assign: &[usize]) -> f64 {
    assign.iter().enumerate().map(|(i, &j)| cost.at(i, j)).sum()
}

/// Fix rows 0..prefix.len() at `prefix`, row `prefix.len()` at column `c`,
/// and solve the remaining rows optimally on the leftover columns.
fn complete_assignment(cost: &Tensor, prefix: &[usize], row: usize, c: usize) -> Option<Vec<usize>> {
    let (m, n) = (cost.rows(), cost.cols());
    let mut used = vec![false; n];
    for &p in prefix {
        used[p] = true;
    }
    used[c] = true;
    let free_cols: Vec<usize> = (0..n).filter(|&j| !used[j]).collect();
    let rest_rows: Vec<usize> = (row + 1..m).collect();
    if rest_rows.len() > free_cols.len() {
        return None;
    }
    let mut result = prefix.to_vec();
    result.push(c);
    if !rest_rows.is_empty() {
        let mut sub = Tensor::zeros(vec![rest_rows.len(), free_cols.len()]);
        for (si, &ri) in rest_rows.iter().enumerate() {
            for (sj, &cj) in free_cols.iter().enumerate() {
                sub.set(si, sj, cost.at(ri, cj));
            }
        }
        let (sub_assign, _, _) = solve_lap(&sub);
        result.extend(sub_assign.into_iter().map(|sj| free_cols[sj]));
    }
    Some(result)
}

/// Kuhn-Munkres with potentials; returns (assignment, u, v).
fn solve_lap(cost: &Tensor) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let (m, n) = (cost.rows(), cost.cols());
    // 1-indexed working arrays; p[j] holds the row assigned to column j.
    let mut u = vec![0.0f64; m + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![usize::MAX; m];
    for j in 1..=n {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    debug_assert!(assign.iter().all(|&j| j != usize::MAX));
    (assign, u[1..].to_vec(), v[1..].to_vec())
}

/// Differentiable detection loss for one layer's predictions against the
/// ground truths, with the assignment already chosen.
fn layer_loss(
    tape: &mut Tape,
    pred: &LayerPrediction,
    gts: &[Segment],
    assignment: &[usize],
    weights: &LossWeights,
) -> Result<NodeId> {
    let logits = pred.class_logits;
    let (num_queries, num_cols) = (tape.value(logits).rows(), tape.value(logits).cols());
    let background = num_cols - 1;

    // Weighted cross-entropy over all queries. Matched queries target their
    // ground-truth class at weight 1, the rest target background at the
    // background weight; the total is normalized by the weight sum.
    let mut target = vec![background; num_queries];
    let mut query_weight = vec![weights.background_weight; num_queries];
    for (gt_idx, &q) in assignment.iter().enumerate() {
        target[q] = gts[gt_idx].class_id;
        query_weight[q] = 1.0;
    }
    let weight_sum: f64 = query_weight.iter().sum();
    let mut coeffs = Tensor::zeros(vec![num_queries, num_cols]);
    for q in 0..num_queries {
        coeffs.set(q, target[q], -query_weight[q] / weight_sum);
    }
    let logp = tape.log_softmax_rows(logits)?;
    let ce = tape.dot_const(logp, coeffs)?;
    let mut loss = tape.scale(ce, weights.w_cls);

    if !gts.is_empty() {
        let matched = tape.gather_rows(pred.segments, assignment)?;
        let m = gts.len();
        let gt_cw = Tensor::new(
            vec![m, 2],
            gts.iter().flat_map(|g| [g.center, g.width]).collect(),
        )?;
        let gt_node = tape.constant(gt_cw);
        let diff = tape.sub(matched, gt_node)?;
        let absdiff = tape.abs(diff);
        let l1_sum = tape.sum_all(absdiff);
        let l1 = tape.scale(l1_sum, weights.w_l1 / m as f64);
        loss = tape.add(loss, l1)?;

        // IoU on raw (center +- width/2) intervals; the smooth counterpart
        // of `segment_iou`, identical whenever predictions stay in [0, 1].
        let centers = tape.slice_cols(matched, 0, 1)?;
        let widths = tape.slice_cols(matched, 1, 1)?;
        let half = tape.scale(widths, 0.5);
        let start_p = tape.sub(centers, half)?;
        let end_p = tape.add(centers, half)?;
        let (mut starts_g, mut ends_g, mut lens_g) = (Vec::new(), Vec::new(), Vec::new());
        for g in gts {
            let (s, e) = (g.center - g.width / 2.0, g.center + g.width / 2.0);
            starts_g.push(s);
            ends_g.push(e);
            lens_g.push(e - s);
        }
        let s_g = tape.constant(Tensor::new(vec![m, 1], starts_g)?);
        let e_g = tape.constant(Tensor::new(vec![m, 1], ends_g)?);
        let len_g = tape.constant(Tensor::new(vec![m, 1], lens_g)?);
        let inter_hi = tape.min_elem(end_p, e_g)?;
        let inter_lo = tape.max_elem(start_p, s_g)?;
        let inter_raw = tape.sub(inter_hi, inter_lo)?;
        let inter = tape.relu(inter_raw);
        let len_sum = tape.add(widths, len_g)?;
        let union = tape.sub(len_sum, inter)?;
        let union = tape.add_const(union, 1e-12);
        let iou = tape.div(inter, union)?;
        let one_minus = tape.scale(iou, -1.0);
        let one_minus = tape.add_const(one_minus, 1.0);
        let iou_sum = tape.sum_all(one_minus);
        let iou_loss = tape.scale(iou_sum, weights.w_iou / m as f64);
        loss = tape.add(loss, iou_loss)?;
    }
    Ok(loss)
}

/// Full detection objective. Each decoder layer's predictions are matched
/// and scored independently; with `aux_loss` the result is the mean over
/// layers (deep supervision), otherwise only the last layer counts.
pub fn detr_loss(
    tape: &mut Tape,
    predictions: &[LayerPrediction],
    gts: &[Segment],
    weights: &LossWeights,
    aux_loss: bool,
) -> Result<NodeId> {
    if predictions.is_empty() {
        return Err(Error::Config("detr_loss needs at least one prediction layer".into()));
    }
    let layers: Vec<&LayerPrediction> = if aux_loss {
        predictions.iter().collect()
    } else {
        vec![predictions.last().unwrap()]
    };
    let mut terms = Vec::with_capacity(layers.len());
    for pred in layers {
        let detached = pred.detach(tape);
        let assignment = if gts.is_empty() {
            Vec::new()
        } else {
            let cost = match_cost_matrix(&detached, gts, weights)?;
            hungarian(&cost)?
        };
        terms.push(layer_loss(tape, pred, gts, &assignment, weights)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, 1.0 / terms.len() as f64))
}

/// L = L_detr + lambda_e * L_fb_enc + lambda_d * L_fb_dec. Absent or
/// zero-weighted feedback terms are left out of the graph entirely so they
/// cannot contribute gradient.
pub fn total_loss(
    tape: &mut Tape,
    detr: NodeId,
    fb_encoder: Option<NodeId>,
    fb_decoder: Option<NodeId>,
    lambda_e: f64,
    lambda_d: f64,
) -> Result<NodeId> {
    let mut total = detr;
    if let Some(fb) = fb_encoder {
        if lambda_e != 0.0 {
            let term = tape.scale(fb, lambda_e);
            total = tape.add(total, term)?;
        }
    }
    if let Some(fb) = fb_decoder {
        if lambda_d != 0.0 {
            let term = tape.scale(fb, lambda_d);
            total = tape.add(total, term)?;
        }
    }
    Ok(total)
}
