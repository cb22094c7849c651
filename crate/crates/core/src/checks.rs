//! Registered gradient checks: every differentiable operation plus the
//! end-to-end objective on a toy model, each verified against central
//! finite differences. The CLI renders these as a pass/fail table and the
//! acceptance suite runs the same list.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, NodeId, Tape, Tensor, DEFAULT_FD_STEP, KL_EPS, LAYER_NORM_EPS, RENORM_EPS};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::feedback::{self, feedback_terms};
use crate::matching::{detr_loss, total_loss, Segment};
use crate::model::Model;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("valid shape")
}

fn positive_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.05..1.0)).collect()).expect("valid shape")
}

fn row_stochastic(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
    let mut t = positive_tensor(rng, vec![m, n]);
    for i in 0..m {
        let sum: f64 = t.row(i).iter().sum();
        for j in 0..n {
            let v = t.at(i, j) / sum;
            t.set(i, j, v);
        }
    }
    t
}

type BuildFn = Box<dyn Fn(&mut Tape, NodeId) -> Result<NodeId>>;

/// Gradient checks for every primitive operation, at fixed seeded points
/// chosen away from kinks.
pub fn op_checks() -> Vec<(String, Tensor, BuildFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut checks: Vec<(String, Tensor, BuildFn)> = Vec::new();

    let b = random_tensor(&mut rng, vec![4, 3]);
    let x = random_tensor(&mut rng, vec![3, 4]);
    checks.push((
        "matmul".into(),
        x.clone(),
        Box::new(move |t, l| {
            let c = t.constant(b.clone());
            let y = t.matmul(l, c)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    ));

    let b = random_tensor(&mut rng, vec![5, 4]);
    checks.push((
        "matmul_nt".into(),
        x.clone(),
        Box::new(move |t, l| {
            let c = t.constant(b.clone());
            let y = t.matmul_nt(l, c)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    ));

    checks.push((
        "transpose".into(),
        x.clone(),
        Box::new(|t, l| {
            let y = t.transpose(l)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    ));

    // Elementwise binaries against a constant bounded away from zero.
    let other = Tensor::new(
        vec![3, 4],
        (0..12).map(|i| if i % 2 == 0 { 1.3 + i as f64 * 0.1 } else { -1.7 - i as f64 * 0.05 }).collect(),
    )
    .expect("shape");
    for name in ["add", "sub", "mul", "div", "min_elem", "max_elem"] {
        let o = other.clone();
        let op = name.to_string();
        checks.push((
            name.into(),
            x.clone(),
            Box::new(move |t, l| {
                let c = t.constant(o.clone());
                let y = match op.as_str() {
                    "add" => t.add(l, c)?,
                    "sub" => t.sub(l, c)?,
                    "mul" => t.mul(l, c)?,
                    "div" => t.div(l, c)?,
                    "min_elem" => t.min_elem(l, c)?,
                    _ => t.max_elem(l, c)?,
                };
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            }),
        ));
    }

    let bias = random_tensor(&mut rng, vec![4]);
    checks.push((
        "add_bias".into(),
        x.clone(),
        Box::new(move |t, l| {
            let b = t.constant(bias.clone());
            let y = t.add_bias(l, b)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    ));
    // Bias gradient path.
    let base = random_tensor(&mut rng, vec![3, 4]);
    checks.push((
        "add_bias_grad_wrt_bias".into(),
        random_tensor(&mut rng, vec![4]),
        Box::new(move |t, l| {
            let x = t.constant(base.clone());
            let y = t.add_bias(x, l)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    ));

    for (name, f) in [
        ("scale", 0usize),
        ("add_const", 1),
        ("relu", 2),
        ("abs", 3),
        ("sigmoid", 4),
    ] {
        checks.push((
            name.into(),
            x.clone(),
            Box::new(move |t: &mut Tape, l: NodeId| {
                let y = match f {
                    0 => t.scale(l, -1.75),
                    1 => t.add_const(l, 0.4),
                    2 => t.relu(l),
                    3 => t.abs(l),
                    _ => t.sigmoid(l),
                };
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            }),
        ));
    }

    checks.push((
        "sqrt".into(),
        positive_tensor(&mut rng, vec![3, 3]),
        Box::new(|t, l| {
            let y = t.sqrt_elem(l)?;
            Ok(t.sum_all(y))
        }),
    ));

    checks.push((
        "softmax_rows".into(),
        random_tensor(&mut rng, vec![3, 5]),
        Box::new(|t, l| {
            let y = t.softmax_rows(l, 0.6)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    ));
    checks.push((
        "log_softmax_rows".into(),
        random_tensor(&mut rng, vec![3, 5]),
        Box::new(|t, l| {
            let y = t.log_softmax_rows(l)?;
            let coeffs = Tensor::new(
                vec![3, 5],
                (0..15).map(|i| if i % 4 == 0 { -0.5 } else { 0.1 }).collect(),
            )?;
            t.dot_const(y, coeffs)
        }),
    ));

    let gain = random_tensor(&mut rng, vec![5]);
    let bias = random_tensor(&mut rng, vec![5]);
    checks.push((
        "layer_norm".into(),
        random_tensor(&mut rng, vec![3, 5]),
        Box::new(move |t, l| {
            let g = t.constant(gain.clone());
            let b = t.constant(bias.clone());
            let y = t.layer_norm(l, g, b, LAYER_NORM_EPS)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    ));
    let gb_x = random_tensor(&mut rng, vec![3, 5]);
    let gb_bias = random_tensor(&mut rng, vec![5]);
    checks.push((
        "layer_norm_grad_wrt_gain".into(),
        random_tensor(&mut rng, vec![5]),
        Box::new(move |t, l| {
            let x = t.constant(gb_x.clone());
            let b = t.constant(gb_bias.clone());
            let y = t.layer_norm(x, l, b, LAYER_NORM_EPS)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    ));

    let q = row_stochastic(&mut rng, 3, 4);
    checks.push((
        "kl_rows".into(),
        row_stochastic(&mut rng, 3, 4),
        Box::new(move |t, l| {
            let qn = t.constant(q.clone());
            t.kl_rows(l, qn, KL_EPS)
        }),
    ));

    checks.push((
        "renorm_rows".into(),
        positive_tensor(&mut rng, vec![3, 4]),
        Box::new(|t, l| {
            let y = t.renorm_rows(l, RENORM_EPS)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        }),
    ));

    checks.push((
        "dot_const".into(),
        random_tensor(&mut rng, vec![2, 3]),
        Box::new(|t, l| {
            let coeffs = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25])?;
            t.dot_const(l, coeffs)
        }),
    ));
    checks.push(("sum_all".into(), random_tensor(&mut rng, vec![2, 3]), Box::new(|t, l| Ok(t.sum_all(l)))));
    checks.push((
        "max_all".into(),
        Tensor::new(vec![2, 2], vec![0.1, 0.9, -0.4, 0.3]).expect("shape"),
        Box::new(|t, l| Ok(t.max_all(l))),
    ));

    checks.push((
        "slice_concat_gather".into(),
        random_tensor(&mut rng, vec![3, 6]),
        Box::new(|t, l| {
            let a = t.slice_cols(l, 0, 2)?;
            let b = t.slice_cols(l, 2, 4)?;
            let joined = t.concat_cols(&[b, a])?;
            let picked = t.gather_rows(joined, &[2, 0, 2])?;
            let sq = t.mul(picked, picked)?;
            Ok(t.sum_all(sq))
        }),
    ));

    checks.push((
        "mean_of".into(),
        random_tensor(&mut rng, vec![2, 3]),
        Box::new(|t, l| {
            let shifted = t.add_const(l, 0.5);
            let scaled = t.scale(l, 2.0);
            let m = t.mean_of(&[l, shifted, scaled])?;
            let sq = t.mul(m, m)?;
            Ok(t.sum_all(sq))
        }),
    ));

    // Composite losses.
    let guide = row_stochastic(&mut rng, 4, 4);
    checks.push((
        "feedback_loss_encoder".into(),
        row_stochastic(&mut rng, 4, 4),
        Box::new(move |t, l| {
            let g = t.constant(guide.clone());
            feedback::feedback_loss(t, l, g)
        }),
    ));
    let dec_self_map = row_stochastic(&mut rng, 4, 4);
    checks.push((
        "feedback_loss_decoder_guidance_path".into(),
        row_stochastic(&mut rng, 4, 6),
        Box::new(move |t, l| {
            let g = feedback::guidance_decoder(t, l)?;
            let s = t.constant(dec_self_map.clone());
            feedback::feedback_loss(t, s, g)
        }),
    ));
    checks.push((
        "encoder_aggregation".into(),
        row_stochastic(&mut rng, 4, 4),
        Box::new(|t, l| {
            let other = t.softmax_rows(l, 2.0)?;
            let h = feedback::aggregate_encoder_attention(t, &[l, other])?;
            let g = t.constant(Tensor::eye(4));
            feedback::feedback_loss(t, h, g)
        }),
    ));
    checks.push((
        "diversity_surrogate".into(),
        row_stochastic(&mut rng, 4, 5),
        Box::new(|t, l| feedback::diversity_surrogate(t, l)),
    ));

    let gts = vec![Segment::new(0.35, 0.3, 1, 1.0), Segment::new(0.72, 0.18, 0, 1.0)];
    checks.push((
        "detr_loss".into(),
        random_tensor(&mut rng, vec![4, 5]),
        Box::new(move |t, l| {
            let logits = t.slice_cols(l, 0, 3)?;
            let raw = t.slice_cols(l, 3, 2)?;
            let segments = t.sigmoid(raw);
            let pred = crate::model::LayerPrediction { class_logits: logits, segments };
            detr_loss(t, &[pred], &gts, &crate::matching::LossWeights::default(), true)
        }),
    ));

    checks
}

/// Gradient check of the full objective on a toy model: every parameter
/// entry against central differences.
pub fn end_to_end_toy_check() -> Result<f64> {
    let mut cfg = ExperimentConfig::default();
    cfg.model.num_encoder_layers = 1;
    cfg.model.num_decoder_layers = 2;
    cfg.model.num_queries = 4;
    cfg.model.model_dim = 8;
    cfg.model.num_heads = 2;
    cfg.model.mlp_dim = 16;
    cfg.model.num_classes = 2;
    cfg.model.feature_dim = 6;
    cfg.seed = 12;

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let features = random_tensor(&mut rng, vec![8, 6]);
    let gts = vec![Segment::new(0.3, 0.25, 0, 1.0), Segment::new(0.7, 0.2, 1, 1.0)];

    let loss_value = |model: &Model| -> Result<f64> {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &features, false, None)?;
        let detr = detr_loss(&mut tape, &fwd.predictions, &gts, &cfg.loss.weights, true)?;
        let fb = feedback_terms(&mut tape, &fwd.bundle, &cfg.feedback)?;
        let total = total_loss(
            &mut tape,
            detr,
            fb.encoder,
            fb.decoder,
            cfg.feedback.lambda_e,
            cfg.feedback.lambda_d,
        )?;
        Ok(tape.value(total).item())
    };

    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    // Analytic gradients in one backward pass.
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &features, true, None)?;
        let detr = detr_loss(&mut tape, &fwd.predictions, &gts, &cfg.loss.weights, true)?;
        let fb = feedback_terms(&mut tape, &fwd.bundle, &cfg.feedback)?;
        let total = total_loss(
            &mut tape,
            detr,
            fb.encoder,
            fb.decoder,
            cfg.feedback.lambda_e,
            cfg.feedback.lambda_d,
        )?;
        let grads = tape.backward(total)?;
        fwd.param_leaves
            .iter()
            .map(|&leaf| match grads.get(leaf) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.value(leaf).numel()],
            })
            .collect()
    };

    let h = DEFAULT_FD_STEP;
    let mut max_err = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let mut plus = Model::new(cfg.model.clone(), cfg.seed)?;
            plus.params_mut().get_mut(pi).value.data_mut()[j] += h;
            let mut minus = Model::new(cfg.model.clone(), cfg.seed)?;
            minus.params_mut().get_mut(pi).value.data_mut()[j] -= h;
            let fd = (loss_value(&plus)? - loss_value(&minus)?) / (2.0 * h);
            let err = (grad[j] - fd).abs() / grad[j].abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Run every registered gradient check at tolerance 1e-4.
pub fn run_all() -> Result<Vec<CheckResult>> {
    let tolerance = 1e-4;
    let mut results = Vec::new();
    for (name, point, build) in op_checks() {
        let err = grad_check(|t, l| build(t, l), &point, DEFAULT_FD_STEP)?;
        results.push(CheckResult { name, max_rel_err: err, tolerance });
    }
    let err = end_to_end_toy_check()?;
    results.push(CheckResult { name: "end_to_end_toy_loss".into(), max_rel_err: err, tolerance });
    Ok(results)
}
