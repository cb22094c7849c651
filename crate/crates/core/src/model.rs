//! DETR-style transformer for 1-D temporal features.
//!
//! An encoder refines projected features, a decoder turns learnable action
//! queries into per-layer predictions, and every attention map (encoder
//! self, decoder self, decoder cross) is kept on the gradient tape so the
//! feedback objectives can reach into them.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor, LAYER_NORM_EPS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub num_queries: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub dropout: f64,
    /// Disabled by the decoder self-attention ablation.
    pub decoder_self_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_encoder_layers: 2,
            num_decoder_layers: 4,
            num_queries: 40,
            model_dim: 64,
            num_heads: 4,
            mlp_dim: 256,
            num_classes: 5,
            feature_dim: 32,
            dropout: 0.0,
            decoder_self_attention: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::Config("model_dim must be even for the positional encoding".into()));
        }
        if self.num_decoder_layers == 0 {
            return Err(Error::Config("at least one decoder layer is required".into()));
        }
        if self.num_queries == 0 {
            return Err(Error::Config("num_queries must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Sinusoidal positional encoding: pe[t, 2k] = sin(t / 10000^(2k/D)),
/// pe[t, 2k+1] = cos(t / 10000^(2k/D)).
pub fn positional_encoding(len: usize, dim: usize) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs even dim, got {dim}")));
    }
    let mut pe = Tensor::zeros(vec![len, dim]);
    for t in 0..len {
        for k in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / dim as f64);
            let angle = t as f64 * freq;
            pe.set(t, 2 * k, angle.sin());
            pe.set(t, 2 * k + 1, angle.cos());
        }
    }
    Ok(pe)
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered, named parameter storage. Registration order is the canonical
/// order used by checkpoints and the optimizer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        debug_assert!(!self.by_name.contains_key(&name), "duplicate param {name}");
        let idx = self.params.len();
        self.by_name.insert(name.clone(), idx);
        self.params.push(Param { name, value });
        idx
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.value.numel()).collect()
    }

    /// Mutable slices over every parameter, in registration order.
    pub fn data_mut(&mut self) -> Vec<&mut [f64]> {
        self.params.iter_mut().map(|p| p.value.data_mut()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormIdx {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct MlpIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncLayerIdx {
    attn: AttnIdx,
    norm1: NormIdx,
    mlp: MlpIdx,
    norm2: NormIdx,
}

#[derive(Debug, Clone, Copy)]
struct DecLayerIdx {
    self_attn: AttnIdx,
    norm1: NormIdx,
    cross_attn: AttnIdx,
    norm2: NormIdx,
    mlp: MlpIdx,
    norm3: NormIdx,
}

#[derive(Debug, Clone)]
struct ModelIdx {
    input_w: usize,
    input_b: usize,
    query_embed: usize,
    enc: Vec<EncLayerIdx>,
    dec: Vec<DecLayerIdx>,
    class_w: usize,
    class_b: usize,
    seg_w1: usize,
    seg_b1: usize,
    seg_w2: usize,
    seg_b2: usize,
    seg_w3: usize,
    seg_b3: usize,
}

/// Per-forward-pass record of all attention maps (head-averaged,
/// row-stochastic, gradient-carrying).
pub struct AttentionBundle {
    pub enc_self: Vec<NodeId>,
    pub dec_self: Vec<NodeId>,
    pub cross: Vec<NodeId>,
}

/// Class logits and sigmoid-activated (center, width) segments for one
/// decoder layer, still on the tape.
pub struct LayerPrediction {
    pub class_logits: NodeId,
    pub segments: NodeId,
}

/// Detached prediction values.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// (num_queries x (num_classes + 1)); the last column is background.
    pub class_logits: Tensor,
    /// (num_queries x 2) as (center, width) in (0, 1).
    pub segments: Tensor,
}

impl LayerPrediction {
    pub fn detach(&self, tape: &Tape) -> Prediction {
        Prediction {
            class_logits: tape.value(self.class_logits).clone(),
            segments: tape.value(self.segments).clone(),
        }
    }
}

/// Everything one forward pass produces, referenced by tape node.
pub struct ForwardPass {
    /// Parameter leaves in `ParamStore` order; gradient extraction reads these.
    pub param_leaves: Vec<NodeId>,
    pub encoder_out: NodeId,
    pub decoder_states: Vec<NodeId>,
    pub predictions: Vec<LayerPrediction>,
    pub bundle: AttentionBundle,
}

pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    idx: ModelIdx,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let d = cfg.model_dim;

        let linear = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, di: usize, do_: usize| {
            let w = store.register(format!("{name}.w"), xavier(rng, di, do_));
            let b = store.register(format!("{name}.b"), Tensor::zeros(vec![do_]));
            (w, b)
        };
        let attn = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
            let (wq, bq) = {
                let w = store.register(format!("{name}.wq"), xavier(rng, d, d));
                let b = store.register(format!("{name}.bq"), Tensor::zeros(vec![d]));
                (w, b)
            };
            let wk = store.register(format!("{name}.wk"), xavier(rng, d, d));
            let bk = store.register(format!("{name}.bk"), Tensor::zeros(vec![d]));
            let wv = store.register(format!("{name}.wv"), xavier(rng, d, d));
            let bv = store.register(format!("{name}.bv"), Tensor::zeros(vec![d]));
            let wo = store.register(format!("{name}.wo"), xavier(rng, d, d));
            let bo = store.register(format!("{name}.bo"), Tensor::zeros(vec![d]));
            AttnIdx { wq, bq, wk, bk, wv, bv, wo, bo }
        };
        let norm = |store: &mut ParamStore, name: &str| NormIdx {
            gain: store.register(format!("{name}.gain"), Tensor::filled(vec![d], 1.0)),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(vec![d])),
        };
        let mlp = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
            let w1 = store.register(format!("{name}.w1"), xavier(rng, d, cfg.mlp_dim));
            let b1 = store.register(format!("{name}.b1"), Tensor::zeros(vec![cfg.mlp_dim]));
            let w2 = store.register(format!("{name}.w2"), xavier(rng, cfg.mlp_dim, d));
            let b2 = store.register(format!("{name}.b2"), Tensor::zeros(vec![d]));
            MlpIdx { w1, b1, w2, b2 }
        };

        let (input_w, input_b) = linear(&mut store, &mut rng, "input_proj", cfg.feature_dim, d);
        let query_embed = store.register(
            "query_embed",
            Tensor::new(
                vec![cfg.num_queries, d],
                (0..cfg.num_queries * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )?,
        );

        let mut enc = Vec::with_capacity(cfg.num_encoder_layers);
        for i in 0..cfg.num_encoder_layers {
            enc.push(EncLayerIdx {
                attn: attn(&mut store, &mut rng, &format!("enc.{i}.attn")),
                norm1: norm(&mut store, &format!("enc.{i}.norm1")),
                mlp: mlp(&mut store, &mut rng, &format!("enc.{i}.mlp")),
                norm2: norm(&mut store, &format!("enc.{i}.norm2")),
            });
        }
        let mut dec = Vec::with_capacity(cfg.num_decoder_layers);
        for l in 0..cfg.num_decoder_layers {
            dec.push(DecLayerIdx {
                self_attn: attn(&mut store, &mut rng, &format!("dec.{l}.self_attn")),
                norm1: norm(&mut store, &format!("dec.{l}.norm1")),
                cross_attn: attn(&mut store, &mut rng, &format!("dec.{l}.cross_attn")),
                norm2: norm(&mut store, &format!("dec.{l}.norm2")),
                mlp: mlp(&mut store, &mut rng, &format!("dec.{l}.mlp")),
                norm3: norm(&mut store, &format!("dec.{l}.norm3")),
            });
        }

        let (class_w, class_b) = linear(&mut store, &mut rng, "class_head", d, cfg.num_classes + 1);
        let (seg_w1, seg_b1) = linear(&mut store, &mut rng, "seg_head.l1", d, d);
        let (seg_w2, seg_b2) = linear(&mut store, &mut rng, "seg_head.l2", d, d);
        let (seg_w3, seg_b3) = linear(&mut store, &mut rng, "seg_head.l3", d, 2);

        let idx = ModelIdx {
            input_w,
            input_b,
            query_embed,
            enc,
            dec,
            class_w,
            class_b,
            seg_w1,
            seg_b1,
            seg_w2,
            seg_b2,
            seg_w3,
            seg_b3,
        };
        Ok(Model { cfg, store, idx })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn params_data_mut(&mut self) -> Vec<&mut [f64]> {
        self.store.data_mut()
    }

    /// Run the model on one feature sequence (T x feature_dim).
    ///
    /// With `trainable` set, parameters enter the tape as gradient targets
    /// and dropout masks are drawn from `dropout_rng` (when dropout > 0).
    pub fn forward(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        trainable: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        if features.shape().len() != 2 || features.shape()[1] != self.cfg.feature_dim {
            return Err(Error::Shape(format!(
                "features must be (T x {}), got {:?}",
                self.cfg.feature_dim,
                features.shape()
            )));
        }
        if !features.all_finite() {
            return Err(Error::NonFinite("input features".into()));
        }
        let seq_len = features.shape()[0];
        let d = self.cfg.model_dim;

        let param_leaves: Vec<NodeId> = self
            .store
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect();
        let p = |i: usize| param_leaves[i];

        // Input projection plus positional encoding, applied once.
        let feat = tape.constant(features.clone());
        let projected = tape.matmul(feat, p(self.idx.input_w))?;
        let projected = tape.add_bias(projected, p(self.idx.input_b))?;
        let pe = tape.constant(positional_encoding(seq_len, d)?);
        let mut x = tape.add(projected, pe)?;

        let mut dropout = |tape: &mut Tape, node: NodeId| -> Result<NodeId> {
            let rate = self.cfg.dropout;
            if !trainable || rate == 0.0 {
                return Ok(node);
            }
            let rng = dropout_rng
                .as_deref_mut()
                .ok_or_else(|| Error::Config("dropout > 0 requires an rng".into()))?;
            let keep = 1.0 - rate;
            let shape = tape.value(node).shape().to_vec();
            let numel: usize = shape.iter().product();
            let mask = Tensor::new(
                shape,
                (0..numel)
                    .map(|_| if rng.gen_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 })
                    .collect(),
            )?;
            let mask = tape.constant(mask);
            tape.mul(node, mask)
        };

        let mut enc_self = Vec::with_capacity(self.cfg.num_encoder_layers);
        for layer in &self.idx.enc {
            let (attn_out, map) = self.attention(tape, x, x, x, &param_leaves, &layer.attn)?;
            enc_self.push(map);
            let attn_out = dropout(tape, attn_out)?;
            let res = tape.add(x, attn_out)?;
            x = tape.layer_norm(res, p(layer.norm1.gain), p(layer.norm1.bias), LAYER_NORM_EPS)?;
            let mlp_out = self.mlp(tape, x, &param_leaves, &layer.mlp)?;
            let mlp_out = dropout(tape, mlp_out)?;
            let res = tape.add(x, mlp_out)?;
            x = tape.layer_norm(res, p(layer.norm2.gain), p(layer.norm2.bias), LAYER_NORM_EPS)?;
        }
        let encoder_out = x;

        // Cross-attention keys carry the positional encoding; values do not.
        let keys_pe = tape.add(encoder_out, pe)?;

        let mut state = p(self.idx.query_embed);
        let mut dec_self = Vec::new();
        let mut cross = Vec::with_capacity(self.cfg.num_decoder_layers);
        let mut decoder_states = Vec::with_capacity(self.cfg.num_decoder_layers);
        let mut predictions = Vec::with_capacity(self.cfg.num_decoder_layers);
        for layer in &self.idx.dec {
            if self.cfg.decoder_self_attention {
                let (sa_out, map) = self.attention(tape, state, state, state, &param_leaves, &layer.self_attn)?;
                dec_self.push(map);
                let sa_out = dropout(tape, sa_out)?;
                let res = tape.add(state, sa_out)?;
                state = tape.layer_norm(res, p(layer.norm1.gain), p(layer.norm1.bias), LAYER_NORM_EPS)?;
            }
            let (ca_out, map) =
                self.cross_attention(tape, state, keys_pe, encoder_out, &param_leaves, &layer.cross_attn)?;
            cross.push(map);
            let ca_out = dropout(tape, ca_out)?;
            let res = tape.add(state, ca_out)?;
            state = tape.layer_norm(res, p(layer.norm2.gain), p(layer.norm2.bias), LAYER_NORM_EPS)?;
            let mlp_out = self.mlp(tape, state, &param_leaves, &layer.mlp)?;
            let mlp_out = dropout(tape, mlp_out)?;
            let res = tape.add(state, mlp_out)?;
            state = tape.layer_norm(res, p(layer.norm3.gain), p(layer.norm3.bias), LAYER_NORM_EPS)?;

            decoder_states.push(state);
            predictions.push(self.predict_heads(tape, state, &param_leaves)?);
        }

        Ok(ForwardPass {
            param_leaves,
            encoder_out,
            decoder_states,
            predictions,
            bundle: AttentionBundle { enc_self, dec_self, cross },
        })
    }

    /// Multi-head attention with separate query/key/value sources. Returns
    /// the projected output and the head-averaged attention map (which
    /// remains on the tape).
    fn attention(
        &self,
        tape: &mut Tape,
        q_in: NodeId,
        k_in: NodeId,
        v_in: NodeId,
        leaves: &[NodeId],
        idx: &AttnIdx,
    ) -> Result<(NodeId, NodeId)> {
        self.cross_attention(tape, q_in, k_in, v_in, leaves, idx)
    }

    fn cross_attention(
        &self,
        tape: &mut Tape,
        q_in: NodeId,
        k_in: NodeId,
        v_in: NodeId,
        leaves: &[NodeId],
        idx: &AttnIdx,
    ) -> Result<(NodeId, NodeId)> {
        let p = |i: usize| leaves[i];
        let d = self.cfg.model_dim;
        let heads = self.cfg.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q = tape.matmul(q_in, p(idx.wq))?;
        let q = tape.add_bias(q, p(idx.bq))?;
        let k = tape.matmul(k_in, p(idx.wk))?;
        let k = tape.add_bias(k, p(idx.bk))?;
        let v = tape.matmul(v_in, p(idx.wv))?;
        let v = tape.add_bias(v, p(idx.bv))?;

        let mut maps = Vec::with_capacity(heads);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let map = tape.softmax_rows(scores, scale)?;
            maps.push(map);
            outs.push(tape.matmul(map, vh)?);
        }
        let concat = tape.concat_cols(&outs)?;
        let out = tape.matmul(concat, p(idx.wo))?;
        let out = tape.add_bias(out, p(idx.bo))?;
        let avg_map = tape.mean_of(&maps)?;
        Ok((out, avg_map))
    }

    fn mlp(&self, tape: &mut Tape, x: NodeId, leaves: &[NodeId], idx: &MlpIdx) -> Result<NodeId> {
        let p = |i: usize| leaves[i];
        let h = tape.matmul(x, p(idx.w1))?;
        let h = tape.add_bias(h, p(idx.b1))?;
        let h = tape.relu(h);
        let out = tape.matmul(h, p(idx.w2))?;
        tape.add_bias(out, p(idx.b2))
    }

    /// Classification head (linear to C+1 logits, index C = background) and
    /// segment head (3-layer MLP to sigmoid (center, width)).
    fn predict_heads(&self, tape: &mut Tape, state: NodeId, leaves: &[NodeId]) -> Result<LayerPrediction> {
        let p = |i: usize| leaves[i];
        let logits = tape.matmul(state, p(self.idx.class_w))?;
        let class_logits = tape.add_bias(logits, p(self.idx.class_b))?;

        let h = tape.matmul(state, p(self.idx.seg_w1))?;
        let h = tape.add_bias(h, p(self.idx.seg_b1))?;
        let h = tape.relu(h);
        let h = tape.matmul(h, p(self.idx.seg_w2))?;
        let h = tape.add_bias(h, p(self.idx.seg_b2))?;
        let h = tape.relu(h);
        let raw = tape.matmul(h, p(self.idx.seg_w3))?;
        let raw = tape.add_bias(raw, p(self.idx.seg_b3))?;
        let segments = tape.sigmoid(raw);
        Ok(LayerPrediction { class_logits, segments })
    }
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            num_queries: 4,
            model_dim: 8,
            num_heads: 2,
            mlp_dim: 16,
            num_classes: 3,
            feature_dim: 5,
            dropout: 0.0,
            decoder_self_attention: true,
        }
    }

    fn demo_features(t: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![t, d], (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn positional_encoding_time_zero_alternates() {
        let pe = positional_encoding(4, 6).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn positional_encoding_in_unit_range_and_matches_formula() {
        let pe = positional_encoding(4, 4).unwrap();
        for &v in pe.data() {
            assert!((-1.0..=1.0).contains(&v));
        }
        for t in 0..4 {
            for k in 0..2 {
                let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / 4.0);
                assert_relative_eq!(pe.at(t, 2 * k), (t as f64 * freq).sin(), max_relative = 1e-15);
                assert_relative_eq!(pe.at(t, 2 * k + 1), (t as f64 * freq).cos(), max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn positional_encoding_rejects_odd_dim() {
        assert!(positional_encoding(4, 5).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.model_dim = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_shapes_and_layer_counts() {
        let cfg = tiny_config();
        let model = Model::new(cfg.clone(), 42).unwrap();
        let features = demo_features(6, cfg.feature_dim, 1);
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &features, false, None).unwrap();

        assert_eq!(fwd.bundle.enc_self.len(), cfg.num_encoder_layers);
        assert_eq!(fwd.bundle.dec_self.len(), cfg.num_decoder_layers);
        assert_eq!(fwd.bundle.cross.len(), cfg.num_decoder_layers);
        assert_eq!(fwd.decoder_states.len(), cfg.num_decoder_layers);
        assert_eq!(tape.value(fwd.encoder_out).shape(), &[6, cfg.model_dim]);
        for &m in &fwd.bundle.enc_self {
            assert_eq!(tape.value(m).shape(), &[6, 6]);
        }
        for &m in &fwd.bundle.cross {
            assert_eq!(tape.value(m).shape(), &[cfg.num_queries, 6]);
        }
        for pred in &fwd.predictions {
            assert_eq!(tape.value(pred.class_logits).shape(), &[cfg.num_queries, cfg.num_classes + 1]);
            assert_eq!(tape.value(pred.segments).shape(), &[cfg.num_queries, 2]);
        }
    }

    #[test]
    fn attention_maps_are_row_stochastic() {
        let cfg = tiny_config();
        let model = Model::new(cfg.clone(), 7).unwrap();
        let features = demo_features(5, cfg.feature_dim, 2);
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &features, false, None).unwrap();
        let all: Vec<NodeId> = fwd
            .bundle
            .enc_self
            .iter()
            .chain(&fwd.bundle.dec_self)
            .chain(&fwd.bundle.cross)
            .copied()
            .collect();
        for id in all {
            let map = tape.value(id);
            for i in 0..map.rows() {
                let s: f64 = map.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
                assert!(map.row(i).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn zero_encoder_layers_is_identity_refinement() {
        let mut cfg = tiny_config();
        cfg.num_encoder_layers = 0;
        let model = Model::new(cfg.clone(), 3).unwrap();
        let features = demo_features(4, cfg.feature_dim, 3);
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &features, false, None).unwrap();
        assert!(fwd.bundle.enc_self.is_empty());
        // Encoder out equals projected features + positional encoding.
        let expected_rows = tape.value(fwd.encoder_out).rows();
        assert_eq!(expected_rows, 4);
    }

    #[test]
    fn one_decoder_layer_yields_one_of_each() {
        let mut cfg = tiny_config();
        cfg.num_decoder_layers = 1;
        let model = Model::new(cfg.clone(), 5).unwrap();
        let features = demo_features(4, cfg.feature_dim, 4);
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &features, false, None).unwrap();
        assert_eq!(fwd.decoder_states.len(), 1);
        assert_eq!(fwd.bundle.dec_self.len(), 1);
        assert_eq!(fwd.bundle.cross.len(), 1);
        assert_eq!(fwd.predictions.len(), 1);
    }

    #[test]
    fn changing_features_changes_cross_maps_not_query_embedding() {
        let cfg = tiny_config();
        let model = Model::new(cfg.clone(), 11).unwrap();
        let f1 = demo_features(5, cfg.feature_dim, 10);
        let f2 = demo_features(5, cfg.feature_dim, 20);

        let mut t1 = Tape::new();
        let fwd1 = model.forward(&mut t1, &f1, false, None).unwrap();
        let mut t2 = Tape::new();
        let fwd2 = model.forward(&mut t2, &f2, false, None).unwrap();

        let q = model.params().index_of("query_embed").unwrap();
        assert_eq!(
            t1.value(fwd1.param_leaves[q]).data(),
            t2.value(fwd2.param_leaves[q]).data()
        );
        assert_ne!(
            t1.value(fwd1.bundle.cross[0]).data(),
            t2.value(fwd2.bundle.cross[0]).data()
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_config();
        let model = Model::new(cfg.clone(), 13).unwrap();
        let features = demo_features(6, cfg.feature_dim, 30);
        let run = || {
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &features, false, None).unwrap();
            tape.value(fwd.predictions.last().unwrap().segments).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_key_attention_is_all_ones_column() {
        let cfg = tiny_config();
        let model = Model::new(cfg.clone(), 17).unwrap();
        let features = demo_features(1, cfg.feature_dim, 5);
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &features, false, None).unwrap();
        for &m in fwd.bundle.cross.iter().chain(&fwd.bundle.enc_self) {
            for &v in tape.value(m).data() {
                assert_relative_eq!(v, 1.0, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn identical_queries_attend_identically() {
        // Two identical feature rows produce identical encoder attention rows.
        let cfg = tiny_config();
        let model = Model::new(cfg.clone(), 19).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let row: Vec<f64> = (0..cfg.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut rows = vec![row.clone(), row];
        rows.push((0..cfg.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
        // Positional encoding breaks ties between positions, so build the
        // map directly from projected features without it: use a 1-layer
        // encoder on identical tokens by zeroing the positional offset via
        // identical timestamps is not possible; instead check the decoder
        // self-attention on duplicated query embeddings.
        let mut model = model;
        let q_idx = model.params().index_of("query_embed").unwrap();
        let d = cfg.model_dim;
        let mut qe = model.params().get(q_idx).value.clone();
        let first_row: Vec<f64> = qe.row(0).to_vec();
        for j in 0..d {
            qe.set(1, j, first_row[j]);
        }
        model.params_mut().get_mut(q_idx).value = qe;
        let features = Tensor::from_rows(&rows).unwrap();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &features, false, None).unwrap();
        let map = tape.value(fwd.bundle.dec_self[0]);
        for j in 0..map.cols() {
            assert_relative_eq!(map.at(0, j), map.at(1, j), max_relative = 1e-9);
        }
    }

    #[test]
    fn single_head_equals_direct_attention_formula() {
        // 1-head attention must match softmax(QK^T / sqrt(D)) V computed by hand
        // from the same projections.
        let mut cfg = tiny_config();
        cfg.num_heads = 1;
        cfg.num_encoder_layers = 1;
        let model = Model::new(cfg.clone(), 23).unwrap();
        let features = demo_features(3, cfg.feature_dim, 40);
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &features, false, None).unwrap();
        let map = tape.value(fwd.bundle.enc_self[0]).clone();

        // Rebuild the encoder input and the q/k projections by hand.
        let get = |name: &str| {
            model
                .params()
                .get(model.params().index_of(name).unwrap())
                .value
                .clone()
        };
        let d = cfg.model_dim;
        let w = get("input_proj.w");
        let b = get("input_proj.b");
        let pe = positional_encoding(3, d).unwrap();
        let mut x = Tensor::zeros(vec![3, d]);
        for i in 0..3 {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..cfg.feature_dim {
                    acc += features.at(i, k) * w.at(k, j);
                }
                x.set(i, j, acc + b.data()[j] + pe.at(i, j));
            }
        }
        let wq = get("enc.0.attn.wq");
        let bq = get("enc.0.attn.bq");
        let wk = get("enc.0.attn.wk");
        let bk = get("enc.0.attn.bk");
        let project = |w: &Tensor, bias: &Tensor| {
            let mut out = Tensor::zeros(vec![3, d]);
            for i in 0..3 {
                for j in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += x.at(i, k) * w.at(k, j);
                    }
                    out.set(i, j, acc + bias.data()[j]);
                }
            }
            out
        };
        let q = project(&wq, &bq);
        let k = project(&wk, &bk);
        let scale = 1.0 / (d as f64).sqrt();
        for i in 0..3 {
            let logits: Vec<f64> = (0..3)
                .map(|j| {
                    scale
                        * (0..d)
                            .map(|c| q.at(i, c) * k.at(j, c))
                            .sum::<f64>()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..3 {
                assert_relative_eq!(map.at(i, j), exps[j] / sum, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn zeroed_heads_predict_neutral_outputs() {
        let cfg = tiny_config();
        let mut model = Model::new(cfg.clone(), 29).unwrap();
        for name in ["class_head.w", "class_head.b", "seg_head.l3.w", "seg_head.l3.b"] {
            let idx = model.params().index_of(name).unwrap();
            let shape = model.params().get(idx).value.shape().to_vec();
            model.params_mut().get_mut(idx).value = Tensor::zeros(shape);
        }
        let features = demo_features(4, cfg.feature_dim, 50);
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &features, false, None).unwrap();
        let pred = fwd.predictions.last().unwrap().detach(&tape);
        assert!(pred.class_logits.data().iter().all(|&v| v == 0.0));
        assert!(pred.segments.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn segments_strictly_inside_unit_interval() {
        let cfg = tiny_config();
        let model = Model::new(cfg.clone(), 31).unwrap();
        let features = demo_features(6, cfg.feature_dim, 60);
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &features, false, None).unwrap();
        for pred in &fwd.predictions {
            for &v in tape.value(pred.segments).data() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }
}
