//! Guidance maps from cross-attention and the self-feedback objectives.
//!
//! The decoder's cross-attention relates queries to encoder features. Its
//! Gram products (`A_C A_C^T` for query-query similarity, `A_C^T A_C` for
//! feature-feature similarity), square-rooted entrywise, act as targets
//! that pull collapsed self-attention maps back toward structured,
//! high-diversity patterns.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor, KL_EPS, RENORM_EPS};
use crate::error::{Error, Result};
use crate::model::AttentionBundle;

/// How encoder self-attention maps are combined before feedback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderAggregation {
    /// Recurrent matrix product with entrywise square root.
    Matmul,
    /// Plain average of the per-layer maps.
    Average,
    /// Feedback on the last layer only.
    Last,
}

/// How decoder self-attention maps receive feedback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderFeedbackMode {
    /// Layer-by-layer against the same layer's cross-attention guidance.
    Layer,
    /// Last layer only.
    Last,
    /// Averaged self-attention against averaged guidance.
    Average,
}

/// What the self-attention maps are guided toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Guidance maps derived from cross-attention.
    CrossAttention,
    /// Renormalized identity matrix as the target.
    Identity,
    /// Directly maximize a smooth diversity surrogate.
    DiversityMax,
    /// No feedback at all.
    Off,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FeedbackConfig {
    pub lambda_e: f64,
    pub lambda_d: f64,
    pub encoder_aggregation: EncoderAggregation,
    pub decoder_mode: DecoderFeedbackMode,
    pub guidance: GuidanceMode,
    /// Cut the gradient into the guidance side of the KL.
    pub detach_guidance: bool,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        FeedbackConfig {
            lambda_e: 5.0,
            lambda_d: 5.0,
            encoder_aggregation: EncoderAggregation::Matmul,
            decoder_mode: DecoderFeedbackMode::Layer,
            guidance: GuidanceMode::CrossAttention,
            detach_guidance: false,
        }
    }
}

/// Decoder guidance: G_D = sqrt(A_C A_C^T), symmetric (L_q x L_q).
pub fn guidance_decoder(tape: &mut Tape, cross_map: NodeId) -> Result<NodeId> {
    let gram = tape.matmul_nt(cross_map, cross_map)?;
    tape.sqrt_elem(gram)
}

/// Encoder guidance: average the per-layer cross-attention maps, then
/// G_E = sqrt(Abar^T Abar), symmetric (T x T).
pub fn guidance_encoder(tape: &mut Tape, cross_maps: &[NodeId]) -> Result<NodeId> {
    if cross_maps.is_empty() {
        return Err(Error::Config("encoder guidance needs at least one cross-attention map".into()));
    }
    let avg = tape.mean_of(cross_maps)?;
    let avg_t = tape.transpose(avg)?;
    let gram = tape.matmul(avg_t, avg)?;
    tape.sqrt_elem(gram)
}

/// Aggregate encoder self-attention maps: H^1 = A^1,
/// H^i = sqrt(H^{i-1} (A^i)^T) recurrently through the layers.
pub fn aggregate_encoder_attention(tape: &mut Tape, enc_self: &[NodeId]) -> Result<NodeId> {
    if enc_self.is_empty() {
        return Err(Error::Config("aggregation needs at least one encoder map".into()));
    }
    let mut h = enc_self[0];
    for &a in &enc_self[1..] {
        let prod = tape.matmul_nt(h, a)?;
        h = tape.sqrt_elem(prod)?;
    }
    Ok(h)
}

/// Make each row a distribution by dividing by (row sum + eps).
pub fn row_renormalize(tape: &mut Tape, map: NodeId) -> Result<NodeId> {
    tape.renorm_rows(map, RENORM_EPS)
}

/// KL(renorm(self) || renorm(guidance)), mean over rows.
pub fn feedback_loss(tape: &mut Tape, self_map: NodeId, guidance: NodeId) -> Result<NodeId> {
    let p = row_renormalize(tape, self_map)?;
    let q = row_renormalize(tape, guidance)?;
    tape.kl_rows(p, q, KL_EPS)
}

fn maybe_detach(tape: &mut Tape, node: NodeId, detach: bool) -> NodeId {
    if detach {
        let value = tape.value(node).clone();
        tape.constant(value)
    } else {
        node
    }
}

fn aggregated_encoder_map(
    tape: &mut Tape,
    enc_self: &[NodeId],
    aggregation: EncoderAggregation,
) -> Result<NodeId> {
    match aggregation {
        EncoderAggregation::Matmul => aggregate_encoder_attention(tape, enc_self),
        EncoderAggregation::Average => tape.mean_of(enc_self),
        EncoderAggregation::Last => Ok(*enc_self.last().expect("checked nonempty")),
    }
}

/// Smooth diversity surrogate: distance of a map from its best rank-one
/// fit under the l1/linf composite norm, with a column-mean (not median)
/// center so the expression stays differentiable.
pub fn diversity_surrogate(tape: &mut Tape, map: NodeId) -> Result<NodeId> {
    let (m, n) = (tape.value(map).rows(), tape.value(map).cols());
    let ones_row = tape.constant(Tensor::filled(vec![1, m], 1.0));
    let ones_col = tape.constant(Tensor::filled(vec![m, 1], 1.0));
    let ones_n = tape.constant(Tensor::filled(vec![n, 1], 1.0));
    let col_sum = tape.matmul(ones_row, map)?;
    let col_mean = tape.scale(col_sum, 1.0 / m as f64);
    let rank1 = tape.matmul(ones_col, col_mean)?;
    let residual = tape.sub(map, rank1)?;
    let abs_res = tape.abs(residual);
    let col_abs = tape.matmul(ones_row, abs_res)?;
    let row_abs = tape.matmul(abs_res, ones_n)?;
    let l1 = tape.max_all(col_abs);
    let linf = tape.max_all(row_abs);
    let prod = tape.mul(l1, linf)?;
    tape.sqrt_elem(prod)
}

/// Encoder and decoder feedback terms for one forward pass, or `None` for
/// a side that has no maps (layer ablations) or is switched off.
pub struct FeedbackTerms {
    pub encoder: Option<NodeId>,
    pub decoder: Option<NodeId>,
}

pub fn feedback_terms(
    tape: &mut Tape,
    bundle: &AttentionBundle,
    cfg: &FeedbackConfig,
) -> Result<FeedbackTerms> {
    if cfg.guidance == GuidanceMode::Off {
        return Ok(FeedbackTerms { encoder: None, decoder: None });
    }
    if bundle.cross.is_empty() {
        return Err(Error::Config("feedback requires cross-attention maps".into()));
    }

    let encoder = if bundle.enc_self.is_empty() {
        None
    } else {
        let target_map = aggregated_encoder_map(tape, &bundle.enc_self, cfg.encoder_aggregation)?;
        Some(match cfg.guidance {
            GuidanceMode::CrossAttention => {
                let g = guidance_encoder(tape, &bundle.cross)?;
                let g = maybe_detach(tape, g, cfg.detach_guidance);
                feedback_loss(tape, target_map, g)?
            }
            GuidanceMode::Identity => {
                let t = tape.value(target_map).rows();
                let eye = tape.constant(Tensor::eye(t));
                feedback_loss(tape, target_map, eye)?
            }
            GuidanceMode::DiversityMax => {
                let d = diversity_surrogate(tape, target_map)?;
                tape.scale(d, -1.0)
            }
            GuidanceMode::Off => unreachable!(),
        })
    };

    let decoder = if bundle.dec_self.is_empty() {
        None
    } else {
        let pairs: Vec<(NodeId, Option<NodeId>)> = match cfg.decoder_mode {
            DecoderFeedbackMode::Layer => {
                if bundle.dec_self.len() != bundle.cross.len() {
                    return Err(Error::Config(format!(
                        "layer feedback needs matching map counts, got {} self vs {} cross",
                        bundle.dec_self.len(),
                        bundle.cross.len()
                    )));
                }
                bundle.dec_self.iter().zip(&bundle.cross).map(|(&s, &c)| (s, Some(c))).collect()
            }
            DecoderFeedbackMode::Last => {
                vec![(*bundle.dec_self.last().unwrap(), Some(*bundle.cross.last().unwrap()))]
            }
            DecoderFeedbackMode::Average => {
                let avg_self = tape.mean_of(&bundle.dec_self)?;
                let avg_cross = tape.mean_of(&bundle.cross)?;
                vec![(avg_self, Some(avg_cross))]
            }
        };
        let mut terms = Vec::with_capacity(pairs.len());
        for (self_map, cross_map) in pairs {
            let term = match cfg.guidance {
                GuidanceMode::CrossAttention => {
                    let g = guidance_decoder(tape, cross_map.expect("cross present"))?;
                    let g = maybe_detach(tape, g, cfg.detach_guidance);
                    feedback_loss(tape, self_map, g)?
                }
                GuidanceMode::Identity => {
                    let n = tape.value(self_map).rows();
                    let eye = tape.constant(Tensor::eye(n));
                    feedback_loss(tape, self_map, eye)?
                }
                GuidanceMode::DiversityMax => {
                    let d = diversity_surrogate(tape, self_map)?;
                    tape.scale(d, -1.0)
                }
                GuidanceMode::Off => unreachable!(),
            };
            terms.push(term);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        Some(total)
    };

    Ok(FeedbackTerms { encoder, decoder })
}

/// Decoder feedback as a standalone sum over per-layer pairs.
pub fn feedback_loss_decoder(
    tape: &mut Tape,
    dec_self: &[NodeId],
    guidance: &[NodeId],
) -> Result<NodeId> {
    if dec_self.len() != guidance.len() {
        return Err(Error::Config(format!(
            "decoder feedback needs equal list lengths, got {} and {}",
            dec_self.len(),
            guidance.len()
        )));
    }
    if dec_self.is_empty() {
        return Err(Error::Config("decoder feedback needs at least one pair".into()));
    }
    let mut total = None;
    for (&s, &g) in dec_self.iter().zip(guidance) {
        let term = feedback_loss(tape, s, g)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.expect("nonempty"))
}
