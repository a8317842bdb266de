//! Post-LN encoder with residual score chaining across layers and an
//! optional score term carried over from the previous utterance.

use crate::attention::{mha, resample_scores, CtxTerm, ScoreState, ScoreTerms};
use crate::config::CtxLayers;
use crate::error::{Error, Result};
use crate::model::{ffn, sinusoid, EncoderLayerParams, Model};
use crate::params::Graph;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Encoder result detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `[T × d_att]`.
    pub hidden: Tensor,
    /// Scores of this utterance, cached for the next one.
    pub score_state: ScoreState,
}

/// Encoder result still attached to a graph.
#[derive(Debug, Clone)]
pub struct EncodedUtterance {
    pub hidden: Var,
    /// Per layer, per head: the pre-softmax scores after residual terms.
    pub layer_scores: Vec<Vec<Var>>,
}

impl EncodedUtterance {
    pub fn score_state(&self, g: &Graph) -> Result<ScoreState> {
        ScoreState::from_heads(
            self.layer_scores
                .iter()
                .map(|heads| heads.iter().map(|&v| g.value(v).clone()).collect())
                .collect(),
        )
    }

    pub fn detach(&self, g: &Graph) -> Result<EncoderOutput> {
        Ok(EncoderOutput {
            hidden: g.value(self.hidden).clone(),
            score_state: self.score_state(g)?,
        })
    }
}

/// One encoder layer: `x' = LN(x + MHA(x))`, `y = LN(x' + FFN(x'))`, with the
/// attention scores shifted by `prev` and the context term when given.
/// Returns `y` and this layer's per-head pre-softmax scores.
pub fn encoder_layer_forward(
    g: &mut Graph,
    layer: &EncoderLayerParams,
    x: Var,
    prev_scores: Option<Vec<Var>>,
    ctx: Option<CtxTerm>,
) -> Result<(Var, Vec<Var>)> {
    let terms = ScoreTerms {
        prev: prev_scores,
        ctx,
        mask: None,
    };
    let att = mha(g, x, x, x, &layer.attn, &terms)?;
    let att_out = g.dropout(att.out)?;
    let res = g.tape.add(x, att_out)?;
    let x1 = layer.ln_attn.apply(g, res)?;
    let f = ffn(g, &layer.ffn, x1)?;
    let f = g.dropout(f)?;
    let res = g.tape.add(x1, f)?;
    let y = layer.ln_ffn.apply(g, res)?;
    Ok((y, att.scores))
}

/// Projects `[T × d_in]` features, adds positions and runs every layer.
///
/// Within the utterance each layer receives the previous layer's scores as
/// `prev` when residual attention is on. With `prev_state` present and the
/// context mechanism on, each selected layer also adds `α·PrevLS`, built
/// from that layer's cached scores resampled to this utterance's length.
/// The cached state is treated as a constant.
pub fn encode_on_graph(
    g: &mut Graph,
    model: &Model,
    features: &Tensor,
    prev_state: Option<&ScoreState>,
) -> Result<EncodedUtterance> {
    let cfg = &model.config;
    if features.rank() != 2 || features.cols() != cfg.d_in {
        return Err(Error::Config(format!(
            "features of shape {:?} do not match d_in = {}",
            features.shape(),
            cfg.d_in
        )));
    }
    let t = features.rows();
    if let Some(state) = prev_state {
        if state.layer_count() != cfg.enc_layers || state.head_count() != cfg.heads {
            return Err(Error::Contract(format!(
                "cached score state has {} layers x {} heads, model has {} x {}",
                state.layer_count(),
                state.head_count(),
                cfg.enc_layers,
                cfg.heads
            )));
        }
    }
    let enc = &model.encoder;
    let x = g.constant(features.clone());
    let (w_in, b_in) = (g.p(enc.w_in), g.p(enc.b_in));
    let x = g.tape.matmul(x, w_in)?;
    let x = g.tape.add_bias(x, b_in)?;
    let pe = g.constant(sinusoid(0..t as i64, cfg.d_att));
    let mut x = g.tape.add(x, pe)?;
    x = g.dropout(x)?;

    let use_ctx = cfg.context_attention && prev_state.is_some();
    let mut layer_scores: Vec<Vec<Var>> = Vec::with_capacity(enc.layers.len());
    for (l, layer) in enc.layers.iter().enumerate() {
        let prev = if cfg.uses_residual() {
            layer_scores.last().cloned()
        } else {
            None
        };
        let ctx = match prev_state {
            Some(state) if use_ctx && (cfg.ctx_layers == CtxLayers::All || l == 0) => {
                let resampled = resample_scores(&state.layer_scores()[l], t)?;
                let heads = resampled.shape()[0];
                let per_head = (0..heads)
                    .map(|h| {
                        let block = resampled.data()[h * t * t..(h + 1) * t * t].to_vec();
                        Ok(g.constant(Tensor::new(vec![t, t], block)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(CtxTerm {
                    prev_scores: per_head,
                    mix: enc.ctx_mix.layers[l],
                    alpha: enc.ctx_mix.alpha,
                })
            }
            _ => None,
        };
        let (y, scores) = encoder_layer_forward(g, layer, x, prev, ctx)?;
        x = y;
        layer_scores.push(scores);
    }
    Ok(EncodedUtterance {
        hidden: x,
        layer_scores,
    })
}

/// Inference-mode encoding.
pub fn encode_utterance(
    model: &Model,
    features: &Tensor,
    prev_state: Option<&ScoreState>,
) -> Result<EncoderOutput> {
    let mut g = Graph::inference(&model.store);
    let enc = encode_on_graph(&mut g, model, features, prev_state)?;
    enc.detach(&g)
}
