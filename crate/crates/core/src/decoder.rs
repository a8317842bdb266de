//! Transformer decoder conditioned on a context memory folded from earlier
//! transcripts.
//!
//! The fold runs oldest-first: the two oldest transcripts meet in a
//! parameter-free attention (older as queries, newer as keys and values),
//! the result is combined with the newer transcript, and every further
//! transcript is folded in the same way. The memory keeps the length of the
//! oldest transcript and is prepended to the target embeddings.

use crate::attention::{attn, mha, ScoreTerms};
use crate::error::{Error, Result};
use crate::model::{ffn, sinusoid, Model, SOS};
use crate::params::Graph;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Additive score for blocked attention positions.
pub const MASK_VALUE: f64 = -1e30;

/// Folded context vectors with the utterances they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextMemory {
    /// `[T_ctx × d_att]`.
    pub vectors: Tensor,
    pub source_utterance_ids: Vec<String>,
}

fn check_tokens(model: &Model, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Contract("empty token sequence".into()));
    }
    let vocab = model.config.vocab_size;
    match tokens.iter().find(|&&t| t as usize >= vocab) {
        Some(&token) => Err(Error::Vocabulary { token, vocab }),
        None => Ok(()),
    }
}

fn embed(g: &mut Graph, model: &Model, tokens: &[u32]) -> Result<Var> {
    check_tokens(model, tokens)?;
    let table = g.p(model.decoder.embed);
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    g.tape.gather_rows(table, &ids)
}

/// `Attn(Embed(y_old), Embed(y_new), Embed(y_new))`.
pub fn ctx_prev_attn(g: &mut Graph, model: &Model, y_old: &[u32], y_new: &[u32]) -> Result<Var> {
    let old = embed(g, model, y_old)?;
    let new = embed(g, model, y_new)?;
    attn(&mut g.tape, old, new, new)
}

/// Linear over `[a ; mean_t(b) broadcast to a's length]`.
pub fn combine(g: &mut Graph, model: &Model, a: Var, b: Var) -> Result<Var> {
    let rows = g.tape.shape(a)[0];
    let mean = g.tape.mean_rows(b)?;
    let tiled = g.tape.repeat_rows(mean, rows)?;
    let cat = g.tape.concat_cols(&[a, tiled])?;
    let (w, bias) = (g.p(model.decoder.combine_w), g.p(model.decoder.combine_b));
    let out = g.tape.matmul(cat, w)?;
    g.tape.add_bias(out, bias)
}

/// Folds `history` (oldest first) into a `[len(history[0]) × d_att]` memory.
/// A single transcript is folded with itself.
pub fn context_fold(g: &mut Graph, model: &Model, history: &[Vec<u32>]) -> Result<Var> {
    let (oldest, rest) = history
        .split_first()
        .ok_or_else(|| Error::Contract("context fold needs at least one transcript".into()))?;
    let newer = rest.first().unwrap_or(oldest);
    let attended = ctx_prev_attn(g, model, oldest, newer)?;
    let newer_emb = embed(g, model, newer)?;
    let mut memory = combine(g, model, attended, newer_emb)?;
    for y in rest.iter().skip(1) {
        let e = embed(g, model, y)?;
        let attended = attn(&mut g.tape, memory, e, e)?;
        memory = combine(g, model, attended, e)?;
    }
    Ok(memory)
}

/// Inference-mode fold.
pub fn fold_memory(model: &Model, history: &[Vec<u32>], source_ids: Vec<String>) -> Result<ContextMemory> {
    let mut g = Graph::inference(&model.store);
    let m = context_fold(&mut g, model, history)?;
    Ok(ContextMemory {
        vectors: g.value(m).clone(),
        source_utterance_ids: source_ids,
    })
}

/// Self-attention mask over `[prefix ; targets]`: every row sees the whole
/// prefix, target rows additionally see targets up to themselves.
pub fn prefix_causal_mask(prefix: usize, targets: usize) -> Tensor {
    let n = prefix + targets;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let visible = j < prefix || (i >= prefix && j <= i);
            if !visible {
                data[i * n + j] = MASK_VALUE;
            }
        }
    }
    Tensor::new(vec![n, n], data).expect("non-empty mask")
}

#[derive(Debug, Clone)]
pub struct DecoderForward {
    /// `[T_tgt × V]`, target positions only.
    pub logits: Var,
    pub prefix_len: usize,
    /// Per layer, per head self-attention weights over `[prefix ; targets]`.
    pub self_weights: Vec<Vec<Var>>,
    /// Per layer, per head cross-attention weights over encoder frames.
    pub cross_weights: Vec<Vec<Var>>,
}

/// Teacher-forced decoder pass. `targets` must start with the start token.
pub fn decode_forward(
    g: &mut Graph,
    model: &Model,
    targets: &[u32],
    memory: Option<Var>,
    enc_hidden: Var,
) -> Result<DecoderForward> {
    if targets.first() != Some(&SOS) {
        return Err(Error::Contract("decoder input must begin with the start token".into()));
    }
    let d = model.config.d_att;
    let t_tgt = targets.len();
    let emb = embed(g, model, targets)?;
    let pe = g.constant(sinusoid(0..t_tgt as i64, d));
    let tgt = g.tape.add(emb, pe)?;

    let (mut x, prefix_len) = match memory {
        Some(m) => {
            let shape = g.tape.shape(m).to_vec();
            if shape.len() != 2 || shape[1] != d {
                return Err(Error::shape("context memory", &shape, &[0, d]));
            }
            let t_ctx = shape[0];
            let pe = g.constant(sinusoid(-(t_ctx as i64)..0, d));
            let prefix = g.tape.add(m, pe)?;
            (g.tape.concat_rows(&[prefix, tgt])?, t_ctx)
        }
        None => (tgt, 0),
    };
    x = g.dropout(x)?;
    let mask = g.constant(prefix_causal_mask(prefix_len, t_tgt));

    let mut self_weights = Vec::with_capacity(model.decoder.layers.len());
    let mut cross_weights = Vec::with_capacity(model.decoder.layers.len());
    for layer in &model.decoder.layers {
        let masked = ScoreTerms {
            mask: Some(mask),
            ..ScoreTerms::default()
        };
        let sa = mha(g, x, x, x, &layer.self_attn, &masked)?;
        let sa_out = g.dropout(sa.out)?;
        let res = g.tape.add(x, sa_out)?;
        let x1 = layer.ln_self.apply(g, res)?;

        let ca = mha(g, x1, enc_hidden, enc_hidden, &layer.cross_attn, &ScoreTerms::default())?;
        let ca_out = g.dropout(ca.out)?;
        let res = g.tape.add(x1, ca_out)?;
        let x2 = layer.ln_cross.apply(g, res)?;

        let f = ffn(g, &layer.ffn, x2)?;
        let f = g.dropout(f)?;
        let res = g.tape.add(x2, f)?;
        x = layer.ln_ffn.apply(g, res)?;
        self_weights.push(sa.weights);
        cross_weights.push(ca.weights);
    }
    let out = if prefix_len > 0 {
        g.tape.slice_rows(x, prefix_len, t_tgt)?
    } else {
        x
    };
    let (w_out, b_out) = (g.p(model.decoder.w_out), g.p(model.decoder.b_out));
    let logits = g.tape.matmul(out, w_out)?;
    let logits = g.tape.add_bias(logits, b_out)?;
    Ok(DecoderForward {
        logits,
        prefix_len,
        self_weights,
        cross_weights,
    })
}
