//! Scaled dot-product attention, residual attention over pre-softmax scores,
//! and the context-aware variant that mixes in a previous utterance's scores.
//!
//! All attention entry points funnel through [`combine_scores`] and
//! [`attend`], so the degenerate cases (`α = 0`, `prev = 0`, one head)
//! reproduce the simpler operators exactly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{xavier, Graph, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-layer, per-head pre-softmax score matrices of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreState {
    layer_scores: Vec<Tensor>,
}

impl ScoreState {
    /// Each entry must be `[H × T × T]` with the same `H` and `T`.
    pub fn new(layer_scores: Vec<Tensor>) -> Result<Self> {
        let first = layer_scores
            .first()
            .ok_or_else(|| Error::Contract("score state needs at least one layer".into()))?;
        let shape = first.shape().to_vec();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(Error::shape("score_state", &shape, &[0, 0, 0]));
        }
        for t in &layer_scores {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("score_state", &shape, t.shape()));
            }
            if !t.is_finite() {
                return Err(Error::Numeric("non-finite cached scores".into()));
            }
        }
        Ok(Self { layer_scores })
    }

    /// Stacks per-layer lists of per-head `[T×T]` matrices.
    pub fn from_heads(layers: Vec<Vec<Tensor>>) -> Result<Self> {
        let mut stacked = Vec::with_capacity(layers.len());
        for heads in layers {
            let first = heads
                .first()
                .ok_or_else(|| Error::Contract("layer without heads".into()))?;
            let t = first.rows();
            let mut data = Vec::with_capacity(heads.len() * t * t);
            for h in &heads {
                if h.shape() != [t, t] {
                    return Err(Error::shape("score_state head", &[t, t], h.shape()));
                }
                data.extend_from_slice(h.data());
            }
            stacked.push(Tensor::new(vec![heads.len(), t, t], data)?);
        }
        Self::new(stacked)
    }

    pub fn layer_scores(&self) -> &[Tensor] {
        &self.layer_scores
    }

    pub fn layer_count(&self) -> usize {
        self.layer_scores.len()
    }

    pub fn head_count(&self) -> usize {
        self.layer_scores[0].shape()[0]
    }

    pub fn utterance_length(&self) -> usize {
        self.layer_scores[0].shape()[1]
    }

    /// One head of one layer as a `[T×T]` matrix.
    pub fn head(&self, layer: usize, head: usize) -> Tensor {
        let t = self.utterance_length();
        let src = &self.layer_scores[layer].data()[head * t * t..(head + 1) * t * t];
        Tensor::new(vec![t, t], src.to_vec()).expect("square head")
    }
}

/// Per-head projections and the output projection of one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams {
    pub w_q: Vec<ParamId>,
    pub w_k: Vec<ParamId>,
    pub w_v: Vec<ParamId>,
    pub w_o: ParamId,
    pub d_att: usize,
}

impl MhaParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_att: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_att % heads != 0 {
            return Err(Error::Config(format!(
                "d_att = {d_att} is not divisible by {heads} heads"
            )));
        }
        let d_k = d_att / heads;
        let mut proj = |kind: &str| -> Result<Vec<ParamId>> {
            (0..heads)
                .map(|h| store.add(format!("{prefix}.w_{kind}.{h}"), xavier(rng, d_att, d_k)))
                .collect()
        };
        let w_q = proj("q")?;
        let w_k = proj("k")?;
        let w_v = proj("v")?;
        let w_o = store.add(format!("{prefix}.w_o"), xavier(rng, d_att, d_att))?;
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            d_att,
        })
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn d_k(&self) -> usize {
        self.d_att / self.heads()
    }
}

/// The 2→1 channel mix `w_prev·s_prev + w_cur·s_cur` of one encoder layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtxMixLayer {
    pub w_prev: ParamId,
    pub w_cur: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtxMixParams {
    pub layers: Vec<CtxMixLayer>,
    pub alpha: f64,
}

impl CtxMixParams {
    /// Starts as a pass-through of the resampled previous scores.
    pub fn init(store: &mut ParamStore, prefix: &str, layers: usize, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        let layers = (0..layers)
            .map(|l| {
                Ok(CtxMixLayer {
                    w_prev: store.add(format!("{prefix}.{l}.w_prev"), Tensor::scalar(1.0))?,
                    w_cur: store.add(format!("{prefix}.{l}.w_cur"), Tensor::scalar(0.0))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, alpha })
    }
}

/// `q·kᵀ / √d_k`, before any softmax.
pub fn scaled_scores(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let (sq, sk) = (tape.shape(q), tape.shape(k));
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::shape("scaled_scores", sq, sk));
    }
    let d_k = sq[1] as f64;
    let raw = tape.matmul_nt(q, k)?;
    tape.scale(raw, 1.0 / d_k.sqrt())
}

/// `softmax(scores)·v`; returns the output and the attention weights.
pub fn attend(tape: &mut Tape, scores: Var, v: Var) -> Result<(Var, Var)> {
    let weights = tape.softmax_rows(scores)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// `s + prev + α·ctx`, skipping absent terms.
pub fn combine_scores(
    tape: &mut Tape,
    scaled: Var,
    prev: Option<Var>,
    ctx: Option<(Var, f64)>,
) -> Result<Var> {
    let mut scores = scaled;
    if let Some(p) = prev {
        if tape.shape(p) != tape.shape(scaled) {
            return Err(Error::shape("prev scores", tape.shape(scaled), tape.shape(p)));
        }
        scores = tape.add(scores, p)?;
    }
    if let Some((term, alpha)) = ctx {
        if tape.shape(term) != tape.shape(scaled) {
            return Err(Error::shape("context scores", tape.shape(scaled), tape.shape(term)));
        }
        let weighted = tape.scale(term, alpha)?;
        scores = tape.add(scores, weighted)?;
    }
    Ok(scores)
}

pub fn attn(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    Ok(res_attn(tape, q, k, v, None)?.0)
}

/// Residual attention: `softmax(q·kᵀ/√d_k + prev)·v`. The second return
/// value is the summed pre-softmax score matrix that the next layer takes
/// as its `prev`.
pub fn res_attn(tape: &mut Tape, q: Var, k: Var, v: Var, prev: Option<Var>) -> Result<(Var, Var)> {
    let s = scaled_scores(tape, q, k)?;
    let scores = combine_scores(tape, s, prev, None)?;
    let (out, _) = attend(tape, scores, v)?;
    Ok((out, scores))
}

/// Context-aware residual attention:
/// `softmax(q·kᵀ/√d_k + prev + α·prev_ls_term)·v`.
pub fn ctx_res_attn(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    prev: Option<Var>,
    prev_ls_term: Var,
    alpha: f64,
) -> Result<(Var, Var)> {
    let s = scaled_scores(tape, q, k)?;
    let scores = combine_scores(tape, s, prev, Some((prev_ls_term, alpha)))?;
    let (out, _) = attend(tape, scores, v)?;
    Ok((out, scores))
}

/// Element-wise `w_prev·s_prev + w_cur·s_cur (+ b)` with scalar tape weights.
///
/// The model's mix layers carry no bias: a constant added to every score
/// cancels in the softmax, so it could never be learned.
pub fn prev_ls(
    tape: &mut Tape,
    s_prev: Var,
    s_cur: Var,
    w_prev: Var,
    w_cur: Var,
    bias: Option<Var>,
) -> Result<Var> {
    if tape.shape(s_prev) != tape.shape(s_cur) {
        return Err(Error::shape("prev_ls", tape.shape(s_prev), tape.shape(s_cur)));
    }
    let a = tape.mul_scalar(s_prev, w_prev)?;
    let b = tape.mul_scalar(s_cur, w_cur)?;
    let sum = tape.add(a, b)?;
    match bias {
        Some(bias) => tape.add_scalar(sum, bias),
        None => Ok(sum),
    }
}

/// Bilinear resampling of each `[T_p×T_p]` head onto a `[T×T]` grid over
/// normalized coordinates, with grid corners aligned. Equal lengths return
/// the input unchanged.
pub fn resample_scores(s_prev: &Tensor, t_cur: usize) -> Result<Tensor> {
    let shape = s_prev.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::shape("resample_scores", shape, &[0, 0, 0]));
    }
    if t_cur == 0 {
        return Err(Error::Contract("resample target length must be positive".into()));
    }
    let (heads, t_p) = (shape[0], shape[1]);
    if t_p == t_cur {
        return Ok(s_prev.clone());
    }
    let coords: Vec<(usize, usize, f64)> = (0..t_cur).map(|i| source_coord(i, t_cur, t_p)).collect();
    let src = s_prev.data();
    let mut out = Vec::with_capacity(heads * t_cur * t_cur);
    for h in 0..heads {
        let m = &src[h * t_p * t_p..(h + 1) * t_p * t_p];
        for &(r0, r1, fr) in &coords {
            for &(c0, c1, fc) in &coords {
                let top = lerp(m[r0 * t_p + c0], m[r0 * t_p + c1], fc);
                let bottom = lerp(m[r1 * t_p + c0], m[r1 * t_p + c1], fc);
                out.push(lerp(top, bottom, fr));
            }
        }
    }
    Tensor::new(vec![heads, t_cur, t_cur], out)
}

/// Source cell indices and fractional offset for output index `i`.
fn source_coord(i: usize, t_out: usize, t_in: usize) -> (usize, usize, f64) {
    if t_in == 1 {
        return (0, 0, 0.0);
    }
    let x = if t_out == 1 {
        (t_in - 1) as f64 / 2.0
    } else {
        (i * (t_in - 1)) as f64 / (t_out - 1) as f64
    };
    let lo = (x.floor() as usize).min(t_in - 1);
    let hi = (lo + 1).min(t_in - 1);
    (lo, hi, x - lo as f64)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Cross-utterance input for one encoder layer's attention.
#[derive(Debug, Clone)]
pub struct CtxTerm {
    /// Previous-utterance scores per head, already resampled to this length.
    pub prev_scores: Vec<Var>,
    pub mix: CtxMixLayer,
    pub alpha: f64,
}

/// Additive terms applied to an attention block's scores.
#[derive(Debug, Clone, Default)]
pub struct ScoreTerms {
    pub prev: Option<Vec<Var>>,
    pub ctx: Option<CtxTerm>,
    /// Additive mask shared by all heads, applied last.
    pub mask: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct MhaOutput {
    pub out: Var,
    /// Per-head pre-softmax scores after all additive terms except the mask.
    pub scores: Vec<Var>,
    /// Per-head attention weights.
    pub weights: Vec<Var>,
}

/// Multi-head attention with optional residual and context score terms.
pub fn mha(
    g: &mut Graph,
    x_q: Var,
    x_k: Var,
    x_v: Var,
    p: &MhaParams,
    terms: &ScoreTerms,
) -> Result<MhaOutput> {
    let heads = p.heads();
    if let Some(prev) = &terms.prev {
        if prev.len() != heads {
            return Err(Error::Contract(format!(
                "{} prev score matrices for {heads} heads",
                prev.len()
            )));
        }
    }
    if let Some(ctx) = &terms.ctx {
        if ctx.prev_scores.len() != heads {
            return Err(Error::Contract(format!(
                "{} context score matrices for {heads} heads",
                ctx.prev_scores.len()
            )));
        }
    }
    let mut head_outs = Vec::with_capacity(heads);
    let mut scores = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (wq, wk, wv) = (g.p(p.w_q[h]), g.p(p.w_k[h]), g.p(p.w_v[h]));
        let q = g.tape.matmul(x_q, wq)?;
        let k = g.tape.matmul(x_k, wk)?;
        let v = g.tape.matmul(x_v, wv)?;
        let s = scaled_scores(&mut g.tape, q, k)?;
        let ctx = match &terms.ctx {
            Some(c) => {
                let (w_prev, w_cur) = (g.p(c.mix.w_prev), g.p(c.mix.w_cur));
                let term = prev_ls(&mut g.tape, c.prev_scores[h], s, w_prev, w_cur, None)?;
                Some((term, c.alpha))
            }
            None => None,
        };
        let prev = terms.prev.as_ref().map(|p| p[h]);
        let new_scores = combine_scores(&mut g.tape, s, prev, ctx)?;
        let masked = match terms.mask {
            Some(m) => g.tape.add(new_scores, m)?,
            None => new_scores,
        };
        let (out, w) = attend(&mut g.tape, masked, v)?;
        head_outs.push(out);
        scores.push(new_scores);
        weights.push(w);
    }
    let concat = if heads == 1 {
        head_outs[0]
    } else {
        g.tape.concat_cols(&head_outs)?
    };
    let wo = g.p(p.w_o);
    let out = g.tape.matmul(concat, wo)?;
    Ok(MhaOutput {
        out,
        scores,
        weights,
    })
}
