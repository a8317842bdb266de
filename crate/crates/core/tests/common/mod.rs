//! Loop-level reference implementations shared by the oracle and acceptance
//! targets. They share no code with the library beyond reading parameter
//! values.
#![allow(dead_code)]

use ctxf::attention::{MhaParams, ScoreState};
use ctxf::config::{Config, CtxLayers};
use ctxf::model::{Model, EOS, SOS};
use ctxf::search::log_softmax;
use ctxf::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type M = Vec<Vec<f64>>;

pub const TOL: f64 = 1e-12;

pub fn rand_m(rng: &mut impl Rng, r: usize, c: usize) -> M {
    (0..r).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn to_t(a: &M) -> Tensor {
    Tensor::from_rows(a).unwrap()
}

pub fn to_m(t: &Tensor) -> M {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn mm(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &M) -> M {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn scale(a: &M, c: f64) -> M {
    a.iter().map(|r| r.iter().map(|v| v * c).collect()).collect()
}

pub fn softmax(a: &M) -> M {
    a.iter()
        .map(|r| {
            let mx = r.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}

pub fn layer_norm(a: &M, gain: &Tensor, bias: &Tensor) -> M {
    a.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mean = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gain.data()[j] + bias.data()[j])
                .collect()
        })
        .collect()
}

pub fn linear(a: &M, w: &Tensor, b: Option<&Tensor>) -> M {
    let mut out = mm(a, &to_m(w));
    if let Some(b) = b {
        for row in &mut out {
            for (v, bj) in row.iter_mut().zip(b.data()) {
                *v += bj;
            }
        }
    }
    out
}

pub fn positions(from: i64, to: i64, d: usize) -> M {
    (from..to)
        .map(|p| {
            (0..d)
                .map(|i| {
                    let freq = (10000f64).powf(-((2 * (i / 2)) as f64) / d as f64);
                    let a = p as f64 * freq;
                    if i % 2 == 0 {
                        a.sin()
                    } else {
                        a.cos()
                    }
                })
                .collect()
        })
        .collect()
}

pub fn max_diff(a: &M, t: &Tensor) -> f64 {
    assert_eq!(t.shape(), &[a.len(), a[0].len()]);
    a.iter()
        .flatten()
        .zip(t.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Bilinear resampling on corner-aligned grids.
pub fn resample(s: &M, t: usize) -> M {
    let tp = s.len();
    let src = |i: usize| -> f64 {
        if tp == 1 {
            0.0
        } else if t == 1 {
            (tp - 1) as f64 / 2.0
        } else {
            i as f64 * (tp - 1) as f64 / (t - 1) as f64
        }
    };
    let sample = |y: f64, x: f64| -> f64 {
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(tp - 1), (x0 + 1).min(tp - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        (1.0 - fy) * ((1.0 - fx) * s[y0][x0] + fx * s[y0][x1]) + fy * ((1.0 - fx) * s[y1][x0] + fx * s[y1][x1])
    };
    (0..t).map(|i| (0..t).map(|j| sample(src(i), src(j))).collect()).collect()
}

pub struct CtxRef<'a> {
    pub prev: &'a [M],
    pub w_prev: f64,
    pub w_cur: f64,
    pub alpha: f64,
}

/// Returns the block output and per-head pre-mask scores.
pub fn ref_mha(
    model: &Model,
    p: &MhaParams,
    xq: &M,
    xkv: &M,
    prev: Option<&[M]>,
    ctx: Option<CtxRef>,
    mask: Option<&M>,
) -> (M, Vec<M>) {
    let st = &model.store;
    let d_k = p.d_k() as f64;
    let mut heads_out: Vec<M> = Vec::new();
    let mut all_scores = Vec::new();
    for h in 0..p.heads() {
        let q = linear(xq, st.get(p.w_q[h]), None);
        let k = linear(xkv, st.get(p.w_k[h]), None);
        let v = linear(xkv, st.get(p.w_v[h]), None);
        let s = scale(&mm(&q, &transpose(&k)), 1.0 / d_k.sqrt());
        let mut total = s.clone();
        if let Some(prev) = prev {
            total = add(&total, &prev[h]);
        }
        if let Some(c) = &ctx {
            let mix = add(&scale(&c.prev[h], c.w_prev), &scale(&s, c.w_cur));
            total = add(&total, &scale(&mix, c.alpha));
        }
        let masked = match mask {
            Some(m) => add(&total, m),
            None => total.clone(),
        };
        heads_out.push(mm(&softmax(&masked), &v));
        all_scores.push(total);
    }
    let concat: M = (0..xq.len())
        .map(|i| heads_out.iter().flat_map(|h| h[i].clone()).collect())
        .collect();
    (linear(&concat, st.get(p.w_o), None), all_scores)
}

pub fn ref_ffn(model: &Model, p: &ctxf::model::FfnParams, x: &M) -> M {
    let st = &model.store;
    let h = linear(x, st.get(p.w1), Some(st.get(p.b1)));
    let h: M = h.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
    linear(&h, st.get(p.w2), Some(st.get(p.b2)))
}

pub fn ref_encoder(model: &Model, features: &Tensor, prev_state: Option<&ScoreState>) -> (M, Vec<Vec<M>>) {
    let cfg = &model.config;
    let st = &model.store;
    let enc = &model.encoder;
    let t = features.rows();
    let mut x = add(
        &linear(&to_m(features), st.get(enc.w_in), Some(st.get(enc.b_in))),
        &positions(0, t as i64, cfg.d_att),
    );
    let residual = cfg.residual_attention || cfg.context_attention;
    let mut scores: Vec<Vec<M>> = Vec::new();
    for (l, layer) in enc.layers.iter().enumerate() {
        let prev = if residual { scores.last().cloned() } else { None };
        let resampled: Option<Vec<M>> = prev_state
            .filter(|_| cfg.context_attention && (cfg.ctx_layers == CtxLayers::All || l == 0))
            .map(|s| (0..cfg.heads).map(|h| resample(&to_m(&s.head(l, h)), t)).collect());
        let mix = enc.ctx_mix.layers[l];
        let ctx = resampled.as_ref().map(|r| CtxRef {
            prev: r,
            w_prev: st.get(mix.w_prev).data()[0],
            w_cur: st.get(mix.w_cur).data()[0],
            alpha: cfg.alpha,
        });
        let (a, s) = ref_mha(model, &layer.attn, &x, &x, prev.as_deref(), ctx, None);
        let x1 = layer_norm(&add(&x, &a), st.get(layer.ln_attn.gain), st.get(layer.ln_attn.bias));
        let f = ref_ffn(model, &layer.ffn, &x1);
        x = layer_norm(&add(&x1, &f), st.get(layer.ln_ffn.gain), st.get(layer.ln_ffn.bias));
        scores.push(s);
    }
    (x, scores)
}

pub fn embed(model: &Model, tokens: &[u32]) -> M {
    let table = model.store.get(model.decoder.embed);
    tokens.iter().map(|&t| table.row(t as usize).to_vec()).collect()
}

pub fn ref_attn(q: &M, kv: &M) -> M {
    let d = q[0].len() as f64;
    mm(&softmax(&scale(&mm(q, &transpose(kv)), 1.0 / d.sqrt())), kv)
}

pub fn ref_combine(model: &Model, a: &M, b: &M) -> M {
    let st = &model.store;
    let d = b[0].len();
    let mean: Vec<f64> = (0..d).map(|j| b.iter().map(|r| r[j]).sum::<f64>() / b.len() as f64).collect();
    let cat: M = a.iter().map(|r| r.iter().chain(&mean).copied().collect()).collect();
    linear(&cat, st.get(model.decoder.combine_w), Some(st.get(model.decoder.combine_b)))
}

pub fn ref_fold(model: &Model, history: &[Vec<u32>]) -> M {
    let newer = history.get(1).unwrap_or(&history[0]);
    let e_new = embed(model, newer);
    let mut mem = ref_combine(model, &ref_attn(&embed(model, &history[0]), &e_new), &e_new);
    for y in history.iter().skip(2) {
        let e = embed(model, y);
        mem = ref_combine(model, &ref_attn(&mem, &e), &e);
    }
    mem
}

pub fn ref_decoder(model: &Model, targets: &[u32], memory: Option<&M>, enc: &M) -> M {
    let st = &model.store;
    let d = model.config.d_att;
    let t = targets.len();
    let tgt = add(&embed(model, targets), &positions(0, t as i64, d));
    let prefix = memory.map_or(0, |m| m.len());
    let mut x = match memory {
        Some(m) => {
            let mut rows = add(m, &positions(-(prefix as i64), 0, d));
            rows.extend(tgt);
            rows
        }
        None => tgt,
    };
    let n = prefix + t;
    let mask: M = (0..n)
        .map(|i| (0..n).map(|j| if j < prefix || (i >= prefix && j <= i) { 0.0 } else { -1e30 }).collect())
        .collect();
    for layer in &model.decoder.layers {
        let (a, _) = ref_mha(model, &layer.self_attn, &x, &x, None, None, Some(&mask));
        let x1 = layer_norm(&add(&x, &a), st.get(layer.ln_self.gain), st.get(layer.ln_self.bias));
        let (c, _) = ref_mha(model, &layer.cross_attn, &x1, enc, None, None, None);
        let x2 = layer_norm(&add(&x1, &c), st.get(layer.ln_cross.gain), st.get(layer.ln_cross.bias));
        let f = ref_ffn(model, &layer.ffn, &x2);
        x = layer_norm(&add(&x2, &f), st.get(layer.ln_ffn.gain), st.get(layer.ln_ffn.bias));
    }
    let out: M = x[prefix..].to_vec();
    linear(&out, st.get(model.decoder.w_out), Some(st.get(model.decoder.b_out)))
}

pub fn small_config() -> Config {
    let mut cfg = Config::default();
    cfg.set("vocab_size", "9").unwrap();
    cfg.set("keywords", "3").unwrap();
    cfg.set("d_att", "8").unwrap();
    cfg.set("d_ff", "16").unwrap();
    cfg.validate().unwrap();
    cfg
}

/// A model whose every parameter, including mix weights, biases and norm
/// gains, is moved away from its initial value.
pub fn scrambled_model(cfg: &Config, seed: u64) -> Model {
    let mut model = Model::init(&cfg.model, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    model
}

/// Log-probabilities that depend on the whole prefix.
pub fn scripted(prefix: &[u32], vocab: usize) -> Vec<f64> {
    let mut h: u64 = 0xcbf29ce484222325;
    for &t in prefix {
        h = (h ^ t as u64).wrapping_mul(0x100000001b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let logits: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
    log_softmax(&logits)
}

/// Every token sequence up to `max_len` that does not contain the start
/// token, scored the way the search finalizes hypotheses.
pub fn exhaustive_best(vocab: usize, max_len: usize) -> (Vec<u32>, f64, f64, bool) {
    let mut best: Option<(Vec<u32>, f64, f64, bool)> = None;
    let mut stack: Vec<(Vec<u32>, f64)> = vec![(vec![], 0.0)];
    let mut finished_any = false;
    let mut candidates = Vec::new();
    while let Some((seq, lp)) = stack.pop() {
        let mut prefix = vec![SOS];
        prefix.extend(&seq);
        let lps = scripted(&prefix, vocab);
        for tok in 1..vocab as u32 {
            let mut next = seq.clone();
            next.push(tok);
            let l = lp + lps[tok as usize];
            if tok == EOS {
                finished_any = true;
                candidates.push((next, l, true));
            } else if next.len() == max_len {
                candidates.push((next, l, false));
            } else {
                stack.push((next, l));
            }
        }
    }
    for (seq, lp, done) in candidates {
        if finished_any && !done {
            continue;
        }
        let score = lp / seq.len() as f64;
        let better = match &best {
            None => true,
            Some((bs, _, bscore, _)) => score > *bscore || (score == *bscore && seq < *bs),
        };
        if better {
            best = Some((seq, lp, score, !done));
        }
    }
    let (mut seq, lp, score, truncated) = best.unwrap();
    if !truncated {
        seq.pop();
    }
    (seq, lp, score, truncated)
}
