//! Length-normalized beam search.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::decoder::{decode_forward, ContextMemory};
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::model::{Model, EOS, SOS};
use crate::params::Graph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated tokens without the end token.
    pub tokens: Vec<u32>,
    /// Summed log-probability, including the end token when present.
    pub log_prob: f64,
    /// `log_prob` divided by the number of generated steps.
    pub score: f64,
    /// Set when decoding stopped at the length limit without an end token.
    pub truncated: bool,
}

/// Log-softmax of one logit row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

#[derive(Debug, Clone)]
struct Partial {
    tokens: Vec<u32>,
    log_prob: f64,
}

fn normalized(p: &Partial) -> f64 {
    p.log_prob / p.tokens.len() as f64
}

fn rank(a: &Partial, b: &Partial) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn rank_normalized(a: &Partial, b: &Partial) -> Ordering {
    normalized(b)
        .partial_cmp(&normalized(a))
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn finish(p: Partial, truncated: bool) -> Hypothesis {
    let score = normalized(&p);
    let mut tokens = p.tokens;
    if !truncated {
        tokens.pop();
    }
    Hypothesis {
        tokens,
        log_prob: p.log_prob,
        score,
        truncated,
    }
}

/// Beam search over a next-token log-probability function.
///
/// `step(prefix)` receives the start token followed by the tokens generated
/// so far and returns log-probabilities over the vocabulary. The start token
/// is never generated. At each step the `beam` best expansions by summed
/// log-probability are kept; those ending in the end token are finished.
/// The result is the finished hypothesis with the best length-normalized
/// score, or the best truncated one when none finished.
pub fn beam_search<F>(mut step: F, beam: usize, max_len: usize) -> Result<Hypothesis>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    if beam == 0 || max_len == 0 {
        return Err(Error::Contract("beam and max_len must be positive".into()));
    }
    let mut live = vec![Partial {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Partial> = Vec::new();
    for _ in 0..max_len {
        let mut candidates = Vec::with_capacity(live.len() * 8);
        for p in &live {
            let mut prefix = Vec::with_capacity(p.tokens.len() + 1);
            prefix.push(SOS);
            prefix.extend_from_slice(&p.tokens);
            let lp = step(&prefix)?;
            for (tok, &l) in lp.iter().enumerate() {
                if tok as u32 == SOS || !l.is_finite() {
                    continue;
                }
                let mut tokens = p.tokens.clone();
                tokens.push(tok as u32);
                candidates.push(Partial {
                    tokens,
                    log_prob: p.log_prob + l,
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(beam);
        live.clear();
        for c in candidates {
            if c.tokens.last() == Some(&EOS) {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    if !finished.is_empty() {
        finished.sort_by(rank_normalized);
        return Ok(finish(finished.swap_remove(0), false));
    }
    live.sort_by(rank_normalized);
    live.into_iter()
        .next()
        .map(|p| finish(p, true))
        .ok_or_else(|| Error::Numeric("beam search produced no hypothesis".into()))
}

/// Decodes one utterance from its encoder output and optional context memory.
pub fn beam_decode(
    model: &Model,
    enc: &EncoderOutput,
    memory: Option<&ContextMemory>,
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    beam_search(
        |prefix| {
            let mut g = Graph::inference(&model.store);
            let hidden = g.constant(enc.hidden.clone());
            let mem = memory.map(|m| g.constant(m.vectors.clone()));
            let fwd = decode_forward(&mut g, model, prefix, mem, hidden)?;
            let logits = g.value(fwd.logits);
            Ok(log_softmax(logits.row(logits.rows() - 1)))
        },
        beam,
        max_len,
    )
}
