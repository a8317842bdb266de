//! Synthetic dialogues where some labels are only predictable from earlier
//! utterances, plus the accuracy and error-rate scoring used to measure it.
//!
//! Token layout: `0` start, `1` end, `2..2+k` topic keywords, the rest
//! filler. Each conversation draws one keyword. The first utterance states
//! it in its features; later utterances carry ambiguous positions whose
//! label is the keyword but whose frames only show a shared ambiguous
//! symbol.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::config::{KeywordPlacement, TaskSpec};
use crate::conversation::{Conversation, Utterance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// First keyword token id.
pub const FIRST_KEYWORD: u32 = 2;

const SPEAKERS: [&str; 2] = ["A", "B"];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Conversation>,
    /// Model selection split, the same size as `heldout`.
    pub valid: Vec<Conversation>,
    pub heldout: Vec<Conversation>,
}

pub fn keyword_tokens(spec: &TaskSpec) -> std::ops::Range<u32> {
    FIRST_KEYWORD..FIRST_KEYWORD + spec.keywords as u32
}

pub fn filler_tokens(spec: &TaskSpec) -> std::ops::Range<u32> {
    FIRST_KEYWORD + spec.keywords as u32..spec.vocab_size as u32
}

/// Index of the ambiguous symbol in a feature frame.
pub fn ambiguous_symbol(spec: &TaskSpec) -> usize {
    spec.vocab_size
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Frames for a symbol sequence: one-hot plus Gaussian noise, rounded to
/// fp32 so the values survive the dataset file unchanged.
fn frames(spec: &TaskSpec, symbols: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
    let dim = spec.feature_dim();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(symbols.len() * spec.frames_per_token * dim);
    for &s in symbols {
        for _ in 0..spec.frames_per_token {
            for j in 0..dim {
                let base = if j == s { 1.0 } else { 0.0 };
                let v = if spec.noise > 0.0 { base + noise.sample(rng) } else { base };
                data.push(v as f32 as f64);
            }
        }
    }
    Tensor::new(vec![symbols.len() * spec.frames_per_token, dim], data)
}

fn generate_conversation(spec: &TaskSpec, id: String, seed: u64) -> Result<Conversation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keyword = FIRST_KEYWORD + rng.gen_range(0..spec.keywords as u32);
    let fillers = filler_tokens(spec);
    let mut utterances = Vec::with_capacity(spec.utterances_per_conversation);
    for m in 0..spec.utterances_per_conversation {
        let speaker = SPEAKERS[m % 2];
        let len = rng.gen_range(spec.min_tokens..=spec.max_tokens);
        let mut transcript = Vec::with_capacity(len);
        let mut ambiguous = Vec::with_capacity(len);
        let mut symbols = Vec::with_capacity(len);
        let keyword_at = (m == 0).then(|| rng.gen_range(0..len));
        let may_be_ambiguous = m > 0
            && match spec.keyword_placement {
                KeywordPlacement::AnySpeaker => true,
                KeywordPlacement::OtherSpeaker => speaker != SPEAKERS[0],
            };
        for pos in 0..len {
            if keyword_at == Some(pos) {
                transcript.push(keyword);
                ambiguous.push(false);
                symbols.push(keyword as usize);
            } else if may_be_ambiguous && rng.gen_bool(spec.ambiguity_rate) {
                transcript.push(keyword);
                ambiguous.push(true);
                symbols.push(ambiguous_symbol(spec));
            } else {
                let t = rng.gen_range(fillers.clone());
                transcript.push(t);
                ambiguous.push(false);
                symbols.push(t as usize);
            }
        }
        utterances.push(Utterance {
            id: format!("{id}-u{m}"),
            conversation_id: id.clone(),
            speaker: speaker.to_string(),
            time_index: m as u32,
            features: frames(spec, &symbols, &mut rng)?,
            transcript,
            ambiguous,
        });
    }
    Conversation::new(id, utterances)
}

/// `count` conversations; conversation `i` depends only on `(seed, i)`.
pub fn generate(spec: &TaskSpec, count: usize, seed: u64, prefix: &str) -> Result<Vec<Conversation>> {
    spec.validate()?;
    (0..count)
        .map(|i| generate_conversation(spec, format!("{prefix}{i:05}"), mix_seed(seed, i as u64)))
        .collect()
}

/// Training, validation and held-out splits drawn from independent streams
/// of `spec.seed`.
pub fn generate_dataset(spec: &TaskSpec) -> Result<Dataset> {
    Ok(Dataset {
        train: generate(spec, spec.train_conversations, mix_seed(spec.seed, 1), "train")?,
        valid: generate(spec, spec.heldout_conversations, mix_seed(spec.seed, 3), "valid")?,
        heldout: generate(spec, spec.heldout_conversations, mix_seed(spec.seed, 2), "heldout")?,
    })
}

/// How predictions are matched to references.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Framing {
    /// Predictions must have the reference length.
    Classification,
    /// Free-length hypotheses; positions are compared where both exist.
    Decoded,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConversationScore {
    pub conversation_id: String,
    pub correct: usize,
    pub tokens: usize,
    pub ambiguous_correct: usize,
    pub ambiguous_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scores {
    pub token_accuracy: f64,
    /// `None` when the references contain no ambiguous positions.
    pub ambiguous_accuracy: Option<f64>,
    /// Edit distance over reference length.
    pub error_rate: f64,
    pub tokens: usize,
    pub ambiguous_tokens: usize,
    pub per_conversation: Vec<ConversationScore>,
}

pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Scores `predictions[c][u]` against utterance `u` of conversation `c`.
pub fn score(predictions: &[Vec<Vec<u32>>], data: &[Conversation], framing: Framing) -> Result<Scores> {
    if predictions.len() != data.len() {
        return Err(Error::Contract(format!(
            "{} prediction groups for {} conversations",
            predictions.len(),
            data.len()
        )));
    }
    let mut per_conversation = Vec::with_capacity(data.len());
    let (mut edits, mut ref_tokens) = (0usize, 0usize);
    for (preds, conv) in predictions.iter().zip(data) {
        if preds.len() != conv.utterances.len() {
            return Err(Error::Contract(format!(
                "conversation {}: {} predictions for {} utterances",
                conv.id,
                preds.len(),
                conv.utterances.len()
            )));
        }
        let mut cs = ConversationScore {
            conversation_id: conv.id.clone(),
            correct: 0,
            tokens: 0,
            ambiguous_correct: 0,
            ambiguous_tokens: 0,
        };
        for (pred, utt) in preds.iter().zip(&conv.utterances) {
            if framing == Framing::Classification && pred.len() != utt.transcript.len() {
                return Err(Error::Contract(format!(
                    "utterance {}: {} predictions for {} tokens",
                    utt.id,
                    pred.len(),
                    utt.transcript.len()
                )));
            }
            for (pos, (&want, &amb)) in utt.transcript.iter().zip(&utt.ambiguous).enumerate() {
                let hit = pred.get(pos) == Some(&want);
                cs.tokens += 1;
                cs.correct += usize::from(hit);
                if amb {
                    cs.ambiguous_tokens += 1;
                    cs.ambiguous_correct += usize::from(hit);
                }
            }
            edits += edit_distance(pred, &utt.transcript);
            ref_tokens += utt.transcript.len();
        }
        per_conversation.push(cs);
    }
    let sum = |f: fn(&ConversationScore) -> usize| per_conversation.iter().map(f).sum::<usize>();
    let (correct, tokens) = (sum(|c| c.correct), sum(|c| c.tokens));
    let (amb_correct, amb_tokens) = (sum(|c| c.ambiguous_correct), sum(|c| c.ambiguous_tokens));
    Ok(Scores {
        token_accuracy: if tokens == 0 { 0.0 } else { correct as f64 / tokens as f64 },
        ambiguous_accuracy: (amb_tokens > 0).then(|| amb_correct as f64 / amb_tokens as f64),
        error_rate: if ref_tokens == 0 { 0.0 } else { edits as f64 / ref_tokens as f64 },
        tokens,
        ambiguous_tokens: amb_tokens,
        per_conversation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    fn small_spec() -> TaskSpec {
        let mut spec = Config::default().task;
        spec.train_conversations = 20;
        spec.heldout_conversations = 5;
        spec
    }

    #[test]
    fn edit_distance_basics() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[], &[1, 2]), 2);
        assert_eq!(edit_distance(&[1, 3], &[1, 2, 3]), 1);
        assert_eq!(edit_distance(&[4, 5], &[5, 4]), 2);
    }

    #[test]
    fn deterministic_by_seed() {
        let spec = small_spec();
        assert_eq!(generate_dataset(&spec).unwrap(), generate_dataset(&spec).unwrap());
        let mut other = spec.clone();
        other.seed += 1;
        assert_ne!(generate_dataset(&spec).unwrap().train, generate_dataset(&other).unwrap().train);
    }

    #[test]
    fn too_many_keywords_is_a_config_error() {
        let mut spec = small_spec();
        spec.keywords = spec.vocab_size + 1;
        assert!(matches!(generate(&spec, 1, 0, "x"), Err(Error::Config(_))));
    }

    #[test]
    fn first_utterance_states_the_keyword() {
        let spec = small_spec();
        for conv in generate(&spec, 30, 3, "c").unwrap() {
            let first = &conv.utterances[0];
            assert!(first.ambiguous.iter().all(|&a| !a));
            let kws: Vec<u32> = first
                .transcript
                .iter()
                .copied()
                .filter(|t| keyword_tokens(&spec).contains(t))
                .collect();
            assert_eq!(kws.len(), 1);
            for u in &conv.utterances[1..] {
                for (t, &a) in u.transcript.iter().zip(&u.ambiguous) {
                    assert_eq!(a, *t == kws[0]);
                }
            }
        }
    }

    #[test]
    fn other_speaker_placement() {
        let mut spec = small_spec();
        spec.keyword_placement = KeywordPlacement::OtherSpeaker;
        spec.ambiguity_rate = 0.9;
        for conv in generate(&spec, 20, 4, "c").unwrap() {
            for u in &conv.utterances {
                if u.speaker == conv.utterances[0].speaker {
                    assert!(u.ambiguous.iter().all(|&a| !a));
                }
            }
        }
    }

    #[test]
    fn classification_length_mismatch() {
        let spec = small_spec();
        let data = generate(&spec, 1, 0, "c").unwrap();
        let preds = vec![data[0].utterances.iter().map(|_| vec![]).collect::<Vec<_>>()];
        assert!(score(&preds, &data, Framing::Classification).is_err());
        let s = score(&preds, &data, Framing::Decoded).unwrap();
        assert_eq!(s.token_accuracy, 0.0);
        assert_eq!(s.error_rate, 1.0);
    }
}
