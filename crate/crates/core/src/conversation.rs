//! Conversation bookkeeping: history selection, first-utterance bootstrap
//! and the shuffled training schedule with precomputed history bindings.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::HistoryPolicy;
use crate::error::{Error, Result};
use crate::model::SOS;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub conversation_id: String,
    pub speaker: String,
    pub time_index: u32,
    /// `[T × d_in]` feature frames.
    pub features: Tensor,
    pub transcript: Vec<u32>,
    /// Positions whose label is only recoverable from earlier utterances.
    pub ambiguous: Vec<bool>,
}

/// Utterances ordered by `time_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    /// Sorts by time and checks that time indices are unique and that every
    /// utterance names this conversation.
    pub fn new(id: impl Into<String>, mut utterances: Vec<Utterance>) -> Result<Self> {
        let id = id.into();
        utterances.sort_by_key(|u| u.time_index);
        for w in utterances.windows(2) {
            if w[0].time_index == w[1].time_index {
                return Err(Error::Contract(format!(
                    "conversation {id}: duplicate time_index {}",
                    w[0].time_index
                )));
            }
        }
        if let Some(u) = utterances.iter().find(|u| u.conversation_id != id) {
            return Err(Error::Contract(format!(
                "utterance {} belongs to {}, not {id}",
                u.id, u.conversation_id
            )));
        }
        if let Some(u) = utterances.iter().find(|u| u.ambiguous.len() != u.transcript.len()) {
            return Err(Error::Contract(format!(
                "utterance {}: ambiguity mask length differs from transcript",
                u.id
            )));
        }
        Ok(Self { id, utterances })
    }
}

/// Position of an utterance inside a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UttRef {
    pub conversation: usize,
    pub utterance: usize,
}

impl UttRef {
    pub fn get<'a>(&self, data: &'a [Conversation]) -> &'a Utterance {
        &data[self.conversation].utterances[self.utterance]
    }
}

/// Up to `n` utterances before `position`, oldest first. Speaker-dependent
/// selection keeps only utterances by the same speaker.
pub fn select_history(conv: &Conversation, position: usize, n: usize, policy: HistoryPolicy) -> Vec<usize> {
    let speaker = &conv.utterances[position].speaker;
    let mut picked: Vec<usize> = (0..position)
        .rev()
        .filter(|&i| match policy {
            HistoryPolicy::SpeakerIndependent => true,
            HistoryPolicy::SpeakerDependent => &conv.utterances[i].speaker == speaker,
        })
        .take(n)
        .collect();
    picked.reverse();
    picked
}

/// Context references of one utterance under one policy.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HistoryEntry {
    /// Decoder history, oldest first, at most `n` entries.
    pub decoder: Vec<usize>,
    /// The single utterance whose encoder scores feed this one.
    pub encoder: Option<usize>,
}

/// Precomputed history references for every utterance under both policies.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryIndex {
    n: usize,
    si: Vec<Vec<HistoryEntry>>,
    sd: Vec<Vec<HistoryEntry>>,
}

impl HistoryIndex {
    pub fn build(data: &[Conversation], n: usize) -> Self {
        let build_for = |policy| {
            data.iter()
                .map(|conv| {
                    (0..conv.utterances.len())
                        .map(|pos| HistoryEntry {
                            decoder: select_history(conv, pos, n, policy),
                            encoder: select_history(conv, pos, 1, policy).pop(),
                        })
                        .collect()
                })
                .collect()
        };
        Self {
            n,
            si: build_for(HistoryPolicy::SpeakerIndependent),
            sd: build_for(HistoryPolicy::SpeakerDependent),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, at: UttRef, policy: HistoryPolicy) -> &HistoryEntry {
        let table = match policy {
            HistoryPolicy::SpeakerIndependent => &self.si,
            HistoryPolicy::SpeakerDependent => &self.sd,
        };
        &table[at.conversation][at.utterance]
    }
}

/// Stand-in history for an utterance that has none.
#[derive(Debug, Clone, Copy)]
pub enum Bootstrap<'a> {
    /// The utterance's own reference transcript.
    Reference,
    /// The start token alone.
    StartToken,
    /// Decoding with a first-pass hypothesis.
    Hypothesis(&'a [u32]),
}

/// `n` copies of the stand-in transcript selected by `mode`.
pub fn bootstrap_history(transcript: &[u32], n: usize, mode: Bootstrap) -> Vec<Vec<u32>> {
    let base = match mode {
        Bootstrap::Reference => transcript,
        Bootstrap::StartToken => &[SOS][..],
        Bootstrap::Hypothesis(h) => h,
    };
    vec![non_empty(base); n]
}

/// Empty transcripts enter the context fold as the start token.
pub fn non_empty(tokens: &[u32]) -> Vec<u32> {
    if tokens.is_empty() {
        vec![SOS]
    } else {
        tokens.to_vec()
    }
}

/// Left-pads a short, non-empty history by repeating its oldest entry.
pub fn pad_history(mut history: Vec<Vec<u32>>, n: usize) -> Vec<Vec<u32>> {
    if let Some(oldest) = history.first().cloned() {
        while history.len() < n {
            history.insert(0, oldest.clone());
        }
    }
    history
}

/// One training visit with its time-correct context.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScheduleItem {
    pub item: UttRef,
    pub decoder_history: Vec<UttRef>,
    pub encoder_context: Option<UttRef>,
}

/// Every utterance in time order with its history bindings.
pub fn time_ordered_schedule(data: &[Conversation], index: &HistoryIndex, policy: HistoryPolicy) -> Vec<ScheduleItem> {
    let mut items = Vec::new();
    for (c, conv) in data.iter().enumerate() {
        for u in 0..conv.utterances.len() {
            let at = UttRef {
                conversation: c,
                utterance: u,
            };
            let entry = index.get(at, policy);
            let to_ref = |i: usize| UttRef {
                conversation: c,
                utterance: i,
            };
            items.push(ScheduleItem {
                item: at,
                decoder_history: entry.decoder.iter().map(|&i| to_ref(i)).collect(),
                encoder_context: entry.encoder.map(to_ref),
            });
        }
    }
    items
}

/// The time-ordered schedule permuted by a seeded shuffle. Bindings travel
/// with their items, so visit order never changes what context is used.
pub fn shuffle_schedule(
    data: &[Conversation],
    index: &HistoryIndex,
    policy: HistoryPolicy,
    seed: u64,
) -> Vec<ScheduleItem> {
    let mut items = time_ordered_schedule(data, index, policy);
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    items
}
