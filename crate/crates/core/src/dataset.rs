//! Line-delimited JSON files: one conversation per line with fp32 feature
//! blobs in base64, and one hypothesis per line for decoder output.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::conversation::{Conversation, Utterance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct UtteranceRecord {
    utterance_id: String,
    speaker_id: String,
    time_index: u32,
    tokens: Vec<u32>,
    #[serde(default)]
    ambiguous: Vec<bool>,
    frames: usize,
    dim: usize,
    /// Little-endian fp32, row-major.
    features: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConversationRecord {
    conversation_id: String,
    utterances: Vec<UtteranceRecord>,
}

fn encode_features(t: &Tensor) -> String {
    let bytes: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode_features(blob: &str, frames: usize, dim: usize) -> Result<Tensor> {
    let bytes = STANDARD
        .decode(blob)
        .map_err(|e| Error::Format(format!("feature blob: {e}")))?;
    if bytes.len() != frames * dim * 4 {
        return Err(Error::Format(format!(
            "feature blob holds {} bytes, expected {frames}x{dim} fp32",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(vec![frames, dim], data)
}

fn to_record(conv: &Conversation) -> ConversationRecord {
    ConversationRecord {
        conversation_id: conv.id.clone(),
        utterances: conv
            .utterances
            .iter()
            .map(|u| UtteranceRecord {
                utterance_id: u.id.clone(),
                speaker_id: u.speaker.clone(),
                time_index: u.time_index,
                tokens: u.transcript.clone(),
                ambiguous: u.ambiguous.clone(),
                frames: u.features.rows(),
                dim: u.features.cols(),
                features: encode_features(&u.features),
            })
            .collect(),
    }
}

fn from_record(rec: ConversationRecord) -> Result<Conversation> {
    let utterances = rec
        .utterances
        .into_iter()
        .map(|u| {
            let ambiguous = if u.ambiguous.is_empty() {
                vec![false; u.tokens.len()]
            } else {
                u.ambiguous
            };
            Ok(Utterance {
                features: decode_features(&u.features, u.frames, u.dim)?,
                id: u.utterance_id,
                conversation_id: rec.conversation_id.clone(),
                speaker: u.speaker_id,
                time_index: u.time_index,
                transcript: u.tokens,
                ambiguous,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Conversation::new(rec.conversation_id, utterances)
}

fn json_err(line: usize, e: serde_json::Error) -> Error {
    Error::Format(format!("line {line}: {e}"))
}

pub fn write_conversations(path: &Path, data: &[Conversation]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for conv in data {
        serde_json::to_writer(&mut out, &to_record(conv)).map_err(|e| json_err(0, e))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_conversations(path: &Path) -> Result<Vec<Conversation>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut data = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ConversationRecord = serde_json::from_str(&line).map_err(|e| json_err(i + 1, e))?;
        data.push(from_record(rec)?);
    }
    Ok(data)
}

/// One decoded utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub conversation_id: String,
    pub utterance_id: String,
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub score: f64,
    pub truncated: bool,
}

pub fn write_hypotheses(path: &Path, records: &[HypothesisRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| json_err(0, e))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_hypotheses(path: &Path) -> Result<Vec<HypothesisRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line).map_err(|e| json_err(i + 1, e))?);
        }
    }
    Ok(records)
}

/// Arranges hypotheses as `[conversation][utterance]` token lists aligned
/// with `data`. Every utterance must have exactly one hypothesis.
pub fn align_hypotheses(records: &[HypothesisRecord], data: &[Conversation]) -> Result<Vec<Vec<Vec<u32>>>> {
    let mut by_id = std::collections::HashMap::with_capacity(records.len());
    for r in records {
        if by_id.insert(r.utterance_id.as_str(), &r.tokens).is_some() {
            return Err(Error::Contract(format!("duplicate hypothesis for {}", r.utterance_id)));
        }
    }
    let aligned = data
        .iter()
        .map(|conv| {
            conv.utterances
                .iter()
                .map(|u| {
                    by_id
                        .get(u.id.as_str())
                        .map(|t| t.to_vec())
                        .ok_or_else(|| Error::Contract(format!("no hypothesis for utterance {}", u.id)))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    if by_id.len() != data.iter().map(|c| c.utterances.len()).sum::<usize>() {
        return Err(Error::Contract("hypotheses name utterances outside the dataset".into()));
    }
    Ok(aligned)
}
