//! Flat `key = value` configuration covering the model, the synthetic task
//! and training. Every key has a default; unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which earlier utterances may serve as context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HistoryPolicy {
    /// Any speaker.
    SpeakerIndependent,
    /// Only the current utterance's speaker.
    SpeakerDependent,
}

impl FromStr for HistoryPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "si" => Ok(Self::SpeakerIndependent),
            "sd" => Ok(Self::SpeakerDependent),
            _ => Err(Error::Config(format!("history_policy must be si or sd, got {s}"))),
        }
    }
}

impl fmt::Display for HistoryPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SpeakerIndependent => "si",
            Self::SpeakerDependent => "sd",
        })
    }
}

/// How the first utterance of a conversation gets its decoder history at
/// decode time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstUtteranceDecode {
    /// Decode once with start-token history, then again with that
    /// hypothesis repeated as history.
    TwoPass,
    /// Decode once with start-token history.
    SinglePass,
}

impl FromStr for FirstUtteranceDecode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_pass" => Ok(Self::TwoPass),
            "single_pass" => Ok(Self::SinglePass),
            _ => Err(Error::Config(format!(
                "first_utterance_decode must be two_pass or single_pass, got {s}"
            ))),
        }
    }
}

impl fmt::Display for FirstUtteranceDecode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TwoPass => "two_pass",
            Self::SinglePass => "single_pass",
        })
    }
}

/// Stand-in decoder history for a first utterance during training and
/// validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstUtteranceTrain {
    /// The utterance's own reference transcript, repeated.
    Reference,
    /// The start token alone, repeated, as in the first decoding pass.
    StartToken,
}

impl FromStr for FirstUtteranceTrain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Self::Reference),
            "start_token" => Ok(Self::StartToken),
            _ => Err(Error::Config(format!(
                "first_utterance_train must be reference or start_token, got {s}"
            ))),
        }
    }
}

impl fmt::Display for FirstUtteranceTrain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Reference => "reference",
            Self::StartToken => "start_token",
        })
    }
}

/// Encoder layers that receive the cross-utterance score term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtxLayers {
    All,
    First,
}

impl FromStr for CtxLayers {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "first" => Ok(Self::First),
            _ => Err(Error::Config(format!("ctx_layers must be all or first, got {s}"))),
        }
    }
}

impl fmt::Display for CtxLayers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::All => "all",
            Self::First => "first",
        })
    }
}

/// Where ambiguous (context-only) positions are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeywordPlacement {
    /// Every utterance after the first may contain ambiguous positions.
    AnySpeaker,
    /// Only utterances by a speaker other than the one who stated the keyword.
    OtherSpeaker,
}

impl FromStr for KeywordPlacement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "any" => Ok(Self::AnySpeaker),
            "other" => Ok(Self::OtherSpeaker),
            _ => Err(Error::Config(format!(
                "keyword_placement must be any or other, got {s}"
            ))),
        }
    }
}

impl fmt::Display for KeywordPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AnySpeaker => "any",
            Self::OtherSpeaker => "other",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_in: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_att: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub residual_attention: bool,
    pub context_attention: bool,
    pub ctx_layers: CtxLayers,
    pub alpha: f64,
    /// Number of previous transcripts folded into the decoder context; 0 disables it.
    pub decoder_history: usize,
    pub history_policy: HistoryPolicy,
    pub first_utterance_decode: FirstUtteranceDecode,
    pub first_utterance_train: FirstUtteranceTrain,
}

impl ModelConfig {
    /// Residual score chaining is implied by the context-aware variant.
    pub fn uses_residual(&self) -> bool {
        self.residual_attention || self.context_attention
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 3 {
            return bad(format!("vocab_size must be at least 3, got {}", self.vocab_size));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("enc_layers and dec_layers must be positive".into());
        }
        if self.heads == 0 || self.d_att % self.heads != 0 {
            return bad(format!(
                "d_att = {} must be divisible by heads = {}",
                self.d_att, self.heads
            ));
        }
        if self.d_att < 2 {
            return bad("d_att must be at least 2".into());
        }
        if self.d_ff < self.d_att {
            return bad(format!("d_ff = {} must be >= d_att = {}", self.d_ff, self.d_att));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub vocab_size: usize,
    pub keywords: usize,
    pub utterances_per_conversation: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub ambiguity_rate: f64,
    pub noise: f64,
    pub frames_per_token: usize,
    pub train_conversations: usize,
    pub heldout_conversations: usize,
    pub keyword_placement: KeywordPlacement,
    pub seed: u64,
}

impl TaskSpec {
    /// Feature dimension: one slot per token id plus the ambiguous symbol.
    pub fn feature_dim(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.keywords < 2 {
            return bad(format!("keywords must be at least 2, got {}", self.keywords));
        }
        if self.keywords > self.vocab_size {
            return bad(format!(
                "keywords = {} exceeds vocab_size = {}",
                self.keywords, self.vocab_size
            ));
        }
        if self.vocab_size < self.keywords + 3 {
            return bad(format!(
                "vocab_size = {} leaves no filler tokens next to 2 specials and {} keywords",
                self.vocab_size, self.keywords
            ));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) {
            return bad(format!("ambiguity_rate must lie in [0, 1], got {}", self.ambiguity_rate));
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad(format!(
                "token length range {}..={} is empty",
                self.min_tokens, self.max_tokens
            ));
        }
        if self.utterances_per_conversation == 0 || self.frames_per_token == 0 {
            return bad("utterances_per_conversation and frames_per_token must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub beam: usize,
    pub max_decode_len: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0".into());
        }
        if self.beam == 0 || self.max_decode_len == 0 {
            return bad("beam and max_decode_len must be positive".into());
        }
        Ok(())
    }
}

/// The complete resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        let vocab_size = 20;
        Self {
            model: ModelConfig {
                vocab_size,
                d_in: vocab_size + 1,
                enc_layers: 2,
                dec_layers: 2,
                d_att: 32,
                heads: 2,
                d_ff: 64,
                dropout: 0.0,
                residual_attention: true,
                context_attention: true,
                ctx_layers: CtxLayers::All,
                alpha: 0.1,
                decoder_history: 2,
                history_policy: HistoryPolicy::SpeakerIndependent,
                first_utterance_decode: FirstUtteranceDecode::TwoPass,
                first_utterance_train: FirstUtteranceTrain::StartToken,
            },
            task: TaskSpec {
                vocab_size,
                keywords: 4,
                utterances_per_conversation: 4,
                min_tokens: 6,
                max_tokens: 12,
                ambiguity_rate: 0.3,
                noise: 0.1,
                frames_per_token: 2,
                train_conversations: 2000,
                heldout_conversations: 200,
                keyword_placement: KeywordPlacement::AnySpeaker,
                seed: 7,
            },
            train: TrainConfig {
                epochs: 20,
                batch_size: 16,
                learning_rate: 2e-3,
                warmup_steps: 200,
                adam_beta1: 0.9,
                adam_beta2: 0.98,
                adam_eps: 1e-9,
                label_smoothing: 0.1,
                grad_clip: 0.0,
                seed: 1,
                beam: 1,
                max_decode_len: 16,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {value:?}")))
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.task;
        let tr = &mut self.train;
        match key {
            "vocab_size" => {
                let v: usize = parse(key, value)?;
                m.vocab_size = v;
                m.d_in = v + 1;
                t.vocab_size = v;
            }
            "enc_layers" => m.enc_layers = parse(key, value)?,
            "dec_layers" => m.dec_layers = parse(key, value)?,
            "d_att" => m.d_att = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "d_ff" => m.d_ff = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "residual_attention" => m.residual_attention = parse(key, value)?,
            "context_attention" => m.context_attention = parse(key, value)?,
            "ctx_layers" => m.ctx_layers = value.parse()?,
            "alpha" => m.alpha = parse(key, value)?,
            "decoder_history" => m.decoder_history = parse(key, value)?,
            "history_policy" => m.history_policy = value.parse()?,
            "first_utterance_decode" => m.first_utterance_decode = value.parse()?,
            "first_utterance_train" => m.first_utterance_train = value.parse()?,
            "keywords" => t.keywords = parse(key, value)?,
            "utterances_per_conversation" => t.utterances_per_conversation = parse(key, value)?,
            "min_tokens" => t.min_tokens = parse(key, value)?,
            "max_tokens" => t.max_tokens = parse(key, value)?,
            "ambiguity_rate" => t.ambiguity_rate = parse(key, value)?,
            "noise" => t.noise = parse(key, value)?,
            "frames_per_token" => t.frames_per_token = parse(key, value)?,
            "train_conversations" => t.train_conversations = parse(key, value)?,
            "heldout_conversations" => t.heldout_conversations = parse(key, value)?,
            "keyword_placement" => t.keyword_placement = value.parse()?,
            "data_seed" => t.seed = parse(key, value)?,
            "epochs" => tr.epochs = parse(key, value)?,
            "batch_size" => tr.batch_size = parse(key, value)?,
            "learning_rate" => tr.learning_rate = parse(key, value)?,
            "warmup_steps" => tr.warmup_steps = parse(key, value)?,
            "adam_beta1" => tr.adam_beta1 = parse(key, value)?,
            "adam_beta2" => tr.adam_beta2 = parse(key, value)?,
            "adam_eps" => tr.adam_eps = parse(key, value)?,
            "label_smoothing" => tr.label_smoothing = parse(key, value)?,
            "grad_clip" => tr.grad_clip = parse(key, value)?,
            "seed" => tr.seed = parse(key, value)?,
            "beam" => tr.beam = parse(key, value)?,
            "max_decode_len" => tr.max_decode_len = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t, tr) = (&self.model, &self.task, &self.train);
        vec![
            ("vocab_size", m.vocab_size.to_string()),
            ("enc_layers", m.enc_layers.to_string()),
            ("dec_layers", m.dec_layers.to_string()),
            ("d_att", m.d_att.to_string()),
            ("heads", m.heads.to_string()),
            ("d_ff", m.d_ff.to_string()),
            ("dropout", m.dropout.to_string()),
            ("residual_attention", m.residual_attention.to_string()),
            ("context_attention", m.context_attention.to_string()),
            ("ctx_layers", m.ctx_layers.to_string()),
            ("alpha", m.alpha.to_string()),
            ("decoder_history", m.decoder_history.to_string()),
            ("history_policy", m.history_policy.to_string()),
            ("first_utterance_decode", m.first_utterance_decode.to_string()),
            ("first_utterance_train", m.first_utterance_train.to_string()),
            ("keywords", t.keywords.to_string()),
            ("utterances_per_conversation", t.utterances_per_conversation.to_string()),
            ("min_tokens", t.min_tokens.to_string()),
            ("max_tokens", t.max_tokens.to_string()),
            ("ambiguity_rate", t.ambiguity_rate.to_string()),
            ("noise", t.noise.to_string()),
            ("frames_per_token", t.frames_per_token.to_string()),
            ("train_conversations", t.train_conversations.to_string()),
            ("heldout_conversations", t.heldout_conversations.to_string()),
            ("keyword_placement", t.keyword_placement.to_string()),
            ("data_seed", t.seed.to_string()),
            ("epochs", tr.epochs.to_string()),
            ("batch_size", tr.batch_size.to_string()),
            ("learning_rate", tr.learning_rate.to_string()),
            ("warmup_steps", tr.warmup_steps.to_string()),
            ("adam_beta1", tr.adam_beta1.to_string()),
            ("adam_beta2", tr.adam_beta2.to_string()),
            ("adam_eps", tr.adam_eps.to_string()),
            ("label_smoothing", tr.label_smoothing.to_string()),
            ("grad_clip", tr.grad_clip.to_string()),
            ("seed", tr.seed.to_string()),
            ("beam", tr.beam.to_string()),
            ("max_decode_len", tr.max_decode_len.to_string()),
        ]
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        if self.model.d_in != self.task.feature_dim() || self.model.vocab_size != self.task.vocab_size {
            return Err(Error::Config("model and task vocabularies disagree".into()));
        }
        Ok(())
    }
}
