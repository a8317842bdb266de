//! Teacher-forced training with Adam, the sequential decoding pipeline and
//! the ablation runner.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::ScoreState;
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{Config, FirstUtteranceDecode, FirstUtteranceTrain, ModelConfig, TrainConfig};
use crate::conversation::{
    bootstrap_history, non_empty, pad_history, select_history, shuffle_schedule, time_ordered_schedule, Bootstrap,
    Conversation, HistoryIndex, ScheduleItem, UttRef, Utterance,
};
use crate::dataset::HypothesisRecord;
use crate::decoder::{context_fold, decode_forward, fold_memory};
use crate::encoder::{encode_on_graph, encode_utterance, EncoderOutput};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check_piecewise, GradCheckReport, Stencil};
use crate::model::{Model, EOS, SOS};
use crate::params::{Gradients, Graph, ParamStore};
use crate::search::{beam_decode, Hypothesis};
use crate::synthetic::{generate, mix_seed, score, Dataset, Framing, Scores};
use crate::tape::Var;

/// `lr · min(step / warmup, sqrt(warmup / step))` for `step ≥ 1`, so the
/// peak `lr` is reached at the end of warmup. Without warmup the rate is
/// constant.
pub fn scheduled_lr(lr: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 {
        return lr;
    }
    let (s, w) = (step.max(1) as f64, warmup as f64);
    lr * (s / w).min((w / s).sqrt())
}

pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
    cfg: TrainConfig,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            cfg: cfg.clone(),
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Applies one update and returns the learning rate used.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> f64 {
        self.step += 1;
        let c = &self.cfg;
        let lr = scheduled_lr(c.learning_rate, c.warmup_steps, self.step);
        let bc1 = 1.0 - c.adam_beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.adam_beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (j, p) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                m[j] = c.adam_beta1 * m[j] + (1.0 - c.adam_beta1) * g[j];
                v[j] = c.adam_beta2 * v[j] + (1.0 - c.adam_beta2) * g[j] * g[j];
                let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.adam_eps);
                if lr != 0.0 {
                    *p -= update;
                }
            }
        }
        lr
    }
}

fn global_norm(grads: &Gradients) -> f64 {
    grads.buffers().iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Decoder history for a training or validation visit: reference transcripts
/// of the bound history, or the configured stand-in when it has none.
pub fn training_history(model: &Model, data: &[Conversation], item: &ScheduleItem) -> Vec<Vec<u32>> {
    let n = model.config.decoder_history;
    if n == 0 {
        return Vec::new();
    }
    if item.decoder_history.is_empty() {
        let mode = match model.config.first_utterance_train {
            FirstUtteranceTrain::Reference => Bootstrap::Reference,
            FirstUtteranceTrain::StartToken => Bootstrap::StartToken,
        };
        return bootstrap_history(&item.item.get(data).transcript, n, mode);
    }
    let refs = item
        .decoder_history
        .iter()
        .map(|r| non_empty(&r.get(data).transcript))
        .collect();
    pad_history(refs, n)
}

/// Score state of `at`, recomputed with the current parameters along its
/// whole chain of encoder contexts. Not differentiated.
pub fn context_state(
    model: &Model,
    data: &[Conversation],
    index: &HistoryIndex,
    at: Option<UttRef>,
) -> Result<Option<ScoreState>> {
    let Some(at) = at.filter(|_| model.config.context_attention) else {
        return Ok(None);
    };
    let policy = model.config.history_policy;
    let mut chain = vec![at];
    let mut cur = at;
    while let Some(prev) = index.get(cur, policy).encoder {
        cur = UttRef {
            conversation: at.conversation,
            utterance: prev,
        };
        chain.push(cur);
    }
    let mut state: Option<ScoreState> = None;
    for r in chain.into_iter().rev() {
        state = Some(encode_utterance(model, &r.get(data).features, state.as_ref())?.score_state);
    }
    Ok(state)
}

/// Decoder input `[SOS, y…]` and targets `[y…, EOS]`.
pub fn teacher_forcing_pair(transcript: &[u32]) -> (Vec<u32>, Vec<usize>) {
    let mut input = Vec::with_capacity(transcript.len() + 1);
    input.push(SOS);
    input.extend_from_slice(transcript);
    let mut targets: Vec<usize> = transcript.iter().map(|&t| t as usize).collect();
    targets.push(EOS as usize);
    (input, targets)
}

/// Teacher-forced logits `[T+1 × V]` for one utterance.
pub fn utterance_logits(
    g: &mut Graph,
    model: &Model,
    utt: &Utterance,
    history: &[Vec<u32>],
    enc_state: Option<&ScoreState>,
) -> Result<Var> {
    let enc = encode_on_graph(g, model, &utt.features, enc_state)?;
    let memory = if history.is_empty() {
        None
    } else {
        Some(context_fold(g, model, history)?)
    };
    let (input, _) = teacher_forcing_pair(&utt.transcript);
    Ok(decode_forward(g, model, &input, memory, enc.hidden)?.logits)
}

/// Summed cross-entropy of one utterance and its target count.
pub fn utterance_loss(
    g: &mut Graph,
    model: &Model,
    utt: &Utterance,
    history: &[Vec<u32>],
    enc_state: Option<&ScoreState>,
    smoothing: f64,
) -> Result<(Var, usize)> {
    let logits = utterance_logits(g, model, utt, history, enc_state)?;
    let (_, targets) = teacher_forcing_pair(&utt.transcript);
    Ok((g.tape.cross_entropy(logits, &targets, smoothing)?, targets.len()))
}

/// Cuts a shuffled schedule into batches of similar transcript length:
/// pools of 32 batches are sorted by length, chunked, and the batch order
/// is shuffled again.
pub fn length_grouped_batches(
    items: Vec<ScheduleItem>,
    data: &[Conversation],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<ScheduleItem>> {
    let mut batches = Vec::new();
    for pool in items.chunks(batch_size * 32) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|it| it.item.get(data).transcript.len());
        batches.extend(pool.chunks(batch_size).map(|c| c.to_vec()));
    }
    batches.shuffle(rng);
    batches
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidMetrics {
    /// Mean per-target cross-entropy without label smoothing.
    pub loss: f64,
    /// Teacher-forced argmax accuracy over transcript positions.
    pub token_accuracy: f64,
    pub ambiguous_accuracy: Option<f64>,
}

/// Teacher-forced evaluation with reference histories.
pub fn validate(model: &Model, data: &[Conversation]) -> Result<ValidMetrics> {
    let index = HistoryIndex::build(data, model.config.decoder_history);
    let schedule = time_ordered_schedule(data, &index, model.config.history_policy);
    let (mut loss, mut targets) = (0.0, 0usize);
    let mut predictions: Vec<Vec<Vec<u32>>> = data.iter().map(|c| vec![Vec::new(); c.utterances.len()]).collect();
    for item in &schedule {
        let utt = item.item.get(data);
        let history = training_history(model, data, item);
        let state = context_state(model, data, &index, item.encoder_context)?;
        let mut g = Graph::inference(&model.store);
        let logits = utterance_logits(&mut g, model, utt, &history, state.as_ref())?;
        let (_, want) = teacher_forcing_pair(&utt.transcript);
        let l = g.tape.cross_entropy(logits, &want, 0.0)?;
        loss += g.value(l).data()[0];
        targets += want.len();
        let lg = g.value(logits);
        predictions[item.item.conversation][item.item.utterance] =
            (0..utt.transcript.len()).map(|i| argmax(lg.row(i))).collect();
    }
    let s = score(&predictions, data, Framing::Classification)?;
    Ok(ValidMetrics {
        loss: if targets == 0 { 0.0 } else { loss / targets as f64 },
        token_accuracy: s.token_accuracy,
        ambiguous_accuracy: s.ambiguous_accuracy,
    })
}

fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_token_accuracy: f64,
    pub valid_ambiguous_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    /// Lowest validation loss; the initialization when no epoch ran.
    pub best: Checkpoint,
    pub last: Checkpoint,
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed(),
        word_pos: rng.get_word_pos(),
    }
}

/// Trains on `data.train`, selecting the checkpoint with the lowest loss on
/// `data.valid`. `on_epoch` sees each log record as it is produced.
pub fn train(config: &Config, data: &Dataset, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    config.validate()?;
    let tc = &config.train;
    let mut model = Model::init(&config.model, tc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, 0x7261_696e));
    let snapshot = |model: &Model, epoch, rng: &ChaCha8Rng| Checkpoint {
        config: config.clone(),
        epoch,
        rng: rng_state(rng),
        params: model.store.clone(),
    };
    let mut best = snapshot(&model, 0, &rng);
    let mut best_loss = f64::INFINITY;
    let mut log = Vec::with_capacity(tc.epochs);
    let train_set = &data.train;
    let index = HistoryIndex::build(train_set, config.model.decoder_history);
    let mut adam = Adam::new(&model.store, tc);
    let mut lr = 0.0;

    for epoch in 1..=tc.epochs {
        let schedule = shuffle_schedule(train_set, &index, config.model.history_policy, rng.next_u64());
        let batches = length_grouped_batches(schedule, train_set, tc.batch_size, &mut rng);
        let (mut epoch_loss, mut epoch_targets) = (0.0, 0usize);
        for batch in &batches {
            let batch_targets: usize = batch.iter().map(|it| it.item.get(train_set).transcript.len() + 1).sum();
            let mut acc = model.store.zeros_like();
            for item in batch {
                let utt = item.item.get(train_set);
                let history = training_history(&model, train_set, item);
                let state = context_state(&model, train_set, &index, item.encoder_context)?;
                let mut g = Graph::new(&model.store).with_dropout(config.model.dropout, rng.next_u64());
                let (loss, _) = utterance_loss(&mut g, &model, utt, &history, state.as_ref(), tc.label_smoothing)?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss {value} at epoch {epoch}, step {}, utterance {}",
                        adam.steps() + 1,
                        utt.id
                    )));
                }
                epoch_loss += value;
                let grads = g.backward(loss)?;
                acc.add_scaled(&grads, 1.0 / batch_targets as f64);
            }
            epoch_targets += batch_targets;
            if !acc.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at epoch {epoch}")));
            }
            if tc.grad_clip > 0.0 {
                let norm = global_norm(&acc);
                if norm > tc.grad_clip {
                    acc.scale(tc.grad_clip / norm);
                }
            }
            lr = adam.step(&mut model.store, &acc);
        }
        let valid = validate(&model, &data.valid)?;
        let record = EpochRecord {
            epoch,
            steps: adam.steps(),
            learning_rate: lr,
            train_loss: epoch_loss / epoch_targets.max(1) as f64,
            valid_loss: valid.loss,
            valid_token_accuracy: valid.token_accuracy,
            valid_ambiguous_accuracy: valid.ambiguous_accuracy,
        };
        if !record.valid_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss at epoch {epoch}")));
        }
        if record.valid_loss < best_loss {
            best_loss = record.valid_loss;
            best = snapshot(&model, epoch, &rng);
        }
        on_epoch(&record);
        log.push(record);
    }
    let last = snapshot(&model, tc.epochs, &rng);
    Ok(TrainOutcome { log, best, last })
}

/// One decoded utterance with the context that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedUtterance {
    pub utterance_id: String,
    pub hypothesis: Hypothesis,
    /// First-pass result for utterances decoded twice.
    pub first_pass: Option<Hypothesis>,
    /// Decoder history used by the final pass, oldest first.
    pub history: Vec<Vec<u32>>,
}

fn decode_with_history(
    model: &Model,
    enc: &EncoderOutput,
    history: &[Vec<u32>],
    ids: Vec<String>,
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    let memory = if history.is_empty() {
        None
    } else {
        Some(fold_memory(model, history, ids)?)
    };
    beam_decode(model, enc, memory.as_ref(), beam, max_len)
}

/// Decodes a conversation in time order. Earlier hypotheses serve as the
/// decoder history and earlier score states as the encoder context.
pub fn decode_conversation(
    model: &Model,
    conv: &Conversation,
    beam: usize,
    max_len: usize,
) -> Result<Vec<DecodedUtterance>> {
    let cfg = &model.config;
    let n = cfg.decoder_history;
    let mut states: Vec<ScoreState> = Vec::with_capacity(conv.utterances.len());
    let mut out: Vec<DecodedUtterance> = Vec::with_capacity(conv.utterances.len());
    for (m, utt) in conv.utterances.iter().enumerate() {
        let prev = select_history(conv, m, 1, cfg.history_policy).pop();
        let prev_state = prev.filter(|_| cfg.context_attention).map(|p| &states[p]);
        let enc = encode_utterance(model, &utt.features, prev_state)?;
        let refs = select_history(conv, m, n, cfg.history_policy);
        let ids: Vec<String> = refs.iter().map(|&i| conv.utterances[i].id.clone()).collect();
        let decoded = if n == 0 {
            DecodedUtterance {
                utterance_id: utt.id.clone(),
                hypothesis: decode_with_history(model, &enc, &[], ids, beam, max_len)?,
                first_pass: None,
                history: Vec::new(),
            }
        } else if refs.is_empty() {
            let start = bootstrap_history(&[], n, Bootstrap::StartToken);
            let first = decode_with_history(model, &enc, &start, vec![utt.id.clone()], beam, max_len)?;
            match cfg.first_utterance_decode {
                FirstUtteranceDecode::SinglePass => DecodedUtterance {
                    utterance_id: utt.id.clone(),
                    hypothesis: first,
                    first_pass: None,
                    history: start,
                },
                FirstUtteranceDecode::TwoPass => {
                    let history = bootstrap_history(&[], n, Bootstrap::Hypothesis(&first.tokens));
                    DecodedUtterance {
                        utterance_id: utt.id.clone(),
                        hypothesis: decode_with_history(model, &enc, &history, vec![utt.id.clone()], beam, max_len)?,
                        first_pass: Some(first),
                        history,
                    }
                }
            }
        } else {
            let history = pad_history(refs.iter().map(|&i| non_empty(&out[i].hypothesis.tokens)).collect(), n);
            DecodedUtterance {
                utterance_id: utt.id.clone(),
                hypothesis: decode_with_history(model, &enc, &history, ids, beam, max_len)?,
                first_pass: None,
                history,
            }
        };
        states.push(enc.score_state);
        out.push(decoded);
    }
    Ok(out)
}

pub fn decode_dataset(
    model: &Model,
    data: &[Conversation],
    beam: usize,
    max_len: usize,
) -> Result<Vec<Vec<DecodedUtterance>>> {
    data.iter().map(|c| decode_conversation(model, c, beam, max_len)).collect()
}

pub fn hypothesis_records(data: &[Conversation], decoded: &[Vec<DecodedUtterance>]) -> Vec<HypothesisRecord> {
    data.iter()
        .zip(decoded)
        .flat_map(|(conv, utts)| {
            utts.iter().map(move |d| HypothesisRecord {
                conversation_id: conv.id.clone(),
                utterance_id: d.utterance_id.clone(),
                tokens: d.hypothesis.tokens.clone(),
                log_prob: d.hypothesis.log_prob,
                score: d.hypothesis.score,
                truncated: d.hypothesis.truncated,
            })
        })
        .collect()
}

/// Decodes and scores `data`.
pub fn evaluate(
    model: &Model,
    data: &[Conversation],
    beam: usize,
    max_len: usize,
) -> Result<(Vec<Vec<DecodedUtterance>>, Scores)> {
    let decoded = decode_dataset(model, data, beam, max_len)?;
    let predictions: Vec<Vec<Vec<u32>>> = decoded
        .iter()
        .map(|utts| utts.iter().map(|d| d.hypothesis.tokens.clone()).collect())
        .collect();
    let scores = score(&predictions, data, Framing::Decoded)?;
    Ok((decoded, scores))
}

/// Model variants compared by the ablation runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    DecN1,
    DecN2,
    DecN2Res,
    DecN2Ctx,
    Res,
}

impl Variant {
    /// The incremental rows from the utterance-level baseline to the full model.
    pub const TABLE: [Variant; 5] = [
        Variant::Baseline,
        Variant::DecN1,
        Variant::DecN2,
        Variant::DecN2Res,
        Variant::DecN2Ctx,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::DecN1 => "+dec_n1",
            Variant::DecN2 => "+dec_n2",
            Variant::DecN2Res => "+dec_n2+res",
            Variant::DecN2Ctx => "+dec_n2+ctx",
            Variant::Res => "+res_attn",
        }
    }

    /// Switches the mechanisms of this variant on and all others off.
    pub fn apply(self, m: &mut ModelConfig) {
        let (history, residual, context) = match self {
            Variant::Baseline => (0, false, false),
            Variant::DecN1 => (1, false, false),
            Variant::DecN2 => (2, false, false),
            Variant::DecN2Res => (2, true, false),
            Variant::DecN2Ctx => (2, true, true),
            Variant::Res => (0, true, false),
        };
        m.decoder_history = history;
        m.residual_attention = residual;
        m.context_attention = context;
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Variant::TABLE.as_slice(), &[Variant::Res]]
            .concat()
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub token_accuracy: f64,
    pub ambiguous_accuracy: Option<f64>,
    pub error_rate: f64,
    pub best_epoch: usize,
    pub final_valid_loss: f64,
    /// First epoch whose validation loss reaches the same seed's final
    /// baseline validation loss; `None` if never reached or no baseline ran.
    pub epochs_to_threshold: Option<usize>,
    pub valid_losses: Vec<f64>,
}

/// First 1-based epoch with `loss ≤ threshold`.
pub fn epochs_to_threshold(losses: &[f64], threshold: f64) -> Option<usize> {
    losses.iter().position(|&l| l <= threshold).map(|i| i + 1)
}

/// Trains every variant for every seed on the same data and scores the best
/// checkpoint of each on `data.heldout`. Rows are ordered seed-major.
pub fn run_ablation(
    config: &Config,
    data: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::Contract("ablation needs at least one seed and one variant".into()));
    }
    let mut rows = Vec::with_capacity(seeds.len() * variants.len());
    for &seed in seeds {
        let mut seed_rows = Vec::with_capacity(variants.len());
        for &variant in variants {
            let mut cfg = config.clone();
            variant.apply(&mut cfg.model);
            cfg.train.seed = seed;
            let outcome = train(&cfg, data, |_| {})?;
            let model = outcome.best.model()?;
            let (_, scores) = evaluate(&model, &data.heldout, cfg.train.beam, cfg.train.max_decode_len)?;
            let valid_losses: Vec<f64> = outcome.log.iter().map(|r| r.valid_loss).collect();
            seed_rows.push(AblationRow {
                variant: variant.name().to_string(),
                seed,
                token_accuracy: scores.token_accuracy,
                ambiguous_accuracy: scores.ambiguous_accuracy,
                error_rate: scores.error_rate,
                best_epoch: outcome.best.epoch,
                final_valid_loss: valid_losses.last().copied().unwrap_or(f64::NAN),
                epochs_to_threshold: None,
                valid_losses,
            });
        }
        let threshold = seed_rows
            .iter()
            .find(|r| r.variant == Variant::Baseline.name())
            .map(|r| r.final_valid_loss);
        for mut row in seed_rows {
            row.epochs_to_threshold = threshold.and_then(|t| epochs_to_threshold(&row.valid_losses, t));
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Finite-difference check of every parameter on the per-target training
/// loss of a short two-utterance conversation drawn from `config`'s task.
/// The second utterance uses the first one's score state and a folded
/// decoder history; dropout is off.
pub fn model_gradcheck(config: &Config, seed: u64, step: f64, stencil: Stencil) -> Result<GradCheckReport> {
    config.validate()?;
    let mut task = config.task.clone();
    task.utterances_per_conversation = 2;
    task.min_tokens = task.min_tokens.min(3);
    task.max_tokens = task.max_tokens.min(3);
    task.frames_per_token = 1;
    let conv = generate(&task, 1, seed, "gc")?.remove(0);
    let model = Model::init(&config.model, seed)?;
    let first = &conv.utterances[0];
    let second = &conv.utterances[1];
    let state = config
        .model
        .context_attention
        .then(|| encode_utterance(&model, &first.features, None).map(|e| e.score_state))
        .transpose()?;
    let n = config.model.decoder_history;
    let history = if n == 0 {
        Vec::new()
    } else {
        pad_history(vec![first.transcript.clone(), second.transcript.clone()], n.max(2))
    };
    let smoothing = config.train.label_smoothing;
    finite_diff_check_piecewise(&model.store, step, stencil, |store| {
        let mut g = Graph::new(store);
        let (loss, targets) = utterance_loss(&mut g, &model, second, &history, state.as_ref(), smoothing)?;
        let loss = g.tape.scale(loss, 1.0 / targets as f64)?;
        let value = g.value(loss).data()[0];
        let piece = g.tape.relu_pattern();
        Ok((value, g.backward(loss)?, piece))
    })
}
