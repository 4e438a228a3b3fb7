//! Full-model training: MLM pretraining and fine-tuning objectives.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_mlm_batch, tokenize, MaskedRow, MaskingConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::{
    AdamW, AdamWConfig, DecoderHead, EncoderModel, Parameterized, RankHead, SpanHead, TaskHead,
};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    pub val_fraction: f64,
    pub masking: MaskingConfig,
    pub shuffle: bool,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            patience: None,
            val_fraction: 0.1,
            masking: MaskingConfig::default(),
            shuffle: true,
            seed: 0,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Validation loss before the first update.
    pub initial_val_loss: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub warnings: Vec<String>,
}

/// Loss and parameter gradients accumulated over some examples.
pub(crate) struct Accumulated<H> {
    pub loss: f64,
    pub weight: f64,
    pub model: EncoderModel,
    pub head: H,
}

/// Gradients for a batch: per-example work mapped through `exec`, summed in input order.
pub(crate) fn batch_gradients<H, E, F>(
    model: &EncoderModel,
    head: &H,
    examples: &[E],
    exec: Execution,
    per_example: F,
) -> Result<Accumulated<H>>
where
    H: Parameterized + Clone + Send + Sync,
    E: Sync,
    F: Fn(&EncoderModel, &H, &E) -> Result<Accumulated<H>> + Sync + Send,
{
    let parts = exec.map(examples, |e| per_example(model, head, e));
    let mut iter = parts.into_iter();
    let mut acc = iter
        .next()
        .ok_or_else(|| Error::Invalid("empty batch".into()))??;
    for part in iter {
        let part = part?;
        acc.loss += part.loss;
        acc.weight += part.weight;
        acc.model.add_assign(&part.model);
        acc.head.add_assign(&part.head);
    }
    Ok(acc)
}

/// Mean-reduces accumulated gradients and applies one optimizer step to model and head.
pub(crate) fn apply_step<H: Parameterized>(
    opt: &mut AdamW,
    model: &mut EncoderModel,
    head: &mut H,
    mut acc: Accumulated<H>,
) {
    if acc.weight <= 0.0 {
        return;
    }
    let inv = 1.0 / acc.weight;
    acc.model.scale(inv);
    acc.head.scale(inv);
    let mut grads = acc.model.to_flat();
    grads.extend(acc.head.to_flat());
    let mut params = Vec::new();
    model.params_mut(&mut params);
    head.params_mut(&mut params);
    opt.step(params, &grads);
}

pub(crate) fn optimizer_for<H: Parameterized>(cfg: AdamWConfig, model: &EncoderModel, head: &H) -> AdamW {
    AdamW::new(cfg, model.num_params() + head.num_params())
}

/// MLM loss and gradients for one masked row.
pub(crate) fn mlm_row(model: &EncoderModel, head: &DecoderHead, row: &MaskedRow) -> Result<Accumulated<DecoderHead>> {
    let trace = model.forward_trace(&row.token_ids, row.len())?;
    let last = trace.last();
    let picked = last.select(ndarray::Axis(0), &row.mask_positions);
    let (loss, head_grad, dpicked) = head.loss_and_grad(&picked, &row.gold_ids);
    let mut d_last = Array2::zeros(last.raw_dim());
    for (k, &p) in row.mask_positions.iter().enumerate() {
        let mut r = d_last.row_mut(p);
        r += &dpicked.row(k);
    }
    Ok(Accumulated {
        loss,
        weight: row.mask_positions.len() as f64,
        model: model.backward(&trace, &d_last),
        head: head_grad,
    })
}

/// Mean masked-position cross-entropy over `rows`, using the last layer.
pub fn mlm_loss(model: &EncoderModel, head: &DecoderHead, rows: &[MaskedRow], exec: Execution) -> Result<f64> {
    let parts = exec.map(rows, |row| -> Result<(f64, usize)> {
        let hidden = model.forward(&row.token_ids, row.len())?;
        let picked = hidden
            .last()
            .expect("non-empty")
            .select(ndarray::Axis(0), &row.mask_positions);
        Ok((head.loss(&picked, &row.gold_ids), row.mask_positions.len()))
    });
    let (mut total, mut count) = (0.0, 0usize);
    for p in parts {
        let (l, c) = p?;
        total += l;
        count += c;
    }
    if count == 0 {
        return Err(Error::EmptyCorpus("no masked positions".into()));
    }
    Ok(total / count as f64)
}

/// Splits lines into (train, validation) with a seeded choice of
/// round(fraction × n) validation lines; original order is kept in both parts.
pub fn split_validation<S: Clone>(lines: &[S], fraction: f64, seed_value: u64) -> (Vec<S>, Vec<S>) {
    let n = lines.len();
    let mut k = (fraction * n as f64).round() as usize;
    if fraction > 0.0 && n >= 2 {
        k = k.clamp(1, n - 1);
    } else {
        k = 0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed_value, seed::SPLIT, 0)));
    let mut is_val = vec![false; n];
    for &i in &order[..k] {
        is_val[i] = true;
    }
    let mut train = Vec::with_capacity(n - k);
    let mut val = Vec::with_capacity(k);
    for (i, l) in lines.iter().enumerate() {
        if is_val[i] {
            val.push(l.clone());
        } else {
            train.push(l.clone());
        }
    }
    (train, val)
}

/// Trains encoder and head jointly on masked-token prediction.
///
/// Lines are re-masked every epoch; validation lines are masked once with a
/// fixed seed. Stops at `epochs` or when validation loss has not improved for
/// `patience` epochs.
pub fn train_mlm<S: AsRef<str> + Clone>(
    model: &mut EncoderModel,
    head: &mut DecoderHead,
    corpus: &[S],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<TrainingTrace> {
    let mut trace = TrainingTrace::default();
    if cfg.epochs == 0 {
        return Ok(trace);
    }
    check_head(model, head)?;
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch_size must be at least 1".into()));
    }
    let (train, val) = split_validation(corpus, cfg.val_fraction, cfg.seed);
    if train.is_empty() {
        return Err(Error::EmptyCorpus("no training lines".into()));
    }
    let val_rows = if val.is_empty() {
        None
    } else {
        Some(make_mlm_batch(&val, vocab, &cfg.masking, seed::derive(cfg.seed, seed::VALIDATION, 0))?.rows)
    };
    let eval = |m: &EncoderModel, h: &DecoderHead| -> Result<Option<f64>> {
        val_rows.as_ref().map(|r| mlm_loss(m, h, r, cfg.execution)).transpose()
    };
    trace.initial_val_loss = eval(model, head)?;
    let mut opt = optimizer_for(cfg.optimizer, model, head);
    let mut best = trace.initial_val_loss.unwrap_or(f64::INFINITY);
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let mut rows = make_mlm_batch(&train, vocab, &cfg.masking, seed::derive(cfg.seed, seed::MASKING, epoch as u64))?.rows;
        if cfg.shuffle {
            rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, seed::SHUFFLE, epoch as u64)));
        }
        let (mut total, mut weight) = (0.0, 0.0);
        for (step, batch) in rows.chunks(cfg.batch_size).enumerate() {
            let acc = batch_gradients(model, head, batch, cfg.execution, mlm_row)?;
            let batch_loss = acc.loss / acc.weight;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: batch_loss });
            }
            total += acc.loss;
            weight += acc.weight;
            apply_step(&mut opt, model, head, acc);
        }
        let val_loss = eval(model, head)?;
        trace.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: total / weight,
            val_loss,
        });
        if let (Some(v), Some(patience)) = (val_loss, cfg.patience) {
            if v < best {
                best = v;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    trace.stopped_early = true;
                    break;
                }
            }
        }
    }
    warn_if_not_decreasing(&mut trace);
    Ok(trace)
}

fn warn_if_not_decreasing(trace: &mut TrainingTrace) {
    if let (Some(first), Some(last)) = (trace.epochs.first(), trace.epochs.last()) {
        if trace.epochs.len() > 1 && last.train_loss >= first.train_loss {
            let msg = format!(
                "training loss did not decrease ({:.4} -> {:.4})",
                first.train_loss, last.train_loss
            );
            log::warn!("{msg}");
            trace.warnings.push(msg);
        }
    }
}

fn check_head(model: &EncoderModel, head: &DecoderHead) -> Result<()> {
    if head.dim() != model.hidden_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.hidden_dim(),
            found: head.dim(),
        });
    }
    if head.vocab_size() != model.config.vocab_size {
        return Err(Error::DimensionMismatch {
            expected: model.config.vocab_size,
            found: head.vocab_size(),
        });
    }
    Ok(())
}

/// Question/context pair with an answer span given as inclusive token
/// offsets into the context, or `None` for unanswerable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanExample {
    pub question: String,
    pub context: String,
    pub answer: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankExample {
    pub query: String,
    pub passage: String,
    pub relevant: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FineTuneData {
    Mlm(Vec<String>),
    SpanQa {
        examples: Vec<SpanExample>,
        /// Position 0 (the sequence-start token) acts as the no-answer sentinel.
        allow_no_answer: bool,
    },
    PointwiseRank(Vec<RankExample>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FineTuneReport {
    pub trace: TrainingTrace,
    /// (example index, reason)
    pub rejected: Vec<(usize, String)>,
}

/// Token ids and answer candidates for a span example.
#[derive(Debug, Clone)]
pub(crate) struct EncodedSpan {
    ids: Vec<usize>,
    candidates: Vec<usize>,
    start: usize,
    end: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct EncodedRank {
    ids: Vec<usize>,
    relevant: bool,
}

fn specials(vocab: &Vocabulary) -> Result<(usize, usize)> {
    match (vocab.cls_id(), vocab.sep_id()) {
        (Some(c), Some(s)) => Ok((c, s)),
        _ => Err(Error::Invalid("pair tasks need [CLS] and [SEP] in the vocabulary".into())),
    }
}

/// `[CLS] first [SEP] second [SEP]`; returns ids and the offset of `second`.
fn encode_pair(first: &str, second: &str, vocab: &Vocabulary, max_len: usize) -> Result<(Vec<usize>, usize, usize)> {
    let (cls, sep) = specials(vocab)?;
    let a = tokenize(first, vocab);
    let b = tokenize(second, vocab);
    let mut ids = Vec::with_capacity(a.len() + b.len() + 3);
    ids.push(cls);
    ids.extend(&a);
    ids.push(sep);
    let offset = ids.len();
    ids.extend(&b);
    ids.push(sep);
    if ids.len() > max_len {
        return Err(Error::SequenceTooLong { len: ids.len(), max: max_len });
    }
    Ok((ids, offset, b.len()))
}

pub(crate) fn encode_span(ex: &SpanExample, vocab: &Vocabulary, max_len: usize, allow_no_answer: bool) -> Result<EncodedSpan> {
    let (ids, offset, clen) = encode_pair(&ex.question, &ex.context, vocab, max_len)?;
    let mut candidates: Vec<usize> = Vec::with_capacity(clen + 1);
    if allow_no_answer {
        candidates.push(0);
    }
    let base = candidates.len();
    candidates.extend(offset..offset + clen);
    let (start, end) = match ex.answer {
        Some((s, e)) if s <= e && e < clen => (base + s, base + e),
        Some((s, e)) => {
            return Err(Error::Invalid(format!(
                "span ({s}, {e}) outside context of {clen} tokens"
            )))
        }
        None if allow_no_answer => (0, 0),
        None => return Err(Error::Invalid("unanswerable example without no-answer support".into())),
    };
    Ok(EncodedSpan { ids, candidates, start, end })
}

fn encode_rank(ex: &RankExample, vocab: &Vocabulary, max_len: usize) -> Result<EncodedRank> {
    let (ids, _, _) = encode_pair(&ex.query, &ex.passage, vocab, max_len)?;
    Ok(EncodedRank { ids, relevant: ex.relevant })
}

/// Fine-tunes every encoder parameter together with `task` on `data`.
/// Examples that cannot be encoded (span outside the context, too long) are
/// rejected and reported; training proceeds on the rest.
pub fn fine_tune(
    model: &mut EncoderModel,
    task: &mut TaskHead,
    data: &FineTuneData,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<FineTuneReport> {
    let max_len = model.config.max_seq_len;
    match (task, data) {
        (TaskHead::Mlm(head), FineTuneData::Mlm(lines)) => Ok(FineTuneReport {
            trace: train_mlm(model, head, lines, vocab, cfg)?,
            rejected: Vec::new(),
        }),
        (TaskHead::SpanQa(head), FineTuneData::SpanQa { examples, allow_no_answer }) => {
            let mut rejected = Vec::new();
            let encoded: Vec<EncodedSpan> = examples
                .iter()
                .enumerate()
                .filter_map(|(i, ex)| match encode_span(ex, vocab, max_len, *allow_no_answer) {
                    Ok(e) => Some(e),
                    Err(err) => {
                        rejected.push((i, err.to_string()));
                        None
                    }
                })
                .collect();
            let trace = run_task(model, head, &encoded, cfg, |m, h: &SpanHead, e: &EncodedSpan| {
                let trace = m.forward_trace(&e.ids, e.ids.len())?;
                let (loss, g, dh) = h.loss_and_grad(trace.last(), &e.candidates, e.start, e.end);
                Ok(Accumulated {
                    loss,
                    weight: 1.0,
                    model: m.backward(&trace, &dh),
                    head: g,
                })
            })?;
            Ok(FineTuneReport { trace, rejected })
        }
        (TaskHead::PointwiseRank(head), FineTuneData::PointwiseRank(examples)) => {
            let mut rejected = Vec::new();
            let encoded: Vec<EncodedRank> = examples
                .iter()
                .enumerate()
                .filter_map(|(i, ex)| match encode_rank(ex, vocab, max_len) {
                    Ok(e) => Some(e),
                    Err(err) => {
                        rejected.push((i, err.to_string()));
                        None
                    }
                })
                .collect();
            let trace = run_task(model, head, &encoded, cfg, |m, h: &RankHead, e: &EncodedRank| {
                let trace = m.forward_trace(&e.ids, e.ids.len())?;
                let (loss, g, dh) = h.loss_and_grad(trace.last(), e.relevant);
                Ok(Accumulated {
                    loss,
                    weight: 1.0,
                    model: m.backward(&trace, &dh),
                    head: g,
                })
            })?;
            Ok(FineTuneReport { trace, rejected })
        }
        (task, _) => Err(Error::Invalid(format!(
            "dataset does not match task head {:?}",
            task.kind()
        ))),
    }
}

fn run_task<H, E, F>(
    model: &mut EncoderModel,
    head: &mut H,
    examples: &[E],
    cfg: &TrainConfig,
    per_example: F,
) -> Result<TrainingTrace>
where
    H: Parameterized + Clone + Send + Sync,
    E: Sync + Clone,
    F: Fn(&EncoderModel, &H, &E) -> Result<Accumulated<H>> + Sync + Send + Copy,
{
    let mut trace = TrainingTrace::default();
    if cfg.epochs == 0 {
        return Ok(trace);
    }
    if examples.is_empty() {
        return Err(Error::EmptyCorpus("no usable fine-tuning examples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch_size must be at least 1".into()));
    }
    let mut opt = optimizer_for(cfg.optimizer, model, head);
    let mut order: Vec<E> = examples.to_vec();
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, seed::SHUFFLE, epoch as u64)));
        }
        let (mut total, mut weight) = (0.0, 0.0);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let acc = batch_gradients(model, head, batch, cfg.execution, per_example)?;
            if !acc.loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: acc.loss });
            }
            total += acc.loss;
            weight += acc.weight;
            apply_step(&mut opt, model, head, acc);
        }
        trace.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: total / weight,
            val_loss: None,
        });
    }
    warn_if_not_decreasing(&mut trace);
    Ok(trace)
}

/// Fraction of examples whose predicted (start, end) equals the gold span.
pub fn span_exact_match(
    model: &EncoderModel,
    head: &SpanHead,
    examples: &[SpanExample],
    vocab: &Vocabulary,
    allow_no_answer: bool,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut n = 0usize;
    for ex in examples {
        let Ok(e) = encode_span(ex, vocab, model.config.max_seq_len, allow_no_answer) else {
            continue;
        };
        let hidden = model.forward(&e.ids, e.ids.len())?;
        let (s, t) = head.predict(hidden.last().unwrap(), &e.candidates);
        hits += usize::from(s == e.start && t == e.end);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyCorpus("no evaluable span examples".into()));
    }
    Ok(hits as f64 / n as f64)
}

pub fn rank_score(model: &EncoderModel, head: &RankHead, query: &str, passage: &str, vocab: &Vocabulary) -> Result<f64> {
    let (ids, _, _) = encode_pair(query, passage, vocab, model.config.max_seq_len)?;
    let hidden = model.forward(&ids, ids.len())?;
    Ok(head.score(hidden.last().unwrap()))
}
