use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::probes::FactProbe;
use super::vocab::{split_words, tokenize, Vocabulary, MASK_TOKEN};
use crate::error::{Error, Result};

/// What happened to one selected position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingConfig {
    pub mask_rate: f64,
    /// Share of selected positions replaced by the mask token.
    pub mask_prob: f64,
    /// Share of selected positions replaced by a random regular token.
    pub random_prob: f64,
    pub max_len: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            mask_rate: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
            max_len: 128,
        }
    }
}

impl MaskingConfig {
    pub fn with_rate(mask_rate: f64) -> Self {
        Self {
            mask_rate,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Invalid(format!(
                "mask rate must lie in (0, 1), got {}",
                self.mask_rate
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Invalid("max_len must be at least 2".into()));
        }
        Ok(())
    }

    /// round(rate × len), at least one, at most len.
    pub fn masked_count(&self, len: usize) -> usize {
        ((self.mask_rate * len as f64).round() as usize).clamp(1, len)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedRow {
    pub token_ids: Vec<usize>,
    pub mask_positions: Vec<usize>,
    pub gold_ids: Vec<usize>,
    pub corruptions: Vec<Corruption>,
    pub truncated: bool,
}

impl MaskedRow {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedBatch {
    pub rows: Vec<MaskedRow>,
    pub pad_id: usize,
    pub skipped_lines: usize,
}

impl MaskedBatch {
    pub fn seq_len(&self) -> usize {
        self.rows.iter().map(MaskedRow::len).max().unwrap_or(0)
    }

    pub fn attention_lengths(&self) -> Vec<usize> {
        self.rows.iter().map(MaskedRow::len).collect()
    }

    /// batch × seq_len id matrix, padded with `pad_id`.
    pub fn token_matrix(&self) -> Vec<Vec<usize>> {
        let n = self.seq_len();
        self.rows
            .iter()
            .map(|r| {
                let mut ids = r.token_ids.clone();
                ids.resize(n, self.pad_id);
                ids
            })
            .collect()
    }

    pub fn truncated_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.truncated).count()
    }

    pub fn masked_positions(&self) -> usize {
        self.rows.iter().map(|r| r.mask_positions.len()).sum()
    }
}

/// Selects and corrupts positions of `ids` in place; returns the sorted positions,
/// their original ids and the corruption applied.
fn corrupt(
    ids: &mut [usize],
    cfg: &MaskingConfig,
    vocab: &Vocabulary,
    regular: &[usize],
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>, Vec<Corruption>) {
    let count = cfg.masked_count(ids.len());
    let mut positions = index::sample(rng, ids.len(), count).into_vec();
    positions.sort_unstable();
    let gold: Vec<usize> = positions.iter().map(|&p| ids[p]).collect();
    let corruptions = positions
        .iter()
        .map(|&p| {
            let r: f64 = rng.random();
            if r < cfg.mask_prob || regular.is_empty() {
                ids[p] = vocab.mask_id();
                Corruption::Mask
            } else if r < cfg.mask_prob + cfg.random_prob {
                ids[p] = regular[rng.random_range(0..regular.len())];
                Corruption::Random
            } else {
                Corruption::Keep
            }
        })
        .collect();
    (positions, gold, corruptions)
}

/// Masks each corpus line for MLM training. Lines with fewer than two tokens
/// are skipped; longer lines are cut at `max_len`.
pub fn make_mlm_batch<S: AsRef<str>>(
    corpus_lines: &[S],
    vocab: &Vocabulary,
    cfg: &MaskingConfig,
    seed: u64,
) -> Result<MaskedBatch> {
    cfg.validate()?;
    if corpus_lines.is_empty() {
        return Err(Error::EmptyCorpus("no corpus lines".into()));
    }
    let regular = vocab.regular_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(corpus_lines.len());
    let mut skipped = 0;
    for line in corpus_lines {
        let mut ids = tokenize(line.as_ref(), vocab);
        if ids.len() < 2 {
            skipped += 1;
            continue;
        }
        let truncated = ids.len() > cfg.max_len;
        ids.truncate(cfg.max_len);
        let (mask_positions, gold_ids, corruptions) =
            corrupt(&mut ids, cfg, vocab, &regular, &mut rng);
        rows.push(MaskedRow {
            token_ids: ids,
            mask_positions,
            gold_ids,
            corruptions,
            truncated,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "all {skipped} lines shorter than two tokens"
        )));
    }
    Ok(MaskedBatch {
        rows,
        pad_id: vocab.pad_id().unwrap_or(vocab.unk_id()),
        skipped_lines: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RenderMode {
    Template,
    Evidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeMasking {
    Object,
    Random,
}

/// Renders a probe into one masked row.
///
/// Object masking masks the object: a `[MASK]` already present in the text is
/// used as-is, otherwise the first token-level occurrence of the object is
/// replaced. Random masking fills the object in and masks positions the same
/// way MLM lines are masked.
pub fn render_probe(
    probe: &FactProbe,
    vocab: &Vocabulary,
    mode: RenderMode,
    masking: ProbeMasking,
    seed: u64,
    cfg: &MaskingConfig,
) -> Result<MaskedRow> {
    let object = single_object(probe, vocab)?;
    let text: &str = match mode {
        RenderMode::Template => &probe.template,
        RenderMode::Evidence => {
            if probe.evidences.is_empty() {
                return Err(Error::Invalid(format!("probe {} has no evidences", probe.id)));
            }
            probe
                .evidences
                .iter()
                .find(|e| locate(e, vocab, object).is_some())
                .ok_or_else(|| Error::ObjectNotLocatable(probe.id.clone()))?
        }
    };
    match masking {
        ProbeMasking::Object => {
            let mut ids = tokenize(text, vocab);
            let pos = match ids.iter().position(|&t| t == vocab.mask_id()) {
                Some(p) => p,
                None => {
                    let p = locate(text, vocab, object)
                        .ok_or_else(|| Error::ObjectNotLocatable(probe.id.clone()))?;
                    ids[p] = vocab.mask_id();
                    p
                }
            };
            let (ids, pos, truncated) = window(ids, pos, cfg.max_len);
            Ok(MaskedRow {
                token_ids: ids,
                mask_positions: vec![pos],
                gold_ids: vec![object],
                corruptions: vec![Corruption::Mask],
                truncated,
            })
        }
        ProbeMasking::Random => {
            cfg.validate()?;
            let filled = text.replace(MASK_TOKEN, &probe.object_label);
            let mut ids = tokenize(&filled, vocab);
            let truncated = ids.len() > cfg.max_len;
            ids.truncate(cfg.max_len);
            if ids.is_empty() {
                return Err(Error::Invalid(format!("probe {} renders to no tokens", probe.id)));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mask_positions, gold_ids, corruptions) =
                corrupt(&mut ids, cfg, vocab, &vocab.regular_ids(), &mut rng);
            Ok(MaskedRow {
                token_ids: ids,
                mask_positions,
                gold_ids,
                corruptions,
                truncated,
            })
        }
    }
}

fn single_object(probe: &FactProbe, vocab: &Vocabulary) -> Result<usize> {
    let words = split_words(&probe.object_label);
    match words.as_slice() {
        [w] => vocab
            .id(w)
            .ok_or_else(|| Error::Invalid(format!("object {w:?} not in vocabulary"))),
        _ => Err(Error::Invalid(format!(
            "object {:?} is not a single token",
            probe.object_label
        ))),
    }
}

fn locate(text: &str, vocab: &Vocabulary, object: usize) -> Option<usize> {
    tokenize(text, vocab).iter().position(|&t| t == object)
}

/// Cuts `ids` to `max_len`, keeping `pos` inside the window.
fn window(mut ids: Vec<usize>, pos: usize, max_len: usize) -> (Vec<usize>, usize, bool) {
    if ids.len() <= max_len {
        return (ids, pos, false);
    }
    let start = (pos + 1).saturating_sub(max_len);
    ids.drain(..start);
    ids.truncate(max_len);
    (ids, pos - start, true)
}
