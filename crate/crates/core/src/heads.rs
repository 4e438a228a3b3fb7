//! Per-layer decoding heads trained on frozen encoder representations.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_mlm_batch, MaskedRow, MaskingConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::{AdamW, AdamWConfig, DecoderHead, EncoderModel, Parameterized};
use crate::seed;
use crate::training::split_validation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    FromPretrainedHead,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadTrainingConfig {
    pub layer_index: usize,
    pub init: HeadInit,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for HeadTrainingConfig {
    fn default() -> Self {
        Self {
            layer_index: 1,
            init: HeadInit::FromPretrainedHead,
            batch_size: 8,
            patience: 3,
            max_epochs: 50,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

/// Hidden vectors at masked positions for one layer, with their gold ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSamples {
    pub vectors: Array2<f64>,
    pub gold: Vec<usize>,
}

impl LayerSamples {
    pub fn new(vectors: Array2<f64>, gold: Vec<usize>) -> Result<Self> {
        if vectors.nrows() != gold.len() {
            return Err(Error::DimensionMismatch {
                expected: vectors.nrows(),
                found: gold.len(),
            });
        }
        Ok(Self { vectors, gold })
    }

    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Samples for every available layer, keyed by layer index (0 = embedding output).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureSet {
    pub layers: BTreeMap<usize, LayerSamples>,
}

impl FeatureSet {
    /// Runs the frozen encoder over masked rows and keeps the vectors at masked positions.
    pub fn from_encoder(model: &EncoderModel, rows: &[MaskedRow], exec: Execution) -> Result<Self> {
        let per_row = exec.map(rows, |row| model.forward(&row.token_ids, row.len()));
        let mut blocks: Vec<Vec<Array2<f64>>> = vec![Vec::new(); model.num_layers() + 1];
        let mut gold = Vec::new();
        for (row, hidden) in rows.iter().zip(per_row) {
            for (l, h) in hidden?.into_iter().enumerate() {
                blocks[l].push(h.select(Axis(0), &row.mask_positions));
            }
            gold.extend(&row.gold_ids);
        }
        let d = model.hidden_dim();
        let mut layers = BTreeMap::new();
        for (l, parts) in blocks.into_iter().enumerate() {
            let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
            let vectors = if views.is_empty() {
                Array2::zeros((0, d))
            } else {
                ndarray::concatenate(Axis(0), &views).expect("equal widths")
            };
            layers.insert(l, LayerSamples::new(vectors, gold.clone())?);
        }
        Ok(Self { layers })
    }

    /// Groups `(layer, gold, vector)` triples by layer, keeping their order.
    pub fn from_records<I>(dim: usize, records: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, Vec<f64>)>,
    {
        let mut flat: BTreeMap<usize, (Vec<f64>, Vec<usize>)> = BTreeMap::new();
        for (layer, gold, v) in records {
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: v.len() });
            }
            let e = flat.entry(layer).or_default();
            e.0.extend(v);
            e.1.push(gold);
        }
        let layers = flat
            .into_iter()
            .map(|(l, (data, gold))| {
                let n = gold.len();
                let vectors = Array2::from_shape_vec((n, dim), data).expect("length checked");
                Ok((l, LayerSamples::new(vectors, gold)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn layer(&self, index: usize) -> Result<&LayerSamples> {
        self.layers
            .get(&index)
            .ok_or_else(|| Error::Invalid(format!("no representations for layer {index}")))
    }
}

/// Training and validation features drawn from one corpus with one fixed split.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadData {
    pub train: FeatureSet,
    pub val: FeatureSet,
}

impl HeadData {
    /// Masks the corpus once (seeded), holds out `val_fraction` of its lines,
    /// and extracts features for every layer from the frozen encoder.
    pub fn from_corpus<S: AsRef<str> + Clone>(
        model: &EncoderModel,
        lines: &[S],
        vocab: &Vocabulary,
        masking: &MaskingConfig,
        val_fraction: f64,
        seed_value: u64,
        exec: Execution,
    ) -> Result<Self> {
        let (train_lines, val_lines) = split_validation(lines, val_fraction, seed_value);
        if train_lines.is_empty() || val_lines.is_empty() {
            return Err(Error::EmptyCorpus(format!(
                "head training needs training and validation lines (got {} and {})",
                train_lines.len(),
                val_lines.len()
            )));
        }
        let train = make_mlm_batch(&train_lines, vocab, masking, seed::derive(seed_value, seed::MASKING, 0))?;
        let val = make_mlm_batch(&val_lines, vocab, masking, seed::derive(seed_value, seed::VALIDATION, 0))?;
        Ok(Self {
            train: FeatureSet::from_encoder(model, &train.rows, exec)?,
            val: FeatureSet::from_encoder(model, &val.rows, exec)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrainingResult {
    pub layer_index: usize,
    /// The minimum-validation-loss parameters.
    pub head: DecoderHead,
    /// Mean validation loss per epoch; entry 0 is before any update.
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl HeadTrainingResult {
    pub fn best_val_loss(&self) -> f64 {
        self.val_losses[self.best_epoch]
    }

    /// First epoch whose validation loss is at or below `target`.
    pub fn epochs_to_reach(&self, target: f64) -> Option<usize> {
        self.val_losses.iter().position(|&l| l <= target)
    }
}

fn mean_loss(head: &DecoderHead, s: &LayerSamples) -> f64 {
    head.loss(&s.vectors, &s.gold) / s.len() as f64
}

/// Trains one head on frozen features for `cfg.layer_index`.
///
/// `pretrained` is required for `HeadInit::FromPretrainedHead` and is copied,
/// never modified.
pub fn train_head(
    train: &LayerSamples,
    val: &LayerSamples,
    vocab_size: usize,
    pretrained: Option<&DecoderHead>,
    cfg: &HeadTrainingConfig,
) -> Result<HeadTrainingResult> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyCorpus("no masked positions for head training".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch_size must be at least 1".into()));
    }
    let d = train.dim();
    if val.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, found: val.dim() });
    }
    let mut head = match cfg.init {
        HeadInit::FromPretrainedHead => {
            let p = pretrained.ok_or_else(|| {
                Error::Invalid("init from_pretrained_head needs a pretrained head".into())
            })?;
            p.clone()
        }
        HeadInit::Random => DecoderHead::random(d, vocab_size, seed::derive(cfg.seed, seed::HEAD_INIT, 0)),
    };
    if head.dim() != d {
        return Err(Error::DimensionMismatch { expected: head.dim(), found: d });
    }
    if head.vocab_size() != vocab_size {
        return Err(Error::DimensionMismatch { expected: vocab_size, found: head.vocab_size() });
    }
    if let Some(&bad) = train.gold.iter().chain(&val.gold).find(|&&g| g >= vocab_size) {
        return Err(Error::TokenOutOfRange { id: bad, vocab_size });
    }

    let mut val_losses = vec![mean_loss(&head, val)];
    let mut best = head.clone();
    let mut best_epoch = 0;
    let mut stopped_early = false;
    let mut opt = AdamW::new(
        AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() },
        head.num_params(),
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, seed::SHUFFLE, epoch as u64)));
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = train.vectors.select(Axis(0), idx);
            let gold: Vec<usize> = idx.iter().map(|&i| train.gold[i]).collect();
            let (loss, mut grad, _) = head.loss_and_grad(&x, &gold);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            grad.scale(1.0 / idx.len() as f64);
            let mut params = Vec::new();
            head.params_mut(&mut params);
            opt.step(params, &grad.to_flat());
        }
        let v = mean_loss(&head, val);
        val_losses.push(v);
        if v < val_losses[best_epoch] {
            best_epoch = epoch;
            best = head.clone();
        } else if epoch - best_epoch >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    Ok(HeadTrainingResult {
        layer_index: cfg.layer_index,
        head: best,
        val_losses,
        best_epoch,
        stopped_early,
    })
}

/// Trains an independent head for each layer in `layers`; layer `l` uses
/// seed `base.seed + l`. Failures are reported per layer.
pub fn train_all_heads(
    data: &HeadData,
    layers: &[usize],
    vocab_size: usize,
    pretrained: Option<&DecoderHead>,
    base: &HeadTrainingConfig,
    exec: Execution,
) -> BTreeMap<usize, Result<HeadTrainingResult>> {
    let results = exec.map(layers, |&l| {
        let cfg = HeadTrainingConfig {
            layer_index: l,
            seed: base.seed.wrapping_add(l as u64),
            ..base.clone()
        };
        train_head(data.train.layer(l)?, data.val.layer(l)?, vocab_size, pretrained, &cfg)
    });
    layers.iter().copied().zip(results).collect()
}

/// Layers probed by default: 1..=L, with the embedding output (0) only on request.
pub fn probed_layers(num_layers: usize, include_embedding: bool) -> Vec<usize> {
    let start = usize::from(!include_embedding);
    (start..=num_layers).collect()
}
