//! Sequential training of a full model on probe sets, then re-probing
//! everything and measuring held-out MLM loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{render_probe, MaskedRow, MaskingConfig, ProbeMasking, ProbeSet, RenderMode, Vocabulary};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{encoder_representations, mlm_eval_loss, probe_all_layers, relative_increase};
use crate::nn::{AdamW, AdamWConfig, DecoderHead, EncoderModel, Parameterized};
use crate::seed;
use crate::training::{apply_step, batch_gradients, mlm_row, optimizer_for};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochSemantics {
    /// Each set trained for E epochs before moving to the next.
    #[default]
    PerSet,
    /// E passes over the concatenation of all sets, in order.
    Concatenated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CapacityPlan {
    /// Probe set names in training order.
    pub sets: Vec<String>,
    pub mode: RenderMode,
    pub masking: ProbeMasking,
    pub epochs_per_set: usize,
    pub epoch_semantics: EpochSemantics,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Masking used for random-token masking and for the held-out loss.
    pub mlm_masking: MaskingConfig,
    /// Update the final head together with the encoder.
    pub train_head: bool,
    pub seed: u64,
}

impl Default for CapacityPlan {
    fn default() -> Self {
        Self {
            sets: ["google_re", "trex", "conceptnet", "squad"].map(String::from).to_vec(),
            mode: RenderMode::Template,
            masking: ProbeMasking::Object,
            epochs_per_set: 10,
            epoch_semantics: EpochSemantics::PerSet,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            mlm_masking: MaskingConfig::default(),
            train_head: true,
            seed: 0,
        }
    }
}

impl CapacityPlan {
    pub fn label(&self) -> String {
        let mode = match self.mode {
            RenderMode::Template => "Templates",
            RenderMode::Evidence => "Evidences",
        };
        let masking = match self.masking {
            ProbeMasking::Object => "object",
            ProbeMasking::Random => "random",
        };
        format!("{mode}-{masking}-{}", self.epochs_per_set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetResult {
    pub name: String,
    pub probes: usize,
    pub training_rows: usize,
    pub baseline_p_at_1: f64,
    pub p_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityResult {
    pub label: String,
    pub plan: CapacityPlan,
    pub sets: Vec<SetResult>,
    pub heldout_loss_before: f64,
    pub heldout_loss_after: f64,
    pub relative_increase: f64,
    /// Mean training loss per epoch, in training order.
    pub train_losses: Vec<f64>,
}

impl CapacityResult {
    pub fn relative_increase_percent(&self) -> f64 {
        self.relative_increase * 100.0
    }

    /// One row per probe set.
    pub fn to_csv(&self, header: bool) -> String {
        let mut out = String::new();
        if header {
            out.push_str("mode,masking,epochs,probe_set,baseline_p_at_1,p_at_1,heldout_before,heldout_after,relative_increase\n");
        }
        for s in &self.sets {
            out.push_str(&format!(
                "{:?},{:?},{},{},{},{},{},{},{}\n",
                self.plan.mode,
                self.plan.masking,
                self.plan.epochs_per_set,
                s.name,
                s.baseline_p_at_1,
                s.p_at_1,
                self.heldout_loss_before,
                self.heldout_loss_after,
                self.relative_increase
            ));
        }
        out
    }
}

/// Training rows for one set. Evidence mode yields one row per evidence
/// sentence in which the object can be found.
fn render_set(set: &ProbeSet, set_index: usize, vocab: &Vocabulary, plan: &CapacityPlan, epoch: usize, max_len: usize) -> Vec<MaskedRow> {
    let cfg = MaskingConfig { max_len: max_len.min(plan.mlm_masking.max_len), ..plan.mlm_masking };
    let mut rows = Vec::new();
    for (pi, p) in set.probes.iter().enumerate() {
        let variants: Vec<_> = match plan.mode {
            RenderMode::Template => vec![p.clone()],
            RenderMode::Evidence => p
                .evidences
                .iter()
                .map(|e| {
                    let mut q = p.clone();
                    q.evidences = vec![e.clone()];
                    q
                })
                .collect(),
        };
        for (vi, q) in variants.iter().enumerate() {
            let s = seed::derive(plan.seed, seed::MASKING, ((set_index * 1_000_003 + pi) * 16 + vi) as u64 ^ ((epoch as u64) << 40));
            if let Ok(row) = render_probe(q, vocab, plan.mode, plan.masking, s, &cfg) {
                rows.push(row);
            }
        }
    }
    rows
}

/// Last-layer P@1 over template probes, object masked.
pub fn last_layer_p_at_1(model: &EncoderModel, head: &DecoderHead, set: &ProbeSet, vocab: &Vocabulary, exec: Execution) -> Result<f64> {
    let (reps, _) = encoder_representations(model, set, vocab, RenderMode::Template, &MaskingConfig::default(), exec);
    let heads = BTreeMap::from([(model.num_layers(), head.clone())]);
    let table = probe_all_layers(&heads, &reps, 1, exec)?;
    if table.rows.is_empty() {
        return Err(Error::EmptyCorpus(format!("no probe of {} renders", set.name)));
    }
    Ok(table.column(0).filter(|&r| r == 1).count() as f64 / table.rows.len() as f64)
}

/// Trains `model` and `head` in place on the sets in the given order, never
/// shuffling. Returns the mean training loss of every epoch.
pub fn train_sequence(
    m: &mut EncoderModel,
    h: &mut DecoderHead,
    sets: &[&ProbeSet],
    vocab: &Vocabulary,
    plan: &CapacityPlan,
    exec: Execution,
) -> Result<Vec<f64>> {
    let max_len = m.config.max_seq_len;
    let mut opt = if plan.train_head {
        optimizer_for(plan.optimizer, m, h)
    } else {
        AdamW::new(plan.optimizer, m.num_params())
    };
    let mut train_losses = Vec::new();
    let mut run_epoch = |m: &mut EncoderModel, h: &mut DecoderHead, rows: &[MaskedRow], epoch: usize| -> Result<()> {
        let (mut total, mut weight) = (0.0, 0.0);
        for (step, batch) in rows.chunks(plan.batch_size.max(1)).enumerate() {
            let acc = batch_gradients(m, h, batch, exec, mlm_row)?;
            if !acc.loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: acc.loss });
            }
            total += acc.loss;
            weight += acc.weight;
            if plan.train_head {
                apply_step(&mut opt, m, h, acc);
            } else {
                let mut g = acc.model;
                g.scale(1.0 / acc.weight);
                let mut params = Vec::new();
                m.params_mut(&mut params);
                opt.step(params, &g.to_flat());
            }
        }
        train_losses.push(total / weight);
        Ok(())
    };
    match plan.epoch_semantics {
        EpochSemantics::PerSet => {
            for (k, set) in sets.iter().enumerate() {
                for e in 0..plan.epochs_per_set {
                    let rows = render_set(set, k, vocab, plan, e, max_len);
                    run_epoch(m, h, &rows, e)?;
                }
            }
        }
        EpochSemantics::Concatenated => {
            for e in 0..plan.epochs_per_set {
                let rows: Vec<MaskedRow> = sets
                    .iter()
                    .enumerate()
                    .flat_map(|(k, set)| render_set(set, k, vocab, plan, e, max_len))
                    .collect();
                run_epoch(m, h, &rows, e)?;
            }
        }
    }
    Ok(train_losses)
}

/// Copies the model and head, trains the copies on the ordered probe sets
/// (no shuffling), and reports per-set P@1 and held-out loss against the
/// untouched originals.
pub fn run_capacity(
    model: &EncoderModel,
    head: &DecoderHead,
    sets: &[ProbeSet],
    vocab: &Vocabulary,
    heldout: &[String],
    plan: &CapacityPlan,
    exec: Execution,
) -> Result<CapacityResult> {
    let ordered: Vec<(usize, &ProbeSet)> = plan
        .sets
        .iter()
        .map(|name| {
            sets.iter()
                .position(|s| &s.name == name)
                .map(|i| (i, &sets[i]))
                .ok_or_else(|| Error::Invalid(format!("plan names unknown probe set {name:?}")))
        })
        .collect::<Result<_>>()?;
    if plan.batch_size == 0 {
        return Err(Error::Invalid("batch_size must be at least 1".into()));
    }
    let max_len = model.config.max_seq_len;
    let mut training_rows = Vec::new();
    for (k, (_, set)) in ordered.iter().enumerate() {
        let n = render_set(set, k, vocab, plan, 0, max_len).len();
        if n == 0 {
            return Err(Error::EmptyCorpus(format!("probe set {} has no renderable instances in {:?} mode", set.name, plan.mode)));
        }
        training_rows.push(n);
    }

    let heldout_seed = seed::derive(plan.seed, seed::VALIDATION, 0);
    let heldout_loss_before = mlm_eval_loss(model, head, heldout, vocab, &plan.mlm_masking, heldout_seed, exec)?;
    let baseline = ordered
        .iter()
        .map(|(_, s)| last_layer_p_at_1(model, head, s, vocab, exec))
        .collect::<Result<Vec<_>>>()?;

    let mut m = model.clone();
    let mut h = head.clone();
    let ordered_sets: Vec<&ProbeSet> = ordered.iter().map(|(_, s)| *s).collect();
    let train_losses = train_sequence(&mut m, &mut h, &ordered_sets, vocab, plan, exec)?;

    let heldout_loss_after = mlm_eval_loss(&m, &h, heldout, vocab, &plan.mlm_masking, heldout_seed, exec)?;
    let mut results = Vec::new();
    for (k, (_, set)) in ordered.iter().enumerate() {
        results.push(SetResult {
            name: set.name.clone(),
            probes: set.len(),
            training_rows: training_rows[k],
            baseline_p_at_1: baseline[k],
            p_at_1: last_layer_p_at_1(&m, &h, set, vocab, exec)?,
        });
    }
    Ok(CapacityResult {
        label: plan.label(),
        plan: plan.clone(),
        sets: results,
        heldout_loss_before,
        heldout_loss_after,
        relative_increase: relative_increase(heldout_loss_before, heldout_loss_after),
        train_losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub results: Vec<CapacityResult>,
    /// Evidence minus template relative held-out loss increase, object masking.
    pub evidence_minus_template_increase: f64,
    /// Random minus object mean P@1 per render mode, when random masking was run.
    pub random_minus_object_p_at_1: BTreeMap<String, f64>,
}

fn mean_p(r: &CapacityResult) -> f64 {
    r.sets.iter().map(|s| s.p_at_1).sum::<f64>() / r.sets.len().max(1) as f64
}

/// Runs template and evidence variants (and random masking when asked) from
/// the same starting checkpoint and seed.
pub fn compare_modes(
    model: &EncoderModel,
    head: &DecoderHead,
    sets: &[ProbeSet],
    vocab: &Vocabulary,
    heldout: &[String],
    base: &CapacityPlan,
    include_random: bool,
    exec: Execution,
) -> Result<ModeComparison> {
    let maskings: &[ProbeMasking] = if include_random { &[ProbeMasking::Object, ProbeMasking::Random] } else { &[ProbeMasking::Object] };
    let mut results = Vec::new();
    for &masking in maskings {
        for mode in [RenderMode::Template, RenderMode::Evidence] {
            let plan = CapacityPlan { mode, masking, ..base.clone() };
            results.push(run_capacity(model, head, sets, vocab, heldout, &plan, exec)?);
        }
    }
    let find = |mode, masking| results.iter().find(|r| r.plan.mode == mode && r.plan.masking == masking);
    let t = find(RenderMode::Template, ProbeMasking::Object).expect("ran");
    let e = find(RenderMode::Evidence, ProbeMasking::Object).expect("ran");
    let evidence_minus_template_increase = e.relative_increase - t.relative_increase;
    let mut random_minus_object_p_at_1 = BTreeMap::new();
    if include_random {
        for mode in [RenderMode::Template, RenderMode::Evidence] {
            let (o, r) = (find(mode, ProbeMasking::Object).expect("ran"), find(mode, ProbeMasking::Random).expect("ran"));
            random_minus_object_p_at_1.insert(format!("{mode:?}"), mean_p(r) - mean_p(o));
        }
    }
    Ok(ModeComparison { results, evidence_minus_template_increase, random_minus_object_p_at_1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::EncoderConfig;
    use crate::toy::{generate, ToyConfig};

    #[test]
    fn zero_epochs_equals_baseline() {
        let world = generate(&ToyConfig { facts_per_set: 6, corpus_lines: 10, heldout_lines: 5, ..Default::default() }).unwrap();
        let cfg = EncoderConfig { num_layers: 1, hidden_dim: 8, num_heads: 2, ff_dim: 16, ..EncoderConfig::toy(world.vocab.len()) };
        let model = EncoderModel::new(cfg).unwrap();
        let head = DecoderHead::random(8, world.vocab.len(), 1);
        let plan = CapacityPlan { epochs_per_set: 0, ..Default::default() };
        let r = run_capacity(&model, &head, &world.probe_sets, &world.vocab, &world.heldout, &plan, Execution::Sequential).unwrap();
        assert_eq!(r.heldout_loss_before, r.heldout_loss_after);
        assert_eq!(r.relative_increase, 0.0);
        assert!(r.sets.iter().all(|s| s.p_at_1 == s.baseline_p_at_1));
        assert_eq!(r.label, "Templates-object-0");
    }

    #[test]
    fn unknown_set_is_rejected() {
        let world = generate(&ToyConfig { facts_per_set: 2, corpus_lines: 4, heldout_lines: 2, ..Default::default() }).unwrap();
        let model = EncoderModel::new(EncoderConfig { num_layers: 1, hidden_dim: 4, num_heads: 1, ff_dim: 4, ..EncoderConfig::toy(world.vocab.len()) }).unwrap();
        let head = DecoderHead::random(4, world.vocab.len(), 1);
        let plan = CapacityPlan { sets: vec!["nope".into()], ..Default::default() };
        assert!(run_capacity(&model, &head, &world.probe_sets, &world.vocab, &world.heldout, &plan, Execution::Sequential).is_err());
    }
}
