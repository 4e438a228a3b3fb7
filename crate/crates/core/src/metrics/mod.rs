//! Layer-wise probing metrics.

mod aggregate;
mod precision;
mod ranking;
mod significance;

pub use aggregate::{
    doubles, doubling_fraction, learned_forgotten, learned_forgotten_sets, round_percent, total_knowledge,
    AggregateKnowledge, DoublingReport, LearnedForgotten,
};
pub use precision::{precision_at_k, precision_of, Cell, Grouping, LayerMetrics, ALL, DEFAULT_KS};
pub use ranking::{
    archive_representations, encoder_representations, probe_all_layers, rank_of, top_k, LayerRank, LayerRankTable,
    ProbeRepresentation, RankRow,
};
pub use significance::{intermediate_best_relations, mcnemar_one_sided, IntermediateReport, RelationVerdict};

use serde::{Deserialize, Serialize};

use crate::data::{make_mlm_batch, MaskingConfig, Vocabulary};
use crate::error::Result;
use crate::exec::Execution;
use crate::nn::{DecoderHead, EncoderModel};

/// Mean masked-position cross-entropy of the last layer on a held-out corpus,
/// masked once with `seed`.
pub fn mlm_eval_loss<S: AsRef<str>>(
    model: &EncoderModel,
    head: &DecoderHead,
    lines: &[S],
    vocab: &Vocabulary,
    masking: &MaskingConfig,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    let batch = make_mlm_batch(lines, vocab, masking, seed)?;
    crate::training::mlm_loss(model, head, &batch.rows, exec)
}

/// (after − before) / before.
pub fn relative_increase(before: f64, after: f64) -> f64 {
    (after - before) / before
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub probe_set: String,
    pub layers: Vec<usize>,
    pub ks: Vec<usize>,
    pub probes: usize,
    pub skipped: Vec<String>,
    pub metrics: LayerMetrics,
    pub aggregate: Vec<AggregateKnowledge>,
    pub intermediate: IntermediateReport,
    pub doubling: Option<DoublingReport>,
    pub learned_forgotten: Option<LearnedForgotten>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsOptions {
    pub ks: Vec<usize>,
    pub alpha: f64,
    pub bonferroni: bool,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self { ks: DEFAULT_KS.to_vec(), alpha: 0.05, bonferroni: false }
    }
}

impl MetricsReport {
    pub fn build(probe_set: &str, table: &LayerRankTable, opts: &MetricsOptions) -> Result<Self> {
        let metrics = LayerMetrics::compute(table, &opts.ks)?;
        let aggregate = metrics.ks.iter().map(|&k| total_knowledge(table, k)).collect::<Result<_>>()?;
        let doubling = (table.layers.len() >= 2).then(|| doubling_fraction(&metrics)).transpose()?;
        Ok(Self {
            probe_set: probe_set.to_string(),
            layers: table.layers.clone(),
            ks: metrics.ks.clone(),
            probes: table.rows.len(),
            skipped: table.skipped.clone(),
            intermediate: intermediate_best_relations(table, opts.alpha, opts.bonferroni)?,
            metrics,
            aggregate,
            doubling,
            learned_forgotten: None,
        })
    }

    pub fn known_set_k1(&self) -> Option<&AggregateKnowledge> {
        self.aggregate.iter().find(|a| a.k == 1).or(self.aggregate.first())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per (relation, layer, k); the all-probes group is `all`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("relation,layer,k,precision,n\n");
        let mut push = |rel: &str, layer: usize, k: usize, c: &Cell| {
            out.push_str(&format!("{},{layer},{k},{},{}\n", csv_field(rel), c.precision, c.n));
        };
        for (layer, ks) in &self.metrics.overall {
            for (k, c) in ks {
                push(ALL, *layer, *k, c);
            }
        }
        for (rel, layers) in &self.metrics.per_relation {
            for (layer, ks) in layers {
                for (k, c) in ks {
                    push(rel, *layer, *k, c);
                }
            }
        }
        out
    }

    /// `layer,p_at_1` over all probes: the mean-P@1-by-layer curve.
    pub fn layer_curve_csv(&self) -> String {
        let mut out = String::from("layer,p_at_1\n");
        for l in &self.layers {
            if let Some(p) = self.metrics.p_at(*l, 1) {
                out.push_str(&format!("{l},{p}\n"));
            }
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
