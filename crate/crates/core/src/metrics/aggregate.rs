use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::precision::LayerMetrics;
use super::ranking::LayerRankTable;
use crate::error::{Error, Result};

/// Knowledge summed over layers, in both readings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateKnowledge {
    pub k: usize,
    pub n: usize,
    /// Best single-layer P@k.
    pub total_max: f64,
    /// Fraction of probes with gold rank ≤ k at some layer.
    pub total_union: f64,
    pub last_layer: f64,
    /// Probes ranked first at some layer.
    pub known_set: BTreeSet<String>,
}

impl AggregateKnowledge {
    /// Share of the union-form knowledge that the last layer misses:
    /// (union − last) / union, or 0 when nothing is known.
    pub fn missed_by_last_layer(&self) -> f64 {
        if self.total_union == 0.0 {
            0.0
        } else {
            (self.total_union - self.last_layer) / self.total_union
        }
    }
}

pub fn total_knowledge(table: &LayerRankTable, k: usize) -> Result<AggregateKnowledge> {
    if table.layers.is_empty() {
        return Err(Error::Invalid("rank table covers no layers".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let n = table.rows.len();
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    let per_layer: Vec<usize> = (0..table.layers.len())
        .map(|i| table.column(i).filter(|&r| r <= k).count())
        .collect();
    let union = table.rows.iter().filter(|r| r.ranks.iter().any(|x| x.gold_rank <= k)).count();
    let known_set = table
        .rows
        .iter()
        .filter(|r| r.ranks.iter().any(|x| x.gold_rank == 1))
        .map(|r| r.probe_id.clone())
        .collect();
    Ok(AggregateKnowledge {
        k,
        n,
        total_max: frac(*per_layer.iter().max().expect("non-empty")),
        total_union: frac(union),
        last_layer: frac(*per_layer.last().expect("non-empty")),
        known_set,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedForgotten {
    pub base_known: usize,
    pub ft_known: usize,
    pub learned_count: usize,
    pub forgotten_count: usize,
    pub overlap: usize,
    pub learned: f64,
    pub forgotten: f64,
    /// Percentages rounded to two decimals.
    pub learned_percent: f64,
    pub forgotten_percent: f64,
}

pub fn round_percent(fraction: f64) -> f64 {
    (fraction * 10_000.0).round() / 100.0
}

pub fn learned_forgotten_sets(base: &BTreeSet<String>, ft: &BTreeSet<String>) -> Result<LearnedForgotten> {
    if base.is_empty() {
        return Err(Error::EmptyBaseKnowledge);
    }
    let learned_count = ft.difference(base).count();
    let forgotten_count = base.difference(ft).count();
    let b = base.len() as f64;
    Ok(LearnedForgotten {
        base_known: base.len(),
        ft_known: ft.len(),
        learned_count,
        forgotten_count,
        overlap: base.intersection(ft).count(),
        learned: learned_count as f64 / b,
        forgotten: forgotten_count as f64 / b,
        learned_percent: round_percent(learned_count as f64 / b),
        forgotten_percent: round_percent(forgotten_count as f64 / b),
    })
}

pub fn learned_forgotten(base: &AggregateKnowledge, fine_tuned: &AggregateKnowledge) -> Result<LearnedForgotten> {
    learned_forgotten_sets(&base.known_set, &fine_tuned.known_set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoublingReport {
    pub fraction: f64,
    /// relation → doubled at the last layer
    pub relations: BTreeMap<String, bool>,
}

/// Last-layer P@1 at least twice the penultimate one, and positive.
pub fn doubles(penultimate: f64, last: f64) -> bool {
    last > 0.0 && last >= 2.0 * penultimate
}

pub fn doubling_fraction(metrics: &LayerMetrics) -> Result<DoublingReport> {
    let n = metrics.layers.len();
    if n < 2 {
        return Err(Error::Invalid("doubling needs at least two layers".into()));
    }
    let (prev, last) = (metrics.layers[n - 2], metrics.layers[n - 1]);
    let mut relations = BTreeMap::new();
    for rel in metrics.per_relation.keys() {
        if let (Some(p), Some(l)) = (metrics.relation_p_at(rel, prev, 1), metrics.relation_p_at(rel, last, 1)) {
            relations.insert(rel.clone(), doubles(p, l));
        }
    }
    let hits = relations.values().filter(|&&d| d).count();
    let fraction = if relations.is_empty() { 0.0 } else { hits as f64 / relations.len() as f64 };
    Ok(DoublingReport { fraction, relations })
}
