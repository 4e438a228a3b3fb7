use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ranking::LayerRankTable;
use crate::error::{Error, Result};

fn ln_choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// P(X ≥ b) for X ~ Binomial(b + c, 1/2): one-sided exact McNemar test that
/// the first condition wins more discordant pairs than the second.
pub fn mcnemar_one_sided(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let ln_half = -(n as f64) * std::f64::consts::LN_2;
    let terms: Vec<f64> = (b..=n).map(|i| ln_choose(n, i) + ln_half).collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p = max.exp() * terms.iter().map(|t| (t - max).exp()).sum::<f64>();
    p.min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationVerdict {
    pub n: usize,
    /// Intermediate layer with the smallest p-value.
    pub best_layer: Option<usize>,
    pub p_value: f64,
    /// (layer-only correct, last-only correct) for `best_layer`.
    pub discordant: (u64, u64),
    pub verdict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntermediateReport {
    pub alpha: f64,
    pub bonferroni: bool,
    pub fraction: f64,
    pub relations: BTreeMap<String, RelationVerdict>,
    /// Relations with fewer than two probes.
    pub excluded: Vec<String>,
}

/// For each relation, whether some layer before the last beats the last layer
/// at P@1 under a one-sided exact McNemar test at level `alpha` (divided by the
/// number of compared layers when `bonferroni` is set).
pub fn intermediate_best_relations(table: &LayerRankTable, alpha: f64, bonferroni: bool) -> Result<IntermediateReport> {
    let nl = table.layers.len();
    if nl == 0 {
        return Err(Error::Invalid("rank table covers no layers".into()));
    }
    let level = if bonferroni && nl > 1 { alpha / (nl - 1) as f64 } else { alpha };
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in table.rows.iter().enumerate() {
        if let Some(rel) = &r.relation_id {
            groups.entry(rel).or_default().push(i);
        }
    }
    let mut relations = BTreeMap::new();
    let mut excluded = Vec::new();
    for (rel, rows) in groups {
        if rows.len() < 2 {
            excluded.push(rel.to_string());
            continue;
        }
        let mut best = RelationVerdict { n: rows.len(), best_layer: None, p_value: 1.0, discordant: (0, 0), verdict: false };
        for li in 0..nl - 1 {
            let (mut b, mut c) = (0u64, 0u64);
            for &r in &rows {
                let here = table.rows[r].ranks[li].gold_rank == 1;
                let last = table.rows[r].ranks[nl - 1].gold_rank == 1;
                b += u64::from(here && !last);
                c += u64::from(last && !here);
            }
            if b + c == 0 {
                continue;
            }
            let p = mcnemar_one_sided(b, c);
            if best.best_layer.is_none() || p < best.p_value {
                best.best_layer = Some(table.layers[li]);
                best.p_value = p;
                best.discordant = (b, c);
            }
        }
        best.verdict = best.best_layer.is_some() && best.p_value < level;
        relations.insert(rel.to_string(), best);
    }
    let yes = relations.values().filter(|v| v.verdict).count();
    let fraction = if relations.is_empty() { 0.0 } else { yes as f64 / relations.len() as f64 };
    Ok(IntermediateReport { alpha, bonferroni, fraction, relations, excluded })
}
