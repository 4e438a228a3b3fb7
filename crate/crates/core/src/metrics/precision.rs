use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ranking::LayerRankTable;
use crate::error::{Error, Result};

pub const DEFAULT_KS: [usize; 3] = [1, 10, 100];

/// Key used for the all-probes group.
pub const ALL: &str = "all";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub precision: f64,
    pub hits: usize,
    pub n: usize,
}

impl Cell {
    fn from_ranks(ranks: impl Iterator<Item = usize>, k: usize) -> Option<Self> {
        let (mut hits, mut n) = (0, 0);
        for r in ranks {
            n += 1;
            hits += usize::from(r <= k);
        }
        (n > 0).then(|| Cell { precision: hits as f64 / n as f64, hits, n })
    }
}

/// Fraction of ranks ≤ k, or `None` when there are no ranks.
pub fn precision_of(ranks: &[usize], k: usize) -> Option<f64> {
    Cell::from_ranks(ranks.iter().copied(), k).map(|c| c.precision)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    All,
    PerRelation,
}

/// group → layer → cell. The `All` grouping uses the single key `"all"`;
/// per-relation grouping leaves out probes without a relation. Groups with no
/// probes do not appear.
pub fn precision_at_k(table: &LayerRankTable, k: usize, grouping: Grouping) -> Result<BTreeMap<String, BTreeMap<usize, Cell>>> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, row) in table.rows.iter().enumerate() {
        let key = match grouping {
            Grouping::All => Some(ALL.to_string()),
            Grouping::PerRelation => row.relation_id.clone(),
        };
        if let Some(key) = key {
            groups.entry(key).or_default().push(i);
        }
    }
    Ok(groups
        .into_iter()
        .map(|(g, rows)| {
            let cells = table
                .layers
                .iter()
                .enumerate()
                .filter_map(|(li, &l)| {
                    Cell::from_ranks(rows.iter().map(|&r| table.rows[r].ranks[li].gold_rank), k).map(|c| (l, c))
                })
                .collect();
            (g, cells)
        })
        .collect())
}

/// P@k for every layer, overall and per relation, for each k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub ks: Vec<usize>,
    pub layers: Vec<usize>,
    /// layer → k → cell
    pub overall: BTreeMap<usize, BTreeMap<usize, Cell>>,
    /// relation → layer → k → cell
    pub per_relation: BTreeMap<String, BTreeMap<usize, BTreeMap<usize, Cell>>>,
}

impl LayerMetrics {
    pub fn compute(table: &LayerRankTable, ks: &[usize]) -> Result<Self> {
        let ks: Vec<usize> = ks.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let mut overall: BTreeMap<usize, BTreeMap<usize, Cell>> = BTreeMap::new();
        let mut per_relation: BTreeMap<String, BTreeMap<usize, BTreeMap<usize, Cell>>> = BTreeMap::new();
        for &k in &ks {
            for (_, layers) in precision_at_k(table, k, Grouping::All)? {
                for (l, c) in layers {
                    overall.entry(l).or_default().insert(k, c);
                }
            }
            for (rel, layers) in precision_at_k(table, k, Grouping::PerRelation)? {
                for (l, c) in layers {
                    per_relation.entry(rel.clone()).or_default().entry(l).or_default().insert(k, c);
                }
            }
        }
        Ok(Self { ks, layers: table.layers.clone(), overall, per_relation })
    }

    pub fn p_at(&self, layer: usize, k: usize) -> Option<f64> {
        self.overall.get(&layer)?.get(&k).map(|c| c.precision)
    }

    pub fn relation_p_at(&self, relation: &str, layer: usize, k: usize) -> Option<f64> {
        self.per_relation.get(relation)?.get(&layer)?.get(&k).map(|c| c.precision)
    }
}
