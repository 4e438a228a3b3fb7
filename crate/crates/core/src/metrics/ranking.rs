use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::data::{render_probe, MaskingConfig, ProbeMasking, ProbeSet, RenderMode, Vocabulary};
use crate::embedding_io::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::{DecoderHead, EncoderModel};

/// Gold rank under the ordering "higher logit first, equal logits by ascending id".
pub fn rank_of(logits: &[f64], gold: usize) -> usize {
    let g = logits[gold];
    1 + logits
        .iter()
        .enumerate()
        .filter(|&(id, &l)| l > g || (l == g && id < gold))
        .count()
}

fn by_score(logits: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b))
}

/// The `k` best ids in rank order.
pub fn top_k(logits: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(logits.len());
    if k == 0 {
        return Vec::new();
    }
    let mut ids: Vec<usize> = (0..logits.len()).collect();
    let cmp = by_score(logits);
    if k < ids.len() {
        ids.select_nth_unstable_by(k - 1, &cmp);
        ids.truncate(k);
    }
    ids.sort_unstable_by(&cmp);
    ids
}

/// Mask-position vectors for one probe, keyed by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRepresentation {
    pub probe_id: String,
    pub relation_id: Option<String>,
    pub gold_id: usize,
    pub vectors: BTreeMap<usize, Array1<f64>>,
}

/// Renders each probe (template, object masked) and records the hidden state
/// at the mask for every layer 0..=L. Probes that fail to render are returned
/// with the reason.
pub fn encoder_representations(
    model: &EncoderModel,
    probes: &ProbeSet,
    vocab: &Vocabulary,
    mode: RenderMode,
    cfg: &MaskingConfig,
    exec: Execution,
) -> (Vec<ProbeRepresentation>, Vec<(String, String)>) {
    let cfg = MaskingConfig { max_len: cfg.max_len.min(model.config.max_seq_len), ..*cfg };
    let out = exec.map(&probes.probes, |p| -> Result<ProbeRepresentation> {
        let row = render_probe(p, vocab, mode, ProbeMasking::Object, 0, &cfg)?;
        let hidden = model.forward(&row.token_ids, row.len())?;
        let pos = row.mask_positions[0];
        Ok(ProbeRepresentation {
            probe_id: p.id.clone(),
            relation_id: p.relation_id.clone(),
            gold_id: row.gold_ids[0],
            vectors: hidden.iter().enumerate().map(|(l, h)| (l, h.row(pos).to_owned())).collect(),
        })
    });
    let mut reps = Vec::new();
    let mut failed = Vec::new();
    for (p, r) in probes.probes.iter().zip(out) {
        match r {
            Ok(r) => reps.push(r),
            Err(e) => failed.push((p.id.clone(), e.to_string())),
        }
    }
    (reps, failed)
}

/// Groups archive records by probe index. Ids and relations come from
/// `probes` when given (indexed by position), else the index is the id.
pub fn archive_representations<I>(records: I, probes: Option<&ProbeSet>) -> Result<Vec<ProbeRepresentation>>
where
    I: IntoIterator<Item = Result<EmbeddingRecord>>,
{
    let mut by_probe: BTreeMap<u32, ProbeRepresentation> = BTreeMap::new();
    for r in records {
        let r = r?;
        let (id, relation) = match probes {
            Some(set) => {
                let p = set.probes.get(r.probe_index as usize).ok_or_else(|| {
                    Error::Invalid(format!("probe index {} beyond probe set of {}", r.probe_index, set.len()))
                })?;
                (p.id.clone(), p.relation_id.clone())
            }
            None => (r.probe_index.to_string(), None),
        };
        let entry = by_probe.entry(r.probe_index).or_insert_with(|| ProbeRepresentation {
            probe_id: id,
            relation_id: relation,
            gold_id: r.gold_token_id as usize,
            vectors: BTreeMap::new(),
        });
        if entry.gold_id != r.gold_token_id as usize {
            return Err(Error::Invalid(format!("probe {} has conflicting gold ids", r.probe_index)));
        }
        entry.vectors.insert(r.layer_index as usize, Array1::from(r.vector_f64()));
    }
    Ok(by_probe.into_values().collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRank {
    pub gold_rank: usize,
    pub top_k: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRow {
    pub probe_id: String,
    pub relation_id: Option<String>,
    pub gold_id: usize,
    /// Aligned with `LayerRankTable::layers`.
    pub ranks: Vec<LayerRank>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRankTable {
    pub layers: Vec<usize>,
    pub k: usize,
    /// Sorted by probe id.
    pub rows: Vec<RankRow>,
    pub skipped: Vec<String>,
}

impl LayerRankTable {
    pub fn last_layer(&self) -> Option<usize> {
        self.layers.last().copied()
    }

    /// Column of gold ranks for layer position `i` in `layers`.
    pub fn column(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.rows.iter().map(move |r| r.ranks[i].gold_rank)
    }
}

/// Ranks every probe's gold token at every layer that has a head.
///
/// Probes missing a vector at any of those layers are skipped (listed in
/// `skipped`, with a log warning) and take no part in any metric.
pub fn probe_all_layers(
    heads: &BTreeMap<usize, DecoderHead>,
    reps: &[ProbeRepresentation],
    k: usize,
    exec: Execution,
) -> Result<LayerRankTable> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let layers: Vec<usize> = heads.keys().copied().collect();
    let mut skipped = Vec::new();
    let mut usable = Vec::new();
    for r in reps {
        if layers.iter().all(|l| r.vectors.contains_key(l)) {
            usable.push(r);
        } else {
            log::warn!("probe {} lacks a representation at some probed layer; skipped", r.probe_id);
            skipped.push(r.probe_id.clone());
        }
    }
    let rows = exec.map(&usable, |r| -> Result<RankRow> {
        let mut ranks = Vec::with_capacity(layers.len());
        for (l, head) in heads {
            let v = &r.vectors[l];
            if v.len() != head.dim() {
                return Err(Error::DimensionMismatch { expected: head.dim(), found: v.len() });
            }
            if r.gold_id >= head.vocab_size() {
                return Err(Error::TokenOutOfRange { id: r.gold_id, vocab_size: head.vocab_size() });
            }
            let logits = head.logits_one(v.view()).to_vec();
            ranks.push(LayerRank { gold_rank: rank_of(&logits, r.gold_id), top_k: top_k(&logits, k) });
        }
        Ok(RankRow { probe_id: r.probe_id.clone(), relation_id: r.relation_id.clone(), gold_id: r.gold_id, ranks })
    });
    let mut rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.probe_id.cmp(&b.probe_id));
    skipped.sort();
    Ok(LayerRankTable { layers, k, rows, skipped })
}
