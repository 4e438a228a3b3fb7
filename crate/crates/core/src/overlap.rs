//! Inverted index over a corpus and probe-fact coverage.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{split_words, FactProbe, ProbeSet};
use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: usize,
    pub positions: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InvertedIndex {
    postings: BTreeMap<String, Vec<Posting>>,
    num_docs: usize,
}

/// Index terms of a text: probe tokenization with punctuation dropped.
pub fn index_terms(text: &str) -> Vec<String> {
    split_words(text)
        .into_iter()
        .filter(|w| w.chars().any(char::is_alphanumeric))
        .collect()
}

type Shard = BTreeMap<String, Vec<Posting>>;

fn index_shard(docs: &[(usize, String)]) -> Shard {
    let mut shard: Shard = BTreeMap::new();
    for (id, text) in docs {
        let mut local: BTreeMap<String, Vec<u32>> = BTreeMap::new();
        for (pos, term) in index_terms(text).into_iter().enumerate() {
            local.entry(term).or_default().push(pos as u32);
        }
        for (term, positions) in local {
            shard.entry(term).or_default().push(Posting { doc: *id, positions });
        }
    }
    shard
}

impl InvertedIndex {
    /// Builds over documents whose ids must be exactly 0..N−1 in any order.
    /// Shards are indexed through `exec` and merged with postings sorted by id.
    pub fn build(docs: &[(usize, String)], exec: Execution, shard_size: usize) -> Result<Self> {
        let n = docs.len();
        let mut seen = vec![false; n];
        for (id, _) in docs {
            if *id >= n {
                return Err(Error::Invalid(format!("document id {id} outside 0..{n}")));
            }
            if std::mem::replace(&mut seen[*id], true) {
                return Err(Error::Invalid(format!("duplicate document id {id}")));
            }
        }
        let shards: Vec<&[(usize, String)]> = docs.chunks(shard_size.max(1)).collect();
        let built = exec.map(&shards, |s| index_shard(s));
        let mut postings: Shard = BTreeMap::new();
        for shard in built {
            for (term, list) in shard {
                postings.entry(term).or_default().extend(list);
            }
        }
        for list in postings.values_mut() {
            list.sort_by_key(|p| p.doc);
        }
        Ok(Self { postings, num_docs: n })
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    pub fn num_terms(&self) -> usize {
        self.postings.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Sorted, duplicate-free document ids containing `term`.
    pub fn doc_ids(&self, term: &str) -> Vec<usize> {
        self.postings(term).iter().map(|p| p.doc).collect()
    }

    /// Documents containing every term.
    pub fn docs_with_all(&self, terms: &[String]) -> Vec<usize> {
        let unique: BTreeSet<&String> = terms.iter().collect();
        let mut lists: Vec<&[Posting]> = unique.iter().map(|t| self.postings(t)).collect();
        if lists.is_empty() {
            return Vec::new();
        }
        lists.sort_by_key(|l| l.len());
        let mut acc: Vec<usize> = lists[0].iter().map(|p| p.doc).collect();
        for l in &lists[1..] {
            acc = intersect(&acc, l);
            if acc.is_empty() {
                break;
            }
        }
        acc
    }

    fn positions(&self, term: &str, doc: usize) -> &[u32] {
        let list = self.postings(term);
        match list.binary_search_by_key(&doc, |p| p.doc) {
            Ok(i) => &list[i].positions,
            Err(_) => &[],
        }
    }

    /// Whether `phrase` occurs as consecutive terms in `doc`.
    fn has_phrase(&self, doc: usize, phrase: &[String]) -> bool {
        let Some(first) = phrase.first() else { return false };
        self.positions(first, doc).iter().any(|&start| {
            phrase
                .iter()
                .enumerate()
                .skip(1)
                .all(|(i, t)| self.positions(t, doc).binary_search(&(start + i as u32)).is_ok())
        })
    }
}

fn intersect(a: &[usize], b: &[Posting]) -> Vec<usize> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j].doc) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Every subject token and every object token somewhere in one document.
    #[default]
    TokenAnd,
    /// Subject and object each as a contiguous phrase in one document.
    Phrase,
}

pub fn fact_covered(index: &InvertedIndex, probe: &FactProbe, mode: MatchMode) -> bool {
    let subject = index_terms(&probe.subject);
    let object = index_terms(&probe.object_label);
    if subject.is_empty() || object.is_empty() {
        return false;
    }
    let all: Vec<String> = subject.iter().chain(&object).cloned().collect();
    let docs = index.docs_with_all(&all);
    match mode {
        MatchMode::TokenAnd => !docs.is_empty(),
        MatchMode::Phrase => docs
            .into_iter()
            .any(|d| index.has_phrase(d, &subject) && index.has_phrase(d, &object)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub probe_set: String,
    /// Probes whose fact is covered.
    pub covered: usize,
    pub total: usize,
    pub coverage: f64,
    /// Distinct (subject, relation, object) facts covered.
    pub facts_covered: usize,
    pub passages: usize,
    pub information_density: f64,
    pub match_mode: MatchMode,
}

pub fn coverage_report(index: &InvertedIndex, probes: &ProbeSet, passages: usize, mode: MatchMode, exec: Execution) -> Result<OverlapReport> {
    if passages == 0 {
        return Err(Error::Invalid("passages must be positive".into()));
    }
    let verdicts = exec.map(&probes.probes, |p| fact_covered(index, p, mode));
    let mut facts = BTreeSet::new();
    let mut covered = 0;
    for (p, hit) in probes.probes.iter().zip(verdicts) {
        if hit {
            covered += 1;
            facts.insert((index_terms(&p.subject), p.relation_id.clone(), index_terms(&p.object_label)));
        }
    }
    let total = probes.len();
    Ok(OverlapReport {
        probe_set: probes.name.clone(),
        covered,
        total,
        coverage: if total == 0 { 0.0 } else { covered as f64 / total as f64 },
        facts_covered: facts.len(),
        passages,
        information_density: facts.len() as f64 / passages as f64,
        match_mode: mode,
    })
}

#[derive(Deserialize)]
struct JsonDoc {
    id: serde_json::Value,
    text: String,
}

/// Reads a corpus: one document per non-empty line, or JSON lines with `id`
/// and `text` when the first line is a JSON object. Integer ids are kept;
/// string ids are numbered in order of appearance.
pub fn read_corpus(path: &Path) -> Result<Vec<(usize, String)>> {
    let lines = crate::data::read_lines(path)?;
    let json = lines.first().is_some_and(|l| l.trim_start().starts_with('{'));
    if !json {
        return Ok(lines.into_iter().enumerate().collect());
    }
    let mut names: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let doc: JsonDoc = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        let id = match &doc.id {
            serde_json::Value::Number(n) => n
                .as_u64()
                .map(|n| n as usize)
                .ok_or_else(|| Error::Format(format!("line {}: id must be a non-negative integer", i + 1)))?,
            serde_json::Value::String(s) => {
                let next = names.len();
                if names.insert(s.clone(), next).is_some() {
                    return Err(Error::Invalid(format!("duplicate document id {s:?}")));
                }
                next
            }
            other => return Err(Error::Format(format!("line {}: unsupported id {other}", i + 1))),
        };
        out.push((id, doc.text));
    }
    Ok(out)
}
