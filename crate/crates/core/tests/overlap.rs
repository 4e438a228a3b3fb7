use std::collections::{BTreeMap, BTreeSet};

use layerprobe::data::{FactProbe, ProbeSet, ProbeSetKind};
use layerprobe::overlap::{coverage_report, fact_covered, index_terms, InvertedIndex, MatchMode};
use layerprobe::Execution;
use proptest::prelude::*;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "albert", "einstein", "ulm", "born", "in", "was", "the", "city", "river", "paris", "france", "capital", "of",
    "berlin", "germany", "rome", "italy", "music", "piano", "red", "blue", "old", "new", "house", "tree",
];

fn random_docs(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, String)> {
    (0..n)
        .map(|i| {
            let len = rng.random_range(0..12);
            let words: Vec<&str> = (0..len).map(|_| *WORDS.choose(rng).unwrap()).collect();
            (i, words.join(" "))
        })
        .collect()
}

fn probe(id: usize, subject: &str, object: &str) -> FactProbe {
    FactProbe {
        id: format!("p{id:04}"),
        subject: subject.into(),
        relation_id: Some("P19".into()),
        object_label: object.into(),
        template: format!("{subject} was born in [MASK] ."),
        evidences: vec![],
        probe_set: ProbeSetKind::Custom,
    }
}

fn random_probes(rng: &mut ChaCha8Rng, n: usize) -> Vec<FactProbe> {
    (0..n)
        .map(|i| {
            let s = if rng.random_bool(0.5) {
                WORDS.choose(rng).unwrap().to_string()
            } else {
                format!("{} {}", WORDS.choose(rng).unwrap(), WORDS.choose(rng).unwrap())
            };
            probe(i, &s, WORDS.choose(rng).unwrap())
        })
        .collect()
}

/// Naive coverage: some document whose word list contains every subject and object word.
fn naive_covered(docs: &[(usize, String)], p: &FactProbe) -> bool {
    let need: Vec<String> = p.subject.to_lowercase().split_whitespace().chain(p.object_label.to_lowercase().split_whitespace()).map(String::from).collect();
    docs.iter().any(|(_, text)| {
        let have: Vec<&str> = text.split_whitespace().collect();
        need.iter().all(|w| have.contains(&w.as_str()))
    })
}

#[test]
fn postings_equal_naive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut docs = random_docs(&mut rng, 1000);
    docs.shuffle(&mut rng);
    let ix = InvertedIndex::build(&docs, Execution::Parallel, 37).unwrap();
    assert_eq!(ix, InvertedIndex::build(&docs, Execution::Sequential, 1000).unwrap());
    let mut naive: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for (id, text) in &docs {
        for w in text.split_whitespace() {
            naive.entry(w).or_default().insert(*id);
        }
    }
    assert_eq!(ix.num_terms(), naive.len());
    assert_eq!(ix.num_docs(), 1000);
    for (term, ids) in &naive {
        assert_eq!(ix.doc_ids(term), ids.iter().copied().collect::<Vec<_>>(), "term {term}");
    }
    for (id, text) in docs.iter().take(50) {
        for (pos, w) in text.split_whitespace().enumerate() {
            let posting = ix.postings(w).iter().find(|p| p.doc == *id).unwrap();
            assert!(posting.positions.contains(&(pos as u32)));
        }
    }
}

#[test]
fn coverage_verdicts_equal_naive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for round in 0..5 {
        let docs = random_docs(&mut rng, 500);
        let probes = random_probes(&mut rng, 200);
        let ix = InvertedIndex::build(&docs, Execution::Parallel, 64).unwrap();
        for p in &probes {
            assert_eq!(fact_covered(&ix, p, MatchMode::TokenAnd), naive_covered(&docs, p), "round {round} probe {p:?}");
        }
    }
}

#[test]
fn evidence_sentence_covers_its_fact() {
    let docs = vec![(0, "Albert Einstein was born in Ulm.".to_string())];
    let ix = InvertedIndex::build(&docs, Execution::Sequential, 8).unwrap();
    let p = probe(0, "Albert Einstein", "Ulm");
    assert!(fact_covered(&ix, &p, MatchMode::TokenAnd));
    assert!(fact_covered(&ix, &p, MatchMode::Phrase));
    assert_eq!(index_terms("Albert Einstein was born in Ulm."), vec!["albert", "einstein", "was", "born", "in", "ulm"]);
}

#[test]
fn split_subject_and_object_not_covered() {
    let docs = vec![(0, "albert einstein".to_string()), (1, "ulm".to_string())];
    let ix = InvertedIndex::build(&docs, Execution::Sequential, 8).unwrap();
    assert!(!fact_covered(&ix, &probe(0, "Albert Einstein", "Ulm"), MatchMode::TokenAnd));
}

#[test]
fn verbatim_facts_saturate_coverage() {
    let probes: Vec<FactProbe> = (0..30).map(|i| probe(i, &format!("subj{i}"), &format!("obj{i}"))).collect();
    let docs: Vec<(usize, String)> = probes.iter().enumerate().map(|(i, p)| (i, format!("{} was born in {} .", p.subject, p.object_label))).collect();
    let ix = InvertedIndex::build(&docs, Execution::Sequential, 8).unwrap();
    let set = ProbeSet::new("verbatim", ProbeSetKind::Custom, probes).unwrap();
    let r = coverage_report(&ix, &set, docs.len(), MatchMode::Phrase, Execution::Sequential).unwrap();
    assert_eq!((r.covered, r.total, r.coverage), (30, 30, 1.0));
    assert_eq!(r.facts_covered, 30);
}

#[test]
fn density_is_facts_over_passages() {
    // Table-7 shape: 12 621 covered facts over 8.8M passages.
    let n = 12_621;
    let probes: Vec<FactProbe> = (0..n).map(|i| probe(i, &format!("s{i}"), &format!("o{i}"))).collect();
    let docs: Vec<(usize, String)> = (0..n).map(|i| (i, format!("s{i} o{i}"))).collect();
    let ix = InvertedIndex::build(&docs, Execution::Parallel, 1024).unwrap();
    let set = ProbeSet::new("trex", ProbeSetKind::TRex, probes).unwrap();
    let r = coverage_report(&ix, &set, 8_800_000, MatchMode::TokenAnd, Execution::Parallel).unwrap();
    assert_eq!(r.facts_covered, 12_621);
    assert!((r.information_density - 12_621.0 / 8_800_000.0).abs() < 1e-18);
    assert!(coverage_report(&ix, &set, 0, MatchMode::TokenAnd, Execution::Sequential).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adding_documents_never_uncovers(seed in 0u64..10_000, extra in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let docs = random_docs(&mut rng, 40);
        let probes = random_probes(&mut rng, 30);
        let mut more = docs.clone();
        more.extend(random_docs(&mut rng, extra).into_iter().map(|(i, t)| (i + 40, t)));
        let (a, b) = (
            InvertedIndex::build(&docs, Execution::Sequential, 7).unwrap(),
            InvertedIndex::build(&more, Execution::Sequential, 7).unwrap(),
        );
        for p in &probes {
            for mode in [MatchMode::TokenAnd, MatchMode::Phrase] {
                prop_assert!(!fact_covered(&a, p, mode) || fact_covered(&b, p, mode));
            }
        }
    }

    #[test]
    fn coverage_ignores_document_order(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let docs = random_docs(&mut rng, 60);
        let set = ProbeSet::new("r", ProbeSetKind::Custom, random_probes(&mut rng, 40)).unwrap();
        let mut texts: Vec<String> = docs.iter().map(|(_, t)| t.clone()).collect();
        texts.shuffle(&mut rng);
        let permuted: Vec<(usize, String)> = texts.into_iter().enumerate().collect();
        for mode in [MatchMode::TokenAnd, MatchMode::Phrase] {
            let a = coverage_report(&InvertedIndex::build(&docs, Execution::Sequential, 9).unwrap(), &set, 60, mode, Execution::Sequential).unwrap();
            let b = coverage_report(&InvertedIndex::build(&permuted, Execution::Parallel, 4).unwrap(), &set, 60, mode, Execution::Parallel).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!((0.0..=1.0).contains(&a.coverage) && a.information_density >= 0.0);
        }
    }

    #[test]
    fn postings_sorted_and_in_range(seed in 0u64..10_000, n in 0usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut docs = random_docs(&mut rng, n);
        docs.shuffle(&mut rng);
        let ix = InvertedIndex::build(&docs, Execution::Parallel, 5).unwrap();
        let terms: Vec<String> = ix.terms().map(String::from).collect();
        for t in terms {
            let ids = ix.doc_ids(&t);
            prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(ids.iter().all(|&i| i < n));
        }
    }
}
