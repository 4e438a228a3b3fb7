//! A small synthetic world: a pretraining corpus, a held-out corpus and four
//! 100-fact probe sets shaped like the LAMA families. Everything is a pure
//! function of the seed.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FactProbe, ProbeSet, ProbeSetKind, Vocabulary, MASK_TOKEN};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub seed: u64,
    pub facts_per_set: usize,
    /// Distinct objects per relation.
    pub objects_per_relation: usize,
    /// Generic filler sentences in the pretraining corpus.
    pub corpus_lines: usize,
    pub heldout_lines: usize,
    /// Fraction of facts whose evidence sentence also appears in the pretraining corpus.
    pub corpus_fact_fraction: f64,
    /// Extra corpus sentences per relation about subjects outside every
    /// probe set, so pretraining sees each relation with its object pool.
    pub background_per_relation: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            facts_per_set: 100,
            objects_per_relation: 8,
            corpus_lines: 600,
            heldout_lines: 100,
            corpus_fact_fraction: 0.3,
            background_per_relation: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorld {
    pub corpus: Vec<String>,
    pub heldout: Vec<String>,
    /// In training order: google_re, trex, conceptnet, squad.
    pub probe_sets: Vec<ProbeSet>,
    pub vocab: Vocabulary,
}

struct Relation {
    id: Option<&'static str>,
    template: &'static str,
    evidence: &'static [&'static str],
}

const SETS: [(&str, ProbeSetKind, [Relation; 2]); 4] = [
    (
        "google_re",
        ProbeSetKind::GoogleRe,
        [
            Relation {
                id: Some("place_of_birth"),
                template: "{s} was born in {o} .",
                evidence: &["records show that {s} was born in {o} in the winter .", "{s} , who was born in {o} , spent a long life there ."],
            },
            Relation {
                id: Some("place_of_death"),
                template: "{s} died in {o} .",
                evidence: &["after many years {s} died in {o} at home .", "it is said that {s} died in {o} during the summer ."],
            },
        ],
    ),
    (
        "trex",
        ProbeSetKind::TRex,
        [
            Relation {
                id: Some("P108"),
                template: "{s} works for {o} .",
                evidence: &["for a long time {s} works for {o} in the city .", "today {s} works for {o} and likes it ."],
            },
            Relation {
                id: Some("P463"),
                template: "{s} is a member of {o} .",
                evidence: &["since the spring {s} is a member of {o} .", "as we know {s} is a member of {o} with friends ."],
            },
        ],
    ),
    (
        "conceptnet",
        ProbeSetKind::ConceptNet,
        [
            Relation {
                id: Some("UsedFor"),
                template: "a {s} is used for {o} .",
                evidence: &["in most homes a {s} is used for {o} every day .", "people say a {s} is used for {o} ."],
            },
            Relation {
                id: Some("AtLocation"),
                template: "you can find a {s} in the {o} .",
                evidence: &["if you look you can find a {s} in the {o} .", "sometimes you can find a {s} in the {o} at night ."],
            },
        ],
    ),
    (
        "squad",
        ProbeSetKind::Squad,
        [
            Relation {
                id: None,
                template: "{s} is famous for its {o} .",
                evidence: &["the town of {s} is famous for its {o} and its people .", "everyone knows {s} is famous for its {o} ."],
            },
            Relation {
                id: None,
                template: "the color of {s} is {o} .",
                evidence: &["in the old story the color of {s} is {o} .", "we saw that the color of {s} is {o} ."],
            },
        ],
    ),
];

const FILLER: &[&str] = &[
    "the", "a", "old", "new", "small", "large", "city", "river", "house", "road", "day", "night", "people",
    "friend", "story", "book", "music", "water", "light", "town", "market", "garden", "school", "table", "window",
    "walked", "saw", "found", "made", "took", "gave", "liked", "opened", "closed", "built", "near", "across",
    "under", "over", "with", "and", "but", "then", "quickly", "slowly", "green", "red", "blue", "warm", "cold",
    "morning", "evening", "letter", "song", "bridge", "field", "boat", "train", "dog", "cat", "bird", "tree",
];

const CONSONANTS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables)
        .map(|_| format!("{}{}", CONSONANTS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
        .collect()
}

/// Distinct pseudo-words not colliding with `taken`.
fn fresh_words(rng: &mut ChaCha8Rng, n: usize, syllables: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng, syllables);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn fill(pattern: &str, s: &str, o: &str) -> String {
    pattern.replace("{s}", s).replace("{o}", o)
}

fn filler_line(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(6..=12);
    let mut words: Vec<&str> = (0..len).map(|_| *FILLER.choose(rng).unwrap()).collect();
    words.push(".");
    words.join(" ")
}

pub fn generate(cfg: &ToyConfig) -> Result<ToyWorld> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut taken: BTreeSet<String> = FILLER.iter().map(|s| s.to_string()).collect();
    let mut probe_sets = Vec::new();
    let mut fact_lines = Vec::new();
    for (name, kind, relations) in &SETS {
        let subjects = fresh_words(&mut rng, cfg.facts_per_set, 3, &mut taken);
        let pools: Vec<Vec<String>> = relations
            .iter()
            .map(|_| fresh_words(&mut rng, cfg.objects_per_relation, 2, &mut taken))
            .collect();
        for (r, rel) in relations.iter().enumerate() {
            let others = fresh_words(&mut rng, cfg.background_per_relation, 3, &mut taken);
            for s in &others {
                let o = pools[r].choose(&mut rng).unwrap();
                let pattern = if rng.random_bool(0.5) { rel.template } else { rel.evidence.choose(&mut rng).unwrap() };
                fact_lines.push(fill(pattern, s, o));
            }
        }
        let mut probes = Vec::with_capacity(cfg.facts_per_set);
        for (i, s) in subjects.iter().enumerate() {
            let r = i % relations.len();
            let rel = &relations[r];
            // Balanced objects: each appears equally often within its relation.
            let o = &pools[r][(i / relations.len()) % pools[r].len()];
            let evidences: Vec<String> = rel.evidence.iter().map(|e| fill(e, s, o)).collect();
            if rng.random_bool(cfg.corpus_fact_fraction) {
                fact_lines.push(evidences[0].clone());
            }
            probes.push(FactProbe {
                id: format!("{name}_{i:03}"),
                subject: s.clone(),
                relation_id: rel.id.map(str::to_string),
                object_label: o.clone(),
                template: fill(rel.template, s, MASK_TOKEN),
                evidences,
                probe_set: *kind,
            });
        }
        probe_sets.push(ProbeSet::new(*name, *kind, probes)?);
    }
    let mut corpus: Vec<String> = (0..cfg.corpus_lines).map(|_| filler_line(&mut rng)).collect();
    corpus.extend(fact_lines);
    corpus.shuffle(&mut rng);
    let heldout: Vec<String> = (0..cfg.heldout_lines).map(|_| filler_line(&mut rng)).collect();

    let mut texts: Vec<String> = corpus.iter().chain(&heldout).cloned().collect();
    for set in &probe_sets {
        for p in &set.probes {
            texts.push(p.template.clone());
            texts.extend(p.evidences.iter().cloned());
            texts.push(p.object_label.clone());
        }
    }
    let vocab = Vocabulary::from_corpus(texts.iter().map(String::as_str), 1);
    Ok(ToyWorld { corpus, heldout, probe_sets, vocab })
}
