use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::vocab::{split_words, Vocabulary, MASK_TOKEN};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProbeSetKind {
    GoogleRe,
    TRex,
    ConceptNet,
    Squad,
    Custom,
}

impl ProbeSetKind {
    /// Guesses the kind from a file stem such as `Google_RE` or `trex_test`.
    pub fn infer(name: &str) -> Self {
        let n: String = name
            .to_lowercase()
            .chars()
            .filter(char::is_ascii_alphanumeric)
            .collect();
        if n.contains("googlere") {
            Self::GoogleRe
        } else if n.contains("trex") {
            Self::TRex
        } else if n.contains("conceptnet") {
            Self::ConceptNet
        } else if n.contains("squad") {
            Self::Squad
        } else {
            Self::Custom
        }
    }
}

/// Published sizes of the LAMA reference sets: (instances, relations).
pub fn reference_counts(kind: ProbeSetKind) -> Option<(usize, Option<usize>)> {
    match kind {
        ProbeSetKind::ConceptNet => Some((12514, None)),
        ProbeSetKind::TRex => Some((34017, Some(41))),
        ProbeSetKind::GoogleRe => Some((5528, Some(3))),
        ProbeSetKind::Squad => Some((305, None)),
        ProbeSetKind::Custom => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactProbe {
    pub id: String,
    pub subject: String,
    pub relation_id: Option<String>,
    pub object_label: String,
    pub template: String,
    pub evidences: Vec<String>,
    pub probe_set: ProbeSetKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub name: String,
    pub kind: ProbeSetKind,
    pub probes: Vec<FactProbe>,
    pub relations: BTreeMap<String, Vec<String>>,
}

impl ProbeSet {
    pub fn new(name: impl Into<String>, kind: ProbeSetKind, probes: Vec<FactProbe>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut relations: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for p in &probes {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate probe id {:?}", p.id)));
            }
            if let Some(rel) = &p.relation_id {
                relations.entry(rel.clone()).or_default().push(p.id.clone());
            }
        }
        Ok(Self {
            name: name.into(),
            kind,
            probes,
            relations,
        })
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    /// Writes the line-delimited probe format accepted by [`load_probe_set`].
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        for p in &self.probes {
            let mut rec = serde_json::json!({
                "id": p.id,
                "sub_label": p.subject,
                "obj_label": p.object_label,
                "masked_sentence": p.template,
            });
            if let Some(rel) = &p.relation_id {
                rec["relation"] = rel.clone().into();
            }
            if !p.evidences.is_empty() {
                rec["evidences"] = p.evidences.clone().into();
            }
            writeln!(f, "{rec}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum RejectReason {
    InvalidJson(String),
    MissingField(&'static str),
    NoMask,
    MultipleMasks,
    MultiTokenObject,
    OutOfVocabularyObject,
    DuplicateId,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidJson(e) => write!(f, "invalid json: {e}"),
            Self::MissingField(name) => write!(f, "missing field {name}"),
            Self::NoMask => f.write_str("no mask"),
            Self::MultipleMasks => f.write_str("multiple masks"),
            Self::MultiTokenObject => f.write_str("multi-token object"),
            Self::OutOfVocabularyObject => f.write_str("out-of-vocabulary object"),
            Self::DuplicateId => f.write_str("duplicate id"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    /// 1-based line number in the source file.
    pub line: usize,
    pub id: Option<String>,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedProbeSet {
    pub set: ProbeSet,
    pub rejections: Vec<Rejection>,
}

impl LoadedProbeSet {
    pub fn rejected_count(&self) -> usize {
        self.rejections.len()
    }
}

/// Loads a probe file, keeping only probes whose object is a single
/// in-vocabulary token. The set name is the file stem.
pub fn load_probe_set(path: &Path, vocab: &Vocabulary) -> Result<LoadedProbeSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let kind = ProbeSetKind::infer(&name);
    let mut probes = Vec::new();
    let mut rejections = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        match parse_record(&line, kind, vocab) {
            Ok(probe) => {
                if seen.insert(probe.id.clone()) {
                    probes.push(probe);
                } else {
                    rejections.push(Rejection {
                        line: line_no,
                        id: Some(probe.id),
                        reason: RejectReason::DuplicateId,
                    });
                }
            }
            Err((id, reason)) => rejections.push(Rejection {
                line: line_no,
                id,
                reason,
            }),
        }
    }
    if !rejections.is_empty() {
        log::info!(
            "{}: accepted {} probes, rejected {}",
            path.display(),
            probes.len(),
            rejections.len()
        );
    }
    Ok(LoadedProbeSet {
        set: ProbeSet::new(name, kind, probes)?,
        rejections,
    })
}

fn parse_record(
    line: &str,
    kind: ProbeSetKind,
    vocab: &Vocabulary,
) -> std::result::Result<FactProbe, (Option<String>, RejectReason)> {
    let value: Value = serde_json::from_str(line)
        .map_err(|e| (None, RejectReason::InvalidJson(e.to_string())))?;
    let field = |name: &'static str| -> std::result::Result<String, RejectReason> {
        value
            .get(name)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or(RejectReason::MissingField(name))
    };
    let id = field("id").map_err(|r| (None, r))?;
    let fail = |r| (Some(id.clone()), r);
    let subject = field("sub_label").map_err(fail)?;
    let object_label = field("obj_label").map_err(fail)?;
    let template = field("masked_sentence").map_err(fail)?;
    match template.matches(MASK_TOKEN).count() {
        0 => return Err(fail(RejectReason::NoMask)),
        1 => {}
        _ => return Err(fail(RejectReason::MultipleMasks)),
    }
    let words = split_words(&object_label);
    if words.len() != 1 {
        return Err(fail(RejectReason::MultiTokenObject));
    }
    if vocab.id(&words[0]).is_none() {
        return Err(fail(RejectReason::OutOfVocabularyObject));
    }
    let relation_id = value
        .get("relation")
        .and_then(Value::as_str)
        .map(str::to_string);
    let evidences = value
        .get("evidences")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(|e| e.as_str().map(str::to_string)).collect())
        .unwrap_or_default();
    Ok(FactProbe {
        id,
        subject,
        relation_id,
        object_label,
        template,
        evidences,
        probe_set: kind,
    })
}

/// Reads all non-empty lines of a text file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_corpus(
            ["the capital of germany is berlin . rocks are solid . paris rome"],
            1,
        )
    }

    fn write(lines: &[String]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("TREx_custom.jsonl");
        fs::write(&p, lines.join("\n")).unwrap();
        (dir, p)
    }

    fn rec(id: &str, obj: &str, tmpl: &str) -> String {
        serde_json::json!({"id": id, "sub_label": "Germany", "relation": "capital",
            "obj_label": obj, "masked_sentence": tmpl})
        .to_string()
    }

    #[test]
    fn accepts_capital_of_germany() {
        let (_d, p) = write(&[rec("p1", "Berlin", "The capital of Germany is [MASK].")]);
        let loaded = load_probe_set(&p, &vocab()).unwrap();
        assert_eq!(loaded.set.len(), 1);
        assert_eq!(loaded.set.kind, ProbeSetKind::TRex);
        assert_eq!(loaded.set.relations["capital"], vec!["p1".to_string()]);
        assert!(loaded.rejections.is_empty());
    }

    #[test]
    fn rejects_multiple_masks_and_missing_fields() {
        let (_d, p) = write(&[
            rec("p1", "Berlin", "The [MASK] of [MASK]"),
            r#"{"id":"p2","sub_label":"x","masked_sentence":"a [MASK]"}"#.into(),
            rec("p3", "Berlin", "no mask here"),
            "not json".into(),
            rec("p4", "New York", "born in [MASK]."),
        ]);
        let loaded = load_probe_set(&p, &vocab()).unwrap();
        assert!(loaded.set.is_empty());
        let reasons: Vec<_> = loaded.rejections.iter().map(|r| r.reason.to_string()).collect();
        assert_eq!(reasons[0], "multiple masks");
        assert_eq!(reasons[1], "missing field obj_label");
        assert_eq!(reasons[2], "no mask");
        assert!(reasons[3].starts_with("invalid json"));
        assert_eq!(reasons[4], "multi-token object");
    }

    #[test]
    fn filters_out_of_vocabulary_objects() {
        let v = vocab();
        let objects = [
            "Berlin", "Paris", "Atlantis", "Rome", "solid", "Gotham", "berlin", "Rome", "Xanadu",
            "paris",
        ];
        let lines: Vec<String> = objects
            .iter()
            .enumerate()
            .map(|(i, o)| rec(&format!("p{i}"), o, "x is [MASK]."))
            .collect();
        let (_d, p) = write(&lines);
        let loaded = load_probe_set(&p, &v).unwrap();
        // Independent filter: lowercase the label and look it up directly.
        let expected_ok = objects
            .iter()
            .filter(|o| v.tokens().contains(&o.to_lowercase()))
            .count();
        assert_eq!(expected_ok, 7);
        assert_eq!(loaded.set.len(), expected_ok);
        assert_eq!(loaded.rejected_count(), 3);
        assert!(loaded
            .rejections
            .iter()
            .all(|r| r.reason == RejectReason::OutOfVocabularyObject));
    }

    #[test]
    fn loading_is_idempotent_and_round_trips() {
        let (_d, p) = write(&[
            rec("p1", "Berlin", "The capital of Germany is [MASK]."),
            rec("p2", "Paris", "[MASK] is nice."),
        ]);
        let v = vocab();
        let a = load_probe_set(&p, &v).unwrap();
        let b = load_probe_set(&p, &v).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("TREx_custom.jsonl");
        a.set.save_jsonl(&out).unwrap();
        assert_eq!(load_probe_set(&out, &v).unwrap().set, a.set);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let (_d, p) = write(&[rec("p1", "Berlin", "a [MASK]"), rec("p1", "Paris", "b [MASK]")]);
        let loaded = load_probe_set(&p, &vocab()).unwrap();
        assert_eq!(loaded.set.len(), 1);
        assert_eq!(loaded.rejections[0].reason, RejectReason::DuplicateId);
    }

    #[test]
    fn unreadable_file_is_fatal() {
        assert!(matches!(
            load_probe_set(Path::new("/nonexistent/probes.jsonl"), &vocab()),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn reference_counts_match_published_table() {
        assert_eq!(reference_counts(ProbeSetKind::ConceptNet), Some((12514, None)));
        assert_eq!(reference_counts(ProbeSetKind::TRex), Some((34017, Some(41))));
        assert_eq!(reference_counts(ProbeSetKind::GoogleRe), Some((5528, Some(3))));
        assert_eq!(reference_counts(ProbeSetKind::Squad), Some((305, None)));
        assert_eq!(ProbeSetKind::infer("Google_RE"), ProbeSetKind::GoogleRe);
        assert_eq!(ProbeSetKind::infer("ConceptNet"), ProbeSetKind::ConceptNet);
    }
}
