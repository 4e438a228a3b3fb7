use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MASK_TOKEN: &str = "[MASK]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const PAD_TOKEN: &str = "[PAD]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

/// Dense token table. Ids are list positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    mask_id: usize,
    unk_id: usize,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, mask_id: usize, unk_id: usize) -> Result<Self> {
        let v = tokens.len();
        if mask_id >= v || unk_id >= v {
            return Err(Error::Invalid(format!(
                "mask id {mask_id} / unk id {unk_id} outside vocabulary of size {v}"
            )));
        }
        if mask_id == unk_id {
            return Err(Error::Invalid("mask and unk token ids must differ".into()));
        }
        let mut index = HashMap::with_capacity(v);
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            mask_id,
            unk_id,
        })
    }

    /// Builds a vocabulary from raw text lines. Layout: `[MASK]`, `[UNK]`,
    /// `[PAD]`, `[CLS]`, `[SEP]`, then every word seen at least `min_count`
    /// times in lexicographic order.
    pub fn from_corpus<'a, I>(lines: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in lines {
            for w in split_words(line) {
                if w != MASK_TOKEN {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut tokens: Vec<String> = [MASK_TOKEN, UNK_TOKEN, PAD_TOKEN, CLS_TOKEN, SEP_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let words: Vec<String> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !tokens.contains(w))
            .map(|(w, _)| w)
            .collect();
        tokens.extend(words);
        Self::new(tokens, 0, 1).expect("corpus vocabulary layout is valid")
    }

    /// Reads the one-token-per-line format; lines 0 and 1 must be `[MASK]` and `[UNK]`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 2 || tokens[0] != MASK_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::Format(format!(
                "{}: lines 0 and 1 must be {MASK_TOKEN} and {UNK_TOKEN}",
                path.display()
            )));
        }
        Self::new(tokens, 0, 1)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if self.mask_id != 0 || self.unk_id != 1 {
            return Err(Error::Format(
                "vocabulary file requires [MASK] at id 0 and [UNK] at id 1".into(),
            ));
        }
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn mask_id(&self) -> usize {
        self.mask_id
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn pad_id(&self) -> Option<usize> {
        self.id(PAD_TOKEN)
    }

    pub fn cls_id(&self) -> Option<usize> {
        self.id(CLS_TOKEN)
    }

    pub fn sep_id(&self) -> Option<usize> {
        self.id(SEP_TOKEN)
    }

    /// Bracketed reserved tokens such as `[MASK]` and `[CLS]`.
    pub fn is_special(&self, id: usize) -> bool {
        id == self.mask_id
            || id == self.unk_id
            || self
                .token(id)
                .is_some_and(|t| t.len() > 2 && t.starts_with('[') && t.ends_with(']'))
    }

    /// Ids eligible as random replacement tokens during masking.
    pub fn regular_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_special(i)).collect()
    }
}

/// Lowercased whitespace-and-punctuation split. `[MASK]` survives as a single word.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut pieces = text.split(MASK_TOKEN).peekable();
    while let Some(piece) = pieces.next() {
        split_plain(piece, &mut out);
        if pieces.peek().is_some() {
            out.push(MASK_TOKEN.to_string());
        }
    }
    out
}

fn split_plain(text: &str, out: &mut Vec<String>) {
    let mut word = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            flush(&mut word, out);
        } else if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            flush(&mut word, out);
            out.push(c.to_lowercase().collect());
        }
    }
    flush(&mut word, out);
}

fn flush(word: &mut String, out: &mut Vec<String>) {
    if !word.is_empty() {
        out.push(std::mem::take(word));
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    split_words(text)
        .iter()
        .map(|w| {
            if w == MASK_TOKEN {
                vocab.mask_id()
            } else {
                vocab.id(w).unwrap_or(vocab.unk_id())
            }
        })
        .collect()
}

/// Joins tokens with single spaces, attaching punctuation to the preceding word.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for &id in ids {
        let tok = vocab.token(id).unwrap_or(UNK_TOKEN);
        let is_punct = tok.chars().count() == 1 && !tok.chars().all(char::is_alphanumeric);
        if !out.is_empty() && !is_punct {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}
