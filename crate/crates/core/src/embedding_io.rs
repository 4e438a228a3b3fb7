//! Archive of per-layer mask-token embeddings produced outside this engine.
//!
//! A directory holds `manifest.json`, `vectors.lpeb`, `vocab.txt` and an
//! optional `head_pretrained.bin`. The vectors file is `LPEB`, u32 version,
//! u32 record count, then fixed-stride records
//! `(u32 probe_index, u16 layer_index, u32 gold_token_id, d × f32)`, all
//! little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, tmp_path};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::DecoderHead;

pub const VECTORS_MAGIC: &[u8; 4] = b"LPEB";
pub const ARCHIVE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VECTORS_FILE: &str = "vectors.lpeb";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const HEAD_FILE: &str = "head_pretrained.bin";

const HEADER_LEN: u64 = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub format_version: u32,
    pub model_name: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub probe_set_name: String,
    pub record_count: u64,
    pub vectors_sha256: String,
}

impl EmbeddingManifest {
    /// A manifest with count and digest left for the writer to fill in.
    pub fn new(model_name: &str, num_layers: usize, hidden_dim: usize, vocab_size: usize, probe_set_name: &str) -> Self {
        Self {
            format_version: ARCHIVE_VERSION,
            model_name: model_name.to_string(),
            num_layers,
            hidden_dim,
            vocab_size,
            probe_set_name: probe_set_name.to_string(),
            record_count: 0,
            vectors_sha256: String::new(),
        }
    }

    fn stride(&self) -> u64 {
        10 + 4 * self.hidden_dim as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub probe_index: u32,
    pub layer_index: u16,
    pub gold_token_id: u32,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn vector_f64(&self) -> Vec<f64> {
        self.vector.iter().map(|&x| x as f64).collect()
    }

    fn validate(&self, m: &EmbeddingManifest, index: usize) -> Result<()> {
        if self.vector.len() != m.hidden_dim {
            return Err(Error::DimensionMismatch { expected: m.hidden_dim, found: self.vector.len() });
        }
        if self.gold_token_id as usize >= m.vocab_size {
            return Err(Error::TokenOutOfRange { id: self.gold_token_id as usize, vocab_size: m.vocab_size });
        }
        if self.layer_index as usize > m.num_layers {
            return Err(Error::Invalid(format!(
                "record {index}: layer {} beyond {} layers",
                self.layer_index, m.num_layers
            )));
        }
        if self.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("record {index} vector")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchivePaths {
    pub manifest: PathBuf,
    pub vectors: PathBuf,
}

/// Writes the manifest and vectors file. Every record is validated before
/// anything is renamed into place; `record_count` and `vectors_sha256` in the
/// returned manifest are the values actually written. A nonzero
/// `manifest.record_count` must match the number of records.
pub fn write_embeddings(
    manifest: &EmbeddingManifest,
    records: &[EmbeddingRecord],
    dir: &Path,
) -> Result<(EmbeddingManifest, ArchivePaths)> {
    if manifest.record_count != 0 && manifest.record_count != records.len() as u64 {
        return Err(Error::Invalid(format!(
            "manifest declares {} records, got {}",
            manifest.record_count,
            records.len()
        )));
    }
    for (i, r) in records.iter().enumerate() {
        r.validate(manifest, i)?;
    }
    let count = u32::try_from(records.len())
        .map_err(|_| Error::Invalid("too many records for u32 count".into()))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vectors = dir.join(VECTORS_FILE);
    let tmp = tmp_path(&vectors);
    let mut hasher = Sha256::new();
    let written = (|| -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        let mut put = |bytes: &[u8]| -> std::io::Result<()> {
            hasher.update(bytes);
            w.write_all(bytes)
        };
        put(VECTORS_MAGIC)?;
        put(&ARCHIVE_VERSION.to_le_bytes())?;
        put(&count.to_le_bytes())?;
        let mut buf = Vec::with_capacity(manifest.stride() as usize);
        for r in records {
            buf.clear();
            buf.extend_from_slice(&r.probe_index.to_le_bytes());
            buf.extend_from_slice(&r.layer_index.to_le_bytes());
            buf.extend_from_slice(&r.gold_token_id.to_le_bytes());
            for x in &r.vector {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            put(&buf)?;
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()
    })();
    if let Err(e) = written {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    let mut out = manifest.clone();
    out.format_version = ARCHIVE_VERSION;
    out.record_count = records.len() as u64;
    out.vectors_sha256 = hex::encode(hasher.finalize());
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&out)?;
    let manifest_tmp = tmp_path(&manifest_path);
    std::fs::write(&manifest_tmp, json).map_err(|e| Error::io(&manifest_tmp, e))?;
    std::fs::rename(&tmp, &vectors).map_err(|e| Error::io(&vectors, e))?;
    std::fs::rename(&manifest_tmp, &manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    Ok((out, ArchivePaths { manifest: manifest_path, vectors }))
}

/// Writes the vocabulary and, if given, the pretrained head next to the vectors.
pub fn write_archive_extras(dir: &Path, vocab: &Vocabulary, head: Option<&DecoderHead>) -> Result<()> {
    vocab.save(&dir.join(VOCAB_FILE))?;
    if let Some(h) = head {
        checkpoint::save_head(h, 0, &dir.join(HEAD_FILE))?;
    }
    Ok(())
}

/// An opened archive whose digest has been verified.
#[derive(Debug)]
pub struct EmbeddingArchive {
    dir: PathBuf,
    manifest: EmbeddingManifest,
}

/// Reads the manifest and checks the vectors file: header, exact size, then
/// digest. No record is yielded before all three pass.
pub fn read_embeddings(dir: &Path) -> Result<(EmbeddingManifest, RecordStream)> {
    let archive = EmbeddingArchive::open(dir)?;
    let stream = archive.records()?;
    Ok((archive.manifest, stream))
}

impl EmbeddingArchive {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: EmbeddingManifest = serde_json::from_str(&text)?;
        if manifest.format_version != ARCHIVE_VERSION {
            return Err(Error::UnsupportedVersion(manifest.format_version));
        }
        if manifest.hidden_dim == 0 {
            return Err(Error::Format("hidden_dim must be positive".into()));
        }
        let vectors = dir.join(VECTORS_FILE);
        let mut f = File::open(&vectors).map_err(|e| Error::io(&vectors, e))?;
        let mut header = [0u8; HEADER_LEN as usize];
        f.read_exact(&mut header).map_err(|_| Error::Truncated { record: 0, offset: 0 })?;
        if &header[..4] != VECTORS_MAGIC {
            return Err(Error::Format("vectors file has bad magic".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != ARCHIVE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = u32::from_le_bytes(header[8..12].try_into().unwrap()) as u64;
        if count != manifest.record_count {
            return Err(Error::Format(format!(
                "vectors header holds {count} records, manifest says {}",
                manifest.record_count
            )));
        }
        let len = f.metadata().map_err(|e| Error::io(&vectors, e))?.len();
        let expected = HEADER_LEN + count * manifest.stride();
        if len < expected {
            let record = (len - HEADER_LEN) / manifest.stride();
            return Err(Error::Truncated { record, offset: HEADER_LEN + record * manifest.stride() });
        }
        if len > expected {
            return Err(Error::Format(format!("{} trailing bytes in vectors file", len - expected)));
        }
        let computed = digest_file(&vectors)?;
        if !computed.eq_ignore_ascii_case(&manifest.vectors_sha256) {
            return Err(Error::DigestMismatch { expected: manifest.vectors_sha256.clone(), computed });
        }
        Ok(Self { dir: dir.to_path_buf(), manifest })
    }

    pub fn manifest(&self) -> &EmbeddingManifest {
        &self.manifest
    }

    /// Streams records in file order through a bounded buffer.
    pub fn records(&self) -> Result<RecordStream> {
        let path = self.dir.join(VECTORS_FILE);
        let mut reader = BufReader::with_capacity(64 * 1024, File::open(&path).map_err(|e| Error::io(&path, e))?);
        reader.seek(SeekFrom::Start(HEADER_LEN)).map_err(|e| Error::io(&path, e))?;
        Ok(RecordStream { reader, manifest: self.manifest.clone(), next: 0, buf: Vec::new() })
    }

    /// Reads one record by index using the fixed stride.
    pub fn record_at(&self, index: u64) -> Result<EmbeddingRecord> {
        if index >= self.manifest.record_count {
            return Err(Error::Invalid(format!("record {index} out of {}", self.manifest.record_count)));
        }
        let mut s = self.records()?;
        s.reader
            .seek(SeekFrom::Start(HEADER_LEN + index * self.manifest.stride()))
            .map_err(|e| Error::io(self.dir.join(VECTORS_FILE), e))?;
        s.next = index;
        s.next().expect("index checked")
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.dir.join(VOCAB_FILE))
    }

    pub fn pretrained_head(&self) -> Result<Option<DecoderHead>> {
        let path = self.dir.join(HEAD_FILE);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(checkpoint::load_head(&path)?.0))
    }
}

fn digest_file(path: &Path) -> Result<String> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = r.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub struct RecordStream {
    reader: BufReader<File>,
    manifest: EmbeddingManifest,
    next: u64,
    buf: Vec<u8>,
}

impl Iterator for RecordStream {
    type Item = Result<EmbeddingRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.manifest.record_count {
            return None;
        }
        let index = self.next;
        self.next += 1;
        let stride = self.manifest.stride();
        self.buf.resize(stride as usize, 0);
        if self.reader.read_exact(&mut self.buf).is_err() {
            self.next = self.manifest.record_count;
            return Some(Err(Error::Truncated { record: index, offset: HEADER_LEN + index * stride }));
        }
        let b = &self.buf;
        let rec = EmbeddingRecord {
            probe_index: u32::from_le_bytes(b[0..4].try_into().unwrap()),
            layer_index: u16::from_le_bytes(b[4..6].try_into().unwrap()),
            gold_token_id: u32::from_le_bytes(b[6..10].try_into().unwrap()),
            vector: b[10..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        };
        Some(rec.validate(&self.manifest, index as usize).map(|_| rec))
    }
}
