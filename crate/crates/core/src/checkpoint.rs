//! Binary checkpoints for encoders (`LPMD`) and decoding heads (`LPHD`).
//!
//! Both store parameters as little-endian f32 in declaration order. Loading
//! widens back to f64, so a save/load round trip is exact once parameters
//! have been rounded to f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{DecoderHead, EncoderConfig, EncoderModel, Parameterized};

pub const MODEL_MAGIC: &[u8; 4] = b"LPMD";
pub const HEAD_MAGIC: &[u8; 4] = b"LPHD";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn f32_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn f32_values(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

/// Rounds every parameter to the nearest f32, as a checkpoint would.
pub fn round_to_f32<M: Parameterized>(m: &mut M) {
    let mut v = Vec::new();
    m.params_mut(&mut v);
    for s in v {
        s.iter_mut().for_each(|x| *x = *x as f32 as f64);
    }
}

/// Writes via a sibling temp file renamed into place, so readers never see partial files.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    let res = (|| {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()
    })();
    if let Err(e) = res {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("file ends inside {what} at offset {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != expected {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }
}

/// magic, u32 version, u32 config length, config JSON, 32-byte SHA-256 of the
/// parameter region, u64 parameter count, parameters.
pub fn encode_model(model: &EncoderModel) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config)?;
    let params = f32_bytes(&model.to_flat());
    let mut out = Vec::with_capacity(params.len() + config.len() + 64);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&Sha256::digest(&params));
    out.extend_from_slice(&(model.num_params() as u64).to_le_bytes());
    out.extend_from_slice(&params);
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<EncoderModel> {
    let mut c = Cursor { bytes, pos: 0 };
    c.magic(MODEL_MAGIC)?;
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let len = c.u32("config length")? as usize;
    let config: EncoderConfig = serde_json::from_slice(c.take(len, "config")?)?;
    let digest = c.take(32, "digest")?;
    let count = c.u64("parameter count")? as usize;
    let mut model = EncoderModel::new(config)?;
    if count != model.num_params() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, config implies {}",
            model.num_params()
        )));
    }
    let region = c.take(count * 4, "parameters")?;
    let computed = Sha256::digest(region);
    if computed.as_slice() != digest {
        return Err(Error::DigestMismatch {
            expected: hex::encode(digest),
            computed: hex::encode(computed),
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    model.load_flat(&f32_values(region));
    Ok(model)
}

pub fn save_model(model: &EncoderModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode_model(model)?)
}

pub fn load_model(path: &Path) -> Result<EncoderModel> {
    decode_model(&read_all(path)?)
}

/// magic, u32 version, u16 layer, u32 d, u32 V, parameters.
pub fn encode_head(head: &DecoderHead, layer_index: usize) -> Result<Vec<u8>> {
    let layer = u16::try_from(layer_index)
        .map_err(|_| Error::Invalid(format!("layer index {layer_index} exceeds u16")))?;
    let mut out = Vec::with_capacity(head.num_params() * 4 + 18);
    out.extend_from_slice(HEAD_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&layer.to_le_bytes());
    out.extend_from_slice(&(head.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(head.vocab_size() as u32).to_le_bytes());
    out.extend_from_slice(&f32_bytes(&head.to_flat()));
    Ok(out)
}

/// Returns the head and its layer index.
pub fn decode_head(bytes: &[u8]) -> Result<(DecoderHead, usize)> {
    let mut c = Cursor { bytes, pos: 0 };
    c.magic(HEAD_MAGIC)?;
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let layer = c.u16("layer index")? as usize;
    let d = c.u32("hidden dim")? as usize;
    let v = c.u32("vocab size")? as usize;
    if d == 0 || v == 0 {
        return Err(Error::Format(format!("degenerate head shape {d}x{v}")));
    }
    let mut head = DecoderHead::zeros(d, v);
    let n = head.num_params();
    let region = c.take(n * 4, "parameters")?;
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    head.load_flat(&f32_values(region));
    Ok((head, layer))
}

pub fn head_file_name(layer_index: usize) -> String {
    format!("head_L{layer_index}.bin")
}

pub fn save_head(head: &DecoderHead, layer_index: usize, path: &Path) -> Result<()> {
    write_atomic(path, &encode_head(head, layer_index)?)
}

pub fn load_head(path: &Path) -> Result<(DecoderHead, usize)> {
    decode_head(&read_all(path)?)
}
