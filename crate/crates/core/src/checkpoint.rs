//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ELMCKPT1"
//! u32 tensor count
//! per tensor: u16 name length, name, u8 rank, u32 dims…, f32 values
//! u32 config length, config text (key=value lines)
//! u32 token count, per token: u16 length, UTF-8 bytes
//! ```
//!
//! Tensor names carry their group prefix, e.g. `forward.layer.0.gates`.
//! Values are stored as 32-bit floats; a model whose values are already
//! representable in 32 bits (see [`BiLm::round_to_f32`]) round-trips
//! exactly.

use std::fs;
use std::path::Path;

use crate::bilm::{BiLm, BiLmConfig};
use crate::charcnn::CharCnnConfig;
use crate::config::{Configurable, KeyValues};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ELMCKPT1";

/// Little-endian writer helpers shared by the binary formats.
#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f64) {
        self.bytes(&(v as f32).to_le_bytes());
    }

    pub fn len_u16(&mut self, n: usize, what: &str) -> Result<()> {
        let n = u16::try_from(n).map_err(|_| Error::Format(format!("{what} too long ({n} bytes)")))?;
        self.u16(n);
        Ok(())
    }

    pub fn len_u32(&mut self, n: usize, what: &str) -> Result<()> {
        let n = u32::try_from(n).map_err(|_| Error::Format(format!("{what} too large ({n})")))?;
        self.u32(n);
        Ok(())
    }

    pub fn str_u16(&mut self, s: &str, what: &str) -> Result<()> {
        self.len_u16(s.len(), what)?;
        self.bytes(s.as_bytes());
        Ok(())
    }

    /// Named tensor record: name, rank, dims, f32 values.
    pub fn tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.str_u16(name, "tensor name")?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format("tensor rank above 255".into()))?;
        self.u8(rank);
        for &d in t.shape() {
            self.len_u32(d, "dimension")?;
        }
        t.data().iter().for_each(|&v| self.f32(v));
        Ok(())
    }
}

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        ByteReader { data, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Format(format!("truncated file at byte {}", self.pos)));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("payload size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub fn utf8(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }

    pub fn str_u16(&mut self) -> Result<&'a str> {
        let n = self.u16()? as usize;
        self.utf8(n)
    }

    pub fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.str_u16()?.to_string();
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format(format!("tensor {name}: shape overflow")))?;
        let data = self.f32s(numel)?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

/// The config block written into checkpoints.
pub fn model_config_text(model: &BiLm) -> String {
    let mut kv = KeyValues::new();
    model.charcnn_config().write("charcnn", &mut kv);
    model.config().write("bilm", &mut kv);
    kv.to_text()
}

pub fn encode_checkpoint(model: &BiLm) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(CHECKPOINT_MAGIC);
    let groups = model.param_groups();
    w.len_u32(groups.iter().map(|(_, s)| s.len()).sum(), "tensor count")?;
    for (prefix, store) in groups {
        for (name, t) in store.iter() {
            w.tensor(&format!("{prefix}.{name}"), t)?;
        }
    }
    let config = model_config_text(model);
    w.len_u32(config.len(), "config block")?;
    w.bytes(config.as_bytes());
    let tokens = model.vocab().tokens();
    w.len_u32(tokens.len(), "vocabulary")?;
    for tok in tokens {
        w.str_u16(tok, "token")?;
    }
    Ok(w.buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<BiLm> {
    let mut r = ByteReader::new(bytes);
    if r.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::Format("not a checkpoint (bad magic or version)".into()));
    }
    let n = r.u32()? as usize;
    let mut stored = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        stored.push(r.tensor()?);
    }
    let config_len = r.u32()? as usize;
    let kv = KeyValues::parse(r.utf8(config_len)?).map_err(|e| Error::Format(format!("config block: {e}")))?;
    let n_tok = r.u32()? as usize;
    let tokens = (0..n_tok).map(|_| r.str_u16().map(str::to_string)).collect::<Result<Vec<_>>>()?;
    r.finish()?;

    let mut charcnn = CharCnnConfig::default();
    let mut bilm = BiLmConfig::default();
    charcnn.apply("charcnn", &kv)?;
    bilm.apply("bilm", &kv)?;
    kv.reject_unused().map_err(|e| Error::Format(e.to_string()))?;
    let vocab = Vocab::from_tokens(tokens).map_err(|e| Error::Format(format!("vocabulary: {e}")))?;
    let mut model = BiLm::new(bilm, charcnn, vocab, 0).map_err(|e| Error::Integrity(format!("config: {e}")))?;

    let expected: usize = model.param_groups().iter().map(|(_, s)| s.len()).sum();
    if stored.len() != expected {
        return Err(Error::Integrity(format!(
            "checkpoint holds {} tensors, configuration implies {expected}",
            stored.len()
        )));
    }
    let mut groups = model.param_groups_mut();
    for (name, t) in stored {
        let (prefix, rest) = name
            .split_once('.')
            .ok_or_else(|| Error::Integrity(format!("tensor {name} has no group prefix")))?;
        let store = groups
            .iter_mut()
            .find(|(p, _)| *p == prefix)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Integrity(format!("unknown parameter group in {name}")))?;
        store.assign(rest, t)?;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &BiLm, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<BiLm> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_vocab;

    fn model() -> BiLm {
        let corpus = vec![vec!["héllo".to_string(), "world".to_string()]];
        let c = CharCnnConfig {
            filters: vec![(1, 3), (2, 3)],
            d_proj: 6,
            ..CharCnnConfig::default()
        };
        let b = BiLmConfig {
            d_cell: 8,
            d_proj: 6,
            cell_clip: None,
            ..BiLmConfig::default()
        };
        let mut m = BiLm::new(b, c, build_vocab(&corpus, 1).unwrap(), 9).unwrap();
        m.round_to_f32();
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = encode_checkpoint(&m).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert_eq!(back.config(), m.config());
        assert_eq!(back.vocab(), m.vocab());
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_checkpoint(&model()).unwrap();
        let mut bad = bytes.clone();
        bad[7] = b'2';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_checkpoint(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn shape_mismatch_is_integrity_error() {
        let m = model();
        let bytes = encode_checkpoint(&m).unwrap();
        // Rewrite the config so d_cell disagrees with the stored tensors.
        let text = model_config_text(&m);
        let bent = text.replace("bilm.d_cell=8", "bilm.d_cell=9");
        let start = bytes.windows(text.len()).position(|w| w == text.as_bytes()).unwrap();
        let mut bad = bytes[..start].to_vec();
        bad.extend_from_slice(bent.as_bytes());
        bad.extend_from_slice(&bytes[start + text.len()..]);
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Integrity(_))));
    }
}
