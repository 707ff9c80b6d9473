//! Trained tagger files.
//!
//! ```text
//! "ELMTASK1"
//! u32 config length, config text (task.* keys, plus elmo.layers / elmo.dim)
//! u32 word count, per word: u16 length, UTF-8 bytes
//! u32 tag count, per tag: u16 length, UTF-8 bytes
//! u32 tensor count, per tensor: same record as checkpoints
//! ```
//!
//! Tensor names are prefixed `tagger.`, `mix_input.` or `mix_output.`.

use std::fs;
use std::path::Path;

use crate::checkpoint::{ByteReader, ByteWriter};
use crate::config::{Configurable, KeyValues};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::rng::SeedRng;

use super::{TaskConfig, Tagger};

pub const TAGGER_MAGIC: &[u8; 8] = b"ELMTASK1";

pub fn encode_tagger(tagger: &Tagger) -> Result<Vec<u8>> {
    let mut kv = KeyValues::new();
    tagger.config().write("task", &mut kv);
    if let Some((layers, dim)) = tagger.elmo_shape() {
        kv.set("elmo.layers", layers);
        kv.set("elmo.dim", dim);
    }
    let config = kv.to_text();
    let mut w = ByteWriter::default();
    w.bytes(TAGGER_MAGIC);
    w.len_u32(config.len(), "config block")?;
    w.bytes(config.as_bytes());
    for list in [tagger.words().tokens(), tagger.tags()] {
        w.len_u32(list.len(), "string table")?;
        for s in list {
            w.str_u16(s, "string")?;
        }
    }
    let mut records = Vec::new();
    records.extend(tagger.params().iter().map(|(n, t)| (format!("tagger.{n}"), t)));
    for (place, mix) in tagger.mixes() {
        records.extend(mix.params().iter().map(|(n, t)| (format!("mix_{place}.{n}"), t)));
    }
    w.len_u32(records.len(), "tensor count")?;
    for (name, t) in records {
        w.tensor(&name, t)?;
    }
    Ok(w.buf)
}

pub fn decode_tagger(bytes: &[u8]) -> Result<Tagger> {
    let mut r = ByteReader::new(bytes);
    if r.take(8).ok() != Some(&TAGGER_MAGIC[..]) {
        return Err(Error::Format("not a tagger file (bad magic or version)".into()));
    }
    let config_len = r.u32()? as usize;
    let kv = KeyValues::parse(r.utf8(config_len)?).map_err(|e| Error::Format(format!("config block: {e}")))?;
    let mut lists = Vec::with_capacity(2);
    for _ in 0..2 {
        let n = r.u32()? as usize;
        lists.push((0..n).map(|_| r.str_u16().map(str::to_string)).collect::<Result<Vec<_>>>()?);
    }
    let n = r.u32()? as usize;
    let stored = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    r.finish()?;

    let mut config = TaskConfig::default();
    config.apply("task", &kv).map_err(|e| Error::Format(e.to_string()))?;
    let layers: Option<usize> = kv.get("elmo.layers").map_err(|e| Error::Format(e.to_string()))?;
    let dim: Option<usize> = kv.get("elmo.dim").map_err(|e| Error::Format(e.to_string()))?;
    kv.reject_unused().map_err(|e| Error::Format(e.to_string()))?;
    let tags = lists.pop().expect("two lists");
    let words = Vocab::from_tokens(lists.pop().expect("two lists"))?;
    let elmo = layers.zip(dim);
    let mut tagger = Tagger::new(config, words, tags, elmo, &mut SeedRng::new(0)).map_err(|e| Error::Integrity(e.to_string()))?;

    let expected = tagger.params().len() + tagger.mixes().iter().map(|(_, m)| m.params().len()).sum::<usize>();
    if stored.len() != expected {
        return Err(Error::Integrity(format!(
            "tagger file holds {} tensors, configuration implies {expected}",
            stored.len()
        )));
    }
    for (name, t) in stored {
        let (group, rest) = name
            .split_once('.')
            .ok_or_else(|| Error::Integrity(format!("tensor {name} has no group prefix")))?;
        let store = match group {
            "tagger" => tagger.params_mut(),
            "mix_input" => tagger.mixes_mut().0.map(|m| m.params_mut()).ok_or_else(|| Error::Integrity("unexpected input mix".into()))?,
            "mix_output" => tagger.mixes_mut().1.map(|m| m.params_mut()).ok_or_else(|| Error::Integrity("unexpected output mix".into()))?,
            _ => return Err(Error::Integrity(format!("unknown parameter group in {name}"))),
        };
        store.assign(rest, t)?;
    }
    Ok(tagger)
}

pub fn save_tagger(tagger: &Tagger, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_tagger(tagger)?)?;
    Ok(())
}

pub fn load_tagger(path: impl AsRef<Path>) -> Result<Tagger> {
    decode_tagger(&fs::read(path)?)
}
