//! `key=value` configuration blocks.
//!
//! The same text format is used for the config block inside checkpoints and
//! for `--config` files on the command line. Blank lines and lines starting
//! with `#` are ignored. Keys are dotted, e.g. `bilm.d_cell=128`.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::str::FromStr;

use crate::bilm::BiLmConfig;
use crate::charcnn::CharCnnConfig;
use crate::error::{Error, Result};
use crate::probes::ProbeConfig;

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl KeyValues {
    pub fn new() -> Self {
        KeyValues::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "empty key".into(),
                });
            }
            kv.entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(kv)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Argument(format!("cannot parse {key}={v}"))),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn update<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails on any key that no `get`/`raw` call has asked for.
    pub fn reject_unused(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.entries.keys().find(|k| !used.contains(*k)) {
            Some(k) => Err(Error::Argument(format!("unknown configuration key {k}"))),
            None => Ok(()),
        }
    }

    /// Sorted `key=value` lines, each ending in a newline.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Formats filter banks as `width x count` pairs, e.g. `1x4,2x8`.
pub fn format_filters(filters: &[(usize, usize)]) -> String {
    filters
        .iter()
        .map(|(w, c)| format!("{w}x{c}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_filters(text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(',')
        .map(|pair| {
            let bad = || Error::Argument(format!("filter {pair:?} is not WIDTHxCOUNT"));
            let (w, c) = pair.trim().split_once('x').ok_or_else(bad)?;
            Ok((w.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?))
        })
        .collect()
}

/// Types that read and write themselves under a key prefix.
pub trait Configurable {
    fn write(&self, prefix: &str, kv: &mut KeyValues);
    fn apply(&mut self, prefix: &str, kv: &KeyValues) -> Result<()>;
}

impl Configurable for CharCnnConfig {
    fn write(&self, prefix: &str, kv: &mut KeyValues) {
        kv.set(&format!("{prefix}.char_emb_dim"), self.char_emb_dim);
        kv.set(&format!("{prefix}.filters"), format_filters(&self.filters));
        kv.set(&format!("{prefix}.n_highway"), self.n_highway);
        kv.set(&format!("{prefix}.d_proj"), self.d_proj);
        kv.set(&format!("{prefix}.max_word_len"), self.max_word_len);
    }

    fn apply(&mut self, prefix: &str, kv: &KeyValues) -> Result<()> {
        kv.update(&format!("{prefix}.char_emb_dim"), &mut self.char_emb_dim)?;
        if let Some(f) = kv.raw(&format!("{prefix}.filters")) {
            self.filters = parse_filters(f)?;
        }
        kv.update(&format!("{prefix}.n_highway"), &mut self.n_highway)?;
        kv.update(&format!("{prefix}.d_proj"), &mut self.d_proj)?;
        kv.update(&format!("{prefix}.max_word_len"), &mut self.max_word_len)
    }
}

impl Configurable for BiLmConfig {
    fn write(&self, prefix: &str, kv: &mut KeyValues) {
        kv.set(&format!("{prefix}.layers"), self.layers);
        kv.set(&format!("{prefix}.d_cell"), self.d_cell);
        kv.set(&format!("{prefix}.d_proj"), self.d_proj);
        match self.cell_clip {
            Some(c) => kv.set(&format!("{prefix}.cell_clip"), c),
            None => kv.set(&format!("{prefix}.cell_clip"), "none"),
        }
        kv.set(&format!("{prefix}.residual"), self.residual);
        kv.set(&format!("{prefix}.dropout"), self.dropout);
    }

    fn apply(&mut self, prefix: &str, kv: &KeyValues) -> Result<()> {
        kv.update(&format!("{prefix}.layers"), &mut self.layers)?;
        kv.update(&format!("{prefix}.d_cell"), &mut self.d_cell)?;
        kv.update(&format!("{prefix}.d_proj"), &mut self.d_proj)?;
        let key = format!("{prefix}.cell_clip");
        match kv.raw(&key) {
            None => {}
            Some("none") => self.cell_clip = None,
            Some(_) => self.cell_clip = kv.get(&key)?,
        }
        kv.update(&format!("{prefix}.residual"), &mut self.residual)?;
        kv.update(&format!("{prefix}.dropout"), &mut self.dropout)
    }
}

impl Configurable for ProbeConfig {
    fn write(&self, prefix: &str, kv: &mut KeyValues) {
        kv.set(&format!("{prefix}.epochs"), self.epochs);
        kv.set(&format!("{prefix}.lr"), self.lr);
        kv.set(&format!("{prefix}.batch_size"), self.batch_size);
        kv.set(&format!("{prefix}.seed"), self.seed);
    }

    fn apply(&mut self, prefix: &str, kv: &KeyValues) -> Result<()> {
        kv.update(&format!("{prefix}.epochs"), &mut self.epochs)?;
        kv.update(&format!("{prefix}.lr"), &mut self.lr)?;
        kv.update(&format!("{prefix}.batch_size"), &mut self.batch_size)?;
        kv.update(&format!("{prefix}.seed"), &mut self.seed)
    }
}
