//! Task-specific scalar mixing of biLM layers.
//!
//! `ELMo_k = γ · Σ_j s_j · h_{k,j}` with `s = softmax(logits)`, optionally
//! layer-normalizing each `h_{k,j}` first. The penalty `λ·Σ_j s_j²` pulls
//! `s` towards the uniform average. Also here: frozen representation
//! extraction, the representation file format and cosine nearest neighbours.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::bilm::{BiLm, LayerReps, EVAL_BATCH};
use crate::checkpoint::{ByteReader, ByteWriter};
use crate::data::Sentence;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{softmax_in_place, Tape, Var};
use crate::tensor::Tensor;

/// Learned layer weights and scale for one place an ELMo vector is used.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMix {
    params: ParamStore,
    logits: ParamId,
    gamma: ParamId,
    norms: Option<Vec<(ParamId, ParamId)>>,
    n_layers: usize,
    dim: usize,
    pub lambda: f64,
}

impl ScalarMix {
    /// Zero logits (uniform weights), `γ = 1`, unit gain and zero bias for
    /// layer norm when enabled.
    pub fn new(n_layers: usize, dim: usize, use_layer_norm: bool, lambda: f64) -> Result<Self> {
        if n_layers == 0 || dim == 0 {
            return Err(Error::Argument("a scalar mix needs at least one layer".into()));
        }
        if !(lambda >= 0.0) {
            return Err(Error::Argument(format!("lambda {lambda} must be non-negative")));
        }
        let mut params = ParamStore::new();
        let logits = params.add("logits", Tensor::zeros(&[n_layers]));
        let gamma = params.add("gamma", Tensor::scalar(1.0));
        let norms = use_layer_norm.then(|| {
            (0..n_layers)
                .map(|j| {
                    (
                        params.add(format!("norm.{j}.gain"), Tensor::full(&[dim], 1.0)),
                        params.add(format!("norm.{j}.bias"), Tensor::zeros(&[dim])),
                    )
                })
                .collect()
        });
        Ok(ScalarMix {
            params,
            logits,
            gamma,
            norms,
            n_layers,
            dim,
            lambda,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn uses_layer_norm(&self) -> bool {
        self.norms.is_some()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn logits(&self) -> &[f64] {
        self.params.get(self.logits).data()
    }

    pub fn set_logits(&mut self, logits: &[f64]) -> Result<()> {
        if logits.len() != self.n_layers {
            return Err(Error::dim(format!("{} logits for {} layers", logits.len(), self.n_layers)));
        }
        self.params.get_mut(self.logits).data_mut().copy_from_slice(logits);
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        self.params.get(self.gamma).item()
    }

    pub fn set_gamma(&mut self, gamma: f64) {
        self.params.get_mut(self.gamma).data_mut()[0] = gamma;
    }

    /// `s = softmax(logits)`.
    pub fn weights(&self) -> Vec<f64> {
        let mut s = self.logits().to_vec();
        softmax_in_place(&mut s);
        s
    }

    /// Mixes `layers` (each `[n × dim]`) on the tape.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, layers: &[Var]) -> Result<Var> {
        if layers.len() != self.n_layers {
            return Err(Error::dim(format!(
                "scalar mix over {} layers given {}",
                self.n_layers,
                layers.len()
            )));
        }
        let s = tape.softmax(p.var(self.logits));
        let mut acc: Option<Var> = None;
        for (j, &h) in layers.iter().enumerate() {
            if tape.value(h).last_dim() != self.dim {
                return Err(Error::dim(format!(
                    "layer {j} has width {}, mix expects {}",
                    tape.value(h).last_dim(),
                    self.dim
                )));
            }
            let h = match &self.norms {
                Some(norms) => tape.layer_norm(h, p.var(norms[j].0), p.var(norms[j].1))?,
                None => h,
            };
            let sj = tape.index(s, j)?;
            let term = tape.scale_by(h, sj)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        tape.scale_by(acc.expect("at least one layer"), p.var(self.gamma))
    }

    /// `λ·Σ_j s_j²` on the tape.
    pub fn penalty(&self, tape: &mut Tape, p: &Bound) -> Var {
        let s = tape.softmax(p.var(self.logits));
        let sq = tape.mul(s, s).expect("same shape");
        let total = tape.sum(sq);
        tape.scale(total, self.lambda)
    }

    /// Inference-mode mix of one sentence's representations,
    /// `[n_tokens × dim]`.
    pub fn mix(&self, reps: &LayerReps) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let layers: Vec<Var> = reps.layers.iter().map(|l| tape.constant(l.clone())).collect();
        let out = self.forward(&mut tape, &p, &layers)?;
        Ok(tape.value(out).clone())
    }
}

pub fn scalar_mix(reps: &LayerReps, mix: &ScalarMix) -> Result<Tensor> {
    mix.mix(reps)
}

/// The top layer alone.
pub fn last_only(reps: &LayerReps) -> Tensor {
    reps.layers.last().expect("non-empty representations").clone()
}

/// `λ·Σ_j s_j²` evaluated directly.
pub fn mix_penalty(mix: &ScalarMix) -> f64 {
    mix.lambda * mix.weights().iter().map(|s| s * s).sum::<f64>()
}

/// Frozen representations for every sentence, computed in parallel batches.
/// Output order matches input order.
pub fn extract_reps(model: &BiLm, sentences: &[Sentence]) -> Result<Vec<LayerReps>> {
    let parts: Vec<Result<Vec<LayerReps>>> = sentences
        .par_chunks(EVAL_BATCH)
        .map(|chunk| model.layer_reps(chunk))
        .collect();
    let mut out = Vec::with_capacity(sentences.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

pub const REPS_MAGIC: &[u8; 8] = b"ELMOREP1";

/// Contents of a representation file.
#[derive(Clone, Debug, PartialEq)]
pub struct RepFile {
    pub sentences: Vec<Sentence>,
    pub reps: Vec<LayerReps>,
}

/// Layout, little-endian:
///
/// ```text
/// "ELMOREP1", u32 n_layers, u32 dim, u32 n_tokens
/// per token: u16 length, UTF-8 bytes
/// u32 n_sentences, per sentence: u32 end offset into the token table
/// f32 payload [n_layers × n_tokens × dim], layer-major
/// ```
pub fn encode_reps(reps: &[LayerReps], sentences: &[Sentence]) -> Result<Vec<u8>> {
    if reps.len() != sentences.len() {
        return Err(Error::dim(format!("{} representations for {} sentences", reps.len(), sentences.len())));
    }
    let (n_layers, dim) = match reps.first() {
        Some(r) => (r.n_layers(), r.dim()),
        None => (0, 0),
    };
    for (r, s) in reps.iter().zip(sentences) {
        if r.n_layers() != n_layers || r.dim() != dim || r.n_tokens() != s.len() {
            return Err(Error::dim("representations disagree in shape with each other or their sentence"));
        }
    }
    let n_tokens: usize = sentences.iter().map(Vec::len).sum();
    let mut w = ByteWriter::default();
    w.bytes(REPS_MAGIC);
    w.len_u32(n_layers, "layer count")?;
    w.len_u32(dim, "dimension")?;
    w.len_u32(n_tokens, "token count")?;
    for tok in sentences.iter().flatten() {
        w.str_u16(tok, "token")?;
    }
    w.len_u32(sentences.len(), "sentence count")?;
    let mut end = 0;
    for s in sentences {
        end += s.len();
        w.len_u32(end, "sentence offset")?;
    }
    for j in 0..n_layers {
        for r in reps {
            r.layers[j].data().iter().for_each(|&v| w.f32(v));
        }
    }
    Ok(w.buf)
}

/// Exact size of an encoded representation file.
pub fn reps_file_size(n_layers: usize, dim: usize, sentences: &[Sentence]) -> usize {
    let n_tokens: usize = sentences.iter().map(Vec::len).sum();
    let table: usize = sentences.iter().flatten().map(|t| 2 + t.len()).sum();
    8 + 12 + table + 4 + 4 * sentences.len() + 4 * n_layers * n_tokens * dim
}

pub fn decode_reps(bytes: &[u8]) -> Result<RepFile> {
    let mut r = ByteReader::new(bytes);
    if r.take(8).ok() != Some(&REPS_MAGIC[..]) {
        return Err(Error::Format("not a representation file (bad magic or version)".into()));
    }
    let n_layers = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let n_tokens = r.u32()? as usize;
    let tokens = (0..n_tokens)
        .map(|_| r.str_u16().map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    let n_sent = r.u32()? as usize;
    let mut sentences = Vec::with_capacity(n_sent.min(1 << 20));
    let mut start = 0;
    for _ in 0..n_sent {
        let end = r.u32()? as usize;
        if end < start || end > n_tokens {
            return Err(Error::Format(format!("sentence offset {end} out of order")));
        }
        sentences.push(tokens[start..end].to_vec());
        start = end;
    }
    if start != n_tokens {
        return Err(Error::Format("sentence offsets do not cover the token table".into()));
    }
    if n_tokens > 0 && (n_layers == 0 || dim == 0) {
        return Err(Error::Format("empty layer shape with tokens present".into()));
    }
    let mut layers: Vec<Vec<Tensor>> = vec![Vec::with_capacity(n_layers); n_sent];
    for _ in 0..n_layers {
        for (i, s) in sentences.iter().enumerate() {
            let data = r.f32s(s.len() * dim)?;
            layers[i].push(Tensor::new(vec![s.len().max(1), dim], if s.is_empty() { vec![0.0; dim] } else { data })?);
        }
    }
    r.finish()?;
    Ok(RepFile {
        sentences,
        reps: layers.into_iter().map(|layers| LayerReps { layers }).collect(),
    })
}

pub fn export_reps(reps: &[LayerReps], sentences: &[Sentence], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_reps(reps, sentences)?)?;
    Ok(())
}

pub fn import_reps(path: impl AsRef<Path>) -> Result<RepFile> {
    decode_reps(&fs::read(path)?)
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The `k` candidates most cosine-similar to `query` as `(index,
/// similarity)`, best first; equal similarities rank by lower index.
pub fn nearest_neighbors<V: AsRef<[f64]>>(query: &[f64], candidates: &[V], k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        let c = c.as_ref();
        if c.len() != query.len() {
            return Err(Error::dim(format!("candidate {i} has width {}, query {}", c.len(), query.len())));
        }
        scored.push((i, cosine(query, c)));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}
