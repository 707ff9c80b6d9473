//! Context-independent token vectors from characters.
//!
//! Each token's byte ids are embedded, convolved with filters of several
//! widths (relu, max over positions), passed through highway layers and
//! projected down to `d_proj`. Nothing here looks at neighbouring tokens.

use crate::data::{SentenceBatch, DEFAULT_MAX_WORD_LEN, N_CHARS};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Initial highway gate bias; biases layers towards carrying their input.
pub const HIGHWAY_GATE_BIAS: f64 = -2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct CharCnnConfig {
    pub char_emb_dim: usize,
    /// `(width, count)` per filter bank.
    pub filters: Vec<(usize, usize)>,
    pub n_highway: usize,
    pub d_proj: usize,
    pub max_word_len: usize,
}

impl Default for CharCnnConfig {
    fn default() -> Self {
        CharCnnConfig {
            char_emb_dim: 8,
            filters: vec![(1, 4), (2, 8), (3, 16), (4, 16), (5, 20)],
            n_highway: 2,
            d_proj: 32,
            max_word_len: DEFAULT_MAX_WORD_LEN,
        }
    }
}

impl CharCnnConfig {
    pub fn n_filters(&self) -> usize {
        self.filters.iter().map(|&(_, c)| c).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.char_emb_dim == 0 || self.d_proj == 0 || self.filters.is_empty() {
            return Err(Error::Argument("char CNN dimensions must be positive".into()));
        }
        for &(w, c) in &self.filters {
            if w == 0 || w > self.max_word_len || c == 0 {
                return Err(Error::Argument(format!(
                    "filter (width {w}, count {c}) invalid for words of {} characters",
                    self.max_word_len
                )));
            }
        }
        Ok(())
    }

    /// Parameter count implied by the configuration.
    pub fn param_count(&self) -> usize {
        let e = self.char_emb_dim;
        let f = self.n_filters();
        let convs: usize = self.filters.iter().map(|&(w, c)| w * e * c + c).sum();
        N_CHARS * e + convs + self.n_highway * 2 * (f * f + f) + f * self.d_proj + self.d_proj
    }
}

#[derive(Clone, Copy, Debug)]
struct Highway {
    gate: Linear,
    transform: Linear,
}

/// Token encoder parameters, shared by both language-model directions.
#[derive(Clone, Debug)]
pub struct TokenEmbedder {
    config: CharCnnConfig,
    params: ParamStore,
    char_embed: ParamId,
    convs: Vec<Linear>,
    highways: Vec<Highway>,
    projection: Linear,
}

impl TokenEmbedder {
    /// Glorot-uniform matrices, zero biases, highway gate biases at −2.
    pub fn new(config: CharCnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedRng::new(seed).split("charcnn");
        let mut params = ParamStore::new();
        let e = config.char_emb_dim;
        let char_embed = params.add("char_embed", Tensor::glorot(N_CHARS, e, &mut rng));
        let convs = config
            .filters
            .iter()
            .enumerate()
            .map(|(i, &(w, c))| Linear::new(&mut params, &format!("conv.{i}"), w * e, c, &mut rng))
            .collect();
        let f = config.n_filters();
        let highways = (0..config.n_highway)
            .map(|i| {
                let gate = Linear::new(&mut params, &format!("highway.{i}.gate"), f, f, &mut rng);
                let transform = Linear::new(&mut params, &format!("highway.{i}.transform"), f, f, &mut rng);
                *params.get_mut(gate.bias) = Tensor::full(&[f], HIGHWAY_GATE_BIAS);
                Highway { gate, transform }
            })
            .collect();
        let projection = Linear::new(&mut params, "projection", f, config.d_proj, &mut rng);
        Ok(TokenEmbedder {
            config,
            params,
            char_embed,
            convs,
            highways,
            projection,
        })
    }

    pub fn config(&self) -> &CharCnnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Token vectors for every position of the batch, `[B·T × d_proj]`,
    /// batch-major.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &SentenceBatch) -> Result<Var> {
        let w = self.config.max_word_len;
        if batch.max_word_len != w {
            return Err(Error::dim(format!(
                "batch encodes {}-character words, embedder expects {w}",
                batch.max_word_len
            )));
        }
        let chars = tape.gather_rows(p.var(self.char_embed), &batch.char_ids)?;
        let mut pooled = Vec::with_capacity(self.convs.len());
        for (conv, &(width, _)) in self.convs.iter().zip(&self.config.filters) {
            let windows = tape.unfold(chars, w, width)?;
            let feats = conv.forward(tape, p, windows)?;
            let feats = tape.relu(feats);
            pooled.push(tape.max_pool_rows(feats, w - width + 1)?);
        }
        let mut x = tape.concat(&pooled, 1)?;
        for hw in &self.highways {
            let gate = hw.gate.forward(tape, p, x)?;
            let gate = tape.sigmoid(gate);
            let h = hw.transform.forward(tape, p, x)?;
            let h = tape.relu(h);
            // t⊙h + (1−t)⊙x == x + t⊙(h − x)
            let delta = tape.sub(h, x)?;
            let gated = tape.mul(gate, delta)?;
            x = tape.add(x, gated)?;
        }
        self.projection.forward(tape, p, x)
    }
}

/// Runs the encoder in inference mode, returning `[B × T × d_proj]`.
pub fn embed_tokens(batch: &SentenceBatch, embedder: &TokenEmbedder) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = embedder.params().bind(&mut tape, false);
    let out = embedder.forward(&mut tape, &p, batch)?;
    tape.value(out)
        .clone()
        .reshape(vec![batch.batch_size(), batch.t_max, embedder.config.d_proj])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, encode_batch, CharCodec};
    use crate::gradcheck::{grad_check_all, CheckOptions};

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn small_config() -> CharCnnConfig {
        CharCnnConfig {
            char_emb_dim: 3,
            filters: vec![(1, 2), (2, 3), (3, 2)],
            n_highway: 1,
            d_proj: 4,
            max_word_len: 8,
        }
    }

    #[test]
    fn identical_tokens_get_identical_vectors() {
        let corpus = vec![toks("the cat saw the dog"), toks("dog the")];
        let vocab = build_vocab(&corpus, 1).unwrap();
        let codec = CharCodec::new(16).unwrap();
        let batch = encode_batch(&corpus, &vocab, &codec, 8).unwrap();
        let emb = TokenEmbedder::new(CharCnnConfig::default(), 3).unwrap();
        let out = embed_tokens(&batch, &emb).unwrap();
        let d = 32;
        let vec_at = |b: usize, t: usize| out.data()[(b * 8 + t) * d..(b * 8 + t + 1) * d].to_vec();
        // "the" at (0,1), (0,4), (1,2)
        assert_eq!(vec_at(0, 1), vec_at(0, 4));
        assert_eq!(vec_at(0, 1), vec_at(1, 2));
        assert_ne!(vec_at(0, 1), vec_at(0, 2));
    }

    #[test]
    fn zero_filters_leave_projection_bias() {
        let mut emb = TokenEmbedder::new(CharCnnConfig::default(), 1).unwrap();
        let names: Vec<String> = emb.params().names().to_vec();
        for name in &names {
            if name != "projection.bias" && name != "char_embed" {
                let shape = emb.params().get(emb.params().find(name).unwrap()).shape().to_vec();
                emb.params_mut().assign(name, Tensor::zeros(&shape)).unwrap();
            }
        }
        let bias = Tensor::vector((0..32).map(|i| i as f64 * 0.1 - 1.0).collect());
        emb.params_mut().assign("projection.bias", bias.clone()).unwrap();
        let corpus = vec![toks("anything goes")];
        let vocab = build_vocab(&corpus, 1).unwrap();
        let batch = encode_batch(&corpus, &vocab, &CharCodec::default(), 4).unwrap();
        let out = embed_tokens(&batch, &emb).unwrap();
        for r in 0..4 {
            assert_eq!(&out.data()[r * 32..(r + 1) * 32], bias.data());
        }
    }

    #[test]
    fn init_is_seeded_and_carry_biased() {
        let a = TokenEmbedder::new(CharCnnConfig::default(), 11).unwrap();
        let b = TokenEmbedder::new(CharCnnConfig::default(), 11).unwrap();
        assert_eq!(a.params(), b.params());
        let gate_bias = a.params().get(a.params().find("highway.0.gate.bias").unwrap());
        let t0 = 1.0 / (1.0 + (-gate_bias.data()[0]).exp());
        assert!((t0 - 0.119_202_922).abs() < 1e-9);
        assert_eq!(a.params().count(), a.config().param_count());
        let c = small_config();
        assert_eq!(TokenEmbedder::new(c.clone(), 0).unwrap().params().count(), c.param_count());
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let corpus = vec![toks("a")];
        let vocab = build_vocab(&corpus, 1).unwrap();
        let batch = encode_batch(&corpus, &vocab, &CharCodec::new(10).unwrap(), 3).unwrap();
        let emb = TokenEmbedder::new(CharCnnConfig::default(), 0).unwrap();
        assert!(matches!(embed_tokens(&batch, &emb), Err(Error::Dimension(_))));
        let bad = CharCnnConfig {
            filters: vec![(20, 1)],
            ..CharCnnConfig::default()
        };
        assert!(TokenEmbedder::new(bad, 0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let config = small_config();
        let emb = TokenEmbedder::new(config.clone(), 5).unwrap();
        let corpus = vec![toks("ab bca a")];
        let vocab = build_vocab(&corpus, 1).unwrap();
        let batch = encode_batch(&corpus, &vocab, &CharCodec::new(8).unwrap(), 5).unwrap();
        let weights = Tensor::uniform(&[5, 4], 1.0, &mut SeedRng::new(2));
        let opts = CheckOptions {
            max_coords: Some(40),
            ..CheckOptions::default()
        };
        let err = grad_check_all(
            |tape, vars| {
                let bound = Bound::from_vars(vars);
                let out = emb.forward(tape, &bound, &batch)?;
                let w = tape.constant(weights.clone());
                let prod = tape.mul(out, w)?;
                let t = tape.tanh(prod);
                Ok(tape.sum(t))
            },
            emb.params().tensors(),
            &opts,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
