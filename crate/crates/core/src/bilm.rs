//! The bidirectional language model.
//!
//! A forward and a backward stack of projected LSTM layers read the output of
//! a shared [`TokenEmbedder`]. Both stacks feed one shared softmax head. For
//! every token the model exposes `L + 1` layers of width `2·d_proj`: the
//! token vector duplicated (`[x; x]`) followed by `[h→_j; h←_j]` for each
//! LSTM layer `j`.

use crate::charcnn::{CharCnnConfig, TokenEmbedder};
use crate::data::{encode_tight, CharCodec, Sentence, SentenceBatch, Vocab};
use crate::error::{Error, Result};
use crate::nn::{dropout, Linear, LstmCell};
use crate::params::{Bound, ParamStore};
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BiLmConfig {
    pub layers: usize,
    pub d_cell: usize,
    pub d_proj: usize,
    pub cell_clip: Option<f64>,
    pub residual: bool,
    /// Dropout on LSTM layer inputs during training.
    pub dropout: f64,
}

impl Default for BiLmConfig {
    fn default() -> Self {
        BiLmConfig {
            layers: 2,
            d_cell: 128,
            d_proj: 32,
            cell_clip: Some(3.0),
            residual: true,
            dropout: 0.1,
        }
    }
}

impl BiLmConfig {
    pub fn validate(&self, charcnn: &CharCnnConfig) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Argument("the language model needs at least one layer".into()));
        }
        if self.d_cell < self.d_proj || self.d_proj == 0 {
            return Err(Error::Argument(format!(
                "d_cell {} must be at least d_proj {}",
                self.d_cell, self.d_proj
            )));
        }
        if charcnn.d_proj != self.d_proj {
            return Err(Error::Argument(format!(
                "token encoder projects to {} but the LSTMs expect {}",
                charcnn.d_proj, self.d_proj
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if matches!(self.cell_clip, Some(c) if c <= 0.0) {
            return Err(Error::Argument("cell clip must be positive".into()));
        }
        Ok(())
    }
}

/// One direction's stack of LSTM-with-projection layers.
#[derive(Clone, Debug)]
pub struct DirectionalLm {
    params: ParamStore,
    cells: Vec<LstmCell>,
    residual: bool,
}

/// Optional training-time dropout for [`DirectionalLm::run`].
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut SeedRng,
}

impl DirectionalLm {
    pub fn new(config: &BiLmConfig, rng: &mut SeedRng) -> Self {
        let mut params = ParamStore::new();
        let cells = (0..config.layers)
            .map(|j| {
                LstmCell::new(
                    &mut params,
                    &format!("layer.{j}"),
                    config.d_proj,
                    config.d_cell,
                    Some(config.d_proj),
                    config.cell_clip,
                    rng,
                )
            })
            .collect();
        DirectionalLm {
            params,
            cells,
            residual: config.residual,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn cell(&self, layer: usize) -> &LstmCell {
        &self.cells[layer]
    }

    /// Runs every layer over a padded batch.
    ///
    /// `inputs` is `[B·T × d_proj]`, batch-major. With `reverse` each
    /// sentence is read from its last real token back to its first; outputs
    /// are re-aligned so row `b·T + k` always belongs to token `k`. Padded
    /// positions are computed but never influence real ones.
    pub fn run(
        &self,
        tape: &mut Tape,
        p: &Bound,
        inputs: Var,
        lengths: &[usize],
        t_max: usize,
        reverse: bool,
        mut dropout_cfg: Option<Dropout<'_>>,
    ) -> Result<Vec<Var>> {
        let batch = lengths.len();
        if tape.shape(inputs)[0] != batch * t_max {
            return Err(Error::dim(format!(
                "{} input rows for a batch of {batch} × {t_max}",
                tape.shape(inputs)[0]
            )));
        }
        let order = if reverse { reversal_index(lengths, t_max) } else { Vec::new() };
        let mut x = if reverse { tape.gather_rows(inputs, &order)? } else { inputs };

        let to_batch_major: Vec<usize> = (0..batch)
            .flat_map(|b| (0..t_max).map(move |t| t * batch + b))
            .collect();
        let mut outputs = Vec::with_capacity(self.cells.len());
        for (j, cell) in self.cells.iter().enumerate() {
            let inp = match dropout_cfg.as_mut() {
                Some(d) => dropout(tape, x, d.p, d.rng)?,
                None => x,
            };
            let mut state = cell.zero_state(tape, batch);
            let mut steps = Vec::with_capacity(t_max);
            for t in 0..t_max {
                let rows: Vec<usize> = (0..batch).map(|b| b * t_max + t).collect();
                let xt = tape.gather_rows(inp, &rows)?;
                state = cell.step(tape, p, xt, state)?;
                steps.push(state.h);
            }
            let time_major = tape.concat(&steps, 0)?;
            let mut y = tape.gather_rows(time_major, &to_batch_major)?;
            if self.residual && j > 0 {
                y = tape.add(y, x)?;
            }
            outputs.push(y);
            x = y;
        }
        if reverse {
            outputs = outputs
                .into_iter()
                .map(|y| tape.gather_rows(y, &order))
                .collect::<Result<_>>()?;
        }
        Ok(outputs)
    }
}

/// Row permutation reversing each sentence within its length; an involution.
fn reversal_index(lengths: &[usize], t_max: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(lengths.len() * t_max);
    for (b, &len) in lengths.iter().enumerate() {
        for t in 0..t_max {
            let src = if t < len { len - 1 - t } else { t };
            idx.push(b * t_max + src);
        }
    }
    idx
}

/// Output layer shared by both directions.
#[derive(Clone, Debug)]
pub struct SoftmaxHead {
    params: ParamStore,
    linear: Linear,
}

impl SoftmaxHead {
    pub fn new(d_proj: usize, vocab_size: usize, rng: &mut SeedRng) -> Self {
        let mut params = ParamStore::new();
        let linear = Linear::new(&mut params, "output", d_proj, vocab_size, rng);
        SoftmaxHead { params, linear }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn logits(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<Var> {
        self.linear.forward(tape, p, h)
    }
}

/// Tape bindings for every parameter group of a [`BiLm`].
#[derive(Clone, Debug)]
pub struct BoundBiLm {
    pub embedder: Bound,
    pub forward: Bound,
    pub backward: Bound,
    pub head: Bound,
}

impl BoundBiLm {
    /// All parameter variables in [`BiLm::param_groups`] order.
    pub fn vars(&self) -> Vec<Var> {
        [&self.embedder, &self.forward, &self.backward, &self.head]
            .into_iter()
            .flat_map(|b| b.vars().iter().copied())
            .collect()
    }
}

/// Per-position activations of one pass, rows `b·T + t`.
#[derive(Clone, Debug)]
pub struct BiLmOutputs {
    pub token: Var,
    pub forward: Vec<Var>,
    pub backward: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct BiLm {
    config: BiLmConfig,
    embedder: TokenEmbedder,
    forward: DirectionalLm,
    backward: DirectionalLm,
    head: SoftmaxHead,
    vocab: Vocab,
}

impl BiLm {
    pub fn new(config: BiLmConfig, charcnn: CharCnnConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate(&charcnn)?;
        let root = SeedRng::new(seed);
        let embedder = TokenEmbedder::new(charcnn, seed)?;
        let forward = DirectionalLm::new(&config, &mut root.split("forward"));
        let backward = DirectionalLm::new(&config, &mut root.split("backward"));
        let head = SoftmaxHead::new(config.d_proj, vocab.len(), &mut root.split("softmax"));
        Ok(BiLm {
            config,
            embedder,
            forward,
            backward,
            head,
            vocab,
        })
    }

    pub fn config(&self) -> &BiLmConfig {
        &self.config
    }

    pub fn charcnn_config(&self) -> &CharCnnConfig {
        self.embedder.config()
    }

    /// Changes the training-time dropout rate.
    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Argument(format!("dropout {p} outside [0, 1)")));
        }
        self.config.dropout = p;
        Ok(())
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn codec(&self) -> CharCodec {
        CharCodec::new(self.embedder.config().max_word_len).expect("validated word length")
    }

    pub fn embedder(&self) -> &TokenEmbedder {
        &self.embedder
    }

    pub fn forward_lm(&self) -> &DirectionalLm {
        &self.forward
    }

    pub fn backward_lm(&self) -> &DirectionalLm {
        &self.backward
    }

    pub fn forward_lm_mut(&mut self) -> &mut DirectionalLm {
        &mut self.forward
    }

    pub fn backward_lm_mut(&mut self) -> &mut DirectionalLm {
        &mut self.backward
    }

    pub fn head(&self) -> &SoftmaxHead {
        &self.head
    }

    /// Parameter groups with their checkpoint prefixes, in a fixed order.
    pub fn param_groups(&self) -> [(&'static str, &ParamStore); 4] {
        [
            ("charcnn", self.embedder.params()),
            ("forward", self.forward.params()),
            ("backward", self.backward.params()),
            ("softmax", self.head.params()),
        ]
    }

    pub fn param_groups_mut(&mut self) -> [(&'static str, &mut ParamStore); 4] {
        [
            ("charcnn", self.embedder.params_mut()),
            ("forward", self.forward.params_mut()),
            ("backward", self.backward.params_mut()),
            ("softmax", self.head.params_mut()),
        ]
    }

    /// Every parameter tensor in [`param_groups`](Self::param_groups) order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.param_groups_mut()
            .into_iter()
            .flat_map(|(_, s)| s.tensors_mut().iter_mut())
            .collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.param_groups()
            .into_iter()
            .flat_map(|(_, s)| s.tensors().iter())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_groups().iter().map(|(_, s)| s.count()).sum()
    }

    pub fn checksum(&self) -> u64 {
        self.param_groups()
            .iter()
            .fold(0u64, |acc, (_, s)| acc.rotate_left(17) ^ s.checksum())
    }

    pub fn round_to_f32(&mut self) {
        for (_, s) in self.param_groups_mut() {
            s.round_to_f32();
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundBiLm {
        BoundBiLm {
            embedder: self.embedder.params().bind(tape, trainable),
            forward: self.forward.params().bind(tape, trainable),
            backward: self.backward.params().bind(tape, trainable),
            head: self.head.params().bind(tape, trainable),
        }
    }

    /// Binds the given variables (in [`param_groups`](Self::param_groups)
    /// order) instead of fresh leaves.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundBiLm> {
        let sizes: Vec<usize> = self.param_groups().iter().map(|(_, s)| s.len()).collect();
        if vars.len() != sizes.iter().sum::<usize>() {
            return Err(Error::dim(format!("{} variables for {} parameters", vars.len(), sizes.iter().sum::<usize>())));
        }
        let mut rest = vars;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Bound::from_vars(head)
        };
        Ok(BoundBiLm {
            embedder: take(sizes[0]),
            forward: take(sizes[1]),
            backward: take(sizes[2]),
            head: take(sizes[3]),
        })
    }

    /// Runs the encoder and both LSTM stacks. `dropout_rng` switches on
    /// training-mode dropout.
    pub fn run(
        &self,
        tape: &mut Tape,
        p: &BoundBiLm,
        batch: &SentenceBatch,
        dropout_rng: Option<&mut SeedRng>,
    ) -> Result<BiLmOutputs> {
        let token = self.embedder.forward(tape, &p.embedder, batch)?;
        let p_drop = self.config.dropout;
        let mut rng = dropout_rng.filter(|_| p_drop > 0.0);
        let forward = self.forward.run(
            tape,
            &p.forward,
            token,
            &batch.lengths,
            batch.t_max,
            false,
            rng.as_deref_mut().map(|rng| Dropout { p: p_drop, rng }),
        )?;
        let backward = self.backward.run(
            tape,
            &p.backward,
            token,
            &batch.lengths,
            batch.t_max,
            true,
            rng.as_deref_mut().map(|rng| Dropout { p: p_drop, rng }),
        )?;
        Ok(BiLmOutputs {
            token,
            forward,
            backward,
        })
    }

    /// Forward and backward prediction rows with their target word ids.
    fn prediction_rows(batch: &SentenceBatch) -> (Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>) {
        let (mut f_rows, mut f_tgt, mut b_rows, mut b_tgt) = (vec![], vec![], vec![], vec![]);
        for (b, &len) in batch.lengths.iter().enumerate() {
            for k in 0..len - 1 {
                f_rows.push(b * batch.t_max + k);
                f_tgt.push(batch.word(b, k + 1));
            }
            for k in 1..len {
                b_rows.push(b * batch.t_max + k);
                b_tgt.push(batch.word(b, k - 1));
            }
        }
        (f_rows, f_tgt, b_rows, b_tgt)
    }

    /// Mean negative log likelihood over every prediction of both
    /// directions. The forward model predicts each real token and `</S>`
    /// from the top state one position earlier; the backward model predicts
    /// each real token and `<S>` from the top state one position later.
    pub fn joint_nll(&self, tape: &mut Tape, p: &BoundBiLm, out: &BiLmOutputs, batch: &SentenceBatch) -> Result<Var> {
        let top_f = *out.forward.last().unwrap();
        let top_b = *out.backward.last().unwrap();
        let (f_rows, f_tgt, b_rows, b_tgt) = Self::prediction_rows(batch);
        let hf = tape.gather_rows(top_f, &f_rows)?;
        let hb = tape.gather_rows(top_b, &b_rows)?;
        let h = tape.concat(&[hf, hb], 0)?;
        let logits = self.head.logits(tape, &p.head, h)?;
        let targets: Vec<usize> = f_tgt.into_iter().chain(b_tgt).collect();
        tape.softmax_xent(logits, &targets)
    }

    /// Summed NLL and prediction counts per direction, without dropout.
    pub fn direction_nll(&self, batch: &SentenceBatch) -> Result<DirectionNll> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let out = self.run(&mut tape, &p, batch, None)?;
        let (f_rows, f_tgt, b_rows, b_tgt) = Self::prediction_rows(batch);
        let mut sum = |top: Var, rows: &[usize], tgt: &[usize]| -> Result<f64> {
            let h = tape.gather_rows(top, rows)?;
            let logits = self.head.logits(&mut tape, &p.head, h)?;
            let loss = tape.softmax_xent(logits, tgt)?;
            Ok(tape.value(loss).item() * tgt.len() as f64)
        };
        let fwd = sum(*out.forward.last().unwrap(), &f_rows, &f_tgt)?;
        let bwd = sum(*out.backward.last().unwrap(), &b_rows, &b_tgt)?;
        Ok(DirectionNll {
            forward: fwd,
            backward: bwd,
            forward_count: f_tgt.len(),
            backward_count: b_tgt.len(),
        })
    }

    /// Frozen, dropout-free layer representations for each sentence, with
    /// the `<S>`/`</S>` positions removed.
    pub fn layer_reps(&self, sentences: &[Sentence]) -> Result<Vec<LayerReps>> {
        if sentences.is_empty() {
            return Ok(Vec::new());
        }
        let batch = encode_tight(sentences, &self.vocab, &self.codec())?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let out = self.run(&mut tape, &p, &batch, None)?;
        let d = self.config.d_proj;
        let mut reps = Vec::with_capacity(sentences.len());
        for (b, sent) in sentences.iter().enumerate() {
            let n = sent.len();
            let rows = |k: usize| b * batch.t_max + k + 1;
            let mut layers = Vec::with_capacity(self.config.layers + 1);
            let token = tape.value(out.token);
            let mut data = Vec::with_capacity(n * 2 * d);
            for k in 0..n {
                data.extend_from_slice(token.row(rows(k)));
                data.extend_from_slice(token.row(rows(k)));
            }
            layers.push(Tensor::new(vec![n.max(1), 2 * d], data)?);
            for j in 0..self.config.layers {
                let (f, bw) = (tape.value(out.forward[j]), tape.value(out.backward[j]));
                let mut data = Vec::with_capacity(n * 2 * d);
                for k in 0..n {
                    data.extend_from_slice(f.row(rows(k)));
                    data.extend_from_slice(bw.row(rows(k)));
                }
                layers.push(Tensor::new(vec![n.max(1), 2 * d], data)?);
            }
            reps.push(LayerReps { layers });
        }
        Ok(reps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirectionNll {
    pub forward: f64,
    pub backward: f64,
    pub forward_count: usize,
    pub backward_count: usize,
}

/// Per-direction perplexities and their arithmetic mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perplexity {
    pub forward: f64,
    pub backward: f64,
    pub average: f64,
}

pub const EVAL_BATCH: usize = 32;

pub fn perplexity(model: &BiLm, corpus: &[Sentence]) -> Result<Perplexity> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("perplexity of an empty corpus".into()));
    }
    let codec = model.codec();
    let mut total = DirectionNll {
        forward: 0.0,
        backward: 0.0,
        forward_count: 0,
        backward_count: 0,
    };
    for chunk in corpus.chunks(EVAL_BATCH) {
        let batch = encode_tight(chunk, model.vocab(), &codec)?;
        let part = model.direction_nll(&batch)?;
        total.forward += part.forward;
        total.backward += part.backward;
        total.forward_count += part.forward_count;
        total.backward_count += part.backward_count;
    }
    let forward = (total.forward / total.forward_count as f64).exp();
    let backward = (total.backward / total.backward_count as f64).exp();
    Ok(Perplexity {
        forward,
        backward,
        average: (forward + backward) / 2.0,
    })
}

/// The `L + 1` layer representations of one sentence's real tokens; each
/// layer is `[n_tokens × 2·d_proj]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerReps {
    pub layers: Vec<Tensor>,
}

impl LayerReps {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].last_dim()
    }

    pub fn vector(&self, layer: usize, token: usize) -> &[f64] {
        self.layers[layer].row(token)
    }

    /// Number of distinct underlying vectors per token: the token vector
    /// plus one per direction per LSTM layer.
    pub fn raw_count(&self) -> usize {
        2 * (self.n_layers() - 1) + 1
    }

    /// Forward half of layer `j ≥ 1` at `token`.
    pub fn forward_half(&self, layer: usize, token: usize) -> &[f64] {
        let d = self.dim() / 2;
        &self.vector(layer, token)[..d]
    }

    /// Backward half of layer `j ≥ 1` at `token`.
    pub fn backward_half(&self, layer: usize, token: usize) -> &[f64] {
        let d = self.dim() / 2;
        &self.vector(layer, token)[d..]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, encode_batch};
    use crate::gradcheck::{grad_check_all, CheckOptions};

    fn toks(s: &str) -> Sentence {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn tiny_charcnn() -> CharCnnConfig {
        CharCnnConfig {
            char_emb_dim: 3,
            filters: vec![(1, 2), (2, 3)],
            n_highway: 1,
            d_proj: 4,
            max_word_len: 6,
        }
    }

    fn tiny_bilm() -> BiLmConfig {
        BiLmConfig {
            layers: 2,
            d_cell: 5,
            d_proj: 4,
            cell_clip: Some(3.0),
            residual: true,
            dropout: 0.0,
        }
    }

    #[test]
    fn reversal_index_is_an_involution() {
        let idx = reversal_index(&[3, 5, 1], 5);
        for (i, &j) in idx.iter().enumerate() {
            assert_eq!(idx[j], i);
        }
        assert_eq!(&idx[..5], &[2, 1, 0, 3, 4]);
    }

    #[test]
    fn lstmp_zero_params_stay_at_zero() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 3, 4, Some(2), Some(3.0), &mut SeedRng::new(0));
        for t in store.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let s0 = cell.zero_state(&mut tape, 1);
        let s1 = cell.step(&mut tape, &p, x, s0).unwrap();
        assert_eq!(tape.value(s1.c).data(), &[0.0; 4]);
        assert_eq!(tape.value(s1.h).data(), &[0.0; 2]);
    }

    #[test]
    fn saturated_forget_gate_carries_cell() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 2, 3, Some(2), None, &mut SeedRng::new(0));
        let mut bias = vec![-10.0; 12];
        bias[3..6].iter_mut().for_each(|b| *b = 10.0);
        *store.get_mut(cell.gates) = Tensor::zeros(&[4, 12]);
        *store.get_mut(cell.bias) = Tensor::vector(bias);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let h = tape.constant(Tensor::zeros(&[1, 2]));
        let c0 = tape.constant(Tensor::matrix(1, 3, vec![0.7, -1.3, 2.0]).unwrap());
        let s = cell
            .step(&mut tape, &p, x, crate::nn::LstmState { h, c: c0 })
            .unwrap();
        // f = σ(10), i = σ(−10): c ≈ c₀ to ~5e-5 relative.
        for (c, c0) in tape.value(s.c).data().iter().zip([0.7, -1.3, 2.0]) {
            assert!((c - c0).abs() < 1e-4 * c0.abs().max(1.0), "{c} vs {c0}");
        }
    }

    #[test]
    fn lstmp_three_steps_gradcheck() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 3, 4, Some(2), Some(3.0), &mut SeedRng::new(9));
        let mut rng = SeedRng::new(10);
        let xs: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[2, 3], 1.0, &mut rng)).collect();
        let err = grad_check_all(
            |tape, vars| {
                let p = Bound::from_vars(vars);
                let mut s = cell.zero_state(tape, 2);
                let mut total = None;
                for x in &xs {
                    let xv = tape.constant(x.clone());
                    s = cell.step(tape, &p, xv, s)?;
                    let sq = tape.mul(s.h, s.h)?;
                    let part = tape.sum(sq);
                    total = Some(match total {
                        None => part,
                        Some(t) => tape.add(t, part)?,
                    });
                }
                Ok(total.unwrap())
            },
            store.tensors(),
            &CheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn palindrome_with_mirrored_directions() {
        let config = tiny_bilm();
        let fwd = DirectionalLm::new(&config, &mut SeedRng::new(4));
        let mut rng = SeedRng::new(5);
        let a = Tensor::uniform(&[1, 4], 1.0, &mut rng);
        let b = Tensor::uniform(&[1, 4], 1.0, &mut rng);
        let rows = [&a, &b, &a, &b, &a];
        let data: Vec<f64> = rows.iter().flat_map(|r| r.data().to_vec()).collect();
        let mut tape = Tape::new();
        let p = fwd.params().bind(&mut tape, false);
        let x = tape.constant(Tensor::matrix(5, 4, data).unwrap());
        let f = fwd.run(&mut tape, &p, x, &[5], 5, false, None).unwrap();
        let bw = fwd.run(&mut tape, &p, x, &[5], 5, true, None).unwrap();
        for j in 0..2 {
            for k in 0..5 {
                assert_eq!(tape.value(f[j]).row(k), tape.value(bw[j]).row(4 - k));
            }
        }
    }

    #[test]
    fn residual_identity_with_zeroed_second_layer() {
        let corpus = vec![toks("a b c")];
        let vocab = build_vocab(&corpus, 1).unwrap();
        for residual in [false, true] {
            let cfg = BiLmConfig {
                residual,
                ..tiny_bilm()
            };
            let mut model = BiLm::new(cfg, tiny_charcnn(), vocab.clone(), 2).unwrap();
            for (prefix, dir) in model.param_groups_mut() {
                if prefix != "forward" && prefix != "backward" {
                    continue;
                }
                let names: Vec<String> = dir.names().iter().filter(|n| n.starts_with("layer.1")).cloned().collect();
                for n in names {
                    let shape = dir.get(dir.find(&n).unwrap()).shape().to_vec();
                    dir.assign(&n, Tensor::zeros(&shape)).unwrap();
                }
            }
            let reps = model.layer_reps(&corpus).unwrap();
            let (l1, l2) = (&reps[0].layers[1], &reps[0].layers[2]);
            if residual {
                assert_eq!(l1, l2);
            } else {
                assert!(l2.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn rep_counts_and_widths() {
        let corpus = vec![toks("x y z w")];
        let vocab = build_vocab(&corpus, 1).unwrap();
        let model = BiLm::new(tiny_bilm(), tiny_charcnn(), vocab, 0).unwrap();
        let reps = model.layer_reps(&corpus).unwrap();
        assert_eq!(reps[0].n_layers(), 3);
        assert_eq!(reps[0].raw_count(), 5);
        assert!(reps[0].layers.iter().all(|l| l.shape() == [4, 8]));
        let x = reps[0].vector(0, 1);
        assert_eq!(&x[..4], &x[4..]);
    }

    #[test]
    fn uniform_head_gives_log_vocab() {
        let corpus = vec![toks("a b c d"), toks("c a")];
        let vocab = build_vocab(&corpus, 1).unwrap();
        let mut model = BiLm::new(tiny_bilm(), tiny_charcnn(), vocab.clone(), 1).unwrap();
        for t in model.param_groups_mut()[3].1.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let batch = encode_tight(&corpus, &vocab, &model.codec()).unwrap();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let out = model.run(&mut tape, &p, &batch, None).unwrap();
        let loss = model.joint_nll(&mut tape, &p, &out, &batch).unwrap();
        assert!((tape.value(loss).item() - (vocab.len() as f64).ln()).abs() < 1e-12);
        let ppl = perplexity(&model, &corpus).unwrap();
        assert!((ppl.forward - vocab.len() as f64).abs() < 1e-9);
        assert_eq!(ppl.average, (ppl.forward + ppl.backward) / 2.0);
    }

    #[test]
    fn joint_loss_gradcheck() {
        let corpus = vec![toks("ab b ca"), toks("b ab")];
        let vocab = build_vocab(&corpus, 1).unwrap();
        let mut model = BiLm::new(tiny_bilm(), tiny_charcnn(), vocab.clone(), 3).unwrap();
        // Check at a point where gradients are well above finite-difference noise.
        let mut rng = SeedRng::new(8);
        for t in model.tensors_mut() {
            *t = Tensor::uniform(t.shape(), 0.5, &mut rng);
        }
        let batch = encode_batch(&corpus, &vocab, &model.codec(), 5).unwrap();
        let thetas: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
        let opts = CheckOptions {
            max_coords: Some(30),
            ..CheckOptions::default()
        };
        let err = grad_check_all(
            |tape, vars| {
                let p = model.bind_vars(vars)?;
                let out = model.run(tape, &p, &batch, None)?;
                model.joint_nll(tape, &p, &out, &batch)
            },
            &thetas,
            &opts,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn empty_corpus_perplexity_errors() {
        let vocab = build_vocab(&[toks("a")], 1).unwrap();
        let model = BiLm::new(tiny_bilm(), tiny_charcnn(), vocab, 0).unwrap();
        assert!(matches!(perplexity(&model, &[]), Err(Error::EmptyCorpus(_))));
    }

    #[test]
    fn config_validation() {
        let bad = BiLmConfig {
            d_cell: 2,
            ..tiny_bilm()
        };
        assert!(bad.validate(&tiny_charcnn()).is_err());
        assert!(BiLmConfig::default().validate(&tiny_charcnn()).is_err());
        assert!(BiLmConfig::default().validate(&CharCnnConfig::default()).is_ok());
    }
}
