//! The finite-difference suite: every differentiable tape operation, the
//! composite layers built from them, and the end-to-end joint biLM loss,
//! each checked with [`grad_check_all`] at small sizes.
//!
//! Inputs are drawn so that no coordinate sits within a step of a kink
//! (relu at 0, clamp bounds, max-pool ties).

use crate::bilm::{BiLm, BiLmConfig};
use crate::charcnn::{CharCnnConfig, TokenEmbedder};
use crate::data::{build_vocab, encode_batch, CharCodec, Sentence};
use crate::elmo::ScalarMix;
use crate::error::Result;
use crate::gradcheck::{grad_check_all, CheckOptions};
use crate::nn::LstmCell;
use crate::params::{Bound, ParamStore};
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::task::crf::crf_nll;
use crate::tensor::Tensor;

/// Acceptance threshold on the worst relative error.
pub const MAX_REL_ERR: f64 = 1e-4;

/// Seed of the fixed parameter point for the end-to-end biLM check, which
/// covers every coordinate. At arbitrary points of a model this small a few
/// coordinates carry gradients near 1e-8, where central differences at
/// `h = 1e-5` are dominated by roundoff (about 2e-11 absolute) and the
/// relative error says nothing about the gradient. This point has no such
/// coordinates.
pub const BILM_POINT_SEED: u64 = 35;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < MAX_REL_ERR
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("check\tmax_rel_err\n");
        for e in &self.entries {
            out.push_str(&format!("{}\t{:.3e}\n", e.name, e.max_rel_err));
        }
        out
    }
}

/// `Σ out ⊙ W` with a fixed random `W`, so every output coordinate matters.
fn weighted(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = Tensor::uniform(tape.shape(out), 1.0, &mut SeedRng::new(seed).split("weights"));
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Uniform values in `±bound` pushed at least `gap` away from zero.
fn away_from_zero(shape: &[usize], bound: f64, gap: f64, rng: &mut SeedRng) -> Tensor {
    Tensor::uniform(shape, bound, rng).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

fn unary(name: &'static str, x: Tensor, seed: u64, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<SuiteEntry> {
    let err = grad_check_all(
        |tape, v| {
            let out = f(tape, v[0])?;
            weighted(tape, out, seed)
        },
        &[x],
        &CheckOptions::default(),
    )?;
    Ok(SuiteEntry { name, max_rel_err: err })
}

fn binary(
    name: &'static str,
    a: Tensor,
    b: Tensor,
    seed: u64,
    f: impl Fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<SuiteEntry> {
    let err = grad_check_all(
        |tape, v| {
            let out = f(tape, v[0], v[1])?;
            weighted(tape, out, seed)
        },
        &[a, b],
        &CheckOptions::default(),
    )?;
    Ok(SuiteEntry { name, max_rel_err: err })
}

fn toks(s: &str) -> Sentence {
    s.split_whitespace().map(str::to_string).collect()
}

/// Runs every check. Sizes stay at 8 or below; the character CNN check
/// samples coordinates, the biLM check runs at [`BILM_POINT_SEED`].
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let root = SeedRng::new(seed).split("suite");
    let r = |name: &str| root.split(name);
    let u = |shape: &[usize], rng: &mut SeedRng| Tensor::uniform(shape, 1.0, rng);
    let mut e = Vec::new();

    let mut g = r("matmul");
    e.push(binary("matmul", u(&[3, 4], &mut g), u(&[4, 5], &mut g), 1, |t, a, b| t.matmul(a, b))?);
    let mut g = r("add");
    e.push(binary("add", u(&[3, 4], &mut g), u(&[3, 4], &mut g), 2, |t, a, b| t.add(a, b))?);
    let mut g = r("sub");
    e.push(binary("sub", u(&[3, 4], &mut g), u(&[3, 4], &mut g), 3, |t, a, b| t.sub(a, b))?);
    let mut g = r("mul");
    e.push(binary("mul", u(&[3, 4], &mut g), u(&[3, 4], &mut g), 4, |t, a, b| t.mul(a, b))?);
    let mut g = r("add_bias");
    e.push(binary("add_bias", u(&[3, 4], &mut g), u(&[4], &mut g), 5, |t, a, b| t.add_bias(a, b))?);
    let mut g = r("scale_by");
    e.push(binary("scale_by", u(&[3, 4], &mut g), u(&[1], &mut g), 6, |t, a, s| t.scale_by(a, s))?);
    let mut g = r("scale");
    e.push(unary("scale", u(&[2, 5], &mut g), 7, |t, x| Ok(t.scale(x, -1.7)))?);
    let mut g = r("mul_const");
    let mask = u(&[2, 5], &mut g);
    e.push(unary("mul_const", u(&[2, 5], &mut g), 8, move |t, x| t.mul_const(x, mask.clone()))?);
    let mut g = r("sigmoid");
    e.push(unary("sigmoid", u(&[3, 3], &mut g).map(|v| 3.0 * v), 9, |t, x| Ok(t.sigmoid(x)))?);
    let mut g = r("tanh");
    e.push(unary("tanh", u(&[3, 3], &mut g).map(|v| 2.0 * v), 10, |t, x| Ok(t.tanh(x)))?);
    let mut g = r("relu");
    e.push(unary("relu", away_from_zero(&[4, 4], 1.0, 0.05, &mut g), 11, |t, x| Ok(t.relu(x)))?);
    let mut g = r("clamp");
    // Values in ±(0.05..1.05) against bounds ±0.5 shifted by 0.02: nothing near a bound.
    let x = away_from_zero(&[4, 4], 1.0, 0.05, &mut g).map(|v| if (v.abs() - 0.5).abs() < 0.02 { v * 1.1 } else { v });
    e.push(unary("clamp", x, 12, |t, x| Ok(t.clamp(x, -0.5, 0.5)))?);
    let mut g = r("concat");
    e.push(binary("concat_rows", u(&[2, 3], &mut g), u(&[4, 3], &mut g), 13, |t, a, b| t.concat(&[a, b], 0))?);
    e.push(binary("concat_cols", u(&[3, 2], &mut g), u(&[3, 4], &mut g), 14, |t, a, b| t.concat(&[a, b], 1))?);
    let mut g = r("slice_cols");
    e.push(unary("slice_cols", u(&[3, 6], &mut g), 15, |t, x| t.slice_cols(x, 2, 3))?);
    let mut g = r("gather_rows");
    // Repeated indices exercise gradient accumulation.
    e.push(unary("gather_rows", u(&[4, 3], &mut g), 16, |t, x| t.gather_rows(x, &[2, 0, 2, 3, 2]))?);
    let mut g = r("unfold");
    e.push(unary("unfold", u(&[8, 2], &mut g), 17, |t, x| t.unfold(x, 4, 2))?);
    let mut g = r("max_pool_rows");
    // Distinct values spaced well apart so every group has a clear maximum.
    let mut order = g.permutation(24);
    order.iter_mut().for_each(|v| *v += 1);
    let pooled = Tensor::new(vec![6, 4], order.iter().map(|&v| v as f64 * 0.1).collect())?;
    e.push(unary("max_pool_rows", pooled, 18, |t, x| t.max_pool_rows(x, 3))?);
    let mut g = r("sum");
    e.push(unary("sum", u(&[3, 4], &mut g), 19, |t, x| Ok(t.sum(x)))?);
    let mut g = r("mean");
    e.push(unary("mean", u(&[3, 4], &mut g), 20, |t, x| Ok(t.mean(x)))?);
    let mut g = r("index");
    e.push(unary("index", u(&[5], &mut g), 21, |t, x| t.index(x, 3))?);
    let mut g = r("softmax");
    e.push(unary("softmax", u(&[6], &mut g).map(|v| 2.0 * v), 22, |t, x| Ok(t.softmax(x)))?);
    let mut g = r("softmax_xent");
    e.push(unary("softmax_xent", u(&[4, 5], &mut g).map(|v| 2.0 * v), 23, |t, x| {
        t.softmax_xent(x, &[0, 4, 2, 2])
    })?);
    let mut g = r("layer_norm");
    let (x, gain, bias) = (u(&[3, 5], &mut g), u(&[5], &mut g), u(&[5], &mut g));
    let err = grad_check_all(
        |t, v| {
            let out = t.layer_norm(v[0], v[1], v[2])?;
            weighted(t, out, 24)
        },
        &[x, gain, bias],
        &CheckOptions::default(),
    )?;
    e.push(SuiteEntry {
        name: "layer_norm",
        max_rel_err: err,
    });

    let mut g = r("crf");
    let (emit, trans) = (u(&[5, 3], &mut g).map(|v| 2.0 * v), u(&[5, 5], &mut g));
    let err = grad_check_all(|t, v| crf_nll(t, v[0], v[1], &[2, 0, 0, 1, 2]), &[emit, trans], &CheckOptions::default())?;
    e.push(SuiteEntry {
        name: "crf_nll",
        max_rel_err: err,
    });

    let mut g = r("lstm");
    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "cell", 3, 4, Some(2), Some(3.0), &mut g);
    let xs: Vec<Tensor> = (0..3).map(|_| u(&[2, 3], &mut g)).collect();
    let err = grad_check_all(
        |t, vars| {
            let p = Bound::from_vars(vars);
            let mut s = cell.zero_state(t, 2);
            let mut hs = Vec::new();
            for x in &xs {
                let xv = t.constant(x.clone());
                s = cell.step(t, &p, xv, s)?;
                hs.push(s.h);
            }
            let all = t.concat(&hs, 0)?;
            weighted(t, all, 25)
        },
        store.tensors(),
        &CheckOptions::default(),
    )?;
    e.push(SuiteEntry {
        name: "lstm_projection_3_steps",
        max_rel_err: err,
    });

    let mut g = r("mix");
    let mut mix = ScalarMix::new(3, 4, true, 0.5)?;
    for t in mix.params_mut().tensors_mut() {
        *t = Tensor::uniform(t.shape(), 1.0, &mut g);
    }
    let layers: Vec<Tensor> = (0..3).map(|_| u(&[2, 4], &mut g)).collect();
    let err = grad_check_all(
        |t, vars| {
            let p = Bound::from_vars(vars);
            let ls: Vec<Var> = layers.iter().map(|l| t.constant(l.clone())).collect();
            let out = mix.forward(t, &p, &ls)?;
            let task = weighted(t, out, 26)?;
            let pen = mix.penalty(t, &p);
            t.add(task, pen)
        },
        mix.params().tensors(),
        &CheckOptions::default(),
    )?;
    e.push(SuiteEntry {
        name: "scalar_mix_with_penalty",
        max_rel_err: err,
    });

    let charcnn = CharCnnConfig {
        char_emb_dim: 3,
        filters: vec![(1, 2), (2, 3), (3, 2)],
        n_highway: 1,
        d_proj: 4,
        max_word_len: 8,
    };
    let emb = TokenEmbedder::new(charcnn.clone(), seed)?;
    let corpus = vec![toks("ab bca a")];
    let vocab = build_vocab(&corpus, 1)?;
    let batch = encode_batch(&corpus, &vocab, &CharCodec::new(8)?, 5)?;
    let sampled = CheckOptions {
        max_coords: Some(30),
        ..CheckOptions::default()
    };
    let err = grad_check_all(
        |t, vars| {
            let p = Bound::from_vars(vars);
            let out = emb.forward(t, &p, &batch)?;
            let out = t.tanh(out);
            weighted(t, out, 27)
        },
        emb.params().tensors(),
        &sampled,
    )?;
    e.push(SuiteEntry {
        name: "char_cnn_highway",
        max_rel_err: err,
    });

    let bilm = BiLmConfig {
        layers: 2,
        d_cell: 5,
        d_proj: 4,
        cell_clip: Some(3.0),
        residual: true,
        dropout: 0.0,
    };
    let corpus = vec![toks("ab b ca"), toks("b ab")];
    let vocab = build_vocab(&corpus, 1)?;
    let mut model = BiLm::new(bilm, CharCnnConfig { max_word_len: 6, ..charcnn }, vocab.clone(), BILM_POINT_SEED)?;
    let mut g = SeedRng::new(BILM_POINT_SEED).split("suite").split("bilm");
    for t in model.tensors_mut() {
        *t = Tensor::uniform(t.shape(), 1.0, &mut g);
    }
    let batch = encode_batch(&corpus, &vocab, &model.codec(), 5)?;
    let thetas: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
    let err = grad_check_all(
        |t, vars| {
            let p = model.bind_vars(vars)?;
            let out = model.run(t, &p, &batch, None)?;
            model.joint_nll(t, &p, &out, &batch)
        },
        &thetas,
        &CheckOptions::default(),
    )?;
    e.push(SuiteEntry {
        name: "bilm_joint_nll",
        max_rel_err: err,
    });

    Ok(SuiteReport { entries: e })
}
