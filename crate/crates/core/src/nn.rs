//! Layers shared by the language model, the tagger and the probes.

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Affine map `x·W + b` with `W: [in × out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut SeedRng) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), Tensor::glorot(d_in, d_out, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.var(self.weight))?;
        tape.add_bias(h, p.var(self.bias))
    }
}

/// LSTM cell with an optional linear projection of the hidden output.
///
/// Gate layout along the `4·d_cell` axis is `[input, forget, candidate, output]`.
/// Without a projection the recurrent width equals `d_cell`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub gates: ParamId,
    pub bias: ParamId,
    pub projection: Option<ParamId>,
    pub d_in: usize,
    pub d_cell: usize,
    pub d_out: usize,
    pub cell_clip: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_cell: usize,
        d_proj: Option<usize>,
        cell_clip: Option<f64>,
        rng: &mut SeedRng,
    ) -> Self {
        let d_out = d_proj.unwrap_or(d_cell);
        let gates = store.add(format!("{name}.gates"), Tensor::glorot(d_in + d_out, 4 * d_cell, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[4 * d_cell]));
        let projection = d_proj.map(|p| store.add(format!("{name}.projection"), Tensor::glorot(d_cell, p, rng)));
        LstmCell {
            gates,
            bias,
            projection,
            d_in,
            d_cell,
            d_out,
            cell_clip,
        }
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> LstmState {
        LstmState {
            h: tape.constant(Tensor::zeros(&[batch, self.d_out])),
            c: tape.constant(Tensor::zeros(&[batch, self.d_cell])),
        }
    }

    /// One step for a `[B × d_in]` input.
    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, prev: LstmState) -> Result<LstmState> {
        let xh = tape.concat(&[x, prev.h], 1)?;
        let z = tape.matmul(xh, p.var(self.gates))?;
        let z = tape.add_bias(z, p.var(self.bias))?;
        let d = self.d_cell;
        let i = tape.slice_cols(z, 0, d)?;
        let f = tape.slice_cols(z, d, d)?;
        let g = tape.slice_cols(z, 2 * d, d)?;
        let o = tape.slice_cols(z, 3 * d, d)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, prev.c)?;
        let write = tape.mul(i, g)?;
        let mut c = tape.add(keep, write)?;
        if let Some(clip) = self.cell_clip {
            c = tape.clamp(c, -clip, clip);
        }
        let tc = tape.tanh(c);
        let mut h = tape.mul(o, tc)?;
        if let Some(proj) = self.projection {
            h = tape.matmul(h, p.var(proj))?;
        }
        Ok(LstmState { h, c })
    }
}

/// Inverted dropout mask: entries are `0` with probability `p`, else `1/(1−p)`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut SeedRng) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = if rng.chance(p) { 0.0 } else { keep };
    }
    t
}

/// Applies dropout when `p > 0`; identity otherwise.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut SeedRng) -> Result<Var> {
    if p <= 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(tape.shape(x), p, rng);
    tape.mul_const(x, mask)
}
