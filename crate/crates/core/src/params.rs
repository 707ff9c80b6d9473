//! Named parameter storage and per-pass binding onto a tape.

use crate::error::{Error, Result};
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// An ordered list of named tensors. Order is fixed at construction and is
/// the order used for binding, optimizer state and serialization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Overwrites a parameter by name, insisting on an identical shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Integrity(format!("unknown parameter {name}")))?;
        let slot = &mut self.tensors[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::Integrity(format!(
                "parameter {name}: stored shape {:?}, expected {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect(),
        }
    }

    pub fn round_to_f32(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::round_to_f32);
    }

    /// FNV-1a over every name and value bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (name, t) in self.iter() {
            name.bytes().for_each(&mut eat);
            for v in t.data() {
                v.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }
}

/// Tape variables for every tensor of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps variables created elsewhere, e.g. by a gradient checker, in
    /// store order.
    pub fn from_vars(vars: &[Var]) -> Self {
        Bound { vars: vars.to_vec() }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients aligned with the store; zeros where nothing flowed.
    pub fn grads(&self, grads: &Grads, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t))
            .collect()
    }
}
