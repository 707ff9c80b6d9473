//! Downstream sequence tagging on top of frozen biLM representations.
//!
//! A tagger embeds tokens, runs a one-layer biLSTM and projects to tag
//! scores, optionally through a CRF. ELMo vectors can enter at the biLSTM
//! input, at its output, or both, each place with its own [`ScalarMix`].
//! The experiment drivers (ablation grid, sample-efficiency curve, weight
//! report) live in [`experiments`].
//!
//! [`ScalarMix`]: crate::elmo::ScalarMix

pub mod crf;
pub mod experiments;
mod file;
mod tagger;

use std::fmt;
use std::str::FromStr;

use crate::bilm::{BiLm, LayerReps};
use crate::config::{Configurable, KeyValues};
use crate::data::{subsample, TaggedSentence};
use crate::elmo::extract_reps;
use crate::error::{Error, Result};

pub use file::{decode_tagger, encode_tagger, load_tagger, save_tagger, TAGGER_MAGIC};
pub use tagger::{train_tagger, train_task, TaskEpoch, TaskOutcome, Tagger};

/// Where ELMo vectors are concatenated into the tagger.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ElmoLocation {
    None,
    Input,
    Output,
    Both,
}

impl ElmoLocation {
    pub const ALL: [ElmoLocation; 4] = [ElmoLocation::None, ElmoLocation::Input, ElmoLocation::Output, ElmoLocation::Both];

    pub fn at_input(self) -> bool {
        matches!(self, ElmoLocation::Input | ElmoLocation::Both)
    }

    pub fn at_output(self) -> bool {
        matches!(self, ElmoLocation::Output | ElmoLocation::Both)
    }

    pub fn uses_elmo(self) -> bool {
        self != ElmoLocation::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ElmoLocation::None => "none",
            ElmoLocation::Input => "input",
            ElmoLocation::Output => "output",
            ElmoLocation::Both => "both",
        }
    }
}

impl fmt::Display for ElmoLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ElmoLocation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ElmoLocation::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("ELMo location {s:?} is not one of none, input, output, both")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub elmo_location: ElmoLocation,
    /// Strength of the `λ·Σ s_j²` penalty, shared by both mixes.
    pub lambda: f64,
    pub use_layer_norm: bool,
    /// Feed only the top biLM layer (still scaled by a trainable γ).
    pub last_only: bool,
    /// When false γ stays at 1.
    pub train_gamma: bool,
    pub use_crf: bool,
    pub d_x: usize,
    pub d_task: usize,
    /// Dropout on the mixed ELMo vector during training.
    pub dropout: f64,
    /// Probability of replacing a training singleton with `<UNK>`, so the
    /// unknown-word embedding gets trained.
    pub unk_rate: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            elmo_location: ElmoLocation::Input,
            lambda: 0.001,
            use_layer_norm: false,
            last_only: false,
            train_gamma: true,
            use_crf: true,
            d_x: 16,
            d_task: 32,
            dropout: 0.5,
            unk_rate: 0.5,
            lr: 0.01,
            batch_size: 8,
            epochs: 15,
            grad_clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.d_task == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Argument("d_x, d_task, batch_size and epochs must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Argument(format!("lambda {} must be finite and non-negative", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.unk_rate) {
            return Err(Error::Argument("dropout and unk_rate must lie in [0, 1)".into()));
        }
        if !(self.lr > 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::Argument("lr and grad_clip_norm must be positive".into()));
        }
        Ok(())
    }

    /// Same settings with ELMo switched off.
    pub fn baseline(&self) -> TaskConfig {
        TaskConfig {
            elmo_location: ElmoLocation::None,
            ..self.clone()
        }
    }
}

impl Configurable for TaskConfig {
    fn write(&self, prefix: &str, kv: &mut KeyValues) {
        kv.set(&format!("{prefix}.elmo_location"), self.elmo_location);
        kv.set(&format!("{prefix}.lambda"), self.lambda);
        kv.set(&format!("{prefix}.use_layer_norm"), self.use_layer_norm);
        kv.set(&format!("{prefix}.last_only"), self.last_only);
        kv.set(&format!("{prefix}.train_gamma"), self.train_gamma);
        kv.set(&format!("{prefix}.use_crf"), self.use_crf);
        kv.set(&format!("{prefix}.d_x"), self.d_x);
        kv.set(&format!("{prefix}.d_task"), self.d_task);
        kv.set(&format!("{prefix}.dropout"), self.dropout);
        kv.set(&format!("{prefix}.unk_rate"), self.unk_rate);
        kv.set(&format!("{prefix}.lr"), self.lr);
        kv.set(&format!("{prefix}.batch_size"), self.batch_size);
        kv.set(&format!("{prefix}.epochs"), self.epochs);
        kv.set(&format!("{prefix}.grad_clip_norm"), self.grad_clip_norm);
        kv.set(&format!("{prefix}.seed"), self.seed);
    }

    fn apply(&mut self, prefix: &str, kv: &KeyValues) -> Result<()> {
        let key = format!("{prefix}.elmo_location");
        if let Some(v) = kv.raw(&key) {
            self.elmo_location = v.parse()?;
        }
        kv.update(&format!("{prefix}.lambda"), &mut self.lambda)?;
        kv.update(&format!("{prefix}.use_layer_norm"), &mut self.use_layer_norm)?;
        kv.update(&format!("{prefix}.last_only"), &mut self.last_only)?;
        kv.update(&format!("{prefix}.train_gamma"), &mut self.train_gamma)?;
        kv.update(&format!("{prefix}.use_crf"), &mut self.use_crf)?;
        kv.update(&format!("{prefix}.d_x"), &mut self.d_x)?;
        kv.update(&format!("{prefix}.d_task"), &mut self.d_task)?;
        kv.update(&format!("{prefix}.dropout"), &mut self.dropout)?;
        kv.update(&format!("{prefix}.unk_rate"), &mut self.unk_rate)?;
        kv.update(&format!("{prefix}.lr"), &mut self.lr)?;
        kv.update(&format!("{prefix}.batch_size"), &mut self.batch_size)?;
        kv.update(&format!("{prefix}.epochs"), &mut self.epochs)?;
        kv.update(&format!("{prefix}.grad_clip_norm"), &mut self.grad_clip_norm)?;
        kv.update(&format!("{prefix}.seed"), &mut self.seed)
    }
}

/// Tagged sentences with their frozen representations, when available.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub sentences: Vec<TaggedSentence>,
    pub reps: Option<Vec<LayerReps>>,
}

impl TaskData {
    /// Sentences without representations, enough for the baseline.
    pub fn plain(sentences: Vec<TaggedSentence>) -> Self {
        TaskData { sentences, reps: None }
    }

    /// Runs the frozen biLM over every sentence once.
    pub fn with_model(sentences: Vec<TaggedSentence>, model: &BiLm) -> Result<Self> {
        let tokens: Vec<_> = sentences.iter().map(|s| s.tokens.clone()).collect();
        let reps = extract_reps(model, &tokens)?;
        Ok(TaskData {
            sentences,
            reps: Some(reps),
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn n_tokens(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens.len()).sum()
    }

    /// `(layers, width)` of the attached representations.
    pub fn elmo_shape(&self) -> Option<(usize, usize)> {
        self.reps.as_ref().and_then(|r| r.first()).map(|r| (r.n_layers(), r.dim()))
    }

    pub fn reps_for(&self, i: usize) -> Option<&LayerReps> {
        self.reps.as_ref().map(|r| &r[i])
    }

    pub fn select(&self, indices: &[usize]) -> TaskData {
        TaskData {
            sentences: indices.iter().map(|&i| self.sentences[i].clone()).collect(),
            reps: self.reps.as_ref().map(|r| indices.iter().map(|&i| r[i].clone()).collect()),
        }
    }

    /// Same selection as [`subsample`] applied to the sentences alone.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<TaskData> {
        let all: Vec<usize> = (0..self.len()).collect();
        Ok(self.select(&subsample(&all, fraction, seed)?))
    }
}
