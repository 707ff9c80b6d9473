//! Layer probes on frozen representations: nearest-centroid word sense
//! disambiguation and a linear part-of-speech classifier.

use std::collections::BTreeMap;

use crate::bilm::{BiLm, LayerReps};
use crate::data::{SenseExample, Sentence, TaggedSentence};
use crate::elmo::{extract_reps, nearest_neighbors};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::SeedRng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::Adam;

#[derive(Clone, Debug, PartialEq)]
pub struct SenseEntry {
    pub sense: String,
    pub count: usize,
    pub centroid: Vec<f64>,
}

/// Per-lemma sense centroids from one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SenseInventory {
    pub layer: usize,
    pub dim: usize,
    /// Senses of each lemma, sorted by sense id.
    pub lemmas: BTreeMap<String, Vec<SenseEntry>>,
    /// Most frequent training sense overall, used for unknown lemmas.
    pub fallback: String,
}

/// How a prediction was reached.
#[derive(Clone, Debug, PartialEq)]
pub struct SensePrediction {
    pub sense: String,
    pub fallback: bool,
}

impl SenseInventory {
    /// Averages the layer-`layer` vector of each example's target word per
    /// `(lemma, sense)`. `reps[i]` must belong to `examples[i]`.
    pub fn fit(examples: &[SenseExample], reps: &[LayerReps], layer: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyCorpus("word sense training set".into()));
        }
        if reps.len() != examples.len() {
            return Err(Error::dim(format!("{} representations for {} examples", reps.len(), examples.len())));
        }
        if layer >= reps[0].n_layers() {
            return Err(Error::Argument(format!("layer {layer} outside 0..{}", reps[0].n_layers())));
        }
        let dim = reps[0].dim();
        let mut sums: BTreeMap<(String, String), (usize, Vec<f64>)> = BTreeMap::new();
        for (ex, r) in examples.iter().zip(reps) {
            let v = r.vector(layer, ex.target_index);
            let slot = sums
                .entry((ex.lemma.clone(), ex.sense.clone()))
                .or_insert_with(|| (0, vec![0.0; dim]));
            slot.0 += 1;
            slot.1.iter_mut().zip(v).for_each(|(s, x)| *s += x);
        }
        let mut lemmas: BTreeMap<String, Vec<SenseEntry>> = BTreeMap::new();
        let mut totals: BTreeMap<String, usize> = BTreeMap::new();
        for ((lemma, sense), (count, sum)) in sums {
            *totals.entry(sense.clone()).or_default() += count;
            lemmas.entry(lemma).or_default().push(SenseEntry {
                sense,
                count,
                centroid: sum.into_iter().map(|s| s / count as f64).collect(),
            });
        }
        // Highest count; ties go to the lowest sense id (map order).
        let fallback = totals
            .iter()
            .fold(None::<(&String, usize)>, |best, (s, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((s, c)),
            })
            .map(|(s, _)| s.clone())
            .expect("non-empty training set");
        Ok(SenseInventory {
            layer,
            dim,
            lemmas,
            fallback,
        })
    }

    /// Cosine 1-NN among the lemma's centroids; ties go to the lowest sense
    /// id. Lemmas never seen in training get [`fallback`](Self::fallback).
    pub fn predict(&self, lemma: &str, vector: &[f64]) -> Result<SensePrediction> {
        match self.lemmas.get(lemma) {
            None => Ok(SensePrediction {
                sense: self.fallback.clone(),
                fallback: true,
            }),
            Some(entries) => {
                let centroids: Vec<&[f64]> = entries.iter().map(|e| e.centroid.as_slice()).collect();
                let best = nearest_neighbors(vector, &centroids, 1)?[0].0;
                Ok(SensePrediction {
                    sense: entries[best].sense.clone(),
                    fallback: false,
                })
            }
        }
    }
}

fn sentences_of(examples: &[SenseExample]) -> Vec<Sentence> {
    examples.iter().map(|e| e.tokens.clone()).collect()
}

pub fn wsd_fit(train: &[SenseExample], model: &BiLm, layer: usize) -> Result<SenseInventory> {
    let reps = extract_reps(model, &sentences_of(train))?;
    SenseInventory::fit(train, &reps, layer)
}

pub fn wsd_predict(example: &SenseExample, inventory: &SenseInventory, model: &BiLm) -> Result<String> {
    let reps = model.layer_reps(std::slice::from_ref(&example.tokens))?;
    let v = reps[0].vector(inventory.layer, example.target_index);
    Ok(inventory.predict(&example.lemma, v)?.sense)
}

/// Fraction of examples whose predicted sense matches the gold sense.
pub fn wsd_accuracy(examples: &[SenseExample], reps: &[LayerReps], inventory: &SenseInventory) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus("word sense test set".into()));
    }
    let mut correct = 0;
    for (ex, r) in examples.iter().zip(reps) {
        let pred = inventory.predict(&ex.lemma, r.vector(inventory.layer, ex.target_index))?;
        correct += usize::from(pred.sense == ex.sense);
    }
    Ok(correct as f64 / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 60,
            lr: 0.01,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Argument("probe epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Argument(format!("probe lr {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// A bias-plus-matrix classifier over one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub layer: usize,
    pub tags: Vec<String>,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Rows of layer `layer` for every token, plus each token's tag.
pub fn token_features(corpus: &[TaggedSentence], reps: &[LayerReps], layer: usize) -> Result<(Tensor, Vec<String>)> {
    let dim = reps.first().map(LayerReps::dim).unwrap_or(0);
    let mut data = Vec::new();
    let mut tags = Vec::new();
    for (s, r) in corpus.iter().zip(reps) {
        if layer >= r.n_layers() {
            return Err(Error::Argument(format!("layer {layer} outside 0..{}", r.n_layers())));
        }
        for (k, tag) in s.tags.iter().enumerate() {
            data.extend_from_slice(r.vector(layer, k));
            tags.push(tag.clone());
        }
    }
    if tags.is_empty() {
        return Err(Error::EmptyCorpus("tagged corpus".into()));
    }
    Ok((Tensor::new(vec![tags.len(), dim], data)?, tags))
}

impl LinearProbe {
    /// Softmax cross-entropy training of the affine map only.
    pub fn train(features: &Tensor, tags: &[String], layer: usize, cfg: &ProbeConfig) -> Result<Self> {
        cfg.validate()?;
        if features.rows() != tags.len() || tags.is_empty() {
            return Err(Error::dim(format!("{} feature rows for {} tags", features.rows(), tags.len())));
        }
        let mut tag_set: Vec<String> = tags.to_vec();
        tag_set.sort();
        tag_set.dedup();
        let targets: Vec<usize> = tags.iter().map(|t| tag_set.binary_search(t).unwrap()).collect();
        let dim = features.last_dim();
        let mut params = ParamStore::new();
        let w = params.add("weight", Tensor::zeros(&[dim, tag_set.len()]));
        let b = params.add("bias", Tensor::zeros(&[tag_set.len()]));
        let mut opt = Adam::new(cfg.lr, 0.9, 0.999, 1e-8);
        let root = SeedRng::new(cfg.seed).split("probe");
        for epoch in 0..cfg.epochs {
            let order = root.split_indexed("epoch", epoch as u64).permutation(tags.len());
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let mut tape = Tape::new();
                let p = params.bind(&mut tape, true);
                let x = tape.constant(Tensor::new(
                    vec![chunk.len(), dim],
                    chunk.iter().flat_map(|&i| features.row(i).iter().copied()).collect(),
                )?);
                let h = tape.matmul(x, p.var(w))?;
                let logits = tape.add_bias(h, p.var(b))?;
                let y: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
                let loss = tape.softmax_xent(logits, &y)?;
                let grads = tape.backward(loss)?;
                let g = p.grads(&grads, &params);
                opt.step(&mut params.tensors_mut().iter_mut().collect::<Vec<_>>(), &g)?;
            }
        }
        Ok(LinearProbe {
            layer,
            tags: tag_set,
            weight: params.get(w).clone(),
            bias: params.get(b).clone(),
        })
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let n = self.tags.len();
        let mut out = self.bias.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.weight.data()[i * n..(i + 1) * n];
            out.iter_mut().zip(row).for_each(|(o, w)| *o += xi * w);
        }
        out
    }

    /// Highest-scoring tag; ties go to the earlier tag.
    pub fn predict(&self, x: &[f64]) -> &str {
        let logits = self.logits(x);
        let best = logits
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > logits[best] { i } else { best });
        &self.tags[best]
    }

    /// Token accuracy; tags unknown to the probe always count as wrong.
    pub fn accuracy(&self, features: &Tensor, tags: &[String]) -> f64 {
        let correct = tags
            .iter()
            .enumerate()
            .filter(|(i, t)| self.predict(features.row(*i)) == t.as_str())
            .count();
        correct as f64 / tags.len().max(1) as f64
    }
}

pub fn pos_probe_train(corpus: &[TaggedSentence], model: &BiLm, layer: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    let sentences: Vec<Sentence> = corpus.iter().map(|s| s.tokens.clone()).collect();
    let reps = extract_reps(model, &sentences)?;
    let (x, y) = token_features(corpus, &reps, layer)?;
    LinearProbe::train(&x, &y, layer, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub layer: usize,
    pub wsd_accuracy: f64,
    pub pos_accuracy: f64,
}

/// One row per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("layer\twsd_accuracy\tpos_accuracy\n");
        for r in &self.rows {
            out += &format!("{}\t{:.4}\t{:.4}\n", r.layer, r.wsd_accuracy, r.pos_accuracy);
        }
        out
    }
}

/// Corpora for [`probe_report`].
pub struct ProbeCorpora<'a> {
    pub wsd_train: &'a [SenseExample],
    pub wsd_test: &'a [SenseExample],
    pub pos_train: &'a [TaggedSentence],
    pub pos_test: &'a [TaggedSentence],
}

/// WSD and POS accuracy for every layer of the model.
pub fn probe_report(model: &BiLm, corpora: &ProbeCorpora, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let tokens = |c: &[TaggedSentence]| -> Vec<Sentence> { c.iter().map(|s| s.tokens.clone()).collect() };
    let wsd_train_reps = extract_reps(model, &sentences_of(corpora.wsd_train))?;
    let wsd_test_reps = extract_reps(model, &sentences_of(corpora.wsd_test))?;
    let pos_train_reps = extract_reps(model, &tokens(corpora.pos_train))?;
    let pos_test_reps = extract_reps(model, &tokens(corpora.pos_test))?;
    let mut rows = Vec::new();
    for layer in 0..=model.config().layers {
        let inv = SenseInventory::fit(corpora.wsd_train, &wsd_train_reps, layer)?;
        let wsd = wsd_accuracy(corpora.wsd_test, &wsd_test_reps, &inv)?;
        let (x, y) = token_features(corpora.pos_train, &pos_train_reps, layer)?;
        let probe = LinearProbe::train(&x, &y, layer, cfg)?;
        let (xt, yt) = token_features(corpora.pos_test, &pos_test_reps, layer)?;
        rows.push(ProbeRow {
            layer,
            wsd_accuracy: wsd,
            pos_accuracy: probe.accuracy(&xt, &yt),
        });
    }
    Ok(ProbeReport { rows })
}
