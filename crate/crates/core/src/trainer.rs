//! Language-model optimization: Adam, global-norm clipping, the epoch loop
//! with best-dev selection, and one-epoch domain fine-tuning.

use crate::bilm::{perplexity, BiLm, BiLmConfig, Perplexity};
use crate::charcnn::CharCnnConfig;
use crate::config::{Configurable, KeyValues};
use crate::data::{build_vocab, dev_split, encode_tight, Sentence};
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub dropout: f64,
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip_norm: 5.0,
            batch_size: 16,
            epochs: 5,
            max_steps: None,
            seed: 0,
            dropout: 0.1,
            min_count: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::Argument("lr and grad_clip_norm must be positive".into()));
        }
        if self.batch_size == 0 || self.min_count == 0 {
            return Err(Error::Argument("batch_size and min_count must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Argument("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn adam(&self) -> Adam {
        Adam::new(self.lr, self.beta1, self.beta2, self.eps)
    }
}

impl Configurable for TrainConfig {
    fn write(&self, prefix: &str, kv: &mut KeyValues) {
        kv.set(&format!("{prefix}.lr"), self.lr);
        kv.set(&format!("{prefix}.beta1"), self.beta1);
        kv.set(&format!("{prefix}.beta2"), self.beta2);
        kv.set(&format!("{prefix}.eps"), self.eps);
        kv.set(&format!("{prefix}.grad_clip_norm"), self.grad_clip_norm);
        kv.set(&format!("{prefix}.batch_size"), self.batch_size);
        kv.set(&format!("{prefix}.epochs"), self.epochs);
        if let Some(m) = self.max_steps {
            kv.set(&format!("{prefix}.max_steps"), m);
        }
        kv.set(&format!("{prefix}.seed"), self.seed);
        kv.set(&format!("{prefix}.dropout"), self.dropout);
        kv.set(&format!("{prefix}.min_count"), self.min_count);
    }

    fn apply(&mut self, prefix: &str, kv: &KeyValues) -> Result<()> {
        kv.update(&format!("{prefix}.lr"), &mut self.lr)?;
        kv.update(&format!("{prefix}.beta1"), &mut self.beta1)?;
        kv.update(&format!("{prefix}.beta2"), &mut self.beta2)?;
        kv.update(&format!("{prefix}.eps"), &mut self.eps)?;
        kv.update(&format!("{prefix}.grad_clip_norm"), &mut self.grad_clip_norm)?;
        kv.update(&format!("{prefix}.batch_size"), &mut self.batch_size)?;
        kv.update(&format!("{prefix}.epochs"), &mut self.epochs)?;
        if let Some(m) = kv.get(&format!("{prefix}.max_steps"))? {
            self.max_steps = Some(m);
        }
        kv.update(&format!("{prefix}.seed"), &mut self.seed)?;
        kv.update(&format!("{prefix}.dropout"), &mut self.dropout)?;
        kv.update(&format!("{prefix}.min_count"), &mut self.min_count)
    }
}

/// Adam with bias correction. Moment buffers are created on the first step
/// and must keep the same shapes afterwards.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != grads.len() {
            return Err(Error::dim("optimizer state does not match the parameter list"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].shape() != g.shape() {
                return Err(Error::dim(format!(
                    "parameter {i}: shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the factor applied (1 when already within bounds).
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    grads.iter_mut().for_each(|g| g.scale_assign(scale));
    scale
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub dev: Perplexity,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Best-dev model, rounded to 32-bit values so that it survives a
    /// checkpoint round trip unchanged.
    pub model: BiLm,
    pub epochs: Vec<EpochMetrics>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub untrained_dev: Perplexity,
}

/// Builds a vocabulary from the training part of `corpus` (everything but
/// the 10% tail), initialises a model from `train.seed` and trains it.
pub fn train_lm(corpus: &[Sentence], charcnn: CharCnnConfig, bilm: BiLmConfig, train: &TrainConfig) -> Result<TrainReport> {
    train.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("language-model training corpus".into()));
    }
    let (train_part, dev) = dev_split(corpus);
    let vocab = build_vocab(&train_part, train.min_count)?;
    let mut model = BiLm::new(bilm, charcnn, vocab, train.seed)?;
    model.round_to_f32();
    train_model(model, &train_part, &dev, train)
}

/// Trains an existing model, keeping the parameters with the lowest dev
/// average perplexity seen at an epoch boundary.
pub fn train_model(mut model: BiLm, train_part: &[Sentence], dev: &[Sentence], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train_part.is_empty() || dev.is_empty() {
        return Err(Error::EmptyCorpus("training or dev split is empty".into()));
    }
    model.set_dropout(cfg.dropout)?;
    let untrained_dev = perplexity(&model, dev)?;
    let mut best = (untrained_dev.average, model.clone(), 0);
    let mut opt = cfg.adam();
    let mut step_losses = Vec::new();
    let mut epochs = Vec::new();
    let root = SeedRng::new(cfg.seed).split("train");
    let mut drop_rng = root.split("dropout");
    'outer: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_part.len()).collect();
        root.split_indexed("epoch", epoch as u64).shuffle(&mut order);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step_losses.len() >= m) {
                break;
            }
            let batch: Vec<Sentence> = chunk.iter().map(|&i| train_part[i].clone()).collect();
            let loss = lm_step(&mut model, &batch, &mut opt, cfg.grad_clip_norm, &mut drop_rng, step_losses.len() + 1)?;
            step_losses.push(loss);
            sum += loss;
            steps += 1;
        }
        if steps == 0 {
            break 'outer;
        }
        let dev_ppl = perplexity(&model, dev)?;
        epochs.push(EpochMetrics {
            epoch,
            steps,
            train_loss: sum / steps as f64,
            dev: dev_ppl,
        });
        if dev_ppl.average < best.0 {
            best = (dev_ppl.average, model.clone(), epoch);
        }
    }
    let (_, mut model, best_epoch) = best;
    model.round_to_f32();
    Ok(TrainReport {
        model,
        epochs,
        step_losses,
        best_epoch,
        untrained_dev,
    })
}

/// One optimizer step on one batch; returns the pre-update loss.
pub fn lm_step(
    model: &mut BiLm,
    batch: &[Sentence],
    opt: &mut Adam,
    clip: f64,
    dropout_rng: &mut SeedRng,
    step: usize,
) -> Result<f64> {
    let enc = encode_tight(batch, model.vocab(), &model.codec())?;
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let out = model.run(&mut tape, &p, &enc, Some(dropout_rng))?;
    let loss = model.joint_nll(&mut tape, &p, &out, &enc)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Divergence { step, loss: value });
    }
    let grads = tape.backward(loss)?;
    let mut g: Vec<Tensor> = p
        .vars()
        .iter()
        .zip(model.tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect();
    if g.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { step, loss: value });
    }
    clip_global_norm(&mut g, clip);
    opt.step(&mut model.tensors_mut(), &g)?;
    Ok(value)
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub model: BiLm,
    pub before: Perplexity,
    pub after: Perplexity,
    pub steps: usize,
}

/// Continues language-model training on in-domain text for `cfg.epochs`
/// epochs (one by default in the CLI), measuring perplexity on the domain
/// corpus's 10% tail before and after. The vocabulary is kept; new words
/// fall back to `<UNK>` as targets while their characters are still read.
pub fn finetune_lm(model: &BiLm, domain: &[Sentence], cfg: &TrainConfig) -> Result<FinetuneReport> {
    cfg.validate()?;
    if domain.is_empty() {
        return Err(Error::EmptyCorpus("fine-tuning corpus".into()));
    }
    let (train_part, dev) = dev_split(domain);
    let before = perplexity(model, &dev)?;
    let mut model = model.clone();
    model.set_dropout(cfg.dropout)?;
    let mut opt = cfg.adam();
    let root = SeedRng::new(cfg.seed).split("finetune");
    let mut drop_rng = root.split("dropout");
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_part.len()).collect();
        root.split_indexed("epoch", epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sentence> = chunk.iter().map(|&i| train_part[i].clone()).collect();
            steps += 1;
            lm_step(&mut model, &batch, &mut opt, cfg.grad_clip_norm, &mut drop_rng, steps)?;
        }
    }
    model.round_to_f32();
    let after = perplexity(&model, &dev)?;
    Ok(FinetuneReport {
        model,
        before,
        after,
        steps,
    })
}
