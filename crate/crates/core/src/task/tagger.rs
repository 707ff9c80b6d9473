use std::collections::{BTreeSet, HashMap};

use crate::bilm::{BiLm, LayerReps};
use crate::data::{build_vocab, TaggedSentence, Vocab, UNK_ID};
use crate::elmo::ScalarMix;
use crate::error::{Error, Result};
use crate::nn::{dropout, Linear, LstmCell};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::trainer::{clip_global_norm, Adam};

use super::crf::{crf_nll, viterbi};
use super::{TaskConfig, TaskData};

/// Embeddings, biLSTM, output projection and optional CRF transitions,
/// plus one scalar mix per place ELMo enters.
#[derive(Clone, Debug)]
pub struct Tagger {
    config: TaskConfig,
    words: Vocab,
    tags: Vec<String>,
    params: ParamStore,
    embed: ParamId,
    fwd: LstmCell,
    bwd: LstmCell,
    out: Linear,
    transitions: Option<ParamId>,
    mix_input: Option<ScalarMix>,
    mix_output: Option<ScalarMix>,
    elmo: Option<(usize, usize)>,
}

/// Tape handles for one pass.
struct Bindings {
    main: Bound,
    input: Option<Bound>,
    output: Option<Bound>,
}

impl Tagger {
    /// Fresh parameters drawn from `rng`. `elmo` is the `(layers, width)` of
    /// the representations the tagger will consume; it is required unless
    /// ELMo is switched off, and ignored then.
    pub fn new(config: TaskConfig, words: Vocab, tags: Vec<String>, elmo: Option<(usize, usize)>, rng: &mut SeedRng) -> Result<Self> {
        config.validate()?;
        if tags.is_empty() {
            return Err(Error::Argument("a tagger needs at least one tag".into()));
        }
        let loc = config.elmo_location;
        let elmo = match (loc.uses_elmo(), elmo) {
            (false, _) => None,
            (true, Some(shape)) => Some(shape),
            (true, None) => return Err(Error::Argument(format!("ELMo at the {loc} needs representations"))),
        };
        let mix = || -> Result<ScalarMix> {
            let (layers, dim) = elmo.expect("checked above");
            let n = if config.last_only { 1 } else { layers };
            ScalarMix::new(n, dim, config.use_layer_norm, config.lambda)
        };
        let mix_input = loc.at_input().then(mix).transpose()?;
        let mix_output = loc.at_output().then(mix).transpose()?;
        let width = elmo.map_or(0, |(_, d)| d);
        let d_in = config.d_x + if loc.at_input() { width } else { 0 };
        let d_out = 2 * config.d_task + if loc.at_output() { width } else { 0 };

        let mut params = ParamStore::new();
        let embed = params.add("embed", Tensor::uniform(&[words.len(), config.d_x], 0.1, rng));
        let fwd = LstmCell::new(&mut params, "forward", d_in, config.d_task, None, None, rng);
        let bwd = LstmCell::new(&mut params, "backward", d_in, config.d_task, None, None, rng);
        let out = Linear::new(&mut params, "output", d_out, tags.len(), rng);
        let transitions = config
            .use_crf
            .then(|| params.add("transitions", super::crf::zero_transitions(tags.len())));
        Ok(Tagger {
            config,
            words,
            tags,
            params,
            embed,
            fwd,
            bwd,
            out,
            transitions,
            mix_input,
            mix_output,
            elmo,
        })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn words(&self) -> &Vocab {
        &self.words
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn elmo_shape(&self) -> Option<(usize, usize)> {
        self.elmo
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn mix_input(&self) -> Option<&ScalarMix> {
        self.mix_input.as_ref()
    }

    pub fn mix_output(&self) -> Option<&ScalarMix> {
        self.mix_output.as_ref()
    }

    pub(crate) fn mixes_mut(&mut self) -> (Option<&mut ScalarMix>, Option<&mut ScalarMix>) {
        (self.mix_input.as_mut(), self.mix_output.as_mut())
    }

    /// Active mixes labelled by where they sit.
    pub fn mixes(&self) -> Vec<(&'static str, &ScalarMix)> {
        let mut out = Vec::new();
        if let Some(m) = &self.mix_input {
            out.push(("input", m));
        }
        if let Some(m) = &self.mix_output {
            out.push(("output", m));
        }
        out
    }

    /// Scalars in the tagger and its mixes.
    pub fn param_count(&self) -> usize {
        self.params.count() + self.mixes().iter().map(|(_, m)| m.params().count()).sum::<usize>()
    }

    pub fn round_to_f32(&mut self) {
        self.params.round_to_f32();
        for m in [&mut self.mix_input, &mut self.mix_output].into_iter().flatten() {
            m.params_mut().round_to_f32();
        }
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Bindings {
        Bindings {
            main: self.params.bind(tape, trainable),
            input: self.mix_input.as_ref().map(|m| m.params().bind(tape, trainable)),
            output: self.mix_output.as_ref().map(|m| m.params().bind(tape, trainable)),
        }
    }

    fn word_ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.words.lookup(t)).collect()
    }

    fn tag_ids(&self, tags: &[String]) -> Result<Vec<usize>> {
        tags.iter()
            .map(|t| {
                self.tags
                    .binary_search(t)
                    .map_err(|_| Error::Argument(format!("tag {t:?} not in the tag set")))
            })
            .collect()
    }

    fn elmo_vector(
        &self,
        tape: &mut Tape,
        mix: &ScalarMix,
        p: &Bound,
        reps: Option<&LayerReps>,
        n_tokens: usize,
        rng: Option<&mut SeedRng>,
    ) -> Result<Var> {
        let reps = reps.ok_or_else(|| Error::Contract("ELMo is enabled but no representations were supplied".into()))?;
        let (layers, dim) = self.elmo.expect("mix implies a shape");
        if reps.n_layers() != layers || reps.dim() != dim {
            return Err(Error::dim(format!(
                "representations have {} layers of width {}, tagger expects {layers} of width {dim}",
                reps.n_layers(),
                reps.dim()
            )));
        }
        if reps.n_tokens() != n_tokens {
            return Err(Error::dim(format!("{} representation rows for {n_tokens} tokens", reps.n_tokens())));
        }
        let used: &[Tensor] = if self.config.last_only {
            &reps.layers[layers - 1..]
        } else {
            &reps.layers
        };
        let vars: Vec<Var> = used.iter().map(|l| tape.constant(l.clone())).collect();
        let e = mix.forward(tape, p, &vars)?;
        match rng {
            Some(rng) => dropout(tape, e, self.config.dropout, rng),
            None => Ok(e),
        }
    }

    fn run_direction(&self, tape: &mut Tape, p: &Bound, cell: &LstmCell, x: Var, order: &[usize]) -> Result<Var> {
        let mut state = cell.zero_state(tape, 1);
        let mut hs = vec![None; order.len()];
        for &t in order {
            let xt = tape.gather_rows(x, &[t])?;
            state = cell.step(tape, p, xt, state)?;
            hs[t] = Some(state.h);
        }
        let hs: Vec<Var> = hs.into_iter().map(|h| h.expect("every position visited")).collect();
        tape.concat(&hs, 0)
    }

    /// Tag scores `[T × n_tags]` for one sentence. Passing `rng` switches
    /// on ELMo dropout.
    fn emissions(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        words: &[usize],
        reps: Option<&LayerReps>,
        mut rng: Option<&mut SeedRng>,
    ) -> Result<Var> {
        let t = words.len();
        if t == 0 {
            return Err(Error::Argument("cannot tag an empty sentence".into()));
        }
        let mut x = tape.gather_rows(b.main.var(self.embed), words)?;
        if let (Some(mix), Some(p)) = (&self.mix_input, &b.input) {
            let e = self.elmo_vector(tape, mix, p, reps, t, rng.as_deref_mut())?;
            x = tape.concat(&[x, e], 1)?;
        }
        let forward: Vec<usize> = (0..t).collect();
        let backward: Vec<usize> = (0..t).rev().collect();
        let hf = self.run_direction(tape, &b.main, &self.fwd, x, &forward)?;
        let hb = self.run_direction(tape, &b.main, &self.bwd, x, &backward)?;
        let mut h = tape.concat(&[hf, hb], 1)?;
        if let (Some(mix), Some(p)) = (&self.mix_output, &b.output) {
            let e = self.elmo_vector(tape, mix, p, reps, t, rng)?;
            h = tape.concat(&[h, e], 1)?;
        }
        self.out.forward(tape, &b.main, h)
    }

    /// Inference-mode tag scores for one sentence.
    pub fn logits(&self, tokens: &[String], reps: Option<&LayerReps>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let e = self.emissions(&mut tape, &b, &self.word_ids(tokens), reps, None)?;
        Ok(tape.value(e).clone())
    }

    /// Tag ids by Viterbi decoding with a CRF, per-token argmax otherwise
    /// (lower id on ties).
    pub fn predict_ids(&self, tokens: &[String], reps: Option<&LayerReps>) -> Result<Vec<usize>> {
        let scores = self.logits(tokens, reps)?;
        match self.transitions {
            Some(id) => viterbi(&scores, self.params.get(id)),
            None => Ok((0..scores.rows())
                .map(|k| {
                    let row = scores.row(k);
                    (1..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
                })
                .collect()),
        }
    }

    pub fn predict(&self, tokens: &[String], reps: Option<&LayerReps>) -> Result<Vec<String>> {
        Ok(self
            .predict_ids(tokens, reps)?
            .into_iter()
            .map(|i| self.tags[i].clone())
            .collect())
    }

    /// Token accuracy. Gold tags outside the tag set count as errors.
    pub fn accuracy(&self, data: &TaskData) -> Result<f64> {
        let total = data.n_tokens();
        if total == 0 {
            return Err(Error::EmptyCorpus("evaluation corpus has no tokens".into()));
        }
        let mut correct = 0;
        for (i, s) in data.sentences.iter().enumerate() {
            let reps = if self.elmo.is_some() { data.reps_for(i) } else { None };
            let pred = self.predict(&s.tokens, reps)?;
            correct += pred.iter().zip(&s.tags).filter(|(p, g)| p == g).count();
        }
        Ok(correct as f64 / total as f64)
    }

    /// Mean per-token loss over a batch plus the mix penalties.
    fn batch_loss(&self, tape: &mut Tape, b: &Bindings, batch: &[Example], mut rng: Option<&mut SeedRng>) -> Result<Var> {
        let mut total: Option<Var> = None;
        let mut n_tokens = 0;
        for ex in batch {
            let em = self.emissions(tape, b, &ex.words, ex.reps, rng.as_deref_mut())?;
            let nll = match self.transitions {
                Some(id) => crf_nll(tape, em, b.main.var(id), &ex.tags)?,
                None => {
                    let mean = tape.softmax_xent(em, &ex.tags)?;
                    tape.scale(mean, ex.tags.len() as f64)
                }
            };
            n_tokens += ex.tags.len();
            total = Some(match total {
                None => nll,
                Some(acc) => tape.add(acc, nll)?,
            });
        }
        let total = total.ok_or_else(|| Error::Argument("empty batch".into()))?;
        let mut loss = tape.scale(total, 1.0 / n_tokens as f64);
        for (mix, p) in [(&self.mix_input, &b.input), (&self.mix_output, &b.output)] {
            if let (Some(mix), Some(p)) = (mix, p) {
                let pen = mix.penalty(tape, p);
                loss = tape.add(loss, pen)?;
            }
        }
        Ok(loss)
    }

    /// Mean loss over `data` in inference mode.
    pub fn loss(&self, data: &TaskData) -> Result<f64> {
        let batch = self.examples(data)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let loss = self.batch_loss(&mut tape, &b, &batch, None)?;
        Ok(tape.value(loss).item())
    }

    fn examples<'a>(&self, data: &'a TaskData) -> Result<Vec<Example<'a>>> {
        data.sentences
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(Example {
                    words: self.word_ids(&s.tokens),
                    tags: self.tag_ids(&s.tags)?,
                    reps: data.reps_for(i),
                })
            })
            .collect()
    }

    fn step(&mut self, opt: &mut Adam, batch: &[Example], rng: &mut SeedRng, step: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, true);
        let loss = self.batch_loss(&mut tape, &b, batch, Some(rng))?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let grads = tape.backward(loss)?;
        let mut g = b.main.grads(&grads, &self.params);
        for (mix, p) in [(&self.mix_input, &b.input), (&self.mix_output, &b.output)] {
            if let (Some(mix), Some(p)) = (mix, p) {
                let mut mg = p.grads(&grads, mix.params());
                if !self.config.train_gamma {
                    let gamma = mix.params().names().iter().position(|n| n == "gamma").expect("mix has gamma");
                    mg[gamma] = Tensor::zeros(mg[gamma].shape());
                }
                g.extend(mg);
            }
        }
        if g.iter().any(|t| !t.is_finite()) {
            return Err(Error::Divergence { step, loss: value });
        }
        clip_global_norm(&mut g, self.config.grad_clip_norm);
        let mut tensors: Vec<&mut Tensor> = self.params.tensors_mut().iter_mut().collect();
        for m in [&mut self.mix_input, &mut self.mix_output].into_iter().flatten() {
            tensors.extend(m.params_mut().tensors_mut().iter_mut());
        }
        opt.step(&mut tensors, &g)?;
        Ok(value)
    }
}

struct Example<'a> {
    words: Vec<usize>,
    tags: Vec<usize>,
    reps: Option<&'a LayerReps>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TaskOutcome {
    /// Parameters from the epoch with the best dev accuracy, rounded to f32.
    pub tagger: Tagger,
    pub epochs: Vec<TaskEpoch>,
    pub best_epoch: usize,
    /// Dev accuracy of the returned (rounded) tagger.
    pub dev_accuracy: f64,
}

/// Trains a tagger on prepared data. Representations are used only when
/// the configuration asks for ELMo. Training sentences are put in a
/// canonical order first, so the result depends on the multiset of training
/// sentences and the seed, not on the order they arrive in.
pub fn train_tagger(train: &TaskData, dev: &TaskData, config: &TaskConfig) -> Result<TaskOutcome> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::EmptyCorpus("task training or dev corpus is empty".into()));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&train.sentences[a], &train.sentences[b]);
        (&x.tokens, &x.tags).cmp(&(&y.tokens, &y.tags))
    });
    let train = &train.select(&order);
    let elmo = if config.elmo_location.uses_elmo() {
        let shape = train.elmo_shape();
        if shape.is_none() || dev.elmo_shape().is_none() {
            return Err(Error::Argument(format!(
                "ELMo at the {} needs representations for train and dev",
                config.elmo_location
            )));
        }
        shape
    } else {
        None
    };
    let tokens: Vec<_> = train.sentences.iter().map(|s| s.tokens.clone()).collect();
    let words = build_vocab(&tokens, 1)?;
    let tags: Vec<String> = train
        .sentences
        .iter()
        .flat_map(|s| s.tags.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let root = SeedRng::new(config.seed).split("task");
    let mut tagger = Tagger::new(config.clone(), words, tags, elmo, &mut root.split("init"))?;

    let mut counts: HashMap<usize, usize> = HashMap::new();
    for s in &train.sentences {
        for t in &s.tokens {
            *counts.entry(tagger.words.lookup(t)).or_default() += 1;
        }
    }
    let examples = tagger.examples(train)?;
    let mut opt = Adam::new(config.lr, 0.9, 0.999, 1e-8);
    let mut drop_rng = root.split("dropout");
    let mut unk_rng = root.split("unk");
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Tagger, usize)> = None;
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        root.split_indexed("epoch", epoch as u64).shuffle(&mut order);
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Example> = chunk
                .iter()
                .map(|&i| {
                    let ex = &examples[i];
                    let words = ex
                        .words
                        .iter()
                        .map(|&w| if counts[&w] == 1 && unk_rng.chance(config.unk_rate) { UNK_ID } else { w })
                        .collect();
                    Example {
                        words,
                        tags: ex.tags.clone(),
                        reps: ex.reps,
                    }
                })
                .collect();
            step += 1;
            sum += tagger.step(&mut opt, &batch, &mut drop_rng, step)?;
            n += 1;
        }
        let dev_accuracy = tagger.accuracy(dev)?;
        epochs.push(TaskEpoch {
            epoch,
            train_loss: sum / n as f64,
            dev_accuracy,
        });
        if best.as_ref().map_or(true, |(acc, _, _)| dev_accuracy > *acc) {
            best = Some((dev_accuracy, tagger.clone(), epoch));
        }
    }
    let (_, mut tagger, best_epoch) = best.expect("at least one epoch");
    tagger.round_to_f32();
    let dev_accuracy = tagger.accuracy(dev)?;
    Ok(TaskOutcome {
        tagger,
        epochs,
        best_epoch,
        dev_accuracy,
    })
}

/// Extracts representations from `model` when the configuration uses ELMo,
/// then trains. With ELMo off the model is never touched.
pub fn train_task(
    train: &[TaggedSentence],
    dev: &[TaggedSentence],
    model: Option<&BiLm>,
    config: &TaskConfig,
) -> Result<TaskOutcome> {
    let (train, dev) = if config.elmo_location.uses_elmo() {
        let model = model.ok_or_else(|| Error::Argument(format!("ELMo at the {} needs a checkpoint", config.elmo_location)))?;
        (
            TaskData::with_model(train.to_vec(), model)?,
            TaskData::with_model(dev.to_vec(), model)?,
        )
    } else {
        (TaskData::plain(train.to_vec()), TaskData::plain(dev.to_vec()))
    };
    train_tagger(&train, &dev, config)
}
