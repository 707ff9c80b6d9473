use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use elmo_core::bilm::{perplexity, BiLm, Perplexity};
use elmo_core::checkpoint::{load_checkpoint, save_checkpoint};
use elmo_core::data::{build_vocab, format_tagged, load_corpus, load_sense_corpus, load_tagged_corpus, Sentence, TaggedSentence};
use elmo_core::elmo::{export_reps, extract_reps};
use elmo_core::error::{Error, Result};
use elmo_core::probes::{probe_report, token_features, wsd_accuracy, wsd_fit, LinearProbe, ProbeCorpora};
use elmo_core::suite::{run_suite, MAX_REL_ERR};
use elmo_core::synth::files;
use elmo_core::task::experiments::{ablation, sample_efficiency, weights_report};
use elmo_core::task::{load_tagger, save_tagger, train_tagger, ElmoLocation, TaskConfig, TaskData};
use elmo_core::trainer::{finetune_lm, train_lm, train_model, TrainReport};

use crate::settings::Settings;
use crate::{Command, Common, TaskFlags};

pub fn run(command: Command, common: &Common) -> Result<()> {
    let mut s = Settings::load(common.config.as_deref(), common.seed)?;
    match command {
        Command::TrainLm { corpus, dev, out, epochs } => {
            if let Some(e) = epochs {
                s.train.epochs = e;
            }
            s.train.validate()?;
            s.charcnn.validate()?;
            s.bilm.validate(&s.charcnn)?;
            let text = load_corpus(&corpus)?;
            let report = match dev {
                None => train_lm(&text, s.charcnn, s.bilm, &s.train)?,
                Some(dev) => {
                    let dev = load_corpus(&dev)?;
                    let vocab = build_vocab(&text, s.train.min_count)?;
                    let mut model = BiLm::new(s.bilm, s.charcnn, vocab, s.train.seed)?;
                    model.round_to_f32();
                    train_model(model, &text, &dev, &s.train)?
                }
            };
            print!("{}", lm_log(&report));
            save_checkpoint(&report.model, &out)
        }
        Command::FinetuneLm { ckpt, corpus, out, epochs, check } => {
            s.train.epochs = epochs.unwrap_or(1);
            s.train.validate()?;
            let model = load_checkpoint(&ckpt)?;
            let domain = load_corpus(&corpus)?;
            let report = finetune_lm(&model, &domain, &s.train)?;
            println!("stage\tforward\tbackward\taverage");
            println!("{}", ppl_row("before", &report.before));
            println!("{}", ppl_row("after", &report.after));
            save_checkpoint(&report.model, &out)?;
            if check && !(report.after.average < report.before.average) {
                return Err(Error::Numeric(format!(
                    "fine-tuning did not reduce dev perplexity ({:.4} -> {:.4})",
                    report.before.average, report.after.average
                )));
            }
            Ok(())
        }
        Command::Perplexity { ckpt, corpus } => {
            let model = load_checkpoint(&ckpt)?;
            let text = load_corpus(&corpus)?;
            println!("forward\tbackward\taverage");
            let p = perplexity(&model, &text)?;
            println!("{:.6}\t{:.6}\t{:.6}", p.forward, p.backward, p.average);
            Ok(())
        }
        Command::Embed { ckpt, corpus, out } => {
            let model = load_checkpoint(&ckpt)?;
            let text = load_corpus(&corpus)?;
            let reps = extract_reps(&model, &text)?;
            export_reps(&reps, &text, &out)?;
            eprintln!("wrote {} sentences x {} layers to {}", text.len(), model.config().layers + 1, out.display());
            Ok(())
        }
        Command::ProbeWsd { ckpt, corpus, dev, layer, out } => {
            let model = load_checkpoint(&ckpt)?;
            check_layer(&model, layer)?;
            let train = load_sense_corpus(&corpus)?;
            let test = load_sense_corpus(&dev)?;
            let inventory = wsd_fit(&train, &model, layer)?;
            let sentences: Vec<Sentence> = test.iter().map(|e| e.tokens.clone()).collect();
            let reps = extract_reps(&model, &sentences)?;
            if let Some(out) = out {
                let mut text = String::new();
                for (ex, r) in test.iter().zip(&reps) {
                    let pred = inventory.predict(&ex.lemma, r.vector(layer, ex.target_index))?;
                    let _ = writeln!(text, "{}\t{}", ex.lemma, pred.sense);
                }
                fs::write(out, text)?;
            }
            println!("layer\twsd_accuracy");
            println!("{layer}\t{:.4}", wsd_accuracy(&test, &reps, &inventory)?);
            Ok(())
        }
        Command::ProbePos { ckpt, corpus, dev, layer, epochs } => {
            if let Some(e) = epochs {
                s.probe.epochs = e;
            }
            s.probe.validate()?;
            let model = load_checkpoint(&ckpt)?;
            check_layer(&model, layer)?;
            let train = load_tagged_corpus(&corpus)?;
            let test = load_tagged_corpus(&dev)?;
            let (x, y) = token_features(&train, &extract_reps(&model, &tokens_of(&train))?, layer)?;
            let probe = LinearProbe::train(&x, &y, layer, &s.probe)?;
            let (xt, yt) = token_features(&test, &extract_reps(&model, &tokens_of(&test))?, layer)?;
            println!("layer\tpos_accuracy");
            println!("{layer}\t{:.4}", probe.accuracy(&xt, &yt));
            Ok(())
        }
        Command::ProbeReport { ckpt, data, epochs, out, check } => {
            if let Some(e) = epochs {
                s.probe.epochs = e;
            }
            s.probe.validate()?;
            let model = load_checkpoint(&ckpt)?;
            let wsd_train = load_sense_corpus(data.join(files::WSD_TRAIN))?;
            let wsd_test = load_sense_corpus(data.join(files::WSD_TEST))?;
            let pos_train = load_tagged_corpus(data.join(files::POS_TRAIN))?;
            let pos_test = load_tagged_corpus(data.join(files::POS_DEV))?;
            let corpora = ProbeCorpora {
                wsd_train: &wsd_train,
                wsd_test: &wsd_test,
                pos_train: &pos_train,
                pos_test: &pos_test,
            };
            let report = probe_report(&model, &corpora, &s.probe)?;
            emit(&report.to_tsv(), out.as_deref())?;
            if check {
                let base = &report.rows[0];
                if let Some(r) = report.rows[1..]
                    .iter()
                    .find(|r| !(r.wsd_accuracy > base.wsd_accuracy && r.pos_accuracy > base.pos_accuracy))
                {
                    return Err(Error::Numeric(format!("layer {} does not beat the token layer on both probes", r.layer)));
                }
            }
            Ok(())
        }
        Command::TrainTask { task, out } => {
            let cfg = task_config(&mut s, &task)?;
            let (train, dev) = task_data(&task, cfg.elmo_location)?;
            let outcome = train_tagger(&train, &dev, &cfg)?;
            println!("epoch\ttrain_loss\tdev_accuracy");
            for e in &outcome.epochs {
                println!("{}\t{:.6}\t{:.4}", e.epoch, e.train_loss, e.dev_accuracy);
            }
            println!("best\t{}\t{:.4}", outcome.best_epoch, outcome.dev_accuracy);
            match out {
                Some(out) => save_tagger(&outcome.tagger, out),
                None => Ok(()),
            }
        }
        Command::EvalTask { tagger, dev, ckpt, out } => {
            let tagger = load_tagger(&tagger)?;
            let sentences = load_tagged_corpus(&dev)?;
            let data = match (tagger.elmo_shape(), ckpt) {
                (None, _) => TaskData::plain(sentences),
                (Some(_), Some(ckpt)) => TaskData::with_model(sentences, &load_checkpoint(ckpt)?)?,
                (Some(_), None) => return Err(Error::Argument("this tagger uses ELMo; pass --ckpt".into())),
            };
            if let Some(out) = out {
                let mut text = String::new();
                for (i, s) in data.sentences.iter().enumerate() {
                    let tags = tagger.predict(&s.tokens, data.reps_for(i))?;
                    let _ = writeln!(text, "{}", format_tagged(&TaggedSentence { tokens: s.tokens.clone(), tags }));
                }
                fs::write(out, text)?;
            }
            println!("dev_accuracy\t{:.4}", tagger.accuracy(&data)?);
            Ok(())
        }
        Command::Ablation { task, out, check } => {
            let cfg = task_config(&mut s, &task)?;
            require_ckpt(&task)?;
            let location = match cfg.elmo_location {
                ElmoLocation::None => ElmoLocation::Input,
                l => l,
            };
            let (train, dev) = task_data(&task, location)?;
            let report = ablation(&train, &dev, &cfg)?;
            emit(&report.to_tsv(), out.as_deref())?;
            if check {
                let strong = report.row("lambda=1").expect("grid row");
                let weak = report.row("lambda=0.001").expect("grid row");
                if !(strong.max_deviation < weak.max_deviation) {
                    return Err(Error::Numeric(format!(
                        "lambda=1 weights deviate {:.4} from uniform, lambda=0.001 only {:.4}",
                        strong.max_deviation, weak.max_deviation
                    )));
                }
            }
            Ok(())
        }
        Command::SampleEfficiency { task, fractions, seeds, out, check } => {
            let cfg = task_config(&mut s, &task)?;
            if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
                return Err(Error::Argument(format!("fraction {f} outside (0, 1]")));
            }
            if seeds.is_empty() {
                return Err(Error::Argument("need at least one seed".into()));
            }
            require_ckpt(&task)?;
            let (train, dev) = task_data(&task, ElmoLocation::Input)?;
            let curve = sample_efficiency(&train, &dev, &fractions, &seeds, &cfg)?;
            emit(&curve.to_tsv(), out.as_deref())?;
            if check {
                if let Some(p) = curve.means().iter().find(|p| p.elmo < p.baseline) {
                    return Err(Error::Numeric(format!(
                        "at fraction {} ELMo {:.4} is below the baseline {:.4}",
                        p.fraction, p.elmo, p.baseline
                    )));
                }
            }
            Ok(())
        }
        Command::WeightsReport { tagger, out } => {
            let tagger = load_tagger(&tagger)?;
            let report = weights_report(&tagger);
            if report.rows.is_empty() {
                eprintln!("this tagger does not use ELMo; no weights to report");
            } else {
                eprint!("{}", report.render_bars());
            }
            emit(&report.to_tsv(), out.as_deref())
        }
        Command::Gradcheck { out } => {
            let start = Instant::now();
            let report = run_suite(s.train.seed)?;
            emit(&report.to_tsv(), out.as_deref())?;
            eprintln!("worst relative error {:.3e} in {:.2?}", report.worst(), start.elapsed());
            if !report.passed() {
                return Err(Error::Numeric(format!(
                    "gradient check failed: worst relative error {:.3e} exceeds {MAX_REL_ERR:e}",
                    report.worst()
                )));
            }
            Ok(())
        }
    }
}

/// Applies the task flags over the loaded settings and validates the result.
fn task_config(s: &mut Settings, flags: &TaskFlags) -> Result<TaskConfig> {
    if let Some(l) = flags.elmo_location {
        s.task.elmo_location = l;
    }
    if let Some(l) = flags.lambda {
        s.task.lambda = l;
    }
    if let Some(e) = flags.epochs {
        s.task.epochs = e;
    }
    s.task.validate()?;
    if s.task.elmo_location.uses_elmo() && flags.ckpt.is_none() {
        return Err(Error::Argument(format!(
            "ELMo at the {} needs --ckpt (or --elmo-location none)",
            s.task.elmo_location
        )));
    }
    Ok(s.task.clone())
}

/// Loads train and dev; attaches representations when `location` uses them.
fn task_data(flags: &TaskFlags, location: ElmoLocation) -> Result<(TaskData, TaskData)> {
    let train = load_tagged_corpus(&flags.corpus)?;
    let dev = load_tagged_corpus(&flags.dev)?;
    if !location.uses_elmo() {
        return Ok((TaskData::plain(train), TaskData::plain(dev)));
    }
    let model = load_checkpoint(require_ckpt(flags)?)?;
    Ok((TaskData::with_model(train, &model)?, TaskData::with_model(dev, &model)?))
}

fn require_ckpt(flags: &TaskFlags) -> Result<&Path> {
    flags
        .ckpt
        .as_deref()
        .ok_or_else(|| Error::Argument("this command needs --ckpt".into()))
}

fn check_layer(model: &BiLm, layer: usize) -> Result<()> {
    let layers = model.config().layers;
    if layer > layers {
        return Err(Error::Argument(format!("--layer {layer} but the model has layers 0..={layers}")));
    }
    Ok(())
}

fn tokens_of(corpus: &[TaggedSentence]) -> Vec<Sentence> {
    corpus.iter().map(|s| s.tokens.clone()).collect()
}

fn ppl_row(stage: &str, p: &Perplexity) -> String {
    format!("{stage}\t{:.6}\t{:.6}\t{:.6}", p.forward, p.backward, p.average)
}

fn lm_log(report: &TrainReport) -> String {
    let mut out = String::from("epoch\tsteps\ttrain_loss\tdev_forward\tdev_backward\tdev_average\n");
    let u = &report.untrained_dev;
    let _ = writeln!(out, "0\t0\t\t{:.6}\t{:.6}\t{:.6}", u.forward, u.backward, u.average);
    for e in &report.epochs {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            e.epoch, e.steps, e.train_loss, e.dev.forward, e.dev.backward, e.dev.average
        );
    }
    let _ = writeln!(out, "best\t{}", report.best_epoch);
    out
}

/// Prints `text` and, when asked, writes it to a file as well.
fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    print!("{text}");
    if let Some(path) = out {
        fs::write(path, text)?;
    }
    Ok(())
}
