//! Ablation grid, sample-efficiency curve and learned-weight report.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::elmo::ScalarMix;
use crate::error::{Error, Result};

use super::{train_tagger, ElmoLocation, TaskConfig, TaskData, Tagger};

/// Largest `|s_j − 1/n|` over a mix's weights.
pub fn max_deviation_from_uniform(mix: &ScalarMix) -> f64 {
    let w = mix.weights();
    let u = 1.0 / w.len() as f64;
    w.iter().map(|s| (s - u).abs()).fold(0.0, f64::max)
}

/// `Σ_j (s_j − 1/n)²`.
pub fn sq_distance_from_uniform(mix: &ScalarMix) -> f64 {
    let w = mix.weights();
    let u = 1.0 / w.len() as f64;
    w.iter().map(|s| (s - u) * (s - u)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub location: ElmoLocation,
    pub lambda: f64,
    pub last_only: bool,
    pub dev_accuracy: f64,
    /// Largest deviation from uniform over the run's mixes.
    pub max_deviation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("run\tlocation\tlambda\tlast_only\tdev_accuracy\tmax_weight_deviation\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.4}\t{:.4}",
                r.name, r.location, r.lambda, r.last_only, r.dev_accuracy, r.max_deviation
            );
        }
        out
    }
}

/// The layer-use grid (last only, λ=1, λ=0.001) at the configured location,
/// then the placement grid (input, output, both) at the configured λ. Every
/// run uses the same seed and so the same data order. A configuration with
/// ELMo off is treated as input placement.
pub fn ablation(train: &TaskData, dev: &TaskData, base: &TaskConfig) -> Result<AblationReport> {
    let location = match base.elmo_location {
        ElmoLocation::None => ElmoLocation::Input,
        l => l,
    };
    let grid: Vec<(String, TaskConfig)> = vec![
        ("last_only".into(), TaskConfig { elmo_location: location, last_only: true, ..base.clone() }),
        ("lambda=1".into(), TaskConfig { elmo_location: location, lambda: 1.0, last_only: false, ..base.clone() }),
        ("lambda=0.001".into(), TaskConfig { elmo_location: location, lambda: 0.001, last_only: false, ..base.clone() }),
        ("input".into(), TaskConfig { elmo_location: ElmoLocation::Input, last_only: false, ..base.clone() }),
        ("output".into(), TaskConfig { elmo_location: ElmoLocation::Output, last_only: false, ..base.clone() }),
        ("both".into(), TaskConfig { elmo_location: ElmoLocation::Both, last_only: false, ..base.clone() }),
    ];
    let mut rows = Vec::with_capacity(grid.len());
    for (name, cfg) in grid {
        let outcome = train_tagger(train, dev, &cfg)?;
        let max_deviation = outcome
            .tagger
            .mixes()
            .iter()
            .map(|(_, m)| max_deviation_from_uniform(m))
            .fold(0.0, f64::max);
        rows.push(AblationRow {
            name,
            location: cfg.elmo_location,
            lambda: cfg.lambda,
            last_only: cfg.last_only,
            dev_accuracy: outcome.dev_accuracy,
            max_deviation,
        });
    }
    Ok(AblationReport { rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub fraction: f64,
    pub seed: u64,
    pub baseline: f64,
    pub elmo: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub fraction: f64,
    pub baseline: f64,
    pub elmo: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleEfficiency {
    /// One row per (fraction, seed), fractions in the order given, seeds
    /// ascending within a fraction.
    pub rows: Vec<CurveRow>,
}

impl SampleEfficiency {
    /// Mean over seeds per fraction, in row order.
    pub fn means(&self) -> Vec<CurvePoint> {
        let mut out: Vec<(CurvePoint, usize)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(p, _)| p.fraction == r.fraction) {
                Some((p, n)) => {
                    p.baseline += r.baseline;
                    p.elmo += r.elmo;
                    *n += 1;
                }
                None => out.push((
                    CurvePoint {
                        fraction: r.fraction,
                        baseline: r.baseline,
                        elmo: r.elmo,
                    },
                    1,
                )),
            }
        }
        out.into_iter()
            .map(|(p, n)| CurvePoint {
                fraction: p.fraction,
                baseline: p.baseline / n as f64,
                elmo: p.elmo / n as f64,
            })
            .collect()
    }

    /// Per-seed rows followed by `mean` rows.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("fraction\tseed\tbaseline\telmo\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{:.4}\t{:.4}", r.fraction, r.seed, r.baseline, r.elmo);
        }
        for p in self.means() {
            let _ = writeln!(out, "{}\tmean\t{:.4}\t{:.4}", p.fraction, p.baseline, p.elmo);
        }
        out
    }
}

/// Trains a baseline and an ELMo tagger for every fraction and seed on
/// `train.subsample(fraction, seed)`. Runs execute in parallel, each
/// single-threaded; results are keyed by (fraction, seed) so the table does
/// not depend on scheduling.
pub fn sample_efficiency(
    train: &TaskData,
    dev: &TaskData,
    fractions: &[f64],
    seeds: &[u64],
    config: &TaskConfig,
) -> Result<SampleEfficiency> {
    if fractions.is_empty() || seeds.is_empty() {
        return Err(Error::Argument("need at least one fraction and one seed".into()));
    }
    if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Argument(format!("fraction {f} outside (0, 1]")));
    }
    let elmo_location = match config.elmo_location {
        ElmoLocation::None => ElmoLocation::Input,
        l => l,
    };
    let jobs: Vec<(usize, u64, bool)> = (0..fractions.len())
        .flat_map(|fi| seeds.iter().flat_map(move |&s| [(fi, s, false), (fi, s, true)]))
        .collect();
    let results: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(fi, seed, with_elmo)| {
            let cfg = TaskConfig {
                elmo_location: if with_elmo { elmo_location } else { ElmoLocation::None },
                seed,
                ..config.clone()
            };
            let sub = train.subsample(fractions[fi], seed)?;
            Ok(train_tagger(&sub, dev, &cfg)?.dev_accuracy)
        })
        .collect();
    let mut rows = Vec::with_capacity(fractions.len() * seeds.len());
    let mut it = jobs.iter().zip(results);
    while let (Some((&(fi, seed, _), base)), Some((_, elmo))) = (it.next(), it.next()) {
        rows.push(CurveRow {
            fraction: fractions[fi],
            seed,
            baseline: base?,
            elmo: elmo?,
        });
    }
    Ok(SampleEfficiency { rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightRow {
    pub location: &'static str,
    pub layer: usize,
    pub weight: f64,
}

impl WeightRow {
    /// `low` below 1/3, `high` above 2/3, empty otherwise.
    pub fn flag(&self) -> &'static str {
        if self.weight < 1.0 / 3.0 {
            "low"
        } else if self.weight > 2.0 / 3.0 {
            "high"
        } else {
            ""
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightsReport {
    pub rows: Vec<WeightRow>,
    pub gammas: Vec<(&'static str, f64)>,
}

/// Softmax-normalized layer weights and γ for every active mix.
pub fn weights_report(tagger: &Tagger) -> WeightsReport {
    let mut rows = Vec::new();
    let mut gammas = Vec::new();
    for (location, mix) in tagger.mixes() {
        rows.extend(mix.weights().into_iter().enumerate().map(|(layer, weight)| WeightRow {
            location,
            layer,
            weight,
        }));
        gammas.push((location, mix.gamma()));
    }
    WeightsReport { rows, gammas }
}

impl WeightsReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("location\tlayer\tweight\tflag\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{:.6}\t{}", r.location, r.layer, r.weight, r.flag());
        }
        for (location, g) in &self.gammas {
            let _ = writeln!(out, "{location}\tgamma\t{g:.6}\t");
        }
        out
    }

    /// One bar per weight, 40 columns for weight 1.
    pub fn render_bars(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let width = (r.weight * 40.0).round() as usize;
            let mark = match r.flag() {
                "low" => " <1/3",
                "high" => " >2/3",
                _ => "",
            };
            let _ = writeln!(out, "{:<6} layer {} {:>6.3} |{}{mark}", r.location, r.layer, r.weight, "#".repeat(width));
        }
        for (location, g) in &self.gammas {
            let _ = writeln!(out, "{location:<6} gamma   {g:>6.3}");
        }
        out
    }
}
