//! Nearest-centroid sense prediction against a brute-force pass over the
//! bundled sense corpora.

mod common;

use std::collections::BTreeMap;

use elmo_core::bilm::LayerReps;
use elmo_core::data::{load_sense_corpus, SenseExample, Sentence};
use elmo_core::elmo::extract_reps;
use elmo_core::probes::{wsd_accuracy, SenseInventory};

use common::{data_path, tiny_model};

fn reps_for(examples: &[SenseExample], seed: u64) -> Vec<LayerReps> {
    let sentences: Vec<Sentence> = examples.iter().map(|e| e.tokens.clone()).collect();
    extract_reps(&tiny_model(seed), &sentences).unwrap()
}

/// `(lemma, sense) -> centroid`, summed in a separate order: by sense
/// first, then by example.
fn centroids(train: &[SenseExample], reps: &[LayerReps], layer: usize) -> BTreeMap<(String, String), Vec<f64>> {
    let mut keys: Vec<(String, String)> = train.iter().map(|e| (e.lemma.clone(), e.sense.clone())).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|key| {
            let members: Vec<&[f64]> = train
                .iter()
                .zip(reps)
                .filter(|(e, _)| e.lemma == key.0 && e.sense == key.1)
                .map(|(e, r)| r.vector(layer, e.target_index))
                .collect();
            let dim = members[0].len();
            let c = (0..dim).map(|i| members.iter().map(|m| m[i]).sum::<f64>() / members.len() as f64).collect();
            (key, c)
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[test]
fn centroids_and_predictions_match_brute_force() {
    let train = load_sense_corpus(data_path("wsd_train.tsv")).unwrap();
    let test = load_sense_corpus(data_path("wsd_test.tsv")).unwrap();
    let train_reps = reps_for(&train, 5);
    let test_reps = reps_for(&test, 5);
    for layer in 0..3 {
        let inv = SenseInventory::fit(&train, &train_reps, layer).unwrap();
        let oracle = centroids(&train, &train_reps, layer);
        let n_entries: usize = inv.lemmas.values().map(Vec::len).sum();
        assert_eq!(n_entries, oracle.len());
        for (lemma, entries) in &inv.lemmas {
            for e in entries {
                let want = &oracle[&(lemma.clone(), e.sense.clone())];
                let diff = e.centroid.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-9, "layer {layer} {lemma}/{}", e.sense);
            }
        }
        let mut correct = 0;
        for (ex, r) in test.iter().zip(&test_reps) {
            let q = r.vector(layer, ex.target_index);
            // Strict improvement only, so the first (lowest) sense id keeps ties.
            let mut best: Option<(&str, f64)> = None;
            for ((lemma, sense), c) in &oracle {
                if lemma != &ex.lemma {
                    continue;
                }
                let s = cosine(q, c);
                if best.map_or(true, |(_, b)| s > b) {
                    best = Some((sense, s));
                }
            }
            let want = best.expect("every bundled test lemma is seen in training").0;
            let got = inv.predict(&ex.lemma, q).unwrap();
            assert!(!got.fallback);
            assert_eq!(got.sense, want, "layer {layer}: {:?}", ex.tokens);
            correct += usize::from(want == ex.sense);
        }
        let acc = wsd_accuracy(&test, &test_reps, &inv).unwrap();
        assert!((acc - correct as f64 / test.len() as f64).abs() < 1e-15);
    }
}

#[test]
fn unseen_lemma_falls_back_to_most_frequent_sense() {
    let train = load_sense_corpus(data_path("wsd_train.tsv")).unwrap();
    let reps = reps_for(&train, 6);
    let inv = SenseInventory::fit(&train, &reps, 1).unwrap();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &train {
        *counts.entry(&e.sense).or_default() += 1;
    }
    let top = counts.values().max().unwrap();
    let expected = counts.iter().find(|(_, c)| *c == top).unwrap().0;
    let got = inv.predict("zzz-unseen", &vec![1.0; inv.dim]).unwrap();
    assert!(got.fallback);
    assert_eq!(got.sense, *expected);
}
