//! The scalar mix against direct arithmetic, and the penalty's pull toward
//! uniform weights.

use elmo_core::bilm::LayerReps;
use elmo_core::elmo::{last_only, mix_penalty, scalar_mix, ScalarMix};
use elmo_core::rng::SeedRng;
use elmo_core::tape::Tape;
use elmo_core::tensor::Tensor;
use elmo_core::trainer::Adam;

fn random_reps(n_layers: usize, n_tokens: usize, dim: usize, rng: &mut SeedRng) -> LayerReps {
    LayerReps {
        layers: (0..n_layers).map(|_| Tensor::uniform(&[n_tokens, dim], 2.0, rng)).collect(),
    }
}

/// `γ · Σ_j softmax(z)_j · h_j`, with an optionally layer-normed `h_j`,
/// computed elementwise with no shared code.
fn direct_mix(reps: &LayerReps, logits: &[f64], gamma: f64, norm: bool) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = e.iter().sum();
    let (n, d) = (reps.n_tokens(), reps.dim());
    let mut out = vec![0.0; n * d];
    for (j, layer) in reps.layers.iter().enumerate() {
        for k in 0..n {
            let row = layer.row(k);
            let (mean, inv) = if norm {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                (mean, 1.0 / (var + 1e-5).sqrt())
            } else {
                (0.0, 1.0)
            };
            for c in 0..d {
                out[k * d + c] += e[j] / total * (row[c] - mean) * inv;
            }
        }
    }
    out.iter().map(|v| gamma * v).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn uniform_logits_give_the_layer_mean() {
    let mut rng = SeedRng::new(1);
    for n_layers in 1..5 {
        let reps = random_reps(n_layers, 5, 6, &mut rng);
        let mix = ScalarMix::new(n_layers, 6, false, 0.0).unwrap();
        let got = scalar_mix(&reps, &mix).unwrap();
        for k in 0..5 {
            for c in 0..6 {
                let mean = reps.layers.iter().map(|l| l.at(k, c)).sum::<f64>() / n_layers as f64;
                assert!((got.at(k, c) - mean).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn saturated_logits_select_one_layer() {
    let mut rng = SeedRng::new(2);
    let reps = random_reps(3, 4, 5, &mut rng);
    for pick in 0..3 {
        let mut mix = ScalarMix::new(3, 5, false, 0.0).unwrap();
        let mut z = vec![0.0; 3];
        z[pick] = 1000.0;
        mix.set_logits(&z).unwrap();
        let got = scalar_mix(&reps, &mix).unwrap();
        assert!(got.max_abs_diff(&reps.layers[pick]) < 1e-9);
    }
}

#[test]
fn output_is_linear_in_gamma() {
    let mut rng = SeedRng::new(3);
    let reps = random_reps(3, 4, 5, &mut rng);
    let mut mix = ScalarMix::new(3, 5, false, 0.0).unwrap();
    mix.set_logits(&[0.3, -1.2, 0.7]).unwrap();
    let base = scalar_mix(&reps, &mix).unwrap();
    for gamma in [0.0, 0.5, 2.0, -3.25] {
        mix.set_gamma(gamma);
        let got = scalar_mix(&reps, &mix).unwrap();
        for (a, b) in got.data().iter().zip(base.data()) {
            assert!((a - gamma * b).abs() < 1e-12);
        }
    }
}

#[test]
fn agrees_with_direct_arithmetic() {
    let mut rng = SeedRng::new(4);
    for trial in 0..50 {
        let n_layers = 1 + rng.below(4);
        let dim = 2 + rng.below(6);
        let reps = random_reps(n_layers, 1 + rng.below(6), dim, &mut rng);
        let logits: Vec<f64> = (0..n_layers).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let gamma = rng.uniform(-2.0, 2.0);
        let norm = trial % 2 == 1;
        let mut mix = ScalarMix::new(n_layers, dim, norm, 0.0).unwrap();
        mix.set_logits(&logits).unwrap();
        mix.set_gamma(gamma);
        let got = scalar_mix(&reps, &mix).unwrap();
        let want = direct_mix(&reps, &logits, gamma, norm);
        assert!(max_diff(got.data(), &want) < 1e-12, "trial {trial}");
    }
}

#[test]
fn penalty_gradient_matches_closed_form() {
    // d/dz_k Σ s_j² = 2 s_k (s_k − Σ s_j²).
    let mut mix = ScalarMix::new(4, 3, false, 0.7).unwrap();
    mix.set_logits(&[1.0, -0.5, 0.25, 2.0]).unwrap();
    let s = mix.weights();
    let q: f64 = s.iter().map(|v| v * v).sum();
    assert!((mix_penalty(&mix) - 0.7 * q).abs() < 1e-15);
    let mut tape = Tape::new();
    let p = mix.params().bind(&mut tape, true);
    let pen = mix.penalty(&mut tape, &p);
    let g = tape.backward(pen).unwrap();
    let id = mix.params().find("logits").unwrap();
    for (k, gk) in g.get(p.var(id)).unwrap().data().iter().enumerate() {
        assert!((gk - 0.7 * 2.0 * s[k] * (s[k] - q)).abs() < 1e-12);
    }
}

/// Penalty-only optimization from random logits within 500 steps.
#[test]
fn penalty_alone_drives_weights_to_uniform() {
    let mut rng = SeedRng::new(5);
    for n_layers in [2, 3, 5] {
        let mut mix = ScalarMix::new(n_layers, 4, false, 1.0).unwrap();
        let z: Vec<f64> = (0..n_layers).map(|_| rng.uniform(-3.0, 3.0)).collect();
        mix.set_logits(&z).unwrap();
        let mut opt = Adam::new(0.05, 0.9, 0.999, 1e-8);
        let uniform = 1.0 / n_layers as f64;
        let deviation = |m: &ScalarMix| m.weights().iter().map(|s| (s - uniform).abs()).fold(0.0, f64::max);
        let mut steps = 0;
        while deviation(&mix) >= 0.01 {
            assert!(steps < 500, "{n_layers} layers still {} from uniform", deviation(&mix));
            let mut tape = Tape::new();
            let p = mix.params().bind(&mut tape, true);
            let pen = mix.penalty(&mut tape, &p);
            let grads = tape.backward(pen).unwrap();
            let g = p.grads(&grads, mix.params());
            opt.step(&mut mix.params_mut().tensors_mut().iter_mut().collect::<Vec<_>>(), &g).unwrap();
            steps += 1;
        }
    }
}

#[test]
fn unit_gamma_mix_stays_inside_the_layer_range() {
    let mut rng = SeedRng::new(6);
    for _ in 0..50 {
        let n_layers = 1 + rng.below(4);
        let reps = random_reps(n_layers, 3, 4, &mut rng);
        let mut mix = ScalarMix::new(n_layers, 4, false, 0.0).unwrap();
        let logits: Vec<f64> = (0..n_layers).map(|_| rng.uniform(-4.0, 4.0)).collect();
        mix.set_logits(&logits).unwrap();
        let got = scalar_mix(&reps, &mix).unwrap();
        for k in 0..3 {
            for c in 0..4 {
                let vals = reps.layers.iter().map(|l| l.at(k, c));
                let lo = vals.clone().fold(f64::INFINITY, f64::min);
                let hi = vals.fold(f64::NEG_INFINITY, f64::max);
                assert!(lo - 1e-12 <= got.at(k, c) && got.at(k, c) <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn top_layer_saturation_is_last_only() {
    let mut rng = SeedRng::new(7);
    let reps = random_reps(3, 5, 4, &mut rng);
    let mut mix = ScalarMix::new(3, 4, false, 0.0).unwrap();
    mix.set_logits(&[-40.0, -40.0, 40.0]).unwrap();
    assert!(scalar_mix(&reps, &mix).unwrap().max_abs_diff(&last_only(&reps)) < 1e-6);
}

#[test]
fn penalty_flattens_skewed_logits() {
    let mut mix = ScalarMix::new(3, 2, false, 1.0).unwrap();
    mix.set_logits(&[3.0, 0.0, -3.0]).unwrap();
    let mut opt = Adam::new(0.05, 0.9, 0.999, 1e-8);
    for _ in 0..500 {
        let mut tape = Tape::new();
        let p = mix.params().bind(&mut tape, true);
        let pen = mix.penalty(&mut tape, &p);
        let grads = tape.backward(pen).unwrap();
        let g = p.grads(&grads, mix.params());
        opt.step(&mut mix.params_mut().tensors_mut().iter_mut().collect::<Vec<_>>(), &g).unwrap();
    }
    for s in mix.weights() {
        assert!((s - 1.0 / 3.0).abs() < 0.01, "{:?}", mix.weights());
    }
}
