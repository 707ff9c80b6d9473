//! Linear-chain CRF over per-token tag scores.
//!
//! Transitions are an `[(n+2) × (n+2)]` matrix where `trans[i][j]` scores
//! moving from tag `i` to tag `j`. Index `n` is the virtual start tag and
//! `n + 1` the virtual stop tag, so a path `y` over `T` tokens scores
//!
//! ```text
//! trans[start][y0] + Σ_t emit[t][y_t] + Σ_t trans[y_{t-1}][y_t] + trans[y_{T-1}][stop]
//! ```

use crate::error::{Error, Result};
use crate::tape::{log_sum_exp, Tape, Var};
use crate::tensor::Tensor;

pub fn start_tag(n_tags: usize) -> usize {
    n_tags
}

pub fn stop_tag(n_tags: usize) -> usize {
    n_tags + 1
}

/// Zero transition matrix for `n_tags` real tags.
pub fn zero_transitions(n_tags: usize) -> Tensor {
    Tensor::zeros(&[n_tags + 2, n_tags + 2])
}

fn check(emissions: &Tensor, transitions: &Tensor) -> Result<(usize, usize)> {
    if emissions.rank() != 2 || emissions.numel() == 0 {
        return Err(Error::dim(format!("emissions must be a non-empty [T × n] matrix, got {:?}", emissions.shape())));
    }
    let (t, n) = (emissions.shape()[0], emissions.shape()[1]);
    if transitions.shape() != [n + 2, n + 2] {
        return Err(Error::dim(format!(
            "{n} tags need a {0}×{0} transition matrix, got {1:?}",
            n + 2,
            transitions.shape()
        )));
    }
    Ok((t, n))
}

fn check_tags(tags: &[usize], t: usize, n: usize) -> Result<()> {
    if tags.len() != t {
        return Err(Error::dim(format!("{} gold tags for {t} tokens", tags.len())));
    }
    if let Some(&bad) = tags.iter().find(|&&y| y >= n) {
        return Err(Error::Index(format!("tag id {bad} outside {n} tags")));
    }
    Ok(())
}

/// Unnormalized score of one tag path.
pub fn path_score(emissions: &Tensor, transitions: &Tensor, tags: &[usize]) -> Result<f64> {
    let (t, n) = check(emissions, transitions)?;
    check_tags(tags, t, n)?;
    let mut s = transitions.at(start_tag(n), tags[0]) + transitions.at(tags[t - 1], stop_tag(n));
    for (k, &y) in tags.iter().enumerate() {
        s += emissions.at(k, y);
        if k > 0 {
            s += transitions.at(tags[k - 1], y);
        }
    }
    Ok(s)
}

/// Forward log-potentials `alpha[t][j]`, summing over every prefix ending in `j`.
fn forward_table(emissions: &Tensor, transitions: &Tensor, t: usize, n: usize) -> Vec<Vec<f64>> {
    let mut alpha = vec![vec![0.0; n]; t];
    for j in 0..n {
        alpha[0][j] = transitions.at(start_tag(n), j) + emissions.at(0, j);
    }
    let mut scratch = vec![0.0; n];
    for k in 1..t {
        for j in 0..n {
            for (i, s) in scratch.iter_mut().enumerate() {
                *s = alpha[k - 1][i] + transitions.at(i, j);
            }
            alpha[k][j] = log_sum_exp(&scratch) + emissions.at(k, j);
        }
    }
    alpha
}

/// Backward log-potentials `beta[t][i]`, summing over every suffix after `i`.
fn backward_table(emissions: &Tensor, transitions: &Tensor, t: usize, n: usize) -> Vec<Vec<f64>> {
    let mut beta = vec![vec![0.0; n]; t];
    for i in 0..n {
        beta[t - 1][i] = transitions.at(i, stop_tag(n));
    }
    let mut scratch = vec![0.0; n];
    for k in (0..t - 1).rev() {
        for i in 0..n {
            for (j, s) in scratch.iter_mut().enumerate() {
                *s = transitions.at(i, j) + emissions.at(k + 1, j) + beta[k + 1][j];
            }
            beta[k][i] = log_sum_exp(&scratch);
        }
    }
    beta
}

fn log_z_from(alpha: &[Vec<f64>], transitions: &Tensor, n: usize) -> f64 {
    let last = alpha.last().expect("non-empty chain");
    let ends: Vec<f64> = (0..n).map(|j| last[j] + transitions.at(j, stop_tag(n))).collect();
    log_sum_exp(&ends)
}

/// `log Σ_y exp(score(y))` by the forward algorithm.
pub fn log_partition(emissions: &Tensor, transitions: &Tensor) -> Result<f64> {
    let (t, n) = check(emissions, transitions)?;
    Ok(log_z_from(&forward_table(emissions, transitions, t, n), transitions, n))
}

/// `−(score(gold) − log Z)` evaluated directly.
pub fn crf_nll_value(emissions: &Tensor, transitions: &Tensor, tags: &[usize]) -> Result<f64> {
    Ok(log_partition(emissions, transitions)? - path_score(emissions, transitions, tags)?)
}

/// Expected minus gold feature counts: the exact gradient of the negative
/// log-likelihood with respect to emissions and transitions.
fn nll_grads(emissions: &Tensor, transitions: &Tensor, tags: &[usize]) -> (Tensor, Tensor) {
    let (t, n) = (emissions.shape()[0], emissions.shape()[1]);
    let alpha = forward_table(emissions, transitions, t, n);
    let beta = backward_table(emissions, transitions, t, n);
    let log_z = log_z_from(&alpha, transitions, n);
    let mut g_emit = Tensor::zeros(&[t, n]);
    let mut g_trans = Tensor::zeros(&[n + 2, n + 2]);
    let w = n + 2;
    {
        let ge = g_emit.data_mut();
        for k in 0..t {
            for j in 0..n {
                ge[k * n + j] = (alpha[k][j] + beta[k][j] - log_z).exp();
            }
        }
    }
    let gt = g_trans.data_mut();
    for j in 0..n {
        gt[start_tag(n) * w + j] += g_emit.at(0, j);
        gt[j * w + stop_tag(n)] += g_emit.at(t - 1, j);
    }
    for k in 1..t {
        for i in 0..n {
            for j in 0..n {
                let lp = alpha[k - 1][i] + transitions.at(i, j) + emissions.at(k, j) + beta[k][j] - log_z;
                gt[i * w + j] += lp.exp();
            }
        }
    }
    gt[start_tag(n) * w + tags[0]] -= 1.0;
    gt[tags[t - 1] * w + stop_tag(n)] -= 1.0;
    for k in 1..t {
        gt[tags[k - 1] * w + tags[k]] -= 1.0;
    }
    let ge = g_emit.data_mut();
    for (k, &y) in tags.iter().enumerate() {
        ge[k * n + y] -= 1.0;
    }
    (g_emit, g_trans)
}

/// Sentence-level negative log-likelihood on the tape.
pub fn crf_nll(tape: &mut Tape, emissions: Var, transitions: Var, tags: &[usize]) -> Result<Var> {
    let (e, tr) = (tape.value(emissions), tape.value(transitions));
    let (t, n) = check(e, tr)?;
    check_tags(tags, t, n)?;
    let value = crf_nll_value(e, tr, tags)?;
    let gold = tags.to_vec();
    Ok(tape.custom(
        &[emissions, transitions],
        Tensor::scalar(value),
        Box::new(move |g, inputs| {
            let (mut ge, mut gt) = nll_grads(inputs[0], inputs[1], &gold);
            ge.scale_assign(g.item());
            gt.scale_assign(g.item());
            vec![ge, gt]
        }),
    ))
}

/// Highest-scoring tag path. On equal scores the lower previous tag wins at
/// every backpointer, and the lower final tag wins at the end. Among tied
/// optimal paths this selects the one with the lowest last tag, then the
/// lowest tag before it, and so on back to the first token.
pub fn viterbi(emissions: &Tensor, transitions: &Tensor) -> Result<Vec<usize>> {
    let (t, n) = check(emissions, transitions)?;
    let mut score: Vec<f64> = (0..n).map(|j| transitions.at(start_tag(n), j) + emissions.at(0, j)).collect();
    let mut back = vec![vec![0usize; n]; t];
    for k in 1..t {
        let mut next = vec![0.0; n];
        for j in 0..n {
            let mut best = 0;
            let mut best_s = score[0] + transitions.at(0, j);
            for (i, &si) in score.iter().enumerate().skip(1) {
                let s = si + transitions.at(i, j);
                if s > best_s {
                    best = i;
                    best_s = s;
                }
            }
            back[k][j] = best;
            next[j] = best_s + emissions.at(k, j);
        }
        score = next;
    }
    let mut last = 0;
    let mut last_s = score[0] + transitions.at(0, stop_tag(n));
    for (j, &sj) in score.iter().enumerate().skip(1) {
        let s = sj + transitions.at(j, stop_tag(n));
        if s > last_s {
            last = j;
            last_s = s;
        }
    }
    let mut path = vec![last; t];
    for k in (1..t).rev() {
        path[k - 1] = back[k][path[k]];
    }
    Ok(path)
}
