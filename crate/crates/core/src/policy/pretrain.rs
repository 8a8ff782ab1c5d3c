//! Supervised pretraining: rating MSE plus teacher-forced explanation NLL.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Adam, ExplanationPolicy};
use crate::corpus::{Corpus, TokenId, Vocabulary, MAX_EXPLANATION_LEN};
use crate::exec::{stream_id, stream_rng, Exec};

const GRAD_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            learning_rate: 1e-3,
            batch_size: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub nll_before: f64,
    pub mse_before: f64,
    /// Mean minibatch NLL and MSE per epoch.
    pub epochs: Vec<(f64, f64)>,
    pub nll_after: f64,
    pub mse_after: f64,
}

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch} (nll {nll}, mse {mse})")]
    Diverged {
        epoch: usize,
        batch: usize,
        nll: f64,
        mse: f64,
    },
    #[error("training corpus is empty")]
    Empty,
}

/// Mean squared rating error over `(user, item, rating)` triples and its
/// gradient. Uses the unclamped rating-head output.
pub fn mse_loss<P: ExplanationPolicy>(policy: &P, batch: &[(usize, usize, f64)]) -> (f64, Vec<f64>) {
    assert!(!batch.is_empty(), "batch must be non-empty");
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; policy.num_params()];
    let mut loss = 0.0;
    for &(u, v, r) in batch {
        loss += scale * policy.accumulate_rating_grad(u, v, r, scale, &mut grad);
    }
    (loss, grad)
}

/// Mean over pairs of the per-token mean negative log-likelihood, with its
/// gradient.
pub fn nll_loss<P: ExplanationPolicy>(policy: &P, batch: &[(usize, usize, Vec<TokenId>)]) -> (f64, Vec<f64>) {
    assert!(!batch.is_empty(), "batch must be non-empty");
    let mut grad = vec![0.0; policy.num_params()];
    let mut loss = 0.0;
    let b = batch.len() as f64;
    for (u, v, x) in batch {
        let scale = -1.0 / (x.len() as f64 * b);
        loss += scale * policy.accumulate_log_prob_grad(*u, *v, x, scale, &mut grad);
    }
    (loss, grad)
}

struct Example {
    user: usize,
    item: usize,
    rating: f64,
    target: Vec<TokenId>,
}

fn examples(train: &Corpus, vocab: &Vocabulary) -> Vec<Example> {
    train
        .interactions()
        .iter()
        .map(|i| Example {
            user: i.user,
            item: i.item,
            rating: i.rating,
            target: vocab.encode_target(&i.explanation, MAX_EXPLANATION_LEN),
        })
        .collect()
}

/// Joint loss gradient over a batch; the last two slots carry the NLL and MSE.
fn batch_grad<P: ExplanationPolicy>(
    policy: &P,
    data: &[Example],
    idx: &[usize],
    exec: Exec,
    with_grad: bool,
) -> Vec<f64> {
    let n = policy.num_params();
    let b = idx.len() as f64;
    exec.chunked_sum(idx.len(), GRAD_CHUNK, n + 2, |range, buf| {
        let (grad, losses) = buf.split_at_mut(n);
        for &i in &idx[range] {
            let ex = &data[i];
            let tok_scale = -1.0 / (ex.target.len() as f64 * b);
            let g = if with_grad { tok_scale } else { 0.0 };
            losses[0] += tok_scale * policy.accumulate_log_prob_grad(ex.user, ex.item, &ex.target, g, grad);
            let sq = if with_grad {
                policy.accumulate_rating_grad(ex.user, ex.item, ex.rating, 1.0 / b, grad)
            } else {
                (policy.raw_rating(ex.user, ex.item) - ex.rating).powi(2)
            };
            losses[1] += sq / b;
        }
    })
}

/// Full-corpus NLL and MSE.
pub fn supervised_losses<P: ExplanationPolicy>(
    policy: &P,
    train: &Corpus,
    vocab: &Vocabulary,
    exec: Exec,
) -> (f64, f64) {
    let data = examples(train, vocab);
    let idx: Vec<usize> = (0..data.len()).collect();
    let out = batch_grad(policy, &data, &idx, exec, false);
    let n = policy.num_params();
    (out[n], out[n + 1])
}

/// Minimizes rating MSE plus explanation NLL with Adam over shuffled minibatches.
pub fn pretrain<P: ExplanationPolicy>(
    policy: &mut P,
    train: &Corpus,
    vocab: &Vocabulary,
    config: &PretrainConfig,
    exec: Exec,
) -> Result<PretrainReport, PretrainError> {
    let data = examples(train, vocab);
    if data.is_empty() {
        return Err(PretrainError::Empty);
    }
    let n = policy.num_params();
    let all: Vec<usize> = (0..data.len()).collect();
    let before = batch_grad(policy, &data, &all, exec, false);
    let mut opt = Adam::new(n, config.learning_rate);
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order = all.clone();
        order.shuffle(&mut stream_rng(config.seed, stream_id(4, epoch as u64, 0)));
        let (mut nll_sum, mut mse_sum, mut batches) = (0.0, 0.0, 0usize);
        for (b, idx) in order.chunks(config.batch_size.max(1)).enumerate() {
            let mut grad = batch_grad(policy, &data, idx, exec, true);
            let mse = grad.pop().unwrap();
            let nll = grad.pop().unwrap();
            if !nll.is_finite() || !mse.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(PretrainError::Diverged {
                    epoch,
                    batch: b,
                    nll,
                    mse,
                });
            }
            opt.step(policy.params_mut(), &grad);
            nll_sum += nll;
            mse_sum += mse;
            batches += 1;
        }
        log::debug!(
            "pretrain epoch {epoch}: nll {:.4} mse {:.4}",
            nll_sum / batches as f64,
            mse_sum / batches as f64
        );
        epochs.push((nll_sum / batches as f64, mse_sum / batches as f64));
    }
    let after = batch_grad(policy, &data, &all, exec, false);
    Ok(PretrainReport {
        nll_before: before[n],
        mse_before: before[n + 1],
        epochs,
        nll_after: after[n],
        mse_after: after[n + 1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::gen_synthetic;
    use crate::policy::{ModelDims, RecurrentPolicy};
    use approx::assert_abs_diff_eq;

    fn setup() -> (Corpus, Vocabulary, RecurrentPolicy) {
        let corpus = gen_synthetic(30, 20, 3, 7);
        let (train, _) = corpus.split_leave_last().unwrap();
        let vocab = Vocabulary::build(&train, 1);
        let dims = ModelDims {
            users: 30,
            items: 20,
            vocab: vocab.len(),
            dim: 8,
        };
        (train, vocab, RecurrentPolicy::init(dims, 3))
    }

    #[test]
    fn mse_single_pair() {
        let mut p = RecurrentPolicy::init(
            ModelDims {
                users: 1,
                items: 1,
                vocab: 5,
                dim: 3,
            },
            1,
        );
        p.array_mut("w_rv").unwrap().iter_mut().for_each(|x| *x = 0.0);
        p.array_mut("b_r").unwrap()[0] = 3.5;
        let (loss, _) = mse_loss(&p, &[(0, 0, 4.0)]);
        assert_abs_diff_eq!(loss, 0.25, epsilon = 1e-12);
        let (loss, grad) = mse_loss(&p, &[(0, 0, 3.5)]);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn nll_uniform_is_ln_vocab() {
        let mut p = RecurrentPolicy::init(
            ModelDims {
                users: 1,
                items: 1,
                vocab: 10,
                dim: 3,
            },
            1,
        );
        p.array_mut("w_o").unwrap().iter_mut().for_each(|x| *x = 0.0);
        p.array_mut("b_o").unwrap().iter_mut().for_each(|x| *x = 0.0);
        let (loss, _) = nll_loss(&p, &[(0, 0, vec![4, 5, 2])]);
        assert_abs_diff_eq!(loss, 10f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn nll_zero_when_target_certain() {
        let mut p = RecurrentPolicy::init(
            ModelDims {
                users: 1,
                items: 1,
                vocab: 6,
                dim: 3,
            },
            1,
        );
        p.array_mut("w_o").unwrap().iter_mut().for_each(|x| *x = 0.0);
        let b = p.array_mut("b_o").unwrap();
        b.iter_mut().for_each(|x| *x = -1e4);
        b[2] = 1e4;
        let (loss, _) = nll_loss(&p, &[(0, 0, vec![2])]);
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn one_epoch_lowers_nll() {
        let (train, vocab, mut p) = setup();
        let cfg = PretrainConfig {
            epochs: 1,
            batch_size: 16,
            ..Default::default()
        };
        let report = pretrain(&mut p, &train, &vocab, &cfg, Exec::Parallel).unwrap();
        assert!(report.nll_after < report.nll_before, "{report:?}");
    }

    #[test]
    fn zero_lr_leaves_params() {
        let (train, vocab, mut p) = setup();
        let before = p.clone();
        let cfg = PretrainConfig {
            epochs: 2,
            learning_rate: 0.0,
            ..Default::default()
        };
        pretrain(&mut p, &train, &vocab, &cfg, Exec::Parallel).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn deterministic_across_runs_and_strategies() {
        let (train, vocab, p0) = setup();
        let cfg = PretrainConfig {
            epochs: 2,
            batch_size: 32,
            ..Default::default()
        };
        let mut a = p0.clone();
        let mut b = p0.clone();
        let mut c = p0;
        pretrain(&mut a, &train, &vocab, &cfg, Exec::Parallel).unwrap();
        pretrain(&mut b, &train, &vocab, &cfg, Exec::Parallel).unwrap();
        pretrain(&mut c, &train, &vocab, &cfg, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }
}
