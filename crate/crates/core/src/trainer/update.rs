//! Multi-epoch model updating on a collected buffer.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::objective::{surrogates, PreparedTrajectory};
use super::TrainError;
use crate::advantage::ReplayBuffer;
use crate::corpus::Corpus;
use crate::exec::{stream_id, stream_rng, Exec};
use crate::pareto::{gram, solve_gram, PreferenceConstraint};
use crate::policy::{Adam, ExplanationPolicy};

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateSettings<'a> {
    pub epochs: usize,
    pub minibatch: usize,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    pub constraints: &'a [PreferenceConstraint],
    pub aux_rating_weight: f64,
    pub seed: u64,
    pub iteration: usize,
    pub exec: Exec,
}

/// What one update phase did.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    /// Mean minibatch surrogate per objective, one row per epoch.
    pub epoch_surrogates: Vec<Vec<f64>>,
    /// Objective weights, one row per optimizer step.
    pub weights: Vec<Vec<f64>>,
    /// Mean minibatch rating MSE per epoch, when the auxiliary loss is on.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub epoch_aux_mse: Vec<f64>,
}

/// Resolves buffer trajectories with advantages to model indices, attaching
/// observed ratings from `train`.
pub fn prepare(buffer: &ReplayBuffer, corpus: &Corpus, train: &Corpus) -> Result<Vec<PreparedTrajectory>, TrainError> {
    let ratings: std::collections::HashMap<(usize, usize), f64> = train
        .interactions()
        .iter()
        .map(|i| ((i.user, i.item), i.rating))
        .collect();
    buffer
        .with_advantages()
        .map(|(t, adv)| {
            let user = corpus
                .user_idx(&t.user)
                .ok_or_else(|| TrainError::UnknownId(format!("user {}", t.user)))?;
            let item = corpus
                .item_idx(&t.item)
                .ok_or_else(|| TrainError::UnknownId(format!("item {}", t.item)))?;
            Ok(PreparedTrajectory {
                user,
                item,
                tokens: t.tokens.clone(),
                logp_b: t.logp_b,
                advantages: adv.components(),
                rating: ratings.get(&(user, item)).copied(),
            })
        })
        .collect()
}

/// Runs `epochs` passes of shuffled minibatches. Each step solves the
/// objective weights from the per-objective ascent gradients and descends on
/// the negated weighted surrogate, plus the optional rating loss.
#[allow(clippy::result_large_err)]
pub fn update<P: ExplanationPolicy>(
    policy: &mut P,
    batch: &[PreparedTrajectory],
    settings: &UpdateSettings<'_>,
) -> Result<UpdateLog, (UpdateLog, TrainError)> {
    let mut log = UpdateLog::default();
    if batch.is_empty() || settings.epochs == 0 {
        return Ok(log);
    }
    let n = policy.num_params();
    let mut opt = Adam::new(n, settings.learning_rate);
    let all: Vec<usize> = (0..batch.len()).collect();
    for epoch in 0..settings.epochs {
        let mut order = all.clone();
        order.shuffle(&mut stream_rng(
            settings.seed,
            stream_id(6, settings.iteration as u64, epoch as u64),
        ));
        let m = batch[0].advantages.len();
        let mut sums = vec![0.0; m];
        let mut mse_sum = 0.0;
        let mut steps = 0usize;
        for (step, idx) in order.chunks(settings.minibatch.max(1)).enumerate() {
            let s = surrogates(policy, batch, idx, settings.clip_epsilon, settings.exec);
            let weights = solve_gram(&gram(&s.grads), settings.constraints).map_err(|e| (log.clone(), e.into()))?;
            let mut grad = vec![0.0; n];
            for (w, g) in weights.iter().zip(&s.grads) {
                for (x, y) in grad.iter_mut().zip(g) {
                    *x -= w * y;
                }
            }
            let mut loss = -weights.iter().zip(&s.values).map(|(w, v)| w * v).sum::<f64>();
            if settings.aux_rating_weight > 0.0 {
                let mse = aux_rating(policy, batch, idx, settings.aux_rating_weight, &mut grad);
                loss += settings.aux_rating_weight * mse;
                mse_sum += mse;
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err((
                    log,
                    TrainError::NonFinite {
                        iteration: settings.iteration,
                        epoch,
                        step,
                        report: None,
                    },
                ));
            }
            opt.step(policy.params_mut(), &grad);
            sums.iter_mut().zip(&s.values).for_each(|(a, v)| *a += v);
            log.weights.push(weights);
            steps += 1;
        }
        log.epoch_surrogates
            .push(sums.iter().map(|s| s / steps as f64).collect());
        if settings.aux_rating_weight > 0.0 {
            log.epoch_aux_mse.push(mse_sum / steps as f64);
        }
    }
    Ok(log)
}

/// Adds `weight` times the rating-MSE gradient over the rated trajectories of
/// the minibatch and returns that MSE (0 when none is rated).
fn aux_rating<P: ExplanationPolicy>(
    policy: &P,
    batch: &[PreparedTrajectory],
    idx: &[usize],
    weight: f64,
    grad: &mut [f64],
) -> f64 {
    let rated: Vec<(usize, usize, f64)> = idx
        .iter()
        .filter_map(|&k| batch[k].rating.map(|r| (batch[k].user, batch[k].item, r)))
        .collect();
    if rated.is_empty() {
        return 0.0;
    }
    let scale = weight / rated.len() as f64;
    let mut sq = 0.0;
    for &(u, v, r) in &rated {
        sq += policy.accumulate_rating_grad(u, v, r, scale, grad);
    }
    sq / rated.len() as f64
}
