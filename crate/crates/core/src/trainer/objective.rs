//! Clipped importance-weighted surrogate and its gradient.

use crate::corpus::TokenId;
use crate::exec::Exec;
use crate::policy::ExplanationPolicy;

/// Log-ratio clamp before exponentiation.
pub const LOG_RATIO_CLAMP: f64 = 20.0;

const GRAD_CHUNK: usize = 8;

/// One trajectory resolved to model indices, ready for the update phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedTrajectory {
    pub user: usize,
    pub item: usize,
    pub tokens: Vec<TokenId>,
    pub logp_b: f64,
    pub advantages: Vec<f64>,
    /// Observed rating of the pair, when there is one.
    pub rating: Option<f64>,
}

/// Value of `min(ρA, clip(ρ, 1-ε, 1+ε)A)` with `ρ = exp(logp_new - logp_old)`,
/// and its derivative with respect to `logp_new`. Ties follow the unclipped
/// branch.
pub fn clipped_term(logp_new: f64, logp_old: f64, advantage: f64, eps: f64) -> (f64, f64) {
    let rho = (logp_new - logp_old).clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP).exp();
    let unclipped = rho * advantage;
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if unclipped <= clipped {
        (unclipped, unclipped)
    } else {
        (clipped, 0.0)
    }
}

/// Per-objective surrogate means over `batch[idx]` and their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Surrogates {
    pub values: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
}

pub fn surrogates<P: ExplanationPolicy>(
    policy: &P,
    batch: &[PreparedTrajectory],
    idx: &[usize],
    eps: f64,
    exec: Exec,
) -> Surrogates {
    let m = batch.first().map_or(0, |t| t.advantages.len());
    let n = policy.num_params();
    if idx.is_empty() || m == 0 {
        return Surrogates {
            values: vec![0.0; m],
            grads: vec![vec![0.0; n]; m],
        };
    }
    let scale = 1.0 / idx.len() as f64;
    let flat = exec.chunked_sum(idx.len(), GRAD_CHUNK, m * n + m, |range, buf| {
        let (grads, values) = buf.split_at_mut(m * n);
        for &k in &idx[range] {
            let t = &batch[k];
            let logp = policy.sequence_log_prob(t.user, t.item, &t.tokens);
            for (i, &a) in t.advantages.iter().enumerate() {
                let (value, factor) = clipped_term(logp, t.logp_b, a, eps);
                values[i] += scale * value;
                if factor != 0.0 {
                    policy.accumulate_log_prob_grad(
                        t.user,
                        t.item,
                        &t.tokens,
                        scale * factor,
                        &mut grads[i * n..(i + 1) * n],
                    );
                }
            }
        }
    });
    let (grads, values) = flat.split_at(m * n);
    Surrogates {
        values: values.to_vec(),
        grads: grads.chunks(n).map(<[f64]>::to_vec).collect(),
    }
}

/// Surrogate of one objective over the whole batch, with its gradient.
pub fn surrogate_and_grad<P: ExplanationPolicy>(
    policy: &P,
    batch: &[PreparedTrajectory],
    objective: usize,
    eps: f64,
) -> (f64, Vec<f64>) {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let mut s = surrogates(policy, batch, &idx, eps, Exec::Sequential);
    (s.values[objective], s.grads.swap_remove(objective))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::stream_rng;
    use crate::policy::{ModelDims, RecurrentPolicy};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn worked_examples() {
        let (v, g) = clipped_term(2f64.ln(), 0.0, 1.0, 0.2);
        assert_abs_diff_eq!(v, 1.2, epsilon = 1e-12);
        assert_eq!(g, 0.0);
        let (v, g) = clipped_term(0.5f64.ln(), 0.0, -1.0, 0.2);
        assert_abs_diff_eq!(v, -0.8, epsilon = 1e-12);
        assert_eq!(g, 0.0);
        for eps in [0.1, 0.2, 0.3] {
            assert_eq!(clipped_term(-1.5, -1.5, 0.7, eps), (0.7, 0.7));
        }
    }

    #[test]
    fn unclipped_side_keeps_gradient() {
        // Ratio below the band with a positive advantage is not clipped.
        let (v, g) = clipped_term(0.5f64.ln(), 0.0, 1.0, 0.2);
        assert_abs_diff_eq!(v, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(g, 0.5, epsilon = 1e-12);
        let (v, g) = clipped_term(2f64.ln(), 0.0, -1.0, 0.2);
        assert_abs_diff_eq!(v, -2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g, -2.0, epsilon = 1e-12);
    }

    #[test]
    fn extreme_log_ratio_is_clamped() {
        let (v, g) = clipped_term(1e6, 0.0, -1.0, 0.2);
        assert_abs_diff_eq!(v, -(20f64).exp(), epsilon = 1e-3);
        assert!(g.is_finite());
    }

    proptest! {
        #[test]
        fn term_bounded_by_clip(delta in -5.0f64..5.0, a in -3.0f64..3.0, eps in 0.05f64..0.5) {
            let (v, g) = clipped_term(delta, 0.0, a, eps);
            prop_assert!(v <= (1.0 + eps) * a.abs() + 1e-12);
            let rho = delta.exp();
            prop_assert!(v <= rho * a + 1e-12);
            prop_assert!(g == 0.0 || (g - rho * a).abs() <= 1e-12 * (1.0 + g.abs()));
        }
    }

    fn setup() -> (RecurrentPolicy, Vec<PreparedTrajectory>) {
        let policy = RecurrentPolicy::init(
            ModelDims {
                users: 3,
                items: 4,
                vocab: 9,
                dim: 4,
            },
            11,
        );
        let mut rng = stream_rng(5, 0);
        let batch = (0..6)
            .map(|k| {
                let s = policy.sample_explanations(k % 3, k % 4, 1, 1.0, &mut rng).remove(0);
                PreparedTrajectory {
                    user: k % 3,
                    item: k % 4,
                    tokens: s.tokens,
                    logp_b: s.log_prob,
                    advantages: vec![k as f64 * 0.3 - 0.7, 0.5 - k as f64 * 0.2],
                    rating: None,
                }
            })
            .collect();
        (policy, batch)
    }

    #[test]
    fn on_policy_value_is_mean_advantage() {
        let (policy, batch) = setup();
        for i in 0..2 {
            let (v, _) = surrogate_and_grad(&policy, &batch, i, 0.2);
            let mean = batch.iter().map(|t| t.advantages[i]).sum::<f64>() / batch.len() as f64;
            assert_abs_diff_eq!(v, mean, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_advantages_give_zero() {
        let (policy, mut batch) = setup();
        batch.iter_mut().for_each(|t| t.advantages = vec![0.0, 0.0]);
        let (v, g) = surrogate_and_grad(&policy, &batch, 0, 0.2);
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn strategies_agree_bitwise() {
        let (policy, batch) = setup();
        let idx: Vec<usize> = (0..batch.len()).collect();
        assert_eq!(
            surrogates(&policy, &batch, &idx, 0.2, Exec::Sequential),
            surrogates(&policy, &batch, &idx, 0.2, Exec::Parallel)
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (mut policy, batch) = setup();
        // Move away from the behavior policy so some terms clip.
        for (k, p) in policy.params_mut().iter_mut().enumerate() {
            *p += 0.02 * ((k as f64) * 0.37).sin();
        }
        let (_, g) = surrogate_and_grad(&policy, &batch, 0, 0.2);
        let h = 1e-6;
        for k in (0..policy.num_params()).step_by(7) {
            let mut plus = policy.clone();
            plus.params_mut()[k] += h;
            let mut minus = policy.clone();
            minus.params_mut()[k] -= h;
            let fd = (surrogate_and_grad(&plus, &batch, 0, 0.2).0 - surrogate_and_grad(&minus, &batch, 0, 0.2).0)
                / (2.0 * h);
            assert!(
                (fd - g[k]).abs() <= 1e-6 + 1e-4 * fd.abs(),
                "param {k}: fd {fd} vs {}",
                g[k]
            );
        }
    }
}
