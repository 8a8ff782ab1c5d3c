//! The trainable explanation policy.
//!
//! [`ExplanationPolicy`] is the contract the trainer relies on; any generator
//! that can sample explanations with exact log-probabilities, differentiate
//! those log-probabilities, and predict ratings can be plugged in.
//! [`RecurrentPolicy`] is the shipped reference implementation.

mod adam;
mod pretrain;
mod recurrent;

pub use adam::Adam;
pub use pretrain::{mse_loss, nll_loss, pretrain, supervised_losses, PretrainConfig, PretrainError, PretrainReport};
pub use recurrent::{CheckpointError, ModelDims, RecurrentPolicy};

use crate::corpus::TokenId;
use crate::exec::SeedRng;

/// One explored explanation with its log-probability under the generating
/// parameters. Ends with end-of-sentence unless it hit the length cap.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledExplanation {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
}

pub trait ExplanationPolicy: Clone + Send + Sync {
    /// Flat parameter vector; gradients use the same layout.
    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// `log π(tokens | user, item)`, teacher-forced from begin-of-sentence.
    fn sequence_log_prob(&self, user: usize, item: usize, tokens: &[TokenId]) -> f64;

    /// Adds `scale * ∇ log π(tokens | user, item)` into `grad` and returns the
    /// log-probability.
    fn accumulate_log_prob_grad(
        &self,
        user: usize,
        item: usize,
        tokens: &[TokenId],
        scale: f64,
        grad: &mut [f64],
    ) -> f64;

    /// Ancestral sampling with the given softmax temperature. Stored
    /// log-probabilities are under the untempered model.
    fn sample_explanations(
        &self,
        user: usize,
        item: usize,
        count: usize,
        temperature: f64,
        rng: &mut SeedRng,
    ) -> Vec<SampledExplanation>;

    fn greedy_decode(&self, user: usize, item: usize) -> Vec<TokenId>;

    /// Unclamped rating-head output, used by the training loss.
    fn raw_rating(&self, user: usize, item: usize) -> f64;

    /// Rating clamped to [1, 5] for inference.
    fn predict_rating(&self, user: usize, item: usize) -> f64 {
        self.raw_rating(user, item).clamp(1.0, 5.0)
    }

    /// Adds `scale * ∇ (raw_rating - target)^2` into `grad` and returns the
    /// squared error.
    fn accumulate_rating_grad(&self, user: usize, item: usize, target: f64, scale: f64, grad: &mut [f64]) -> f64;
}
