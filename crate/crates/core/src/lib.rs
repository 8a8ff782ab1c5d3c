//! Off-policy reinforcement learning for explainable recommendation.
//!
//! A small autoregressive explanation policy with a rating head is pretrained on
//! observed reviews, then refined by alternating two phases: a frozen behavior
//! snapshot explores explanations for observed and sampled user-item pairs and a
//! human simulator scores each one on informativeness and persuasiveness; the
//! target policy is then updated with a clipped importance-weighted surrogate per
//! perspective, scalarized by weights from a preference-constrained min-norm
//! quadratic program.
//!
//! Module map:
//!
//! - [`corpus`]: dataset schema, JSONL ingestion, splitting, tokenization, synthetic data
//! - [`sampler`]: difficulty-aware sampling of unobserved pairs
//! - [`policy`]: the recurrent explanation policy, losses, decoding, checkpoints
//! - [`rewards`]: simulated and remote reward providers, reply parsing
//! - [`prompts`]: prompt templates, embeddings, retrieval, user clustering
//! - [`advantage`]: trajectories, replay buffer, group-relative advantages
//! - [`pareto`]: min-norm weight solver with preference floors
//! - [`trainer`]: data collection, model updating, the full loop and sweeps
//! - [`metrics`]: FMR, BLEU, ROUGE, RMSE/MAE, Spearman

pub mod advantage;
pub mod corpus;
pub mod exec;
pub mod metrics;
pub mod pareto;
pub mod policy;
pub mod prompts;
pub mod remote;
pub mod rewards;
pub mod sampler;
pub mod trainer;

pub use exec::Exec;
