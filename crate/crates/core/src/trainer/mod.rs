//! The training loop: pretraining, then alternating collection and update.
//!
//! Each iteration freezes a behavior snapshot, collects scored explanations
//! for observed and sampled pairs, and updates the policy with the clipped
//! surrogate of every objective, scalarized per minibatch by the min-norm
//! weights. Reports and checkpoints are written per iteration.

mod collect;
mod objective;
mod update;

pub use collect::{collect, observed_pairs, CollectInput, CollectSettings, CollectStats, PromptResources};
pub use objective::{clipped_term, surrogate_and_grad, surrogates, PreparedTrajectory, Surrogates, LOG_RATIO_CLAMP};
pub use update::{prepare, update, UpdateLog, UpdateSettings};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

use crate::advantage::{BufferError, ReplayBuffer};
use crate::corpus::{Corpus, CorpusError, Vocabulary};
use crate::exec::Exec;
use crate::metrics::{evaluate, EvalReport, MetricError};
use crate::pareto::{solve_gram, ParetoError, PreferenceConstraint};
use crate::policy::{
    pretrain, CheckpointError, ExplanationPolicy, ModelDims, PretrainConfig, PretrainError, PretrainReport,
    RecurrentPolicy,
};
use crate::prompts::{
    cluster_users, Embedder, LocalEmbedder, PromptError, PromptPrototype, RetrievalConfig, LOCAL_DIM,
};
use crate::rewards::{simulated_score, Lexicon, RewardMode, RewardProvider, SimulatedProvider};

/// Floor on every objective's weight when no constraints are configured.
pub const DEFAULT_FLOOR: f64 = 0.2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error(transparent)]
    Pareto(#[from] ParetoError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("buffer refers to unknown {0}")]
    UnknownId(String),
    #[error("iteration {iteration}: no trajectory has an advantage")]
    EmptyBuffer { iteration: usize },
    #[error("non-finite loss at iteration {iteration}, epoch {epoch}, step {step}")]
    NonFinite {
        iteration: usize,
        epoch: usize,
        step: usize,
        /// Report of the aborted iteration, up to the failing step.
        report: Option<Box<IterationReport>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub epochs: usize,
    /// Explanations sampled per pair.
    pub explorations: usize,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    pub minibatch: usize,
    /// Unobserved pairs sampled per iteration.
    pub sample_budget: usize,
    /// Observed pairs used per iteration; all of them when unset.
    pub observed_pairs: Option<usize>,
    /// Preference half-spaces on the weights; one floor of 0.2 per objective
    /// when unset.
    pub constraints: Option<Vec<PreferenceConstraint>>,
    pub reward_mode: RewardMode,
    pub aux_rating_weight: f64,
    pub temperature: f64,
    /// Seeds initialization, pretraining, sampling and shuffling. Overrides
    /// `pretrain.seed`.
    pub seed: u64,
    pub model_dim: usize,
    pub pretrain: PretrainConfig,
    pub retrieval: RetrievalConfig,
    /// Test pairs scored by the probe after each iteration.
    pub probe_size: usize,
    /// Write each iteration's replay buffer next to its checkpoint.
    pub save_buffers: bool,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3,
            epochs: 2,
            explorations: 5,
            clip_epsilon: 0.2,
            learning_rate: 1e-3,
            minibatch: 32,
            sample_budget: 400,
            observed_pairs: None,
            constraints: None,
            reward_mode: RewardMode::MultiPerspective,
            aux_rating_weight: 0.0,
            temperature: 1.0,
            seed: 0,
            model_dim: 16,
            pretrain: PretrainConfig::default(),
            retrieval: RetrievalConfig::default(),
            probe_size: 100,
            save_buffers: false,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn constraints(&self) -> Vec<PreferenceConstraint> {
        self.constraints
            .clone()
            .unwrap_or_else(|| PreferenceConstraint::one_hot_floors(self.reward_mode.num_objectives(), DEFAULT_FLOOR))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.iterations == 0 || self.epochs == 0 || self.explorations == 0 {
            return bad("iterations, epochs and explorations must be at least 1");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.minibatch == 0 || self.model_dim == 0 || self.pretrain.batch_size == 0 {
            return bad("minibatch, model_dim and pretrain.batch_size must be at least 1");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(self.aux_rating_weight >= 0.0 && self.aux_rating_weight.is_finite()) {
            return bad("aux_rating_weight must be non-negative");
        }
        if self.explorations == 1 {
            log::warn!("explorations = 1: every group is a singleton and no trajectory gets an advantage");
        }
        let m = self.reward_mode.num_objectives();
        let identity: Vec<Vec<f64>> = (0..m)
            .map(|i| (0..m).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        solve_gram(&identity, &self.constraints())?;
        Ok(())
    }
}

/// Mean simulated rewards of greedy explanations on a fixed set of test pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub pairs: usize,
    pub info: f64,
    pub persv: f64,
    /// `info + persv`.
    pub combined: f64,
}

impl ProbeScore {
    /// At least as good on both perspectives and better on one.
    pub fn dominates(&self, other: &ProbeScore) -> bool {
        self.info >= other.info && self.persv >= other.persv && (self.info > other.info || self.persv > other.persv)
    }
}

/// Scores greedy explanations for the first `n` test interactions with the
/// simulated multi-perspective rubric.
pub fn probe_reward<P: ExplanationPolicy>(
    policy: &P,
    test: &Corpus,
    vocab: &Vocabulary,
    lexicon: &Lexicon,
    n: usize,
    exec: Exec,
) -> ProbeScore {
    let pairs = &test.interactions()[..n.min(test.interactions().len())];
    let scores = exec.map(pairs, |i| {
        let words = vocab.words(&policy.greedy_decode(i.user, i.item));
        simulated_score(&words, &test.items()[i.item], lexicon).components()
    });
    if scores.is_empty() {
        return ProbeScore::default();
    }
    let k = scores.len() as f64;
    let info = scores.iter().map(|s| s[0]).sum::<f64>() / k;
    let persv = scores.iter().map(|s| s[1]).sum::<f64>() / k;
    ProbeScore {
        pairs: scores.len(),
        info,
        persv,
        combined: info + persv,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub observed_pairs: usize,
    pub sampled_pairs: usize,
    pub buffer_size: usize,
    pub groups: usize,
    pub excluded_singletons: usize,
    pub dropped_rewards: usize,
    pub context_fallbacks: usize,
    /// Mean reward per objective over the collected buffer.
    pub behavior_reward: Vec<f64>,
    #[serde(flatten)]
    pub update: UpdateLog,
    pub probe: ProbeScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub pretrain: PretrainReport,
    pub probe_before: ProbeScore,
    pub eval_before: EvalReport,
    pub iterations: Vec<IterationReport>,
    pub eval_after: EvalReport,
}

/// Reward provider, prompt resources and probe rubric used by a run.
pub struct Providers<'a> {
    pub reward: &'a dyn RewardProvider,
    pub embedder: &'a dyn Embedder,
    pub prototypes: Vec<PromptPrototype>,
    /// Lexicon of the probe's simulated rubric.
    pub lexicon: Lexicon,
}

static LOCAL_EMBEDDER: LocalEmbedder = LocalEmbedder { dim: LOCAL_DIM };

impl<'a> Providers<'a> {
    pub fn new(reward: &'a dyn RewardProvider, embedder: &'a dyn Embedder) -> Self {
        Providers {
            reward,
            embedder,
            prototypes: PromptPrototype::defaults(),
            lexicon: Lexicon::default(),
        }
    }

    pub fn simulated(provider: &'a SimulatedProvider) -> Self {
        Providers {
            lexicon: provider.lexicon.clone(),
            ..Providers::new(provider, &LOCAL_EMBEDDER)
        }
    }
}

/// A split corpus with its vocabulary and pretrained policy.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub train: Corpus,
    pub test: Corpus,
    pub vocab: Vocabulary,
    pub policy: RecurrentPolicy,
    pub report: PretrainReport,
}

/// Splits leave-last, builds the vocabulary and pretrains a fresh policy.
pub fn pretrain_stage(corpus: &Corpus, config: &TrainConfig) -> Result<Pretrained, TrainError> {
    let (train, test) = corpus.split_leave_last()?;
    let vocab = Vocabulary::build(&train, 1);
    let dims = ModelDims {
        users: corpus.users().len(),
        items: corpus.items().len(),
        vocab: vocab.len(),
        dim: config.model_dim,
    };
    let mut policy = RecurrentPolicy::init(dims, config.seed);
    let pcfg = PretrainConfig {
        seed: config.seed,
        ..config.pretrain.clone()
    };
    let report = pretrain(&mut policy, &train, &vocab, &pcfg, config.exec)?;
    log::info!(
        "pretrained: nll {:.4} -> {:.4}, mse {:.4} -> {:.4}",
        report.nll_before,
        report.nll_after,
        report.mse_before,
        report.mse_after
    );
    Ok(Pretrained {
        train,
        test,
        vocab,
        policy,
        report,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: RecurrentPolicy,
    pub vocab: Vocabulary,
    pub report: TrainReport,
}

/// Pretrains, then runs the configured iterations.
pub fn train(
    corpus: &Corpus,
    config: &TrainConfig,
    providers: &Providers<'_>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let pre = pretrain_stage(corpus, config)?;
    refine(corpus, &pre, config, providers, out_dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    std::fs::write(path, text + "\n").map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Runs the collection/update iterations starting from a pretrained policy.
pub fn refine(
    corpus: &Corpus,
    pre: &Pretrained,
    config: &TrainConfig,
    providers: &Providers<'_>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if providers.reward.mode() != config.reward_mode {
        return Err(TrainError::Config(format!(
            "reward provider scores {:?} but the config asks for {:?}",
            providers.reward.mode(),
            config.reward_mode
        )));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    let exec = config.exec;
    let probe =
        |p: &RecurrentPolicy| probe_reward(p, &pre.test, &pre.vocab, &providers.lexicon, config.probe_size, exec);
    let probe_before = probe(&pre.policy);
    let eval_before = evaluate(&pre.policy, &pre.test, &pre.vocab, exec)?;

    let resources = if providers.reward.needs_prompt() {
        Some(PromptResources {
            embedder: providers.embedder,
            prototypes: &providers.prototypes,
            clusters: cluster_users(&pre.train, config.retrieval.clusters, providers.embedder, config.seed)?,
            top_k: config.retrieval.k,
        })
    } else {
        None
    };
    let input = CollectInput {
        train: &pre.train,
        all: corpus,
        vocab: &pre.vocab,
        provider: providers.reward,
        prompts: resources.as_ref(),
    };
    let constraints = config.constraints();

    let mut behavior = pre.policy.clone();
    let mut reports = Vec::with_capacity(config.iterations);
    for iteration in 1..=config.iterations {
        let settings = CollectSettings {
            explorations: config.explorations,
            temperature: config.temperature,
            sample_budget: config.sample_budget,
            observed_pairs: config.observed_pairs,
            seed: config.seed,
            iteration,
            exec,
        };
        let (buffer, stats) = collect(&behavior, &input, &settings)?;
        let batch = prepare(&buffer, corpus, &pre.train)?;
        if batch.is_empty() {
            return Err(TrainError::EmptyBuffer { iteration });
        }
        let mut report = IterationReport {
            iteration,
            observed_pairs: stats.observed_pairs,
            sampled_pairs: stats.sampled_pairs,
            buffer_size: buffer.len(),
            groups: stats.advantage.groups,
            excluded_singletons: stats.advantage.excluded_singletons,
            dropped_rewards: stats.dropped_rewards,
            context_fallbacks: stats.context_fallbacks,
            behavior_reward: mean_rewards(&buffer, config.reward_mode),
            update: UpdateLog::default(),
            probe: ProbeScore::default(),
        };

        let mut policy = behavior.clone();
        let usettings = UpdateSettings {
            epochs: config.epochs,
            minibatch: config.minibatch,
            clip_epsilon: config.clip_epsilon,
            learning_rate: config.learning_rate,
            constraints: &constraints,
            aux_rating_weight: config.aux_rating_weight,
            seed: config.seed,
            iteration,
            exec,
        };
        match update(&mut policy, &batch, &usettings) {
            Ok(log) => report.update = log,
            Err((log, err)) => {
                report.update = log;
                return Err(match err {
                    TrainError::NonFinite {
                        iteration, epoch, step, ..
                    } => TrainError::NonFinite {
                        iteration,
                        epoch,
                        step,
                        report: Some(Box::new(report)),
                    },
                    other => other,
                });
            }
        }
        report.probe = probe(&policy);
        log::info!(
            "iteration {iteration}: buffer {} (dropped {}), probe info {:.4} persv {:.4}",
            report.buffer_size,
            report.dropped_rewards,
            report.probe.info,
            report.probe.persv
        );
        if let Some(dir) = out_dir {
            policy.save(&dir.join(format!("ckpt_iter{iteration}.json")), Some(&pre.vocab))?;
            write_json(&dir.join(format!("report_iter{iteration}.json")), &report)?;
            if config.save_buffers {
                buffer.persist(&dir.join(format!("buffer_iter{iteration}.jsonl")))?;
            }
        }
        reports.push(report);
        behavior = policy;
    }

    let eval_after = evaluate(&behavior, &pre.test, &pre.vocab, exec)?;
    Ok(TrainOutcome {
        policy: behavior,
        vocab: pre.vocab.clone(),
        report: TrainReport {
            pretrain: pre.report.clone(),
            probe_before,
            eval_before,
            iterations: reports,
            eval_after,
        },
    })
}

fn mean_rewards(buffer: &ReplayBuffer, mode: RewardMode) -> Vec<f64> {
    let m = mode.num_objectives();
    let mut sums = vec![0.0; m];
    for t in buffer.trajectories() {
        for (s, r) in sums.iter_mut().zip(t.rewards.components()) {
            *s += r;
        }
    }
    let n = buffer.len().max(1) as f64;
    sums.into_iter().map(|s| s / n).collect()
}

/// `(β_info, β_persv)` pairs with `β_info` from 0 to `total` in steps of 0.1.
pub fn beta_grid(total: f64) -> Vec<[f64; 2]> {
    let steps = (total * 10.0).round() as usize;
    (0..=steps)
        .map(|k| {
            let b1 = k as f64 / 10.0;
            [b1, ((total - b1) * 10.0).round() / 10.0]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub beta: [f64; 2],
    pub probe: ProbeScore,
    pub fmr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub probe_before: ProbeScore,
    pub points: Vec<SweepPoint>,
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>8}{:>8}{:>10}{:>10}{:>10}{:>8}",
            "b_info", "b_persv", "info", "persv", "combined", "FMR"
        )?;
        for p in &self.points {
            writeln!(
                f,
                "{:>8.1}{:>8.1}{:>10.4}{:>10.4}{:>10.4}{:>8.4}",
                p.beta[0], p.beta[1], p.probe.info, p.probe.persv, p.probe.combined, p.fmr
            )?;
        }
        write!(
            f,
            "{:>16}{:>10.4}{:>10.4}{:>10.4}",
            "pretrained", self.probe_before.info, self.probe_before.persv, self.probe_before.combined
        )
    }
}

/// Refines the same pretrained policy once per preference floor pair and
/// reports where each run lands on the two perspectives.
pub fn sweep_beta(
    corpus: &Corpus,
    pre: &Pretrained,
    config: &TrainConfig,
    providers: &Providers<'_>,
    grid: &[[f64; 2]],
) -> Result<SweepReport, TrainError> {
    if config.reward_mode != RewardMode::MultiPerspective {
        return Err(TrainError::Config(
            "the preference sweep needs multi-perspective rewards".into(),
        ));
    }
    let mut points = Vec::with_capacity(grid.len());
    let mut probe_before = ProbeScore::default();
    for beta in grid {
        let cfg = TrainConfig {
            constraints: Some(vec![
                PreferenceConstraint {
                    h: vec![1.0, 0.0],
                    beta: beta[0],
                },
                PreferenceConstraint {
                    h: vec![0.0, 1.0],
                    beta: beta[1],
                },
            ]),
            ..config.clone()
        };
        let out = refine(corpus, pre, &cfg, providers, None)?;
        probe_before = out.report.probe_before;
        points.push(SweepPoint {
            beta: *beta,
            probe: out.report.iterations.last().map(|r| r.probe).unwrap_or(probe_before),
            fmr: out.report.eval_after.fmr,
        });
    }
    Ok(SweepReport { probe_before, points })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetPoint {
    pub budget: usize,
    /// Trajectories collected over all iterations and replicates.
    pub trajectories: usize,
    /// Final probe score averaged over replicates.
    pub probe: ProbeScore,
}

/// Refines the same pretrained policy once per sampling budget and replicate.
/// Replicate `r` uses seed `config.seed + r`; scores are averaged.
pub fn sweep_budget(
    corpus: &Corpus,
    pre: &Pretrained,
    config: &TrainConfig,
    providers: &Providers<'_>,
    budgets: &[usize],
    replicates: usize,
) -> Result<Vec<BudgetPoint>, TrainError> {
    let replicates = replicates.max(1);
    budgets
        .iter()
        .map(|&budget| {
            let mut point = BudgetPoint {
                budget,
                trajectories: 0,
                probe: ProbeScore::default(),
            };
            for r in 0..replicates {
                let cfg = TrainConfig {
                    sample_budget: budget,
                    seed: config.seed.wrapping_add(r as u64),
                    ..config.clone()
                };
                let out = refine(corpus, pre, &cfg, providers, None)?;
                point.trajectories += out.report.iterations.iter().map(|r| r.buffer_size).sum::<usize>();
                let p = out
                    .report
                    .iterations
                    .last()
                    .map(|r| r.probe)
                    .unwrap_or(out.report.probe_before);
                point.probe.pairs = p.pairs;
                point.probe.info += p.info / replicates as f64;
                point.probe.persv += p.persv / replicates as f64;
            }
            point.probe.combined = point.probe.info + point.probe.persv;
            Ok(point)
        })
        .collect()
}
