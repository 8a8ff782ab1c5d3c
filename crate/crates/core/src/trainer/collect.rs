//! Data collection with a frozen behavior policy.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use super::TrainError;
use crate::advantage::{AdvantageStats, ReplayBuffer, Trajectory};
use crate::corpus::{Corpus, Item, Vocabulary};
use crate::exec::{stream_id, stream_rng, Exec};
use crate::policy::ExplanationPolicy;
use crate::prompts::{
    build_fewshot_context, build_reward_prompt, customized_or_prototype, prototype_for, retrieve_top_k, Embedder,
    FewShotExample, PromptError, PromptPrototype, UserClusters,
};
use crate::rewards::{RewardProvider, ScoreRequest};
use crate::sampler::sample_budget;

/// Prompt-building resources for providers that read prompts.
pub struct PromptResources<'a> {
    pub embedder: &'a dyn Embedder,
    pub prototypes: &'a [PromptPrototype],
    pub clusters: UserClusters,
    pub top_k: usize,
}

/// Everything one collection phase reads.
pub struct CollectInput<'a> {
    /// Observed pairs and the histories used in prompts.
    pub train: &'a Corpus,
    /// Every known interaction; sampled pairs avoid all of them.
    pub all: &'a Corpus,
    pub vocab: &'a Vocabulary,
    pub provider: &'a dyn RewardProvider,
    pub prompts: Option<&'a PromptResources<'a>>,
}

/// Knobs of one collection phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollectSettings {
    pub explorations: usize,
    pub temperature: f64,
    pub sample_budget: usize,
    pub observed_pairs: Option<usize>,
    pub seed: u64,
    pub iteration: usize,
    pub exec: Exec,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectStats {
    pub observed_pairs: usize,
    pub sampled_pairs: usize,
    pub trajectories: usize,
    pub dropped_rewards: usize,
    pub context_fallbacks: usize,
    pub advantage: AdvantageStats,
}

struct PairOutcome {
    trajectories: Vec<Trajectory>,
    dropped: usize,
    fallback: bool,
}

/// Observed pairs in corpus order without duplicates, optionally subsampled.
pub fn observed_pairs(train: &Corpus, limit: Option<usize>, seed: u64, iteration: usize) -> Vec<(usize, usize)> {
    let mut seen = HashSet::new();
    let mut pairs: Vec<(usize, usize)> = train
        .interactions()
        .iter()
        .map(|i| (i.user, i.item))
        .filter(|p| seen.insert(*p))
        .collect();
    if let Some(n) = limit {
        if n < pairs.len() {
            pairs.shuffle(&mut stream_rng(seed, stream_id(8, iteration as u64, 0)));
            pairs.truncate(n);
            pairs.sort_unstable();
        }
    }
    pairs
}

/// Seed for the unobserved-pair sampler in one iteration.
fn budget_seed(seed: u64, iteration: usize) -> u64 {
    seed ^ ((iteration as u64 + 1) << 40)
}

/// Samples explanations for every observed and sampled pair, scores them and
/// computes group advantages. Pairs are processed in parallel and appended in
/// pair order, so the buffer does not depend on scheduling.
pub fn collect<P: ExplanationPolicy>(
    behavior: &P,
    input: &CollectInput<'_>,
    settings: &CollectSettings,
) -> Result<(ReplayBuffer, CollectStats), TrainError> {
    let mut pairs = observed_pairs(input.train, settings.observed_pairs, settings.seed, settings.iteration);
    let n_observed = pairs.len();
    pairs.extend(sample_budget(
        input.all,
        settings.sample_budget,
        budget_seed(settings.seed, settings.iteration),
    ));
    let outcomes = settings
        .exec
        .map_range(pairs.len(), |k| collect_pair(behavior, input, settings, k, pairs[k]));

    let mut buffer = ReplayBuffer::new();
    let mut stats = CollectStats {
        observed_pairs: n_observed,
        sampled_pairs: pairs.len() - n_observed,
        ..CollectStats::default()
    };
    for outcome in outcomes {
        let outcome = outcome?;
        stats.dropped_rewards += outcome.dropped;
        stats.context_fallbacks += usize::from(outcome.fallback);
        for t in outcome.trajectories {
            buffer.push(t);
        }
    }
    stats.trajectories = buffer.len();
    stats.advantage = buffer.group_advantages();
    Ok((buffer, stats))
}

fn collect_pair<P: ExplanationPolicy>(
    behavior: &P,
    input: &CollectInput<'_>,
    settings: &CollectSettings,
    index: usize,
    (user, item): (usize, usize),
) -> Result<PairOutcome, TrainError> {
    let target = &input.all.items()[item];
    let mut rng = stream_rng(settings.seed, stream_id(7, settings.iteration as u64, index as u64));
    let samples = behavior.sample_explanations(user, item, settings.explorations, settings.temperature, &mut rng);

    let mut fallback = false;
    let context = match input.prompts.filter(|_| input.provider.needs_prompt()) {
        None => None,
        Some(res) => match pair_context(input, res, user, target) {
            Ok((history, examples, fell_back)) => {
                fallback = fell_back;
                Some((history, examples))
            }
            Err(TrainError::Prompt(PromptError::EmbeddingUnavailable { attempts, last })) => {
                log::warn!("dropping pair ({user}, {item}): embeddings unavailable after {attempts} attempts: {last}");
                return Ok(PairOutcome {
                    trajectories: Vec::new(),
                    dropped: samples.len(),
                    fallback: false,
                });
            }
            Err(e) => return Err(e),
        },
    };

    let mut trajectories = Vec::with_capacity(samples.len());
    let mut dropped = 0;
    for s in samples {
        let words = input.vocab.words(&s.tokens);
        let prompt = match &context {
            Some((history, examples)) => {
                let hist: Vec<(&Item, &str)> = history.iter().map(|(i, r)| (*i, r.as_str())).collect();
                Some(build_reward_prompt(
                    &hist,
                    target,
                    examples,
                    &words.join(" "),
                    input.provider.mode(),
                )?)
            }
            None => None,
        };
        let req = ScoreRequest {
            words: &words,
            item: target,
            prompt: prompt.as_deref(),
        };
        match input.provider.score(&req) {
            Ok(rewards) => trajectories.push(Trajectory {
                user: input.all.users()[user].user_id.clone(),
                item: target.item_id.clone(),
                tokens: s.tokens,
                rewards,
                logp_b: s.log_prob,
                advantages: None,
            }),
            Err(e) => {
                log::warn!("dropping explanation for ({user}, {item}): {e}");
                dropped += 1;
            }
        }
    }
    Ok(PairOutcome {
        trajectories,
        dropped,
        fallback,
    })
}

type PairContext<'c> = (Vec<(&'c Item, String)>, Vec<FewShotExample>, bool);

/// Retrieved history and customized few-shot examples for one pair.
fn pair_context<'c>(
    input: &CollectInput<'c>,
    res: &PromptResources<'_>,
    user: usize,
    target: &Item,
) -> Result<PairContext<'c>, TrainError> {
    let train = input.train;
    let history: Vec<(&'c Item, String)> = train
        .user_interactions(user)
        .map(|i| (&train.items()[i.item], i.explanation.clone()))
        .collect();
    let texts: Vec<String> = history
        .iter()
        .map(|(i, r)| crate::prompts::format_item(i, Some(r)))
        .collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let top = retrieve_top_k(
        &refs,
        &crate::prompts::format_item(target, None),
        res.top_k,
        res.embedder,
    )?;
    let history: Vec<(&'c Item, String)> = top.into_iter().map(|k| history[k].clone()).collect();

    let hist: Vec<(&Item, &str)> = history.iter().map(|(i, r)| (*i, r.as_str())).collect();
    let proto = prototype_for(res.prototypes, res.clusters.assignments[user])?;
    let request = build_fewshot_context(proto, &hist, target, input.provider.mode())?;
    let reply = match input.provider.customize_context(&request) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("context request failed: {e}");
            None
        }
    };
    let (examples, fell_back) = customized_or_prototype(reply.as_deref(), proto);
    Ok((history, examples, fell_back))
}
