//! Difficulty-aware sampling of unobserved user-item pairs.
//!
//! A user's category is drawn with probability proportional to
//! `1 / ln(N + 2)`, where `N` is how often the user interacted with that
//! category, so sparsely visited categories are explored more. The item is then
//! drawn uniformly among the user's unobserved items in that category.

use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::HashSet;
use thiserror::Error;

use crate::corpus::Corpus;
use crate::exec::{stream_id, stream_rng};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplerError {
    #[error("user {user} has no unobserved item in any category")]
    Exhausted { user: String },
}

/// Per-category interaction counts of one user.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryProfile {
    pub counts: Vec<u64>,
}

impl CategoryProfile {
    pub fn new(counts: Vec<u64>) -> Self {
        CategoryProfile { counts }
    }

    pub fn of_user(corpus: &Corpus, user: usize) -> Self {
        let mut counts = vec![0u64; corpus.categories().len()];
        for inter in corpus.user_interactions(user) {
            counts[corpus.item_category(inter.item)] += 1;
        }
        CategoryProfile { counts }
    }
}

/// Probability of drawing each category; sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingDistribution {
    pub probs: Vec<f64>,
}

impl SamplingDistribution {
    /// Draws a category index by inverse transform sampling.
    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        let x: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = i;
            if x < acc {
                return i;
            }
        }
        last
    }
}

pub fn category_probs(profile: &CategoryProfile) -> SamplingDistribution {
    let inv: Vec<f64> = profile.counts.iter().map(|&n| 1.0 / (n as f64 + 2.0).ln()).collect();
    let total: f64 = inv.iter().sum();
    SamplingDistribution {
        probs: inv.into_iter().map(|w| w / total).collect(),
    }
}

/// Draws `n` unobserved `(user, item)` pairs for one user.
///
/// Categories with no unobserved item for this user are removed and the
/// remaining probabilities renormalized, which is what redrawing until a
/// feasible category comes up would give.
pub fn sample_unobserved(
    corpus: &Corpus,
    user: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>, SamplerError> {
    let observed = corpus.observed_items(user);
    let n_cat = corpus.categories().len();
    let mut unobserved: Vec<Vec<usize>> = vec![Vec::new(); n_cat];
    for item in 0..corpus.items().len() {
        if !observed.contains(&item) {
            unobserved[corpus.item_category(item)].push(item);
        }
    }
    let mut dist = category_probs(&CategoryProfile::of_user(corpus, user));
    for (p, pool) in dist.probs.iter_mut().zip(&unobserved) {
        if pool.is_empty() {
            *p = 0.0;
        }
    }
    let total: f64 = dist.probs.iter().sum();
    if total <= 0.0 {
        return Err(SamplerError::Exhausted {
            user: corpus.users()[user].user_id.clone(),
        });
    }
    dist.probs.iter_mut().for_each(|p| *p /= total);

    let mut rng = stream_rng(seed, stream_id(1, user as u64, 0));
    Ok((0..n)
        .map(|_| {
            let cat = dist.draw(&mut rng);
            (user, *unobserved[cat].choose(&mut rng).unwrap())
        })
        .collect())
}

/// Spreads a global budget over users uniformly at random and samples each
/// user's share. Duplicate pairs are removed, keeping first occurrence; users
/// with nothing left to sample are skipped.
pub fn sample_budget(corpus: &Corpus, budget: usize, seed: u64) -> Vec<(usize, usize)> {
    let n_users = corpus.users().len();
    if n_users == 0 || budget == 0 {
        return Vec::new();
    }
    let mut rng = stream_rng(seed, stream_id(2, 0, 0));
    let mut shares = vec![0usize; n_users];
    for _ in 0..budget {
        shares[rng.gen_range(0..n_users)] += 1;
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(budget);
    for (user, &share) in shares.iter().enumerate() {
        if share == 0 {
            continue;
        }
        match sample_unobserved(corpus, user, share, seed) {
            Ok(pairs) => out.extend(pairs.into_iter().filter(|p| seen.insert(*p))),
            Err(e) => log::debug!("{e}"),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic, Interaction, Item};
    use approx::assert_abs_diff_eq;

    fn item(id: usize, cat: &str) -> Item {
        Item {
            item_id: format!("i{id}"),
            title: String::new(),
            description: String::new(),
            category: cat.into(),
            features: vec!["f".into()],
        }
    }

    /// One user; category "a" holds `a_items` unobserved items, category "b"
    /// holds `b_items` items of which the first `seen_b` are observed.
    fn two_category_corpus(a_items: usize, b_items: usize, seen_b: usize) -> Corpus {
        let items = (0..a_items)
            .map(|i| item(i, "a"))
            .chain((a_items..a_items + b_items).map(|i| item(i, "b")))
            .collect();
        let inters = (a_items..a_items + seen_b)
            .map(|v| Interaction {
                user: 0,
                item: v,
                rating: 3.0,
                explanation: "f".into(),
            })
            .collect();
        Corpus::from_parts(items, vec!["u".into()], inters)
    }

    #[test]
    fn symmetric_counts_uniform() {
        let d = category_probs(&CategoryProfile::new(vec![5, 5, 5]));
        for p in d.probs {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_and_six() {
        // ln 8 = 3 ln 2, so the weights are 1/ln2 : 1/(3 ln2) = 3 : 1.
        let d = category_probs(&CategoryProfile::new(vec![0, 6]));
        assert_abs_diff_eq!(d.probs[0], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(d.probs[1], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn single_category() {
        assert_eq!(category_probs(&CategoryProfile::new(vec![0])).probs, vec![1.0]);
    }

    #[test]
    fn exhausted_user_errors() {
        let c = two_category_corpus(1, 1, 1);
        let c = Corpus::from_parts(
            c.items().to_vec(),
            vec!["u".into()],
            vec![
                Interaction {
                    user: 0,
                    item: 0,
                    rating: 3.0,
                    explanation: "f".into(),
                },
                Interaction {
                    user: 0,
                    item: 1,
                    rating: 3.0,
                    explanation: "f".into(),
                },
            ],
        );
        assert!(matches!(
            sample_unobserved(&c, 0, 1, 0),
            Err(SamplerError::Exhausted { .. })
        ));
    }

    #[test]
    fn single_feasible_pair_repeats() {
        // Category "a" holds one unobserved item; "b" is fully observed.
        let c = two_category_corpus(1, 2, 2);
        let pairs = sample_unobserved(&c, 0, 3, 11).unwrap();
        assert_eq!(pairs, vec![(0, 0); 3]);
    }

    #[test]
    fn never_emits_observed_pairs() {
        let c = gen_synthetic(40, 30, 4, 3);
        for u in 0..40 {
            let seen = c.observed_items(u);
            for (_, v) in sample_unobserved(&c, u, 50, 9).unwrap() {
                assert!(!seen.contains(&v));
            }
        }
    }

    #[test]
    fn budget_pairs_unique_and_unobserved() {
        let c = gen_synthetic(40, 30, 4, 3);
        let pairs = sample_budget(&c, 200, 5);
        let set: HashSet<_> = pairs.iter().collect();
        assert_eq!(set.len(), pairs.len());
        assert!(pairs.len() > 150);
        for (u, v) in pairs {
            assert!(!c.observed_items(u).contains(&v));
        }
        assert_eq!(sample_budget(&c, 200, 5), sample_budget(&c, 200, 5));
    }

    #[test]
    fn monotone_in_counts() {
        let d = category_probs(&CategoryProfile::new(vec![0, 1, 3, 10, 100]));
        for w in d.probs.windows(2) {
            assert!(w[0] > w[1]);
        }
    }
}
