//! Text-quality, rating-accuracy and rank-agreement metrics.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use thiserror::Error;

use crate::corpus::{mentions, tokenize_words, Corpus, Vocabulary};
use crate::exec::Exec;
use crate::policy::ExplanationPolicy;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no samples")]
    Empty,
    #[error("inputs have different lengths ({0} and {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two observations")]
    TooShort,
    #[error("correlation undefined: an input has zero variance")]
    ZeroVariance,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(hits: usize, cand: usize, refr: usize) -> Self {
        if cand == 0 || refr == 0 {
            return RougeScore::default();
        }
        let precision = hits as f64 / cand as f64;
        let recall = hits as f64 / refr as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore { precision, recall, f1 }
    }

    fn mean(xs: &[RougeScore]) -> Self {
        let n = xs.len().max(1) as f64;
        RougeScore {
            precision: xs.iter().map(|x| x.precision).sum::<f64>() / n,
            recall: xs.iter().map(|x| x.recall).sum::<f64>() / n,
            f1: xs.iter().map(|x| x.f1).sum::<f64>() / n,
        }
    }
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

/// Clipped matches and candidate n-gram total.
fn clipped_overlap<T: AsRef<str>>(cand: &[T], refr: &[T], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(refr, n);
    let hits = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (hits, cand.len().saturating_sub(n - 1))
}

pub fn rouge_n<T: AsRef<str>>(cand: &[T], refr: &[T], n: usize) -> RougeScore {
    assert!(n >= 1, "n-gram order must be at least 1");
    let (hits, total) = clipped_overlap(cand, refr, n);
    RougeScore::from_counts(hits, total, refr.len().saturating_sub(n - 1))
}

fn lcs_len<T: AsRef<str>>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: AsRef<str>>(cand: &[T], refr: &[T]) -> RougeScore {
    RougeScore::from_counts(lcs_len(cand, refr), cand.len(), refr.len())
}

/// Sentence BLEU with uniform weights over orders 1..=`max_n`. An order with
/// no match uses `1 / (candidate n-grams + 1)` in place of zero.
pub fn bleu<T: AsRef<str>>(cand: &[T], refr: &[T], max_n: usize) -> f64 {
    let c = cand.len();
    if c == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (hits, total) = clipped_overlap(cand, refr, n);
        let p = if hits > 0 {
            hits as f64 / total as f64
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let r = refr.len() as f64;
    let bp = if (c as f64) > r {
        1.0
    } else {
        (1.0 - r / c as f64).exp()
    };
    bp * (log_sum / max_n as f64).exp()
}

/// Whether the generation names a feature of the item that the ground truth
/// also names.
pub fn feature_matched(generated: &[String], truth: &[String], features: &[String]) -> bool {
    features.iter().any(|f| mentions(generated, f) && mentions(truth, f))
}

/// Fraction of samples `(generated, truth, features)` with a matched feature.
pub fn fmr(samples: &[(Vec<String>, Vec<String>, Vec<String>)]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples.iter().filter(|(g, t, f)| feature_matched(g, t, f)).count();
    hits as f64 / samples.len() as f64
}

pub fn rmse(pairs: &[(f64, f64)]) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok((pairs.iter().map(|(p, y)| (p - y).powi(2)).sum::<f64>() / pairs.len() as f64).sqrt())
}

pub fn mae(pairs: &[(f64, f64)]) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(pairs.iter().map(|(p, y)| (p - y).abs()).sum::<f64>() / pairs.len() as f64)
}

/// 1-based ranks; ties share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricError::TooShort);
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Averages over a test set. Text metrics are fractions in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub fmr: f64,
    pub bleu: f64,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
    pub rmse: f64,
    pub mae: f64,
}

/// One generated explanation with its reference and rating prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub generated: Vec<String>,
    pub reference: Vec<String>,
    pub features: Vec<String>,
    pub predicted: f64,
    pub rating: f64,
}

impl EvalReport {
    pub fn from_samples(samples: &[EvalSample]) -> Result<Self, MetricError> {
        if samples.is_empty() {
            return Err(MetricError::Empty);
        }
        let n = samples.len() as f64;
        let r1: Vec<RougeScore> = samples.iter().map(|s| rouge_n(&s.generated, &s.reference, 1)).collect();
        let r2: Vec<RougeScore> = samples.iter().map(|s| rouge_n(&s.generated, &s.reference, 2)).collect();
        let rl: Vec<RougeScore> = samples.iter().map(|s| rouge_l(&s.generated, &s.reference)).collect();
        let pairs: Vec<(f64, f64)> = samples.iter().map(|s| (s.predicted, s.rating)).collect();
        let matched = samples
            .iter()
            .filter(|s| feature_matched(&s.generated, &s.reference, &s.features))
            .count();
        Ok(EvalReport {
            samples: samples.len(),
            fmr: matched as f64 / n,
            bleu: samples.iter().map(|s| bleu(&s.generated, &s.reference, 4)).sum::<f64>() / n,
            rouge1: RougeScore::mean(&r1),
            rouge2: RougeScore::mean(&r2),
            rouge_l: RougeScore::mean(&rl),
            rmse: rmse(&pairs)?,
            mae: mae(&pairs)?,
        })
    }

    /// Aligned plain-text table; text metrics are shown as percentages.
    pub fn table(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |x: f64| format!("{:>8.2}", 100.0 * x);
        writeln!(f, "{:<10}{:>8}{:>8}{:>8}", "metric", "P", "R", "F")?;
        for (name, r) in [
            ("ROUGE-1", self.rouge1),
            ("ROUGE-2", self.rouge2),
            ("ROUGE-L", self.rouge_l),
        ] {
            writeln!(f, "{:<10}{}{}{}", name, pct(r.precision), pct(r.recall), pct(r.f1))?;
        }
        writeln!(f, "{:<10}{}", "FMR", pct(self.fmr))?;
        writeln!(f, "{:<10}{}", "BLEU", pct(self.bleu))?;
        writeln!(f, "{:<10}{:>8.4}", "RMSE", self.rmse)?;
        writeln!(f, "{:<10}{:>8.4}", "MAE", self.mae)?;
        write!(f, "{:<10}{:>8}", "samples", self.samples)
    }
}

/// Greedy-decodes every test interaction and scores it against the review.
pub fn eval_samples<P: ExplanationPolicy>(
    policy: &P,
    test: &Corpus,
    vocab: &Vocabulary,
    exec: Exec,
) -> Vec<EvalSample> {
    exec.map(test.interactions(), |inter| EvalSample {
        generated: vocab.words(&policy.greedy_decode(inter.user, inter.item)),
        reference: tokenize_words(&inter.explanation),
        features: test.items()[inter.item].features.clone(),
        predicted: policy.predict_rating(inter.user, inter.item),
        rating: inter.rating,
    })
}

pub fn evaluate<P: ExplanationPolicy>(
    policy: &P,
    test: &Corpus,
    vocab: &Vocabulary,
    exec: Exec,
) -> Result<EvalReport, MetricError> {
    EvalReport::from_samples(&eval_samples(policy, test, vocab, exec))
}
