//! k-means over user profile embeddings.

use rand::Rng;

use super::{format_item, Embedder, PromptError};
use crate::corpus::Corpus;
use crate::exec::{stream_id, stream_rng};

/// Most recent history entries that make up a user's profile text.
pub const PROFILE_HISTORY: usize = 5;

const MAX_ROUNDS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each assignment step.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. Stops when assignments stop
/// changing or after 100 rounds. An emptied cluster keeps its centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> KMeans {
    assert!(k >= 1 && points.len() >= k, "need at least k points");
    let mut rng = stream_rng(seed, stream_id(5, 0, 0));
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut x = rng.gen::<f64>() * total;
            let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap();
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 && x < *d {
                    pick = i;
                    break;
                }
                x -= d;
            }
            pick
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[next].clone());
    }

    let dim = points[0].len();
    let mut assignments = vec![usize::MAX; points.len()];
    let mut objective = Vec::new();
    for _ in 0..MAX_ROUNDS {
        let mut changed = false;
        let mut wcss = 0.0;
        for (p, a) in points.iter().zip(assignments.iter_mut()) {
            let (c, d) = nearest(p, &centroids);
            wcss += d;
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        objective.push(wcss);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    KMeans {
        assignments,
        centroids,
        objective,
    }
}

/// Key-value blocks of the user's last few interactions, with reviews.
pub fn profile_text(corpus: &Corpus, user: usize) -> String {
    let hist = &corpus.users()[user].history;
    let start = hist.len().saturating_sub(PROFILE_HISTORY);
    hist[start..]
        .iter()
        .map(|&i| {
            let inter = &corpus.interactions()[i];
            format_item(&corpus.items()[inter.item], Some(&inter.explanation))
        })
        .collect::<Vec<_>>()
        .join(",\n")
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserClusters {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

/// Groups users by the embeddings of their profile texts.
pub fn cluster_users(
    corpus: &Corpus,
    clusters: usize,
    embedder: &dyn Embedder,
    seed: u64,
) -> Result<UserClusters, PromptError> {
    let n = corpus.users().len();
    if n < clusters || clusters == 0 {
        return Err(PromptError::TooFewUsers {
            needed: clusters.max(1),
            got: n,
        });
    }
    let texts: Vec<String> = (0..n).map(|u| profile_text(corpus, u)).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let points = embedder.embed_batch(&refs)?;
    let km = kmeans(&points, clusters, seed);
    Ok(UserClusters {
        assignments: km.assignments,
        centroids: km.centroids,
    })
}
