//! Replay buffer and group-relative advantages.
//!
//! Explanations sampled for the same user-item pair form a group; each
//! trajectory's advantage is its reward minus the group mean, per perspective.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

use crate::corpus::TokenId;
use crate::rewards::RewardVector;

#[derive(Debug, Error)]
pub enum BufferError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Schema { path: String, line: usize, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub user: String,
    pub item: String,
    pub tokens: Vec<TokenId>,
    pub rewards: RewardVector,
    /// Log-probability under the behavior policy that sampled it.
    pub logp_b: f64,
    pub advantages: Option<RewardVector>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvantageStats {
    pub groups: usize,
    pub excluded_singletons: usize,
}

/// Append-only trajectory store grouped by `(user, item)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayBuffer {
    trajectories: Vec<Trajectory>,
    groups: Vec<Vec<usize>>,
    index: HashMap<(String, String), usize>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: Trajectory) {
        let key = (t.user.clone(), t.item.clone());
        let g = *self.index.entry(key).or_insert_with(|| {
            self.groups.push(Vec::new());
            self.groups.len() - 1
        });
        self.groups[g].push(self.trajectories.len());
        self.trajectories.push(t);
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    /// Trajectory indices per group, in first-seen order.
    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Trajectories whose advantages have been computed.
    pub fn with_advantages(&self) -> impl Iterator<Item = (&Trajectory, &RewardVector)> {
        self.trajectories
            .iter()
            .filter_map(|t| t.advantages.as_ref().map(|a| (t, a)))
    }

    /// Sets each trajectory's advantages to its rewards minus its group's mean
    /// reward. Singleton groups are left without advantages and counted.
    pub fn group_advantages(&mut self) -> AdvantageStats {
        let mut stats = AdvantageStats::default();
        for members in &self.groups {
            if members.len() < 2 {
                stats.excluded_singletons += 1;
                for &i in members {
                    self.trajectories[i].advantages = None;
                }
                continue;
            }
            stats.groups += 1;
            let mode = self.trajectories[members[0]].rewards.mode();
            let rewards: Vec<Vec<f64>> = members
                .iter()
                .map(|&i| self.trajectories[i].rewards.components())
                .collect();
            for (&i, r) in members.iter().zip(&rewards) {
                let adv = group_relative(&rewards, r);
                self.trajectories[i].advantages = Some(RewardVector::from_components(mode, &adv));
            }
        }
        stats
    }

    /// Writes one JSON object per line.
    pub fn persist(&self, path: &Path) -> Result<(), BufferError> {
        let io = |source| BufferError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
        for t in &self.trajectories {
            serde_json::to_writer(&mut w, t).map_err(|e| io(e.into()))?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, BufferError> {
        let p = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|source| BufferError::Io {
            path: p.clone(),
            source,
        })?;
        let mut buf = ReplayBuffer::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| BufferError::Io {
                path: p.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Trajectory = serde_json::from_str(&line).map_err(|e| BufferError::Schema {
                path: p.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            buf.push(t);
        }
        Ok(buf)
    }
}

/// `r - mean(group)` per component.
pub fn group_relative(group: &[Vec<f64>], r: &[f64]) -> Vec<f64> {
    let n = group.len() as f64;
    r.iter()
        .enumerate()
        .map(|(m, x)| x - group.iter().map(|g| g[m]).sum::<f64>() / n)
        .collect()
}
