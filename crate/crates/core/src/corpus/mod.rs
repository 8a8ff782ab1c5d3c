//! Dataset schema, JSONL ingestion and train/test splitting.
//!
//! A corpus directory holds `items.jsonl` and `interactions.jsonl`. Users are
//! derived from interactions in file order, which also fixes each user's
//! history order. Splits share the user and item tables with their parent, so
//! user and item indices are valid across train and test.

mod synthetic;
mod vocab;

pub use synthetic::gen_synthetic;
pub use vocab::{detokenize, mentions, tokenize, tokenize_words, TokenId, Vocabulary, BOS, EOS, PAD, UNK};

use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Maximum explanation length in tokens, end-of-sentence included.
pub const MAX_EXPLANATION_LEN: usize = 15;

pub const ITEMS_FILE: &str = "items.jsonl";
pub const INTERACTIONS_FILE: &str = "interactions.jsonl";
pub const USERS_FILE: &str = "users.jsonl";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: integrity error: {message}")]
    Integrity {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("cannot split: user {user} has {count} interaction(s), need at least 2")]
    Split { user: String, count: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Item {
    pub item_id: String,
    pub title: String,
    pub description: String,
    pub category: String,
    pub features: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct User {
    pub user_id: String,
    /// Indices into [`Corpus::interactions`], in corpus order.
    pub history: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub explanation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InteractionRecord {
    user_id: String,
    item_id: String,
    rating: f64,
    explanation: String,
}

#[derive(Serialize)]
struct UserRecord<'a> {
    user_id: &'a str,
    history: Vec<&'a str>,
}

/// Users, items and interactions with resolved references.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    items: Vec<Item>,
    users: Vec<User>,
    interactions: Vec<Interaction>,
    categories: Vec<String>,
    item_category: Vec<usize>,
    item_index: HashMap<String, usize>,
    user_index: HashMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus from resolved parts. `user_ids` fixes the user table;
    /// histories are rebuilt from `interactions`.
    pub fn from_parts(items: Vec<Item>, user_ids: Vec<String>, interactions: Vec<Interaction>) -> Self {
        let mut categories: Vec<String> = Vec::new();
        let mut item_category = Vec::with_capacity(items.len());
        for item in &items {
            let idx = match categories.iter().position(|c| c == &item.category) {
                Some(i) => i,
                None => {
                    categories.push(item.category.clone());
                    categories.len() - 1
                }
            };
            item_category.push(idx);
        }
        let mut users: Vec<User> = user_ids
            .into_iter()
            .map(|user_id| User {
                user_id,
                history: Vec::new(),
            })
            .collect();
        for (i, inter) in interactions.iter().enumerate() {
            users[inter.user].history.push(i);
        }
        let item_index = items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.item_id.clone(), i))
            .collect();
        let user_index = users.iter().enumerate().map(|(i, u)| (u.user_id.clone(), i)).collect();
        Corpus {
            items,
            users,
            interactions,
            categories,
            item_category,
            item_index,
            user_index,
        }
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn users(&self) -> &[User] {
        &self.users
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    /// Distinct item categories in first-appearance order.
    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn item_category(&self, item: usize) -> usize {
        self.item_category[item]
    }

    pub fn item_idx(&self, item_id: &str) -> Option<usize> {
        self.item_index.get(item_id).copied()
    }

    pub fn user_idx(&self, user_id: &str) -> Option<usize> {
        self.user_index.get(user_id).copied()
    }

    /// Interactions of one user in history order.
    pub fn user_interactions(&self, user: usize) -> impl Iterator<Item = &Interaction> + '_ {
        self.users[user].history.iter().map(move |&i| &self.interactions[i])
    }

    pub fn observed_items(&self, user: usize) -> HashSet<usize> {
        self.user_interactions(user).map(|i| i.item).collect()
    }

    /// Splits off each user's last interaction as the test set.
    pub fn split_leave_last(&self) -> Result<(Corpus, Corpus), CorpusError> {
        let mut test_idx = HashSet::with_capacity(self.users.len());
        for user in &self.users {
            if user.history.len() < 2 {
                return Err(CorpusError::Split {
                    user: user.user_id.clone(),
                    count: user.history.len(),
                });
            }
            test_idx.insert(*user.history.last().unwrap());
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, inter) in self.interactions.iter().enumerate() {
            if test_idx.contains(&i) {
                test.push(inter.clone());
            } else {
                train.push(inter.clone());
            }
        }
        let ids: Vec<String> = self.users.iter().map(|u| u.user_id.clone()).collect();
        Ok((
            Corpus::from_parts(self.items.clone(), ids.clone(), train),
            Corpus::from_parts(self.items.clone(), ids, test),
        ))
    }

    /// Writes `items.jsonl`, `interactions.jsonl` and a derived `users.jsonl`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        std::fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write_jsonl(&dir.join(ITEMS_FILE), self.items.iter())?;
        let records = self.interactions.iter().map(|i| InteractionRecord {
            user_id: self.users[i.user].user_id.clone(),
            item_id: self.items[i.item].item_id.clone(),
            rating: i.rating,
            explanation: i.explanation.clone(),
        });
        write_jsonl(&dir.join(INTERACTIONS_FILE), records)?;
        let users = self.users.iter().map(|u| UserRecord {
            user_id: &u.user_id,
            history: u
                .history
                .iter()
                .map(|&i| self.items[self.interactions[i].item].item_id.as_str())
                .collect(),
        });
        write_jsonl(&dir.join(USERS_FILE), users)
    }
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for rec in records {
        serde_json::to_writer(&mut w, &rec).map_err(|e| io_err(e.into()))?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push((n + 1, rec));
    }
    Ok(out)
}

/// Loads a corpus directory and checks referential integrity.
pub fn load_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let items_path = dir.join(ITEMS_FILE);
    let inter_path = dir.join(INTERACTIONS_FILE);
    let integrity = |path: &Path, line, message: String| CorpusError::Integrity {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (line, item) in read_jsonl::<Item>(&items_path)? {
        if !seen.insert(item.item_id.clone()) {
            return Err(integrity(
                &items_path,
                line,
                format!("duplicate item_id {:?}", item.item_id),
            ));
        }
        items.push(item);
    }
    let item_index: HashMap<&str, usize> = items
        .iter()
        .enumerate()
        .map(|(i, it)| (it.item_id.as_str(), i))
        .collect();

    let mut user_ids: Vec<String> = Vec::new();
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut interactions = Vec::new();
    let mut featureless = 0usize;
    for (line, rec) in read_jsonl::<InteractionRecord>(&inter_path)? {
        let item = *item_index
            .get(rec.item_id.as_str())
            .ok_or_else(|| integrity(&inter_path, line, format!("unknown item_id {:?}", rec.item_id)))?;
        if !(1.0..=5.0).contains(&rec.rating) {
            return Err(integrity(
                &inter_path,
                line,
                format!("rating {} outside [1, 5]", rec.rating),
            ));
        }
        let words = tokenize_words(&rec.explanation);
        if words.is_empty() {
            return Err(integrity(
                &inter_path,
                line,
                "explanation has no word tokens".to_string(),
            ));
        }
        if !items[item].features.iter().any(|f| words.iter().any(|w| w == f)) {
            featureless += 1;
        }
        let user = *user_index.entry(rec.user_id.clone()).or_insert_with(|| {
            user_ids.push(rec.user_id.clone());
            user_ids.len() - 1
        });
        interactions.push(Interaction {
            user,
            item,
            rating: rec.rating,
            explanation: rec.explanation,
        });
    }
    if featureless > 0 {
        log::warn!("{featureless} explanation(s) mention none of their item's features");
    }
    Ok(Corpus::from_parts(items, user_ids, interactions))
}
