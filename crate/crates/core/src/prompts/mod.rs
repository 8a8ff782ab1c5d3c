//! Prompt construction for the remote human simulator.
//!
//! Items are rendered as key-value blocks, the user's history is narrowed to
//! the entries most similar to the target item, and each user cluster owns a
//! prototype of hand-written scoring examples. The context prompt asks the
//! judge to adapt those examples to a user-item pair; the reward prompt asks it
//! to score one candidate explanation.

mod cluster;
mod embed;

pub use cluster::{cluster_users, kmeans, profile_text, KMeans, UserClusters, PROFILE_HISTORY};
pub use embed::{cosine, retrieve_top_k, Embedder, EmbedderConfig, LocalEmbedder, RemoteEmbedder, LOCAL_DIM};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::collections::BTreeSet;
use std::path::Path;
use thiserror::Error;

use crate::corpus::Item;
use crate::rewards::{all_json_objects, get_ci, numeric, RewardMode};

const DEFAULT_PROTOTYPES: &str = include_str!("../../assets/prototypes.jsonl");

/// Customized examples requested from the judge per pair.
pub const FEWSHOT_COUNT: usize = 3;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Prototype { path: String, line: usize, message: String },
    #[error("no prototype for cluster {0}")]
    MissingPrototype(usize),
    #[error("reply contains no valid example")]
    NoValidExamples,
    #[error("embedding unavailable after {attempts} attempts: {last}")]
    EmbeddingUnavailable { attempts: u32, last: String },
    #[error("need at least {needed} users to form {needed} clusters, got {got}")]
    TooFewUsers { needed: usize, got: usize },
    #[error("template placeholder {0} left unfilled")]
    Unfilled(String),
}

/// Top-K history size and cluster count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub clusters: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { k: 5, clusters: 5 }
    }
}

/// One scored explanation with its justification.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FewShotExample {
    pub explanation: String,
    pub informativeness: u8,
    pub persuasiveness: u8,
    pub reason: String,
}

impl FewShotExample {
    /// Reads an example object; `None` when a field is missing or a score is
    /// not one of 1, 2, 3.
    pub fn from_object(obj: &Map<String, Value>) -> Option<Self> {
        let text = |keys: &[&str]| {
            keys.iter()
                .find_map(|k| get_ci(obj, k))
                .and_then(Value::as_str)
                .map(str::to_owned)
        };
        let score = |key: &str| {
            let x = numeric(get_ci(obj, key)?)?;
            [1.0, 2.0, 3.0].contains(&x).then_some(x as u8)
        };
        Some(FewShotExample {
            explanation: text(&["Explanation", "Recommendation Explanation"])?,
            informativeness: score("Informativeness")?,
            persuasiveness: score("Persuasiveness")?,
            reason: text(&["Reason"])?,
        })
    }

    /// Overall score used when rendering for the holistic rubric.
    pub fn quality(&self) -> u8 {
        (self.informativeness + self.persuasiveness).div_ceil(2)
    }

    fn render(&self, mode: RewardMode) -> String {
        let s = |x: &str| serde_json::to_string(x).unwrap();
        let scores = match mode {
            RewardMode::MultiPerspective => format!(
                "  \"Informativeness\": {},\n  \"Persuasiveness\": {},\n",
                self.informativeness, self.persuasiveness
            ),
            RewardMode::Holistic => format!("  \"Quality\": {},\n", self.quality()),
        };
        format!(
            "{{\n  \"Recommendation Explanation\": {},\n{}  \"Reason\": {}\n}}",
            s(&self.explanation),
            scores,
            s(&self.reason)
        )
    }
}

/// Hand-written scoring examples of one user cluster, optionally with the
/// history and target the examples were written for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptPrototype {
    pub cluster: usize,
    pub examples: Vec<FewShotExample>,
    pub history: Option<String>,
    pub target: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PrototypeRecord {
    cluster: usize,
    examples: Vec<Map<String, Value>>,
    #[serde(default)]
    history: Option<String>,
    #[serde(default)]
    target: Option<String>,
}

impl PromptPrototype {
    /// Prototypes bundled with the crate, one per cluster 0..5.
    pub fn defaults() -> Vec<PromptPrototype> {
        parse_prototypes(DEFAULT_PROTOTYPES, "<bundled>").expect("bundled prototypes are valid")
    }

    /// Checks that every score level appears for both perspectives.
    pub fn covers_all_levels(&self) -> bool {
        let info: BTreeSet<u8> = self.examples.iter().map(|e| e.informativeness).collect();
        let persv: BTreeSet<u8> = self.examples.iter().map(|e| e.persuasiveness).collect();
        info.len() == 3 && persv.len() == 3
    }
}

pub fn load_prototypes(path: &Path) -> Result<Vec<PromptPrototype>, PromptError> {
    let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_prototypes(&text, &path.display().to_string())
}

/// Parses the prototype JSONL format, one cluster per line.
pub fn parse_prototypes(text: &str, origin: &str) -> Result<Vec<PromptPrototype>, PromptError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| PromptError::Prototype {
            path: origin.to_string(),
            line: i + 1,
            message,
        };
        let rec: PrototypeRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let examples = rec
            .examples
            .iter()
            .enumerate()
            .map(|(j, obj)| FewShotExample::from_object(obj).ok_or_else(|| err(format!("example {j} is malformed"))))
            .collect::<Result<Vec<_>, _>>()?;
        let proto = PromptPrototype {
            cluster: rec.cluster,
            examples,
            history: rec.history,
            target: rec.target,
        };
        if !proto.covers_all_levels() {
            return Err(err("examples must cover scores 1, 2 and 3 for both perspectives".into()));
        }
        out.push(proto);
    }
    Ok(out)
}

pub fn prototype_for(prototypes: &[PromptPrototype], cluster: usize) -> Result<&PromptPrototype, PromptError> {
    prototypes
        .iter()
        .find(|p| p.cluster == cluster)
        .ok_or(PromptError::MissingPrototype(cluster))
}

/// Renders an item as a key-value block. History items pass the user's own
/// review as `explanation`.
pub fn format_item(item: &Item, explanation: Option<&str>) -> String {
    let s = |x: &str| serde_json::to_string(x).unwrap();
    let mut out = format!(
        "{{\n  \"Item Title\": {},\n  \"Item Description\": {},\n  \"Item Category\": {}",
        s(&item.title),
        s(&item.description),
        s(&item.category)
    );
    if let Some(e) = explanation {
        out.push_str(&format!(",\n  \"Recommendation Explanation\": {}", s(e)));
    }
    out.push_str("\n}");
    out
}

const CONTEXT_TEMPLATE: &str = "\
Consider the following scored examples.

A user interacted with these items, each shown with the user's own explanation:

{prototype_history}

Another item is described as follows:

{prototype_target}

Below are explanations of that item written for this user, each given two scores from 1 to 3 according to

{rubric}

[
{examples}
]

A new user has interacted with these items:

{history}

The target item is described as follows:

{target}

Following the examples above, write three explanations of the target item for this new user, each with its scores and the reason for them.

**IMPORTANT NOTE**

1. Every output object MUST follow this format:

{format}

2. The generated examples must cover all score levels, that is 1, 2 and 3.

3. Output the results directly, with no extra reasoning.
";

const REWARD_TEMPLATE: &str = "\
Act as an explainable recommender system that writes explanations helping a user see why an item was recommended.

A user has interacted with these items:

{history}

The target item is described as follows:

{target}

Below are explanations of the target item for this user, scored from 1 to 3 according to

{rubric}

### Example BEGIN ###

{examples}

### Example END ###

Here is a new recommendation explanation:

{candidate}

Learn from the examples above and evaluate the new explanation.

**IMPORTANT NOTES**

1. The output format MUST be:

{format}
{independence}";

const RUBRIC: &str = "\
a. Informativeness: Help user learn more about the item being recommended;

b. Persuasiveness: Make the user feel like buying the item.";

const HOLISTIC_RUBRIC: &str = "\
a. Quality: How good the explanation is overall, as a reason for this user to consider the item.";

const CONTEXT_FORMAT: &str = "\
{
  \"Explanation\": # fewer than 15 words,
  \"Informativeness\": # [1-3],
  \"Persuasiveness\": # [1-3],
  \"Reason\": # fewer than 100 words
}";

const HOLISTIC_CONTEXT_FORMAT: &str = "\
{
  \"Explanation\": # fewer than 15 words,
  \"Quality\": # [1-3],
  \"Reason\": # fewer than 100 words
}";

const REWARD_FORMAT: &str = "\
{
  \"Informativeness\": # [1-3],
  \"Persuasiveness\": # [1-3]
}";

const HOLISTIC_REWARD_FORMAT: &str = "\
{
  \"Quality\": # [1-3]
}";

const INDEPENDENCE_NOTE: &str = "
2. Score the two perspectives independently; neither score may influence the other.
";

/// Substitutes `{name}` placeholders in one pass, so substituted text is never
/// rescanned. Unknown placeholders are an error.
pub fn render(template: &str, vars: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_lowercase() || c == '_'))
            .unwrap_or(after.len());
        if name_len > 0 && after[name_len..].starts_with('}') {
            let name = &after[..name_len];
            let value = vars
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| PromptError::Unfilled(format!("{{{name}}}")))?;
            out.push_str(value);
            rest = &after[name_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Placeholder-shaped `{lowercase_name}` fragments left in `text`.
pub fn residual_placeholders(text: &str) -> Vec<String> {
    let mut found = Vec::new();
    let bytes = text.as_bytes();
    for (i, _) in text.match_indices('{') {
        let mut j = i + 1;
        while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j] == b'_') {
            j += 1;
        }
        if j > i + 1 && j < bytes.len() && bytes[j] == b'}' {
            found.push(text[i..=j].to_string());
        }
    }
    found
}

fn rubric(mode: RewardMode) -> &'static str {
    match mode {
        RewardMode::MultiPerspective => RUBRIC,
        RewardMode::Holistic => HOLISTIC_RUBRIC,
    }
}

/// Renders retrieved history entries, each an item with the user's review.
pub fn format_history(history: &[(&Item, &str)]) -> String {
    history
        .iter()
        .map(|(item, review)| format_item(item, Some(review)))
        .collect::<Vec<_>>()
        .join(",\n")
}

fn render_examples(examples: &[FewShotExample], mode: RewardMode) -> String {
    examples.iter().map(|e| e.render(mode)).collect::<Vec<_>>().join(",\n")
}

/// The request asking the judge to adapt a cluster prototype to one user and
/// target item.
pub fn build_fewshot_context(
    prototype: &PromptPrototype,
    history: &[(&Item, &str)],
    target: &Item,
    mode: RewardMode,
) -> Result<String, PromptError> {
    let user_history = format_history(history);
    let target_block = format_item(target, None);
    let examples = render_examples(&prototype.examples, mode);
    let format = match mode {
        RewardMode::MultiPerspective => CONTEXT_FORMAT,
        RewardMode::Holistic => HOLISTIC_CONTEXT_FORMAT,
    };
    render(
        CONTEXT_TEMPLATE,
        &[
            (
                "prototype_history",
                prototype.history.as_deref().unwrap_or(&user_history),
            ),
            ("prototype_target", prototype.target.as_deref().unwrap_or(&target_block)),
            ("rubric", rubric(mode)),
            ("examples", &examples),
            ("history", &user_history),
            ("target", &target_block),
            ("format", format),
        ],
    )
}

/// The prompt asking the judge to score `candidate`.
pub fn build_reward_prompt(
    history: &[(&Item, &str)],
    target: &Item,
    examples: &[FewShotExample],
    candidate: &str,
    mode: RewardMode,
) -> Result<String, PromptError> {
    let (format, independence) = match mode {
        RewardMode::MultiPerspective => (REWARD_FORMAT, INDEPENDENCE_NOTE),
        RewardMode::Holistic => (HOLISTIC_REWARD_FORMAT, "\n"),
    };
    render(
        REWARD_TEMPLATE,
        &[
            ("history", &format_history(history)),
            ("target", &format_item(target, None)),
            ("rubric", rubric(mode)),
            ("examples", &render_examples(examples, mode)),
            ("candidate", candidate),
            ("format", format),
            ("independence", independence),
        ],
    )
}

/// Extracts valid examples from a context reply, keeping at most
/// [`FEWSHOT_COUNT`].
pub fn parse_fewshot_reply(text: &str) -> Result<Vec<FewShotExample>, PromptError> {
    let examples: Vec<FewShotExample> = all_json_objects(text)
        .iter()
        .filter_map(FewShotExample::from_object)
        .take(FEWSHOT_COUNT)
        .collect();
    if examples.is_empty() {
        return Err(PromptError::NoValidExamples);
    }
    Ok(examples)
}

/// Customized examples from a reply, or the prototype's own examples when the
/// reply yields none. The flag is true on fallback.
pub fn customized_or_prototype(reply: Option<&str>, prototype: &PromptPrototype) -> (Vec<FewShotExample>, bool) {
    match reply.map(parse_fewshot_reply) {
        Some(Ok(ex)) => (ex, false),
        Some(Err(e)) => {
            log::warn!("{e}; falling back to prototype of cluster {}", prototype.cluster);
            (prototype.examples.clone(), true)
        }
        None => (prototype.examples.clone(), true),
    }
}
