//! Reward providers scoring explanations on informativeness and
//! persuasiveness.
//!
//! [`SimulatedProvider`] is a deterministic rubric over item features and a
//! persuasion lexicon. [`RemoteProvider`] asks a chat-completions endpoint and
//! parses the JSON it replies with.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;

use crate::corpus::{mentions, tokenize_words, Item};
use crate::remote::{Backoff, HttpTransport, InflightLimiter, JsonTransport, TransportError};

pub const MIN_SCORE: f64 = 1.0;
pub const MAX_SCORE: f64 = 3.0;

const DEFAULT_LEXICON: &str = include_str!("../assets/persuasion_lexicon.txt");

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("could not parse reward reply: {0}")]
    Parse(String),
    #[error("reward unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("persuasion lexicon is empty")]
    EmptyLexicon,
    #[error("reading lexicon {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} requires a prompt")]
    MissingPrompt(&'static str),
}

/// Multi-perspective scores two perspectives; holistic scores one overall
/// quality.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    #[default]
    MultiPerspective,
    Holistic,
}

impl RewardMode {
    pub fn num_objectives(self) -> usize {
        match self {
            RewardMode::MultiPerspective => 2,
            RewardMode::Holistic => 1,
        }
    }

    pub fn names(self) -> &'static [&'static str] {
        match self {
            RewardMode::MultiPerspective => &["info", "persv"],
            RewardMode::Holistic => &["holistic"],
        }
    }
}

/// Per-perspective values. Holds rewards in [1, 3] or, after advantage
/// replacement, centered advantages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RewardVector {
    Perspectives { info: f64, persv: f64 },
    Holistic { holistic: f64 },
}

impl RewardVector {
    pub fn mode(&self) -> RewardMode {
        match self {
            RewardVector::Perspectives { .. } => RewardMode::MultiPerspective,
            RewardVector::Holistic { .. } => RewardMode::Holistic,
        }
    }

    pub fn components(&self) -> Vec<f64> {
        match *self {
            RewardVector::Perspectives { info, persv } => vec![info, persv],
            RewardVector::Holistic { holistic } => vec![holistic],
        }
    }

    pub fn component(&self, i: usize) -> f64 {
        match (*self, i) {
            (RewardVector::Perspectives { info, .. }, 0) => info,
            (RewardVector::Perspectives { persv, .. }, 1) => persv,
            (RewardVector::Holistic { holistic }, 0) => holistic,
            _ => panic!("component {i} out of range for {:?}", self.mode()),
        }
    }

    pub fn from_components(mode: RewardMode, c: &[f64]) -> Self {
        match mode {
            RewardMode::MultiPerspective => RewardVector::Perspectives {
                info: c[0],
                persv: c[1],
            },
            RewardMode::Holistic => RewardVector::Holistic { holistic: c[0] },
        }
    }

    /// Sum of components, the scalar used for probe-set summaries.
    pub fn combined(&self) -> f64 {
        self.components().iter().sum()
    }

    /// Clamps every component to [1, 3], warning when anything moved.
    pub fn clamped(self) -> Self {
        let c = self.components();
        let fixed: Vec<f64> = c.iter().map(|x| x.clamp(MIN_SCORE, MAX_SCORE)).collect();
        if fixed != c {
            log::warn!("reward {c:?} outside [1, 3], clamped");
        }
        RewardVector::from_components(self.mode(), &fixed)
    }

    /// The reply format the reward prompt asks the judge for.
    pub fn to_reply_json(&self) -> String {
        match *self {
            RewardVector::Perspectives { info, persv } => {
                json!({"Informativeness": info, "Persuasiveness": persv}).to_string()
            }
            RewardVector::Holistic { holistic } => json!({ "Quality": holistic }).to_string(),
        }
    }
}

/// Set of words that make an explanation persuasive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    words: BTreeSet<String>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon::parse(DEFAULT_LEXICON).expect("bundled lexicon is non-empty")
    }
}

impl Lexicon {
    /// One word per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, RewardError> {
        let words: BTreeSet<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        if words.is_empty() {
            return Err(RewardError::EmptyLexicon);
        }
        Ok(Lexicon { words })
    }

    pub fn load(path: &Path) -> Result<Self, RewardError> {
        let text = std::fs::read_to_string(path).map_err(|source| RewardError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Lexicon::parse(&text)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Rubric scores: one point plus the number of distinct item features
/// mentioned (capped at two) for informativeness, and likewise distinct
/// lexicon words for persuasiveness.
pub fn simulated_score(words: &[String], item: &Item, lexicon: &Lexicon) -> RewardVector {
    let features: BTreeSet<&str> = item
        .features
        .iter()
        .filter(|f| mentions(words, f))
        .map(String::as_str)
        .collect();
    let persuasive: BTreeSet<&str> = words
        .iter()
        .filter(|w| lexicon.contains(w))
        .map(String::as_str)
        .collect();
    RewardVector::Perspectives {
        info: 1.0 + features.len().min(2) as f64,
        persv: 1.0 + persuasive.len().min(2) as f64,
    }
}

/// Single overall score for the holistic simulator: the mean of the two
/// perspective scores, rounded half up.
pub fn simulated_holistic(words: &[String], item: &Item, lexicon: &Lexicon) -> RewardVector {
    let s = simulated_score(words, item, lexicon).combined();
    RewardVector::Holistic {
        holistic: ((s + 1.0) / 2.0).floor(),
    }
}

/// Finds the first JSON object in `text` and reads the scores of `mode` from
/// it. Keys match case-insensitively; values may be numbers or numeric
/// strings.
pub fn parse_reward_json(text: &str, mode: RewardMode) -> Result<RewardVector, RewardError> {
    let obj = first_json_object(text).ok_or_else(|| RewardError::Parse("no JSON object in reply".into()))?;
    let keys: &[&str] = match mode {
        RewardMode::MultiPerspective => &["informativeness", "persuasiveness"],
        RewardMode::Holistic => &["quality"],
    };
    let mut vals = Vec::with_capacity(keys.len());
    for key in keys {
        let v = get_ci(&obj, key).ok_or_else(|| RewardError::Parse(format!("missing key {key:?}")))?;
        vals.push(numeric(v).ok_or_else(|| RewardError::Parse(format!("non-numeric value for {key:?}: {v}")))?);
    }
    Ok(RewardVector::from_components(mode, &vals))
}

/// Scans for `{` and returns the first position that begins a complete JSON
/// object.
pub fn first_json_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    all_json_objects(text).into_iter().next()
}

/// Every top-level JSON object embedded in `text`, in order. Objects nested
/// in arrays are yielded individually.
pub fn all_json_objects(text: &str) -> Vec<serde_json::Map<String, Value>> {
    let mut out = Vec::new();
    let mut i = 0;
    while let Some(off) = text[i..].find(['{', '[']) {
        let start = i + off;
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => {
                out.push(map);
                i = start + stream.byte_offset();
            }
            Some(Ok(Value::Array(items))) => {
                out.extend(items.into_iter().filter_map(|v| match v {
                    Value::Object(m) => Some(m),
                    _ => None,
                }));
                i = start + stream.byte_offset();
            }
            _ => i = start + 1,
        }
    }
    out
}

pub(crate) fn get_ci<'a>(obj: &'a serde_json::Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.iter()
        .find(|(k, _)| k.trim().eq_ignore_ascii_case(key))
        .map(|(_, v)| v)
}

pub(crate) fn numeric(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
    .filter(|x: &f64| x.is_finite())
}

/// What a provider needs to score one explanation.
pub struct ScoreRequest<'a> {
    pub words: &'a [String],
    pub item: &'a Item,
    /// Rendered reward prompt; only remote providers read it.
    pub prompt: Option<&'a str>,
}

pub trait RewardProvider: Send + Sync {
    fn mode(&self) -> RewardMode;

    /// Whether `score` reads the rendered prompt. Collection skips prompt
    /// construction when it does not.
    fn needs_prompt(&self) -> bool;

    /// Sends a few-shot context request and returns the raw reply, or `None`
    /// when the provider does not use customized contexts.
    fn customize_context(&self, request: &str) -> Result<Option<String>, RewardError>;

    fn score(&self, req: &ScoreRequest<'_>) -> Result<RewardVector, RewardError>;
}

#[derive(Clone, Debug)]
pub struct SimulatedProvider {
    pub lexicon: Lexicon,
    pub mode: RewardMode,
}

impl SimulatedProvider {
    pub fn new(lexicon: Lexicon, mode: RewardMode) -> Self {
        SimulatedProvider { lexicon, mode }
    }
}

impl Default for SimulatedProvider {
    fn default() -> Self {
        SimulatedProvider::new(Lexicon::default(), RewardMode::MultiPerspective)
    }
}

impl RewardProvider for SimulatedProvider {
    fn mode(&self) -> RewardMode {
        self.mode
    }

    fn needs_prompt(&self) -> bool {
        false
    }

    fn customize_context(&self, _request: &str) -> Result<Option<String>, RewardError> {
        Ok(None)
    }

    fn score(&self, req: &ScoreRequest<'_>) -> Result<RewardVector, RewardError> {
        Ok(match self.mode {
            RewardMode::MultiPerspective => simulated_score(req.words, req.item, &self.lexicon),
            RewardMode::Holistic => simulated_holistic(req.words, req.item, &self.lexicon),
        })
    }
}

/// Chat endpoint settings. The API key is read from `api_key_env` at
/// provider construction, never from the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatConfig {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub api_key_env: String,
}

impl Default for ChatConfig {
    fn default() -> Self {
        ChatConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            temperature: 0.0,
            max_tokens: 512,
            retries: 2,
            backoff_ms: 500,
            max_in_flight: 8,
            timeout_secs: 60,
            api_key_env: "OPENAI_API_KEY".into(),
        }
    }
}

impl ChatConfig {
    pub fn backoff(&self) -> Backoff {
        Backoff {
            retries: self.retries,
            base: Duration::from_millis(self.backoff_ms),
        }
    }
}

/// Chat-completions client used as a human simulator.
pub struct RemoteProvider {
    config: ChatConfig,
    mode: RewardMode,
    api_key: Option<String>,
    transport: Arc<dyn JsonTransport>,
    limiter: Arc<InflightLimiter>,
}

impl RemoteProvider {
    pub fn new(config: ChatConfig, mode: RewardMode) -> Self {
        let transport = Arc::new(HttpTransport::new(Duration::from_secs(config.timeout_secs)));
        Self::with_transport(config, mode, transport)
    }

    pub fn with_transport(config: ChatConfig, mode: RewardMode, transport: Arc<dyn JsonTransport>) -> Self {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::warn!(
                "{} is not set; sending requests without credentials",
                config.api_key_env
            );
        }
        let limiter = Arc::new(InflightLimiter::new(config.max_in_flight));
        RemoteProvider {
            config,
            mode,
            api_key,
            transport,
            limiter,
        }
    }

    /// Shares this provider's in-flight cap with other remote clients.
    pub fn limiter(&self) -> Arc<InflightLimiter> {
        self.limiter.clone()
    }

    pub fn with_limiter(mut self, limiter: Arc<InflightLimiter>) -> Self {
        self.limiter = limiter;
        self
    }

    fn chat_once(&self, prompt: &str) -> Result<String, TransportError> {
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        });
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let reply = {
            let _permit = self.limiter.acquire();
            self.transport.post_json(&url, self.api_key.as_deref(), &body)?
        };
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| TransportError::Decode("reply has no choices[0].message.content".into()))
    }

    /// Sends `prompt` and parses the reply, retrying transport failures and
    /// unparseable replies.
    pub fn llm_score(&self, prompt: &str) -> Result<RewardVector, RewardError> {
        self.config
            .backoff()
            .run(|_| {
                let text = self.chat_once(prompt).map_err(|e| e.to_string())?;
                parse_reward_json(&text, self.mode).map_err(|e| e.to_string())
            })
            .map(RewardVector::clamped)
            .map_err(|(last, attempts)| RewardError::Unavailable { attempts, last })
    }
}

impl RewardProvider for RemoteProvider {
    fn mode(&self) -> RewardMode {
        self.mode
    }

    fn needs_prompt(&self) -> bool {
        true
    }

    fn customize_context(&self, request: &str) -> Result<Option<String>, RewardError> {
        self.config
            .backoff()
            .run(|_| self.chat_once(request))
            .map(Some)
            .map_err(|(last, attempts)| RewardError::Unavailable {
                attempts,
                last: last.to_string(),
            })
    }

    fn score(&self, req: &ScoreRequest<'_>) -> Result<RewardVector, RewardError> {
        let prompt = req.prompt.ok_or(RewardError::MissingPrompt("remote provider"))?;
        self.llm_score(prompt)
    }
}

/// Tokenizes free text and scores it with the simulator; convenience for
/// tests and reports.
pub fn simulated_score_text(text: &str, item: &Item, lexicon: &Lexicon) -> RewardVector {
    simulated_score(&tokenize_words(text), item, lexicon)
}
