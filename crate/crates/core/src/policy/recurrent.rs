//! Elman-style recurrent explanation generator with a rating head.
//!
//! ```text
//! s_0 = tanh(W_u·u + W_v·v)
//! s_t = tanh(W_s·s_{t-1} + W_e·e(y_{t-1}) + b)        y_0 = <bos>
//! p_t = softmax(W_o·s_t + b_o)
//! r̂   = w_r · tanh(W_r·[u; v]) + b_r
//! ```
//!
//! All parameters live in one flat vector; gradients are computed by hand
//! (backpropagation through time) into the same layout.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use super::{ExplanationPolicy, SampledExplanation};
use crate::corpus::{TokenId, Vocabulary, MAX_EXPLANATION_LEN};
use crate::exec::{stream_id, stream_rng, SeedRng};

const BOS_ID: TokenId = 1;
const EOS_ID: TokenId = 2;
const INIT_RANGE: f64 = 0.1;
const CHECKPOINT_FORMAT: &str = "explainrl-recurrent-policy";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub users: usize,
    pub items: usize,
    pub vocab: usize,
    pub dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layout {
    user_emb: usize,
    item_emb: usize,
    tok_emb: usize,
    w_s: usize,
    w_e: usize,
    b_s: usize,
    w_u: usize,
    w_v: usize,
    w_o: usize,
    b_o: usize,
    w_r: usize,
    w_rv: usize,
    b_r: usize,
    total: usize,
}

impl Layout {
    fn new(d: &ModelDims) -> Self {
        let shapes = array_shapes(d);
        let mut offsets = [0usize; 13];
        let mut off = 0;
        for (i, (_, shape)) in shapes.iter().enumerate() {
            offsets[i] = off;
            off += shape.iter().product::<usize>();
        }
        let [user_emb, item_emb, tok_emb, w_s, w_e, b_s, w_u, w_v, w_o, b_o, w_r, w_rv, b_r] = offsets;
        Layout {
            user_emb,
            item_emb,
            tok_emb,
            w_s,
            w_e,
            b_s,
            w_u,
            w_v,
            w_o,
            b_o,
            w_r,
            w_rv,
            b_r,
            total: off,
        }
    }
}

fn array_shapes(d: &ModelDims) -> [(&'static str, Vec<usize>); 13] {
    let k = d.dim;
    [
        ("user_emb", vec![d.users, k]),
        ("item_emb", vec![d.items, k]),
        ("tok_emb", vec![d.vocab, k]),
        ("w_s", vec![k, k]),
        ("w_e", vec![k, k]),
        ("b_s", vec![k]),
        ("w_u", vec![k, k]),
        ("w_v", vec![k, k]),
        ("w_o", vec![d.vocab, k]),
        ("b_o", vec![d.vocab]),
        ("w_r", vec![k, 2 * k]),
        ("w_rv", vec![k]),
        ("b_r", vec![1]),
    ]
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    dims: ModelDims,
    seed: u64,
    arrays: Vec<NamedArray>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vocabulary>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentPolicy {
    dims: ModelDims,
    seed: u64,
    layout: Layout,
    params: Vec<f64>,
}

/// Activations kept from a teacher-forced forward pass.
struct SeqCache {
    /// `s_0 ..= s_L`, row-major `(L + 1) × d`.
    states: Vec<f64>,
    /// Softmax outputs for steps `1 ..= L`, row-major `L × V`.
    probs: Vec<f64>,
    log_prob: f64,
}

impl RecurrentPolicy {
    /// Uniform `[-0.1, 0.1]` initialization, deterministic per seed.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        assert!(dims.dim >= 1, "embedding dimension must be >= 1");
        assert!(
            dims.vocab > EOS_ID as usize,
            "vocabulary must contain the special tokens"
        );
        let layout = Layout::new(&dims);
        let mut rng = stream_rng(seed, stream_id(3, 0, 0));
        let params = (0..layout.total)
            .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
            .collect();
        RecurrentPolicy {
            dims,
            seed,
            layout,
            params,
        }
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Named view of one parameter array, for inspection and tests.
    pub fn array(&self, name: &str) -> Option<(&[f64], Vec<usize>)> {
        let shapes = array_shapes(&self.dims);
        let mut off = 0;
        for (n, shape) in shapes {
            let len: usize = shape.iter().product();
            if n == name {
                return Some((&self.params[off..off + len], shape));
            }
            off += len;
        }
        None
    }

    pub fn array_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let shapes = array_shapes(&self.dims);
        let mut off = 0;
        for (n, shape) in shapes {
            let len: usize = shape.iter().product();
            if n == name {
                return Some(&mut self.params[off..off + len]);
            }
            off += len;
        }
        None
    }

    pub fn save(&self, path: &Path, vocab: Option<&Vocabulary>) -> Result<(), CheckpointError> {
        let mut arrays = Vec::new();
        for (name, shape) in array_shapes(&self.dims) {
            let (data, _) = self.array(name).unwrap();
            arrays.push(NamedArray {
                name: name.to_string(),
                shape,
                data: data.to_vec(),
            });
        }
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: 1,
            dims: self.dims,
            seed: self.seed,
            arrays,
            vocab: vocab.cloned(),
        };
        let w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(w, &file)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Option<Vocabulary>), CheckpointError> {
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        let file: CheckpointFile = serde_json::from_reader(r)?;
        if file.format != CHECKPOINT_FORMAT || file.version != 1 {
            return Err(CheckpointError::Mismatch(format!(
                "unsupported format {} v{}",
                file.format, file.version
            )));
        }
        if let Some(v) = &file.vocab {
            if v.len() != file.dims.vocab {
                return Err(CheckpointError::Mismatch(format!(
                    "vocabulary has {} tokens, dims say {}",
                    v.len(),
                    file.dims.vocab
                )));
            }
        }
        let expected = array_shapes(&file.dims);
        if file.arrays.len() != expected.len() {
            return Err(CheckpointError::Mismatch(format!(
                "expected {} arrays, found {}",
                expected.len(),
                file.arrays.len()
            )));
        }
        let layout = Layout::new(&file.dims);
        let mut params = Vec::with_capacity(layout.total);
        for (arr, (name, shape)) in file.arrays.iter().zip(expected.iter()) {
            if arr.name != *name || arr.shape != *shape || arr.data.len() != shape.iter().product::<usize>() {
                return Err(CheckpointError::Mismatch(format!(
                    "array {} has unexpected name or shape",
                    arr.name
                )));
            }
            params.extend_from_slice(&arr.data);
        }
        Ok((
            RecurrentPolicy {
                dims: file.dims,
                seed: file.seed,
                layout,
                params,
            },
            file.vocab,
        ))
    }

    fn user_emb(&self, u: usize) -> &[f64] {
        let d = self.dims.dim;
        &self.params[self.layout.user_emb + u * d..][..d]
    }

    fn item_emb(&self, v: usize) -> &[f64] {
        let d = self.dims.dim;
        &self.params[self.layout.item_emb + v * d..][..d]
    }

    fn tok_emb(&self, t: TokenId) -> &[f64] {
        let d = self.dims.dim;
        &self.params[self.layout.tok_emb + t as usize * d..][..d]
    }

    fn mat(&self, off: usize, len: usize) -> &[f64] {
        &self.params[off..off + len]
    }

    fn initial_state(&self, u: usize, v: usize, out: &mut [f64]) {
        let d = self.dims.dim;
        let l = &self.layout;
        matvec(self.mat(l.w_u, d * d), d, d, self.user_emb(u), out);
        matvec_add(self.mat(l.w_v, d * d), d, d, self.item_emb(v), out);
        out.iter_mut().for_each(|x| *x = x.tanh());
    }

    fn next_state(&self, prev: &[f64], input: TokenId, out: &mut [f64]) {
        let d = self.dims.dim;
        let l = &self.layout;
        out.copy_from_slice(self.mat(l.b_s, d));
        matvec_add(self.mat(l.w_s, d * d), d, d, prev, out);
        matvec_add(self.mat(l.w_e, d * d), d, d, self.tok_emb(input), out);
        out.iter_mut().for_each(|x| *x = x.tanh());
    }

    fn logits(&self, state: &[f64], out: &mut [f64]) {
        let (d, vsz) = (self.dims.dim, self.dims.vocab);
        out.copy_from_slice(self.mat(self.layout.b_o, vsz));
        matvec_add(self.mat(self.layout.w_o, vsz * d), vsz, d, state, out);
    }

    fn forward(&self, u: usize, v: usize, tokens: &[TokenId]) -> SeqCache {
        let (d, vsz) = (self.dims.dim, self.dims.vocab);
        let n = tokens.len();
        let mut states = vec![0.0; (n + 1) * d];
        let mut probs = vec![0.0; n * vsz];
        self.initial_state(u, v, &mut states[..d]);
        let mut log_prob = 0.0;
        for t in 0..n {
            let input = if t == 0 { BOS_ID } else { tokens[t - 1] };
            let (prev, next) = states.split_at_mut((t + 1) * d);
            self.next_state(&prev[t * d..], input, &mut next[..d]);
            let p = &mut probs[t * vsz..(t + 1) * vsz];
            self.logits(&next[..d], p);
            log_softmax(p);
            log_prob += p[tokens[t] as usize];
            p.iter_mut().for_each(|x| *x = x.exp());
        }
        SeqCache {
            states,
            probs,
            log_prob,
        }
    }

    /// Adds `scale * ∇ log π(tokens)` into `grad`.
    fn backward(&self, cache: &SeqCache, u: usize, v: usize, tokens: &[TokenId], scale: f64, grad: &mut [f64]) {
        let (d, vsz) = (self.dims.dim, self.dims.vocab);
        let l = self.layout;
        let mut d_next = vec![0.0; d];
        let mut d_state = vec![0.0; d];
        let mut d_logits = vec![0.0; vsz];
        for t in (0..tokens.len()).rev() {
            let s_t = &cache.states[(t + 1) * d..(t + 2) * d];
            let s_prev = &cache.states[t * d..(t + 1) * d];
            let p = &cache.probs[t * vsz..(t + 1) * vsz];
            // d log p(x_t) / d logits = onehot(x_t) - p
            for (g, &pk) in d_logits.iter_mut().zip(p) {
                *g = -scale * pk;
            }
            d_logits[tokens[t] as usize] += scale;

            outer_add(&mut grad[l.w_o..l.w_o + vsz * d], vsz, d, &d_logits, s_t);
            add_into(&mut grad[l.b_o..l.b_o + vsz], &d_logits);

            d_state.copy_from_slice(&d_next);
            matvec_t_add(self.mat(l.w_o, vsz * d), vsz, d, &d_logits, &mut d_state);
            for (g, &s) in d_state.iter_mut().zip(s_t) {
                *g *= 1.0 - s * s;
            }
            let input = if t == 0 { BOS_ID } else { tokens[t - 1] };
            outer_add(&mut grad[l.w_s..l.w_s + d * d], d, d, &d_state, s_prev);
            outer_add(&mut grad[l.w_e..l.w_e + d * d], d, d, &d_state, self.tok_emb(input));
            add_into(&mut grad[l.b_s..l.b_s + d], &d_state);
            let e_off = l.tok_emb + input as usize * d;
            matvec_t_add(self.mat(l.w_e, d * d), d, d, &d_state, &mut grad[e_off..e_off + d]);

            d_next.iter_mut().for_each(|x| *x = 0.0);
            matvec_t_add(self.mat(l.w_s, d * d), d, d, &d_state, &mut d_next);
        }
        let s0 = &cache.states[..d];
        for (g, &s) in d_next.iter_mut().zip(s0) {
            *g *= 1.0 - s * s;
        }
        outer_add(&mut grad[l.w_u..l.w_u + d * d], d, d, &d_next, self.user_emb(u));
        outer_add(&mut grad[l.w_v..l.w_v + d * d], d, d, &d_next, self.item_emb(v));
        let u_off = l.user_emb + u * d;
        matvec_t_add(self.mat(l.w_u, d * d), d, d, &d_next, &mut grad[u_off..u_off + d]);
        let v_off = l.item_emb + v * d;
        matvec_t_add(self.mat(l.w_v, d * d), d, d, &d_next, &mut grad[v_off..v_off + d]);
    }

    fn rating_hidden(&self, u: usize, v: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.dims.dim;
        let mut x = Vec::with_capacity(2 * d);
        x.extend_from_slice(self.user_emb(u));
        x.extend_from_slice(self.item_emb(v));
        let mut h = vec![0.0; d];
        matvec(self.mat(self.layout.w_r, 2 * d * d), d, 2 * d, &x, &mut h);
        h.iter_mut().for_each(|z| *z = z.tanh());
        (x, h)
    }

    /// Per-step softmax distributions of a teacher-forced pass (test support).
    pub fn step_distributions(&self, u: usize, v: usize, tokens: &[TokenId]) -> Vec<Vec<f64>> {
        let cache = self.forward(u, v, tokens);
        cache.probs.chunks(self.dims.vocab).map(<[f64]>::to_vec).collect()
    }
}

impl ExplanationPolicy for RecurrentPolicy {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn sequence_log_prob(&self, user: usize, item: usize, tokens: &[TokenId]) -> f64 {
        self.forward(user, item, tokens).log_prob
    }

    fn accumulate_log_prob_grad(
        &self,
        user: usize,
        item: usize,
        tokens: &[TokenId],
        scale: f64,
        grad: &mut [f64],
    ) -> f64 {
        let cache = self.forward(user, item, tokens);
        if scale != 0.0 {
            self.backward(&cache, user, item, tokens, scale, grad);
        }
        cache.log_prob
    }

    fn sample_explanations(
        &self,
        user: usize,
        item: usize,
        count: usize,
        temperature: f64,
        rng: &mut SeedRng,
    ) -> Vec<SampledExplanation> {
        assert!(temperature > 0.0, "temperature must be positive");
        let (d, vsz) = (self.dims.dim, self.dims.vocab);
        let mut s0 = vec![0.0; d];
        self.initial_state(user, item, &mut s0);
        let mut logits = vec![0.0; vsz];
        let mut weights = vec![0.0; vsz];
        let mut state = vec![0.0; d];
        (0..count)
            .map(|_| {
                let mut tokens = Vec::with_capacity(MAX_EXPLANATION_LEN);
                let mut log_prob = 0.0;
                let mut input = BOS_ID;
                let mut prev = s0.clone();
                loop {
                    self.next_state(&prev, input, &mut state);
                    self.logits(&state, &mut logits);
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for (w, &z) in weights.iter_mut().zip(&logits) {
                        *w = ((z - max) / temperature).exp();
                        total += *w;
                    }
                    let mut x = rng.gen::<f64>() * total;
                    let mut tok = vsz - 1;
                    for (k, &w) in weights.iter().enumerate() {
                        if x < w {
                            tok = k;
                            break;
                        }
                        x -= w;
                    }
                    log_softmax(&mut logits);
                    log_prob += logits[tok];
                    tokens.push(tok as TokenId);
                    if tok as TokenId == EOS_ID || tokens.len() >= MAX_EXPLANATION_LEN {
                        break;
                    }
                    input = tok as TokenId;
                    std::mem::swap(&mut prev, &mut state);
                }
                SampledExplanation { tokens, log_prob }
            })
            .collect()
    }

    fn greedy_decode(&self, user: usize, item: usize) -> Vec<TokenId> {
        let (d, vsz) = (self.dims.dim, self.dims.vocab);
        let mut prev = vec![0.0; d];
        self.initial_state(user, item, &mut prev);
        let mut state = vec![0.0; d];
        let mut logits = vec![0.0; vsz];
        let mut tokens = Vec::with_capacity(MAX_EXPLANATION_LEN);
        let mut input = BOS_ID;
        loop {
            self.next_state(&prev, input, &mut state);
            self.logits(&state, &mut logits);
            let mut best = 0;
            for k in 1..vsz {
                if logits[k] > logits[best] {
                    best = k;
                }
            }
            tokens.push(best as TokenId);
            if best as TokenId == EOS_ID || tokens.len() >= MAX_EXPLANATION_LEN {
                return tokens;
            }
            input = best as TokenId;
            std::mem::swap(&mut prev, &mut state);
        }
    }

    fn raw_rating(&self, user: usize, item: usize) -> f64 {
        let d = self.dims.dim;
        let (_, h) = self.rating_hidden(user, item);
        let w = self.mat(self.layout.w_rv, d);
        dot(w, &h) + self.params[self.layout.b_r]
    }

    fn accumulate_rating_grad(&self, user: usize, item: usize, target: f64, scale: f64, grad: &mut [f64]) -> f64 {
        let d = self.dims.dim;
        let l = self.layout;
        let (x, h) = self.rating_hidden(user, item);
        let w = self.mat(l.w_rv, d);
        let err = dot(w, &h) + self.params[l.b_r] - target;
        let g = scale * 2.0 * err;
        for (gw, &hk) in grad[l.w_rv..l.w_rv + d].iter_mut().zip(&h) {
            *gw += g * hk;
        }
        grad[l.b_r] += g;
        let d_pre: Vec<f64> = w.iter().zip(&h).map(|(&wk, &hk)| g * wk * (1.0 - hk * hk)).collect();
        outer_add(&mut grad[l.w_r..l.w_r + 2 * d * d], d, 2 * d, &d_pre, &x);
        let mut dx = vec![0.0; 2 * d];
        matvec_t_add(self.mat(l.w_r, 2 * d * d), d, 2 * d, &d_pre, &mut dx);
        add_into(&mut grad[l.user_emb + user * d..][..d], &dx[..d]);
        add_into(&mut grad[l.item_emb + item * d..][..d], &dx[d..]);
        err * err
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = W x` for row-major `W` of shape `rows × cols`.
fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        out[i] = dot(&w[i * cols..(i + 1) * cols], x);
    }
}

fn matvec_add(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        out[i] += dot(&w[i * cols..(i + 1) * cols], x);
    }
}

/// `out += Wᵀ y`.
fn matvec_t_add(w: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        let yi = y[i];
        if yi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *o += wij * yi;
        }
    }
}

/// `g += a bᵀ`.
fn outer_add(g: &mut [f64], rows: usize, cols: usize, a: &[f64], b: &[f64]) {
    for i in 0..rows {
        let ai = a[i];
        if ai == 0.0 {
            continue;
        }
        for (gij, &bj) in g[i * cols..(i + 1) * cols].iter_mut().zip(b) {
            *gij += ai * bj;
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn log_softmax(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    z.iter_mut().for_each(|x| *x -= lse);
}
