//! Autoregressive decoding.
//!
//! A causally masked linear-attention layer is an RNN with two hidden
//! states: the attention memory `S = Σ φ(k) vᵀ` (C×M) and the normalizer
//! memory `z = Σ φ(k)` (C). Each step costs O(C·M) regardless of how many
//! tokens came before. Softmax attention has no such state; the
//! [`KvCache`] baseline keeps every past key and value, so step `t`
//! costs Θ(t).

use std::fmt;
use std::str::FromStr;

use crate::attention::{read_state, write_state, FeatureMap, NORMALIZER_EPS};
use crate::error::{shape_err, Error, Result};
use crate::matrix::{axpy, dot, matmul, softmax_in_place, Matrix, Real};
use crate::model::{layer_norm_rows, sinusoidal_position, TransformerModel};

/// Hidden state of one linear-attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T: Real = f64> {
    s: Matrix<T>,
    z: Vec<T>,
    t: usize,
}

/// A zeroed state for `C`-dimensional features and `M`-dimensional values.
pub fn init_state<T: Real>(feature_dim: usize, value_dim: usize) -> Result<RecurrentState<T>> {
    if feature_dim == 0 || value_dim == 0 {
        return Err(Error::Invalid("state dimensions must be positive".into()));
    }
    Ok(RecurrentState {
        s: Matrix::zeros(feature_dim, value_dim),
        z: vec![T::zero(); feature_dim],
        t: 0,
    })
}

impl<T: Real> RecurrentState<T> {
    pub fn new(feature_dim: usize, value_dim: usize) -> Result<Self> {
        init_state(feature_dim, value_dim)
    }

    /// Attention memory (C×M).
    pub fn memory(&self) -> &Matrix<T> {
        &self.s
    }

    /// Normalizer memory (C).
    pub fn normalizer(&self) -> &[T] {
        &self.z
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn feature_dim(&self) -> usize {
        self.s.rows()
    }

    pub fn value_dim(&self) -> usize {
        self.s.cols()
    }

    /// Bytes held by the state; independent of how many steps were taken.
    pub fn byte_size(&self) -> usize {
        self.s.byte_size() + self.z.len() * std::mem::size_of::<T>() + std::mem::size_of::<usize>()
    }

    /// Feeds one (query, key, value) triple through the feature map and
    /// returns the attention output for this position.
    pub fn step(&mut self, q: &[T], k: &[T], v: &[T], fmap: &FeatureMap) -> Result<Vec<T>> {
        if fmap.output_dim() != self.feature_dim() {
            return shape_err(
                "linear_step",
                format!(
                    "feature map produces {} features, state holds {}",
                    fmap.output_dim(),
                    self.feature_dim()
                ),
            );
        }
        let qf = fmap.apply(q)?;
        let kf = fmap.apply(k)?;
        let mut y = vec![T::zero(); self.value_dim()];
        self.step_features(&qf, &kf, v, &mut y)?;
        Ok(y)
    }

    /// Step on already feature-mapped inputs, writing into `out`. Does not
    /// allocate.
    pub fn step_features(&mut self, qf: &[T], kf: &[T], v: &[T], out: &mut [T]) -> Result<()> {
        let (c, m) = (self.feature_dim(), self.value_dim());
        if qf.len() != c || kf.len() != c || v.len() != m || out.len() != m {
            return shape_err(
                "linear_step",
                format!(
                    "state is {c}x{m}, got features {}/{}, value {}, output {}",
                    qf.len(),
                    kf.len(),
                    v.len(),
                    out.len()
                ),
            );
        }
        write_state(self.s.data_mut(), &mut self.z, kf, v);
        let den = read_state(self.s.data(), &self.z, qf, out) + T::lit(NORMALIZER_EPS);
        out.iter_mut().for_each(|x| *x /= den);
        self.t += 1;
        Ok(())
    }

    /// Copies another state of the same shape into this one.
    pub fn restore_from(&mut self, other: &Self) {
        self.s.data_mut().copy_from_slice(other.s.data());
        self.z.copy_from_slice(&other.z);
        self.t = other.t;
    }
}

/// `S′ = S + φ(k)vᵀ`, `z′ = z + φ(k)`, `y = φ(q)ᵀS′ / (φ(q)·z′ + ε)`.
pub fn linear_step<T: Real>(
    state: &mut RecurrentState<T>,
    q: &[T],
    k: &[T],
    v: &[T],
    fmap: &FeatureMap,
) -> Result<Vec<T>> {
    state.step(q, k, v, fmap)
}

/// Stored keys and values of every past position (stateful softmax).
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<T: Real = f64> {
    key_dim: usize,
    value_dim: usize,
    keys: Vec<T>,
    values: Vec<T>,
    scores: Vec<T>,
}

impl<T: Real> KvCache<T> {
    pub fn new(key_dim: usize, value_dim: usize) -> Self {
        Self {
            key_dim,
            value_dim,
            keys: Vec::new(),
            values: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.key_dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, j: usize) -> &[T] {
        &self.keys[j * self.key_dim..(j + 1) * self.key_dim]
    }

    pub fn value(&self, j: usize) -> &[T] {
        &self.values[j * self.value_dim..(j + 1) * self.value_dim]
    }

    /// Drops every position from `len` on.
    pub fn truncate(&mut self, len: usize) {
        self.keys.truncate(len * self.key_dim);
        self.values.truncate(len * self.value_dim);
    }

    /// Bytes held by the cached keys and values.
    pub fn byte_size(&self) -> usize {
        (self.keys.len() + self.values.len()) * std::mem::size_of::<T>()
    }

    /// Appends `(k, v)` and attends from `q` over everything cached.
    pub fn step(&mut self, q: &[T], k: &[T], v: &[T]) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.value_dim];
        self.step_into(q, k, v, &mut out)?;
        Ok(out)
    }

    pub fn step_into(&mut self, q: &[T], k: &[T], v: &[T], out: &mut [T]) -> Result<()> {
        if q.len() != self.key_dim
            || k.len() != self.key_dim
            || v.len() != self.value_dim
            || out.len() != self.value_dim
        {
            return shape_err(
                "kv_cache_step",
                format!(
                    "cache is D={} M={}, got q {} k {} v {} out {}",
                    self.key_dim,
                    self.value_dim,
                    q.len(),
                    k.len(),
                    v.len(),
                    out.len()
                ),
            );
        }
        self.keys.extend_from_slice(k);
        self.values.extend_from_slice(v);
        let n = self.len();
        let scale = T::one() / T::lit(self.key_dim as f64).sqrt();
        self.scores.clear();
        for j in 0..n {
            let kj = &self.keys[j * self.key_dim..(j + 1) * self.key_dim];
            self.scores.push(dot(q, kj) * scale);
        }
        softmax_in_place(&mut self.scores);
        out.fill(T::zero());
        for (j, &p) in self.scores.iter().enumerate() {
            axpy(p, &self.values[j * self.value_dim..(j + 1) * self.value_dim], out);
        }
        Ok(())
    }
}

pub fn kv_cache_step<T: Real>(cache: &mut KvCache<T>, q: &[T], k: &[T], v: &[T]) -> Result<Vec<T>> {
    cache.step(q, k, v)
}

/// Output for the last of `n` positions when causal softmax attention is
/// recomputed from scratch, as a decoder without any cache would do.
/// Builds the full n×n score matrix.
pub fn naive_recompute_step<T: Real>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<Vec<T>> {
    let mut out = Matrix::zeros(q.rows(), v.cols());
    crate::attention::softmax_attention_forward_into(q, k, v, true, &mut out)?;
    Ok(out.row(q.rows().saturating_sub(1)).to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecodeMode {
    /// Constant-size recurrent state per head (linear attention only).
    LinearRnn,
    /// Cached keys and values (softmax attention only).
    KvCache,
    /// Full causal forward pass over the whole prefix at every step.
    NaiveRecompute,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LinearRnn => "linear-rnn",
            Self::KvCache => "kv-cache",
            Self::NaiveRecompute => "naive-recompute",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-rnn" => Ok(Self::LinearRnn),
            "kv-cache" => Ok(Self::KvCache),
            "naive-recompute" => Ok(Self::NaiveRecompute),
            other => Err(Error::Parse(format!("unknown decode mode `{other}`"))),
        }
    }
}

enum HeadMemory {
    Linear(Vec<Vec<RecurrentState>>),
    Cache(Vec<Vec<KvCache>>),
    Tokens(Vec<usize>),
}

/// Per-sequence decoding state for a [`TransformerModel`]: one
/// recurrent state (or cache) per head per layer.
pub struct DecodingSession<'m> {
    model: &'m TransformerModel,
    mode: DecodeMode,
    memory: HeadMemory,
    position: usize,
}

impl<'m> DecodingSession<'m> {
    pub fn new(model: &'m TransformerModel, mode: DecodeMode) -> Result<Self> {
        let cfg = &model.config;
        let memory = match mode {
            DecodeMode::LinearRnn => {
                let Some(kind) = cfg.attention.feature_map() else {
                    return Err(Error::Invalid(format!(
                        "linear-rnn decoding needs linear attention, model uses {}",
                        cfg.attention
                    )));
                };
                let c = FeatureMap::new(kind, cfg.head_dim).output_dim();
                let per_layer = (0..cfg.heads)
                    .map(|_| init_state(c, cfg.value_dim))
                    .collect::<Result<Vec<_>>>()?;
                HeadMemory::Linear(vec![per_layer; cfg.layers])
            }
            DecodeMode::KvCache => {
                if cfg.attention.is_linear() {
                    return Err(Error::Invalid(format!(
                        "kv-cache decoding needs softmax attention, model uses {}",
                        cfg.attention
                    )));
                }
                let per_layer = vec![KvCache::new(cfg.head_dim, cfg.value_dim); cfg.heads];
                HeadMemory::Cache(vec![per_layer; cfg.layers])
            }
            DecodeMode::NaiveRecompute => HeadMemory::Tokens(Vec::new()),
        };
        Ok(Self {
            model,
            mode,
            memory,
            position: 0,
        })
    }

    pub fn mode(&self) -> DecodeMode {
        self.mode
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Bytes of per-sequence memory currently held.
    pub fn state_bytes(&self) -> usize {
        match &self.memory {
            HeadMemory::Linear(l) => l.iter().flatten().map(RecurrentState::byte_size).sum(),
            HeadMemory::Cache(c) => c.iter().flatten().map(KvCache::byte_size).sum(),
            HeadMemory::Tokens(t) => t.len() * std::mem::size_of::<usize>(),
        }
    }

    /// Consumes one token and returns next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let cfg = &self.model.config;
        if token >= cfg.vocab_size {
            return Err(Error::Invalid(format!(
                "token id {token} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let pos = self.position;
        self.position += 1;
        if let HeadMemory::Tokens(tokens) = &mut self.memory {
            tokens.push(token);
            let logits = self.model.logits(tokens)?;
            return Ok(logits.row(logits.rows() - 1).to_vec());
        }

        let model = self.model;
        let mut x = Matrix::row_vector(model.embedding.row(token));
        axpy(1.0, &sinusoidal_position(pos, cfg.model_dim), x.row_mut(0));
        let (d, m) = (cfg.head_dim, cfg.value_dim);
        let fmap = cfg.attention.feature_map().map(|k| FeatureMap::new(k, d));
        for (l, p) in model.layers.iter().enumerate() {
            let a_in = if cfg.layer_norm {
                layer_norm_rows(&x, &p.ln1_gain, &p.ln1_bias)
            } else {
                x.clone()
            };
            let q = matmul(&a_in, &p.w_q)?;
            let k = matmul(&a_in, &p.w_k)?;
            let v = matmul(&a_in, &p.w_v)?;
            let mut cat = Matrix::zeros(1, cfg.heads * m);
            for h in 0..cfg.heads {
                let qh = &q.row(0)[h * d..(h + 1) * d];
                let kh = &k.row(0)[h * d..(h + 1) * d];
                let vh = &v.row(0)[h * m..(h + 1) * m];
                let y = match &mut self.memory {
                    HeadMemory::Linear(states) => {
                        let fm = fmap.as_ref().expect("checked at construction");
                        states[l][h].step(qh, kh, vh, fm)?
                    }
                    HeadMemory::Cache(caches) => caches[l][h].step(qh, kh, vh)?,
                    HeadMemory::Tokens(_) => unreachable!(),
                };
                cat.row_mut(0)[h * m..(h + 1) * m].copy_from_slice(&y);
            }
            let attn = matmul(&cat, &p.w_o)?;
            let hidden_in = x.add(&attn)?;
            let f_in = if cfg.layer_norm {
                layer_norm_rows(&hidden_in, &p.ln2_gain, &p.ln2_bias)
            } else {
                hidden_in.clone()
            };
            let mut hidden = matmul(&f_in, &p.ffn_w1)?;
            axpy(1.0, p.ffn_b1.row(0), hidden.row_mut(0));
            let hidden = hidden.map(|e| e.max(0.0));
            let mut ffn = matmul(&hidden, &p.ffn_w2)?;
            axpy(1.0, p.ffn_b2.row(0), ffn.row_mut(0));
            x = hidden_in.add(&ffn)?;
        }
        if cfg.layer_norm {
            x = layer_norm_rows(&x, &model.final_gain, &model.final_bias);
        }
        let mut logits = matmul(&x, &model.head_w)?;
        axpy(1.0, model.head_b.row(0), logits.row_mut(0));
        Ok(logits.into_vec())
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prefix` by `steps` tokens. Returns the prefix
/// followed by the generated tokens.
pub fn generate(
    model: &TransformerModel,
    prefix: &[usize],
    steps: usize,
    mode: DecodeMode,
) -> Result<Vec<usize>> {
    let vocab = model.config.vocab_size;
    if let Some(&bad) = prefix.iter().find(|&&t| t >= vocab) {
        return Err(Error::Invalid(format!(
            "token id {bad} outside vocabulary of {vocab}"
        )));
    }
    let mut out = prefix.to_vec();
    if steps == 0 {
        return Ok(out);
    }
    if prefix.is_empty() {
        return Err(Error::Invalid("generation needs a non-empty prefix".into()));
    }
    let mut session = DecodingSession::new(model, mode)?;
    let mut logits = Vec::new();
    for &t in prefix {
        logits = session.step(t)?;
    }
    for i in 0..steps {
        let next = argmax(&logits);
        out.push(next);
        if i + 1 < steps {
            logits = session.step(next)?;
        }
    }
    Ok(out)
}
