//! A small decoder-style transformer: token embedding plus sinusoidal
//! positions, `L` layers of multi-head attention and a two-layer ReLU
//! feed-forward block (each sublayer residual, optionally pre-normalized),
//! and a linear vocabulary head.
//!
//! The forward pass is written once against [`Tape`]; the plain
//! [`transformer_layer_forward`] / [`multi_head_attention`] entry points
//! run it on a throwaway tape with constant leaves.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{FeatureMap, FeatureMapKind, NORMALIZER_EPS};
use crate::error::{Error, Result};
use crate::init::{fan_in_uniform, normal_matrix};
use crate::matrix::Matrix;
use crate::tape::{NodeId, Tape};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    Softmax,
    LinearElu1,
    LinearPoly2,
}

impl AttentionKind {
    pub fn feature_map(self) -> Option<FeatureMapKind> {
        match self {
            Self::Softmax => None,
            Self::LinearElu1 => Some(FeatureMapKind::Elu1),
            Self::LinearPoly2 => Some(FeatureMapKind::Poly2),
        }
    }

    pub fn is_linear(self) -> bool {
        self.feature_map().is_some()
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Softmax => "softmax",
            Self::LinearElu1 => "linear-elu1",
            Self::LinearPoly2 => "linear-poly2",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "linear-elu1" | "linear" => Ok(Self::LinearElu1),
            "linear-poly2" => Ok(Self::LinearPoly2),
            other => Err(Error::Parse(format!("unknown attention kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub value_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Longest sequence the model is trained on. Positions are sinusoidal,
    /// so decoding past it is allowed.
    pub max_len: usize,
    pub attention: AttentionKind,
    /// Pre-normalization before each sublayer and before the head.
    pub layer_norm: bool,
    pub seed: u64,
}

impl TransformerConfig {
    /// `heads × head_dim = model_dim`, values as wide as keys, and a
    /// feed-forward width of `4 × model_dim`.
    pub fn new(
        layers: usize,
        heads: usize,
        model_dim: usize,
        vocab_size: usize,
        attention: AttentionKind,
    ) -> Self {
        let head_dim = model_dim / heads.max(1);
        Self {
            layers,
            heads,
            model_dim,
            head_dim,
            value_dim: head_dim,
            ffn_dim: 4 * model_dim,
            vocab_size,
            max_len: 128,
            attention,
            layer_norm: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.vocab_size == 0 {
            return Err(Error::Invalid("layers, heads, model_dim and vocab_size must be positive".into()));
        }
        if self.heads * self.head_dim != self.model_dim {
            return Err(Error::Invalid(format!(
                "heads ({}) × head_dim ({}) must equal model_dim ({})",
                self.heads, self.head_dim, self.model_dim
            )));
        }
        if self.value_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Invalid("value_dim and ffn_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn layer_settings(&self) -> LayerSettings {
        LayerSettings {
            attention: self.attention,
            heads: self.heads,
            layer_norm: self.layer_norm,
        }
    }
}

/// What a single layer needs to know beyond its weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSettings {
    pub attention: AttentionKind,
    pub heads: usize,
    pub layer_norm: bool,
}

/// Weights of one transformer layer. Projections are stored input-major:
/// `x (N×F) · w_q (F×H·D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ffn_w1: Matrix,
    pub ffn_b1: Matrix,
    pub ffn_w2: Matrix,
    pub ffn_b2: Matrix,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
}

impl LayerParams {
    pub fn init(config: &TransformerConfig, rng: &mut ChaCha8Rng) -> Self {
        let f = config.model_dim;
        let qk = config.heads * config.head_dim;
        let vv = config.heads * config.value_dim;
        Self {
            w_q: fan_in_uniform(rng, f, qk),
            w_k: fan_in_uniform(rng, f, qk),
            w_v: fan_in_uniform(rng, f, vv),
            w_o: fan_in_uniform(rng, vv, f),
            ffn_w1: fan_in_uniform(rng, f, config.ffn_dim),
            ffn_b1: Matrix::zeros(1, config.ffn_dim),
            ffn_w2: fan_in_uniform(rng, config.ffn_dim, f),
            ffn_b2: Matrix::zeros(1, f),
            ln1_gain: Matrix::filled(1, f, 1.0),
            ln1_bias: Matrix::zeros(1, f),
            ln2_gain: Matrix::filled(1, f, 1.0),
            ln2_bias: Matrix::zeros(1, f),
        }
    }

    pub fn heads_dims(&self, heads: usize) -> Result<(usize, usize)> {
        if heads == 0 || !self.w_q.cols().is_multiple_of(heads) || !self.w_v.cols().is_multiple_of(heads) {
            return Err(Error::Invalid(format!(
                "{heads} heads do not divide projection widths {} / {}",
                self.w_q.cols(),
                self.w_v.cols()
            )));
        }
        Ok((self.w_q.cols() / heads, self.w_v.cols() / heads))
    }

    fn tensors(&self) -> [&Matrix; 12] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 12] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }

    /// Puts every weight on the tape, as parameters or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> LayerIds {
        let mut put = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        LayerIds {
            w_q: put(&self.w_q),
            w_k: put(&self.w_k),
            w_v: put(&self.w_v),
            w_o: put(&self.w_o),
            ffn_w1: put(&self.ffn_w1),
            ffn_b1: put(&self.ffn_b1),
            ffn_w2: put(&self.ffn_w2),
            ffn_b2: put(&self.ffn_b2),
            ln1_gain: put(&self.ln1_gain),
            ln1_bias: put(&self.ln1_bias),
            ln2_gain: put(&self.ln2_gain),
            ln2_bias: put(&self.ln2_bias),
        }
    }
}

/// Tape handles of one layer's weights.
#[derive(Clone, Copy, Debug)]
pub struct LayerIds {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
    pub ffn_w1: NodeId,
    pub ffn_b1: NodeId,
    pub ffn_w2: NodeId,
    pub ffn_b2: NodeId,
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
}

impl LayerIds {
    fn all(&self) -> [NodeId; 12] {
        [
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
            self.ffn_w1,
            self.ffn_b1,
            self.ffn_w2,
            self.ffn_b2,
            self.ln1_gain,
            self.ln1_bias,
            self.ln2_gain,
            self.ln2_bias,
        ]
    }
}

/// Builds the attention sublayer on the tape: per-head projections,
/// kernel, concatenation and output projection.
pub fn multi_head_attention_tape(
    tape: &mut Tape,
    ids: &LayerIds,
    x: NodeId,
    causal: bool,
    settings: LayerSettings,
) -> Result<NodeId> {
    let heads = settings.heads;
    let (qk_width, v_width) = (tape.value(ids.w_q).cols(), tape.value(ids.w_v).cols());
    if heads == 0 || qk_width % heads != 0 || v_width % heads != 0 {
        return Err(Error::Invalid(format!(
            "{heads} heads do not divide projection widths {qk_width} / {v_width}"
        )));
    }
    let (d, m) = (qk_width / heads, v_width / heads);
    let q = tape.matmul(x, ids.w_q)?;
    let k = tape.matmul(x, ids.w_k)?;
    let v = tape.matmul(x, ids.w_v)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d, d)?;
        let kh = tape.slice_cols(k, h * d, d)?;
        let vh = tape.slice_cols(v, h * m, m)?;
        outs.push(attention_kernel_tape(tape, qh, kh, vh, causal, settings.attention)?);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    tape.matmul(cat, ids.w_o)
}

/// One head of attention on the tape.
pub fn attention_kernel_tape(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    causal: bool,
    kind: AttentionKind,
) -> Result<NodeId> {
    let Some(fm_kind) = kind.feature_map() else {
        return tape.softmax_attention(q, k, v, causal);
    };
    let fm = FeatureMap::new(fm_kind, tape.value(q).cols());
    let qf = tape.feature_map(q, fm)?;
    let kf = tape.feature_map(k, fm)?;
    let (num, z) = if causal {
        let num = tape.causal_numerator(qf, kf, v)?;
        let running = tape.cumsum_rows(kf);
        (num, tape.row_dot(qf, running)?)
    } else {
        let kv = tape.matmul_tn(kf, v)?;
        let num = tape.matmul(qf, kv)?;
        let ksum = tape.col_sum(kf);
        (num, tape.matmul_nt(qf, ksum)?)
    };
    let den = tape.add_scalar(z, NORMALIZER_EPS);
    tape.div_rows(num, den)
}

/// `h = x + A(norm(x))`, `out = h + FFN(norm(h))`; without normalization
/// the `norm` steps are the identity.
pub fn transformer_layer_tape(
    tape: &mut Tape,
    ids: &LayerIds,
    x: NodeId,
    causal: bool,
    settings: LayerSettings,
) -> Result<NodeId> {
    let a_in = if settings.layer_norm {
        tape.layer_norm(x, ids.ln1_gain, ids.ln1_bias, LAYER_NORM_EPS)?
    } else {
        x
    };
    let attn = multi_head_attention_tape(tape, ids, a_in, causal, settings)?;
    let h = tape.add(x, attn)?;
    let f_in = if settings.layer_norm {
        tape.layer_norm(h, ids.ln2_gain, ids.ln2_bias, LAYER_NORM_EPS)?
    } else {
        h
    };
    let hidden = tape.matmul(f_in, ids.ffn_w1)?;
    let hidden = tape.add_row(hidden, ids.ffn_b1)?;
    let hidden = tape.relu(hidden);
    let ffn = tape.matmul(hidden, ids.ffn_w2)?;
    let ffn = tape.add_row(ffn, ids.ffn_b2)?;
    tape.add(h, ffn)
}

/// One transformer layer applied to `x` (N×F).
pub fn transformer_layer_forward(
    params: &LayerParams,
    x: &Matrix,
    causal: bool,
    settings: LayerSettings,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let ids = params.bind(&mut tape, false);
    let xi = tape.constant(x.clone());
    let out = transformer_layer_tape(&mut tape, &ids, xi, causal, settings)?;
    Ok(tape.value(out).clone())
}

/// The attention sublayer alone (no residual, no normalization).
pub fn multi_head_attention(
    params: &LayerParams,
    x: &Matrix,
    causal: bool,
    settings: LayerSettings,
) -> Result<Matrix> {
    params.heads_dims(settings.heads)?;
    let mut tape = Tape::new();
    let ids = params.bind(&mut tape, false);
    let xi = tape.constant(x.clone());
    let out = multi_head_attention_tape(&mut tape, &ids, xi, causal, settings)?;
    Ok(tape.value(out).clone())
}

/// Row-wise layer normalization outside a tape; same arithmetic as
/// [`Tape::layer_norm`].
pub fn layer_norm_rows(x: &Matrix, gain: &Matrix, bias: &Matrix) -> Matrix {
    let (mut out, _) = crate::tape::normalize_rows(x, LAYER_NORM_EPS);
    for i in 0..out.rows() {
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = *o * gain.get(0, j) + bias.get(0, j);
        }
    }
    out
}

/// Sinusoidal encoding of one position.
pub fn sinusoidal_position(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

pub fn sinusoidal_positions(len: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(len, dim);
    for p in 0..len {
        m.row_mut(p).copy_from_slice(&sinusoidal_position(p, dim));
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: TransformerConfig,
    pub embedding: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_gain: Matrix,
    pub final_bias: Matrix,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

/// Tape handles for a whole model, in [`TransformerModel::params`] order.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub embedding: NodeId,
    pub layers: Vec<LayerIds>,
    pub final_gain: NodeId,
    pub final_bias: NodeId,
    pub head_w: NodeId,
    pub head_b: NodeId,
}

impl BoundModel {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.embedding];
        for l in &self.layers {
            out.extend(l.all());
        }
        out.extend([self.final_gain, self.final_bias, self.head_w, self.head_b]);
        out
    }
}

impl TransformerModel {
    /// Random initialization from `config.seed`.
    pub fn new(config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let f = config.model_dim;
        let embedding = normal_matrix(&mut rng, config.vocab_size, f, 0.02);
        let layers = (0..config.layers)
            .map(|_| LayerParams::init(&config, &mut rng))
            .collect();
        let head_w = fan_in_uniform(&mut rng, f, config.vocab_size);
        Ok(Self {
            embedding,
            layers,
            final_gain: Matrix::filled(1, f, 1.0),
            final_bias: Matrix::zeros(1, f),
            head_w,
            head_b: Matrix::zeros(1, config.vocab_size),
            config,
        })
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embedding];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.extend([&self.final_gain, &self.final_bias, &self.head_w, &self.head_b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend([
            &mut self.final_gain,
            &mut self.final_bias,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.data().len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            embedding: tape.param(self.embedding.clone()),
            layers: self.layers.iter().map(|l| l.bind(tape, true)).collect(),
            final_gain: tape.param(self.final_gain.clone()),
            final_bias: tape.param(self.final_bias.clone()),
            head_w: tape.param(self.head_w.clone()),
            head_b: tape.param(self.head_b.clone()),
        }
    }

    /// Logits (N×vocab) for a token sequence.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        tokens: &[usize],
        causal: bool,
    ) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        let settings = self.config.layer_settings();
        let emb = tape.embedding(bound.embedding, tokens)?;
        let pos = tape.constant(sinusoidal_positions(tokens.len(), self.config.model_dim));
        let mut x = tape.add(emb, pos)?;
        for ids in &bound.layers {
            x = transformer_layer_tape(tape, ids, x, causal, settings)?;
        }
        if self.config.layer_norm {
            x = tape.layer_norm(x, bound.final_gain, bound.final_bias, LAYER_NORM_EPS)?;
        }
        let logits = tape.matmul(x, bound.head_w)?;
        tape.add_row(logits, bound.head_b)
    }

    /// Causal logits for `tokens`, without recording gradients.
    pub fn logits(&self, tokens: &[usize]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = self.forward_tape(&mut tape, &bound, tokens, true)?;
        Ok(tape.value(out).clone())
    }

    /// Weighted next-token cross-entropy of `inputs → targets` and its
    /// gradient for every parameter, in [`Self::params`] order.
    pub fn loss_and_grads(
        &self,
        inputs: &[usize],
        targets: &[usize],
        weights: &[f64],
    ) -> Result<(f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let logits = self.forward_tape(&mut tape, &bound, inputs, true)?;
        let loss = tape.cross_entropy(logits, targets, weights)?;
        let mut grads = tape.backward(loss)?;
        let value = tape.value(loss).get(0, 0);
        Ok((value, bound.ids().into_iter().map(|id| grads.take(id)).collect()))
    }

    pub fn loss(&self, inputs: &[usize], targets: &[usize], weights: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let logits = self.forward_tape(&mut tape, &bound, inputs, true)?;
        let loss = tape.cross_entropy(logits, targets, weights)?;
        Ok(tape.value(loss).get(0, 0))
    }
}
