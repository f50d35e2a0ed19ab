//! Attention kernels: softmax attention (the quadratic reference), linear
//! attention through a feature map, and the causal linear kernel whose
//! forward and backward passes keep only a C×M accumulator alive.

mod causal;
mod feature_map;
mod linear;
mod softmax;

pub use causal::{
    causal_linear_attention, causal_linear_backward, causal_linear_backward_into,
    causal_linear_forward, causal_linear_forward_into, causal_normalized_backward_into,
    causal_normalized_forward_into, CausalGrads, CausalIntermediate,
};
pub(crate) use causal::{read_state, write_state};
pub use feature_map::{
    feature_map_elu1, feature_map_poly2, output_dim, FeatureMap, FeatureMapKind,
};
pub use linear::{linear_attention, linear_normalized_backward_into, linear_normalized_forward_into};
pub use softmax::{
    softmax_attention, softmax_attention_backward, softmax_attention_backward_into,
    softmax_attention_forward_into,
};

use crate::error::{shape_err, Error, Result};
use crate::matrix::{Matrix, Real};

/// Added to every linear-attention normalizer before dividing. Feature
/// maps keep normalizers nonnegative but not bounded away from zero.
pub const NORMALIZER_EPS: f64 = 1e-6;

/// Stand-in for −∞ on masked softmax scores; `exp` of it underflows to
/// exactly zero while keeping the arithmetic finite.
pub const MASK_VALUE: f64 = -1e30;

/// Queries, keys and values for one attention call.
#[derive(Clone, Debug)]
pub struct AttentionBatch<T: Real = f64> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    causal: bool,
    fmap: FeatureMapKind,
}

impl<T: Real> AttentionBatch<T> {
    /// `q`, `k` are N×D and `v` is N×M.
    pub fn new(
        q: Matrix<T>,
        k: Matrix<T>,
        v: Matrix<T>,
        causal: bool,
        fmap: FeatureMapKind,
    ) -> Result<Self> {
        check_qkv(&q, &k, &v, "AttentionBatch")?;
        Ok(Self {
            q,
            k,
            v,
            causal,
            fmap,
        })
    }

    pub fn q(&self) -> &Matrix<T> {
        &self.q
    }

    pub fn k(&self) -> &Matrix<T> {
        &self.k
    }

    pub fn v(&self) -> &Matrix<T> {
        &self.v
    }

    pub fn causal(&self) -> bool {
        self.causal
    }

    pub fn seq_len(&self) -> usize {
        self.q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }

    pub fn value_dim(&self) -> usize {
        self.v.cols()
    }

    pub fn feature_map(&self) -> FeatureMap {
        FeatureMap::new(self.fmap, self.head_dim())
    }

    pub fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }
}

pub(crate) fn check_qkv<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    op: &'static str,
) -> Result<()> {
    if q.cols() != k.cols() {
        return shape_err(op, format!("query width {} vs key width {}", q.cols(), k.cols()));
    }
    if q.rows() != k.rows() || q.rows() != v.rows() {
        return shape_err(
            op,
            format!(
                "sequence lengths q={} k={} v={}",
                q.rows(),
                k.rows(),
                v.rows()
            ),
        );
    }
    Ok(())
}

pub(crate) fn check_out<T: Real>(out: &Matrix<T>, shape: (usize, usize), op: &'static str) -> Result<()> {
    if out.shape() != shape {
        return shape_err(op, format!("buffer is {:?}, need {:?}", out.shape(), shape));
    }
    Ok(())
}

pub(crate) fn require_causal(batch_causal: bool, want: bool, op: &str) -> Result<()> {
    if batch_causal != want {
        return Err(Error::Invalid(format!(
            "{op} requires a batch with causal={want}"
        )));
    }
    Ok(())
}
