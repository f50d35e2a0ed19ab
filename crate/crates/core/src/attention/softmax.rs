//! Softmax attention `softmax(QKᵀ/√D) V`, the quadratic baseline. The
//! backward pass consumes the stored N×N probability matrix.

use super::{check_out, check_qkv, AttentionBatch, MASK_VALUE};
use crate::error::{shape_err, Result};
use crate::matrix::{dot, matmul_into, softmax_in_place, Matrix, Real};

pub fn softmax_attention<T: Real>(batch: &AttentionBatch<T>) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(batch.seq_len(), batch.value_dim());
    softmax_attention_forward_into(batch.q(), batch.k(), batch.v(), batch.causal(), &mut out)?;
    Ok(out)
}

/// Writes the attention output into `out` and returns the row-stochastic
/// probability matrix needed by the backward pass.
pub fn softmax_attention_forward_into<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    causal: bool,
    out: &mut Matrix<T>,
) -> Result<Matrix<T>> {
    check_qkv(q, k, v, "softmax_attention")?;
    let n = q.rows();
    check_out(out, (n, v.cols()), "softmax_attention")?;
    let scale = T::one() / T::lit(q.cols() as f64).sqrt();
    let mask = T::lit(MASK_VALUE);
    let mut probs = Matrix::zeros(n, n);
    for i in 0..n {
        let qi = q.row(i);
        let row = probs.row_mut(i);
        for (j, p) in row.iter_mut().enumerate() {
            *p = if causal && j > i {
                mask
            } else {
                dot(qi, k.row(j)) * scale
            };
        }
        softmax_in_place(row);
    }
    matmul_into(&probs, v, out)?;
    Ok(probs)
}

/// Gradients `(∇Q, ∇K, ∇V)` of `softmax(QKᵀ/√D) V` given the upstream
/// gradient `g` and the probabilities saved by the forward pass.
pub fn softmax_attention_backward<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    probs: &Matrix<T>,
    g: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let mut dq = Matrix::zeros(q.rows(), q.cols());
    let mut dk = Matrix::zeros(k.rows(), k.cols());
    let mut dv = Matrix::zeros(v.rows(), v.cols());
    softmax_attention_backward_into(q, k, v, probs, g, &mut dq, &mut dk, &mut dv)?;
    Ok((dq, dk, dv))
}

#[allow(clippy::too_many_arguments)]
pub fn softmax_attention_backward_into<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    probs: &Matrix<T>,
    g: &Matrix<T>,
    dq: &mut Matrix<T>,
    dk: &mut Matrix<T>,
    dv: &mut Matrix<T>,
) -> Result<()> {
    check_qkv(q, k, v, "softmax_attention_backward")?;
    let n = q.rows();
    if probs.shape() != (n, n) || g.shape() != v.shape() {
        return shape_err("softmax_attention_backward", "probabilities or gradient shape");
    }
    check_out(dq, q.shape(), "softmax_attention_backward")?;
    check_out(dk, k.shape(), "softmax_attention_backward")?;
    check_out(dv, v.shape(), "softmax_attention_backward")?;
    let scale = T::one() / T::lit(q.cols() as f64).sqrt();

    // dV = Pᵀ G
    dv.fill(T::zero());
    for i in 0..n {
        let gi = g.row(i);
        for (j, &p) in probs.row(i).iter().enumerate() {
            crate::matrix::axpy(p, gi, dv.row_mut(j));
        }
    }

    // dS = P ⊙ (G Vᵀ − rowsum(P ⊙ G Vᵀ)), scaled by 1/√D
    let mut ds = Matrix::zeros(n, n);
    for i in 0..n {
        let gi = g.row(i);
        let pi = probs.row(i);
        let row = ds.row_mut(i);
        let mut weighted = T::zero();
        for (j, d) in row.iter_mut().enumerate() {
            *d = dot(gi, v.row(j));
            weighted += pi[j] * *d;
        }
        for (d, &p) in row.iter_mut().zip(pi) {
            *d = p * (*d - weighted) * scale;
        }
    }

    // dQ = dS K, dK = dSᵀ Q
    matmul_into(&ds, k, dq)?;
    dk.fill(T::zero());
    for i in 0..n {
        let qi = q.row(i);
        for (j, &d) in ds.row(i).iter().enumerate() {
            crate::matrix::axpy(d, qi, dk.row_mut(j));
        }
    }
    Ok(())
}
