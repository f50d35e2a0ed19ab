//! Causal linear attention in linear time and constant auxiliary memory.
//!
//! The numerator `V̄_i = φ(Q_i)ᵀ S_i` with `S_i = Σ_{j≤i} φ(K_j) V_jᵀ` is
//! computed by sweeping the sequence once while updating a single C×M
//! accumulator in place. Its gradients are cumulative sums as well:
//!
//! * `∇φ(Q_i) = G_i S_iᵀ`, with `S` rebuilt in a forward sweep;
//! * `∇φ(K_i) = S̃_i V_i` and `∇V_i = S̃_iᵀ φ(K_i)`, where
//!   `S̃_i = Σ_{j≥i} φ(Q_j) G_jᵀ` is accumulated in a reverse sweep.
//!
//! No per-position `S_i` is ever stored.

use super::{check_out, check_qkv, require_causal, AttentionBatch, NORMALIZER_EPS};
use crate::error::{shape_err, Result};
use crate::matrix::{axpy, dot, Matrix, Real};

/// Output of the causal numerator pass.
#[derive(Clone, Debug)]
pub struct CausalIntermediate<T: Real = f64> {
    /// Unnormalized outputs `V̄` (N×M).
    pub numerator: Matrix<T>,
    /// `φ(Q_i)·Σ_{j≤i} φ(K_j)` for every row, without the ε guard.
    pub normalizer: Vec<T>,
    /// The feature-mapped inputs, when the caller asked to keep them.
    pub features: Option<(Matrix<T>, Matrix<T>)>,
}

impl<T: Real> CausalIntermediate<T> {
    /// Divides each numerator row by its guarded normalizer.
    pub fn normalized(&self) -> Matrix<T> {
        let eps = T::lit(NORMALIZER_EPS);
        let mut out = self.numerator.clone();
        for (i, &z) in self.normalizer.iter().enumerate() {
            let den = z + eps;
            out.row_mut(i).iter_mut().for_each(|x| *x /= den);
        }
        out
    }
}

/// Gradients with respect to `φ(Q)`, `φ(K)` and `V`.
#[derive(Clone, Debug)]
pub struct CausalGrads<T: Real = f64> {
    pub qf: Matrix<T>,
    pub kf: Matrix<T>,
    pub v: Matrix<T>,
}

/// `S += φ(k) vᵀ`, `z += φ(k)` for a C×M state stored row-major.
#[inline]
pub(crate) fn write_state<T: Real>(s: &mut [T], z: &mut [T], kf: &[T], v: &[T]) {
    let m = v.len();
    for (c, &kc) in kf.iter().enumerate() {
        axpy(kc, v, &mut s[c * m..(c + 1) * m]);
        z[c] += kc;
    }
}

/// `out = φ(q)ᵀ S`; returns `φ(q)·z`.
#[inline]
pub(crate) fn read_state<T: Real>(s: &[T], z: &[T], qf: &[T], out: &mut [T]) -> T {
    let m = out.len();
    out.fill(T::zero());
    for (c, &qc) in qf.iter().enumerate() {
        axpy(qc, &s[c * m..(c + 1) * m], out);
    }
    dot(qf, z)
}

fn check_grad<T: Real>(v: &Matrix<T>, g: &Matrix<T>, op: &'static str) -> Result<()> {
    if g.shape() != v.shape() {
        return shape_err(
            op,
            format!("gradient is {:?}, outputs are {:?}", g.shape(), v.shape()),
        );
    }
    Ok(())
}

/// Causal numerator and normalizer of feature-mapped inputs.
pub fn causal_linear_forward<T: Real>(
    qf: &Matrix<T>,
    kf: &Matrix<T>,
    v: &Matrix<T>,
) -> Result<CausalIntermediate<T>> {
    let mut numerator = Matrix::zeros(qf.rows(), v.cols());
    let mut normalizer = vec![T::zero(); qf.rows()];
    causal_linear_forward_into(qf, kf, v, &mut numerator, &mut normalizer)?;
    Ok(CausalIntermediate {
        numerator,
        normalizer,
        features: None,
    })
}

/// Same as [`causal_linear_forward`], writing into caller-owned buffers.
/// The only allocations are one C×M accumulator and one C-vector.
pub fn causal_linear_forward_into<T: Real>(
    qf: &Matrix<T>,
    kf: &Matrix<T>,
    v: &Matrix<T>,
    numerator: &mut Matrix<T>,
    normalizer: &mut [T],
) -> Result<()> {
    check_qkv(qf, kf, v, "causal_linear_forward")?;
    check_out(numerator, (qf.rows(), v.cols()), "causal_linear_forward")?;
    if normalizer.len() != qf.rows() {
        return shape_err("causal_linear_forward", "normalizer buffer length");
    }
    let (c, m) = (qf.cols(), v.cols());
    let mut s = vec![T::zero(); c * m];
    let mut z = vec![T::zero(); c];
    for i in 0..qf.rows() {
        write_state(&mut s, &mut z, kf.row(i), v.row(i));
        normalizer[i] = read_state(&s, &z, qf.row(i), numerator.row_mut(i));
    }
    Ok(())
}

/// Gradients of `Σ G ⊙ V̄` with respect to `φ(Q)`, `φ(K)` and `V`, where
/// `G` is the upstream gradient of the numerator.
pub fn causal_linear_backward<T: Real>(
    qf: &Matrix<T>,
    kf: &Matrix<T>,
    v: &Matrix<T>,
    g: &Matrix<T>,
) -> Result<CausalGrads<T>> {
    let mut grads = CausalGrads {
        qf: Matrix::zeros(qf.rows(), qf.cols()),
        kf: Matrix::zeros(kf.rows(), kf.cols()),
        v: Matrix::zeros(v.rows(), v.cols()),
    };
    causal_linear_backward_into(qf, kf, v, g, &mut grads.qf, &mut grads.kf, &mut grads.v)?;
    Ok(grads)
}

pub fn causal_linear_backward_into<T: Real>(
    qf: &Matrix<T>,
    kf: &Matrix<T>,
    v: &Matrix<T>,
    g: &Matrix<T>,
    gq: &mut Matrix<T>,
    gk: &mut Matrix<T>,
    gv: &mut Matrix<T>,
) -> Result<()> {
    check_qkv(qf, kf, v, "causal_linear_backward")?;
    check_grad(v, g, "causal_linear_backward")?;
    check_out(gq, qf.shape(), "causal_linear_backward")?;
    check_out(gk, kf.shape(), "causal_linear_backward")?;
    check_out(gv, v.shape(), "causal_linear_backward")?;
    let n = qf.rows();
    let (c, m) = (qf.cols(), v.cols());
    let mut s = vec![T::zero(); c * m];

    for i in 0..n {
        let (ki, vi) = (kf.row(i), v.row(i));
        for (ci, &kc) in ki.iter().enumerate() {
            axpy(kc, vi, &mut s[ci * m..(ci + 1) * m]);
        }
        let gi = g.row(i);
        for (ci, dst) in gq.row_mut(i).iter_mut().enumerate() {
            *dst = dot(gi, &s[ci * m..(ci + 1) * m]);
        }
    }

    s.fill(T::zero());
    for i in (0..n).rev() {
        let (qi, gi) = (qf.row(i), g.row(i));
        for (ci, &qc) in qi.iter().enumerate() {
            axpy(qc, gi, &mut s[ci * m..(ci + 1) * m]);
        }
        let (ki, vi) = (kf.row(i), v.row(i));
        let gvi = gv.row_mut(i);
        gvi.fill(T::zero());
        for (ci, &kc) in ki.iter().enumerate() {
            axpy(kc, &s[ci * m..(ci + 1) * m], gvi);
        }
        for (ci, dst) in gk.row_mut(i).iter_mut().enumerate() {
            *dst = dot(&s[ci * m..(ci + 1) * m], vi);
        }
    }
    Ok(())
}

/// Normalized causal linear attention on feature-mapped inputs:
/// `out_i = V̄_i / (φ(Q_i)·Σ_{j≤i}φ(K_j) + ε)`. `denom` receives the
/// guarded normalizers, which the fused backward pass needs.
pub fn causal_normalized_forward_into<T: Real>(
    qf: &Matrix<T>,
    kf: &Matrix<T>,
    v: &Matrix<T>,
    out: &mut Matrix<T>,
    denom: &mut [T],
) -> Result<()> {
    causal_linear_forward_into(qf, kf, v, out, denom)?;
    let eps = T::lit(NORMALIZER_EPS);
    for (i, d) in denom.iter_mut().enumerate() {
        *d += eps;
        let den = *d;
        out.row_mut(i).iter_mut().for_each(|x| *x /= den);
    }
    Ok(())
}

/// Fused backward pass of [`causal_normalized_forward_into`], covering the
/// normalizer as well as the numerator. Two sweeps, O(C·M) auxiliary
/// memory.
#[allow(clippy::too_many_arguments)]
pub fn causal_normalized_backward_into<T: Real>(
    qf: &Matrix<T>,
    kf: &Matrix<T>,
    v: &Matrix<T>,
    out: &Matrix<T>,
    denom: &[T],
    g: &Matrix<T>,
    gq: &mut Matrix<T>,
    gk: &mut Matrix<T>,
    gv: &mut Matrix<T>,
) -> Result<()> {
    check_qkv(qf, kf, v, "causal_normalized_backward")?;
    check_grad(v, g, "causal_normalized_backward")?;
    check_grad(v, out, "causal_normalized_backward")?;
    if denom.len() != qf.rows() {
        return shape_err("causal_normalized_backward", "normalizer length");
    }
    check_out(gq, qf.shape(), "causal_normalized_backward")?;
    check_out(gk, kf.shape(), "causal_normalized_backward")?;
    check_out(gv, v.shape(), "causal_normalized_backward")?;
    let n = qf.rows();
    let (c, m) = (qf.cols(), v.cols());
    let mut s = vec![T::zero(); c * m];
    let mut zsum = vec![T::zero(); c];
    let mut gnum = vec![T::zero(); m];

    // out_i = num_i / den_i  ⇒  ∂num_i = G_i / den_i,  ∂den_i = −G_i·out_i / den_i
    let upstream = |i: usize, gnum: &mut [T]| -> T {
        let (gi, den) = (g.row(i), denom[i]);
        for (dst, &x) in gnum.iter_mut().zip(gi) {
            *dst = x / den;
        }
        -dot(gi, out.row(i)) / den
    };

    for i in 0..n {
        write_state(&mut s, &mut zsum, kf.row(i), v.row(i));
        let gden = upstream(i, &mut gnum);
        for (ci, dst) in gq.row_mut(i).iter_mut().enumerate() {
            *dst = dot(&gnum, &s[ci * m..(ci + 1) * m]) + gden * zsum[ci];
        }
    }

    s.fill(T::zero());
    zsum.fill(T::zero());
    for i in (0..n).rev() {
        let gden = upstream(i, &mut gnum);
        let qi = qf.row(i);
        for (ci, &qc) in qi.iter().enumerate() {
            axpy(qc, &gnum, &mut s[ci * m..(ci + 1) * m]);
            zsum[ci] += gden * qc;
        }
        let (ki, vi) = (kf.row(i), v.row(i));
        let gvi = gv.row_mut(i);
        gvi.fill(T::zero());
        for (ci, &kc) in ki.iter().enumerate() {
            axpy(kc, &s[ci * m..(ci + 1) * m], gvi);
        }
        for (ci, dst) in gk.row_mut(i).iter_mut().enumerate() {
            *dst = dot(&s[ci * m..(ci + 1) * m], vi) + zsum[ci];
        }
    }
    Ok(())
}

/// Causally masked linear attention: feature-maps Q and K, runs the
/// causal numerator pass and divides by the guarded normalizer.
pub fn causal_linear_attention<T: Real>(batch: &AttentionBatch<T>) -> Result<Matrix<T>> {
    require_causal(batch.causal(), true, "causal_linear_attention")?;
    let fmap = batch.feature_map();
    let qf = fmap.apply_rows(batch.q())?;
    let kf = fmap.apply_rows(batch.k())?;
    let mut out = Matrix::zeros(batch.seq_len(), batch.value_dim());
    let mut denom = vec![T::zero(); batch.seq_len()];
    causal_normalized_forward_into(&qf, &kf, batch.v(), &mut out, &mut denom)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::FeatureMapKind;
    use crate::init::random_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn col(xs: &[f64]) -> Matrix {
        Matrix::from_vec(xs.len(), 1, xs.to_vec()).unwrap()
    }

    #[test]
    fn scalar_numerator() {
        let r = causal_linear_forward(&col(&[2.0]), &col(&[3.0]), &col(&[5.0])).unwrap();
        assert_eq!(r.numerator.get(0, 0), 30.0);
        assert_eq!(r.normalizer, vec![6.0]);
    }

    #[test]
    fn two_step_numerator() {
        // V̄_1 = 1·(1·1) = 1, V̄_2 = 2·(1·1 + 1·1) = 4
        let r = causal_linear_forward(&col(&[1.0, 2.0]), &col(&[1.0, 1.0]), &col(&[1.0, 1.0]))
            .unwrap();
        assert_eq!(r.numerator.data(), &[1.0, 4.0]);
    }

    #[test]
    fn scalar_gradients() {
        // V̄ = q·k·v ⇒ (∂q, ∂k, ∂v) = (k·v, q·v, q·k)
        let g = causal_linear_backward(&col(&[2.0]), &col(&[3.0]), &col(&[5.0]), &col(&[1.0]))
            .unwrap();
        assert_eq!(g.qf.get(0, 0), 15.0);
        assert_eq!(g.kf.get(0, 0), 10.0);
        assert_eq!(g.v.get(0, 0), 6.0);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let qf: Matrix = random_matrix::<f64, _>(&mut rng, 7, 3, 1.0);
        let kf: Matrix = random_matrix::<f64, _>(&mut rng, 7, 3, 1.0);
        let v: Matrix = random_matrix::<f64, _>(&mut rng, 7, 2, 1.0);
        let g = causal_linear_backward(&qf, &kf, &v, &Matrix::zeros(7, 2)).unwrap();
        assert_eq!(g.qf, Matrix::zeros(7, 3));
        assert_eq!(g.kf, Matrix::zeros(7, 3));
        assert_eq!(g.v, Matrix::zeros(7, 2));
    }

    #[test]
    fn first_row_depends_only_on_first_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let qf: Matrix = random_matrix::<f64, _>(&mut rng, 5, 3, 1.0);
        let kf: Matrix = random_matrix::<f64, _>(&mut rng, 5, 3, 1.0);
        let v: Matrix = random_matrix::<f64, _>(&mut rng, 5, 2, 1.0);
        let a = causal_linear_forward(&qf, &kf, &v).unwrap();
        let mut kf2 = kf.clone();
        let mut v2 = v.clone();
        for i in 1..5 {
            kf2.row_mut(i).iter_mut().for_each(|x| *x *= -3.0);
            v2.row_mut(i).iter_mut().for_each(|x| *x += 7.0);
        }
        let b = causal_linear_forward(&qf, &kf2, &v2).unwrap();
        assert_eq!(a.numerator.row(0), b.numerator.row(0));
    }

    #[test]
    fn shape_errors() {
        let q = Matrix::<f64>::zeros(4, 3);
        assert!(causal_linear_forward(&q, &Matrix::zeros(4, 2), &Matrix::zeros(4, 2)).is_err());
        assert!(causal_linear_forward(&q, &Matrix::zeros(3, 3), &Matrix::zeros(4, 2)).is_err());
        assert!(causal_linear_backward(&q, &q, &Matrix::zeros(4, 2), &Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn single_position_output_is_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let b = AttentionBatch::new(
            random_matrix::<f64, _>(&mut rng, 1, 3, 1.0),
            random_matrix::<f64, _>(&mut rng, 1, 3, 1.0),
            random_matrix::<f64, _>(&mut rng, 1, 2, 1.0),
            true,
            FeatureMapKind::Elu1,
        )
        .unwrap();
        let out = causal_linear_attention(&b).unwrap();
        assert!(out.max_abs_diff(b.v()).unwrap() < 1e-5);
        assert!(causal_linear_attention(&b.with_causal(false)).is_err());
    }

    #[test]
    fn intermediate_normalization_matches_fused_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let qf: Matrix = random_matrix::<f64, _>(&mut rng, 9, 3, 1.0).map(f64::abs);
        let kf: Matrix = random_matrix::<f64, _>(&mut rng, 9, 3, 1.0).map(f64::abs);
        let v: Matrix = random_matrix::<f64, _>(&mut rng, 9, 4, 1.0);
        let inter = causal_linear_forward(&qf, &kf, &v).unwrap();
        let mut out = Matrix::zeros(9, 4);
        let mut den = vec![0.0; 9];
        causal_normalized_forward_into(&qf, &kf, &v, &mut out, &mut den).unwrap();
        assert_eq!(inter.normalized(), out);
    }
}
