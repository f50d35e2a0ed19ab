//! Non-causal linear attention:
//! `V′_i = φ(Q_i)ᵀ (Σ_j φ(K_j) V_jᵀ) / (φ(Q_i)ᵀ Σ_j φ(K_j) + ε)`.
//! The two sums are formed once and shared by every query.

use super::{check_out, check_qkv, require_causal, AttentionBatch, NORMALIZER_EPS};
use crate::error::{shape_err, Result};
use crate::matrix::{axpy, dot, Matrix, Real};

pub fn linear_attention<T: Real>(batch: &AttentionBatch<T>) -> Result<Matrix<T>> {
    require_causal(batch.causal(), false, "linear_attention")?;
    let fmap = batch.feature_map();
    let qf = fmap.apply_rows(batch.q())?;
    let kf = fmap.apply_rows(batch.k())?;
    let mut out = Matrix::zeros(batch.seq_len(), batch.value_dim());
    let mut denom = vec![T::zero(); batch.seq_len()];
    linear_normalized_forward_into(&qf, &kf, batch.v(), &mut out, &mut denom)?;
    Ok(out)
}

/// Forward pass on feature-mapped inputs. `denom[i]` receives the guarded
/// normalizer `φ(Q_i)·Σφ(K_j) + ε` used for row `i`.
pub fn linear_normalized_forward_into<T: Real>(
    qf: &Matrix<T>,
    kf: &Matrix<T>,
    v: &Matrix<T>,
    out: &mut Matrix<T>,
    denom: &mut [T],
) -> Result<()> {
    check_qkv(qf, kf, v, "linear_attention")?;
    check_out(out, (qf.rows(), v.cols()), "linear_attention")?;
    if denom.len() != qf.rows() {
        return shape_err("linear_attention", "normalizer buffer length");
    }
    let (c, m) = (qf.cols(), v.cols());
    let eps = T::lit(NORMALIZER_EPS);
    let mut kv = vec![T::zero(); c * m];
    let mut ksum = vec![T::zero(); c];
    for j in 0..kf.rows() {
        let kj = kf.row(j);
        let vj = v.row(j);
        for (ci, &kc) in kj.iter().enumerate() {
            axpy(kc, vj, &mut kv[ci * m..(ci + 1) * m]);
            ksum[ci] += kc;
        }
    }
    for i in 0..qf.rows() {
        let qi = qf.row(i);
        let row = out.row_mut(i);
        row.fill(T::zero());
        for (ci, &qc) in qi.iter().enumerate() {
            axpy(qc, &kv[ci * m..(ci + 1) * m], row);
        }
        let den = dot(qi, &ksum) + eps;
        for x in row.iter_mut() {
            *x /= den;
        }
        denom[i] = den;
    }
    Ok(())
}

/// Backward pass on feature-mapped inputs; gradients with respect to
/// `qf`, `kf`, `v` are written into the provided buffers. Needs the
/// forward output and normalizers. Auxiliary memory is O(C·M).
#[allow(clippy::too_many_arguments)]
pub fn linear_normalized_backward_into<T: Real>(
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
    check_qkv(qf, kf, v, "linear_attention_backward")?;
    let n = qf.rows();
    let (c, m) = (qf.cols(), v.cols());
    if out.shape() != (n, m) || g.shape() != (n, m) || denom.len() != n {
        return shape_err("linear_attention_backward", "output, gradient or normalizer shape");
    }
    check_out(gq, qf.shape(), "linear_attention_backward")?;
    check_out(gk, kf.shape(), "linear_attention_backward")?;
    check_out(gv, v.shape(), "linear_attention_backward")?;

    let mut kv = vec![T::zero(); c * m];
    let mut ksum = vec![T::zero(); c];
    for j in 0..n {
        let kj = kf.row(j);
        for (ci, &kc) in kj.iter().enumerate() {
            axpy(kc, v.row(j), &mut kv[ci * m..(ci + 1) * m]);
            ksum[ci] += kc;
        }
    }

    let mut dkv = vec![T::zero(); c * m];
    let mut dksum = vec![T::zero(); c];
    let mut gnum = vec![T::zero(); m];
    for i in 0..n {
        let den = denom[i];
        let gi = g.row(i);
        for (dst, &x) in gnum.iter_mut().zip(gi) {
            *dst = x / den;
        }
        let gden = -dot(gi, out.row(i)) / den;
        let qi = qf.row(i);
        let gqi = gq.row_mut(i);
        for ci in 0..c {
            gqi[ci] = dot(&kv[ci * m..(ci + 1) * m], &gnum) + gden * ksum[ci];
        }
        for (ci, &qc) in qi.iter().enumerate() {
            axpy(qc, &gnum, &mut dkv[ci * m..(ci + 1) * m]);
            dksum[ci] += gden * qc;
        }
    }

    for j in 0..n {
        let vj = v.row(j);
        let kj = kf.row(j);
        let gkj = gk.row_mut(j);
        for ci in 0..c {
            gkj[ci] = dot(&dkv[ci * m..(ci + 1) * m], vj) + dksum[ci];
        }
        let gvj = gv.row_mut(j);
        gvj.fill(T::zero());
        for (ci, &kc) in kj.iter().enumerate() {
            axpy(kc, &dkv[ci * m..(ci + 1) * m], gvj);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::FeatureMapKind;
    use crate::init::random_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_position_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = AttentionBatch::new(
            random_matrix::<f64, _>(&mut rng, 1, 4, 1.0),
            random_matrix::<f64, _>(&mut rng, 1, 4, 1.0),
            random_matrix::<f64, _>(&mut rng, 1, 3, 1.0),
            false,
            FeatureMapKind::Elu1,
        )
        .unwrap();
        let out = linear_attention(&b).unwrap();
        // only the ε guard separates the result from V exactly
        assert!(out.max_abs_diff(b.v()).unwrap() < 1e-5);
    }

    #[test]
    fn identical_keys_give_column_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let key: Matrix = random_matrix::<f64, _>(&mut rng, 1, 4, 1.0);
        let k = Matrix::from_fn(6, 4, |_, j| key.get(0, j));
        let v: Matrix = random_matrix::<f64, _>(&mut rng, 6, 3, 1.0);
        let b = AttentionBatch::new(random_matrix::<f64, _>(&mut rng, 6, 4, 1.0), k, v.clone(), false, FeatureMapKind::Elu1)
            .unwrap();
        let out = linear_attention(&b).unwrap();
        for j in 0..3 {
            let mean = (0..6).map(|i| v.get(i, j)).sum::<f64>() / 6.0;
            for i in 0..6 {
                assert!((out.get(i, j) - mean).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rejects_causal_batch() {
        let b = AttentionBatch::new(
            Matrix::<f64>::zeros(2, 2),
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 2),
            true,
            FeatureMapKind::Elu1,
        )
        .unwrap();
        assert!(linear_attention(&b).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, c, m) = (6, 3, 2);
        let qf: Matrix = random_matrix::<f64, _>(&mut rng, n, c, 1.0).map(|x| x.abs() + 0.1);
        let kf: Matrix = random_matrix::<f64, _>(&mut rng, n, c, 1.0).map(|x| x.abs() + 0.1);
        let v: Matrix = random_matrix::<f64, _>(&mut rng, n, m, 1.0);
        let g: Matrix = random_matrix::<f64, _>(&mut rng, n, m, 1.0);
        let forward = |qf: &Matrix, kf: &Matrix, v: &Matrix| {
            let mut out = Matrix::zeros(n, m);
            let mut den = vec![0.0; n];
            linear_normalized_forward_into(qf, kf, v, &mut out, &mut den).unwrap();
            (out, den)
        };
        let (out, den) = forward(&qf, &kf, &v);
        let mut gq = Matrix::zeros(n, c);
        let mut gk = Matrix::zeros(n, c);
        let mut gv = Matrix::zeros(n, m);
        linear_normalized_backward_into(&qf, &kf, &v, &out, &den, &g, &mut gq, &mut gk, &mut gv)
            .unwrap();
        let h = 1e-6;
        for (which, analytic) in [(0, &gq), (1, &gk), (2, &gv)] {
            for i in 0..analytic.rows() {
                for j in 0..analytic.cols() {
                    let mut mats = [qf.clone(), kf.clone(), v.clone()];
                    let x = mats[which].get(i, j);
                    mats[which].set(i, j, x + h);
                    let lp = forward(&mats[0], &mats[1], &mats[2]).0.hadamard(&g).unwrap().sum();
                    mats[which].set(i, j, x - h);
                    let lm = forward(&mats[0], &mats[1], &mats[2]).0.hadamard(&g).unwrap().sum();
                    let numeric = (lp - lm) / (2.0 * h);
                    assert!((numeric - analytic.get(i, j)).abs() < 1e-8);
                }
            }
        }
    }
}
