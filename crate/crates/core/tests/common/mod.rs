//! Independent reference implementations. Everything here is written
//! from the defining formulas with plain loops over `Vec<Vec<f64>>`, and
//! shares no code with the library beyond the `Matrix` container.

#![allow(dead_code)]

use linattn_core::Matrix;
use rand::Rng;

/// Normalizer guard the library adds to linear-attention denominators.
pub const EPS: f64 = 1e-6;

pub fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn to_matrix(r: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(r)
}

pub fn random(rng: &mut impl Rng, n: usize, d: usize, scale: f64) -> Matrix {
    Matrix::from_fn(n, d, |_, _| rng.random_range(-scale..scale))
}

pub fn elu1(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| if v > 0.0 { v + 1.0 } else { v.exp() })
        .collect()
}

/// All ordered products `x_a x_b`, so that `φ(x)·φ(y) = (x·y)²`.
pub fn poly2(x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * x.len());
    for &a in x {
        for &b in x {
            out.push(a * b);
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pairwise evaluation `Σ_j sim(q_i, k_j) v_j / (Σ_j sim(q_i, k_j) + ε)`
/// with `sim(q, k) = φ(q)·φ(k)`, over `j ≤ i` when `causal`.
pub fn pairwise_linear(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    phi: fn(&[f64]) -> Vec<f64>,
    causal: bool,
) -> Matrix {
    let n = q.rows();
    let m = v.cols();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        let qi = phi(q.row(i));
        let mut den = 0.0;
        let last = if causal { i + 1 } else { k.rows() };
        for j in 0..last {
            let s = dot(&qi, &phi(k.row(j)));
            den += s;
            for c in 0..m {
                out[i][c] += s * v.get(j, c);
            }
        }
        for c in 0..m {
            out[i][c] /= den + EPS;
        }
    }
    to_matrix(&out)
}

/// Unnormalized causal numerator `Σ_{j≤i} (φq_i·φk_j) v_j` on
/// already-mapped features.
pub fn causal_numerator(qf: &Matrix, kf: &Matrix, v: &Matrix) -> Matrix {
    let n = qf.rows();
    let m = v.cols();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..=i {
            let s = dot(qf.row(i), kf.row(j));
            for c in 0..m {
                out[i][c] += s * v.get(j, c);
            }
        }
    }
    to_matrix(&out)
}

/// `softmax(q_i·k_j / √D)` weighted sum of values, masked to `j ≤ i` when
/// `causal`.
pub fn softmax_attention(q: &Matrix, k: &Matrix, v: &Matrix, causal: bool) -> Matrix {
    let n = q.rows();
    let m = v.cols();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        let last = if causal { i + 1 } else { k.rows() };
        let scores: Vec<f64> = (0..last).map(|j| dot(q.row(i), k.row(j)) * scale).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = w.iter().sum();
        for (j, wj) in w.iter().enumerate() {
            for c in 0..m {
                out[i][c] += wj / total * v.get(j, c);
            }
        }
    }
    to_matrix(&out)
}

/// Central difference of `f` with respect to every entry of `x`.
pub fn numeric_gradient(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for idx in 0..x.data().len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[idx] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[idx] = orig;
        g.data_mut()[idx] = (fp - fm) / (2.0 * h);
    }
    g
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Largest [`rel_err`] over two equally shaped matrices.
pub fn max_rel_err(a: &Matrix, n: &Matrix, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(n.data())
        .map(|(&x, &y)| rel_err(x, y, floor))
        .fold(0.0, f64::max)
}

/// `Σ G ∘ X`, the scalar whose gradient with respect to X is G.
pub fn weighted_sum(x: &Matrix, g: &Matrix) -> f64 {
    x.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
}
