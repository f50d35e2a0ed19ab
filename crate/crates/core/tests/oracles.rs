mod common;

use common::{pairwise_linear, random, rows, softmax_attention as softmax_oracle};
use linattn_core::model::{multi_head_attention, transformer_layer_forward, LayerParams, LayerSettings};
use linattn_core::{
    causal_linear_attention, linear_attention, softmax_attention, AttentionBatch, AttentionKind,
    FeatureMapKind, Matrix, TransformerConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn phi_of(kind: FeatureMapKind) -> fn(&[f64]) -> Vec<f64> {
    match kind {
        FeatureMapKind::Poly2 => common::poly2,
        _ => common::elu1,
    }
}

#[test]
fn linear_attention_equals_pairwise_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for kind in [FeatureMapKind::Elu1, FeatureMapKind::Poly2] {
        for _ in 0..40 {
            let n = rng.random_range(1..=48);
            let d = rng.random_range(1..=8);
            let m = rng.random_range(1..=8);
            let (q, k, v) = (random(&mut rng, n, d, 1.0), random(&mut rng, n, d, 1.0), random(&mut rng, n, m, 1.0));
            let batch = AttentionBatch::new(q.clone(), k.clone(), v.clone(), false, kind).unwrap();
            let got = linear_attention(&batch).unwrap();
            let want = pairwise_linear(&q, &k, &v, phi_of(kind), false);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-10, "{kind} n={n}");
        }
    }
}

#[test]
fn causal_linear_attention_equals_masked_pairwise_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for kind in [FeatureMapKind::Elu1, FeatureMapKind::Poly2] {
        for _ in 0..40 {
            let n = rng.random_range(1..=48);
            let d = rng.random_range(1..=8);
            let m = rng.random_range(1..=8);
            let (q, k, v) = (random(&mut rng, n, d, 1.0), random(&mut rng, n, d, 1.0), random(&mut rng, n, m, 1.0));
            let batch = AttentionBatch::new(q.clone(), k.clone(), v.clone(), true, kind).unwrap();
            let got = causal_linear_attention(&batch).unwrap();
            let want = pairwise_linear(&q, &k, &v, phi_of(kind), true);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-10, "{kind} n={n}");
        }
    }
}

#[test]
fn causal_output_ignores_the_suffix() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (n, d, m, cut) = (24, 5, 4, 11);
    let (q, k, v) = (random(&mut rng, n, d, 1.0), random(&mut rng, n, d, 1.0), random(&mut rng, n, m, 1.0));
    let base = causal_linear_attention(&AttentionBatch::new(q.clone(), k.clone(), v.clone(), true, FeatureMapKind::Elu1).unwrap()).unwrap();
    let mut q2 = rows(&q);
    let mut k2 = rows(&k);
    let mut v2 = rows(&v);
    for i in cut..n {
        q2[i].iter_mut().for_each(|x| *x = rng.random_range(-5.0..5.0));
        k2[i].iter_mut().for_each(|x| *x = rng.random_range(-5.0..5.0));
        v2[i].iter_mut().for_each(|x| *x = rng.random_range(-5.0..5.0));
    }
    let changed = causal_linear_attention(
        &AttentionBatch::new(Matrix::from_rows(&q2), Matrix::from_rows(&k2), Matrix::from_rows(&v2), true, FeatureMapKind::Elu1).unwrap(),
    )
    .unwrap();
    for i in 0..cut {
        assert_eq!(base.row(i), changed.row(i));
    }
}

#[test]
fn softmax_attention_equals_explicit_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for causal in [false, true] {
        for _ in 0..20 {
            let n = rng.random_range(1..=32);
            let (q, k, v) = (random(&mut rng, n, 6, 2.0), random(&mut rng, n, 6, 2.0), random(&mut rng, n, 3, 1.0));
            let got = softmax_attention(&AttentionBatch::new(q.clone(), k.clone(), v.clone(), causal, FeatureMapKind::Elu1).unwrap()).unwrap();
            let want = softmax_oracle(&q, &k, &v, causal);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }
}

fn layer_config(heads: usize, f: usize, attention: AttentionKind) -> TransformerConfig {
    TransformerConfig::new(1, heads, f, 4, attention)
}

fn random_layer(cfg: &TransformerConfig, seed: u64) -> LayerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = LayerParams::init(cfg, &mut rng);
    // non-trivial biases and norm parameters
    for m in [&mut p.ffn_b1, &mut p.ffn_b2, &mut p.ln1_bias, &mut p.ln2_bias] {
        *m = random(&mut rng, 1, m.cols(), 0.5);
    }
    for m in [&mut p.ln1_gain, &mut p.ln2_gain] {
        *m = Matrix::from_fn(1, m.cols(), |_, _| rng.random_range(0.5..1.5));
    }
    p
}

fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|t| a.get(i, t) * b.get(t, j)).sum())
}

fn naive_layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        let r = x.row(i);
        let f = r.len() as f64;
        let mean = r.iter().sum::<f64>() / f;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f;
        (r[j] - mean) / (var + 1e-5).sqrt() * gain.get(0, j) + bias.get(0, j)
    })
}

/// Layer assembled from the pairwise attention oracle and explicit loops.
fn naive_layer(p: &LayerParams, x: &Matrix, heads: usize, causal: bool, layer_norm: bool) -> Matrix {
    let a_in = if layer_norm { naive_layer_norm(x, &p.ln1_gain, &p.ln1_bias) } else { x.clone() };
    let (q, k, v) = (naive_matmul(&a_in, &p.w_q), naive_matmul(&a_in, &p.w_k), naive_matmul(&a_in, &p.w_v));
    let (d, m) = (q.cols() / heads, v.cols() / heads);
    let n = x.rows();
    let mut cat = Matrix::zeros(n, heads * m);
    for h in 0..heads {
        let out = pairwise_linear(
            &q.slice_cols(h * d, d).unwrap(),
            &k.slice_cols(h * d, d).unwrap(),
            &v.slice_cols(h * m, m).unwrap(),
            common::elu1,
            causal,
        );
        for i in 0..n {
            for c in 0..m {
                cat.set(i, h * m + c, out.get(i, c));
            }
        }
    }
    let h1 = x.add(&naive_matmul(&cat, &p.w_o)).unwrap();
    let f_in = if layer_norm { naive_layer_norm(&h1, &p.ln2_gain, &p.ln2_bias) } else { h1.clone() };
    let hidden = Matrix::from_fn(n, p.ffn_w1.cols(), |i, j| {
        ((0..f_in.cols()).map(|t| f_in.get(i, t) * p.ffn_w1.get(t, j)).sum::<f64>() + p.ffn_b1.get(0, j)).max(0.0)
    });
    let ffn = Matrix::from_fn(n, x.cols(), |i, j| {
        (0..hidden.cols()).map(|t| hidden.get(i, t) * p.ffn_w2.get(t, j)).sum::<f64>() + p.ffn_b2.get(0, j)
    });
    h1.add(&ffn).unwrap()
}

#[test]
fn linear_layer_matches_naive_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for (causal, layer_norm) in [(false, true), (true, true), (false, false), (true, false)] {
        let cfg = layer_config(2, 8, AttentionKind::LinearElu1);
        let p = random_layer(&cfg, 5);
        let x = random(&mut rng, 16, 8, 1.0);
        let settings = LayerSettings { attention: AttentionKind::LinearElu1, heads: 2, layer_norm };
        let got = transformer_layer_forward(&p, &x, causal, settings).unwrap();
        let want = naive_layer(&p, &x, 2, causal, layer_norm);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-10, "causal={causal} norm={layer_norm}");
    }
}

#[test]
fn single_head_with_identity_output_is_the_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for attention in [AttentionKind::Softmax, AttentionKind::LinearElu1, AttentionKind::LinearPoly2] {
        let cfg = layer_config(1, 6, attention);
        let mut p = random_layer(&cfg, 6);
        p.w_o = Matrix::identity(6);
        let x = random(&mut rng, 9, 6, 1.0);
        let settings = LayerSettings { attention, heads: 1, layer_norm: false };
        let got = multi_head_attention(&p, &x, true, settings).unwrap();
        let (q, k, v) = (naive_matmul(&x, &p.w_q), naive_matmul(&x, &p.w_k), naive_matmul(&x, &p.w_v));
        let want = match attention.feature_map() {
            None => softmax_oracle(&q, &k, &v, true),
            Some(kind) => pairwise_linear(&q, &k, &v, phi_of(kind), true),
        };
        assert!(got.max_abs_diff(&want).unwrap() < 1e-10, "{attention}");
    }
}

#[test]
fn permuting_heads_with_output_rows_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let cfg = layer_config(2, 8, AttentionKind::LinearElu1);
    let p = random_layer(&cfg, 7);
    let x = random(&mut rng, 10, 8, 1.0);
    let settings = LayerSettings { attention: AttentionKind::LinearElu1, heads: 2, layer_norm: false };
    let swap_cols = |m: &Matrix| Matrix::concat_cols(&[&m.slice_cols(4, 4).unwrap(), &m.slice_cols(0, 4).unwrap()]).unwrap();
    let mut swapped = p.clone();
    swapped.w_q = swap_cols(&p.w_q);
    swapped.w_k = swap_cols(&p.w_k);
    swapped.w_v = swap_cols(&p.w_v);
    let wo = rows(&p.w_o);
    swapped.w_o = Matrix::from_rows(&[&wo[4..], &wo[..4]].concat());
    let a = multi_head_attention(&p, &x, false, settings).unwrap();
    let b = multi_head_attention(&swapped, &x, false, settings).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
}

#[test]
fn two_heads_match_manual_assembly() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let cfg = layer_config(2, 6, AttentionKind::Softmax);
    let p = random_layer(&cfg, 8);
    let x = random(&mut rng, 7, 6, 1.0);
    let settings = LayerSettings { attention: AttentionKind::Softmax, heads: 2, layer_norm: false };
    let got = multi_head_attention(&p, &x, false, settings).unwrap();
    let (q, k, v) = (naive_matmul(&x, &p.w_q), naive_matmul(&x, &p.w_k), naive_matmul(&x, &p.w_v));
    let h0 = softmax_oracle(&q.slice_cols(0, 3).unwrap(), &k.slice_cols(0, 3).unwrap(), &v.slice_cols(0, 3).unwrap(), false);
    let h1 = softmax_oracle(&q.slice_cols(3, 3).unwrap(), &k.slice_cols(3, 3).unwrap(), &v.slice_cols(3, 3).unwrap(), false);
    let want = naive_matmul(&Matrix::concat_cols(&[&h0, &h1]).unwrap(), &p.w_o);
    assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
}

#[test]
fn indivisible_heads_are_rejected() {
    let cfg = layer_config(2, 8, AttentionKind::LinearElu1);
    let p = random_layer(&cfg, 9);
    let settings = LayerSettings { attention: AttentionKind::LinearElu1, heads: 3, layer_norm: true };
    assert!(multi_head_attention(&p, &Matrix::zeros(2, 8), false, settings).is_err());
    assert!(transformer_layer_forward(&p, &Matrix::zeros(2, 5), false, LayerSettings { heads: 2, ..settings }).is_err());
}
