mod common;

use common::{random, softmax_attention as softmax_oracle};
use linattn_core::recurrent::{init_state, linear_step, DecodingSession};
use linattn_core::{
    causal_linear_attention, generate, AttentionBatch, AttentionKind, DecodeMode, FeatureMap,
    FeatureMapKind, KvCache, TransformerConfig, TransformerModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn stacked_steps_equal_parallel_kernel_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    for kind in [FeatureMapKind::Elu1, FeatureMapKind::Poly2] {
        for _ in 0..10 {
            let n = rng.random_range(1..=64);
            let (d, m) = (rng.random_range(1..=8), rng.random_range(1..=8));
            let (q, k, v) = (random(&mut rng, n, d, 1.0), random(&mut rng, n, d, 1.0), random(&mut rng, n, m, 1.0));
            let parallel = causal_linear_attention(&AttentionBatch::new(q.clone(), k.clone(), v.clone(), true, kind).unwrap()).unwrap();
            let fm = FeatureMap::new(kind, d);
            let mut state = init_state(fm.output_dim(), m).unwrap();
            for i in 0..n {
                let y = linear_step(&mut state, q.row(i), k.row(i), v.row(i), &fm).unwrap();
                for (a, b) in y.iter().zip(parallel.row(i)) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn kv_cache_equals_causal_softmax_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    let (n, d, m) = (40, 6, 5);
    let (q, k, v) = (random(&mut rng, n, d, 1.5), random(&mut rng, n, d, 1.5), random(&mut rng, n, m, 1.0));
    let want = softmax_oracle(&q, &k, &v, true);
    let mut cache = KvCache::new(d, m);
    for i in 0..n {
        let y = cache.step(q.row(i), k.row(i), v.row(i)).unwrap();
        for (a, b) in y.iter().zip(want.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert_eq!(cache.byte_size(), n * (d + m) * 8);
}

fn model(attention: AttentionKind, seed: u64) -> TransformerModel {
    TransformerModel::new(TransformerConfig { seed, ..TransformerConfig::new(2, 2, 16, 11, attention) }).unwrap()
}

#[test]
fn rnn_and_recompute_generate_the_same_tokens() {
    for seed in 0..3 {
        for attention in [AttentionKind::LinearElu1, AttentionKind::LinearPoly2] {
            let m = model(attention, seed);
            let prefix = [3, 1, 4, 1, 5];
            let rnn = generate(&m, &prefix, 64, DecodeMode::LinearRnn).unwrap();
            let naive = generate(&m, &prefix, 64, DecodeMode::NaiveRecompute).unwrap();
            assert_eq!(rnn.len(), 69);
            assert_eq!(rnn, naive, "{attention} seed {seed}");
        }
    }
}

#[test]
fn kv_cache_and_recompute_generate_the_same_tokens() {
    let m = model(AttentionKind::Softmax, 4);
    let prefix = [2, 7, 1, 8];
    assert_eq!(
        generate(&m, &prefix, 40, DecodeMode::KvCache).unwrap(),
        generate(&m, &prefix, 40, DecodeMode::NaiveRecompute).unwrap()
    );
}

#[test]
fn session_state_is_constant_for_rnn_and_grows_for_cache() {
    let lin = model(AttentionKind::LinearElu1, 5);
    let soft = model(AttentionKind::Softmax, 5);
    let mut a = DecodingSession::new(&lin, DecodeMode::LinearRnn).unwrap();
    let mut b = DecodingSession::new(&soft, DecodeMode::KvCache).unwrap();
    a.step(0).unwrap();
    b.step(0).unwrap();
    let (a1, b1) = (a.state_bytes(), b.state_bytes());
    for t in 1..100 {
        a.step(t % 11).unwrap();
        b.step(t % 11).unwrap();
    }
    assert_eq!(a.state_bytes(), a1);
    assert_eq!(b.state_bytes(), 100 * b1);
}

#[test]
fn decode_mode_parsing() {
    for mode in [DecodeMode::LinearRnn, DecodeMode::KvCache, DecodeMode::NaiveRecompute] {
        assert_eq!(mode.to_string().parse::<DecodeMode>().unwrap(), mode);
    }
    assert!("beam".parse::<DecodeMode>().is_err());
}
