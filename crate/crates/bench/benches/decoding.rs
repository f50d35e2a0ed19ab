use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use linattn_bench::{Inputs, HEAD_DIM};
use linattn_core::recurrent::{init_state, naive_recompute_step};
use linattn_core::{FeatureMap, FeatureMapKind, KvCache, Matrix};

const POSITIONS: [usize; 3] = [10, 100, 1000];

/// Cost of producing the token at each position, given everything before it.
fn decode_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("decode-step");
    let fm = FeatureMap::new(FeatureMapKind::Elu1, HEAD_DIM);
    for pos in POSITIONS {
        let x = Inputs::new(pos + 1, 4);
        let (qf, kf) = x.features();

        let mut state = init_state(fm.output_dim(), HEAD_DIM).unwrap();
        let mut y = vec![0.0; HEAD_DIM];
        for i in 0..pos {
            state.step_features(qf.row(i), kf.row(i), x.v.row(i), &mut y).unwrap();
        }
        group.bench_with_input(BenchmarkId::new("rnn-step", pos), &pos, |b, &p| {
            b.iter_batched_ref(
                || state.clone(),
                |s| s.step_features(qf.row(p), kf.row(p), x.v.row(p), &mut y).unwrap(),
                BatchSize::SmallInput,
            )
        });

        let mut cache = KvCache::new(HEAD_DIM, HEAD_DIM);
        for i in 0..pos {
            cache.step_into(x.q.row(i), x.k.row(i), x.v.row(i), &mut y).unwrap();
        }
        group.bench_with_input(BenchmarkId::new("kv-cache", pos), &pos, |b, &p| {
            b.iter(|| {
                cache.step_into(x.q.row(p), x.k.row(p), x.v.row(p), &mut y).unwrap();
                cache.truncate(p);
            })
        });

        let prefix = |m: &Matrix| m.slice_rows(0, pos + 1).unwrap();
        let (q, k, v) = (prefix(&x.q), prefix(&x.k), prefix(&x.v));
        group.bench_with_input(BenchmarkId::new("naive-recompute", pos), &pos, |b, _| {
            b.iter(|| black_box(naive_recompute_step(&q, &k, &v).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, decode_step);
criterion_main!(benches);
