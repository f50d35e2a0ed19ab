//! Timing and allocation harness.
//!
//! [`bench_scaling`] times a forward plus backward pass of one attention
//! method at each sequence length. [`bench_latency`] times a single
//! decoding step at given positions. Both report wall-clock mean and
//! standard deviation in milliseconds and the auxiliary heap bytes of the
//! kernel, measured in an extra untimed run with inputs and outputs
//! allocated beforehand. Allocation numbers are only meaningful when the
//! running binary installs [`CountingAllocator`](crate::alloc_counter::CountingAllocator);
//! otherwise they read 0.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alloc_counter::measure;
use crate::attention::{
    causal_normalized_backward_into, causal_normalized_forward_into,
    linear_normalized_backward_into, linear_normalized_forward_into,
    softmax_attention_backward_into, softmax_attention_forward_into, FeatureMap, FeatureMapKind,
};
use crate::error::{Error, Result};
use crate::init::random_matrix;
use crate::matrix::{Matrix, Real};
use crate::recurrent::{init_state, naive_recompute_step, KvCache, RecurrentState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Softmax,
    SoftmaxCausal,
    Linear,
    LinearCausal,
    RnnStep,
    KvCache,
    NaiveRecompute,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Softmax,
        Method::SoftmaxCausal,
        Method::Linear,
        Method::LinearCausal,
        Method::RnnStep,
        Method::KvCache,
        Method::NaiveRecompute,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Softmax => "softmax",
            Self::SoftmaxCausal => "softmax-causal",
            Self::Linear => "linear",
            Self::LinearCausal => "linear-causal",
            Self::RnnStep => "rnn-step",
            Self::KvCache => "kv-cache",
            Self::NaiveRecompute => "naive-recompute",
        }
    }

    /// Whether the method is a decoding step rather than a full pass.
    pub fn is_decoding(self) -> bool {
        matches!(self, Self::RnnStep | Self::KvCache | Self::NaiveRecompute)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::F32 => "32",
            Self::F64 => "64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" | "f32" => Ok(Self::F32),
            "64" | "f64" => Ok(Self::F64),
            other => Err(Error::Parse(format!("precision must be 32 or 64, got `{other}`"))),
        }
    }
}

/// How many sequences each timed repeat processes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// A fixed number of sequences; times are per batch.
    Fixed(usize),
    /// `max(1, tokens / N)` sequences, so every length processes about the
    /// same number of tokens; times are divided by the batch size.
    PerSample { tokens: usize },
}

impl BatchMode {
    fn size(self, n: usize) -> usize {
        match self {
            Self::Fixed(b) => b.max(1),
            Self::PerSample { tokens } => (tokens / n.max(1)).max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub method: Method,
    /// Sequence lengths for scaling runs, decoding positions for latency
    /// runs. Strictly increasing.
    pub lengths: Vec<usize>,
    pub head_dim: usize,
    pub value_dim: usize,
    pub heads: usize,
    pub feature_map: FeatureMapKind,
    pub repeats: usize,
    pub warmup: usize,
    pub precision: Precision,
    pub seed: u64,
    pub batch: BatchMode,
    /// Lengths whose estimated footprint exceeds this are skipped.
    pub memory_budget_bytes: Option<usize>,
}

impl BenchSpec {
    /// Lengths 2⁹…2¹³, D = M = 32, one head, elu1 features, 5 repeats
    /// after 1 warmup run, 64-bit.
    pub fn new(method: Method) -> Self {
        Self {
            method,
            lengths: (9..=13).map(|p| 1usize << p).collect(),
            head_dim: 32,
            value_dim: 32,
            heads: 1,
            feature_map: FeatureMapKind::Elu1,
            repeats: 5,
            warmup: 1,
            precision: Precision::F64,
            seed: 0,
            batch: BatchMode::Fixed(1),
            memory_budget_bytes: None,
        }
    }

    /// Decoding positions 10, 100 and 1000.
    pub fn latency(method: Method) -> Self {
        Self {
            lengths: vec![10, 100, 1000],
            ..Self::new(method)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("lengths must be non-empty and strictly increasing".into()));
        }
        if self.lengths[0] == 0 {
            return Err(Error::Invalid("lengths must be positive".into()));
        }
        if self.repeats < 3 {
            return Err(Error::Invalid(format!("repeats must be at least 3, got {}", self.repeats)));
        }
        if self.head_dim == 0 || self.value_dim == 0 || self.heads == 0 {
            return Err(Error::Invalid("dimensions and head count must be positive".into()));
        }
        if self.feature_map == FeatureMapKind::IdentityPositiveCheck {
            return Err(Error::Invalid(
                "identity-positive-check rejects the signed random inputs used here".into(),
            ));
        }
        Ok(())
    }

    fn feature_dim(&self) -> usize {
        FeatureMap::new(self.feature_map, self.head_dim).output_dim()
    }

    /// Rough upper bound on the bytes one run at length `n` holds.
    pub fn estimated_bytes(&self, n: usize) -> usize {
        let (d, m, c) = (self.head_dim, self.value_dim, self.feature_dim());
        let elems = match self.method {
            Method::Softmax | Method::SoftmaxCausal | Method::NaiveRecompute => {
                2 * n * n + n * (3 * d + 4 * m)
            }
            Method::Linear | Method::LinearCausal => n * (3 * d + 4 * m + 4 * c + 1) + c * m + c,
            Method::RnnStep => n * (2 * d + 2 * m) + c * m + c,
            Method::KvCache => n * (3 * d + 3 * m),
        };
        elems * self.precision.bytes()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub method: Method,
    pub n: usize,
    pub time_ms_mean: f64,
    pub time_ms_std: f64,
    /// Median of the repeats, kept when there are at least five.
    pub time_ms_median: Option<f64>,
    pub peak_aux_bytes: usize,
    /// Over the memory budget; no measurement was taken.
    pub skipped: bool,
}

impl BenchRecord {
    fn skipped(method: Method, n: usize) -> Self {
        Self {
            method,
            n,
            time_ms_mean: f64::NAN,
            time_ms_std: f64::NAN,
            time_ms_median: None,
            peak_aux_bytes: 0,
            skipped: true,
        }
    }

    fn from_samples(method: Method, n: usize, samples_ms: &[f64], peak_aux_bytes: usize) -> Self {
        let (mean, std) = mean_std(samples_ms);
        Self {
            method,
            n,
            time_ms_mean: mean,
            time_ms_std: std,
            time_ms_median: (samples_ms.len() >= 5).then(|| median(samples_ms)),
            peak_aux_bytes,
            skipped: false,
        }
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|&(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|&(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Slope of mean time against N over the measured records of `method`.
pub fn scaling_slope(records: &[BenchRecord], method: Method) -> Option<f64> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.method == method && !r.skipped)
        .map(|r| (r.n as f64, r.time_ms_mean))
        .collect();
    (pts.len() >= 2).then(|| log_log_slope(&pts))
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Buffers for one forward plus backward pass; everything a kernel reads
/// or writes lives here so that the measured scope sees only auxiliary
/// allocations.
struct PassBuffers<T: Real> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    g: Matrix<T>,
    qf: Matrix<T>,
    kf: Matrix<T>,
    gqf: Matrix<T>,
    gkf: Matrix<T>,
    out: Matrix<T>,
    denom: Vec<T>,
    gq: Matrix<T>,
    gk: Matrix<T>,
    gv: Matrix<T>,
}

impl<T: Real> PassBuffers<T> {
    fn new(spec: &BenchSpec, n: usize, rng: &mut ChaCha8Rng) -> Self {
        let (d, m) = (spec.head_dim, spec.value_dim);
        let c = if matches!(spec.method, Method::Linear | Method::LinearCausal) {
            spec.feature_dim()
        } else {
            0
        };
        Self {
            q: random_matrix(rng, n, d, 1.0),
            k: random_matrix(rng, n, d, 1.0),
            v: random_matrix(rng, n, m, 1.0),
            g: random_matrix(rng, n, m, 1.0),
            qf: Matrix::zeros(n, c),
            kf: Matrix::zeros(n, c),
            gqf: Matrix::zeros(n, c),
            gkf: Matrix::zeros(n, c),
            out: Matrix::zeros(n, m),
            denom: vec![T::zero(); n],
            gq: Matrix::zeros(n, d),
            gk: Matrix::zeros(n, d),
            gv: Matrix::zeros(n, m),
        }
    }

    fn run(&mut self, method: Method, fmap: &FeatureMap) -> Result<()> {
        match method {
            Method::Softmax | Method::SoftmaxCausal => {
                let causal = method == Method::SoftmaxCausal;
                let probs =
                    softmax_attention_forward_into(&self.q, &self.k, &self.v, causal, &mut self.out)?;
                softmax_attention_backward_into(
                    &self.q, &self.k, &self.v, &probs, &self.g, &mut self.gq, &mut self.gk,
                    &mut self.gv,
                )
            }
            Method::Linear | Method::LinearCausal => {
                fmap.apply_rows_into(&self.q, &mut self.qf)?;
                fmap.apply_rows_into(&self.k, &mut self.kf)?;
                if method == Method::LinearCausal {
                    causal_normalized_forward_into(&self.qf, &self.kf, &self.v, &mut self.out, &mut self.denom)?;
                    causal_normalized_backward_into(
                        &self.qf, &self.kf, &self.v, &self.out, &self.denom, &self.g,
                        &mut self.gqf, &mut self.gkf, &mut self.gv,
                    )?;
                } else {
                    linear_normalized_forward_into(&self.qf, &self.kf, &self.v, &mut self.out, &mut self.denom)?;
                    linear_normalized_backward_into(
                        &self.qf, &self.kf, &self.v, &self.out, &self.denom, &self.g,
                        &mut self.gqf, &mut self.gkf, &mut self.gv,
                    )?;
                }
                fmap.backward_rows_into(&self.q, &self.gqf, &mut self.gq)?;
                fmap.backward_rows_into(&self.k, &self.gkf, &mut self.gk)
            }
            _ => unreachable!("decoding methods use their own buffers"),
        }
    }
}

/// Sequential decoding of `n` tokens, forward only.
struct DecodeRun<T: Real> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    qf: Vec<T>,
    kf: Vec<T>,
    y: Vec<T>,
    state: RecurrentState<T>,
    cache: KvCache<T>,
}

impl<T: Real> DecodeRun<T> {
    fn new(spec: &BenchSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, m, c) = (spec.head_dim, spec.value_dim, spec.feature_dim());
        Ok(Self {
            q: random_matrix(rng, n, d, 1.0),
            k: random_matrix(rng, n, d, 1.0),
            v: random_matrix(rng, n, m, 1.0),
            qf: vec![T::zero(); c],
            kf: vec![T::zero(); c],
            y: vec![T::zero(); m],
            state: init_state(c, m)?,
            cache: KvCache::new(d, m),
        })
    }

    fn rnn_step(&mut self, i: usize, fmap: &FeatureMap) -> Result<()> {
        fmap.apply_into(self.q.row(i), &mut self.qf)?;
        fmap.apply_into(self.k.row(i), &mut self.kf)?;
        self.state.step_features(&self.qf, &self.kf, self.v.row(i), &mut self.y)
    }

    fn kv_step(&mut self, i: usize) -> Result<()> {
        self.cache.step_into(self.q.row(i), self.k.row(i), self.v.row(i), &mut self.y)
    }
}

fn seeded(spec: &BenchSpec, n: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(n as u64);
    rng
}

fn over_budget(spec: &BenchSpec, n: usize) -> bool {
    spec.memory_budget_bytes
        .is_some_and(|b| spec.estimated_bytes(n) > b)
}

/// Times a forward plus backward pass (or, for `rnn-step` and `kv-cache`,
/// decoding all `N` tokens one by one) at every length of `spec`.
pub fn bench_scaling(spec: &BenchSpec) -> Result<Vec<BenchRecord>> {
    spec.validate()?;
    if spec.method == Method::NaiveRecompute {
        return Err(Error::Invalid(
            "naive-recompute is cubic in N; use it with bench_latency".into(),
        ));
    }
    match spec.precision {
        Precision::F32 => scaling_impl::<f32>(spec),
        Precision::F64 => scaling_impl::<f64>(spec),
    }
}

fn scaling_impl<T: Real>(spec: &BenchSpec) -> Result<Vec<BenchRecord>> {
    let fmap = FeatureMap::new(spec.feature_map, spec.head_dim);
    let mut records = Vec::with_capacity(spec.lengths.len());
    for &n in &spec.lengths {
        if over_budget(spec, n) {
            records.push(BenchRecord::skipped(spec.method, n));
            continue;
        }
        let mut rng = seeded(spec, n);
        let batch = spec.batch.size(n);
        let calls = batch * spec.heads;
        let divisor = match spec.batch {
            BatchMode::Fixed(_) => 1.0,
            BatchMode::PerSample { .. } => batch as f64,
        };

        let (samples, aux) = if spec.method.is_decoding() {
            let mut run = DecodeRun::<T>::new(spec, n, &mut rng)?;
            let once = |run: &mut DecodeRun<T>| -> Result<()> {
                run.state = init_state(run.qf.len(), run.y.len())?;
                run.cache.truncate(0);
                for i in 0..n {
                    match spec.method {
                        Method::RnnStep => run.rnn_step(i, &fmap)?,
                        _ => run.kv_step(i)?,
                    }
                }
                Ok(())
            };
            let mut samples = Vec::with_capacity(spec.repeats);
            for r in 0..spec.warmup + spec.repeats {
                let start = Instant::now();
                for _ in 0..calls {
                    once(&mut run)?;
                }
                if r >= spec.warmup {
                    samples.push(ms(start.elapsed()) / divisor);
                }
            }
            let bytes = match spec.method {
                Method::RnnStep => run.state.byte_size(),
                _ => run.cache.byte_size(),
            };
            (samples, bytes * spec.heads)
        } else {
            let mut bufs = PassBuffers::<T>::new(spec, n, &mut rng);
            let mut samples = Vec::with_capacity(spec.repeats);
            for r in 0..spec.warmup + spec.repeats {
                let start = Instant::now();
                for _ in 0..calls {
                    bufs.run(spec.method, &fmap)?;
                }
                if r >= spec.warmup {
                    samples.push(ms(start.elapsed()) / divisor);
                }
            }
            let (res, stats) = measure(|| bufs.run(spec.method, &fmap));
            res?;
            (samples, stats.peak_bytes)
        };
        records.push(BenchRecord::from_samples(spec.method, n, &samples, aux));
    }
    Ok(records)
}

/// Time of one decoding step at each position `p` in `spec.lengths`,
/// i.e. producing output `p + 1` with `p` tokens already consumed.
/// `peak_aux_bytes` is the per-sequence decoding state (recurrent state or
/// cached keys and values) at that point, and for `naive-recompute` the
/// measured allocations of the step.
pub fn bench_latency(spec: &BenchSpec) -> Result<Vec<BenchRecord>> {
    spec.validate()?;
    if !spec.method.is_decoding() {
        return Err(Error::Invalid(format!(
            "{} is not a decoding method (rnn-step, kv-cache, naive-recompute)",
            spec.method
        )));
    }
    match spec.precision {
        Precision::F32 => latency_impl::<f32>(spec),
        Precision::F64 => latency_impl::<f64>(spec),
    }
}

/// Repeats `step` (bracketed by untimed `reset`) until about a millisecond
/// of step time has accumulated; returns milliseconds per step.
fn time_steps<S>(
    target: Duration,
    mut reset: impl FnMut(&mut S),
    mut step: impl FnMut(&mut S) -> Result<()>,
    state: &mut S,
) -> Result<f64> {
    let mut spent = Duration::ZERO;
    let mut count = 0u32;
    while spent < target || count == 0 {
        reset(state);
        let start = Instant::now();
        step(state)?;
        spent += start.elapsed();
        count += 1;
    }
    Ok(ms(spent) / f64::from(count))
}

fn latency_impl<T: Real>(spec: &BenchSpec) -> Result<Vec<BenchRecord>> {
    let fmap = FeatureMap::new(spec.feature_map, spec.head_dim);
    let target = Duration::from_millis(2);
    let mut records = Vec::with_capacity(spec.lengths.len());
    for &p in &spec.lengths {
        if over_budget(spec, p + 1) {
            records.push(BenchRecord::skipped(spec.method, p));
            continue;
        }
        let mut rng = seeded(spec, p);
        let mut run = DecodeRun::<T>::new(spec, p + 1, &mut rng)?;
        let heads = spec.heads;
        let mut samples = Vec::with_capacity(spec.repeats);
        let aux = match spec.method {
            Method::RnnStep => {
                for i in 0..p {
                    run.rnn_step(i, &fmap)?;
                }
                let snapshot = run.state.clone();
                for r in 0..spec.warmup + spec.repeats {
                    let t = time_steps(
                        target,
                        |run: &mut DecodeRun<T>| run.state.restore_from(&snapshot),
                        |run| {
                            for _ in 0..heads {
                                run.rnn_step(p, &fmap)?;
                            }
                            Ok(())
                        },
                        &mut run,
                    )?;
                    if r >= spec.warmup {
                        samples.push(t);
                    }
                }
                run.state.byte_size() * heads
            }
            Method::KvCache => {
                for i in 0..p {
                    run.kv_step(i)?;
                }
                for r in 0..spec.warmup + spec.repeats {
                    let t = time_steps(
                        target,
                        |run: &mut DecodeRun<T>| run.cache.truncate(p),
                        |run| {
                            for _ in 0..heads {
                                run.kv_step(p)?;
                                run.cache.truncate(p);
                            }
                            Ok(())
                        },
                        &mut run,
                    )?;
                    if r >= spec.warmup {
                        samples.push(t);
                    }
                }
                run.kv_step(p)?;
                run.cache.byte_size() * heads
            }
            Method::NaiveRecompute => {
                let step = |run: &mut DecodeRun<T>| -> Result<()> {
                    for _ in 0..heads {
                        std::hint::black_box(naive_recompute_step(&run.q, &run.k, &run.v)?);
                    }
                    Ok(())
                };
                for r in 0..spec.warmup + spec.repeats {
                    let t = time_steps(target, |_: &mut DecodeRun<T>| {}, step, &mut run)?;
                    if r >= spec.warmup {
                        samples.push(t);
                    }
                }
                let (res, stats) = measure(|| naive_recompute_step(&run.q, &run.k, &run.v));
                res?;
                stats.peak_bytes
            }
            _ => unreachable!(),
        };
        records.push(BenchRecord::from_samples(spec.method, p, &samples, aux));
    }
    Ok(records)
}

pub const CSV_HEADER: &str = "method,n,time_ms_mean,time_ms_std,peak_aux_bytes";

/// CSV text for the measured records, sorted by method name then `n`.
/// Skipped records are left out.
pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut rows: Vec<&BenchRecord> = records.iter().filter(|r| !r.skipped).collect();
    rows.sort_by(|a, b| a.method.name().cmp(b.method.name()).then(a.n.cmp(&b.n)));
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.method, r.n, r.time_ms_mean, r.time_ms_std, r.peak_aux_bytes
        )
        .unwrap();
    }
    out
}

pub fn emit_csv(records: &[BenchRecord], path: &Path) -> Result<()> {
    std::fs::write(path, records_to_csv(records)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses text produced by [`records_to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Parse(format!("expected header `{CSV_HEADER}`, got {other:?}")))
        }
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |what: &str| Error::Parse(format!("row {}: bad {what} in `{line}`", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad("field count"));
            }
            Ok(BenchRecord {
                method: f[0].parse()?,
                n: f[1].parse().map_err(|_| bad("n"))?,
                time_ms_mean: f[2].parse().map_err(|_| bad("mean"))?,
                time_ms_std: f[3].parse().map_err(|_| bad("std"))?,
                time_ms_median: None,
                peak_aux_bytes: f[4].parse().map_err(|_| bad("peak_aux_bytes"))?,
                skipped: false,
            })
        })
        .collect()
}
