//! Argument definitions and command dispatch for the `linattn` binary.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use linattn_core::bench::{
    bench_latency, bench_scaling, emit_csv, records_to_csv, BatchMode, BenchRecord, BenchSpec,
    Method, Precision,
};
use linattn_core::config::TrainConfig;
use linattn_core::train::train_copy_task_with;
use linattn_core::{generate, AttentionKind, DecodeMode, Error, FeatureMapKind, Result};

#[derive(Parser, Debug)]
#[command(name = "linattn", version, about = "Linear attention benchmarks, training and decoding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Timing and memory studies.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Training runs.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Train per a config, then continue a prefix greedily.
    Generate(GenerateArgs),
}

#[derive(Subcommand, Debug)]
pub enum BenchCommand {
    /// Forward plus backward time and auxiliary memory against sequence length.
    Scaling(BenchArgs),
    /// Time of one decoding step against position.
    Latency(BenchArgs),
}

#[derive(Subcommand, Debug)]
pub enum TrainCommand {
    /// The symbol copy task.
    Copy(TrainArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    /// Method names, comma separated (softmax, softmax-causal, linear,
    /// linear-causal, rnn-step, kv-cache, naive-recompute).
    #[arg(long, value_delimiter = ',', required = true)]
    pub method: Vec<Method>,
    /// Sequence lengths (scaling) or decoding positions (latency).
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, value_enum, default_value = "64")]
    pub precision: PrecisionArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write records here instead of stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Skip lengths whose estimated footprint exceeds this many MiB.
    #[arg(long)]
    pub memory_budget_mb: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub value_dim: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value = "elu1")]
    pub feature_map: FeatureMapKind,
    /// Sequences per timed repeat.
    #[arg(long, default_value_t = 1, conflicts_with = "per_sample_tokens")]
    pub batch: usize,
    /// Scale the batch inversely with N so each repeat covers about this
    /// many tokens, and report time per sequence.
    #[arg(long)]
    pub per_sample_tokens: Option<usize>,
}

impl BenchArgs {
    pub fn spec(&self, method: Method, latency: bool) -> BenchSpec {
        let base = if latency {
            BenchSpec::latency(method)
        } else {
            BenchSpec::new(method)
        };
        BenchSpec {
            lengths: self.lengths.clone().unwrap_or(base.lengths),
            head_dim: self.head_dim,
            value_dim: self.value_dim,
            heads: self.heads,
            feature_map: self.feature_map,
            repeats: self.repeats,
            warmup: self.warmup,
            precision: self.precision.into(),
            seed: self.seed,
            batch: match self.per_sample_tokens {
                Some(tokens) => BatchMode::PerSample { tokens },
                None => BatchMode::Fixed(self.batch),
            },
            memory_budget_bytes: self.memory_budget_mb.map(|mb| mb << 20),
            ..base
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// key = value run description; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the config's attention kind.
    #[arg(long)]
    pub attention: Option<AttentionKind>,
    /// Override the config's update count.
    #[arg(long)]
    pub updates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the training report here instead of stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Print the loss every this many updates to stderr (0 = quiet).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

impl TrainArgs {
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => TrainConfig::default(),
        };
        if let Some(a) = self.attention {
            cfg.attention = a;
        }
        if let Some(u) = self.updates {
            cfg.updates = u;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Prefix token ids, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub prefix: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub steps: usize,
    /// linear-rnn, kv-cache or naive-recompute. Defaults to the natural
    /// mode for the attention kind.
    #[arg(long)]
    pub mode: Option<DecodeMode>,
}

fn write_text(path: Option<&PathBuf>, text: &str, out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|source| Error::Io {
            path: p.clone(),
            source,
        }),
        None => out.write_all(text.as_bytes()).map_err(|source| Error::Io {
            path: PathBuf::from("<stdout>"),
            source,
        }),
    }
}

fn run_bench(args: &BenchArgs, latency: bool, out: &mut dyn Write) -> Result<Vec<BenchRecord>> {
    let mut records = Vec::new();
    for &method in &args.method {
        let spec = args.spec(method, latency);
        let recs = if latency {
            bench_latency(&spec)?
        } else {
            bench_scaling(&spec)?
        };
        for r in &recs {
            if r.skipped {
                eprintln!("{} n={}: skipped, over the memory budget", r.method, r.n);
            } else {
                eprintln!(
                    "{} n={}: {:.4} ms ± {:.4}, {} aux bytes",
                    r.method, r.n, r.time_ms_mean, r.time_ms_std, r.peak_aux_bytes
                );
            }
        }
        records.extend(recs);
    }
    match &args.csv {
        Some(path) => emit_csv(&records, path)?,
        None => write_text(None, &records_to_csv(&records), out)?,
    }
    Ok(records)
}

/// Runs a parsed command, writing primary output (CSV, tokens) to `out`
/// and progress to stderr.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Bench(BenchCommand::Scaling(args)) => run_bench(args, false, out).map(drop),
        Command::Bench(BenchCommand::Latency(args)) => run_bench(args, true, out).map(drop),
        Command::Train(TrainCommand::Copy(args)) => {
            let cfg = args.train_config()?;
            let (_, report) = train_copy_task_with(&cfg.model_config(), &cfg.task_spec(), |step, loss| {
                if args.log_every > 0 && step % args.log_every == 0 {
                    eprintln!("update {step}: loss {loss:.5}");
                }
            })?;
            eprintln!("accuracy {:.4}", report.accuracy);
            write_text(args.csv.as_ref(), &report.to_csv(), out)?;
            match report.failed {
                Some(why) => Err(Error::Invalid(format!("training diverged: {why}"))),
                None => Ok(()),
            }
        }
        Command::Generate(args) => {
            let cfg = args.train.train_config()?;
            let (model, report) = train_copy_task_with(&cfg.model_config(), &cfg.task_spec(), |_, _| {})?;
            if let Some(why) = report.failed {
                return Err(Error::Invalid(format!("training diverged: {why}")));
            }
            let mode = args.mode.unwrap_or(if cfg.attention.is_linear() {
                DecodeMode::LinearRnn
            } else {
                DecodeMode::KvCache
            });
            let tokens = generate(&model, &args.prefix, args.steps, mode)?;
            let line: Vec<String> = tokens.iter().map(usize::to_string).collect();
            write_text(None, &format!("{}\n", line.join(",")), out)
        }
    }
}
