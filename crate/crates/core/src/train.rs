//! The copy task: reproduce a random symbol string after a separator.
//!
//! A sequence of length `seq_len` holds `k = (seq_len - 1) / 2` random
//! symbols from `0..symbols`, the separator token `symbols`, then the same
//! `k` symbols again (one trailing slot is unused when `seq_len` is even).
//! The model reads `seq[..n-1]` and predicts `seq[1..]` under causal
//! masking. Only the separator and the copied half contribute to the
//! loss, since the first half is unpredictable noise.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{TransformerConfig, TransformerModel};
use crate::optim::{LrSchedule, Optimizer, OptimizerKind};
use crate::recurrent::argmax;

#[derive(Clone, Debug, PartialEq)]
pub struct CopyTaskSpec {
    pub seq_len: usize,
    pub symbols: usize,
    pub updates: usize,
    /// Sequences per update; their gradients are averaged.
    pub batch: usize,
    pub schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    /// Held-out sequences used for the final accuracy.
    pub eval_sequences: usize,
    pub seed: u64,
}

impl CopyTaskSpec {
    /// Symbols in each half.
    pub fn half_len(&self) -> usize {
        (self.seq_len - 1) / 2
    }

    pub fn separator(&self) -> usize {
        self.symbols
    }

    pub fn validate(&self, config: &TransformerConfig) -> Result<()> {
        if self.seq_len < 3 || self.symbols == 0 || self.batch == 0 || self.eval_sequences == 0 {
            return Err(Error::Invalid(
                "copy task needs seq_len ≥ 3 and positive symbols, batch and eval_sequences".into(),
            ));
        }
        if config.vocab_size < self.symbols + 1 {
            return Err(Error::Invalid(format!(
                "model vocabulary {} cannot hold {} symbols plus a separator",
                config.vocab_size, self.symbols
            )));
        }
        Ok(())
    }
}

/// One training example in next-token form.
#[derive(Clone, Debug, PartialEq)]
pub struct CopyExample {
    pub sequence: Vec<usize>,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// 1 on the separator and copied targets, 0 elsewhere.
    pub weights: Vec<f64>,
    /// Target indices of the copied half.
    pub copied: std::ops::Range<usize>,
}

pub fn copy_example(rng: &mut impl Rng, task: &CopyTaskSpec) -> CopyExample {
    let k = task.half_len();
    let first: Vec<usize> = (0..k).map(|_| rng.random_range(0..task.symbols)).collect();
    let mut sequence = first.clone();
    sequence.push(task.separator());
    sequence.extend_from_slice(&first);
    let inputs = sequence[..sequence.len() - 1].to_vec();
    let targets = sequence[1..].to_vec();
    // target j predicts sequence[j + 1]; the separator sits at index k
    let weights = (0..targets.len())
        .map(|j| if j + 1 >= k { 1.0 } else { 0.0 })
        .collect();
    CopyExample {
        sequence,
        inputs,
        targets,
        weights,
        copied: k..2 * k,
    }
}

fn data_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingReport {
    /// Mean batch loss of each update.
    pub losses: Vec<f64>,
    /// Learning rate used by each update.
    pub lrs: Vec<f64>,
    /// Teacher-forced accuracy on the copied half of held-out sequences.
    pub accuracy: f64,
    /// Set when training stopped on a non-finite loss.
    pub failed: Option<String>,
}

impl TrainingReport {
    /// Mean loss of the last `window` updates (all of them if fewer).
    pub fn final_loss(&self, window: usize) -> f64 {
        let n = self.losses.len().min(window.max(1));
        if n == 0 {
            return f64::NAN;
        }
        self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64
    }

    pub fn succeeded(&self) -> bool {
        self.failed.is_none()
    }

    /// `step,loss,lr` rows followed by `accuracy,<value>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,lr\n");
        for (i, (loss, lr)) in self.losses.iter().zip(&self.lrs).enumerate() {
            writeln!(out, "{},{},{}", i + 1, loss, lr).unwrap();
        }
        writeln!(out, "accuracy,{}", self.accuracy).unwrap();
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Fraction of copied-half targets predicted correctly (greedy, teacher
/// forced) over `task.eval_sequences` held-out sequences.
pub fn copy_accuracy(model: &TransformerModel, task: &CopyTaskSpec) -> Result<f64> {
    let mut rng = data_rng(task.seed, EVAL_STREAM);
    let (mut hits, mut total) = (0usize, 0usize);
    for _ in 0..task.eval_sequences {
        let ex = copy_example(&mut rng, task);
        let logits = model.logits(&ex.inputs)?;
        for j in ex.copied.clone() {
            hits += usize::from(argmax(logits.row(j)) == ex.targets[j]);
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Trains a fresh model and reports the loss curve and held-out accuracy.
pub fn train_copy_task(
    config: &TransformerConfig,
    task: &CopyTaskSpec,
) -> Result<(TransformerModel, TrainingReport)> {
    train_copy_task_with(config, task, |_, _| {})
}

/// [`train_copy_task`] calling `progress(step, loss)` after every update.
pub fn train_copy_task_with(
    config: &TransformerConfig,
    task: &CopyTaskSpec,
    mut progress: impl FnMut(usize, f64),
) -> Result<(TransformerModel, TrainingReport)> {
    task.validate(config)?;
    let mut model = TransformerModel::new(config.clone())?;
    let mut opt = Optimizer::new(task.optimizer, task.schedule);
    let mut rng = data_rng(task.seed, TRAIN_STREAM);
    let mut losses = Vec::with_capacity(task.updates);
    let mut lrs = Vec::with_capacity(task.updates);
    let mut failed = None;

    for step in 1..=task.updates {
        let mut acc: Vec<Matrix> = model
            .params()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        let mut loss = 0.0;
        for _ in 0..task.batch {
            let ex = copy_example(&mut rng, task);
            let (l, grads) = model.loss_and_grads(&ex.inputs, &ex.targets, &ex.weights)?;
            loss += l;
            for (a, g) in acc.iter_mut().zip(&grads) {
                a.add_assign(g)?;
            }
        }
        let inv = 1.0 / task.batch as f64;
        loss *= inv;
        if !loss.is_finite() {
            failed = Some(format!("non-finite loss at update {step}"));
            break;
        }
        for a in &mut acc {
            a.data_mut().iter_mut().for_each(|x| *x *= inv);
        }
        lrs.push(opt.current_lr());
        opt.step(&mut model.params_mut(), &acc)?;
        losses.push(loss);
        progress(step, loss);
    }

    let accuracy = if failed.is_none() {
        copy_accuracy(&model, task)?
    } else {
        0.0
    };
    Ok((
        model,
        TrainingReport {
            losses,
            lrs,
            accuracy,
            failed,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionKind;

    fn task(updates: usize) -> CopyTaskSpec {
        CopyTaskSpec {
            seq_len: 11,
            symbols: 4,
            updates,
            batch: 2,
            schedule: LrSchedule::constant(1e-3),
            optimizer: OptimizerKind::RAdam,
            eval_sequences: 32,
            seed: 3,
        }
    }

    #[test]
    fn example_layout() {
        let t = task(0);
        let ex = copy_example(&mut data_rng(1, 1), &t);
        assert_eq!(ex.sequence.len(), 11);
        assert_eq!(ex.sequence[5], 4);
        assert_eq!(ex.sequence[..5], ex.sequence[6..]);
        assert_eq!(ex.inputs.len(), 10);
        assert_eq!(ex.targets[4], 4);
        assert_eq!(ex.weights, [0., 0., 0., 0., 1., 1., 1., 1., 1., 1.]);
        assert_eq!(ex.copied, 5..10);
    }

    #[test]
    fn even_length_leaves_a_slot() {
        let t = CopyTaskSpec { seq_len: 32, ..task(0) };
        let ex = copy_example(&mut data_rng(1, 1), &t);
        assert_eq!(ex.sequence.len(), 31);
    }

    #[test]
    fn untrained_accuracy_near_chance() {
        let t = task(0);
        let cfg = TransformerConfig::new(1, 2, 8, 5, AttentionKind::LinearElu1);
        let (_, report) = train_copy_task(&cfg, &t).unwrap();
        assert!(report.losses.is_empty());
        assert!((report.accuracy - 0.25).abs() <= 0.1, "{}", report.accuracy);
    }

    #[test]
    fn training_is_deterministic() {
        let t = task(3);
        let cfg = TransformerConfig::new(1, 2, 8, 5, AttentionKind::LinearElu1);
        let (_, a) = train_copy_task(&cfg, &t).unwrap();
        let (_, b) = train_copy_task(&cfg, &t).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.losses.len(), 3);
    }

    #[test]
    fn nan_loss_is_reported_not_raised() {
        let t = CopyTaskSpec {
            schedule: LrSchedule::constant(f64::NAN),
            updates: 4,
            ..task(0)
        };
        let cfg = TransformerConfig::new(1, 2, 8, 5, AttentionKind::Softmax);
        let (_, report) = train_copy_task(&cfg, &t).unwrap();
        assert!(!report.succeeded());
    }

    #[test]
    fn csv_layout() {
        let r = TrainingReport {
            losses: vec![2.5, 1.25],
            lrs: vec![1e-3, 1e-4],
            accuracy: 0.5,
            failed: None,
        };
        assert_eq!(r.to_csv(), "step,loss,lr\n1,2.5,0.001\n2,1.25,0.0001\naccuracy,0.5\n");
        assert_eq!(r.final_loss(1), 1.25);
        assert_eq!(r.final_loss(10), 1.875);
    }

    #[test]
    fn vocabulary_must_hold_separator() {
        let cfg = TransformerConfig::new(1, 2, 8, 4, AttentionKind::Softmax);
        assert!(train_copy_task(&cfg, &task(1)).is_err());
    }
}
