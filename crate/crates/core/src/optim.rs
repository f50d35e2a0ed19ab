//! Optimizers and learning-rate schedules.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;

/// Piecewise-constant learning rate: `base` until `drop_step` updates have
/// been taken, `dropped` afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub dropped: f64,
    pub drop_step: usize,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            base: lr,
            dropped: lr,
            drop_step: usize::MAX,
        }
    }

    /// Learning rate 10⁻³ dropping to 10⁻⁴ after `drop_step` updates.
    pub fn step_drop(drop_step: usize) -> Self {
        Self {
            base: 1e-3,
            dropped: 1e-4,
            drop_step,
        }
    }

    /// Rate for the `step`-th update (1-based).
    pub fn lr(&self, step: usize) -> f64 {
        if step > self.drop_step {
            self.dropped
        } else {
            self.base
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    /// Adam with the variance rectification term.
    RAdam,
    /// Plain Adam with a linear learning-rate warmup.
    AdamWarmup,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RAdam => "radam",
            Self::AdamWarmup => "adam-warmup",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radam" => Ok(Self::RAdam),
            "adam-warmup" | "adam" => Ok(Self::AdamWarmup),
            other => Err(Error::Parse(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Linear warmup length used by [`OptimizerKind::AdamWarmup`].
pub const WARMUP_STEPS: usize = 500;

/// Threshold on the length of the approximated SMA below which the
/// adaptive term is switched off.
pub const RECTIFY_THRESHOLD: f64 = 5.0;

/// Adam-family optimizer state for a list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: usize,
}

impl Optimizer {
    /// β₁ = 0.9, β₂ = 0.999, ε = 10⁻⁸. Moments are created lazily on the
    /// first step.
    pub fn new(kind: OptimizerKind, schedule: LrSchedule) -> Self {
        Self {
            kind,
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn radam(schedule: LrSchedule) -> Self {
        Self::new(OptimizerKind::RAdam, schedule)
    }

    /// Updates taken so far.
    pub fn steps(&self) -> usize {
        self.t
    }

    /// Learning rate the next update will use, warmup included.
    pub fn current_lr(&self) -> f64 {
        self.effective_lr(self.t + 1)
    }

    fn effective_lr(&self, step: usize) -> f64 {
        let lr = self.schedule.lr(step);
        match self.kind {
            OptimizerKind::RAdam => lr,
            OptimizerKind::AdamWarmup => lr * (step as f64 / WARMUP_STEPS as f64).min(1.0),
        }
    }

    /// Applies one update in place. `grads[i]` must match `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return shape_err(
                "optimizer_step",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            );
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return shape_err(
                    "optimizer_step",
                    format!("parameter {i} is {:?}, gradient {:?}", p.shape(), g.shape()),
                );
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len()
            || self.m.iter().zip(grads).any(|(m, g)| m.shape() != g.shape())
        {
            return shape_err("optimizer_step", "parameter set changed between steps");
        }

        self.t += 1;
        let t = self.t as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let lr = self.effective_lr(self.t);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);

        // Some(r) applies the adaptive step scaled by r; None means
        // momentum only.
        let rect = match self.kind {
            OptimizerKind::AdamWarmup => Some(1.0),
            OptimizerKind::RAdam => {
                let rho_inf = 2.0 / (1.0 - b2) - 1.0;
                let rho_t = rho_inf - 2.0 * t * b2.powf(t) / bc2;
                (rho_t > RECTIFY_THRESHOLD).then(|| {
                    (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                        / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                        .sqrt()
                })
            }
        };

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let p = p.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                p[i] -= match rect {
                    Some(r) => lr * r * m_hat / ((v[i] / bc2).sqrt() + self.eps),
                    None => lr * m_hat,
                };
            }
        }
        Ok(())
    }
}

/// One update of `params` with `grads`, creating optimizer state on first
/// use.
pub fn optimizer_step(
    optimizer: &mut Optimizer,
    params: &mut [&mut Matrix],
    grads: &[Matrix],
) -> Result<()> {
    optimizer.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Matrix {
        Matrix::filled(1, 1, x)
    }

    #[test]
    fn zero_gradients_leave_params() {
        for kind in [OptimizerKind::RAdam, OptimizerKind::AdamWarmup] {
            let mut opt = Optimizer::new(kind, LrSchedule::constant(1e-3));
            let mut p = Matrix::from_rows(&[[1.0, -2.0], [3.0, 0.5]]);
            let before = p.clone();
            for _ in 0..10 {
                opt.step(&mut [&mut p], &[Matrix::zeros(2, 2)]).unwrap();
            }
            assert_eq!(p, before);
        }
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut opt = Optimizer::radam(LrSchedule::constant(0.0));
        let mut p = scalar(0.25);
        for _ in 0..20 {
            opt.step(&mut [&mut p], &[scalar(3.0)]).unwrap();
        }
        assert_eq!(p.get(0, 0), 0.25);
    }

    #[test]
    fn first_radam_step_is_plain_momentum() {
        // ρ₁ = 1 < 5, so θ ← θ − lr·m̂ with m̂ = g.
        let mut opt = Optimizer::radam(LrSchedule::step_drop(3000));
        let mut p = scalar(0.0);
        opt.step(&mut [&mut p], &[scalar(1.0)]).unwrap();
        assert!((p.get(0, 0) + 1e-3).abs() < 1e-15);
    }

    #[test]
    fn rectified_steps_match_hand_computation() {
        let mut opt = Optimizer::radam(LrSchedule::constant(0.01));
        let mut p = scalar(0.0);
        let mut expect = 0.0;
        let b2 = 0.999f64;
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        for t in 1..=8 {
            opt.step(&mut [&mut p], &[scalar(1.0)]).unwrap();
            let t = t as f64;
            // constant g = 1 keeps both bias-corrected moments at 1
            let rho = rho_inf - 2.0 * t * b2.powf(t) / (1.0 - b2.powf(t));
            expect -= if rho > 5.0 {
                let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
                0.01 * r / (1.0 + 1e-8)
            } else {
                0.01
            };
            assert!((p.get(0, 0) - expect).abs() < 1e-12, "step {t}");
        }
    }

    #[test]
    fn warmup_ramps_linearly() {
        let mut opt = Optimizer::new(OptimizerKind::AdamWarmup, LrSchedule::constant(1e-3));
        assert!((opt.current_lr() - 1e-3 / 500.0).abs() < 1e-18);
        let mut p = scalar(0.0);
        opt.step(&mut [&mut p], &[scalar(1.0)]).unwrap();
        assert!((p.get(0, 0) + 1e-3 / 500.0 / (1.0 + 1e-8)).abs() < 1e-15);
        for _ in 1..WARMUP_STEPS {
            opt.step(&mut [&mut p], &[scalar(1.0)]).unwrap();
        }
        assert_eq!(opt.current_lr(), 1e-3);
    }

    #[test]
    fn schedule_drops_after_step() {
        let s = LrSchedule::step_drop(3000);
        assert_eq!(s.lr(1), 1e-3);
        assert_eq!(s.lr(3000), 1e-3);
        assert_eq!(s.lr(3001), 1e-4);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut opt = Optimizer::radam(LrSchedule::constant(1e-3));
        let mut p = scalar(0.0);
        assert!(opt.step(&mut [&mut p], &[Matrix::zeros(1, 2)]).is_err());
        assert!(opt.step(&mut [&mut p], &[]).is_err());
    }

    #[test]
    fn parse_kind() {
        assert_eq!("radam".parse::<OptimizerKind>().unwrap(), OptimizerKind::RAdam);
        assert_eq!("adam-warmup".parse::<OptimizerKind>().unwrap(), OptimizerKind::AdamWarmup);
        assert!("sgd".parse::<OptimizerKind>().is_err());
    }
}
