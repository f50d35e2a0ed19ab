//! Nonnegative feature maps φ: R^D → R^C. Attention computed with
//! `sim(q, k) = φ(q)·φ(k)` can be reassociated into linear time.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::matrix::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureMapKind {
    /// `elu(x) + 1`, elementwise. Strictly positive, `C = D`.
    Elu1,
    /// Flattened outer product `x ⊗ x`, so `φ(x)·φ(y) = (x·y)²`. `C = D²`.
    Poly2,
    /// Identity for inputs that are already nonnegative; rejects negative
    /// entries instead of silently producing an invalid kernel.
    IdentityPositiveCheck,
}

impl fmt::Display for FeatureMapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Elu1 => "elu1",
            Self::Poly2 => "poly2",
            Self::IdentityPositiveCheck => "identity-positive-check",
        })
    }
}

impl FromStr for FeatureMapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elu1" => Ok(Self::Elu1),
            "poly2" => Ok(Self::Poly2),
            "identity-positive-check" => Ok(Self::IdentityPositiveCheck),
            other => Err(Error::Parse(format!("unknown feature map `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    kind: FeatureMapKind,
    input_dim: usize,
}

impl FeatureMap {
    pub fn new(kind: FeatureMapKind, input_dim: usize) -> Self {
        Self { kind, input_dim }
    }

    pub fn elu1(input_dim: usize) -> Self {
        Self::new(FeatureMapKind::Elu1, input_dim)
    }

    pub fn poly2(input_dim: usize) -> Self {
        Self::new(FeatureMapKind::Poly2, input_dim)
    }

    pub fn kind(&self) -> FeatureMapKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        output_dim(self.kind, self.input_dim)
    }

    /// Maps a single vector into `out` (length `output_dim`).
    pub fn apply_into<T: Real>(&self, x: &[T], out: &mut [T]) -> Result<()> {
        if x.len() != self.input_dim || out.len() != self.output_dim() {
            return shape_err(
                "feature_map",
                format!(
                    "input {} / output {} for {} with D={}",
                    x.len(),
                    out.len(),
                    self.kind,
                    self.input_dim
                ),
            );
        }
        match self.kind {
            FeatureMapKind::Elu1 => elu1_into(x, out),
            FeatureMapKind::Poly2 => poly2_into(x, out),
            FeatureMapKind::IdentityPositiveCheck => {
                if let Some(bad) = x.iter().find(|v| **v < T::zero()) {
                    return Err(Error::Invalid(format!(
                        "identity feature map received negative input {bad}"
                    )));
                }
                out.copy_from_slice(x);
            }
        }
        Ok(())
    }

    pub fn apply<T: Real>(&self, x: &[T]) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.output_dim()];
        self.apply_into(x, &mut out)?;
        Ok(out)
    }

    /// Applies the map to every row of `x` (N×D → N×C).
    pub fn apply_rows<T: Real>(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut out = Matrix::zeros(x.rows(), self.output_dim());
        self.apply_rows_into(x, &mut out)?;
        Ok(out)
    }

    pub fn apply_rows_into<T: Real>(&self, x: &Matrix<T>, out: &mut Matrix<T>) -> Result<()> {
        if out.rows() != x.rows() {
            return shape_err("feature_map", "row count of output buffer");
        }
        for i in 0..x.rows() {
            self.apply_into(x.row(i), out.row_mut(i))?;
        }
        Ok(())
    }

    /// Vector-Jacobian product: given `x` (N×D) and the gradient with respect
    /// to `φ(x)` (N×C), returns the gradient with respect to `x`.
    pub fn backward_rows<T: Real>(&self, x: &Matrix<T>, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
        let mut grad_in = Matrix::zeros(x.rows(), x.cols());
        self.backward_rows_into(x, grad_out, &mut grad_in)?;
        Ok(grad_in)
    }

    /// [`Self::backward_rows`] into a caller-provided N×D buffer.
    pub fn backward_rows_into<T: Real>(
        &self,
        x: &Matrix<T>,
        grad_out: &Matrix<T>,
        grad_in: &mut Matrix<T>,
    ) -> Result<()> {
        if x.cols() != self.input_dim
            || grad_out.shape() != (x.rows(), self.output_dim())
            || grad_in.shape() != x.shape()
        {
            return shape_err("feature_map_backward", "gradient shape");
        }
        let d = self.input_dim;
        for i in 0..x.rows() {
            let xr = x.row(i);
            let g = grad_out.row(i);
            let dst = grad_in.row_mut(i);
            dst.fill(T::zero());
            match self.kind {
                FeatureMapKind::Elu1 => {
                    for ((o, &xv), &gv) in dst.iter_mut().zip(xr).zip(g) {
                        *o = gv * elu1_derivative(xv);
                    }
                }
                FeatureMapKind::Poly2 => {
                    // out[a*D + b] = x[a] x[b]
                    for a in 0..d {
                        for b in 0..d {
                            let gv = g[a * d + b];
                            dst[a] += gv * xr[b];
                            dst[b] += gv * xr[a];
                        }
                    }
                }
                FeatureMapKind::IdentityPositiveCheck => dst.copy_from_slice(g),
            }
        }
        Ok(())
    }
}

pub fn output_dim(kind: FeatureMapKind, input_dim: usize) -> usize {
    match kind {
        FeatureMapKind::Elu1 | FeatureMapKind::IdentityPositiveCheck => input_dim,
        FeatureMapKind::Poly2 => input_dim * input_dim,
    }
}

#[inline]
fn elu1_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        x + T::one()
    } else {
        x.exp()
    }
}

#[inline]
fn elu1_derivative<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

fn elu1_into<T: Real>(x: &[T], out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = elu1_scalar(v);
    }
}

fn poly2_into<T: Real>(x: &[T], out: &mut [T]) {
    let d = x.len();
    for a in 0..d {
        for b in 0..d {
            out[a * d + b] = x[a] * x[b];
        }
    }
}

/// `elu(x) + 1` of a vector.
pub fn feature_map_elu1<T: Real>(x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    elu1_into(x, &mut out);
    out
}

/// Homogeneous degree-2 polynomial features of a vector.
pub fn feature_map_poly2<T: Real>(x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len() * x.len()];
    poly2_into(x, &mut out);
    out
}
