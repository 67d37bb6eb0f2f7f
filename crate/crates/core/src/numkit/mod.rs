//! Small dense linear algebra plus the differentiable building blocks used by
//! every network in the crate: dense layers, a tanh recurrent cell and an LSTM
//! cell, each with a hand-derived backward pass.
//!
//! All arithmetic is `f64`. Gradients are stored in values of the same type as
//! the parameters they belong to, so a gradient buffer is just a zeroed clone
//! of the parameter block (see [`Params`]).

mod cells;
mod dense;
mod gradcheck;
mod matrix;
mod net;

pub use cells::{CellKind, CellState, LstmCell, LstmGate, Recurrent, RnnCell};
pub use dense::{Activation, DenseLayer, Mlp};
pub use gradcheck::{
    compare_gradients, corrupted_gradient_error, finite_diff_check, gradient_suite,
    random_instance, GradCheckReport, SeqLoss, SquaredTargets, FD_EPSILON,
};
pub use matrix::{dot, Matrix};
pub use net::{CoreSpec, GradBuffers, HeadSpec, Net, NetParams, NetSpec, SeqOutputs};

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dim {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward called without a cached forward pass")]
    NoForward,
    #[error("parameter/gradient shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("invalid network spec: {0}")]
    Spec(String),
}

pub type Result<T> = std::result::Result<T, NumError>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(NumError::Dim {
            context,
            expected,
            got,
        })
    }
}

/// Anything that owns a fixed list of `f64` parameter blocks.
///
/// The block order is part of the type's contract: flattening, gradient
/// accumulation and SGD all walk blocks in the same order.
pub trait Params: Clone {
    fn blocks(&self) -> Vec<&[f64]>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for b in self.blocks() {
            out.extend_from_slice(b);
        }
        out
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("set_flat", self.num_params(), flat.len())?;
        let mut offset = 0;
        for b in self.blocks_mut() {
            let n = b.len();
            b.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    fn fill(&mut self, value: f64) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|x| *x = value);
        }
    }

    fn shape(&self) -> Vec<usize> {
        self.blocks().iter().map(|b| b.len()).collect()
    }

    /// `self += scale * other`.
    fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        check_same_shape(self, other)?;
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
        Ok(())
    }

    fn scale(&mut self, factor: f64) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|x| *x *= factor);
        }
    }

    fn l2_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    fn all_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|x| x.is_finite()))
    }
}

fn check_same_shape<P: Params>(a: &P, b: &P) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        Ok(())
    } else {
        Err(NumError::Shape(format!("{sa:?} vs {sb:?}")))
    }
}

/// Plain gradient descent: `p <- p - lr * g` for every parameter.
pub fn sgd_step<P: Params>(params: &mut P, grads: &P, lr: f64) -> Result<()> {
    check_same_shape(params, grads)?;
    for (dst, src) in params.blocks_mut().into_iter().zip(grads.blocks()) {
        for (p, g) in dst.iter_mut().zip(src) {
            *p -= lr * g;
        }
    }
    Ok(())
}

/// Rescale `grads` so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<P: Params>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

pub(crate) fn uniform_fill<R: Rng>(values: &mut [f64], bound: f64, rng: &mut R) {
    for v in values.iter_mut() {
        *v = rng.random_range(-bound..=bound);
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
