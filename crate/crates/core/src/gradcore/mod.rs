//! A small reverse-mode automatic differentiation engine.
//!
//! Values live in [`Tensor`]s (row-major `f64`). Operations are recorded on a
//! [`Tape`] as they execute; [`Tape::backward`] replays them in reverse and
//! returns gradients for every leaf that requires one. The op set is exactly
//! what the classification branches use: 2-D convolution, batch
//! normalization, ReLU, max pooling, global max pooling, affine maps,
//! sigmoid, concatenation and the logit-space binary cross-entropy loss.
//!
//! ```
//! use agcnn::gradcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
//! let w = tape.leaf(Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap().with_requires_grad(true));
//! let b = tape.leaf(Tensor::scalar(0.0).with_requires_grad(true));
//! let y = tape.affine(x, w, b).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap(), &[1.0, 2.0]);
//! ```

mod kernels;
mod optim;
mod tape;
mod tensor;

pub use optim::SgdState;
pub use tape::{BatchNormMode, Gradients, RunningStats, Tape, Var, BN_EPSILON, BN_MOMENTUM};
pub use tensor::Tensor;

pub(crate) use tensor::Fnv1a;

use crate::error::{Error, Result};

/// Lower/upper clamp applied to probabilities before any explicit logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

/// Elementwise logistic function, strictly inside (0, 1) for finite input.
pub fn sigmoid(scores: &Tensor) -> Tensor {
    let values = scores
        .values()
        .iter()
        .map(|&x| kernels::stable_sigmoid(x))
        .collect();
    Tensor::new(scores.shape().to_vec(), values).expect("same shape")
}

/// Mean binary cross-entropy of probabilities against {0,1} labels,
/// averaged over classes and batch. Probabilities are clamped to
/// `[PROB_CLAMP, 1 − PROB_CLAMP]` first.
///
/// Training does not go through this function; it uses
/// [`Tape::bce_with_logits`], which evaluates the same loss from logits.
pub fn bce_loss(probabilities: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if probabilities.shape() != labels.shape() {
        return Err(Error::shape(
            "bce_loss",
            "C",
            format!(
                "probabilities {:?} vs labels {:?}",
                probabilities.shape(),
                labels.shape()
            ),
        ));
    }
    tape::validate_labels(labels)?;
    let total: f64 = probabilities
        .values()
        .iter()
        .zip(labels.values())
        .map(|(&p, &l)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(l * p.ln() + (1.0 - l) * (1.0 - p).ln())
        })
        .sum();
    Ok(Tensor::scalar(total / probabilities.numel() as f64))
}

/// Order-sensitive checksum over several tensors.
pub fn checksum_all<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    let mut h = Fnv1a::new();
    for t in tensors {
        h.write(&t.checksum().to_le_bytes());
    }
    h.finish()
}
