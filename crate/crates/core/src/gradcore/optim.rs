use super::tensor::Tensor;
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay folded into the velocity:
///
/// ```text
/// v ← momentum·v + grad + weight_decay·param
/// param ← param − lr·v
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocities: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0,1), got {momentum}"
            )));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be >= 0, got {weight_decay}"
            )));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            weight_decay,
            velocities: Vec::new(),
        })
    }

    pub fn velocity(&self, index: usize) -> Option<&[f64]> {
        self.velocities.get(index).map(Vec::as_slice)
    }

    /// Applies one update to every trainable tensor in `params` using the
    /// gradient stored on it. The parameter list must keep the same order
    /// and shapes across calls; velocity buffers are indexed by position.
    /// Tensors with `requires_grad == false` are left untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.velocities.is_empty() {
            self.velocities = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocities.len() != params.len() {
            return Err(Error::shape(
                "sgd_step",
                "params",
                format!(
                    "state tracks {} tensors, got {}",
                    self.velocities.len(),
                    params.len()
                ),
            ));
        }
        for (index, p) in params.iter().enumerate() {
            if self.velocities[index].len() != p.numel() {
                return Err(Error::shape(
                    "sgd_step",
                    "velocity",
                    format!("parameter #{index} changed size"),
                ));
            }
            if p.requires_grad() && p.grad().is_none() {
                return Err(Error::MissingGradient { index });
            }
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocities) {
            if !p.requires_grad() {
                continue;
            }
            let grad = p.grad().expect("checked above").to_vec();
            let values = p.values_mut();
            for ((w, vel), g) in values.iter_mut().zip(v.iter_mut()).zip(grad) {
                *vel = self.momentum * *vel + g + self.weight_decay * *w;
                *w -= self.learning_rate * *vel;
            }
        }
        Ok(())
    }
}
