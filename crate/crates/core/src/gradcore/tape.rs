use std::collections::HashMap;

use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Tape`]. Only valid until the next
/// [`Tape::backward`] or [`Tape::clear`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running mean and (unbiased) variance tracked by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0),
        }
    }
}

pub enum BatchNormMode<'a> {
    Train(&'a mut RunningStats),
    Eval(&'a RunningStats),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalMaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Sigmoid {
        input: Var,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
    Concat {
        left: Var,
        right: Var,
    },
    Add {
        left: Var,
        right: Var,
    },
    Sum {
        input: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, keyed by leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Vec<f64>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, leaf: Var) -> Option<&[f64]> {
        self.leaves.get(&leaf).map(Vec::as_slice)
    }

    pub fn take(&mut self, leaf: Var) -> Option<Vec<f64>> {
        self.leaves.remove(&leaf)
    }

    /// Tape positions of the non-leaf operations replayed, in visit order.
    pub fn visited(&self) -> &[usize] {
        &self.visited
    }
}

/// Wengert list for reverse-mode differentiation. Each op validates shapes,
/// computes its forward value eagerly and records what its backward needs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let mut value = tensor;
        value.zero_grad();
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        if x.ndim() != 4 {
            return Err(Error::shape(
                "conv2d",
                "input",
                format!("expected [N,C,H,W], got {:?}", x.shape()),
            ));
        }
        if k.ndim() != 4 {
            return Err(Error::shape(
                "conv2d",
                "kernel",
                format!("expected [Cout,Cin,kh,kw], got {:?}", k.shape()),
            ));
        }
        let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kcin, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                "Cin",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        if b.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                "bias",
                format!("expected [{cout}], got {:?}", b.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        if kh > h + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                "kh",
                format!(
                    "kernel height {kh} exceeds padded height {}",
                    h + 2 * padding
                ),
            ));
        }
        if kw > w + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                "kw",
                format!("kernel width {kw} exceeds padded width {}", w + 2 * padding),
            ));
        }
        let geometry = ConvGeometry {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geometry, n, cout, x.values(), k.values(), b.values());
        let value = Tensor::new(vec![n, cout, geometry.oh, geometry.ow], out)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
            rg,
        ))
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<Var> {
        let x = self.value(input);
        if x.ndim() != 4 {
            return Err(Error::shape(
                "batch_norm",
                "input",
                format!("expected [N,C,H,W], got {:?}", x.shape()),
            ));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let spatial = x.shape()[2] * x.shape()[3];
        for (name, var) in [("gamma", gamma), ("beta", beta)] {
            if self.value(var).shape() != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    if name == "gamma" { "gamma" } else { "beta" },
                    format!("expected [{c}], got {:?}", self.value(var).shape()),
                ));
            }
        }
        let x = self.value(input).values();
        let g = self.value(gamma).values();
        let bt = self.value(beta).values();
        let count = n * spatial;
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        let train = matches!(mode, BatchNormMode::Train(_));
        match mode {
            BatchNormMode::Train(stats) => {
                if count < 2 {
                    return Err(Error::DegenerateStatistics { count });
                }
                for ch in 0..c {
                    let mut sum = 0.0;
                    kernels::for_channel_elements(n, c, spatial, ch, |i| sum += x[i]);
                    let mean = sum / count as f64;
                    let mut sq = 0.0;
                    kernels::for_channel_elements(n, c, spatial, ch, |i| {
                        sq += (x[i] - mean).powi(2)
                    });
                    let var = sq / count as f64;
                    let istd = 1.0 / (var + BN_EPSILON).sqrt();
                    inv_std[ch] = istd;
                    kernels::for_channel_elements(n, c, spatial, ch, |i| {
                        xhat[i] = (x[i] - mean) * istd;
                        out[i] = g[ch] * xhat[i] + bt[ch];
                    });
                    let unbiased = sq / (count - 1) as f64;
                    let rm = &mut stats.mean.values_mut()[ch];
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean;
                    let rv = &mut stats.var.values_mut()[ch];
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased;
                }
            }
            BatchNormMode::Eval(stats) => {
                if stats.mean.shape() != [c] || stats.var.shape() != [c] {
                    return Err(Error::shape(
                        "batch_norm",
                        "running_stats",
                        format!("expected {c} channels"),
                    ));
                }
                for ch in 0..c {
                    let mean = stats.mean.values()[ch];
                    let istd = 1.0 / (stats.var.values()[ch] + BN_EPSILON).sqrt();
                    inv_std[ch] = istd;
                    kernels::for_channel_elements(n, c, spatial, ch, |i| {
                        xhat[i] = (x[i] - mean) * istd;
                        out[i] = g[ch] * xhat[i] + bt[ch];
                    });
                }
            }
        }
        let value = Tensor::new(self.value(input).shape().to_vec(), out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out: Vec<f64> = x.values().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Relu { input }, rg)
    }

    pub fn max_pool2d(&mut self, input: Var, kh: usize, kw: usize, stride: usize) -> Result<Var> {
        let x = self.value(input);
        if x.ndim() != 4 {
            return Err(Error::shape(
                "max_pool2d",
                "input",
                format!("expected [N,C,H,W], got {:?}", x.shape()),
            ));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if kh > h || kw > w || kh == 0 || kw == 0 {
            return Err(Error::shape(
                "max_pool2d",
                "window",
                format!("{kh}x{kw} window does not fit {h}x{w} input"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "max_pool2d: stride must be >= 1".into(),
            ));
        }
        let (out, argmax, oh, ow) =
            kernels::max_pool2d_forward(n * c, h, w, kh, kw, stride, x.values());
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.ndim() != 4 {
            return Err(Error::shape(
                "global_max_pool",
                "input",
                format!("expected [N,C,H,W], got {:?}", x.shape()),
            ));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (out, argmax, _, _) = kernels::max_pool2d_forward(n * c, h, w, h, w, 1, x.values());
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::GlobalMaxPool { input, argmax }, rg))
    }

    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, wt, b) = (self.value(input), self.value(weight), self.value(bias));
        if x.ndim() != 2 || wt.ndim() != 2 {
            return Err(Error::shape(
                "affine",
                "rank",
                format!(
                    "expected [N,D] input and [C,D] weight, got {:?} and {:?}",
                    x.shape(),
                    wt.shape()
                ),
            ));
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let (c, wd) = (wt.shape()[0], wt.shape()[1]);
        if wd != d {
            return Err(Error::shape(
                "affine",
                "D",
                format!("input has {d} features, weight expects {wd}"),
            ));
        }
        if b.shape() != [c] {
            return Err(Error::shape(
                "affine",
                "bias",
                format!("expected [{c}], got {:?}", b.shape()),
            ));
        }
        let mut out = vec![0.0; n * c];
        for row in out.chunks_mut(c) {
            row.copy_from_slice(b.values());
        }
        kernels::gemm(n, d, c, x.values(), false, wt.values(), true, 1.0, &mut out);
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Affine {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out: Vec<f64> = x
            .values()
            .iter()
            .map(|&v| kernels::stable_sigmoid(v))
            .collect();
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Sigmoid { input }, rg)
    }

    /// Mean binary cross-entropy over every element, evaluated from logits.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &Tensor) -> Result<Var> {
        let x = self.value(logits);
        if x.shape() != labels.shape() {
            return Err(Error::shape(
                "bce_loss",
                "C",
                format!("scores {:?} vs labels {:?}", x.shape(), labels.shape()),
            ));
        }
        validate_labels(labels)?;
        let total: f64 = x
            .values()
            .iter()
            .zip(labels.values())
            .map(|(&s, &l)| kernels::bce_logit_term(s, l))
            .sum();
        let value = Tensor::scalar(total / x.numel() as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                labels: labels.values().to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates two `[N, D]` matrices along the feature axis.
    pub fn concat(&mut self, left: Var, right: Var) -> Result<Var> {
        let (a, b) = (self.value(left), self.value(right));
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[0] != b.shape()[0] {
            return Err(Error::shape(
                "concat",
                "N",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let (n, da, db) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            out.extend_from_slice(&a.values()[i * da..(i + 1) * da]);
            out.extend_from_slice(&b.values()[i * db..(i + 1) * db]);
        }
        let value = Tensor::new(vec![n, da + db], out)?;
        let rg = self.any_grad(&[left, right]);
        Ok(self.push(value, Op::Concat { left, right }, rg))
    }

    pub fn add(&mut self, left: Var, right: Var) -> Result<Var> {
        let (a, b) = (self.value(left), self.value(right));
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "add",
                "shape",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let out = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(a.shape().to_vec(), out)?;
        let rg = self.any_grad(&[left, right]);
        Ok(self.push(value, Op::Add { left, right }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).values().iter().sum());
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Sum { input }, rg)
    }

    /// Replays the tape in reverse from the scalar `loss`, then clears it.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                "loss",
                format!("expected a scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                out.leaves.insert(Var(idx), gout);
                continue;
            }
            out.visited.push(idx);
            for (var, g) in self.local_grads(idx, &gout) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        self.clear();
        Ok(out)
    }

    fn local_grads(&self, idx: usize, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let g = kernels::conv2d_backward(
                    geometry,
                    x.shape()[0],
                    k.shape()[0],
                    x.values(),
                    k.values(),
                    gout,
                );
                vec![(*input, g.input), (*kernel, g.kernel), (*bias, g.bias)]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = self.value(*input).shape();
                let (n, c, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
                let g = self.value(*gamma).values();
                let m = (n * spatial) as f64;
                let mut dx = vec![0.0; gout.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
                    kernels::for_channel_elements(n, c, spatial, ch, |i| {
                        sum_dy += gout[i];
                        sum_dy_xhat += gout[i] * xhat[i];
                    });
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    let scale = g[ch] * inv_std[ch];
                    if *train {
                        kernels::for_channel_elements(n, c, spatial, ch, |i| {
                            dx[i] = scale / m * (m * gout[i] - sum_dy - xhat[i] * sum_dy_xhat);
                        });
                    } else {
                        kernels::for_channel_elements(n, c, spatial, ch, |i| {
                            dx[i] = scale * gout[i]
                        });
                    }
                }
                vec![(*input, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Relu { input } => {
                let x = self.value(*input).values();
                let dx = x
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                vec![(*input, dx)]
            }
            Op::MaxPool { input, argmax } | Op::GlobalMaxPool { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (&src, &g) in argmax.iter().zip(gout) {
                    dx[src] += g;
                }
                vec![(*input, dx)]
            }
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let c = wt.shape()[0];
                let mut dx = vec![0.0; n * d];
                kernels::gemm(n, c, d, gout, false, wt.values(), false, 0.0, &mut dx);
                let mut dw = vec![0.0; c * d];
                kernels::gemm(c, n, d, gout, true, x.values(), false, 0.0, &mut dw);
                let mut db = vec![0.0; c];
                for row in gout.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![(*input, dx), (*weight, dw), (*bias, db)]
            }
            Op::Sigmoid { input } => {
                let s = node.value.values();
                let dx = s
                    .iter()
                    .zip(gout)
                    .map(|(&s, &g)| g * s * (1.0 - s))
                    .collect();
                vec![(*input, dx)]
            }
            Op::BceWithLogits { logits, labels } => {
                let x = self.value(*logits).values();
                let scale = gout[0] / x.len() as f64;
                let dx = x
                    .iter()
                    .zip(labels)
                    .map(|(&s, &l)| scale * (kernels::stable_sigmoid(s) - l))
                    .collect();
                vec![(*logits, dx)]
            }
            Op::Concat { left, right } => {
                let (n, da) = (self.value(*left).shape()[0], self.value(*left).shape()[1]);
                let db = self.value(*right).shape()[1];
                let mut ga = Vec::with_capacity(n * da);
                let mut gb = Vec::with_capacity(n * db);
                for row in gout.chunks(da + db) {
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                vec![(*left, ga), (*right, gb)]
            }
            Op::Add { left, right } => vec![(*left, gout.to_vec()), (*right, gout.to_vec())],
            Op::Sum { input } => vec![(*input, vec![gout[0]; self.value(*input).numel()])],
        }
    }
}

pub(crate) fn validate_labels(labels: &Tensor) -> Result<()> {
    for (index, &value) in labels.values().iter().enumerate() {
        if value != 0.0 && value != 1.0 {
            return Err(Error::InvalidLabel { index, value });
        }
    }
    Ok(())
}
