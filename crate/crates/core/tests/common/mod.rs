//! Helpers shared by the integration and acceptance tests: finite-difference
//! gradient checks for every tape op and brute-force oracles for AUC and
//! connected regions.

#![allow(dead_code)]

use agcnn::attention::{BinaryMask, BoundingBox};
use agcnn::gradcore::{BatchNormMode, RunningStats, Tape, Tensor, Var};
use agcnn::rng;
use rand::seq::SliceRandom;
use rand::Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Every differentiable tape op, batch norm counted once per mode.
pub const OPS: &[&str] = &[
    "conv2d",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "max_pool2d",
    "global_max_pool",
    "affine",
    "sigmoid",
    "bce_with_logits",
    "concat",
    "add",
    "sum",
];

type Forward = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// A random instance of one op, reduced to a scalar.
pub struct GradCase {
    pub op: &'static str,
    pub inputs: Vec<Tensor>,
    forward: Forward,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero, so ReLU kinks sit far from every sample.
fn off_zero(shape: &[usize], r: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = r.random_range(0.05..1.5);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Pairwise-distinct values spaced far more than the step, so max
/// selections never flip under perturbation.
fn distinct(shape: &[usize], r: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / n as f64).collect();
    v.shuffle(r);
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn squash(tape: &mut Tape, y: Var) -> Var {
    // sigmoid makes the upstream gradient differ per element
    let s = tape.sigmoid(y);
    tape.sum(s)
}

pub fn case(op: &'static str, seed: u64) -> GradCase {
    let mut r = rng::stream(seed, op);
    let (inputs, forward): (Vec<Tensor>, Forward) = match op {
        "conv2d" => {
            let (n, cin, cout) = (
                r.random_range(1..=2),
                r.random_range(1..=3),
                r.random_range(1..=3),
            );
            let (h, w) = (r.random_range(3..=6), r.random_range(3..=6));
            let (kh, kw) = (r.random_range(1..=3), r.random_range(1..=3));
            let (stride, padding) = (r.random_range(1..=2), r.random_range(0..=1));
            (
                vec![
                    uniform(&[n, cin, h, w], -1.0, 1.0, &mut r),
                    uniform(&[cout, cin, kh, kw], -1.0, 1.0, &mut r),
                    uniform(&[cout], -0.5, 0.5, &mut r),
                ],
                Box::new(move |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], stride, padding).unwrap();
                    squash(t, y)
                }),
            )
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let train = op == "batch_norm_train";
            let (n, c) = (r.random_range(1..=3), r.random_range(1..=3));
            let (h, w) = (r.random_range(1..=4), r.random_range(2..=4));
            let mut stats = RunningStats::new(c);
            stats.mean = uniform(&[c], -0.5, 0.5, &mut r);
            stats.var = uniform(&[c], 0.5, 2.0, &mut r);
            (
                vec![
                    uniform(&[n, c, h, w], -2.0, 2.0, &mut r),
                    uniform(&[c], 0.5, 1.5, &mut r),
                    uniform(&[c], -0.5, 0.5, &mut r),
                ],
                Box::new(move |t, v| {
                    let y = if train {
                        let mut fresh = stats.clone();
                        t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train(&mut fresh))
                            .unwrap()
                    } else {
                        t.batch_norm(v[0], v[1], v[2], BatchNormMode::Eval(&stats))
                            .unwrap()
                    };
                    squash(t, y)
                }),
            )
        }
        "relu" => {
            let shape = [
                r.random_range(1..=3),
                r.random_range(1..=3),
                r.random_range(1..=4),
                r.random_range(1..=4),
            ];
            (
                vec![off_zero(&shape, &mut r)],
                Box::new(|t, v| {
                    let y = t.relu(v[0]);
                    squash(t, y)
                }),
            )
        }
        "max_pool2d" => {
            let (kh, kw, stride) = (
                r.random_range(1..=3),
                r.random_range(1..=3),
                r.random_range(1..=3),
            );
            let shape = [
                r.random_range(1..=2),
                r.random_range(1..=3),
                kh + r.random_range(0..=4),
                kw + r.random_range(0..=4),
            ];
            (
                vec![distinct(&shape, &mut r)],
                Box::new(move |t, v| {
                    let y = t.max_pool2d(v[0], kh, kw, stride).unwrap();
                    squash(t, y)
                }),
            )
        }
        "global_max_pool" => {
            let shape = [
                r.random_range(1..=3),
                r.random_range(1..=4),
                r.random_range(1..=4),
                r.random_range(1..=4),
            ];
            (
                vec![distinct(&shape, &mut r)],
                Box::new(|t, v| {
                    let y = t.global_max_pool(v[0]).unwrap();
                    squash(t, y)
                }),
            )
        }
        "affine" => {
            let (n, d, m) = (
                r.random_range(1..=4),
                r.random_range(1..=6),
                r.random_range(1..=5),
            );
            (
                vec![
                    uniform(&[n, d], -1.0, 1.0, &mut r),
                    uniform(&[m, d], -1.0, 1.0, &mut r),
                    uniform(&[m], -0.5, 0.5, &mut r),
                ],
                Box::new(|t, v| {
                    let y = t.affine(v[0], v[1], v[2]).unwrap();
                    squash(t, y)
                }),
            )
        }
        "sigmoid" => {
            let shape = [r.random_range(1..=4), r.random_range(1..=6)];
            (
                vec![uniform(&shape, -4.0, 4.0, &mut r)],
                Box::new(squash_only),
            )
        }
        "bce_with_logits" => {
            let (n, c) = (r.random_range(1..=4), r.random_range(1..=15));
            let labels = Tensor::new(
                vec![n, c],
                (0..n * c).map(|_| r.random_range(0..2) as f64).collect(),
            )
            .unwrap();
            (
                vec![uniform(&[n, c], -5.0, 5.0, &mut r)],
                Box::new(move |t, v| t.bce_with_logits(v[0], &labels).unwrap()),
            )
        }
        "concat" => {
            let n = r.random_range(1..=4);
            (
                vec![
                    uniform(&[n, r.random_range(1..=5)], -2.0, 2.0, &mut r),
                    uniform(&[n, r.random_range(1..=5)], -2.0, 2.0, &mut r),
                ],
                Box::new(|t, v| {
                    let y = t.concat(v[0], v[1]).unwrap();
                    squash(t, y)
                }),
            )
        }
        "add" => {
            let shape = [
                r.random_range(1..=3),
                r.random_range(1..=3),
                r.random_range(1..=3),
            ];
            (
                vec![
                    uniform(&shape, -2.0, 2.0, &mut r),
                    uniform(&shape, -2.0, 2.0, &mut r),
                ],
                Box::new(|t, v| {
                    let y = t.add(v[0], v[1]).unwrap();
                    squash(t, y)
                }),
            )
        }
        "sum" => {
            let shape = [r.random_range(1..=3), r.random_range(1..=5)];
            (
                vec![uniform(&shape, -2.0, 2.0, &mut r)],
                Box::new(|t, v| t.sum(v[0])),
            )
        }
        other => panic!("no gradient case for {other}"),
    };
    GradCase {
        op,
        inputs,
        forward,
    }
}

fn squash_only(t: &mut Tape, v: &[Var]) -> Var {
    squash(t, v[0])
}

impl GradCase {
    fn eval(&self, inputs: &[Tensor]) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = (self.forward)(&mut tape, &vars);
        tape.value(out).item()
    }

    /// Largest relative error between the tape gradient and central
    /// differences, over every entry of every input.
    pub fn max_relative_error(&self) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .inputs
            .iter()
            .map(|x| tape.leaf(x.clone().with_requires_grad(true)))
            .collect();
        let out = (self.forward)(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let mut work = self.inputs.clone();
        let mut worst = 0.0f64;
        for (k, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).expect("gradient for every input").to_vec();
            for (i, &a) in analytic.iter().enumerate() {
                let orig = work[k].values()[i];
                work[k].values_mut()[i] = orig + STEP;
                let up = self.eval(&work);
                work[k].values_mut()[i] = orig - STEP;
                let down = self.eval(&work);
                work[k].values_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.inputs.iter().map(|t| t.shape().to_vec()).collect()
    }
}

/// Pairwise Mann–Whitney statistic with half credit for ties.
pub fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Breadth-first 8-connected flood fill. Picks the component with the most
/// pixels, ties going to the one reached first in row-major scan order.
pub fn flood_fill_largest(mask: &BinaryMask) -> Option<BoundingBox> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut best: Option<(usize, BoundingBox)> = None;
    for start in 0..w * h {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        let (mut count, mut x0, mut y0, mut x1, mut y1) = (0, w, h, 0, 0);
        while let Some(p) = queue.pop_front() {
            let (x, y) = (p % w, p / w);
            count += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.bits[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, BoundingBox::new(x0, y0, x1, y1).unwrap()));
        }
    }
    best.map(|(_, b)| b)
}
