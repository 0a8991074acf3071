//! Slice-level forward/backward kernels. Shapes are validated by the tape
//! before these are called; everything here assumes consistent sizes.

/// `c = a · b + beta · c` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
/// `trans_a`/`trans_b` read the stored matrix as its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: lengths checked above; strides describe exactly those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `[cin, h, w]` image into `[cin·kh·kw, oh·ow]`.
fn im2col(g: &ConvGeometry, input: &[f64], col: &mut [f64]) {
    let cols = g.cols();
    for ci in 0..g.cin {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Inverse scatter of [`im2col`]: accumulates `col` into `input_grad`.
fn col2im(g: &ConvGeometry, col: &[f64], input_grad: &mut [f64]) {
    let cols = g.cols();
    for ci in 0..g.cin {
        let plane = &mut input_grad[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeometry,
    batch: usize,
    cout: usize,
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let in_len = g.cin * g.h * g.w;
    let out_len = cout * g.cols();
    let mut col = vec![0.0; g.rows() * g.cols()];
    let mut out = vec![0.0; batch * out_len];
    for n in 0..batch {
        im2col(g, &input[n * in_len..(n + 1) * in_len], &mut col);
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        for (co, chunk) in dst.chunks_mut(g.cols()).enumerate() {
            chunk.fill(bias[co]);
        }
        gemm(
            cout,
            g.rows(),
            g.cols(),
            kernel,
            false,
            &col,
            false,
            1.0,
            dst,
        );
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Vec<f64>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    batch: usize,
    cout: usize,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
) -> ConvGrads {
    let in_len = g.cin * g.h * g.w;
    let out_len = cout * g.cols();
    let mut col = vec![0.0; g.rows() * g.cols()];
    let mut dcol = vec![0.0; g.rows() * g.cols()];
    let mut grads = ConvGrads {
        input: vec![0.0; batch * in_len],
        kernel: vec![0.0; kernel.len()],
        bias: vec![0.0; cout],
    };
    for n in 0..batch {
        let gout = &grad_out[n * out_len..(n + 1) * out_len];
        for (co, chunk) in gout.chunks(g.cols()).enumerate() {
            grads.bias[co] += chunk.iter().sum::<f64>();
        }
        im2col(g, &input[n * in_len..(n + 1) * in_len], &mut col);
        // dK += dOut · colᵀ
        gemm(
            cout,
            g.cols(),
            g.rows(),
            gout,
            false,
            &col,
            true,
            1.0,
            &mut grads.kernel,
        );
        // dcol = Kᵀ · dOut
        gemm(
            g.rows(),
            cout,
            g.cols(),
            kernel,
            true,
            gout,
            false,
            0.0,
            &mut dcol,
        );
        col2im(g, &dcol, &mut grads.input[n * in_len..(n + 1) * in_len]);
    }
    grads
}

/// Per-channel view helper for `[N, C, H·W]` layouts.
pub(crate) fn for_channel_elements(
    batch: usize,
    channels: usize,
    spatial: usize,
    c: usize,
    mut f: impl FnMut(usize),
) {
    for n in 0..batch {
        let base = (n * channels + c) * spatial;
        for i in base..base + spatial {
            f(i);
        }
    }
}

/// Window maxima. Returns values and, per output, the flat input index of
/// the first maximal element in row-major window order.
pub(crate) fn max_pool2d_forward(
    planes: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    input: &[f64],
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oy * stride * w + ox * stride;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax, oh, ow)
}

/// Largest `f64` strictly below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function kept inside the open interval (0, 1): beyond |x| ≈ 37
/// the exact value rounds to 1.0, so results are clamped to the neighbouring
/// representable values.
pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, BELOW_ONE)
}

/// `max(x, 0) − x·l + ln(1 + e^{−|x|})`, the logit-space binary cross-entropy.
pub(crate) fn bce_logit_term(x: f64, label: f64) -> f64 {
    x.max(0.0) - x * label + (-x.abs()).exp().ln_1p()
}
