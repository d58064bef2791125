//! Primitive kernels: forward evaluation and vector-Jacobian products.
//!
//! Every primitive is a pure function of its input tensors. `backward`
//! receives the inputs, the forward output and the upstream gradient and
//! returns one gradient per input (only where `needs[i]` is set).

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Elementwise sum; either operand may be a scalar.
    Add,
    Sub,
    Mul,
    /// Multiplication by a constant.
    Scale(f64),
    /// Addition of a constant.
    Shift(f64),
    /// `[m, k] x [k, n]`.
    MatMul,
    /// `x: [N, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `b: [Cout]`.
    Conv2d {
        stride: usize,
        padding: usize,
    },
    /// Non-overlapping `size x size` windows over the last two axes of a
    /// rank-4 tensor; trailing rows/columns that do not fill a window are
    /// dropped.
    MaxPool2d {
        size: usize,
    },
    /// `MaxPool2d { size: pool }` applied to `Conv2d { stride, padding }`,
    /// fused.
    ConvPool {
        stride: usize,
        padding: usize,
        pool: usize,
    },
    Relu,
    Exp,
    /// Natural log; strictly positive inputs only.
    Log,
    /// Sum of all elements, producing a scalar.
    Sum,
    Mean {
        axis: usize,
    },
    Max {
        axis: usize,
    },
    Softmax {
        axis: usize,
    },
    LogSoftmax {
        axis: usize,
    },
    /// Zero vectors map to zero vectors with zero gradient.
    L2Normalize {
        axis: usize,
    },
    /// 2-D transpose.
    Transpose,
    Reshape {
        shape: Vec<usize>,
    },
    Concat {
        axis: usize,
    },
    /// Selects slices along axis 0 (repeats allowed).
    GatherRows {
        indices: Vec<usize>,
    },
    /// For a `[R, C]` input, output row `r` is `input[r, indices[r][..]]`.
    TakeAlongRows {
        indices: Vec<Vec<usize>>,
    },
    /// `x + b` where `b` has one value per index of `axis`.
    BiasAdd {
        axis: usize,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::Shift(_) => "shift",
            Primitive::MatMul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::MaxPool2d { .. } => "max_pool2d",
            Primitive::ConvPool { .. } => "conv_pool",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sum => "sum",
            Primitive::Mean { .. } => "mean",
            Primitive::Max { .. } => "max",
            Primitive::Softmax { .. } => "softmax",
            Primitive::LogSoftmax { .. } => "log_softmax",
            Primitive::L2Normalize { .. } => "l2_normalize",
            Primitive::Transpose => "transpose",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Concat { .. } => "concat",
            Primitive::GatherRows { .. } => "gather_rows",
            Primitive::TakeAlongRows { .. } => "take_along_rows",
            Primitive::BiasAdd { .. } => "bias_add",
        }
    }

    pub fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::MatMul
            | Primitive::BiasAdd { .. } => Some(2),
            Primitive::Conv2d { .. } | Primitive::ConvPool { .. } => Some(3),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

fn shape_err(op: &'static str, inputs: &[&Tensor]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("kernel produced a consistent layout")
}

/// `(outer, len, inner)` such that element `(o, k, i)` lives at
/// `(o * len + k) * inner + i`.
fn split_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<(usize, usize, usize)> {
    let shape = t.shape();
    if axis >= shape.len() {
        return Err(AutodiffError::InvalidArgument {
            op,
            detail: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

/// `c (+)= a * b` for an `m x k` by `k x n` product with arbitrary
/// non-negative strides on the operands and a contiguous row-major `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    assert!((m - 1) * a_strides.0 + (k - 1) * a_strides.1 < a.len());
    assert!((k - 1) * b_strides.0 + (n - 1) * b_strides.1 < b.len());
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (xs, ws) = (x.shape(), w.shape());
        if stride == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "conv2d",
                detail: "stride must be >= 1".into(),
            });
        }
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(shape_err("conv2d", &[x, w]));
        }
        let (h, wd, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err("conv2d", &[x, w]));
        }
        Ok(Self {
            cin: xs[1],
            h,
            w: wd,
            cout: ws[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// Output positions `lo..hi` along one axis whose tap `k` lands inside
    /// the unpadded input of length `extent`.
    #[inline]
    fn valid(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let lo = if k >= self.pad {
            0
        } else {
            (self.pad - k).div_ceil(self.stride)
        };
        let hi = if extent + self.pad > k {
            ((extent + self.pad - 1 - k) / self.stride + 1).min(out_extent)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Unfolds one `[Cin, H, W]` sample into a `[Cin*kh*kw, Ho*Wo]` matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.pixels();
        let s = self.stride;
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (ylo, yhi) = self.valid(ky, self.h, self.ho);
                for kx in 0..self.kw {
                    let (xlo, xhi) = self.valid(kx, self.w, self.wo);
                    let row = &mut cols[((c * self.kh + ky) * self.kw + kx) * p..][..p];
                    row.iter_mut().for_each(|v| *v = 0.0);
                    for oy in ylo..yhi {
                        let iy = oy * s + ky - self.pad;
                        let line = &plane[iy * self.w..(iy + 1) * self.w];
                        let dst = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        for ox in xlo..xhi {
                            dst[ox] = line[ox * s + kx - self.pad];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatter-adds columns back into a sample.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.pixels();
        let s = self.stride;
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (ylo, yhi) = self.valid(ky, self.h, self.ho);
                for kx in 0..self.kw {
                    let (xlo, xhi) = self.valid(kx, self.w, self.wo);
                    let row = &cols[((c * self.kh + ky) * self.kw + kx) * p..][..p];
                    for oy in ylo..yhi {
                        let iy = oy * s + ky - self.pad;
                        let line = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let src = &row[oy * self.wo..(oy + 1) * self.wo];
                        for ox in xlo..xhi {
                            line[ox * s + kx - self.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

impl ConvGeom {
    /// One sample: `out[Cout, P] = W * im2col(x) + b`.
    fn forward_sample(&self, x: &[f64], w: &[f64], b: &[f64], cols: &mut [f64], out: &mut [f64]) {
        let (k, p) = (self.patch(), self.pixels());
        self.im2col(x, cols);
        for (plane, &bias) in out.chunks_exact_mut(p).zip(b) {
            plane.iter_mut().for_each(|v| *v = bias);
        }
        gemm(self.cout, k, p, w, (k, 1), cols, (p, 1), out, true);
    }

    /// One sample of the conv adjoint; `grad` is `[Cout, P]`. `cols_ready`
    /// says `cols` already holds `im2col(x)`.
    #[allow(clippy::too_many_arguments)]
    fn backward_sample(
        &self,
        x: &[f64],
        w: &[f64],
        grad: &[f64],
        cols: &mut [f64],
        cols_ready: bool,
        dx: Option<&mut [f64]>,
        dw: Option<&mut [f64]>,
        db: Option<&mut [f64]>,
    ) {
        let (k, p) = (self.patch(), self.pixels());
        if let Some(db) = db {
            for (d, plane) in db.iter_mut().zip(grad.chunks_exact(p)) {
                *d += plane.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw {
            if !cols_ready {
                self.im2col(x, cols);
            }
            // dW[Cout, K] += G[Cout, P] * cols^T
            gemm(self.cout, p, k, grad, (p, 1), cols, (1, p), dw, true);
        }
        if let Some(dx) = dx {
            // dcols[K, P] = W^T * G
            gemm(k, self.cout, p, w, (1, k), grad, (p, 1), cols, false);
            self.col2im(cols, dx);
        }
    }
}

fn conv_inputs(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let g = ConvGeom::new(x, w, stride, pad)?;
    if b.shape() != [g.cout] {
        return Err(shape_err("conv2d", &[x, w, b]));
    }
    Ok(g)
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_inputs(x, w, b, stride, pad)?;
    let n = x.shape()[0];
    let (k, p) = (g.patch(), g.pixels());
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![0.0; n * g.cout * p];
    let mut cols = vec![0.0; k * p];
    for s in 0..n {
        g.forward_sample(
            &x.data()[s * in_len..(s + 1) * in_len],
            w.data(),
            b.data(),
            &mut cols,
            &mut out[s * g.cout * p..(s + 1) * g.cout * p],
        );
    }
    Ok(tensor(vec![n, g.cout, g.ho, g.wo], out))
}

type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

fn conv_grad_buffers(x: &Tensor, w: &Tensor, cout: usize, needs: &[bool]) -> ConvGrads {
    (
        needs[0].then(|| vec![0.0; x.len()]),
        needs[1].then(|| vec![0.0; w.len()]),
        needs[2].then(|| vec![0.0; cout]),
    )
}

fn conv_grad_tensors(x: &Tensor, w: &Tensor, grads: ConvGrads) -> Vec<Option<Tensor>> {
    let cout = w.shape()[0];
    vec![
        grads.0.map(|d| tensor(x.shape().to_vec(), d)),
        grads.1.map(|d| tensor(w.shape().to_vec(), d)),
        grads.2.map(|d| tensor(vec![cout], d)),
    ]
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    stride: usize,
    pad: usize,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let g = ConvGeom::new(x, w, stride, pad).expect("validated in forward");
    let n = x.shape()[0];
    let (k, p) = (g.patch(), g.pixels());
    let in_len = g.cin * g.h * g.w;
    let (mut dx, mut dw, mut db) = conv_grad_buffers(x, w, g.cout, needs);
    let mut cols = vec![0.0; k * p];
    for s in 0..n {
        g.backward_sample(
            &x.data()[s * in_len..(s + 1) * in_len],
            w.data(),
            &grad.data()[s * g.cout * p..(s + 1) * g.cout * p],
            &mut cols,
            false,
            dx.as_mut().map(|d| &mut d[s * in_len..(s + 1) * in_len]),
            dw.as_deref_mut(),
            db.as_deref_mut(),
        );
    }
    conv_grad_tensors(x, w, (dx, dw, db))
}

/// Output extents of non-overlapping `size x size` pooling.
fn pooled(h: usize, w: usize, size: usize) -> (usize, usize) {
    (h / size, w / size)
}

/// Moves `(best, best_value)` to `i` when `d[i]` is strictly larger. Written
/// as selects so the compiler avoids unpredictable branches.
#[inline(always)]
fn pick_max(d: &[f64], i: usize, best: &mut usize, best_value: &mut f64) {
    let v = d[i];
    let gt = v > *best_value;
    *best = if gt { i } else { *best };
    *best_value = if gt { v } else { *best_value };
}

/// Calls `visit(out_index, src_index)` with the (first) maximum of every
/// pooling window of `planes` stacked `h x w` planes.
fn pool_windows(
    d: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
    mut visit: impl FnMut(usize, usize),
) {
    let (ho, wo) = pooled(h, w, size);
    let mut out = 0;
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..ho {
            let top = base + oy * size * w;
            for ox in 0..wo {
                let corner = top + ox * size;
                let (mut best, mut value) = (corner, d[corner]);
                if size == 2 {
                    pick_max(d, corner + 1, &mut best, &mut value);
                    pick_max(d, corner + w, &mut best, &mut value);
                    pick_max(d, corner + w + 1, &mut best, &mut value);
                } else {
                    for dy in 0..size {
                        let row = corner + dy * w;
                        for i in row..row + size {
                            pick_max(d, i, &mut best, &mut value);
                        }
                    }
                }
                visit(out, best);
                out += 1;
            }
        }
    }
}

fn check_pool(op: &'static str, h: usize, w: usize, size: usize) -> Result<()> {
    if size == 0 || h < size || w < size {
        return Err(AutodiffError::InvalidArgument {
            op,
            detail: format!("cannot pool {h}x{w} with window {size}"),
        });
    }
    Ok(())
}

fn max_pool_forward(x: &Tensor, size: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(shape_err("max_pool2d", &[x]));
    }
    check_pool("max_pool2d", s[2], s[3], size)?;
    let (ho, wo) = pooled(s[2], s[3], size);
    let mut out = vec![0.0; s[0] * s[1] * ho * wo];
    pool_windows(x.data(), s[0] * s[1], s[2], s[3], size, |o, src| {
        out[o] = x.data()[src]
    });
    Ok(tensor(vec![s[0], s[1], ho, wo], out))
}

/// Convolution followed by max pooling, evaluated one sample at a time so
/// the full-resolution activation is never materialised.
fn conv_pool_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    pool: usize,
) -> Result<Tensor> {
    let g = conv_inputs(x, w, b, stride, pad)?;
    check_pool("conv_pool", g.ho, g.wo, pool)?;
    let n = x.shape()[0];
    let (k, p) = (g.patch(), g.pixels());
    let (ho, wo) = pooled(g.ho, g.wo, pool);
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * ho * wo;
    let mut out = vec![0.0; n * out_len];
    let mut cols = vec![0.0; k * p];
    let mut act = vec![0.0; g.cout * p];
    for s in 0..n {
        g.forward_sample(
            &x.data()[s * in_len..(s + 1) * in_len],
            w.data(),
            b.data(),
            &mut cols,
            &mut act,
        );
        let dst = &mut out[s * out_len..(s + 1) * out_len];
        pool_windows(&act, g.cout, g.ho, g.wo, pool, |o, src| dst[o] = act[src]);
    }
    Ok(tensor(vec![n, g.cout, ho, wo], out))
}

/// Recomputes each sample's pre-pool activation to route the pooled
/// gradient, then applies the conv adjoint.
#[allow(clippy::too_many_arguments)]
fn conv_pool_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    grad: &Tensor,
    stride: usize,
    pad: usize,
    pool: usize,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let g = ConvGeom::new(x, w, stride, pad).expect("validated in forward");
    let n = x.shape()[0];
    let (k, p) = (g.patch(), g.pixels());
    let (ho, wo) = pooled(g.ho, g.wo, pool);
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * ho * wo;
    let (mut dx, mut dw, mut db) = conv_grad_buffers(x, w, g.cout, needs);
    let mut cols = vec![0.0; k * p];
    let mut act = vec![0.0; g.cout * p];
    let mut dact = vec![0.0; g.cout * p];
    for s in 0..n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        g.forward_sample(xs, w.data(), b.data(), &mut cols, &mut act);
        dact.iter_mut().for_each(|v| *v = 0.0);
        let gs = &grad.data()[s * out_len..(s + 1) * out_len];
        pool_windows(&act, g.cout, g.ho, g.wo, pool, |o, src| dact[src] += gs[o]);
        g.backward_sample(
            xs,
            w.data(),
            &dact,
            &mut cols,
            true,
            dx.as_mut().map(|d| &mut d[s * in_len..(s + 1) * in_len]),
            dw.as_deref_mut(),
            db.as_deref_mut(),
        );
    }
    conv_grad_tensors(x, w, (dx, dw, db))
}

enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if a.rank() == 0 {
        Ok(Broadcast::LeftScalar)
    } else if b.rank() == 0 {
        Ok(Broadcast::RightScalar)
    } else {
        Err(shape_err(op, &[a, b]))
    }
}

fn zip_with(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    Ok(match broadcast(op, a, b)? {
        Broadcast::Same => tensor(
            a.shape().to_vec(),
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        ),
        Broadcast::LeftScalar => {
            let s = a.item();
            b.map(|y| f(s, y))
        }
        Broadcast::RightScalar => {
            let s = b.item();
            a.map(|x| f(x, s))
        }
    })
}

/// Reduces a gradient back to the operand's shape (sums for a broadcast scalar).
fn unbroadcast(grad: Tensor, target: &Tensor) -> Tensor {
    if grad.shape() == target.shape() {
        grad
    } else {
        Tensor::scalar(grad.data().iter().sum())
    }
}

/// Applies `f` to every lane along `axis`, with read access to the input
/// lane and write access to the output lane (both strided by `inner`).
fn map_lanes(
    x: &Tensor,
    axis: usize,
    op: &'static str,
    mut f: impl FnMut(&[f64], &mut [f64]),
) -> Result<Tensor> {
    let (outer, len, inner) = split_axis(op, x, axis)?;
    let mut out = vec![0.0; x.len()];
    let mut lane_in = vec![0.0; len];
    let mut lane_out = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for k in 0..len {
                lane_in[k] = x.data()[(o * len + k) * inner + i];
            }
            f(&lane_in, &mut lane_out);
            for k in 0..len {
                out[(o * len + k) * inner + i] = lane_out[k];
            }
        }
    }
    Ok(tensor(x.shape().to_vec(), out))
}

/// Like `map_lanes` but over two same-shaped tensors.
fn map_lane_pairs(
    x: &Tensor,
    y: &Tensor,
    axis: usize,
    mut f: impl FnMut(&[f64], &[f64], &mut [f64]),
) -> Tensor {
    let (outer, len, inner) = split_axis("lanes", x, axis).expect("validated");
    let mut out = vec![0.0; x.len()];
    let (mut a, mut b, mut c) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
    for o in 0..outer {
        for i in 0..inner {
            for k in 0..len {
                let at = (o * len + k) * inner + i;
                a[k] = x.data()[at];
                b[k] = y.data()[at];
            }
            f(&a, &b, &mut c);
            for k in 0..len {
                out[(o * len + k) * inner + i] = c[k];
            }
        }
    }
    tensor(x.shape().to_vec(), out)
}

fn softmax_lane(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn log_softmax_lane(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

fn check_arity(p: &Primitive, inputs: &[&Tensor]) -> Result<()> {
    let ok = match p.arity() {
        Some(n) => inputs.len() == n,
        None => !inputs.is_empty(),
    };
    if ok {
        Ok(())
    } else {
        Err(AutodiffError::InvalidArgument {
            op: p.name(),
            detail: format!("expected {:?} inputs, got {}", p.arity(), inputs.len()),
        })
    }
}

pub fn forward(p: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    check_arity(p, inputs)?;
    let x = inputs[0];
    let op = p.name();
    match p {
        Primitive::Add => zip_with(op, x, inputs[1], |a, b| a + b),
        Primitive::Sub => zip_with(op, x, inputs[1], |a, b| a - b),
        Primitive::Mul => zip_with(op, x, inputs[1], |a, b| a * b),
        Primitive::Scale(c) => Ok(x.map(|v| v * c)),
        Primitive::Shift(c) => Ok(x.map(|v| v + c)),
        Primitive::MatMul => {
            let b = inputs[1];
            let (xs, bs) = (x.shape(), b.shape());
            if xs.len() != 2 || bs.len() != 2 || xs[1] != bs[0] {
                return Err(shape_err(op, inputs));
            }
            let (m, k, n) = (xs[0], xs[1], bs[1]);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, x.data(), (k, 1), b.data(), (n, 1), &mut out, false);
            Ok(tensor(vec![m, n], out))
        }
        Primitive::Conv2d { stride, padding } => {
            conv2d_forward(x, inputs[1], inputs[2], *stride, *padding)
        }
        Primitive::MaxPool2d { size } => max_pool_forward(x, *size),
        Primitive::ConvPool {
            stride,
            padding,
            pool,
        } => conv_pool_forward(x, inputs[1], inputs[2], *stride, *padding, *pool),
        Primitive::Relu => Ok(x.map(|v| v.max(0.0))),
        Primitive::Exp => Ok(x.map(f64::exp)),
        Primitive::Log => {
            if let Some(bad) = x.data().iter().find(|&&v| !(v > 0.0)) {
                return Err(AutodiffError::Domain {
                    op,
                    detail: format!("log of non-positive value {bad}"),
                });
            }
            Ok(x.map(f64::ln))
        }
        Primitive::Sum => Ok(Tensor::scalar(x.data().iter().sum())),
        Primitive::Mean { axis } | Primitive::Max { axis } => {
            let (outer, len, inner) = split_axis(op, x, *axis)?;
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let lane = (0..len).map(|k| x.data()[(o * len + k) * inner + i]);
                    out.push(match p {
                        Primitive::Mean { .. } => lane.sum::<f64>() / len as f64,
                        _ => lane.fold(f64::NEG_INFINITY, f64::max),
                    });
                }
            }
            Ok(tensor(without_axis(x.shape(), *axis), out))
        }
        Primitive::Softmax { axis } => map_lanes(x, *axis, op, softmax_lane),
        Primitive::LogSoftmax { axis } => map_lanes(x, *axis, op, log_softmax_lane),
        Primitive::L2Normalize { axis } => map_lanes(x, *axis, op, |lane, out| {
            let norm = lane.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (o, &v) in out.iter_mut().zip(lane) {
                *o = if norm > 0.0 { v / norm } else { 0.0 };
            }
        }),
        Primitive::Transpose => {
            let s = x.shape();
            if s.len() != 2 {
                return Err(shape_err(op, inputs));
            }
            let (r, c) = (s[0], s[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x.data()[i * c + j];
                }
            }
            Ok(tensor(vec![c, r], out))
        }
        Primitive::Reshape { shape } => {
            x.reshaped(shape.clone())
                .map_err(|_| AutodiffError::ShapeMismatch {
                    op,
                    shapes: vec![x.shape().to_vec(), shape.clone()],
                })
        }
        Primitive::Concat { axis } => {
            let first = x.shape();
            if *axis >= first.len()
                || inputs.iter().any(|t| {
                    t.rank() != first.len()
                        || t.shape()
                            .iter()
                            .zip(first)
                            .enumerate()
                            .any(|(d, (a, b))| d != *axis && a != b)
                })
            {
                return Err(shape_err(op, inputs));
            }
            let outer: usize = first[..*axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let total: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            Ok(tensor(shape, out))
        }
        Primitive::GatherRows { indices } => {
            if x.rank() == 0 || indices.is_empty() || indices.iter().any(|&i| i >= x.shape()[0]) {
                return Err(AutodiffError::InvalidArgument {
                    op,
                    detail: format!("indices out of range for shape {:?}", x.shape()),
                });
            }
            let row = x.len() / x.shape()[0];
            let mut out = Vec::with_capacity(indices.len() * row);
            for &i in indices {
                out.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = indices.len();
            Ok(tensor(shape, out))
        }
        Primitive::TakeAlongRows { indices } => {
            let s = x.shape();
            let width = indices.first().map_or(0, Vec::len);
            if s.len() != 2
                || indices.len() != s[0]
                || width == 0
                || indices
                    .iter()
                    .any(|r| r.len() != width || r.iter().any(|&j| j >= s[1]))
            {
                return Err(AutodiffError::InvalidArgument {
                    op,
                    detail: format!("index table does not fit shape {s:?}"),
                });
            }
            let out = indices
                .iter()
                .enumerate()
                .flat_map(|(r, row)| row.iter().map(move |&j| x.data()[r * s[1] + j]))
                .collect();
            Ok(tensor(vec![s[0], width], out))
        }
        Primitive::BiasAdd { axis } => {
            let b = inputs[1];
            let (outer, len, inner) = split_axis(op, x, *axis)?;
            if b.shape() != [len] {
                return Err(shape_err(op, inputs));
            }
            let mut out = x.data().to_vec();
            for o in 0..outer {
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    out[base..base + inner]
                        .iter_mut()
                        .for_each(|v| *v += b.data()[k]);
                }
            }
            Ok(tensor(x.shape().to_vec(), out))
        }
    }
}

/// Vector-Jacobian product of `p` at `inputs` with upstream gradient `grad`.
pub fn backward(
    p: &Primitive,
    inputs: &[&Tensor],
    output: &Tensor,
    grad: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let x = inputs[0];
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    match p {
        Primitive::Add | Primitive::Sub => {
            let sign = if matches!(p, Primitive::Sub) {
                -1.0
            } else {
                1.0
            };
            vec![
                want(0).then(|| unbroadcast(grad.clone(), x)),
                want(1).then(|| unbroadcast(grad.map(|g| sign * g), inputs[1])),
            ]
        }
        Primitive::Mul => {
            let y = inputs[1];
            let prod =
                |other: &Tensor| zip_with("mul", grad, other, |g, o| g * o).expect("validated");
            vec![
                want(0).then(|| unbroadcast(prod(y), x)),
                want(1).then(|| unbroadcast(prod(x), y)),
            ]
        }
        Primitive::Scale(c) => vec![Some(grad.map(|g| g * c))],
        Primitive::Shift(_) => vec![Some(grad.clone())],
        Primitive::MatMul => {
            let b = inputs[1];
            let (m, k, n) = (x.shape()[0], x.shape()[1], b.shape()[1]);
            let da = want(0).then(|| {
                let mut d = vec![0.0; m * k];
                gemm(
                    m,
                    n,
                    k,
                    grad.data(),
                    (n, 1),
                    b.data(),
                    (1, n),
                    &mut d,
                    false,
                );
                tensor(vec![m, k], d)
            });
            let db = want(1).then(|| {
                let mut d = vec![0.0; k * n];
                gemm(
                    k,
                    m,
                    n,
                    x.data(),
                    (1, k),
                    grad.data(),
                    (n, 1),
                    &mut d,
                    false,
                );
                tensor(vec![k, n], d)
            });
            vec![da, db]
        }
        Primitive::Conv2d { stride, padding } => {
            conv2d_backward(x, inputs[1], grad, *stride, *padding, needs)
        }
        Primitive::MaxPool2d { size } => {
            let sh = x.shape();
            let mut d = vec![0.0; x.len()];
            pool_windows(x.data(), sh[0] * sh[1], sh[2], sh[3], *size, |o, src| {
                d[src] += grad.data()[o]
            });
            vec![Some(tensor(sh.to_vec(), d))]
        }
        Primitive::ConvPool {
            stride,
            padding,
            pool,
        } => conv_pool_backward(
            x, inputs[1], inputs[2], grad, *stride, *padding, *pool, needs,
        ),
        Primitive::Relu => vec![Some(
            zip_with("relu", grad, x, |g, v| if v > 0.0 { g } else { 0.0 }).expect("same shape"),
        )],
        Primitive::Exp => {
            vec![Some(
                zip_with("exp", grad, output, |g, y| g * y).expect("same shape"),
            )]
        }
        Primitive::Log => vec![Some(
            zip_with("log", grad, x, |g, v| g / v).expect("same shape"),
        )],
        Primitive::Sum => vec![Some(Tensor::full(x.shape(), grad.item()))],
        Primitive::Mean { axis } | Primitive::Max { axis } => {
            let (outer, len, inner) = split_axis("reduce", x, *axis).expect("validated");
            let mut d = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let g = grad.data()[o * inner + i];
                    let at = |k: usize| (o * len + k) * inner + i;
                    if let Primitive::Mean { .. } = p {
                        for k in 0..len {
                            d[at(k)] = g / len as f64;
                        }
                    } else {
                        let best = (0..len)
                            .find(|&k| x.data()[at(k)] == output.data()[o * inner + i])
                            .unwrap_or(0);
                        d[at(best)] = g;
                    }
                }
            }
            vec![Some(tensor(x.shape().to_vec(), d))]
        }
        Primitive::Softmax { axis } => {
            vec![Some(map_lane_pairs(grad, output, *axis, |g, y, d| {
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                for k in 0..d.len() {
                    d[k] = y[k] * (g[k] - dot);
                }
            }))]
        }
        Primitive::LogSoftmax { axis } => {
            vec![Some(map_lane_pairs(grad, output, *axis, |g, y, d| {
                let total: f64 = g.iter().sum();
                for k in 0..d.len() {
                    d[k] = g[k] - y[k].exp() * total;
                }
            }))]
        }
        Primitive::L2Normalize { axis } => {
            let norms = forward(&Primitive::Mul, &[x, x])
                .and_then(|sq| {
                    map_lanes(&sq, *axis, "l2", |lane, out| {
                        let n = lane.iter().sum::<f64>().sqrt();
                        out.iter_mut().for_each(|o| *o = n);
                    })
                })
                .expect("validated");
            let mut d = map_lane_pairs(grad, output, *axis, |g, y, d| {
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                for k in 0..d.len() {
                    d[k] = g[k] - y[k] * dot;
                }
            });
            for (v, &n) in d.data_mut().iter_mut().zip(norms.data()) {
                *v = if n > 0.0 { *v / n } else { 0.0 };
            }
            vec![Some(d)]
        }
        Primitive::Transpose => vec![Some(forward(&Primitive::Transpose, &[grad]).expect("2-D"))],
        Primitive::Reshape { .. } => {
            vec![Some(grad.reshaped(x.shape().to_vec()).expect("same size"))]
        }
        Primitive::Concat { axis } => {
            let first = x.shape();
            let outer: usize = first[..*axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let total: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let mut offset = 0;
            inputs
                .iter()
                .enumerate()
                .map(|(idx, t)| {
                    let chunk = t.shape()[*axis] * inner;
                    let part = want(idx).then(|| {
                        let mut d = Vec::with_capacity(t.len());
                        for o in 0..outer {
                            let base = o * total * inner + offset;
                            d.extend_from_slice(&grad.data()[base..base + chunk]);
                        }
                        tensor(t.shape().to_vec(), d)
                    });
                    offset += chunk;
                    part
                })
                .collect()
        }
        Primitive::GatherRows { indices } => {
            let row = x.len() / x.shape()[0];
            let mut d = vec![0.0; x.len()];
            for (out_row, &i) in indices.iter().enumerate() {
                for c in 0..row {
                    d[i * row + c] += grad.data()[out_row * row + c];
                }
            }
            vec![Some(tensor(x.shape().to_vec(), d))]
        }
        Primitive::TakeAlongRows { indices } => {
            let cols = x.shape()[1];
            let width = indices[0].len();
            let mut d = vec![0.0; x.len()];
            for (r, row) in indices.iter().enumerate() {
                for (pos, &j) in row.iter().enumerate() {
                    d[r * cols + j] += grad.data()[r * width + pos];
                }
            }
            vec![Some(tensor(x.shape().to_vec(), d))]
        }
        Primitive::BiasAdd { axis } => {
            let (outer, len, inner) = split_axis("bias_add", x, *axis).expect("validated");
            let db = want(1).then(|| {
                let mut d = vec![0.0; len];
                for o in 0..outer {
                    for (k, dk) in d.iter_mut().enumerate() {
                        let base = (o * len + k) * inner;
                        *dk += grad.data()[base..base + inner].iter().sum::<f64>();
                    }
                }
                tensor(vec![len], d)
            });
            vec![want(0).then(|| grad.clone()), db]
        }
    }
}
