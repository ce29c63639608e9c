//! A small reverse-mode automatic differentiation tape over [`Tensor`]s.
//!
//! Every op evaluates eagerly and records enough to run its adjoint. A tape is
//! built per training step and dropped afterwards; parameters enter it as
//! leaves and their gradients are read back from [`Gradients`].

pub mod kernels;

use crate::tensor::{log_softmax_in_place, Tensor};
use kernels::{batch_to_channel_major, channel_to_batch_major, col2im, gemm, im2col, ConvGeom};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, batch: usize, out_ch: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, batch: usize, in_ch: usize },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    ChannelMean { x: Var },
    ChannelVar { x: Var, mean: Vec<f64> },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: f64 },
    Tanh { x: Var },
    AvgPool2 { x: Var },
    GlobalAvgPool { x: Var },
    Reshape { x: Var },
    ConcatCols { parts: Vec<(Var, usize)> },
    SliceCols { x: Var, start: usize, width: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Sum { x: Var },
    LogSoftmax { x: Var },
    Exp { x: Var },
    Log { x: Var, floor: f64 },
    MeanRows { x: Var },
    Norm2 { x: Var },
    SoftHistogram { x: Var, centers: Vec<f64>, bandwidth: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Channel-axis layout of a `[n, c, ...]` tensor: `(n, c, spatial)`.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let p = shape[2..].iter().product::<usize>();
    (n, c, p)
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// `x·wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x);
        let ws = self.value(w);
        let (n, i) = (xs.dim(0), xs.row_len());
        let o = ws.dim(0);
        assert_eq!(ws.dim(1), i, "linear: input width {} vs weight {:?}", i, ws.shape());
        let mut out = vec![0.0; n * o];
        let bias = self.value(b).data();
        for r in 0..n {
            out[r * o..(r + 1) * o].copy_from_slice(bias);
        }
        gemm(n, i, o, xs.data(), false, ws.data(), true, 1.0, &mut out);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::from_parts(vec![n, o], out), Op::Linear { x, w, b }, ng)
    }

    /// Cross-correlation with square kernels; `x: [n, c, h, w]`, `w: [o, c, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.value(x);
        let ws = self.value(w);
        let (n, c, h, wd) = (xs.dim(0), xs.dim(1), xs.dim(2), xs.dim(3));
        let (o, k) = (ws.dim(0), ws.dim(2));
        assert_eq!(ws.dim(1), c, "conv2d: channels {} vs weight {:?}", c, ws.shape());
        let geom = ConvGeom { channels: c, height: h, width: wd, kernel: k, stride, pad };
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let p = oh * ow;
        let mut cols = vec![0.0; geom.col_rows() * n * p];
        im2col(xs.data(), n, &geom, &mut cols);
        let mut ym = vec![0.0; o * n * p];
        gemm(o, geom.col_rows(), n * p, ws.data(), false, &cols, false, 0.0, &mut ym);
        let mut y = channel_to_batch_major(&ym, n, o, p);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (i, plane) in y.chunks_mut(p).enumerate() {
                let bv = bias[i % o];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            Tensor::from_parts(vec![n, o, oh, ow], y),
            Op::Conv2d { x, w, b, geom, batch: n, out_ch: o },
            ng,
        )
    }

    /// Transposed convolution; `x: [n, cin, h, w]`, `w: [cin, cout, k, k]`,
    /// output side `(h - 1)·stride - 2·pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let xs = self.value(x);
        let ws = self.value(w);
        let (n, cin, h, wd) = (xs.dim(0), xs.dim(1), xs.dim(2), xs.dim(3));
        let (cout, k) = (ws.dim(1), ws.dim(2));
        assert_eq!(ws.dim(0), cin, "conv_transpose2d: channels {} vs weight {:?}", cin, ws.shape());
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        let geom = ConvGeom { channels: cout, height: oh, width: ow, kernel: k, stride, pad };
        debug_assert_eq!(geom.out_height(), h);
        debug_assert_eq!(geom.out_width(), wd);
        let p = h * wd;
        let xm = batch_to_channel_major(xs.data(), n, cin, p);
        let mut cols = vec![0.0; geom.col_rows() * n * p];
        gemm(geom.col_rows(), cin, n * p, ws.data(), true, &xm, false, 0.0, &mut cols);
        let mut y = vec![0.0; n * cout * oh * ow];
        col2im(&cols, n, &geom, &mut y);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (i, plane) in y.chunks_mut(oh * ow).enumerate() {
                let bv = bias[i % cout];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            Tensor::from_parts(vec![n, cout, oh, ow], y),
            Op::ConvTranspose2d { x, w, b, geom, batch: n, in_ch: cin },
            ng,
        )
    }

    /// Batch normalisation with batch statistics (biased variance).
    /// Returns the output and the per-channel batch mean and variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Vec<f64>, Vec<f64>) {
        let xs = self.value(x);
        let (n, c, p) = channel_layout(xs.shape());
        let (mean, var) = channel_moments(xs.data(), n, c, p);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = xs.data().to_vec();
        let mut y = vec![0.0; xhat.len()];
        for (i, (plane, yp)) in xhat.chunks_mut(p).zip(y.chunks_mut(p)).enumerate() {
            let ch = i % c;
            for (v, yv) in plane.iter_mut().zip(yp.iter_mut()) {
                *v = (*v - mean[ch]) * inv_std[ch];
                *yv = g[ch] * *v + bt[ch];
            }
        }
        let shape = xs.shape().to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let out = self.push(
            Tensor::from_parts(shape.clone(), y),
            Op::BatchNormTrain { x, gamma, beta, xhat: Tensor::from_parts(shape, xhat), inv_std },
            ng,
        );
        (out, mean, var)
    }

    /// Batch normalisation with fixed (stored) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var {
        let xs = self.value(x);
        let (_, c, p) = channel_layout(xs.shape());
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = xs.data().to_vec();
        let mut y = vec![0.0; xhat.len()];
        for (i, (plane, yp)) in xhat.chunks_mut(p).zip(y.chunks_mut(p)).enumerate() {
            let ch = i % c;
            for (v, yv) in plane.iter_mut().zip(yp.iter_mut()) {
                *v = (*v - mean[ch]) * inv_std[ch];
                *yv = g[ch] * *v + bt[ch];
            }
        }
        let shape = xs.shape().to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::from_parts(shape.clone(), y),
            Op::BatchNormEval { x, gamma, beta, xhat: Tensor::from_parts(shape, xhat), inv_std },
            ng,
        )
    }

    /// Per-channel mean over batch and spatial axes → `[c]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let (n, c, p) = channel_layout(xs.shape());
        let (mean, _) = channel_moments(xs.data(), n, c, p);
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![c], mean), Op::ChannelMean { x }, ng)
    }

    /// Per-channel biased variance over batch and spatial axes → `[c]`.
    pub fn channel_var(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let (n, c, p) = channel_layout(xs.shape());
        let (mean, var) = channel_moments(xs.data(), n, c, p);
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![c], var), Op::ChannelVar { x, mean }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(y, Op::Relu { x }, ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let y = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.ng(x);
        self.push(y, Op::LeakyRelu { x, slope }, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::tanh);
        let ng = self.ng(x);
        self.push(y, Op::Tanh { x }, ng)
    }

    /// 2×2 average pooling with stride 2 on `[n, c, h, w]` (even h, w).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let (n, c, h, w) = (xs.dim(0), xs.dim(1), xs.dim(2), xs.dim(3));
        let (oh, ow) = (h / 2, w / 2);
        let mut y = vec![0.0; n * c * oh * ow];
        let d = xs.data();
        for nc in 0..n * c {
            let src = &d[nc * h * w..(nc + 1) * h * w];
            let dst = &mut y[nc * oh * ow..(nc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (iy, ix) = (2 * oy, 2 * ox);
                    dst[oy * ow + ox] = 0.25
                        * (src[iy * w + ix]
                            + src[iy * w + ix + 1]
                            + src[(iy + 1) * w + ix]
                            + src[(iy + 1) * w + ix + 1]);
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![n, c, oh, ow], y), Op::AvgPool2 { x }, ng)
    }

    /// Mean over spatial axes: `[n, c, h, w]` → `[n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let (n, c, p) = channel_layout(xs.shape());
        let y: Vec<f64> = xs.data().chunks(p).map(|pl| pl.iter().sum::<f64>() / p as f64).collect();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![n, c], y), Op::GlobalAvgPool { x }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape: element count mismatch");
        let ng = self.ng(x);
        self.push(y, Op::Reshape { x }, ng)
    }

    /// Concatenates 2-D tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).dim(0);
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).dim(1)).collect();
        let total: usize = widths.iter().sum();
        let mut y = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let v = self.value(p);
            assert_eq!(v.dim(0), n, "concat_cols: row count mismatch");
            for r in 0..n {
                y[r * total + off..r * total + off + wd].copy_from_slice(v.row(r));
            }
            off += wd;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let parts = parts.iter().copied().zip(widths).collect();
        self.push(Tensor::from_parts(vec![n, total], y), Op::ConcatCols { parts }, ng)
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let y = self.value(x).slice_cols(start, end);
        let ng = self.ng(x);
        self.push(y, Op::SliceCols { x, start, width: end - start }, ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let y = self.value(x).select_rows(idx);
        let ng = self.ng(x);
        self.push(y, Op::GatherRows { x, idx: idx.to_vec() }, ng)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise op on mismatched shapes");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Add { a, b }, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Sub { a, b }, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Mul { a, b }, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(y, Op::Scale { x, c }, ng)
    }

    /// Sum of all elements → `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng)
    }

    /// Mean of all elements → `[1]`.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let w = xs.row_len();
        let mut y = xs.data().to_vec();
        for row in y.chunks_mut(w) {
            log_softmax_in_place(row);
        }
        let shape = xs.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, y), Op::LogSoftmax { x }, ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::exp);
        let ng = self.ng(x);
        self.push(y, Op::Exp { x }, ng)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, x: Var, floor: f64) -> Var {
        let y = self.value(x).map(|v| v.max(floor).ln());
        let ng = self.ng(x);
        self.push(y, Op::Log { x, floor }, ng)
    }

    /// Mean over the first axis of a 2-D tensor: `[n, k]` → `[k]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let (n, k) = (xs.dim(0), xs.row_len());
        let mut y = vec![0.0; k];
        for r in 0..n {
            for (acc, v) in y.iter_mut().zip(xs.row(r)) {
                *acc += v;
            }
        }
        y.iter_mut().for_each(|v| *v /= n as f64);
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![k], y), Op::MeanRows { x }, ng)
    }

    /// Euclidean norm of all elements → `[1]`. The subgradient at zero is zero.
    pub fn norm2(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Norm2 { x }, ng)
    }

    /// Per-row Gaussian-kernel soft histogram, normalised to sum to one:
    /// `[n, ...]` → `[n, centers.len()]`.
    pub fn soft_histogram(&mut self, x: Var, centers: &[f64], bandwidth: f64) -> Var {
        let xs = self.value(x);
        let n = xs.rows();
        let b = centers.len();
        let mut y = vec![0.0; n * b];
        for r in 0..n {
            let h = &mut y[r * b..(r + 1) * b];
            for &v in xs.row(r) {
                for (hb, &c) in h.iter_mut().zip(centers) {
                    *hb += kernel_weight(v, c, bandwidth);
                }
            }
            let total: f64 = h.iter().sum();
            h.iter_mut().for_each(|v| *v /= total);
        }
        let ng = self.ng(x);
        self.push(
            Tensor::from_parts(vec![n, b], y),
            Op::SoftHistogram { x, centers: centers.to_vec(), bandwidth },
            ng,
        )
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.ng(v) {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xs = self.value(*x);
                let ws = self.value(*w);
                let (n, inp, o) = (xs.dim(0), xs.row_len(), ws.dim(0));
                self.acc_with(grads, *x, || {
                    let mut dx = vec![0.0; n * inp];
                    gemm(n, o, inp, gd, false, ws.data(), false, 0.0, &mut dx);
                    Tensor::from_parts(xs.shape().to_vec(), dx)
                });
                self.acc_with(grads, *w, || {
                    let mut dw = vec![0.0; o * inp];
                    gemm(o, n, inp, gd, true, xs.data(), false, 0.0, &mut dw);
                    Tensor::from_parts(vec![o, inp], dw)
                });
                self.acc_with(grads, *b, || {
                    let mut db = vec![0.0; o];
                    for r in 0..n {
                        for (a, v) in db.iter_mut().zip(&gd[r * o..(r + 1) * o]) {
                            *a += v;
                        }
                    }
                    Tensor::from_parts(vec![o], db)
                });
            }
            Op::Conv2d { x, w, b, geom, batch, out_ch } => {
                let (n, o) = (*batch, *out_ch);
                let p = geom.positions();
                let gm = batch_to_channel_major(gd, n, o, p);
                let ws = self.value(*w);
                if self.ng(*w) {
                    let mut cols = vec![0.0; geom.col_rows() * n * p];
                    im2col(self.value(*x).data(), n, geom, &mut cols);
                    let mut dw = vec![0.0; o * geom.col_rows()];
                    gemm(o, n * p, geom.col_rows(), &gm, false, &cols, true, 0.0, &mut dw);
                    self.acc(grads, *w, Tensor::from_parts(ws.shape().to_vec(), dw));
                }
                self.acc_with(grads, *x, || {
                    let mut dcols = vec![0.0; geom.col_rows() * n * p];
                    gemm(geom.col_rows(), o, n * p, ws.data(), true, &gm, false, 0.0, &mut dcols);
                    let mut dx = vec![0.0; n * geom.channels * geom.height * geom.width];
                    col2im(&dcols, n, geom, &mut dx);
                    Tensor::from_parts(self.value(*x).shape().to_vec(), dx)
                });
                if let Some(b) = b {
                    self.acc_with(grads, *b, || channel_sums(gd, o, p));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, batch, in_ch } => {
                let (n, cin) = (*batch, *in_ch);
                let xs = self.value(*x);
                let ws = self.value(*w);
                let p = geom.positions();
                let mut dcols = vec![0.0; geom.col_rows() * n * p];
                im2col(gd, n, geom, &mut dcols);
                self.acc_with(grads, *x, || {
                    let mut dxm = vec![0.0; cin * n * p];
                    gemm(cin, geom.col_rows(), n * p, ws.data(), false, &dcols, false, 0.0, &mut dxm);
                    Tensor::from_parts(xs.shape().to_vec(), channel_to_batch_major(&dxm, n, cin, p))
                });
                self.acc_with(grads, *w, || {
                    let xm = batch_to_channel_major(xs.data(), n, cin, p);
                    let mut dw = vec![0.0; cin * geom.col_rows()];
                    gemm(cin, n * p, geom.col_rows(), &xm, false, &dcols, true, 0.0, &mut dw);
                    Tensor::from_parts(ws.shape().to_vec(), dw)
                });
                if let Some(b) = b {
                    let plane = geom.height * geom.width;
                    self.acc_with(grads, *b, || channel_sums(gd, geom.channels, plane));
                }
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let (n, c, p) = channel_layout(y.shape());
                let m = (n * p) as f64;
                let gam = self.value(*gamma).data();
                let (sum_dy, sum_dy_xhat) = bn_reductions(gd, xhat.data(), c, p);
                self.acc_with(grads, *x, || {
                    let mut dx = vec![0.0; gd.len()];
                    for (idx, ((dxp, gp), xp)) in dx
                        .chunks_mut(p)
                        .zip(gd.chunks(p))
                        .zip(xhat.data().chunks(p))
                        .enumerate()
                    {
                        let ch = idx % c;
                        let k = gam[ch] * inv_std[ch] / m;
                        for ((d, &gv), &xv) in dxp.iter_mut().zip(gp).zip(xp) {
                            *d = k * (m * gv - sum_dy[ch] - xv * sum_dy_xhat[ch]);
                        }
                    }
                    Tensor::from_parts(y.shape().to_vec(), dx)
                });
                self.acc_with(grads, *gamma, || Tensor::from_parts(vec![c], sum_dy_xhat.clone()));
                self.acc_with(grads, *beta, || Tensor::from_parts(vec![c], sum_dy.clone()));
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let (_, c, p) = channel_layout(y.shape());
                let gam = self.value(*gamma).data();
                let (sum_dy, sum_dy_xhat) = bn_reductions(gd, xhat.data(), c, p);
                self.acc_with(grads, *x, || {
                    let mut dx = gd.to_vec();
                    for (idx, plane) in dx.chunks_mut(p).enumerate() {
                        let k = gam[idx % c] * inv_std[idx % c];
                        plane.iter_mut().for_each(|v| *v *= k);
                    }
                    Tensor::from_parts(y.shape().to_vec(), dx)
                });
                self.acc_with(grads, *gamma, || Tensor::from_parts(vec![c], sum_dy_xhat));
                self.acc_with(grads, *beta, || Tensor::from_parts(vec![c], sum_dy));
            }
            Op::ChannelMean { x } => {
                let xs = self.value(*x);
                let (n, c, p) = channel_layout(xs.shape());
                let m = (n * p) as f64;
                let mut dx = vec![0.0; xs.numel()];
                for (idx, plane) in dx.chunks_mut(p).enumerate() {
                    let v = gd[idx % c] / m;
                    plane.iter_mut().for_each(|d| *d = v);
                }
                self.acc(grads, *x, Tensor::from_parts(xs.shape().to_vec(), dx));
            }
            Op::ChannelVar { x, mean } => {
                let xs = self.value(*x);
                let (n, c, p) = channel_layout(xs.shape());
                let m = (n * p) as f64;
                let mut dx = vec![0.0; xs.numel()];
                for (idx, (plane, src)) in dx.chunks_mut(p).zip(xs.data().chunks(p)).enumerate() {
                    let ch = idx % c;
                    let k = 2.0 * gd[ch] / m;
                    for (d, &v) in plane.iter_mut().zip(src) {
                        *d = k * (v - mean[ch]);
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(xs.shape().to_vec(), dx));
            }
            Op::Relu { x } => {
                let xs = self.value(*x);
                let dx = xs.data().iter().zip(gd).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 });
                self.acc(grads, *x, Tensor::from_parts(xs.shape().to_vec(), dx.collect()));
            }
            Op::LeakyRelu { x, slope } => {
                let xs = self.value(*x);
                let dx = xs
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { slope * gv });
                self.acc(grads, *x, Tensor::from_parts(xs.shape().to_vec(), dx.collect()));
            }
            Op::Tanh { x } => {
                let dx = y.data().iter().zip(gd).map(|(&t, &gv)| gv * (1.0 - t * t));
                self.acc(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx.collect()));
            }
            Op::AvgPool2 { x } => {
                let xs = self.value(*x);
                let (h, w) = (xs.dim(2), xs.dim(3));
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; xs.numel()];
                for (nc, gp) in gd.chunks(oh * ow).enumerate() {
                    let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = 0.25 * gp[oy * ow + ox];
                            let (iy, ix) = (2 * oy, 2 * ox);
                            dst[iy * w + ix] += v;
                            dst[iy * w + ix + 1] += v;
                            dst[(iy + 1) * w + ix] += v;
                            dst[(iy + 1) * w + ix + 1] += v;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(xs.shape().to_vec(), dx));
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.value(*x);
                let (_, _, p) = channel_layout(xs.shape());
                let mut dx = vec![0.0; xs.numel()];
                for (plane, &gv) in dx.chunks_mut(p).zip(gd) {
                    let v = gv / p as f64;
                    plane.iter_mut().for_each(|d| *d = v);
                }
                self.acc(grads, *x, Tensor::from_parts(xs.shape().to_vec(), dx));
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, Tensor::from_parts(shape, gd.to_vec()));
            }
            Op::ConcatCols { parts } => {
                let (n, total) = (y.dim(0), y.dim(1));
                let mut off = 0;
                for &(p, wd) in parts {
                    self.acc_with(grads, p, || {
                        let mut d = Vec::with_capacity(n * wd);
                        for r in 0..n {
                            d.extend_from_slice(&gd[r * total + off..r * total + off + wd]);
                        }
                        Tensor::from_parts(vec![n, wd], d)
                    });
                    off += wd;
                }
            }
            Op::SliceCols { x, start, width } => {
                let xs = self.value(*x);
                let (n, k) = (xs.dim(0), xs.dim(1));
                let mut dx = vec![0.0; n * k];
                for r in 0..n {
                    dx[r * k + start..r * k + start + width]
                        .copy_from_slice(&gd[r * width..(r + 1) * width]);
                }
                self.acc(grads, *x, Tensor::from_parts(vec![n, k], dx));
            }
            Op::GatherRows { x, idx } => {
                let xs = self.value(*x);
                let w = xs.row_len();
                let mut dx = vec![0.0; xs.numel()];
                for (j, &r) in idx.iter().enumerate() {
                    for (d, v) in dx[r * w..(r + 1) * w].iter_mut().zip(&gd[j * w..(j + 1) * w]) {
                        *d += v;
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(xs.shape().to_vec(), dx));
            }
            Op::Add { a, b } => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.clone());
            }
            Op::Sub { a, b } => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, || {
                    let d = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    Tensor::from_parts(av.shape().to_vec(), d)
                });
                self.acc_with(grads, *b, || {
                    let d = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    Tensor::from_parts(bv.shape().to_vec(), d)
                });
            }
            Op::Scale { x, c } => {
                self.acc(grads, *x, g.map(|v| v * c));
            }
            Op::Sum { x } => {
                let xs = self.value(*x);
                self.acc(grads, *x, Tensor::full(xs.shape(), gd[0]));
            }
            Op::LogSoftmax { x } => {
                let w = y.row_len();
                let mut dx = vec![0.0; y.numel()];
                for ((d, yr), gr) in dx.chunks_mut(w).zip(y.data().chunks(w)).zip(gd.chunks(w)) {
                    let s: f64 = gr.iter().sum();
                    for ((dv, &lv), &gv) in d.iter_mut().zip(yr).zip(gr) {
                        *dv = gv - lv.exp() * s;
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::Exp { x } => {
                let d = gd.iter().zip(y.data()).map(|(g, e)| g * e).collect();
                self.acc(grads, *x, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::Log { x, floor } => {
                let xs = self.value(*x);
                let d = gd
                    .iter()
                    .zip(xs.data())
                    .map(|(&gv, &v)| if v > *floor { gv / v } else { 0.0 })
                    .collect();
                self.acc(grads, *x, Tensor::from_parts(xs.shape().to_vec(), d));
            }
            Op::MeanRows { x } => {
                let xs = self.value(*x);
                let n = xs.dim(0);
                let mut dx = Vec::with_capacity(xs.numel());
                for _ in 0..n {
                    dx.extend(gd.iter().map(|v| v / n as f64));
                }
                self.acc(grads, *x, Tensor::from_parts(xs.shape().to_vec(), dx));
            }
            Op::Norm2 { x } => {
                let xs = self.value(*x);
                let norm = y.item();
                let d = if norm > 0.0 {
                    xs.data().iter().map(|v| gd[0] * v / norm).collect()
                } else {
                    vec![0.0; xs.numel()]
                };
                self.acc(grads, *x, Tensor::from_parts(xs.shape().to_vec(), d));
            }
            Op::SoftHistogram { x, centers, bandwidth } => {
                let xs = self.value(*x);
                let (n, w) = (xs.rows(), xs.row_len());
                let b = centers.len();
                let mut dx = vec![0.0; xs.numel()];
                for r in 0..n {
                    let h = &y.data()[r * b..(r + 1) * b];
                    let gh = &gd[r * b..(r + 1) * b];
                    let row = xs.row(r);
                    let total: f64 = row
                        .iter()
                        .map(|&v| centers.iter().map(|&c| kernel_weight(v, c, *bandwidth)).sum::<f64>())
                        .sum();
                    let dot: f64 = gh.iter().zip(h).map(|(a, b)| a * b).sum();
                    let da: Vec<f64> = gh.iter().map(|gv| (gv - dot) / total).collect();
                    for (j, &v) in row.iter().enumerate() {
                        let mut acc = 0.0;
                        for (k, &c) in centers.iter().enumerate() {
                            let kw = kernel_weight(v, c, *bandwidth);
                            acc += da[k] * kw * (-(v - c) / (bandwidth * bandwidth));
                        }
                        dx[r * w + j] = acc;
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(xs.shape().to_vec(), dx));
            }
        }
    }
}

fn kernel_weight(v: f64, c: f64, bandwidth: f64) -> f64 {
    let z = (v - c) / bandwidth;
    (-0.5 * z * z).exp()
}

/// Per-channel mean and biased variance of an `[n, c, p]` layout.
pub(crate) fn channel_moments(x: &[f64], n: usize, c: usize, p: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * p) as f64;
    let mut mean = vec![0.0; c];
    for (idx, plane) in x.chunks(p).enumerate() {
        mean[idx % c] += plane.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; c];
    for (idx, plane) in x.chunks(p).enumerate() {
        let mu = mean[idx % c];
        var[idx % c] += plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

fn channel_sums(g: &[f64], c: usize, p: usize) -> Tensor {
    let mut s = vec![0.0; c];
    for (idx, plane) in g.chunks(p).enumerate() {
        s[idx % c] += plane.iter().sum::<f64>();
    }
    Tensor::from_parts(vec![c], s)
}

fn bn_reductions(g: &[f64], xhat: &[f64], c: usize, p: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for (idx, (gp, xp)) in g.chunks(p).zip(xhat.chunks(p)).enumerate() {
        let ch = idx % c;
        for (&gv, &xv) in gp.iter().zip(xp) {
            sum_dy[ch] += gv;
            sum_dy_xhat[ch] += gv * xv;
        }
    }
    (sum_dy, sum_dy_xhat)
}
