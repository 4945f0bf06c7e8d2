//! Tape-based reverse-mode differentiation over the handful of layers the
//! segmentation network needs.
//!
//! Every op appends a node holding its output; `backward` walks the tape in
//! reverse. Intermediate gradients are dropped once consumed, leaf gradients
//! are kept for the caller.

use super::tensor::{matmul, Scalar, Tensor};

const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;
const SHIFT_GROUPS: usize = 5;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftAxis {
    Height,
    Width,
}

/// Batch-norm statistics mode.
pub enum BnMode<'a> {
    /// Normalise with batch statistics and report them.
    Train,
    /// Normalise with stored running statistics.
    Eval { mean: &'a [f32], var: &'a [f32] },
}

/// Per-channel statistics observed by a batch-norm layer in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-statistic updates.
    pub var: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample(Var),
    Add(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    DwConv {
        x: Var,
        w: Var,
        b: Var,
    },
    Gelu(Var),
    Shift {
        x: Var,
        axis: ShiftAxis,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    half: bool,
    bn_stats: Vec<BnBatchStats>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn round_to_half<T: Scalar>(data: &mut [T]) {
    for v in data {
        *v = T::lit(half::f16::from_f64(v.as_f64()).to_f64());
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            half: false,
            bn_stats: Vec::new(),
        }
    }

    /// Every node output (parameters included) is rounded to IEEE half
    /// precision; arithmetic inside each op still accumulates at `T`.
    pub fn half_precision() -> Self {
        Graph {
            half: true,
            ..Self::new()
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Statistics of each training-mode batch-norm call, in call order.
    pub fn bn_stats(&self) -> &[BnBatchStats] {
        &self.bn_stats
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        if self.half {
            round_to_half(value.data_mut());
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient is computed for it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// 2-D convolution with a `[cout, cin, k, k]` kernel and `[cout,1,1,1]` bias.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let out = conv_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        )
    }

    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let plane = h * w;
        let count = n * plane;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); c];
        let train = matches!(mode, BnMode::Train);
        let mut stats = BnBatchStats {
            mean: vec![0.0; c],
            var: vec![0.0; c],
        };
        for ch in 0..c {
            let (mean, var) = match &mode {
                BnMode::Train => {
                    let mut sum = 0.0f64;
                    for i in 0..n {
                        sum += xv.item(i)[ch * plane..(ch + 1) * plane]
                            .iter()
                            .map(|v| v.as_f64())
                            .sum::<f64>();
                    }
                    let mean = sum / count as f64;
                    let mut sq = 0.0f64;
                    for i in 0..n {
                        sq += xv.item(i)[ch * plane..(ch + 1) * plane]
                            .iter()
                            .map(|v| (v.as_f64() - mean).powi(2))
                            .sum::<f64>();
                    }
                    let var = sq / count as f64;
                    stats.mean[ch] = mean;
                    stats.var[ch] = if count > 1 {
                        var * count as f64 / (count - 1) as f64
                    } else {
                        var
                    };
                    (mean, var)
                }
                BnMode::Eval { mean, var } => (mean[ch] as f64, var[ch] as f64),
            };
            let inv = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = T::lit(inv);
            let (m, s) = (T::lit(mean), T::lit(inv));
            for i in 0..n {
                let base = i * c * plane + ch * plane;
                for (o, &v) in xhat[base..base + plane]
                    .iter_mut()
                    .zip(&xv.data()[base..base + plane])
                {
                    *o = (v - m) * s;
                }
            }
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = Tensor::zeros([n, c, h, w]);
        for i in 0..n {
            for ch in 0..c {
                let base = i * c * plane + ch * plane;
                for (o, &v) in out.data_mut()[base..base + plane]
                    .iter_mut()
                    .zip(&xhat[base..base + plane])
                {
                    *o = g[ch] * v + bt[ch];
                }
            }
        }
        if train {
            self.bn_stats.push(stats);
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            ng,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let out = Tensor::from_vec(xv.shape(), data);
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        assert!(h % 2 == 0 && w % 2 == 0, "max pool needs even dims, got {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let mut argmax = vec![0u32; n * c * ho * wo];
        let src = xv.data();
        let dst = out.data_mut();
        for p in 0..n * c {
            let sbase = p * h * w;
            let dbase = p * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = sbase + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = sbase + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    dst[dbase + oy * wo + ox] = src[best];
                    argmax[dbase + oy * wo + ox] = (best - sbase) as u32;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::MaxPool { x, argmax }, ng)
    }

    /// Bilinear 2x upsampling (half-pixel centres, edge clamped).
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let rows = upsample_table(h);
        let cols = upsample_table(w);
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let src = xv.data();
        let dst = out.data_mut();
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut dst[p * ho * wo..(p + 1) * ho * wo];
            for (oy, &(r0, r1, lr)) in rows.iter().enumerate() {
                let lr: T = T::lit(lr);
                let mr = T::one() - lr;
                for (ox, &(c0, c1, lc)) in cols.iter().enumerate() {
                    let lc: T = T::lit(lc);
                    let mc = T::one() - lc;
                    d[oy * wo + ox] = mr * (mc * s[r0 * w + c0] + lc * s[r0 * w + c1])
                        + lr * (mc * s[r1 * w + c0] + lc * s[r1 * w + c1]);
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Upsample(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add needs equal shapes");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(av.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Layer norm across channels at each spatial position (token).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let plane = h * w;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); n * plane];
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = Tensor::zeros(xv.shape());
        let src = xv.data();
        let dst = out.data_mut();
        for i in 0..n {
            let base = i * c * plane;
            for p in 0..plane {
                let mut mean = 0.0f64;
                for ch in 0..c {
                    mean += src[base + ch * plane + p].as_f64();
                }
                mean /= c as f64;
                let mut var = 0.0f64;
                for ch in 0..c {
                    var += (src[base + ch * plane + p].as_f64() - mean).powi(2);
                }
                var /= c as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                inv_std[i * plane + p] = T::lit(inv);
                let (m, s) = (T::lit(mean), T::lit(inv));
                for ch in 0..c {
                    let idx = base + ch * plane + p;
                    let xh = (src[idx] - m) * s;
                    xhat[idx] = xh;
                    dst[idx] = g[ch] * xh + bt[ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Depthwise 3x3 convolution, padding 1; kernel `[c,1,3,3]`, bias `[c,1,1,1]`.
    pub fn dw_conv3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = dw_forward(self.value(x), self.value(w), self.value(b));
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out, Op::DwConv { x, w, b }, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::from_vec(xv.shape(), data);
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Splits channels into five groups and shifts group `g` by `g - 2`
    /// positions along `axis`, filling with zeros.
    pub fn shift(&mut self, x: Var, axis: ShiftAxis) -> Var {
        let xv = self.value(x);
        let out = shift_apply(xv, axis, false);
        let ng = self.ng(x);
        self.push(out, Op::Shift { x, axis }, ng)
    }

    /// Back-propagates `grad` (same shape as `out`) through the tape.
    pub fn backward(&self, out: Var, grad: Tensor<T>) -> Gradients<T> {
        assert_eq!(grad.shape(), self.value(out).shape());
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(grad);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                &Op::Conv {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (gx, gw, gb) = conv_backward(
                        self.value(x),
                        self.value(w),
                        &g,
                        stride,
                        pad,
                        self.ng(x),
                    );
                    if let Some(gx) = gx {
                        self.acc(&mut grads, x, gx);
                    }
                    self.acc(&mut grads, w, gw);
                    self.acc(&mut grads, b, gb);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let (gx, gg, gb) =
                        bn_backward(&g, xhat, inv_std, self.value(*gamma).data(), *train);
                    self.acc(&mut grads, *x, gx);
                    self.acc(&mut grads, *gamma, gg);
                    self.acc(&mut grads, *beta, gb);
                }
                &Op::Relu(x) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                        .collect();
                    self.acc(&mut grads, x, Tensor::from_vec(g.shape(), data));
                }
                Op::MaxPool { x, argmax } => {
                    let xs = self.value(*x).shape();
                    let plane_in = xs[2] * xs[3];
                    let plane_out = plane_in / 4;
                    let mut gx = Tensor::zeros(xs);
                    let gxd = gx.data_mut();
                    for (j, (&gv, &am)) in g.data().iter().zip(argmax).enumerate() {
                        let p = j / plane_out;
                        gxd[p * plane_in + am as usize] += gv;
                    }
                    self.acc(&mut grads, *x, gx);
                }
                &Op::Upsample(x) => {
                    let gx = upsample_backward(&g, self.value(x).shape());
                    self.acc(&mut grads, x, gx);
                }
                &Op::Add(a, b) => {
                    if self.ng(a) && self.ng(b) {
                        self.acc(&mut grads, a, g.clone());
                        self.acc(&mut grads, b, g);
                    } else if self.ng(a) {
                        self.acc(&mut grads, a, g);
                    } else {
                        self.acc(&mut grads, b, g);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (gx, gg, gb) = ln_backward(&g, xhat, inv_std, self.value(*gamma).data());
                    self.acc(&mut grads, *x, gx);
                    self.acc(&mut grads, *gamma, gg);
                    self.acc(&mut grads, *beta, gb);
                }
                &Op::DwConv { x, w, b } => {
                    let (gx, gw, gb) = dw_backward(self.value(x), self.value(w), &g);
                    self.acc(&mut grads, x, gx);
                    self.acc(&mut grads, w, gw);
                    self.acc(&mut grads, b, gb);
                }
                &Op::Gelu(x) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(&gv, &xv)| gv * gelu_grad(xv))
                        .collect();
                    self.acc(&mut grads, x, Tensor::from_vec(g.shape(), data));
                }
                &Op::Shift { x, axis } => {
                    self.acc(&mut grads, x, shift_apply(&g, axis, true));
                }
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients of the leaves reached by a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= k, "kernel {k} larger than padded input {size}");
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let npx = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * npx..(row + 1) * npx];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    if stride == 1 {
                        // ix = ox + kx - pad must lie in [0, w)
                        let lo = pad.saturating_sub(kx).min(wo);
                        let hi = (w + pad).saturating_sub(kx).min(wo).max(lo);
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        let off = lo + kx - pad;
                        drow[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *d = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let npx = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * npx..(row + 1) * npx];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        let lo = pad.saturating_sub(kx).min(wo);
                        let hi = (w + pad).saturating_sub(kx).min(wo).max(lo);
                        let off = lo + kx - pad;
                        for (d, &s) in dst[off..off + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                            *d += s;
                        }
                    } else {
                        for (ox, &s) in srow.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [n, cin, h, wd] = x.shape();
    let [cout, cin_w, k, k2] = w.shape();
    assert_eq!(cin, cin_w, "conv input channels");
    assert_eq!(k, k2, "square kernels only");
    assert_eq!(b.len(), cout, "conv bias length");
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
    let kk = cin * k * k;
    let npx = ho * wo;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    let mut cols = if is_pointwise(k, stride, pad) {
        Vec::new()
    } else {
        vec![T::zero(); kk * npx]
    };
    let item_out = cout * npx;
    for i in 0..n {
        let xi = x.item(i);
        let oi = &mut out.data_mut()[i * item_out..(i + 1) * item_out];
        let src: &[T] = if is_pointwise(k, stride, pad) {
            xi
        } else {
            im2col(xi, cin, h, wd, k, stride, pad, ho, wo, &mut cols);
            &cols
        };
        matmul(false, false, cout, npx, kk, w.data(), src, oi, false);
        for (co, &bias) in b.data().iter().enumerate() {
            for v in &mut oi[co * npx..(co + 1) * npx] {
                *v += bias;
            }
        }
    }
    out
}

type ConvGrads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_gx: bool,
) -> ConvGrads<T> {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let [_, _, ho, wo] = g.shape();
    let kk = cin * k * k;
    let npx = ho * wo;
    let pointwise = is_pointwise(k, stride, pad);
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros([cout, 1, 1, 1]);
    let mut gx = want_gx.then(|| Tensor::zeros(x.shape()));
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); kk * npx]
    };
    let mut gcols = vec![T::zero(); if want_gx { kk * npx } else { 0 }];
    for i in 0..n {
        let gi = g.item(i);
        let xi = x.item(i);
        let src: &[T] = if pointwise {
            xi
        } else {
            im2col(xi, cin, h, wd, k, stride, pad, ho, wo, &mut cols);
            &cols
        };
        matmul(false, true, cout, kk, npx, gi, src, gw.data_mut(), true);
        for co in 0..cout {
            let s: T = gi[co * npx..(co + 1) * npx].iter().copied().sum();
            gb.data_mut()[co] += s;
        }
        if let Some(gx) = gx.as_mut() {
            let item = cin * h * wd;
            let gxi = &mut gx.data_mut()[i * item..(i + 1) * item];
            if pointwise {
                matmul(true, false, kk, npx, cout, w.data(), gi, gxi, true);
            } else {
                matmul(true, false, kk, npx, cout, w.data(), gi, &mut gcols, false);
                col2im(&gcols, cin, h, wd, k, stride, pad, ho, wo, gxi);
            }
        }
    }
    (gx, gw, gb)
}

fn bn_backward<T: Scalar>(
    g: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    train: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = g.shape();
    let plane = h * w;
    let count = T::lit((n * plane) as f64);
    let gd = g.data();
    let mut gx = Tensor::zeros(g.shape());
    let mut gg = Tensor::zeros([c, 1, 1, 1]);
    let mut gb = Tensor::zeros([c, 1, 1, 1]);
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for i in 0..n {
            let base = i * c * plane + ch * plane;
            for j in base..base + plane {
                sum_g += gd[j];
                sum_gx += gd[j] * xhat[j];
            }
        }
        gg.data_mut()[ch] = sum_gx;
        gb.data_mut()[ch] = sum_g;
        let scale = gamma[ch] * inv_std[ch];
        let gxd = gx.data_mut();
        for i in 0..n {
            let base = i * c * plane + ch * plane;
            for j in base..base + plane {
                gxd[j] = if train {
                    scale * (gd[j] - sum_g / count - xhat[j] * sum_gx / count)
                } else {
                    scale * gd[j]
                };
            }
        }
    }
    (gx, gg, gb)
}

fn ln_backward<T: Scalar>(
    g: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = g.shape();
    let plane = h * w;
    let cn = T::lit(c as f64);
    let gd = g.data();
    let mut gx = Tensor::zeros(g.shape());
    let mut gg = Tensor::zeros([c, 1, 1, 1]);
    let mut gb = Tensor::zeros([c, 1, 1, 1]);
    let mut gxhat = vec![T::zero(); c];
    for i in 0..n {
        let base = i * c * plane;
        for p in 0..plane {
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for ch in 0..c {
                let idx = base + ch * plane + p;
                gg.data_mut()[ch] += gd[idx] * xhat[idx];
                gb.data_mut()[ch] += gd[idx];
                gxhat[ch] = gd[idx] * gamma[ch];
                s1 += gxhat[ch];
                s2 += gxhat[ch] * xhat[idx];
            }
            let inv = inv_std[i * plane + p];
            for ch in 0..c {
                let idx = base + ch * plane + p;
                gx.data_mut()[idx] = inv * (gxhat[ch] - s1 / cn - xhat[idx] * s2 / cn);
            }
        }
    }
    (gx, gg, gb)
}

/// `(source0, source1, weight of source1)` per output index.
fn upsample_table(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn upsample_backward<T: Scalar>(g: &Tensor<T>, in_shape: [usize; 4]) -> Tensor<T> {
    let [n, c, h, w] = in_shape;
    let rows = upsample_table(h);
    let cols = upsample_table(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut gx = Tensor::zeros(in_shape);
    let gd = g.data();
    let gxd = gx.data_mut();
    for p in 0..n * c {
        let s = &gd[p * ho * wo..(p + 1) * ho * wo];
        let d = &mut gxd[p * h * w..(p + 1) * h * w];
        for (oy, &(r0, r1, lr)) in rows.iter().enumerate() {
            let lr: T = T::lit(lr);
            let mr = T::one() - lr;
            for (ox, &(c0, c1, lc)) in cols.iter().enumerate() {
                let lc: T = T::lit(lc);
                let mc = T::one() - lc;
                let v = s[oy * wo + ox];
                d[r0 * w + c0] += mr * mc * v;
                d[r0 * w + c1] += mr * lc * v;
                d[r1 * w + c0] += lr * mc * v;
                d[r1 * w + c1] += lr * lc * v;
            }
        }
    }
    gx
}

fn dw_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, wd] = x.shape();
    assert_eq!(w.shape(), [c, 1, 3, 3], "depthwise kernel shape");
    let mut out = Tensor::zeros(x.shape());
    let plane = h * wd;
    let (xd, wdta, bd) = (x.data(), w.data(), b.data());
    let od = out.data_mut();
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let kern = &wdta[ch * 9..ch * 9 + 9];
            for r in 0..h {
                for col in 0..wd {
                    let mut acc = bd[ch];
                    for ky in 0..3 {
                        let rr = r as isize + ky as isize - 1;
                        if rr < 0 || rr >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let cc = col as isize + kx as isize - 1;
                            if cc < 0 || cc >= wd as isize {
                                continue;
                            }
                            acc += kern[ky * 3 + kx] * xd[base + rr as usize * wd + cc as usize];
                        }
                    }
                    od[base + r * wd + col] = acc;
                }
            }
        }
    }
    out
}

fn dw_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, wd] = x.shape();
    let plane = h * wd;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros([c, 1, 1, 1]);
    let (xd, wdta, gd) = (x.data(), w.data(), g.data());
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            for r in 0..h {
                for col in 0..wd {
                    let gv = gd[base + r * wd + col];
                    gb.data_mut()[ch] += gv;
                    for ky in 0..3 {
                        let rr = r as isize + ky as isize - 1;
                        if rr < 0 || rr >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let cc = col as isize + kx as isize - 1;
                            if cc < 0 || cc >= wd as isize {
                                continue;
                            }
                            let src = base + rr as usize * wd + cc as usize;
                            gw.data_mut()[ch * 9 + ky * 3 + kx] += gv * xd[src];
                            gx.data_mut()[src] += gv * wdta[ch * 9 + ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

/// Applies the grouped shift; `inverse` shifts the other way (the adjoint).
fn shift_apply<T: Scalar>(x: &Tensor<T>, axis: ShiftAxis, inverse: bool) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let chunk = c.div_ceil(SHIFT_GROUPS);
    let half_span = (SHIFT_GROUPS / 2) as isize;
    let mut out = Tensor::zeros(x.shape());
    let plane = h * w;
    let (xd, od) = (x.data(), out.data_mut());
    for i in 0..n {
        for ch in 0..c {
            let mut s = (ch / chunk) as isize - half_span;
            if inverse {
                s = -s;
            }
            let base = (i * c + ch) * plane;
            for r in 0..h {
                for col in 0..w {
                    let (sr, sc) = match axis {
                        ShiftAxis::Height => (r as isize - s, col as isize),
                        ShiftAxis::Width => (r as isize, col as isize - s),
                    };
                    if sr >= 0 && sr < h as isize && sc >= 0 && sc < w as isize {
                        od[base + r * w + col] = xd[base + sr as usize * w + sc as usize];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks d(sum(out * r))/d(input) for every input element against central
    /// differences.
    fn check_op(
        shapes: &[[usize; 4]],
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|&s| rand_tensor(&mut rng, s)).collect();
        let eval = |inputs: &[Tensor<f64>]| -> (Graph<f64>, Vec<Var>, Var) {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = eval(&inputs);
        let r = rand_tensor(&mut rng, g.value(out).shape());
        let loss = |g: &Graph<f64>, out: Var| -> f64 {
            g.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let grads = g.backward(out, r.clone());
        for (which, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).expect("gradient reaches every input");
            for j in 0..inputs[which].len() {
                let h = 1e-6;
                let mut plus = inputs.clone();
                plus[which].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[which].data_mut()[j] -= h;
                let (gp, _, op) = eval(&plus);
                let (gm, _, om) = eval(&minus);
                let numeric = (loss(&gp, op) - loss(&gm, om)) / (2.0 * h);
                let a = analytic.data()[j];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-4,
                    "input {which} element {j}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn conv_gradients() {
        check_op(
            &[[2, 2, 5, 6], [3, 2, 3, 3], [3, 1, 1, 1]],
            |g, v| g.conv(v[0], v[1], v[2], 1, 1),
            1,
        );
        check_op(
            &[[1, 2, 6, 6], [2, 2, 3, 3], [2, 1, 1, 1]],
            |g, v| g.conv(v[0], v[1], v[2], 2, 1),
            2,
        );
        check_op(
            &[[2, 3, 4, 4], [2, 3, 1, 1], [2, 1, 1, 1]],
            |g, v| g.conv(v[0], v[1], v[2], 1, 0),
            3,
        );
    }

    #[test]
    fn norm_gradients() {
        check_op(
            &[[3, 2, 3, 4], [2, 1, 1, 1], [2, 1, 1, 1]],
            |g, v| g.batch_norm(v[0], v[1], v[2], BnMode::Train),
            4,
        );
        check_op(
            &[[2, 4, 3, 2], [4, 1, 1, 1], [4, 1, 1, 1]],
            |g, v| g.layer_norm(v[0], v[1], v[2]),
            5,
        );
    }

    #[test]
    fn pointwise_and_resampling_gradients() {
        check_op(&[[2, 2, 4, 6]], |g, v| g.relu(v[0]), 6);
        check_op(&[[2, 2, 4, 6]], |g, v| g.gelu(v[0]), 7);
        check_op(&[[2, 2, 4, 6]], |g, v| g.max_pool2(v[0]), 8);
        check_op(&[[2, 2, 3, 4]], |g, v| g.upsample2(v[0]), 9);
        check_op(&[[2, 3, 3, 4], [2, 3, 3, 4]], |g, v| g.add(v[0], v[1]), 10);
        check_op(
            &[[2, 3, 4, 5], [3, 1, 3, 3], [3, 1, 1, 1]],
            |g, v| g.dw_conv3(v[0], v[1], v[2]),
            11,
        );
        check_op(&[[1, 7, 6, 6]], |g, v| g.shift(v[0], ShiftAxis::Height), 12);
        check_op(&[[1, 7, 6, 6]], |g, v| g.shift(v[0], ShiftAxis::Width), 13);
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_vec([1, 1, 3, 5], vec![2.5; 15]));
        let y = g.upsample2(x);
        assert_eq!(g.value(y).shape(), [1, 1, 6, 10]);
        assert!(g.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn shift_moves_groups() {
        // Five channels, one per group: shifts -2..=2 along height.
        let mut data = vec![0.0f32; 5 * 5];
        for ch in 0..5 {
            data[ch * 5 + 2] = 1.0; // row 2 of a 5x1 column
        }
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_vec([1, 5, 5, 1], data));
        let y = g.shift(x, ShiftAxis::Height);
        for ch in 0..5 {
            let col = &g.value(y).data()[ch * 5..ch * 5 + 5];
            let expect = (2 + ch as isize - 2) as usize;
            assert_eq!(col[expect], 1.0, "channel {ch}: {col:?}");
        }
    }

    #[test]
    fn half_precision_rounds_outputs() {
        let mut g = Graph::<f32>::half_precision();
        let x = g.input(Tensor::from_vec([1, 1, 1, 2], vec![1.0 + 1e-5, 70000.0]));
        let v = g.value(x).data();
        assert_eq!(v[0], 1.0);
        assert!(v[1].is_infinite());
    }
}
