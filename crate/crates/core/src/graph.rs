//! Reverse-mode automatic differentiation over a per-sample expression tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s; calling
//! [`Graph::backward`] on a scalar node returns gradients for every
//! registered parameter leaf. Graphs are cheap and single-use: build one per
//! sample, per objective.

use std::sync::Arc;

use crate::kspace::{fft2c_unchecked, ifft2c_unchecked, ComplexImage};
use crate::tensor::Tensor;
use crate::warp::{smoothness_planes, smoothness_planes_grad, warp_planes, warp_planes_backward};

const MAG_EPS: f64 = 1e-12;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Identifies a trainable tensor: which bundle, which entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamRef {
    pub bundle: usize,
    pub index: usize,
}

enum Op {
    Const,
    Param(ParamRef),
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    AvgPool2(Var),
    Upsample2(Var),
    Blur { x: Var, ky: Arc<Vec<f64>>, kx: Arc<Vec<f64>> },
    Center(Var),
    Concat(Vec<Var>),
    Slice { x: Var, c0: usize },
    Relu(Var),
    LeakyRelu { x: Var, slope: f64 },
    InstanceNorm { x: Var, inv_std: Vec<f64> },
    Add(Var, Var),
    Scale { x: Var, k: f64 },
    Magnitude(Var),
    DataConsistency { x: Var, keep: Arc<Vec<bool>> },
    Warp { src: Var, field: Var },
    Smoothness { field: Var, guide: Arc<Vec<f64>> },
    MeanAbsDiff { x: Var, target: Arc<Tensor> },
    SpectralNorm { w: Var, u: Vec<f64>, v: Vec<f64>, sigma: f64 },
    GlobalMean(Var),
    Sum(Var),
    LinComb(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Parameter gradients produced by [`Graph::backward`], in registration order.
pub type ParamGrads = Vec<(ParamRef, Tensor)>;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const, false)
    }

    /// Registers a parameter leaf. `trainable = false` makes it a constant
    /// that still reports its reference.
    pub fn param(&mut self, t: &Tensor, r: ParamRef, trainable: bool) -> Var {
        self.push(t.clone(), Op::Param(r), trainable)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = {
            let xv = self.value(x);
            let wv = self.value(w);
            conv_forward(xv, wv, b.map(|b| &self.value(b).data[..]), stride, pad)
        };
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv { x, w, b, stride, pad }, ng)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let (ho, wo) = (h / 2, w / 2);
        let src = &self.value(x).data;
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let base = ch * h * w;
                    out[(ch * ho + y) * wo + xx] = 0.25
                        * (src[base + 2 * y * w + 2 * xx]
                            + src[base + 2 * y * w + 2 * xx + 1]
                            + src[base + (2 * y + 1) * w + 2 * xx]
                            + src[base + (2 * y + 1) * w + 2 * xx + 1]);
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[c, ho, wo], out), Op::AvgPool2(x), ng)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let src = &self.value(x).data;
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(ch * ho + y) * wo + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[c, ho, wo], out), Op::Upsample2(x), ng)
    }

    /// Separable Gaussian low-pass with standard deviation `sigma` pixels,
    /// renormalized at the borders so constants pass through unchanged.
    pub fn gaussian_blur(&mut self, x: Var, sigma: f64) -> Var {
        let (c, h, w) = self.value(x).chw();
        let ky = Arc::new(gaussian_operator(h, sigma));
        let kx = Arc::new(gaussian_operator(w, sigma));
        let out = separable_apply(&self.value(x).data, c, h, w, &ky, &kx, false);
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[c, h, w], out), Op::Blur { x, ky, kx }, ng)
    }

    /// Subtracts each channel's spatial mean.
    pub fn center(&mut self, x: Var) -> Var {
        let out = center_planes(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::Center(x), ng)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (_, h, w) = self.value(parts[0]).chw();
        let mut c = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pc, ph, pw) = self.value(p).chw();
            assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
            c += pc;
            data.extend_from_slice(&self.value(p).data);
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(&[c, h, w], data), Op::Concat(parts.to_vec()), ng)
    }

    /// Channels `c0..c1`.
    pub fn slice(&mut self, x: Var, c0: usize, c1: usize) -> Var {
        let (_, h, w) = self.value(x).chw();
        let data = self.value(x).data[c0 * h * w..c1 * h * w].to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[c1 - c0, h, w], data), Op::Slice { x, c0 }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let mut t = self.value(x).clone();
        t.data.iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= slope
            }
        });
        let ng = self.ng(x);
        self.push(t, Op::LeakyRelu { x, slope }, ng)
    }

    /// Per-channel normalization to zero mean and unit variance.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let n = (h * w) as f64;
        let mut t = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let plane = &mut t.data[ch * h * w..(ch + 1) * h * w];
            let mean = plane.iter().sum::<f64>() / n;
            let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let r = 1.0 / (var + NORM_EPS).sqrt();
            plane.iter_mut().for_each(|v| *v = (*v - mean) * r);
            inv_std.push(r);
        }
        let ng = self.ng(x);
        self.push(t, Op::InstanceNorm { x, inv_std }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let mut t = self.value(x).clone();
        t.scale(k);
        let ng = self.ng(x);
        self.push(t, Op::Scale { x, k }, ng)
    }

    /// Pointwise modulus of a two-channel complex tensor.
    pub fn magnitude(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(c, 2);
        let xv = self.value(x);
        let data = (0..h * w)
            .map(|i| (xv.data[i].powi(2) + xv.data[h * w + i].powi(2) + MAG_EPS).sqrt())
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[1, h, w], data), Op::Magnitude(x), ng)
    }

    /// Replaces the k-space of `x` with `measured` wherever `keep` is set.
    pub fn data_consistency(&mut self, x: Var, measured: &ComplexImage, keep: Arc<Vec<bool>>) -> Var {
        let cur = ComplexImage::from_tensor(self.value(x));
        let mut k = fft2c_unchecked(&cur);
        for ((v, m), &kp) in k.data.iter_mut().zip(&measured.data).zip(keep.iter()) {
            if kp {
                *v = *m;
            }
        }
        let out = ifft2c_unchecked(&k).to_tensor();
        let ng = self.ng(x);
        self.push(out, Op::DataConsistency { x, keep }, ng)
    }

    /// Bilinear resampling of `src` at `p + field(p)`; `field` channels are
    /// `[dx, dy]`.
    pub fn warp(&mut self, src: Var, field: Var) -> Var {
        let (c, h, w) = self.value(src).chw();
        let f = self.value(field);
        assert_eq!(f.chw(), (2, h, w), "warp field shape");
        let out = warp_planes(&self.value(src).data, c, h, w, f.channel(0), f.channel(1));
        let ng = self.ng(src) || self.ng(field);
        self.push(Tensor::from_vec(&[c, h, w], out), Op::Warp { src, field }, ng)
    }

    /// Edge-aware smoothness penalty (sum over unordered 4-neighbour pairs).
    pub fn smoothness(&mut self, field: Var, guide: Arc<Vec<f64>>) -> Var {
        let f = self.value(field);
        let (_, h, w) = f.chw();
        let v = smoothness_planes(h, w, f.channel(0), f.channel(1), &guide);
        let ng = self.ng(field);
        self.push(Tensor::scalar(v), Op::Smoothness { field, guide }, ng)
    }

    /// `mean |x - target|`.
    pub fn mean_abs_diff(&mut self, x: Var, target: Arc<Tensor>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape, target.shape, "L1 target shape");
        let v = xv.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / xv.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(v), Op::MeanAbsDiff { x, target }, ng)
    }

    /// `W / (u^T W v)` with the singular-vector estimates held constant.
    pub fn spectral_norm(&mut self, w: Var, u: &[f64], v: &[f64]) -> Var {
        let wv = self.value(w);
        let rows = wv.shape[0];
        let cols = wv.len() / rows;
        assert_eq!((u.len(), v.len()), (rows, cols));
        let sigma = bilinear(&wv.data, rows, cols, u, v);
        let mut t = wv.clone();
        t.scale(1.0 / sigma);
        let ng = self.ng(w);
        self.push(t, Op::SpectralNorm { w, u: u.to_vec(), v: v.to_vec(), sigma }, ng)
    }

    /// Spatial mean per channel, `[C, H, W] -> [C, 1, 1]`.
    pub fn global_mean(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let data = (0..c).map(|ch| self.value(x).channel(ch).iter().sum::<f64>() / (h * w) as f64).collect();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[c, 1, 1], data), Op::GlobalMean(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(v), Op::Sum(x), ng)
    }

    /// `sum_i k_i * s_i` over scalar nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().map(|&(s, k)| k * self.value(s).item()).sum();
        let ng = terms.iter().any(|&(s, _)| self.ng(s));
        self.push(Tensor::scalar(v), Op::LinComb(terms.to_vec()), ng)
    }

    /// Backpropagates from scalar `root` and returns gradients of every
    /// trainable parameter leaf reachable from it.
    pub fn backward(&self, root: Var) -> ParamGrads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::from_vec(
            &self.nodes[root.0].value.shape,
            vec![1.0; self.nodes[root.0].value.len()],
        ));
        let mut out = Vec::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if let Op::Param(r) = node.op {
                out.push((r, g));
            }
        }
        out.reverse();
        out
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Const | Op::Param(_) => {}
            Op::Conv { x, w, b, stride, pad } => {
                let (gx, gw, gb) =
                    conv_backward(self.value(*x), self.value(*w), g, *stride, *pad, self.ng(*x), self.ng(*w));
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    let len = self.value(*b).len();
                    self.accumulate(grads, *b, Tensor::from_vec(&[len], gb));
                }
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = self.value(*x).chw();
                let (ho, wo) = (h / 2, w / 2);
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let v = 0.25 * g.data[(ch * ho + y) * wo + xx];
                            let base = ch * h * w;
                            gx.data[base + 2 * y * w + 2 * xx] += v;
                            gx.data[base + 2 * y * w + 2 * xx + 1] += v;
                            gx.data[base + (2 * y + 1) * w + 2 * xx] += v;
                            gx.data[base + (2 * y + 1) * w + 2 * xx + 1] += v;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Upsample2(x) => {
                let (c, h, w) = self.value(*x).chw();
                let (ho, wo) = (2 * h, 2 * w);
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            gx.data[(ch * h + y / 2) * w + xx / 2] += g.data[(ch * ho + y) * wo + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Blur { x, ky, kx } => {
                let (c, h, w) = self.value(*x).chw();
                let gx = separable_apply(&g.data, c, h, w, ky, kx, true);
                self.accumulate(grads, *x, Tensor::from_vec(&[c, h, w], gx));
            }
            Op::Center(x) => self.accumulate(grads, *x, center_planes(g)),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let shape = self.value(p).shape.clone();
                    let n = self.value(p).len();
                    self.accumulate(grads, p, Tensor::from_vec(&shape, g.data[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::Slice { x, c0 } => {
                let xv = self.value(*x);
                let (_, h, w) = xv.chw();
                let mut gx = Tensor::zeros(&xv.shape);
                gx.data[c0 * h * w..c0 * h * w + g.len()].copy_from_slice(&g.data);
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let mut gx = g.clone();
                for (gv, &xv) in gx.data.iter_mut().zip(&self.value(*x).data) {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LeakyRelu { x, slope } => {
                let mut gx = g.clone();
                for (gv, &xv) in gx.data.iter_mut().zip(&self.value(*x).data) {
                    if xv < 0.0 {
                        *gv *= slope;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::InstanceNorm { x, inv_std } => {
                let y = &node.value;
                let (c, h, w) = y.chw();
                let n = (h * w) as f64;
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    let r = ch * h * w..(ch + 1) * h * w;
                    let (gy, yy) = (&g.data[r.clone()], &y.data[r.clone()]);
                    let mg = gy.iter().sum::<f64>() / n;
                    let mgy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, &gv), &yv) in gx.data[r].iter_mut().zip(gy).zip(yy) {
                        *o = inv_std[ch] * (gv - mg - yv * mgy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale { x, k } => {
                let mut gx = g.clone();
                gx.scale(*k);
                self.accumulate(grads, *x, gx);
            }
            Op::Magnitude(x) => {
                let xv = self.value(*x);
                let (_, h, w) = xv.chw();
                let n = h * w;
                let mut gx = Tensor::zeros(&xv.shape);
                for i in 0..n {
                    let m = node.value.data[i];
                    gx.data[i] = g.data[i] * xv.data[i] / m;
                    gx.data[n + i] = g.data[i] * xv.data[n + i] / m;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::DataConsistency { x, keep } => {
                // F^-1 (1 - M) F is self-adjoint
                let mut k = fft2c_unchecked(&ComplexImage::from_tensor(g));
                for (v, &kp) in k.data.iter_mut().zip(keep.iter()) {
                    if kp {
                        *v = Default::default();
                    }
                }
                self.accumulate(grads, *x, ifft2c_unchecked(&k).to_tensor());
            }
            Op::Warp { src, field } => {
                let s = self.value(*src);
                let f = self.value(*field);
                let (c, h, w) = s.chw();
                let (gs, gdx, gdy) = warp_planes_backward(&s.data, c, h, w, f.channel(0), f.channel(1), &g.data);
                self.accumulate(grads, *src, Tensor::from_vec(&[c, h, w], gs));
                let mut gf = gdx;
                gf.extend(gdy);
                self.accumulate(grads, *field, Tensor::from_vec(&[2, h, w], gf));
            }
            Op::Smoothness { field, guide } => {
                let f = self.value(*field);
                let (_, h, w) = f.chw();
                let (gx, gy) = smoothness_planes_grad(h, w, f.channel(0), f.channel(1), guide);
                let k = g.item();
                let data = gx.into_iter().chain(gy).map(|v| v * k).collect();
                self.accumulate(grads, *field, Tensor::from_vec(&[2, h, w], data));
            }
            Op::MeanAbsDiff { x, target } => {
                let xv = self.value(*x);
                let k = g.item() / xv.len() as f64;
                let data = xv
                    .data
                    .iter()
                    .zip(&target.data)
                    .map(|(a, b)| if a > b { k } else if a < b { -k } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(&xv.shape, data));
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let rows = u.len();
                let cols = v.len();
                let inner: f64 = g.data.iter().zip(&node.value.data).map(|(a, b)| a * b).sum();
                let mut gw = Tensor::zeros(&self.value(*w).shape);
                for i in 0..rows {
                    for j in 0..cols {
                        gw.data[i * cols + j] = (g.data[i * cols + j] - inner * u[i] * v[j]) / sigma;
                    }
                }
                self.accumulate(grads, *w, gw);
            }
            Op::GlobalMean(x) => {
                let xv = self.value(*x);
                let (c, h, w) = xv.chw();
                let n = (h * w) as f64;
                let mut gx = Tensor::zeros(&xv.shape);
                for ch in 0..c {
                    gx.data[ch * h * w..(ch + 1) * h * w].iter_mut().for_each(|v| *v = g.data[ch] / n);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::from_vec(&xv.shape, vec![g.item(); xv.len()]));
            }
            Op::LinComb(terms) => {
                for &(s, k) in terms {
                    self.accumulate(grads, s, Tensor::scalar(k * g.item()));
                }
            }
        }
    }
}

/// `u^T W v` for a row-major `rows x cols` matrix.
pub fn bilinear(w: &[f64], rows: usize, cols: usize, u: &[f64], v: &[f64]) -> f64 {
    (0..rows).map(|i| u[i] * (0..cols).map(|j| w[i * cols + j] * v[j]).sum::<f64>()).sum()
}

/// Output index range `[lo, hi)` along one axis for kernel tap `k`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < in_len
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi_excl = if in_len + pad > k { (in_len + pad - k).div_ceil(stride) } else { 0 };
    (lo.min(out_len), hi_excl.min(out_len))
}

/// Unfolds `x` into a `(cin*k*k) x (ho*wo)` patch matrix.
fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let (cin, h, wd) = x.chw();
    let n = ho * wo;
    let mut col = vec![0.0; cin * k * k * n];
    for ci in 0..cin {
        let xin = &x.data[ci * h * wd..(ci + 1) * h * wd];
        for ky in 0..k {
            let (oy0, oy1) = valid_range(ho, h, ky, stride, pad);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(wo, wd, kx, stride, pad);
                let row = &mut col[((ci * k + ky) * k + kx) * n..((ci * k + ky) * k + kx + 1) * n];
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - pad;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    let src = &xin[iy * wd..(iy + 1) * wd];
                    for ox in ox0..ox1 {
                        dst[ox] = src[ox * stride + kx - pad];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im(col: &[f64], shape: (usize, usize, usize), k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Tensor {
    let (cin, h, wd) = shape;
    let n = ho * wo;
    let mut gx = vec![0.0; cin * h * wd];
    for ci in 0..cin {
        let dst_plane = &mut gx[ci * h * wd..(ci + 1) * h * wd];
        for ky in 0..k {
            let (oy0, oy1) = valid_range(ho, h, ky, stride, pad);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(wo, wd, kx, stride, pad);
                let row = &col[((ci * k + ky) * k + kx) * n..((ci * k + ky) * k + kx + 1) * n];
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - pad;
                    let src = &row[oy * wo..(oy + 1) * wo];
                    let dst = &mut dst_plane[iy * wd..(iy + 1) * wd];
                    for ox in ox0..ox1 {
                        dst[ox * stride + kx - pad] += src[ox];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[cin, h, wd], gx)
}

/// Row-major `c = a * b` with optional transposes, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, kk: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (kk as isize, 1) };
    let (rsb, csb) = if b_t { (1, kk as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover the strided extents checked below.
    assert!(a.len() >= m * kk && b.len() >= kk * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(m, kk, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

fn conv_dims(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> (usize, usize, usize, usize) {
    let (cin, h, wd) = x.chw();
    let (cout, wcin, k) = (w.shape[0], w.shape[1], w.shape[2]);
    assert_eq!(cin, wcin, "conv channel mismatch: input {cin}, weight {wcin}");
    (cout, k, (h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1)
}

/// Zero-padded strided convolution of a `[C, H, W]` input.
pub fn conv_forward(x: &Tensor, w: &Tensor, b: Option<&[f64]>, stride: usize, pad: usize) -> Tensor {
    let (cout, k, ho, wo) = conv_dims(x, w, stride, pad);
    let n = ho * wo;
    let kk = w.len() / cout;
    let mut out = vec![0.0; cout * n];
    if let Some(b) = b {
        for (co, plane) in out.chunks_mut(n).enumerate() {
            plane.iter_mut().for_each(|v| *v = b[co]);
        }
    }
    if k == 1 && stride == 1 && pad == 0 {
        gemm(cout, kk, n, &w.data, false, &x.data, false, &mut out, 1.0);
    } else {
        let col = im2col(x, k, stride, pad, ho, wo);
        gemm(cout, kk, n, &w.data, false, &col, false, &mut out, 1.0);
    }
    Tensor::from_vec(&[cout, ho, wo], out)
}

type ConvGrads = (Option<Tensor>, Option<Tensor>, Vec<f64>);

fn conv_backward(x: &Tensor, w: &Tensor, g: &Tensor, stride: usize, pad: usize, want_x: bool, want_w: bool) -> ConvGrads {
    let (cout, k, ho, wo) = conv_dims(x, w, stride, pad);
    let n = ho * wo;
    let kk = w.len() / cout;
    let gb: Vec<f64> = (0..cout).map(|co| g.channel(co).iter().sum()).collect();
    let pointwise = k == 1 && stride == 1 && pad == 0;
    let col = if pointwise || !want_w { Vec::new() } else { im2col(x, k, stride, pad, ho, wo) };
    let gw = want_w.then(|| {
        let mut gw = vec![0.0; w.len()];
        let cols = if pointwise { &x.data } else { &col };
        gemm(cout, n, kk, &g.data, false, cols, true, &mut gw, 0.0);
        Tensor::from_vec(&w.shape, gw)
    });
    let gx = want_x.then(|| {
        let mut gcol = vec![0.0; kk * n];
        gemm(kk, cout, n, &w.data, true, &g.data, false, &mut gcol, 0.0);
        if pointwise {
            Tensor::from_vec(&x.shape, gcol)
        } else {
            col2im(&gcol, x.chw(), k, stride, pad, ho, wo)
        }
    });
    (gx, gw, gb)
}

fn center_planes(t: &Tensor) -> Tensor {
    let (_, h, w) = t.chw();
    let mut out = t.clone();
    for plane in out.data.chunks_mut(h * w) {
        let m = plane.iter().sum::<f64>() / (h * w) as f64;
        plane.iter_mut().for_each(|v| *v -= m);
    }
    out
}

/// Row-stochastic `n x n` Gaussian smoothing matrix.
fn gaussian_operator(n: usize, sigma: f64) -> Vec<f64> {
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        let row = &mut k[i * n..(i + 1) * n];
        for (j, v) in row.iter_mut().enumerate() {
            let d = (i as f64 - j as f64) / sigma;
            *v = (-0.5 * d * d).exp();
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    k
}

/// `Ky X Kx^T` per channel, or `Ky^T X Kx` when `transpose` is set.
fn separable_apply(x: &[f64], c: usize, h: usize, w: usize, ky: &[f64], kx: &[f64], transpose: bool) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    let mut tmp = vec![0.0; h * w];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        // rows: tmp = X Kx^T (or X Kx)
        gemm(h, w, w, plane, false, kx, !transpose, &mut tmp, 0.0);
        // columns: out = Ky tmp (or Ky^T tmp)
        gemm(h, h, w, ky, transpose, &tmp, false, &mut out[ch * h * w..(ch + 1) * h * w], 0.0);
    }
    out
}

/// Finite-difference gradient checking.
pub mod gradcheck {
    use super::*;

    /// Central-difference check of `build` (which maps leaf values to a
    /// scalar node) against the tape gradient. Returns the worst relative
    /// error `|fd - an| / max(|fd|, |an|, floor)`.
    pub fn max_rel_error(
        leaves: &[Tensor],
        build: &dyn Fn(&mut Graph, &[Var]) -> Var,
        step: f64,
        floor: f64,
    ) -> f64 {
        let eval = |vals: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals
                .iter()
                .enumerate()
                .map(|(i, t)| g.param(t, ParamRef { bundle: 0, index: i }, true))
                .collect();
            let out = build(&mut g, &vars);
            (g.value(out).item(), g.backward(out))
        };
        let (_, grads) = eval(leaves);
        let mut worst: f64 = 0.0;
        for (r, gt) in grads {
            for j in 0..gt.len() {
                let mut plus = leaves.to_vec();
                plus[r.index].data[j] += step;
                let mut minus = leaves.to_vec();
                minus[r.index].data[j] -= step;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * step);
                let an = gt.data[j];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
                worst = worst.max(err);
            }
        }
        worst
    }
}
