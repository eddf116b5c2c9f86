//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to single-sample C×H×W
//! tensors. Nodes are appended in evaluation order, so reverse index order is
//! a valid topological order for [`Graph::backward`]. Graphs are cheap to
//! create and are built per sample; batching happens one level up.

use std::sync::Arc;

use crate::geometry::Mask;
use crate::tensor::Tensor;

/// Lower and upper clamp on probabilities fed to `ln`.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 2-D convolution with square kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn output_size(&self, size: usize) -> usize {
        (size + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1
    }
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Upsample {
        x: Var,
    },
    AvgPool {
        x: Var,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Masked {
        x: Var,
        mask: Arc<Mask>,
    },
    Blend {
        inside: Var,
        outside: Var,
        mask: Arc<Mask>,
    },
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    PadTo {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    MeanAbsDiff {
        a: Var,
        b: Var,
    },
    MeanLog {
        x: Var,
        complement: bool,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn elementwise_grad(x: &Tensor, upstream: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = x.data().iter().zip(upstream.data()).map(|(&xv, &g)| f(xv, g)).collect();
    Tensor::from_vec(x.channels(), x.height(), x.width(), data).expect("shape preserved")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is kept by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Convolution with zero padding. `weight` is `out×1×(in·k·k)` and `bias`
    /// is `out×1×1`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, geom: ConvGeom) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[weight.0].value;
        let bv = &self.nodes[bias.0].value;
        let (cin, h, w) = xv.shape();
        let cout = wv.channels();
        let k = geom.kernel;
        let krows = cin * k * k;
        assert_eq!(wv.width(), krows, "conv weight does not match {cin} input channels");
        assert_eq!(bv.channels(), cout);
        assert!(h + 2 * geom.pad >= k && w + 2 * geom.pad >= k, "input {h}x{w} smaller than kernel");
        let ho = geom.output_size(h);
        let wo = geom.output_size(w);
        let n = ho * wo;
        let cols = im2col(xv, geom, ho, wo);
        let mut out = vec![0.0; cout * n];
        for (co, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(bv.data()[co]);
        }
        unsafe {
            matrixmultiply::dgemm(
                cout,
                krows,
                n,
                1.0,
                wv.data().as_ptr(),
                krows as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                1.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let requires = self.rg(x) || self.rg(weight) || self.rg(bias);
        let value = Tensor::from_vec(cout, ho, wo, out).expect("conv output shape");
        let cols = if requires { cols } else { Vec::new() };
        self.push(
            value,
            Op::Conv {
                x,
                weight,
                bias,
                geom,
                cols,
            },
            requires,
        )
    }

    /// Nearest-neighbour 2× upsampling, truncated to `height × width`
    /// (each at most twice the input size).
    pub fn upsample(&mut self, x: Var, height: usize, width: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert!(height <= 2 * xv.height() && width <= 2 * xv.width());
        let value = Tensor::from_fn(xv.channels(), height, width, |c, r, col| xv.at(c, r / 2, col / 2));
        let rg = self.rg(x);
        self.push(value, Op::Upsample { x }, rg)
    }

    /// 2×2 average pooling with stride 2; edge windows average the pixels
    /// that exist.
    pub fn avg_pool(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = xv.shape();
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let value = Tensor::from_fn(c, ho, wo, |ch, r, col| {
            let mut sum = 0.0;
            let mut count = 0.0;
            for dr in 0..2 {
                for dc in 0..2 {
                    let (rr, cc) = (2 * r + dr, 2 * col + dc);
                    if rr < h && cc < w {
                        sum += xv.at(ch, rr, cc);
                        count += 1.0;
                    }
                }
            }
            sum / count
        });
        let rg = self.rg(x);
        self.push(value, Op::AvgPool { x }, rg)
    }

    /// Per-channel normalization to zero mean and unit variance (no affine).
    pub fn instance_norm(&mut self, x: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = &self.nodes[x.0].value;
        let n = xv.plane_len();
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.channels());
        for c in 0..xv.channels() {
            let plane = xv.plane(c);
            let mean = plane.iter().sum::<f64>() / n as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std.push(inv);
            out.extend(plane.iter().map(|v| (v - mean) * inv));
        }
        let value = Tensor::from_vec(xv.channels(), xv.height(), xv.width(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::InstanceNorm { x, inv_std }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(value, Op::Tanh { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        assert!(value.same_shape(self.value(b)), "add: shape mismatch");
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add { a, b }, rg)
    }

    /// `x × mask`, broadcast over channels. Pixels outside the mask become
    /// exact zeros regardless of their input.
    pub fn masked(&mut self, x: Var, mask: Arc<Mask>) -> Var {
        let value = self.value(x).masked(&mask).expect("mask matches image");
        let rg = self.rg(x);
        self.push(value, Op::Masked { x, mask }, rg)
    }

    /// `inside × mask + outside × (1 − mask)`, selected per pixel.
    pub fn blend(&mut self, inside: Var, outside: Var, mask: Arc<Mask>) -> Var {
        let value = crate::geometry::fuse(self.value(inside), self.value(outside), &mask).expect("blend shapes");
        let rg = self.rg(inside) || self.rg(outside);
        self.push(value, Op::Blend { inside, outside, mask }, rg)
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Var {
        let value = self.value(x).crop(top, left, height, width);
        let rg = self.rg(x);
        self.push(value, Op::Crop { x, top, left }, rg)
    }

    /// Zero-pads bottom/right up to at least `height × width`.
    pub fn pad_to(&mut self, x: Var, height: usize, width: usize) -> Var {
        let value = self.value(x).pad_to(height, width);
        let rg = self.rg(x);
        self.push(value, Op::PadTo { x }, rg)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).concat_channels(self.value(b)).expect("concat shapes");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Concat { a, b }, rg)
    }

    /// Mean absolute difference, i.e. the L1 distance normalized by the
    /// element count.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.same_shape(bv), "mean_abs_diff: {:?} vs {:?}", av.shape(), bv.shape());
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y).abs()).sum();
        let value = Tensor::scalar(s / av.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MeanAbsDiff { a, b }, rg)
    }

    /// `mean(ln p)` with `p = x` (or `1 − x` when `complement`) clamped into
    /// `[LOG_EPS, 1 − LOG_EPS]`.
    pub fn mean_log(&mut self, x: Var, complement: bool) -> Var {
        let xv = self.value(x);
        let s: f64 = xv
            .data()
            .iter()
            .map(|&v| {
                let p = if complement { 1.0 - v } else { v };
                p.clamp(LOG_EPS, 1.0 - LOG_EPS).ln()
            })
            .sum();
        let value = Tensor::scalar(s / xv.len() as f64);
        let rg = self.rg(x);
        self.push(value, Op::MeanLog { x, complement }, rg)
    }

    /// `Σ coefficient · term` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let s: f64 = terms.iter().map(|&(v, c)| c * self.scalar(v)).sum();
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(Tensor::scalar(s), Op::WeightedSum { terms: terms.to_vec() }, rg)
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them. Intermediate gradients are dropped once consumed; leaf
    /// gradients are kept.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Gradients { grads };
        }
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.rg(v) {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                weight,
                bias,
                geom,
                cols,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*weight);
                let cout = wv.channels();
                let krows = wv.width();
                let n = g.plane_len();
                if self.rg(*weight) {
                    let mut dw = vec![0.0; cout * krows];
                    unsafe {
                        matrixmultiply::dgemm(
                            cout,
                            n,
                            krows,
                            1.0,
                            g.data().as_ptr(),
                            n as isize,
                            1,
                            cols.as_ptr(),
                            1,
                            n as isize,
                            0.0,
                            dw.as_mut_ptr(),
                            krows as isize,
                            1,
                        );
                    }
                    self.send(grads, *weight, Tensor::from_vec(cout, 1, krows, dw).expect("dw"));
                }
                if self.rg(*bias) {
                    let db = (0..cout).map(|c| g.plane(c).iter().sum()).collect();
                    self.send(grads, *bias, Tensor::from_vec(cout, 1, 1, db).expect("db"));
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; krows * n];
                    unsafe {
                        matrixmultiply::dgemm(
                            krows,
                            cout,
                            n,
                            1.0,
                            wv.data().as_ptr(),
                            1,
                            krows as isize,
                            g.data().as_ptr(),
                            n as isize,
                            1,
                            0.0,
                            dcols.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                    let dx = col2im(&dcols, xv.shape(), *geom, g.height(), g.width());
                    self.send(grads, *x, dx);
                }
            }
            Op::Upsample { x } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.channels(), xv.height(), xv.width());
                for c in 0..g.channels() {
                    for r in 0..g.height() {
                        for col in 0..g.width() {
                            *dx.at_mut(c, r / 2, col / 2) += g.at(c, r, col);
                        }
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::AvgPool { x } => {
                let xv = self.value(*x);
                let (h, w) = (xv.height(), xv.width());
                let mut dx = Tensor::zeros(xv.channels(), h, w);
                for c in 0..g.channels() {
                    for r in 0..g.height() {
                        for col in 0..g.width() {
                            let rows = (2 * r..(2 * r + 2).min(h)).len();
                            let cols_n = (2 * col..(2 * col + 2).min(w)).len();
                            let share = g.at(c, r, col) / (rows * cols_n) as f64;
                            for rr in 2 * r..(2 * r + 2).min(h) {
                                for cc in 2 * col..(2 * col + 2).min(w) {
                                    *dx.at_mut(c, rr, cc) += share;
                                }
                            }
                        }
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::InstanceNorm { x, inv_std } => {
                let y = &node.value;
                let n = y.plane_len() as f64;
                let mut dx = Vec::with_capacity(y.len());
                for (c, &inv) in inv_std.iter().enumerate() {
                    let (yp, gp) = (y.plane(c), g.plane(c));
                    let sum_g: f64 = gp.iter().sum();
                    let sum_gy: f64 = gp.iter().zip(yp).map(|(a, b)| a * b).sum();
                    dx.extend(
                        gp.iter()
                            .zip(yp)
                            .map(|(&gi, &yi)| inv / n * (n * gi - sum_g - yi * sum_gy)),
                    );
                }
                let dx = Tensor::from_vec(y.channels(), y.height(), y.width(), dx).expect("dx");
                self.send(grads, *x, dx);
            }
            Op::Relu { x } => {
                let dx = elementwise_grad(self.value(*x), g, |v, gi| if v > 0.0 { gi } else { 0.0 });
                self.send(grads, *x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let dx = elementwise_grad(self.value(*x), g, |v, gi| if v > 0.0 { gi } else { slope * gi });
                self.send(grads, *x, dx);
            }
            Op::Tanh { x } => {
                let dx = elementwise_grad(&node.value, g, |y, gi| (1.0 - y * y) * gi);
                self.send(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = elementwise_grad(&node.value, g, |y, gi| y * (1.0 - y) * gi);
                self.send(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Masked { x, mask } => {
                self.send(grads, *x, g.masked(mask).expect("mask"));
            }
            Op::Blend { inside, outside, mask } => {
                if self.rg(*inside) {
                    self.send(grads, *inside, g.masked(mask).expect("mask"));
                }
                if self.rg(*outside) {
                    let n = g.plane_len();
                    let mut d = g.clone();
                    for (i, v) in d.data_mut().iter_mut().enumerate() {
                        if mask.data()[i % n] {
                            *v = 0.0;
                        }
                    }
                    self.send(grads, *outside, d);
                }
            }
            Op::Crop { x, top, left } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.channels(), xv.height(), xv.width());
                for c in 0..g.channels() {
                    for r in 0..g.height() {
                        for col in 0..g.width() {
                            *dx.at_mut(c, top + r, left + col) = g.at(c, r, col);
                        }
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::PadTo { x } => {
                let xv = self.value(*x);
                self.send(grads, *x, g.crop(0, 0, xv.height(), xv.width()));
            }
            Op::Concat { a, b } => {
                let ca = self.value(*a).channels();
                let n = g.plane_len();
                let (ga, gb) = g.data().split_at(ca * n);
                if self.rg(*a) {
                    self.send(grads, *a, Tensor::from_vec(ca, g.height(), g.width(), ga.to_vec()).expect("ga"));
                }
                if self.rg(*b) {
                    let cb = g.channels() - ca;
                    self.send(grads, *b, Tensor::from_vec(cb, g.height(), g.width(), gb.to_vec()).expect("gb"));
                }
            }
            Op::MeanAbsDiff { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = g.data()[0] / av.len() as f64;
                let da: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.rg(*b) {
                    let db = da.iter().map(|v| -v).collect();
                    self.send(
                        grads,
                        *b,
                        Tensor::from_vec(bv.channels(), bv.height(), bv.width(), db).expect("db"),
                    );
                }
                if self.rg(*a) {
                    self.send(
                        grads,
                        *a,
                        Tensor::from_vec(av.channels(), av.height(), av.width(), da).expect("da"),
                    );
                }
            }
            Op::MeanLog { x, complement } => {
                let xv = self.value(*x);
                let scale = g.data()[0] / xv.len() as f64;
                let dx = xv.map(|v| {
                    let p = if *complement { 1.0 - v } else { v };
                    if !(LOG_EPS..=1.0 - LOG_EPS).contains(&p) {
                        0.0
                    } else if *complement {
                        -scale / p
                    } else {
                        scale / p
                    }
                });
                self.send(grads, *x, dx);
            }
            Op::WeightedSum { terms } => {
                for &(v, c) in terms {
                    self.send(grads, v, Tensor::scalar(c * g.data()[0]));
                }
            }
        }
    }
}

fn im2col(x: &Tensor, geom: ConvGeom, ho: usize, wo: usize) -> Vec<f64> {
    let (cin, h, w) = x.shape();
    let k = geom.kernel;
    let n = ho * wo;
    let mut cols = vec![0.0; cin * k * k * n];
    for c in 0..cin {
        let plane = x.plane(c);
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let dst = &mut row[oy * wo..][..wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], shape: (usize, usize, usize), geom: ConvGeom, ho: usize, wo: usize) -> Tensor {
    let (cin, h, w) = shape;
    let k = geom.kernel;
    let n = ho * wo;
    let mut dx = Tensor::zeros(cin, h, w);
    let plane_len = h * w;
    let data = dx.data_mut();
    for c in 0..cin {
        let plane = &mut data[c * plane_len..][..plane_len];
        for ki in 0..k {
            for kj in 0..k {
                let row = &dcols[((c * k + ki) * k + kj) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}
