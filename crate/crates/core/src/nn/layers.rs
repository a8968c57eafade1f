//! Layers with explicit backward passes over a shared flat parameter vector.
//!
//! Each layer owns a contiguous slice of the model's parameter vector. The slice
//! is described by [`ParamBlock`]s; normalization running statistics are stored
//! in the same vector as `Buffer` blocks so that they travel with the weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Weight,
    Bias,
    /// Non-trainable state (normalization running statistics).
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: BlockKind,
}

impl ParamBlock {
    fn new(name: impl Into<String>, shape: Vec<usize>, kind: BlockKind) -> Self {
        Self {
            name: name.into(),
            shape,
            kind,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-layer state saved by `forward` for use in `backward`.
#[derive(Debug)]
pub enum Cache {
    Input(Tensor),
    Output(Tensor),
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
        count: usize,
        train: bool,
    },
    Pool { in_shape: [usize; 4] },
    Norm { out: Tensor, norms: Vec<f64> },
    Seq(Vec<Cache>),
    Residual {
        main: Box<Cache>,
        shortcut: Option<Box<Cache>>,
        sum: Tensor,
    },
}

pub trait Layer: Send + Sync + std::fmt::Debug {
    fn blocks(&self) -> Vec<ParamBlock>;

    fn param_len(&self) -> usize {
        self.blocks().iter().map(ParamBlock::len).sum()
    }

    /// Output `[c, h, w]` for an input of `[c, h, w]`.
    fn output_shape(&self, input: [usize; 3]) -> [usize; 3];

    fn init(&self, params: &mut [f64], rng: &mut SimRng);

    fn forward(&self, params: &[f64], x: &Tensor, train: bool) -> (Tensor, Cache);

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    fn backward(&self, params: &[f64], cache: &Cache, grad_out: &Tensor, grad: &mut [f64]) -> Tensor;

    /// Applies running-statistic updates recorded in a training-mode cache.
    fn update_buffers(&self, _params: &mut [f64], _cache: &Cache) {}
}

fn uniform_fill(slot: &mut [f64], bound: f64, rng: &mut SimRng) {
    for v in slot {
        *v = rng.gen_range(-bound..bound);
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding,
            groups: 1,
            bias: false,
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        assert!(self.in_channels % groups == 0 && self.out_channels % groups == 0);
        self.groups = groups;
        self
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn weight_len(&self) -> usize {
        self.out_channels * (self.in_channels / self.groups) * self.kernel * self.kernel
    }

    /// Unfolds the channels of group `g` of one sample into a `(cin_g*k*k) x (ho*wo)` matrix.
    fn im2col(&self, x: &[f64], h: usize, w: usize, g: usize, col: &mut [f64]) {
        let cin_g = self.in_channels / self.groups;
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let p = self.padding as isize;
        for ci in 0..cin_g {
            let plane = &x[(g * cin_g + ci) * h * w..(g * cin_g + ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - p;
                        let dst = &mut col[row + oy * wo..row + (oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - p;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, g: usize, dx: &mut [f64]) {
        let cin_g = self.in_channels / self.groups;
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let p = self.padding as isize;
        for ci in 0..cin_g {
            let plane = &mut dx[(g * cin_g + ci) * h * w..(g * cin_g + ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += col[row + oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Layer for Conv2d {
    fn blocks(&self) -> Vec<ParamBlock> {
        let mut b = vec![ParamBlock::new(
            format!("{}.weight", self.name),
            vec![self.out_channels, self.in_channels / self.groups, self.kernel, self.kernel],
            BlockKind::Weight,
        )];
        if self.bias {
            b.push(ParamBlock::new(format!("{}.bias", self.name), vec![self.out_channels], BlockKind::Bias));
        }
        b
    }

    fn output_shape(&self, [_, h, w]: [usize; 3]) -> [usize; 3] {
        let (ho, wo) = self.out_hw(h, w);
        [self.out_channels, ho, wo]
    }

    fn init(&self, params: &mut [f64], rng: &mut SimRng) {
        let fan_in = (self.in_channels / self.groups) * self.kernel * self.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        uniform_fill(params, bound, rng);
    }

    fn forward(&self, params: &[f64], x: &Tensor, _train: bool) -> (Tensor, Cache) {
        let [n, c, h, w] = x.shape;
        debug_assert_eq!(c, self.in_channels);
        let (ho, wo) = self.out_hw(h, w);
        let cin_g = self.in_channels / self.groups;
        let cout_g = self.out_channels / self.groups;
        let kk = cin_g * self.kernel * self.kernel;
        let (weight, bias) = params.split_at(self.weight_len());
        let mut out = Tensor::zeros([n, self.out_channels, ho, wo]);
        let mut col = vec![0.0; kk * ho * wo];
        let out_len = self.out_channels * ho * wo;
        for s in 0..n {
            let xs = x.sample(s);
            let ys = &mut out.data[s * out_len..(s + 1) * out_len];
            for g in 0..self.groups {
                self.im2col(xs, h, w, g, &mut col);
                gemm(
                    cout_g,
                    kk,
                    ho * wo,
                    1.0,
                    &weight[g * cout_g * kk..(g + 1) * cout_g * kk],
                    false,
                    &col,
                    false,
                    0.0,
                    &mut ys[g * cout_g * ho * wo..(g + 1) * cout_g * ho * wo],
                );
            }
            if self.bias {
                for (o, plane) in ys.chunks_mut(ho * wo).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bias[o]);
                }
            }
        }
        (out, Cache::Input(x.clone()))
    }

    fn backward(&self, params: &[f64], cache: &Cache, gy: &Tensor, grad: &mut [f64]) -> Tensor {
        let Cache::Input(x) = cache else { unreachable!("conv cache") };
        let [n, _, h, w] = x.shape;
        let (ho, wo) = self.out_hw(h, w);
        let cin_g = self.in_channels / self.groups;
        let cout_g = self.out_channels / self.groups;
        let kk = cin_g * self.kernel * self.kernel;
        let wl = self.weight_len();
        let weight = &params[..wl];
        let (gw, gb) = grad.split_at_mut(wl);
        let mut dx = Tensor::zeros(x.shape);
        let mut col = vec![0.0; kk * ho * wo];
        let mut dcol = vec![0.0; kk * ho * wo];
        let out_len = self.out_channels * ho * wo;
        let in_len = x.sample_len();
        for s in 0..n {
            let gys = &gy.data[s * out_len..(s + 1) * out_len];
            for g in 0..self.groups {
                let gyg = &gys[g * cout_g * ho * wo..(g + 1) * cout_g * ho * wo];
                self.im2col(x.sample(s), h, w, g, &mut col);
                gemm(cout_g, ho * wo, kk, 1.0, gyg, false, &col, true, 1.0, &mut gw[g * cout_g * kk..(g + 1) * cout_g * kk]);
                gemm(kk, cout_g, ho * wo, 1.0, &weight[g * cout_g * kk..(g + 1) * cout_g * kk], true, gyg, false, 0.0, &mut dcol);
                self.col2im(&dcol, h, w, g, &mut dx.data[s * in_len..(s + 1) * in_len]);
            }
            if self.bias {
                for (o, plane) in gys.chunks(ho * wo).enumerate() {
                    gb[o] += plane.iter().sum::<f64>();
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

impl Layer for BatchNorm2d {
    fn blocks(&self) -> Vec<ParamBlock> {
        let c = vec![self.channels];
        vec![
            ParamBlock::new(format!("{}.weight", self.name), c.clone(), BlockKind::Weight),
            ParamBlock::new(format!("{}.bias", self.name), c.clone(), BlockKind::Bias),
            ParamBlock::new(format!("{}.running_mean", self.name), c.clone(), BlockKind::Buffer),
            ParamBlock::new(format!("{}.running_var", self.name), c, BlockKind::Buffer),
        ]
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input
    }

    fn init(&self, params: &mut [f64], _rng: &mut SimRng) {
        let c = self.channels;
        params[..c].fill(1.0);
        params[c..2 * c].fill(0.0);
        params[2 * c..3 * c].fill(0.0);
        params[3 * c..].fill(1.0);
    }

    fn forward(&self, params: &[f64], x: &Tensor, train: bool) -> (Tensor, Cache) {
        let [n, c, h, w] = x.shape;
        let hw = h * w;
        let count = n * hw;
        let (gamma, rest) = params.split_at(c);
        let (beta, rest) = rest.split_at(c);
        let (rmean, rvar) = rest.split_at(c);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if train {
            for s in 0..n {
                for ch in 0..c {
                    let plane = &x.data[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                    mean[ch] += plane.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for s in 0..n {
                for ch in 0..c {
                    let plane = &x.data[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                    var[ch] += plane.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
        } else {
            mean.copy_from_slice(rmean);
            var.copy_from_slice(rvar);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.data.len()];
        let mut out = Tensor::zeros(x.shape);
        for s in 0..n {
            for ch in 0..c {
                let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                for i in r {
                    let xh = (x.data[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out.data[i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
        (
            out,
            Cache::BatchNorm {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                count,
                train,
            },
        )
    }

    fn backward(&self, params: &[f64], cache: &Cache, gy: &Tensor, grad: &mut [f64]) -> Tensor {
        let Cache::BatchNorm { xhat, inv_std, count, train, .. } = cache else {
            unreachable!("batchnorm cache")
        };
        let [n, c, h, w] = gy.shape;
        let hw = h * w;
        let gamma = &params[..c];
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                    sum_dy[ch] += gy.data[i];
                    sum_dy_xhat[ch] += gy.data[i] * xhat[i];
                }
            }
        }
        for ch in 0..c {
            grad[ch] += sum_dy_xhat[ch];
            grad[c + ch] += sum_dy[ch];
        }
        let mut dx = Tensor::zeros(gy.shape);
        let m = *count as f64;
        for s in 0..n {
            for ch in 0..c {
                let scale = gamma[ch] * inv_std[ch];
                for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                    dx.data[i] = if *train {
                        scale * (gy.data[i] - sum_dy[ch] / m - xhat[i] * sum_dy_xhat[ch] / m)
                    } else {
                        scale * gy.data[i]
                    };
                }
            }
        }
        dx
    }

    fn update_buffers(&self, params: &mut [f64], cache: &Cache) {
        let Cache::BatchNorm { batch_mean, batch_var, count, train: true, .. } = cache else {
            return;
        };
        let c = self.channels;
        let unbias = if *count > 1 { *count as f64 / (*count as f64 - 1.0) } else { 1.0 };
        for ch in 0..c {
            let rm = &mut params[2 * c + ch];
            *rm = (1.0 - self.momentum) * *rm + self.momentum * batch_mean[ch];
            let rv = &mut params[3 * c + ch];
            *rv = (1.0 - self.momentum) * *rv + self.momentum * batch_var[ch] * unbias;
        }
    }
}

/// ReLU, optionally clipped at 6 (ReLU6).
#[derive(Debug, Clone)]
pub struct Relu {
    pub cap: Option<f64>,
}

impl Relu {
    pub fn plain() -> Self {
        Self { cap: None }
    }
    pub fn six() -> Self {
        Self { cap: Some(6.0) }
    }
}

impl Layer for Relu {
    fn blocks(&self) -> Vec<ParamBlock> {
        Vec::new()
    }
    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input
    }
    fn init(&self, _: &mut [f64], _: &mut SimRng) {}

    fn forward(&self, _: &[f64], x: &Tensor, _train: bool) -> (Tensor, Cache) {
        let cap = self.cap.unwrap_or(f64::INFINITY);
        let out = Tensor {
            shape: x.shape,
            data: x.data.iter().map(|&v| v.clamp(0.0, cap)).collect(),
        };
        (out, Cache::Input(x.clone()))
    }

    fn backward(&self, _: &[f64], cache: &Cache, gy: &Tensor, _: &mut [f64]) -> Tensor {
        let Cache::Input(x) = cache else { unreachable!("relu cache") };
        let cap = self.cap.unwrap_or(f64::INFINITY);
        Tensor {
            shape: gy.shape,
            data: x
                .data
                .iter()
                .zip(&gy.data)
                .map(|(&v, &g)| if v > 0.0 && v < cap { g } else { 0.0 })
                .collect(),
        }
    }
}

/// Non-overlapping average pooling with a square window.
#[derive(Debug, Clone)]
pub struct AvgPool2d {
    pub size: usize,
}

impl Layer for AvgPool2d {
    fn blocks(&self) -> Vec<ParamBlock> {
        Vec::new()
    }
    fn output_shape(&self, [c, h, w]: [usize; 3]) -> [usize; 3] {
        [c, h / self.size, w / self.size]
    }
    fn init(&self, _: &mut [f64], _: &mut SimRng) {}

    fn forward(&self, _: &[f64], x: &Tensor, _train: bool) -> (Tensor, Cache) {
        let [n, c, h, w] = x.shape;
        let s = self.size;
        let (ho, wo) = (h / s, w / s);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let scale = 1.0 / (s * s) as f64;
        for p in 0..n * c {
            let plane = &x.data[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for dy in 0..s {
                        for dx in 0..s {
                            acc += plane[(oy * s + dy) * w + ox * s + dx];
                        }
                    }
                    out.data[p * ho * wo + oy * wo + ox] = acc * scale;
                }
            }
        }
        (out, Cache::Pool { in_shape: x.shape })
    }

    fn backward(&self, _: &[f64], cache: &Cache, gy: &Tensor, _: &mut [f64]) -> Tensor {
        let Cache::Pool { in_shape } = cache else { unreachable!("pool cache") };
        let [n, c, h, w] = *in_shape;
        let s = self.size;
        let (ho, wo) = (h / s, w / s);
        let scale = 1.0 / (s * s) as f64;
        let mut dx = Tensor::zeros(*in_shape);
        for p in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = gy.data[p * ho * wo + oy * wo + ox] * scale;
                    for dy in 0..s {
                        for dxx in 0..s {
                            dx.data[p * h * w + (oy * s + dy) * w + ox * s + dxx] = g;
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Global average pooling followed by flattening to `[n, c, 1, 1]`.
#[derive(Debug, Clone)]
pub struct GlobalAvgPool;

impl Layer for GlobalAvgPool {
    fn blocks(&self) -> Vec<ParamBlock> {
        Vec::new()
    }
    fn output_shape(&self, [c, _, _]: [usize; 3]) -> [usize; 3] {
        [c, 1, 1]
    }
    fn init(&self, _: &mut [f64], _: &mut SimRng) {}

    fn forward(&self, _: &[f64], x: &Tensor, _train: bool) -> (Tensor, Cache) {
        let [n, c, h, w] = x.shape;
        let hw = (h * w) as f64;
        let data = x
            .data
            .chunks(h * w)
            .map(|plane| plane.iter().sum::<f64>() / hw)
            .collect();
        (Tensor { shape: [n, c, 1, 1], data }, Cache::Pool { in_shape: x.shape })
    }

    fn backward(&self, _: &[f64], cache: &Cache, gy: &Tensor, _: &mut [f64]) -> Tensor {
        let Cache::Pool { in_shape } = cache else { unreachable!("pool cache") };
        let hw = in_shape[2] * in_shape[3];
        let mut dx = Tensor::zeros(*in_shape);
        for (plane, &g) in dx.data.chunks_mut(hw).zip(&gy.data) {
            plane.fill(g / hw as f64);
        }
        dx
    }
}

/// Reshapes `[n, c, h, w]` to `[n, c*h*w, 1, 1]`.
#[derive(Debug, Clone)]
pub struct Flatten;

impl Layer for Flatten {
    fn blocks(&self) -> Vec<ParamBlock> {
        Vec::new()
    }
    fn output_shape(&self, [c, h, w]: [usize; 3]) -> [usize; 3] {
        [c * h * w, 1, 1]
    }
    fn init(&self, _: &mut [f64], _: &mut SimRng) {}

    fn forward(&self, _: &[f64], x: &Tensor, _train: bool) -> (Tensor, Cache) {
        let out = Tensor {
            shape: [x.shape[0], x.sample_len(), 1, 1],
            data: x.data.clone(),
        };
        (out, Cache::Pool { in_shape: x.shape })
    }

    fn backward(&self, _: &[f64], cache: &Cache, gy: &Tensor, _: &mut [f64]) -> Tensor {
        let Cache::Pool { in_shape } = cache else { unreachable!("flatten cache") };
        Tensor {
            shape: *in_shape,
            data: gy.data.clone(),
        }
    }
}

/// Affine map on flattened features: `y = x W^T + b`, with `W` stored `out x in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Self {
            name: name.into(),
            in_features,
            out_features,
        }
    }
}

impl Layer for Linear {
    fn blocks(&self) -> Vec<ParamBlock> {
        vec![
            ParamBlock::new(format!("{}.weight", self.name), vec![self.out_features, self.in_features], BlockKind::Weight),
            ParamBlock::new(format!("{}.bias", self.name), vec![self.out_features], BlockKind::Bias),
        ]
    }

    fn output_shape(&self, _: [usize; 3]) -> [usize; 3] {
        [self.out_features, 1, 1]
    }

    fn init(&self, params: &mut [f64], rng: &mut SimRng) {
        let bound = 1.0 / (self.in_features as f64).sqrt();
        uniform_fill(params, bound, rng);
    }

    fn forward(&self, params: &[f64], x: &Tensor, _train: bool) -> (Tensor, Cache) {
        let n = x.batch();
        debug_assert_eq!(x.sample_len(), self.in_features);
        let (weight, bias) = params.split_at(self.in_features * self.out_features);
        let mut out = Tensor::zeros([n, self.out_features, 1, 1]);
        for row in out.data.chunks_mut(self.out_features) {
            row.copy_from_slice(bias);
        }
        gemm(n, self.in_features, self.out_features, 1.0, &x.data, false, weight, true, 1.0, &mut out.data);
        (out, Cache::Input(x.clone()))
    }

    fn backward(&self, params: &[f64], cache: &Cache, gy: &Tensor, grad: &mut [f64]) -> Tensor {
        let Cache::Input(x) = cache else { unreachable!("linear cache") };
        let n = x.batch();
        let wl = self.in_features * self.out_features;
        let (gw, gb) = grad.split_at_mut(wl);
        gemm(self.out_features, n, self.in_features, 1.0, &gy.data, true, &x.data, false, 1.0, gw);
        for row in gy.data.chunks(self.out_features) {
            for (b, g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut dx = Tensor::zeros(x.shape);
        gemm(n, self.out_features, self.in_features, 1.0, &gy.data, false, &params[..wl], false, 0.0, &mut dx.data);
        dx
    }
}

/// Row-wise L2 normalization of flattened features.
#[derive(Debug, Clone)]
pub struct L2Normalize {
    pub eps: f64,
}

impl Default for L2Normalize {
    fn default() -> Self {
        Self { eps: 1e-12 }
    }
}

impl Layer for L2Normalize {
    fn blocks(&self) -> Vec<ParamBlock> {
        Vec::new()
    }
    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input
    }
    fn init(&self, _: &mut [f64], _: &mut SimRng) {}

    fn forward(&self, _: &[f64], x: &Tensor, _train: bool) -> (Tensor, Cache) {
        let d = x.sample_len();
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.batch());
        for row in out.data.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(self.eps);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        (out.clone(), Cache::Norm { out, norms })
    }

    fn backward(&self, _: &[f64], cache: &Cache, gy: &Tensor, _: &mut [f64]) -> Tensor {
        let Cache::Norm { out, norms } = cache else { unreachable!("norm cache") };
        let d = out.sample_len();
        let mut dx = Tensor::zeros(out.shape);
        for (i, norm) in norms.iter().enumerate() {
            let y = &out.data[i * d..(i + 1) * d];
            let g = &gy.data[i * d..(i + 1) * d];
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            for j in 0..d {
                dx.data[i * d + j] = (g[j] - y[j] * dot) / norm;
            }
        }
        dx
    }
}

/// Layers applied in order; parameters laid out back to back.
#[derive(Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, layer: impl Layer + 'static) -> Self {
        self.layers.push(Box::new(layer));
        self
    }

    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut at = 0;
        self.layers
            .iter()
            .map(|l| {
                let len = l.param_len();
                let r = (at, at + len);
                at += len;
                r
            })
            .collect()
    }
}

impl Layer for Sequential {
    fn blocks(&self) -> Vec<ParamBlock> {
        self.layers.iter().flat_map(|l| l.blocks()).collect()
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        self.layers.iter().fold(input, |s, l| l.output_shape(s))
    }

    fn init(&self, params: &mut [f64], rng: &mut SimRng) {
        for (l, (a, b)) in self.layers.iter().zip(self.offsets()) {
            l.init(&mut params[a..b], rng);
        }
    }

    fn forward(&self, params: &[f64], x: &Tensor, train: bool) -> (Tensor, Cache) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur: Option<Tensor> = None;
        for (l, (a, b)) in self.layers.iter().zip(self.offsets()) {
            let (y, c) = l.forward(&params[a..b], cur.as_ref().unwrap_or(x), train);
            caches.push(c);
            cur = Some(y);
        }
        (cur.unwrap_or_else(|| x.clone()), Cache::Seq(caches))
    }

    fn backward(&self, params: &[f64], cache: &Cache, gy: &Tensor, grad: &mut [f64]) -> Tensor {
        let Cache::Seq(caches) = cache else { unreachable!("sequential cache") };
        let offsets = self.offsets();
        let mut g = gy.clone();
        for ((l, (a, b)), c) in self.layers.iter().zip(offsets).zip(caches).rev() {
            g = l.backward(&params[a..b], c, &g, &mut grad[a..b]);
        }
        g
    }

    fn update_buffers(&self, params: &mut [f64], cache: &Cache) {
        let Cache::Seq(caches) = cache else { return };
        for ((l, (a, b)), c) in self.layers.iter().zip(self.offsets()).zip(caches) {
            l.update_buffers(&mut params[a..b], c);
        }
    }
}

/// `out = act(main(x) + shortcut(x))`; identity shortcut when `shortcut` is `None`.
#[derive(Debug)]
pub struct Residual {
    pub main: Sequential,
    pub shortcut: Option<Sequential>,
    pub relu_after: bool,
}

impl Residual {
    fn split(&self) -> usize {
        self.main.param_len()
    }
}

impl Layer for Residual {
    fn blocks(&self) -> Vec<ParamBlock> {
        let mut b = self.main.blocks();
        if let Some(s) = &self.shortcut {
            b.extend(s.blocks());
        }
        b
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        self.main.output_shape(input)
    }

    fn init(&self, params: &mut [f64], rng: &mut SimRng) {
        let (m, s) = params.split_at_mut(self.split());
        self.main.init(m, rng);
        if let Some(sc) = &self.shortcut {
            sc.init(s, rng);
        }
    }

    fn forward(&self, params: &[f64], x: &Tensor, train: bool) -> (Tensor, Cache) {
        let (pm, ps) = params.split_at(self.split());
        let (mut sum, main_cache) = self.main.forward(pm, x, train);
        let shortcut = match &self.shortcut {
            Some(sc) => {
                let (y, c) = sc.forward(ps, x, train);
                sum.add_assign(&y);
                Some(Box::new(c))
            }
            None => {
                sum.add_assign(x);
                None
            }
        };
        let out = if self.relu_after {
            Tensor {
                shape: sum.shape,
                data: sum.data.iter().map(|v| v.max(0.0)).collect(),
            }
        } else {
            sum.clone()
        };
        (
            out,
            Cache::Residual {
                main: Box::new(main_cache),
                shortcut,
                sum,
            },
        )
    }

    fn backward(&self, params: &[f64], cache: &Cache, gy: &Tensor, grad: &mut [f64]) -> Tensor {
        let Cache::Residual { main, shortcut, sum } = cache else { unreachable!("residual cache") };
        let (pm, ps) = params.split_at(self.split());
        let (gm, gs) = grad.split_at_mut(self.split());
        let g = if self.relu_after {
            Tensor {
                shape: gy.shape,
                data: sum.data.iter().zip(&gy.data).map(|(&s, &g)| if s > 0.0 { g } else { 0.0 }).collect(),
            }
        } else {
            gy.clone()
        };
        let mut dx = self.main.backward(pm, main, &g, gm);
        match (&self.shortcut, shortcut) {
            (Some(sc), Some(c)) => dx.add_assign(&sc.backward(ps, c, &g, gs)),
            _ => dx.add_assign(&g),
        }
        dx
    }

    fn update_buffers(&self, params: &mut [f64], cache: &Cache) {
        let Cache::Residual { main, shortcut, .. } = cache else { return };
        let (pm, ps) = params.split_at_mut(self.split());
        self.main.update_buffers(pm, main);
        if let (Some(sc), Some(c)) = (&self.shortcut, shortcut) {
            sc.update_buffers(ps, c);
        }
    }
}
