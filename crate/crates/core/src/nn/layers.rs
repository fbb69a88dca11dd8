use rand::Rng;
use rayon::prelude::*;

use super::kernels::{col2im, gemm, im2col, Window};
use super::{join, Init, Layer, Param, ParamVisitor, ParamVisitorMut};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn take<T>(cache: &mut Option<T>, layer: &str) -> T {
    cache
        .take()
        .unwrap_or_else(|| panic!("{layer}: backward called without forward_train"))
}

/// Sums per-sample partial gradients in batch order into `dst`.
fn accumulate(dst: &mut [f32], partials: &[Vec<f32>]) {
    for p in partials {
        for (d, v) in dst.iter_mut().zip(p) {
            *d += *v;
        }
    }
}

/// Affine map `y = x·Wᵀ + b` over `[B, in]`.
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, init: Init, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Param::gaussian(&[outputs, inputs], init.std(inputs), rng),
            bias: Param::zeros(&[outputs]),
            input: None,
        }
    }

    /// Wraps explicit `[out, in]` weights and `[out]` bias.
    pub fn from_parts(weight: Vec<f32>, bias: Vec<f32>) -> Self {
        let (o, n) = (bias.len(), weight.len() / bias.len().max(1));
        assert_eq!(o * n, weight.len(), "weight length must be a multiple of the bias length");
        Linear {
            weight: Param {
                grad: vec![0.0; weight.len()],
                value: weight,
                shape: vec![o, n],
                trainable: true,
            },
            bias: Param {
                grad: vec![0.0; o],
                value: bias,
                shape: vec![o],
                trainable: true,
            },
            input: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.shape()[1] != self.inputs() {
            return Err(Error::shape("linear input", &[x.batch(), self.inputs()], x.shape()));
        }
        Ok(())
    }
}

impl Layer for Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let (b, o, i) = (x.batch(), self.outputs(), self.inputs());
        let mut out = vec![0.0; b * o];
        for r in 0..b {
            out[r * o..(r + 1) * o].copy_from_slice(&self.bias.value);
        }
        gemm(false, true, b, o, i, x.data(), &self.weight.value, 1.0, &mut out);
        Tensor::new(vec![b, o], out)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = take(&mut self.input, "linear");
        let (b, o, i) = (x.batch(), self.outputs(), self.inputs());
        gemm(true, false, o, i, b, grad.data(), x.data(), 1.0, &mut self.weight.grad);
        for r in 0..b {
            for (gb, g) in self.bias.grad.iter_mut().zip(grad.item(r)) {
                *gb += *g;
            }
        }
        let mut dx = vec![0.0; b * i];
        gemm(false, false, b, i, o, grad.data(), &self.weight.value, 0.0, &mut dx);
        Tensor::new(vec![b, i], dx).expect("linear grad shape")
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

fn image_dims(x: &Tensor, channels: usize, context: &str) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 || s[1] != channels {
        return Err(Error::shape(context, &[x.batch(), channels, 0, 0], s));
    }
    Ok((s[0], s[2], s[3]))
}

/// 2-D convolution with a square kernel; weight layout `[out, in, k, k]`.
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    stride: usize,
    pad: usize,
    cache: Option<(Window, Vec<Vec<f32>>)>,
}

impl Conv2d {
    pub fn new(inputs: usize, outputs: usize, kernel: usize, stride: usize, pad: usize, init: Init, rng: &mut impl Rng) -> Self {
        Conv2d {
            weight: Param::gaussian(&[outputs, inputs, kernel, kernel], init.std(inputs * kernel * kernel), rng),
            bias: Param::zeros(&[outputs]),
            stride,
            pad,
            cache: None,
        }
    }

    fn window(&self, x: &Tensor) -> Result<(usize, Window)> {
        let (b, h, w) = image_dims(x, self.weight.shape[1], "conv2d input")?;
        let k = self.weight.shape[2];
        if h + 2 * self.pad < k || w + 2 * self.pad < k {
            return Err(Error::shape("conv2d input too small", &[k, k], &[h, w]));
        }
        Ok((b, Window::conv(self.weight.shape[1], h, w, k, self.stride, self.pad)))
    }

    fn run(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Window, Vec<Vec<f32>>)> {
        let (b, g) = self.window(x)?;
        let outc = self.weight.shape[0];
        let (rows, cols) = (g.rows(), g.cols());
        let per: Vec<(Vec<f32>, Vec<f32>)> = (0..b)
            .into_par_iter()
            .map(|n| {
                let mut col = vec![0.0; rows * cols];
                im2col(x.item(n), &g, &mut col);
                let mut out = vec![0.0; outc * cols];
                for (c, chunk) in out.chunks_mut(cols).enumerate() {
                    chunk.fill(self.bias.value[c]);
                }
                gemm(false, false, outc, cols, rows, &self.weight.value, &col, 1.0, &mut out);
                (out, if keep { col } else { Vec::new() })
            })
            .collect();
        let mut data = Vec::with_capacity(b * outc * cols);
        let mut colv = Vec::with_capacity(if keep { b } else { 0 });
        for (o, c) in per {
            data.extend_from_slice(&o);
            if keep {
                colv.push(c);
            }
        }
        Ok((Tensor::new(vec![b, outc, g.out_h, g.out_w], data)?, g, colv))
    }
}

impl Layer for Conv2d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x, false)?.0)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, g, cols) = self.run(x, true)?;
        self.cache = Some((g, cols));
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (g, cols) = take(&mut self.cache, "conv2d");
        let outc = self.weight.shape[0];
        let (rows, ncol) = (g.rows(), g.cols());
        let w = &self.weight.value;
        let per: Vec<(Vec<f32>, Vec<f32>, Vec<f32>)> = cols
            .par_iter()
            .enumerate()
            .map(|(n, col)| {
                let dout = grad.item(n);
                let mut dw = vec![0.0; outc * rows];
                gemm(false, true, outc, rows, ncol, dout, col, 0.0, &mut dw);
                let db: Vec<f32> = dout.chunks(ncol).map(|c| c.iter().sum()).collect();
                let mut dcol = vec![0.0; rows * ncol];
                gemm(true, false, rows, ncol, outc, w, dout, 0.0, &mut dcol);
                let mut dx = vec![0.0; g.channels * g.in_h * g.in_w];
                col2im(&dcol, &g, &mut dx);
                (dw, db, dx)
            })
            .collect();
        let mut dx = Vec::with_capacity(per.len() * g.channels * g.in_h * g.in_w);
        let mut dws = Vec::with_capacity(per.len());
        let mut dbs = Vec::with_capacity(per.len());
        for (dw, db, x) in per {
            dws.push(dw);
            dbs.push(db);
            dx.extend_from_slice(&x);
        }
        accumulate(&mut self.weight.grad, &dws);
        accumulate(&mut self.bias.grad, &dbs);
        Tensor::new(vec![cols.len(), g.channels, g.in_h, g.in_w], dx).expect("conv grad shape")
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Transposed convolution; weight layout `[in, out, k, k]`.
/// Output size is `(in - 1)·stride - 2·pad + k + output_pad`.
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Param,
    stride: usize,
    pad: usize,
    output_pad: usize,
    cache: Option<(Window, Tensor)>,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(output_pad < stride, "output padding must be smaller than stride");
        ConvTranspose2d {
            weight: Param::gaussian(&[inputs, outputs, kernel, kernel], init.std(inputs * kernel * kernel), rng),
            bias: Param::zeros(&[outputs]),
            stride,
            pad,
            output_pad,
            cache: None,
        }
    }

    /// Window describing the equivalent forward convolution over the output.
    fn window(&self, x: &Tensor) -> Result<(usize, Window)> {
        let (b, h, w) = image_dims(x, self.weight.shape[0], "conv_transpose2d input")?;
        let k = self.weight.shape[2];
        let out_h = ((h - 1) * self.stride + k + self.output_pad)
            .checked_sub(2 * self.pad)
            .ok_or_else(|| Error::shape("conv_transpose2d output", &[1], &[0]))?;
        let out_w = (w - 1) * self.stride + k + self.output_pad - 2 * self.pad;
        let g = Window {
            channels: self.weight.shape[1],
            in_h: out_h,
            in_w: out_w,
            kernel: k,
            stride: self.stride,
            pad: self.pad,
            out_h: h,
            out_w: w,
        };
        Ok((b, g))
    }
}

impl Layer for ConvTranspose2d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, g) = self.window(x)?;
        let inc = self.weight.shape[0];
        let (rows, cols) = (g.rows(), g.cols());
        let plane = g.in_h * g.in_w;
        let per: Vec<Vec<f32>> = (0..b)
            .into_par_iter()
            .map(|n| {
                let mut col = vec![0.0; rows * cols];
                gemm(true, false, rows, cols, inc, &self.weight.value, x.item(n), 0.0, &mut col);
                let mut out = vec![0.0; g.channels * plane];
                for (c, chunk) in out.chunks_mut(plane).enumerate() {
                    chunk.fill(self.bias.value[c]);
                }
                col2im(&col, &g, &mut out);
                out
            })
            .collect();
        Tensor::new(vec![b, g.channels, g.in_h, g.in_w], per.concat())
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward(x)?;
        let (_, g) = self.window(x)?;
        self.cache = Some((g, x.clone()));
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (g, x) = take(&mut self.cache, "conv_transpose2d");
        let inc = self.weight.shape[0];
        let (rows, cols) = (g.rows(), g.cols());
        let plane = g.in_h * g.in_w;
        let w = &self.weight.value;
        let per: Vec<(Vec<f32>, Vec<f32>, Vec<f32>)> = (0..x.batch())
            .into_par_iter()
            .map(|n| {
                let dout = grad.item(n);
                let mut dcol = vec![0.0; rows * cols];
                im2col(dout, &g, &mut dcol);
                let mut dx = vec![0.0; inc * cols];
                gemm(false, false, inc, cols, rows, w, &dcol, 0.0, &mut dx);
                let mut dw = vec![0.0; inc * rows];
                gemm(false, true, inc, rows, cols, x.item(n), &dcol, 0.0, &mut dw);
                let db: Vec<f32> = dout.chunks(plane).map(|c| c.iter().sum()).collect();
                (dw, db, dx)
            })
            .collect();
        let mut dx = Vec::with_capacity(x.len());
        let mut dws = Vec::with_capacity(per.len());
        let mut dbs = Vec::with_capacity(per.len());
        for (dw, db, d) in per {
            dws.push(dw);
            dbs.push(db);
            dx.extend_from_slice(&d);
        }
        accumulate(&mut self.weight.grad, &dws);
        accumulate(&mut self.bias.grad, &dbs);
        Tensor::new(x.shape().to_vec(), dx).expect("conv_transpose grad shape")
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Batch normalization over axis 1 of `[B, C, ...]`.
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    momentum: f32,
    eps: f32,
    cache: Option<(Vec<f32>, Vec<f32>, Vec<usize>)>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(&[channels], 0.0),
            running_var: Param::buffer(&[channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn dims(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let s = x.shape();
        let c = self.gamma.value.len();
        if s.len() < 2 || s[1] != c {
            return Err(Error::shape("batch_norm input", &[x.batch(), c], s));
        }
        Ok((s[0], c, s[2..].iter().product()))
    }

    fn normalize(x: &Tensor, c: usize, sp: usize, mean: &[f32], inv: &[f32], gamma: &[f32], beta: &[f32]) -> Vec<f32> {
        let mut out = x.data().to_vec();
        for (i, chunk) in out.chunks_mut(sp).enumerate() {
            let ch = i % c;
            for v in chunk.iter_mut() {
                *v = (*v - mean[ch]) * inv[ch] * gamma[ch] + beta[ch];
            }
        }
        out
    }
}

impl Layer for BatchNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, sp) = self.dims(x)?;
        let inv: Vec<f32> = self.running_var.value.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let out = Self::normalize(x, c, sp, &self.running_mean.value, &inv, &self.gamma.value, &self.beta.value);
        Tensor::new(x.shape().to_vec(), out)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let (b, c, sp) = self.dims(x)?;
        let count = (b * sp) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for (i, chunk) in x.data().chunks(sp).enumerate() {
            mean[i % c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for (i, chunk) in x.data().chunks(sp).enumerate() {
            let m = mean[i % c];
            var[i % c] += chunk.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= count);
        let mean32: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
        let inv: Vec<f32> = var.iter().map(|&v| (1.0 / (v + self.eps as f64).sqrt()) as f32).collect();
        for ch in 0..c {
            let rm = &mut self.running_mean.value[ch];
            *rm = (1.0 - self.momentum) * *rm + self.momentum * mean32[ch];
            let rv = &mut self.running_var.value[ch];
            *rv = (1.0 - self.momentum) * *rv + self.momentum * var[ch] as f32;
        }
        let ones = vec![1.0; c];
        let zeros = vec![0.0; c];
        let xhat = Self::normalize(x, c, sp, &mean32, &inv, &ones, &zeros);
        let mut out = xhat.clone();
        for (i, chunk) in out.chunks_mut(sp).enumerate() {
            let ch = i % c;
            for v in chunk.iter_mut() {
                *v = *v * self.gamma.value[ch] + self.beta.value[ch];
            }
        }
        self.cache = Some((xhat, inv, x.shape().to_vec()));
        Tensor::new(x.shape().to_vec(), out)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (xhat, inv, shape) = take(&mut self.cache, "batch_norm");
        let c = shape[1];
        let sp: usize = shape[2..].iter().product();
        let count = (shape[0] * sp) as f32;
        let mut sum_dy = vec![0.0f32; c];
        let mut sum_dy_xhat = vec![0.0f32; c];
        for (i, (g, xh)) in grad.data().chunks(sp).zip(xhat.chunks(sp)).enumerate() {
            let ch = i % c;
            for (a, b) in g.iter().zip(xh) {
                sum_dy[ch] += a;
                sum_dy_xhat[ch] += a * b;
            }
        }
        for ch in 0..c {
            self.beta.grad[ch] += sum_dy[ch];
            self.gamma.grad[ch] += sum_dy_xhat[ch];
        }
        let mut dx = vec![0.0; grad.len()];
        for (i, ((d, g), xh)) in dx.chunks_mut(sp).zip(grad.data().chunks(sp)).zip(xhat.chunks(sp)).enumerate() {
            let ch = i % c;
            let k = self.gamma.value[ch] * inv[ch] / count;
            for ((dv, gv), xv) in d.iter_mut().zip(g).zip(xh) {
                *dv = k * (count * gv - sum_dy[ch] - xv * sum_dy_xhat[ch]);
            }
        }
        Tensor::new(shape, dx).expect("batch_norm grad shape")
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[derive(Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Layer for Relu {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.map(|v| v.max(0.0)))
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mask = take(&mut self.mask, "relu");
        let mut g = grad.clone();
        for (v, m) in g.data_mut().iter_mut().zip(mask) {
            if !m {
                *v = 0.0;
            }
        }
        g
    }
}

pub struct LeakyRelu {
    slope: f32,
    mask: Option<Vec<bool>>,
}

impl LeakyRelu {
    pub fn new(slope: f32) -> Self {
        LeakyRelu { slope, mask: None }
    }
}

impl Layer for LeakyRelu {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.slope;
        Ok(x.map(|v| if v > 0.0 { v } else { s * v }))
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mask = take(&mut self.mask, "leaky_relu");
        let mut g = grad.clone();
        for (v, m) in g.data_mut().iter_mut().zip(mask) {
            if !m {
                *v *= self.slope;
            }
        }
        g
    }
}

#[derive(Default)]
pub struct Sigmoid {
    output: Option<Tensor>,
}

fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Layer for Sigmoid {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.map(sigmoid))
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward(x)?;
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let y = take(&mut self.output, "sigmoid");
        let mut g = grad.clone();
        for (v, s) in g.data_mut().iter_mut().zip(y.data()) {
            *v *= s * (1.0 - s);
        }
        g
    }
}

/// Reinterprets each batch item with a new per-item shape.
pub struct Reshape {
    item: Vec<usize>,
    input: Option<Vec<usize>>,
}

impl Reshape {
    pub fn new(item: &[usize]) -> Self {
        Reshape {
            item: item.to_vec(),
            input: None,
        }
    }
}

impl Layer for Reshape {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut shape = vec![x.batch()];
        shape.extend_from_slice(&self.item);
        x.clone().reshape(&shape)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.input = Some(x.shape().to_vec());
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let shape = take(&mut self.input, "reshape");
        grad.clone().reshape(&shape).expect("reshape grad")
    }
}

/// Spatial mean: `[B, C, H, W] -> [B, C]`.
#[derive(Default)]
pub struct GlobalAvgPool {
    input: Option<Vec<usize>>,
}

impl Layer for GlobalAvgPool {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool input", &[0, 0, 0, 0], s));
        }
        let sp = s[2] * s[3];
        let data: Vec<f32> = x.data().chunks(sp).map(|c| c.iter().sum::<f32>() / sp as f32).collect();
        Tensor::new(vec![s[0], s[1]], data)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward(x)?;
        self.input = Some(x.shape().to_vec());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let shape = take(&mut self.input, "global_avg_pool");
        let sp = shape[2] * shape[3];
        let mut data = Vec::with_capacity(grad.len() * sp);
        for &g in grad.data() {
            data.extend(std::iter::repeat_n(g / sp as f32, sp));
        }
        Tensor::new(shape, data).expect("pool grad shape")
    }
}

/// Two 3×3 convolutions with a skip connection. The skip is a strided 1×1
/// projection whenever the channel count or resolution changes.
pub struct ResidualUnit {
    conv1: Conv2d,
    act1: LeakyRelu,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
    act_out: LeakyRelu,
}

impl ResidualUnit {
    pub fn new(inputs: usize, outputs: usize, stride: usize, slope: f32, init: Init, rng: &mut impl Rng) -> Self {
        let conv1 = Conv2d::new(inputs, outputs, 3, stride, 1, init, rng);
        let conv2 = Conv2d::new(outputs, outputs, 3, 1, 1, init, rng);
        let shortcut = (inputs != outputs || stride != 1).then(|| Conv2d::new(inputs, outputs, 1, stride, 0, init, rng));
        ResidualUnit {
            conv1,
            act1: LeakyRelu::new(slope),
            conv2,
            shortcut,
            act_out: LeakyRelu::new(slope),
        }
    }

    /// Convolution layers in this unit, projection included.
    pub fn conv_count(&self) -> usize {
        2 + usize::from(self.shortcut.is_some())
    }
}

impl Layer for ResidualUnit {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&self.act1.forward(&self.conv1.forward(x)?)?)?;
        let mut s = match &self.shortcut {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        s.add_assign(&h);
        self.act_out.forward(&s)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let a = self.conv1.forward_train(x)?;
        let a = self.act1.forward_train(&a)?;
        let h = self.conv2.forward_train(&a)?;
        let mut s = match &mut self.shortcut {
            Some(p) => p.forward_train(x)?,
            None => x.clone(),
        };
        s.add_assign(&h);
        self.act_out.forward_train(&s)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.act_out.backward(grad);
        let gm = self.conv2.backward(&g);
        let gm = self.act1.backward(&gm);
        let mut dx = self.conv1.backward(&gm);
        let gs = match &mut self.shortcut {
            Some(p) => p.backward(&g),
            None => g,
        };
        dx.add_assign(&gs);
        dx
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(p) = &self.shortcut {
            p.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(p) = &mut self.shortcut {
            p.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}
