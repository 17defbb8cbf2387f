//! Layers with explicit forward caches and reverse-mode backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{col2im_add, gemm, im2col, ConvGeom};
use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};

/// A differentiable layer.
///
/// `forward` is the read-only inference path (batch norm uses running
/// statistics). `forward_train` caches what `backward` needs; `backward`
/// accumulates parameter gradients into [`Param::grad`] and returns the
/// gradient with respect to the layer input.
pub trait Layer: Send + Sync {
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor>;
    fn backward(&mut self, grad: &Tensor) -> Result<Tensor>;
    fn params<'a>(&'a self, out: &mut Vec<&'a Param>);
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>);
}

fn missing_cache(layer: &'static str) -> Error {
    Error::invalid(layer, "backward called without a preceding forward_train")
}

fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvOptions {
    /// Stride 1 with "same" padding for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvOptions {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            groups: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }
}

/// Grouped, strided, dilated 2-D convolution. Weight shape `[out, in/groups, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    opts: ConvOptions,
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        opts: ConvOptions,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 {
            return Err(Error::invalid("conv", "channels and kernel must be positive"));
        }
        if opts.stride == 0 || opts.dilation == 0 || opts.groups == 0 {
            return Err(Error::invalid("conv", "stride, dilation and groups must be positive"));
        }
        if in_channels % opts.groups != 0 || out_channels % opts.groups != 0 {
            return Err(Error::invalid(
                "groups",
                format!("{} does not divide {in_channels} -> {out_channels}", opts.groups),
            ));
        }
        let cig = in_channels / opts.groups;
        let fan_in = cig * kernel * kernel;
        let shape = [out_channels, cig, kernel, kernel];
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Param::new(
            format!("{name}.weight"),
            Tensor::from_vec(shape, uniform(rng, shape.iter().product(), bound))?,
        );
        let bias = opts
            .bias
            .then(|| Param::new(format!("{name}.bias"), Tensor::zeros([1, out_channels, 1, 1])));
        Ok(Conv2d {
            in_channels,
            out_channels,
            kernel,
            opts,
            weight,
            bias,
            cache: None,
        })
    }

    pub fn options(&self) -> ConvOptions {
        self.opts
    }

    fn geom(&self, x: &Tensor) -> Result<ConvGeom> {
        if x.channels() != self.in_channels {
            return Err(Error::shape("conv input channels", self.in_channels, x.channels()));
        }
        ConvGeom::new(
            self.in_channels / self.opts.groups,
            x.height(),
            x.width(),
            self.kernel,
            self.opts.stride,
            self.opts.padding,
            self.opts.dilation,
        )
    }

    fn run(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.geom(x)?;
        let groups = self.opts.groups;
        let cog = self.out_channels / groups;
        let (kk, p) = (g.col_rows(), g.col_cols());
        let in_plane = g.h * g.w;
        let mut y = Tensor::zeros([x.batch(), self.out_channels, g.out_h, g.out_w]);
        let mut col = vec![0.0; if g.is_pointwise() { 0 } else { kk * p }];
        let w = self.weight.value.data();
        for n in 0..x.batch() {
            let xs = x.sample(n);
            let ys = y.sample_mut(n);
            for gi in 0..groups {
                let xg = &xs[gi * g.channels * in_plane..(gi + 1) * g.channels * in_plane];
                let cols: &[f64] = if g.is_pointwise() {
                    xg
                } else {
                    im2col(xg, &g, &mut col);
                    &col
                };
                gemm(
                    cog,
                    kk,
                    p,
                    &w[gi * cog * kk..(gi + 1) * cog * kk],
                    false,
                    cols,
                    false,
                    0.0,
                    &mut ys[gi * cog * p..(gi + 1) * cog * p],
                );
            }
            if let Some(b) = &self.bias {
                for (c, &bv) in b.value.data().iter().enumerate() {
                    ys[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        Ok(y)
    }
}

impl Layer for Conv2d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.run(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.take().ok_or_else(|| missing_cache("conv"))?;
        let g = self.geom(&x)?;
        grad.expect_shape(
            "conv upstream gradient",
            [x.batch(), self.out_channels, g.out_h, g.out_w],
        )?;
        let groups = self.opts.groups;
        let cog = self.out_channels / groups;
        let (kk, p) = (g.col_rows(), g.col_cols());
        let in_plane = g.h * g.w;
        let mut dx = Tensor::zeros(x.shape());
        let mut col = vec![0.0; kk * p];
        let mut dcol = vec![0.0; kk * p];
        for n in 0..x.batch() {
            let xs = x.sample(n);
            let gs = grad.sample(n);
            let dxs = dx.sample_mut(n);
            for gi in 0..groups {
                let xg = &xs[gi * g.channels * in_plane..(gi + 1) * g.channels * in_plane];
                let gg = &gs[gi * cog * p..(gi + 1) * cog * p];
                let cols: &[f64] = if g.is_pointwise() {
                    xg
                } else {
                    im2col(xg, &g, &mut col);
                    &col
                };
                gemm(
                    cog,
                    p,
                    kk,
                    gg,
                    false,
                    cols,
                    true,
                    1.0,
                    &mut self.weight.grad.data_mut()[gi * cog * kk..(gi + 1) * cog * kk],
                );
                let w = &self.weight.value.data()[gi * cog * kk..(gi + 1) * cog * kk];
                let dxg = &mut dxs[gi * g.channels * in_plane..(gi + 1) * g.channels * in_plane];
                if g.is_pointwise() {
                    gemm(kk, cog, p, w, true, gg, false, 1.0, dxg);
                } else {
                    gemm(kk, cog, p, w, true, gg, false, 0.0, &mut dcol);
                    col2im_add(&dcol, &g, dxg);
                }
            }
            if let Some(b) = &mut self.bias {
                for (c, db) in b.grad.data_mut().iter_mut().enumerate() {
                    *db += gs[c * p..(c + 1) * p].iter().sum::<f64>();
                }
            }
        }
        Ok(dx)
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.weight);
        out.extend(self.bias.as_ref());
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        out.extend(self.bias.as_mut());
    }
}

/// Learned upsampling: the adjoint of a strided convolution.
/// Weight shape `[in, out, k, k]`; output size `(H - 1)·stride - 2·pad + k`.
#[derive(Debug, Clone)]
pub struct TransposedConv2d {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<Tensor>,
}

impl TransposedConv2d {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::invalid(
                "transposed conv",
                "channels, kernel and stride must be positive",
            ));
        }
        if 2 * padding >= kernel + stride {
            return Err(Error::invalid("padding", "too large for kernel and stride"));
        }
        let shape = [in_channels, out_channels, kernel, kernel];
        // each output pixel sees roughly in·k²/stride² taps
        let fan_in = (in_channels * kernel * kernel).div_ceil(stride * stride);
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Param::new(
            format!("{name}.weight"),
            Tensor::from_vec(shape, uniform(rng, shape.iter().product(), bound))?,
        );
        let bias =
            bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros([1, out_channels, 1, 1])));
        Ok(TransposedConv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
            cache: None,
        })
    }

    /// Upsampling by exactly 2: kernel 4, stride 2, padding 1.
    pub fn upsample2(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new(name, in_channels, out_channels, 4, 2, 1, true, rng)
    }

    /// Geometry of the forward convolution this layer is the adjoint of.
    fn geom(&self, x: &Tensor) -> Result<ConvGeom> {
        if x.channels() != self.in_channels {
            return Err(Error::shape(
                "transposed conv input channels",
                self.in_channels,
                x.channels(),
            ));
        }
        let out_h = (x.height() - 1) * self.stride + self.kernel - 2 * self.padding;
        let out_w = (x.width() - 1) * self.stride + self.kernel - 2 * self.padding;
        let g = ConvGeom::new(
            self.out_channels,
            out_h,
            out_w,
            self.kernel,
            self.stride,
            self.padding,
            1,
        )?;
        debug_assert_eq!((g.out_h, g.out_w), (x.height(), x.width()));
        Ok(g)
    }

    fn run(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.geom(x)?;
        let (kk, p) = (g.col_rows(), g.col_cols());
        let mut y = Tensor::zeros([x.batch(), self.out_channels, g.h, g.w]);
        let mut col = vec![0.0; kk * p];
        for n in 0..x.batch() {
            gemm(
                kk,
                self.in_channels,
                p,
                self.weight.value.data(),
                true,
                x.sample(n),
                false,
                0.0,
                &mut col,
            );
            let ys = y.sample_mut(n);
            col2im_add(&col, &g, ys);
            if let Some(b) = &self.bias {
                let plane = g.h * g.w;
                for (c, &bv) in b.value.data().iter().enumerate() {
                    ys[c * plane..(c + 1) * plane]
                        .iter_mut()
                        .for_each(|v| *v += bv);
                }
            }
        }
        Ok(y)
    }
}

impl Layer for TransposedConv2d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.run(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.take().ok_or_else(|| missing_cache("transposed conv"))?;
        let g = self.geom(&x)?;
        grad.expect_shape(
            "transposed conv upstream gradient",
            [x.batch(), self.out_channels, g.h, g.w],
        )?;
        let (kk, p) = (g.col_rows(), g.col_cols());
        let mut dx = Tensor::zeros(x.shape());
        let mut dcol = vec![0.0; kk * p];
        for n in 0..x.batch() {
            let gs = grad.sample(n);
            im2col(gs, &g, &mut dcol);
            gemm(
                self.in_channels,
                kk,
                p,
                self.weight.value.data(),
                false,
                &dcol,
                false,
                0.0,
                dx.sample_mut(n),
            );
            gemm(
                self.in_channels,
                p,
                kk,
                x.sample(n),
                false,
                &dcol,
                true,
                1.0,
                self.weight.grad.data_mut(),
            );
            if let Some(b) = &mut self.bias {
                let plane = g.h * g.w;
                for (c, db) in b.grad.data_mut().iter_mut().enumerate() {
                    *db += gs[c * plane..(c + 1) * plane].iter().sum::<f64>();
                }
            }
        }
        Ok(dx)
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.weight);
        out.extend(self.bias.as_ref());
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        out.extend(self.bias.as_mut());
    }
}

/// Depthwise `k × k` convolution followed by a 1×1 channel-mixing convolution.
#[derive(Debug, Clone)]
pub struct DepthwiseSeparableConv {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
}

impl DepthwiseSeparableConv {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let depthwise = Conv2d::new(
            &format!("{name}.dw"),
            in_channels,
            in_channels,
            kernel,
            ConvOptions::same(kernel, dilation)
                .groups(in_channels)
                .bias(false),
            rng,
        )?;
        let pointwise = Conv2d::new(
            &format!("{name}.pw"),
            in_channels,
            out_channels,
            1,
            ConvOptions::same(1, 1),
            rng,
        )?;
        Ok(DepthwiseSeparableConv {
            depthwise,
            pointwise,
        })
    }
}

impl Layer for DepthwiseSeparableConv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.pointwise.forward(&self.depthwise.forward(x)?)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = self.depthwise.forward_train(x)?;
        self.pointwise.forward_train(&h)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let g = self.pointwise.backward(grad)?;
        self.depthwise.backward(&g)
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.depthwise.params(out);
        self.pointwise.params(out);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.depthwise.params_mut(out);
        self.pointwise.params_mut(out);
    }
}

/// 2×2 max pooling with stride 2. Ties go to the first element in scan order.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2d {
    cache: Option<([usize; 4], Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new() -> Self {
        Self::default()
    }

    fn run(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let [n, c, h, w] = x.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "maxpool",
                format!("input {h}x{w} is not divisible by 2"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Tensor::zeros([n, c, oh, ow]);
        let mut arg = Vec::with_capacity(y.len());
        let xd = x.data();
        for (plane, out) in y.data_mut().chunks_mut(oh * ow).enumerate() {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    out[oy * ow + ox] = xd[best];
                    arg.push(best);
                }
            }
        }
        Ok((y, arg))
    }
}

impl Layer for MaxPool2d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Self::run(x)?.0)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, arg) = Self::run(x)?;
        self.cache = Some((x.shape(), arg));
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (shape, arg) = self.cache.take().ok_or_else(|| missing_cache("maxpool"))?;
        if grad.len() != arg.len() {
            return Err(Error::shape("maxpool upstream gradient", arg.len(), grad.len()));
        }
        let mut dx = Tensor::zeros(shape);
        let d = dx.data_mut();
        for (&i, &g) in arg.iter().zip(grad.data()) {
            d[i] += g;
        }
        Ok(dx)
    }

    fn params<'a>(&'a self, _out: &mut Vec<&'a Param>) {}

    fn params_mut<'a>(&'a mut self, _out: &mut Vec<&'a mut Param>) {}
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(y)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mask = self.mask.take().ok_or_else(|| missing_cache("relu"))?;
        if mask.len() != grad.len() {
            return Err(Error::shape("relu upstream gradient", mask.len(), grad.len()));
        }
        let mut dx = grad.clone();
        dx.data_mut()
            .iter_mut()
            .zip(&mask)
            .for_each(|(g, &on)| {
                if !on {
                    *g = 0.0
                }
            });
        Ok(dx)
    }

    fn params<'a>(&'a self, _out: &mut Vec<&'a Param>) {}

    fn params_mut<'a>(&'a mut self, _out: &mut Vec<&'a mut Param>) {}
}

pub const BATCHNORM_EPS: f64 = 1e-5;

/// Per-channel batch normalization.
///
/// Training mode normalizes with the biased batch statistics and folds them
/// into the running averages; inference uses the running averages.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    channels: usize,
    momentum: f64,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::invalid("momentum", "must be in [0, 1]"));
        }
        let s = [1, channels, 1, 1];
        Ok(BatchNorm2d {
            channels,
            momentum,
            gamma: Param::new(format!("{name}.gamma"), Tensor::filled(s, 1.0)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(s)),
            running_mean: Param::buffer(format!("{name}.running_mean"), Tensor::zeros(s)),
            running_var: Param::buffer(format!("{name}.running_var"), Tensor::filled(s, 1.0)),
            cache: None,
        })
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.channels {
            return Err(Error::shape("batchnorm channels", self.channels, x.channels()));
        }
        Ok(())
    }

    fn normalize(
        &self,
        x: &Tensor,
        mean: &[f64],
        inv_std: &[f64],
        keep_xhat: bool,
    ) -> (Tensor, Option<Tensor>) {
        let plane = x.plane_len();
        let mut y = Tensor::zeros(x.shape());
        let mut xhat = keep_xhat.then(|| Tensor::zeros(x.shape()));
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for n in 0..x.batch() {
            for c in 0..self.channels {
                let off = (n * self.channels + c) * plane;
                for i in off..off + plane {
                    let h = (x.data()[i] - mean[c]) * inv_std[c];
                    y.data_mut()[i] = g[c] * h + b[c];
                    if let Some(xh) = xhat.as_mut() {
                        xh.data_mut()[i] = h;
                    }
                }
            }
        }
        (y, xhat)
    }
}

impl Layer for BatchNorm2d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let inv_std: Vec<f64> = self
            .running_var
            .value
            .data()
            .iter()
            .map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt())
            .collect();
        Ok(self
            .normalize(x, self.running_mean.value.data(), &inv_std, false)
            .0)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let plane = x.plane_len();
        let m = (x.batch() * plane) as f64;
        let mut mean = vec![0.0; self.channels];
        let mut var = vec![0.0; self.channels];
        for n in 0..x.batch() {
            for c in 0..self.channels {
                let off = (n * self.channels + c) * plane;
                mean[c] += x.data()[off..off + plane].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for n in 0..x.batch() {
            for c in 0..self.channels {
                let off = (n * self.channels + c) * plane;
                var[c] += x.data()[off..off + plane]
                    .iter()
                    .map(|v| (v - mean[c]) * (v - mean[c]))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let (y, xhat) = self.normalize(x, &mean, &inv_std, true);

        let mom = self.momentum;
        for (r, v) in self.running_mean.value.data_mut().iter_mut().zip(&mean) {
            *r = (1.0 - mom) * *r + mom * v;
        }
        for (r, v) in self.running_var.value.data_mut().iter_mut().zip(&var) {
            *r = (1.0 - mom) * *r + mom * v;
        }
        self.cache = Some(BnCache {
            xhat: xhat.expect("xhat requested"),
            inv_std,
        });
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let BnCache { xhat, inv_std } = self.cache.take().ok_or_else(|| missing_cache("batchnorm"))?;
        grad.expect_shape("batchnorm upstream gradient", xhat.shape())?;
        let plane = xhat.plane_len();
        let batch = xhat.batch();
        let m = (batch * plane) as f64;
        let mut sum_dy = vec![0.0; self.channels];
        let mut sum_dy_xhat = vec![0.0; self.channels];
        for n in 0..batch {
            for c in 0..self.channels {
                let off = (n * self.channels + c) * plane;
                for i in off..off + plane {
                    sum_dy[c] += grad.data()[i];
                    sum_dy_xhat[c] += grad.data()[i] * xhat.data()[i];
                }
            }
        }
        for c in 0..self.channels {
            self.gamma.grad.data_mut()[c] += sum_dy_xhat[c];
            self.beta.grad.data_mut()[c] += sum_dy[c];
        }
        let gamma = self.gamma.value.data();
        let mut dx = Tensor::zeros(xhat.shape());
        for n in 0..batch {
            for c in 0..self.channels {
                let off = (n * self.channels + c) * plane;
                let k = gamma[c] * inv_std[c] / m;
                for i in off..off + plane {
                    dx.data_mut()[i] = k
                        * (m * grad.data()[i] - sum_dy[c] - xhat.data()[i] * sum_dy_xhat[c]);
                }
            }
        }
        Ok(dx)
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.extend([&self.gamma, &self.beta, &self.running_mean, &self.running_var]);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.extend([
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]);
    }
}

/// Softmax over consecutive groups of `group` channels at every pixel.
///
/// With `group = 2` and `2T` input channels this turns per-anchor objectness
/// logits into probabilities.
#[derive(Debug, Clone)]
pub struct Softmax {
    group: usize,
    cache: Option<Tensor>,
}

impl Softmax {
    pub fn new(group: usize) -> Self {
        Softmax { group, cache: None }
    }

    fn run(&self, x: &Tensor) -> Result<Tensor> {
        if self.group == 0 || x.channels() % self.group != 0 {
            return Err(Error::shape("softmax channel groups", self.group, x.channels()));
        }
        let plane = x.plane_len();
        let groups = x.channels() / self.group;
        let mut y = x.clone();
        for n in 0..x.batch() {
            let s = y.sample_mut(n);
            for gi in 0..groups {
                for i in 0..plane {
                    let idx = |k: usize| (gi * self.group + k) * plane + i;
                    let m = (0..self.group)
                        .map(|k| s[idx(k)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for k in 0..self.group {
                        s[idx(k)] = (s[idx(k)] - m).exp();
                        z += s[idx(k)];
                    }
                    for k in 0..self.group {
                        s[idx(k)] /= z;
                    }
                }
            }
        }
        Ok(y)
    }
}

impl Layer for Softmax {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.run(x)?;
        self.cache = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let y = self.cache.take().ok_or_else(|| missing_cache("softmax"))?;
        grad.expect_shape("softmax upstream gradient", y.shape())?;
        let plane = y.plane_len();
        let groups = y.channels() / self.group;
        let mut dx = Tensor::zeros(y.shape());
        for n in 0..y.batch() {
            let (ys, gs) = (y.sample(n), grad.sample(n));
            let ds = dx.sample_mut(n);
            for gi in 0..groups {
                for i in 0..plane {
                    let idx = |k: usize| (gi * self.group + k) * plane + i;
                    let dot: f64 = (0..self.group).map(|k| ys[idx(k)] * gs[idx(k)]).sum();
                    for k in 0..self.group {
                        ds[idx(k)] = ys[idx(k)] * (gs[idx(k)] - dot);
                    }
                }
            }
        }
        Ok(dx)
    }

    fn params<'a>(&'a self, _out: &mut Vec<&'a Param>) {}

    fn params_mut<'a>(&'a mut self, _out: &mut Vec<&'a mut Param>) {}
}
