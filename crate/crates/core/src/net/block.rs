use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2d, Conv2d, ConvOptions, DepthwiseSeparableConv, Layer, Relu};
use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};

/// Output width and dilation of one residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub channels: usize,
    #[serde(default = "one")]
    pub dilation: usize,
}

fn one() -> usize {
    1
}

impl BlockSpec {
    pub fn new(channels: usize, dilation: usize) -> Self {
        BlockSpec { channels, dilation }
    }
}

/// Pre-activation residual block with depthwise separable 3×3 convolutions:
/// `x + conv(relu(bn(conv(relu(bn(x))))))`, with a 1×1 projection on the skip
/// path when the channel count changes.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    bn1: BatchNorm2d,
    relu1: Relu,
    conv1: DepthwiseSeparableConv,
    bn2: BatchNorm2d,
    relu2: Relu,
    conv2: DepthwiseSeparableConv,
    projection: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(
        name: &str,
        in_channels: usize,
        spec: BlockSpec,
        bn_momentum: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if spec.channels == 0 || spec.dilation == 0 {
            return Err(Error::invalid("block", "channels and dilation must be positive"));
        }
        let out = spec.channels;
        let projection = if in_channels != out {
            Some(Conv2d::new(
                &format!("{name}.proj"),
                in_channels,
                out,
                1,
                ConvOptions::same(1, 1).bias(false),
                rng,
            )?)
        } else {
            None
        };
        Ok(ResidualBlock {
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), in_channels, bn_momentum)?,
            relu1: Relu::new(),
            conv1: DepthwiseSeparableConv::new(
                &format!("{name}.conv1"),
                in_channels,
                out,
                3,
                spec.dilation,
                rng,
            )?,
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), out, bn_momentum)?,
            relu2: Relu::new(),
            conv2: DepthwiseSeparableConv::new(
                &format!("{name}.conv2"),
                out,
                out,
                3,
                spec.dilation,
                rng,
            )?,
            projection,
        })
    }
}

impl Layer for ResidualBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.relu1.forward(&self.bn1.forward(x)?)?;
        let h = self.conv1.forward(&h)?;
        let h = self.relu2.forward(&self.bn2.forward(&h)?)?;
        let mut h = self.conv2.forward(&h)?;
        match &self.projection {
            Some(p) => h.add_assign(&p.forward(x)?)?,
            None => h.add_assign(x)?,
        }
        Ok(h)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = self.bn1.forward_train(x)?;
        let h = self.relu1.forward_train(&h)?;
        let h = self.conv1.forward_train(&h)?;
        let h = self.bn2.forward_train(&h)?;
        let h = self.relu2.forward_train(&h)?;
        let mut h = self.conv2.forward_train(&h)?;
        match &mut self.projection {
            Some(p) => h.add_assign(&p.forward_train(x)?)?,
            None => h.add_assign(x)?,
        }
        Ok(h)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let g = self.conv2.backward(grad)?;
        let g = self.relu2.backward(&g)?;
        let g = self.bn2.backward(&g)?;
        let g = self.conv1.backward(&g)?;
        let g = self.relu1.backward(&g)?;
        let mut dx = self.bn1.backward(&g)?;
        match &mut self.projection {
            Some(p) => dx.add_assign(&p.backward(grad)?)?,
            None => dx.add_assign(grad)?,
        }
        Ok(dx)
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.bn1.params(out);
        self.conv1.params(out);
        self.bn2.params(out);
        self.conv2.params(out);
        if let Some(p) = &self.projection {
            p.params(out);
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.bn1.params_mut(out);
        self.conv1.params_mut(out);
        self.bn2.params_mut(out);
        self.conv2.params_mut(out);
        if let Some(p) = &mut self.projection {
            p.params_mut(out);
        }
    }
}

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: impl Layer + 'static) {
        self.layers.push(Box::new(layer));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Layer for Sequential {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h)?;
        }
        Ok(h)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward_train(&h)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        for l in &self.layers {
            l.params(out);
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        for l in &mut self.layers {
            l.params_mut(out);
        }
    }
}
