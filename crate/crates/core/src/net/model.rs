//! The backbone + two-head network.
//!
//! ```text
//! image ─ stem conv /2 ─ maxpool /2 ─ stage1 ─ maxpool /2 ─ stage2 (dilated) ─┬─ segmentation head
//!                                                                             └─ detection head
//! segmentation head: 3 blocks ─ 3 × (transposed conv ×2) ─ 1×1 conv → num_classes
//! detection head:    3 shared blocks ─┬─ objectness: 2 blocks ─ 1×1 conv → 2·T
//!                                     ├─ class:      2 blocks ─ 1×1 conv → K·T
//!                                     ├─ box:        2 blocks ─ 1×1 conv → 4·T
//!                                     └─ embedding:  2 blocks ─ 1×1 conv → E·T
//! ```
//!
//! Detection outputs are per anchor template: channel `t·G + g` holds entry `g`
//! of template `t`, for group size `G` (2, K, 4 or E).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::block::{BlockSpec, ResidualBlock, Sequential};
use super::layers::{
    BatchNorm2d, Conv2d, ConvOptions, Layer, MaxPool2d, Relu, TransposedConv2d,
};
use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};

/// Total spatial downsampling of the backbone.
pub const BACKBONE_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Blocks at 1/4 resolution, between the two max-pooling layers.
    pub stage1: Vec<BlockSpec>,
    /// Blocks at 1/8 resolution; usually dilated.
    pub stage2: Vec<BlockSpec>,
    pub seg_blocks: Vec<BlockSpec>,
    pub seg_upsample_channels: [usize; 3],
    pub det_shared: Vec<BlockSpec>,
    pub det_branch_channels: usize,
    pub det_branch_blocks: usize,
    pub num_classes: usize,
    pub num_object_classes: usize,
    pub embedding_dim: usize,
    pub anchors_per_cell: usize,
    pub bn_momentum: f64,
}

impl ModelConfig {
    /// Small CPU-sized configuration. Channel widths are not a reconstruction
    /// of any full-size network.
    pub fn toy(
        num_classes: usize,
        num_object_classes: usize,
        embedding_dim: usize,
        anchors_per_cell: usize,
    ) -> Self {
        ModelConfig {
            in_channels: 3,
            stem_channels: 16,
            stage1: vec![BlockSpec::new(24, 1)],
            stage2: vec![BlockSpec::new(32, 1), BlockSpec::new(32, 2)],
            seg_blocks: vec![
                BlockSpec::new(32, 2),
                BlockSpec::new(32, 1),
                BlockSpec::new(32, 1),
            ],
            seg_upsample_channels: [24, 16, 16],
            det_shared: vec![
                BlockSpec::new(32, 2),
                BlockSpec::new(32, 1),
                BlockSpec::new(32, 1),
            ],
            det_branch_channels: 32,
            det_branch_blocks: 2,
            num_classes,
            num_object_classes,
            embedding_dim,
            anchors_per_cell,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("stem_channels", self.stem_channels),
            ("det_branch_channels", self.det_branch_channels),
            ("num_object_classes", self.num_object_classes),
            ("embedding_dim", self.embedding_dim),
            ("anchors_per_cell", self.anchors_per_cell),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid("model", format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("model", "num_classes must be at least 2"));
        }
        if self.seg_upsample_channels.contains(&0) {
            return Err(Error::invalid("model", "seg_upsample_channels must be positive"));
        }
        if self.seg_blocks.len() != 3 {
            return Err(Error::invalid("model", "segmentation head needs exactly 3 blocks"));
        }
        if self.det_shared.len() != 3 {
            return Err(Error::invalid("model", "detection head needs exactly 3 shared blocks"));
        }
        if self.det_branch_blocks != 2 {
            return Err(Error::invalid("model", "detection branches need exactly 2 blocks"));
        }
        let all = self
            .stage1
            .iter()
            .chain(&self.stage2)
            .chain(&self.seg_blocks)
            .chain(&self.det_shared);
        for b in all {
            if b.channels == 0 || b.dilation == 0 {
                return Err(Error::invalid("model", format!("invalid block {b:?}")));
            }
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid("model", "bn_momentum must be in [0, 1]"));
        }
        Ok(())
    }

    /// Output channels of the four detection branches.
    pub fn branch_channels(&self) -> [usize; 4] {
        let t = self.anchors_per_cell;
        [
            2 * t,
            self.num_object_classes * t,
            4 * t,
            self.embedding_dim * t,
        ]
    }

    fn backbone_channels(&self) -> usize {
        self.stage2
            .last()
            .or(self.stage1.last())
            .map_or(self.stem_channels, |b| b.channels)
    }
}

/// Raw outputs of all heads (also used for their upstream gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    /// `N × num_classes × H × W`
    pub seg: Tensor,
    /// `N × 2T × H/8 × W/8`, (background, foreground) logits per template
    pub objectness: Tensor,
    /// `N × K·T × H/8 × W/8`
    pub class_scores: Tensor,
    /// `N × 4T × H/8 × W/8`, (tx, ty, tw, th) per template
    pub box_deltas: Tensor,
    /// `N × E·T × H/8 × W/8`
    pub embeddings: Tensor,
}

impl HeadOutputs {
    pub fn zeros_like(other: &HeadOutputs) -> Self {
        HeadOutputs {
            seg: Tensor::zeros(other.seg.shape()),
            objectness: Tensor::zeros(other.objectness.shape()),
            class_scores: Tensor::zeros(other.class_scores.shape()),
            box_deltas: Tensor::zeros(other.box_deltas.shape()),
            embeddings: Tensor::zeros(other.embeddings.shape()),
        }
    }

    pub fn detection(&self) -> [&Tensor; 4] {
        [
            &self.objectness,
            &self.class_scores,
            &self.box_deltas,
            &self.embeddings,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.seg.is_finite() && self.detection().iter().all(|t| t.is_finite())
    }
}

/// Standard deviation of the detection output weights at init.
pub const HEAD_INIT_STD: f64 = 0.01;
/// Foreground probability every anchor starts from.
pub const OBJECTNESS_PRIOR: f64 = 0.01;

pub const BRANCH_NAMES: [&str; 4] = ["objectness", "class", "box", "embedding"];

pub struct Model {
    config: ModelConfig,
    backbone: Sequential,
    seg_head: Sequential,
    det_shared: Sequential,
    branches: Vec<Sequential>,
}

fn blocks(
    seq: &mut Sequential,
    prefix: &str,
    mut channels: usize,
    specs: &[BlockSpec],
    momentum: f64,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    for (i, spec) in specs.iter().enumerate() {
        seq.push(ResidualBlock::new(
            &format!("{prefix}{i}"),
            channels,
            *spec,
            momentum,
            rng,
        )?);
        channels = spec.channels;
    }
    Ok(channels)
}

impl Model {
    /// Builds a model with weights drawn from a seeded generator.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = config.bn_momentum;

        let mut backbone = Sequential::new();
        backbone.push(Conv2d::new(
            "backbone.stem",
            config.in_channels,
            config.stem_channels,
            3,
            ConvOptions::same(3, 1).stride(2),
            &mut rng,
        )?);
        backbone.push(MaxPool2d::new());
        let c = blocks(
            &mut backbone,
            "backbone.stage1.",
            config.stem_channels,
            &config.stage1,
            m,
            &mut rng,
        )?;
        backbone.push(MaxPool2d::new());
        let trunk = blocks(&mut backbone, "backbone.stage2.", c, &config.stage2, m, &mut rng)?;
        debug_assert_eq!(trunk, config.backbone_channels());

        let mut seg_head = Sequential::new();
        let mut c = blocks(&mut seg_head, "seg.block", trunk, &config.seg_blocks, m, &mut rng)?;
        seg_head.push(BatchNorm2d::new("seg.bn", c, m)?);
        seg_head.push(Relu::new());
        for (i, &out) in config.seg_upsample_channels.iter().enumerate() {
            seg_head.push(TransposedConv2d::upsample2(
                &format!("seg.up{i}"),
                c,
                out,
                &mut rng,
            )?);
            seg_head.push(Relu::new());
            c = out;
        }
        seg_head.push(Conv2d::new(
            "seg.classifier",
            c,
            config.num_classes,
            1,
            ConvOptions::same(1, 1),
            &mut rng,
        )?);

        let mut det_shared = Sequential::new();
        let shared = blocks(&mut det_shared, "det.shared", trunk, &config.det_shared, m, &mut rng)?;

        let mut branches = Vec::with_capacity(4);
        for (name, out) in BRANCH_NAMES.iter().zip(config.branch_channels()) {
            let mut b = Sequential::new();
            let specs = vec![BlockSpec::new(config.det_branch_channels, 1); config.det_branch_blocks];
            let c = blocks(&mut b, &format!("det.{name}.block"), shared, &specs, m, &mut rng)?;
            b.push(BatchNorm2d::new(&format!("det.{name}.bn"), c, m)?);
            b.push(Relu::new());
            b.push(Conv2d::new(
                &format!("det.{name}.out"),
                c,
                out,
                1,
                ConvOptions::same(1, 1),
                &mut rng,
            )?);
            branches.push(b);
        }

        let mut model = Model {
            config,
            backbone,
            seg_head,
            det_shared,
            branches,
        };
        model.init_detection_outputs(&mut rng);
        Ok(model)
    }

    /// RetinaNet-style output init: small weights on every detection output
    /// layer and an objectness bias giving a foreground prior of
    /// [`OBJECTNESS_PRIOR`].
    fn init_detection_outputs(&mut self, rng: &mut impl Rng) {
        let bound = HEAD_INIT_STD * 3f64.sqrt();
        let prior_logit = (OBJECTNESS_PRIOR / (1.0 - OBJECTNESS_PRIOR)).ln();
        for p in self.params_mut() {
            if !(p.name.starts_with("det.") && p.name.contains(".out.")) {
                continue;
            }
            if p.name.ends_with(".weight") {
                p.value
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-bound..bound));
            } else if p.name == "det.objectness.out.bias" {
                for (c, v) in p.value.data_mut().iter_mut().enumerate() {
                    *v = if c % 2 == 1 { prior_logit } else { 0.0 };
                }
            }
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.config.in_channels {
            return Err(Error::shape("image channels", self.config.in_channels, x.channels()));
        }
        if x.height() == 0
            || x.width() == 0
            || x.height() % BACKBONE_STRIDE != 0
            || x.width() % BACKBONE_STRIDE != 0
        {
            return Err(Error::invalid(
                "image",
                format!(
                    "{}x{} is not a positive multiple of {BACKBONE_STRIDE}",
                    x.width(),
                    x.height()
                ),
            ));
        }
        Ok(())
    }

    /// Inference pass (batch norm uses running statistics).
    pub fn forward(&self, images: &Tensor) -> Result<HeadOutputs> {
        self.check_input(images)?;
        let trunk = self.backbone.forward(images)?;
        let seg = self.seg_head.forward(&trunk)?;
        let shared = self.det_shared.forward(&trunk)?;
        let mut outs = self
            .branches
            .iter()
            .map(|b| b.forward(&shared))
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        Ok(HeadOutputs {
            seg,
            objectness: outs.next().expect("4 branches"),
            class_scores: outs.next().expect("4 branches"),
            box_deltas: outs.next().expect("4 branches"),
            embeddings: outs.next().expect("4 branches"),
        })
    }

    /// Training pass: batch statistics, caches kept for [`Model::backward`].
    pub fn forward_train(&mut self, images: &Tensor) -> Result<HeadOutputs> {
        self.check_input(images)?;
        let trunk = self.backbone.forward_train(images)?;
        let seg = self.seg_head.forward_train(&trunk)?;
        let shared = self.det_shared.forward_train(&trunk)?;
        let mut outs = Vec::with_capacity(4);
        for b in &mut self.branches {
            outs.push(b.forward_train(&shared)?);
        }
        let mut outs = outs.into_iter();
        Ok(HeadOutputs {
            seg,
            objectness: outs.next().expect("4 branches"),
            class_scores: outs.next().expect("4 branches"),
            box_deltas: outs.next().expect("4 branches"),
            embeddings: outs.next().expect("4 branches"),
        })
    }

    /// Back-propagates head gradients, accumulating into every parameter's
    /// gradient slot. Returns the gradient with respect to the input images.
    pub fn backward(&mut self, grads: &HeadOutputs) -> Result<Tensor> {
        let mut d_shared: Option<Tensor> = None;
        for (branch, g) in self.branches.iter_mut().zip(grads.detection()) {
            let d = branch.backward(g)?;
            match &mut d_shared {
                Some(acc) => acc.add_assign(&d)?,
                None => d_shared = Some(d),
            }
        }
        let mut d_trunk = self
            .det_shared
            .backward(&d_shared.expect("4 branches"))?;
        d_trunk.add_assign(&self.seg_head.backward(&grads.seg)?)?;
        self.backbone.backward(&d_trunk)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.backbone.params(&mut out);
        self.seg_head.params(&mut out);
        self.det_shared.params(&mut out);
        for b in &self.branches {
            b.params(&mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        self.backbone.params_mut(&mut out);
        self.seg_head.params_mut(&mut out);
        self.det_shared.params_mut(&mut out);
        for b in &mut self.branches {
            b.params_mut(&mut out);
        }
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Sets every trainable parameter to zero.
    pub fn zero_weights(&mut self) {
        for p in self.params_mut().into_iter().filter(|p| p.trainable) {
            p.value.fill(0.0);
        }
    }

    /// Replaces parameter values by name; every parameter must be provided
    /// with a matching shape.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let by_name: std::collections::HashMap<&str, &Tensor> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let params = self.params_mut();
        if params.len() != tensors.len() {
            return Err(Error::shape("checkpoint tensor count", params.len(), tensors.len()));
        }
        for p in params {
            let t = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {}", p.name)))?;
            t.expect_shape("checkpoint tensor", p.value.shape())?;
            p.value = (*t).clone();
        }
        Ok(())
    }
}
