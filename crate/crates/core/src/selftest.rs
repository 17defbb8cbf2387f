//! Independent reference implementations and randomized consistency checks.
//!
//! The oracles here are deliberately naive (direct loops, rule lists,
//! quadratic scans) and share no code with the modules they check beyond the
//! plain data types. They back both the test suites and `nnad selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assign::{assign_targets, AnchorState, AnchorTarget, AssignConfig, GroundTruthObject};
use crate::error::Result;
use crate::geom::{decode, encode, make_anchor_grid, AnchorGrid, AnchorTemplate, BBox, BoxDelta};
use crate::loss::{
    contrastive_loss, cross_entropy, focal_loss, kendall_total, smooth_l1, ClassLayout,
    FocalParams, Objectness, TaskUncertainty,
};
use crate::net::train::{multitask_loss, LossOptions, TrainSample};
use crate::net::{
    BatchNorm2d, BlockSpec, Conv2d, ConvOptions, DepthwiseSeparableConv, HeadOutputs, Layer,
    MaxPool2d, Model, ModelConfig, Param, Relu, ResidualBlock, Softmax, Tensor, TransposedConv2d,
};
use crate::post::{nms, Detection};

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Maximum accepted relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

// ---------------------------------------------------------------- oracles

/// IoU written out from the definition.
pub fn iou_reference(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let area = |r: &BBox| (r.x_max - r.x_min) * (r.y_max - r.y_min);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Oracle verdict for one anchor: its state and, when active, the gt index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleTarget {
    pub state: AnchorState,
    pub gt: Option<usize>,
}

/// Anchor assignment as an ordered rule list followed by the fallback pass.
pub fn assign_oracle(
    grid: &AnchorGrid,
    gts: &[GroundTruthObject],
    cfg: &AssignConfig,
) -> Vec<OracleTarget> {
    #[derive(Clone, Copy, PartialEq)]
    enum Why {
        Nothing,
        Border,
        Ambiguous,
        Match(usize),
        Band,
        Claimed(usize),
    }
    let boxes = grid.boxes();
    let mut why = vec![Why::Nothing; boxes.len()];
    for (a, anchor) in boxes.iter().enumerate() {
        if gts.is_empty() {
            continue;
        }
        let ious: Vec<f64> = gts.iter().map(|g| iou_reference(anchor, &g.bbox)).collect();
        let mut order: Vec<usize> = (0..gts.len()).collect();
        order.sort_by(|&i, &j| ious[j].total_cmp(&ious[i]).then(i.cmp(&j)));
        let best = order[0];
        let b1 = ious[best];
        let b2 = order.get(1).map_or(f64::NEG_INFINITY, |&j| ious[j]);
        let rules: [(bool, Why); 4] = [
            (grid.is_outside(a) && b1 >= cfg.dontcare_iou, Why::Border),
            (
                b1 >= cfg.dontcare_iou && b2 >= cfg.dontcare_iou && b1 - b2 < cfg.ambiguity_gap,
                Why::Ambiguous,
            ),
            (b1 > cfg.active_iou, Why::Match(best)),
            (b1 > cfg.dontcare_iou, Why::Band),
        ];
        why[a] = rules
            .iter()
            .find(|(hit, _)| *hit)
            .map_or(Why::Nothing, |&(_, w)| w);
    }
    for j in 0..gts.len() {
        if why.iter().any(|w| *w == Why::Match(j)) {
            continue;
        }
        let mut best = None;
        for (a, anchor) in boxes.iter().enumerate() {
            let v = iou_reference(anchor, &gts[j].bbox);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((a, v));
            }
        }
        if let Some((a, v)) = best {
            if v > cfg.dontcare_iou && matches!(why[a], Why::Nothing | Why::Band) {
                why[a] = Why::Claimed(j);
            }
        }
    }
    why.into_iter()
        .map(|w| match w {
            Why::Nothing | Why::Ambiguous => OracleTarget {
                state: AnchorState::Inactive,
                gt: None,
            },
            Why::Border | Why::Band => OracleTarget {
                state: AnchorState::DontCare,
                gt: None,
            },
            Why::Match(j) | Why::Claimed(j) => OracleTarget {
                state: AnchorState::Active,
                gt: Some(j),
            },
        })
        .collect()
}

/// Greedy NMS by repeated maximum search; returns kept input indices in keep order.
pub fn nms_oracle(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut alive = vec![true; dets.len()];
    let mut keep = Vec::new();
    loop {
        let mut top: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && top.is_none_or(|t| dets[i].objectness > dets[t].objectness) {
                top = Some(i);
            }
        }
        let Some(t) = top else { break };
        keep.push(t);
        alive[t] = false;
        for j in 0..dets.len() {
            if alive[j]
                && dets[j].class_id == dets[t].class_id
                && iou_reference(&dets[t].bbox, &dets[j].bbox) > iou_threshold
            {
                alive[j] = false;
            }
        }
    }
    keep
}

/// Direct-loop grouped convolution; weight `[out, in/groups, k, k]`.
pub fn conv2d_direct(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    dilation: usize,
    groups: usize,
) -> Tensor {
    let [n, cin, h, w] = x.shape();
    let [cout, cig, k, _] = weight.shape();
    let span = dilation * (k - 1) + 1;
    let oh = (h + 2 * padding - span) / stride + 1;
    let ow = (w + 2 * padding - span) / stride + 1;
    let cog = cout / groups;
    let mut y = Tensor::zeros([n, cout, oh, ow]);
    for b in 0..n {
        for o in 0..cout {
            let g = o / cog;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bt| bt.data()[o]);
                    for ci in 0..cig {
                        let c = g * cig + ci;
                        debug_assert!(c < cin);
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                                let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += weight.at(o, ci, ky, kx) * x.at(b, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    y.set(b, o, oy, ox, acc);
                }
            }
        }
    }
    y
}

/// Direct scatter form of a transposed convolution; weight `[in, out, k, k]`.
pub fn transposed_conv2d_direct(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Tensor {
    let [n, cin, h, w] = x.shape();
    let [_, cout, k, _] = weight.shape();
    let oh = (h - 1) * stride + k - 2 * padding;
    let ow = (w - 1) * stride + k - 2 * padding;
    let mut y = Tensor::zeros([n, cout, oh, ow]);
    for b in 0..n {
        for o in 0..cout {
            let bv = bias.map_or(0.0, |bt| bt.data()[o]);
            for oy in 0..oh {
                for ox in 0..ow {
                    y.set(b, o, oy, ox, bv);
                }
            }
        }
        for c in 0..cin {
            for iy in 0..h {
                for ix in 0..w {
                    let v = x.at(b, c, iy, ix);
                    for o in 0..cout {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = (iy * stride + ky) as isize - padding as isize;
                                let ox = (ix * stride + kx) as isize - padding as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let (oy, ox) = (oy as usize, ox as usize);
                                let cur = y.at(b, o, oy, ox);
                                y.set(b, o, oy, ox, cur + v * weight.at(c, o, ky, kx));
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

// ------------------------------------------------------- gradient checks

/// Gradient norms below this are finite-difference roundoff, not signal.
pub const ZERO_GRAD: f64 = 1e-7;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`. When both norms are below [`ZERO_GRAD`] the
/// gradient is zero up to roundoff and the absolute difference is returned.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < ZERO_GRAD {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Relative change between the two one-sided slopes above which a
/// coordinate is taken to straddle a kink (ReLU, max-pool switch).
pub const KINK_RATIO: f64 = 1e-4;
/// Largest fraction of kink-excluded coordinates a gradient check accepts.
pub const MAX_KINK_FRACTION: f64 = 0.05;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheck {
    /// Worst relative error over the checked tensors.
    pub error: f64,
    pub checked: usize,
    /// Coordinates excluded because a kink lies within one step.
    pub kinks: usize,
}

impl GradCheck {
    fn merge(&mut self, other: GradCheck) {
        self.error = self.error.max(other.error);
        self.checked += other.checked;
        self.kinks += other.kinks;
    }

    pub fn passed(&self) -> bool {
        self.error <= GRAD_TOLERANCE
            && (self.kinks as f64) <= MAX_KINK_FRACTION * (self.checked as f64)
    }
}

/// Central difference from `f(x + h)`, `f(x)` and `f(x − h)`, or `None`
/// when the one-sided slopes disagree.
fn central(lp: f64, l0: f64, lm: f64) -> Option<f64> {
    let (sp, sm) = ((lp - l0) / FD_STEP, (l0 - lm) / FD_STEP);
    let scale = sp.abs().max(sm.abs()).max(1.0);
    ((sp - sm).abs() <= KINK_RATIO * scale).then_some((lp - lm) / (2.0 * FD_STEP))
}

fn compare(
    analytic: &[f64],
    idx: &[usize],
    mut numeric: impl FnMut(usize) -> Result<Option<f64>>,
) -> Result<GradCheck> {
    let (mut ana, mut num) = (Vec::new(), Vec::new());
    let mut kinks = 0;
    for &i in idx {
        match numeric(i)? {
            Some(n) => {
                ana.push(analytic[i]);
                num.push(n);
            }
            None => kinks += 1,
        }
    }
    Ok(GradCheck {
        error: relative_error(&ana, &num),
        checked: idx.len(),
        kinks,
    })
}

fn coordinates(len: usize, max: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        rand::seq::index::sample(rng, len, max).into_vec()
    }
}

fn random_tensor(shape: [usize; 4], rng: &mut impl Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("sized")
}

/// Checks input and parameter gradients of `layer` under the scalar
/// objective `Σ r ⊙ layer(x)` for a random `r`, at most `max_coords`
/// coordinates per tensor.
pub fn check_layer(
    layer: &mut dyn Layer,
    x: &Tensor,
    max_coords: usize,
    rng: &mut impl Rng,
) -> Result<GradCheck> {
    let y = layer.forward_train(x)?;
    let r = random_tensor(y.shape(), rng);
    let l0 = y.dot(&r);
    {
        let mut ps = Vec::new();
        layer.params_mut(&mut ps);
        ps.into_iter().for_each(Param::zero_grad);
    }
    let dx = layer.backward(&r)?;
    let analytic_params: Vec<(bool, Tensor)> = {
        let mut ps = Vec::new();
        layer.params(&mut ps);
        ps.iter().map(|p| (p.trainable, p.grad.clone())).collect()
    };

    let objective = |layer: &mut dyn Layer, x: &Tensor| -> Result<f64> {
        Ok(layer.forward_train(x)?.dot(&r))
    };

    let idx = coordinates(x.len(), max_coords, rng);
    let mut xp = x.clone();
    let mut out = compare(dx.data(), &idx, |i| {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + FD_STEP;
        let lp = objective(layer, &xp)?;
        xp.data_mut()[i] = orig - FD_STEP;
        let lm = objective(layer, &xp)?;
        xp.data_mut()[i] = orig;
        Ok(central(lp, l0, lm))
    })?;

    for (k, (trainable, grad)) in analytic_params.iter().enumerate() {
        if !trainable {
            continue;
        }
        let idx = coordinates(grad.len(), max_coords, rng);
        let check = compare(grad.data(), &idx, |i| {
            let mut eval = |delta: f64| -> Result<f64> {
                let orig = {
                    let mut ps = Vec::new();
                    layer.params_mut(&mut ps);
                    let v = ps[k].value.data()[i];
                    ps[k].value.data_mut()[i] = v + delta;
                    v
                };
                let l = objective(layer, x);
                let mut ps = Vec::new();
                layer.params_mut(&mut ps);
                ps[k].value.data_mut()[i] = orig;
                l
            };
            let lp = eval(FD_STEP)?;
            let lm = eval(-FD_STEP)?;
            Ok(central(lp, l0, lm))
        })?;
        out.merge(check);
    }
    Ok(out)
}

/// Checks the gradient returned by `f` against central differences at `x`.
pub fn check_function(
    x: &[f64],
    max_coords: usize,
    rng: &mut impl Rng,
    f: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<GradCheck> {
    let (l0, grad) = f(x)?;
    let idx = coordinates(x.len(), max_coords, rng);
    let mut xp = x.to_vec();
    compare(&grad, &idx, |i| {
        let orig = xp[i];
        xp[i] = orig + FD_STEP;
        let lp = f(&xp)?.0;
        xp[i] = orig - FD_STEP;
        let lm = f(&xp)?.0;
        xp[i] = orig;
        Ok(central(lp, l0, lm))
    })
}

/// Names of the layer gradient cases.
pub const LAYER_CASES: [&str; 11] = [
    "conv2d",
    "conv2d-strided-dilated",
    "conv2d-grouped",
    "transposed-conv2d",
    "depthwise-separable",
    "maxpool2d",
    "relu",
    "batchnorm2d",
    "softmax",
    "residual-block",
    "model",
];

/// Names of the loss gradient cases.
pub const LOSS_CASES: [&str; 6] = [
    "focal",
    "cross-entropy",
    "smooth-l1",
    "contrastive",
    "kendall",
    "multitask",
];

const MAX_COORDS: usize = 40;

/// One randomized instance of a layer case.
pub fn layer_case(name: &str, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let h = 2 * rng.random_range(2..=4);
    let w = 2 * rng.random_range(2..=4);
    let x = random_tensor([n, c, h, w], &mut rng);
    let mut layer: Box<dyn Layer> = match name {
        "conv2d" => {
            let k = [1, 3][rng.random_range(0..2)];
            Box::new(Conv2d::new("c", c, rng.random_range(1..=3), k, ConvOptions::same(k, 1), &mut rng)?)
        }
        "conv2d-strided-dilated" => {
            let opts = ConvOptions {
                stride: rng.random_range(1..=2),
                padding: rng.random_range(0..=2),
                dilation: rng.random_range(1..=2),
                groups: 1,
                bias: rng.random_bool(0.5),
            };
            let x2 = random_tensor([n, c, rng.random_range(5..=8), rng.random_range(5..=8)], &mut rng);
            let mut l = Conv2d::new("c", c, 2, 3, opts, &mut rng)?;
            return check_layer(&mut l, &x2, MAX_COORDS, &mut rng);
        }
        "conv2d-grouped" => {
            let x2 = random_tensor([n, 2 * c, h, w], &mut rng);
            let mut l = Conv2d::new("c", 2 * c, 4, 3, ConvOptions::same(3, 1).groups(2), &mut rng)?;
            return check_layer(&mut l, &x2, MAX_COORDS, &mut rng);
        }
        "transposed-conv2d" => {
            let (k, s, p) = [(4, 2, 1), (3, 1, 1), (3, 2, 0)][rng.random_range(0..3)];
            Box::new(TransposedConv2d::new("t", c, 2, k, s, p, true, &mut rng)?)
        }
        "depthwise-separable" => Box::new(DepthwiseSeparableConv::new(
            "d",
            c,
            rng.random_range(1..=3),
            3,
            rng.random_range(1..=2),
            &mut rng,
        )?),
        "maxpool2d" => Box::new(MaxPool2d::new()),
        "relu" => Box::new(Relu::new()),
        "batchnorm2d" => {
            let x2 = random_tensor([2, c, h, w], &mut rng);
            let mut bn = BatchNorm2d::new("bn", c, 0.1)?;
            for (i, v) in bn.gamma.value.data_mut().iter_mut().enumerate() {
                *v = 0.5 + 0.3 * i as f64;
            }
            return check_layer(&mut bn, &x2, MAX_COORDS, &mut rng);
        }
        "softmax" => {
            let x2 = random_tensor([n, 2 * c, h, w], &mut rng);
            let mut s = Softmax::new(2);
            return check_layer(&mut s, &x2, MAX_COORDS, &mut rng);
        }
        "residual-block" => {
            let x2 = random_tensor([2, c, h, w], &mut rng);
            let out = rng.random_range(1..=3);
            let mut b = ResidualBlock::new("r", c, BlockSpec::new(out, rng.random_range(1..=2)), 0.1, &mut rng)?;
            return check_layer(&mut b, &x2, MAX_COORDS, &mut rng);
        }
        "model" => {
            let mut m = ModelLayer::tiny(seed)?;
            let x2 = random_tensor([2, 3, 16, 16], &mut rng);
            return check_layer(&mut m, &x2, 6, &mut rng);
        }
        other => {
            return Err(crate::Error::invalid("case", format!("unknown layer case `{other}`")))
        }
    };
    check_layer(layer.as_mut(), &x, MAX_COORDS, &mut rng)
}

/// A whole [`Model`] seen as one layer whose output is the five heads
/// flattened into a single row.
struct ModelLayer {
    model: Model,
    shapes: Vec<[usize; 4]>,
}

impl ModelLayer {
    fn tiny(seed: u64) -> Result<Self> {
        let mut cfg = ModelConfig::toy(3, 2, 2, 2);
        cfg.stem_channels = 4;
        cfg.stage1 = vec![BlockSpec::new(4, 1)];
        cfg.stage2 = vec![BlockSpec::new(6, 1), BlockSpec::new(6, 2)];
        cfg.seg_blocks = vec![BlockSpec::new(6, 2), BlockSpec::new(6, 1), BlockSpec::new(6, 1)];
        cfg.seg_upsample_channels = [4, 4, 4];
        cfg.det_shared = vec![BlockSpec::new(6, 2), BlockSpec::new(6, 1), BlockSpec::new(6, 1)];
        cfg.det_branch_channels = 4;
        let mut model = Model::new(cfg, seed)?;
        // Zero biases put ReLU inputs exactly on the kink wherever the
        // upstream activation is zero.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
        for p in model.params_mut() {
            if p.trainable && (p.name.ends_with(".bias") || p.name.ends_with(".beta")) {
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
            }
        }
        Ok(ModelLayer {
            model,
            shapes: Vec::new(),
        })
    }

    fn flatten(&mut self, h: HeadOutputs) -> Result<Tensor> {
        let parts = [h.seg, h.objectness, h.class_scores, h.box_deltas, h.embeddings];
        self.shapes = parts.iter().map(Tensor::shape).collect();
        let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::from_vec([1, 1, 1, data.len()], data)
    }
}

impl Layer for ModelLayer {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.model.forward(x)?;
        let data: Vec<f64> = [h.seg, h.objectness, h.class_scores, h.box_deltas, h.embeddings]
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        Tensor::from_vec([1, 1, 1, data.len()], data)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = self.model.forward_train(x)?;
        self.flatten(h)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut off = 0;
        let mut parts = Vec::with_capacity(5);
        for shape in &self.shapes {
            let len: usize = shape.iter().product();
            parts.push(Tensor::from_vec(*shape, grad.data()[off..off + len].to_vec())?);
            off += len;
        }
        let mut it = parts.into_iter();
        let mut next = || it.next().expect("five heads");
        let g = HeadOutputs {
            seg: next(),
            objectness: next(),
            class_scores: next(),
            box_deltas: next(),
            embeddings: next(),
        };
        self.model.backward(&g)
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.extend(self.model.params());
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.extend(self.model.params_mut());
    }
}

fn random_head_outputs(rng: &mut impl Rng, n: usize, t: usize, k: usize, e: usize, classes: usize) -> HeadOutputs {
    HeadOutputs {
        seg: random_tensor([n, classes, 4, 4], rng),
        objectness: random_tensor([n, 2 * t, 2, 2], rng),
        class_scores: random_tensor([n, k * t, 2, 2], rng),
        box_deltas: random_tensor([n, 4 * t, 2, 2], rng),
        embeddings: random_tensor([n, e * t, 2, 2], rng),
    }
}

fn random_delta(rng: &mut impl Rng) -> BoxDelta {
    BoxDelta::from_array(std::array::from_fn(|_| rng.random_range(-2.0..2.0)))
}

/// One randomized instance of a loss case.
pub fn loss_case(name: &str, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match name {
        "focal" => {
            let inner = rng.random_range(1..=4);
            let elems = inner * rng.random_range(1..=4);
            let logits: Vec<f64> = (0..2 * elems).map(|_| rng.random_range(-3.0..3.0)).collect();
            let targets: Vec<Objectness> = (0..elems)
                .map(|_| match rng.random_range(0..3) {
                    0 => Objectness::Foreground,
                    1 => Objectness::Background,
                    _ => Objectness::DontCare,
                })
                .collect();
            let params = FocalParams {
                alpha: rng.random_range(0.25..1.0),
                gamma: [0.0, 1.0, 2.0, 2.5][rng.random_range(0..4)],
            };
            let layout = ClassLayout { classes: 2, inner };
            check_function(&logits, MAX_COORDS, &mut rng, |l| {
                let o = focal_loss(l, layout, &targets, &params)?;
                Ok((o.value, o.grad))
            })
        }
        "cross-entropy" => {
            let classes = rng.random_range(2..=5);
            let inner = rng.random_range(1..=3);
            let elems = inner * rng.random_range(1..=4);
            let logits: Vec<f64> = (0..classes * elems).map(|_| rng.random_range(-3.0..3.0)).collect();
            let targets: Vec<Option<usize>> = (0..elems)
                .map(|_| rng.random_bool(0.8).then(|| rng.random_range(0..classes)))
                .collect();
            let layout = ClassLayout { classes, inner };
            check_function(&logits, MAX_COORDS, &mut rng, |l| {
                let o = cross_entropy(l, layout, &targets)?;
                Ok((o.value, o.grad))
            })
        }
        "smooth-l1" => {
            let n = rng.random_range(1..=6);
            let pred: Vec<f64> = (0..4 * n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let target: Vec<BoxDelta> = (0..n).map(|_| random_delta(&mut rng)).collect();
            let active: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
            check_function(&pred, MAX_COORDS, &mut rng, |p| {
                let pd: Vec<BoxDelta> = p
                    .chunks_exact(4)
                    .map(|c| BoxDelta::from_array([c[0], c[1], c[2], c[3]]))
                    .collect();
                let o = smooth_l1(&pd, &target, &active)?;
                Ok((o.value, o.grad))
            })
        }
        "contrastive" => {
            let dim = rng.random_range(1..=4);
            let n = rng.random_range(2..=6);
            let emb: Vec<f64> = (0..dim * n).map(|_| rng.random_range(-0.6..0.6)).collect();
            let ids: Vec<u32> = (0..n).map(|_| rng.random_range(1..=3)).collect();
            let margin = rng.random_range(0.5..1.5);
            check_function(&emb, MAX_COORDS, &mut rng, |e| {
                let o = contrastive_loss(e, dim, &ids, margin)?;
                Ok((o.value, o.grad))
            })
        }
        "kendall" => {
            let k = rng.random_range(1..=5);
            let x: Vec<f64> = (0..2 * k)
                .map(|i| if i < k { rng.random_range(0.0..3.0) } else { rng.random_range(-1.0..1.0) })
                .collect();
            check_function(&x, MAX_COORDS, &mut rng, |v| {
                let o = kendall_total(&v[..k], &v[k..])?;
                let mut g = o.loss_weights.clone();
                g.extend(&o.log_var_grads);
                Ok((o.total, g))
            })
        }
        "multitask" => {
            let (n, t, k, e, classes) = (
                rng.random_range(1..=2),
                rng.random_range(1..=2),
                rng.random_range(2..=3),
                rng.random_range(1..=3),
                rng.random_range(2..=4),
            );
            let out = random_head_outputs(&mut rng, n, t, k, e, classes);
            let anchors = 4 * t;
            let samples: Vec<TrainSample> = (0..n)
                .map(|_| {
                    let targets = (0..anchors)
                        .map(|_| match rng.random_range(0..4) {
                            0 => AnchorTarget::Inactive,
                            1 => AnchorTarget::DontCare,
                            _ => AnchorTarget::Active {
                                class_id: rng.random_range(0..k),
                                delta: random_delta(&mut rng),
                                instance_id: rng.random_range(1..=3),
                            },
                        })
                        .collect();
                    let labels = crate::eval::LabelMap::new(
                        4,
                        4,
                        (0..16)
                            .map(|_| if rng.random_bool(0.1) { 255 } else { rng.random_range(0..classes) as u8 })
                            .collect(),
                    )?;
                    TrainSample::new(Tensor::zeros([1, 3, 4, 4]), labels, targets)
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&TrainSample> = samples.iter().collect();
            let unc = TaskUncertainty {
                log_vars: std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
            };
            let flat = |h: &HeadOutputs| -> Vec<f64> {
                [&h.seg, &h.objectness, &h.class_scores, &h.box_deltas, &h.embeddings]
                    .iter()
                    .flat_map(|t| t.data().iter().copied())
                    .collect()
            };
            let unflat = |v: &[f64]| -> Result<HeadOutputs> {
                let mut h = out.clone();
                let mut off = 0;
                for t in [
                    &mut h.seg,
                    &mut h.objectness,
                    &mut h.class_scores,
                    &mut h.box_deltas,
                    &mut h.embeddings,
                ] {
                    let len = t.len();
                    t.data_mut().copy_from_slice(&v[off..off + len]);
                    off += len;
                }
                Ok(h)
            };
            check_function(&flat(&out), 4 * MAX_COORDS, &mut rng, |v| {
                let h = unflat(v)?;
                let l = multitask_loss(&h, &refs, &LossOptions::default(), &unc)?;
                Ok((l.total, flat(&l.head_grads)))
            })
        }
        other => Err(crate::Error::invalid("case", format!("unknown loss case `{other}`"))),
    }
}

// ------------------------------------------------------ randomized scenes

/// Random small assignment scene: grid ≤ 4×4 cells, ≤ 10 templates, ≤ 4 gts.
pub fn random_assign_scene(rng: &mut impl Rng) -> Result<(AnchorGrid, Vec<GroundTruthObject>)> {
    let stride = 8;
    let w = rng.random_range(1..=32);
    let h = rng.random_range(1..=32);
    let templates: Vec<AnchorTemplate> = (0..rng.random_range(1..=10))
        .map(|_| {
            AnchorTemplate::new(
                [0.25, 0.5, 1.0, 2.0, 4.0][rng.random_range(0..5)],
                [16.0, 32.0, 64.0, 128.0, 256.0, 512.0][rng.random_range(0..6)],
            )
        })
        .collect::<Result<_>>()?;
    let grid = make_anchor_grid(w, h, stride, &templates)?;
    let gts = (0..rng.random_range(0..=4))
        .map(|i| {
            let x0 = rng.random_range(-4..w as i32);
            let y0 = rng.random_range(-4..h as i32);
            let bw = rng.random_range(1..=24);
            let bh = rng.random_range(1..=24);
            GroundTruthObject::new(
                rng.random_range(0..2),
                BBox::new(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64),
                i as u32 + 1,
            )
        })
        .collect();
    Ok((grid, gts))
}

/// Number of anchors where `assign_targets` and the oracle disagree.
pub fn assign_mismatches(grid: &AnchorGrid, gts: &[GroundTruthObject]) -> Result<usize> {
    let cfg = AssignConfig::default();
    let (w, h) = grid.image_size();
    let got = assign_targets(grid, gts, w, h, &cfg)?;
    let want = assign_oracle(grid, gts, &cfg);
    Ok(got
        .iter()
        .zip(&want)
        .filter(|(g, o)| {
            let gt = match g {
                AnchorTarget::Active { instance_id, .. } => {
                    gts.iter().position(|x| x.instance_id == *instance_id)
                }
                _ => None,
            };
            g.state() != o.state || gt != o.gt
        })
        .count())
}

/// Random detections: 3 classes, boxes inside a 100×100 canvas.
pub fn random_detections(rng: &mut impl Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|i| {
            let x0 = rng.random_range(0.0..80.0);
            let y0 = rng.random_range(0.0..80.0);
            Detection {
                bbox: BBox::new(
                    x0,
                    y0,
                    x0 + rng.random_range(2.0..30.0),
                    y0 + rng.random_range(2.0..30.0),
                ),
                class_id: rng.random_range(0..3),
                objectness: rng.random_range(0.0..1.0),
                class_score: 1.0,
                embedding: Vec::new(),
                anchor_index: i,
            }
        })
        .collect()
}

/// Whether `nms` keeps exactly the oracle's detections in the same order.
pub fn nms_agrees(dets: &[Detection], iou_threshold: f64) -> bool {
    let got: Vec<usize> = nms(dets, iou_threshold)
        .iter()
        .map(|d| d.anchor_index)
        .collect();
    got == nms_oracle(dets, iou_threshold)
}

/// Random anchor / gt pair with sides in `[1, 300)`.
pub fn random_box_pair(rng: &mut impl Rng) -> (BBox, BBox) {
    let mut b = || {
        let x = rng.random_range(-100.0..100.0);
        let y = rng.random_range(-100.0..100.0);
        BBox::new(x, y, x + rng.random_range(1.0..300.0), y + rng.random_range(1.0..300.0))
    };
    (b(), b())
}

/// Largest coordinate error of `decode(anchor, encode(anchor, gt))`.
pub fn codec_error(anchor: &BBox, gt: &BBox) -> Result<f64> {
    let back = decode(anchor, &encode(anchor, gt)?);
    Ok([
        back.x_min - gt.x_min,
        back.y_min - gt.y_min,
        back.x_max - gt.x_max,
        back.y_max - gt.y_max,
    ]
    .iter()
    .fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Largest deviation between the layer convolutions and the direct oracles.
pub fn conv_oracle_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = rng.random_range(1..=2);
    let c = groups * rng.random_range(1..=2);
    let x = random_tensor([2, c, rng.random_range(5..=9), rng.random_range(5..=9)], &mut rng);
    let opts = ConvOptions {
        stride: rng.random_range(1..=2),
        padding: rng.random_range(0..=2),
        dilation: rng.random_range(1..=2),
        groups,
        bias: true,
    };
    let mut conv = Conv2d::new("c", c, 2 * groups, 3, opts, &mut rng)?;
    if let Some(b) = &mut conv.bias {
        b.value = random_tensor(b.value.shape(), &mut rng);
    }
    let y = conv.forward(&x)?;
    let r = conv2d_direct(
        &x,
        &conv.weight.value,
        conv.bias.as_ref().map(|b| &b.value),
        opts.stride,
        opts.padding,
        opts.dilation,
        groups,
    );
    let mut worst = max_abs_diff(&y, &r);

    let mut up = TransposedConv2d::new("t", c, 3, 4, 2, 1, true, &mut rng)?;
    if let Some(b) = &mut up.bias {
        b.value = random_tensor(b.value.shape(), &mut rng);
    }
    let y = up.forward(&x)?;
    let r = transposed_conv2d_direct(&x, &up.weight.value, up.bias.as_ref().map(|b| &b.value), 2, 1);
    worst = worst.max(max_abs_diff(&y, &r));
    Ok(worst)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

// ---------------------------------------------------------------- driver

fn summarize(name: &str, errors: Result<Vec<f64>>, tol: f64) -> CheckResult {
    match errors {
        Ok(e) => {
            let worst = e.iter().copied().fold(0.0f64, f64::max);
            CheckResult::new(
                name,
                worst <= tol,
                format!("{} instances, worst error {worst:.3e} (tolerance {tol:.0e})", e.len()),
            )
        }
        Err(err) => CheckResult::new(name, false, err.to_string()),
    }
}

fn summarize_gradients(name: &str, checks: Result<Vec<GradCheck>>) -> CheckResult {
    let name = format!("gradient/{name}");
    match checks {
        Ok(c) => {
            let failed = c.iter().filter(|g| !g.passed()).count();
            let mut total = GradCheck::default();
            c.iter().for_each(|g| total.merge(*g));
            CheckResult::new(
                name,
                failed == 0,
                format!(
                    "{} instances, worst error {:.3e} (tolerance {GRAD_TOLERANCE:.0e}), {} of {} coordinates at kinks",
                    c.len(),
                    total.error,
                    total.kinks,
                    total.checked
                ),
            )
        }
        Err(err) => CheckResult::new(name, false, err.to_string()),
    }
}

/// Runs every check. `quick` shrinks the randomized case counts.
pub fn run_all(quick: bool) -> Vec<CheckResult> {
    let grad_instances: u64 = if quick { 5 } else { 20 };
    let scenes = if quick { 100 } else { 1000 };
    let pairs = if quick { 1000 } else { 10_000 };
    let mut out = Vec::new();

    for name in LAYER_CASES {
        let checks = (0..grad_instances).map(|s| layer_case(name, s)).collect();
        out.push(summarize_gradients(name, checks));
    }
    for name in LOSS_CASES {
        let checks = (0..grad_instances).map(|s| loss_case(name, s)).collect();
        out.push(summarize_gradients(name, checks));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0xA551);
    let assign: Result<Vec<f64>> = (0..scenes)
        .map(|_| {
            let (grid, gts) = random_assign_scene(&mut rng)?;
            Ok(assign_mismatches(&grid, &gts)? as f64)
        })
        .collect();
    out.push(summarize("oracle/assign", assign, 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(0x4E35);
    let nms_ok: Vec<f64> = (0..scenes)
        .map(|_| {
            let dets = random_detections(&mut rng, 50);
            let thr = rng.random_range(0.3..0.7);
            if nms_agrees(&dets, thr) { 0.0 } else { 1.0 }
        })
        .collect();
    out.push(summarize("oracle/nms", Ok(nms_ok), 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DE);
    let codec: Result<Vec<f64>> = (0..pairs)
        .map(|_| {
            let (a, g) = random_box_pair(&mut rng);
            codec_error(&a, &g)
        })
        .collect();
    out.push(summarize("codec/roundtrip", codec, 1e-9));

    let conv: Result<Vec<f64>> = (0..20).map(conv_oracle_error).collect();
    out.push(summarize("oracle/conv", conv, 1e-10));
    out
}
