//! Training losses, uncertainty-based task weighting and the LR schedule.
//!
//! Every loss returns its value together with the analytic gradient with
//! respect to its raw inputs. Reductions are means over the contributing
//! elements; an empty contributing set yields a zero loss with zero gradient
//! and `contributing == 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::BoxDelta;

/// Scalar loss plus the gradient with respect to the loss inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Number of elements (or pairs) the mean was taken over.
    pub contributing: usize,
}

impl LossOutput {
    fn empty(len: usize) -> Self {
        LossOutput {
            value: 0.0,
            grad: vec![0.0; len],
            contributing: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.contributing == 0
    }
}

/// Placement of class scores inside a flat buffer.
///
/// Element `e = outer * inner + i` has its score for class `c` at
/// `(outer * classes + c) * inner + i`. `inner = 1` is the plain
/// element-major `[n][classes]` layout; an NCHW tensor with classes along the
/// channel axis uses `inner = H * W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassLayout {
    pub classes: usize,
    pub inner: usize,
}

impl ClassLayout {
    pub fn rows(classes: usize) -> Self {
        ClassLayout { classes, inner: 1 }
    }

    pub fn elements(&self, len: usize) -> usize {
        len / self.classes
    }

    #[inline]
    pub fn offset(&self, element: usize, class: usize) -> usize {
        let outer = element / self.inner;
        let i = element % self.inner;
        (outer * self.classes + class) * self.inner + i
    }

    fn check(&self, len: usize, targets: usize) -> Result<()> {
        if self.classes == 0 || self.inner == 0 || len % (self.classes * self.inner) != 0 {
            return Err(Error::shape("class layout", self, len));
        }
        if len / self.classes != targets {
            return Err(Error::shape("class targets", len / self.classes, targets));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 1.0,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::invalid("alpha", "must be > 0"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid("gamma", "must be >= 0"));
        }
        Ok(())
    }
}

/// Binary objectness target of one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objectness {
    Foreground,
    Background,
    DontCare,
}

/// Focal loss term `-α (1 - p)^γ ln p` for the probability of the true class.
pub fn focal_term(p_t: f64, params: &FocalParams) -> f64 {
    if p_t >= 1.0 {
        return 0.0;
    }
    -params.alpha * (1.0 - p_t).powf(params.gamma) * p_t.ln()
}

/// Focal loss over 2-way softmax logits (class 0 = background, 1 = foreground).
pub fn focal_loss(
    logits: &[f64],
    layout: ClassLayout,
    targets: &[Objectness],
    params: &FocalParams,
) -> Result<LossOutput> {
    params.validate()?;
    if layout.classes != 2 {
        return Err(Error::invalid("layout", "focal loss needs 2 classes"));
    }
    layout.check(logits.len(), targets.len())?;

    let mut out = LossOutput::empty(logits.len());
    let mut sum = 0.0;
    for (e, target) in targets.iter().enumerate() {
        let (t, o) = match target {
            Objectness::Foreground => (1, 0),
            Objectness::Background => (0, 1),
            Objectness::DontCare => continue,
        };
        let it = layout.offset(e, t);
        let io = layout.offset(e, o);
        let (zt, zo) = (logits[it], logits[io]);
        let m = zt.max(zo);
        let lse = m + ((zt - m).exp() + (zo - m).exp()).ln();
        let log_p = zt - lse;
        let p = log_p.exp();
        let q = (zo - lse).exp(); // 1 - p without cancellation
        let w = q.powf(params.gamma);
        sum += -params.alpha * w * log_p;
        // d/dz_t of -α q^γ ln p, using dp/dz_t = p q and dq/dz_t = -p q
        let g = params.alpha * w * (params.gamma * p * log_p - q);
        out.grad[it] = g;
        out.grad[io] = -g;
        out.contributing += 1;
    }
    if out.contributing > 0 {
        let n = out.contributing as f64;
        out.value = sum / n;
        out.grad.iter_mut().for_each(|g| *g /= n);
    }
    Ok(out)
}

/// Softmax cross-entropy; `None` targets are ignored.
pub fn cross_entropy(
    logits: &[f64],
    layout: ClassLayout,
    targets: &[Option<usize>],
) -> Result<LossOutput> {
    if layout.classes < 2 {
        return Err(Error::invalid("layout", "cross-entropy needs at least 2 classes"));
    }
    layout.check(logits.len(), targets.len())?;
    if let Some(bad) = targets.iter().flatten().find(|&&t| t >= layout.classes) {
        return Err(Error::invalid(
            "targets",
            format!("class id {bad} >= {}", layout.classes),
        ));
    }

    let c = layout.classes;
    let mut out = LossOutput::empty(logits.len());
    let mut sum = 0.0;
    let mut probs = vec![0.0; c];
    for (e, target) in targets.iter().enumerate() {
        let Some(t) = *target else { continue };
        let m = (0..c)
            .map(|k| logits[layout.offset(e, k)])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (k, p) in probs.iter_mut().enumerate() {
            *p = (logits[layout.offset(e, k)] - m).exp();
            z += *p;
        }
        sum += -(logits[layout.offset(e, t)] - m - z.ln());
        for (k, p) in probs.iter().enumerate() {
            out.grad[layout.offset(e, k)] = p / z - if k == t { 1.0 } else { 0.0 };
        }
        out.contributing += 1;
    }
    if out.contributing > 0 {
        let n = out.contributing as f64;
        out.value = sum / n;
        out.grad.iter_mut().for_each(|g| *g /= n);
    }
    Ok(out)
}

fn huber(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Smooth L1 over the four delta components, averaged over active anchors.
/// The gradient is with respect to `pred`.
pub fn smooth_l1(pred: &[BoxDelta], target: &[BoxDelta], active: &[bool]) -> Result<LossOutput> {
    if pred.len() != target.len() || pred.len() != active.len() {
        return Err(Error::shape(
            "smooth_l1 inputs",
            pred.len(),
            (target.len(), active.len()),
        ));
    }
    let mut out = LossOutput::empty(4 * pred.len());
    let mut sum = 0.0;
    for (i, ((p, t), &on)) in pred.iter().zip(target).zip(active).enumerate() {
        if !on {
            continue;
        }
        for (k, (pv, tv)) in p.to_array().into_iter().zip(t.to_array()).enumerate() {
            let (v, g) = huber(pv - tv);
            sum += v;
            out.grad[4 * i + k] = g;
        }
        out.contributing += 1;
    }
    if out.contributing > 0 {
        let n = out.contributing as f64;
        out.value = sum / n;
        out.grad.iter_mut().for_each(|g| *g /= n);
    }
    Ok(out)
}

/// Default hinge margin of [`contrastive_loss`].
pub const CONTRASTIVE_MARGIN: f64 = 1.0;

/// Pairwise contrastive loss over the embeddings of one image's active anchors.
///
/// `embeddings` is row-major `[n][dim]`. Same-instance pairs cost `d²`, other
/// pairs `max(0, margin - d)²`; the mean runs over all unordered pairs.
pub fn contrastive_loss(
    embeddings: &[f64],
    dim: usize,
    instance_ids: &[u32],
    margin: f64,
) -> Result<LossOutput> {
    if dim == 0 || embeddings.len() != dim * instance_ids.len() {
        return Err(Error::shape(
            "contrastive embeddings",
            dim * instance_ids.len(),
            embeddings.len(),
        ));
    }
    if !(margin > 0.0) {
        return Err(Error::invalid("margin", "must be > 0"));
    }
    let n = instance_ids.len();
    let mut out = LossOutput::empty(embeddings.len());
    if n < 2 {
        return Ok(out);
    }
    let mut sum = 0.0;
    let mut diff = vec![0.0; dim];
    for i in 0..n {
        for j in i + 1..n {
            let (ei, ej) = (
                &embeddings[i * dim..(i + 1) * dim],
                &embeddings[j * dim..(j + 1) * dim],
            );
            let mut d2 = 0.0;
            for k in 0..dim {
                diff[k] = ei[k] - ej[k];
                d2 += diff[k] * diff[k];
            }
            // scale applied to (e_i - e_j) for the gradient wrt e_i
            let scale = if instance_ids[i] == instance_ids[j] {
                sum += d2;
                2.0
            } else {
                let d = d2.sqrt();
                if d >= margin {
                    0.0
                } else {
                    sum += (margin - d) * (margin - d);
                    if d > 0.0 {
                        -2.0 * (margin - d) / d
                    } else {
                        0.0
                    }
                }
            };
            if scale != 0.0 {
                for k in 0..dim {
                    out.grad[i * dim + k] += scale * diff[k];
                    out.grad[j * dim + k] -= scale * diff[k];
                }
            }
        }
    }
    let pairs = n * (n - 1) / 2;
    out.contributing = pairs;
    let p = pairs as f64;
    out.value = sum / p;
    out.grad.iter_mut().for_each(|g| *g /= p);
    Ok(out)
}

/// Tasks weighted by the multi-task objective, in log-variance slot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Objectness,
    Class,
    Box,
    Embedding,
    Segmentation,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Objectness,
        Task::Class,
        Task::Box,
        Task::Embedding,
        Task::Segmentation,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Objectness => "objectness",
            Task::Class => "class",
            Task::Box => "box",
            Task::Embedding => "embedding",
            Task::Segmentation => "segmentation",
        }
    }
}

/// Learnable per-task log variances `s_k`, initialised to zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskUncertainty {
    pub log_vars: [f64; 5],
}

impl TaskUncertainty {
    pub fn get(&self, task: Task) -> f64 {
        self.log_vars[task.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KendallOutput {
    pub total: f64,
    /// `∂total/∂L_k = exp(-s_k)`.
    pub loss_weights: Vec<f64>,
    /// `∂total/∂s_k = -exp(-s_k) L_k + 1/2`.
    pub log_var_grads: Vec<f64>,
}

/// `Σ_k exp(-s_k) L_k + s_k / 2`.
pub fn kendall_total(losses: &[f64], log_vars: &[f64]) -> Result<KendallOutput> {
    if losses.len() != log_vars.len() {
        return Err(Error::shape("kendall inputs", losses.len(), log_vars.len()));
    }
    if let Some(bad) = losses.iter().chain(log_vars).find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("kendall input {bad}")));
    }
    let mut total = 0.0;
    let mut loss_weights = Vec::with_capacity(losses.len());
    let mut log_var_grads = Vec::with_capacity(losses.len());
    for (&l, &s) in losses.iter().zip(log_vars) {
        let w = (-s).exp();
        total += w * l + 0.5 * s;
        loss_weights.push(w);
        log_var_grads.push(-w * l + 0.5);
    }
    Ok(KendallOutput {
        total,
        loss_weights,
        log_var_grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub max_iter: u64,
    pub power: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: 0.001,
            max_iter: 300_000,
            power: 0.9,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("base_lr", "must be > 0"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter", "must be > 0"));
        }
        if !(self.power >= 0.0) {
            return Err(Error::invalid("power", "must be >= 0"));
        }
        Ok(())
    }
}

/// Polynomial decay `base_lr · (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: u64, sched: &LrSchedule) -> Result<f64> {
    sched.validate()?;
    if iter > sched.max_iter {
        return Err(Error::invalid(
            "iter",
            format!("{iter} exceeds max_iter {}", sched.max_iter),
        ));
    }
    let frac = 1.0 - iter as f64 / sched.max_iter as f64;
    Ok(sched.base_lr * frac.powf(sched.power))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn focal_examples() {
        let p = FocalParams::default();
        assert_eq!(focal_term(1.0, &p), 0.0);
        assert!((focal_term(0.5, &p) - 0.25 * LN_2).abs() < 1e-15);
        // equal logits give p = 0.5
        let out = focal_loss(&[0.3, 0.3], ClassLayout::rows(2), &[Objectness::Foreground], &p)
            .unwrap();
        assert!((out.value - 0.173_286_795_139_986_3).abs() < 1e-12);

        let out = focal_loss(
            &[1.0, -2.0, 0.5, 0.1],
            ClassLayout::rows(2),
            &[Objectness::DontCare; 2],
            &p,
        )
        .unwrap();
        assert!(out.is_empty());
        assert_eq!(out.value, 0.0);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn focal_rejects_wrong_layout() {
        let p = FocalParams::default();
        assert!(focal_loss(&[0.0; 6], ClassLayout::rows(3), &[Objectness::Background; 2], &p).is_err());
        assert!(focal_loss(&[0.0; 4], ClassLayout::rows(2), &[Objectness::Background; 3], &p).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let out = cross_entropy(&[1.0, 0.0, 0.0], ClassLayout::rows(3), &[Some(0)]).unwrap();
        assert!((out.value - 0.551_444_713_932_050_9).abs() < 1e-12);
        let out = cross_entropy(&[0.7; 5], ClassLayout::rows(5), &[Some(3)]).unwrap();
        assert!((out.value - 5f64.ln()).abs() < 1e-12);
        let out = cross_entropy(&[60.0, 0.0], ClassLayout::rows(2), &[Some(0)]).unwrap();
        assert!(out.value < 1e-25);
        assert!(cross_entropy(&[0.0, 0.0], ClassLayout::rows(2), &[Some(2)]).is_err());
        let ignored = cross_entropy(&[0.0, 1.0], ClassLayout::rows(2), &[None]).unwrap();
        assert!(ignored.is_empty());
    }

    #[test]
    fn cross_entropy_strided_layout() {
        // two spatial positions, classes along the channel axis
        let logits = [1.0, 0.0, 0.0, 2.0];
        let layout = ClassLayout { classes: 2, inner: 2 };
        let strided = cross_entropy(&logits, layout, &[Some(0), Some(1)]).unwrap();
        let rows = cross_entropy(&[1.0, 0.0, 0.0, 2.0], ClassLayout::rows(2), &[Some(0), Some(1)])
            .unwrap();
        assert!((strided.value - rows.value).abs() < 1e-15);
        assert_eq!(strided.grad[0], rows.grad[0]);
        assert_eq!(strided.grad[1], rows.grad[2]);
    }

    #[test]
    fn smooth_l1_examples() {
        let z = BoxDelta::ZERO;
        let half = BoxDelta { tx: 0.5, ..z };
        let two = BoxDelta { tw: 2.0, ..z };
        assert_eq!(smooth_l1(&[z], &[z], &[true]).unwrap().value, 0.0);
        assert_eq!(smooth_l1(&[half], &[z], &[true]).unwrap().value, 0.125);
        assert_eq!(smooth_l1(&[two], &[z], &[true]).unwrap().value, 1.5);
        let masked = smooth_l1(&[two, half], &[z, z], &[false, true]).unwrap();
        assert_eq!(masked.value, 0.125);
        assert_eq!(&masked.grad[..4], &[0.0; 4]);
        assert!(smooth_l1(&[z], &[z, z], &[true]).is_err());
    }

    #[test]
    fn contrastive_examples() {
        let same = contrastive_loss(&[0.3, 0.1, 0.3, 0.1], 2, &[4, 4], 1.0).unwrap();
        assert_eq!(same.value, 0.0);
        let far = contrastive_loss(&[0.0, 0.0, 3.0, 0.0], 2, &[1, 2], 1.0).unwrap();
        assert_eq!(far.value, 0.0);
        let near = contrastive_loss(&[0.0, 0.0, 0.5, 0.0], 2, &[1, 2], 1.0).unwrap();
        assert!((near.value - 0.25).abs() < 1e-15);
        let lone = contrastive_loss(&[1.0, 2.0], 2, &[1], 1.0).unwrap();
        assert!(lone.is_empty());
        assert!(contrastive_loss(&[1.0, 2.0, 3.0], 2, &[1, 2], 1.0).is_err());
    }

    #[test]
    fn kendall_examples() {
        let out = kendall_total(&[0.7, 1.3, 2.0], &[0.0; 3]).unwrap();
        assert_eq!(out.total, 0.7 + 1.3 + 2.0);
        let out = kendall_total(&[1.0], &[LN_2]).unwrap();
        assert!((out.total - (0.5 + LN_2 / 2.0)).abs() < 1e-15);
        let out = kendall_total(&[3.0], &[0.0]).unwrap();
        assert_eq!(out.log_var_grads[0], -3.0 + 0.5);
        assert!(kendall_total(&[f64::NAN], &[0.0]).is_err());
    }

    #[test]
    fn poly_lr_examples() {
        let s = LrSchedule::default();
        assert_eq!(poly_lr(0, &s).unwrap(), 0.001);
        assert_eq!(poly_lr(300_000, &s).unwrap(), 0.0);
        assert!((poly_lr(150_000, &s).unwrap() - 5.358_867_312_681_466e-4).abs() < 1e-15);
        assert!(poly_lr(300_001, &s).is_err());
    }
}
