//! Multi-task objective and the toy training loop.

use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::model::{HeadOutputs, Model};
use super::tensor::{Param, Tensor};
use crate::assign::AnchorTarget;
use crate::error::{Error, Result};
use crate::eval::{LabelMap, IGNORE_ID};
use crate::geom::BoxDelta;
use crate::loss::{
    contrastive_loss, cross_entropy, focal_loss, kendall_total, poly_lr, smooth_l1, ClassLayout,
    FocalParams, LrSchedule, Objectness, Task, TaskUncertainty, CONTRASTIVE_MARGIN,
};

/// One training image with its dense labels and per-anchor targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// `1 × C × H × W`
    pub image: Tensor,
    pub labels: LabelMap,
    pub targets: Vec<AnchorTarget>,
}

impl TrainSample {
    pub fn new(image: Tensor, labels: LabelMap, targets: Vec<AnchorTarget>) -> Result<Self> {
        if image.batch() != 1 {
            return Err(Error::shape("sample batch", 1, image.batch()));
        }
        if (labels.width(), labels.height()) != (image.width(), image.height()) {
            return Err(Error::shape(
                "sample labels",
                (image.width(), image.height()),
                (labels.width(), labels.height()),
            ));
        }
        Ok(TrainSample {
            image,
            labels,
            targets,
        })
    }
}

/// Which task losses enter the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSet {
    pub objectness: bool,
    pub class: bool,
    #[serde(rename = "box")]
    pub boxes: bool,
    pub embedding: bool,
    pub segmentation: bool,
}

impl Default for TaskSet {
    fn default() -> Self {
        TaskSet {
            objectness: true,
            class: true,
            boxes: true,
            embedding: true,
            segmentation: true,
        }
    }
}

impl TaskSet {
    pub fn contains(&self, task: Task) -> bool {
        match task {
            Task::Objectness => self.objectness,
            Task::Class => self.class,
            Task::Box => self.boxes,
            Task::Embedding => self.embedding,
            Task::Segmentation => self.segmentation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossOptions {
    pub focal: FocalParams,
    pub contrastive_margin: f64,
    pub tasks: TaskSet,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            focal: FocalParams::default(),
            contrastive_margin: CONTRASTIVE_MARGIN,
            tasks: TaskSet::default(),
        }
    }
}

/// Value and head gradients of the uncertainty-weighted objective.
#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskLoss {
    /// Per-task mean loss; `None` if disabled or nothing contributed.
    pub losses: [Option<f64>; 5],
    pub total: f64,
    pub head_grads: HeadOutputs,
    pub log_var_grads: [f64; 5],
}

/// Evaluates every enabled task on a batch of head outputs.
///
/// Detection tensors use the per-template channel layout of [`Model`]; anchor
/// `a = (row · cols + col) · T + t` of image `n` lives at cell `row · cols + col`
/// of template `t`.
pub fn multitask_loss(
    outputs: &HeadOutputs,
    samples: &[&TrainSample],
    opts: &LossOptions,
    uncertainty: &TaskUncertainty,
) -> Result<MultitaskLoss> {
    let n = outputs.objectness.batch();
    if samples.len() != n {
        return Err(Error::shape("batch samples", n, samples.len()));
    }
    let t = outputs.objectness.channels() / 2;
    let hw = outputs.objectness.plane_len();
    let anchors = t * hw;
    for s in samples {
        if s.targets.len() != anchors {
            return Err(Error::shape("anchor targets", anchors, s.targets.len()));
        }
    }
    let elems = n * anchors;
    let anchor_of = |e: usize| -> (usize, usize) {
        let (outer, i) = (e / hw, e % hw);
        (outer / t, i * t + outer % t)
    };

    let mut grads = HeadOutputs::zeros_like(outputs);
    let mut losses: [Option<f64>; 5] = [None; 5];

    if opts.tasks.objectness {
        let targets: Vec<Objectness> = (0..elems)
            .map(|e| {
                let (img, a) = anchor_of(e);
                match samples[img].targets[a] {
                    AnchorTarget::Inactive => Objectness::Background,
                    AnchorTarget::DontCare => Objectness::DontCare,
                    AnchorTarget::Active { .. } => Objectness::Foreground,
                }
            })
            .collect();
        let out = focal_loss(
            outputs.objectness.data(),
            ClassLayout { classes: 2, inner: hw },
            &targets,
            &opts.focal,
        )?;
        if !out.is_empty() {
            losses[Task::Objectness.index()] = Some(out.value);
            grads.objectness.data_mut().copy_from_slice(&out.grad);
        }
    }

    let k = if t > 0 { outputs.class_scores.channels() / t } else { 0 };
    if opts.tasks.class && k >= 2 {
        let targets: Vec<Option<usize>> = (0..elems)
            .map(|e| {
                let (img, a) = anchor_of(e);
                match samples[img].targets[a] {
                    AnchorTarget::Active { class_id, .. } => Some(class_id),
                    _ => None,
                }
            })
            .collect();
        if let Some(bad) = targets.iter().flatten().find(|&&c| c >= k) {
            return Err(Error::invalid("class target", format!("class {bad} >= {k}")));
        }
        let out = cross_entropy(
            outputs.class_scores.data(),
            ClassLayout { classes: k, inner: hw },
            &targets,
        )?;
        if !out.is_empty() {
            losses[Task::Class.index()] = Some(out.value);
            grads.class_scores.data_mut().copy_from_slice(&out.grad);
        }
    }

    if opts.tasks.boxes {
        let layout = ClassLayout { classes: 4, inner: hw };
        let data = outputs.box_deltas.data();
        let mut pred = Vec::with_capacity(elems);
        let mut target = Vec::with_capacity(elems);
        let mut active = Vec::with_capacity(elems);
        for e in 0..elems {
            pred.push(BoxDelta::from_array(std::array::from_fn(|c| {
                data[layout.offset(e, c)]
            })));
            let (img, a) = anchor_of(e);
            match samples[img].targets[a] {
                AnchorTarget::Active { delta, .. } => {
                    target.push(delta);
                    active.push(true);
                }
                _ => {
                    target.push(BoxDelta::ZERO);
                    active.push(false);
                }
            }
        }
        let out = smooth_l1(&pred, &target, &active)?;
        if !out.is_empty() {
            losses[Task::Box.index()] = Some(out.value);
            let g = grads.box_deltas.data_mut();
            for e in 0..elems {
                for c in 0..4 {
                    g[layout.offset(e, c)] = out.grad[4 * e + c];
                }
            }
        }
    }

    let dim = if t > 0 { outputs.embeddings.channels() / t } else { 0 };
    if opts.tasks.embedding && dim > 0 {
        let layout = ClassLayout { classes: dim, inner: hw };
        let data = outputs.embeddings.data();
        let mut per_image = Vec::new();
        for (img, s) in samples.iter().enumerate() {
            let mut elements = Vec::new();
            let mut ids = Vec::new();
            for (a, target) in s.targets.iter().enumerate() {
                if let AnchorTarget::Active { instance_id, .. } = target {
                    elements.push(img * anchors + (a % t) * hw + a / t);
                    ids.push(*instance_id);
                }
            }
            let flat: Vec<f64> = elements
                .iter()
                .flat_map(|&e| (0..dim).map(move |c| data[layout.offset(e, c)]))
                .collect();
            let out = contrastive_loss(&flat, dim, &ids, opts.contrastive_margin)?;
            if !out.is_empty() {
                per_image.push((elements, out));
            }
        }
        if !per_image.is_empty() {
            let m = per_image.len() as f64;
            losses[Task::Embedding.index()] =
                Some(per_image.iter().map(|(_, o)| o.value).sum::<f64>() / m);
            let g = grads.embeddings.data_mut();
            for (elements, out) in &per_image {
                for (row, &e) in elements.iter().enumerate() {
                    for c in 0..dim {
                        g[layout.offset(e, c)] += out.grad[row * dim + c] / m;
                    }
                }
            }
        }
    }

    if opts.tasks.segmentation {
        let classes = outputs.seg.channels();
        let plane = outputs.seg.plane_len();
        let mut targets = Vec::with_capacity(n * plane);
        for s in samples {
            if s.labels.data().len() != plane {
                return Err(Error::shape("label map", plane, s.labels.data().len()));
            }
            for &v in s.labels.data() {
                targets.push(match v {
                    IGNORE_ID => None,
                    v if (v as usize) < classes => Some(v as usize),
                    v => {
                        return Err(Error::invalid(
                            "label map",
                            format!("class id {v} >= {classes}"),
                        ))
                    }
                });
            }
        }
        let out = cross_entropy(
            outputs.seg.data(),
            ClassLayout { classes, inner: plane },
            &targets,
        )?;
        if !out.is_empty() {
            losses[Task::Segmentation.index()] = Some(out.value);
            grads.seg.data_mut().copy_from_slice(&out.grad);
        }
    }

    let present: Vec<usize> = (0..5).filter(|&i| losses[i].is_some()).collect();
    let kendall = kendall_total(
        &present.iter().map(|&i| losses[i].unwrap_or(0.0)).collect::<Vec<_>>(),
        &present.iter().map(|&i| uncertainty.log_vars[i]).collect::<Vec<_>>(),
    )?;
    let mut log_var_grads = [0.0; 5];
    for (slot, &i) in present.iter().enumerate() {
        log_var_grads[i] = kendall.log_var_grads[slot];
        let w = kendall.loss_weights[slot];
        let g = match Task::ALL[i] {
            Task::Objectness => &mut grads.objectness,
            Task::Class => &mut grads.class_scores,
            Task::Box => &mut grads.box_deltas,
            Task::Embedding => &mut grads.embeddings,
            Task::Segmentation => &mut grads.seg,
        };
        g.data_mut().iter_mut().for_each(|v| *v *= w);
    }
    Ok(MultitaskLoss {
        losses,
        total: kendall.total,
        head_grads: grads,
        log_var_grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub iterations: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub loss: LossOptions,
    /// Learn the task log variances; otherwise they stay at zero.
    #[serde(default = "yes")]
    pub learn_uncertainty: bool,
}

fn yes() -> bool {
    true
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.loss.focal.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if self.iterations > self.schedule.max_iter {
            return Err(Error::invalid(
                "iterations",
                format!(
                    "{} exceeds schedule max_iter {}",
                    self.iterations, self.schedule.max_iter
                ),
            ));
        }
        if !(self.loss.contrastive_margin > 0.0) {
            return Err(Error::invalid("contrastive_margin", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub lr: f64,
    pub losses: [Option<f64>; 5],
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<IterationRecord>,
    pub uncertainty: TaskUncertainty,
}

impl TrainReport {
    /// Loss history as CSV: `iteration,lr,objectness,class,box,embedding,segmentation,total`.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        write!(out, "iteration,lr")?;
        for task in Task::ALL {
            write!(out, ",{}", task.name())?;
        }
        writeln!(out, ",total")?;
        for r in &self.history {
            write!(out, "{},{}", r.iteration, r.lr)?;
            for l in r.losses {
                match l {
                    Some(v) => write!(out, ",{v}")?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(out, ",{}", r.total)?;
        }
        Ok(())
    }
}

/// Trains `model` in place on `dataset`, cycling through it in order: sample
/// `j` of iteration `i` is `dataset[(i · batch_size + j) % len]`.
pub fn train_toy(
    dataset: &[TrainSample],
    model: &mut Model,
    opts: &TrainOptions,
    mut on_iteration: impl FnMut(&IterationRecord),
) -> Result<TrainReport> {
    opts.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("dataset", "no training samples"));
    }
    let mut adam = AdamState::new();
    let mut s_adam = AdamState::new();
    let mut log_vars = Param::new("uncertainty", Tensor::zeros([1, 1, 1, 5]));
    let mut history = Vec::with_capacity(opts.iterations as usize);

    for it in 0..opts.iterations {
        let lr = poly_lr(it, &opts.schedule)?;
        let batch: Vec<&TrainSample> = (0..opts.batch_size)
            .map(|j| &dataset[(it as usize * opts.batch_size + j) % dataset.len()])
            .collect();
        let images = Tensor::stack(&batch.iter().map(|s| &s.image).collect::<Vec<_>>())?;

        model.zero_grad();
        let outputs = model.forward_train(&images)?;
        if !outputs.is_finite() {
            return Err(Error::NonFinite(format!("head outputs at iteration {it}")));
        }
        let uncertainty = TaskUncertainty {
            log_vars: std::array::from_fn(|i| log_vars.value.data()[i]),
        };
        let loss = multitask_loss(&outputs, &batch, &opts.loss, &uncertainty)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {it}")));
        }
        model.backward(&loss.head_grads)?;
        adam_step(&mut model.params_mut(), &mut adam, lr)?;
        if opts.learn_uncertainty {
            log_vars.grad.data_mut().copy_from_slice(&loss.log_var_grads);
            adam_step(&mut [&mut log_vars], &mut s_adam, lr)?;
        }

        let record = IterationRecord {
            iteration: it,
            lr,
            losses: loss.losses,
            total: loss.total,
        };
        on_iteration(&record);
        history.push(record);
    }
    Ok(TrainReport {
        history,
        uncertainty: TaskUncertainty {
            log_vars: std::array::from_fn(|i| log_vars.value.data()[i]),
        },
    })
}
