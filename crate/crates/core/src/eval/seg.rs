//! Segmentation IoU and instance-weighted iIoU.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::ClassTable;

/// Label value excluded from every segmentation statistic.
pub const IGNORE_ID: u8 = 255;

/// Dense per-pixel class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("label map", width * height, data.len()));
        }
        Ok(LabelMap {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, id: u8) -> Self {
        LabelMap {
            width,
            height,
            data: vec![id; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, id: u8) {
        self.data[y * self.width + x] = id;
    }

    /// Checks every id is below `num_classes` or [`IGNORE_ID`].
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&v| v != IGNORE_ID && v as usize >= num_classes)
        {
            Some(v) => Err(Error::invalid(
                "label map",
                format!("class id {v} >= {num_classes}"),
            )),
            None => Ok(()),
        }
    }

    pub fn count(&self, id: u8) -> usize {
        self.data.iter().filter(|&&v| v == id).count()
    }
}

/// Per-pixel instance ids; 0 means "no instance".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    width: usize,
    height: usize,
    data: Vec<u16>,
}

impl InstanceMap {
    pub fn new(width: usize, height: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("instance map", width * height, data.len()));
        }
        Ok(InstanceMap {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        InstanceMap {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn set(&mut self, x: usize, y: usize, id: u16) {
        self.data[y * self.width + x] = id;
    }
}

/// `classes × classes` pixel counts, entry `(gt, pred)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion merge", self.classes, other.classes));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Fraction of counted pixels on the diagonal.
    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (0..self.classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64)
    }

    /// `(tp, fp, fn)` of one class.
    pub fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let fp = (0..self.classes).map(|g| self.get(g, c)).sum::<u64>() - tp;
        let fneg = (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() - tp;
        (tp, fp, fneg)
    }

    /// Collapses classes into groups: `mapping[class] = group`.
    fn grouped(&self, mapping: &[usize], groups: usize) -> ConfusionMatrix {
        let mut out = ConfusionMatrix::new(groups);
        for g in 0..self.classes {
            for p in 0..self.classes {
                out.counts[mapping[g] * groups + mapping[p]] += self.get(g, p);
            }
        }
        out
    }
}

/// Pixel confusion between a prediction and the ground truth; ignored gt pixels are skipped.
pub fn seg_confusion(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<ConfusionMatrix> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::shape(
            "label map size",
            (gt.width, gt.height),
            (pred.width, pred.height),
        ));
    }
    gt.validate(num_classes)?;
    let mut m = ConfusionMatrix::new(num_classes);
    for (&g, &p) in gt.data.iter().zip(&pred.data) {
        if g == IGNORE_ID {
            continue;
        }
        if p as usize >= num_classes {
            return Err(Error::invalid(
                "prediction",
                format!("class id {p} >= {num_classes}"),
            ));
        }
        m.counts[g as usize * num_classes + p as usize] += 1;
    }
    Ok(m)
}

/// Pixel statistics of one ground-truth instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub class_id: usize,
    pub size: u64,
    /// Instance pixels predicted as the instance's class.
    pub true_positive: u64,
    /// Instance pixels predicted as any class of the same category.
    pub category_true_positive: u64,
}

/// Collects per-instance statistics for the instanceable classes of `table`.
pub fn instance_records(
    pred: &LabelMap,
    gt: &LabelMap,
    instances: &InstanceMap,
    table: &ClassTable,
) -> Result<Vec<InstanceRecord>> {
    if (instances.width, instances.height) != (gt.width, gt.height)
        || (pred.width, pred.height) != (gt.width, gt.height)
    {
        return Err(Error::shape(
            "instance map size",
            (gt.width, gt.height),
            (instances.width, instances.height),
        ));
    }
    let category = table.category_index();
    let mut by_key: BTreeMap<(u16, usize), InstanceRecord> = BTreeMap::new();
    for i in 0..gt.data.len() {
        let (id, g, p) = (instances.data[i], gt.data[i], pred.data[i]);
        if id == 0 || g == IGNORE_ID || !table.is_instanceable(g as usize) {
            continue;
        }
        let c = g as usize;
        let r = by_key.entry((id, c)).or_insert(InstanceRecord {
            class_id: c,
            size: 0,
            true_positive: 0,
            category_true_positive: 0,
        });
        r.size += 1;
        if p == g {
            r.true_positive += 1;
        }
        if (p as usize) < category.len() && category[p as usize] == category[c] {
            r.category_true_positive += 1;
        }
    }
    Ok(by_key.into_values().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub name: String,
    /// Absent when the class appears in neither prediction nor ground truth.
    pub iou: Option<f64>,
    /// Absent for non-instance classes or when no instance was annotated.
    pub iiou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub classes: Vec<ClassScore>,
    pub categories: Vec<ClassScore>,
    pub mean_iou: Option<f64>,
    pub mean_iiou: Option<f64>,
    pub category_mean_iou: Option<f64>,
    pub category_mean_iiou: Option<f64>,
    pub pixel_accuracy: Option<f64>,
}

fn iou_of(tp: u64, fp: u64, fneg: u64) -> Option<f64> {
    let denom = tp + fp + fneg;
    (denom > 0).then(|| tp as f64 / denom as f64)
}

/// `iTP / (iTP + FP + iFN)` with instance pixels weighted by `avg_size / size`.
fn iiou_of<'a>(
    records: impl Iterator<Item = &'a InstanceRecord> + Clone,
    fp: u64,
    tp_of: impl Fn(&InstanceRecord) -> u64,
) -> Option<f64> {
    let (count, total) = records
        .clone()
        .fold((0u64, 0u64), |(n, s), r| (n + 1, s + r.size));
    if count == 0 {
        return None;
    }
    let avg = total as f64 / count as f64;
    let (mut itp, mut ifn) = (0.0, 0.0);
    for r in records {
        let w = avg / r.size as f64;
        let tp = tp_of(r);
        itp += w * tp as f64;
        ifn += w * (r.size - tp) as f64;
    }
    let denom = itp + fp as f64 + ifn;
    (denom > 0.0).then(|| itp / denom)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-class and per-category IoU / iIoU from a dataset-wide confusion matrix
/// and the dataset's instance records.
pub fn seg_metrics(
    confusion: &ConfusionMatrix,
    instances: &[InstanceRecord],
    table: &ClassTable,
) -> Result<SegMetrics> {
    if confusion.classes() != table.num_classes() {
        return Err(Error::shape(
            "confusion classes",
            table.num_classes(),
            confusion.classes(),
        ));
    }
    let classes: Vec<ClassScore> = (0..confusion.classes())
        .map(|c| {
            let (tp, fp, fneg) = confusion.class_counts(c);
            let iiou = if table.is_instanceable(c) {
                iiou_of(
                    instances.iter().filter(|r| r.class_id == c),
                    fp,
                    |r| r.true_positive,
                )
            } else {
                None
            };
            ClassScore {
                name: table.name(c).to_string(),
                iou: iou_of(tp, fp, fneg),
                iiou,
            }
        })
        .collect();

    let mapping = table.category_index();
    let names = table.category_names();
    let grouped = confusion.grouped(&mapping, names.len());
    let categories: Vec<ClassScore> = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let (tp, fp, fneg) = grouped.class_counts(k);
            let has_instances = (0..table.num_classes())
                .any(|c| mapping[c] == k && table.is_instanceable(c));
            let iiou = if has_instances {
                iiou_of(
                    instances.iter().filter(|r| mapping[r.class_id] == k),
                    fp,
                    |r| r.category_true_positive,
                )
            } else {
                None
            };
            ClassScore {
                name: name.clone(),
                iou: iou_of(tp, fp, fneg),
                iiou,
            }
        })
        .collect();

    Ok(SegMetrics {
        mean_iou: mean(classes.iter().map(|c| c.iou)),
        mean_iiou: mean(classes.iter().map(|c| c.iiou)),
        category_mean_iou: mean(categories.iter().map(|c| c.iou)),
        category_mean_iiou: mean(categories.iter().map(|c| c.iiou)),
        pixel_accuracy: confusion.pixel_accuracy(),
        classes,
        categories,
    })
}

/// Accumulates confusion and instance statistics over a dataset.
#[derive(Debug, Clone)]
pub struct SegAccumulator {
    confusion: ConfusionMatrix,
    instances: Vec<InstanceRecord>,
}

impl SegAccumulator {
    pub fn new(num_classes: usize) -> Self {
        SegAccumulator {
            confusion: ConfusionMatrix::new(num_classes),
            instances: Vec::new(),
        }
    }

    pub fn add(
        &mut self,
        pred: &LabelMap,
        gt: &LabelMap,
        instances: Option<&InstanceMap>,
        table: &ClassTable,
    ) -> Result<()> {
        self.confusion
            .merge(&seg_confusion(pred, gt, self.confusion.classes())?)?;
        if let Some(inst) = instances {
            self.instances
                .extend(instance_records(pred, gt, inst, table)?);
        }
        Ok(())
    }

    pub fn confusion(&self) -> &ConfusionMatrix {
        &self.confusion
    }

    pub fn finish(&self, table: &ClassTable) -> Result<SegMetrics> {
        seg_metrics(&self.confusion, &self.instances, table)
    }
}
