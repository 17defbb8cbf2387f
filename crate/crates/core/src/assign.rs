//! Per-anchor training targets from a ground-truth box list.
//!
//! Every anchor starts inactive. Per anchor, with `b1`/`b2` the best and second
//! best IoU over the ground truth and `g*` the best box (lowest index on ties),
//! the first matching rule wins:
//!
//! 1. anchor crosses the image border and `b1 >= dontcare_iou` → don't care
//! 2. `b1, b2 >= dontcare_iou` and `b1 - b2 < ambiguity_gap` → inactive
//! 3. `b1 > active_iou` → active for `g*`
//! 4. `dontcare_iou < b1 <= active_iou` → don't care
//!
//! Afterwards every ground-truth box without an active anchor claims its single
//! best anchor if that IoU exceeds `dontcare_iou` and the anchor is not held by
//! the border or ambiguity rules or by another box.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{encode, iou_matrix, AnchorGrid, BBox, BoxDelta};

/// One annotated object of an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    /// Object-detection class index.
    pub class_id: usize,
    pub bbox: BBox,
    pub instance_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusion: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<f64>,
}

impl GroundTruthObject {
    pub fn new(class_id: usize, bbox: BBox, instance_id: u32) -> Self {
        GroundTruthObject {
            class_id,
            bbox,
            instance_id,
            occlusion: None,
            truncation: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorState {
    Inactive,
    DontCare,
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorTarget {
    Inactive,
    DontCare,
    Active {
        class_id: usize,
        delta: BoxDelta,
        instance_id: u32,
    },
}

impl AnchorTarget {
    pub fn state(&self) -> AnchorState {
        match self {
            AnchorTarget::Inactive => AnchorState::Inactive,
            AnchorTarget::DontCare => AnchorState::DontCare,
            AnchorTarget::Active { .. } => AnchorState::Active,
        }
    }

    pub fn is_active(&self) -> bool {
        matches!(self, AnchorTarget::Active { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignConfig {
    pub active_iou: f64,
    pub dontcare_iou: f64,
    pub ambiguity_gap: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            active_iou: 0.5,
            dontcare_iou: 0.4,
            ambiguity_gap: 0.2,
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.dontcare_iou
            && self.dontcare_iou < self.active_iou
            && self.active_iou <= 1.0)
        {
            return Err(Error::invalid(
                "assign",
                format!(
                    "need 0 <= dontcare_iou < active_iou <= 1, got {} / {}",
                    self.dontcare_iou, self.active_iou
                ),
            ));
        }
        if !(self.ambiguity_gap > 0.0) {
            return Err(Error::invalid("ambiguity_gap", "must be > 0"));
        }
        Ok(())
    }
}

/// Why an anchor ended up in its state; the fallback pass needs it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rule {
    Default,
    Border,
    Ambiguous,
    Active(usize),
    Band,
    Fallback(usize),
}

/// Computes the training target of every anchor in `grid`.
pub fn assign_targets(
    grid: &AnchorGrid,
    gts: &[GroundTruthObject],
    image_w: usize,
    image_h: usize,
    cfg: &AssignConfig,
) -> Result<Vec<AnchorTarget>> {
    cfg.validate()?;
    if grid.image_size() != (image_w, image_h) {
        return Err(Error::shape(
            "anchor grid image size",
            (image_w, image_h),
            grid.image_size(),
        ));
    }
    let mut seen = HashSet::new();
    for gt in gts {
        if !gt.bbox.is_valid() || gt.bbox.is_degenerate() {
            return Err(Error::invalid(
                "gt",
                format!("degenerate box {:?}", gt.bbox),
            ));
        }
        if !seen.insert(gt.instance_id) {
            return Err(Error::invalid(
                "gt",
                format!("duplicate instance id {}", gt.instance_id),
            ));
        }
    }

    let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
    let ious = iou_matrix(grid.boxes(), &gt_boxes);
    let mut rules = vec![Rule::Default; grid.len()];

    for (a, rule) in rules.iter_mut().enumerate() {
        let row = ious.row(a);
        let mut b1 = f64::NEG_INFINITY;
        let mut b2 = f64::NEG_INFINITY;
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > b1 {
                b2 = b1;
                b1 = v;
                best = j;
            } else if v > b2 {
                b2 = v;
            }
        }
        if row.is_empty() {
            continue;
        }
        *rule = if grid.is_outside(a) && b1 >= cfg.dontcare_iou {
            Rule::Border
        } else if b1 >= cfg.dontcare_iou && b2 >= cfg.dontcare_iou && b1 - b2 < cfg.ambiguity_gap {
            Rule::Ambiguous
        } else if b1 > cfg.active_iou {
            Rule::Active(best)
        } else if b1 > cfg.dontcare_iou {
            Rule::Band
        } else {
            Rule::Default
        };
    }

    let mut has_active = vec![false; gts.len()];
    for rule in &rules {
        if let Rule::Active(j) = *rule {
            has_active[j] = true;
        }
    }
    for j in 0..gts.len() {
        if has_active[j] {
            continue;
        }
        let mut best_a = None;
        let mut best_v = f64::NEG_INFINITY;
        for a in 0..grid.len() {
            let v = ious.get(a, j);
            if v > best_v {
                best_v = v;
                best_a = Some(a);
            }
        }
        if let Some(a) = best_a {
            if best_v > cfg.dontcare_iou && matches!(rules[a], Rule::Band | Rule::Default) {
                rules[a] = Rule::Fallback(j);
                has_active[j] = true;
            }
        }
    }

    rules
        .iter()
        .enumerate()
        .map(|(a, rule)| {
            Ok(match *rule {
                Rule::Default | Rule::Ambiguous => AnchorTarget::Inactive,
                Rule::Border | Rule::Band => AnchorTarget::DontCare,
                Rule::Active(j) | Rule::Fallback(j) => AnchorTarget::Active {
                    class_id: gts[j].class_id,
                    delta: encode(&grid.boxes()[a], &gts[j].bbox)?,
                    instance_id: gts[j].instance_id,
                },
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub inactive: usize,
    pub dontcare: usize,
    pub active: usize,
    /// Active anchor count per object class id.
    pub active_per_class: BTreeMap<usize, usize>,
}

impl TargetSummary {
    pub fn total(&self) -> usize {
        self.inactive + self.dontcare + self.active
    }
}

pub fn summarize_targets(targets: &[AnchorTarget]) -> TargetSummary {
    let mut s = TargetSummary::default();
    for t in targets {
        match t {
            AnchorTarget::Inactive => s.inactive += 1,
            AnchorTarget::DontCare => s.dontcare += 1,
            AnchorTarget::Active { class_id, .. } => {
                s.active += 1;
                *s.active_per_class.entry(*class_id).or_default() += 1;
            }
        }
    }
    s
}

/// One line of the target dump format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetRecord {
    pub anchor_index: usize,
    pub state: AnchorState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<BoxDelta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<u32>,
}

impl TargetRecord {
    pub fn new(anchor_index: usize, target: &AnchorTarget) -> Self {
        let (class_id, delta, instance_id) = match *target {
            AnchorTarget::Active {
                class_id,
                delta,
                instance_id,
            } => (Some(class_id), Some(delta), Some(instance_id)),
            _ => (None, None, None),
        };
        TargetRecord {
            anchor_index,
            state: target.state(),
            class_id,
            delta,
            instance_id,
        }
    }

    pub fn to_target(&self) -> Result<AnchorTarget> {
        Ok(match (self.state, self.class_id, self.delta, self.instance_id) {
            (AnchorState::Inactive, None, None, None) => AnchorTarget::Inactive,
            (AnchorState::DontCare, None, None, None) => AnchorTarget::DontCare,
            (AnchorState::Active, Some(class_id), Some(delta), Some(instance_id)) => {
                AnchorTarget::Active {
                    class_id,
                    delta,
                    instance_id,
                }
            }
            _ => {
                return Err(Error::format(
                    "target",
                    format!(
                        "anchor {}: class/delta/instance must be present iff active",
                        self.anchor_index
                    ),
                ))
            }
        })
    }
}

/// Writes targets as JSON lines, one anchor per line.
pub fn write_targets_jsonl<W: std::io::Write>(mut out: W, targets: &[AnchorTarget]) -> Result<()> {
    for (i, t) in targets.iter().enumerate() {
        serde_json::to_writer(&mut out, &TargetRecord::new(i, t))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
