//! KITTI-style detection evaluation: difficulty filtering, greedy matching and
//! 11-point interpolated average precision.

use serde::{Deserialize, Serialize};

use crate::assign::GroundTruthObject;
use crate::error::{Error, Result};
use crate::geom::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DifficultyMode {
    /// Official KITTI limits on box height, occlusion and truncation.
    Kitti,
    /// Minimum width and height only; occlusion and truncation are ignored.
    CityscapesAdjusted,
}

impl std::str::FromStr for DifficultyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kitti" => Ok(DifficultyMode::Kitti),
            "cityscapes" | "cityscapes-adjusted" => Ok(DifficultyMode::CityscapesAdjusted),
            other => Err(Error::invalid(
                "mode",
                format!("unknown difficulty mode `{other}` (kitti, cityscapes-adjusted)"),
            )),
        }
    }
}

/// Which ground-truth objects count at one difficulty level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyLevel {
    pub difficulty: Difficulty,
    pub mode: DifficultyMode,
    pub min_height: f64,
    pub min_width: Option<f64>,
    pub max_occlusion: Option<u8>,
    pub max_truncation: Option<f64>,
}

impl DifficultyLevel {
    pub fn new(mode: DifficultyMode, difficulty: Difficulty) -> Self {
        match mode {
            DifficultyMode::Kitti => {
                let (h, occ, trunc) = match difficulty {
                    Difficulty::Easy => (40.0, 0, 0.15),
                    Difficulty::Moderate => (25.0, 1, 0.30),
                    Difficulty::Hard => (25.0, 2, 0.50),
                };
                DifficultyLevel {
                    difficulty,
                    mode,
                    min_height: h,
                    min_width: None,
                    max_occlusion: Some(occ),
                    max_truncation: Some(trunc),
                }
            }
            DifficultyMode::CityscapesAdjusted => {
                let s = match difficulty {
                    Difficulty::Easy => 100.0,
                    Difficulty::Moderate => 50.0,
                    Difficulty::Hard => 10.0,
                };
                DifficultyLevel {
                    difficulty,
                    mode,
                    min_height: s,
                    min_width: Some(s),
                    max_occlusion: None,
                    max_truncation: None,
                }
            }
        }
    }

    pub fn all(mode: DifficultyMode) -> [DifficultyLevel; 3] {
        Difficulty::ALL.map(|d| DifficultyLevel::new(mode, d))
    }

    /// Whether `gt` is evaluated at this level (otherwise it is don't care).
    /// Missing occlusion / truncation annotations count as fully visible.
    pub fn counts(&self, gt: &GroundTruthObject) -> bool {
        let b = &gt.bbox;
        b.height() >= self.min_height
            && self.min_width.is_none_or(|w| b.width() >= w)
            && self
                .max_occlusion
                .is_none_or(|m| gt.occlusion.unwrap_or(0) <= m)
            && self
                .max_truncation
                .is_none_or(|m| gt.truncation.unwrap_or(0.0) <= m)
    }
}

/// A detection as seen by the evaluator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchFlag {
    TruePositive,
    FalsePositive,
    /// Matched only a don't-care object; neither TP nor FP.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Flags in descending score order.
    pub flags: Vec<MatchFlag>,
    pub scores: Vec<f64>,
    /// Ground-truth objects of the class that count at the level.
    pub counted_gts: usize,
}

impl MatchResult {
    pub fn empty() -> Self {
        MatchResult {
            flags: Vec::new(),
            scores: Vec::new(),
            counted_gts: 0,
        }
    }

    pub fn extend(&mut self, other: MatchResult) {
        self.flags.extend(other.flags);
        self.scores.extend(other.scores);
        self.counted_gts += other.counted_gts;
    }
}

/// Greedy score-ordered matching of one image's detections of `class_id`.
///
/// A detection is a true positive when it reaches `iou_threshold` with a
/// still-unmatched counted object (the best such one is taken). Otherwise it
/// is ignored if it reaches the threshold with a don't-care object of the
/// class, and a false positive if not.
pub fn match_detections(
    dets: &[ScoredBox],
    gts: &[GroundTruthObject],
    class_id: usize,
    iou_threshold: f64,
    level: &DifficultyLevel,
) -> MatchResult {
    let mut order: Vec<&ScoredBox> = dets.iter().filter(|d| d.class_id == class_id).collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));

    let class_gts: Vec<(&GroundTruthObject, bool)> = gts
        .iter()
        .filter(|g| g.class_id == class_id)
        .map(|g| (g, level.counts(g)))
        .collect();
    let mut matched = vec![false; class_gts.len()];

    let mut flags = Vec::with_capacity(order.len());
    for d in &order {
        let mut best: Option<(usize, f64)> = None;
        let mut hits_dontcare = false;
        for (j, (g, counted)) in class_gts.iter().enumerate() {
            let v = iou(&d.bbox, &g.bbox);
            if v < iou_threshold {
                continue;
            }
            if !counted {
                hits_dontcare = true;
            } else if !matched[j] && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        flags.push(match best {
            Some((j, _)) => {
                matched[j] = true;
                MatchFlag::TruePositive
            }
            None if hits_dontcare => MatchFlag::Ignored,
            None => MatchFlag::FalsePositive,
        });
    }
    MatchResult {
        flags,
        scores: order.iter().map(|d| d.score).collect(),
        counted_gts: class_gts.iter().filter(|(_, c)| *c).count(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `(recall, precision)` after each non-ignored detection, by descending score.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// Number of recall sample points of the interpolated AP.
pub const AP_SAMPLES: usize = 11;

/// 11-point interpolated AP; `None` when no ground-truth object counts.
pub fn average_precision(flags: &[MatchFlag], scores: &[f64], counted_gts: usize) -> Option<PrCurve> {
    if counted_gts == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..flags.len().min(scores.len())).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let n = counted_gts as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::with_capacity(order.len());
    for i in order {
        match flags[i] {
            MatchFlag::TruePositive => tp += 1,
            MatchFlag::FalsePositive => fp += 1,
            MatchFlag::Ignored => continue,
        }
        points.push((tp as f64 / n, tp as f64 / (tp + fp) as f64));
    }

    let sum: f64 = (0..AP_SAMPLES)
        .map(|k| {
            let r = k as f64 / (AP_SAMPLES - 1) as f64;
            points
                .iter()
                .filter(|(rec, _)| *rec >= r)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum();
    Some(PrCurve {
        points,
        ap: sum / AP_SAMPLES as f64,
    })
}

/// Matches and scores one class over many images.
pub fn evaluate_class<'a>(
    images: impl IntoIterator<Item = (&'a [ScoredBox], &'a [GroundTruthObject])>,
    class_id: usize,
    iou_threshold: f64,
    level: &DifficultyLevel,
) -> Option<PrCurve> {
    let mut all = MatchResult::empty();
    for (dets, gts) in images {
        all.extend(match_detections(dets, gts, class_id, iou_threshold, level));
    }
    average_precision(&all.flags, &all.scores, all.counted_gts)
}

/// Writes a PR curve as `recall,precision` CSV.
pub fn write_pr_csv<W: std::io::Write>(mut out: W, curve: &PrCurve) -> Result<()> {
    writeln!(out, "recall,precision")?;
    for (r, p) in &curve.points {
        writeln!(out, "{r},{p}")?;
    }
    Ok(())
}
