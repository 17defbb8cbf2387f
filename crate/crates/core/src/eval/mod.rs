//! Segmentation and detection evaluation.

mod det;
mod report;
mod seg;

pub use det::{
    average_precision, evaluate_class, match_detections, write_pr_csv, Difficulty,
    DifficultyLevel, DifficultyMode, MatchFlag, MatchResult, PrCurve, ScoredBox, AP_SAMPLES,
};
pub use report::{ApByLevel, MetricsReport, ScorePair};
pub use seg::{
    instance_records, seg_confusion, seg_metrics, ClassScore, ConfusionMatrix, InstanceMap,
    InstanceRecord, LabelMap, SegAccumulator, SegMetrics, IGNORE_ID,
};
