use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::det::Difficulty;
use super::seg::SegMetrics;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorePair {
    pub iou: Option<f64>,
    pub iiou: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApByLevel {
    pub easy: Option<f64>,
    pub moderate: Option<f64>,
    pub hard: Option<f64>,
}

impl ApByLevel {
    pub fn set(&mut self, level: Difficulty, ap: Option<f64>) {
        match level {
            Difficulty::Easy => self.easy = ap,
            Difficulty::Moderate => self.moderate = ap,
            Difficulty::Hard => self.hard = ap,
        }
    }

    pub fn get(&self, level: Difficulty) -> Option<f64> {
        match level {
            Difficulty::Easy => self.easy,
            Difficulty::Moderate => self.moderate,
            Difficulty::Hard => self.hard,
        }
    }
}

/// The metrics JSON document written by `eval-seg` and `eval-det`.
///
/// Absent values (a class that never occurs, a level without counted objects)
/// serialize as `null`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_class: BTreeMap<String, ScorePair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_iiou: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub categories: BTreeMap<String, ScorePair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_mean_iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_mean_iiou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ap: BTreeMap<String, ApByLevel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
}

impl MetricsReport {
    pub fn from_seg(m: &SegMetrics) -> Self {
        let pairs = |v: &[super::seg::ClassScore]| {
            v.iter()
                .map(|c| {
                    (
                        c.name.clone(),
                        ScorePair {
                            iou: c.iou,
                            iiou: c.iiou,
                        },
                    )
                })
                .collect()
        };
        MetricsReport {
            per_class: pairs(&m.classes),
            mean_iou: m.mean_iou,
            mean_iiou: m.mean_iiou,
            categories: pairs(&m.categories),
            category_mean_iou: m.category_mean_iou,
            category_mean_iiou: m.category_mean_iiou,
            pixel_accuracy: m.pixel_accuracy,
            ..Default::default()
        }
    }

    /// Parses and checks a report: every number must lie in `[0, 1]`.
    pub fn from_json(text: &str) -> crate::Result<Self> {
        let r: MetricsReport = serde_json::from_str(text)?;
        let mut values: Vec<Option<f64>> = vec![
            r.mean_iou,
            r.mean_iiou,
            r.category_mean_iou,
            r.category_mean_iiou,
            r.pixel_accuracy,
        ];
        for p in r.per_class.values().chain(r.categories.values()) {
            values.extend([p.iou, p.iiou]);
        }
        for a in r.ap.values() {
            values.extend([a.easy, a.moderate, a.hard]);
        }
        if let Some(v) = values.into_iter().flatten().find(|v| !(0.0..=1.0).contains(v)) {
            return Err(crate::Error::format("metrics report", format!("value {v} outside [0, 1]")));
        }
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_schema() {
        let mut r = MetricsReport {
            mean_iou: Some(0.5),
            ..Default::default()
        };
        r.ap.insert(
            "car".into(),
            ApByLevel {
                easy: None,
                moderate: Some(1.0),
                hard: Some(0.25),
            },
        );
        let text = serde_json::to_string(&r).unwrap();
        assert_eq!(MetricsReport::from_json(&text).unwrap(), r);
        assert!(MetricsReport::from_json(r#"{"mean_iou": 1.5}"#).is_err());
        assert!(MetricsReport::from_json(r#"{"bogus": 1}"#).is_err());
    }
}
