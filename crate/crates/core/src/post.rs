//! Head outputs to final detections: thresholding, decoding and per-class NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ScoredBox;
use crate::geom::{decode, iou, AnchorGrid, BBox, BoxDelta};
use crate::net::{HeadOutputs, Tensor};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    /// Softmax foreground probability; the ranking score.
    pub objectness: f64,
    /// Softmax probability of `class_id`.
    pub class_score: f64,
    pub embedding: Vec<f64>,
    pub anchor_index: usize,
}

impl Detection {
    pub fn scored(&self) -> ScoredBox {
        ScoredBox {
            bbox: self.bbox,
            score: self.objectness,
            class_id: self.class_id,
        }
    }
}

/// Per-template channel group of one image at one cell.
fn group(t: &Tensor, n: usize, template: usize, size: usize, cell: usize) -> Vec<f64> {
    let plane = t.plane_len();
    let s = t.sample(n);
    (0..size)
        .map(|g| s[(template * size + g) * plane + cell])
        .collect()
}

fn softmax(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

/// Decodes the anchors of image `n` whose foreground probability reaches
/// `score_threshold`, ordered by descending objectness then anchor index.
pub fn decode_detections(
    outputs: &HeadOutputs,
    n: usize,
    grid: &AnchorGrid,
    score_threshold: f64,
) -> Result<Vec<Detection>> {
    let t = grid.anchors_per_cell();
    let (rows, cols) = (grid.rows(), grid.cols());
    let obj = &outputs.objectness;
    if n >= obj.batch() {
        return Err(Error::shape("image index", obj.batch(), n));
    }
    for (name, tensor) in [
        ("objectness", obj),
        ("class", &outputs.class_scores),
        ("box", &outputs.box_deltas),
        ("embedding", &outputs.embeddings),
    ] {
        if (tensor.height(), tensor.width()) != (rows, cols) || tensor.channels() % t != 0 {
            return Err(Error::ShapeMismatch {
                context: "detection head",
                expected: format!("{name}: G·{t} × {rows} × {cols}"),
                actual: format!("{:?}", tensor.shape()),
            });
        }
    }
    if obj.channels() != 2 * t || outputs.box_deltas.channels() != 4 * t {
        return Err(Error::shape(
            "objectness/box channels",
            (2 * t, 4 * t),
            (obj.channels(), outputs.box_deltas.channels()),
        ));
    }
    let k = outputs.class_scores.channels() / t;
    let e = outputs.embeddings.channels() / t;
    if k == 0 {
        return Err(Error::invalid("class head", "no object classes"));
    }

    let mut dets = Vec::new();
    for cell in 0..rows * cols {
        for tmpl in 0..t {
            let mut o = group(obj, n, tmpl, 2, cell);
            softmax(&mut o);
            if o[1] < score_threshold {
                continue;
            }
            let mut c = group(&outputs.class_scores, n, tmpl, k, cell);
            softmax(&mut c);
            let (class_id, class_score) = c
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
            let d = group(&outputs.box_deltas, n, tmpl, 4, cell);
            let anchor_index = cell * t + tmpl;
            dets.push(Detection {
                bbox: decode(
                    &grid.boxes()[anchor_index],
                    &BoxDelta::from_array([d[0], d[1], d[2], d[3]]),
                ),
                class_id,
                objectness: o[1],
                class_score,
                embedding: group(&outputs.embeddings, n, tmpl, e, cell),
                anchor_index,
            });
        }
    }
    dets.sort_by(|a, b| {
        b.objectness
            .total_cmp(&a.objectness)
            .then(a.anchor_index.cmp(&b.anchor_index))
    });
    Ok(dets)
}

/// Greedy per-class non-maximum suppression by objectness.
///
/// Output is in keep order: the surviving detections sorted by descending
/// objectness, ties broken by input position.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].objectness.total_cmp(&dets[a].objectness));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&j| {
            dets[j].class_id == dets[i].class_id && iou(&dets[j].bbox, &dets[i].bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// One line of the detections JSON-lines format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class: String,
    pub score: f64,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    #[serde(default)]
    pub embedding: Vec<f64>,
}

impl DetectionRecord {
    pub fn new(image_id: &str, class: &str, d: &Detection) -> Self {
        DetectionRecord {
            image_id: image_id.to_string(),
            class: class.to_string(),
            score: d.objectness,
            x_min: d.bbox.x_min,
            y_min: d.bbox.y_min,
            x_max: d.bbox.x_max,
            y_max: d.bbox.y_max,
            embedding: d.embedding.clone(),
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

pub fn write_detections_jsonl<W: std::io::Write>(
    mut out: W,
    records: &[DetectionRecord],
) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_detections_jsonl<R: std::io::BufRead>(input: R) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DetectionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format("detections", format!("line {}: {e}", i + 1)))?;
        if !(r.score.is_finite() && r.bbox().is_valid()) {
            return Err(Error::format(
                "detections",
                format!("line {}: invalid score or box", i + 1),
            ));
        }
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{encode, make_anchor_grid, AnchorTemplate};

    fn det(b: BBox, score: f64, class_id: usize) -> Detection {
        Detection {
            bbox: b,
            class_id,
            objectness: score,
            class_score: 1.0,
            embedding: vec![],
            anchor_index: 0,
        }
    }

    fn outputs(grid: &AnchorGrid, k: usize, e: usize) -> HeadOutputs {
        let t = grid.anchors_per_cell();
        let s = |c| [1, c, grid.rows(), grid.cols()];
        HeadOutputs {
            seg: Tensor::zeros([1, 2, 8, 8]),
            objectness: Tensor::zeros(s(2 * t)),
            class_scores: Tensor::zeros(s(k * t)),
            box_deltas: Tensor::zeros(s(4 * t)),
            embeddings: Tensor::zeros(s(e * t)),
        }
    }

    fn grid() -> AnchorGrid {
        let templates = [
            AnchorTemplate::new(1.0, 256.0).unwrap(),
            AnchorTemplate::new(2.0, 512.0).unwrap(),
        ];
        make_anchor_grid(32, 32, 8, &templates).unwrap()
    }

    #[test]
    fn nms_examples() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[det(b, 0.7, 0)], 0.5).len(), 1);
        let kept = nms(&[det(b, 0.8, 0), det(b, 0.9, 0)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].objectness, 0.9);
        assert_eq!(nms(&[det(b, 0.8, 0), det(b, 0.9, 1)], 0.5).len(), 2);
    }

    #[test]
    fn symmetric_outputs_give_nothing_above_half() {
        let g = grid();
        let out = outputs(&g, 2, 3);
        assert!(decode_detections(&out, 0, &g, 0.6).unwrap().is_empty());
        assert_eq!(decode_detections(&out, 0, &g, 0.5).unwrap().len(), g.len());
    }

    #[test]
    fn recovers_encoded_box() {
        let g = grid();
        let (k, e, t) = (2, 3, g.anchors_per_cell());
        let mut out = outputs(&g, k, e);
        let gt = BBox::new(9.5, 3.0, 27.25, 17.0);
        let a = g.index(1, 2, 1);
        let cell = 1 * g.cols() + 2;
        let plane = g.rows() * g.cols();
        let delta = encode(&g.boxes()[a], &gt).unwrap().to_array();
        out.objectness.data_mut()[(2 + 1) * plane + cell] = 5.0;
        out.class_scores.data_mut()[(k + 1) * plane + cell] = 2.0;
        for c in 0..4 {
            out.box_deltas.data_mut()[(4 + c) * plane + cell] = delta[c];
        }
        for c in 0..e {
            out.embeddings.data_mut()[(e + c) * plane + cell] = c as f64;
        }
        let dets = decode_detections(&out, 0, &g, 0.9).unwrap();
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert_eq!((d.anchor_index, d.class_id), (a, 1));
        assert_eq!(d.embedding, vec![0.0, 1.0, 2.0]);
        for (x, y) in [
            (d.bbox.x_min, gt.x_min),
            (d.bbox.y_min, gt.y_min),
            (d.bbox.x_max, gt.x_max),
            (d.bbox.y_max, gt.y_max),
        ] {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(t, 2);
    }

    #[test]
    fn rejects_wrong_shapes() {
        let g = grid();
        let mut out = outputs(&g, 2, 3);
        out.box_deltas = Tensor::zeros([1, 4, g.rows(), g.cols()]);
        assert!(decode_detections(&out, 0, &g, 0.5).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let d = det(BBox::new(1.0, 2.0, 3.0, 4.5), 0.75, 0);
        let recs = vec![DetectionRecord::new("img0", "car", &d)];
        let mut buf = Vec::new();
        write_detections_jsonl(&mut buf, &recs).unwrap();
        assert_eq!(read_detections_jsonl(buf.as_slice()).unwrap(), recs);
        assert!(read_detections_jsonl(&b"{\"image_id\":1}\n"[..]).is_err());
    }
}
