//! Decodes hand-made head outputs into boxes and shows how NMS thins them.
//!
//! ```text
//! cargo run --example detect_nms
//! ```

use nnad::geom::{encode, make_anchor_grid, AnchorTemplate, BBox};
use nnad::net::{HeadOutputs, Tensor};
use nnad::post::{decode_detections, nms, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD};

fn main() -> nnad::Result<()> {
    let templates = [AnchorTemplate::new(1.0, 256.0)?, AnchorTemplate::new(0.5, 512.0)?];
    let grid = make_anchor_grid(32, 32, 8, &templates)?;
    let (rows, cols, t) = (grid.rows(), grid.cols(), templates.len());
    let plane = rows * cols;

    let mut out = HeadOutputs {
        seg: Tensor::zeros([1, 2, 32, 32]),
        objectness: Tensor::zeros([1, 2 * t, rows, cols]),
        class_scores: Tensor::zeros([1, 2 * t, rows, cols]),
        box_deltas: Tensor::zeros([1, 4 * t, rows, cols]),
        embeddings: Tensor::zeros([1, t, rows, cols]),
    };
    // background everywhere
    for tmpl in 0..t {
        out.objectness.data_mut()[2 * tmpl * plane..(2 * tmpl + 1) * plane].fill(2.0);
    }
    // three neighbouring anchors fire on the same car
    let car = BBox::new(6.0, 8.0, 26.0, 24.0);
    for (cell, tmpl, logit) in [(5, 0, 6.0), (6, 0, 5.0), (9, 1, 3.0)] {
        out.objectness.data_mut()[(2 * tmpl + 1) * plane + cell] = logit;
        let d = encode(&grid.boxes()[cell * t + tmpl], &car)?.to_array();
        for (k, v) in d.into_iter().enumerate() {
            // leave the lowest-scoring one slightly off
            let v = if logit < 4.0 && k == 0 { v + 0.3 } else { v };
            out.box_deltas.data_mut()[(4 * tmpl + k) * plane + cell] = v;
        }
    }

    let raw = decode_detections(&out, 0, &grid, DEFAULT_SCORE_THRESHOLD)?;
    println!("{} anchors above score {DEFAULT_SCORE_THRESHOLD}:", raw.len());
    for d in &raw {
        let b = d.bbox;
        println!(
            "  anchor {:>2}  objectness {:.3}  [{:.1}, {:.1}, {:.1}, {:.1}]",
            d.anchor_index, d.objectness, b.x_min, b.y_min, b.x_max, b.y_max
        );
    }
    let kept = nms(&raw, DEFAULT_NMS_IOU);
    println!("{} left after NMS at IoU {DEFAULT_NMS_IOU}", kept.len());
    Ok(())
}
