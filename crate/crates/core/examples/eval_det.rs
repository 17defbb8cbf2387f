//! Average precision of a small set of detections at every difficulty level.
//!
//! ```text
//! cargo run --example eval_det
//! ```

use nnad::assign::GroundTruthObject;
use nnad::eval::{evaluate_class, DifficultyLevel, DifficultyMode, ScoredBox};
use nnad::geom::BBox;

fn main() {
    let gts = [
        GroundTruthObject::new(0, BBox::new(0.0, 0.0, 120.0, 110.0), 1),
        GroundTruthObject::new(0, BBox::new(200.0, 20.0, 260.0, 80.0), 2),
        GroundTruthObject::new(0, BBox::new(300.0, 40.0, 330.0, 60.0), 3),
    ];
    let det = |x0, y0, x1, y1, score| ScoredBox {
        bbox: BBox::new(x0, y0, x1, y1),
        score,
        class_id: 0,
    };
    let dets = [
        det(2.0, 1.0, 118.0, 112.0, 0.95),
        det(400.0, 0.0, 450.0, 50.0, 0.9),
        det(202.0, 22.0, 262.0, 78.0, 0.8),
        det(301.0, 41.0, 331.0, 61.0, 0.6),
    ];
    for level in DifficultyLevel::all(DifficultyMode::CityscapesAdjusted) {
        let counted = gts.iter().filter(|g| level.counts(g)).count();
        match evaluate_class([(&dets[..], &gts[..])], 0, 0.7, &level) {
            Some(curve) => {
                let pr: Vec<String> = curve.points.iter().map(|(r, p)| format!("({r:.2}, {p:.2})")).collect();
                println!(
                    "{:<8} {counted} counted, AP {:.3}  PR {}",
                    level.difficulty.name(),
                    curve.ap,
                    pr.join(" ")
                );
            }
            None => println!("{:<8} no counted objects", level.difficulty.name()),
        }
    }
}
