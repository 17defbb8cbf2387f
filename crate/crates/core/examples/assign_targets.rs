//! Assigns training targets for a scene with two overlapping cars and a small
//! pedestrian, then prints what each object ended up with.
//!
//! ```text
//! cargo run --example assign_targets
//! ```

use nnad::assign::{assign_targets, summarize_targets, AnchorTarget, AssignConfig, GroundTruthObject};
use nnad::geom::{iou, make_anchor_grid, paper_templates, BBox};

fn main() -> nnad::Result<()> {
    let grid = make_anchor_grid(64, 64, 8, &paper_templates())?;
    let gts = [
        GroundTruthObject::new(0, BBox::new(8.0, 24.0, 34.0, 44.0), 1),
        GroundTruthObject::new(0, BBox::new(18.0, 24.0, 44.0, 44.0), 2),
        GroundTruthObject::new(1, BBox::new(50.0, 30.0, 54.0, 40.0), 3),
    ];
    let cfg = AssignConfig::default();
    let targets = assign_targets(&grid, &gts, 64, 64, &cfg)?;

    let s = summarize_targets(&targets);
    println!(
        "{} anchors: {} active, {} don't care, {} inactive",
        targets.len(),
        s.active,
        s.dontcare,
        s.inactive
    );
    for g in &gts {
        let mine: Vec<usize> = targets
            .iter()
            .enumerate()
            .filter(|(_, t)| matches!(t, AnchorTarget::Active { instance_id, .. } if *instance_id == g.instance_id))
            .map(|(i, _)| i)
            .collect();
        let best = mine
            .iter()
            .map(|&i| iou(&grid.boxes()[i], &g.bbox))
            .fold(0.0, f64::max);
        println!(
            "object {} ({:.0}x{:.0} px): {} active anchors, best IoU {best:.3}",
            g.instance_id,
            g.bbox.width(),
            g.bbox.height(),
            mine.len()
        );
    }

    // anchors inside the image that overlap both cars about equally are switched off
    let ambiguous = (0..grid.len())
        .filter(|&i| !grid.is_outside(i))
        .filter(|&i| {
            let a = iou(&grid.boxes()[i], &gts[0].bbox);
            let b = iou(&grid.boxes()[i], &gts[1].bbox);
            a.min(b) >= cfg.dontcare_iou && (a - b).abs() < cfg.ambiguity_gap
        })
        .inspect(|&i| assert_eq!(targets[i], AnchorTarget::Inactive))
        .count();
    println!("{ambiguous} anchors overlap both cars ambiguously and are inactive");
    Ok(())
}
