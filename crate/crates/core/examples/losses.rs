//! Evaluates each training loss on a handful of values and combines them with
//! learned task uncertainties.
//!
//! ```text
//! cargo run --example losses
//! ```

use nnad::geom::BoxDelta;
use nnad::loss::{
    contrastive_loss, cross_entropy, focal_loss, kendall_total, smooth_l1, ClassLayout,
    FocalParams, Objectness, CONTRASTIVE_MARGIN,
};

fn main() -> nnad::Result<()> {
    // (background, foreground) logits for four anchors
    let logits = [2.0, -1.0, -0.5, 1.5, 0.0, 0.0, 3.0, -3.0];
    let targets = [
        Objectness::Background,
        Objectness::Foreground,
        Objectness::DontCare,
        Objectness::Foreground,
    ];
    let focal = focal_loss(&logits, ClassLayout::rows(2), &targets, &FocalParams::default())?;
    let plain = focal_loss(
        &logits,
        ClassLayout::rows(2),
        &targets,
        &FocalParams { alpha: 1.0, gamma: 0.0 },
    )?;
    println!(
        "objectness: focal {:.4} vs cross-entropy {:.4} over {} anchors",
        focal.value, plain.value, focal.contributing
    );

    let ce = cross_entropy(&[1.0, 0.2, -0.3, 0.1, 2.0, 0.0], ClassLayout::rows(3), &[Some(0), Some(1)])?;
    println!("class: cross-entropy {:.4}", ce.value);

    let pred = [BoxDelta::from_array([0.1, -0.2, 0.05, 1.8]), BoxDelta::ZERO];
    let target = [BoxDelta::ZERO, BoxDelta::ZERO];
    let box_loss = smooth_l1(&pred, &target, &[true, false])?;
    println!("box: smooth L1 {:.4}", box_loss.value);

    // two anchors on instance 1, one on instance 2, 2-d embeddings
    let emb = [0.0, 0.0, 0.1, 0.0, 0.4, 0.3];
    let contrastive = contrastive_loss(&emb, 2, &[1, 1, 2], CONTRASTIVE_MARGIN)?;
    println!("embedding: contrastive {:.4}", contrastive.value);

    let losses = [focal.value, ce.value, box_loss.value, contrastive.value, 0.7];
    for s in [0.0, 1.0] {
        let k = kendall_total(&losses, &[s; 5])?;
        println!("weighted total with log variances {s}: {:.4}", k.total);
    }
    Ok(())
}
