//! Scores a deliberately damaged segmentation of a synthetic scene.
//!
//! ```text
//! cargo run --example eval_seg
//! ```

use nnad::eval::SegAccumulator;
use nnad::pipeline::{synth_scene, ClassTable, SceneSpec};

fn main() -> nnad::Result<()> {
    let table = ClassTable::synthetic();
    let spec = SceneSpec {
        objects: 3,
        ..SceneSpec::default()
    };
    let mut acc = SegAccumulator::new(table.num_classes());
    for seed in 0..4 {
        let scene = synth_scene(seed, &spec)?;
        let mut pred = scene.labels.clone();
        // erase the left third of every object
        let road = table.id("road").expect("road") as u8;
        for o in &scene.objects {
            let cut = o.bbox.x_min + o.bbox.width() / 3.0;
            for y in o.bbox.y_min as usize..o.bbox.y_max as usize {
                for x in o.bbox.x_min as usize..cut as usize {
                    pred.set(x, y, road);
                }
            }
        }
        acc.add(&pred, &scene.labels, Some(&scene.instances), &table)?;
    }
    let m = acc.finish(&table)?;
    let fmt = |v: Option<f64>| v.map_or("  -  ".into(), |v| format!("{v:.3}"));
    for c in &m.classes {
        println!("{:<8} IoU {}  iIoU {}", c.name, fmt(c.iou), fmt(c.iiou));
    }
    println!("mean     IoU {}  iIoU {}", fmt(m.mean_iou), fmt(m.mean_iiou));
    println!("pixel accuracy {}", fmt(m.pixel_accuracy));
    Ok(())
}
