//! Writes a small synthetic dataset and reads it back through the loaders.
//!
//! ```text
//! cargo run --example synth -- [out_dir] [count] [seed]
//! ```

use std::path::PathBuf;

use nnad::pipeline::{load_dataset_dir, scene_id, synth_dataset, write_scene, ClassTable, SceneSpec};

fn main() -> nnad::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("nnad-synth"));
    let count = args.next().map_or(5, |c| c.parse().expect("count"));
    let seed = args.next().map_or(7, |s| s.parse().expect("seed"));

    let spec = SceneSpec::default();
    std::fs::create_dir_all(&dir)?;
    for (i, scene) in synth_dataset(seed, count, &spec)?.iter().enumerate() {
        write_scene(&dir, &scene_id(i), scene)?;
    }

    let table = ClassTable::synthetic();
    for item in load_dataset_dir(&dir, &table)? {
        let objects: Vec<String> = item
            .objects
            .iter()
            .map(|o| {
                format!(
                    "{} {:.0}x{:.0}",
                    table.detection_name(o.class_id),
                    o.bbox.width(),
                    o.bbox.height()
                )
            })
            .collect();
        println!("{}: {}", item.id, objects.join(", "));
    }
    println!("wrote {count} scenes to {}", dir.display());
    Ok(())
}
