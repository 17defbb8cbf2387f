//! Synthetic street-like scenes with exact labels.
//!
//! Sky above a random horizon, road below, both with pixel noise. Cars are
//! red rectangles, persons blue ellipses. Objects never overlap and are drawn
//! in instance-id order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotation::{AnnotatedObject, AnnotationFile};
use super::classes::ClassTable;
use super::image_io::RgbImage;
use crate::assign::GroundTruthObject;
use crate::error::{Error, Result};
use crate::eval::{InstanceMap, LabelMap};
use crate::geom::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub objects: usize,
    /// Smallest and largest object side in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Minimum distance between objects and the image border.
    pub margin: usize,
    /// Minimum free space between two objects.
    pub gap: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            objects: 2,
            min_size: 20,
            max_size: 30,
            margin: 6,
            gap: 2,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scene", "image size must be positive"));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::invalid("scene", "need 0 < min_size <= max_size"));
        }
        if self.objects > 0 && self.max_size + 2 * self.margin > self.width.min(self.height) {
            return Err(Error::invalid(
                "scene",
                format!(
                    "objects up to {} px with margin {} do not fit in {}x{}",
                    self.max_size, self.margin, self.width, self.height
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Car,
    Person,
}

impl Shape {
    fn label(self) -> &'static str {
        match self {
            Shape::Car => "car",
            Shape::Person => "person",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub rgb: RgbImage,
    pub labels: LabelMap,
    pub instances: InstanceMap,
    pub objects: Vec<GroundTruthObject>,
    pub annotation: AnnotationFile,
}

const LAYOUT_ATTEMPTS: usize = 200;
const PLACEMENT_ATTEMPTS: usize = 50;

fn place_objects(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Option<Vec<(Shape, [usize; 4])>> {
    let (w, h) = (spec.width, spec.height);
    let mut placed: Vec<(Shape, [usize; 4])> = Vec::new();
    for _ in 0..spec.objects {
        let shape = if rng.random_bool(0.5) { Shape::Car } else { Shape::Person };
        let mut ok = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let long = rng.random_range(spec.min_size..=spec.max_size);
            let short = rng.random_range(spec.min_size..=long);
            let (bw, bh) = match shape {
                Shape::Car => (long, short),
                Shape::Person => (short, long),
            };
            let x0 = rng.random_range(spec.margin..=w - spec.margin - bw);
            let y0 = rng.random_range(spec.margin..=h - spec.margin - bh);
            let r = [x0, y0, x0 + bw, y0 + bh];
            let clear = placed.iter().all(|(_, q)| {
                r[0] >= q[2] + spec.gap
                    || q[0] >= r[2] + spec.gap
                    || r[1] >= q[3] + spec.gap
                    || q[1] >= r[3] + spec.gap
            });
            if clear {
                ok = Some(r);
                break;
            }
        }
        placed.push((shape, ok?));
    }
    Some(placed)
}

fn jitter(rng: &mut ChaCha8Rng, base: [u8; 3], amount: i32) -> [u8; 3] {
    let d = rng.random_range(-amount..=amount);
    base.map(|c| (c as i32 + d).clamp(0, 255) as u8)
}

/// Renders one deterministic scene. Label ids follow [`ClassTable::synthetic`].
pub fn synth_scene(seed: u64, spec: &SceneSpec) -> Result<SynthScene> {
    spec.validate()?;
    let table = ClassTable::synthetic();
    let id = |name: &str| table.id(name).expect("synthetic class") as u8;
    let (road, sky) = (id("road"), id("sky"));
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let horizon = rng.random_range(h / 3..=h / 2);
    let mut rgb = RgbImage::new(w, h);
    let mut labels = LabelMap::filled(w, h, road);
    for y in 0..h {
        for x in 0..w {
            if y < horizon {
                rgb.set(x, y, jitter(&mut rng, [135, 190, 235], 12));
                labels.set(x, y, sky);
            } else {
                rgb.set(x, y, jitter(&mut rng, [96, 96, 96], 24));
            }
        }
    }

    // Placement: integer pixel rectangles separated by `gap`. A layout that
    // gets stuck is discarded and redrawn.
    let mut layout = None;
    for _ in 0..LAYOUT_ATTEMPTS {
        layout = place_objects(&mut rng, spec);
        if layout.is_some() {
            break;
        }
    }
    let placed = layout.ok_or_else(|| {
        Error::invalid(
            "scene",
            format!("could not place {} objects without overlap", spec.objects),
        )
    })?;

    let mut instances = InstanceMap::empty(w, h);
    let mut objects = Vec::new();
    let region = |label: &str, y1: usize| AnnotatedObject {
        label: label.into(),
        polygon: vec![
            [0.0, 0.0],
            [w as f64, 0.0],
            [w as f64, y1 as f64],
            [0.0, y1 as f64],
        ],
        instance_id: None,
        occlusion: None,
        truncation: None,
    };
    let mut annotated = vec![region("road", h), region("sky", horizon)];
    for (k, (shape, r)) in placed.iter().enumerate() {
        let instance = k as u32 + 1;
        let class = id(shape.label());
        let colour = match shape {
            Shape::Car => [200, 30, 30],
            Shape::Person => [30, 60, 200],
        };
        let (cx, cy) = ((r[0] + r[2]) as f64 / 2.0, (r[1] + r[3]) as f64 / 2.0);
        let (rx, ry) = ((r[2] - r[0]) as f64 / 2.0, (r[3] - r[1]) as f64 / 2.0);
        let mut ext = [usize::MAX, usize::MAX, 0, 0];
        for y in r[1]..r[3] {
            for x in r[0]..r[2] {
                let covered = match shape {
                    Shape::Car => true,
                    Shape::Person => {
                        let dx = (x as f64 + 0.5 - cx) / rx;
                        let dy = (y as f64 + 0.5 - cy) / ry;
                        dx * dx + dy * dy <= 1.0
                    }
                };
                if covered {
                    rgb.set(x, y, jitter(&mut rng, colour, 10));
                    labels.set(x, y, class);
                    instances.set(x, y, instance as u16);
                    ext = [ext[0].min(x), ext[1].min(y), ext[2].max(x + 1), ext[3].max(y + 1)];
                }
            }
        }
        let [x0, y0, x1, y1] = ext.map(|v| v as f64);
        let polygon = match shape {
            Shape::Car => vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
            Shape::Person => vec![[x0, cy], [cx, y0], [x1, cy], [cx, y1]],
        };
        objects.push(GroundTruthObject::new(
            table.detection_id(shape.label()).expect("detection class"),
            BBox::new(x0, y0, x1, y1),
            instance,
        ));
        annotated.push(AnnotatedObject {
            label: shape.label().into(),
            polygon,
            instance_id: Some(instance),
            occlusion: None,
            truncation: None,
        });
    }

    Ok(SynthScene {
        rgb,
        labels,
        instances,
        objects,
        annotation: AnnotationFile {
            width: w,
            height: h,
            objects: annotated,
        },
    })
}

/// `count` scenes; scene `i` is rendered from the `i`-th draw of a generator
/// seeded with `seed`.
pub fn synth_dataset(seed: u64, count: usize, spec: &SceneSpec) -> Result<Vec<SynthScene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| synth_scene(rng.random(), spec))
        .collect()
}
