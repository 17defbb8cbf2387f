//! Cityscapes-style polygon annotations.

use serde::{Deserialize, Serialize};

use super::classes::{ClassTable, Resolved};
use crate::assign::GroundTruthObject;
use crate::error::{Error, Result};
use crate::eval::{InstanceMap, LabelMap, IGNORE_ID};
use crate::geom::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedObject {
    pub label: String,
    /// Vertices `[x, y]` in pixel coordinates.
    pub polygon: Vec<[f64; 2]>,
    /// Defaults to the 1-based position in the object list.
    #[serde(rename = "instanceId", default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusion: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    #[serde(rename = "imgWidth")]
    pub width: usize,
    #[serde(rename = "imgHeight")]
    pub height: usize,
    pub objects: Vec<AnnotatedObject>,
}

impl AnnotationFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let ann: AnnotationFile = serde_json::from_str(text)?;
        ann.validate()?;
        Ok(ann)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::format("annotation", "image dimensions must be positive"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.polygon.is_empty() {
                return Err(Error::format(
                    "annotation",
                    format!("object {i} (`{}`) has an empty polygon", o.label),
                ));
            }
            if o.polygon.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::format(
                    "annotation",
                    format!("object {i} has a non-finite vertex"),
                ));
            }
        }
        Ok(())
    }

    fn instance_id(&self, i: usize) -> u32 {
        self.objects[i].instance_id.unwrap_or(i as u32 + 1)
    }
}

/// Axis-aligned hull of a polygon's vertices.
pub fn polygon_bbox(polygon: &[[f64; 2]]) -> BBox {
    let mut b = BBox::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &[x, y] in polygon {
        b.x_min = b.x_min.min(x);
        b.y_min = b.y_min.min(y);
        b.x_max = b.x_max.max(x);
        b.y_max = b.y_max.max(y);
    }
    b
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedBoxes {
    pub objects: Vec<GroundTruthObject>,
    /// Detection-class objects dropped for zero area.
    pub degenerate: usize,
}

/// Ground-truth boxes of the detection-class objects of an annotation.
pub fn boxes_from_polygons(ann: &AnnotationFile, table: &ClassTable) -> Result<ExtractedBoxes> {
    ann.validate()?;
    let mut objects = Vec::new();
    let mut degenerate = 0;
    for (i, o) in ann.objects.iter().enumerate() {
        table.resolve(&o.label)?;
        let Some(class_id) = table.detection_id(&o.label) else {
            continue;
        };
        let bbox = polygon_bbox(&o.polygon);
        if bbox.is_degenerate() {
            degenerate += 1;
            continue;
        }
        objects.push(GroundTruthObject {
            class_id,
            bbox,
            instance_id: ann.instance_id(i),
            occlusion: o.occlusion,
            truncation: o.truncation,
        });
    }
    Ok(ExtractedBoxes {
        objects,
        degenerate,
    })
}

/// Even-odd test of the point `(x, y)` against a closed polygon.
fn inside(polygon: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut hit = false;
    let n = polygon.len();
    for i in 0..n {
        let [x1, y1] = polygon[i];
        let [x2, y2] = polygon[(i + 1) % n];
        if (y1 > y) != (y2 > y) {
            let xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1);
            if x < xc {
                hit = !hit;
            }
        }
    }
    hit
}

/// Rasterizes the polygons at pixel centers, later objects over earlier ones.
/// Uncovered and void pixels get [`IGNORE_ID`]; instanceable classes also
/// write their instance id.
pub fn rasterize(ann: &AnnotationFile, table: &ClassTable) -> Result<(LabelMap, InstanceMap)> {
    ann.validate()?;
    let (w, h) = (ann.width, ann.height);
    let mut labels = LabelMap::filled(w, h, IGNORE_ID);
    let mut instances = InstanceMap::empty(w, h);
    for (i, o) in ann.objects.iter().enumerate() {
        let resolved = table.resolve(&o.label)?;
        let b = polygon_bbox(&o.polygon);
        let x0 = b.x_min.floor().max(0.0) as usize;
        let y0 = b.y_min.floor().max(0.0) as usize;
        let x1 = (b.x_max.ceil().max(0.0) as usize).min(w);
        let y1 = (b.y_max.ceil().max(0.0) as usize).min(h);
        let instance = match resolved {
            Resolved::Class(c) if table.is_instanceable(c) => {
                u16::try_from(ann.instance_id(i)).map_err(|_| {
                    Error::format("annotation", format!("instance id {} exceeds 16 bits", ann.instance_id(i)))
                })?
            }
            _ => 0,
        };
        let value = match resolved {
            Resolved::Class(c) => c as u8,
            Resolved::Void => IGNORE_ID,
        };
        for y in y0..y1 {
            for x in x0..x1 {
                if inside(&o.polygon, x as f64 + 0.5, y as f64 + 0.5) {
                    labels.set(x, y, value);
                    instances.set(x, y, instance);
                }
            }
        }
    }
    Ok((labels, instances))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(objects: Vec<AnnotatedObject>) -> AnnotationFile {
        AnnotationFile {
            width: 16,
            height: 16,
            objects,
        }
    }

    fn obj(label: &str, polygon: Vec<[f64; 2]>) -> AnnotatedObject {
        AnnotatedObject {
            label: label.into(),
            polygon,
            instance_id: None,
            occlusion: None,
            truncation: None,
        }
    }

    #[test]
    fn polygon_examples() {
        let t = ClassTable::synthetic();
        let a = ann(vec![
            obj("car", vec![[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]]),
            obj("person", vec![[2.0, 3.0], [9.0, 3.0], [9.0, 12.0], [2.0, 12.0]]),
            obj("car", vec![[5.0, 5.0]]),
            obj("road", vec![[0.0, 0.0], [16.0, 16.0]]),
        ]);
        let out = boxes_from_polygons(&a, &t).unwrap();
        assert_eq!(out.degenerate, 1);
        assert_eq!(out.objects.len(), 2);
        assert_eq!(out.objects[0].bbox, BBox::new(0.0, 0.0, 4.0, 4.0));
        assert_eq!(out.objects[1].bbox, BBox::new(2.0, 3.0, 9.0, 12.0));
        assert_eq!((out.objects[1].class_id, out.objects[1].instance_id), (1, 2));
    }

    #[test]
    fn unknown_label_is_reported() {
        let a = ann(vec![obj("unicorn", vec![[0.0, 0.0], [1.0, 1.0]])]);
        let err = boxes_from_polygons(&a, &ClassTable::synthetic()).unwrap_err();
        assert!(err.to_string().contains("unicorn"));
    }

    #[test]
    fn json_field_names() {
        let text = r#"{"imgWidth": 8, "imgHeight": 4, "objects": [
            {"label": "car", "polygon": [[1, 1], [3, 1], [3, 3], [1, 3]], "instanceId": 7}]}"#;
        let a = AnnotationFile::from_json(text).unwrap();
        assert_eq!(a.objects[0].instance_id, Some(7));
        assert!(AnnotationFile::from_json(r#"{"imgWidth": 8, "imgHeight": 4, "objects": [{"label": "car", "polygon": []}]}"#).is_err());
    }

    #[test]
    fn rasterize_rectangle() {
        let t = ClassTable::synthetic();
        let a = ann(vec![
            obj("road", vec![[0.0, 0.0], [16.0, 0.0], [16.0, 16.0], [0.0, 16.0]]),
            obj("car", vec![[2.0, 3.0], [6.0, 3.0], [6.0, 5.0], [2.0, 5.0]]),
        ]);
        let (labels, inst) = rasterize(&a, &t).unwrap();
        assert_eq!(labels.count(3), 8);
        assert_eq!(labels.count(0), 256 - 8);
        assert_eq!(inst.data().iter().filter(|&&v| v == 2).count(), 8);
    }
}
