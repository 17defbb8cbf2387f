use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub name: String,
    #[serde(default)]
    pub instanceable: bool,
    pub category: String,
}

impl ClassEntry {
    fn new(name: &str, category: &str, instanceable: bool) -> Self {
        ClassEntry {
            name: name.into(),
            instanceable,
            category: category.into(),
        }
    }
}

/// How an annotation label resolves against a [`ClassTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolved {
    Class(usize),
    /// Known label that is not evaluated (rasterized as ignore).
    Void,
}

/// Ordered segmentation classes plus the object-detection subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTable {
    pub classes: Vec<ClassEntry>,
    /// Names of the detection classes; detection class id = position here.
    pub detection: Vec<String>,
    #[serde(default)]
    pub void_labels: Vec<String>,
    /// Alternative label spellings, e.g. `pedestrian → person`.
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
}

const CITYSCAPES: [(&str, &str, bool); 19] = [
    ("road", "flat", false),
    ("sidewalk", "flat", false),
    ("building", "construction", false),
    ("wall", "construction", false),
    ("fence", "construction", false),
    ("pole", "object", false),
    ("traffic light", "object", false),
    ("traffic sign", "object", false),
    ("vegetation", "nature", false),
    ("terrain", "nature", false),
    ("sky", "sky", false),
    ("person", "human", true),
    ("rider", "human", true),
    ("car", "vehicle", true),
    ("truck", "vehicle", true),
    ("bus", "vehicle", true),
    ("train", "vehicle", true),
    ("motorcycle", "vehicle", true),
    ("bicycle", "vehicle", true),
];

const CITYSCAPES_VOID: [&str; 24] = [
    "unlabeled",
    "ego vehicle",
    "rectification border",
    "out of roi",
    "static",
    "dynamic",
    "ground",
    "parking",
    "rail track",
    "guard rail",
    "bridge",
    "tunnel",
    "polegroup",
    "caravan",
    "trailer",
    "license plate",
    "persongroup",
    "ridergroup",
    "cargroup",
    "truckgroup",
    "busgroup",
    "motorcyclegroup",
    "bicyclegroup",
    "traingroup",
];

impl ClassTable {
    /// The 19 evaluated Cityscapes classes; detection classes car and person.
    pub fn cityscapes() -> Self {
        ClassTable {
            classes: CITYSCAPES
                .iter()
                .map(|&(n, c, i)| ClassEntry::new(n, c, i))
                .collect(),
            detection: vec!["car".into(), "person".into()],
            void_labels: CITYSCAPES_VOID.iter().map(|s| s.to_string()).collect(),
            aliases: [("pedestrian".to_string(), "person".to_string())].into(),
        }
    }

    /// Four-class table of the synthetic scenes.
    pub fn synthetic() -> Self {
        ClassTable {
            classes: vec![
                ClassEntry::new("road", "flat", false),
                ClassEntry::new("sky", "sky", false),
                ClassEntry::new("person", "human", true),
                ClassEntry::new("car", "vehicle", true),
            ],
            detection: vec!["car".into(), "person".into()],
            void_labels: Vec::new(),
            aliases: [("pedestrian".to_string(), "person".to_string())].into(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cityscapes" => Ok(Self::cityscapes()),
            "synthetic" => Ok(Self::synthetic()),
            other => Err(Error::invalid(
                "class_table",
                format!("unknown preset `{other}` (cityscapes, synthetic)"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 || self.classes.len() > 255 {
            return Err(Error::invalid("class_table", "needs between 2 and 255 classes"));
        }
        let mut seen = HashMap::new();
        for (i, c) in self.classes.iter().enumerate() {
            if seen.insert(c.name.as_str(), i).is_some() {
                return Err(Error::invalid(
                    "class_table",
                    format!("duplicate class `{}`", c.name),
                ));
            }
        }
        if self.detection.is_empty() {
            return Err(Error::invalid("class_table", "no detection classes"));
        }
        for (i, d) in self.detection.iter().enumerate() {
            let id = *seen.get(d.as_str()).ok_or_else(|| {
                Error::invalid("class_table", format!("detection class `{d}` is not a class"))
            })?;
            if !self.classes[id].instanceable {
                return Err(Error::invalid(
                    "class_table",
                    format!("detection class `{d}` is not instanceable"),
                ));
            }
            if self.detection[..i].contains(d) {
                return Err(Error::invalid("class_table", format!("duplicate detection class `{d}`")));
            }
        }
        for v in &self.void_labels {
            if seen.contains_key(v.as_str()) {
                return Err(Error::invalid("class_table", format!("`{v}` is both class and void")));
            }
        }
        for (alias, target) in &self.aliases {
            if !seen.contains_key(target.as_str()) || seen.contains_key(alias.as_str()) {
                return Err(Error::invalid(
                    "class_table",
                    format!("bad alias `{alias}` → `{target}`"),
                ));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.classes[id].name
    }

    fn canonical<'a>(&'a self, label: &'a str) -> &'a str {
        self.aliases.get(label).map_or(label, String::as_str)
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        let label = self.canonical(label);
        self.classes.iter().position(|c| c.name == label)
    }

    pub fn is_instanceable(&self, id: usize) -> bool {
        self.classes.get(id).is_some_and(|c| c.instanceable)
    }

    pub fn resolve(&self, label: &str) -> Result<Resolved> {
        if let Some(id) = self.id(label) {
            return Ok(Resolved::Class(id));
        }
        if self.void_labels.iter().any(|v| v == label) {
            return Ok(Resolved::Void);
        }
        Err(Error::UnknownLabel(label.to_string()))
    }

    pub fn num_detection_classes(&self) -> usize {
        self.detection.len()
    }

    /// Detection class id of a label, if it is a detection class.
    pub fn detection_id(&self, label: &str) -> Option<usize> {
        let label = self.canonical(label);
        self.detection.iter().position(|d| d == label)
    }

    pub fn detection_name(&self, id: usize) -> &str {
        &self.detection[id]
    }

    /// Category names in order of first appearance.
    pub fn category_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.classes {
            if !out.contains(&c.category) {
                out.push(c.category.clone());
            }
        }
        out
    }

    /// Category position of every class.
    pub fn category_index(&self) -> Vec<usize> {
        let names = self.category_names();
        self.classes
            .iter()
            .map(|c| names.iter().position(|n| *n == c.category).expect("listed"))
            .collect()
    }
}
