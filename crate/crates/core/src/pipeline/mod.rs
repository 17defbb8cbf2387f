//! Data ingestion, synthetic scenes, run configuration, and the glue used by
//! the command-line interface.

mod annotation;
mod classes;
pub mod cli;
mod config;
pub mod image_io;
mod synth;

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

pub use annotation::{
    boxes_from_polygons, polygon_bbox, rasterize, AnnotatedObject, AnnotationFile, ExtractedBoxes,
};
pub use classes::{ClassEntry, ClassTable, Resolved};
pub use config::{
    AnchorSpec, ClassTableSpec, RunConfig, SynthConfig, Thresholds, SEED_ENV,
};
pub use image_io::RgbImage;
pub use synth::{synth_dataset, synth_scene, SceneSpec, SynthScene};

use crate::assign::{assign_targets, AssignConfig, GroundTruthObject};
use crate::error::{Error, Result};
use crate::eval::{seg_confusion, ConfusionMatrix, InstanceMap, LabelMap};
use crate::geom::{iou as iou_fn, make_anchor_grid, AnchorGrid, AnchorTemplate};
use crate::net::checkpoint::Checkpoint;
use crate::net::train::{train_toy, IterationRecord, TrainReport, TrainSample};
use crate::net::{Model, Tensor};
use crate::post::{decode_detections, nms, Detection};

/// Writes `path` through a temporary file in the same directory, so readers
/// never see a partial file.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn std::io::Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let run = || -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        {
            let mut w = std::io::BufWriter::new(tmp.as_file_mut());
            write(&mut w)?;
            std::io::Write::flush(&mut w)?;
        }
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    };
    run().map_err(|e| e.at(path))
}

pub(crate) fn open_read(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    std::fs::File::open(path)
        .map(std::io::BufReader::new)
        .map_err(|e| Error::from(e).at(path))
}

pub(crate) fn read_with<T>(path: &Path, f: impl FnOnce(std::io::BufReader<std::fs::File>) -> Result<T>) -> Result<T> {
    f(open_read(path)?).map_err(|e| e.at(path))
}

/// One annotated image of a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub rgb: RgbImage,
    pub labels: LabelMap,
    pub instances: InstanceMap,
    pub objects: Vec<GroundTruthObject>,
}

/// File names of one scene inside a dataset directory.
pub struct ScenePaths {
    pub image: PathBuf,
    pub labels: PathBuf,
    pub instances: PathBuf,
    pub annotation: PathBuf,
}

impl ScenePaths {
    pub fn new(dir: &Path, id: &str) -> Self {
        ScenePaths {
            image: dir.join(format!("{id}.ppm")),
            labels: dir.join(format!("{id}_labels.pgm")),
            instances: dir.join(format!("{id}_instances.pgm")),
            annotation: dir.join(format!("{id}.json")),
        }
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:03}")
}

/// Writes a synthetic scene as `<id>.ppm`, `<id>_labels.pgm`,
/// `<id>_instances.pgm` and `<id>.json`.
pub fn write_scene(dir: &Path, id: &str, scene: &SynthScene) -> Result<()> {
    let p = ScenePaths::new(dir, id);
    write_atomic(&p.image, |w| image_io::write_ppm(w, &scene.rgb))?;
    write_atomic(&p.labels, |w| image_io::write_label_pgm(w, &scene.labels))?;
    write_atomic(&p.instances, |w| image_io::write_instance_pgm(w, &scene.instances))?;
    write_atomic(&p.annotation, |w| {
        serde_json::to_writer_pretty(&mut *w, &scene.annotation)?;
        Ok(())
    })
}

/// Ids of every `<id>.json` annotation in `dir`, sorted.
pub fn annotation_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::from(e).at(dir))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn load_annotation(path: &Path) -> Result<AnnotationFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
    AnnotationFile::from_json(&text).map_err(|e| e.at(path))
}

/// Loads a dataset directory. Label and instance maps are rasterized from the
/// polygons when their files are missing.
pub fn load_dataset_dir(dir: &Path, table: &ClassTable) -> Result<Vec<DatasetItem>> {
    let ids = annotation_ids(dir)?;
    if ids.is_empty() {
        return Err(Error::invalid(
            "data_dir",
            format!("no annotations in {}", dir.display()),
        ));
    }
    ids.into_iter()
        .map(|id| {
            let p = ScenePaths::new(dir, &id);
            let ann = load_annotation(&p.annotation)?;
            let rgb = read_with(&p.image, image_io::read_ppm)?;
            if (rgb.width, rgb.height) != (ann.width, ann.height) {
                return Err(Error::shape(
                    "image vs annotation size",
                    (ann.width, ann.height),
                    (rgb.width, rgb.height),
                )
                .at(&p.image));
            }
            let (labels, instances) = if p.labels.exists() {
                let labels = read_with(&p.labels, image_io::read_label_pgm)?;
                let instances = if p.instances.exists() {
                    read_with(&p.instances, image_io::read_instance_pgm)?
                } else {
                    InstanceMap::empty(ann.width, ann.height)
                };
                (labels, instances)
            } else {
                rasterize(&ann, table).map_err(|e| e.at(&p.annotation))?
            };
            labels
                .validate(table.num_classes())
                .map_err(|e| e.at(&p.labels))?;
            let objects = boxes_from_polygons(&ann, table)
                .map_err(|e| e.at(&p.annotation))?
                .objects;
            Ok(DatasetItem {
                id,
                rgb,
                labels,
                instances,
                objects,
            })
        })
        .collect()
}

impl DatasetItem {
    pub fn from_scene(id: String, scene: &SynthScene) -> Self {
        DatasetItem {
            id,
            rgb: scene.rgb.clone(),
            labels: scene.labels.clone(),
            instances: scene.instances.clone(),
            objects: scene.objects.clone(),
        }
    }
}

/// Anchor grids are cached per image size.
#[derive(Debug, Clone, Default)]
pub struct GridCache {
    templates: Vec<AnchorTemplate>,
    stride: usize,
    grids: Vec<AnchorGrid>,
}

impl GridCache {
    pub fn new(templates: Vec<AnchorTemplate>, stride: usize) -> Self {
        GridCache {
            templates,
            stride,
            grids: Vec::new(),
        }
    }

    pub fn get(&mut self, width: usize, height: usize) -> Result<&AnchorGrid> {
        let pos = match self.grids.iter().position(|g| g.image_size() == (width, height)) {
            Some(p) => p,
            None => {
                self.grids
                    .push(make_anchor_grid(width, height, self.stride, &self.templates)?);
                self.grids.len() - 1
            }
        };
        Ok(&self.grids[pos])
    }
}

/// Assigns anchor targets to every item.
pub fn build_samples(
    items: &[DatasetItem],
    grids: &mut GridCache,
    assign: &AssignConfig,
) -> Result<Vec<TrainSample>> {
    items
        .iter()
        .map(|it| {
            let (w, h) = (it.rgb.width, it.rgb.height);
            let grid = grids.get(w, h)?;
            let targets = assign_targets(grid, &it.objects, w, h, assign)?;
            TrainSample::new(it.rgb.to_tensor(), it.labels.clone(), targets)
        })
        .collect()
}

/// The training dataset of a run: `data_dir` or the configured synthetic scenes.
pub fn run_dataset(cfg: &RunConfig) -> Result<Vec<DatasetItem>> {
    let table = cfg.class_table.table()?;
    match &cfg.data_dir {
        Some(dir) => load_dataset_dir(dir, &table),
        None => Ok(synth_dataset(cfg.seed, cfg.synth.count, &cfg.synth.scene)?
            .iter()
            .enumerate()
            .map(|(i, s)| DatasetItem::from_scene(scene_id(i), s))
            .collect()),
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub report: TrainReport,
    pub checkpoint: Checkpoint,
}

/// Runs a full training job without touching the file system.
pub fn train_run(
    cfg: &RunConfig,
    items: &[DatasetItem],
    on_iteration: impl FnMut(&IterationRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let table = cfg.class_table.table()?;
    let templates = cfg.anchors.templates()?;
    let mut grids = GridCache::new(templates.clone(), cfg.stride);
    let samples = build_samples(items, &mut grids, &cfg.assign)?;
    let mut model = Model::new(cfg.model_config()?, cfg.seed)?;
    let report = train_toy(&samples, &mut model, &cfg.train_options(), on_iteration)?;
    let meta = json!({
        "anchors": templates,
        "stride": cfg.stride,
        "class_table": table,
        "thresholds": cfg.thresholds,
        "uncertainty": report.uncertainty,
        "seed": cfg.seed,
        "iterations": cfg.iterations,
    });
    let checkpoint = Checkpoint::from_model(meta, &model)?;
    Ok(TrainOutcome {
        model,
        report,
        checkpoint,
    })
}

/// Per-image inference output.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// After score thresholding and NMS.
    pub detections: Vec<Detection>,
    pub segmentation: LabelMap,
}

/// A trained model with everything needed to turn images into predictions.
pub struct Detector {
    pub model: Model,
    pub table: ClassTable,
    pub thresholds: Thresholds,
    grids: GridCache,
}

impl Detector {
    pub fn new(
        model: Model,
        table: ClassTable,
        templates: Vec<AnchorTemplate>,
        stride: usize,
        thresholds: Thresholds,
    ) -> Result<Self> {
        let c = model.config();
        if c.anchors_per_cell != templates.len()
            || c.num_object_classes != table.num_detection_classes()
            || c.num_classes != table.num_classes()
        {
            return Err(Error::invalid(
                "detector",
                "model heads disagree with the anchors or class table",
            ));
        }
        Ok(Detector {
            model,
            table,
            thresholds,
            grids: GridCache::new(templates, stride),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |key: &str| {
            ck.meta
                .get(key)
                .cloned()
                .ok_or_else(|| Error::format("checkpoint", format!("metadata has no `{key}`")))
        };
        let templates: Vec<AnchorTemplate> = serde_json::from_value(get("anchors")?)?;
        let stride: usize = serde_json::from_value(get("stride")?)?;
        let table: ClassTable = serde_json::from_value(get("class_table")?)?;
        table.validate()?;
        let thresholds: Thresholds = serde_json::from_value(get("thresholds")?)?;
        Detector::new(ck.build_model()?, table, templates, stride, thresholds)
    }

    pub fn predict(&mut self, image: &RgbImage) -> Result<Prediction> {
        let out = self.model.forward(&image.to_tensor())?;
        let grid = self.grids.get(image.width, image.height)?;
        let raw = decode_detections(&out, 0, grid, self.thresholds.score)?;
        Ok(Prediction {
            detections: nms(&raw, self.thresholds.nms_iou),
            segmentation: argmax_labels(&out.seg, 0),
        })
    }
}

/// How well a detector reproduces its own training data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub pixel_accuracy: f64,
    pub ground_truths: usize,
    /// Ground truths matched by a same-class detection at IoU ≥ `iou`.
    pub recovered: usize,
    pub false_positives_per_image: Vec<usize>,
    pub iou: f64,
}

impl FitReport {
    pub fn max_false_positives(&self) -> usize {
        self.false_positives_per_image.iter().copied().max().unwrap_or(0)
    }
}

/// Predicts every item and matches detections one-to-one to ground truth,
/// highest score first.
pub fn fit_report(detector: &mut Detector, items: &[DatasetItem], iou: f64) -> Result<FitReport> {
    let n = detector.table.num_classes();
    let mut conf = ConfusionMatrix::new(n);
    let (mut total, mut recovered) = (0, 0);
    let mut fps = Vec::with_capacity(items.len());
    for item in items {
        let pred = detector.predict(&item.rgb)?;
        conf.merge(&seg_confusion(&pred.segmentation, &item.labels, n)?)?;
        let mut taken = vec![false; item.objects.len()];
        let mut fp = 0;
        for d in &pred.detections {
            let hit = item
                .objects
                .iter()
                .enumerate()
                .filter(|(j, g)| !taken[*j] && g.class_id == d.class_id)
                .map(|(j, g)| (j, iou_fn(&d.bbox, &g.bbox)))
                .filter(|&(_, v)| v >= iou)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match hit {
                Some((j, _)) => taken[j] = true,
                None => fp += 1,
            }
        }
        total += item.objects.len();
        recovered += taken.iter().filter(|&&t| t).count();
        fps.push(fp);
    }
    Ok(FitReport {
        pixel_accuracy: conf.pixel_accuracy().unwrap_or(0.0),
        ground_truths: total,
        recovered,
        false_positives_per_image: fps,
        iou,
    })
}

/// Per-pixel argmax over the class channels of image `n`.
pub fn argmax_labels(seg: &Tensor, n: usize) -> LabelMap {
    let (c, h, w) = (seg.channels(), seg.height(), seg.width());
    let plane = h * w;
    let s = seg.sample(n);
    let data = (0..plane)
        .map(|p| {
            (0..c)
                .fold((0usize, f64::NEG_INFINITY), |best, k| {
                    let v = s[k * plane + p];
                    if v > best.1 {
                        (k, v)
                    } else {
                        best
                    }
                })
                .0 as u8
        })
        .collect();
    LabelMap::new(w, h, data).expect("sized")
}
