//! The `nnad` command line.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use super::{
    annotation_ids, image_io, load_annotation, read_with, run_dataset, scene_id, synth_dataset,
    train_run, write_atomic, write_scene, ClassTable, Detector, RunConfig, SceneSpec, ScenePaths,
};
use crate::assign::{
    assign_targets, summarize_targets, write_targets_jsonl, AssignConfig, GroundTruthObject,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_class, write_pr_csv, ApByLevel, DifficultyLevel, DifficultyMode, MetricsReport,
    ScoredBox, SegAccumulator,
};
use crate::geom::{make_anchor_grid, templates_from_json, template_preset, PAPER_PRESET};
use crate::net::checkpoint::Checkpoint;
use crate::net::BACKBONE_STRIDE;
use crate::post::{read_detections_jsonl, write_detections_jsonl, DetectionRecord};

#[derive(Parser, Debug)]
#[command(name = "nnad", version, about = "Joint segmentation and detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Anchor lattice statistics for an image size.
    Anchors(AnchorsArgs),
    /// Anchor targets of one annotation file.
    Assign(AssignArgs),
    /// Write a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train from a run config; writes model.nnad and loss_history.csv.
    TrainToy(TrainArgs),
    /// Run a checkpoint on PPM images; writes detections as JSON lines.
    Detect(DetectArgs),
    /// Segmentation IoU / iIoU of predicted label maps.
    EvalSeg(EvalSegArgs),
    /// Detection AP per class and difficulty level.
    EvalDet(EvalDetArgs),
    /// Run the built-in oracle and gradient checks.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct TemplateArgs {
    /// Named template preset.
    #[arg(long, default_value = PAPER_PRESET, conflicts_with = "templates")]
    preset: String,
    /// JSON file with a list of {ratio, area} templates.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, default_value_t = BACKBONE_STRIDE)]
    stride: usize,
}

impl TemplateArgs {
    fn load(&self) -> Result<Vec<crate::geom::AnchorTemplate>> {
        match &self.templates {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::from(e).at(p))?;
                templates_from_json(&text).map_err(|e| e.at(p))
            }
            None => template_preset(&self.preset),
        }
    }
}

#[derive(Args, Debug)]
struct AnchorsArgs {
    /// Image size as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_size)]
    image: (usize, usize),
    #[command(flatten)]
    templates: TemplateArgs,
    /// Write every anchor box as JSON lines.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AssignArgs {
    #[arg(long)]
    annotation: PathBuf,
    #[command(flatten)]
    templates: TemplateArgs,
    /// Class table preset name or JSON file.
    #[arg(long, default_value = "synthetic")]
    class_table: String,
    /// Per-anchor targets as JSON lines.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    count: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 2)]
    objects: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides both `iterations` and the schedule length.
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write `<image id>_pred.pgm` segmentation maps here.
    #[arg(long)]
    seg_dir: Option<PathBuf>,
    #[arg(long)]
    score_threshold: Option<f64>,
    #[arg(long)]
    nms_iou: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalSegArgs {
    #[arg(long, num_args = 1.., required = true)]
    pred: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    gt: Vec<PathBuf>,
    /// 16-bit instance maps aligned with `--gt`, for iIoU.
    #[arg(long, num_args = 1..)]
    instances: Vec<PathBuf>,
    #[arg(long, default_value = "synthetic")]
    class_table: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalDetArgs {
    #[arg(long)]
    detections: PathBuf,
    /// Directory of `<image id>.json` annotations.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value = "cityscapes-adjusted")]
    mode: DifficultyMode,
    #[arg(long, default_value = "synthetic")]
    class_table: String,
    /// Per-class IoU threshold as CLASS=VALUE; repeatable.
    #[arg(long = "iou", value_parser = parse_class_iou)]
    iou: Vec<(String, f64)>,
    #[arg(long)]
    out: PathBuf,
    /// Write `<class>_<level>.csv` PR curves here.
    #[arg(long)]
    pr_csv_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Fewer randomized cases.
    #[arg(long)]
    quick: bool,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad size `{s}`"));
    Ok((parse(w)?, parse(h)?))
}

fn parse_class_iou(s: &str) -> std::result::Result<(String, f64), String> {
    let (c, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected CLASS=VALUE, got `{s}`"))?;
    let v: f64 = v.parse().map_err(|_| format!("bad IoU `{v}`"))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("IoU {v} outside [0, 1]"));
    }
    Ok((c.to_string(), v))
}

/// Default detection IoU threshold of a class (KITTI convention).
pub fn default_class_iou(class: &str) -> f64 {
    match class {
        "car" => 0.7,
        _ => 0.5,
    }
}

fn class_table(spec: &str) -> Result<ClassTable> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
        let t: ClassTable = serde_json::from_str(&text).map_err(|e| Error::from(e).at(path))?;
        t.validate().map_err(|e| e.at(path))?;
        Ok(t)
    } else {
        ClassTable::preset(spec)
    }
}

fn print_json(out: &mut dyn Write, v: &impl serde::Serialize) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, v)?;
    writeln!(out)?;
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, v)?;
        writeln!(w)?;
        Ok(())
    })
}

fn file_stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::invalid("path", format!("no file name in {}", path.display())))
}

fn cmd_anchors(a: &AnchorsArgs, out: &mut dyn Write) -> Result<()> {
    let templates = a.templates.load()?;
    let (w, h) = a.image;
    let grid = make_anchor_grid(w, h, a.templates.stride, &templates)?;
    if let Some(path) = &a.dump {
        write_atomic(path, |wr| {
            for (i, b) in grid.boxes().iter().enumerate() {
                let (row, col, t) = grid.locate(i);
                serde_json::to_writer(
                    &mut *wr,
                    &json!({
                        "index": i, "row": row, "col": col, "template": t,
                        "x_min": b.x_min, "y_min": b.y_min, "x_max": b.x_max, "y_max": b.y_max,
                        "outside": grid.is_outside(i),
                    }),
                )?;
                writeln!(wr)?;
            }
            Ok(())
        })?;
    }
    print_json(
        out,
        &json!({
            "image_width": w,
            "image_height": h,
            "stride": grid.stride(),
            "rows": grid.rows(),
            "cols": grid.cols(),
            "templates": grid.anchors_per_cell(),
            "anchors": grid.len(),
            "outside": grid.outside_count(),
        }),
    )
}

fn cmd_assign(a: &AssignArgs, out: &mut dyn Write) -> Result<()> {
    let table = class_table(&a.class_table)?;
    let ann = load_annotation(&a.annotation)?;
    let boxes = super::boxes_from_polygons(&ann, &table).map_err(|e| e.at(&a.annotation))?;
    let templates = a.templates.load()?;
    let grid = make_anchor_grid(ann.width, ann.height, a.templates.stride, &templates)?;
    let targets = assign_targets(
        &grid,
        &boxes.objects,
        ann.width,
        ann.height,
        &AssignConfig::default(),
    )?;
    if let Some(path) = &a.out {
        write_atomic(path, |w| write_targets_jsonl(w, &targets))?;
    }
    let summary = summarize_targets(&targets);
    let per_class: BTreeMap<&str, usize> = summary
        .active_per_class
        .iter()
        .map(|(&c, &n)| (table.detection_name(c), n))
        .collect();
    print_json(
        out,
        &json!({
            "anchors": targets.len(),
            "objects": boxes.objects.len(),
            "degenerate_dropped": boxes.degenerate,
            "inactive": summary.inactive,
            "dontcare": summary.dontcare,
            "active": summary.active,
            "active_per_class": per_class,
        }),
    )
}

fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SceneSpec {
        width: a.width,
        height: a.height,
        objects: a.objects,
        ..SceneSpec::default()
    };
    let scenes = synth_dataset(a.seed, a.count, &spec)?;
    for (i, s) in scenes.iter().enumerate() {
        write_scene(&a.out, &scene_id(i), s)?;
    }
    print_json(
        out,
        &json!({
            "scenes": scenes.len(),
            "objects": scenes.iter().map(|s| s.objects.len()).sum::<usize>(),
            "out": a.out,
        }),
    )
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(n) = a.iterations {
        cfg.iterations = n;
        cfg.schedule.max_iter = n.max(1);
    }
    if let Some(d) = &a.out_dir {
        cfg.out_dir = d.clone();
    }
    cfg.validate()?;
    let items = run_dataset(&cfg)?;
    let every = (cfg.iterations / 10).max(1);
    let outcome = train_run(&cfg, &items, |r| {
        if r.iteration % every == 0 || r.iteration + 1 == cfg.iterations {
            let _ = writeln!(err, "iteration {:>6}  lr {:.3e}  loss {:.5}", r.iteration, r.lr, r.total);
        }
    })?;
    let ck_path = cfg.out_dir.join("model.nnad");
    let csv_path = cfg.out_dir.join("loss_history.csv");
    write_atomic(&ck_path, |w| outcome.checkpoint.write_to(w))?;
    write_atomic(&csv_path, |w| outcome.report.write_csv(w))?;
    print_json(
        out,
        &json!({
            "iterations": outcome.report.history.len(),
            "final_loss": outcome.report.history.last().map(|r| r.total),
            "uncertainty": outcome.report.uncertainty,
            "checkpoint": ck_path,
            "loss_history": csv_path,
        }),
    )
}

fn cmd_detect(a: &DetectArgs, out: &mut dyn Write) -> Result<()> {
    let ck = read_with(&a.checkpoint, Checkpoint::read_from)?;
    let mut det = Detector::from_checkpoint(&ck).map_err(|e| e.at(&a.checkpoint))?;
    if let Some(s) = a.score_threshold {
        det.thresholds.score = s;
    }
    if let Some(v) = a.nms_iou {
        det.thresholds.nms_iou = v;
    }
    let mut records = Vec::new();
    let mut maps = Vec::new();
    for path in &a.images {
        let id = file_stem(path)?;
        let img = read_with(path, image_io::read_ppm)?;
        let pred = det.predict(&img).map_err(|e| e.at(path))?;
        for d in &pred.detections {
            records.push(DetectionRecord::new(&id, det.table.detection_name(d.class_id), d));
        }
        maps.push((id, pred.segmentation));
    }
    write_atomic(&a.out, |w| write_detections_jsonl(w, &records))?;
    if let Some(dir) = &a.seg_dir {
        for (id, map) in &maps {
            write_atomic(&dir.join(format!("{id}_pred.pgm")), |w| {
                image_io::write_label_pgm(w, map)
            })?;
        }
    }
    print_json(
        out,
        &json!({ "images": a.images.len(), "detections": records.len(), "out": a.out }),
    )
}

fn cmd_eval_seg(a: &EvalSegArgs, out: &mut dyn Write) -> Result<()> {
    let table = class_table(&a.class_table)?;
    if a.pred.len() != a.gt.len() {
        return Err(Error::invalid("pred", "--pred and --gt need the same number of files"));
    }
    if !a.instances.is_empty() && a.instances.len() != a.gt.len() {
        return Err(Error::invalid("instances", "--instances must align with --gt"));
    }
    let mut acc = SegAccumulator::new(table.num_classes());
    for (i, (p, g)) in a.pred.iter().zip(&a.gt).enumerate() {
        let pred = read_with(p, image_io::read_label_pgm)?;
        let gt = read_with(g, image_io::read_label_pgm)?;
        let inst = match a.instances.get(i) {
            Some(path) => Some(read_with(path, image_io::read_instance_pgm)?),
            None => None,
        };
        acc.add(&pred, &gt, inst.as_ref(), &table).map_err(|e| e.at(p))?;
    }
    let report = MetricsReport::from_seg(&acc.finish(&table)?);
    write_json(&a.out, &report)?;
    print_json(out, &report)
}

fn cmd_eval_det(a: &EvalDetArgs, out: &mut dyn Write) -> Result<()> {
    let table = class_table(&a.class_table)?;
    let records = read_with(&a.detections, |r| read_detections_jsonl(r))?;
    let ids = annotation_ids(&a.annotations)?;
    if ids.is_empty() {
        return Err(Error::invalid(
            "annotations",
            format!("no annotations in {}", a.annotations.display()),
        ));
    }
    let mut gts: Vec<Vec<GroundTruthObject>> = Vec::with_capacity(ids.len());
    for id in &ids {
        let path = ScenePaths::new(&a.annotations, id).annotation;
        let ann = load_annotation(&path)?;
        gts.push(super::boxes_from_polygons(&ann, &table).map_err(|e| e.at(&path))?.objects);
    }
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut dets: Vec<Vec<ScoredBox>> = vec![Vec::new(); ids.len()];
    for r in &records {
        let &img = index.get(r.image_id.as_str()).ok_or_else(|| {
            Error::format("detections", format!("image `{}` has no annotation", r.image_id))
                .at(&a.detections)
        })?;
        let class_id = table
            .detection_id(&r.class)
            .ok_or_else(|| Error::UnknownLabel(r.class.clone()).at(&a.detections))?;
        dets[img].push(ScoredBox {
            bbox: r.bbox(),
            score: r.score,
            class_id,
        });
    }
    let overrides: HashMap<&str, f64> = a.iou.iter().map(|(c, v)| (c.as_str(), *v)).collect();
    for c in overrides.keys() {
        if table.detection_id(c).is_none() {
            return Err(Error::UnknownLabel(c.to_string()));
        }
    }

    let mut report = MetricsReport {
        mode: Some(
            match a.mode {
                DifficultyMode::Kitti => "kitti",
                DifficultyMode::CityscapesAdjusted => "cityscapes-adjusted",
            }
            .into(),
        ),
        ..Default::default()
    };
    let mut curves = Vec::new();
    for class_id in 0..table.num_detection_classes() {
        let name = table.detection_name(class_id);
        let thr = overrides.get(name).copied().unwrap_or_else(|| default_class_iou(name));
        let mut by_level = ApByLevel::default();
        for level in DifficultyLevel::all(a.mode) {
            let curve = evaluate_class(
                dets.iter().zip(&gts).map(|(d, g)| (d.as_slice(), g.as_slice())),
                class_id,
                thr,
                &level,
            );
            by_level.set(level.difficulty, curve.as_ref().map(|c| c.ap));
            if let Some(c) = curve {
                curves.push((format!("{name}_{}", level.difficulty.name()), c));
            }
        }
        report.ap.insert(name.to_string(), by_level);
    }
    write_json(&a.out, &report)?;
    if let Some(dir) = &a.pr_csv_dir {
        for (stem, c) in &curves {
            write_atomic(&dir.join(format!("{stem}.csv")), |w| write_pr_csv(w, c))?;
        }
    }
    print_json(out, &report)
}

fn cmd_selftest(a: &SelftestArgs, out: &mut dyn Write) -> Result<()> {
    let results = crate::selftest::run_all(a.quick);
    let mut failed = 0;
    for r in &results {
        writeln!(out, "{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail)?;
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(Error::invalid("selftest", format!("{failed} check(s) failed")));
    }
    Ok(())
}

fn report_error(err: &mut dyn Write, message: &str, kind: &str) {
    let line = json!({ "error": message, "kind": kind });
    let _ = writeln!(err, "{line}");
}

/// Runs the CLI with explicit output streams; returns the exit code.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error");
            report_error(err, first.trim_start_matches("error: "), "usage");
            return 2;
        }
    };
    let result = match &cli.command {
        Command::Anchors(a) => cmd_anchors(a, out),
        Command::Assign(a) => cmd_assign(a, out),
        Command::Synth(a) => cmd_synth(a, out),
        Command::TrainToy(a) => cmd_train(a, out, err),
        Command::Detect(a) => cmd_detect(a, out),
        Command::EvalSeg(a) => cmd_eval_seg(a, out),
        Command::EvalDet(a) => cmd_eval_det(a, out),
        Command::Selftest(a) => cmd_selftest(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            report_error(err, &e.to_string(), e.kind());
            1
        }
    }
}

/// Runs the CLI on the process streams.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run_with(args, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}
