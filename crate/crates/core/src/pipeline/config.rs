use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::classes::ClassTable;
use super::synth::SceneSpec;
use crate::assign::AssignConfig;
use crate::error::{Error, Result};
use crate::geom::{template_preset, AnchorTemplate, PAPER_PRESET};
use crate::loss::LrSchedule;
use crate::net::train::{LossOptions, TrainOptions};
use crate::net::{ModelConfig, BACKBONE_STRIDE};
use crate::post::{DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD};

/// Environment variable overriding [`RunConfig::seed`].
pub const SEED_ENV: &str = "NNAD_SEED";

/// Anchor templates: a named preset or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnchorSpec {
    Preset(String),
    Templates(Vec<AnchorTemplate>),
}

impl Default for AnchorSpec {
    fn default() -> Self {
        AnchorSpec::Preset(PAPER_PRESET.into())
    }
}

impl AnchorSpec {
    pub fn templates(&self) -> Result<Vec<AnchorTemplate>> {
        match self {
            AnchorSpec::Preset(name) => template_preset(name),
            AnchorSpec::Templates(list) => {
                if list.is_empty() {
                    return Err(Error::invalid("anchors", "template list is empty"));
                }
                for t in list {
                    t.validate()?;
                }
                Ok(list.clone())
            }
        }
    }
}

/// Class table: a named preset or a full table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassTableSpec {
    Preset(String),
    Table(ClassTable),
}

impl Default for ClassTableSpec {
    fn default() -> Self {
        ClassTableSpec::Preset("synthetic".into())
    }
}

impl ClassTableSpec {
    pub fn table(&self) -> Result<ClassTable> {
        let t = match self {
            ClassTableSpec::Preset(name) => ClassTable::preset(name)?,
            ClassTableSpec::Table(t) => t.clone(),
        };
        t.validate()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub score: f64,
    pub nms_iou: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            score: DEFAULT_SCORE_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
        }
    }
}

/// Synthetic data used when no `data_dir` is given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub scene: SceneSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 5,
            scene: SceneSpec::default(),
        }
    }
}

fn default_stride() -> usize {
    BACKBONE_STRIDE
}

fn default_embedding_dim() -> usize {
    4
}

/// One JSON document describing a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory written by `nnad synth`; when absent, scenes are generated from `synth`.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to the toy network sized for the class table and anchors.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub anchors: AnchorSpec,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub assign: AssignConfig,
    pub schedule: LrSchedule,
    pub iterations: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub loss: LossOptions,
    #[serde(default = "yes")]
    pub learn_uncertainty: bool,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub class_table: ClassTableSpec,
    #[serde(default)]
    pub synth: SynthConfig,
}

fn yes() -> bool {
    true
}

impl RunConfig {
    /// Parses and validates a config file; relative paths resolve against
    /// the file's directory and `NNAD_SEED` overrides the seed.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::from(e).at(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(d) = &mut cfg.data_dir {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::invalid("NNAD_SEED", format!("`{v}` is not a u64")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = &self.data_dir {
            if !d.is_dir() {
                return Err(Error::invalid(
                    "data_dir",
                    format!("{} is not a directory", d.display()),
                ));
            }
        }
        if self.stride != BACKBONE_STRIDE {
            return Err(Error::invalid(
                "stride",
                format!("must equal the backbone stride {BACKBONE_STRIDE}"),
            ));
        }
        self.anchors.templates()?;
        self.assign.validate()?;
        self.class_table.table()?;
        self.train_options().validate()?;
        self.synth.scene.validate()?;
        for (name, v) in [("score", self.thresholds.score), ("nms_iou", self.thresholds.nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid("thresholds", format!("{name} must be in [0, 1]")));
            }
        }
        self.model_config()?.validate()
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            iterations: self.iterations,
            batch_size: self.batch_size,
            schedule: self.schedule,
            loss: self.loss,
            learn_uncertainty: self.learn_uncertainty,
        }
    }

    /// The explicit model, or the toy network for this class table and anchor set.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let table = self.class_table.table()?;
        let t = self.anchors.templates()?.len();
        let cfg = match &self.model {
            Some(m) => m.clone(),
            None => ModelConfig::toy(
                table.num_classes(),
                table.num_detection_classes(),
                self.embedding_dim,
                t,
            ),
        };
        if cfg.num_classes != table.num_classes()
            || cfg.num_object_classes != table.num_detection_classes()
            || cfg.anchors_per_cell != t
        {
            return Err(Error::invalid(
                "model",
                "num_classes / num_object_classes / anchors_per_cell disagree with the class table and anchors",
            ));
        }
        Ok(cfg)
    }

    /// Settings of the reference desk-scale overfit run.
    pub fn toy(out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            data_dir: None,
            out_dir: out_dir.into(),
            seed: 7,
            model: None,
            embedding_dim: default_embedding_dim(),
            anchors: AnchorSpec::default(),
            stride: BACKBONE_STRIDE,
            assign: AssignConfig::default(),
            schedule: LrSchedule {
                base_lr: 0.004,
                max_iter: 1500,
                power: 0.9,
            },
            iterations: 1500,
            batch_size: 5,
            loss: LossOptions::default(),
            learn_uncertainty: true,
            // decision point of the overfit check, not a general default
            thresholds: Thresholds {
                score: 0.98,
                nms_iou: 0.3,
            },
            class_table: ClassTableSpec::default(),
            synth: SynthConfig::default(),
        }
    }
}
