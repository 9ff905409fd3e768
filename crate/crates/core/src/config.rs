//! Run configuration: one JSON document drives training, sampling and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::ode::RolloutConfig;
use crate::policy::ToyfitConfig;
use crate::student::StudentConfig;
use crate::teacher::{gen_toy_dataset, TeacherSpec, ToyDataset};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TeacherConfig {
    Ring {
        modes: usize,
        radius: f64,
        std: f64,
    },
    TwoRings {
        inner: usize,
        outer: usize,
        r_inner: f64,
        r_outer: f64,
        std: f64,
        #[serde(default = "one")]
        cfg_scale: f64,
    },
    Grid {
        side: usize,
        spacing: f64,
        std: f64,
    },
    Explicit {
        spec: TeacherSpec,
    },
}

fn one() -> f64 {
    1.0
}

impl TeacherConfig {
    pub fn build(&self) -> Result<TeacherSpec> {
        match self {
            TeacherConfig::Ring { modes, radius, std } => TeacherSpec::ring(*modes, *radius, *std),
            TeacherConfig::TwoRings {
                inner,
                outer,
                r_inner,
                r_outer,
                std,
                cfg_scale,
            } => TeacherSpec::two_rings(*inner, *outer, *r_inner, *r_outer, *std, *cfg_scale),
            TeacherConfig::Grid { side, spacing, std } => TeacherSpec::grid(*side, *spacing, *std),
            // validated on deserialization
            TeacherConfig::Explicit { spec } => Ok(spec.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    EndpointAlignment,
    SlicedWasserstein,
    Diversity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub teacher_substeps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub metrics: Vec<MetricKind>,
    pub reference: ReferenceConfig,
    pub n_projections: usize,
    /// Seed of the initial noise used for evaluation batches.
    pub sample_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_samples: 2000,
            metrics: vec![
                MetricKind::EndpointAlignment,
                MetricKind::SlicedWasserstein,
                MetricKind::Diversity,
            ],
            reference: ReferenceConfig { teacher_substeps: 128 },
            n_projections: crate::metrics::DEFAULT_PROJECTIONS,
            sample_seed: 1_000_003,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub out_dir: PathBuf,
    pub dataset_csv: Option<PathBuf>,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            out_dir: PathBuf::from("runs/default"),
            dataset_csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// One of `gm-grid`, `rings`, `checkerboard`, `csv`.
    pub name: String,
    pub n: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            name: "gm-grid".into(),
            n: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyfitRunConfig {
    pub n_targets: usize,
    pub target_seed: u64,
    pub l: usize,
    pub k: usize,
    pub c: usize,
    pub iters: usize,
    pub lr: f64,
}

impl Default for ToyfitRunConfig {
    fn default() -> Self {
        ToyfitRunConfig {
            n_targets: 4,
            target_seed: 0,
            l: 1,
            k: 8,
            c: 2,
            iters: 20_000,
            lr: 0.01,
        }
    }
}

impl ToyfitRunConfig {
    pub fn fit_config(&self, seed: u64) -> ToyfitConfig {
        ToyfitConfig {
            l: self.l,
            k: self.k,
            c: self.c,
            iters: self.iters,
            lr: self.lr,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "config_version")]
    pub version: u32,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub rollout: RolloutConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub io: IoConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub toyfit: ToyfitRunConfig,
    #[serde(default)]
    pub seed: u64,
}

fn config_version() -> u32 {
    CONFIG_VERSION
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_json_str(&text)
    }

    /// Apply cross-section defaults and validate. The run seed is authoritative
    /// for training.
    pub fn resolve(mut self) -> Result<Self> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let teacher = self.teacher.build()?;
        self.student.validate()?;
        self.train.validate()?;
        self.rollout.validate()?;
        if teacher.dim != self.student.dim {
            return Err(Error::Config(format!(
                "teacher dimension {} differs from student dimension {}",
                teacher.dim, self.student.dim
            )));
        }
        let ids = teacher.class_ids();
        if ids.len() > 1 {
            let expected: Vec<u32> = (0..ids.len() as u32).collect();
            if ids != expected || self.student.conditions != ids.len() {
                return Err(Error::Config(format!(
                    "a teacher with classes {ids:?} needs class ids 0..{} and student.conditions = {}",
                    ids.len(),
                    ids.len()
                )));
            }
        } else if self.student.conditions > 1 {
            return Err(Error::Config("single-class teacher but student.conditions > 1".into()));
        }
        if self.eval.n_samples < 2 {
            return Err(Error::Config("eval.n_samples must be at least 2".into()));
        }
        if self.eval.reference.teacher_substeps == 0 || self.eval.n_projections == 0 {
            return Err(Error::Config("eval reference substeps and projections must be positive".into()));
        }
        if self.dataset.name == "csv" && self.io.dataset_csv.is_none() {
            return Err(Error::Config("dataset 'csv' needs io.dataset_csv".into()));
        }
        if self.train.mode == Mode::DataDependent && self.dataset.n == 0 && self.dataset.name != "csv" {
            return Err(Error::Config("data-dependent training needs a non-empty dataset".into()));
        }
        Ok(())
    }

    pub fn teacher_spec(&self) -> Result<TeacherSpec> {
        self.teacher.build()
    }

    /// Dataset for data-dependent training, or `None` when the mode needs none.
    pub fn dataset(&self, teacher: &TeacherSpec) -> Result<Option<ToyDataset>> {
        if self.train.mode != Mode::DataDependent {
            return Ok(None);
        }
        let ds = gen_toy_dataset(
            &self.dataset.name,
            self.dataset.n,
            self.seed,
            teacher,
            self.io.dataset_csv.as_deref(),
        )?;
        Ok(Some(ds))
    }

    /// Write the fully resolved configuration, every default spelled out.
    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read_resolved(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.resolve()
    }
}
