//! Run configuration.
//!
//! A run is described by one JSON document. Values resolve in the order
//! command-line flag, then environment (`LAYERPROBE_OUTPUT` for the output
//! root), then config file, then built-in default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{sha256_hex, SplitRatios};
use crate::error::{parse_error, Error, Result};
use crate::probe::TrainConfig;
use crate::prompts::{Condition, TemplateId};

pub const OUTPUT_ENV: &str = "LAYERPROBE_OUTPUT";
pub const DEFAULT_OUTPUT: &str = "layerprobe-out";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecognitionSelection {
    None,
    All,
    Categories(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSelection {
    pub entailment: bool,
    pub recognition: RecognitionSelection,
}

impl Default for TaskSelection {
    fn default() -> Self {
        Self {
            entailment: true,
            recognition: RecognitionSelection::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaseStudyConfig {
    pub category: String,
    pub sample_size: usize,
    pub top_k: usize,
}

impl Default for CaseStudyConfig {
    fn default() -> Self {
        Self {
            category: "person".into(),
            sample_size: 10_000,
            top_k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: Option<String>,
    pub captions_path: Option<PathBuf>,
    pub instances_path: Option<PathBuf>,
    /// Caption-embedding run used for hard-negative mining.
    pub embedding_run: Option<PathBuf>,
    /// Hidden-state runs produced by the extractor.
    pub feature_runs: Vec<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub global_seed: u64,
    pub pool_size: usize,
    pub split_ratios: SplitRatios,
    pub shuffle_epoch: u64,
    pub tasks: TaskSelection,
    /// Recognition templates to build datasets for.
    pub recognition_templates: Vec<TemplateId>,
    pub train: TrainConfig<f64>,
    pub case_study: CaseStudyConfig,
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: None,
            captions_path: None,
            instances_path: None,
            embedding_run: None,
            feature_runs: Vec::new(),
            output_dir: None,
            global_seed: 0,
            pool_size: 5000,
            split_ratios: SplitRatios::default(),
            shuffle_epoch: 0,
            tasks: TaskSelection::default(),
            recognition_templates: vec![TemplateId::REC_WITHCAT, TemplateId::REC_NOCAT],
            train: TrainConfig::default(),
            case_study: CaseStudyConfig::default(),
            workers: None,
        }
    }
}

/// Fields that shape the dataset dumps.
#[derive(Serialize)]
struct DatasetView<'a> {
    global_seed: u64,
    pool_size: usize,
    split_ratios: &'a SplitRatios,
    shuffle_epoch: u64,
    tasks: &'a TaskSelection,
    recognition_templates: &'a [TemplateId],
}

impl RunConfig {
    pub fn from_json_str(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| parse_error(path, text, &e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, path)
    }

    /// Config file if given, else defaults; then the environment override.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::read(p)?,
            None => Self::default(),
        };
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()) {
            self.output_dir = Some(PathBuf::from(dir));
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
    }

    pub fn validate(&self) -> Result<()> {
        self.split_ratios.validate()?;
        self.train.validate()?;
        if self.pool_size == 0 {
            return Err(Error::Invalid("pool_size must be positive".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Invalid("workers must be positive".into()));
        }
        if self.case_study.sample_size == 0 || self.case_study.top_k == 0 {
            return Err(Error::Invalid("case study sample_size and top_k must be positive".into()));
        }
        if let Some(t) = self.recognition_templates.iter().find(|t| !t.is_recognition()) {
            return Err(Error::Invalid(format!("{t} is not a recognition template")));
        }
        let mut seen = self.recognition_templates.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.recognition_templates.len() {
            return Err(Error::Invalid("recognition_templates lists a template twice".into()));
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\', ',']) || id.starts_with('.') {
                return Err(Error::Invalid(format!("run_id {id:?} is not a plain directory name")));
            }
        }
        Ok(())
    }

    /// Echo recorded in artifacts: everything except the output location and
    /// the worker count, neither of which may influence results.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let map = v.as_object_mut().expect("config is an object");
        map.remove("output_dir");
        map.remove("workers");
        v
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.echo()).expect("echo serializes"))
    }

    /// Hash over the fields that determine dataset dumps only, so probe or
    /// report settings can change without invalidating extracted features.
    pub fn dataset_config_hash(&self) -> String {
        let view = DatasetView {
            global_seed: self.global_seed,
            pool_size: self.pool_size,
            split_ratios: &self.split_ratios,
            shuffle_epoch: self.shuffle_epoch,
            tasks: &self.tasks,
            recognition_templates: &self.recognition_templates,
        };
        sha256_hex(&serde_json::to_vec(&view).expect("view serializes"))
    }

    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("run-{}", &self.config_hash()[..12]))
    }
}

/// Condition a recognition template belongs to. The variant prompts carry
/// category cues, so they pair with WithCat.
pub fn template_condition(t: TemplateId) -> Option<Condition> {
    match t {
        TemplateId::ENTAIL => None,
        TemplateId::REC_NOCAT => Some(Condition::NoCat),
        TemplateId::REC_WITHCAT | TemplateId::VAR1 | TemplateId::VAR2 | TemplateId::VAR3 => Some(Condition::WithCat),
    }
}
