//! The stages behind the command line. Each stage reads the artifacts of the
//! previous ones from the output directory and writes its own:
//!
//! | stage             | writes                                                   |
//! |-------------------|----------------------------------------------------------|
//! | ingest            | `corpus.json`, `ingest.json`                             |
//! | build-dataset     | `datasets/…/*.jsonl`, `datasets/index.json`, `templates.json` |
//! | validate-features | `validation/{run_id}.json`                               |
//! | train             | `probes/{run_id}/layer_{L:03}.probe`, `probes/{run_id}/train.json` |
//! | evaluate          | `evaluations/{run_id}.json`                              |
//! | sweep             | train + evaluate for every run, then `sweeps.json`        |
//! | analyze-tokens    | `tokens.json`                                            |
//! | report            | `report/{run_id}/{sweeps.csv,curves.svg,tokens.md,run.json}` |

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{template_condition, RecognitionSelection, RunConfig};
use crate::corpus::{load_annotations_with_stats, sha256_hex, split_by_image, AnnotationIndex, CategoryIndex, IngestStats, SourceHashes, Split};
use crate::error::{Error, Result};
use crate::features::{align_labels, load_caption_embeddings, validate_run, AlignedRun, FeatureManifest, TokenLog, ValidationReport, TOKENS_FILE};
use crate::matrix::Matrix;
use crate::metrics::{accuracy, macro_f1, token_frequency, ConfusionCounts, MetricName, SweepPoint, SweepResult, TokenFrequencyTable};
use crate::pairs::{
    build_entailment_dataset, build_recognition_dataset, recognition_epoch_seed, sample_case_study, CaseStudySplit, DatasetDump,
    DatasetExamples, DatasetHeader, DatasetTask, EntailmentConfig,
};
use crate::probe::{evaluate_probe, train_probe, ProbeCheckpoint, TrainConfig, TrainHistory};
use crate::prompts::{Condition, TemplateFile, TemplateId};
use crate::report::{write_report, ChartStyle, Provenance, RunReport};
use crate::seed::{self, domain};

pub const CORPUS_FILE: &str = "corpus.json";
pub const INGEST_FILE: &str = "ingest.json";
pub const TEMPLATES_FILE: &str = "templates.json";
pub const DATASETS_DIR: &str = "datasets";
pub const DATASET_INDEX_FILE: &str = "index.json";
pub const VALIDATION_DIR: &str = "validation";
pub const PROBES_DIR: &str = "probes";
pub const EVALUATIONS_DIR: &str = "evaluations";
pub const SWEEPS_FILE: &str = "sweeps.json";
pub const TOKEN_TABLES_FILE: &str = "tokens.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, missing_hint: &str) -> Result<T> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::Precondition(format!("{} not found; {missing_hint}", path.display())))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    serde_json::from_str(&text).map_err(|e| crate::error::parse_error(path, &text, &e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestRecord {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub corpus_hash: String,
    pub images: usize,
    pub captions: usize,
    pub categories: usize,
    pub sources: Option<SourceHashes>,
    pub stats: IngestStats,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndexEntry {
    /// Path relative to the datasets directory.
    pub file: String,
    pub sha256: String,
    pub task: DatasetTask,
    pub template_id: TemplateId,
    pub condition: Option<Condition>,
    pub target_category: Option<CategoryIndex>,
    pub example_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub corpus_hash: String,
    pub split_counts: BTreeMap<Split, usize>,
    pub datasets: Vec<DatasetIndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LayerTraining {
    Trained { history: TrainHistory, file: String },
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub run_id: String,
    pub task_tag: String,
    pub layers: BTreeMap<u16, LayerTraining>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEvaluation {
    pub layer: u16,
    pub counts: Option<ConfusionCounts>,
    pub accuracy: Option<f64>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub run_id: String,
    pub task_tag: String,
    pub task: DatasetTask,
    pub template_id: TemplateId,
    pub condition: Option<Condition>,
    pub target_category: Option<CategoryIndex>,
    pub test_examples: usize,
    pub layers: Vec<LayerEvaluation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedProbe {
    pub run_id: String,
    pub layer: u16,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepsFile {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub sweeps: Vec<SweepResult>,
    pub skipped: Vec<SkippedProbe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyRecord {
    pub run_id: String,
    pub template_id: TemplateId,
    pub split: CaseStudySplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTablesFile {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub case_studies: Vec<CaseStudyRecord>,
    pub tables: Vec<TokenFrequencyTable>,
}

/// A validated feature run joined to its dataset.
struct LoadedRun {
    run_id: String,
    task_tag: String,
    header: DatasetHeader,
    aligned: AlignedRun,
}

struct LayerFit {
    training: LayerTraining,
    checkpoint: Option<ProbeCheckpoint>,
}

pub struct Pipeline {
    cfg: RunConfig,
    out: PathBuf,
    config_hash: String,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            out: cfg.output_dir(),
            config_hash: cfg.config_hash(),
            cfg,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(&self.config_hash, self.cfg.global_seed)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.cfg.workers {
            builder = builder.num_threads(n);
        }
        builder
            .build()
            .map_err(|e| Error::Invalid(format!("cannot start worker pool: {e}")))
    }

    fn require_path<'a>(&self, p: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
        let path = p
            .as_deref()
            .ok_or_else(|| Error::Invalid(format!("config field {field} is required for this command")))?;
        if !path.exists() {
            return Err(Error::Invalid(format!("{field} {} does not exist", path.display())));
        }
        Ok(path)
    }

    // ---- ingest ----------------------------------------------------------

    pub fn ingest(&self) -> Result<IngestRecord> {
        let captions = self.require_path(&self.cfg.captions_path, "captions_path")?;
        let instances = self.require_path(&self.cfg.instances_path, "instances_path")?;
        let (index, stats) = load_annotations_with_stats(captions, instances)?;
        index.check_integrity()?;
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        index.write(&self.out.join(CORPUS_FILE))?;
        let record = IngestRecord {
            provenance: self.provenance(),
            corpus_hash: index.content_hash(),
            images: index.images.len(),
            captions: index.captions.len(),
            categories: index.catalog.len(),
            sources: index.sources.clone(),
            stats,
        };
        write_json(&self.out.join(INGEST_FILE), &record)?;
        Ok(record)
    }

    fn load_corpus(&self) -> Result<AnnotationIndex> {
        let path = self.out.join(CORPUS_FILE);
        if !path.exists() {
            return Err(Error::Precondition(format!("{} not found; run `ingest` first", path.display())));
        }
        AnnotationIndex::read(&path)
    }

    fn recognition_targets(&self, index: &AnnotationIndex) -> Result<Vec<CategoryIndex>> {
        match &self.cfg.tasks.recognition {
            RecognitionSelection::None => Ok(Vec::new()),
            RecognitionSelection::All => Ok(index.catalog.entries.iter().map(|e| e.index).collect()),
            RecognitionSelection::Categories(names) => {
                let mut out: Vec<CategoryIndex> = names
                    .iter()
                    .map(|n| index.catalog.index_of(n).ok_or_else(|| Error::UnknownCategory(n.clone())))
                    .collect::<Result<_>>()?;
                out.sort_unstable();
                out.dedup();
                Ok(out)
            }
        }
    }

    // ---- build-dataset ---------------------------------------------------

    pub fn build_dataset(&self) -> Result<DatasetIndex> {
        let index = self.load_corpus()?;
        let corpus_hash = index.content_hash();
        let split = split_by_image(&index, self.cfg.split_ratios, self.cfg.global_seed)?;
        let base = DatasetHeader {
            format: String::new(),
            task: DatasetTask::Entailment,
            toolkit_version: crate::TOOLKIT_VERSION.into(),
            config_hash: self.cfg.dataset_config_hash(),
            global_seed: self.cfg.global_seed,
            corpus_hash: corpus_hash.clone(),
            template_id: TemplateId::ENTAIL,
            condition: None,
            target_category: None,
            pool_size: None,
            shuffle_epoch: None,
            example_count: 0,
        };
        let datasets_dir = self.out.join(DATASETS_DIR);
        let mut entries = Vec::new();
        let mut emit = |file: String, dump: DatasetDump| -> Result<()> {
            dump.write(&datasets_dir.join(&file))?;
            entries.push(DatasetIndexEntry {
                file,
                sha256: dump.hash(),
                task: dump.header.task,
                template_id: dump.header.template_id,
                condition: dump.header.condition,
                target_category: dump.header.target_category,
                example_count: dump.len(),
            });
            Ok(())
        };

        if self.cfg.tasks.entailment {
            let dir = self.require_path(&self.cfg.embedding_run, "embedding_run")?;
            let embeddings = load_caption_embeddings::<f32>(dir, Some(&corpus_hash))?;
            let ecfg = EntailmentConfig {
                pool_size: self.cfg.pool_size,
                seed: seed::seed_mix(self.cfg.global_seed, domain::ENTAILMENT, 0),
            };
            let examples = build_entailment_dataset(&index, &embeddings, &split, &ecfg)?;
            let header = DatasetHeader {
                pool_size: Some(self.cfg.pool_size),
                ..base.clone()
            };
            emit("entailment.jsonl".into(), DatasetDump::new(header, DatasetExamples::Entailment(examples))?)?;
        }

        let targets = self.recognition_targets(&index)?;
        let shuffle_seed = recognition_epoch_seed(self.cfg.global_seed, self.cfg.shuffle_epoch);
        for &template in &self.cfg.recognition_templates {
            let condition = template_condition(template).expect("recognition template");
            let dumps: Vec<(String, DatasetDump)> = targets
                .par_iter()
                .map(|&target| {
                    let examples = build_recognition_dataset(&index, &split, condition, target, shuffle_seed)?;
                    let header = DatasetHeader {
                        task: DatasetTask::Recognition,
                        template_id: template,
                        condition: Some(condition),
                        target_category: Some(target),
                        shuffle_epoch: Some(self.cfg.shuffle_epoch),
                        ..base.clone()
                    };
                    let file = format!("recognition/{template}/{target:02}.jsonl");
                    Ok((file, DatasetDump::new(header, DatasetExamples::Recognition(examples))?))
                })
                .collect::<Result<_>>()?;
            for (file, dump) in dumps {
                emit(file, dump)?;
            }
        }

        let templates = TemplateFile::from_code().to_json();
        let path = self.out.join(TEMPLATES_FILE);
        std::fs::write(&path, templates).map_err(|e| Error::io(&path, e))?;

        let record = DatasetIndex {
            provenance: self.provenance(),
            corpus_hash,
            split_counts: Split::ALL.iter().map(|&s| (s, split.count(s))).collect(),
            datasets: entries,
        };
        write_json(&datasets_dir.join(DATASET_INDEX_FILE), &record)?;
        Ok(record)
    }

    fn dataset_index(&self) -> Result<DatasetIndex> {
        read_json(
            &self.out.join(DATASETS_DIR).join(DATASET_INDEX_FILE),
            "run `build-dataset` first",
        )
    }

    fn find_dump(&self, index: &DatasetIndex, hash: &str) -> Result<Option<DatasetDump>> {
        match index.datasets.iter().find(|e| e.sha256 == hash) {
            Some(e) => DatasetDump::read(&self.out.join(DATASETS_DIR).join(&e.file)).map(Some),
            None => Ok(None),
        }
    }

    fn feature_runs(&self) -> Result<&[PathBuf]> {
        if self.cfg.feature_runs.is_empty() {
            return Err(Error::Invalid("no feature_runs configured".into()));
        }
        if let Some(missing) = self.cfg.feature_runs.iter().find(|p| !p.exists()) {
            return Err(Error::Invalid(format!("feature run {} does not exist", missing.display())));
        }
        Ok(&self.cfg.feature_runs)
    }

    // ---- validate-features -----------------------------------------------

    pub fn validate_features(&self) -> Result<Vec<ValidationReport>> {
        let index = self.dataset_index()?;
        let mut reports = Vec::new();
        let mut names = BTreeSet::new();
        for dir in self.feature_runs()? {
            let name = match FeatureManifest::read(dir) {
                Ok(m) => m.run_id,
                Err(_) => dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            };
            if !names.insert(name.clone()) {
                return Err(Error::Invalid(format!("two feature runs share run_id {name:?}")));
            }
            let dump = match FeatureManifest::read(dir) {
                Ok(m) => self.find_dump(&index, &m.dataset_dump_hash)?,
                Err(_) => None,
            };
            let mut report = validate_run(dir, dump.as_ref());
            if dump.is_none() && !report.has(crate::features::ViolationKind::Manifest) {
                report.violations.push(crate::features::Violation {
                    kind: crate::features::ViolationKind::DatasetHash,
                    detail: "manifest names a dataset dump that build-dataset did not produce".into(),
                });
            }
            write_json(&self.out.join(VALIDATION_DIR).join(format!("{name}.json")), &report)?;
            reports.push(report);
        }
        let bad = reports.iter().filter(|r| !r.is_valid()).count();
        if bad > 0 {
            return Err(Error::Integrity(format!(
                "{bad} of {} feature runs failed validation; see {}",
                reports.len(),
                self.out.join(VALIDATION_DIR).display()
            )));
        }
        Ok(reports)
    }

    fn task_tag(header: &DatasetHeader, index: &DatasetIndex, catalog: Option<&AnnotationIndex>) -> String {
        let _ = index;
        match (header.task, header.target_category) {
            (DatasetTask::Entailment, _) => "entailment".into(),
            (DatasetTask::Recognition, Some(t)) => {
                let name = catalog
                    .and_then(|c| c.catalog.name(t).map(str::to_string))
                    .unwrap_or_else(|| format!("category{t:02}"));
                format!("recognition:{}:{name}", header.template_id)
            }
            (DatasetTask::Recognition, None) => format!("recognition:{}", header.template_id),
        }
    }

    /// Validates every configured run and joins it to its dataset. Any
    /// mismatch aborts before a single probe is trained.
    fn load_runs(&self) -> Result<Vec<LoadedRun>> {
        let index = self.dataset_index()?;
        let corpus = self.load_corpus().ok();
        let mut out = Vec::new();
        for dir in self.feature_runs()? {
            let manifest = FeatureManifest::read(dir)?;
            let dump = self.find_dump(&index, &manifest.dataset_dump_hash)?.ok_or_else(|| Error::HashMismatch {
                features: manifest.dataset_dump_hash.clone(),
                dump: format!("none of the {} dumps under {}", index.datasets.len(), DATASETS_DIR),
            })?;
            let report = validate_run(dir, Some(&dump));
            if let Some(v) = report.violations.first() {
                return Err(Error::Integrity(format!("{}: {:?}: {}", dir.display(), v.kind, v.detail)));
            }
            let aligned = align_labels(dir, &dump)?;
            out.push(LoadedRun {
                run_id: manifest.run_id.clone(),
                task_tag: Self::task_tag(&dump.header, &index, corpus.as_ref()),
                header: dump.header,
                aligned,
            });
        }
        let ids: BTreeSet<_> = out.iter().map(|r| r.run_id.as_str()).collect();
        if ids.len() != out.len() {
            return Err(Error::Invalid("feature runs must have distinct run_id values".into()));
        }
        Ok(out)
    }

    fn probe_seed(&self, layer: u16) -> u64 {
        seed::seed_mix(
            seed::seed_mix(self.cfg.global_seed, domain::TRAIN, self.cfg.train.seed),
            layer as u64,
            0,
        )
    }

    fn layer_matrix(run: &LoadedRun, layer: u16) -> Result<Matrix<f64>> {
        Ok(run.aligned.load_layer(layer)?.map(|v| v as f64))
    }

    fn probe_path(&self, run_id: &str, layer: u16) -> PathBuf {
        self.out.join(PROBES_DIR).join(run_id).join(format!("layer_{layer:03}.probe"))
    }

    fn fit_layer(&self, run: &LoadedRun, layer: u16) -> Result<LayerFit> {
        let x = Self::layer_matrix(run, layer)?;
        let pick = |split: Split| {
            let rows = run.aligned.rows_in(split);
            let labels: Vec<u8> = rows.iter().map(|&r| run.aligned.labels[r]).collect();
            (x.select_rows(&rows), labels)
        };
        let (x_train, y_train) = pick(Split::Train);
        let (x_val, y_val) = pick(Split::Val);
        let cfg = TrainConfig {
            seed: self.probe_seed(layer),
            ..self.cfg.train.clone()
        };
        match train_probe(&x_train, &y_train, &x_val, &y_val, &cfg) {
            Ok((mut probe, history)) => {
                probe.layer = layer;
                probe.task_tag = run.task_tag.clone();
                let ckpt = ProbeCheckpoint::from_probe(&probe, &cfg, &history, &self.config_hash, self.cfg.global_seed);
                let path = self.probe_path(&run.run_id, layer);
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                ckpt.write(&path)?;
                Ok(LayerFit {
                    training: LayerTraining::Trained {
                        history,
                        file: format!("layer_{layer:03}.probe"),
                    },
                    checkpoint: Some(ckpt),
                })
            }
            Err(Error::DegenerateLabels(l)) => Ok(LayerFit {
                training: LayerTraining::Skipped {
                    reason: format!("training split holds only label {l}"),
                },
                checkpoint: None,
            }),
            Err(Error::Precondition(msg)) if x_train.rows() == 0 => Ok(LayerFit {
                training: LayerTraining::Skipped { reason: msg },
                checkpoint: None,
            }),
            Err(e) => Err(e),
        }
    }

    fn score_layer(run: &LoadedRun, layer: u16, ckpt: Option<&ProbeCheckpoint>, skipped: Option<String>) -> Result<LayerEvaluation> {
        let Some(ckpt) = ckpt else {
            return Ok(LayerEvaluation {
                layer,
                counts: None,
                accuracy: None,
                skipped,
            });
        };
        let rows = run.aligned.rows_in(Split::Test);
        if rows.is_empty() {
            return Err(Error::Sizing(format!("run {} has no test examples", run.run_id)));
        }
        let x = Self::layer_matrix(run, layer)?.select_rows(&rows);
        let y: Vec<u8> = rows.iter().map(|&r| run.aligned.labels[r]).collect();
        let preds = evaluate_probe(&ckpt.probe_as::<f64>(), &x, &y)?;
        Ok(LayerEvaluation {
            layer,
            counts: Some(ConfusionCounts::from_pairs(&preds.predictions, &y)?),
            accuracy: Some(accuracy(&preds.predictions, &y)?),
            skipped: None,
        })
    }

    fn jobs(runs: &[LoadedRun]) -> Vec<(usize, u16)> {
        runs.iter()
            .enumerate()
            .flat_map(|(i, r)| r.aligned.layers().into_iter().map(move |l| (i, l)))
            .collect()
    }

    fn train_record(&self, run: &LoadedRun, fits: Vec<(u16, LayerTraining)>) -> Result<TrainRecord> {
        let record = TrainRecord {
            provenance: self.provenance(),
            run_id: run.run_id.clone(),
            task_tag: run.task_tag.clone(),
            layers: fits.into_iter().collect(),
        };
        write_json(&self.out.join(PROBES_DIR).join(&run.run_id).join("train.json"), &record)?;
        Ok(record)
    }

    fn evaluation_record(&self, run: &LoadedRun, layers: Vec<LayerEvaluation>) -> Result<EvaluationRecord> {
        let record = EvaluationRecord {
            provenance: self.provenance(),
            run_id: run.run_id.clone(),
            task_tag: run.task_tag.clone(),
            task: run.header.task,
            template_id: run.header.template_id,
            condition: run.header.condition,
            target_category: run.header.target_category,
            test_examples: run.aligned.rows_in(Split::Test).len(),
            layers,
        };
        write_json(&self.out.join(EVALUATIONS_DIR).join(format!("{}.json", run.run_id)), &record)?;
        Ok(record)
    }

    fn fit_all(&self, runs: &[LoadedRun]) -> Result<Vec<(usize, u16, LayerFit)>> {
        let jobs = Self::jobs(runs);
        self.pool()?.install(|| {
            jobs.par_iter()
                .map(|&(i, layer)| Ok((i, layer, self.fit_layer(&runs[i], layer)?)))
                .collect()
        })
    }

    // ---- train -----------------------------------------------------------

    pub fn train(&self) -> Result<Vec<TrainRecord>> {
        let runs = self.load_runs()?;
        let fits = self.fit_all(&runs)?;
        let mut per_run: Vec<Vec<(u16, LayerTraining)>> = vec![Vec::new(); runs.len()];
        for (i, layer, fit) in fits {
            per_run[i].push((layer, fit.training));
        }
        runs.iter().zip(per_run).map(|(r, f)| self.train_record(r, f)).collect()
    }

    // ---- evaluate --------------------------------------------------------

    pub fn evaluate(&self) -> Result<Vec<EvaluationRecord>> {
        let runs = self.load_runs()?;
        let mut trained = Vec::new();
        for run in &runs {
            let record: TrainRecord = read_json(
                &self.out.join(PROBES_DIR).join(&run.run_id).join("train.json"),
                "run `train` first",
            )?;
            if record.provenance.config_hash != self.config_hash {
                return Err(Error::Precondition(format!(
                    "probes for {} were trained under config {}; retrain",
                    run.run_id, record.provenance.config_hash
                )));
            }
            trained.push(record);
        }
        let jobs = Self::jobs(&runs);
        let evals: Vec<(usize, LayerEvaluation)> = self.pool()?.install(|| {
            jobs.par_iter()
                .map(|&(i, layer)| {
                    let eval = match trained[i].layers.get(&layer) {
                        Some(LayerTraining::Trained { file, .. }) => {
                            let ckpt = ProbeCheckpoint::read(&self.out.join(PROBES_DIR).join(&runs[i].run_id).join(file))?;
                            Self::score_layer(&runs[i], layer, Some(&ckpt), None)?
                        }
                        Some(LayerTraining::Skipped { reason }) => Self::score_layer(&runs[i], layer, None, Some(reason.clone()))?,
                        None => {
                            return Err(Error::Precondition(format!(
                                "no probe for layer {layer} of {}; run `train` first",
                                runs[i].run_id
                            )))
                        }
                    };
                    Ok((i, eval))
                })
                .collect::<Result<_>>()
        })?;
        self.group_evaluations(&runs, evals)
    }

    fn group_evaluations(&self, runs: &[LoadedRun], evals: Vec<(usize, LayerEvaluation)>) -> Result<Vec<EvaluationRecord>> {
        let mut per_run: Vec<Vec<LayerEvaluation>> = vec![Vec::new(); runs.len()];
        for (i, e) in evals {
            per_run[i].push(e);
        }
        runs.iter().zip(per_run).map(|(r, l)| self.evaluation_record(r, l)).collect()
    }

    // ---- sweep -----------------------------------------------------------

    /// Trains and evaluates every layer of every run, then aggregates
    /// accuracy (entailment) and macro-F1 over categories (recognition).
    pub fn sweep(&self) -> Result<SweepsFile> {
        let runs = self.load_runs()?;
        let fits = self.fit_all(&runs)?;
        let evals: Vec<(usize, LayerEvaluation)> = self.pool()?.install(|| {
            fits.par_iter()
                .map(|(i, layer, fit)| {
                    let skipped = match &fit.training {
                        LayerTraining::Skipped { reason } => Some(reason.clone()),
                        LayerTraining::Trained { .. } => None,
                    };
                    Ok((*i, Self::score_layer(&runs[*i], *layer, fit.checkpoint.as_ref(), skipped)?))
                })
                .collect::<Result<_>>()
        })?;
        let mut per_run: Vec<Vec<(u16, LayerTraining)>> = vec![Vec::new(); runs.len()];
        for (i, layer, fit) in fits {
            per_run[i].push((layer, fit.training));
        }
        for (run, fits) in runs.iter().zip(per_run) {
            self.train_record(run, fits)?;
        }
        let records = self.group_evaluations(&runs, evals)?;
        let file = aggregate_sweeps(&records, self.provenance())?;
        write_json(&self.out.join(SWEEPS_FILE), &file)?;
        Ok(file)
    }

    // ---- analyze-tokens --------------------------------------------------

    /// Token tables for the configured case-study category, from every
    /// configured run that targets it and carries a token log. With
    /// `explicit`, analyzes one (token log, recognition dump) pair instead.
    pub fn analyze_tokens(&self, explicit: Option<(&Path, &Path)>) -> Result<TokenTablesFile> {
        let cs = &self.cfg.case_study;
        let mut studies = Vec::new();
        let mut tables = Vec::new();
        let mut analyze = |run_id: String, log: TokenLog, dump: &DatasetDump| -> Result<()> {
            let examples = dump
                .recognition()
                .ok_or_else(|| Error::Precondition("token analysis needs a recognition dataset".into()))?;
            let split = sample_case_study(examples, cs.sample_size, self.cfg.global_seed)?;
            let (pos, neg) = token_frequency(&log, &split, dump.header.condition, cs.top_k)?;
            tables.push((dump.header.condition, dump.header.template_id, pos, neg));
            studies.push(CaseStudyRecord {
                run_id,
                template_id: dump.header.template_id,
                split,
            });
            Ok(())
        };
        match explicit {
            Some((log_path, dump_path)) => {
                let dump = DatasetDump::read(dump_path)?;
                analyze(log_path.display().to_string(), TokenLog::read(log_path)?, &dump)?;
            }
            None => {
                let corpus = self.load_corpus()?;
                let target = corpus
                    .catalog
                    .index_of(&cs.category)
                    .ok_or_else(|| Error::UnknownCategory(cs.category.clone()))?;
                let index = self.dataset_index()?;
                for dir in self.feature_runs()? {
                    let manifest = FeatureManifest::read(dir)?;
                    let log_path = dir.join(TOKENS_FILE);
                    if manifest.target_category != Some(target) || !log_path.exists() {
                        continue;
                    }
                    let dump = self.find_dump(&index, &manifest.dataset_dump_hash)?.ok_or_else(|| Error::HashMismatch {
                        features: manifest.dataset_dump_hash.clone(),
                        dump: "no matching dataset dump".into(),
                    })?;
                    analyze(manifest.run_id, TokenLog::read(&log_path)?, &dump)?;
                }
            }
        }
        if tables.is_empty() {
            return Err(Error::Precondition(format!(
                "no feature run for category {:?} carries a {TOKENS_FILE}",
                cs.category
            )));
        }
        // NoCat before WithCat, as in the published layout.
        let rank = |c: Option<Condition>| match c {
            Some(Condition::NoCat) => 0,
            Some(Condition::WithCat) => 1,
            None => 2,
        };
        let mut order: Vec<usize> = (0..tables.len()).collect();
        order.sort_by_key(|&i| (rank(tables[i].0), tables[i].1));
        let flat = order
            .iter()
            .flat_map(|&i| [tables[i].2.clone(), tables[i].3.clone()])
            .collect();
        let studies = order.iter().map(|&i| studies[i].clone()).collect();
        let file = TokenTablesFile {
            provenance: self.provenance(),
            case_studies: studies,
            tables: flat,
        };
        write_json(&self.out.join(TOKEN_TABLES_FILE), &file)?;
        Ok(file)
    }

    // ---- report ----------------------------------------------------------

    pub fn report(&self) -> Result<crate::report::ReportFiles> {
        let sweeps: SweepsFile = read_json(&self.out.join(SWEEPS_FILE), "run `sweep` first")?;
        if sweeps.provenance.config_hash != self.config_hash {
            return Err(Error::Precondition(format!(
                "{SWEEPS_FILE} was produced under config {}; rerun `sweep`",
                sweeps.provenance.config_hash
            )));
        }
        let mut report = RunReport::new(&self.cfg.run_id(), self.provenance(), self.cfg.echo(), sweeps.sweeps)?;
        let tokens_path = self.out.join(TOKEN_TABLES_FILE);
        if tokens_path.exists() {
            let tokens: TokenTablesFile = read_json(&tokens_path, "")?;
            report.token_tables = tokens.tables;
        }
        if let Ok(index) = self.dataset_index() {
            report.corpus_hash = Some(index.corpus_hash.clone());
            report.dataset_hashes = index.datasets.iter().map(|e| (e.file.clone(), e.sha256.clone())).collect();
        }
        for dir in &self.cfg.feature_runs {
            let path = dir.join(crate::features::MANIFEST_FILE);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let manifest = FeatureManifest::read(dir)?;
            report.manifest_hashes.insert(manifest.run_id, sha256_hex(&bytes));
        }
        write_report(
            &self.out,
            &report,
            &ChartStyle {
                title: format!("Probe score per layer ({})", report.run_id),
                ..ChartStyle::default()
            },
        )
    }

    /// Human-readable one-line summary of a stage result.
    pub fn summary<T: Serialize>(stage: &str, value: &T) -> serde_json::Value {
        json!({"stage": stage, "result": value})
    }
}

fn recognition_sweep_tag(template: TemplateId) -> String {
    if template.is_variant() {
        format!("recognition-{template}")
    } else {
        "recognition".into()
    }
}

/// Accuracy sweeps for entailment runs and macro-F1 sweeps for each
/// recognition template, over the layers where probes were trained.
pub fn aggregate_sweeps(records: &[EvaluationRecord], provenance: Provenance) -> Result<SweepsFile> {
    let mut sweeps = Vec::new();
    let mut skipped = Vec::new();
    for r in records {
        for l in &r.layers {
            if let Some(reason) = &l.skipped {
                skipped.push(SkippedProbe {
                    run_id: r.run_id.clone(),
                    layer: l.layer,
                    reason: reason.clone(),
                });
            }
        }
    }
    let entailment: Vec<&EvaluationRecord> = records.iter().filter(|r| r.task == DatasetTask::Entailment).collect();
    for r in &entailment {
        let tag = if entailment.len() == 1 {
            "entailment".to_string()
        } else {
            format!("entailment:{}", r.run_id)
        };
        let points = r
            .layers
            .iter()
            .filter_map(|l| l.accuracy.map(|score| SweepPoint { layer: l.layer, score }))
            .collect();
        sweeps.push(SweepResult::new(tag, None, MetricName::Accuracy, points)?);
    }
    let mut groups: BTreeMap<TemplateId, Vec<&EvaluationRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.task == DatasetTask::Recognition) {
        groups.entry(r.template_id).or_default().push(r);
    }
    for (template, group) in groups {
        let targets: BTreeSet<_> = group.iter().map(|r| r.target_category).collect();
        if targets.len() != group.len() {
            return Err(Error::Invalid(format!("two {template} runs share a target category")));
        }
        let mut per_layer: BTreeMap<u16, Vec<ConfusionCounts>> = BTreeMap::new();
        let layer_sets: BTreeSet<Vec<u16>> = group
            .iter()
            .map(|r| r.layers.iter().map(|l| l.layer).collect())
            .collect();
        if layer_sets.len() > 1 {
            return Err(Error::Alignment(format!("{template} runs disagree on their layer sets")));
        }
        for r in &group {
            for l in &r.layers {
                if let Some(c) = l.counts {
                    per_layer.entry(l.layer).or_default().push(c);
                }
            }
        }
        let points = per_layer
            .into_iter()
            .map(|(layer, counts)| Ok(SweepPoint { layer, score: macro_f1(&counts)? }))
            .collect::<Result<_>>()?;
        sweeps.push(SweepResult::new(
            recognition_sweep_tag(template),
            template_condition(template),
            MetricName::MacroF1,
            points,
        )?);
    }
    Ok(SweepsFile {
        provenance,
        sweeps,
        skipped,
    })
}
