//! Feature runs: the on-disk contract between the extractor and the core.
//!
//! A run directory holds `layer_{L:03}.lpf` tensor files (see [`lpf`]), an
//! optional `tokens.jsonl` token log, and `manifest.json`, which is written
//! last. Row `n` of every layer matrix is the representation of
//! `manifest.example_ids[n]`.

pub mod lpf;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{sha256_hex, CategoryIndex, Split};
use crate::error::{parse_error, Error, Result};
use crate::matrix::Matrix;
use crate::pairs::{CaptionEmbeddingTable, DatasetDump};
use crate::prompts::{Condition, TemplateId};
use crate::scalar::Scalar;

pub use lpf::{read_layer_matrix, write_layer_matrix, LayerMatrix};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOKENS_FILE: &str = "tokens.jsonl";
pub const FEATURES_FORMAT: &str = "layerprobe-features/1";

/// Extractor obligation for which position is captured.
pub const LAST_TOKEN_DEFINITION: &str = "final position of the rendered input sequence after \
model-specific tokenization, before any generated token";
/// Extractor obligation for which hidden state is captured.
pub const HIDDEN_STATE_DEFINITION: &str = "residual-stream output of each transformer block, \
before any final output normalization, up-cast to f32";

pub fn layer_file_name(layer: u16) -> String {
    format!("layer_{layer:03}.lpf")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunRole {
    HiddenStates,
    CaptionEmbeddings,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer: u16,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorContract {
    pub last_token: String,
    pub hidden_state: String,
}

impl Default for ExtractorContract {
    fn default() -> Self {
        Self {
            last_token: LAST_TOKEN_DEFINITION.into(),
            hidden_state: HIDDEN_STATE_DEFINITION.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub format: String,
    pub role: RunRole,
    pub run_id: String,
    pub model_name: String,
    pub num_layers: u16,
    pub hidden_dim: u64,
    pub template_id: Option<TemplateId>,
    pub condition: Option<Condition>,
    pub target_category: Option<CategoryIndex>,
    /// Hash of the dataset dump the rows were extracted from; for caption
    /// embeddings, the corpus hash.
    pub dataset_dump_hash: String,
    pub dtype: String,
    pub endianness: String,
    pub extractor_contract: ExtractorContract,
    pub layers: Vec<LayerEntry>,
    pub example_ids: Vec<u64>,
}

impl FeatureManifest {
    pub fn new(role: RunRole, run_id: &str, model_name: &str, dataset_dump_hash: &str) -> Self {
        Self {
            format: FEATURES_FORMAT.into(),
            role,
            run_id: run_id.into(),
            model_name: model_name.into(),
            num_layers: 0,
            hidden_dim: 0,
            template_id: None,
            condition: None,
            target_category: None,
            dataset_dump_hash: dataset_dump_hash.into(),
            dtype: "f32".into(),
            endianness: "little".into(),
            extractor_contract: ExtractorContract::default(),
            layers: Vec::new(),
            example_ids: Vec::new(),
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| parse_error(&path, &text, &e))
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("manifest serializes");
        out.push(b'\n');
        out
    }

    /// Layer entries sorted by layer index.
    pub fn sorted_layers(&self) -> Vec<&LayerEntry> {
        let mut v: Vec<_> = self.layers.iter().collect();
        v.sort_by_key(|e| e.layer);
        v
    }
}

/// Writes a run: tensor files first, manifest on [`RunWriter::finish`].
pub struct RunWriter {
    dir: PathBuf,
    manifest: FeatureManifest,
}

impl RunWriter {
    pub fn create(dir: &Path, mut manifest: FeatureManifest, example_ids: Vec<u64>) -> Result<Self> {
        let unique: BTreeSet<_> = example_ids.iter().collect();
        if unique.len() != example_ids.len() {
            return Err(Error::Integrity("duplicate example ids in feature run".into()));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        manifest.example_ids = example_ids;
        manifest.layers.clear();
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn write_layer(&mut self, layer: u16, matrix: &Matrix<f32>) -> Result<()> {
        if matrix.rows() != self.manifest.example_ids.len() {
            return Err(Error::DimensionMismatch {
                expected: self.manifest.example_ids.len(),
                actual: matrix.rows(),
            });
        }
        if self.manifest.layers.is_empty() {
            self.manifest.hidden_dim = matrix.cols() as u64;
        } else if matrix.cols() as u64 != self.manifest.hidden_dim {
            return Err(Error::DimensionMismatch {
                expected: self.manifest.hidden_dim as usize,
                actual: matrix.cols(),
            });
        }
        if self.manifest.layers.iter().any(|e| e.layer == layer) {
            return Err(Error::Integrity(format!("layer {layer} written twice")));
        }
        let file = layer_file_name(layer);
        let sha256 = write_layer_matrix(&self.dir.join(&file), layer, matrix)?;
        self.manifest.layers.push(LayerEntry { layer, file, sha256 });
        Ok(())
    }

    pub fn write_tokens(&self, log: &TokenLog) -> Result<()> {
        log.write(&self.dir.join(TOKENS_FILE))
    }

    pub fn finish(mut self) -> Result<FeatureManifest> {
        self.manifest.layers.sort_by_key(|e| e.layer);
        self.manifest.num_layers = self.manifest.layers.len() as u16;
        let path = self.dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.manifest.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(self.manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRow {
    pub example_id: u64,
    pub first_generated_token: String,
}

/// First generated token per example, as reported by the extractor.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenLog {
    pub rows: Vec<TokenRow>,
}

impl TokenLog {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| parse_error(path, l, &e)))
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for row in &self.rows {
            serde_json::to_writer(&mut out, row)?;
            out.push(b'\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn by_example(&self) -> Result<BTreeMap<u64, &str>> {
        let mut map = BTreeMap::new();
        for row in &self.rows {
            if map.insert(row.example_id, row.first_generated_token.as_str()).is_some() {
                return Err(Error::Integrity(format!(
                    "example {} appears twice in token log",
                    row.example_id
                )));
            }
        }
        Ok(map)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Manifest,
    DuplicateExampleId,
    LayerGap,
    Checksum,
    Header,
    Dimension,
    NonFinite,
    DatasetHash,
    TokenLog,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

/// Every problem found in a run; empty means valid.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub run_dir: String,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    fn push(&mut self, kind: ViolationKind, detail: impl Into<String>) {
        self.violations.push(Violation {
            kind,
            detail: detail.into(),
        });
    }
}

/// Checks a run directory: manifest, per-layer headers, dimensions,
/// checksums, finiteness, layer contiguity, token-log ids and, when a dump is
/// given, the dataset hash.
pub fn validate_run(dir: &Path, dump: Option<&DatasetDump>) -> ValidationReport {
    let mut report = ValidationReport {
        run_dir: dir.display().to_string(),
        violations: Vec::new(),
    };
    let manifest = match FeatureManifest::read(dir) {
        Ok(m) => m,
        Err(e) => {
            report.push(ViolationKind::Manifest, e.to_string());
            return report;
        }
    };
    if manifest.format != FEATURES_FORMAT {
        report.push(ViolationKind::Manifest, format!("format {:?}", manifest.format));
    }
    if manifest.dtype != "f32" || manifest.endianness != "little" {
        report.push(
            ViolationKind::Manifest,
            format!("dtype {} / endianness {}", manifest.dtype, manifest.endianness),
        );
    }
    if manifest.num_layers == 0 {
        report.push(ViolationKind::Manifest, "num_layers must be at least 1");
    }
    let unique: BTreeSet<_> = manifest.example_ids.iter().collect();
    if unique.len() != manifest.example_ids.len() {
        report.push(
            ViolationKind::DuplicateExampleId,
            format!(
                "{} duplicate example ids",
                manifest.example_ids.len() - unique.len()
            ),
        );
    }

    let listed: BTreeSet<u16> = manifest.layers.iter().map(|e| e.layer).collect();
    if listed.len() != manifest.layers.len() {
        report.push(ViolationKind::LayerGap, "a layer is listed more than once");
    }
    let expected: BTreeSet<u16> = (1..=manifest.num_layers).collect();
    for missing in expected.difference(&listed) {
        report.push(ViolationKind::LayerGap, format!("layer {missing} not listed"));
    }
    for extra in listed.difference(&expected) {
        report.push(
            ViolationKind::LayerGap,
            format!("layer {extra} outside 1..={}", manifest.num_layers),
        );
    }

    for entry in manifest.sorted_layers() {
        let path = dir.join(&entry.file);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                report.push(
                    ViolationKind::LayerGap,
                    format!("layer {} file {} unreadable: {e}", entry.layer, entry.file),
                );
                continue;
            }
        };
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            report.push(
                ViolationKind::Checksum,
                format!("{}: manifest {}, file {actual}", entry.file, entry.sha256),
            );
        }
        match lpf::decode(&bytes) {
            Ok(m) => {
                if m.layer != entry.layer {
                    report.push(
                        ViolationKind::Header,
                        format!("{} carries layer {}, manifest says {}", entry.file, m.layer, entry.layer),
                    );
                }
                if m.data.rows() != manifest.example_ids.len()
                    || m.data.cols() as u64 != manifest.hidden_dim
                {
                    report.push(
                        ViolationKind::Dimension,
                        format!(
                            "{} is {}x{}, manifest expects {}x{}",
                            entry.file,
                            m.data.rows(),
                            m.data.cols(),
                            manifest.example_ids.len(),
                            manifest.hidden_dim
                        ),
                    );
                }
            }
            Err(Error::NonFinite(d)) => report.push(ViolationKind::NonFinite, d),
            Err(e) => report.push(ViolationKind::Header, format!("{}: {e}", entry.file)),
        }
    }

    let tokens = dir.join(TOKENS_FILE);
    if tokens.exists() {
        match TokenLog::read(&tokens).and_then(|log| {
            log.by_example()?;
            Ok(log)
        }) {
            Ok(log) => {
                if let Some(row) = log.rows.iter().find(|r| !unique.contains(&r.example_id)) {
                    report.push(
                        ViolationKind::TokenLog,
                        format!("token log example {} not in manifest", row.example_id),
                    );
                }
            }
            Err(e) => report.push(ViolationKind::TokenLog, e.to_string()),
        }
    }

    if let Some(dump) = dump {
        let hash = dump.hash();
        if hash != manifest.dataset_dump_hash {
            report.push(
                ViolationKind::DatasetHash,
                format!("manifest {}, dump {hash}", manifest.dataset_dump_hash),
            );
        }
        if dump.len() != manifest.example_ids.len() {
            report.push(
                ViolationKind::Dimension,
                format!(
                    "dump has {} examples, run has {} rows",
                    dump.len(),
                    manifest.example_ids.len()
                ),
            );
        }
    }
    report
}

/// A feature run joined to the labels and split tags of its dataset dump.
#[derive(Debug, Clone)]
pub struct AlignedRun {
    pub dir: PathBuf,
    pub manifest: FeatureManifest,
    /// Label of `manifest.example_ids[n]`.
    pub labels: Vec<u8>,
    pub splits: Vec<Split>,
}

impl AlignedRun {
    /// Layer indices in ascending order, regardless of manifest listing order.
    pub fn layers(&self) -> Vec<u16> {
        self.manifest.sorted_layers().iter().map(|e| e.layer).collect()
    }

    /// Reads one layer, verifying checksum and shape.
    pub fn load_layer(&self, layer: u16) -> Result<Matrix<f32>> {
        let entry = self
            .manifest
            .layers
            .iter()
            .find(|e| e.layer == layer)
            .ok_or_else(|| Error::Alignment(format!("run has no layer {layer}")))?;
        let path = self.dir.join(&entry.file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            return Err(Error::Checksum {
                path,
                expected: entry.sha256.clone(),
                actual,
            });
        }
        let m = lpf::decode(&bytes)?;
        if m.layer != layer {
            return Err(Error::Format(format!("{} carries layer {}", entry.file, m.layer)));
        }
        if m.data.rows() != self.labels.len() || m.data.cols() as u64 != self.manifest.hidden_dim {
            return Err(Error::DimensionMismatch {
                expected: self.labels.len(),
                actual: m.data.rows(),
            });
        }
        Ok(m.data)
    }

    /// Row indices belonging to `split`.
    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Joins a run to its dataset dump by example id. Fails hard when the run
/// was extracted from a different dataset build.
pub fn align_labels(dir: &Path, dump: &DatasetDump) -> Result<AlignedRun> {
    let manifest = FeatureManifest::read(dir)?;
    let hash = dump.hash();
    if manifest.dataset_dump_hash != hash {
        return Err(Error::HashMismatch {
            features: manifest.dataset_dump_hash,
            dump: hash,
        });
    }
    let table = dump.labels();
    let mut labels = Vec::with_capacity(manifest.example_ids.len());
    let mut splits = Vec::with_capacity(manifest.example_ids.len());
    for id in &manifest.example_ids {
        let rec = table
            .get(id)
            .ok_or_else(|| Error::Alignment(format!("example {id} missing from dataset dump")))?;
        labels.push(rec.label);
        splits.push(rec.split);
    }
    Ok(AlignedRun {
        dir: dir.to_path_buf(),
        manifest,
        labels,
        splits,
    })
}

/// Writes caption embeddings as a single-layer run with role `caption_embeddings`.
pub fn write_caption_embeddings(
    dir: &Path,
    model_name: &str,
    corpus_hash: &str,
    caption_ids: Vec<u64>,
    vectors: &Matrix<f32>,
) -> Result<FeatureManifest> {
    let manifest = FeatureManifest::new(RunRole::CaptionEmbeddings, "caption_embeddings", model_name, corpus_hash);
    let mut writer = RunWriter::create(dir, manifest, caption_ids)?;
    writer.write_layer(1, vectors)?;
    writer.finish()
}

/// Loads a caption-embedding run. `corpus_hash`, when given, must match.
pub fn load_caption_embeddings<T: Scalar>(
    dir: &Path,
    corpus_hash: Option<&str>,
) -> Result<CaptionEmbeddingTable<T>> {
    let manifest = FeatureManifest::read(dir)?;
    if manifest.role != RunRole::CaptionEmbeddings {
        return Err(Error::Format(format!("{} is not a caption_embeddings run", dir.display())));
    }
    if let Some(h) = corpus_hash {
        if h != manifest.dataset_dump_hash {
            return Err(Error::HashMismatch {
                features: manifest.dataset_dump_hash,
                dump: h.to_string(),
            });
        }
    }
    let report = validate_run(dir, None);
    if let Some(v) = report.violations.first() {
        return Err(Error::Format(format!("{}: {:?} {}", dir.display(), v.kind, v.detail)));
    }
    let entry = manifest.sorted_layers()[0].clone();
    let m = read_layer_matrix(&dir.join(&entry.file))?;
    let mut table = CaptionEmbeddingTable::new(m.data.cols())?;
    for (id, row) in manifest.example_ids.iter().zip(m.data.iter_rows()) {
        table.insert(*id, row.iter().map(|&x| T::lit(x as f64)).collect())?;
    }
    Ok(table)
}
