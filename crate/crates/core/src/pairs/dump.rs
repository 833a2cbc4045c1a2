//! JSON-lines dataset dumps.
//!
//! Line 1 is a [`DatasetHeader`]; every following line is one example in
//! ascending `example_id` order. The dataset hash is the SHA-256 of this
//! canonical form, so a dump whose example lines were permuted hashes the same
//! once re-canonicalized.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{sha256_hex, CategoryIndex, Split};
use crate::error::{parse_error, Error, Result};
use crate::prompts::{Condition, TemplateId};

use super::{EntailmentExample, RecognitionExample};

pub const DATASET_FORMAT: &str = "layerprobe-dataset/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetTask {
    Entailment,
    Recognition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub task: DatasetTask,
    pub toolkit_version: String,
    pub config_hash: String,
    pub global_seed: u64,
    pub corpus_hash: String,
    pub template_id: TemplateId,
    pub condition: Option<Condition>,
    pub target_category: Option<CategoryIndex>,
    pub pool_size: Option<usize>,
    pub shuffle_epoch: Option<u64>,
    pub example_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetExamples {
    Entailment(Vec<EntailmentExample>),
    Recognition(Vec<RecognitionExample>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelRecord {
    pub label: u8,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetDump {
    pub header: DatasetHeader,
    pub examples: DatasetExamples,
}

impl DatasetDump {
    /// Builds a dump, sorting examples and filling in `example_count`.
    pub fn new(mut header: DatasetHeader, mut examples: DatasetExamples) -> Result<Self> {
        let ids: Vec<u64> = match &mut examples {
            DatasetExamples::Entailment(v) => {
                header.task = DatasetTask::Entailment;
                v.sort_by_key(|e| e.example_id);
                v.iter().map(|e| e.example_id).collect()
            }
            DatasetExamples::Recognition(v) => {
                header.task = DatasetTask::Recognition;
                v.sort_by_key(|e| e.example_id);
                v.iter().map(|e| e.example_id).collect()
            }
        };
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Integrity(format!("duplicate example id {}", w[0])));
        }
        header.example_count = ids.len();
        header.format = DATASET_FORMAT.into();
        Ok(Self { header, examples })
    }

    pub fn len(&self) -> usize {
        match &self.examples {
            DatasetExamples::Entailment(v) => v.len(),
            DatasetExamples::Recognition(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        fn line<T: Serialize>(out: &mut Vec<u8>, v: &T) {
            serde_json::to_writer(&mut *out, v).expect("dataset line serializes");
            out.push(b'\n');
        }
        let mut out = Vec::new();
        line(&mut out, &self.header);
        match &self.examples {
            DatasetExamples::Entailment(v) => v.iter().for_each(|e| line(&mut out, e)),
            DatasetExamples::Recognition(v) => v.iter().for_each(|e| line(&mut out, e)),
        }
        out
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.canonical_bytes())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.canonical_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut offset = 0usize;
        let mut lines = Vec::new();
        for raw in text.split_inclusive('\n') {
            let body = raw.trim_end_matches(['\n', '\r']);
            if !body.trim().is_empty() {
                lines.push((offset, body));
            }
            offset += raw.len();
        }
        let parse_line = |(start, body): (usize, &str)| -> Result<serde_json::Value> {
            serde_json::from_str(body).map_err(|e| {
                let Error::Parse { offset, message, .. } = parse_error(path, body, &e) else {
                    unreachable!()
                };
                Error::Parse {
                    path: path.to_path_buf(),
                    offset: start + offset,
                    message,
                }
            })
        };
        let mut iter = lines.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::Format(format!("{}: empty dataset dump", path.display())))?;
        let header: DatasetHeader = serde_json::from_value(parse_line(first)?)?;
        if header.format != DATASET_FORMAT {
            return Err(Error::Format(format!("unsupported dataset format {:?}", header.format)));
        }
        let examples = match header.task {
            DatasetTask::Entailment => DatasetExamples::Entailment(
                iter.map(|l| Ok(serde_json::from_value(parse_line(l)?)?))
                    .collect::<Result<_>>()?,
            ),
            DatasetTask::Recognition => DatasetExamples::Recognition(
                iter.map(|l| Ok(serde_json::from_value(parse_line(l)?)?))
                    .collect::<Result<_>>()?,
            ),
        };
        let declared = header.example_count;
        let dump = Self::new(header, examples)?;
        if dump.header.example_count != declared {
            return Err(Error::Integrity(format!(
                "header declares {declared} examples, found {}",
                dump.header.example_count
            )));
        }
        Ok(dump)
    }

    pub fn labels(&self) -> BTreeMap<u64, LabelRecord> {
        match &self.examples {
            DatasetExamples::Entailment(v) => v
                .iter()
                .map(|e| (e.example_id, LabelRecord { label: e.label, split: e.split }))
                .collect(),
            DatasetExamples::Recognition(v) => v
                .iter()
                .map(|e| (e.example_id, LabelRecord { label: e.label, split: e.split }))
                .collect(),
        }
    }

    pub fn recognition(&self) -> Option<&[RecognitionExample]> {
        match &self.examples {
            DatasetExamples::Recognition(v) => Some(v),
            DatasetExamples::Entailment(_) => None,
        }
    }

    pub fn entailment(&self) -> Option<&[EntailmentExample]> {
        match &self.examples {
            DatasetExamples::Entailment(v) => Some(v),
            DatasetExamples::Recognition(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn header() -> DatasetHeader {
        DatasetHeader {
            format: String::new(),
            task: DatasetTask::Recognition,
            toolkit_version: "t".into(),
            config_hash: "c".into(),
            global_seed: 7,
            corpus_hash: "h".into(),
            template_id: TemplateId::REC_NOCAT,
            condition: Some(Condition::NoCat),
            target_category: Some(0),
            pool_size: None,
            shuffle_epoch: Some(0),
            example_count: 0,
        }
    }

    fn examples(labels: &[u8]) -> Vec<RecognitionExample> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &label)| RecognitionExample {
                example_id: i as u64,
                image_id: 100 + i as u64,
                target_category: 0,
                label,
                cue_list: vec![],
                condition: Condition::NoCat,
                shuffle_seed: i as u64,
                split: Split::Train,
            })
            .collect()
    }

    #[test]
    fn permuted_lines_hash_identically() {
        let dump = DatasetDump::new(header(), DatasetExamples::Recognition(examples(&[1, 0, 1, 0]))).unwrap();
        let bytes = String::from_utf8(dump.canonical_bytes()).unwrap();
        let mut lines: Vec<&str> = bytes.lines().collect();
        lines[1..].reverse();
        let permuted = lines.join("\n") + "\n";
        assert_ne!(permuted, bytes);
        let back = DatasetDump::parse(&permuted, Path::new("d.jsonl")).unwrap();
        assert_eq!(back.hash(), dump.hash());
        assert_eq!(back, dump);
    }

    #[test]
    fn count_mismatch_and_duplicates_rejected() {
        let dump = DatasetDump::new(header(), DatasetExamples::Recognition(examples(&[1, 0]))).unwrap();
        let text = String::from_utf8(dump.canonical_bytes()).unwrap();
        let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            DatasetDump::parse(&truncated, Path::new("d")),
            Err(Error::Integrity(_))
        ));
        let mut ex = examples(&[1, 0]);
        ex[1].example_id = 0;
        assert!(DatasetDump::new(header(), DatasetExamples::Recognition(ex)).is_err());
    }

    #[test]
    fn bad_line_reports_file_offset() {
        let dump = DatasetDump::new(header(), DatasetExamples::Recognition(examples(&[1]))).unwrap();
        let mut text = String::from_utf8(dump.canonical_bytes()).unwrap();
        let start = text.len();
        text.push_str("{oops}\n");
        match DatasetDump::parse(&text, Path::new("d")) {
            Err(Error::Parse { offset, .. }) => assert!(offset >= start && offset < text.len()),
            other => panic!("{other:?}"),
        }
    }
}
