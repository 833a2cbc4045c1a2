//! COCO caption and instance annotations, indexed for pair construction.
//!
//! Only a field subset of the COCO schema is read: `images[].id`,
//! `annotations[].{id, image_id, caption, category_id}` and
//! `categories[].{id, name}`. Source category ids (1..90 with gaps in the
//! official release) are remapped to contiguous indices in ascending source-id
//! order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{parse_error, Error, Result};
use crate::seed;

/// Maximum number of categories a catalog may hold.
pub const MAX_CATEGORIES: usize = 80;
/// Captions kept per image; extra captions are dropped at ingestion.
pub const CAPTIONS_PER_IMAGE: usize = 5;

/// Contiguous category index in `0..MAX_CATEGORIES`.
pub type CategoryIndex = u8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub caption_ids: Vec<u64>,
    pub categories: BTreeSet<CategoryIndex>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption_id: u64,
    pub image_id: u64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub index: CategoryIndex,
    pub name: String,
    pub source_id: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCatalog {
    pub entries: Vec<CategoryEntry>,
}

impl CategoryCatalog {
    /// Builds a catalog from `(source_id, name)` pairs, remapping source ids in
    /// ascending order.
    pub fn from_source(mut cats: Vec<(u64, String)>) -> Result<Self> {
        if cats.len() > MAX_CATEGORIES {
            return Err(Error::Schema(format!(
                "{} categories, at most {MAX_CATEGORIES} supported",
                cats.len()
            )));
        }
        cats.sort_by_key(|(id, _)| *id);
        let mut seen_ids = BTreeSet::new();
        let mut seen_names = BTreeSet::new();
        let mut entries = Vec::with_capacity(cats.len());
        for (index, (source_id, name)) in cats.into_iter().enumerate() {
            if !seen_ids.insert(source_id) {
                return Err(Error::Schema(format!("duplicate category id {source_id}")));
            }
            if !seen_names.insert(name.clone()) {
                return Err(Error::Schema(format!("duplicate category name {name:?}")));
            }
            entries.push(CategoryEntry {
                index: index as CategoryIndex,
                name,
                source_id,
            });
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, index: CategoryIndex) -> Option<&str> {
        self.entries.get(index as usize).map(|e| e.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<CategoryIndex> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.index)
    }

    fn index_of_source(&self, source_id: u64) -> Option<CategoryIndex> {
        self.entries
            .binary_search_by_key(&source_id, |e| e.source_id)
            .ok()
            .map(|i| self.entries[i].index)
    }

    fn validate(&self) -> Result<()> {
        if self.entries.len() > MAX_CATEGORIES {
            return Err(Error::Schema(format!("{} categories", self.entries.len())));
        }
        let mut names = BTreeSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.index as usize != i {
                return Err(Error::Schema(format!("category index {} out of order", e.index)));
            }
            if i > 0 && self.entries[i - 1].source_id >= e.source_id {
                return Err(Error::Schema("category source ids not ascending".into()));
            }
            if !names.insert(&e.name) {
                return Err(Error::Schema(format!("duplicate category name {:?}", e.name)));
            }
        }
        Ok(())
    }
}

/// SHA-256 digests of the source annotation files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceHashes {
    pub captions_sha256: String,
    pub instances_sha256: String,
}

/// Immutable in-memory corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnnotationIndex {
    pub images: BTreeMap<u64, ImageRecord>,
    pub captions: BTreeMap<u64, CaptionRecord>,
    pub catalog: CategoryCatalog,
    pub sources: Option<SourceHashes>,
}

/// Counts of input records that did not make it into the index.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub dropped_extra_captions: usize,
    pub instance_images_without_captions: usize,
    pub duplicate_caption_texts: usize,
}

#[derive(Deserialize)]
struct CocoFile {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    #[serde(default)]
    id: Option<u64>,
    image_id: u64,
    #[serde(default)]
    caption: Option<String>,
    #[serde(default)]
    category_id: Option<u64>,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

fn read_coco(path: &Path) -> Result<(CocoFile, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = sha256_hex(&bytes);
    let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
        message: "invalid UTF-8".into(),
    })?;
    let file = serde_json::from_str(&text).map_err(|e| parse_error(path, &text, &e))?;
    Ok((file, digest))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parses COCO captions and instances files into an [`AnnotationIndex`].
pub fn load_annotations(captions_path: &Path, instances_path: &Path) -> Result<AnnotationIndex> {
    load_annotations_with_stats(captions_path, instances_path).map(|(index, _)| index)
}

pub fn load_annotations_with_stats(
    captions_path: &Path,
    instances_path: &Path,
) -> Result<(AnnotationIndex, IngestStats)> {
    let (captions, captions_sha256) = read_coco(captions_path)?;
    let (instances, instances_sha256) = read_coco(instances_path)?;
    let (mut index, stats) = build_index(captions, instances)?;
    index.sources = Some(SourceHashes {
        captions_sha256,
        instances_sha256,
    });
    Ok((index, stats))
}

fn build_index(captions: CocoFile, instances: CocoFile) -> Result<(AnnotationIndex, IngestStats)> {
    let mut stats = IngestStats::default();
    let known_images: BTreeSet<u64> = captions.images.iter().map(|i| i.id).collect();

    let mut all_captions: BTreeMap<u64, CaptionRecord> = BTreeMap::new();
    for ann in captions.annotations {
        let Some(text) = ann.caption else { continue };
        let caption_id = ann.id.ok_or_else(|| {
            Error::Schema(format!("caption annotation on image {} has no id", ann.image_id))
        })?;
        if !known_images.contains(&ann.image_id) {
            return Err(Error::Integrity(format!(
                "caption {caption_id} references unknown image {}",
                ann.image_id
            )));
        }
        if text.trim().is_empty() {
            return Err(Error::Integrity(format!("caption {caption_id} is empty")));
        }
        let record = CaptionRecord {
            caption_id,
            image_id: ann.image_id,
            text,
        };
        if all_captions.insert(caption_id, record).is_some() {
            return Err(Error::Integrity(format!("duplicate caption id {caption_id}")));
        }
    }

    let catalog = CategoryCatalog::from_source(
        instances
            .categories
            .into_iter()
            .map(|c| (c.id, c.name))
            .collect(),
    )?;

    let mut images: BTreeMap<u64, ImageRecord> = BTreeMap::new();
    let mut kept: BTreeMap<u64, CaptionRecord> = BTreeMap::new();
    for (caption_id, record) in all_captions {
        let image = images.entry(record.image_id).or_insert_with(|| ImageRecord {
            image_id: record.image_id,
            caption_ids: Vec::new(),
            categories: BTreeSet::new(),
        });
        if image.caption_ids.len() >= CAPTIONS_PER_IMAGE {
            stats.dropped_extra_captions += 1;
            continue;
        }
        image.caption_ids.push(caption_id);
        kept.insert(caption_id, record);
    }

    let mut orphan_instance_images = BTreeSet::new();
    for ann in instances.annotations {
        let Some(source_id) = ann.category_id else { continue };
        let index = catalog.index_of_source(source_id).ok_or_else(|| {
            Error::Schema(format!("instance annotation uses unknown category id {source_id}"))
        })?;
        match images.get_mut(&ann.image_id) {
            Some(image) => {
                image.categories.insert(index);
            }
            None => {
                orphan_instance_images.insert(ann.image_id);
            }
        }
    }
    stats.instance_images_without_captions = orphan_instance_images.len();

    let mut texts = BTreeMap::<&str, usize>::new();
    for c in kept.values() {
        *texts.entry(c.text.as_str()).or_default() += 1;
    }
    stats.duplicate_caption_texts = texts.values().filter(|&&n| n > 1).map(|n| n - 1).sum();

    let index = AnnotationIndex {
        images,
        captions: kept,
        catalog,
        sources: None,
    };
    Ok((index, stats))
}

#[derive(Serialize, Deserialize)]
struct CorpusDump {
    format: String,
    sources: Option<SourceHashes>,
    categories: Vec<CategoryEntry>,
    images: Vec<ImageRecord>,
    captions: Vec<CaptionRecord>,
}

const CORPUS_FORMAT: &str = "layerprobe-corpus/1";

impl AnnotationIndex {
    pub fn caption(&self, caption_id: u64) -> Option<&CaptionRecord> {
        self.captions.get(&caption_id)
    }

    pub fn image(&self, image_id: u64) -> Option<&ImageRecord> {
        self.images.get(&image_id)
    }

    /// Canonical `corpus.json` bytes: keys in declaration order, records
    /// ascending by id, trailing newline.
    pub fn to_canonical_json(&self) -> Vec<u8> {
        let dump = CorpusDump {
            format: CORPUS_FORMAT.into(),
            sources: self.sources.clone(),
            categories: self.catalog.entries.clone(),
            images: self.images.values().cloned().collect(),
            captions: self.captions.values().cloned().collect(),
        };
        let mut out = serde_json::to_vec_pretty(&dump).expect("corpus serializes");
        out.push(b'\n');
        out
    }

    /// SHA-256 over the canonical dump; identifies the corpus in dataset headers.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_canonical_json())
    }

    pub fn from_json_str(text: &str, path: &Path) -> Result<Self> {
        let dump: CorpusDump = serde_json::from_str(text).map_err(|e| parse_error(path, text, &e))?;
        if dump.format != CORPUS_FORMAT {
            return Err(Error::Schema(format!("unsupported corpus format {:?}", dump.format)));
        }
        let catalog = CategoryCatalog {
            entries: dump.categories,
        };
        catalog.validate()?;
        let mut images = BTreeMap::new();
        for image in dump.images {
            if images.insert(image.image_id, image.clone()).is_some() {
                return Err(Error::Integrity(format!("duplicate image {}", image.image_id)));
            }
        }
        let mut captions = BTreeMap::new();
        for caption in dump.captions {
            if captions.insert(caption.caption_id, caption.clone()).is_some() {
                return Err(Error::Integrity(format!(
                    "duplicate caption id {}",
                    caption.caption_id
                )));
            }
        }
        let index = AnnotationIndex {
            images,
            captions,
            catalog,
            sources: dump.sources,
        };
        index.check_integrity()?;
        Ok(index)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_canonical_json()).map_err(|e| Error::io(path, e))
    }

    /// Checks referential integrity in both directions.
    pub fn check_integrity(&self) -> Result<()> {
        let ncat = self.catalog.len();
        let mut owner = BTreeMap::new();
        for image in self.images.values() {
            if image.caption_ids.is_empty() || image.caption_ids.len() > CAPTIONS_PER_IMAGE {
                return Err(Error::Integrity(format!(
                    "image {} has {} captions",
                    image.image_id,
                    image.caption_ids.len()
                )));
            }
            if let Some(&c) = image.categories.iter().find(|&&c| c as usize >= ncat) {
                return Err(Error::Integrity(format!(
                    "image {} uses category index {c} outside the catalog",
                    image.image_id
                )));
            }
            for &cid in &image.caption_ids {
                if owner.insert(cid, image.image_id).is_some() {
                    return Err(Error::Integrity(format!("caption {cid} listed by two images")));
                }
                match self.captions.get(&cid) {
                    Some(c) if c.image_id == image.image_id => {}
                    _ => {
                        return Err(Error::Integrity(format!(
                            "image {} lists caption {cid} it does not own",
                            image.image_id
                        )))
                    }
                }
            }
        }
        for c in self.captions.values() {
            if owner.get(&c.caption_id) != Some(&c.image_id) {
                return Err(Error::Integrity(format!(
                    "caption {} not listed by image {}",
                    c.caption_id, c.image_id
                )));
            }
            if c.text.trim().is_empty() {
                return Err(Error::Integrity(format!("caption {} is empty", c.caption_id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.as_array();
        if r.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Precondition(format!("split ratios must be non-negative: {r:?}")));
        }
        if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!("split ratios must sum to 1: {r:?}")));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` items; each count is within 1 of
    /// its exact share.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let exact = self.as_array().map(|r| r * n as f64);
        let mut counts = exact.map(|x| (x + 1e-9).floor() as usize);
        let mut rest = n.saturating_sub(counts.iter().sum());
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let fa = exact[a] - counts[a] as f64;
            let fb = exact[b] - counts[b] as f64;
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if rest == 0 {
                break;
            }
            if self.as_array()[i] > 0.0 {
                counts[i] += 1;
                rest -= 1;
            }
        }
        counts
    }
}

/// Image id to split tag.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment(pub BTreeMap<u64, Split>);

impl SplitAssignment {
    pub fn get(&self, image_id: u64) -> Option<Split> {
        self.0.get(&image_id).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.0.values().filter(|&&s| s == split).count()
    }
}

/// Seeded image-level split. Image ids are sorted before shuffling so the
/// result does not depend on insertion order.
pub fn split_by_image(index: &AnnotationIndex, ratios: SplitRatios, seed: u64) -> Result<SplitAssignment> {
    ratios.validate()?;
    let ids: Vec<u64> = index.images.keys().copied().collect();
    split_ids(ids, ratios, seed)
}

pub(crate) fn split_ids(mut ids: Vec<u64>, ratios: SplitRatios, seed: u64) -> Result<SplitAssignment> {
    use rand::seq::SliceRandom;

    ids.sort_unstable();
    ids.dedup();
    let needed = ratios.as_array().iter().filter(|&&r| r > 0.0).count();
    if ids.len() < needed {
        return Err(Error::Sizing(format!(
            "{} images cannot fill {needed} non-empty splits",
            ids.len()
        )));
    }
    let mut rng = seed::rng(seed::seed_mix(seed, seed::domain::SPLIT, 0));
    ids.shuffle(&mut rng);
    let [n_train, n_val, _] = ratios.counts(ids.len());
    let map = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id, split)
        })
        .collect();
    Ok(SplitAssignment(map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::File::create(&path).unwrap().write_all(body.as_bytes()).unwrap();
        path
    }

    fn two_image_fixture() -> (tempfile::TempDir, std::path::PathBuf, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let mut anns = Vec::new();
        for (img, base) in [(1u64, 100u64), (2, 200)] {
            for k in 0..5 {
                anns.push(format!(
                    r#"{{"id": {}, "image_id": {img}, "caption": "caption {k} of image {img}"}}"#,
                    base + k
                ));
            }
        }
        let captions = format!(
            r#"{{"images": [{{"id": 1}}, {{"id": 2}}], "annotations": [{}]}}"#,
            anns.join(",")
        );
        let instances = r#"{
            "images": [{"id": 1}, {"id": 2}],
            "annotations": [{"id": 9, "image_id": 1, "category_id": 1},
                            {"id": 10, "image_id": 2, "category_id": 18},
                            {"id": 11, "image_id": 2, "category_id": 18}],
            "categories": [{"id": 18, "name": "dog"}, {"id": 1, "name": "person"}]
        }"#;
        let c = write_tmp(&dir, "captions.json", &captions);
        let i = write_tmp(&dir, "instances.json", instances);
        (dir, c, i)
    }

    #[test]
    fn loads_two_image_fixture() {
        let (_dir, c, i) = two_image_fixture();
        let index = load_annotations(&c, &i).unwrap();
        assert_eq!(index.images.len(), 2);
        assert_eq!(index.captions.len(), 10);
        assert_eq!(index.catalog.len(), 2);
        assert_eq!(index.catalog.name(0), Some("person"));
        assert_eq!(index.catalog.name(1), Some("dog"));
        assert_eq!(index.images[&1].categories, BTreeSet::from([0]));
        assert_eq!(index.images[&2].categories, BTreeSet::from([1]));
        assert!(index.sources.is_some());
        index.check_integrity().unwrap();
    }

    #[test]
    fn empty_annotations_give_empty_index() {
        let dir = tempfile::tempdir().unwrap();
        let c = write_tmp(&dir, "c.json", r#"{"images": [], "annotations": []}"#);
        let i = write_tmp(&dir, "i.json", r#"{"images": [], "annotations": [], "categories": []}"#);
        let index = load_annotations(&c, &i).unwrap();
        assert!(index.images.is_empty());
        assert!(index.captions.is_empty());
    }

    #[test]
    fn unknown_image_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = write_tmp(
            &dir,
            "c.json",
            r#"{"images": [{"id": 1}], "annotations": [{"id": 5, "image_id": 7, "caption": "x"}]}"#,
        );
        let i = write_tmp(&dir, "i.json", r#"{"categories": []}"#);
        assert!(matches!(load_annotations(&c, &i), Err(Error::Integrity(_))));
    }

    #[test]
    fn duplicate_caption_id_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = write_tmp(
            &dir,
            "c.json",
            r#"{"images": [{"id": 1}], "annotations": [
                {"id": 5, "image_id": 1, "caption": "x"},
                {"id": 5, "image_id": 1, "caption": "y"}]}"#,
        );
        let i = write_tmp(&dir, "i.json", r#"{"categories": []}"#);
        assert!(matches!(load_annotations(&c, &i), Err(Error::Integrity(_))));
    }

    #[test]
    fn too_many_categories_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let cats: Vec<String> = (1..=81)
            .map(|i| format!(r#"{{"id": {i}, "name": "c{i}"}}"#))
            .collect();
        let c = write_tmp(&dir, "c.json", r#"{"images": [], "annotations": []}"#);
        let i = write_tmp(&dir, "i.json", &format!(r#"{{"categories": [{}]}}"#, cats.join(",")));
        assert!(matches!(load_annotations(&c, &i), Err(Error::Schema(_))));
    }

    #[test]
    fn malformed_json_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let c = write_tmp(&dir, "c.json", r#"{"images": [}"#);
        let i = write_tmp(&dir, "i.json", r#"{}"#);
        match load_annotations(&c, &i) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn images_without_instances_get_empty_categories_and_extra_captions_drop() {
        let dir = tempfile::tempdir().unwrap();
        let anns: Vec<String> = (0..7)
            .map(|k| format!(r#"{{"id": {}, "image_id": 3, "caption": "c{k}"}}"#, 10 - k))
            .collect();
        let c = write_tmp(
            &dir,
            "c.json",
            &format!(r#"{{"images": [{{"id": 3}}], "annotations": [{}]}}"#, anns.join(",")),
        );
        let i = write_tmp(&dir, "i.json", r#"{"categories": [{"id": 1, "name": "person"}]}"#);
        let (index, stats) = load_annotations_with_stats(&c, &i).unwrap();
        assert!(index.images[&3].categories.is_empty());
        assert_eq!(index.images[&3].caption_ids, vec![4, 5, 6, 7, 8]);
        assert_eq!(stats.dropped_extra_captions, 2);
    }

    #[test]
    fn canonical_dump_round_trips() {
        let (_dir, c, i) = two_image_fixture();
        let index = load_annotations(&c, &i).unwrap();
        let bytes = index.to_canonical_json();
        let back = AnnotationIndex::from_json_str(std::str::from_utf8(&bytes).unwrap(), Path::new("m")).unwrap();
        assert_eq!(back, index);
        assert_eq!(back.to_canonical_json(), bytes);
    }

    fn index_with_images(ids: &[u64]) -> AnnotationIndex {
        let mut index = AnnotationIndex::default();
        for &id in ids {
            index.images.insert(
                id,
                ImageRecord {
                    image_id: id,
                    caption_ids: vec![id * 10],
                    categories: BTreeSet::new(),
                },
            );
        }
        index
    }

    #[test]
    fn split_ten_images() {
        let index = index_with_images(&(1..=10).collect::<Vec<_>>());
        let a = split_by_image(&index, SplitRatios::default(), 7).unwrap();
        assert_eq!(
            (a.count(Split::Train), a.count(Split::Val), a.count(Split::Test)),
            (8, 1, 1)
        );
        assert_eq!(a, split_by_image(&index, SplitRatios::default(), 7).unwrap());
    }

    #[test]
    fn split_single_image_all_train() {
        let index = index_with_images(&[42]);
        let a = split_by_image(&index, SplitRatios::new(1.0, 0.0, 0.0), 1).unwrap();
        assert_eq!(a.get(42), Some(Split::Train));
    }

    #[test]
    fn split_independent_of_insertion_order() {
        let a = split_ids(vec![5, 1, 9, 3, 7, 2], SplitRatios::default(), 11).unwrap();
        let b = split_ids(vec![2, 3, 9, 1, 5, 7], SplitRatios::default(), 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_too_few_images() {
        let index = index_with_images(&[1, 2]);
        assert!(matches!(
            split_by_image(&index, SplitRatios::default(), 0),
            Err(Error::Sizing(_))
        ));
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let index = index_with_images(&[1, 2, 3]);
        assert!(split_by_image(&index, SplitRatios::new(0.5, 0.5, 0.5), 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn split_counts_within_one(n in 3usize..500, a in 0.05f64..0.9, b in 0.05f64..0.9) {
            let total = a + b + 0.05;
            let ratios = SplitRatios::new(a / total, b / total, 0.05 / total);
            let counts = ratios.counts(n);
            proptest::prop_assert_eq!(counts.iter().sum::<usize>(), n);
            for (c, r) in counts.iter().zip(ratios.as_array()) {
                proptest::prop_assert!((*c as f64 - r * n as f64).abs() <= 1.0);
            }
        }
    }
}
