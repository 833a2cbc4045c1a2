//! Deterministic synthetic stand-ins for the external inputs: a COCO-shaped
//! corpus, caption embeddings, and hidden-state feature runs with planted
//! label signal. Nothing here depends on a real model.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use crate::corpus::{sha256_hex, AnnotationIndex};
use crate::error::{Error, Result};
use crate::features::{FeatureManifest, RunRole, RunWriter, TokenLog, TokenRow};
use crate::matrix::Matrix;
use crate::pairs::{DatasetDump, DatasetExamples, DatasetTask};
use crate::prompts::Condition;
use crate::seed::{self, domain};

/// The 80 COCO 2014 object categories with their source ids.
pub const COCO_CATEGORIES: [(u64, &str); 80] = [
    (1, "person"), (2, "bicycle"), (3, "car"), (4, "motorcycle"), (5, "airplane"),
    (6, "bus"), (7, "train"), (8, "truck"), (9, "boat"), (10, "traffic light"),
    (11, "fire hydrant"), (13, "stop sign"), (14, "parking meter"), (15, "bench"), (16, "bird"),
    (17, "cat"), (18, "dog"), (19, "horse"), (20, "sheep"), (21, "cow"),
    (22, "elephant"), (23, "bear"), (24, "zebra"), (25, "giraffe"), (27, "backpack"),
    (28, "umbrella"), (31, "handbag"), (32, "tie"), (33, "suitcase"), (34, "frisbee"),
    (35, "skis"), (36, "snowboard"), (37, "sports ball"), (38, "kite"), (39, "baseball bat"),
    (40, "baseball glove"), (41, "skateboard"), (42, "surfboard"), (43, "tennis racket"), (44, "bottle"),
    (46, "wine glass"), (47, "cup"), (48, "fork"), (49, "knife"), (50, "spoon"),
    (51, "bowl"), (52, "banana"), (53, "apple"), (54, "sandwich"), (55, "orange"),
    (56, "broccoli"), (57, "carrot"), (58, "hot dog"), (59, "pizza"), (60, "donut"),
    (61, "cake"), (62, "chair"), (63, "couch"), (64, "potted plant"), (65, "bed"),
    (67, "dining table"), (70, "toilet"), (72, "tv"), (73, "laptop"), (74, "mouse"),
    (75, "remote"), (76, "keyboard"), (77, "cell phone"), (78, "microwave"), (79, "oven"),
    (80, "toaster"), (81, "sink"), (82, "refrigerator"), (84, "book"), (85, "clock"),
    (86, "vase"), (87, "scissors"), (88, "teddy bear"), (89, "hair drier"), (90, "toothbrush"),
];

/// Seed of the shipped fixture corpus.
pub const FIXTURE_SEED: u64 = 20240601;
pub const FIXTURE_IMAGES: usize = 50;

const ADJECTIVES: [&str; 8] = ["small", "large", "red", "old", "white", "shiny", "wooden", "blue"];
const PLACES: [&str; 6] = ["on a street", "in a kitchen", "at the park", "near the water", "in a room", "on a field"];

/// COCO-format captions and instances files as JSON values.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub captions: serde_json::Value,
    pub instances: serde_json::Value,
}

impl SyntheticCorpus {
    /// Writes `captions.json` and `instances.json` (pretty JSON, trailing newline).
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, value) in [("captions.json", &self.captions), ("instances.json", &self.instances)] {
            let path = dir.join(name);
            let mut bytes = serde_json::to_vec_pretty(value)?;
            bytes.push(b'\n');
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// `n_images` images with five captions each. Even-numbered images contain a
/// person; every image also holds two rotating categories plus up to one
/// random one, so every category occurs when `n_images >= 40`.
pub fn synthetic_corpus(n_images: usize, seed: u64) -> SyntheticCorpus {
    let mut images = Vec::new();
    let mut captions = Vec::new();
    let mut instances = Vec::new();
    let mut caption_id = 1u64;
    let mut instance_id = 1u64;
    for i in 0..n_images {
        let image_id = 100_000 + 37 * i as u64;
        let mut rng = seed::rng(seed::seed_mix(seed, domain::SYNTH, image_id));
        let mut cats: Vec<usize> = Vec::new();
        if i % 2 == 0 {
            cats.push(0);
        }
        cats.push(1 + (2 * i) % 79);
        cats.push(1 + (2 * i + 1) % 79);
        for _ in 0..rng.gen_range(0..=1) {
            let c = rng.gen_range(1..80);
            if !cats.contains(&c) {
                cats.push(c);
            }
        }
        images.push(json!({"id": image_id, "file_name": format!("synthetic_{image_id:012}.jpg")}));
        for &c in &cats {
            instances.push(json!({"id": instance_id, "image_id": image_id, "category_id": COCO_CATEGORIES[c].0}));
            instance_id += 1;
        }
        for _ in 0..5 {
            let a = COCO_CATEGORIES[*cats.choose(&mut rng).unwrap()].1;
            let b = COCO_CATEGORIES[*cats.choose(&mut rng).unwrap()].1;
            let adj = ADJECTIVES.choose(&mut rng).unwrap();
            let place = PLACES.choose(&mut rng).unwrap();
            let text = match rng.gen_range(0..3) {
                0 => format!("A {adj} {a} {place}."),
                1 => format!("A {a} next to a {adj} {b}."),
                _ => format!("There is a {a} and a {b} {place}."),
            };
            captions.push(json!({"id": caption_id, "image_id": image_id, "caption": text}));
            caption_id += 1;
        }
    }
    let categories: Vec<_> = COCO_CATEGORIES
        .iter()
        .map(|&(id, name)| json!({"id": id, "name": name, "supercategory": "object"}))
        .collect();
    SyntheticCorpus {
        captions: json!({"images": images, "annotations": captions}),
        instances: json!({"images": images, "annotations": instances, "categories": categories}),
    }
}

/// The shipped 50-image fixture.
pub fn fixture_corpus() -> SyntheticCorpus {
    synthetic_corpus(FIXTURE_IMAGES, FIXTURE_SEED)
}

fn word_seed(word: &str) -> u64 {
    let digest = sha256_hex(word.to_lowercase().as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

/// Bag-of-words caption embeddings: each word maps to a fixed random
/// direction, and a caption is the sum over its words. Captions sharing words
/// are therefore similar.
pub fn synthetic_caption_embeddings(index: &AnnotationIndex, dim: usize, seed: u64) -> Result<(Vec<u64>, Matrix<f32>)> {
    if dim == 0 {
        return Err(Error::Precondition("embedding dimension must be positive".into()));
    }
    let mut ids = Vec::with_capacity(index.captions.len());
    let mut data = Vec::with_capacity(index.captions.len() * dim);
    for (&id, caption) in &index.captions {
        let mut v = vec![0f32; dim];
        for word in caption.text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let mut rng = seed::rng(seed::seed_mix(seed, domain::SYNTH, word_seed(word)));
            for x in v.iter_mut() {
                *x += rng.sample::<f32, _>(StandardNormal);
            }
        }
        if v.iter().all(|&x| x == 0.0) {
            v[0] = 1.0;
        }
        ids.push(id);
        data.extend(v);
    }
    let m = Matrix::new(ids.len(), dim, data)?;
    Ok((ids, m))
}

/// Two Gaussian classes in `d` dimensions with identity covariance and means
/// at `±(margin_sigma)` along the first axis. Labels alternate 0, 1, 0, ...
pub fn gaussian_blobs(n: usize, d: usize, margin_sigma: f64, seed: u64) -> (Matrix<f64>, Vec<u8>) {
    let mut rng = seed::rng(seed::seed_mix(seed, domain::SYNTH, 0xB10B));
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = (i % 2) as u8;
        let sign = if y == 1 { 1.0 } else { -1.0 };
        for j in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(if j == 0 { sign * margin_sigma + noise } else { noise });
        }
        labels.push(y);
    }
    (Matrix::new(n, d, data).expect("shape"), labels)
}

/// Shape of the planted signal across depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalProfile {
    pub num_layers: u16,
    pub dim: usize,
    /// Class-mean separation (in noise standard deviations) at the peak layer.
    pub peak_strength: f64,
    /// Layer with the strongest signal.
    pub peak_layer: u16,
}

impl SignalProfile {
    /// Signal strength at `layer`: a triangle peaking at `peak_layer`, with a
    /// floor of a quarter of the peak.
    pub fn strength(&self, layer: u16) -> f64 {
        let dist = (layer as f64 - self.peak_layer as f64).abs();
        let reach = self.num_layers.max(2) as f64;
        self.peak_strength * (1.0 - 0.75 * (dist / reach).min(1.0))
    }
}

const NOCAT_TOKENS: [(&str, u32); 5] = [("A", 90), ("a", 4), ("Two", 2), ("An", 2), ("black", 2)];
const WITHCAT_POSITIVE: [(&str, u32); 5] = [("man", 30), ("people", 25), ("woman", 20), ("and", 15), ("person", 10)];
const WITHCAT_NEGATIVE: [(&str, u32); 5] = [("and", 30), ("grass", 20), ("street", 20), ("table", 15), ("water", 15)];

fn pick<'a>(table: &[(&'a str, u32)], rng: &mut impl Rng) -> &'a str {
    table.choose_weighted(rng, |e| e.1).expect("non-empty table").0
}

/// Writes a hidden-state run for `dump` whose rows carry a label signal of the
/// given profile. Each row depends only on (seed, example id, layer), so the
/// output is independent of example order. Recognition runs also get a token
/// log.
pub fn write_synthetic_run(
    dir: &Path,
    run_id: &str,
    dump: &DatasetDump,
    profile: &SignalProfile,
    seed: u64,
) -> Result<FeatureManifest> {
    if profile.num_layers == 0 || profile.dim == 0 {
        return Err(Error::Precondition("synthetic run needs at least one layer and one dimension".into()));
    }
    let labels = dump.labels();
    let ids: Vec<u64> = labels.keys().copied().collect();
    let mut manifest = FeatureManifest::new(RunRole::HiddenStates, run_id, "synthetic", &dump.hash());
    manifest.template_id = Some(dump.header.template_id);
    manifest.condition = dump.header.condition;
    manifest.target_category = dump.header.target_category;
    // The signal direction is shared by every row of the run.
    let mut dir_rng = seed::rng(seed::seed_mix(seed, domain::SYNTH, 0xD1));
    let mut direction: Vec<f64> = (0..profile.dim).map(|_| dir_rng.sample(StandardNormal)).collect();
    let n = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
    direction.iter_mut().for_each(|x| *x /= n);

    let mut writer = RunWriter::create(dir, manifest, ids.clone())?;
    for layer in 1..=profile.num_layers {
        let shift = profile.strength(layer) / 2.0;
        let mut data = Vec::with_capacity(ids.len() * profile.dim);
        for id in &ids {
            let sign = if labels[id].label == 1 { 1.0 } else { -1.0 };
            let mut rng = seed::rng(seed::seed_mix(seed, *id, layer as u64));
            data.extend(direction.iter().map(|&u| {
                let noise: f64 = rng.sample(StandardNormal);
                (noise + sign * shift * u) as f32
            }));
        }
        writer.write_layer(layer, &Matrix::new(ids.len(), profile.dim, data)?)?;
    }
    if dump.header.task == DatasetTask::Recognition {
        if let DatasetExamples::Recognition(examples) = &dump.examples {
            let rows = examples
                .iter()
                .map(|e| {
                    let mut rng = seed::rng(seed::seed_mix(seed, e.example_id, 0x70CE));
                    let table: &[(&str, u32)] = match (e.condition, e.label) {
                        (Condition::NoCat, _) => &NOCAT_TOKENS,
                        (Condition::WithCat, 1) => &WITHCAT_POSITIVE,
                        (Condition::WithCat, _) => &WITHCAT_NEGATIVE,
                    };
                    TokenRow {
                        example_id: e.example_id,
                        first_generated_token: pick(table, &mut rng).to_string(),
                    }
                })
                .collect();
            writer.write_tokens(&TokenLog { rows })?;
        }
    }
    writer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CategoryCatalog;

    #[test]
    fn category_table_is_the_coco_release() {
        let ids: Vec<u64> = COCO_CATEGORIES.iter().map(|c| c.0).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(ids.last(), Some(&90));
        let missing: Vec<u64> = (1..=90).filter(|i| !ids.contains(i)).collect();
        assert_eq!(missing, vec![12, 26, 29, 30, 45, 66, 68, 69, 71, 83]);
        let catalog = CategoryCatalog::from_source(COCO_CATEGORIES.iter().map(|&(i, n)| (i, n.to_string())).collect()).unwrap();
        assert_eq!(catalog.index_of("toothbrush"), Some(79));
    }

    #[test]
    fn corpus_is_deterministic_and_covers_categories() {
        let a = fixture_corpus();
        assert_eq!(a, fixture_corpus());
        assert_eq!(a.captions["annotations"].as_array().unwrap().len(), 250);
        let used: std::collections::BTreeSet<u64> = a.instances["annotations"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v["category_id"].as_u64().unwrap())
            .collect();
        assert_eq!(used.len(), 80);
        assert_ne!(a, synthetic_corpus(FIXTURE_IMAGES, FIXTURE_SEED + 1));
    }

    #[test]
    fn blobs_are_balanced() {
        let (x, y) = gaussian_blobs(100, 3, 4.0, 1);
        assert_eq!(x.rows(), 100);
        assert_eq!(y.iter().filter(|&&l| l == 1).count(), 50);
    }

    #[test]
    fn signal_peaks_where_asked() {
        let p = SignalProfile {
            num_layers: 8,
            dim: 4,
            peak_strength: 3.0,
            peak_layer: 5,
        };
        assert_eq!(p.strength(5), 3.0);
        assert!(p.strength(1) < p.strength(4));
        assert!(p.strength(8) < p.strength(6));
        assert!(p.strength(1) >= 0.75);
    }
}
