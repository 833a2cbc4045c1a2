//! Probing datasets: image-text entailment pairs with mined hard negatives,
//! and per-category leave-one-out recognition tasks.

mod dump;
mod mining;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotationIndex, CategoryIndex, Split, SplitAssignment, MAX_CATEGORIES};
use crate::error::{Error, Result};
use crate::prompts::Condition;
use crate::scalar::Scalar;
use crate::seed;

pub use dump::{DatasetDump, DatasetExamples, DatasetHeader, DatasetTask, LabelRecord};
pub use mining::{mine_hard_negative, CandidatePool};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntailmentExample {
    pub example_id: u64,
    pub image_id: u64,
    pub caption_id: u64,
    /// 1 when the caption belongs to the image.
    pub label: u8,
    /// On negatives: the positive caption this negative was mined against.
    pub anchor_positive_caption_id: Option<u64>,
    /// On negatives: seed of the candidate pool.
    pub pool_seed: Option<u64>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecognitionExample {
    pub example_id: u64,
    pub image_id: u64,
    pub target_category: CategoryIndex,
    pub label: u8,
    pub cue_list: Vec<CategoryIndex>,
    pub condition: Condition,
    pub shuffle_seed: u64,
    pub split: Split,
}

/// Sentence embeddings keyed by caption id, stored unit-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionEmbeddingTable<T> {
    dim: usize,
    vectors: BTreeMap<u64, Vec<T>>,
}

impl<T: Scalar> CaptionEmbeddingTable<T> {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Precondition("embedding dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            vectors: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, caption_id: u64, mut vector: Vec<T>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding of caption {caption_id}")));
        }
        let n = crate::scalar::norm(&vector);
        if n == T::zero() {
            return Err(Error::Precondition(format!(
                "embedding of caption {caption_id} has zero norm"
            )));
        }
        vector.iter_mut().for_each(|x| *x = *x / n);
        self.vectors.insert(caption_id, vector);
        Ok(())
    }

    /// Unit-normalized embedding.
    pub fn get(&self, caption_id: u64) -> Option<&[T]> {
        self.vectors.get(&caption_id).map(Vec::as_slice)
    }

    pub fn similarity(&self, a: u64, b: u64) -> Option<T> {
        Some(crate::scalar::dot(self.get(a)?, self.get(b)?))
    }

    /// Errors if any caption in the corpus has no embedding.
    pub fn check_covers(&self, index: &AnnotationIndex) -> Result<()> {
        match index.captions.keys().find(|id| !self.vectors.contains_key(id)) {
            Some(id) => Err(Error::Precondition(format!("no embedding for caption {id}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntailmentConfig {
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for EntailmentConfig {
    fn default() -> Self {
        Self {
            pool_size: 5000,
            seed: 0,
        }
    }
}

/// Positives for every caption of every image, each followed by one hard
/// negative mined from an independent pool. Negatives inherit the split of
/// their anchor image.
pub fn build_entailment_dataset<T: Scalar>(
    index: &AnnotationIndex,
    embeddings: &CaptionEmbeddingTable<T>,
    split: &SplitAssignment,
    cfg: &EntailmentConfig,
) -> Result<Vec<EntailmentExample>> {
    embeddings.check_covers(index)?;
    let pool = CandidatePool::new(index);
    let images: Vec<_> = index.images.values().collect();
    let per_image: Vec<Vec<EntailmentExample>> = images
        .par_iter()
        .map(|image| {
            let tag = split.get(image.image_id).ok_or_else(|| {
                Error::Precondition(format!("image {} has no split", image.image_id))
            })?;
            let mut out = Vec::with_capacity(2 * image.caption_ids.len());
            for &caption_id in &image.caption_ids {
                let pool_seed = seed::seed_mix(cfg.seed, image.image_id, caption_id);
                let negative = pool.mine(
                    (image.image_id, caption_id),
                    embeddings,
                    cfg.pool_size,
                    pool_seed,
                )?;
                out.push(EntailmentExample {
                    example_id: 0,
                    image_id: image.image_id,
                    caption_id,
                    label: 1,
                    anchor_positive_caption_id: None,
                    pool_seed: None,
                    split: tag,
                });
                out.push(EntailmentExample {
                    example_id: 0,
                    image_id: image.image_id,
                    caption_id: negative,
                    label: 0,
                    anchor_positive_caption_id: Some(caption_id),
                    pool_seed: Some(pool_seed),
                    split: tag,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut examples: Vec<_> = per_image.into_iter().flatten().collect();
    for (i, e) in examples.iter_mut().enumerate() {
        e.example_id = i as u64;
    }
    Ok(examples)
}

/// One example per image for target category `target`. WithCat cue lists are
/// a seeded shuffle of the image's other categories; NoCat cue lists are empty.
pub fn build_recognition_dataset(
    index: &AnnotationIndex,
    split: &SplitAssignment,
    condition: Condition,
    target: CategoryIndex,
    seed: u64,
) -> Result<Vec<RecognitionExample>> {
    use rand::seq::SliceRandom;

    if target as usize >= MAX_CATEGORIES || target as usize >= index.catalog.len() {
        return Err(Error::Precondition(format!(
            "target category {target} outside catalog of {}",
            index.catalog.len()
        )));
    }
    index
        .images
        .values()
        .enumerate()
        .map(|(i, image)| {
            let tag = split.get(image.image_id).ok_or_else(|| {
                Error::Precondition(format!("image {} has no split", image.image_id))
            })?;
            let shuffle_seed = seed::seed_mix(seed, image.image_id, target as u64);
            let cue_list = match condition {
                Condition::WithCat => {
                    let mut cues: Vec<_> =
                        image.categories.iter().copied().filter(|&c| c != target).collect();
                    cues.shuffle(&mut seed::rng(shuffle_seed));
                    cues
                }
                Condition::NoCat => Vec::new(),
            };
            Ok(RecognitionExample {
                example_id: i as u64,
                image_id: image.image_id,
                target_category: target,
                label: image.categories.contains(&target) as u8,
                cue_list,
                condition,
                shuffle_seed,
                split: tag,
            })
        })
        .collect()
}

/// Derives the recognition seed for one extraction epoch. Each extraction run
/// uses a fresh epoch so cue orders are reshuffled between runs.
pub fn recognition_epoch_seed(global_seed: u64, epoch: u64) -> u64 {
    seed::seed_mix(global_seed, seed::domain::RECOGNITION, epoch)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseStudySplit {
    pub target_category: Option<CategoryIndex>,
    pub seed: u64,
    pub positive_ids: Vec<u64>,
    pub negative_ids: Vec<u64>,
}

impl CaseStudySplit {
    pub fn len(&self) -> usize {
        self.positive_ids.len() + self.negative_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Uniform sample of `n` examples without replacement, partitioned by label.
pub fn sample_case_study(
    dataset: &[RecognitionExample],
    n: usize,
    seed: u64,
) -> Result<CaseStudySplit> {
    if n > dataset.len() {
        return Err(Error::Sizing(format!(
            "case study of {n} from a dataset of {}",
            dataset.len()
        )));
    }
    let mut sorted: Vec<&RecognitionExample> = dataset.iter().collect();
    sorted.sort_by_key(|e| e.example_id);
    let mut rng = seed::rng(seed::seed_mix(seed, seed::domain::CASE_STUDY, n as u64));
    let picks = rand::seq::index::sample(&mut rng, sorted.len(), n);
    let (mut positive_ids, mut negative_ids) = (Vec::new(), Vec::new());
    for i in picks.iter() {
        let e = sorted[i];
        if e.label == 1 {
            positive_ids.push(e.example_id);
        } else {
            negative_ids.push(e.example_id);
        }
    }
    positive_ids.sort_unstable();
    negative_ids.sort_unstable();
    let targets: std::collections::BTreeSet<_> = dataset.iter().map(|e| e.target_category).collect();
    Ok(CaseStudySplit {
        target_category: (targets.len() == 1).then(|| *targets.iter().next().unwrap()),
        seed,
        positive_ids,
        negative_ids,
    })
}
