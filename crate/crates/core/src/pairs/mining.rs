use std::collections::BTreeMap;

use crate::corpus::AnnotationIndex;
use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};
use crate::seed;

use super::CaptionEmbeddingTable;

/// All corpus captions in ascending id order, with per-image positions so the
/// candidate set of an anchor (every caption of every other image) can be
/// indexed without materializing it.
pub struct CandidatePool {
    captions: Vec<u64>,
    positions: BTreeMap<u64, Vec<usize>>,
}

impl CandidatePool {
    pub fn new(index: &AnnotationIndex) -> Self {
        let mut captions = Vec::with_capacity(index.captions.len());
        let mut positions: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, c) in index.captions.values().enumerate() {
            captions.push(c.caption_id);
            positions.entry(c.image_id).or_default().push(i);
        }
        Self { captions, positions }
    }

    /// Sorted positions of `image_id`'s captions.
    fn excluded(&self, image_id: u64) -> &[usize] {
        self.positions.get(&image_id).map_or(&[], Vec::as_slice)
    }

    /// Number of candidates for an anchor on `image_id`.
    pub fn candidate_count(&self, image_id: u64) -> usize {
        self.captions.len() - self.excluded(image_id).len()
    }

    /// Samples up to `pool_size` distinct candidates and returns the one most
    /// similar to the anchor caption; ties go to the lowest caption id.
    pub fn mine<T: Scalar>(
        &self,
        anchor: (u64, u64),
        embeddings: &CaptionEmbeddingTable<T>,
        pool_size: usize,
        pool_seed: u64,
    ) -> Result<u64> {
        let (image_id, caption_id) = anchor;
        if pool_size == 0 {
            return Err(Error::Precondition("pool size must be at least 1".into()));
        }
        let anchor_vec = embeddings
            .get(caption_id)
            .ok_or_else(|| Error::Precondition(format!("no embedding for caption {caption_id}")))?;
        let excluded = self.excluded(image_id);
        let total = self.captions.len() - excluded.len();
        if total == 0 {
            return Err(Error::Mining(format!(
                "no candidate captions outside image {image_id}"
            )));
        }
        // k-th candidate = k-th caption position after skipping the anchor image's captions.
        let position = |k: usize| {
            let mut j = k;
            for &p in excluded {
                if p <= j {
                    j += 1;
                } else {
                    break;
                }
            }
            j
        };
        let picks: Vec<usize> = if total <= pool_size {
            (0..total).collect()
        } else {
            let mut rng = seed::rng(pool_seed);
            rand::seq::index::sample(&mut rng, total, pool_size).into_vec()
        };

        let mut best: Option<(T, u64)> = None;
        for k in picks {
            let candidate = self.captions[position(k)];
            let v = embeddings.get(candidate).ok_or_else(|| {
                Error::Precondition(format!("no embedding for caption {candidate}"))
            })?;
            let sim = dot(anchor_vec, v);
            best = match best {
                Some((s, id)) if s > sim || (s == sim && id < candidate) => Some((s, id)),
                _ => Some((sim, candidate)),
            };
        }
        Ok(best.expect("non-empty pool").1)
    }
}

/// Mines the hard negative for `anchor = (image_id, caption_id)`.
pub fn mine_hard_negative<T: Scalar>(
    anchor: (u64, u64),
    index: &AnnotationIndex,
    embeddings: &CaptionEmbeddingTable<T>,
    pool_size: usize,
    seed: u64,
) -> Result<u64> {
    CandidatePool::new(index).mine(anchor, embeddings, pool_size, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairs::tests::tiny_index;

    #[test]
    fn tie_breaks_to_lowest_caption_id() {
        // Image 1 owns captions 10, 11; candidates are 20, 21 (image 2) and 30, 31 (image 3).
        let index = tiny_index(&[&[], &[], &[]]);
        let mut emb = CaptionEmbeddingTable::<f64>::new(2).unwrap();
        let s = 0.9f64;
        let c = (1.0 - s * s).sqrt();
        emb.insert(10, vec![1.0, 0.0]).unwrap();
        emb.insert(11, vec![0.0, 1.0]).unwrap();
        emb.insert(20, vec![0.2, -(1.0f64 - 0.04).sqrt()]).unwrap();
        emb.insert(21, vec![s, c]).unwrap();
        emb.insert(30, vec![s, -c]).unwrap();
        emb.insert(31, vec![-1.0, 0.0]).unwrap();
        assert_eq!(emb.similarity(10, 21), emb.similarity(10, 30));
        let got = mine_hard_negative((1, 10), &index, &emb, 5000, 3).unwrap();
        assert_eq!(got, 21);
    }

    #[test]
    fn small_pool_ignores_seed_and_never_returns_sibling() {
        let index = tiny_index(&[&[], &[], &[]]);
        let mut emb = CaptionEmbeddingTable::<f32>::new(3).unwrap();
        for (i, id) in [10u64, 11, 20, 21, 30, 31].into_iter().enumerate() {
            emb.insert(id, vec![1.0, i as f32 * 0.01, 0.5]).unwrap();
        }
        let a = mine_hard_negative((1, 10), &index, &emb, 5000, 1).unwrap();
        for seed in 2..20 {
            assert_eq!(mine_hard_negative((1, 10), &index, &emb, 5000, seed).unwrap(), a);
        }
        assert!(a != 11 && a != 10);
    }

    #[test]
    fn single_image_corpus_fails() {
        let index = tiny_index(&[&[]]);
        let mut emb = CaptionEmbeddingTable::<f64>::new(1).unwrap();
        emb.insert(10, vec![1.0]).unwrap();
        emb.insert(11, vec![1.0]).unwrap();
        assert!(matches!(
            mine_hard_negative((1, 10), &index, &emb, 10, 0),
            Err(Error::Mining(_))
        ));
    }

    #[test]
    fn subsampled_pool_stays_outside_anchor_image() {
        let index = tiny_index(&[&[], &[], &[], &[], &[]]);
        let mut emb = CaptionEmbeddingTable::<f64>::new(2).unwrap();
        for id in index.captions.keys() {
            emb.insert(*id, vec![1.0, (*id as f64).sin()]).unwrap();
        }
        let pool = CandidatePool::new(&index);
        assert_eq!(pool.candidate_count(3), 8);
        for seed in 0..50 {
            let got = pool.mine((3, 30), &emb, 2, seed).unwrap();
            assert_ne!(index.captions[&got].image_id, 3);
        }
    }
}
