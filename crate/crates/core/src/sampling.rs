//! Hierarchical training-batch sampling and hard-negative mining.
//!
//! Scores are treated as inputs: whatever produced them (a network forward
//! pass, a heuristic) lives outside this crate.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{tube_overlap, Tube};
use crate::suppression::{score_order, ScoredTube};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("invalid batch config: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub chunks: usize,
    pub items_per_chunk: usize,
    pub max_positive_fraction: f64,
    /// Only used by [`compose_hard_batch`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_hard_fraction: Option<f64>,
}

impl BatchConfig {
    /// Proposal batches for the tube classifier: 4 chunks x 64, at most 25% positive.
    pub fn classifier() -> Self {
        Self { chunks: 4, items_per_chunk: 64, max_positive_fraction: 0.25, max_hard_fraction: None }
    }

    /// Anchor batches for the proposal network: 4 chunks x 128, at most 50% positive.
    pub fn proposal_network() -> Self {
        Self { chunks: 4, items_per_chunk: 128, max_positive_fraction: 0.5, max_hard_fraction: None }
    }

    /// Classifier batches with hard negatives: at most 25% positive, 50% hard.
    pub fn hard_mining() -> Self {
        Self { max_hard_fraction: Some(0.5), ..Self::classifier() }
    }

    pub fn batch_size(&self) -> usize {
        self.chunks * self.items_per_chunk
    }

    pub fn max_positives(&self) -> usize {
        (self.max_positive_fraction * self.batch_size() as f64).floor() as usize
    }

    pub fn max_hard(&self) -> usize {
        self.max_hard_fraction.map_or(0, |f| (f * self.batch_size() as f64).floor() as usize)
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.chunks == 0 || self.items_per_chunk == 0 {
            return Err(SamplingError::Config("counts must be >= 1"));
        }
        let frac = |f: f64| (0.0..=1.0).contains(&f);
        if !frac(self.max_positive_fraction) || !self.max_hard_fraction.is_none_or(frac) {
            return Err(SamplingError::Config("fractions must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Identifier of a labeled item within a chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ItemRef {
    pub chunk: usize,
    pub item: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChunkPool {
    pub positives: Vec<usize>,
    /// Background items in the standard overlap band.
    pub negatives: Vec<usize>,
    /// Items below the background band; never drawn by [`sample_batch`].
    pub far_negatives: Vec<usize>,
}

impl ChunkPool {
    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledPool {
    pub chunks: Vec<ChunkPool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Positive,
    Negative,
    HardNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BatchItem {
    #[serde(flatten)]
    pub item: ItemRef,
    pub kind: SampleKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    /// The pools could not supply a full batch.
    pub underfilled: bool,
}

impl Batch {
    pub fn count(&self, kind: SampleKind) -> usize {
        self.items.iter().filter(|i| i.kind == kind).count()
    }
}

/// Draws `config.chunks` non-empty chunks uniformly without replacement, then
/// up to `items_per_chunk` items from each. Positives are capped per batch
/// and handed out round-robin across the drawn chunks; the rest of every
/// chunk's slots go to negatives.
pub fn sample_batch(pool: &LabeledPool, config: &BatchConfig, seed: u64) -> Result<Batch, SamplingError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut order: Vec<usize> = (0..pool.chunks.len()).collect();
    order.shuffle(&mut rng);
    // empty chunks are skipped, which resamples in their place
    let chosen: Vec<usize> = order.into_iter().filter(|&c| !pool.chunks[c].is_empty()).take(config.chunks).collect();

    let mut pos: Vec<Vec<usize>> = Vec::with_capacity(chosen.len());
    let mut neg: Vec<Vec<usize>> = Vec::with_capacity(chosen.len());
    for &c in &chosen {
        let mut p = pool.chunks[c].positives.clone();
        let mut n = pool.chunks[c].negatives.clone();
        p.shuffle(&mut rng);
        n.shuffle(&mut rng);
        pos.push(p);
        neg.push(n);
    }

    let per_chunk = config.items_per_chunk;
    let mut take_pos = vec![0usize; chosen.len()];
    let mut budget = config.max_positives();
    let mut progressed = true;
    while budget > 0 && progressed {
        progressed = false;
        for k in 0..chosen.len() {
            if budget > 0 && take_pos[k] < pos[k].len().min(per_chunk) {
                take_pos[k] += 1;
                budget -= 1;
                progressed = true;
            }
        }
    }

    let mut items = Vec::with_capacity(config.batch_size());
    for (k, &c) in chosen.iter().enumerate() {
        let take_neg = neg[k].len().min(per_chunk - take_pos[k]);
        items.extend(pos[k][..take_pos[k]].iter().map(|&item| BatchItem {
            item: ItemRef { chunk: c, item },
            kind: SampleKind::Positive,
        }));
        items.extend(neg[k][..take_neg].iter().map(|&item| BatchItem {
            item: ItemRef { chunk: c, item },
            kind: SampleKind::Negative,
        }));
    }
    let underfilled = items.len() < config.batch_size();
    Ok(Batch { items, underfilled })
}

/// Indices of the `top_k` highest-scoring proposals that overlap no ground
/// truth at all, best first.
pub fn mine_hard_negatives(proposals: &[ScoredTube], gts: &[Tube], top_k: usize) -> Vec<usize> {
    let scores: Vec<f64> = proposals.iter().map(|p| p.score).collect();
    score_order(&scores)
        .into_iter()
        .filter(|&i| gts.iter().all(|g| tube_overlap(&proposals[i].tube, g) == 0.0))
        .take(top_k)
        .collect()
}

/// Default mining depth: twice the hard-negative slots of a batch.
pub fn default_mining_top_k(config: &BatchConfig) -> usize {
    2 * config.max_hard()
}

/// Batch of capped random positives, capped random hard negatives and
/// standard negatives for the remainder.
pub fn compose_hard_batch(
    positives: &[ItemRef],
    hard_negatives: &[ItemRef],
    negatives: &[ItemRef],
    config: &BatchConfig,
    seed: u64,
) -> Result<Batch, SamplingError> {
    config.validate()?;
    if config.max_hard_fraction.is_none() {
        return Err(SamplingError::Config("hard batches need max_hard_fraction"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(config.batch_size());
    let mut draw = |from: &[ItemRef], n: usize, kind: SampleKind, items: &mut Vec<BatchItem>, rng: &mut ChaCha8Rng| {
        let mut drawn = 0;
        for r in from.choose_multiple(rng, from.len()) {
            if drawn == n {
                break;
            }
            if seen.insert(*r) {
                items.push(BatchItem { item: *r, kind });
                drawn += 1;
            }
        }
    };
    draw(positives, config.max_positives(), SampleKind::Positive, &mut items, &mut rng);
    draw(hard_negatives, config.max_hard(), SampleKind::HardNegative, &mut items, &mut rng);
    let rest = config.batch_size() - items.len();
    draw(negatives, rest, SampleKind::Negative, &mut items, &mut rng);
    let underfilled = items.len() < config.batch_size();
    Ok(Batch { items, underfilled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn pool(chunks: usize, pos: usize, neg: usize) -> LabeledPool {
        LabeledPool {
            chunks: (0..chunks)
                .map(|_| ChunkPool {
                    positives: (0..pos).collect(),
                    negatives: (pos..pos + neg).collect(),
                    far_negatives: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn classifier_batch() {
        let b = sample_batch(&pool(10, 100, 100), &BatchConfig::classifier(), 1).unwrap();
        assert_eq!(b.items.len(), 256);
        assert_eq!(b.count(SampleKind::Positive), 64);
        assert!(!b.underfilled);
        let chunks: HashSet<usize> = b.items.iter().map(|i| i.item.chunk).collect();
        assert_eq!(chunks.len(), 4);
    }

    #[test]
    fn proposal_network_batch() {
        let b = sample_batch(&pool(6, 300, 300), &BatchConfig::proposal_network(), 9).unwrap();
        assert_eq!(b.items.len(), 512);
        assert_eq!(b.count(SampleKind::Positive), 256);
    }

    #[test]
    fn no_positives_gives_full_negative_batch() {
        let b = sample_batch(&pool(4, 0, 64), &BatchConfig::classifier(), 3).unwrap();
        assert_eq!(b.items.len(), 256);
        assert_eq!(b.count(SampleKind::Negative), 256);
    }

    #[test]
    fn empty_chunks_are_skipped_and_shortfall_flagged() {
        let mut p = pool(5, 10, 60);
        p.chunks[2] = ChunkPool::default();
        p.chunks[4] = ChunkPool::default();
        let b = sample_batch(&p, &BatchConfig::classifier(), 5).unwrap();
        assert!(b.items.iter().all(|i| i.item.chunk != 2 && i.item.chunk != 4));
        assert!(b.underfilled);
        assert_eq!(b.items.len(), 3 * 64);
    }

    #[test]
    fn deterministic() {
        let p = pool(8, 30, 200);
        let c = BatchConfig::classifier();
        assert_eq!(sample_batch(&p, &c, 11).unwrap(), sample_batch(&p, &c, 11).unwrap());
        assert_ne!(sample_batch(&p, &c, 11).unwrap(), sample_batch(&p, &c, 12).unwrap());
    }

    fn refs(chunk: usize, n: usize) -> Vec<ItemRef> {
        (0..n).map(|item| ItemRef { chunk, item }).collect()
    }

    #[test]
    fn hard_batch_composition() {
        let c = BatchConfig::hard_mining();
        let b = compose_hard_batch(&refs(0, 100), &refs(1, 200), &refs(2, 200), &c, 4).unwrap();
        assert_eq!(
            (b.count(SampleKind::Positive), b.count(SampleKind::HardNegative), b.count(SampleKind::Negative)),
            (64, 128, 64)
        );
        let b = compose_hard_batch(&refs(0, 100), &[], &refs(2, 300), &c, 4).unwrap();
        assert_eq!((b.count(SampleKind::Positive), b.count(SampleKind::Negative)), (64, 192));
        let b = compose_hard_batch(&refs(0, 100), &refs(1, 10), &refs(2, 5), &c, 4).unwrap();
        assert!(b.underfilled);
        assert!(compose_hard_batch(&[], &[], &[], &BatchConfig::classifier(), 0).is_err());
    }

    #[test]
    fn mining() {
        let gt = Tube::stationary(0, 5, BBox::new(0., 0., 10., 10.).unwrap()).unwrap();
        let far = |x: f64, score: f64| ScoredTube {
            tube: Tube::stationary(0, 5, BBox::new(x, 0., x + 10., 10.).unwrap()).unwrap(),
            score,
            class: None,
        };
        let mut props: Vec<ScoredTube> = (0..20).map(|i| far(100. + i as f64, (i * 13 % 20) as f64)).collect();
        props.push(ScoredTube { score: 1000.0, ..far(2.0, 0.0) });
        let hard = mine_hard_negatives(&props, &[gt], 5);
        let got: Vec<f64> = hard.iter().map(|&i| props[i].score).collect();
        assert_eq!(got, vec![19., 18., 17., 16., 15.]);
        assert!(!hard.contains(&20));
        assert_eq!(default_mining_top_k(&BatchConfig::hard_mining()), 256);
    }

    #[test]
    fn config_validation() {
        let mut c = BatchConfig::classifier();
        c.max_positive_fraction = 1.5;
        assert!(sample_batch(&pool(1, 1, 1), &c, 0).is_err());
        c = BatchConfig { chunks: 0, ..BatchConfig::classifier() };
        assert!(c.validate().is_err());
    }
}
