//! Tube proposals from start-frame seed boxes and point tracks.
//!
//! For each seed box, the point tracks starting inside it are grouped by
//! motion direction, the most populated groups each get a RANSAC translation
//! estimate, and the box is moved linearly along every estimate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, GeometryError, Tube};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotionError {
    #[error("tube length must be at least 2 for track-based proposals, got {0}")]
    ShortChunk(usize),
    #[error("invalid motion config: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Displacement of one tracked point between the chunk's first and last frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointTrack {
    pub start: [f64; 2],
    pub end: [f64; 2],
}

impl PointTrack {
    pub fn new(start: [f64; 2], end: [f64; 2]) -> Self {
        Self { start, end }
    }

    pub fn displacement(&self) -> [f64; 2] {
        [self.end[0] - self.start[0], self.end[1] - self.start[1]]
    }

    pub fn is_finite(&self) -> bool {
        self.start.iter().chain(&self.end).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionConfig {
    /// Number of equal direction sectors.
    pub direction_bins: usize,
    /// Motion hypotheses kept per seed box.
    pub hypotheses: usize,
    /// Tracks moving less than this many pixels are stationary.
    pub stationary_epsilon: f64,
    pub ransac_iterations: usize,
    /// Endpoint error, in pixels, under which a track supports a hypothesis.
    pub inlier_threshold: f64,
    /// Groups smaller than this are not considered.
    pub min_group_size: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            direction_bins: 16,
            hypotheses: 4,
            stationary_epsilon: 0.5,
            ransac_iterations: 100,
            inlier_threshold: 2.0,
            min_group_size: 3,
        }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<(), MotionError> {
        if self.direction_bins == 0 {
            return Err(MotionError::Config("direction_bins must be >= 1"));
        }
        if self.hypotheses == 0 {
            return Err(MotionError::Config("hypotheses must be >= 1"));
        }
        if !(self.stationary_epsilon >= 0.0 && self.inlier_threshold >= 0.0) {
            return Err(MotionError::Config("epsilon and inlier threshold must be >= 0"));
        }
        if self.ransac_iterations == 0 {
            return Err(MotionError::Config("ransac_iterations must be >= 1"));
        }
        Ok(())
    }
}

/// Motion group of a track.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MotionGroup {
    Stationary,
    Direction(usize),
}

/// Direction sector of a displacement. Sectors are centred on the angles
/// `2 pi k / bins`, so axis-aligned motion falls mid-sector.
pub fn direction_group(d: [f64; 2], config: &MotionConfig) -> MotionGroup {
    if d[0].hypot(d[1]) < config.stationary_epsilon || (d[0] == 0.0 && d[1] == 0.0) {
        return MotionGroup::Stationary;
    }
    let width = std::f64::consts::TAU / config.direction_bins as f64;
    let angle = d[1].atan2(d[0]).rem_euclid(std::f64::consts::TAU);
    let bin = ((angle + 0.5 * width) / width).floor() as usize % config.direction_bins;
    MotionGroup::Direction(bin)
}

/// Outcome of the per-group translation estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionHypothesis {
    pub group: MotionGroup,
    pub displacement: [f64; 2],
    pub population: usize,
    pub inliers: usize,
}

/// Mean of the given displacements, computed incrementally so identical
/// inputs reproduce their value exactly.
fn running_mean<'a>(it: impl Iterator<Item = &'a [f64; 2]>) -> [f64; 2] {
    let mut m = [0.0; 2];
    for (k, d) in it.enumerate() {
        let n = (k + 1) as f64;
        m[0] += (d[0] - m[0]) / n;
        m[1] += (d[1] - m[1]) / n;
    }
    m
}

/// RANSAC over a pure translation: each iteration takes one track's
/// displacement as the model, the best-supported model wins (earliest on
/// ties), and the consensus is the mean of its inliers.
pub fn ransac_translation(
    displacements: &[[f64; 2]],
    config: &MotionConfig,
    rng: &mut impl Rng,
) -> Option<([f64; 2], usize)> {
    if displacements.is_empty() {
        return None;
    }
    let inliers_of = |h: [f64; 2]| {
        displacements
            .iter()
            .filter(move |d| (d[0] - h[0]).hypot(d[1] - h[1]) <= config.inlier_threshold)
    };
    let mut best: Option<([f64; 2], usize)> = None;
    for _ in 0..config.ransac_iterations {
        let h = displacements[rng.random_range(0..displacements.len())];
        let support = inliers_of(h).count();
        if best.is_none_or(|(_, s)| support > s) {
            best = Some((h, support));
        }
        if support == displacements.len() {
            break;
        }
    }
    let (h, support) = best?;
    Some((running_mean(inliers_of(h)), support))
}

/// Motion hypotheses for one seed box, most populated group first.
pub fn seed_hypotheses(
    seed: &BBox,
    tracks: &[PointTrack],
    config: &MotionConfig,
    rng: &mut impl Rng,
) -> Vec<MotionHypothesis> {
    let mut groups: Vec<(MotionGroup, Vec<[f64; 2]>)> = Vec::new();
    for t in tracks.iter().filter(|t| t.is_finite() && seed.contains_point(t.start[0], t.start[1])) {
        let d = t.displacement();
        let g = direction_group(d, config);
        match groups.iter_mut().find(|(k, _)| *k == g) {
            Some((_, v)) => v.push(d),
            None => groups.push((g, vec![d])),
        }
    }
    groups.retain(|(_, v)| v.len() >= config.min_group_size);
    groups.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    groups.truncate(config.hypotheses);

    groups
        .into_iter()
        .filter_map(|(group, ds)| {
            if group == MotionGroup::Stationary {
                return Some(MotionHypothesis {
                    group,
                    displacement: [0.0, 0.0],
                    population: ds.len(),
                    inliers: ds.len(),
                });
            }
            let (displacement, inliers) = ransac_translation(&ds, config, rng)?;
            Some(MotionHypothesis { group, displacement, population: ds.len(), inliers })
        })
        .collect()
}

/// Proposals built from one seed box.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedProposals {
    pub seed_index: usize,
    pub tubes: Vec<Tube>,
    pub hypotheses: Vec<MotionHypothesis>,
    /// Set when no motion group qualified and a zero-motion tube was emitted.
    pub fallback: bool,
}

/// Per-seed RNG stream derived from the global seed and the seed-box index.
pub fn seed_rng(global_seed: u64, seed_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(global_seed);
    rng.set_stream(seed_index as u64);
    rng
}

/// Track-based tube proposals for every seed box of a chunk.
///
/// Seed boxes that fall entirely outside the frame produce no proposals.
pub fn tube_proposals_from_tracks(
    seeds: &[BBox],
    tracks: &[PointTrack],
    t0: u32,
    len: usize,
    frame: (f64, f64),
    config: &MotionConfig,
    rng_seed: u64,
) -> Result<Vec<SeedProposals>, MotionError> {
    if len < 2 {
        return Err(MotionError::ShortChunk(len));
    }
    config.validate()?;
    let out = seeds
        .par_iter()
        .enumerate()
        .map(|(seed_index, seed)| {
            let mut rng = seed_rng(rng_seed, seed_index);
            let hypotheses = seed_hypotheses(seed, tracks, config, &mut rng);
            let Ok(start) = seed.clip(frame.0, frame.1) else {
                return SeedProposals { seed_index, tubes: vec![], hypotheses, fallback: false };
            };
            let mut tubes: Vec<Tube> = hypotheses
                .iter()
                .filter_map(|h| {
                    let end = seed.translate(h.displacement[0], h.displacement[1]).ok()?;
                    let end = end.clip(frame.0, frame.1).ok()?;
                    Tube::new(t0, len, start, end).ok()
                })
                .collect();
            let fallback = hypotheses.is_empty();
            if fallback {
                tubes.push(Tube::stationary(t0, len, start).expect("len >= 2"));
            }
            SeedProposals { seed_index, tubes, hypotheses, fallback }
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed() -> BBox {
        BBox::new(10., 10., 50., 50.).unwrap()
    }

    fn grid_tracks(d: [f64; 2], n: usize, offset: usize) -> Vec<PointTrack> {
        (offset..offset + n)
            .map(|i| {
                let s = [12.0 + (i % 7) as f64 * 5.0, 12.0 + (i / 7) as f64 * 4.0];
                PointTrack::new(s, [s[0] + d[0], s[1] + d[1]])
            })
            .collect()
    }

    fn run(tracks: &[PointTrack], cfg: &MotionConfig) -> SeedProposals {
        tube_proposals_from_tracks(&[seed()], tracks, 0, 10, (200., 200.), cfg, 7)
            .unwrap()
            .remove(0)
    }

    #[test]
    fn static_tracks() {
        let p = run(&grid_tracks([0.0, 0.0], 20, 0), &MotionConfig::default());
        assert_eq!(p.tubes.len(), 1);
        assert_eq!(p.tubes[0].end(), &seed());
        assert!(!p.fallback);
        // sub-epsilon jitter still counts as stationary
        let p = run(&grid_tracks([0.3, -0.2], 20, 0), &MotionConfig::default());
        assert_eq!(p.tubes[0].end(), &seed());
    }

    #[test]
    fn unanimous_shift() {
        let p = run(&grid_tracks([7.0, 0.0], 20, 0), &MotionConfig::default());
        assert_eq!(p.tubes.len(), 1);
        assert_eq!(*p.tubes[0].end(), seed().translate(7.0, 0.0).unwrap());
        assert_eq!(p.tubes[0].start(), &seed());
    }

    #[test]
    fn two_motions_ordered_by_population() {
        let mut tracks = grid_tracks([7.0, 0.0], 12, 0);
        tracks.extend(grid_tracks([0.0, 7.0], 8, 12));
        let p = run(&tracks, &MotionConfig::default());
        assert_eq!(p.tubes.len(), 2);
        assert_eq!(*p.tubes[0].end(), seed().translate(7.0, 0.0).unwrap());
        assert_eq!(*p.tubes[1].end(), seed().translate(0.0, 7.0).unwrap());
        assert_eq!(p.hypotheses[0].population, 12);

        let cfg = MotionConfig { hypotheses: 1, ..Default::default() };
        assert_eq!(run(&tracks, &cfg).tubes.len(), 1);
    }

    #[test]
    fn no_interior_tracks_falls_back() {
        let outside = vec![PointTrack::new([150., 150.], [160., 150.]); 10];
        let p = run(&outside, &MotionConfig::default());
        assert!(p.fallback);
        assert_eq!(p.tubes.len(), 1);
        assert!(p.tubes[0].is_stationary());
        // groups under the minimum size are dropped too
        let p = run(&grid_tracks([7.0, 0.0], 2, 0), &MotionConfig::default());
        assert!(p.fallback);
    }

    #[test]
    fn sectors_are_centered_on_axes() {
        let cfg = MotionConfig::default();
        assert_eq!(direction_group([7.0, 0.0], &cfg), MotionGroup::Direction(0));
        assert_eq!(direction_group([7.0, -0.5], &cfg), MotionGroup::Direction(0));
        assert_eq!(direction_group([0.0, 7.0], &cfg), MotionGroup::Direction(4));
        assert_eq!(direction_group([-7.0, 0.0], &cfg), MotionGroup::Direction(8));
        assert_eq!(direction_group([0.1, 0.1], &cfg), MotionGroup::Stationary);
    }

    #[test]
    fn ransac_rejects_outliers() {
        let mut ds = vec![[5.0, 1.0]; 10];
        ds.push([9.0, 3.0]);
        let mut rng = seed_rng(1, 0);
        let (m, support) = ransac_translation(&ds, &MotionConfig::default(), &mut rng).unwrap();
        assert_eq!(m, [5.0, 1.0]);
        assert_eq!(support, 10);
    }

    #[test]
    fn config_and_length_errors() {
        assert!(matches!(
            tube_proposals_from_tracks(&[seed()], &[], 0, 1, (100., 100.), &MotionConfig::default(), 0),
            Err(MotionError::ShortChunk(1))
        ));
        let cfg = MotionConfig { direction_bins: 0, ..Default::default() };
        assert!(tube_proposals_from_tracks(&[seed()], &[], 0, 5, (100., 100.), &cfg, 0).is_err());
    }
}
