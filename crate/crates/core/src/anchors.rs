//! Tube anchors, regression coding and label assignment.
//!
//! Anchors are zero-motion tubes attached to every cell ("seed") of a
//! feature map. A network predicts an objectness score and eight regression
//! parameters per anchor; [`propose_from_maps`] turns those maps back into
//! scored tube proposals.

use ndarray::{ArrayView3, ArrayView4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{tube_overlap, BBox, GeometryError, Tube};
use crate::suppression::{nms_tubes_top, NmsError, ScoredTube};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnchorError {
    #[error("anchor config needs at least one scale and one aspect ratio")]
    EmptyConfig,
    #[error("anchor scales, ratios and stride must be positive and finite")]
    NonPositive,
    #[error("feature map must be at least 1x1, got {height}x{width}")]
    EmptyGrid { height: usize, width: usize },
    #[error("{what} has shape {got:?}, expected {expected:?}")]
    Shape { what: &'static str, got: Vec<usize>, expected: Vec<usize> },
    #[error("tube lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("regression parameters produce an invalid box")]
    InvalidDecode,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Nms(#[from] NmsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Pixels per feature cell.
    pub stride: f64,
    /// Box side lengths in pixels.
    pub scales: Vec<f64>,
    /// Width:height ratios.
    pub aspect_ratios: Vec<f64>,
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<(), AnchorError> {
        if self.scales.is_empty() || self.aspect_ratios.is_empty() {
            return Err(AnchorError::EmptyConfig);
        }
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.stride) || !self.scales.iter().all(|&s| ok(s)) || !self.aspect_ratios.iter().all(|&r| ok(r)) {
            return Err(AnchorError::NonPositive);
        }
        Ok(())
    }

    /// Anchors per seed.
    pub fn per_seed(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }

    /// Anchor `(width, height)` pairs in per-seed order: scales outer, ratios inner.
    pub fn shapes(&self) -> Vec<(f64, f64)> {
        self.scales
            .iter()
            .flat_map(|&s| self.aspect_ratios.iter().map(move |&r| (s * r.sqrt(), s / r.sqrt())))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub height: usize,
    pub width: usize,
    pub config: AnchorConfig,
    /// Row-major over seeds, then per-seed anchor index.
    pub anchors: Vec<Tube>,
}

impl AnchorGrid {
    pub fn per_seed(&self) -> usize {
        self.config.per_seed()
    }

    pub fn anchor(&self, row: usize, col: usize, k: usize) -> &Tube {
        &self.anchors[(row * self.width + col) * self.per_seed() + k]
    }
}

/// Zero-motion anchors centred on every cell of an `height x width` map.
pub fn generate_anchor_grid(
    height: usize,
    width: usize,
    config: &AnchorConfig,
    t0: u32,
    len: usize,
) -> Result<AnchorGrid, AnchorError> {
    config.validate()?;
    if height == 0 || width == 0 {
        return Err(AnchorError::EmptyGrid { height, width });
    }
    let shapes = config.shapes();
    let mut anchors = Vec::with_capacity(height * width * shapes.len());
    for i in 0..height {
        for j in 0..width {
            let cx = (j as f64 + 0.5) * config.stride;
            let cy = (i as f64 + 0.5) * config.stride;
            for &(w, h) in &shapes {
                anchors.push(Tube::stationary(t0, len, BBox::from_center_size(cx, cy, w, h)?)?);
            }
        }
    }
    Ok(AnchorGrid { height, width, config: config.clone(), anchors })
}

/// Eight regression parameters: `(tx, ty, tw, th)` for the start box followed
/// by the same for the end box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegressionParams(pub [f64; 8]);

impl RegressionParams {
    pub fn start(&self) -> [f64; 4] {
        [self.0[0], self.0[1], self.0[2], self.0[3]]
    }
    pub fn end(&self) -> [f64; 4] {
        [self.0[4], self.0[5], self.0[6], self.0[7]]
    }
}

fn encode_box(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (tcx - acx) / aw,
        (tcy - acy) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

fn decode_box(anchor: &BBox, p: [f64; 4]) -> Result<BBox, AnchorError> {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + p[0] * aw;
    let cy = acy + p[1] * ah;
    let w = aw * p[2].exp();
    let h = ah * p[3].exp();
    if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
        return Err(AnchorError::InvalidDecode);
    }
    BBox::from_center_size(cx, cy, w, h).map_err(|_| AnchorError::InvalidDecode)
}

/// Center offset / log-size coding of `target` relative to `anchor`, applied
/// independently at both ends of the tube.
pub fn encode_regression(anchor: &Tube, target: &Tube) -> Result<RegressionParams, AnchorError> {
    if anchor.len() != target.len() {
        return Err(AnchorError::LengthMismatch(anchor.len(), target.len()));
    }
    let s = encode_box(anchor.start(), target.start());
    let e = encode_box(anchor.end(), target.end());
    Ok(RegressionParams([s[0], s[1], s[2], s[3], e[0], e[1], e[2], e[3]]))
}

pub fn decode_regression(anchor: &Tube, params: &RegressionParams) -> Result<Tube, AnchorError> {
    let start = decode_box(anchor.start(), params.start())?;
    let end = decode_box(anchor.end(), params.end())?;
    Ok(anchor.with_boxes(start, end))
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Derivative of [`smooth_l1`].
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Summed smooth-L1 loss between predicted and target parameters.
pub fn regression_loss(pred: &RegressionParams, target: &RegressionParams) -> f64 {
    pred.0.iter().zip(&target.0).map(|(p, t)| smooth_l1(p - t)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorThresholds {
    pub positive: f64,
    pub negative: f64,
}

impl Default for AnchorThresholds {
    fn default() -> Self {
        Self { positive: 0.5, negative: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

fn check_lengths(a: &[Tube], b: &[Tube]) -> Result<(), AnchorError> {
    if let Some(first) = a.first().or(b.first()) {
        for t in a.iter().chain(b) {
            if t.len() != first.len() {
                return Err(AnchorError::LengthMismatch(first.len(), t.len()));
            }
        }
    }
    Ok(())
}

/// Best overlap and the lowest-indexed GT reaching it.
fn best_match(t: &Tube, gts: &[Tube]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (g, gt) in gts.iter().enumerate() {
        let o = tube_overlap(t, gt);
        if best.is_none_or(|(_, b)| o > b) {
            best = Some((g, o));
        }
    }
    best
}

/// Class-agnostic anchor labels: positive at `>= positive` overlap with any
/// ground truth, negative at `<= negative` with all of them, ignored between.
pub fn assign_anchor_labels(
    anchors: &[Tube],
    gts: &[Tube],
    thresholds: AnchorThresholds,
) -> Result<Vec<AnchorLabel>, AnchorError> {
    check_lengths(anchors, gts)?;
    Ok(anchors
        .iter()
        .map(|a| {
            let best = best_match(a, gts).map_or(0.0, |m| m.1);
            if best >= thresholds.positive {
                AnchorLabel::Positive
            } else if best <= thresholds.negative {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalThresholds {
    pub positive: f64,
    pub background_low: f64,
}

impl Default for ProposalThresholds {
    fn default() -> Self {
        Self { positive: 0.5, background_low: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "label", rename_all = "lowercase")]
pub enum ProposalLabel {
    Positive { class: u32, gt: usize, overlap: f64, target: RegressionParams },
    Background { gt: usize, overlap: f64 },
    /// Below the background band; only reachable through hard-negative mining.
    Excluded { overlap: f64 },
}

impl ProposalLabel {
    pub fn overlap(&self) -> f64 {
        match *self {
            Self::Positive { overlap, .. } | Self::Background { overlap, .. } | Self::Excluded { overlap } => {
                overlap
            }
        }
    }
}

/// Labels proposals against classed ground-truth tubes by their best match.
pub fn assign_proposal_labels(
    proposals: &[Tube],
    gts: &[(Tube, u32)],
    thresholds: ProposalThresholds,
) -> Result<Vec<ProposalLabel>, AnchorError> {
    let gt_tubes: Vec<Tube> = gts.iter().map(|g| g.0).collect();
    check_lengths(proposals, &gt_tubes)?;
    proposals
        .iter()
        .map(|p| {
            Ok(match best_match(p, &gt_tubes) {
                Some((gt, overlap)) if overlap >= thresholds.positive => ProposalLabel::Positive {
                    class: gts[gt].1,
                    gt,
                    overlap,
                    target: encode_regression(p, &gt_tubes[gt])?,
                },
                Some((gt, overlap)) if overlap >= thresholds.background_low => {
                    ProposalLabel::Background { gt, overlap }
                }
                m => ProposalLabel::Excluded { overlap: m.map_or(0.0, |m| m.1) },
            })
        })
        .collect()
}

/// Decodes every anchor with its regression slice, clips to the frame and
/// keeps the `top_n` tube-NMS survivors. Anchors whose decoded tube is
/// invalid or leaves the frame are dropped.
///
/// `scores` is `H' x W' x K`, `regression` is `H' x W' x K x 8`.
pub fn propose_from_maps(
    scores: ArrayView3<'_, f64>,
    regression: ArrayView4<'_, f64>,
    grid: &AnchorGrid,
    frame: (f64, f64),
    top_n: usize,
    nms_threshold: f64,
) -> Result<Vec<ScoredTube>, AnchorError> {
    let k = grid.per_seed();
    let expected = vec![grid.height, grid.width, k];
    if scores.shape() != expected.as_slice() {
        return Err(AnchorError::Shape { what: "score map", got: scores.shape().to_vec(), expected });
    }
    let expected = vec![grid.height, grid.width, k, 8];
    if regression.shape() != expected.as_slice() {
        return Err(AnchorError::Shape {
            what: "regression map",
            got: regression.shape().to_vec(),
            expected,
        });
    }

    let mut candidates = Vec::with_capacity(grid.anchors.len());
    for i in 0..grid.height {
        for j in 0..grid.width {
            for a in 0..k {
                let p: [f64; 8] = std::array::from_fn(|c| regression[[i, j, a, c]]);
                let score = scores[[i, j, a]];
                let decoded = decode_regression(grid.anchor(i, j, a), &RegressionParams(p))
                    .ok()
                    .and_then(|t| t.clip(frame.0, frame.1).ok());
                if let Some(tube) = decoded {
                    candidates.push(ScoredTube { tube, score, class: None });
                }
            }
        }
    }
    let keep = nms_tubes_top(&candidates, nms_threshold, Some(top_n))?;
    Ok(keep.into_iter().map(|i| candidates[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};

    fn cfg(scales: &[f64], ratios: &[f64]) -> AnchorConfig {
        AnchorConfig { stride: 16.0, scales: scales.to_vec(), aspect_ratios: ratios.to_vec() }
    }

    const SCALES: [f64; 6] = [16., 32., 64., 128., 256., 512.];

    #[test]
    fn grid_counts() {
        let g = generate_anchor_grid(1, 1, &cfg(&SCALES, &[1.0]), 0, 10).unwrap();
        assert_eq!(g.anchors.len(), 6);
        let g = generate_anchor_grid(3, 2, &cfg(&SCALES, &[0.25, 0.5, 1., 2., 4.]), 0, 10).unwrap();
        assert_eq!(g.per_seed(), 30);
        assert_eq!(g.anchors.len(), 3 * 2 * 30);
        assert!(g.anchors.iter().all(|a| a.start() == a.end()));
        // shared centre per seed
        for k in 0..30 {
            let c = g.anchor(2, 1, k).start().center();
            assert!((c.0 - 24.0).abs() < 1e-9 && (c.1 - 40.0).abs() < 1e-9);
        }
        let wide = g.anchor(0, 0, 4).start();
        assert!((wide.width() / wide.height() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn grid_errors() {
        assert_eq!(generate_anchor_grid(1, 1, &cfg(&[], &[1.]), 0, 5), Err(AnchorError::EmptyConfig));
        assert_eq!(generate_anchor_grid(1, 1, &cfg(&[8.], &[]), 0, 5), Err(AnchorError::EmptyConfig));
        assert!(generate_anchor_grid(0, 1, &cfg(&[8.], &[1.]), 0, 5).is_err());
        assert_eq!(generate_anchor_grid(1, 1, &cfg(&[-8.], &[1.]), 0, 5), Err(AnchorError::NonPositive));
    }

    fn tube(s: [f64; 4], e: [f64; 4]) -> Tube {
        Tube::new(0, 10, BBox::try_from(s).unwrap(), BBox::try_from(e).unwrap()).unwrap()
    }

    #[test]
    fn coding() {
        let a = tube([0., 0., 10., 10.], [0., 0., 10., 10.]);
        assert_eq!(encode_regression(&a, &a).unwrap().0, [0.0; 8]);
        assert_eq!(decode_regression(&a, &RegressionParams::default()).unwrap(), a);

        let t = tube([-5., 0., 15., 10.], [0., 0., 10., 10.]);
        let p = encode_regression(&a, &t).unwrap();
        assert!((p.0[2] - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(p.0[0], 0.0);

        let mut only_start = [0.0; 8];
        only_start[2] = std::f64::consts::LN_2;
        let d = decode_regression(&a, &RegressionParams(only_start)).unwrap();
        assert!((d.start().width() - 20.0).abs() < 1e-12);
        assert_eq!(d.end(), a.end());

        let mut huge = [0.0; 8];
        huge[3] = 1e6;
        assert_eq!(decode_regression(&a, &RegressionParams(huge)), Err(AnchorError::InvalidDecode));
        huge[3] = f64::NAN;
        assert_eq!(decode_regression(&a, &RegressionParams(huge)), Err(AnchorError::InvalidDecode));
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
        assert_eq!(smooth_l1_grad(-3.0), -1.0);
    }

    /// A tube whose start and end boxes both overlap `base` by exactly `o`
    /// (horizontal shift of a 10x10 box: IoU = (10-d)/(10+d)).
    fn at_overlap(o: f64) -> Tube {
        let d = 10.0 * (1.0 - o) / (1.0 + o);
        tube([d, 0., 10. + d, 10.], [d, 0., 10. + d, 10.])
    }

    #[test]
    fn anchor_labels() {
        let gt = tube([0., 0., 10., 10.], [0., 0., 10., 10.]);
        let anchors = [at_overlap(0.6), at_overlap(0.2), at_overlap(0.4), at_overlap(0.5), at_overlap(0.3)];
        let labels = assign_anchor_labels(&anchors, &[gt], AnchorThresholds::default()).unwrap();
        assert_eq!(labels[0], AnchorLabel::Positive);
        assert_eq!(labels[1], AnchorLabel::Negative);
        assert_eq!(labels[2], AnchorLabel::Ignore);
        // no GT at all: everything is background
        let labels = assign_anchor_labels(&anchors, &[], AnchorThresholds::default()).unwrap();
        assert!(labels.iter().all(|&l| l == AnchorLabel::Negative));

        let short = Tube::stationary(0, 3, BBox::new(0., 0., 1., 1.).unwrap()).unwrap();
        assert!(matches!(
            assign_anchor_labels(&[short], &[gt], AnchorThresholds::default()),
            Err(AnchorError::LengthMismatch(..))
        ));
    }

    #[test]
    fn proposal_labels() {
        let gts = [
            (tube([100., 100., 110., 110.], [100., 100., 110., 110.]), 1),
            (tube([0., 0., 10., 10.], [0., 0., 10., 10.]), 7),
        ];
        let props = [at_overlap(0.7), at_overlap(0.3), at_overlap(0.05)];
        let l = assign_proposal_labels(&props, &gts, ProposalThresholds::default()).unwrap();
        match l[0] {
            ProposalLabel::Positive { class, gt, target, .. } => {
                assert_eq!((class, gt), (7, 1));
                let back = decode_regression(&props[0], &target).unwrap();
                assert!((back.start().x1() - 0.0).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(l[1], ProposalLabel::Background { gt: 1, .. }));
        assert!(matches!(l[2], ProposalLabel::Excluded { .. }));
    }

    #[test]
    fn proposal_ties_pick_lower_gt() {
        let g = tube([0., 0., 10., 10.], [0., 0., 10., 10.]);
        let l = assign_proposal_labels(&[g], &[(g, 3), (g, 4)], ProposalThresholds::default()).unwrap();
        assert!(matches!(l[0], ProposalLabel::Positive { class: 3, gt: 0, .. }));
    }

    #[test]
    fn proposals_from_maps() {
        let config = cfg(&[16., 32.], &[1.0]);
        let grid = generate_anchor_grid(2, 2, &config, 0, 5).unwrap();
        let mut scores = Array3::<f64>::zeros((2, 2, 2));
        scores[[1, 0, 1]] = 1.0;
        let reg = Array4::<f64>::zeros((2, 2, 2, 8));
        let out = propose_from_maps(scores.view(), reg.view(), &grid, (32., 32.), 100, 0.7).unwrap();
        let expected = grid.anchor(1, 0, 1).clip(32., 32.).unwrap();
        assert_eq!(out[0].tube, expected);
        assert_eq!(out[0].score, 1.0);
        assert!(out.len() <= 8);

        // end-only motion: anchors are static, decoded proposals are not
        let mut reg = Array4::<f64>::zeros((2, 2, 2, 8));
        reg[[0, 0, 0, 4]] = 0.25;
        let out = propose_from_maps(scores.view(), reg.view(), &grid, (1000., 1000.), 100, 1.0).unwrap();
        assert!(out.iter().any(|p| !p.tube.is_stationary()));

        let bad = Array3::<f64>::zeros((2, 2, 3));
        assert!(matches!(
            propose_from_maps(bad.view(), reg.view(), &grid, (32., 32.), 10, 0.7),
            Err(AnchorError::Shape { .. })
        ));
    }
}
