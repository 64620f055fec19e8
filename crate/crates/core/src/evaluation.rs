//! Proposal recall, average precision and CorLoc.
//!
//! Frames are identified by `(video, frame)`. All matching uses `>=` against
//! the overlap threshold.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, tube_overlap, BBox, Chunk, Track, Tube};
use crate::suppression::{nms_boxes, score_order, NmsError, ScoredBox, ScoredTube};

/// Default overlap for recall, AP and CorLoc.
pub const MATCH_THRESHOLD: f64 = 0.5;

/// Covered and total ground-truth counts behind a recall figure.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallCount {
    pub covered: usize,
    pub total: usize,
}

impl RecallCount {
    /// `None` when there is no ground truth.
    pub fn ratio(&self) -> Option<f64> {
        (self.total > 0).then(|| self.covered as f64 / self.total as f64)
    }
}

impl std::ops::Add for RecallCount {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { covered: self.covered + o.covered, total: self.total + o.total }
    }
}

pub fn tube_recall_count(proposals: &[Tube], gts: &[Tube], threshold: f64) -> RecallCount {
    let covered = gts
        .iter()
        .filter(|g| proposals.iter().any(|p| tube_overlap(p, g) >= threshold))
        .count();
    RecallCount { covered, total: gts.len() }
}

/// Fraction of ground-truth tubes matched by at least one proposal.
pub fn tube_recall(proposals: &[Tube], gts: &[Tube], threshold: f64) -> Option<f64> {
    tube_recall_count(proposals, gts, threshold).ratio()
}

/// Counts per-frame ground-truth boxes inside `chunk` covered by some
/// per-frame box of a proposal. Proposals and tracks are assumed to come
/// from the same video.
pub fn box_recall_count(proposals: &[Tube], tracks: &[Track], chunk: Chunk, threshold: f64) -> RecallCount {
    let mut by_frame: HashMap<u32, Vec<BBox>> = HashMap::new();
    for p in proposals {
        for (f, b) in p.frames() {
            by_frame.entry(f).or_default().push(b);
        }
    }
    let mut count = RecallCount::default();
    for (f, gt) in tracks.iter().flat_map(|t| t.in_chunk(chunk)) {
        count.total += 1;
        if by_frame.get(f).is_some_and(|bs| bs.iter().any(|b| iou(b, gt) >= threshold)) {
            count.covered += 1;
        }
    }
    count
}

pub fn box_recall(proposals: &[Tube], tracks: &[Track], chunk: Chunk, threshold: f64) -> Option<f64> {
    box_recall_count(proposals, tracks, chunk, threshold).ratio()
}

/// A classed per-frame detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video: String,
    pub frame: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub class: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub video: String,
    pub frame: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: u32,
}

/// Every annotated box of every track.
pub fn ground_truth_boxes(tracks: &[Track]) -> Vec<GroundTruthBox> {
    tracks
        .iter()
        .flat_map(|t| {
            t.entries().iter().map(|&(frame, bbox)| GroundTruthBox {
                video: t.video.clone(),
                frame,
                bbox,
                class: t.class,
            })
        })
        .collect()
}

/// Splits scored tubes into per-frame boxes carrying the tube score and
/// class, then suppresses duplicates per frame and class. Tubes without a
/// class are treated as class 0. Output is ordered by frame, class, then
/// descending score.
pub fn tubes_to_detections(video: &str, tubes: &[ScoredTube], threshold: f64) -> Result<Vec<Detection>, NmsError> {
    let mut groups: BTreeMap<(u32, u32), Vec<ScoredBox>> = BTreeMap::new();
    for t in tubes {
        let class = t.class.unwrap_or(0);
        for (frame, bbox) in t.tube.frames() {
            groups.entry((frame, class)).or_default().push(ScoredBox {
                bbox,
                frame,
                score: t.score,
                class: Some(class),
            });
        }
    }
    let mut out = Vec::new();
    for ((frame, class), boxes) in groups {
        for k in nms_boxes(&boxes, threshold)? {
            out.push(Detection { video: video.to_string(), frame, bbox: boxes[k].bbox, score: boxes[k].score, class });
        }
    }
    Ok(out)
}

type FrameKey<'a> = (&'a str, u32);

fn gt_index<'a>(gts: &'a [GroundTruthBox], class: u32) -> HashMap<FrameKey<'a>, Vec<usize>> {
    let mut idx: HashMap<FrameKey<'a>, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate().filter(|(_, g)| g.class == class) {
        idx.entry((g.video.as_str(), g.frame)).or_default().push(i);
    }
    idx
}

fn classes(dets: &[Detection], gts: &[GroundTruthBox]) -> Vec<u32> {
    let mut c: Vec<u32> = dets.iter().map(|d| d.class).chain(gts.iter().map(|g| g.class)).collect();
    c.sort_unstable();
    c.dedup();
    c
}

/// True-positive flags for the detections of one class, in descending score
/// order. Each detection takes the highest-IoU still unmatched ground truth
/// on its frame, if that IoU reaches the threshold.
pub fn match_detections(dets: &[&Detection], gts: &[GroundTruthBox], class: u32, threshold: f64) -> Vec<bool> {
    let idx = gt_index(gts, class);
    let mut used = vec![false; gts.len()];
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut flags = vec![false; dets.len()];
    for (rank, i) in score_order(&scores).into_iter().enumerate() {
        let d = dets[i];
        let mut best: Option<(usize, f64)> = None;
        for &g in idx.get(&(d.video.as_str(), d.frame)).map_or(&[][..], |v| v.as_slice()) {
            if used[g] {
                continue;
            }
            let o = iou(&d.bbox, &gts[g].bbox);
            if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            flags[rank] = true;
        }
    }
    flags
}

/// Area under the precision/recall curve with precision made monotone
/// (all-points interpolation).
pub fn ap_from_flags(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(flags.len() + 2);
    let mut precision = Vec::with_capacity(flags.len() + 2);
    recall.push(0.0);
    precision.push(0.0);
    let mut tp = 0usize;
    for (k, &hit) in flags.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let ap = (1..recall.len())
        .filter(|&i| recall[i] != recall[i - 1])
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum::<f64>();
    Some(ap.clamp(0.0, 1.0))
}

/// Per-class AP; classes without ground truth map to `None`.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruthBox], threshold: f64) -> BTreeMap<u32, Option<f64>> {
    classes(dets, gts)
        .into_iter()
        .map(|c| {
            let class_dets: Vec<&Detection> = dets.iter().filter(|d| d.class == c).collect();
            let n_gt = gts.iter().filter(|g| g.class == c).count();
            let flags = match_detections(&class_dets, gts, c, threshold);
            (c, ap_from_flags(&flags, n_gt))
        })
        .collect()
}

/// Mean over the classes that have a defined AP.
pub fn mean_ap(per_class: &BTreeMap<u32, Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = per_class.values().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per class, the fraction of frames holding that class whose top-scoring
/// detection of the class hits one of its boxes.
pub fn corloc(dets: &[Detection], gts: &[GroundTruthBox], threshold: f64) -> BTreeMap<u32, Option<f64>> {
    classes(dets, gts)
        .into_iter()
        .map(|c| {
            let idx = gt_index(gts, c);
            if idx.is_empty() {
                return (c, None);
            }
            let mut top: HashMap<FrameKey<'_>, &Detection> = HashMap::new();
            for d in dets.iter().filter(|d| d.class == c) {
                let e = top.entry((d.video.as_str(), d.frame)).or_insert(d);
                if d.score > e.score {
                    *e = d;
                }
            }
            let correct = idx
                .iter()
                .filter(|(k, g)| top.get(*k).is_some_and(|d| g.iter().any(|&i| iou(&d.bbox, &gts[i].bbox) >= threshold)))
                .count();
            (c, Some(correct as f64 / idx.len() as f64))
        })
        .collect()
}

/// One metric with its operating parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: Option<f64>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_class: BTreeMap<u32, Option<f64>>,
}

impl MetricReport {
    pub fn new(metric: impl Into<String>, value: Option<f64>) -> Self {
        Self { metric: metric.into(), value, params: BTreeMap::new(), per_class: BTreeMap::new() }
    }

    pub fn param(mut self, name: &str, v: f64) -> Self {
        self.params.insert(name.to_string(), v);
        self
    }
}
