//! Greedy non-maximum suppression over boxes and tubes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, tube_overlap, BBox, Tube};

/// Default tube-NMS threshold for the proposal stage.
pub const PROPOSAL_NMS_THRESHOLD: f64 = 0.7;
/// Default per-frame box NMS threshold for the detection stage.
pub const DETECTION_NMS_THRESHOLD: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NmsError {
    #[error("NMS threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("item {index} has non-finite score {score}")]
    NonFiniteScore { index: usize, score: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredTube {
    pub tube: Tube,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub frame: u32,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<u32>,
}

/// Indices sorted by descending score, ties by ascending index.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps lower indices first among equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy suppression with an arbitrary similarity. Stops once `limit` items
/// are kept; the kept prefix is the same as for an unlimited run.
pub fn greedy_nms_by<F>(
    scores: &[f64],
    threshold: f64,
    limit: Option<usize>,
    similarity: F,
) -> Result<Vec<usize>, NmsError>
where
    F: Fn(usize, usize) -> f64,
{
    if !(0.0..=1.0).contains(&threshold) {
        return Err(NmsError::Threshold(threshold));
    }
    if let Some((index, &score)) = scores.iter().enumerate().find(|(_, s)| !s.is_finite()) {
        return Err(NmsError::NonFiniteScore { index, score });
    }
    let limit = limit.unwrap_or(usize::MAX);
    let order = score_order(scores);
    let mut suppressed = vec![false; scores.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if keep.len() >= limit {
            break;
        }
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && similarity(i, j) > threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(keep)
}

pub fn nms_boxes(items: &[ScoredBox], threshold: f64) -> Result<Vec<usize>, NmsError> {
    let scores: Vec<f64> = items.iter().map(|d| d.score).collect();
    greedy_nms_by(&scores, threshold, None, |i, j| iou(&items[i].bbox, &items[j].bbox))
}

pub fn nms_tubes(items: &[ScoredTube], threshold: f64) -> Result<Vec<usize>, NmsError> {
    nms_tubes_top(items, threshold, None)
}

/// Tube NMS keeping at most `top_n` survivors.
pub fn nms_tubes_top(
    items: &[ScoredTube],
    threshold: f64,
    top_n: Option<usize>,
) -> Result<Vec<usize>, NmsError> {
    let scores: Vec<f64> = items.iter().map(|d| d.score).collect();
    greedy_nms_by(&scores, threshold, top_n, |i, j| tube_overlap(&items[i].tube, &items[j].tube))
}
