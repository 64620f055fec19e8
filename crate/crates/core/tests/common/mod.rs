//! Brute-force reference implementations used by the integration tests.
//!
//! None of these call into the code paths they check beyond constructing
//! inputs.

#![allow(dead_code)]

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tubekit::geometry::{BBox, Tube};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Integer box inside `[0, 32)` with sides in `1..=max_side`.
pub fn int_box(rng: &mut ChaCha8Rng, max_side: i32) -> BBox {
    let w = rng.random_range(1..=max_side);
    let h = rng.random_range(1..=max_side);
    let x = rng.random_range(0..=32 - w);
    let y = rng.random_range(0..=32 - h);
    BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).unwrap()
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let w = rng.random_range(1.0..extent / 2.0);
    let h = rng.random_range(1.0..extent / 2.0);
    let x = rng.random_range(-extent / 4.0..extent);
    let y = rng.random_range(-extent / 4.0..extent);
    BBox::new(x, y, x + w, y + h).unwrap()
}

/// IoU by counting unit pixels covered by each integer box.
pub fn raster_iou(a: &BBox, b: &BBox) -> f64 {
    let inside = |bx: &BBox, x: i32, y: i32| {
        (x as f64) >= bx.x1() && (x as f64) < bx.x2() && (y as f64) >= bx.y1() && (y as f64) < bx.y2()
    };
    let (mut inter, mut union) = (0u32, 0u32);
    for y in 0..32 {
        for x in 0..32 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u32;
            union += (ia || ib) as u32;
        }
    }
    inter as f64 / union as f64
}

pub fn raster_tube_overlap(a: &Tube, b: &Tube) -> f64 {
    raster_iou(a.start(), b.start()).min(raster_iou(a.end(), b.end()))
}

/// Textbook greedy NMS: repeatedly pick the best remaining item (lowest
/// index on ties), keep it, drop everything too similar to it.
pub fn greedy_oracle(scores: &[f64], threshold: f64, sim: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let mut keep = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for k in 1..remaining.len() {
            if scores[remaining[k]] > scores[remaining[best]] {
                best = k;
            }
        }
        let i = remaining.remove(best);
        keep.push(i);
        remaining.retain(|&j| sim(i, j) <= threshold);
    }
    keep
}

/// Nested-loop TOI pooling. Cell membership is decided by interval
/// intersection rather than floor/ceil arithmetic, so strides should be
/// powers of two to keep the two routes bit-identical.
pub fn pool_oracle(
    vol: &Array4<f64>,
    stride: f64,
    tube: &Tube,
    side: usize,
    average: bool,
) -> Option<Array3<f64>> {
    let (t_dim, c_dim, h, w) = vol.dim();
    let mut frame_maps: Vec<Array3<f64>> = Vec::new();
    for t in 0..t_dim {
        let b = if t_dim == 1 {
            *tube.start()
        } else {
            let f = t as f64 / (t_dim - 1) as f64;
            let (s, e) = (tube.start().coords(), tube.end().coords());
            let c: Vec<f64> = (0..4).map(|k| s[k] + f * (e[k] - s[k])).collect();
            if t == 0 {
                *tube.start()
            } else if t == t_dim - 1 {
                *tube.end()
            } else {
                BBox::new(c[0], c[1], c[2], c[3]).unwrap()
            }
        };
        let rows: Vec<usize> =
            (0..h).filter(|&y| (y as f64) * stride < b.y2() && ((y + 1) as f64) * stride > b.y1()).collect();
        let cols: Vec<usize> =
            (0..w).filter(|&x| (x as f64) * stride < b.x2() && ((x + 1) as f64) * stride > b.x1()).collect();
        if rows.is_empty() || cols.is_empty() {
            continue;
        }
        let in_bin = |r: usize, len: usize, i: usize| r * side < (i + 1) * len && (r + 1) * side > i * len;
        let mut m = Array3::<f64>::zeros((c_dim, side, side));
        for c in 0..c_dim {
            for i in 0..side {
                for j in 0..side {
                    let mut best: Option<f64> = None;
                    for (ry, &y) in rows.iter().enumerate() {
                        for (rx, &x) in cols.iter().enumerate() {
                            if in_bin(ry, rows.len(), i) && in_bin(rx, cols.len(), j) {
                                let v = vol[[t, c, y, x]];
                                if best.is_none_or(|b| v > b) {
                                    best = Some(v);
                                }
                            }
                        }
                    }
                    m[[c, i, j]] = best.expect("bins are never empty");
                }
            }
        }
        frame_maps.push(m);
    }
    if frame_maps.is_empty() {
        return None;
    }
    let mut out = frame_maps[0].clone();
    if average {
        for m in &frame_maps[1..] {
            out = &out + m;
        }
        let n = frame_maps.len() as f64;
        out.mapv_inplace(|v| v / n);
    } else {
        for m in &frame_maps[1..] {
            out.zip_mut_with(m, |a, &b| {
                if b > *a {
                    *a = b
                }
            });
        }
    }
    Some(out)
}

/// Interpolated precision summed over true positives: each hit adds
/// `1/n_gt` recall at the best precision reachable from its rank onward.
pub fn ap_oracle(flags: &[bool], n_gt: usize) -> f64 {
    let precision: Vec<f64> = flags
        .iter()
        .scan(0usize, |tp, &f| {
            *tp += f as usize;
            Some(*tp as f64)
        })
        .enumerate()
        .map(|(k, tp)| tp / (k + 1) as f64)
        .collect();
    flags
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(k, _)| precision[k..].iter().cloned().fold(0.0, f64::max) / n_gt as f64)
        .sum()
}

/// Tube overlap from explicit corner arithmetic over every frame pair.
pub fn overlap_oracle(a: &Tube, b: &Tube) -> f64 {
    let box_iou = |p: &BBox, q: &BBox| {
        let w = (p.x2().min(q.x2()) - p.x1().max(q.x1())).max(0.0);
        let h = (p.y2().min(q.y2()) - p.y1().max(q.y1())).max(0.0);
        let inter = w * h;
        inter / ((p.x2() - p.x1()) * (p.y2() - p.y1()) + (q.x2() - q.x1()) * (q.y2() - q.y1()) - inter)
    };
    box_iou(a.start(), b.start()).min(box_iou(a.end(), b.end()))
}
