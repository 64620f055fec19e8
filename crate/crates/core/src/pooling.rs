//! Tube-of-interest (TOI) and region-of-interest (ROI) max pooling.
//!
//! A tube is mapped onto the feature volume frame by frame: the interpolated
//! box on frame `k` is divided by the stride, its left/top edge rounded down
//! and right/bottom edge rounded up, and the resulting cell range clamped to
//! the map. The range is split into a `P x P` grid where bin `i` of a range
//! of length `L` covers `[floor(i L / P), ceil((i + 1) L / P))`, so every bin
//! holds at least one cell. Each bin is max-pooled per channel, then the
//! per-frame maps are aggregated over time.
//!
//! Argmax ties resolve to the first element in `(t, y, x)` scan order.

use ndarray::{Array3, Array4, ArrayView3, ArrayView4, Axis};
use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Tube};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("feature volume dimensions must be >= 1, got {0:?}")]
    EmptyVolume([usize; 4]),
    #[error("feature stride must be positive and finite, got {0}")]
    Stride(f64),
    #[error("feature volume holds a non-finite value")]
    NonFinite,
    #[error("pooled side must be >= 1")]
    PooledSide,
    #[error("tube spans {tube} frames but the volume has {volume}")]
    FrameSpan { tube: usize, volume: usize },
    #[error("tube maps outside the feature volume on every frame")]
    OutsideVolume,
    #[error("{what} has shape {got:?}, expected {expected:?}")]
    Shape { what: &'static str, got: Vec<usize>, expected: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalMode {
    #[default]
    Max,
    Average,
}

/// Dense `T x C x H x W` features with a pixel stride per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume<F = f64> {
    data: Array4<F>,
    stride: f64,
}

impl<F: Float> FeatureVolume<F> {
    pub fn new(data: Array4<F>, stride: f64) -> Result<Self, PoolError> {
        VolumeView::new(data.view(), stride)?;
        Ok(Self { data, stride })
    }

    pub fn zeros(dims: [usize; 4], stride: f64) -> Result<Self, PoolError> {
        Self::new(Array4::from_elem(dims, F::zero()), stride)
    }

    pub fn view(&self) -> VolumeView<'_, F> {
        VolumeView { data: self.data.view(), stride: self.stride }
    }

    pub fn data(&self) -> &Array4<F> {
        &self.data
    }

    pub fn into_data(self) -> Array4<F> {
        self.data
    }

    pub fn stride(&self) -> f64 {
        self.stride
    }

    pub fn dims(&self) -> [usize; 4] {
        dims4(&self.data.view())
    }
}

/// Borrowed volume; lets callers pool over memory they own without copying.
#[derive(Debug, Clone, Copy)]
pub struct VolumeView<'a, F> {
    data: ArrayView4<'a, F>,
    stride: f64,
}

impl<'a, F: Float> VolumeView<'a, F> {
    pub fn new(data: ArrayView4<'a, F>, stride: f64) -> Result<Self, PoolError> {
        let dims = dims4(&data);
        if dims.contains(&0) {
            return Err(PoolError::EmptyVolume(dims));
        }
        if !(stride.is_finite() && stride > 0.0) {
            return Err(PoolError::Stride(stride));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PoolError::NonFinite);
        }
        Ok(Self { data, stride })
    }

    pub fn dims(&self) -> [usize; 4] {
        dims4(&self.data)
    }
}

fn dims4<F>(a: &ArrayView4<'_, F>) -> [usize; 4] {
    let s = a.shape();
    [s[0], s[1], s[2], s[3]]
}

/// Where each pooled value came from.
#[derive(Debug, Clone, PartialEq)]
pub enum ArgmaxRecord {
    /// Max aggregation: one `(t, y, x)` source per `(c, i, j)` output cell.
    Max(Array3<[usize; 3]>),
    /// Average aggregation: per contributing frame, the spatial argmax of
    /// every output cell.
    PerFrame(Vec<Array3<[usize; 3]>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledMap<F = f64> {
    /// `C x P x P`.
    pub values: Array3<F>,
    pub mode: TemporalMode,
    pub argmax: ArgmaxRecord,
    /// Frames whose mapped region intersected the volume.
    pub frames: Vec<usize>,
}

impl<F> PooledMap<F> {
    pub fn side(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Half-open feature-cell range covered by the pixel interval `[lo, hi)`.
fn cell_range(lo: f64, hi: f64, stride: f64, size: usize) -> Option<(usize, usize)> {
    let start = (lo / stride).floor().max(0.0);
    let end = (hi / stride).ceil().min(size as f64);
    if end <= start {
        return None;
    }
    Some((start as usize, end as usize))
}

#[inline]
fn bin_bounds(start: usize, len: usize, bins: usize, i: usize) -> (usize, usize) {
    let lo = start + (i * len) / bins;
    let hi = start + ((i + 1) * len).div_ceil(bins);
    (lo, hi)
}

type FramePool<F> = (Array3<F>, Array3<[usize; 3]>);

/// Spatial max pooling of one `C x H x W` frame; `t` only labels the argmax.
fn pool_frame<F: Float>(
    frame: ArrayView3<'_, F>,
    t: usize,
    b: &BBox,
    side: usize,
    stride: f64,
) -> Option<FramePool<F>> {
    let (c_dim, h, w) = frame.dim();
    let (ys, ye) = cell_range(b.y1(), b.y2(), stride, h)?;
    let (xs, xe) = cell_range(b.x1(), b.x2(), stride, w)?;
    let (rh, rw) = (ye - ys, xe - xs);

    let mut values = Array3::from_elem((c_dim, side, side), F::zero());
    let mut argmax = Array3::from_elem((c_dim, side, side), [0usize; 3]);
    for c in 0..c_dim {
        let plane = frame.index_axis(Axis(0), c);
        for i in 0..side {
            let (y0, y1) = bin_bounds(ys, rh, side, i);
            for j in 0..side {
                let (x0, x1) = bin_bounds(xs, rw, side, j);
                let mut best = plane[[y0, x0]];
                let mut at = [t, y0, x0];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let v = plane[[y, x]];
                        if v > best {
                            best = v;
                            at = [t, y, x];
                        }
                    }
                }
                values[[c, i, j]] = best;
                argmax[[c, i, j]] = at;
            }
        }
    }
    Some((values, argmax))
}

/// Pools `tube` out of `volume` into a `C x side x side` map.
///
/// Frames whose mapped region misses the volume entirely are skipped; the
/// average mode divides by the number of contributing frames.
pub fn toi_pool_forward<F: Float>(
    volume: VolumeView<'_, F>,
    tube: &Tube,
    side: usize,
    mode: TemporalMode,
) -> Result<PooledMap<F>, PoolError> {
    if side == 0 {
        return Err(PoolError::PooledSide);
    }
    let [t_dim, c_dim, _, _] = volume.dims();
    if tube.len() != t_dim {
        return Err(PoolError::FrameSpan { tube: tube.len(), volume: t_dim });
    }

    let mut frames = Vec::new();
    let mut per_frame = Vec::new();
    let mut acc: Option<(Array3<F>, Array3<[usize; 3]>)> = None;
    for t in 0..t_dim {
        let b = tube.interpolate(t).expect("offset within tube");
        let Some((v, a)) = pool_frame(volume.data.index_axis(Axis(0), t), t, &b, side, volume.stride)
        else {
            continue;
        };
        frames.push(t);
        match mode {
            TemporalMode::Max => match acc.as_mut() {
                None => acc = Some((v, a)),
                Some((best, at)) => {
                    ndarray::Zip::from(best).and(at).and(&v).and(&a).for_each(|b, bi, &nv, &ni| {
                        if nv > *b {
                            *b = nv;
                            *bi = ni;
                        }
                    });
                }
            },
            TemporalMode::Average => {
                match acc.as_mut() {
                    None => acc = Some((v, a.clone())),
                    Some((sum, _)) => *sum = &*sum + &v,
                }
                per_frame.push(a);
            }
        }
    }

    let (mut values, argmax) = acc.ok_or(PoolError::OutsideVolume)?;
    debug_assert_eq!(values.dim(), (c_dim, side, side));
    let argmax = match mode {
        TemporalMode::Max => ArgmaxRecord::Max(argmax),
        TemporalMode::Average => {
            let n = F::from(frames.len()).expect("frame count fits float");
            values.mapv_inplace(|s| s / n);
            ArgmaxRecord::PerFrame(per_frame)
        }
    };
    Ok(PooledMap { values, mode, argmax, frames })
}

/// Pools many tubes in parallel; output order follows `tubes`.
pub fn toi_pool_batch<F: Float + Send + Sync>(
    volume: VolumeView<'_, F>,
    tubes: &[Tube],
    side: usize,
    mode: TemporalMode,
) -> Vec<Result<PooledMap<F>, PoolError>> {
    tubes.par_iter().map(|t| toi_pool_forward(volume, t, side, mode)).collect()
}

/// Routes `grad_out` (`C x P x P`) back onto a zero volume of `dims`.
pub fn toi_pool_backward<F: Float>(
    grad_out: ArrayView3<'_, F>,
    pooled: &PooledMap<F>,
    dims: [usize; 4],
) -> Result<Array4<F>, PoolError> {
    if grad_out.shape() != pooled.values.shape() {
        return Err(PoolError::Shape {
            what: "output gradient",
            got: grad_out.shape().to_vec(),
            expected: pooled.values.shape().to_vec(),
        });
    }
    if dims[1] != pooled.values.shape()[0] {
        return Err(PoolError::Shape {
            what: "volume",
            got: dims.to_vec(),
            expected: vec![dims[0], pooled.values.shape()[0], dims[2], dims[3]],
        });
    }
    let fits = |[t, y, x]: [usize; 3]| t < dims[0] && y < dims[2] && x < dims[3];
    let mut grad = Array4::from_elem(dims, F::zero());
    let mut route = |src: &Array3<[usize; 3]>, scale: F| -> Result<(), PoolError> {
        for ((c, i, j), &at) in src.indexed_iter() {
            if !fits(at) {
                return Err(PoolError::Shape {
                    what: "volume",
                    got: dims.to_vec(),
                    expected: vec![at[0] + 1, dims[1], at[1] + 1, at[2] + 1],
                });
            }
            grad[[at[0], c, at[1], at[2]]] = grad[[at[0], c, at[1], at[2]]] + grad_out[[c, i, j]] * scale;
        }
        Ok(())
    };
    match &pooled.argmax {
        ArgmaxRecord::Max(a) => route(a, F::one())?,
        ArgmaxRecord::PerFrame(frames) => {
            let inv = F::one() / F::from(frames.len()).expect("frame count fits float");
            for a in frames {
                route(a, inv)?;
            }
        }
    }
    Ok(grad)
}

/// Single-frame region pooling over a `C x H x W` map.
pub fn roi_pool_forward<F: Float>(
    frame: ArrayView3<'_, F>,
    b: &BBox,
    side: usize,
    stride: f64,
) -> Result<PooledMap<F>, PoolError> {
    let (c, h, w) = frame.dim();
    let volume = VolumeView::new(frame.insert_axis(Axis(0)), stride)?;
    debug_assert_eq!(volume.dims(), [1, c, h, w]);
    let tube = Tube::stationary(0, 1, *b).expect("one-frame tube");
    toi_pool_forward(volume, &tube, side, TemporalMode::Max)
}

/// Gradient of [`roi_pool_forward`] with respect to the `C x H x W` map.
pub fn roi_pool_backward<F: Float>(
    grad_out: ArrayView3<'_, F>,
    pooled: &PooledMap<F>,
    dims: [usize; 3],
) -> Result<Array3<F>, PoolError> {
    let g = toi_pool_backward(grad_out, pooled, [1, dims[0], dims[1], dims[2]])?;
    Ok(g.index_axis_move(Axis(0), 0))
}
