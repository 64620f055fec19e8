//! Boxes, linear tubes and their overlaps.
//!
//! Coordinates are continuous pixels, `(x1, y1)` inclusive and `(x2, y2)`
//! exclusive, so a box's width is exactly `x2 - x1`. Zero-extent boxes are
//! invalid and cannot be constructed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): coordinates must be finite with x2 > x1 and y2 > y1")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("tube length must be at least 1")]
    ZeroLength,
    #[error("frame offset {offset} outside tube of length {len}")]
    OffsetOutOfRange { offset: usize, len: usize },
    #[error("track has no annotated frames inside chunk [{t0}, {t0}+{len})")]
    EmptyChunk { t0: u32, len: usize },
    #[error("track frames must be strictly increasing (frame {frame} follows {prev})")]
    UnorderedTrack { prev: u32, frame: u32 },
    #[error("least-squares fit degenerates to a zero-extent box at the chunk {which}")]
    DegenerateFit { which: &'static str },
    #[error("tube lies entirely outside the {width}x{height} frame")]
    OutsideFrame { width: f64, height: f64 },
    #[error("frame dimensions must be positive, got {width}x{height}")]
    InvalidFrame { width: f64, height: f64 },
}

/// Axis-aligned rectangle on one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(GeometryError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center_size(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    #[inline]
    pub fn x1(&self) -> f64 {
        self.x1
    }
    #[inline]
    pub fn y1(&self) -> f64 {
        self.y1
    }
    #[inline]
    pub fn x2(&self) -> f64 {
        self.x2
    }
    #[inline]
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }
    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self, GeometryError> {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clamps to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Result<Self, GeometryError> {
        if !(width > 0.0 && height > 0.0) {
            return Err(GeometryError::InvalidFrame { width, height });
        }
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
        .map_err(|_| GeometryError::OutsideFrame { width, height })
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;
    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A linearly moving box over `len` consecutive frames starting at `t0`,
/// represented by its first- and last-frame boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTube")]
pub struct Tube {
    t0: u32,
    len: usize,
    start: BBox,
    end: BBox,
}

#[derive(Deserialize)]
struct RawTube {
    t0: u32,
    len: usize,
    start: BBox,
    end: BBox,
}

impl TryFrom<RawTube> for Tube {
    type Error = GeometryError;
    fn try_from(r: RawTube) -> Result<Self, Self::Error> {
        Tube::new(r.t0, r.len, r.start, r.end)
    }
}

impl Tube {
    /// A one-frame tube must have identical start and end boxes.
    pub fn new(t0: u32, len: usize, start: BBox, end: BBox) -> Result<Self, GeometryError> {
        if len == 0 {
            return Err(GeometryError::ZeroLength);
        }
        let end = if len == 1 { start } else { end };
        Ok(Self { t0, len, start, end })
    }

    pub fn stationary(t0: u32, len: usize, b: BBox) -> Result<Self, GeometryError> {
        Self::new(t0, len, b, b)
    }

    #[inline]
    pub fn t0(&self) -> u32 {
        self.t0
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }
    /// Always false; tubes span at least one frame.
    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }
    #[inline]
    pub fn start(&self) -> &BBox {
        &self.start
    }
    #[inline]
    pub fn end(&self) -> &BBox {
        &self.end
    }

    pub fn chunk(&self) -> Chunk {
        Chunk { t0: self.t0, len: self.len }
    }

    pub fn is_stationary(&self) -> bool {
        self.start == self.end
    }

    /// Box on frame `t0 + offset`.
    pub fn interpolate(&self, offset: usize) -> Result<BBox, GeometryError> {
        if offset >= self.len {
            return Err(GeometryError::OffsetOutOfRange { offset, len: self.len });
        }
        if self.len == 1 || offset == 0 {
            return Ok(self.start);
        }
        if offset == self.len - 1 {
            return Ok(self.end);
        }
        let f = offset as f64 / (self.len - 1) as f64;
        let s = self.start.coords();
        let e = self.end.coords();
        let c: [f64; 4] = std::array::from_fn(|i| s[i] + f * (e[i] - s[i]));
        BBox::new(c[0], c[1], c[2], c[3])
    }

    /// All per-frame boxes, paired with absolute frame indices.
    pub fn frames(&self) -> impl Iterator<Item = (u32, BBox)> + '_ {
        (0..self.len).map(move |k| {
            let b = self.interpolate(k).expect("offset in range");
            (self.t0 + k as u32, b)
        })
    }

    pub fn with_boxes(&self, start: BBox, end: BBox) -> Self {
        Self { start, end: if self.len == 1 { start } else { end }, ..*self }
    }

    pub fn clip(&self, width: f64, height: f64) -> Result<Self, GeometryError> {
        Ok(self.with_boxes(self.start.clip(width, height)?, self.end.clip(width, height)?))
    }
}

pub fn interpolate_tube(t: &Tube, offset: usize) -> Result<BBox, GeometryError> {
    t.interpolate(offset)
}

/// Minimum of the start-box IoU and the end-box IoU. Chunk alignment is the
/// caller's responsibility; `t0` is ignored.
pub fn tube_overlap(a: &Tube, b: &Tube) -> f64 {
    iou(&a.start, &b.start).min(iou(&a.end, &b.end))
}

pub fn clip_tube(t: &Tube, width: f64, height: f64) -> Result<Tube, GeometryError> {
    t.clip(width, height)
}

/// A window of consecutive frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Chunk {
    pub t0: u32,
    pub len: usize,
}

impl Chunk {
    pub fn contains(&self, frame: u32) -> bool {
        frame >= self.t0 && ((frame - self.t0) as usize) < self.len
    }
}

/// Ground-truth box sequence of one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrack")]
pub struct Track {
    pub video: String,
    pub class: u32,
    entries: Vec<(u32, BBox)>,
}

#[derive(Deserialize)]
struct RawTrack {
    video: String,
    class: u32,
    entries: Vec<(u32, BBox)>,
}

impl TryFrom<RawTrack> for Track {
    type Error = GeometryError;
    fn try_from(r: RawTrack) -> Result<Self, Self::Error> {
        Track::new(r.video, r.class, r.entries)
    }
}

impl Track {
    pub fn new(
        video: impl Into<String>,
        class: u32,
        entries: Vec<(u32, BBox)>,
    ) -> Result<Self, GeometryError> {
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(GeometryError::UnorderedTrack { prev: w[0].0, frame: w[1].0 });
            }
        }
        Ok(Self { video: video.into(), class, entries })
    }

    pub fn entries(&self) -> &[(u32, BBox)] {
        &self.entries
    }

    pub fn in_chunk(&self, chunk: Chunk) -> impl Iterator<Item = &(u32, BBox)> {
        self.entries.iter().filter(move |(f, _)| chunk.contains(*f))
    }

    pub fn first_frame(&self) -> Option<u32> {
        self.entries.first().map(|e| e.0)
    }

    pub fn last_frame(&self) -> Option<u32> {
        self.entries.last().map(|e| e.0)
    }
}

/// Result of approximating a track by a linear tube inside a chunk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FittedTube {
    pub tube: Tube,
    /// Fraction of chunk frames carrying an annotation.
    pub coverage: f64,
    /// Root-mean-square coordinate residual of the fit.
    pub rms_residual: f64,
}

/// Per-coordinate ordinary least squares over the annotated frames of the
/// chunk, evaluated at offsets `0` and `len - 1`.
pub fn fit_linear_tube(entries: &[(u32, BBox)], chunk: Chunk) -> Result<FittedTube, GeometryError> {
    if chunk.len == 0 {
        return Err(GeometryError::ZeroLength);
    }
    let pts: Vec<(f64, [f64; 4])> = entries
        .iter()
        .filter(|(f, _)| chunk.contains(*f))
        .map(|(f, b)| ((f - chunk.t0) as f64, b.coords()))
        .collect();
    if pts.is_empty() {
        return Err(GeometryError::EmptyChunk { t0: chunk.t0, len: chunk.len });
    }
    let n = pts.len() as f64;
    let mean_t = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - mean_t).powi(2)).sum();

    let mut intercept = [0.0; 4];
    let mut slope = [0.0; 4];
    for c in 0..4 {
        let mean_v = pts.iter().map(|p| p.1[c]).sum::<f64>() / n;
        // a single annotated frame (stt == 0) gives a static tube
        slope[c] = if stt > 0.0 {
            pts.iter().map(|p| (p.0 - mean_t) * (p.1[c] - mean_v)).sum::<f64>() / stt
        } else {
            0.0
        };
        intercept[c] = mean_v - slope[c] * mean_t;
    }

    let last = (chunk.len - 1) as f64;
    let at = |t: f64| -> [f64; 4] { std::array::from_fn(|c| intercept[c] + slope[c] * t) };
    let s = at(0.0);
    let e = at(last);
    let start = BBox::new(s[0], s[1], s[2], s[3])
        .map_err(|_| GeometryError::DegenerateFit { which: "start" })?;
    let end =
        BBox::new(e[0], e[1], e[2], e[3]).map_err(|_| GeometryError::DegenerateFit { which: "end" })?;

    let sq: f64 = pts
        .iter()
        .map(|(t, v)| {
            let fit = at(*t);
            (0..4).map(|c| (v[c] - fit[c]).powi(2)).sum::<f64>()
        })
        .sum();
    Ok(FittedTube {
        tube: Tube::new(chunk.t0, chunk.len, start, end)?,
        coverage: pts.len() as f64 / chunk.len as f64,
        rms_residual: (sq / (4.0 * n)).sqrt(),
    })
}
