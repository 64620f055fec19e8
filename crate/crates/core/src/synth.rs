//! Deterministic synthetic scenes with planted linear objects.
//!
//! Positions are drawn on a 1/8-pixel lattice and displacements on a
//! 1/4-pixel lattice so that noiseless point tracks reproduce the planted
//! motion exactly in floating point.

use ndarray::{Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, GeometryError, Track, Tube};
use crate::motion::PointTrack;
use crate::pooling::{FeatureVolume, PoolError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Volume(#[from] PoolError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub frame_width: f64,
    pub frame_height: f64,
    pub chunk_len: usize,
    pub objects: usize,
    /// Probability that an object is static rather than linearly moving.
    pub static_fraction: f64,
    pub min_object_size: f64,
    pub max_object_size: f64,
    /// Displacement magnitude range over the chunk for moving objects.
    pub min_displacement: f64,
    pub max_displacement: f64,
    pub points_per_object: usize,
    pub clutter_tracks: usize,
    /// Track endpoint jitter radius, drawn uniformly in `[0, track_noise]`.
    pub track_noise: f64,
    /// Background activation, uniform in `[0, feature_noise]`.
    pub feature_noise: f64,
    pub feature_stride: f64,
    pub feature_channels: usize,
    pub classes: u32,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frame_width: 320.0,
            frame_height: 240.0,
            chunk_len: 10,
            objects: 4,
            static_fraction: 0.25,
            min_object_size: 24.0,
            max_object_size: 64.0,
            min_displacement: 2.0,
            max_displacement: 24.0,
            points_per_object: 24,
            clutter_tracks: 40,
            track_noise: 0.0,
            feature_noise: 0.05,
            feature_stride: 8.0,
            feature_channels: 4,
            classes: 2,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.chunk_len == 0 {
            return Err(SynthError::Config("chunk_len must be >= 1"));
        }
        if !(self.frame_width > 0.0 && self.frame_height > 0.0) {
            return Err(SynthError::Config("frame size must be positive"));
        }
        if !(self.min_object_size > 0.0 && self.min_object_size <= self.max_object_size) {
            return Err(SynthError::Config("object size range must be positive and ordered"));
        }
        if self.max_object_size >= self.frame_width.min(self.frame_height) {
            return Err(SynthError::Config("objects must fit inside the frame"));
        }
        if !(0.0 <= self.min_displacement && self.min_displacement <= self.max_displacement) {
            return Err(SynthError::Config("displacement range must be non-negative and ordered"));
        }
        if !(0.0..=1.0).contains(&self.static_fraction) {
            return Err(SynthError::Config("static_fraction must lie in [0, 1]"));
        }
        if self.track_noise < 0.0 || self.feature_noise < 0.0 {
            return Err(SynthError::Config("noise levels must be >= 0"));
        }
        if self.feature_stride.is_nan() || self.feature_stride <= 0.0 || self.feature_channels == 0 || self.classes == 0 {
            return Err(SynthError::Config("feature stride, channels and classes must be positive"));
        }
        Ok(())
    }

    pub fn video_id(&self) -> String {
        format!("synth-{}", self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub class: u32,
    pub tube: Tube,
    pub displacement: [f64; 2],
    /// The drawn velocity was reversed or reduced to keep the object inside
    /// the frame.
    pub velocity_clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub video: String,
    pub objects: Vec<PlantedObject>,
    pub tracks: Vec<Track>,
    pub point_tracks: Vec<PointTrack>,
    pub seed_boxes: Vec<BBox>,
    pub volume: FeatureVolume<f64>,
}

impl Scene {
    pub fn gt_tubes(&self) -> Vec<Tube> {
        self.objects.iter().map(|o| o.tube).collect()
    }

    /// Indices of objects whose velocity had to be clamped.
    pub fn clamped(&self) -> Vec<usize> {
        self.objects.iter().enumerate().filter(|(_, o)| o.velocity_clamped).map(|(i, _)| i).collect()
    }
}

fn snap(v: f64, step: f64) -> f64 {
    (v / step).round() * step
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;

pub fn generate_scene(config: &SceneConfig) -> Result<Scene, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (fw, fh) = (config.frame_width, config.frame_height);

    let mut starts: Vec<BBox> = Vec::with_capacity(config.objects);
    let mut objects = Vec::with_capacity(config.objects);
    for _ in 0..config.objects {
        // start boxes are kept disjoint when possible so point tracks belong
        // to exactly one object
        let mut start = None;
        for attempt in 0..PLACEMENT_ATTEMPTS {
            let w = snap(uniform(&mut rng, config.min_object_size, config.max_object_size), 0.125);
            let h = snap(uniform(&mut rng, config.min_object_size, config.max_object_size), 0.125);
            let x1 = snap(uniform(&mut rng, 0.0, fw - w), 0.125);
            let y1 = snap(uniform(&mut rng, 0.0, fh - h), 0.125);
            let b = BBox::new(x1, y1, x1 + w, y1 + h)?;
            if attempt + 1 == PLACEMENT_ATTEMPTS || starts.iter().all(|s| s.intersection_area(&b) == 0.0) {
                start = Some(b);
                break;
            }
        }
        let start = start.expect("placement loop always yields");
        starts.push(start);

        let mut d = [0.0, 0.0];
        if !rng.random_bool(config.static_fraction) && config.chunk_len > 1 {
            let mag = uniform(&mut rng, config.min_displacement, config.max_displacement);
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            d = [snap(mag * ang.cos(), 0.25), snap(mag * ang.sin(), 0.25)];
        }
        // reverse an axis that would leave the frame, clamp only if neither way fits
        let clamp_axis = |v: f64, lo: f64, hi: f64, size: f64| {
            let fits = |u: f64| -lo <= u && u <= size - hi;
            if fits(v) {
                v
            } else if fits(-v) {
                -v
            } else {
                v.clamp(-lo, size - hi)
            }
        };
        let clamped = [
            clamp_axis(d[0], start.x1(), start.x2(), fw),
            clamp_axis(d[1], start.y1(), start.y2(), fh),
        ];
        let velocity_clamped = clamped != d;
        let end = start.translate(clamped[0], clamped[1])?;
        let tube = Tube::new(0, config.chunk_len, start, end)?;
        let class = rng.random_range(0..config.classes);
        objects.push(PlantedObject { class, tube, displacement: clamped, velocity_clamped });
    }

    let video = config.video_id();
    let tracks = objects
        .iter()
        .map(|o| Track::new(video.clone(), o.class, o.tube.frames().collect()))
        .collect::<Result<Vec<_>, _>>()?;

    let mut point_tracks = Vec::new();
    for o in &objects {
        let s = o.tube.start();
        for _ in 0..config.points_per_object {
            let p = [
                snap(uniform(&mut rng, s.x1(), s.x2()), 0.125).min(s.x2() - 0.125),
                snap(uniform(&mut rng, s.y1(), s.y2()), 0.125).min(s.y2() - 0.125),
            ];
            let mut e = [p[0] + o.displacement[0], p[1] + o.displacement[1]];
            if config.track_noise > 0.0 {
                let r = rng.random_range(0.0..=config.track_noise);
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                e[0] += r * a.cos();
                e[1] += r * a.sin();
            }
            point_tracks.push(PointTrack::new(p, e));
        }
    }
    for _ in 0..config.clutter_tracks {
        let mut p = [0.0, 0.0];
        for _ in 0..PLACEMENT_ATTEMPTS {
            p = [snap(uniform(&mut rng, 0.0, fw), 0.125), snap(uniform(&mut rng, 0.0, fh), 0.125)];
            if !starts.iter().any(|s| s.contains_point(p[0], p[1])) {
                break;
            }
        }
        let mag = uniform(&mut rng, 0.0, config.max_displacement);
        let ang = rng.random_range(0.0..std::f64::consts::TAU);
        point_tracks.push(PointTrack::new(p, [p[0] + mag * ang.cos(), p[1] + mag * ang.sin()]));
    }

    let volume = render_volume(config, &objects, &mut rng)?;
    Ok(Scene { video, objects, tracks, point_tracks, seed_boxes: starts, volume })
}

/// Gaussian bump of peak 1 centred on each object per frame, over uniform
/// background noise. Overlapping bumps combine by maximum.
fn render_volume(
    config: &SceneConfig,
    objects: &[PlantedObject],
    rng: &mut ChaCha8Rng,
) -> Result<FeatureVolume<f64>, SynthError> {
    let s = config.feature_stride;
    let h = (config.frame_height / s).ceil() as usize;
    let w = (config.frame_width / s).ceil() as usize;
    let dims = (config.chunk_len, config.feature_channels, h, w);
    let mut data = Array4::<f64>::zeros(dims);
    if config.feature_noise > 0.0 {
        data.mapv_inplace(|_| rng.random_range(0.0..=config.feature_noise));
    }
    for t in 0..config.chunk_len {
        for o in objects {
            let b = o.tube.interpolate(t)?;
            let (cx, cy) = b.center();
            let sigma = (0.25 * b.width().min(b.height())).max(0.5 * s);
            let falloff = |n: usize, centre: f64| -> Vec<f64> {
                (0..n)
                    .map(|k| {
                        let d = (k as f64 + 0.5) * s - centre;
                        (-(d * d) / (2.0 * sigma * sigma)).exp()
                    })
                    .collect()
            };
            let (gx, gy) = (falloff(w, cx), falloff(h, cy));
            for mut plane in data.index_axis_mut(Axis(0), t).outer_iter_mut() {
                for ((y, x), cell) in plane.indexed_iter_mut() {
                    *cell = cell.max(gy[y] * gx[x]);
                }
            }
        }
    }
    Ok(FeatureVolume::new(data, s)?)
}
