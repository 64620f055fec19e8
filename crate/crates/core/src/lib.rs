//! Non-neural machinery for tube-based video object detection.
//!
//! A *tube* is a box moving linearly over a chunk of `T` consecutive frames,
//! stored as its first- and last-frame boxes. The crate covers tube geometry
//! and overlap, tube NMS, tube-of-interest pooling with gradients, tube
//! anchors and regression coding, track-based tube proposals, training batch
//! sampling, and proposal/detection metrics, plus deterministic synthetic
//! scenes to test all of it against.

pub mod anchors;
pub mod config;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod motion;
pub mod pooling;
pub mod sampling;
pub mod suppression;
pub mod synth;

pub use anchors::{AnchorConfig, AnchorGrid, AnchorLabel, ProposalLabel, RegressionParams};
pub use config::RunConfig;
pub use geometry::{iou, tube_overlap, BBox, Chunk, GeometryError, Track, Tube};
pub use pooling::{FeatureVolume, PooledMap, TemporalMode};
pub use suppression::{ScoredBox, ScoredTube};
