//! On-disk formats.
//!
//! Record files are JSON lines. The first line is a header naming the record
//! kind and schema version, e.g. `{"schema":"tubekit/tubes","version":1}`;
//! every following non-blank line is one record. Feature volumes use the
//! binary FVOL container:
//!
//! ```text
//! b"FVOL" | version: u32 | T, C, H, W: u32 | stride: f32 | T*C*H*W f32, row-major
//! ```
//!
//! All integers and floats are little-endian. Writers go through a temporary
//! file in the destination directory and rename it into place.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::RegressionParams;
use crate::geometry::{BBox, Tube};
use crate::motion::PointTrack;
use crate::pooling::{FeatureVolume, PoolError};
use crate::sampling::SampleKind;
use crate::suppression::ScoredTube;

pub const SCHEMA_VERSION: u32 = 1;
pub const FVOL_MAGIC: &[u8; 4] = b"FVOL";
pub const FVOL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: line {line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: expected schema {expected} version {version}, found {found}")]
    Schema { path: PathBuf, expected: String, version: u32, found: String },
    #[error("{path}: not an FVOL file")]
    Magic { path: PathBuf },
    #[error("{path}: unsupported FVOL version {found}")]
    FvolVersion { path: PathBuf, found: u32 },
    #[error("{path}: truncated FVOL payload (expected {expected} bytes, got {got})")]
    Truncated { path: PathBuf, expected: usize, got: usize },
    #[error("{path}: {source}")]
    Volume { path: PathBuf, source: PoolError },
    #[error("{path}: cannot serialize record: {msg}")]
    Serialize { path: PathBuf, msg: String },
}

/// Record file kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Tracks,
    Tubes,
    PointTracks,
    Seeds,
    Detections,
    Labels,
    Batches,
    Reports,
}

impl RecordKind {
    pub fn schema(self) -> &'static str {
        match self {
            Self::Tracks => "tubekit/tracks",
            Self::Tubes => "tubekit/tubes",
            Self::PointTracks => "tubekit/point-tracks",
            Self::Seeds => "tubekit/seeds",
            Self::Detections => "tubekit/detections",
            Self::Labels => "tubekit/labels",
            Self::Batches => "tubekit/batches",
            Self::Reports => "tubekit/reports",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

/// A tube tagged with its video, optionally scored and classed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeRecord {
    pub video: String,
    #[serde(flatten)]
    pub tube: Tube,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<u32>,
    /// Fraction of chunk frames with an annotation (fitted ground truth only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
}

impl TubeRecord {
    pub fn new(video: impl Into<String>, tube: Tube) -> Self {
        Self { video: video.into(), tube, score: None, class: None, coverage: None }
    }

    pub fn scored(&self) -> ScoredTube {
        ScoredTube { tube: self.tube, score: self.score.unwrap_or(0.0), class: self.class }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointTrackRecord {
    pub video: String,
    pub t0: u32,
    pub len: usize,
    #[serde(flatten)]
    pub track: PointTrack,
}

/// A start-frame box proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub video: String,
    pub frame: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Positive,
    Negative,
    Ignore,
    /// Below the background band.
    Excluded,
}

/// Label of the `index`-th tube of a `(video, t0)` chunk in some tube file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub video: String,
    pub t0: u32,
    pub index: usize,
    pub label: LabelKind,
    pub overlap: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<RegressionParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// One item of one sampled batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch: usize,
    pub video: String,
    pub t0: u32,
    pub index: usize,
    pub kind: SampleKind,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub underfilled: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_path_buf(), source }
}

/// Writes `bytes` produced by `fill` to `path` via a sibling temp file.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<(), FormatError>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> std::io::Result<()>,
{
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_err(path))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))?;
    }
    tmp.persist(path).map_err(|e| FormatError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

pub fn records_to_string<T: Serialize>(kind: RecordKind, records: &[T]) -> Result<String, serde_json::Error> {
    let mut out = serde_json::to_string(&Header { schema: kind.schema().into(), version: SCHEMA_VERSION })?;
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_records<T: Serialize>(path: &Path, kind: RecordKind, records: &[T]) -> Result<(), FormatError> {
    let text = records_to_string(kind, records)
        .map_err(|e| FormatError::Serialize { path: path.to_path_buf(), msg: e.to_string() })?;
    write_atomic(path, |w| w.write_all(text.as_bytes()))
}

// serde's own position is always within one line
fn json_msg(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.rsplit_once(" at line ") {
        Some((msg, _)) => msg.to_string(),
        None => s,
    }
}

/// Parses a record file held in memory; `path` only labels errors.
pub fn parse_records<T: DeserializeOwned>(
    path: &Path,
    kind: RecordKind,
    reader: impl BufRead,
) -> Result<Vec<T>, FormatError> {
    let mut out = Vec::new();
    let mut header_seen = false;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            let h: Header = serde_json::from_str(&line).map_err(|e| FormatError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("bad header: {}", json_msg(&e)),
            })?;
            if h.schema != kind.schema() || h.version != SCHEMA_VERSION {
                return Err(FormatError::Schema {
                    path: path.to_path_buf(),
                    expected: kind.schema().into(),
                    version: SCHEMA_VERSION,
                    found: format!("{} version {}", h.schema, h.version),
                });
            }
            header_seen = true;
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| FormatError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg: json_msg(&e),
        })?);
    }
    if !header_seen {
        return Err(FormatError::Parse { path: path.to_path_buf(), line: 1, msg: "missing header".into() });
    }
    Ok(out)
}

pub fn read_records<T: DeserializeOwned>(path: &Path, kind: RecordKind) -> Result<Vec<T>, FormatError> {
    let f = File::open(path).map_err(io_err(path))?;
    parse_records(path, kind, BufReader::new(f))
}

pub fn encode_fvol(volume: &FeatureVolume<f32>) -> Vec<u8> {
    let dims = volume.dims();
    let mut out = Vec::with_capacity(28 + 4 * volume.data().len());
    out.extend_from_slice(FVOL_MAGIC);
    out.extend_from_slice(&FVOL_VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(volume.stride() as f32).to_le_bytes());
    for v in volume.data().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_fvol(path: &Path, bytes: &[u8]) -> Result<FeatureVolume<f32>, FormatError> {
    const HEADER: usize = 28;
    if bytes.len() < 4 || &bytes[..4] != FVOL_MAGIC {
        return Err(FormatError::Magic { path: path.to_path_buf() });
    }
    if bytes.len() < HEADER {
        return Err(FormatError::Truncated { path: path.to_path_buf(), expected: HEADER, got: bytes.len() });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != FVOL_VERSION {
        return Err(FormatError::FvolVersion { path: path.to_path_buf(), found: version });
    }
    let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize];
    let stride = f32::from_le_bytes(bytes[24..28].try_into().expect("4 bytes"));
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let expected = n.and_then(|n| n.checked_mul(4)).and_then(|b| b.checked_add(HEADER)).unwrap_or(usize::MAX);
    if bytes.len() != expected {
        return Err(FormatError::Truncated { path: path.to_path_buf(), expected, got: bytes.len() });
    }
    let values: Vec<f32> = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let data = Array4::from_shape_vec(dims, values).expect("length checked");
    FeatureVolume::new(data, stride as f64).map_err(|source| FormatError::Volume { path: path.to_path_buf(), source })
}

pub fn write_fvol(path: &Path, volume: &FeatureVolume<f32>) -> Result<(), FormatError> {
    let bytes = encode_fvol(volume);
    write_atomic(path, |w| w.write_all(&bytes))
}

pub fn read_fvol(path: &Path) -> Result<FeatureVolume<f32>, FormatError> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    decode_fvol(path, &bytes)
}
