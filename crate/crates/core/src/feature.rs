//! Split-point feature data model and the `.fjnd` container format.
//!
//! A `.fjnd` file is a fixed 28-byte little-endian header followed by the
//! payload:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "FJND"
//!      4     4  format version (u32, currently 1)
//!      8     8  element count (u64) = channels * height * width
//!     16     4  channels (u32)
//!     20     4  height (u32)
//!     24     4  width (u32)
//!     28   4*n  values, f32 LE, row-major (c outermost, w innermost)
//! ```
//!
//! Pyramids are stored as a directory with one `.fjnd` file per level and a
//! `manifest.json` that lists the level ids in order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape3, Tensor3};

pub const MAGIC: &[u8; 4] = b"FJND";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;
pub const FILE_EXTENSION: &str = "fjnd";

/// Interface feature `f` at the split point: 32-bit values indexed `(c, h, w)`.
///
/// Every value is finite and the shape is non-empty; both are checked at
/// construction, so a `FeatureTensor` in hand is always valid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    shape: Shape3,
    values: Vec<f32>,
}

/// Predicted perturbation. Same layout as the feature it was predicted from.
pub type JndMap = FeatureTensor;

impl FeatureTensor {
    pub fn new(shape: Shape3, values: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Validation(format!("empty shape {shape}")));
        }
        if values.len() != shape.len() {
            return Err(Error::shapes(shape, values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value {} at flat index {i}",
                values[i]
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Shape3) -> Result<Self> {
        Self::new(shape, vec![0.0; shape.len()])
    }

    /// Narrows a compute tensor to 32 bits.
    pub fn from_tensor(t: &Tensor3) -> Result<Self> {
        Self::new(t.shape(), t.data().iter().map(|&v| v as f32).collect())
    }

    pub fn to_tensor(&self) -> Tensor3 {
        Tensor3::from_vec(self.shape, self.values.iter().map(|&v| v as f64).collect())
            .expect("shape checked at construction")
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f32 {
        self.values[self.shape.index(c, h, w)]
    }

    /// Euclidean norm over all elements, accumulated in f64.
    pub fn l2_norm(&self) -> f64 {
        l2_norm(self)
    }

    pub fn max_abs(&self) -> f32 {
        self.values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Euclidean norm over all elements of `t`, accumulated in f64.
pub fn l2_norm(t: &FeatureTensor) -> f64 {
    t.values
        .iter()
        .map(|&v| {
            let v = v as f64;
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Multi-level feature stream with fixed level order and unique labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureTensor>,
    level_ids: Vec<String>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureTensor>, level_ids: Vec<String>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Validation("pyramid needs at least one level".into()));
        }
        if levels.len() != level_ids.len() {
            return Err(Error::shapes(levels.len(), level_ids.len()));
        }
        for (i, id) in level_ids.iter().enumerate() {
            if level_ids[..i].contains(id) {
                return Err(Error::Validation(format!("duplicate level id `{id}`")));
            }
        }
        Ok(Self { levels, level_ids })
    }

    /// Labels levels `P{first}`, `P{first+1}`, ...
    pub fn with_default_ids(levels: Vec<FeatureTensor>, first: usize) -> Result<Self> {
        let ids = (0..levels.len()).map(|i| format!("P{}", first + i)).collect();
        Self::new(levels, ids)
    }

    pub fn single(level: FeatureTensor) -> Self {
        Self {
            levels: vec![level],
            level_ids: vec!["F".to_string()],
        }
    }

    pub fn levels(&self) -> &[FeatureTensor] {
        &self.levels
    }

    pub fn level_ids(&self) -> &[String] {
        &self.level_ids
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Applies `f` to every level, keeping order and ids.
    pub fn try_map(&self, mut f: impl FnMut(&FeatureTensor) -> Result<FeatureTensor>) -> Result<Self> {
        let levels = self.levels.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            levels,
            level_ids: self.level_ids.clone(),
        })
    }

    pub fn to_tensors(&self) -> Vec<Tensor3> {
        self.levels.iter().map(FeatureTensor::to_tensor).collect()
    }

    pub fn from_tensors(levels: &[Tensor3], level_ids: Vec<String>) -> Result<Self> {
        let levels = levels
            .iter()
            .map(FeatureTensor::from_tensor)
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels, level_ids)
    }

    pub fn same_structure(&self, other: &Self) -> bool {
        self.level_ids == other.level_ids
            && self
                .levels
                .iter()
                .zip(&other.levels)
                .all(|(a, b)| a.shape == b.shape)
    }
}

/// Serializes a tensor to `.fjnd` bytes.
pub fn encode_feature(t: &FeatureTensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * t.values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.values.len() as u64).to_le_bytes());
    for dim in [t.shape.channels, t.shape.height, t.shape.width] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in &t.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Parses `.fjnd` bytes; format errors name the failing field.
pub fn decode_feature(bytes: &[u8]) -> Result<FeatureTensor> {
    let fmt = |field, detail: String| Error::Format { field, detail };
    if bytes.len() < HEADER_LEN {
        return Err(fmt(
            "header",
            format!("expected {HEADER_LEN} header bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fmt(
            "magic",
            format!("expected {:?}, found {:?}", MAGIC, &bytes[0..4]),
        ));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(fmt(
            "version",
            format!("expected {FORMAT_VERSION}, found {version}"),
        ));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let shape = Shape3::new(u32_at(16) as usize, u32_at(20) as usize, u32_at(24) as usize);
    if count != shape.len() {
        return Err(fmt(
            "element_count",
            format!("header count {count} does not match shape {shape}"),
        ));
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = count * 4;
    if payload.len() != expected {
        return Err(fmt(
            "payload",
            format!("expected {expected} bytes, found {}", payload.len()),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureTensor::new(shape, values)
}

pub fn save_feature(t: &FeatureTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_feature(t)).map_err(|e| Error::io(path, e))
}

pub fn load_feature(path: impl AsRef<Path>) -> Result<FeatureTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature(&bytes)
}

#[derive(Debug, Serialize, Deserialize)]
struct PyramidManifest {
    format_version: u32,
    level_ids: Vec<String>,
}

const PYRAMID_MANIFEST: &str = "manifest.json";

fn level_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.{FILE_EXTENSION}"))
}

pub fn save_pyramid(p: &FeaturePyramid, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (level, id) in p.levels.iter().zip(&p.level_ids) {
        save_feature(level, level_path(dir, id))?;
    }
    let manifest = PyramidManifest {
        format_version: FORMAT_VERSION,
        level_ids: p.level_ids.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = dir.join(PYRAMID_MANIFEST);
    fs::write(&mpath, text).map_err(|e| Error::io(mpath, e))
}

pub fn load_pyramid(dir: impl AsRef<Path>) -> Result<FeaturePyramid> {
    let dir = dir.as_ref();
    let mpath = dir.join(PYRAMID_MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: PyramidManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        field: "manifest",
        detail: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            field: "version",
            detail: format!(
                "expected {FORMAT_VERSION}, found {}",
                manifest.format_version
            ),
        });
    }
    let levels = manifest
        .level_ids
        .iter()
        .map(|id| load_feature(level_path(dir, id)))
        .collect::<Result<Vec<_>>>()?;
    FeaturePyramid::new(levels, manifest.level_ids)
}
