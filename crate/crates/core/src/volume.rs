//! Scalar 3D volumes, multi-channel stacks and their on-disk format.
//!
//! A volume on disk is a pair of files: `<stem>.json` holding the header and
//! `<stem>.raw` holding exactly `nx*ny*nz` little-endian `f32` values in
//! x-fastest order. A multi-channel stack is a directory of such pairs plus a
//! `stack.json` listing the channel order.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DTYPE_F32LE: &str = "f32le";
pub const ORDER_X_FASTEST: &str = "x-fastest";
pub const STACK_FILE: &str = "stack.json";

/// Grid extent `(nx, ny, nz)`; voxel `(x, y, z)` lives at `x + nx*(y + ny*z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 3]", try_from = "[usize; 3]")]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidDimensions([nx, ny, nz]));
        }
        Ok(Self { nx, ny, nz })
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.nx;
        let y = (index / self.nx) % self.ny;
        let z = index / (self.nx * self.ny);
        [x, y, z]
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn contains(&self, other: &Dims) -> bool {
        self.nx >= other.nx && self.ny >= other.ny && self.nz >= other.nz
    }

    pub(crate) fn check_same(&self, other: &Dims) -> Result<()> {
        if self != other {
            return Err(Error::DimensionMismatch {
                left: self.as_array(),
                right: other.as_array(),
            });
        }
        Ok(())
    }
}

impl From<Dims> for [usize; 3] {
    fn from(d: Dims) -> Self {
        d.as_array()
    }
}

impl TryFrom<[usize; 3]> for Dims {
    type Error = Error;

    fn try_from(a: [usize; 3]) -> Result<Self> {
        Dims::new(a[0], a[1], a[2])
    }
}

/// One named scalar field on a 3D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    name: String,
    dims: Dims,
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(name: impl Into<String>, dims: Dims, voxels: Vec<f32>) -> Result<Self> {
        if voxels.len() != dims.len() {
            return Err(Error::SizeMismatch {
                path: PathBuf::new(),
                expected: dims.len(),
                actual: voxels.len(),
            });
        }
        Ok(Self {
            name: name.into(),
            dims,
            voxels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.dims.index(x, y, z)]
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn is_all_zero(&self) -> bool {
        self.voxels.iter().all(|&v| v == 0.0)
    }
}

/// All-zero volume, the stand-in for an absent or dropped channel.
pub fn zero_like(dims: [usize; 3], name: impl Into<String>) -> Result<Volume> {
    let dims = Dims::try_from(dims)?;
    Volume::new(name, dims, vec![0.0; dims.len()])
}

/// Min-max rescale to `[0, 1]`; a constant volume maps to all zeros.
pub fn normalize(v: &Volume) -> Volume {
    let (min, max) = v
        .voxels
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            let x = x as f64;
            (lo.min(x), hi.max(x))
        });
    let voxels = if max > min {
        let range = max - min;
        v.voxels
            .iter()
            .map(|&x| ((x as f64 - min) / range) as f32)
            .collect()
    } else {
        vec![0.0; v.voxels.len()]
    };
    Volume {
        name: v.name.clone(),
        dims: v.dims,
        voxels,
    }
}

/// Ordered stack of channels sharing one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelVolume {
    channels: Vec<Volume>,
}

/// A training patch is just a small stack.
pub type MultiChannelPatch = MultiChannelVolume;

impl MultiChannelVolume {
    pub fn new(channels: Vec<Volume>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::InvalidChannels("a stack needs at least one channel".into()))?;
        let dims = first.dims;
        for (i, c) in channels.iter().enumerate() {
            c.dims.check_same(&dims)?;
            if channels[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::InvalidChannels(format!(
                    "duplicate channel name `{}`",
                    c.name
                )));
            }
        }
        Ok(Self { channels })
    }

    pub fn dims(&self) -> Dims {
        self.channels[0].dims
    }

    pub fn channels(&self) -> &[Volume] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.channels.iter().map(|c| c.name.clone()).collect()
    }

    pub fn channel(&self, name: &str) -> Option<&Volume> {
        self.channels.iter().find(|c| c.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }

    pub fn into_channels(self) -> Vec<Volume> {
        self.channels
    }

    /// Per-channel whole-volume normalization.
    pub fn normalized(&self) -> Self {
        Self {
            channels: self.channels.iter().map(normalize).collect(),
        }
    }

    /// Reorder (and subset) channels by name.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let channels = names
            .iter()
            .map(|n| {
                self.channel(n)
                    .cloned()
                    .ok_or_else(|| Error::UnknownChannel(n.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(channels)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    dtype: String,
    order: String,
    channel: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StackHeader {
    channels: Vec<String>,
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Header and payload paths for a volume; `path` may be the stem or either file.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    (with_suffix(&stem, ".json"), with_suffix(&stem, ".raw"))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (header_path, raw_path) = volume_paths(path.as_ref());
    let header: VolumeHeader = read_json(&header_path)?;
    if header.dtype != DTYPE_F32LE {
        return Err(Error::UnsupportedDtype(header.dtype));
    }
    if header.order != ORDER_X_FASTEST {
        return Err(Error::InvalidHeader {
            path: header_path,
            reason: format!("unsupported storage order `{}`", header.order),
        });
    }
    let dims = Dims::try_from(header.dims)?;
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != dims.len() {
        return Err(Error::SizeMismatch {
            path: raw_path,
            expected: dims.len(),
            actual: bytes.len() / 4,
        });
    }
    let voxels = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Volume::new(header.channel, dims, voxels)
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let (header_path, raw_path) = volume_paths(path.as_ref());
    let header = VolumeHeader {
        dims: v.dims.as_array(),
        dtype: DTYPE_F32LE.into(),
        order: ORDER_X_FASTEST.into(),
        channel: v.name.clone(),
    };
    write_json(&header_path, &header)?;
    let mut bytes = Vec::with_capacity(v.voxels.len() * 4);
    for x in &v.voxels {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

/// Read a stack directory; channels come back in `stack.json` order.
pub fn read_stack(dir: impl AsRef<Path>) -> Result<MultiChannelVolume> {
    let dir = dir.as_ref();
    let header: StackHeader = read_json(&dir.join(STACK_FILE))?;
    let channels = header
        .channels
        .iter()
        .map(|name| {
            let v = read_volume(dir.join(name))?;
            if v.name != *name {
                return Err(Error::InvalidHeader {
                    path: dir.join(format!("{name}.json")),
                    reason: format!("channel field `{}` does not match stack entry", v.name),
                });
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    MultiChannelVolume::new(channels)
}

pub fn write_stack(stack: &MultiChannelVolume, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for c in &stack.channels {
        write_volume(c, dir.join(&c.name))?;
    }
    write_json(
        &dir.join(STACK_FILE),
        &StackHeader {
            channels: stack.names(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(values: &[f32]) -> Volume {
        Volume::new("t", Dims::new(values.len(), 1, 1).unwrap(), values.to_vec()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&vol(&[0.0, 1.0])).voxels(), &[0.0, 1.0]);
        assert_eq!(normalize(&vol(&[5.0; 8])).voxels(), &[0.0; 8]);
        assert_eq!(normalize(&vol(&[2.0, 4.0, 6.0])).voxels(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn zero_like_examples() {
        let v = zero_like([2, 2, 2], "FLAIR").unwrap();
        assert_eq!(v.voxels().len(), 8);
        assert!(v.is_all_zero());
        assert_eq!(zero_like([1, 1, 1], "x").unwrap().voxels(), &[0.0]);
        assert!(matches!(
            zero_like([2, 0, 2], "x"),
            Err(Error::InvalidDimensions(_))
        ));
    }

    #[test]
    fn index_round_trip() {
        let d = Dims::new(3, 4, 5).unwrap();
        for i in 0..d.len() {
            let [x, y, z] = d.coords(i);
            assert_eq!(d.index(x, y, z), i);
        }
    }

    #[test]
    fn stack_rejects_bad_channels() {
        let a = zero_like([2, 2, 2], "a").unwrap();
        let b = zero_like([2, 2, 3], "b").unwrap();
        assert!(MultiChannelVolume::new(vec![]).is_err());
        assert!(MultiChannelVolume::new(vec![a.clone(), b]).is_err());
        assert!(MultiChannelVolume::new(vec![a.clone(), a]).is_err());
    }

    #[test]
    fn file_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_volume(dir.path().join("nope")),
            Err(Error::NotFound(_))
        ));

        let v = Volume::new("x", Dims::cube(2).unwrap(), vec![1.0; 8]).unwrap();
        let stem = dir.path().join("x");
        write_volume(&v, &stem).unwrap();
        let (_, raw) = volume_paths(&stem);
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..28]).unwrap();
        assert!(matches!(
            read_volume(&stem),
            Err(Error::SizeMismatch {
                expected: 8,
                actual: 7,
                ..
            })
        ));

        let header = r#"{"dims":[2,2,2],"dtype":"u8","order":"x-fastest","channel":"x"}"#;
        fs::write(dir.path().join("x.json"), header).unwrap();
        assert!(matches!(read_volume(&stem), Err(Error::UnsupportedDtype(_))));
    }

    #[test]
    fn path_forms_agree() {
        let p = Path::new("/tmp/a/FLAIR");
        assert_eq!(volume_paths(p), volume_paths(Path::new("/tmp/a/FLAIR.json")));
        assert_eq!(volume_paths(p), volume_paths(Path::new("/tmp/a/FLAIR.raw")));
    }
}
