//! Binary rater masks and the three-valued training labels derived from them.

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{read_volume, write_volume, Dims, Volume};

pub const LABEL_BACKGROUND: f32 = 0.0;
pub const LABEL_DISAGREE: f32 = 0.5;
pub const LABEL_LESION: f32 = 1.0;

/// Per-voxel lesion indicator, 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    dims: Dims,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(dims: Dims, values: Vec<u8>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::SizeMismatch {
                path: Default::default(),
                expected: dims.len(),
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|&v| v > 1) {
            return Err(Error::InvalidLabel {
                index: i,
                value: values[i] as f32,
            });
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            values: vec![0; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut values = vec![0u8; dims.len()];
        for (i, v) in values.iter_mut().enumerate() {
            let [x, y, z] = dims.coords(i);
            *v = f(x, y, z) as u8;
        }
        Self { dims, values }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.values[self.dims.index(x, y, z)] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = self.dims.index(x, y, z);
        self.values[i] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    pub fn hamming(&self, other: &BinaryMask) -> Result<usize> {
        self.dims.check_same(&other.dims)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .filter(|(a, b)| a != b)
            .count())
    }

    pub fn to_volume(&self, name: impl Into<String>) -> Volume {
        let voxels = self.values.iter().map(|&v| v as f32).collect();
        Volume::new(name, self.dims, voxels).expect("mask length matches dims")
    }

    pub fn from_volume(v: &Volume) -> Result<Self> {
        let values = v
            .voxels()
            .iter()
            .enumerate()
            .map(|(i, &x)| match x {
                x if x == 0.0 => Ok(0),
                x if x == 1.0 => Ok(1),
                value => Err(Error::InvalidLabel { index: i, value }),
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(Self {
            dims: v.dims(),
            values,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_volume(&read_volume(path)?)
    }

    pub fn write(&self, name: &str, path: impl AsRef<Path>) -> Result<()> {
        write_volume(&self.to_volume(name), path)
    }
}

/// Merged ground truth: 0 (agreed background), 0.5 (raters disagree), 1 (agreed lesion).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    values: Vec<f32>,
}

/// Labels cut out alongside a training patch.
pub type LabelPatch = LabelVolume;

impl LabelVolume {
    pub fn new(dims: Dims, values: Vec<f32>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::SizeMismatch {
                path: Default::default(),
                expected: dims.len(),
                actual: values.len(),
            });
        }
        for (i, &v) in values.iter().enumerate() {
            if v != LABEL_BACKGROUND && v != LABEL_DISAGREE && v != LABEL_LESION {
                return Err(Error::InvalidLabel { index: i, value: v });
            }
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.dims.index(x, y, z)]
    }

    pub fn lesion_indices(&self) -> Vec<usize> {
        self.indices_where(|v| v == LABEL_LESION)
    }

    pub fn non_lesion_indices(&self) -> Vec<usize> {
        self.indices_where(|v| v != LABEL_LESION)
    }

    fn indices_where(&self, pred: impl Fn(f32) -> bool) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| pred(v).then_some(i))
            .collect()
    }

    pub fn to_volume(&self, name: impl Into<String>) -> Volume {
        Volume::new(name, self.dims, self.values.clone()).expect("label length matches dims")
    }

    pub fn from_volume(v: &Volume) -> Result<Self> {
        Self::new(v.dims(), v.voxels().to_vec())
    }
}

pub fn merge_masks(a: &BinaryMask, b: &BinaryMask) -> Result<LabelVolume> {
    a.dims.check_same(&b.dims)?;
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| match (x, y) {
            (1, 1) => LABEL_LESION,
            (0, 0) => LABEL_BACKGROUND,
            _ => LABEL_DISAGREE,
        })
        .collect();
    Ok(LabelVolume {
        dims: a.dims,
        values,
    })
}
