//! Lesion-biased patch sampling.
//!
//! A patch centered at `c` covers `origin .. origin + size` on every axis with
//! `origin = c - floor(size / 2)`. Sampled centers are clamped so that origin
//! stays within `0 ..= dims - size`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelPatch, LabelVolume};
use crate::volume::{Dims, MultiChannelPatch, MultiChannelVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSpec {
    pub size: Dims,
    pub lesion_center_prob: f64,
}

impl PatchSpec {
    pub const PRODUCTION_SIZE: usize = 64;
    pub const DESK_SIZE: usize = 16;
    pub const LESION_CENTER_PROB: f64 = 0.99;

    pub fn new(size: Dims, lesion_center_prob: f64) -> Result<Self> {
        let spec = Self {
            size,
            lesion_center_prob,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn cube(n: usize, lesion_center_prob: f64) -> Result<Self> {
        Self::new(Dims::cube(n)?, lesion_center_prob)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lesion_center_prob) {
            return Err(Error::InvalidSpec(format!(
                "lesion_center_prob {} outside [0, 1]",
                self.lesion_center_prob
            )));
        }
        Dims::try_from(self.size.as_array())?;
        Ok(())
    }

    fn check_fits(&self, dims: Dims) -> Result<()> {
        if !dims.contains(&self.size) {
            return Err(Error::InvalidSpec(format!(
                "patch {:?} does not fit in volume {:?}",
                self.size.as_array(),
                dims.as_array()
            )));
        }
        Ok(())
    }
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            size: Dims {
                nx: Self::DESK_SIZE,
                ny: Self::DESK_SIZE,
                nz: Self::DESK_SIZE,
            },
            lesion_center_prob: Self::LESION_CENTER_PROB,
        }
    }
}

/// Outcome of one center draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CenterDraw {
    /// Voxel picked before clamping.
    pub drawn: [usize; 3],
    /// Center after clamping the patch into the volume.
    pub center: [usize; 3],
    /// Whether the draw came from the lesion set.
    pub lesion: bool,
}

/// Cached lesion / non-lesion index lists for repeated draws on one volume.
#[derive(Debug, Clone)]
pub struct CenterSampler {
    dims: Dims,
    spec: PatchSpec,
    lesion: Vec<usize>,
    other: Vec<usize>,
}

impl CenterSampler {
    pub fn new(labels: &LabelVolume, spec: PatchSpec) -> Result<Self> {
        spec.validate()?;
        spec.check_fits(labels.dims())?;
        Ok(Self {
            dims: labels.dims(),
            spec,
            lesion: labels.lesion_indices(),
            other: labels.non_lesion_indices(),
        })
    }

    pub fn lesion_count(&self) -> usize {
        self.lesion.len()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> CenterDraw {
        let want_lesion = rng.random::<f64>() < self.spec.lesion_center_prob;
        // lesion-free volumes always fall back to the background pool
        let lesion = (want_lesion && !self.lesion.is_empty()) || self.other.is_empty();
        let pool = if lesion { &self.lesion } else { &self.other };
        let index = pool[rng.random_range(0..pool.len())];
        let drawn = self.dims.coords(index);
        CenterDraw {
            drawn,
            center: clamp_center(drawn, self.spec.size, self.dims),
            lesion,
        }
    }
}

fn clamp_center(c: [usize; 3], size: Dims, dims: Dims) -> [usize; 3] {
    let size = size.as_array();
    let dims = dims.as_array();
    std::array::from_fn(|a| {
        let half = size[a] / 2;
        c[a].clamp(half, dims[a] - size[a] + half)
    })
}

pub fn sample_patch_center<R: Rng + ?Sized>(
    labels: &LabelVolume,
    spec: &PatchSpec,
    rng: &mut R,
) -> Result<[usize; 3]> {
    Ok(CenterSampler::new(labels, *spec)?.draw(rng).center)
}

/// Patch origin for `center`, or an error when the patch would leave the volume.
pub fn patch_origin(center: [usize; 3], size: Dims, dims: Dims) -> Result<[usize; 3]> {
    let s = size.as_array();
    let d = dims.as_array();
    let mut origin = [0; 3];
    for a in 0..3 {
        let lo = center[a].checked_sub(s[a] / 2);
        match lo {
            Some(o) if o + s[a] <= d[a] => origin[a] = o,
            _ => {
                return Err(Error::InvalidSpec(format!(
                    "patch of size {s:?} centered at {center:?} leaves volume {d:?}"
                )))
            }
        }
    }
    Ok(origin)
}

pub(crate) fn crop(v: &[f32], dims: Dims, origin: [usize; 3], size: Dims) -> Vec<f32> {
    let mut out = Vec::with_capacity(size.len());
    for z in 0..size.nz {
        for y in 0..size.ny {
            let start = dims.index(origin[0], origin[1] + y, origin[2] + z);
            out.extend_from_slice(&v[start..start + size.nx]);
        }
    }
    out
}

pub fn extract_patch(
    input: &MultiChannelVolume,
    labels: &LabelVolume,
    center: [usize; 3],
    spec: &PatchSpec,
) -> Result<(MultiChannelPatch, LabelPatch)> {
    let dims = input.dims();
    dims.check_same(&labels.dims())?;
    spec.check_fits(dims)?;
    let origin = patch_origin(center, spec.size, dims)?;
    let channels = input
        .channels()
        .iter()
        .map(|c| Volume::new(c.name(), spec.size, crop(c.voxels(), dims, origin, spec.size)))
        .collect::<Result<Vec<_>>>()?;
    let label = LabelVolume::new(spec.size, crop(labels.values(), dims, origin, spec.size))?;
    Ok((MultiChannelVolume::new(channels)?, label))
}
