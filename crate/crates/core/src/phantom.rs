//! Synthetic multi-contrast phantoms with two simulated raters.
//!
//! An ellipsoidal "brain" carries a per-channel background intensity; lesions
//! are non-overlapping ellipsoids inside it, rendered in every channel with
//! that channel's signed contrast. The second rater's mask is the first one
//! with lesion boundary voxels independently dropped.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::BinaryMask;
use crate::volume::{write_json, write_stack, Dims, MultiChannelVolume, Volume};

pub const MASK_A: &str = "mask_a";
pub const MASK_B: &str = "mask_b";
pub const PHANTOM_FILE: &str = "phantom.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    /// Intensity of non-lesion tissue inside the brain.
    pub background: f64,
    /// Signed intensity offset added inside lesions.
    pub lesion_contrast: f64,
}

impl ChannelSpec {
    pub fn new(name: &str, background: f64, lesion_contrast: f64) -> Self {
        Self {
            name: name.into(),
            background,
            lesion_contrast,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub channels: Vec<ChannelSpec>,
    /// Inclusive range of the lesion count.
    pub lesion_count: [usize; 2],
    /// Inclusive range of each lesion semi-axis, in voxels.
    pub lesion_radius: [f64; 2],
    pub noise_std: f64,
    /// Probability that the second rater drops a boundary voxel.
    pub flip_prob: f64,
    /// Gap between the brain ellipsoid and the volume faces, in voxels.
    pub brain_margin: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: Dims::cube(32).expect("positive"),
            channels: vec![
                ChannelSpec::new("T1", 0.6, -0.3),
                ChannelSpec::new("T2", 0.5, 0.3),
                ChannelSpec::new("PD", 0.5, 0.05),
                ChannelSpec::new("FLAIR", 0.4, 0.6),
            ],
            lesion_count: [3, 6],
            lesion_radius: [1.5, 3.5],
            noise_std: 0.06,
            flip_prob: 0.1,
            brain_margin: 1.5,
            max_attempts: 2000,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.channels.is_empty() {
            return bad("phantom needs at least one channel".into());
        }
        let names: Vec<_> = self.channels.iter().map(|c| &c.name).collect();
        if (1..names.len()).any(|i| names[..i].contains(&names[i])) {
            return bad("phantom channel names must be unique".into());
        }
        if self.lesion_count[0] > self.lesion_count[1] {
            return bad(format!("lesion_count range {:?} is reversed", self.lesion_count));
        }
        let [rlo, rhi] = self.lesion_radius;
        if !(rlo >= 1.0) || rlo > rhi {
            return bad(format!("lesion radii {:?} must satisfy 1 <= lo <= hi", self.lesion_radius));
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.flip_prob) {
            return bad("flip_prob must lie in [0, 1)".into());
        }
        if !(self.brain_margin >= 0.0) {
            return bad("brain_margin must be nonnegative".into());
        }
        Ok(())
    }

    /// Channel with the largest absolute lesion contrast.
    pub fn dominant_channel(&self) -> &ChannelSpec {
        self.channels
            .iter()
            .max_by(|a, b| a.lesion_contrast.abs().total_cmp(&b.lesion_contrast.abs()))
            .expect("validated nonempty")
    }

    fn brain(&self) -> Ellipsoid {
        let d = self.dims.as_array();
        Ellipsoid {
            center: std::array::from_fn(|a| (d[a] as f64 - 1.0) / 2.0),
            radii: std::array::from_fn(|a| (d[a] as f64 / 2.0 - self.brain_margin).max(0.5)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    /// Normalized squared distance; `<= 1` inside.
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum()
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }

    /// Integer voxels inside, as `(x, y, z)`.
    fn voxels(&self, dims: Dims) -> Vec<[usize; 3]> {
        let d = dims.as_array();
        let lo: [usize; 3] = std::array::from_fn(|a| (self.center[a] - self.radii[a]).floor().max(0.0) as usize);
        let hi: [usize; 3] = std::array::from_fn(|a| {
            ((self.center[a] + self.radii[a]).ceil() as usize).min(d[a] - 1)
        });
        let mut out = Vec::new();
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    if self.contains([x as f64, y as f64, z as f64]) {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }
}

/// Generated subject plus its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub stack: MultiChannelVolume,
    pub gt_a: BinaryMask,
    pub gt_b: BinaryMask,
    pub lesions: Vec<Ellipsoid>,
    pub brain: Ellipsoid,
}

/// Lesion voxels with at least one face neighbor outside the lesion mask.
pub fn boundary_voxels(mask: &BinaryMask) -> Vec<usize> {
    let d = mask.dims();
    let faces = crate::metrics::Connectivity::Six.offsets();
    (0..d.len())
        .filter(|&i| {
            mask.values()[i] == 1
                && faces.iter().any(|&o| match crate::metrics::neighbor(d, i, o) {
                    Some(j) => mask.values()[j] == 0,
                    None => true,
                })
        })
        .collect()
}

/// Voxel strictly inside the brain: the voxel and its six face neighbors lie
/// within the brain ellipsoid.
fn strictly_inside(brain: &Ellipsoid, v: [usize; 3]) -> bool {
    let p = v.map(|c| c as f64);
    brain.contains(p)
        && (0..3).all(|a| {
            [-1.0, 1.0].iter().all(|s| {
                let mut q = p;
                q[a] += s;
                brain.contains(q)
            })
        })
}

pub fn generate_phantom(cfg: &PhantomConfig) -> Result<Phantom> {
    cfg.validate()?;
    let dims = cfg.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let brain = cfg.brain();

    let count = rng.random_range(cfg.lesion_count[0]..=cfg.lesion_count[1]);
    let [rlo, rhi] = cfg.lesion_radius;
    let mut lesions: Vec<Ellipsoid> = Vec::with_capacity(count);
    let mut gt_a = BinaryMask::zeros(dims);
    let d = dims.as_array();
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..cfg.max_attempts {
            let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(rlo..=rhi));
            let center: [f64; 3] = std::array::from_fn(|a| rng.random_range(0.0..d[a] as f64 - 1.0));
            let e = Ellipsoid { center, radii };
            let vox = e.voxels(dims);
            if vox.is_empty() || !vox.iter().all(|&v| strictly_inside(&brain, v)) {
                continue;
            }
            // keep a one-voxel gap so lesions stay separate under any connectivity
            let grown = Ellipsoid {
                center,
                radii: radii.map(|r| r + 2.0),
            };
            if grown.voxels(dims).iter().any(|&[x, y, z]| gt_a.get(x, y, z)) {
                continue;
            }
            for [x, y, z] in vox {
                gt_a.set(x, y, z, true);
            }
            lesions.push(e);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::InfeasiblePlacement(cfg.max_attempts));
        }
    }

    let mut gt_b = gt_a.clone();
    for i in boundary_voxels(&gt_a) {
        if rng.random::<f64>() < cfg.flip_prob {
            let [x, y, z] = dims.coords(i);
            gt_b.set(x, y, z, false);
        }
    }

    let noise = Normal::new(0.0, cfg.noise_std).expect("validated noise level");
    let in_brain: Vec<bool> = (0..dims.len())
        .map(|i| brain.contains(dims.coords(i).map(|c| c as f64)))
        .collect();
    let channels = cfg
        .channels
        .iter()
        .map(|spec| {
            let voxels = (0..dims.len())
                .map(|i| {
                    let mut v = 0.0;
                    if in_brain[i] {
                        v += spec.background;
                    }
                    if gt_a.values()[i] == 1 {
                        v += spec.lesion_contrast;
                    }
                    if cfg.noise_std > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    v as f32
                })
                .collect();
            Volume::new(spec.name.clone(), dims, voxels)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Phantom {
        stack: MultiChannelVolume::new(channels)?,
        gt_a,
        gt_b,
        lesions,
        brain,
    })
}

#[derive(Serialize)]
struct Provenance<'a> {
    config: &'a PhantomConfig,
    seed: u64,
    brain: &'a Ellipsoid,
    lesions: &'a [Ellipsoid],
}

/// Write the stack, both masks and a provenance record into `dir`.
pub fn write_phantom(p: &Phantom, cfg: &PhantomConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    write_stack(&p.stack, dir)?;
    p.gt_a.write(MASK_A, dir.join(MASK_A))?;
    p.gt_b.write(MASK_B, dir.join(MASK_B))?;
    write_json(
        &dir.join(PHANTOM_FILE),
        &Provenance {
            config: cfg,
            seed: cfg.seed,
            brain: &p.brain,
            lesions: &p.lesions,
        },
    )
}
