use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::kernels::{ConvShape, UpShape};
use crate::error::{Error, Result};
use crate::volume::{read_json, write_json, Dims};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// Resolution levels on each path.
    pub levels: usize,
    /// Channel width of the first level; each deeper level doubles it.
    pub root_features: usize,
    /// `[kx, ky, kz]`, odd sizes.
    pub kernel: [usize; 3],
    pub in_channels: usize,
    pub classes: usize,
    pub convs_per_level: usize,
    pub prelu_init_slope: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            root_features: 96,
            kernel: [3, 3, 3],
            in_channels: 4,
            classes: 2,
            convs_per_level: 2,
            prelu_init_slope: 0.25,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.root_features == 0 || self.in_channels == 0 || self.convs_per_level == 0 {
            return bad("root_features, in_channels and convs_per_level must be positive".into());
        }
        if self.classes < 2 {
            return bad("at least two classes are required".into());
        }
        if self.kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return bad(format!("kernel sizes must be odd: {:?}", self.kernel));
        }
        if !self.prelu_init_slope.is_finite() {
            return bad("prelu_init_slope must be finite".into());
        }
        Ok(())
    }

    /// Spatial dims must be divisible by `2^(levels-1)`.
    pub fn check_patch(&self, dims: Dims) -> Result<()> {
        let f = self.divisor();
        if dims.as_array().iter().any(|d| d % f != 0) {
            return Err(Error::InvalidConfig(format!(
                "patch dims {:?} must be divisible by 2^(levels-1) = {f} for {} levels",
                dims.as_array(),
                self.levels
            )));
        }
        Ok(())
    }

    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn width(&self, level: usize) -> usize {
        self.root_features << level
    }

    pub(crate) fn enc_conv(&self, level: usize, j: usize) -> ConvShape {
        let inp = if j > 0 {
            self.width(level)
        } else if level == 0 {
            self.in_channels
        } else {
            self.width(level - 1)
        };
        ConvShape {
            out: self.width(level),
            inp,
            kernel: self.kernel,
        }
    }

    pub(crate) fn dec_conv(&self, level: usize, j: usize) -> ConvShape {
        let inp = if j == 0 { 2 * self.width(level) } else { self.width(level) };
        ConvShape {
            out: self.width(level),
            inp,
            kernel: self.kernel,
        }
    }

    /// Upsampling from `level + 1` into `level`.
    pub(crate) fn up(&self, level: usize) -> UpShape {
        UpShape {
            inp: self.width(level + 1),
            out: self.width(level),
        }
    }

    pub(crate) fn head(&self) -> ConvShape {
        ConvShape {
            out: self.classes,
            inp: self.root_features,
            kernel: [1, 1, 1],
        }
    }

    /// Every parameter in creation order.
    pub fn layout(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let block = |prefix: String, s: ConvShape, out: &mut Vec<ParamSpec>| {
            out.push(ParamSpec::new(format!("{prefix}.weight"), s.weight_shape(), ParamKind::ConvKernel { fan_in: s.inp * s.taps() }));
            out.push(ParamSpec::new(format!("{prefix}.bias"), vec![s.out], ParamKind::Bias));
            out.push(ParamSpec::new(format!("{prefix}.prelu"), vec![s.out], ParamKind::PreluSlope));
        };
        for l in 0..self.levels {
            for j in 0..self.convs_per_level {
                block(enc_name(l, j), self.enc_conv(l, j), &mut out);
            }
        }
        for l in (0..self.levels.saturating_sub(1)).rev() {
            let u = self.up(l);
            out.push(ParamSpec::new(format!("{}.weight", up_name(l)), u.weight_shape(), ParamKind::UpKernel { fan_in: u.inp }));
            out.push(ParamSpec::new(format!("{}.bias", up_name(l)), vec![u.out], ParamKind::Bias));
            for j in 0..self.convs_per_level {
                block(dec_name(l, j), self.dec_conv(l, j), &mut out);
            }
        }
        let h = self.head();
        out.push(ParamSpec::new("head.weight".into(), h.weight_shape(), ParamKind::Projection { fan_in: h.inp }));
        out.push(ParamSpec::new("head.bias".into(), vec![h.out], ParamKind::Bias));
        out
    }
}

pub(crate) fn enc_name(level: usize, j: usize) -> String {
    format!("enc{level}.conv{j}")
}

pub(crate) fn dec_name(level: usize, j: usize) -> String {
    format!("dec{level}.conv{j}")
}

pub(crate) fn up_name(level: usize) -> String {
    format!("up{level}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvKernel { fan_in: usize },
    Bias,
    PreluSlope,
    UpKernel { fan_in: usize },
    Projection { fan_in: usize },
}

impl ParamKind {
    pub fn fan_in(&self) -> Option<usize> {
        match *self {
            ParamKind::ConvKernel { fan_in }
            | ParamKind::UpKernel { fan_in }
            | ParamKind::Projection { fan_in } => Some(fan_in),
            ParamKind::Bias | ParamKind::PreluSlope => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    fn new(name: String, shape: Vec<usize>, kind: ParamKind) -> Self {
        Self { name, shape, kind }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named, shaped arrays in a fixed order. Also used for gradients and
/// optimizer moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    params: IndexMap<String, Param>,
}

pub type GradientStore = ParameterStore;

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                name,
                expected: shape,
                found: vec![data.len()],
            });
        }
        self.params.insert(name, Param { shape, data });
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            shape: p.shape.clone(),
                            data: vec![0.0; p.data.len()],
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    /// Data of a parameter known to exist.
    pub(crate) fn data(&self, name: &str) -> &[f64] {
        &self.params[name].data
    }

    pub(crate) fn data_mut(&mut self, name: &str) -> &mut [f64] {
        &mut self.params[name].data
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    /// Error naming the first parameter holding a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self
            .params
            .iter()
            .find(|(_, p)| p.data.iter().any(|v| !v.is_finite()))
        {
            Some((name, _)) => Err(Error::NonFinite(name.clone())),
            None => Ok(()),
        }
    }

    /// Same names and shapes, in the same order.
    pub fn check_layout(&self, other: &ParameterStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::ShapeMismatch {
                name: "<store>".into(),
                expected: vec![self.params.len()],
                found: vec![other.params.len()],
            });
        }
        for ((na, pa), (nb, pb)) in self.params.iter().zip(&other.params) {
            if na != nb || pa.shape != pb.shape {
                return Err(Error::ShapeMismatch {
                    name: na.clone(),
                    expected: pa.shape.clone(),
                    found: pb.shape.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn check_config(&self, cfg: &UNetConfig) -> Result<()> {
        let layout = cfg.layout();
        if layout.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                name: "<parameter count>".into(),
                expected: vec![layout.len()],
                found: vec![self.params.len()],
            });
        }
        for spec in layout {
            match self.params.get(&spec.name) {
                Some(p) if p.shape == spec.shape => {}
                Some(p) => {
                    return Err(Error::ShapeMismatch {
                        name: spec.name,
                        expected: spec.shape,
                        found: p.shape.clone(),
                    })
                }
                None => {
                    return Err(Error::ShapeMismatch {
                        name: spec.name,
                        expected: spec.shape,
                        found: vec![],
                    })
                }
            }
        }
        Ok(())
    }
}

/// He-style initialization: kernels ~ N(0, 2/fan_in), zero biases, PReLU
/// slopes at the configured value.
pub fn init_parameters<R: Rng + ?Sized>(cfg: &UNetConfig, rng: &mut R) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    for spec in cfg.layout() {
        let n: usize = spec.shape.iter().product();
        let data = match spec.kind {
            ParamKind::Bias => vec![0.0; n],
            ParamKind::PreluSlope => vec![cfg.prelu_init_slope; n],
            kind => {
                let fan_in = kind.fan_in().expect("kernels carry a fan-in");
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .expect("positive standard deviation");
                (0..n).map(|_| normal.sample(rng)).collect()
            }
        };
        store.insert(spec.name, spec.shape, data)?;
    }
    Ok(store)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const DTYPE_F64LE: &str = "f64le";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    config: UNetConfig,
    channels: Vec<String>,
    seed: u64,
    params: Vec<ParamEntry>,
}

/// Trained weights plus what is needed to apply them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: UNetConfig,
    /// Input channel names in network order.
    pub channels: Vec<String>,
    pub seed: u64,
    pub params: ParameterStore,
}

impl Checkpoint {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (name, p) in self.params.iter() {
            let file = format!("{name}.raw");
            let mut bytes = Vec::with_capacity(p.data.len() * 8);
            for v in &p.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            entries.push(ParamEntry {
                name: name.clone(),
                shape: p.shape.clone(),
                dtype: DTYPE_F64LE.into(),
                file,
            });
        }
        write_json(
            &dir.join(CHECKPOINT_FILE),
            &CheckpointManifest {
                config: self.config.clone(),
                channels: self.channels.clone(),
                seed: self.seed,
                params: entries,
            },
        )
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: CheckpointManifest = read_json(&dir.join(CHECKPOINT_FILE))?;
        let mut params = ParameterStore::new();
        for e in manifest.params {
            if e.dtype != DTYPE_F64LE {
                return Err(Error::UnsupportedDtype(e.dtype));
            }
            let path = dir.join(&e.file);
            let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            let expected: usize = e.shape.iter().product();
            if bytes.len() != expected * 8 {
                return Err(Error::SizeMismatch {
                    path,
                    expected,
                    actual: bytes.len() / 8,
                });
            }
            let data = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            params.insert(e.name, e.shape, data)?;
        }
        manifest.config.validate()?;
        params.check_config(&manifest.config)?;
        if manifest.channels.len() != manifest.config.in_channels {
            return Err(Error::InvalidConfig(format!(
                "checkpoint lists {} channels but the network takes {}",
                manifest.channels.len(),
                manifest.config.in_channels
            )));
        }
        Ok(Self {
            config: manifest.config,
            channels: manifest.channels,
            seed: manifest.seed,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> UNetConfig {
        UNetConfig {
            levels: 2,
            root_features: 2,
            in_channels: 2,
            ..Default::default()
        }
    }

    #[test]
    fn layout_widths() {
        let cfg = UNetConfig::default();
        assert_eq!(cfg.width(0), 96);
        assert_eq!(cfg.width(2), 384);
        let names: Vec<_> = tiny().layout().into_iter().map(|s| s.name).collect();
        assert_eq!(
            names,
            [
                "enc0.conv0.weight", "enc0.conv0.bias", "enc0.conv0.prelu",
                "enc0.conv1.weight", "enc0.conv1.bias", "enc0.conv1.prelu",
                "enc1.conv0.weight", "enc1.conv0.bias", "enc1.conv0.prelu",
                "enc1.conv1.weight", "enc1.conv1.bias", "enc1.conv1.prelu",
                "up0.weight", "up0.bias",
                "dec0.conv0.weight", "dec0.conv0.bias", "dec0.conv0.prelu",
                "dec0.conv1.weight", "dec0.conv1.bias", "dec0.conv1.prelu",
                "head.weight", "head.bias",
            ]
        );
        let p = tiny().layout();
        assert_eq!(p[14].shape, vec![2, 4, 3, 3, 3]);
        assert_eq!(p[12].shape, vec![4, 2, 2, 2, 2]);
    }

    #[test]
    fn config_validation() {
        assert!(UNetConfig { levels: 0, ..tiny() }.validate().is_err());
        assert!(UNetConfig { kernel: [3, 2, 3], ..tiny() }.validate().is_err());
        assert!(UNetConfig { classes: 1, ..tiny() }.validate().is_err());
        let cfg = UNetConfig { levels: 3, ..tiny() };
        assert!(cfg.check_patch(Dims::cube(16).unwrap()).is_ok());
        assert!(cfg.check_patch(Dims::cube(15).unwrap()).is_err());
        assert!(cfg.check_patch(Dims::new(8, 8, 6).unwrap()).is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_parameters(&tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = init_parameters(&tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        for (name, p) in a.iter() {
            if name.ends_with(".bias") {
                assert!(p.data.iter().all(|&v| v == 0.0));
            }
            if name.ends_with(".prelu") {
                assert!(p.data.iter().all(|&v| v == 0.25));
            }
        }
        a.check_config(&tiny()).unwrap();
        assert!(a.check_config(&UNetConfig { root_features: 3, ..tiny() }).is_err());
    }

    #[test]
    fn init_variance_matches_fan_in() {
        let cfg = UNetConfig {
            levels: 2,
            root_features: 8,
            in_channels: 4,
            ..Default::default()
        };
        let store = init_parameters(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut checked = 0;
        for spec in cfg.layout() {
            let Some(fan_in) = spec.kind.fan_in() else { continue };
            let data = &store.get(&spec.name).unwrap().data;
            if data.len() < 1000 {
                continue;
            }
            let n = data.len() as f64;
            let mean = data.iter().sum::<f64>() / n;
            let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let target = 2.0 / fan_in as f64;
            assert!(
                (var / target - 1.0).abs() < 0.2,
                "{}: variance {var} vs {target}",
                spec.name
            );
            checked += 1;
        }
        assert!(checked >= 4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint {
            config: tiny(),
            channels: vec!["T2".into(), "FLAIR".into()],
            seed: 42,
            params: init_parameters(&tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap(),
        };
        ck.write(dir.path()).unwrap();
        let back = Checkpoint::read(dir.path()).unwrap();
        assert_eq!(back, ck);
        for ((_, a), (_, b)) in back.params.iter().zip(ck.params.iter()) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        fs::write(dir.path().join("head.bias.raw"), [0u8; 12]).unwrap();
        assert!(matches!(
            Checkpoint::read(dir.path()),
            Err(Error::SizeMismatch { .. })
        ));
    }
}
