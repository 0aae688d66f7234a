//! Sequence dropout.
//!
//! During training a random subset of input channels is kept and every other
//! channel is replaced with an all-zero volume, the same stand-in used at
//! deployment for a sequence that was never acquired.

use std::collections::BTreeSet;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{zero_like, MultiChannelPatch, MultiChannelVolume, Volume};

/// Distribution over how many channels survive, followed by a uniform subset
/// of that size. `preserve_weights[k]` is the mass for keeping `k + 1` channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DropoutPolicy {
    preserve_weights: Vec<f64>,
}

impl TryFrom<Vec<f64>> for DropoutPolicy {
    type Error = Error;

    fn try_from(w: Vec<f64>) -> Result<Self> {
        Self::new(w)
    }
}

impl From<DropoutPolicy> for Vec<f64> {
    fn from(p: DropoutPolicy) -> Self {
        p.preserve_weights
    }
}

impl DropoutPolicy {
    pub fn new(preserve_weights: Vec<f64>) -> Result<Self> {
        if preserve_weights.is_empty() {
            return Err(Error::InvalidSpec("dropout policy needs at least one channel".into()));
        }
        if preserve_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidSpec(format!(
                "dropout weights must be finite and nonnegative: {preserve_weights:?}"
            )));
        }
        let total: f64 = preserve_weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidSpec("dropout weights sum to zero".into()));
        }
        Ok(Self {
            preserve_weights: preserve_weights.iter().map(|w| w / total).collect(),
        })
    }

    /// Uniform over keeping 1..=C channels.
    pub fn uniform(channels: usize) -> Result<Self> {
        Self::new(vec![1.0; channels])
    }

    /// Uniform over keeping 1..C channels, never the full stack.
    pub fn strict(channels: usize) -> Result<Self> {
        if channels < 2 {
            return Err(Error::InvalidSpec(
                "strict dropout needs at least two channels".into(),
            ));
        }
        let mut w = vec![1.0; channels];
        w[channels - 1] = 0.0;
        Self::new(w)
    }

    /// All mass on keeping every channel: training without dropout.
    pub fn keep_all(channels: usize) -> Result<Self> {
        let mut w = vec![0.0; channels];
        if let Some(last) = w.last_mut() {
            *last = 1.0;
        }
        Self::new(w)
    }

    pub fn channels(&self) -> usize {
        self.preserve_weights.len()
    }

    /// Probability of keeping exactly `n` channels.
    pub fn mass(&self, n: usize) -> f64 {
        match n {
            0 => 0.0,
            n => self.preserve_weights.get(n - 1).copied().unwrap_or(0.0),
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.preserve_weights
    }

    /// Indices of the channels to keep, sorted ascending.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let c = self.channels();
        let n = WeightedIndex::new(&self.preserve_weights)
            .expect("weights validated at construction")
            .sample(rng)
            + 1;
        let mut keep = index::sample(rng, c, n).into_vec();
        keep.sort_unstable();
        keep
    }
}

fn zero_channel(v: &Volume) -> Volume {
    zero_like(v.dims().as_array(), v.name()).expect("dims of an existing volume are valid")
}

/// Zero out a random subset of channels. Returns the patch and the names kept.
pub fn apply_sequence_dropout<R: Rng + ?Sized>(
    patch: &MultiChannelPatch,
    policy: &DropoutPolicy,
    rng: &mut R,
) -> Result<(MultiChannelPatch, BTreeSet<String>)> {
    if policy.channels() != patch.len() {
        return Err(Error::InvalidSpec(format!(
            "dropout policy covers {} channels, patch has {}",
            policy.channels(),
            patch.len()
        )));
    }
    let keep = policy.draw(rng);
    let mut preserved = BTreeSet::new();
    let channels = patch
        .channels()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if keep.binary_search(&i).is_ok() {
                preserved.insert(c.name().to_string());
                c.clone()
            } else {
                zero_channel(c)
            }
        })
        .collect();
    Ok((MultiChannelVolume::new(channels)?, preserved))
}

/// Replace every channel not listed in `available` with zeros.
pub fn mask_missing(
    vol: &MultiChannelVolume,
    available: &BTreeSet<String>,
) -> Result<MultiChannelVolume> {
    if available.is_empty() {
        return Err(Error::InvalidChannels(
            "at least one channel must be available".into(),
        ));
    }
    if let Some(unknown) = available.iter().find(|n| vol.channel(n).is_none()) {
        return Err(Error::UnknownChannel(unknown.clone()));
    }
    let channels = vol
        .channels()
        .iter()
        .map(|c| {
            if available.contains(c.name()) {
                c.clone()
            } else {
                zero_channel(c)
            }
        })
        .collect();
    MultiChannelVolume::new(channels)
}

/// Available set from a full channel list minus the named missing ones.
pub fn available_from_missing(
    channels: &[String],
    missing: &[String],
) -> Result<BTreeSet<String>> {
    if let Some(unknown) = missing.iter().find(|m| !channels.contains(m)) {
        return Err(Error::UnknownChannel(unknown.clone()));
    }
    let available: BTreeSet<String> = channels
        .iter()
        .filter(|c| !missing.contains(c))
        .cloned()
        .collect();
    if available.is_empty() {
        return Err(Error::InvalidChannels(
            "every channel is marked missing".into(),
        ));
    }
    Ok(available)
}
