//! Weighted cross-entropy, exact gradients, Adam and the training loop.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelPatch, LabelVolume, LABEL_DISAGREE, LABEL_LESION};
use crate::net::{
    backward, forward_cached, init_parameters, GradientStore, ParameterStore, ProbabilityPatch,
    Tensor, UNetConfig,
};
use crate::sampler::{extract_patch, CenterSampler, PatchSpec};
use crate::seqdrop::{apply_sequence_dropout, DropoutPolicy};
use crate::volume::MultiChannelVolume;

/// Floor applied to probabilities inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// `[background, lesion]`.
    pub class_weights: [f64; 2],
    pub ignore_value: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            class_weights: [1.0, 3.0],
            ignore_value: LABEL_DISAGREE,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "class weights must be positive: {:?}",
                self.class_weights
            )));
        }
        Ok(())
    }
}

/// Mean weighted cross-entropy over voxels whose label is not the ignore
/// value, with its gradient with respect to the pre-softmax logits.
pub fn weighted_ce_loss(
    probs: &ProbabilityPatch,
    labels: &LabelPatch,
    cfg: &LossConfig,
) -> Result<(f64, Tensor)> {
    if probs.dims() != labels.dims() || probs.channels() != 2 {
        return Err(Error::ShapeMismatch {
            name: "probabilities".into(),
            expected: vec![2, labels.dims().len()],
            found: vec![probs.channels(), probs.voxels()],
        });
    }
    let n = probs.voxels();
    let contributing = labels.values().iter().filter(|&&v| v != cfg.ignore_value).count();
    let mut grad = Tensor::zeros(2, probs.dims());
    if contributing == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / contributing as f64;
    let mut loss = 0.0;
    let (p0, p1) = (probs.channel(0), probs.channel(1));
    let g = grad.data_mut();
    for (v, &label) in labels.values().iter().enumerate() {
        if label == cfg.ignore_value {
            continue;
        }
        let class = usize::from(label == LABEL_LESION);
        let w = cfg.class_weights[class];
        let p = [p0[v], p1[v]];
        loss += w * -p[class].max(PROB_FLOOR).ln();
        for (k, &pk) in p.iter().enumerate() {
            let target = if k == class { 1.0 } else { 0.0 };
            g[k * n + v] = w * scale * (pk - target);
        }
    }
    Ok((loss * scale, grad))
}

/// One training example: network input and aligned labels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Tensor,
    pub labels: LabelPatch,
}

/// Mean batch loss and its gradient with respect to every parameter.
pub fn compute_gradients(
    params: &ParameterStore,
    cfg: &UNetConfig,
    batch: &[Sample],
    loss_cfg: &LossConfig,
) -> Result<(f64, GradientStore)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for s in batch {
        let cache = forward_cached(params, cfg, &s.input)?;
        let (loss, g) = weighted_ce_loss(&cache.probs, &s.labels, loss_cfg)?;
        total += loss;
        backward(params, cfg, &cache, &g, &mut grads);
    }
    let inv = 1.0 / batch.len() as f64;
    if batch.len() > 1 {
        for (_, p) in grads.iter_mut() {
            p.data.iter_mut().for_each(|v| *v *= inv);
        }
    }
    grads.check_finite()?;
    Ok((total * inv, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return Err(Error::InvalidConfig(format!("invalid Adam hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParameterStore,
    pub v: ParameterStore,
}

impl AdamState {
    pub fn new(params: &ParameterStore) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based), in place.
pub fn adam_step(
    params: &mut ParameterStore,
    grads: &GradientStore,
    state: &mut AdamState,
    t: u64,
    h: &AdamHyper,
) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidConfig("Adam step index starts at 1".into()));
    }
    params.check_layout(grads)?;
    params.check_layout(&state.m)?;
    params.check_layout(&state.v)?;
    let c1 = 1.0 - h.beta1.powf(t as f64);
    let c2 = 1.0 - h.beta2.powf(t as f64);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        for (((w, &g), m), v) in p
            .data
            .iter_mut()
            .zip(&g.data)
            .zip(m.data.iter_mut())
            .zip(v.data.iter_mut())
        {
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sampled patches per epoch, each one optimizer step.
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub patch: PatchSpec,
    pub dropout: DropoutPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            steps_per_epoch: 100,
            batch_size: 1,
            patch: PatchSpec::default(),
            dropout: DropoutPolicy::uniform(4).expect("four channels"),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, net: &UNetConfig) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs, steps_per_epoch and batch_size must be positive".into(),
            ));
        }
        self.patch.validate()?;
        net.check_patch(self.patch.size)?;
        if self.dropout.channels() != net.in_channels {
            return Err(Error::InvalidConfig(format!(
                "dropout policy covers {} channels, network takes {}",
                self.dropout.channels(),
                net.in_channels
            )));
        }
        Ok(())
    }
}

/// One training subject: normalized channels and merged labels.
#[derive(Debug, Clone)]
pub struct Subject {
    pub input: MultiChannelVolume,
    pub labels: LabelVolume,
}

/// Which channels survived dropout for one training sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub step: u64,
    pub subject: usize,
    pub center: [usize; 3],
    pub preserved: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub samples: Vec<SampleRecord>,
}

/// Per-step random stream, a pure function of `(seed, step)`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

/// Draw one batch for `step`: subject, lesion-biased patch, sequence dropout.
pub fn prepare_batch(
    subjects: &[Subject],
    samplers: &[CenterSampler],
    cfg: &TrainConfig,
    step: u64,
) -> Result<(Vec<Sample>, Vec<SampleRecord>)> {
    let mut rng = step_rng(cfg.seed, step);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut records = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let s = rng.random_range(0..subjects.len());
        let center = samplers[s].draw(&mut rng).center;
        let (patch, labels) = extract_patch(&subjects[s].input, &subjects[s].labels, center, &cfg.patch)?;
        let (patch, preserved) = apply_sequence_dropout(&patch, &cfg.dropout, &mut rng)?;
        batch.push(Sample {
            input: Tensor::from_stack(&patch),
            labels,
        });
        records.push(SampleRecord {
            step,
            subject: s,
            center,
            preserved,
        });
    }
    Ok((batch, records))
}

/// Full training run. Reproducible from `(subjects, configs)`; the seed lives
/// in `train_cfg` and drives initialization and every sampling decision.
pub fn train(
    subjects: &[Subject],
    net_cfg: &UNetConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    adam: &AdamHyper,
) -> Result<(ParameterStore, TrainHistory)> {
    if subjects.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    net_cfg.validate()?;
    train_cfg.validate(net_cfg)?;
    loss_cfg.validate()?;
    adam.validate()?;
    for s in subjects {
        if s.input.len() != net_cfg.in_channels {
            return Err(Error::InvalidConfig(format!(
                "subject has {} channels, network takes {}",
                s.input.len(),
                net_cfg.in_channels
            )));
        }
    }
    let samplers = subjects
        .iter()
        .map(|s| CenterSampler::new(&s.labels, train_cfg.patch))
        .collect::<Result<Vec<_>>>()?;

    let mut params = init_parameters(net_cfg, &mut ChaCha8Rng::seed_from_u64(train_cfg.seed))?;
    let mut state = AdamState::new(&params);
    let mut history = TrainHistory {
        epoch_losses: Vec::with_capacity(train_cfg.epochs),
        step_losses: Vec::new(),
        samples: Vec::new(),
    };
    let mut step = 0u64;
    for epoch in 0..train_cfg.epochs {
        let mut epoch_total = 0.0;
        for _ in 0..train_cfg.steps_per_epoch {
            let (batch, records) = prepare_batch(subjects, &samplers, train_cfg, step)?;
            let (loss, grads) = compute_gradients(&params, net_cfg, &batch, loss_cfg)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, step {step}")));
            }
            step += 1;
            adam_step(&mut params, &grads, &mut state, step, adam)?;
            epoch_total += loss;
            history.step_losses.push(loss);
            history.samples.extend(records);
        }
        let mean = epoch_total / train_cfg.steps_per_epoch as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        history.epoch_losses.push(mean);
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_parameters;
    use crate::volume::Dims;

    fn one_voxel(p_lesion: f64, label: f32) -> (f64, Tensor) {
        let d = Dims::cube(1).unwrap();
        let probs = Tensor::from_vec(2, d, vec![1.0 - p_lesion, p_lesion]);
        let labels = LabelVolume::new(d, vec![label]).unwrap();
        weighted_ce_loss(&probs, &labels, &LossConfig::default()).unwrap()
    }

    #[test]
    fn single_voxel_losses() {
        let (lesion, g) = one_voxel(0.5, 1.0);
        assert!((lesion - 3.0 * 2f64.ln()).abs() < 1e-15);
        assert_eq!(g.data(), &[1.5, -1.5]);
        let (background, _) = one_voxel(0.5, 0.0);
        assert!((background - 2f64.ln()).abs() < 1e-15);
        assert_eq!(lesion / background, 3.0);
    }

    #[test]
    fn ignored_voxels_contribute_nothing() {
        let (loss, g) = one_voxel(0.3, 0.5);
        assert_eq!(loss, 0.0);
        assert!(g.data().iter().all(|v| v.to_bits() == 0));

        let d = Dims::new(3, 1, 1).unwrap();
        let probs = Tensor::from_vec(2, d, vec![0.9, 0.2, 0.6, 0.1, 0.8, 0.4]);
        let labels = LabelVolume::new(d, vec![0.0, 0.5, 1.0]).unwrap();
        let (loss, g) = weighted_ce_loss(&probs, &labels, &LossConfig::default()).unwrap();
        let expected = (-(0.9f64).ln() + 3.0 * -(0.4f64).ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-15);
        assert_eq!(g.channel(0)[1].to_bits(), 0);
        assert_eq!(g.channel(1)[1].to_bits(), 0);
    }

    #[test]
    fn log_floor_keeps_loss_finite() {
        let (loss, _) = one_voxel(0.0, 1.0);
        assert!((loss - 3.0 * -(PROB_FLOOR.ln())).abs() < 1e-9);
    }

    fn scalar_store(v: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", vec![1], vec![v]).unwrap();
        s
    }

    #[test]
    fn adam_zero_gradient_fixed_point() {
        let cfg = UNetConfig { levels: 2, root_features: 2, in_channels: 2, ..Default::default() };
        let mut params = init_parameters(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = params.clone();
        let zeros = params.zeros_like();
        let mut state = AdamState::new(&params);
        for t in 1..=5 {
            adam_step(&mut params, &zeros, &mut state, t, &AdamHyper::default()).unwrap();
        }
        for ((_, a), (_, b)) in params.iter().zip(before.iter()) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(state.m, zeros);
        assert_eq!(state.v, zeros);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let h = AdamHyper::default();
        for g in [1e-3, 0.5, -2.0, 40.0] {
            let mut p = scalar_store(1.0);
            let mut state = AdamState::new(&p);
            adam_step(&mut p, &scalar_store(g), &mut state, 1, &h).unwrap();
            let delta = (p.get("w").unwrap().data[0] - 1.0).abs();
            assert!(delta >= 0.9 * h.learning_rate && delta <= h.learning_rate, "g={g}: {delta}");
            assert_eq!((p.get("w").unwrap().data[0] - 1.0).signum(), -g.signum());
        }
    }

    #[test]
    fn adam_first_step_is_scale_invariant() {
        let h = AdamHyper::default();
        let step = |g: f64| {
            let mut p = scalar_store(0.0);
            let mut state = AdamState::new(&p);
            adam_step(&mut p, &scalar_store(g), &mut state, 1, &h).unwrap();
            p.get("w").unwrap().data[0]
        };
        for g in [0.01, 0.3, 7.0] {
            let (a, b) = (step(g), step(10.0 * g));
            assert!(((a - b) / a).abs() < 0.01);
        }
    }

    #[test]
    fn adam_rejects_bad_input() {
        let mut p = scalar_store(0.0);
        let mut state = AdamState::new(&p);
        let h = AdamHyper::default();
        assert!(adam_step(&mut p, &scalar_store(1.0), &mut state, 0, &h).is_err());
        let mut other = ParameterStore::new();
        other.insert("w", vec![2], vec![0.0, 0.0]).unwrap();
        assert!(adam_step(&mut p, &other, &mut state, 1, &h).is_err());
    }
}
