//! Configurable 3D U-Net.
//!
//! Encoder level `l` runs `convs_per_level` blocks of
//! `[3³ same-padded conv → bias → PReLU]` at width `root_features · 2^l`, with
//! a 2×2×2 max-pool between levels. The decoder upsamples with a 2×2×2
//! stride-2 transposed convolution, concatenates `[upsampled, skip]` and runs
//! the same conv blocks. A 1×1×1 projection and a voxelwise softmax produce
//! class probabilities.

pub mod kernels;
mod params;
mod tensor;

use serde::{Deserialize, Serialize};

pub use params::{
    init_parameters, Checkpoint, GradientStore, Param, ParamKind, ParamSpec, ParameterStore,
    UNetConfig, CHECKPOINT_FILE,
};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::labels::BinaryMask;
use crate::volume::{Dims, MultiChannelVolume};
use kernels::*;
use params::{dec_name, enc_name, up_name};

/// Per-voxel class probabilities; channel `k` holds class `k`.
pub type ProbabilityPatch = Tensor;

struct BlockCache {
    input: Tensor,
    pre: Tensor,
}

struct PoolCache {
    input_dims: Dims,
    argmax: Vec<usize>,
}

/// Intermediate values retained by [`forward_cached`] for backpropagation.
pub struct ForwardCache {
    enc: Vec<Vec<BlockCache>>,
    pools: Vec<PoolCache>,
    /// Indexed by decoder level; `up_inputs[l]` is the tensor upsampled into level `l`.
    up_inputs: Vec<Option<Tensor>>,
    dec: Vec<Vec<BlockCache>>,
    head_input: Tensor,
    pub logits: Tensor,
    pub probs: ProbabilityPatch,
}

fn check_input(params: &ParameterStore, cfg: &UNetConfig, x: &Tensor) -> Result<()> {
    cfg.validate()?;
    params.check_config(cfg)?;
    if x.channels() != cfg.in_channels {
        return Err(Error::InvalidConfig(format!(
            "input has {} channels, network expects {}",
            x.channels(),
            cfg.in_channels
        )));
    }
    cfg.check_patch(x.dims())
}

fn block(
    params: &ParameterStore,
    prefix: &str,
    shape: ConvShape,
    input: Tensor,
    cache: Option<&mut Vec<BlockCache>>,
) -> Tensor {
    let w = params.data(&format!("{prefix}.weight"));
    let b = params.data(&format!("{prefix}.bias"));
    let a = params.data(&format!("{prefix}.prelu"));
    let pre = conv3d_forward(&input, w, b, shape);
    let out = prelu_forward(&pre, a);
    if let Some(c) = cache {
        c.push(BlockCache { input, pre });
    }
    out
}

fn run(
    params: &ParameterStore,
    cfg: &UNetConfig,
    x: &Tensor,
    keep: bool,
) -> Result<(Tensor, Option<ForwardCache>)> {
    check_input(params, cfg, x)?;
    let levels = cfg.levels;
    let mut enc: Vec<Vec<BlockCache>> = (0..levels).map(|_| Vec::new()).collect();
    let mut dec: Vec<Vec<BlockCache>> = (0..levels).map(|_| Vec::new()).collect();
    let mut pools = Vec::new();
    let mut up_inputs: Vec<Option<Tensor>> = (0..levels).map(|_| None).collect();
    let mut skips: Vec<Tensor> = Vec::with_capacity(levels);

    let mut h = x.clone();
    for l in 0..levels {
        if l > 0 {
            let (p, argmax) = maxpool_forward(&skips[l - 1]);
            if keep {
                pools.push(PoolCache {
                    input_dims: skips[l - 1].dims(),
                    argmax,
                });
            }
            h = p;
        }
        for j in 0..cfg.convs_per_level {
            h = block(params, &enc_name(l, j), cfg.enc_conv(l, j), h, keep.then_some(&mut enc[l]));
        }
        if l + 1 < levels {
            skips.push(h.clone());
        }
    }
    for l in (0..levels - 1).rev() {
        let name = up_name(l);
        let u = upconv_forward(
            &h,
            params.data(&format!("{name}.weight")),
            params.data(&format!("{name}.bias")),
            cfg.up(l),
        );
        if keep {
            up_inputs[l] = Some(h);
        }
        h = Tensor::concat(&u, &skips[l]);
        for j in 0..cfg.convs_per_level {
            h = block(params, &dec_name(l, j), cfg.dec_conv(l, j), h, keep.then_some(&mut dec[l]));
        }
    }
    let logits = conv3d_forward(&h, params.data("head.weight"), params.data("head.bias"), cfg.head());
    let probs = softmax(&logits);
    let cache = keep.then(|| ForwardCache {
        enc,
        pools,
        up_inputs,
        dec,
        head_input: h,
        logits: logits.clone(),
        probs: probs.clone(),
    });
    Ok((probs, cache))
}

/// Class probabilities for one patch.
pub fn forward(params: &ParameterStore, cfg: &UNetConfig, x: &Tensor) -> Result<ProbabilityPatch> {
    Ok(run(params, cfg, x, false)?.0)
}

/// Pre-softmax scores for one patch.
pub fn forward_logits(params: &ParameterStore, cfg: &UNetConfig, x: &Tensor) -> Result<Tensor> {
    Ok(run(params, cfg, x, true)?.1.expect("cache kept").logits)
}

/// Forward pass that keeps every intermediate needed by [`backward`].
pub fn forward_cached(params: &ParameterStore, cfg: &UNetConfig, x: &Tensor) -> Result<ForwardCache> {
    Ok(run(params, cfg, x, true)?.1.expect("cache kept"))
}

fn block_backward(
    params: &ParameterStore,
    grads: &mut GradientStore,
    prefix: &str,
    shape: ConvShape,
    cache: &BlockCache,
    gout: Tensor,
    need_input: bool,
) -> Option<Tensor> {
    let a = params.data(&format!("{prefix}.prelu"));
    let (gpre, ga) = prelu_backward(&cache.pre, &gout, a);
    let (gw, gb) = conv3d_backward_params(&cache.input, &gpre, shape);
    accumulate(grads.data_mut(&format!("{prefix}.weight")), &gw);
    accumulate(grads.data_mut(&format!("{prefix}.bias")), &gb);
    accumulate(grads.data_mut(&format!("{prefix}.prelu")), &ga);
    need_input.then(|| conv3d_backward_input(&gpre, params.data(&format!("{prefix}.weight")), shape))
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Backpropagate `grad_logits` through the cached pass, adding parameter
/// gradients into `grads`.
pub fn backward(
    params: &ParameterStore,
    cfg: &UNetConfig,
    cache: &ForwardCache,
    grad_logits: &Tensor,
    grads: &mut GradientStore,
) {
    let levels = cfg.levels;
    let head = cfg.head();
    let (gw, gb) = conv3d_backward_params(&cache.head_input, grad_logits, head);
    accumulate(grads.data_mut("head.weight"), &gw);
    accumulate(grads.data_mut("head.bias"), &gb);
    let mut g = conv3d_backward_input(grad_logits, params.data("head.weight"), head);

    let mut skip_grads: Vec<Option<Tensor>> = (0..levels).map(|_| None).collect();
    for l in 0..levels - 1 {
        for j in (0..cfg.convs_per_level).rev() {
            g = block_backward(params, grads, &dec_name(l, j), cfg.dec_conv(l, j), &cache.dec[l][j], g, true)
                .expect("input gradient requested");
        }
        let up = cfg.up(l);
        let (gu, gskip) = g.split(up.out);
        skip_grads[l] = Some(gskip);
        let name = up_name(l);
        let up_in = cache.up_inputs[l].as_ref().expect("cached upsampling input");
        let (gw, gb) = upconv_backward_params(up_in, &gu, up);
        accumulate(grads.data_mut(&format!("{name}.weight")), &gw);
        accumulate(grads.data_mut(&format!("{name}.bias")), &gb);
        g = upconv_backward_input(&gu, params.data(&format!("{name}.weight")), up);
    }

    for l in (0..levels).rev() {
        if let Some(s) = skip_grads[l].take() {
            accumulate(g.data_mut(), s.data());
        }
        for j in (0..cfg.convs_per_level).rev() {
            let need = !(l == 0 && j == 0);
            match block_backward(params, grads, &enc_name(l, j), cfg.enc_conv(l, j), &cache.enc[l][j], g, need) {
                Some(gin) => g = gin,
                None => return,
            }
        }
        if l > 0 {
            let p = &cache.pools[l - 1];
            g = maxpool_backward(&g, &p.argmax, p.input_dims);
        }
    }
}

/// Sliding-window geometry for full-volume inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub size: Dims,
    pub stride: Dims,
}

impl WindowSpec {
    pub fn validate(&self, cfg: &UNetConfig) -> Result<()> {
        cfg.check_patch(self.size)?;
        let s = self.size.as_array();
        let t = self.stride.as_array();
        if (0..3).any(|a| t[a] > s[a]) {
            return Err(Error::InvalidSpec(format!(
                "window stride {t:?} exceeds window size {s:?}"
            )));
        }
        Ok(())
    }
}

/// Window start offsets along one axis; the last window is clamped to the end.
pub fn window_starts(n: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    while s + size < n {
        starts.push(s);
        s += stride;
    }
    starts.push(n - size);
    starts
}

/// Averaged class probabilities over overlapping windows.
pub fn predict_probabilities(
    params: &ParameterStore,
    cfg: &UNetConfig,
    vol: &MultiChannelVolume,
    window: &WindowSpec,
) -> Result<Tensor> {
    window.validate(cfg)?;
    let dims = vol.dims();
    if !dims.contains(&window.size) {
        return Err(Error::InvalidSpec(format!(
            "volume {:?} is smaller than window {:?}",
            dims.as_array(),
            window.size.as_array()
        )));
    }
    let x = Tensor::from_stack(vol);
    let w = window.size;
    let n = dims.len();
    let mut acc = Tensor::zeros(cfg.classes, dims);
    let mut count = vec![0u32; n];
    for &oz in &window_starts(dims.nz, w.nz, window.stride.nz) {
        for &oy in &window_starts(dims.ny, w.ny, window.stride.ny) {
            for &ox in &window_starts(dims.nx, w.nx, window.stride.nx) {
                let mut patch = Tensor::zeros(x.channels(), w);
                for c in 0..x.channels() {
                    let src = x.channel(c);
                    let dst = patch.channel_mut(c);
                    for z in 0..w.nz {
                        for y in 0..w.ny {
                            let s = dims.index(ox, oy + y, oz + z);
                            let d = w.index(0, y, z);
                            dst[d..d + w.nx].copy_from_slice(&src[s..s + w.nx]);
                        }
                    }
                }
                let probs = forward(params, cfg, &patch)?;
                for z in 0..w.nz {
                    for y in 0..w.ny {
                        for xx in 0..w.nx {
                            let t = dims.index(ox + xx, oy + y, oz + z);
                            let s = w.index(xx, y, z);
                            count[t] += 1;
                            for k in 0..cfg.classes {
                                acc.channel_mut(k)[t] += probs.channel(k)[s];
                            }
                        }
                    }
                }
            }
        }
    }
    for k in 0..cfg.classes {
        for (v, &c) in acc.channel_mut(k).iter_mut().zip(&count) {
            *v /= c as f64;
        }
    }
    Ok(acc)
}

/// Per-voxel argmax of class probabilities, ties going to the lower class.
/// Class 1 is the lesion class; any other winner is background.
pub fn argmax_mask(probs: &Tensor) -> BinaryMask {
    let n = probs.voxels();
    let values = (0..n)
        .map(|v| {
            let mut best = 0;
            for k in 1..probs.channels() {
                if probs.channel(k)[v] > probs.channel(best)[v] {
                    best = k;
                }
            }
            (best == 1) as u8
        })
        .collect();
    BinaryMask::new(probs.dims(), values).expect("argmax mask matches dims")
}

pub fn predict_volume(
    params: &ParameterStore,
    cfg: &UNetConfig,
    vol: &MultiChannelVolume,
    window: &WindowSpec,
) -> Result<BinaryMask> {
    Ok(argmax_mask(&predict_probabilities(params, cfg, vol, window)?))
}
