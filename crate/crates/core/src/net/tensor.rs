use crate::volume::{Dims, MultiChannelVolume};

/// Dense `channels × nz × ny × nx` array of `f64`, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    dims: Dims,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * dims.len()],
        }
    }

    pub fn from_vec(channels: usize, dims: Dims, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * dims.len(), "tensor data length");
        Self {
            channels,
            dims,
            data,
        }
    }

    pub fn from_stack(stack: &MultiChannelVolume) -> Self {
        let dims = stack.dims();
        let data = stack
            .channels()
            .iter()
            .flat_map(|c| c.voxels().iter().map(|&v| v as f64))
            .collect();
        Self {
            channels: stack.len(),
            dims,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.dims.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.data[c * self.dims.len() + self.dims.index(x, y, z)]
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|v| v * a).collect(),
        }
    }

    /// Channel-wise concatenation `[a; b]`.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.dims, b.dims, "concat spatial dims");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor {
            channels: a.channels + b.channels,
            dims: a.dims,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`]: first `split` channels, then the rest.
    pub fn split(self, split: usize) -> (Tensor, Tensor) {
        let n = self.dims.len();
        let mut data = self.data;
        let rest = data.split_off(split * n);
        (
            Tensor {
                channels: split,
                dims: self.dims,
                data,
            },
            Tensor {
                channels: self.channels - split,
                dims: self.dims,
                data: rest,
            },
        )
    }
}
