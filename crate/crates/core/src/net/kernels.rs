//! Forward and backward kernels for the U-Net building blocks.
//!
//! Every kernel parallelizes over output channels only, so each output value
//! is produced by one fixed sequential loop and results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::volume::Dims;

/// Shape of a same-padded convolution. Weights are laid out as
/// `[out, in, kz, ky, kx]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub out: usize,
    pub inp: usize,
    /// `[kx, ky, kz]`, each odd.
    pub kernel: [usize; 3],
}

impl ConvShape {
    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_len(&self) -> usize {
        self.out * self.inp * self.taps()
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let [kx, ky, kz] = self.kernel;
        vec![self.out, self.inp, kz, ky, kx]
    }

    /// Tap offsets `(dx, dy, dz)` in weight order.
    fn offsets(&self) -> Vec<[isize; 3]> {
        let [kx, ky, kz] = self.kernel;
        let (px, py, pz) = ((kx / 2) as isize, (ky / 2) as isize, (kz / 2) as isize);
        let mut v = Vec::with_capacity(self.taps());
        for z in 0..kz as isize {
            for y in 0..ky as isize {
                for x in 0..kx as isize {
                    v.push([x - px, y - py, z - pz]);
                }
            }
        }
        v
    }
}

/// Output coordinates `lo..hi` along an axis of length `n` whose source
/// `i + d` stays inside `0..n`.
#[inline]
fn valid(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(hi), hi)
}

/// Visits every aligned pair of rows `(out_row_start, src_row_start, len)` for
/// one tap offset.
#[inline]
fn for_each_row(dims: Dims, d: [isize; 3], mut f: impl FnMut(usize, usize, usize)) {
    let (x0, x1) = valid(dims.nx, d[0]);
    let (y0, y1) = valid(dims.ny, d[1]);
    let (z0, z1) = valid(dims.nz, d[2]);
    if x0 >= x1 {
        return;
    }
    let len = x1 - x0;
    let sx = (x0 as isize + d[0]) as usize;
    for z in z0..z1 {
        let sz = (z as isize + d[2]) as usize;
        for y in y0..y1 {
            let sy = (y as isize + d[1]) as usize;
            f(dims.index(x0, y, z), dims.index(sx, sy, sz), len);
        }
    }
}

pub fn conv3d_forward(x: &Tensor, w: &[f64], b: &[f64], shape: ConvShape) -> Tensor {
    debug_assert_eq!(x.channels(), shape.inp);
    debug_assert_eq!(w.len(), shape.weight_len());
    let dims = x.dims();
    let n = dims.len();
    let taps = shape.taps();
    let offsets = shape.offsets();
    let mut out = Tensor::zeros(shape.out, dims);
    out.data_mut()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(o, dst)| {
            dst.fill(b[o]);
            for i in 0..shape.inp {
                let src = x.channel(i);
                let wo = &w[(o * shape.inp + i) * taps..][..taps];
                for (&wv, &d) in wo.iter().zip(&offsets) {
                    for_each_row(dims, d, |od, os, len| {
                        for (a, s) in dst[od..od + len].iter_mut().zip(&src[os..os + len]) {
                            *a += wv * s;
                        }
                    });
                }
            }
        });
    out
}

/// Gradient with respect to the convolution input.
pub fn conv3d_backward_input(gout: &Tensor, w: &[f64], shape: ConvShape) -> Tensor {
    let dims = gout.dims();
    let n = dims.len();
    let taps = shape.taps();
    let offsets = shape.offsets();
    let mut gin = Tensor::zeros(shape.inp, dims);
    gin.data_mut()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, dst)| {
            for o in 0..shape.out {
                let g = gout.channel(o);
                let wo = &w[(o * shape.inp + i) * taps..][..taps];
                for (&wv, &d) in wo.iter().zip(&offsets) {
                    for_each_row(dims, d, |og, oi, len| {
                        for (a, s) in dst[oi..oi + len].iter_mut().zip(&g[og..og + len]) {
                            *a += wv * s;
                        }
                    });
                }
            }
        });
    gin
}

/// Gradients with respect to the weights and biases.
pub fn conv3d_backward_params(x: &Tensor, gout: &Tensor, shape: ConvShape) -> (Vec<f64>, Vec<f64>) {
    let dims = x.dims();
    let taps = shape.taps();
    let offsets = shape.offsets();
    let mut gw = vec![0.0; shape.weight_len()];
    gw.par_chunks_mut(shape.inp * taps)
        .enumerate()
        .for_each(|(o, gwo)| {
            let g = gout.channel(o);
            for i in 0..shape.inp {
                let src = x.channel(i);
                for (slot, &d) in gwo[i * taps..(i + 1) * taps].iter_mut().zip(&offsets) {
                    let mut acc = 0.0;
                    for_each_row(dims, d, |og, os, len| {
                        for (a, s) in g[og..og + len].iter().zip(&src[os..os + len]) {
                            acc += a * s;
                        }
                    });
                    *slot = acc;
                }
            }
        });
    let gb = (0..shape.out).map(|o| sum(gout.channel(o))).collect();
    (gw, gb)
}

/// Sum with a `+0.0` start so an all-zero input yields a positive zero.
#[inline]
pub(crate) fn sum(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, &b| a + b)
}

/// Per-channel PReLU.
pub fn prelu_forward(pre: &Tensor, slopes: &[f64]) -> Tensor {
    let mut out = pre.clone();
    let n = pre.voxels();
    out.data_mut()
        .par_chunks_mut(n)
        .zip(slopes.par_iter())
        .for_each(|(c, &a)| {
            for v in c.iter_mut() {
                if *v <= 0.0 {
                    *v *= a;
                }
            }
        });
    out
}

/// Returns the gradient with respect to the pre-activation and the slopes.
pub fn prelu_backward(pre: &Tensor, gout: &Tensor, slopes: &[f64]) -> (Tensor, Vec<f64>) {
    let n = pre.voxels();
    let mut gin = gout.clone();
    let mut gslope = vec![0.0; slopes.len()];
    gin.data_mut()
        .par_chunks_mut(n)
        .zip(gslope.par_iter_mut())
        .enumerate()
        .for_each(|(c, (g, ga))| {
            let p = pre.channel(c);
            let a = slopes[c];
            let mut acc = 0.0;
            for (gv, &pv) in g.iter_mut().zip(p) {
                if pv <= 0.0 {
                    acc += *gv * pv;
                    *gv *= a;
                }
            }
            *ga = acc;
        });
    (gin, gslope)
}

/// 2×2×2 max-pool with stride 2. Returns the pooled tensor and, per output
/// voxel, the flat within-channel index of the winning input voxel.
pub fn maxpool_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let d = x.dims();
    debug_assert!(d.nx % 2 == 0 && d.ny % 2 == 0 && d.nz % 2 == 0);
    let od = Dims {
        nx: d.nx / 2,
        ny: d.ny / 2,
        nz: d.nz / 2,
    };
    let n = od.len();
    let mut out = Tensor::zeros(x.channels(), od);
    let mut arg = vec![0usize; x.channels() * n];
    out.data_mut()
        .par_chunks_mut(n)
        .zip(arg.par_chunks_mut(n))
        .enumerate()
        .for_each(|(c, (dst, am))| {
            let src = x.channel(c);
            for z in 0..od.nz {
                for y in 0..od.ny {
                    for xx in 0..od.nx {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for (a, b, e) in CORNERS {
                            let i = d.index(2 * xx + a, 2 * y + b, 2 * z + e);
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                        let o = od.index(xx, y, z);
                        dst[o] = best;
                        am[o] = best_i;
                    }
                }
            }
        });
    (out, arg)
}

const CORNERS: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (1, 0, 0),
    (0, 1, 0),
    (1, 1, 0),
    (0, 0, 1),
    (1, 0, 1),
    (0, 1, 1),
    (1, 1, 1),
];

pub fn maxpool_backward(gout: &Tensor, arg: &[usize], input_dims: Dims) -> Tensor {
    let n = gout.voxels();
    let mut gin = Tensor::zeros(gout.channels(), input_dims);
    gin.data_mut()
        .par_chunks_mut(input_dims.len())
        .enumerate()
        .for_each(|(c, dst)| {
            let g = gout.channel(c);
            for (gv, &i) in g.iter().zip(&arg[c * n..(c + 1) * n]) {
                dst[i] += gv;
            }
        });
    gin
}

/// Shape of a 2×2×2 stride-2 transposed convolution. Weights are laid out as
/// `[in, out, 2, 2, 2]` (z, y, x).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpShape {
    pub inp: usize,
    pub out: usize,
}

impl UpShape {
    pub fn weight_len(&self) -> usize {
        self.inp * self.out * 8
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.inp, self.out, 2, 2, 2]
    }
}

fn doubled(d: Dims) -> Dims {
    Dims {
        nx: 2 * d.nx,
        ny: 2 * d.ny,
        nz: 2 * d.nz,
    }
}

pub fn upconv_forward(x: &Tensor, w: &[f64], b: &[f64], shape: UpShape) -> Tensor {
    let d = x.dims();
    let od = doubled(d);
    let mut out = Tensor::zeros(shape.out, od);
    out.data_mut()
        .par_chunks_mut(od.len())
        .enumerate()
        .for_each(|(o, dst)| {
            dst.fill(b[o]);
            for i in 0..shape.inp {
                let src = x.channel(i);
                let wk = &w[(i * shape.out + o) * 8..][..8];
                for (t, (a, bb, e)) in CORNERS.iter().enumerate() {
                    let wv = wk[t];
                    for z in 0..d.nz {
                        for y in 0..d.ny {
                            let row = od.index(*a, 2 * y + bb, 2 * z + e);
                            let srow = d.index(0, y, z);
                            for xx in 0..d.nx {
                                dst[row + 2 * xx] += wv * src[srow + xx];
                            }
                        }
                    }
                }
            }
        });
    out
}

pub fn upconv_backward_input(gout: &Tensor, w: &[f64], shape: UpShape) -> Tensor {
    let od = gout.dims();
    let d = Dims {
        nx: od.nx / 2,
        ny: od.ny / 2,
        nz: od.nz / 2,
    };
    let mut gin = Tensor::zeros(shape.inp, d);
    gin.data_mut()
        .par_chunks_mut(d.len())
        .enumerate()
        .for_each(|(i, dst)| {
            for o in 0..shape.out {
                let g = gout.channel(o);
                let wk = &w[(i * shape.out + o) * 8..][..8];
                for (t, (a, bb, e)) in CORNERS.iter().enumerate() {
                    let wv = wk[t];
                    for z in 0..d.nz {
                        for y in 0..d.ny {
                            let row = od.index(*a, 2 * y + bb, 2 * z + e);
                            let drow = d.index(0, y, z);
                            for xx in 0..d.nx {
                                dst[drow + xx] += wv * g[row + 2 * xx];
                            }
                        }
                    }
                }
            }
        });
    gin
}

pub fn upconv_backward_params(x: &Tensor, gout: &Tensor, shape: UpShape) -> (Vec<f64>, Vec<f64>) {
    let d = x.dims();
    let od = gout.dims();
    let mut gw = vec![0.0; shape.weight_len()];
    gw.par_chunks_mut(shape.out * 8)
        .enumerate()
        .for_each(|(i, gwi)| {
            let src = x.channel(i);
            for o in 0..shape.out {
                let g = gout.channel(o);
                for (t, (a, bb, e)) in CORNERS.iter().enumerate() {
                    let mut acc = 0.0;
                    for z in 0..d.nz {
                        for y in 0..d.ny {
                            let row = od.index(*a, 2 * y + bb, 2 * z + e);
                            let srow = d.index(0, y, z);
                            for xx in 0..d.nx {
                                acc += g[row + 2 * xx] * src[srow + xx];
                            }
                        }
                    }
                    gwi[o * 8 + t] = acc;
                }
            }
        });
    let gb = (0..shape.out).map(|o| sum(gout.channel(o))).collect();
    (gw, gb)
}

/// Voxelwise softmax across channels.
pub fn softmax(logits: &Tensor) -> Tensor {
    let c = logits.channels();
    let n = logits.voxels();
    let src = logits.data();
    let mut out = Tensor::zeros(c, logits.dims());
    let dst = out.data_mut();
    for v in 0..n {
        let max = (0..c).map(|k| src[k * n + v]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for k in 0..c {
            let e = (src[k * n + v] - max).exp();
            dst[k * n + v] = e;
            total += e;
        }
        for k in 0..c {
            dst[k * n + v] /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, c: usize, d: Dims) -> Tensor {
        Tensor::from_vec(c, d, (0..c * d.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct definition of a zero-padded cross-correlation.
    fn naive_conv(x: &Tensor, w: &[f64], b: &[f64], s: ConvShape) -> Tensor {
        let d = x.dims();
        let [kx, ky, kz] = s.kernel;
        let mut out = Tensor::zeros(s.out, d);
        for o in 0..s.out {
            for z in 0..d.nz as isize {
                for y in 0..d.ny as isize {
                    for xx in 0..d.nx as isize {
                        let mut acc = b[o];
                        for i in 0..s.inp {
                            for tz in 0..kz {
                                for ty in 0..ky {
                                    for tx in 0..kx {
                                        let sx = xx + tx as isize - (kx / 2) as isize;
                                        let sy = y + ty as isize - (ky / 2) as isize;
                                        let sz = z + tz as isize - (kz / 2) as isize;
                                        if sx < 0
                                            || sy < 0
                                            || sz < 0
                                            || sx >= d.nx as isize
                                            || sy >= d.ny as isize
                                            || sz >= d.nz as isize
                                        {
                                            continue;
                                        }
                                        let wi = (((o * s.inp + i) * kz + tz) * ky + ty) * kx + tx;
                                        acc += w[wi] * x.at(i, sx as usize, sy as usize, sz as usize);
                                    }
                                }
                            }
                        }
                        let idx = o * d.len() + d.index(xx as usize, y as usize, z as usize);
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kernel in [[3, 3, 3], [1, 1, 1], [3, 1, 5]] {
            let s = ConvShape { out: 3, inp: 2, kernel };
            let d = Dims::new(5, 4, 6).unwrap();
            let x = random(&mut rng, 2, d);
            let w: Vec<f64> = (0..s.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = vec![0.1, -0.2, 0.3];
            close(
                conv3d_forward(&x, &w, &b, s).data(),
                naive_conv(&x, &w, &b, s).data(),
                1e-12,
            );
        }
    }

    /// <gout, conv(x)> is bilinear, so the backward kernels must be its adjoints.
    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = ConvShape { out: 2, inp: 3, kernel: [3, 3, 3] };
        let d = Dims::new(4, 5, 3).unwrap();
        let x = random(&mut rng, 3, d);
        let g = random(&mut rng, 2, d);
        let w: Vec<f64> = (0..s.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zero_b = vec![0.0; 2];
        let y = conv3d_forward(&x, &w, &zero_b, s);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let gin = conv3d_backward_input(&g, &w, s);
        let rhs_x: f64 = gin.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let (gw, gb) = conv3d_backward_params(&x, &g, s);
        let rhs_w: f64 = gw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_x).abs() < 1e-10);
        assert!((lhs - rhs_w).abs() < 1e-10);
        for o in 0..2 {
            assert!((gb[o] - g.channel(o).iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn upconv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = UpShape { inp: 3, out: 2 };
        let d = Dims::new(2, 3, 2).unwrap();
        let x = random(&mut rng, 3, d);
        let g = random(&mut rng, 2, doubled(d));
        let w: Vec<f64> = (0..s.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = upconv_forward(&x, &w, &[0.0, 0.0], s);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let gin = upconv_backward_input(&g, &w, s);
        let (gw, _) = upconv_backward_params(&x, &g, s);
        let rhs_x: f64 = gin.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = gw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_x).abs() < 1e-10);
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn upconv_places_each_tap() {
        let s = UpShape { inp: 1, out: 1 };
        let d = Dims::cube(1).unwrap();
        let x = Tensor::from_vec(1, d, vec![2.0]);
        let w: Vec<f64> = (0..8).map(|t| t as f64).collect();
        let y = upconv_forward(&x, &w, &[1.0], s);
        // tap t = x + 2y + 4z
        for (t, (a, b, e)) in CORNERS.iter().enumerate() {
            assert_eq!(y.at(0, *a, *b, *e), 1.0 + 2.0 * t as f64);
        }
    }

    #[test]
    fn maxpool_picks_max_and_routes_gradient() {
        let d = Dims::new(4, 2, 2).unwrap();
        let data: Vec<f64> = (0..16).map(|i| ((i * 7) % 16) as f64).collect();
        let x = Tensor::from_vec(1, d, data.clone());
        let (p, arg) = maxpool_forward(&x);
        assert_eq!(p.dims(), Dims::new(2, 1, 1).unwrap());
        for (o, &i) in arg.iter().enumerate() {
            assert_eq!(p.data()[o], data[i]);
        }
        let g = Tensor::from_vec(1, p.dims(), vec![1.5, -2.0]);
        let gin = maxpool_backward(&g, &arg, d);
        assert_eq!(gin.data().iter().sum::<f64>(), -0.5);
        assert_eq!(gin.data()[arg[0]], 1.5);
    }

    #[test]
    fn prelu_forward_backward() {
        let d = Dims::new(3, 1, 1).unwrap();
        let pre = Tensor::from_vec(2, d, vec![-1.0, 0.5, 2.0, -3.0, -0.5, 1.0]);
        let slopes = [0.25, 0.1];
        let y = prelu_forward(&pre, &slopes);
        assert_eq!(y.data(), &[-0.25, 0.5, 2.0, 0.1 * -3.0, 0.1 * -0.5, 1.0]);
        let g = Tensor::from_vec(2, d, vec![1.0; 6]);
        let (gin, ga) = prelu_backward(&pre, &g, &slopes);
        assert_eq!(gin.data(), &[0.25, 1.0, 1.0, 0.1, 0.1, 1.0]);
        assert_eq!(ga, vec![-1.0, -3.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Dims::cube(3).unwrap();
        let l = random(&mut rng, 3, d).scaled(50.0);
        let p = softmax(&l);
        for v in 0..d.len() {
            let s: f64 = (0..3).map(|k| p.data()[k * d.len() + v]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
