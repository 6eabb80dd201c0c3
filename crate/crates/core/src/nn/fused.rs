//! Fused training-mode batch normalization (+ optional ReLU) and 2×2 max pooling.
//!
//! The composite candle versions allocate a tensor per elementwise step; at
//! desk-scale channel counts that overhead dwarfs the arithmetic.

use std::sync::{Arc, Mutex};

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Result, Shape, Tensor};

fn contiguous<'a>(s: &'a CpuStorage, l: &Layout, op: &str) -> Result<&'a [f32]> {
    let data = s.as_slice::<f32>()?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op} expects contiguous f32 tensors"),
    }
}

fn nchw(l: &Layout, op: &str) -> Result<(usize, usize, usize)> {
    match l.dims() {
        &[b, c, h, w] => Ok((b, c, h * w)),
        d => candle_core::bail!("{op} expects a rank-4 tensor, got {d:?}"),
    }
}

/// Per-channel mean and biased variance of a contiguous `B×C×HW` buffer.
fn channel_stats(x: &[f32], b: usize, c: usize, hw: usize) -> (Vec<f32>, Vec<f32>) {
    let n = (b * hw) as f64;
    let mut mean = vec![0f32; c];
    let mut var = vec![0f32; c];
    for ch in 0..c {
        let mut s = 0f64;
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            s += x[off..off + hw].iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = s / n;
        let mut ss = 0f64;
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            ss += x[off..off + hw].iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
        }
        mean[ch] = m as f32;
        var[ch] = (ss / n) as f32;
    }
    (mean, var)
}

/// Batch statistics observed by the last forward call: `(mean, biased variance, count)`.
pub(crate) type SharedStats = Arc<Mutex<Option<(Vec<f32>, Vec<f32>, usize)>>>;

pub(crate) struct BatchNormTrain {
    pub eps: f64,
    pub relu: bool,
    pub stats: SharedStats,
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (b, c, hw) = nchw(l1, self.name())?;
        let x = contiguous(s1, l1, self.name())?;
        let gamma = contiguous(s2, l2, self.name())?;
        let beta = contiguous(s3, l3, self.name())?;
        if gamma.len() != c || beta.len() != c {
            candle_core::bail!("batch-norm expects {c} affine parameters, got {} and {}", gamma.len(), beta.len());
        }
        let (mean, var) = channel_stats(x, b, c, hw);
        let mut y = vec![0f32; x.len()];
        for ch in 0..c {
            let scale = gamma[ch] / (var[ch] + self.eps as f32).sqrt();
            let shift = beta[ch] - mean[ch] * scale;
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                let (src, dst) = (&x[off..off + hw], &mut y[off..off + hw]);
                if self.relu {
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = (v * scale + shift).max(0.0);
                    }
                } else {
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = v * scale + shift;
                    }
                }
            }
        }
        *self.stats.lock().expect("stats lock") = Some((mean, var, b * hw));
        Ok((CpuStorage::F32(y), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let c = gamma.dim(0)?;
        let op = BatchNormBackward { eps: self.eps, relu: self.relu, gamma: gamma.to_vec1()? };
        let packed = x.apply_op3_no_bwd(res, &grad.contiguous()?, &op)?;
        let n = x.elem_count();
        let dx = packed.narrow(0, 0, n)?.reshape(x.shape())?;
        let dgamma = packed.narrow(0, n, c)?;
        let dbeta = packed.narrow(0, n + c, c)?;
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}

/// Inputs `(x, y, dL/dy)`; output is `dx` followed by `dgamma` and `dbeta`, flattened.
struct BatchNormBackward {
    eps: f64,
    relu: bool,
    gamma: Vec<f32>,
}

impl CustomOp3 for BatchNormBackward {
    fn name(&self) -> &'static str {
        "batch-norm-train-bwd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (b, c, hw) = nchw(l1, self.name())?;
        let x = contiguous(s1, l1, self.name())?;
        let y = contiguous(s2, l2, self.name())?;
        let g = contiguous(s3, l3, self.name())?;
        let (mean, var) = channel_stats(x, b, c, hw);
        let n = b * hw;
        let total = x.len();
        let mut out = vec![0f32; total + 2 * c];
        let mut gm = vec![0f32; hw];
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + self.eps as f32).sqrt();
            let m = mean[ch];
            let (mut sum_g, mut sum_gx) = (0f64, 0f64);
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                for i in 0..hw {
                    let gi = if self.relu && y[off + i] <= 0.0 { 0.0 } else { g[off + i] };
                    sum_g += gi as f64;
                    sum_gx += (gi * (x[off + i] - m) * inv) as f64;
                }
            }
            let mean_g = (sum_g / n as f64) as f32;
            let mean_gx = (sum_gx / n as f64) as f32;
            let k = self.gamma[ch] * inv;
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                for i in 0..hw {
                    gm[i] = if self.relu && y[off + i] <= 0.0 { 0.0 } else { g[off + i] };
                }
                for i in 0..hw {
                    let xhat = (x[off + i] - m) * inv;
                    out[off + i] = k * (gm[i] - mean_g - xhat * mean_gx);
                }
            }
            out[total + ch] = sum_gx as f32;
            out[total + c + ch] = sum_g as f32;
        }
        Ok((CpuStorage::F32(out), Shape::from(total + 2 * c)))
    }
}

/// Training-mode batch norm with batch statistics; returns the output and the
/// statistics used, for running-estimate updates.
pub(crate) fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    relu: bool,
) -> Result<(Tensor, (Vec<f32>, Vec<f32>, usize))> {
    let stats = SharedStats::default();
    let op = BatchNormTrain { eps, relu, stats: stats.clone() };
    let y = x.contiguous()?.apply_op3(gamma, beta, op)?;
    let s = stats.lock().expect("stats lock").take().expect("forward records statistics");
    Ok((y, s))
}

/// Max pooling over `k×k` windows with implicit negative-infinity padding.
/// The gradient goes to the first maximal element of each window.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MaxPool {
    k: usize,
    stride: usize,
    pad: usize,
}

struct PoolDims {
    planes: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl MaxPool {
    fn dims(&self, l: &Layout) -> Result<PoolDims> {
        let &[b, c, h, w] = l.dims() else {
            candle_core::bail!("max pool expects a rank-4 tensor, got {:?}", l.dims())
        };
        if h + 2 * self.pad < self.k || w + 2 * self.pad < self.k {
            candle_core::bail!("max pool window {} larger than padded input {h}x{w}", self.k);
        }
        let ho = (h + 2 * self.pad - self.k) / self.stride + 1;
        let wo = (w + 2 * self.pad - self.k) / self.stride + 1;
        Ok(PoolDims { planes: b * c, h, w, ho, wo })
    }

    /// Flat index within the plane of the window maximum at output `(r, c)`.
    #[inline]
    fn argmax(&self, plane: &[f32], d: &PoolDims, r: usize, c: usize) -> usize {
        let y0 = (r * self.stride) as isize - self.pad as isize;
        let x0 = (c * self.stride) as isize - self.pad as isize;
        let mut best = usize::MAX;
        let mut best_v = f32::NEG_INFINITY;
        for dy in 0..self.k as isize {
            let y = y0 + dy;
            if y < 0 || y >= d.h as isize {
                continue;
            }
            for dx in 0..self.k as isize {
                let x = x0 + dx;
                if x < 0 || x >= d.w as isize {
                    continue;
                }
                let idx = y as usize * d.w + x as usize;
                if best == usize::MAX || plane[idx] > best_v {
                    best = idx;
                    best_v = plane[idx];
                }
            }
        }
        best
    }
}

impl CustomOp1 for MaxPool {
    fn name(&self) -> &'static str {
        "max-pool"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let d = self.dims(l)?;
        let x = contiguous(s, l, self.name())?;
        let mut y = vec![0f32; d.planes * d.ho * d.wo];
        for p in 0..d.planes {
            let plane = &x[p * d.h * d.w..(p + 1) * d.h * d.w];
            for r in 0..d.ho {
                for c in 0..d.wo {
                    y[(p * d.ho + r) * d.wo + c] = plane[self.argmax(plane, &d, r, c)];
                }
            }
        }
        let dims = l.dims();
        Ok((CpuStorage::F32(y), Shape::from((dims[0], dims[1], d.ho, d.wo))))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(x.apply_op2_no_bwd(&grad.contiguous()?, &MaxPoolBackward(*self))?))
    }
}

struct MaxPoolBackward(MaxPool);

impl CustomOp2 for MaxPoolBackward {
    fn name(&self) -> &'static str {
        "max-pool-bwd"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let d = self.0.dims(l1)?;
        let x = contiguous(s1, l1, self.name())?;
        let g = contiguous(s2, l2, self.name())?;
        let mut dx = vec![0f32; x.len()];
        let n = d.h * d.w;
        for p in 0..d.planes {
            let plane = &x[p * n..(p + 1) * n];
            for r in 0..d.ho {
                for c in 0..d.wo {
                    let idx = self.0.argmax(plane, &d, r, c);
                    dx[p * n + idx] += g[(p * d.ho + r) * d.wo + c];
                }
            }
        }
        Ok((CpuStorage::F32(dx), l1.shape().clone()))
    }
}

/// 2×2 max pooling with stride 2.
pub fn max_pool_2x2(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(MaxPool { k: 2, stride: 2, pad: 0 })
}

/// 3×3 max pooling with stride 2 and one pixel of padding.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(MaxPool { k: 3, stride: 2, pad: 1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn close(a: &Tensor, b: &Tensor, tol: f32) {
        let a: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    fn reference_bn(x: &Tensor, gamma: &Tensor, beta: &Tensor, relu: bool) -> Tensor {
        let mean = x.mean_keepdim(0).unwrap().mean_keepdim(2).unwrap().mean_keepdim(3).unwrap();
        let xc = x.broadcast_sub(&mean).unwrap();
        let var = xc.sqr().unwrap().mean_keepdim(0).unwrap().mean_keepdim(2).unwrap().mean_keepdim(3).unwrap();
        let xhat = xc.broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap()).unwrap();
        let y = xhat
            .broadcast_mul(&gamma.reshape((1, (), 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&beta.reshape((1, (), 1, 1)).unwrap())
            .unwrap();
        if relu {
            y.relu().unwrap()
        } else {
            y
        }
    }

    #[test]
    fn batch_norm_matches_composite() {
        let dev = Device::Cpu;
        for relu in [false, true] {
            let x = Var::from_tensor(&Tensor::randn(0.5f32, 2.0, (3, 4, 5, 6), &dev).unwrap()).unwrap();
            let gamma = Var::from_tensor(&Tensor::new(&[1.0f32, -0.5, 2.0, 0.3], &dev).unwrap()).unwrap();
            let beta = Var::from_tensor(&Tensor::new(&[0.1f32, 0.2, -0.3, 0.0], &dev).unwrap()).unwrap();
            let w = Tensor::randn(0f32, 1.0, (3, 4, 5, 6), &dev).unwrap();

            let (y, (mean, _, n)) = batch_norm_train(x.as_tensor(), gamma.as_tensor(), beta.as_tensor(), 1e-5, relu).unwrap();
            assert_eq!(n, 90);
            assert_eq!(mean.len(), 4);
            let r = reference_bn(x.as_tensor(), gamma.as_tensor(), beta.as_tensor(), relu);
            close(&y, &r, 1e-4);

            let ga = (&y * &w).unwrap().sum_all().unwrap().backward().unwrap();
            let gb = (&r * &w).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &gamma, &beta] {
                close(ga.get(v.as_tensor()).unwrap(), gb.get(v.as_tensor()).unwrap(), 1e-3);
            }
        }
    }

    #[test]
    fn max_pool_values_and_routing() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f32, 1.0, (2, 3, 6, 8), &dev).unwrap()).unwrap();
        let a = max_pool_2x2(x.as_tensor()).unwrap();
        close(&a, &x.as_tensor().max_pool2d(2).unwrap(), 0.0);
        // d(sum(w * pool(x)))/dx puts w at each window's maximum.
        let w = Tensor::randn(0f32, 1.0, (2, 3, 3, 4), &dev).unwrap();
        let g = (&a * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let mask = x.as_tensor().eq(&a.upsample_nearest2d(6, 8).unwrap()).unwrap().to_dtype(candle_core::DType::F32).unwrap();
        let expected = (w.upsample_nearest2d(6, 8).unwrap() * mask).unwrap();
        close(g.get(x.as_tensor()).unwrap(), &expected, 0.0);
    }

    #[test]
    fn padded_max_pool() {
        let dev = Device::Cpu;
        let x = Tensor::arange(0f32, 25.0, &dev).unwrap().reshape((1, 1, 5, 5)).unwrap().neg().unwrap();
        let y = max_pool_3x3_s2(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 3, 3]);
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![-0.0, -1.0, -3.0, -5.0, -6.0, -8.0, -15.0, -16.0, -18.0]);
        let xv = Var::from_tensor(&x).unwrap();
        let g = max_pool_3x3_s2(xv.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let gv: Vec<f32> = g.get(xv.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(gv.iter().sum::<f32>(), 9.0);
        assert_eq!(gv[0], 1.0);
    }
}
