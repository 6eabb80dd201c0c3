//! 2-D convolution as a candle custom op.
//!
//! The stock CPU kernels compute the weight gradient as a convolution with a
//! feature-map sized kernel, which dominates training time at desk scale. This
//! op lowers forward and both backward passes onto im2col + sgemm.

use candle_core::{CpuStorage, CustomOp2, Layout, Result, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
}

impl Dims {
    fn new(input: &[usize], kernel: &[usize], g: ConvGeometry) -> Result<Self> {
        let (batch, c_in, h, w) = match input {
            &[b, c, h, w] => (b, c, h, w),
            _ => candle_core::bail!("conv2d input must be rank 4, got {input:?}"),
        };
        let (c_out, kc, kh, kw) = match kernel {
            &[o, c, kh, kw] => (o, c, kh, kw),
            _ => candle_core::bail!("conv2d kernel must be rank 4, got {kernel:?}"),
        };
        if kc != c_in {
            candle_core::bail!("conv2d channel mismatch: input has {c_in}, kernel expects {kc}");
        }
        if kh != kw {
            candle_core::bail!("conv2d only supports square kernels, got {kh}x{kw}");
        }
        if h + 2 * g.padding < kh || w + 2 * g.padding < kw {
            candle_core::bail!("conv2d kernel {kh} larger than padded input {h}x{w}");
        }
        let h_out = (h + 2 * g.padding - kh) / g.stride + 1;
        let w_out = (w + 2 * g.padding - kw) / g.stride + 1;
        Ok(Self { batch, c_in, h, w, c_out, k: kh, h_out, w_out })
    }

    fn is_pointwise(&self, g: ConvGeometry) -> bool {
        self.k == 1 && g.stride == 1 && g.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn contiguous<'a>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [f32]> {
    let data = s.as_slice::<f32>()?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d expects contiguous f32 tensors"),
    }
}

fn im2col(img: &[f32], d: &Dims, g: ConvGeometry, cols: &mut [f32]) {
    let n = d.col_cols();
    let pad = g.padding as isize;
    for c in 0..d.c_in {
        let plane = &img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (c * d.k + ky) * d.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..d.h_out {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let out_row = &mut dst[oy * d.w_out..(oy + 1) * d.w_out];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_range(kx, pad, d.w, d.w_out);
                        out_row[..lo].fill(0.0);
                        out_row[hi..].fill(0.0);
                        if lo < hi {
                            let start = (lo + kx) as isize - pad;
                            out_row[lo..hi].copy_from_slice(&src[start as usize..start as usize + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= d.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose stride-1 source column `ox + kx - pad` lies inside `0..w`.
fn valid_range(kx: usize, pad: isize, w: usize, w_out: usize) -> (usize, usize) {
    let off = kx as isize - pad;
    let lo = (-off).clamp(0, w_out as isize) as usize;
    let hi = (w as isize - off).clamp(0, w_out as isize) as usize;
    (lo, hi.max(lo))
}

fn col2im(cols: &[f32], d: &Dims, g: ConvGeometry, img: &mut [f32]) {
    let n = d.col_cols();
    let pad = g.padding as isize;
    for c in 0..d.c_in {
        let plane = &mut img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (c * d.k + ky) * d.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..d.h_out {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let in_row = &src[oy * d.w_out..(oy + 1) * d.w_out];
                    if g.stride == 1 {
                        let (lo, hi) = valid_range(kx, pad, d.w, d.w_out);
                        if lo < hi {
                            let start = ((lo + kx) as isize - pad) as usize;
                            for (o, v) in dst[start..start + hi - lo].iter_mut().zip(&in_row[lo..hi]) {
                                *o += *v;
                            }
                        }
                        continue;
                    }
                    for (ox, v) in in_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = alpha * a · b + beta * c` where `a` is `m×k` and `b` is `k×n`.
/// Either operand may be read transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths checked above; strides describe in-bounds row-major views.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Forward(ConvGeometry);

impl CustomOp2 for Forward {
    fn name(&self) -> &'static str {
        "fast-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        let d = Dims::new(l1.dims(), l2.dims(), g)?;
        let input = contiguous(s1, l1)?;
        let kernel = contiguous(s2, l2)?;
        let (rows, n) = (d.col_rows(), d.col_cols());
        let mut out = vec![0f32; d.batch * d.c_out * n];
        let mut cols = if d.is_pointwise(g) { Vec::new() } else { vec![0f32; rows * n] };
        let img_len = d.c_in * d.h * d.w;
        for b in 0..d.batch {
            let img = &input[b * img_len..(b + 1) * img_len];
            let col_view: &[f32] = if d.is_pointwise(g) {
                img
            } else {
                im2col(img, &d, g, &mut cols);
                &cols
            };
            let dst = &mut out[b * d.c_out * n..(b + 1) * d.c_out * n];
            gemm(d.c_out, rows, n, kernel, false, col_view, false, 0.0, dst);
        }
        let shape = Shape::from((d.batch, d.c_out, d.h_out, d.w_out));
        Ok((CpuStorage::F32(out), shape))
    }

    fn bwd(
        &self,
        input: &Tensor,
        kernel: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let d_input = grad.apply_op2_no_bwd(
            &kernel.contiguous()?,
            &BackwardInput { geometry: self.0, input_dims: input.dims4()? },
        )?;
        let d_kernel = input.contiguous()?.apply_op2_no_bwd(
            &grad,
            &BackwardKernel { geometry: self.0, kernel_dims: kernel.dims4()? },
        )?;
        Ok((Some(d_input), Some(d_kernel)))
    }
}

struct BackwardInput {
    geometry: ConvGeometry,
    input_dims: (usize, usize, usize, usize),
}

impl CustomOp2 for BackwardInput {
    fn name(&self) -> &'static str {
        "fast-conv2d-bwd-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = self.geometry;
        let (b, c, h, w) = self.input_dims;
        let d = Dims::new(&[b, c, h, w], l2.dims(), g)?;
        let grad = contiguous(s1, l1)?;
        let kernel = contiguous(s2, l2)?;
        let (rows, n) = (d.col_rows(), d.col_cols());
        let img_len = d.c_in * d.h * d.w;
        let mut out = vec![0f32; d.batch * img_len];
        let mut cols = if d.is_pointwise(g) { Vec::new() } else { vec![0f32; rows * n] };
        for bi in 0..d.batch {
            let gb = &grad[bi * d.c_out * n..(bi + 1) * d.c_out * n];
            let dst = &mut out[bi * img_len..(bi + 1) * img_len];
            if d.is_pointwise(g) {
                gemm(rows, d.c_out, n, kernel, true, gb, false, 0.0, dst);
            } else {
                gemm(rows, d.c_out, n, kernel, true, gb, false, 0.0, &mut cols);
                col2im(&cols, &d, g, dst);
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, c, h, w))))
    }
}

struct BackwardKernel {
    geometry: ConvGeometry,
    kernel_dims: (usize, usize, usize, usize),
}

impl CustomOp2 for BackwardKernel {
    fn name(&self) -> &'static str {
        "fast-conv2d-bwd-kernel"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = self.geometry;
        let (o, c, kh, kw) = self.kernel_dims;
        let d = Dims::new(l1.dims(), &[o, c, kh, kw], g)?;
        let input = contiguous(s1, l1)?;
        let grad = contiguous(s2, l2)?;
        if l2.dims() != [d.batch, d.c_out, d.h_out, d.w_out] {
            candle_core::bail!("conv2d gradient shape {:?} does not match output", l2.dims());
        }
        let (rows, n) = (d.col_rows(), d.col_cols());
        let img_len = d.c_in * d.h * d.w;
        let mut out = vec![0f32; d.c_out * rows];
        let mut cols = if d.is_pointwise(g) { Vec::new() } else { vec![0f32; rows * n] };
        for bi in 0..d.batch {
            let img = &input[bi * img_len..(bi + 1) * img_len];
            let col_view: &[f32] = if d.is_pointwise(g) {
                img
            } else {
                im2col(img, &d, g, &mut cols);
                &cols
            };
            let gb = &grad[bi * d.c_out * n..(bi + 1) * d.c_out * n];
            gemm(d.c_out, n, rows, gb, false, col_view, true, 1.0, &mut out);
        }
        Ok((CpuStorage::F32(out), Shape::from((o, c, kh, kw))))
    }
}

/// Convolves an NCHW f32 tensor with an `(out, in, k, k)` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, geometry: ConvGeometry) -> Result<Tensor> {
    input.contiguous()?.apply_op2(&kernel.contiguous()?, Forward(geometry))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn reference(input: &Tensor, kernel: &Tensor, g: ConvGeometry) -> Tensor {
        input.conv2d(kernel, g.padding, g.stride, 1, 1).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn forward_matches_stock_kernel() {
        let dev = Device::Cpu;
        for &(k, stride, padding) in &[(3, 1, 1), (1, 1, 0), (7, 2, 3), (3, 2, 1), (1, 2, 0), (2, 2, 0)] {
            let x = Tensor::randn(0f32, 1.0, (2, 3, 9, 9), &dev).unwrap();
            let w = Tensor::randn(0f32, 1.0, (4, 3, k, k), &dev).unwrap();
            let g = ConvGeometry { stride, padding };
            let ours = conv2d(&x, &w, g).unwrap();
            let theirs = reference(&x, &w, g);
            assert_eq!(ours.dims(), theirs.dims());
            assert!(max_abs_diff(&ours, &theirs) < 1e-4, "k={k} s={stride} p={padding}");
        }
    }

    #[test]
    fn gradients_match_stock_kernel() {
        let dev = Device::Cpu;
        for &(k, stride, padding) in &[(3, 1, 1), (1, 1, 0), (3, 2, 1), (7, 2, 3)] {
            let g = ConvGeometry { stride, padding };
            let x = Var::randn(0f32, 1.0, (2, 3, 10, 10), &dev).unwrap();
            let w = Var::randn(0f32, 1.0, (5, 3, k, k), &dev).unwrap();
            let probe = Tensor::randn(0f32, 1.0, reference(&x, &w, g).shape(), &dev).unwrap();

            let ours = (conv2d(&x, &w, g).unwrap() * &probe).unwrap().sum_all().unwrap();
            let ga = ours.backward().unwrap();
            let theirs = (reference(&x, &w, g) * &probe).unwrap().sum_all().unwrap();
            let gb = theirs.backward().unwrap();
            for v in [&x, &w] {
                let d = max_abs_diff(ga.get(v).unwrap(), gb.get(v).unwrap());
                assert!(d < 1e-3, "k={k} s={stride} p={padding} diff {d}");
            }
        }
    }
}
