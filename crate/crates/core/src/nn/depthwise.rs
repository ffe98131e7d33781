//! Depthwise 2-D convolution as a single custom op.
//!
//! candle lowers `groups > 1` to one convolution per group followed by a
//! concatenation, which costs thousands of tiny kernels per MobileNet layer.
//! This op runs the whole layer in one pass with a hand-written backward.

use std::ops::{AddAssign, Mul};

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct DepthwiseConv2d {
    pub stride: usize,
    pub pad: (usize, usize),
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    channels: usize,
    in_h: usize,
    in_w: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
}

impl DepthwiseConv2d {
    fn geometry(&self, input: &[usize], kernel: &[usize]) -> candle_core::Result<Geometry> {
        let [batch, channels, in_h, in_w] = *input else {
            candle_core::bail!("depthwise conv expects a 4-d input, got {input:?}")
        };
        let [kc, one, k_h, k_w] = *kernel else {
            candle_core::bail!("depthwise conv expects a 4-d kernel, got {kernel:?}")
        };
        if kc != channels || one != 1 {
            candle_core::bail!("depthwise kernel {kernel:?} does not match {channels} channels");
        }
        let (ph, pw) = self.pad;
        if in_h + 2 * ph < k_h || in_w + 2 * pw < k_w {
            candle_core::bail!("depthwise kernel {k_h}x{k_w} larger than padded input {in_h}x{in_w}");
        }
        Ok(Geometry {
            batch,
            channels,
            in_h,
            in_w,
            k_h,
            k_w,
            out_h: (in_h + 2 * ph - k_h) / self.stride + 1,
            out_w: (in_w + 2 * pw - k_w) / self.stride + 1,
            stride: self.stride,
            pad_h: ph,
            pad_w: pw,
        })
    }
}

/// Visits every (output, input, tap) triple that lands inside the input.
#[inline]
fn for_each_tap(g: &Geometry, mut f: impl FnMut(usize, usize, usize)) {
    for b in 0..g.batch {
        for c in 0..g.channels {
            let plane_in = (b * g.channels + c) * g.in_h * g.in_w;
            let plane_out = (b * g.channels + c) * g.out_h * g.out_w;
            let kbase = c * g.k_h * g.k_w;
            for oy in 0..g.out_h {
                for ky in 0..g.k_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let row_in = plane_in + iy as usize * g.in_w;
                    let row_out = plane_out + oy * g.out_w;
                    for ox in 0..g.out_w {
                        for kx in 0..g.k_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad_w as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            f(row_out + ox, row_in + ix as usize, kbase + ky * g.k_w + kx);
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: Copy + Default + Mul<Output = T> + AddAssign>(g: &Geometry, x: &[T], k: &[T]) -> Vec<T> {
    let mut out = vec![T::default(); g.batch * g.channels * g.out_h * g.out_w];
    for_each_tap(g, |o, i, t| out[o] += x[i] * k[t]);
    out
}

fn grad_input<T: Copy + Default + Mul<Output = T> + AddAssign>(g: &Geometry, go: &[T], k: &[T]) -> Vec<T> {
    let mut gx = vec![T::default(); g.batch * g.channels * g.in_h * g.in_w];
    for_each_tap(g, |o, i, t| gx[i] += go[o] * k[t]);
    gx
}

fn grad_kernel<T: Copy + Default + Mul<Output = T> + AddAssign>(g: &Geometry, go: &[T], x: &[T]) -> Vec<T> {
    let mut gk = vec![T::default(); g.channels * g.k_h * g.k_w];
    for_each_tap(g, |o, i, t| gk[t] += go[o] * x[i]);
    gk
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("depthwise conv requires contiguous operands"),
    }
}

impl CustomOp2 for DepthwiseConv2d {
    fn name(&self) -> &'static str {
        "depthwise-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geometry(l1.dims(), l2.dims())?;
        let shape = Shape::from((g.batch, g.channels, g.out_h, g.out_w));
        let storage = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(k)) => {
                CpuStorage::F32(forward(&g, contiguous(x, l1)?, contiguous(k, l2)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(k)) => {
                CpuStorage::F64(forward(&g, contiguous(x, l1)?, contiguous(k, l2)?))
            }
            _ => candle_core::bail!("depthwise conv supports matching f32 or f64 operands"),
        };
        Ok((storage, shape))
    }

    fn bwd(
        &self,
        input: &Tensor,
        kernel: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = self.geometry(input.dims(), kernel.dims())?;
        let device = input.device();
        let (gx, gk) = match input.dtype() {
            DType::F32 => {
                let x: Vec<f32> = input.flatten_all()?.to_vec1()?;
                let k: Vec<f32> = kernel.flatten_all()?.to_vec1()?;
                let go: Vec<f32> = grad_res.flatten_all()?.to_vec1()?;
                (
                    Tensor::from_vec(grad_input(&g, &go, &k), input.shape(), device)?,
                    Tensor::from_vec(grad_kernel(&g, &go, &x), kernel.shape(), device)?,
                )
            }
            DType::F64 => {
                let x: Vec<f64> = input.flatten_all()?.to_vec1()?;
                let k: Vec<f64> = kernel.flatten_all()?.to_vec1()?;
                let go: Vec<f64> = grad_res.flatten_all()?.to_vec1()?;
                (
                    Tensor::from_vec(grad_input(&g, &go, &k), input.shape(), device)?,
                    Tensor::from_vec(grad_kernel(&g, &go, &x), kernel.shape(), device)?,
                )
            }
            other => candle_core::bail!("depthwise conv does not support {other:?}"),
        };
        Ok((Some(gx), Some(gk)))
    }
}

pub(crate) fn depthwise_conv2d(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: (usize, usize),
) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op2(&kernel.contiguous()?, DepthwiseConv2d { stride, pad })
}
