//! Dense convolution as unfold + matrix product.
//!
//! candle's CPU backward for `conv2d` runs a direct transposed convolution
//! that dominates training time on small networks. Unfolding the input into
//! columns moves all the arithmetic into matrix products, whose backward is
//! again a matrix product; the unfold itself has a cheap scatter backward.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};

#[derive(Clone, Copy, Debug)]
struct Unfold {
    kernel: (usize, usize),
    stride: usize,
    pad: (usize, usize),
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    channels: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Unfold {
    fn geometry(&self, dims: &[usize]) -> candle_core::Result<Geometry> {
        let [batch, channels, in_h, in_w] = *dims else {
            candle_core::bail!("unfold expects a 4-d input, got {dims:?}")
        };
        let (kh, kw) = self.kernel;
        let (ph, pw) = self.pad;
        if in_h + 2 * ph < kh || in_w + 2 * pw < kw {
            candle_core::bail!("kernel {kh}x{kw} larger than padded input {in_h}x{in_w}");
        }
        Ok(Geometry {
            batch,
            channels,
            in_h,
            in_w,
            out_h: (in_h + 2 * ph - kh) / self.stride + 1,
            out_w: (in_w + 2 * pw - kw) / self.stride + 1,
        })
    }

    fn rows(&self, g: &Geometry) -> usize {
        g.channels * self.kernel.0 * self.kernel.1
    }

    /// Calls `f(column_index, input_index)` for every in-bounds tap.
    #[inline]
    fn visit(&self, g: &Geometry, mut f: impl FnMut(usize, usize)) {
        let (kh, kw) = self.kernel;
        let cols = g.out_h * g.out_w;
        let rows = self.rows(g);
        for b in 0..g.batch {
            for c in 0..g.channels {
                let plane = (b * g.channels + c) * g.in_h * g.in_w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = c * kh * kw + ky * kw + kx;
                        let base = (b * rows + row) * cols;
                        for oy in 0..g.out_h {
                            let iy = (oy * self.stride + ky) as isize - self.pad.0 as isize;
                            if iy < 0 || iy >= g.in_h as isize {
                                continue;
                            }
                            let in_row = plane + iy as usize * g.in_w;
                            let out_row = base + oy * g.out_w;
                            for ox in 0..g.out_w {
                                let ix = (ox * self.stride + kx) as isize - self.pad.1 as isize;
                                if ix < 0 || ix >= g.in_w as isize {
                                    continue;
                                }
                                f(out_row + ox, in_row + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    fn unfold<T: Copy + Default>(&self, g: &Geometry, x: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); g.batch * self.rows(g) * g.out_h * g.out_w];
        self.visit(g, |o, i| out[o] = x[i]);
        out
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, g: &Geometry, cols: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); g.batch * g.channels * g.in_h * g.in_w];
        self.visit(g, |o, i| out[i] += cols[o]);
        out
    }
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geometry(l.dims())?;
        let Some((start, end)) = l.contiguous_offsets() else {
            candle_core::bail!("unfold requires a contiguous input")
        };
        let shape = Shape::from((g.batch, self.rows(&g), g.out_h * g.out_w));
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(self.unfold(&g, &x[start..end])),
            CpuStorage::F64(x) => CpuStorage::F64(self.unfold(&g, &x[start..end])),
            _ => candle_core::bail!("unfold supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = self.geometry(arg.dims())?;
        let grad = match grad_res.dtype() {
            DType::F32 => {
                let v: Vec<f32> = grad_res.flatten_all()?.to_vec1()?;
                Tensor::from_vec(self.fold(&g, &v), arg.shape(), arg.device())?
            }
            DType::F64 => {
                let v: Vec<f64> = grad_res.flatten_all()?.to_vec1()?;
                Tensor::from_vec(self.fold(&g, &v), arg.shape(), arg.device())?
            }
            other => candle_core::bail!("unfold does not support {other:?}"),
        };
        Ok(Some(grad))
    }
}

/// Dense 2-D convolution of `x` (`B x C x H x W`) with `kernel`
/// (`O x C x kh x kw`) and symmetric per-axis zero padding.
pub(crate) fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, pad: (usize, usize)) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, kc, kh, kw) = kernel.dims4()?;
    if kc != c {
        candle_core::bail!("conv kernel {:?} does not match {c} input channels", kernel.dims());
    }
    let weight = kernel.reshape((o, c * kh * kw))?;
    if (kh, kw, stride, pad) == (1, 1, 1, (0, 0)) {
        let cols = x.reshape((b, c, h * w))?;
        return weight.broadcast_left(b)?.contiguous()?.matmul(&cols)?.reshape((b, o, h, w));
    }
    let op = Unfold {
        kernel: (kh, kw),
        stride,
        pad,
    };
    let g = op.geometry(x.dims())?;
    let cols = x.contiguous()?.apply_op1(op)?;
    weight
        .broadcast_left(b)?
        .contiguous()?
        .matmul(&cols)?
        .reshape((b, o, g.out_h, g.out_w))
}
