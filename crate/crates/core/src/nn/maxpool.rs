//! Max pooling with overlapping windows.
//!
//! candle has no backward for pooling when the window is larger than the
//! stride. This op records nothing between passes; the backward recomputes
//! each window's arg-max and routes the gradient there.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};

#[derive(Clone, Copy, Debug)]
struct MaxPool {
    kernel: usize,
    stride: usize,
}

#[derive(Clone, Copy)]
struct Geometry {
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl MaxPool {
    fn geometry(&self, dims: &[usize]) -> candle_core::Result<Geometry> {
        let [batch, channels, in_h, in_w] = *dims else {
            candle_core::bail!("max pool expects a 4-d input, got {dims:?}")
        };
        if in_h < self.kernel || in_w < self.kernel {
            candle_core::bail!("pool window {} larger than input {in_h}x{in_w}", self.kernel);
        }
        Ok(Geometry {
            planes: batch * channels,
            in_h,
            in_w,
            out_h: (in_h - self.kernel) / self.stride + 1,
            out_w: (in_w - self.kernel) / self.stride + 1,
        })
    }

    /// Calls `f(output_index, argmax_input_index)` for every window. Ties go
    /// to the first position in row-major order.
    fn visit<T: Copy + PartialOrd>(&self, g: &Geometry, x: &[T], mut f: impl FnMut(usize, usize)) {
        for p in 0..g.planes {
            let plane = p * g.in_h * g.in_w;
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut best = plane + oy * self.stride * g.in_w + ox * self.stride;
                    for ky in 0..self.kernel {
                        let row = plane + (oy * self.stride + ky) * g.in_w + ox * self.stride;
                        for i in row..row + self.kernel {
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    f((p * g.out_h + oy) * g.out_w + ox, best);
                }
            }
        }
    }

    fn forward<T: Copy + Default + PartialOrd>(&self, g: &Geometry, x: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); g.planes * g.out_h * g.out_w];
        self.visit(g, x, |o, i| out[o] = x[i]);
        out
    }

    fn backward<T: Copy + Default + PartialOrd + std::ops::AddAssign>(&self, g: &Geometry, x: &[T], grad: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); x.len()];
        self.visit(g, x, |o, i| out[i] += grad[o]);
        out
    }
}

impl CustomOp1 for MaxPool {
    fn name(&self) -> &'static str {
        "max-pool"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geometry(l.dims())?;
        let Some((start, end)) = l.contiguous_offsets() else {
            candle_core::bail!("max pool requires a contiguous input")
        };
        let d = l.dims();
        let shape = Shape::from((d[0], d[1], g.out_h, g.out_w));
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(self.forward(&g, &x[start..end])),
            CpuStorage::F64(x) => CpuStorage::F64(self.forward(&g, &x[start..end])),
            _ => candle_core::bail!("max pool supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = self.geometry(arg.dims())?;
        let grad = match grad_res.dtype() {
            DType::F32 => {
                let x: Vec<f32> = arg.flatten_all()?.to_vec1()?;
                let v: Vec<f32> = grad_res.flatten_all()?.to_vec1()?;
                Tensor::from_vec(self.backward(&g, &x, &v), arg.shape(), arg.device())?
            }
            DType::F64 => {
                let x: Vec<f64> = arg.flatten_all()?.to_vec1()?;
                let v: Vec<f64> = grad_res.flatten_all()?.to_vec1()?;
                Tensor::from_vec(self.backward(&g, &x, &v), arg.shape(), arg.device())?
            }
            other => candle_core::bail!("max pool does not support {other:?}"),
        };
        Ok(Some(grad))
    }
}

/// Square max pooling of `x` (`B x C x H x W`) without padding.
pub(crate) fn max_pool2d(x: &Tensor, kernel: usize, stride: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(MaxPool { kernel, stride })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|i| ((i * 29 % 23) as f64 - 11.0) * scale + i as f64 * 1e-4).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn matches_candle_forward() {
        for (k, s, h, w) in [(3, 2, 9, 9), (3, 2, 8, 11), (2, 2, 6, 8), (3, 1, 5, 7)] {
            let x = ramp(&[2, 3, h, w], 0.1);
            let ours = max_pool2d(&x, k, s).unwrap();
            let theirs = x.max_pool2d_with_stride(k, s).unwrap();
            assert_eq!(ours.dims(), theirs.dims());
            let d: f64 = (ours - theirs).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
            assert_eq!(d, 0.0, "k{k} s{s} {h}x{w}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = Var::from_tensor(&ramp(&[1, 2, 8, 9], 0.1)).unwrap();
        let probe = ramp(&[1, 2, 3, 4], 0.3);
        let f = |t: &Tensor| -> f64 { (max_pool2d(t, 3, 2).unwrap() * &probe).unwrap().sum_all().unwrap().to_scalar().unwrap() };
        let grads = (max_pool2d(&x, 3, 2).unwrap() * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let analytic: Vec<f64> = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let eps = 1e-6;
        for i in 0..base.len() {
            let mut up = base.clone();
            up[i] += eps;
            let mut down = base.clone();
            down[i] -= eps;
            let shape = x.shape().clone();
            let fd = (f(&Tensor::from_vec(up, &shape, &Device::Cpu).unwrap())
                - f(&Tensor::from_vec(down, &shape, &Device::Cpu).unwrap()))
                / (2.0 * eps);
            assert!((fd - analytic[i]).abs() < 1e-7, "element {i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn overlapping_windows_accumulate() {
        let mut v = vec![0.0f64; 25];
        v[12] = 1.0;
        let x = Var::from_tensor(&Tensor::from_vec(v, (1, 1, 5, 5), &Device::Cpu).unwrap()).unwrap();
        let y = max_pool2d(&x, 3, 2).unwrap();
        let g = y.sum_all().unwrap().backward().unwrap();
        let g: Vec<f64> = g.get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(g[12], 4.0);
        assert_eq!(g.iter().sum::<f64>(), 4.0);
    }
}
