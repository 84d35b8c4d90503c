use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor};

use super::lstm::fast_exp;
use crate::error::Result;

trait RowFloat: num_traits::Float + Send + Sync + 'static {
    fn exp_fast(self) -> Self;
    fn slice(s: &CpuStorage) -> Option<&[Self]>;
    fn wrap(v: Vec<Self>) -> CpuStorage;
}

impl RowFloat for f32 {
    fn exp_fast(self) -> Self {
        fast_exp(self)
    }
    fn slice(s: &CpuStorage) -> Option<&[f32]> {
        match s {
            CpuStorage::F32(v) => Some(v),
            _ => None,
        }
    }
    fn wrap(v: Vec<f32>) -> CpuStorage {
        CpuStorage::F32(v)
    }
}

impl RowFloat for f64 {
    fn exp_fast(self) -> Self {
        self.exp()
    }
    fn slice(s: &CpuStorage) -> Option<&[f64]> {
        match s {
            CpuStorage::F64(v) => Some(v),
            _ => None,
        }
    }
    fn wrap(v: Vec<f64>) -> CpuStorage {
        CpuStorage::F64(v)
    }
}

fn rows<'a, T: RowFloat>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = T::slice(s).ok_or_else(|| candle_core::Error::Msg("softmax: unexpected dtype".into()))?;
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("softmax: input must be contiguous".into()))?;
    Ok(&data[a..b])
}

/// Sum with eight independent accumulators so the loop vectorizes.
fn lane_sum<T: RowFloat>(xs: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for i in 0..8 {
            acc[i] = acc[i] + c[i];
        }
    }
    let mut total = tail.iter().fold(T::zero(), |a, &b| a + b);
    for a in acc {
        total = total + a;
    }
    total
}

fn last_dim(l: &Layout) -> usize {
    l.dims().last().copied().unwrap_or(1).max(1)
}

struct SoftmaxLast;

impl SoftmaxLast {
    fn run<T: RowFloat>(s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = rows::<T>(s, l)?;
        let n = last_dim(l);
        let mut out = vec![T::zero(); x.len()];
        for (xr, yr) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
            for (y, &v) in yr.iter_mut().zip(xr) {
                *y = (v - max).exp_fast();
            }
            let inv = T::one() / lane_sum(yr);
            for y in yr.iter_mut() {
                *y = *y * inv;
            }
        }
        Ok((T::wrap(out), l.shape().clone()))
    }
}

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        match s.dtype() {
            DType::F32 => Self::run::<f32>(s, l),
            DType::F64 => Self::run::<f64>(s, l),
            dt => Err(candle_core::Error::Msg(format!("softmax: unsupported {dt:?}"))),
        }
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.apply_op2_no_bwd(&grad_res.contiguous()?, &SoftmaxGrad)?))
    }
}

/// `dx = y * (dy - <dy, y>)` row by row.
struct SoftmaxGrad;

impl SoftmaxGrad {
    fn run<T: RowFloat>(s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let y = rows::<T>(s1, l1)?;
        let g = rows::<T>(s2, l2)?;
        let n = last_dim(l1);
        let mut out = vec![T::zero(); y.len()];
        for ((yr, gr), dr) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(out.chunks_exact_mut(n)) {
            let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                *d = yv * (gv - dot);
            }
        }
        Ok((T::wrap(out), l1.shape().clone()))
    }
}

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax-last-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        match s1.dtype() {
            DType::F32 => Self::run::<f32>(s1, l1, s2, l2),
            DType::F64 => Self::run::<f64>(s1, l1, s2, l2),
            dt => Err(candle_core::Error::Msg(format!("softmax: unsupported {dt:?}"))),
        }
    }
}

/// Numerically stable softmax over the last axis, fused into a single op.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLast)?)
}
