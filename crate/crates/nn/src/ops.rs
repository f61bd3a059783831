//! Fused elementwise and pooling ops with hand-written backward passes; the composed
//! candle equivalents allocate several intermediates per call.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Result, Shape, Tensor};

/// Turns on flush-to-zero and denormals-are-zero for the calling thread. Backward passes
/// through the counting readouts produce subnormal intermediates, and x86 arithmetic on
/// those is slower by two orders of magnitude.
pub fn flush_denormals() {
    #[cfg(target_arch = "x86_64")]
    // SAFETY: only the FTZ (bit 15) and DAZ (bit 6) flags of MXCSR change; SSE2 is baseline on x86_64.
    #[allow(deprecated)]
    unsafe {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        _mm_setcsr(_mm_getcsr() | 0x8040);
    }
}

fn contiguous<'a, T>(s: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("expected a contiguous tensor"),
    }
}

macro_rules! unary {
    ($s:expr, $l:expr, |$x:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(v) => {
                let $x = contiguous(v, $l)?;
                #[allow(dead_code)]
                type E = f32;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(v) => {
                let $x = contiguous(v, $l)?;
                #[allow(dead_code)]
                type E = f64;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("only f32 and f64 are supported"),
        }
    };
}

macro_rules! binary {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(x), CpuStorage::F32(y)) => {
                let ($a, $b) = (contiguous(x, $l1)?, contiguous(y, $l2)?);
                #[allow(dead_code)]
                type E = f32;
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(x), CpuStorage::F64(y)) => {
                let ($a, $b) = (contiguous(x, $l1)?, contiguous(y, $l2)?);
                #[allow(dead_code)]
                type E = f64;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("operands must both be f32 or both f64"),
        }
    };
}

struct LeakyRelu(f64);

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let a = self.0;
        let out = unary!(s, l, |x| x.iter().map(|&v| v.max(0.0) + v.min(0.0) * a as E).collect());
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(x.apply_op2_no_bwd(&grad.contiguous()?, &LeakyReluGrad(self.0))?))
    }
}

struct LeakyReluGrad(f64);

impl CustomOp2 for LeakyReluGrad {
    fn name(&self) -> &'static str {
        "leaky-relu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let a = self.0;
        let out = binary!(s1, l1, s2, l2, |x, g| x
            .iter()
            .zip(g)
            .map(|(&v, &d)| d * (a as E + (1.0 - a as E) * (v > 0.0) as u8 as E))
            .collect());
        Ok((out, l1.shape().clone()))
    }
}

/// `max(x, 0) + slope * min(x, 0)`.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op1(LeakyRelu(slope))
}

fn pool_dims(shape: &Shape) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = shape.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        candle_core::bail!("max_pool2 needs even spatial sides, got {h}x{w}");
    }
    Ok((b * c, h, w))
}

/// Flat index of the first maximum of each 2x2 window (row-major within the window).
fn argmax_2x2<T: PartialOrd + Copy>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<usize> {
    let (ho, wo) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        for r in 0..ho {
            for c in 0..wo {
                let base = p * h * w + 2 * r * w + 2 * c;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

struct MaxPool2;

impl CustomOp1 for MaxPool2 {
    fn name(&self) -> &'static str {
        "max-pool-2x2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (planes, h, w) = pool_dims(l.shape())?;
        let out = unary!(s, l, |x| argmax_2x2(x, planes, h, w)
            .into_iter()
            .map(|i| x[i])
            .collect());
        let (b, c, _, _) = l.shape().dims4()?;
        Ok((out, Shape::from((b, c, h / 2, w / 2))))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(x.apply_op2_no_bwd(&grad.contiguous()?, &MaxPool2Grad)?))
    }
}

struct MaxPool2Grad;

impl CustomOp2 for MaxPool2Grad {
    fn name(&self) -> &'static str {
        "max-pool-2x2-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (planes, h, w) = pool_dims(l1.shape())?;
        let out = binary!(s1, l1, s2, l2, |x, g| {
            let mut dx = vec![Default::default(); x.len()];
            for (i, &d) in argmax_2x2(x, planes, h, w).into_iter().zip(g) {
                dx[i] = d;
            }
            dx
        });
        Ok((out, l1.shape().clone()))
    }
}

/// 2x2 max pooling with stride 2; ties route the gradient to the first maximum.
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(MaxPool2)
}
