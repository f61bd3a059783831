//! Stride-1 "same" 2D convolution with bias as a candle custom op.
//!
//! The forward pass and the input gradient share one direct kernel that keeps a block of
//! output channels times a run of output columns in registers while sweeping input
//! channels and taps; the input gradient is the same correlation applied to the output
//! gradient with the kernel transposed and flipped. The kernel gradient is one GEMM per
//! tap: with outputs laid out on the padded width, tap `(ky, kx)` is a pointer offset of
//! `ky * Wp + kx` into the flattened padded input.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Result, Shape, Tensor};

/// Output columns computed per register block.
const LANES: usize = 16;
/// Output channels computed per register block.
const CHANNEL_BLOCK: usize = 4;

trait Elem: Copy + Default + Send + Sync + std::ops::Add<Output = Self> + std::ops::Mul<Output = Self> + 'static {
    const ONE: Self;

    /// Vectorized `correlate_block` for `CHANNEL_BLOCK` channels; false if unavailable.
    fn simd_block(_g: &Geom, _xp: &[Self], _k: &[Self], _bias: &[Self], _o0: usize, _out: &mut [Self]) -> bool {
        false
    }

    /// Vectorized kernel gradient of one image, accumulated into `dk`; false if unavailable.
    fn simd_kernel_grad(_g: &Geom, _xp: &[Self], _grad: &[Self], _dk: &mut [Self]) -> bool {
        false
    }
}

impl Elem for f32 {
    const ONE: Self = 1.0;

    fn simd_block(g: &Geom, xp: &[f32], k: &[f32], bias: &[f32], o0: usize, out: &mut [f32]) -> bool {
        #[cfg(target_arch = "x86_64")]
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were just detected.
            unsafe { avx::correlate_block4(g, xp, k, bias, o0, out) };
            return true;
        }
        false
    }

    fn simd_kernel_grad(g: &Geom, xp: &[f32], grad: &[f32], dk: &mut [f32]) -> bool {
        #[cfg(target_arch = "x86_64")]
        if g.kw <= 3
            && g.c_out % CHANNEL_BLOCK == 0
            && is_x86_feature_detected!("avx2")
            && is_x86_feature_detected!("fma")
        {
            // SAFETY: the required CPU features were just detected.
            unsafe { avx::kernel_grad(g, xp, grad, dk) };
            return true;
        }
        false
    }
}

impl Elem for f64 {
    const ONE: Self = 1.0;
}

/// Geometry shared by the forward and backward passes.
#[derive(Debug, Clone, Copy)]
struct Geom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl Geom {
    fn ph(&self) -> usize {
        self.kh / 2
    }
    fn pw(&self) -> usize {
        self.kw / 2
    }
    fn hp(&self) -> usize {
        self.h + self.kh - 1
    }
    fn wp(&self) -> usize {
        self.w + self.kw - 1
    }
    /// Padded plane size per channel.
    fn plane(&self) -> usize {
        self.hp() * self.wp()
    }
    /// Output span on the padded-width grid.
    fn span(&self) -> usize {
        self.h * self.wp()
    }
    fn taps(&self) -> usize {
        self.kh * self.kw
    }
    fn in_size(&self) -> usize {
        self.c_in * self.h * self.w
    }
    fn out_size(&self) -> usize {
        self.c_out * self.h * self.w
    }

    /// Geometry of the input-gradient correlation.
    fn transposed(&self) -> Geom {
        Geom {
            c_in: self.c_out,
            c_out: self.c_in,
            ..*self
        }
    }

    /// Zero-padded copy of `channels` planes, plus slack so a full register block
    /// starting at any tap stays inside the buffer.
    fn pad<T: Elem>(&self, x: &[T], channels: usize) -> Vec<T> {
        let (h, w, wp, plane) = (self.h, self.w, self.wp(), self.plane());
        let mut xp = vec![T::default(); channels * plane + self.kw + LANES];
        for c in 0..channels {
            for r in 0..h {
                let src = &x[(c * h + r) * w..][..w];
                let dst = c * plane + (r + self.ph()) * wp + self.pw();
                xp[dst..dst + w].copy_from_slice(src);
            }
        }
        xp
    }

    /// Output gradient of one image spread onto the padded-width grid.
    fn widen<T: Elem>(&self, g: &[T]) -> Vec<T> {
        let (h, w, wp) = (self.h, self.w, self.wp());
        let mut ext = vec![T::default(); self.c_out * self.span()];
        for o in 0..self.c_out {
            for r in 0..h {
                ext[o * self.span() + r * wp..][..w].copy_from_slice(&g[(o * h + r) * w..][..w]);
            }
        }
        ext
    }
}

fn contiguous<'a, T>(s: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("same_conv2d expects contiguous tensors"),
    }
}

/// Output channels `o0..o0 + OB` of one image.
#[inline(always)]
fn correlate_block<T: Elem, const OB: usize>(g: &Geom, xp: &[T], k: &[T], bias: &[T], o0: usize, out: &mut [T]) {
    let (plane, wp, taps) = (g.plane(), g.wp(), g.taps());
    let mut kv = vec![[T::default(); OB]; g.c_in * taps];
    for (i, slot) in kv.iter_mut().enumerate() {
        for (ob, v) in slot.iter_mut().enumerate() {
            *v = k[(o0 + ob) * g.c_in * taps + i];
        }
    }
    for r in 0..g.h {
        let mut col = 0;
        while col < g.w {
            let mut acc = [[T::default(); LANES]; OB];
            for (ob, a) in acc.iter_mut().enumerate() {
                *a = [bias[o0 + ob]; LANES];
            }
            for c in 0..g.c_in {
                for ky in 0..g.kh {
                    let row = c * plane + (r + ky) * wp + col;
                    for kx in 0..g.kw {
                        let xs: &[T; LANES] = xp[row + kx..][..LANES].try_into().expect("slack");
                        let kk = &kv[c * taps + ky * g.kw + kx];
                        for ob in 0..OB {
                            for l in 0..LANES {
                                acc[ob][l] = acc[ob][l] + kk[ob] * xs[l];
                            }
                        }
                    }
                }
            }
            let n = LANES.min(g.w - col);
            for (ob, a) in acc.iter().enumerate() {
                out[((o0 + ob) * g.h + r) * g.w + col..][..n].copy_from_slice(&a[..n]);
            }
            col += LANES;
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx {
    use super::{Geom, CHANNEL_BLOCK, LANES};
    use std::arch::x86_64::*;

    /// AVX2 version of `correlate_block` for four output channels: eight accumulators
    /// of eight lanes each stay in registers across all input channels and taps.
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn correlate_block4(g: &Geom, xp: &[f32], k: &[f32], bias: &[f32], o0: usize, out: &mut [f32]) {
        const _: () = assert!(CHANNEL_BLOCK == 4 && LANES == 16);
        let (plane, wp, taps) = (g.plane(), g.wp(), g.taps());
        let mut kv = vec![[0f32; 4]; g.c_in * taps];
        for (i, slot) in kv.iter_mut().enumerate() {
            for (ob, v) in slot.iter_mut().enumerate() {
                *v = k[(o0 + ob) * g.c_in * taps + i];
            }
        }
        // Every read below stays inside `xp`, which carries `kw + LANES` elements of
        // slack after the last plane.
        assert!(xp.len() >= g.c_in * plane + g.kw + LANES);
        let xptr = xp.as_ptr();
        let mut tmp = [0f32; LANES];
        for r in 0..g.h {
            let mut col = 0;
            while col < g.w {
                let mut acc = [_mm256_setzero_ps(); 8];
                for ob in 0..4 {
                    let b = _mm256_set1_ps(bias[o0 + ob]);
                    acc[2 * ob] = b;
                    acc[2 * ob + 1] = b;
                }
                for c in 0..g.c_in {
                    for ky in 0..g.kh {
                        let row = c * plane + (r + ky) * wp + col;
                        for kx in 0..g.kw {
                            let p = xptr.add(row + kx);
                            let x0 = _mm256_loadu_ps(p);
                            let x1 = _mm256_loadu_ps(p.add(8));
                            let kk = kv.get_unchecked(c * taps + ky * g.kw + kx);
                            for ob in 0..4 {
                                let kb = _mm256_set1_ps(kk[ob]);
                                acc[2 * ob] = _mm256_fmadd_ps(kb, x0, acc[2 * ob]);
                                acc[2 * ob + 1] = _mm256_fmadd_ps(kb, x1, acc[2 * ob + 1]);
                            }
                        }
                    }
                }
                let n = LANES.min(g.w - col);
                for ob in 0..4 {
                    _mm256_storeu_ps(tmp.as_mut_ptr(), acc[2 * ob]);
                    _mm256_storeu_ps(tmp.as_mut_ptr().add(8), acc[2 * ob + 1]);
                    out[((o0 + ob) * g.h + r) * g.w + col..][..n].copy_from_slice(&tmp[..n]);
                }
                col += LANES;
            }
        }
    }

    /// Kernel gradient of one image: for each input channel, block of four output
    /// channels and kernel row, `4 x kw` accumulators sweep the padded-width grid.
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn kernel_grad(g: &Geom, xp: &[f32], grad: &[f32], dk: &mut [f32]) {
        let (plane, wp, span, taps) = (g.plane(), g.wp(), g.span(), g.taps());
        let stride = span.div_ceil(8) * 8;
        // Output gradient on the padded-width grid, zero in the extra columns and in the
        // per-channel tail, so products with out-of-row inputs vanish.
        let mut ext = vec![0f32; g.c_out * stride];
        for o in 0..g.c_out {
            for r in 0..g.h {
                ext[o * stride + r * wp..][..g.w].copy_from_slice(&grad[(o * g.h + r) * g.w..][..g.w]);
            }
        }
        assert!(xp.len() >= g.c_in * plane + g.kw + LANES && g.kw <= 3);
        let (xptr, eptr) = (xp.as_ptr(), ext.as_ptr());
        for c in 0..g.c_in {
            for o0 in (0..g.c_out).step_by(4) {
                for ky in 0..g.kh {
                    let mut acc = [[_mm256_setzero_ps(); 3]; 4];
                    let xrow = xptr.add(c * plane + ky * wp);
                    let mut p = 0;
                    while p < stride {
                        let d = [0, 1, 2, 3].map(|ob| _mm256_loadu_ps(eptr.add((o0 + ob) * stride + p)));
                        for kx in 0..g.kw {
                            let xv = _mm256_loadu_ps(xrow.add(kx + p));
                            for ob in 0..4 {
                                acc[ob][kx] = _mm256_fmadd_ps(d[ob], xv, acc[ob][kx]);
                            }
                        }
                        p += 8;
                    }
                    let mut tmp = [0f32; 8];
                    for ob in 0..4 {
                        for kx in 0..g.kw {
                            _mm256_storeu_ps(tmp.as_mut_ptr(), acc[ob][kx]);
                            dk[((o0 + ob) * g.c_in + c) * taps + ky * g.kw + kx] += tmp.iter().sum::<f32>();
                        }
                    }
                }
            }
        }
    }
}

/// `out = bias + x (*) k` for a whole batch.
fn correlate<T: Elem>(g: &Geom, x: &[T], k: &[T], bias: &[T]) -> Vec<T> {
    let mut out = vec![T::default(); g.batch * g.out_size()];
    for b in 0..g.batch {
        let xp = g.pad(&x[b * g.in_size()..][..g.in_size()], g.c_in);
        let dst = &mut out[b * g.out_size()..][..g.out_size()];
        let mut o = 0;
        while o + CHANNEL_BLOCK <= g.c_out {
            if !T::simd_block(g, &xp, k, bias, o, dst) {
                correlate_block::<T, CHANNEL_BLOCK>(g, &xp, k, bias, o, dst);
            }
            o += CHANNEL_BLOCK;
        }
        while o < g.c_out {
            correlate_block::<T, 1>(g, &xp, k, bias, o, dst);
            o += 1;
        }
    }
    out
}

fn input_grad<T: Elem>(g: &Geom, grad: &[T], k: &[T]) -> Vec<T> {
    let t = g.transposed();
    let taps = g.taps();
    // kt[c, o, ky, kx] = k[o, c, kh - 1 - ky, kw - 1 - kx]
    let mut kt = vec![T::default(); k.len()];
    for o in 0..g.c_out {
        for c in 0..g.c_in {
            for tap in 0..taps {
                kt[(c * g.c_out + o) * taps + (taps - 1 - tap)] = k[(o * g.c_in + c) * taps + tap];
            }
        }
    }
    correlate(&t, grad, &kt, &vec![T::default(); g.c_in])
}

fn kernel_grad<T: Elem>(g: &Geom, x: &[T], grad: &[T]) -> Vec<T> {
    let (span, plane, wp, taps) = (g.span(), g.plane(), g.wp(), g.taps());
    let mut dk = vec![T::default(); g.c_out * g.c_in * taps];
    for b in 0..g.batch {
        let xp = g.pad(&x[b * g.in_size()..][..g.in_size()], g.c_in);
        if T::simd_kernel_grad(g, &xp, &grad[b * g.out_size()..][..g.out_size()], &mut dk) {
            continue;
        }
        let ext = g.widen(&grad[b * g.out_size()..][..g.out_size()]);
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let tap = ky * g.kw + kx;
                unsafe {
                    gemm::gemm(
                        g.c_out,
                        g.c_in,
                        span,
                        dk.as_mut_ptr().add(tap),
                        taps as isize,
                        (g.c_in * taps) as isize,
                        true,
                        ext.as_ptr(),
                        1,
                        span as isize,
                        xp.as_ptr().add(ky * wp + kx),
                        plane as isize,
                        1,
                        T::ONE,
                        T::ONE,
                        false,
                        false,
                        false,
                        gemm::Parallelism::None,
                    );
                }
            }
        }
    }
    dk
}

fn geom_from(x_shape: &Shape, k_shape: &Shape) -> Result<Geom> {
    let (batch, c_in, h, w) = x_shape.dims4()?;
    let (c_out, kc, kh, kw) = k_shape.dims4()?;
    if kc != c_in {
        candle_core::bail!("same_conv2d: kernel expects {kc} input channels, got {c_in}");
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        candle_core::bail!("same_conv2d: kernel {kh}x{kw} must have odd sides");
    }
    Ok(Geom {
        batch,
        c_in,
        c_out,
        h,
        w,
        kh,
        kw,
    })
}

macro_rules! dispatch {
    ($t:ident, ($($s:expr, $l:expr => $a:ident),+) $body:expr) => {
        match ($($s),+) {
            ($(CpuStorage::F32($a)),+) => {
                $(let $a = contiguous($a, $l)?;)+
                CpuStorage::F32({ type $t = f32; $body })
            }
            ($(CpuStorage::F64($a)),+) => {
                $(let $a = contiguous($a, $l)?;)+
                CpuStorage::F64({ type $t = f64; $body })
            }
            _ => candle_core::bail!("same_conv2d supports matching f32 or f64 operands"),
        }
    };
}

struct SameConv2d;

impl CustomOp3 for SameConv2d {
    fn name(&self) -> &'static str {
        "same-conv2d"
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
        let g = geom_from(l1.shape(), l2.shape())?;
        if l3.shape().dims() != [g.c_out] {
            candle_core::bail!(
                "same_conv2d: bias shape {:?} does not match {} outputs",
                l3.shape(),
                g.c_out
            );
        }
        let out = dispatch!(E, (s1, l1 => x, s2, l2 => k, s3, l3 => bias) correlate::<E>(&g, x, k, bias));
        Ok((out, Shape::from((g.batch, g.c_out, g.h, g.w))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        k: &Tensor,
        _bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(
            k,
            &InputGrad {
                x_shape: x.shape().clone(),
            },
        )?;
        let dk = x.apply_op2_no_bwd(
            &grad,
            &KernelGrad {
                k_shape: k.shape().clone(),
            },
        )?;
        let db = grad.apply_op1_no_bwd(&BiasGrad)?;
        Ok((Some(dx), Some(dk), Some(db)))
    }
}

struct InputGrad {
    x_shape: Shape,
}

impl CustomOp2 for InputGrad {
    fn name(&self) -> &'static str {
        "same-conv2d-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = geom_from(&self.x_shape, l2.shape())?;
        let out = dispatch!(E, (s1, l1 => grad, s2, l2 => k) input_grad::<E>(&g, grad, k));
        Ok((out, self.x_shape.clone()))
    }
}

/// Per-channel sum of the output gradient.
struct BiasGrad;

impl CustomOp1 for BiasGrad {
    fn name(&self) -> &'static str {
        "same-conv2d-bias-grad"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, o, h, w) = l.shape().dims4()?;
        let plane = h * w;
        let out = match s {
            CpuStorage::F32(v) => {
                let v = contiguous(v, l)?;
                CpuStorage::F32(
                    (0..o)
                        .map(|c| {
                            (0..b)
                                .map(|i| v[(i * o + c) * plane..][..plane].iter().sum::<f32>())
                                .sum()
                        })
                        .collect(),
                )
            }
            CpuStorage::F64(v) => {
                let v = contiguous(v, l)?;
                CpuStorage::F64(
                    (0..o)
                        .map(|c| {
                            (0..b)
                                .map(|i| v[(i * o + c) * plane..][..plane].iter().sum::<f64>())
                                .sum()
                        })
                        .collect(),
                )
            }
            _ => candle_core::bail!("same_conv2d supports f32 or f64"),
        };
        Ok((out, Shape::from(o)))
    }
}

struct KernelGrad {
    k_shape: Shape,
}

impl CustomOp2 for KernelGrad {
    fn name(&self) -> &'static str {
        "same-conv2d-kernel-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = geom_from(l1.shape(), &self.k_shape)?;
        let out = dispatch!(E, (s1, l1 => x, s2, l2 => grad) kernel_grad::<E>(&g, x, grad));
        Ok((out, self.k_shape.clone()))
    }
}

/// Convolution of `x: [B, C, H, W]` with `kernel: [O, C, kh, kw]` (odd sides) plus
/// `bias: [O]`, stride 1 and zero padding that keeps the spatial size.
pub fn same_conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if !matches!(x.dtype(), DType::F32 | DType::F64) {
        candle_core::bail!("same_conv2d: unsupported dtype {:?}", x.dtype());
    }
    x.contiguous()?
        .apply_op3(&kernel.contiguous()?, &bias.contiguous()?, SameConv2d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    fn builtin(x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
        let (kh, kw) = (k.dims()[2], k.dims()[3]);
        // The builtin pads symmetrically on both axes, so pad explicitly instead.
        let xp = x
            .pad_with_zeros(2, kh / 2, kh / 2)
            .unwrap()
            .pad_with_zeros(3, kw / 2, kw / 2)
            .unwrap();
        let y = xp.conv2d(k, 0, 1, 1, 1).unwrap();
        y.broadcast_add(&b.reshape((1, b.dims()[0], 1, 1)).unwrap()).unwrap()
    }

    #[test]
    fn matches_builtin_convolution() {
        for &(o, kh, kw, w) in &[(4, 3, 3, 9), (5, 1, 3, 19), (8, 3, 1, 33), (2, 1, 1, 16), (4, 5, 3, 7)] {
            let x = rand(&[2, 3, 7, w], 1);
            let k = rand(&[o, 3, kh, kw], 2);
            let b = rand(&[o], 3);
            let ours = same_conv2d(&x, &k, &b).unwrap();
            let reference = builtin(&x, &k, &b);
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_abs_diff(&ours, &reference) < 1e-12, "{o} {kh}x{kw}");
        }
    }

    #[test]
    fn gradients_match_builtin() {
        for &(o, kh, kw) in &[(4, 3, 3), (5, 1, 3), (3, 3, 1)] {
            let x = Var::from_tensor(&rand(&[2, 3, 6, 21], 3)).unwrap();
            let k = Var::from_tensor(&rand(&[o, 3, kh, kw], 4)).unwrap();
            let b = Var::from_tensor(&rand(&[o], 5)).unwrap();
            let w = rand(&[2, o, 6, 21], 6);
            let ours = (same_conv2d(&x, &k, &b).unwrap() * &w).unwrap().sum_all().unwrap();
            let g1 = ours.backward().unwrap();
            let theirs = (builtin(&x, &k, &b) * &w).unwrap().sum_all().unwrap();
            let g2 = theirs.backward().unwrap();
            for v in [x.as_tensor(), k.as_tensor(), b.as_tensor()] {
                assert!(max_abs_diff(g1.get(v).unwrap(), g2.get(v).unwrap()) < 1e-11);
            }
        }
    }

    #[test]
    fn f32_and_non_contiguous_inputs() {
        let x = rand(&[1, 2, 4, 6], 6).to_dtype(DType::F32).unwrap();
        let xt = x.transpose(2, 3).unwrap();
        let k = rand(&[3, 2, 3, 3], 7).to_dtype(DType::F32).unwrap();
        let b = rand(&[3], 8).to_dtype(DType::F32).unwrap();
        let ours = same_conv2d(&xt, &k, &b).unwrap();
        let reference = builtin(&xt.contiguous().unwrap(), &k, &b);
        assert_eq!(ours.dims(), &[1, 3, 6, 4]);
        let d = (ours - reference)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d < 1e-5);
        let even = rand(&[3, 2, 2, 2], 9).to_dtype(DType::F32).unwrap();
        assert!(same_conv2d(&x, &even, &b).is_err());
    }

    #[test]
    fn vectorized_f32_path_matches_f64() {
        for &(o, kh, kw, w) in &[(8, 3, 3, 37), (4, 1, 3, 16), (8, 3, 1, 5), (4, 1, 1, 21)] {
            let x = Var::from_tensor(&rand(&[2, 5, 9, w], 10)).unwrap();
            let k = Var::from_tensor(&rand(&[o, 5, kh, kw], 11)).unwrap();
            let b = Var::from_tensor(&rand(&[o], 12)).unwrap();
            let wt = rand(&[2, o, 9, w], 13);
            let y64 = same_conv2d(&x, &k, &b).unwrap();
            let g64 = (&y64 * &wt).unwrap().sum_all().unwrap().backward().unwrap();

            let f = |t: &Tensor| Var::from_tensor(&t.to_dtype(DType::F32).unwrap()).unwrap();
            let (x32, k32, b32) = (f(&x), f(&k), f(&b));
            let y32 = same_conv2d(&x32, &k32, &b32).unwrap();
            let g32 = (&y32 * &wt.to_dtype(DType::F32).unwrap())
                .unwrap()
                .sum_all()
                .unwrap()
                .backward()
                .unwrap();
            let up = |t: &Tensor| t.to_dtype(DType::F64).unwrap();
            assert!(max_abs_diff(&up(&y32), &y64) < 1e-4);
            for (v32, v64) in [(&x32, &x), (&k32, &k), (&b32, &b)] {
                let d = max_abs_diff(&up(g32.get(v32).unwrap()), g64.get(v64).unwrap());
                assert!(d < 1e-3, "{o} {kh}x{kw}: {d}");
            }
        }
    }
}
