//! Tensor primitives missing from candle's CPU backend, all on NHWC layout.
//!
//! Convolutions are lowered to `im2col` + a single GEMM. The gather and its
//! adjoint (`col2im`) are custom ops so that the backward pass of a
//! convolution is two GEMMs plus a scatter, instead of candle's direct
//! transposed convolution.

use std::ops::AddAssign;

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};

use crate::error::{GctError, Result};

/// Geometry of a 2-D patch extraction over an NHWC tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PatchGeom {
    /// Row length of the patch matrix.
    pub fn patch_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.channels
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// "Same" padding in the asymmetric convention: output size is `ceil(n / stride)`
/// and any odd remainder of padding goes after the data.
pub fn same_padding(n: usize, kernel: usize, stride: usize) -> (usize, usize, usize) {
    let out = n.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(n);
    let before = total / 2;
    (out, before, total - before)
}

fn im2col<T: Copy + Default>(src: &[T], g: &PatchGeom) -> Vec<T> {
    let k = g.patch_len();
    let c = g.channels;
    let mut dst = vec![T::default(); g.rows() * k];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * k;
                for ky in 0..g.kernel_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let s = ((b * g.height + iy as usize) * g.width + ix as usize) * c;
                        let d = row + (ky * g.kernel_w + kx) * c;
                        dst[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    dst
}

fn col2im<T: Copy + Default + AddAssign>(src: &[T], g: &PatchGeom) -> Vec<T> {
    let k = g.patch_len();
    let c = g.channels;
    let mut dst = vec![T::default(); g.batch * g.height * g.width * c];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * k;
                for ky in 0..g.kernel_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let d = ((b * g.height + iy as usize) * g.width + ix as usize) * c;
                        let s = row + (ky * g.kernel_w + kx) * c;
                        for (o, i) in dst[d..d + c].iter_mut().zip(&src[s..s + c]) {
                            *o += *i;
                        }
                    }
                }
            }
        }
    }
    dst
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, name: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(candle_core::Error::Msg(format!("{name}: input must be contiguous"))),
    }
}

/// Patch gather: `[B, H, W, C] -> [B * OH * OW, KH * KW * C]`.
struct Im2Col(PatchGeom);

/// Adjoint of [`Im2Col`]: scatter-add patches back onto the image grid.
struct Col2Im(PatchGeom);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.rows(), g.patch_len()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous(v, layout, self.name())?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous(v, layout, self.name())?, g)),
            _ => return Err(candle_core::Error::Msg("im2col: unsupported dtype".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.batch, g.height, g.width, g.channels));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous(v, layout, self.name())?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous(v, layout, self.name())?, g)),
            _ => return Err(candle_core::Error::Msg("col2im: unsupported dtype".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Extracts convolution patches from an NHWC tensor with "same" padding.
///
/// Returns the `[B * OH * OW, KH * KW * C]` patch matrix and its geometry.
pub fn patches(x: &Tensor, kernel_h: usize, kernel_w: usize, stride: usize) -> Result<(Tensor, PatchGeom)> {
    let (batch, height, width, channels) = x.dims4()?;
    if stride == 0 || kernel_h == 0 || kernel_w == 0 {
        return Err(GctError::input("kernel and stride must be positive"));
    }
    let (out_h, pad_top, _) = same_padding(height, kernel_h, stride);
    let (out_w, pad_left, _) = same_padding(width, kernel_w, stride);
    let geom = PatchGeom {
        batch,
        height,
        width,
        channels,
        kernel_h,
        kernel_w,
        stride,
        pad_top,
        pad_left,
        out_h,
        out_w,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(geom))?;
    Ok((cols, geom))
}

trait Real: Copy + Default + AddAssign + candle_core::WithDType + 'static {}
impl Real for f32 {}
impl Real for f64 {}

/// `dst = lhs * rhs` (or `dst += ...`) for dense matrices given by their row and
/// column strides.
#[allow(clippy::too_many_arguments)]
fn matmul_into<T: Real>(
    dst: &mut [T],
    accumulate: bool,
    (m, n, k): (usize, usize, usize),
    lhs: &[T],
    (lhs_rs, lhs_cs): (usize, usize),
    rhs: &[T],
    (rhs_rs, rhs_cs): (usize, usize),
) {
    assert!(dst.len() >= m * n);
    assert!(lhs.len() > (m.max(1) - 1) * lhs_rs + (k.max(1) - 1) * lhs_cs || m * k == 0);
    assert!(rhs.len() > (k.max(1) - 1) * rhs_rs + (n.max(1) - 1) * rhs_cs || k * n == 0);
    if m * n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            dst[..m * n].fill(T::default());
        }
        return;
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs as isize,
            lhs_rs as isize,
            rhs.as_ptr(),
            rhs_cs as isize,
            rhs_rs as isize,
            T::from_f64(1.0),
            T::from_f64(1.0),
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

/// Convolution with bias, `(x [B,H,W,C], w [KH*KW*C, O], b [O]) -> [B,OH,OW,O]`.
/// The backward pass produces all three gradients directly.
struct ConvOp(PatchGeom);

impl ConvOp {
    fn is_pointwise(&self) -> bool {
        self.0.kernel_h == 1 && self.0.kernel_w == 1 && self.0.stride == 1
    }

    fn fwd<T: Real>(&self, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
        let g = &self.0;
        let (m, k, o) = (g.rows(), g.patch_len(), b.len());
        let gathered;
        let cols: &[T] = if self.is_pointwise() {
            x
        } else {
            gathered = im2col(x, g);
            &gathered
        };
        let mut y: Vec<T> = Vec::with_capacity(m * o);
        for _ in 0..m {
            y.extend_from_slice(b);
        }
        matmul_into(&mut y, true, (m, o, k), cols, (k, 1), w, (o, 1));
        y
    }

    /// Returns `(grad_x, grad_w, grad_b)`, each only when requested.
    fn bwd<T: Real>(&self, x: &[T], w: &[T], gy: &[T], want: [bool; 3]) -> [Option<Vec<T>>; 3] {
        let g = &self.0;
        let (m, k) = (g.rows(), g.patch_len());
        let o = gy.len() / m.max(1);
        let grad_x = want[0].then(|| {
            let mut gc = vec![T::default(); m * k];
            matmul_into(&mut gc, false, (m, k, o), gy, (o, 1), w, (1, o));
            if self.is_pointwise() {
                gc
            } else {
                col2im(&gc, g)
            }
        });
        let grad_w = want[1].then(|| {
            let gathered;
            let cols: &[T] = if self.is_pointwise() {
                x
            } else {
                gathered = im2col(x, g);
                &gathered
            };
            let mut gw = vec![T::default(); k * o];
            matmul_into(&mut gw, false, (k, o, m), cols, (1, k), gy, (o, 1));
            gw
        });
        let grad_b = want[2].then(|| {
            let mut gb = vec![T::default(); o];
            for row in gy.chunks_exact(o) {
                for (a, v) in gb.iter_mut().zip(row) {
                    *a += *v;
                }
            }
            gb
        });
        [grad_x, grad_w, grad_b]
    }
}

fn host_vec<T: Real>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

impl candle_core::CustomOp3 for ConvOp {
    fn name(&self) -> &'static str {
        "conv2d-nhwc"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let o = l3.shape().elem_count();
        let shape = Shape::from((g.batch, g.out_h, g.out_w, o));
        let n = self.name();
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => CpuStorage::F32(self.fwd(
                contiguous(x, l1, n)?,
                contiguous(w, l2, n)?,
                contiguous(b, l3, n)?,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => CpuStorage::F64(self.fwd(
                contiguous(x, l1, n)?,
                contiguous(w, l2, n)?,
                contiguous(b, l3, n)?,
            )),
            _ => return Err(candle_core::Error::Msg("conv2d: unsupported or mixed dtypes".into())),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let want = [x.track_op(), w.track_op(), b.track_op()];
        fn run<T: Real>(
            op: &ConvOp,
            x: &Tensor,
            w: &Tensor,
            g: &Tensor,
            want: [bool; 3],
        ) -> candle_core::Result<[Option<Vec<T>>; 3]> {
            let xs = if want[1] { host_vec::<T>(x)? } else { Vec::new() };
            let ws = if want[0] { host_vec::<T>(w)? } else { Vec::new() };
            Ok(op.bwd(&xs, &ws, &host_vec::<T>(g)?, want))
        }
        let dev = x.device();
        let wrap = |v: Option<Vec<f64>>, like: &Tensor| -> candle_core::Result<Option<Tensor>> {
            v.map(|v| Tensor::from_vec(v, like.shape(), dev)).transpose()
        };
        let wrap32 = |v: Option<Vec<f32>>, like: &Tensor| -> candle_core::Result<Option<Tensor>> {
            v.map(|v| Tensor::from_vec(v, like.shape(), dev)).transpose()
        };
        match x.dtype() {
            DType::F64 => {
                let [gx, gw, gb] = run::<f64>(self, x, w, grad_res, want)?;
                Ok((wrap(gx, x)?, wrap(gw, w)?, wrap(gb, b)?))
            }
            DType::F32 => {
                let [gx, gw, gb] = run::<f32>(self, x, w, grad_res, want)?;
                Ok((wrap32(gx, x)?, wrap32(gw, w)?, wrap32(gb, b)?))
            }
            _ => Err(candle_core::Error::Msg("conv2d: unsupported dtype".into())),
        }
    }
}

/// "Same"-padded convolution of an NHWC tensor with a `[KH * KW * C, O]`
/// weight matrix and an `[O]` bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let (batch, height, width, channels) = x.dims4()?;
    if stride == 0 || kernel == 0 {
        return Err(GctError::input("kernel and stride must be positive"));
    }
    let (k, o) = weight.dims2()?;
    if k != kernel * kernel * channels || bias.dims1()? != o {
        return Err(GctError::input(format!(
            "conv weight {k}x{o} and bias {:?} do not fit a {kernel}x{kernel} kernel over {channels} channels",
            bias.dims()
        )));
    }
    let (out_h, pad_top, _) = same_padding(height, kernel, stride);
    let (out_w, pad_left, _) = same_padding(width, kernel, stride);
    let geom = PatchGeom {
        batch,
        height,
        width,
        channels,
        kernel_h: kernel,
        kernel_w: kernel,
        stride,
        pad_top,
        pad_left,
        out_h,
        out_w,
    };
    Ok(x.contiguous()?.apply_op3(&weight.contiguous()?, &bias.contiguous()?, ConvOp(geom))?)
}

fn unary_storage(
    storage: &CpuStorage,
    layout: &Layout,
    name: &str,
    f32_op: impl Fn(&[f32]) -> Vec<f32>,
    f64_op: impl Fn(&[f64]) -> Vec<f64>,
) -> candle_core::Result<CpuStorage> {
    Ok(match storage {
        CpuStorage::F32(v) => CpuStorage::F32(f32_op(contiguous(v, layout, name)?)),
        CpuStorage::F64(v) => CpuStorage::F64(f64_op(contiguous(v, layout, name)?)),
        _ => return Err(candle_core::Error::Msg(format!("{name}: unsupported dtype"))),
    })
}

/// Elementwise `x` for `x >= 0`, `slope * x` otherwise.
struct LeakyRelu(f64);

impl LeakyRelu {
    fn fwd<T: Real>(&self, x: &[T]) -> Vec<T> {
        let s = T::from_f64(self.0);
        let zero = T::default();
        x.iter().map(|&v| if v >= zero { v } else { v * s }).collect()
    }

    fn bwd<T: Real>(&self, x: &[T], g: &[T]) -> Vec<T> {
        let s = T::from_f64(self.0);
        let zero = T::default();
        x.iter().zip(g).map(|(&v, &d)| if v >= zero { d } else { d * s }).collect()
    }
}

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = unary_storage(storage, layout, self.name(), |v| self.fwd(v), |v| self.fwd(v))?;
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = match arg.dtype() {
            DType::F32 => Tensor::from_vec(self.bwd(&host_vec::<f32>(arg)?, &host_vec::<f32>(grad_res)?), arg.shape(), arg.device())?,
            DType::F64 => Tensor::from_vec(self.bwd(&host_vec::<f64>(arg)?, &host_vec::<f64>(grad_res)?), arg.shape(), arg.device())?,
            _ => return Err(candle_core::Error::Msg("leaky-relu: unsupported dtype".into())),
        };
        Ok(Some(g))
    }
}

/// Nearest-neighbour 2x upsampling of `[B, H, W, C]`.
struct Upsample2x {
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
}

impl Upsample2x {
    fn fwd<T: Real>(&self, x: &[T]) -> Vec<T> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = Vec::with_capacity(x.len() * 4);
        for b in 0..self.batch {
            for y in 0..h {
                let row = &x[(b * h + y) * w * c..(b * h + y + 1) * w * c];
                for _ in 0..2 {
                    for px in row.chunks_exact(c) {
                        out.extend_from_slice(px);
                        out.extend_from_slice(px);
                    }
                }
            }
        }
        out
    }

    fn bwd<T: Real>(&self, g: &[T]) -> Vec<T> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![T::default(); self.batch * h * w * c];
        for b in 0..self.batch {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    let s = ((b * 2 * h + y) * 2 * w + x) * c;
                    let d = ((b * h + y / 2) * w + x / 2) * c;
                    for (o, v) in out[d..d + c].iter_mut().zip(&g[s..s + c]) {
                        *o += *v;
                    }
                }
            }
        }
        out
    }
}

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample-nearest-2x"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = unary_storage(storage, layout, self.name(), |v| self.fwd(v), |v| self.fwd(v))?;
        Ok((out, Shape::from((self.batch, 2 * self.height, 2 * self.width, self.channels))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = match arg.dtype() {
            DType::F32 => Tensor::from_vec(self.bwd(&host_vec::<f32>(grad_res)?), arg.shape(), arg.device())?,
            DType::F64 => Tensor::from_vec(self.bwd(&host_vec::<f64>(grad_res)?), arg.shape(), arg.device())?,
            _ => return Err(candle_core::Error::Msg("upsample: unsupported dtype".into())),
        };
        Ok(Some(g))
    }
}

/// Per-channel normalisation of `[N, C]` with the batch's own mean and biased
/// variance, then `gamma * xhat + beta`.
struct BatchNormOp {
    eps: f64,
}

/// Per-channel mean and `1 / sqrt(var + eps)` of an `[N, C]` buffer.
fn channel_stats<T: Real>(x: &[T], c: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = (x.len() / c).max(1) as f64;
    let mut mean = vec![0f64; c];
    for row in x.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.to_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0f64; c];
    for row in x.chunks_exact(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.to_f64() - m;
            *s += d * d;
        }
    }
    let inv = var.iter().map(|s| 1.0 / (s / n + eps).sqrt()).collect();
    (mean, inv)
}

impl BatchNormOp {
    fn fwd<T: Real>(&self, x: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
        let c = gamma.len();
        let (mean, inv) = channel_stats(x, c, self.eps);
        let scale: Vec<f64> = (0..c).map(|j| gamma[j].to_f64() * inv[j]).collect();
        let shift: Vec<f64> = (0..c).map(|j| beta[j].to_f64() - mean[j] * scale[j]).collect();
        x.chunks_exact(c)
            .flat_map(|row| (0..c).map(|j| T::from_f64(row[j].to_f64() * scale[j] + shift[j])).collect::<Vec<_>>())
            .collect()
    }

    fn bwd<T: Real>(&self, x: &[T], gamma: &[T], g: &[T], want: [bool; 3]) -> [Option<Vec<T>>; 3] {
        let c = gamma.len();
        let n = (x.len() / c).max(1) as f64;
        let (mean, inv) = channel_stats(x, c, self.eps);
        let mut sum_g = vec![0f64; c];
        let mut sum_gx = vec![0f64; c];
        for (row, grow) in x.chunks_exact(c).zip(g.chunks_exact(c)) {
            for j in 0..c {
                let xhat = (row[j].to_f64() - mean[j]) * inv[j];
                let d = grow[j].to_f64();
                sum_g[j] += d;
                sum_gx[j] += d * xhat;
            }
        }
        let grad_x = want[0].then(|| {
            let mut out = Vec::with_capacity(x.len());
            for (row, grow) in x.chunks_exact(c).zip(g.chunks_exact(c)) {
                for j in 0..c {
                    let xhat = (row[j].to_f64() - mean[j]) * inv[j];
                    let k = gamma[j].to_f64() * inv[j] / n;
                    out.push(T::from_f64(k * (n * grow[j].to_f64() - sum_g[j] - xhat * sum_gx[j])));
                }
            }
            out
        });
        let grad_gamma = want[1].then(|| sum_gx.iter().map(|&v| T::from_f64(v)).collect());
        let grad_beta = want[2].then(|| sum_g.iter().map(|&v| T::from_f64(v)).collect());
        [grad_x, grad_gamma, grad_beta]
    }
}

impl candle_core::CustomOp3 for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = self.name();
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => {
                CpuStorage::F32(self.fwd(contiguous(x, l1, n)?, contiguous(g, l2, n)?, contiguous(b, l3, n)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                CpuStorage::F64(self.fwd(contiguous(x, l1, n)?, contiguous(g, l2, n)?, contiguous(b, l3, n)?))
            }
            _ => return Err(candle_core::Error::Msg("batch-norm: unsupported or mixed dtypes".into())),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let want = [x.track_op(), gamma.track_op(), beta.track_op()];
        let dev = x.device();
        macro_rules! run {
            ($t:ty) => {{
                let [gx, gg, gb] =
                    self.bwd(&host_vec::<$t>(x)?, &host_vec::<$t>(gamma)?, &host_vec::<$t>(grad_res)?, want);
                Ok((
                    gx.map(|v| Tensor::from_vec(v, x.shape(), dev)).transpose()?,
                    gg.map(|v| Tensor::from_vec(v, gamma.shape(), dev)).transpose()?,
                    gb.map(|v| Tensor::from_vec(v, beta.shape(), dev)).transpose()?,
                ))
            }};
        }
        match x.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            _ => Err(candle_core::Error::Msg("batch-norm: unsupported dtype".into())),
        }
    }
}

/// Batch normalisation of `[N, C]` using the batch's own statistics.
pub fn batch_norm_batch_stats(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, c) = x.dims2()?;
    if gamma.dims1()? != c || beta.dims1()? != c {
        return Err(GctError::input("batch norm affine parameters do not match the channel count"));
    }
    Ok(x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, BatchNormOp { eps })?)
}

/// Bilinear interpolation matrix `[out, in]` with aligned corners.
pub fn bilinear_matrix(out: usize, input: usize, dtype: DType) -> Result<Tensor> {
    let mut m = vec![0f64; out * input];
    for i in 0..out {
        if input == 1 {
            m[i] = 1.0;
            continue;
        }
        let src = if out == 1 {
            0.0
        } else {
            i as f64 * (input - 1) as f64 / (out - 1) as f64
        };
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        let frac = src - lo as f64;
        m[i * input + lo] += 1.0 - frac;
        if hi != lo {
            m[i * input + hi] += frac;
        }
    }
    Ok(Tensor::from_vec(m, (out, input), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Bilinear resize (aligned corners) of a `[B, h, w]` map to `[B, H, W]`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, h, w) = x.dims3()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dtype = x.dtype();
    let rows = bilinear_matrix(out_h, h, dtype)?;
    let cols = bilinear_matrix(out_w, w, dtype)?;
    // [B*h, w] x [w, W] -> [B, h, W] -> [B, W, h] -> [B*W, h] x [h, H]
    let y = x.reshape((b * h, w))?.matmul(&cols.t()?)?;
    let y = y.reshape((b, h, out_w))?.transpose(1, 2)?.contiguous()?;
    let y = y.reshape((b * out_w, h))?.matmul(&rows.t()?)?;
    Ok(y.reshape((b, out_w, out_h))?.transpose(1, 2)?.contiguous()?)
}

/// Nearest-neighbour 2x upsampling of an NHWC tensor.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (batch, height, width, channels) = x.dims4()?;
    Ok(x.contiguous()?.apply_op1(Upsample2x {
        batch,
        height,
        width,
        channels,
    })?)
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(candle_core::D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(candle_core::D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Logistic function in its `tanh` form, which stays finite for any input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(LeakyRelu(slope))?)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    leaky_relu(x, 0.0)
}
