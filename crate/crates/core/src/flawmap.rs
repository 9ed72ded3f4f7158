//! Ground truth for the flaw detector.
//!
//! The absolute prediction error is sparse and sharp, which makes it a poor
//! regression target. [`pipeline_c`] turns it into a dense probability map:
//! channel-weighted absolute difference, a Gaussian blur at `H/8 x W/8`, `nu`
//! rounds of 3x3 dilation followed by a blur at `H/4 x W/4`, and finally a
//! min-max normalisation to `[0, 1]`.
//!
//! All stages clamp reads at the border (replicate padding). Kernel extents
//! derived from the map size are rounded to the nearest odd integer (ties go
//! up), at least 1 and at most the map extent. The Gaussian uses
//! `sigma = (k - 1) / 6` per axis, so the kernel spans +-3 sigma.

use serde::{Deserialize, Serialize};

use crate::error::{GctError, Result};
use crate::maps::{GrayMap, PixelMap};

/// Parameters of the ground-truth pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineParams {
    /// Channel average coefficient applied to the summed absolute error.
    pub mu: f64,
    /// Number of dilate + blur rounds.
    pub nu: u32,
}

impl PipelineParams {
    /// Segmentation setting: `mu = 1/2`, `nu = 1`.
    pub fn segmentation() -> Self {
        Self { mu: 0.5, nu: 1 }
    }

    /// Setting for tasks with `channels` output channels: `mu = 1/O`, `nu = 1`.
    pub fn channel_mean(channels: usize) -> Self {
        Self {
            mu: 1.0 / channels as f64,
            nu: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return Err(GctError::config("pipeline.mu", format!("must be > 0, got {}", self.mu)));
        }
        Ok(())
    }
}

/// Nearest odd kernel extent to `extent / divisor`; ties round up; clamped to `[1, extent]`.
pub fn derived_kernel(extent: usize, divisor: usize) -> usize {
    let x = extent as f64 / divisor as f64;
    let half = ((x - 1.0) / 2.0 + 0.5).floor().max(0.0) as usize;
    let k = 2 * half + 1;
    let cap = if extent == 0 { 1 } else { extent - (1 - extent % 2) };
    k.min(cap.max(1))
}

/// `mu * sum_o |pred - label|` per pixel.
pub fn channel_abs_diff(pred: &PixelMap, label: &PixelMap, mu: f64) -> Result<GrayMap> {
    if pred.shape() != label.shape() {
        return Err(GctError::input(format!(
            "prediction shape {:?} != label shape {:?}",
            pred.shape(),
            label.shape()
        )));
    }
    if !(mu.is_finite() && mu > 0.0) {
        return Err(GctError::input(format!("mu must be > 0, got {mu}")));
    }
    let o = pred.channels();
    let data = pred
        .data()
        .chunks_exact(o)
        .zip(label.data().chunks_exact(o))
        .map(|(p, l)| mu * p.iter().zip(l).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .collect();
    GrayMap::new(pred.height(), pred.width(), data)
}

/// Normalised 1-D Gaussian of odd length `k` with `sigma = (k - 1) / 6`.
pub fn gaussian_kernel(k: usize) -> Vec<f64> {
    if k <= 1 {
        return vec![1.0];
    }
    let sigma = (k - 1) as f64 / 6.0;
    let c = (k / 2) as f64;
    let w: Vec<f64> = (0..k)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn check_odd(kernel_h: usize, kernel_w: usize) -> Result<()> {
    if kernel_h == 0 || kernel_w == 0 || kernel_h % 2 == 0 || kernel_w % 2 == 0 {
        return Err(GctError::input(format!(
            "kernel {kernel_h}x{kernel_w} must have odd extents >= 1"
        )));
    }
    Ok(())
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable Gaussian blur with replicate borders.
pub fn gaussian_blur(map: &GrayMap, kernel_h: usize, kernel_w: usize) -> Result<GrayMap> {
    check_odd(kernel_h, kernel_w)?;
    let (h, w) = (map.height(), map.width());
    if kernel_h > h || kernel_w > w {
        return Err(GctError::input(format!(
            "kernel {kernel_h}x{kernel_w} exceeds map {h}x{w}"
        )));
    }
    let kh = gaussian_kernel(kernel_h);
    let kw = gaussian_kernel(kernel_w);
    let (rh, rw) = ((kernel_h / 2) as isize, (kernel_w / 2) as isize);
    let src = map.data();

    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = kw
                .iter()
                .enumerate()
                .map(|(j, k)| k * src[y * w + clamp_index(x as isize + j as isize - rw, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kh
                .iter()
                .enumerate()
                .map(|(i, k)| k * rows[clamp_index(y as isize + i as isize - rh, h) * w + x])
                .sum();
        }
    }
    GrayMap::new(h, w, out)
}

/// Square max filter centred on each pixel; windows are clipped at the border,
/// which is the same as replicate padding for a maximum.
pub fn dilate(map: &GrayMap, kernel_h: usize, kernel_w: usize) -> Result<GrayMap> {
    check_odd(kernel_h, kernel_w)?;
    let (h, w) = (map.height(), map.width());
    let (rh, rw) = (kernel_h / 2, kernel_w / 2);
    let src = map.data();
    // Row pass then column pass; a rectangular max is separable.
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(rw);
            let hi = (x + rw).min(w - 1);
            rows[y * w + x] = src[y * w + lo..=y * w + hi]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(rh);
        let hi = (y + rh).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    GrayMap::new(h, w, out)
}

/// Min-max normalisation to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize(map: &GrayMap) -> Result<GrayMap> {
    if map.data().iter().any(|v| !v.is_finite()) {
        return Err(GctError::input("cannot normalise a map with non-finite values"));
    }
    let (lo, hi) = (map.min(), map.max());
    let range = hi - lo;
    let data = if range > 0.0 {
        map.data().iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; map.data().len()]
    };
    GrayMap::new(map.height(), map.width(), data)
}

/// Dense flaw ground truth for one (prediction, label) pair.
pub fn pipeline_c(pred: &PixelMap, label: &PixelMap, params: &PipelineParams) -> Result<GrayMap> {
    params.validate()?;
    let (h, w) = (pred.height(), pred.width());
    let mut gt = channel_abs_diff(pred, label, params.mu)?;
    gt = gaussian_blur(&gt, derived_kernel(h, 8), derived_kernel(w, 8))?;
    for _ in 0..params.nu {
        gt = dilate(&gt, 3, 3)?;
        gt = gaussian_blur(&gt, derived_kernel(h, 4), derived_kernel(w, 4))?;
    }
    normalize(&gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gray(rng: &mut ChaCha8Rng, h: usize, w: usize) -> GrayMap {
        GrayMap::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap()
    }

    fn random_pixels(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> PixelMap {
        PixelMap::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    // Direct 2-D convolution with the outer-product kernel and clamped reads.
    fn blur_oracle(map: &GrayMap, kh: usize, kw: usize) -> GrayMap {
        let (h, w) = (map.height() as isize, map.width() as isize);
        let gh = gaussian_kernel(kh);
        let gw = gaussian_kernel(kw);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, a) in gh.iter().enumerate() {
                    for (j, b) in gw.iter().enumerate() {
                        let yy = (y + i as isize - (kh / 2) as isize).clamp(0, h - 1);
                        let xx = (x + j as isize - (kw / 2) as isize).clamp(0, w - 1);
                        acc += a * b * map.get(yy as usize, xx as usize);
                    }
                }
                out.push(acc);
            }
        }
        GrayMap::new(h as usize, w as usize, out).unwrap()
    }

    fn dilate_oracle(map: &GrayMap, kh: usize, kw: usize) -> GrayMap {
        let (h, w) = (map.height() as isize, map.width() as isize);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let mut m = f64::NEG_INFINITY;
                for dy in -((kh / 2) as isize)..=(kh / 2) as isize {
                    for dx in -((kw / 2) as isize)..=(kw / 2) as isize {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && yy < h && xx >= 0 && xx < w {
                            m = m.max(map.get(yy as usize, xx as usize));
                        }
                    }
                }
                out.push(m);
            }
        }
        GrayMap::new(h as usize, w as usize, out).unwrap()
    }

    fn normalize_oracle(map: &GrayMap) -> GrayMap {
        let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let data = map
            .data()
            .iter()
            .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
            .collect();
        GrayMap::new(map.height(), map.width(), data).unwrap()
    }

    fn abs_diff_oracle(pred: &PixelMap, label: &PixelMap, mu: f64) -> GrayMap {
        let (h, w, c) = pred.shape();
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                for o in 0..c {
                    out[y * w + x] += (pred.get(y, x, o) - label.get(y, x, o)).abs();
                }
                out[y * w + x] *= mu;
            }
        }
        GrayMap::new(h, w, out).unwrap()
    }

    fn assert_close(a: &GrayMap, b: &GrayMap, tol: f64) {
        assert_eq!((a.height(), a.width()), (b.height(), b.width()));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn derived_kernels_are_odd_and_bounded() {
        assert_eq!(derived_kernel(32, 8), 5);
        assert_eq!(derived_kernel(32, 4), 9);
        assert_eq!(derived_kernel(16, 8), 3);
        assert_eq!(derived_kernel(16, 4), 5);
        assert_eq!(derived_kernel(8, 8), 1);
        assert_eq!(derived_kernel(8, 4), 3);
        assert_eq!(derived_kernel(3, 8), 1);
        assert_eq!(derived_kernel(2, 1), 1);
        assert_eq!(derived_kernel(24, 8), 3);
        for n in 1..200 {
            for d in [4, 8] {
                let k = derived_kernel(n, d);
                assert!(k % 2 == 1 && k >= 1 && k <= n);
            }
        }
    }

    #[test]
    fn abs_diff_examples() {
        let z = random_pixels(&mut ChaCha8Rng::seed_from_u64(0), 4, 4, 2);
        assert!(channel_abs_diff(&z, &z, 0.5).unwrap().data().iter().all(|&v| v == 0.0));

        let pred = PixelMap::new(1, 1, 2, vec![0.5, 0.0]).unwrap();
        let label = PixelMap::new(1, 1, 2, vec![0.0, 1.0]).unwrap();
        assert!((channel_abs_diff(&pred, &label, 0.5).unwrap().data()[0] - 0.75).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, l) = (random_pixels(&mut rng, 8, 8, 3), random_pixels(&mut rng, 8, 8, 3));
        assert_close(
            &channel_abs_diff(&p, &l, 1.0 / 3.0).unwrap(),
            &abs_diff_oracle(&p, &l, 1.0 / 3.0),
            1e-9,
        );
    }

    #[test]
    fn abs_diff_rejects_bad_input() {
        let a = PixelMap::zeros(2, 2, 1);
        let b = PixelMap::zeros(2, 2, 2);
        assert!(matches!(channel_abs_diff(&a, &b, 1.0), Err(GctError::InvalidInput(_))));
        assert!(channel_abs_diff(&a, &a, 0.0).is_err());
    }

    #[test]
    fn blur_examples() {
        let zeros = GrayMap::filled(6, 6, 0.0);
        assert!(gaussian_blur(&zeros, 3, 5).unwrap().data().iter().all(|&v| v == 0.0));

        let twos = GrayMap::filled(7, 9, 2.0);
        for v in gaussian_blur(&twos, 5, 7).unwrap().data() {
            assert!((v - 2.0).abs() < 1e-12);
        }

        let mut impulse = vec![0.0; 25];
        impulse[12] = 1.0;
        let impulse = GrayMap::new(5, 5, impulse).unwrap();
        assert_close(&gaussian_blur(&impulse, 3, 3).unwrap(), &blur_oracle(&impulse, 3, 3), 1e-9);
    }

    #[test]
    fn blur_rejects_bad_kernels() {
        let m = GrayMap::filled(4, 4, 1.0);
        assert!(gaussian_blur(&m, 2, 3).is_err());
        assert!(gaussian_blur(&m, 3, 0).is_err());
        assert!(gaussian_blur(&m, 5, 3).is_err());
    }

    #[test]
    fn dilate_examples() {
        let zeros = GrayMap::filled(5, 5, 0.0);
        assert!(dilate(&zeros, 3, 3).unwrap().data().iter().all(|&v| v == 0.0));

        let mut center = vec![0.0; 9];
        center[4] = 1.0;
        let center = GrayMap::new(3, 3, center).unwrap();
        assert!(dilate(&center, 3, 3).unwrap().data().iter().all(|&v| v == 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_gray(&mut rng, 8, 8);
        assert_eq!(dilate(&m, 3, 3).unwrap(), dilate_oracle(&m, 3, 3));
        assert_eq!(dilate(&m, 5, 3).unwrap(), dilate_oracle(&m, 5, 3));
        assert!(dilate(&m, 2, 3).is_err());
    }

    #[test]
    fn normalize_examples() {
        let zeros = GrayMap::filled(3, 3, 0.0);
        assert_eq!(normalize(&zeros).unwrap(), zeros);
        let m = GrayMap::new(1, 3, vec![1.0, 3.0, 5.0]).unwrap();
        assert_eq!(normalize(&m).unwrap().data(), &[0.0, 0.5, 1.0]);
        let constant = GrayMap::filled(2, 2, 4.0);
        assert!(normalize(&constant).unwrap().data().iter().all(|&v| v == 0.0));
        let bad = GrayMap::new(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(normalize(&bad).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_gray(&mut rng, 8, 8);
        assert_eq!(normalize(&r).unwrap().max(), 1.0);
    }

    #[test]
    fn stagewise_oracles_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let m = random_gray(&mut rng, 8, 8);
            assert_close(&gaussian_blur(&m, 1, 1).unwrap(), &blur_oracle(&m, 1, 1), 1e-9);
            assert_close(&gaussian_blur(&m, 3, 3).unwrap(), &blur_oracle(&m, 3, 3), 1e-9);
            assert_close(&gaussian_blur(&m, 5, 7).unwrap(), &blur_oracle(&m, 5, 7), 1e-9);
            assert_close(&dilate(&m, 3, 3).unwrap(), &dilate_oracle(&m, 3, 3), 0.0);
            assert_close(&normalize(&m).unwrap(), &normalize_oracle(&m), 1e-9);
        }
    }

    #[test]
    fn pipeline_matches_chained_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (p, l) = (random_pixels(&mut rng, 16, 16, 3), random_pixels(&mut rng, 16, 16, 3));
        for nu in [0, 1, 3] {
            let params = PipelineParams { mu: 1.0 / 3.0, nu };
            let mut want = abs_diff_oracle(&p, &l, params.mu);
            want = blur_oracle(&want, 3, 3);
            for _ in 0..nu {
                want = dilate_oracle(&want, 3, 3);
                want = blur_oracle(&want, 5, 5);
            }
            let want = normalize_oracle(&want);
            assert_close(&pipeline_c(&p, &l, &params).unwrap(), &want, 1e-9);
        }
    }

    #[test]
    fn pipeline_identity_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_pixels(&mut rng, 12, 10, 2);
        let out = pipeline_c(&p, &p, &PipelineParams::channel_mean(2)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        for _ in 0..20 {
            let (a, b) = (random_pixels(&mut rng, 9, 13, 2), random_pixels(&mut rng, 9, 13, 2));
            let out = pipeline_c(&a, &b, &PipelineParams { mu: 0.7, nu: 2 }).unwrap();
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn presets() {
        assert_eq!(PipelineParams::segmentation(), PipelineParams { mu: 0.5, nu: 1 });
        assert_eq!(PipelineParams::channel_mean(3).mu, 1.0 / 3.0);
        assert!(PipelineParams { mu: 0.0, nu: 1 }.validate().is_err());
    }

    #[test]
    fn dilation_is_extensive_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a = random_gray(&mut rng, 7, 9);
            let bump: Vec<f64> = a.data().iter().map(|v| v + rng.random_range(0.0..1.0)).collect();
            let b = GrayMap::new(7, 9, bump).unwrap();
            let (da, db) = (dilate(&a, 3, 3).unwrap(), dilate(&b, 3, 3).unwrap());
            for i in 0..a.data().len() {
                assert!(da.data()[i] >= a.data()[i]);
                assert!(db.data()[i] >= da.data()[i]);
            }
        }
    }
}
