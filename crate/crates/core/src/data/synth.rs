use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, Target};
use crate::error::{GctError, Result};
use crate::maps::PixelMap;

/// Generator parameters; two equal specs produce bit-identical datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: SynthKind,
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthKind {
    Segmentation { classes: usize },
    Denoising { noise_sigma: f64 },
}

impl DatasetSpec {
    pub fn name(&self) -> String {
        match self.kind {
            SynthKind::Segmentation { classes } => {
                format!("synth_seg_c{classes}_s{}_n{}_seed{}", self.size, self.count, self.seed)
            }
            SynthKind::Denoising { noise_sigma } => {
                format!("synth_denoise_sigma{noise_sigma}_s{}_n{}_seed{}", self.size, self.count, self.seed)
            }
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        match self.kind {
            SynthKind::Segmentation { classes } => synth_segmentation(self.count, self.size, classes, self.seed),
            SynthKind::Denoising { noise_sigma } => synth_denoising(self.count, self.size, noise_sigma, self.seed),
        }
    }
}

/// Smallest image side the shape generator accepts.
pub const MIN_SIZE: usize = 16;
/// Background plus one class per shape family.
pub const MAX_CLASSES: usize = 6;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy)]
enum Family {
    Disk,
    Square,
    Triangle,
    Diamond,
    Ring,
}

impl Family {
    fn for_class(class: u32) -> Family {
        match class {
            1 => Family::Disk,
            2 => Family::Square,
            3 => Family::Triangle,
            4 => Family::Diamond,
            _ => Family::Ring,
        }
    }

    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Family::Disk => dx * dx + dy * dy <= r * r,
            Family::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Family::Triangle => {
                // apex up, base at dy = r / 2
                let top = -r;
                let base = 0.5 * r;
                dy >= top && dy <= base && dx.abs() <= (dy - top) / (base - top) * 0.9 * r
            }
            Family::Diamond => dx.abs() + dy.abs() <= 1.1 * r,
            Family::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.36 * r * r
            }
        }
    }
}

fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn smooth_field(rng: &mut ChaCha8Rng, size: usize, terms: usize, amplitude: f64) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..terms)
        .map(|_| {
            let fx = rng.random_range(0.0..2.0);
            let fy = rng.random_range(0.0..2.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let a = rng.random_range(0.3..1.0) * amplitude / terms as f64;
            (fx, fy, phase, a)
        })
        .collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
            out[y * size + x] = waves
                .iter()
                .map(|(fx, fy, p, a)| a * (std::f64::consts::TAU * (fx * u + fy * v) + p).cos())
                .sum();
        }
    }
    out
}

/// Paints antialiased shape `family` into `image` (HWC, 3 channels); returns
/// per-pixel coverage.
fn paint(image: &mut [f64], size: usize, family: Family, cx: f64, cy: f64, r: f64, color: [f64; 3]) -> Vec<f64> {
    let mut coverage = vec![0.0; size * size];
    let step = 1.0 / SUPERSAMPLE as f64;
    let x0 = ((cx - 1.2 * r).floor().max(0.0)) as usize;
    let x1 = ((cx + 1.2 * r).ceil() as usize).min(size);
    let y0 = ((cy - 1.2 * r).floor().max(0.0)) as usize;
    let y1 = ((cy + 1.2 * r).ceil() as usize).min(size);
    for y in y0..y1 {
        for x in x0..x1 {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    if family.contains(px - cx, py - cy, r) {
                        hits += 1;
                    }
                }
            }
            let a = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            coverage[y * size + x] = a;
            for c in 0..3 {
                let v = &mut image[(y * size + x) * 3 + c];
                *v = (1.0 - a) * *v + a * color[c];
            }
        }
    }
    coverage
}

/// RGB images of 1 to 3 shapes over a smooth background. Each foreground class
/// has its own shape family; colours are random and carry no class
/// information. A pixel takes the class of the topmost shape covering at
/// least half of it.
/// Colour prototypes of the foreground classes; shapes are tinted around them.
const CLASS_COLORS: [[f64; 3]; MAX_CLASSES - 1] = [
    [0.85, 0.2, 0.2],
    [0.2, 0.75, 0.25],
    [0.2, 0.3, 0.9],
    [0.9, 0.85, 0.2],
    [0.8, 0.2, 0.8],
];
const COLOR_JITTER: f64 = 0.35;

pub fn synth_segmentation(count: usize, size: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if !(2..=MAX_CLASSES).contains(&classes) {
        return Err(GctError::config("data.classes", format!("must be in 2..={MAX_CLASSES}")));
    }
    if size < MIN_SIZE {
        return Err(GctError::config("data.size", format!("shapes need images of at least {MIN_SIZE} px")));
    }
    let samples = (0..count as u64)
        .map(|id| {
            let mut rng = sample_rng(seed, id);
            let gray = rng.random_range(0.3..0.7);
            let base: [f64; 3] = std::array::from_fn(|_| gray + rng.random_range(-0.05..0.05));
            let field = smooth_field(&mut rng, size, 3, 0.3);
            let mut image = vec![0.0; size * size * 3];
            for (i, f) in field.iter().enumerate() {
                for c in 0..3 {
                    image[i * 3 + c] = base[c] + f;
                }
            }
            let mut ids = vec![0u32; size * size];
            let shapes = rng.random_range(1..=3);
            let s = size as f64;
            for _ in 0..shapes {
                let class = rng.random_range(1..classes as u32);
                let r = rng.random_range(s / 8.0..s / 4.0);
                let cx = rng.random_range(r * 0.5..s - r * 0.5);
                let cy = rng.random_range(r * 0.5..s - r * 0.5);
                let proto = CLASS_COLORS[class as usize - 1];
                let color: [f64; 3] =
                    std::array::from_fn(|c| (proto[c] + rng.random_range(-COLOR_JITTER..COLOR_JITTER)).clamp(0.0, 1.0));
                let cov = paint(&mut image, size, Family::for_class(class), cx, cy, r, color);
                for (i, a) in cov.iter().enumerate() {
                    if *a >= 0.5 {
                        ids[i] = class;
                    }
                }
            }
            for v in image.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v = (*v + 0.04 * n).clamp(0.0, 1.0);
            }
            Ok(Sample {
                id,
                image: PixelMap::new(size, size, 3, image)?,
                label: Some(Target::Classes { classes, ids }),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: DatasetSpec {
            kind: SynthKind::Segmentation { classes },
            count,
            size,
            seed,
        },
        samples,
    })
}

/// Signal-dependent noise: per-pixel standard deviation is
/// `sigma * sqrt(read + shot * clean)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseNoise {
    pub sigma: f64,
    pub read: f64,
    pub shot: f64,
    /// Clip noisy inputs to `[0, 1]`.
    pub clip: bool,
}

impl DenoiseNoise {
    pub fn new(sigma: f64) -> Self {
        Self {
            sigma,
            read: 0.25,
            shot: 0.75,
            clip: true,
        }
    }

    pub fn variance(&self, clean: f64) -> f64 {
        self.sigma * self.sigma * (self.read + self.shot * clean)
    }
}

/// RGB smooth random fields with a few flat shapes as clean targets; inputs are
/// the clean images plus signal-dependent Gaussian noise, clipped to `[0, 1]`.
pub fn synth_denoising(count: usize, size: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    synth_denoising_with(count, size, DenoiseNoise::new(noise_sigma), seed)
}

pub fn synth_denoising_with(count: usize, size: usize, noise: DenoiseNoise, seed: u64) -> Result<Dataset> {
    if !(noise.sigma.is_finite() && noise.sigma >= 0.0) {
        return Err(GctError::config("data.noise_sigma", "must be finite and >= 0"));
    }
    if size < MIN_SIZE {
        return Err(GctError::config("data.size", format!("shapes need images of at least {MIN_SIZE} px")));
    }
    let samples = (0..count as u64)
        .map(|id| {
            let mut rng = sample_rng(seed, id);
            let mut clean = vec![0.0; size * size * 3];
            for c in 0..3 {
                let base = rng.random_range(0.3..0.7);
                let field = smooth_field(&mut rng, size, 4, 0.5);
                for (i, f) in field.iter().enumerate() {
                    clean[i * 3 + c] = base + f;
                }
            }
            let s = size as f64;
            for _ in 0..rng.random_range(1..=2) {
                let family = Family::for_class(rng.random_range(1..=5));
                let r = rng.random_range(s / 8.0..s / 4.0);
                let cx = rng.random_range(0.0..s);
                let cy = rng.random_range(0.0..s);
                let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
                paint(&mut clean, size, family, cx, cy, r, color);
            }
            for v in clean.iter_mut() {
                *v = v.clamp(0.05, 0.95);
            }
            let noisy: Vec<f64> = clean
                .iter()
                .map(|&c| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    let v = c + noise.variance(c).sqrt() * n;
                    if noise.clip {
                        v.clamp(0.0, 1.0)
                    } else {
                        v
                    }
                })
                .collect();
            Ok(Sample {
                id,
                image: PixelMap::new(size, size, 3, noisy)?,
                label: Some(Target::Values(PixelMap::new(size, size, 3, clean)?)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: DatasetSpec {
            kind: SynthKind::Denoising {
                noise_sigma: noise.sigma,
            },
            count,
            size,
            seed,
        },
        samples,
    })
}
