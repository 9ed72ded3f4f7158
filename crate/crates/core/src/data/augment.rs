use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Sample, Target};
use crate::error::{GctError, Result};
use crate::maps::PixelMap;

/// Spatial transforms applied identically to image and label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentOp {
    /// Mirror left-right with probability 1/2.
    Hflip,
    /// Cut a random `height x width` window and scale it back to the full
    /// size: bilinear for images and regression labels, nearest for class ids.
    RandomCrop { height: usize, width: usize },
}

fn flip_map(m: &PixelMap) -> PixelMap {
    let (h, w, c) = m.shape();
    let mut out = Vec::with_capacity(m.data().len());
    for y in 0..h {
        for x in (0..w).rev() {
            out.extend_from_slice(&m.data()[(y * w + x) * c..(y * w + x + 1) * c]);
        }
    }
    PixelMap::new(h, w, c, out).expect("same size")
}

fn flip_ids(ids: &[u32], h: usize, w: usize) -> Vec<u32> {
    (0..h).flat_map(|y| (0..w).rev().map(move |x| ids[y * w + x])).collect()
}

/// Deterministic left-right mirror.
pub fn hflip(sample: &Sample) -> Sample {
    let (h, w, _) = sample.image.shape();
    Sample {
        id: sample.id,
        image: flip_map(&sample.image),
        label: sample.label.as_ref().map(|t| match t {
            Target::Classes { classes, ids } => Target::Classes {
                classes: *classes,
                ids: flip_ids(ids, h, w),
            },
            Target::Values(m) => Target::Values(flip_map(m)),
        }),
    }
}

/// Source coordinate of output pixel `o` when scaling `len` pixels starting at
/// `start` onto `out` pixels, pixel centres aligned.
fn src_coord(o: usize, start: usize, len: usize, out: usize) -> f64 {
    start as f64 + ((o as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, len as f64 - 1.0)
}

fn crop_bilinear(m: &PixelMap, top: usize, left: usize, ch: usize, cw: usize) -> PixelMap {
    let (h, w, c) = m.shape();
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let sy = src_coord(y, top, ch, h);
        let (y0, fy) = (sy.floor() as usize, sy - sy.floor());
        let y1 = (y0 + 1).min(top + ch - 1);
        for x in 0..w {
            let sx = src_coord(x, left, cw, w);
            let (x0, fx) = (sx.floor() as usize, sx - sx.floor());
            let x1 = (x0 + 1).min(left + cw - 1);
            for k in 0..c {
                let v = (1.0 - fy) * ((1.0 - fx) * m.get(y0, x0, k) + fx * m.get(y0, x1, k))
                    + fy * ((1.0 - fx) * m.get(y1, x0, k) + fx * m.get(y1, x1, k));
                out.push(v);
            }
        }
    }
    PixelMap::new(h, w, c, out).expect("same size")
}

fn crop_nearest(ids: &[u32], h: usize, w: usize, top: usize, left: usize, ch: usize, cw: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = top + ((y * ch) / h).min(ch - 1);
        for x in 0..w {
            let sx = left + ((x * cw) / w).min(cw - 1);
            out.push(ids[sy * w + sx]);
        }
    }
    out
}

/// Applies `ops` in order with randomness drawn from `seed`.
pub fn augment(sample: &Sample, ops: &[AugmentOp], seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = sample.clone();
    for op in ops {
        match *op {
            AugmentOp::Hflip => {
                if rng.random_bool(0.5) {
                    s = hflip(&s);
                }
            }
            AugmentOp::RandomCrop { height: ch, width: cw } => {
                let (h, w, _) = s.image.shape();
                if ch == 0 || cw == 0 || ch > h || cw > w {
                    return Err(GctError::config(
                        "augment.random_crop",
                        format!("crop {ch}x{cw} does not fit a {h}x{w} image"),
                    ));
                }
                let top = rng.random_range(0..=h - ch);
                let left = rng.random_range(0..=w - cw);
                s = Sample {
                    id: s.id,
                    image: crop_bilinear(&s.image, top, left, ch, cw),
                    label: s.label.as_ref().map(|t| match t {
                        Target::Classes { classes, ids } => Target::Classes {
                            classes: *classes,
                            ids: crop_nearest(ids, h, w, top, left, ch, cw),
                        },
                        Target::Values(m) => Target::Values(crop_bilinear(m, top, left, ch, cw)),
                    }),
                };
            }
        }
    }
    Ok(s)
}
