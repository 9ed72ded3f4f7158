use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};

use crate::error::{GctError, Result};
use crate::flawmap::{pipeline_c, PipelineParams};
use crate::maps::{GrayMap, PixelMap};

/// One flaw map pair to write: the detector's output and the pipeline target.
#[derive(Debug, Clone)]
pub struct FlawDumpEntry {
    pub sample: usize,
    /// Which task model produced the prediction, 1 or 2.
    pub model: usize,
    pub predicted: GrayMap,
    pub target: GrayMap,
}

/// Grayscale 8-bit encoding, `round(255 p)` with `p` clamped to `[0, 1]`.
pub fn encode_gray(map: &GrayMap) -> GrayImage {
    GrayImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        let p = map.get(y as usize, x as usize).clamp(0.0, 1.0);
        Luma([(255.0 * p).round() as u8])
    })
}

/// Writes `sample{i}_t{k}_pred.png` and `sample{i}_t{k}_gt.png` for every entry.
pub fn dump_flawmaps(dir: &Path, entries: &[FlawDumpEntry]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| GctError::io(dir, e))?;
    let mut written = Vec::with_capacity(entries.len() * 2);
    for e in entries {
        for (tag, map) in [("pred", &e.predicted), ("gt", &e.target)] {
            let path = dir.join(format!("sample{:03}_t{}_{tag}.png", e.sample, e.model));
            encode_gray(map)
                .save(&path)
                .map_err(|err| GctError::io(&path, std::io::Error::other(err.to_string())))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// How an image file stores a prediction or label map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageEncoding {
    /// 8-bit grayscale where each pixel value is a class index below `classes`.
    ClassIndex { classes: usize },
    /// 8-bit RGB scaled to `[0, 1]`.
    Rgb,
}

fn image_err(path: &Path, err: image::ImageError) -> GctError {
    GctError::io(path, std::io::Error::other(err.to_string()))
}

/// Reads `path` as a dense map under `encoding`.
pub fn read_pixel_map(path: &Path, encoding: ImageEncoding) -> Result<PixelMap> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match encoding {
        ImageEncoding::ClassIndex { classes } => {
            let ids: Vec<u32> = img.to_luma8().pixels().map(|p| p.0[0] as u32).collect();
            if let Some(bad) = ids.iter().find(|&&c| c as usize >= classes) {
                return Err(GctError::input(format!(
                    "{}: class index {bad} outside [0, {classes})",
                    path.display()
                )));
            }
            PixelMap::one_hot(h, w, classes, &ids)
        }
        ImageEncoding::Rgb => {
            let data = img.to_rgb8().pixels().flat_map(|p| p.0).map(|v| v as f64 / 255.0).collect();
            PixelMap::new(h, w, 3, data)
        }
    }
}

/// Flaw map of a prediction image against a label image, written to `out`
/// as 8-bit grayscale.
pub fn flawmap_from_images(
    pred: &Path,
    label: &Path,
    out: &Path,
    params: &PipelineParams,
    encoding: ImageEncoding,
) -> Result<GrayMap> {
    let p = read_pixel_map(pred, encoding)?;
    let l = read_pixel_map(label, encoding)?;
    if p.shape() != l.shape() {
        return Err(GctError::input(format!(
            "prediction is {:?} but label is {:?}",
            p.shape(),
            l.shape()
        )));
    }
    let map = pipeline_c(&p, &l, params)?;
    if let Some(d) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(|e| GctError::io(d, e))?;
    }
    encode_gray(&map).save(out).map_err(|e| image_err(out, e))?;
    Ok(map)
}
