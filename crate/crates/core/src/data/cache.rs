use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use super::{Dataset, DatasetSpec, Sample, Target};
use crate::error::{GctError, Result};
use crate::maps::PixelMap;

fn cache_path(dir: &Path, spec: &DatasetSpec) -> Result<PathBuf> {
    let key = serde_json::to_string(spec).map_err(|e| GctError::input(e.to_string()))?;
    let mut h = DefaultHasher::new();
    key.hash(&mut h);
    Ok(dir.join(format!("{}_{:016x}.safetensors", spec.name(), h.finish())))
}

/// Generates the dataset, or reads it from `dir` when an entry for the same
/// generator parameters exists. Freshly generated datasets are written back.
pub fn load_or_generate(spec: &DatasetSpec, dir: Option<&Path>) -> Result<Dataset> {
    let Some(dir) = dir else { return spec.generate() };
    let path = cache_path(dir, spec)?;
    if path.exists() {
        return read(&path, spec);
    }
    let ds = spec.generate()?;
    write(&path, &ds)?;
    Ok(ds)
}

fn write(path: &Path, ds: &Dataset) -> Result<()> {
    let n = ds.len();
    let s = ds.spec.size;
    let mut images = Vec::with_capacity(n * s * s * 3);
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for sample in &ds.samples {
        images.extend_from_slice(sample.image.data());
        match &sample.label {
            Some(Target::Classes { ids: v, .. }) => ids.extend_from_slice(v),
            Some(Target::Values(m)) => values.extend_from_slice(m.data()),
            None => return Err(GctError::input("cached datasets must be fully labeled")),
        }
    }
    let cpu = &Device::Cpu;
    let mut tensors = HashMap::new();
    tensors.insert("images".to_string(), Tensor::from_vec(images, (n, s, s, 3), cpu)?);
    if !ids.is_empty() {
        tensors.insert("class_ids".to_string(), Tensor::from_vec(ids, (n, s, s), cpu)?);
    }
    if !values.is_empty() {
        tensors.insert("values".to_string(), Tensor::from_vec(values, (n, s, s, 3), cpu)?);
    }
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| GctError::io(d, e))?;
    }
    candle_core::safetensors::save(&tensors, path)?;
    Ok(())
}

fn read(path: &Path, spec: &DatasetSpec) -> Result<Dataset> {
    let t = candle_core::safetensors::load(path, &Device::Cpu)?;
    let bad = |m: &str| GctError::format(path, m.to_string());
    let images = t.get("images").ok_or_else(|| bad("missing images"))?;
    let (n, h, w, c) = images.dims4()?;
    if n != spec.count || h != spec.size || w != spec.size {
        return Err(bad("cached shape does not match generator parameters"));
    }
    let images = images.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let stride = h * w * c;
    let classes = match spec.kind {
        super::SynthKind::Segmentation { classes } => Some(classes),
        super::SynthKind::Denoising { .. } => None,
    };
    let labels: Vec<Target> = match classes {
        Some(k) => {
            let ids = t.get("class_ids").ok_or_else(|| bad("missing class ids"))?;
            let ids = ids.flatten_all()?.to_vec1::<u32>()?;
            ids.chunks(h * w)
                .map(|v| Target::Classes {
                    classes: k,
                    ids: v.to_vec(),
                })
                .collect()
        }
        None => {
            let v = t.get("values").ok_or_else(|| bad("missing values"))?;
            let v = v.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            v.chunks(stride)
                .map(|x| PixelMap::new(h, w, c, x.to_vec()).map(Target::Values))
                .collect::<Result<_>>()?
        }
    };
    if labels.len() != n {
        return Err(bad("label count does not match image count"));
    }
    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            Ok(Sample {
                id: i as u64,
                image: PixelMap::new(h, w, c, images[i * stride..(i + 1) * stride].to_vec())?,
                label: Some(label),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthKind;

    #[test]
    fn cache_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [SynthKind::Segmentation { classes: 4 }, SynthKind::Denoising { noise_sigma: 0.1 }] {
            let spec = DatasetSpec {
                kind,
                count: 5,
                size: 32,
                seed: 2,
            };
            let a = load_or_generate(&spec, Some(dir.path())).unwrap();
            let b = load_or_generate(&spec, Some(dir.path())).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, spec.generate().unwrap());
        }
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
    }
}
