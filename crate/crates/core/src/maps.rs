//! Dense per-pixel containers used outside the autograd graph.

use candle_core::{DType, Device, Tensor};

use crate::error::{GctError, Result};

/// An `H x W x O` map stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl PixelMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(GctError::input(format!(
                "pixel map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// One-hot encoding of per-pixel class ids.
    pub fn one_hot(height: usize, width: usize, classes: usize, ids: &[u32]) -> Result<Self> {
        if ids.len() != height * width {
            return Err(GctError::input("class id count does not match map size"));
        }
        let mut data = vec![0.0; height * width * classes];
        for (i, &c) in ids.iter().enumerate() {
            let c = c as usize;
            if c >= classes {
                return Err(GctError::input(format!("class id {c} outside [0, {classes})")));
            }
            data[i * classes + c] = 1.0;
        }
        Self::new(height, width, classes, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, h: usize, w: usize, o: usize) -> f64 {
        self.data[(h * self.width + w) * self.channels + o]
    }

    /// Splits a `[B, H, W, O]` tensor into per-sample maps.
    pub fn from_batch(t: &Tensor) -> Result<Vec<Self>> {
        let (b, h, w, c) = t.dims4()?;
        let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let per = h * w * c;
        (0..b)
            .map(|i| Self::new(h, w, c, flat[i * per..(i + 1) * per].to_vec()))
            .collect()
    }
}

/// A single-channel `H x W` intensity map.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(GctError::input(format!(
                "gray map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.data[h * self.width + w]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Stacks same-sized maps into a `[B, H, W]` tensor.
    pub fn stack(maps: &[GrayMap], dtype: DType) -> Result<Tensor> {
        let first = maps.first().ok_or_else(|| GctError::input("cannot stack zero maps"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(maps.len() * h * w);
        for m in maps {
            if (m.height, m.width) != (h, w) {
                return Err(GctError::input("cannot stack maps of different sizes"));
            }
            data.extend_from_slice(&m.data);
        }
        Ok(Tensor::from_vec(data, (maps.len(), h, w), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Splits a `[B, H, W]` tensor into maps.
    pub fn unstack(t: &Tensor) -> Result<Vec<GrayMap>> {
        let (b, h, w) = t.dims3()?;
        let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        (0..b)
            .map(|i| GrayMap::new(h, w, flat[i * h * w..(i + 1) * h * w].to_vec()))
            .collect()
    }
}
