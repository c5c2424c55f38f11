use candle_core::{DType, Device, Tensor};

use crate::error::{FuseError, Result};

/// Single-channel row-major image, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(FuseError::shape(format!(
                "plane {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn same_dims(&self, other: &Plane) -> bool {
        self.dims() == other.dims()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Plane> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(FuseError::shape(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(Plane::from_fn(w, h, |x, y| self.at(x0 + x, y0 + y)))
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (1, 1, self.height, self.width), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Stacks planes of equal size into a `(N, 1, H, W)` batch.
    pub fn batch(planes: &[&Plane], dtype: DType) -> Result<Tensor> {
        let first = planes
            .first()
            .ok_or_else(|| FuseError::shape("empty batch"))?;
        let mut data = Vec::with_capacity(planes.len() * first.data.len());
        for p in planes {
            if !p.same_dims(first) {
                return Err(FuseError::shape("batch planes differ in size"));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_vec(data, (planes.len(), 1, first.height, first.width), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Inverse of [`Plane::batch`] for a single-channel tensor.
    pub fn unbatch(t: &Tensor) -> Result<Vec<Plane>> {
        let (n, c, h, w) = t.dims4()?;
        if c != 1 {
            return Err(FuseError::shape(format!("expected one channel, got {c}")));
        }
        let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(flat
            .chunks(h * w)
            .take(n)
            .map(|chunk| Plane {
                width: w,
                height: h,
                data: chunk.to_vec(),
            })
            .collect())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}
