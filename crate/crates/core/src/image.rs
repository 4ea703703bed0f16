//! Batches of NHWC images tagged with their value-range convention.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// `[-1, 1]`, used by the GANs.
    SymmetricUnit,
    /// `[-0.5, 0.5]`, used by the denoisers.
    HalfUnit,
}

impl ValueRange {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            ValueRange::SymmetricUnit => (-1.0, 1.0),
            ValueRange::HalfUnit => (-0.5, 0.5),
        }
    }

    pub fn width(self) -> f32 {
        let (lo, hi) = self.bounds();
        hi - lo
    }

    /// Map a value from this convention to `to` (affine, no clipping).
    pub fn convert(self, v: f32, to: ValueRange) -> f32 {
        match (self, to) {
            (a, b) if a == b => v,
            (ValueRange::SymmetricUnit, ValueRange::HalfUnit) => v * 0.5,
            (ValueRange::HalfUnit, ValueRange::SymmetricUnit) => v * 2.0,
            _ => unreachable!(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    data: Vec<f32>,
    shape: [usize; 4],
    range: ValueRange,
}

impl ImageBatch {
    /// `shape` is `[N, H, W, C]`; every entry must be finite.
    pub fn new(data: Vec<f32>, shape: [usize; 4], range: ValueRange) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid("image batch", format!("non-finite value at index {i}")));
        }
        Ok(ImageBatch { data, shape, range })
    }

    pub fn zeros(shape: [usize; 4], range: ValueRange) -> Self {
        ImageBatch { data: vec![0.0; shape.iter().product()], shape, range }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.shape[0] == 0
    }

    /// `[H, W, C]` of one image.
    pub fn image_dims(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn image_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let l = self.image_len();
        &self.data[i * l..(i + 1) * l]
    }

    /// True when every value lies inside the declared range.
    pub fn within_range(&self) -> bool {
        let (lo, hi) = self.range.bounds();
        self.data.iter().all(|&v| (lo..=hi).contains(&v))
    }

    pub fn to_range(&self, to: ValueRange) -> ImageBatch {
        ImageBatch {
            data: self.data.iter().map(|&v| self.range.convert(v, to)).collect(),
            shape: self.shape,
            range: to,
        }
    }

    /// Images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        ImageBatch { data, shape: [indices.len(), self.shape[1], self.shape[2], self.shape[3]], range: self.range }
    }

    pub fn concat(&self, other: &ImageBatch) -> Result<ImageBatch> {
        if self.image_dims() != other.image_dims() || self.range != other.range {
            return Err(Error::Shape("cannot concatenate batches of different image shape or range".into()));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(ImageBatch { data, shape: [self.len() + other.len(), self.shape[1], self.shape[2], self.shape[3]], range: self.range })
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(self.data.iter().map(|&v| T::of(v as f64)).collect(), &self.shape)
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>, range: ValueRange) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("expected NHWC tensor, got {s:?}")));
        }
        Self::new(t.data().iter().map(|v| v.f64() as f32).collect(), [s[0], s[1], s[2], s[3]], range)
    }

    /// Values clipped to the declared range (display boundary only).
    pub fn clipped(&self) -> ImageBatch {
        let (lo, hi) = self.range.bounds();
        ImageBatch { data: self.data.iter().map(|v| v.clamp(lo, hi)).collect(), shape: self.shape, range: self.range }
    }
}
