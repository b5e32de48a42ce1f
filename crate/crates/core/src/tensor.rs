//! Row-major f32 tensors and axis-aligned regions over them.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape must have at least one axis and every dimension must be >= 1, got {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape} ({expected} elements)")]
    LengthMismatch { shape: Shape, len: usize, expected: usize },
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: Shape, right: Shape },
    #[error("region {region} does not fit inside shape {shape}")]
    RegionOutOfBounds { region: Region, shape: Shape },
}

/// Tensor shape. Non-empty, every dimension at least 1, element count fits
/// in `usize`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(TensorError::InvalidShape(dims));
        }
        if dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).is_none() {
            return Err(TensorError::InvalidShape(dims));
        }
        Ok(Shape(dims))
    }

    pub fn vector(len: usize) -> Result<Self, TensorError> {
        Shape::new(vec![len])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for axis in (0..self.0.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.0[axis + 1];
        }
        strides
    }

    /// Region covering the whole shape.
    pub fn full_region(&self) -> Region {
        Region {
            offset: vec![0; self.rank()],
            extent: self.0.clone(),
        }
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{d}")?;
        }
        f.write_str("]")
    }
}

/// Axis-aligned box inside a tensor: per-axis offset and extent.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Region {
    pub offset: Vec<usize>,
    pub extent: Vec<usize>,
}

impl Region {
    pub fn new(offset: Vec<usize>, extent: Vec<usize>) -> Self {
        Region { offset, extent }
    }

    pub fn rank(&self) -> usize {
        self.offset.len()
    }

    pub fn len(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.extent.contains(&0)
    }

    /// Non-empty and inside `shape`.
    pub fn fits(&self, shape: &Shape) -> bool {
        self.offset.len() == shape.rank()
            && self.extent.len() == shape.rank()
            && !self.is_empty()
            && self
                .offset
                .iter()
                .zip(&self.extent)
                .zip(shape.dims())
                .all(|((&o, &e), &d)| o.checked_add(e).is_some_and(|end| end <= d))
    }

    pub fn check_fits(&self, shape: &Shape) -> Result<(), TensorError> {
        if self.fits(shape) {
            Ok(())
        } else {
            Err(TensorError::RegionOutOfBounds {
                region: self.clone(),
                shape: shape.clone(),
            })
        }
    }

    pub fn intersects(&self, other: &Region) -> bool {
        self.rank() == other.rank()
            && (0..self.rank()).all(|a| {
                self.offset[a] < other.offset[a] + other.extent[a] && other.offset[a] < self.offset[a] + self.extent[a]
            })
    }

    pub fn contains_index(&self, index: &[usize]) -> bool {
        index.len() == self.rank()
            && index
                .iter()
                .enumerate()
                .all(|(a, &i)| i >= self.offset[a] && i < self.offset[a] + self.extent[a])
    }

    /// Shape of a tensor holding exactly this region.
    pub fn shape(&self) -> Shape {
        Shape::new(self.extent.clone()).expect("non-empty region")
    }

    /// Flat row-major indices (into a tensor of `shape`) of every element in
    /// the region, in row-major region order.
    pub fn flat_indices(&self, shape: &Shape) -> Vec<usize> {
        let strides = shape.strides();
        let mut out = Vec::with_capacity(self.len());
        let rank = self.rank();
        let mut idx = vec![0usize; rank];
        if self.is_empty() {
            return out;
        }
        loop {
            let flat = (0..rank).map(|a| (self.offset[a] + idx[a]) * strides[a]).sum();
            out.push(flat);
            let mut axis = rank;
            loop {
                if axis == 0 {
                    return out;
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] < self.extent[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for a in 0..self.rank() {
            if a > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{}+{}", self.offset[a], self.extent[a])?;
        }
        f.write_str("}")
    }
}

/// N-dimensional row-major array of f32.
#[derive(Clone, PartialEq, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != shape.len() {
            return Err(TensorError::LengthMismatch {
                expected: shape.len(),
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Caller guarantees `data.len() == shape.len()`.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.len();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Rank-1 tensor. Panics on an empty slice.
    pub fn vector(values: &[f32]) -> Self {
        Tensor {
            shape: Shape::vector(values.len()).expect("non-empty vector"),
            data: values.to_vec(),
        }
    }

    /// Rank-2 tensor from equal-length rows. Panics on ragged or empty input.
    pub fn matrix(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix");
        let shape = Shape::new(vec![rows.len(), cols]).expect("non-empty matrix");
        Tensor {
            shape,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Shape) -> Result<Self, TensorError> {
        Tensor::new(shape, self.data)
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Index of the largest element (first one on ties); NaN never wins.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] || self.data[best].is_nan() {
                best = i;
            }
        }
        best
    }

    /// Copies the region's elements out in row-major region order.
    pub fn extract(&self, region: &Region) -> Result<Vec<f32>, TensorError> {
        region.check_fits(&self.shape)?;
        Ok(region
            .flat_indices(&self.shape)
            .into_iter()
            .map(|i| self.data[i])
            .collect())
    }

    /// Writes `values` (row-major region order) into the region.
    pub fn write_region(&mut self, region: &Region, values: &[f32]) -> Result<(), TensorError> {
        region.check_fits(&self.shape)?;
        let idx = region.flat_indices(&self.shape);
        if idx.len() != values.len() {
            return Err(TensorError::LengthMismatch {
                shape: region.shape(),
                len: values.len(),
                expected: idx.len(),
            });
        }
        for (i, &v) in idx.into_iter().zip(values) {
            self.data[i] = v;
        }
        Ok(())
    }

    /// Little-endian byte image of the data (no shape).
    pub fn data_le_bytes(&self) -> Vec<u8> {
        f32s_to_le_bytes(&self.data)
    }

    /// Largest relative elementwise difference, using `max(|a|, |b|, floor)`
    /// as the denominator.
    pub fn max_relative_diff(&self, other: &Tensor, floor: f32) -> Result<f32, TensorError> {
        let diff = self.zip_with(other, |a, b| {
            let scale = libm::fabsf(a).max(libm::fabsf(b)).max(floor);
            libm::fabsf(a - b) / scale
        })?;
        Ok(diff.data.iter().fold(0.0f32, |m, &v| m.max(v)))
    }
}

pub fn f32s_to_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Inverse of [`f32s_to_le_bytes`]; `None` when the length is not a
/// multiple of four.
pub fn le_bytes_to_f32s(bytes: &[u8]) -> Option<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_empty_and_zero_dims() {
        assert!(Shape::new(vec![]).is_err());
        assert!(Shape::new(vec![3, 0]).is_err());
        assert!(Shape::new(vec![usize::MAX, 3]).is_err());
        assert_eq!(Shape::new(vec![2, 3, 4]).unwrap().len(), 24);
    }

    #[test]
    fn tensor_length_must_match_shape() {
        let s = Shape::new(vec![2, 2]).unwrap();
        assert!(Tensor::new(s.clone(), vec![1.0; 3]).is_err());
        assert!(Tensor::new(s, vec![1.0; 4]).is_ok());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(Shape::new(vec![2, 3, 4]).unwrap().strides(), vec![12, 4, 1]);
    }

    #[test]
    fn region_extract_and_write_round_trip() {
        let shape = Shape::new(vec![3, 4]).unwrap();
        let t = Tensor::new(shape.clone(), (0..12).map(|v| v as f32).collect()).unwrap();
        let r = Region::new(vec![1, 1], vec![2, 2]);
        assert_eq!(t.extract(&r).unwrap(), vec![5.0, 6.0, 9.0, 10.0]);
        let mut z = Tensor::zeros(shape);
        z.write_region(&r, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(z.data()[5], 1.0);
        assert_eq!(z.data()[10], 4.0);
        assert!(t.extract(&Region::new(vec![2, 3], vec![2, 1])).is_err());
    }

    #[test]
    fn region_intersection() {
        let a = Region::new(vec![0, 0], vec![2, 2]);
        let b = Region::new(vec![1, 1], vec![2, 2]);
        let c = Region::new(vec![2, 0], vec![1, 2]);
        assert!(a.intersects(&b));
        assert!(!a.intersects(&c));
        assert!(b.intersects(&c));
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(Tensor::vector(&[1.0, 3.0, 3.0, -1.0]).argmax(), 1);
    }
}
