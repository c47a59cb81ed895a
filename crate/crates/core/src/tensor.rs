//! Dense row-major `f64` tensors.

use crate::error::{invalid, shape_err, Error, Result};

/// An n-dimensional array of `f64` values stored in row-major order.
///
/// The product of the extents always equals the number of stored values.
/// A tensor with an empty shape holds a single scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(invalid(format!("tensor extents must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "tensor extents must be positive");
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "tensor cannot be empty");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "tensor extents must be positive");
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn into_reshaped(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ))
        }
    }

    /// Number of entries along the leading (batch) axis.
    pub fn batch_len(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Extents after the leading axis.
    pub fn sample_shape(&self) -> &[usize] {
        if self.shape.is_empty() {
            &[]
        } else {
            &self.shape[1..]
        }
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Gathers the given entries of the leading axis into a new tensor.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(invalid("select needs at least one index"));
        }
        let n = self.batch_len();
        let stride = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= n {
                return Err(invalid(format!("index {i} out of range for batch of {n}")));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::new(shape, data)
    }

    /// Contiguous slice `[start, end)` of the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.batch_len() {
            return Err(invalid(format!(
                "batch slice {start}..{end} out of range for {}",
                self.batch_len()
            )));
        }
        let stride = self.sample_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self::new(shape, self.data[start * stride..end * stride].to_vec())
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat(parts: &[Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid("concat of nothing"))?;
        let tail = first.sample_shape().to_vec();
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.sample_shape() != tail.as_slice() {
                return Err(shape_err(
                    "concat",
                    format!("{:?} vs {:?}", p.shape, first.shape),
                ));
            }
            n += p.batch_len();
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![n];
        shape.extend(tail);
        Self::new(shape, data)
    }
}

/// Component-wise sign with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `‖a − b‖∞ / ‖b‖∞`, or the absolute difference when `b` is identically zero.
pub fn relative_linf_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = a.max_abs_diff(b)?;
    let scale = b.max_abs();
    Ok(if scale > 0.0 { diff / scale } else { diff })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn select_and_concat() {
        let t = Tensor::from_fn(vec![3, 2], |i| i as f64);
        let s = t.select(&[2, 0]).unwrap();
        assert_eq!(s.data(), &[4.0, 5.0, 0.0, 1.0]);
        let c = Tensor::concat(&[t.slice_batch(0, 1).unwrap(), t.slice_batch(1, 3).unwrap()]).unwrap();
        assert_eq!(c, t);
        assert!(t.select(&[3]).is_err());
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(-3.0), -1.0);
        assert_eq!(sign(1e-300), 1.0);
    }
}
