//! Dense row-major `f32` tensor used by the network engine.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", &[n], &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
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

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let n = self.item_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Stacks equally shaped items along a new leading axis.
    pub fn stack(items: &[&[f32]], item_shape: &[usize]) -> Result<Self> {
        let n: usize = item_shape.iter().product();
        let mut data = Vec::with_capacity(n * items.len());
        for it in items {
            if it.len() != n {
                return Err(Error::shape("stack", &[n], &[it.len()]));
            }
            data.extend_from_slice(it);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(item_shape);
        Ok(Tensor { shape, data })
    }

    /// Concatenates along the batch axis.
    pub fn cat_batch(a: &Tensor, b: &Tensor) -> Result<Self> {
        if a.shape[1..] != b.shape[1..] {
            return Err(Error::shape("cat_batch", &a.shape, &b.shape));
        }
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        let mut shape = a.shape.clone();
        shape[0] += b.shape[0];
        Ok(Tensor { shape, data })
    }

    /// Rows `[start, end)` of the batch axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor {
        let n = self.item_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    /// Concatenates two `[B, n]` matrices column-wise into `[B, n + m]`.
    pub fn cat_cols(a: &Tensor, b: &Tensor) -> Result<Self> {
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[0] != b.shape[0] {
            return Err(Error::shape("cat_cols", &a.shape, &b.shape));
        }
        Self::cat_cols_many(&[a, b])
    }

    pub fn cat_cols_many(parts: &[&Tensor]) -> Result<Self> {
        let rows = parts.first().map(|t| t.batch()).unwrap_or(0);
        let mut width = 0;
        for p in parts {
            if p.shape.len() != 2 || p.batch() != rows {
                return Err(Error::shape("cat_cols", &[rows, 0], &p.shape));
            }
            width += p.shape[1];
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.item(r));
            }
        }
        Ok(Tensor {
            shape: vec![rows, width],
            data,
        })
    }

    /// Columns `[start, end)` of a `[B, n]` matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let rows = self.batch();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&self.item(r)[start..end]);
        }
        Tensor {
            shape: vec![rows, end - start],
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), data.iter().map(|&v| v as f32).collect())
    }

    pub fn ensure_shape(&self, context: &str, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(context, expected, &self.shape));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cat_and_slice_cols_are_inverse() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 7.0]).unwrap();
        let c = Tensor::cat_cols(&a, &b).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
        assert_eq!(c.slice_cols(0, 2), a);
        assert_eq!(c.slice_cols(2, 3), b);
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }
}
