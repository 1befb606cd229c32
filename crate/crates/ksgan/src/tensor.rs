//! Dense row-major tensors of 64-bit reals.
//!
//! All numeric state in this crate (samples, parameters, critic values) lives
//! in [`Tensor`]s. Shapes are explicit: elementwise ops require identical
//! shapes, and broadcasting is a separate, explicit operation with a defined
//! reduction dual ([`Tensor::sum_to`]).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// 2-D tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar(self.shape.clone()))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: op.to_string(),
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul".to_string(),
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        if m > 0 && k > 0 && n > 0 {
            // Safety: buffer sizes and strides are consistent with (m, k, n).
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    self.data.as_ptr(),
                    k as isize,
                    1,
                    other.data.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::InvalidShape(format!(
                "transpose requires rank 2, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Numpy-style broadcast to `target`: shapes align on trailing axes and
    /// axes of extent 1 repeat.
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Tensor> {
        if self.shape == target {
            return Ok(self.clone());
        }
        if !broadcastable_to(&self.shape, target) {
            return Err(Error::ShapeMismatch {
                op: "broadcast".to_string(),
                lhs: self.shape.clone(),
                rhs: target.to_vec(),
            });
        }
        let out_numel: usize = target.iter().product();
        // Rank-2 targets cover the hot paths (bias rows, level-grid columns).
        if let [rows, cols] = *target {
            let row_like = self.shape.len() <= 1 || (self.shape.len() == 2 && self.shape[0] == 1);
            if row_like && self.data.len() == cols {
                let mut out = Vec::with_capacity(out_numel);
                for _ in 0..rows {
                    out.extend_from_slice(&self.data);
                }
                return Tensor::new(target.to_vec(), out);
            }
            if self.shape.len() == 2 && self.shape == [rows, 1] {
                let mut out = Vec::with_capacity(out_numel);
                for &v in &self.data {
                    out.extend(std::iter::repeat(v).take(cols));
                }
                return Tensor::new(target.to_vec(), out);
            }
        }
        if self.data.len() == 1 {
            return Ok(Tensor::full(target, self.data[0]));
        }
        let mut out = vec![0.0; out_numel];
        let in_strides = padded_broadcast_strides(&self.shape, target);
        let out_rank = target.len();
        let mut idx = vec![0usize; out_rank];
        for slot in out.iter_mut() {
            let mut src = 0usize;
            for d in 0..out_rank {
                src += idx[d] * in_strides[d];
            }
            *slot = self.data[src];
            for d in (0..out_rank).rev() {
                idx[d] += 1;
                if idx[d] < target[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Tensor {
            shape: target.to_vec(),
            data: out,
        })
    }

    /// Reduction dual of [`broadcast_to`](Self::broadcast_to): sums over the
    /// axes that a broadcast from `target` would have expanded. Accumulation
    /// runs in row-major input order.
    pub fn sum_to(&self, target: &[usize]) -> Result<Tensor> {
        if self.shape == target {
            return Ok(self.clone());
        }
        if !broadcastable_to(target, &self.shape) {
            return Err(Error::ShapeMismatch {
                op: "sum_to".to_string(),
                lhs: self.shape.clone(),
                rhs: target.to_vec(),
            });
        }
        let out_numel: usize = target.iter().product();
        if let [rows, cols] = *self.shape.as_slice() {
            let to_row = target.len() <= 1 || (target.len() == 2 && target[0] == 1);
            if to_row && out_numel == cols {
                let mut out = vec![0.0; cols];
                for row in self.data.chunks_exact(cols) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                return Tensor::new(target.to_vec(), out);
            }
            if target == [rows, 1] {
                let mut out = Vec::with_capacity(rows);
                for row in self.data.chunks_exact(cols) {
                    out.push(row.iter().sum::<f64>());
                }
                return Tensor::new(target.to_vec(), out);
            }
        }
        if out_numel == 1 {
            return Tensor::new(target.to_vec(), vec![self.data.iter().sum()]);
        }
        let mut out = vec![0.0; out_numel];
        let out_strides = padded_broadcast_strides(target, &self.shape);
        let rank = self.shape.len();
        let mut idx = vec![0usize; rank];
        for &v in &self.data {
            let mut dst = 0usize;
            for d in 0..rank {
                dst += idx[d] * out_strides[d];
            }
            out[dst] += v;
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Tensor {
            shape: target.to_vec(),
            data: out,
        })
    }

    /// Rows of a rank-2 tensor as slices.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let cols = if self.shape.len() == 2 { self.shape[1] } else { self.data.len() };
        self.data.chunks(cols.max(1))
    }
}

/// True when `from` broadcasts to `to` under numpy rules.
pub fn broadcastable_to(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let offset = to.len() - from.len();
    from.iter()
        .enumerate()
        .all(|(i, &f)| f == to[i + offset] || f == 1)
}

/// Strides into a tensor of shape `from` indexed with coordinates of shape
/// `to` (`from` must broadcast to `to`); broadcast axes get stride 0.
fn padded_broadcast_strides(from: &[usize], to: &[usize]) -> Vec<usize> {
    let offset = to.len() - from.len();
    let mut strides = vec![0usize; to.len()];
    let mut acc = 1usize;
    for i in (0..from.len()).rev() {
        if from[i] != 1 {
            strides[offset + i] = acc;
        }
        acc *= from[i];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_2x2_by_2x1() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn broadcast_vector_to_matrix() {
        let b = Tensor::vector(&[1.0, 2.0]);
        let out = b.broadcast_to(&[3, 2]).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn broadcast_column_to_matrix() {
        let b = Tensor::matrix(2, 1, vec![5.0, 7.0]).unwrap();
        let out = b.broadcast_to(&[2, 3]).unwrap();
        assert_eq!(out.data(), &[5.0, 5.0, 5.0, 7.0, 7.0, 7.0]);
    }

    #[test]
    fn sum_to_inverts_broadcast_axes() {
        let m = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let col = m.sum_to(&[2, 1]).unwrap();
        assert_eq!(col.data(), &[6.0, 15.0]);
        let row = m.sum_to(&[3]).unwrap();
        assert_eq!(row.data(), &[5.0, 7.0, 9.0]);
        let s = m.sum_to(&[]).unwrap();
        assert_eq!(s.data(), &[21.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let m = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = m.transpose().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(t.transpose().unwrap(), m);
    }
}
