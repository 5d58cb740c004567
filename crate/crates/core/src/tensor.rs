//! Dense row-major f64 tensors.
//!
//! Everything numeric in this crate flows through [`Tensor`]: embedding
//! tables, projection weights, attention matrices, gradients. Shapes are
//! explicit and checked at op boundaries; storage is a flat `Vec<f64>`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Samples every entry from Normal(0, std^2).
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| normal.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a 2-D tensor (or 1 for 1-D).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    /// Number of columns of a 2-D tensor (or its length for 1-D).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale_value(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "scale_value() on non-scalar tensor");
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// C = A @ B for A [m,k], B [k,p].
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let (k2, p) = (rhs.rows(), rhs.cols());
        assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let a_row = self.row(i);
            let o_row = &mut out[i * p..(i + 1) * p];
            for (kk, &a_ik) in a_row.iter().enumerate() {
                if a_ik == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[kk * p..(kk + 1) * p];
                for (o, &b) in o_row.iter_mut().zip(b_row.iter()) {
                    *o += a_ik * b;
                }
            }
        }
        Tensor::from_vec(&[m, p], out)
    }

    /// C = A @ B^T for A [m,k], B [p,k].
    pub fn matmul_nt(&self, rhs: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let (p, k2) = (rhs.rows(), rhs.cols());
        assert_eq!(k, k2, "matmul_nt inner dims {} vs {}", k, k2);
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let a_row = self.row(i);
            for j in 0..p {
                let b_row = rhs.row(j);
                let mut s = 0.0;
                for (a, b) in a_row.iter().zip(b_row.iter()) {
                    s += a * b;
                }
                out[i * p + j] = s;
            }
        }
        Tensor::from_vec(&[m, p], out)
    }

    /// C = A^T @ B for A [k,m], B [k,p].
    pub fn matmul_tn(&self, rhs: &Tensor) -> Tensor {
        let (k, m) = (self.rows(), self.cols());
        let (k2, p) = (rhs.rows(), rhs.cols());
        assert_eq!(k, k2, "matmul_tn inner dims {} vs {}", k, k2);
        let mut out = vec![0.0; m * p];
        for kk in 0..k {
            let a_row = self.row(kk);
            let b_row = rhs.row(kk);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * p..(i + 1) * p];
                for (o, &b) in o_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        Tensor::from_vec(&[m, p], out)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.shape, vec![2, 2]);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 0.5, 2.0, -1.0]);
        let c = a.matmul_nt(&b);
        for i in 0..2 {
            for j in 0..2 {
                let expected = dot(a.row(i), b.row(j));
                assert!((c.row(i)[j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_tn_matches_explicit_transpose() {
        let a = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 0.5, 2.0, -1.0, 1.0]);
        let c = a.matmul_tn(&b);
        assert_eq!(c.shape, vec![2, 2]);
        for i in 0..2 {
            for j in 0..2 {
                let mut expected = 0.0;
                for k in 0..3 {
                    expected += a.row(k)[i] * b.row(k)[j];
                }
                assert!((c.row(i)[j] - expected).abs() < 1e-12);
            }
        }
    }
}
