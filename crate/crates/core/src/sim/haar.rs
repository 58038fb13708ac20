use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use super::seed::stream_rng;
use crate::embedding::dot_f64;
use crate::ids::ModelInstanceId;

/// Dense orthogonal matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl OrthogonalMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `O * v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim, "vector dimension must match transform");
        self.data
            .chunks_exact(self.dim)
            .map(|row| dot_f64(row, v))
            .collect()
    }

    /// `max |(O^T O - I)_ij|`.
    pub fn orthogonality_error(&self) -> f64 {
        let m = DMatrix::from_row_slice(self.dim, self.dim, &self.data);
        let gram = m.transpose() * &m;
        let mut worst = 0.0f64;
        for i in 0..self.dim {
            for j in 0..self.dim {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[(i, j)] - target).abs());
            }
        }
        worst
    }
}

/// Haar-distributed random orthogonal matrix from a seeded Gaussian.
///
/// A `dim x dim` standard-normal matrix is filled row by row, factored with
/// Householder QR, and each column of `Q` is multiplied by the sign of the
/// matching diagonal entry of `R`. Without that sign correction the result is
/// orthogonal but not uniformly distributed.
pub fn haar_orthogonal(seed: u64, dim: usize) -> OrthogonalMatrix {
    assert!(dim >= 2, "orthogonal transform needs dim >= 2");
    let mut rng = stream_rng(seed, "haar", &[dim as u64]);
    let gaussian: Vec<f64> = (0..dim * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let qr = DMatrix::from_row_slice(dim, dim, &gaussian).qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut data = Vec::with_capacity(dim * dim);
    for i in 0..dim {
        data.extend(q.row(i).iter().copied());
    }
    OrthogonalMatrix { dim, data }
}

/// The synthetic stand-in for one independently trained model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTransform {
    pub instance_id: ModelInstanceId,
    pub matrix: OrthogonalMatrix,
}
