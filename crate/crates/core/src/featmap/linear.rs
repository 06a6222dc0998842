use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_dim, serde_matrix, Matrix, Vector};

/// Largest tolerated `‖WᵀW − I‖_F`.
pub const ORTHOGONALITY_TOL: f64 = 1e-8;

/// Orthogonal change of basis `h ↦ W h`; row `i` of `W` is feature direction `v_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFeatureMap {
    #[serde(with = "serde_matrix")]
    w: Matrix,
}

impl LinearFeatureMap {
    pub fn new(w: Matrix) -> Result<Self> {
        if !w.is_square() || w.nrows() == 0 {
            return Err(Error::invalid("a linear feature map needs a non-empty square matrix"));
        }
        let err = (w.tr_mul(&w) - Matrix::identity(w.nrows(), w.ncols())).norm();
        if !(err <= ORTHOGONALITY_TOL) {
            return Err(Error::invalid(format!(
                "matrix is not orthogonal: ‖WᵀW − I‖ = {err:.3e}"
            )));
        }
        Ok(Self { w })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            w: Matrix::identity(d, d),
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.w
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    /// `v_i = Wᵀ e_i`.
    pub fn direction(&self, i: usize) -> Vector {
        self.w.row(i).transpose()
    }

    pub fn forward(&self, h: &Vector) -> Result<Vector> {
        check_dim(h, self.dim())?;
        Ok(&self.w * h)
    }

    pub fn inverse(&self, z: &Vector) -> Result<Vector> {
        check_dim(z, self.dim())?;
        Ok(self.w.tr_mul(z))
    }
}
