//! Dense vector/matrix aliases and the few helpers the rest of the crate shares.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

pub fn check_dim(v: &Vector, expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

pub fn check_finite(v: &Vector, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Unit vector in direction `v`, or `None` when `‖v‖ < min_norm`.
pub fn normalized(v: &Vector, min_norm: f64) -> Option<Vector> {
    let n = v.norm();
    (n >= min_norm).then(|| v / n)
}

pub fn mean_of(vs: &[Vector]) -> Option<Vector> {
    let first = vs.first()?;
    let mut acc = Vector::zeros(first.len());
    for v in vs {
        acc += v;
    }
    Some(acc / vs.len() as f64)
}

pub fn standard_normal_vector<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vector {
    Vector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// Orthogonal matrix from the QR factorization of a Gaussian matrix, sign-fixed
/// so the draw is Haar distributed.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Matrix {
    let g = Matrix::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            let mut col = q.column_mut(j);
            col.neg_mut();
        }
    }
    q
}

/// Row-major matrix record used by every on-disk format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Matrix> for MatrixRecord {
    fn from(m: &Matrix) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl TryFrom<&MatrixRecord> for Matrix {
    type Error = Error;

    fn try_from(r: &MatrixRecord) -> Result<Self> {
        if r.data.len() != r.rows * r.cols {
            return Err(Error::Format(format!(
                "matrix record {}x{} carries {} entries",
                r.rows,
                r.cols,
                r.data.len()
            )));
        }
        Ok(Matrix::from_row_slice(r.rows, r.cols, &r.data))
    }
}

pub(crate) mod serde_matrix {
    use super::{Matrix, MatrixRecord};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        MatrixRecord::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rec = MatrixRecord::deserialize(d)?;
        Matrix::try_from(&rec).map_err(serde::de::Error::custom)
    }
}

pub(crate) mod serde_vector {
    use super::Vector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        let data = Vec::<f64>::deserialize(d)?;
        Ok(Vector::from_vec(data))
    }
}

pub(crate) mod serde_vectors {
    use super::Vector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(vs: &[Vector], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vector>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Ok(rows.into_iter().map(Vector::from_vec).collect())
    }
}
