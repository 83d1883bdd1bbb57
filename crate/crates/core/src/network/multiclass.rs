use super::{check_dim, ActivationPoly, NetworkError};
use crate::numkernels::{DenseMatrix, Vector};

/// `Phi_c(x) = sum_k A_ck sigma(w_k . x)`; flat layout is `A` row-major, then the rows of `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct MulticlassParams {
    /// `C x m`.
    pub a: DenseMatrix,
    /// `m x d`.
    pub w: DenseMatrix,
    pub activation: ActivationPoly,
}

impl MulticlassParams {
    pub fn new(a: DenseMatrix, w: DenseMatrix, activation: ActivationPoly) -> Result<Self, NetworkError> {
        if a.nrows() < 2 {
            return Err(NetworkError::InvalidParams("need at least two classes".into()));
        }
        check_dim(a.ncols(), w.nrows())?;
        if w.nrows() == 0 || w.ncols() == 0 {
            return Err(NetworkError::InvalidParams("empty weights".into()));
        }
        if !a.iter().chain(w.iter()).all(|v| v.is_finite()) {
            return Err(NetworkError::InvalidParams("non-finite entry".into()));
        }
        Ok(Self { a, w, activation })
    }

    pub fn classes(&self) -> usize {
        self.a.nrows()
    }

    pub fn width(&self) -> usize {
        self.w.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.width() * (self.classes() + self.input_dim())
    }

    pub fn forward(&self, x: &Vector) -> Result<Vector, NetworkError> {
        check_dim(self.input_dim(), x.len())?;
        let act = (&self.w * x).map(|t| self.activation.eval(t));
        Ok(&self.a * act)
    }

    /// Offset of `W` in the flat layout.
    pub fn w_offset(&self) -> usize {
        self.classes() * self.width()
    }

    pub fn to_flat(&self) -> Vector {
        let mut v = Vector::zeros(self.n_params());
        let (c, m, d) = (self.classes(), self.width(), self.input_dim());
        for j in 0..c {
            for k in 0..m {
                v[j * m + k] = self.a[(j, k)];
            }
        }
        let off = self.w_offset();
        for k in 0..m {
            for l in 0..d {
                v[off + k * d + l] = self.w[(k, l)];
            }
        }
        v
    }

    pub fn with_flat(&self, flat: &Vector) -> Result<Self, NetworkError> {
        check_dim(self.n_params(), flat.len())?;
        let (c, m, d) = (self.classes(), self.width(), self.input_dim());
        let a = DenseMatrix::from_row_slice(c, m, &flat.as_slice()[..c * m]);
        let w = DenseMatrix::from_row_slice(m, d, &flat.as_slice()[c * m..]);
        Self::new(a, w, self.activation.clone())
    }
}
