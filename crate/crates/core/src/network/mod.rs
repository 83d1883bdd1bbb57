//! Two-layer polynomial networks `Phi(theta; x) = sum_j a_j sigma(w_j . x)`.
//!
//! Parameters are flattened as all of `a` followed by the rows of `W`.

mod kkt;
mod multiclass;
mod train;

pub use kkt::{kkt_certify, kkt_synthesize, KktCertificate, KktFixture, SynthOptions};
pub use multiclass::MulticlassParams;
pub use train::{train_to_margin, StepSchedule, StopReason, TrainConfig, TrainLog, TrainRecord};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkernels::{numerical_rank, DenseMatrix, LinalgError, Vector};
use crate::tensor::{Component, SymmetricTensor, TensorError};

const UNIT_NORM_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid activation: {0}")]
    InvalidActivation(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("operation requires a homogeneous activation c*t^alpha")]
    NotHomogeneous,
    #[error("training diverged at iteration {iter}")]
    Diverged { iter: usize },
    #[error("KKT synthesis failed: {0}")]
    SynthesisFailed(String),
    #[error("sample {index} has non-positive margin {margin}")]
    InfeasibleMargins { index: usize, margin: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn check_dim(expected: usize, got: usize) -> Result<(), NetworkError> {
    if expected == got {
        Ok(())
    } else {
        Err(NetworkError::DimensionMismatch { expected, got })
    }
}

/// `sigma(t) = sum_k c_k t^k` with nonzero leading coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationPoly {
    coeffs: Vec<f64>,
}

impl ActivationPoly {
    pub fn new(coeffs: Vec<f64>) -> Result<Self, NetworkError> {
        if coeffs.len() < 2 {
            return Err(NetworkError::InvalidActivation("degree must be >= 1".into()));
        }
        if !coeffs.iter().all(|c| c.is_finite()) {
            return Err(NetworkError::InvalidActivation("non-finite coefficient".into()));
        }
        if *coeffs.last().unwrap() == 0.0 {
            return Err(NetworkError::InvalidActivation("leading coefficient is zero".into()));
        }
        Ok(Self { coeffs })
    }

    /// `t^alpha`.
    pub fn power(alpha: usize) -> Self {
        assert!(alpha >= 1, "alpha >= 1");
        let mut coeffs = vec![0.0; alpha + 1];
        coeffs[alpha] = 1.0;
        Self { coeffs }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn leading(&self) -> f64 {
        self.coeffs[self.degree()]
    }

    pub fn is_homogeneous(&self) -> bool {
        self.coeffs[..self.degree()].iter().all(|&c| c == 0.0)
    }

    /// `k`-th derivative at `t`.
    pub fn derivative(&self, k: usize, t: f64) -> f64 {
        let n = self.coeffs.len();
        let mut acc = 0.0;
        for p in (k..n).rev() {
            let falling: f64 = (p - k + 1..=p).map(|v| v as f64).product();
            acc = acc * t + self.coeffs[p] * falling;
        }
        acc
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.derivative(0, t)
    }
}

/// Keeps only the top-degree term `c_alpha t^alpha`.
pub fn homogenize(activation: &ActivationPoly) -> ActivationPoly {
    let alpha = activation.degree();
    let mut coeffs = vec![0.0; alpha + 1];
    coeffs[alpha] = activation.leading();
    ActivationPoly { coeffs }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Outer weights, length `m`.
    pub a: Vector,
    /// Inner weights, `m x d`, one neuron per row.
    pub w: DenseMatrix,
    pub activation: ActivationPoly,
}

impl ModelParams {
    pub fn new(a: Vector, w: DenseMatrix, activation: ActivationPoly) -> Result<Self, NetworkError> {
        if a.is_empty() {
            return Err(NetworkError::InvalidParams("width must be >= 1".into()));
        }
        check_dim(a.len(), w.nrows())?;
        if w.ncols() == 0 {
            return Err(NetworkError::InvalidParams("input dim must be >= 1".into()));
        }
        if !a.iter().chain(w.iter()).all(|v| v.is_finite()) {
            return Err(NetworkError::InvalidParams("non-finite entry".into()));
        }
        Ok(Self { a, w, activation })
    }

    pub fn width(&self) -> usize {
        self.a.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn alpha(&self) -> usize {
        self.activation.degree()
    }

    /// `m (d + 1)`.
    pub fn n_params(&self) -> usize {
        self.width() * (self.input_dim() + 1)
    }

    pub fn neuron(&self, j: usize) -> Vector {
        self.w.row(j).transpose()
    }

    pub fn forward(&self, x: &Vector) -> Result<f64, NetworkError> {
        check_dim(self.input_dim(), x.len())?;
        let pre = &self.w * x;
        Ok(self
            .a
            .iter()
            .zip(pre.iter())
            .map(|(a, t)| a * self.activation.eval(*t))
            .sum())
    }

    /// `d Phi / d theta` in the flat layout.
    pub fn grad_theta(&self, x: &Vector) -> Result<Vector, NetworkError> {
        check_dim(self.input_dim(), x.len())?;
        let (m, d) = (self.width(), self.input_dim());
        let pre = &self.w * x;
        let mut g = Vector::zeros(m * (d + 1));
        for j in 0..m {
            g[j] = self.activation.eval(pre[j]);
            let s = self.a[j] * self.activation.derivative(1, pre[j]);
            for k in 0..d {
                g[m + j * d + k] = s * x[k];
            }
        }
        Ok(g)
    }

    pub fn to_flat(&self) -> Vector {
        let (m, d) = (self.width(), self.input_dim());
        let mut v = Vector::zeros(m * (d + 1));
        v.rows_mut(0, m).copy_from(&self.a);
        for j in 0..m {
            for k in 0..d {
                v[m + j * d + k] = self.w[(j, k)];
            }
        }
        v
    }

    /// Same shape and activation as `self`, values from `flat`.
    pub fn with_flat(&self, flat: &Vector) -> Result<Self, NetworkError> {
        check_dim(self.n_params(), flat.len())?;
        let (m, d) = (self.width(), self.input_dim());
        let a = flat.rows(0, m).into_owned();
        let w = DenseMatrix::from_row_slice(m, d, &flat.as_slice()[m..]);
        Self::new(a, w, self.activation.clone())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            a: &self.a * c,
            w: &self.w * c,
            activation: self.activation.clone(),
        }
    }

    pub fn homogenized(&self) -> Self {
        Self {
            a: self.a.clone(),
            w: self.w.clone(),
            activation: homogenize(&self.activation),
        }
    }

    pub fn to_checkpoint(&self, seed: Option<u64>, train_meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            m: self.width(),
            d: self.input_dim(),
            alpha: self.alpha(),
            activation_coeffs: self.activation.coeffs().to_vec(),
            a: self.a.iter().copied().collect(),
            w: (0..self.width())
                .map(|j| self.w.row(j).iter().copied().collect())
                .collect(),
            seed,
            train_meta,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NetworkError> {
        let activation = ActivationPoly::new(ck.activation_coeffs.clone())?;
        check_dim(ck.alpha, activation.degree())?;
        check_dim(ck.m, ck.a.len())?;
        check_dim(ck.m, ck.w.len())?;
        let mut flat = Vec::with_capacity(ck.m * ck.d);
        for row in &ck.w {
            check_dim(ck.d, row.len())?;
            flat.extend_from_slice(row);
        }
        Self::new(
            Vector::from_vec(ck.a.clone()),
            DenseMatrix::from_row_slice(ck.m, ck.d, &flat),
            activation,
        )
    }
}

/// Serialized model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub m: usize,
    pub d: usize,
    pub alpha: usize,
    pub activation_coeffs: Vec<f64>,
    pub a: Vec<f64>,
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub train_meta: serde_json::Value,
}

/// Samples with labels: `+-1` for binary problems, class ids for multiclass.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// `n x d`, one sample per row.
    pub samples: DenseMatrix,
    pub labels: Vec<i64>,
    pub unit_norm: bool,
}

impl LabeledDataset {
    pub fn new(samples: DenseMatrix, labels: Vec<i64>, unit_norm: bool) -> Result<Self, NetworkError> {
        check_dim(samples.nrows(), labels.len())?;
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(NetworkError::InvalidDataset("empty dataset".into()));
        }
        if !samples.iter().all(|v| v.is_finite()) {
            return Err(NetworkError::InvalidDataset("non-finite sample".into()));
        }
        if unit_norm {
            for (i, row) in samples.row_iter().enumerate() {
                let norm = row.norm();
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(NetworkError::InvalidDataset(format!(
                        "sample {i} has norm {norm}, expected 1"
                    )));
                }
            }
        }
        Ok(Self {
            samples,
            labels,
            unit_norm,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn sample(&self, i: usize) -> Vector {
        self.samples.row(i).transpose()
    }

    pub fn is_binary(&self) -> bool {
        self.labels.iter().all(|&y| y == 1 || y == -1)
    }

    /// Label as `+-1.0`; errors unless the dataset is binary.
    pub fn sign(&self, i: usize) -> Result<f64, NetworkError> {
        match self.labels[i] {
            1 => Ok(1.0),
            -1 => Ok(-1.0),
            y => Err(NetworkError::InvalidDataset(format!("label {y} is not +-1"))),
        }
    }

    pub fn signs(&self) -> Result<Vec<f64>, NetworkError> {
        (0..self.len()).map(|i| self.sign(i)).collect()
    }

    pub fn rank(&self) -> usize {
        numerical_rank(&self.samples, 1e-10)
    }

    /// `sum_i lambda_i y_i x_i^{(x)alpha}` over samples with nonzero weight.
    pub fn kkt_tensor(&self, lambda: &[f64], alpha: usize) -> Result<SymmetricTensor, NetworkError> {
        check_dim(self.len(), lambda.len())?;
        let signs = self.signs()?;
        let mut comps = Vec::new();
        for i in 0..self.len() {
            let b = lambda[i] * signs[i];
            if b != 0.0 {
                let x = self.sample(i);
                let norm = x.norm();
                comps.push(Component::unit(&x, b * norm.powi(alpha as i32))?);
            }
        }
        if comps.is_empty() {
            return Ok(SymmetricTensor::zeros(alpha, self.dim())?);
        }
        Ok(SymmetricTensor::from_components(&comps, alpha)?)
    }
}
