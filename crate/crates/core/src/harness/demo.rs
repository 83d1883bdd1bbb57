//! Pairs of different datasets that no network at `alpha <= 2` can tell apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::network::{ActivationPoly, LabeledDataset, ModelParams};
use crate::numkernels::{DenseMatrix, Vector};

/// Residuals must agree to this for the demonstration to hold.
pub const DEMO_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub alpha: usize,
    pub seed: u64,
    pub samples_a: Vec<Vec<f64>>,
    pub lambda_a: Vec<f64>,
    pub samples_b: Vec<Vec<f64>>,
    pub lambda_b: Vec<f64>,
    /// `||theta - sum_i lambda_i y_i grad Phi(x_i)||` for each dataset.
    pub residual_a: f64,
    pub residual_b: f64,
    /// Max-abs difference of the two residual vectors.
    pub residual_gap: f64,
    /// Smallest sign-invariant distance from a sample of `b` to any sample of `a`.
    pub sample_separation: f64,
    pub holds: bool,
}

/// `theta - sum_i lambda_i y_i grad_theta Phi(x_i)`.
pub fn kkt_residual_vector(params: &ModelParams, ds: &LabeledDataset, lambda: &[f64]) -> Result<Vector, HarnessError> {
    let signs = ds.signs()?;
    let mut r = params.to_flat();
    for i in 0..ds.len() {
        r.axpy(-lambda[i] * signs[i], &params.grad_theta(&ds.sample(i))?, 1.0);
    }
    Ok(r)
}

fn rows(ds: &LabeledDataset) -> Vec<Vec<f64>> {
    ds.samples.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Builds two unit-norm datasets in dimension `d` with equal `sum_i lambda_i y_i x_i^{(x)alpha}`
/// and evaluates both KKT residuals at the same random homogeneous network of width `m`.
///
/// `alpha = 1`: `{u, v}` with unit weights against `{(u + v) / |u + v|}` with weight `|u + v|`.
/// `alpha = 2`: orthonormal `{u, v}` against `{(u + v) / sqrt 2, (u - v) / sqrt 2}`, both unit weights.
pub fn demo_nonidentifiable(alpha: usize, d: usize, m: usize, seed: u64) -> Result<DemoReport, HarnessError> {
    if !(1..=2).contains(&alpha) {
        return Err(HarnessError::config("alpha", "demonstrations exist for alpha 1 and 2"));
    }
    if d < 2 || m == 0 {
        return Err(HarnessError::config("d", "need d >= 2 and m >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DenseMatrix::from_fn(d, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let (u, v) = (q.column(0).into_owned(), q.column(1).into_owned());
    let (a_pts, lambda_a, b_pts, lambda_b) = match alpha {
        1 => {
            let s = &u + &v;
            let n = s.norm();
            (vec![u.clone(), v.clone()], vec![1.0, 1.0], vec![s / n], vec![n])
        }
        _ => {
            let h = std::f64::consts::FRAC_1_SQRT_2;
            (vec![u.clone(), v.clone()], vec![1.0, 1.0], vec![(&u + &v) * h, (&u - &v) * h], vec![1.0, 1.0])
        }
    };
    let to_ds = |pts: &[Vector]| -> Result<LabeledDataset, HarnessError> {
        let x = DenseMatrix::from_fn(pts.len(), d, |i, k| pts[i][k]);
        Ok(LabeledDataset::new(x, vec![1; pts.len()], true)?)
    };
    let (ds_a, ds_b) = (to_ds(&a_pts)?, to_ds(&b_pts)?);
    let a = Vector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let w = DenseMatrix::from_fn(m, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let params = ModelParams::new(a, w, ActivationPoly::power(alpha))?;
    let ra = kkt_residual_vector(&params, &ds_a, &lambda_a)?;
    let rb = kkt_residual_vector(&params, &ds_b, &lambda_b)?;
    let residual_gap = (&ra - &rb).amax();
    let sample_separation = b_pts
        .iter()
        .map(|b| a_pts.iter().map(|a| (a - b).norm().min((a + b).norm())).fold(f64::INFINITY, f64::min))
        .fold(f64::INFINITY, f64::min);
    Ok(DemoReport {
        alpha,
        seed,
        samples_a: rows(&ds_a),
        lambda_a,
        samples_b: rows(&ds_b),
        lambda_b,
        residual_a: ra.norm(),
        residual_b: rb.norm(),
        residual_gap,
        sample_separation,
        holds: residual_gap <= DEMO_TOL * (1.0 + ra.norm()),
    })
}
