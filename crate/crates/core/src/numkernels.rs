//! Dense linear-algebra kernels with explicit tolerance contracts.
//!
//! Everything downstream (tensor slices, interpolation, Jennrich pencils,
//! splitting matrices) funnels through the handful of routines here:
//!
//! - [`sym_eig`]: symmetric eigendecomposition, ascending.
//! - [`svd_pinv`]: thin SVD with a relative rank cut and the Moore-Penrose inverse.
//! - [`eig_general`]: real eigenpairs of a non-symmetric matrix with a real spectrum.
//! - [`lanczos_min_eig`]: matrix-free smallest eigenpair from a Hessian-vector product.
//! - [`nnls`]: Lawson-Hanson nonnegative least squares.
//!
//! Factorizations come from `nalgebra`; the Lanczos iteration and NNLS are
//! written out here because their restart and tolerance behavior is part of
//! the contract.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub type DenseMatrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default relative rank cut (relative to the largest singular value).
pub const DEFAULT_RANK_TOL: f64 = 1e-10;
/// Default relative tolerance on imaginary parts in [`eig_general`].
pub const DEFAULT_IMAG_TOL: f64 = 1e-7;

const SYMMETRY_TOL: f64 = 1e-10;
const MAX_LANCZOS_RESTARTS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix or vector has a non-finite entry")]
    NonFinite,
    #[error("spectrum is complex (imaginary part {imag:e} exceeds tolerance)")]
    ComplexSpectrum { imag: f64 },
    #[error("eigenvector residual {residual:e} too large; matrix may be defective")]
    Defective { residual: f64 },
    #[error("Lanczos breakdown persisted after {restarts} restarts")]
    NumericalBreakdown { restarts: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// An eigenvalue with a unit-norm eigenvector.
#[derive(Debug, Clone, PartialEq)]
pub struct EigPair {
    pub value: f64,
    pub vector: Vector,
}

fn check_finite(m: &DenseMatrix) -> Result<(), LinalgError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite)
    }
}

fn check_square(m: &DenseMatrix) -> Result<(), LinalgError> {
    if m.nrows() == m.ncols() {
        Ok(())
    } else {
        Err(LinalgError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        })
    }
}

/// Largest absolute entry.
pub fn max_abs(m: &DenseMatrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Eigendecomposition of a symmetric matrix, pairs sorted ascending by value.
pub fn sym_eig(m: &DenseMatrix) -> Result<Vec<EigPair>, LinalgError> {
    check_square(m)?;
    check_finite(m)?;
    let n = m.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let scale = max_abs(m).max(f64::MIN_POSITIVE);
    let asymmetry = max_abs(&(m - m.transpose()));
    if asymmetry > SYMMETRY_TOL * scale {
        return Err(LinalgError::NotSymmetric { asymmetry });
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut pairs: Vec<EigPair> = (0..n)
        .map(|k| EigPair {
            value: eig.eigenvalues[k],
            vector: eig.eigenvectors.column(k).into_owned(),
        })
        .collect();
    pairs.sort_by(|a, b| a.value.total_cmp(&b.value));
    Ok(pairs)
}

/// Smallest eigenvalue of a symmetric matrix (dense).
pub fn sym_min_eig(m: &DenseMatrix) -> Result<EigPair, LinalgError> {
    let mut pairs = sym_eig(m)?;
    if pairs.is_empty() {
        return Err(LinalgError::DimensionMismatch {
            expected: 1,
            got: 0,
        });
    }
    Ok(pairs.swap_remove(0))
}

/// Thin SVD plus pseudoinverse restricted to the numerical rank.
#[derive(Debug, Clone)]
pub struct SvdPinv {
    /// Left singular vectors, `rows x min(rows, cols)`, columns ordered by descending singular value.
    pub u: DenseMatrix,
    /// Singular values, descending.
    pub singular: Vector,
    /// Right singular vectors transposed, `min(rows, cols) x cols`.
    pub vt: DenseMatrix,
    /// Moore-Penrose pseudoinverse on the retained rank, `cols x rows`.
    pub pinv: DenseMatrix,
    /// `#{sigma_i > rank_tol * sigma_1}`.
    pub rank: usize,
}

/// SVD and rank-truncated pseudoinverse; `rank_tol` is relative to the largest singular value.
pub fn svd_pinv(m: &DenseMatrix, rank_tol: f64) -> SvdPinv {
    assert!(rank_tol > 0.0, "rank_tol must be positive");
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return SvdPinv {
            u: DenseMatrix::zeros(rows, 0),
            singular: Vector::zeros(0),
            vt: DenseMatrix::zeros(0, cols),
            pinv: DenseMatrix::zeros(cols, rows),
            rank: 0,
        };
    }
    let svd = SVD::new(m.clone(), true, true);
    let u_raw = svd.u.expect("requested U");
    let vt_raw = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut u = DenseMatrix::zeros(rows, k);
    let mut vt = DenseMatrix::zeros(k, cols);
    let mut singular = Vector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        u.set_column(dst, &u_raw.column(src));
        vt.set_row(dst, &vt_raw.row(src));
        singular[dst] = svd.singular_values[src];
    }

    let top = singular[0];
    let rank = if top > 0.0 && top.is_finite() {
        singular.iter().filter(|&&s| s > rank_tol * top).count()
    } else {
        0
    };
    let mut pinv = DenseMatrix::zeros(cols, rows);
    for i in 0..rank {
        let vi = vt.row(i).transpose();
        let ui = u.column(i);
        pinv += (vi * ui.transpose()) / singular[i];
    }
    SvdPinv {
        u,
        singular,
        vt,
        pinv,
        rank,
    }
}

/// Numerical rank with the given relative tolerance.
pub fn numerical_rank(m: &DenseMatrix, rank_tol: f64) -> usize {
    svd_pinv(m, rank_tol).rank
}

/// Real eigenpairs of a general square matrix whose spectrum is real.
///
/// Eigenvalues come from the real Schur form (Hessenberg QR). Eigenvectors are
/// null vectors of `C - lambda I`; clustered eigenvalues share a null space
/// of the cluster's multiplicity. Returns `ComplexSpectrum` when any
/// eigenvalue has `|Im| > imag_tol * ||C||_F`.
pub fn eig_general(c: &DenseMatrix, imag_tol: f64) -> Result<Vec<EigPair>, LinalgError> {
    check_square(c)?;
    check_finite(c)?;
    let n = c.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let norm = c.norm().max(f64::MIN_POSITIVE);
    let schur = Schur::new(c.clone());
    let eigs = schur.complex_eigenvalues();
    let mut values = Vec::with_capacity(n);
    for z in eigs.iter() {
        if z.im.abs() > imag_tol * norm {
            return Err(LinalgError::ComplexSpectrum { imag: z.im.abs() });
        }
        values.push(z.re);
    }
    values.sort_by(|a, b| a.total_cmp(b));

    let cluster_tol = 1e-9 * norm;
    let mut pairs = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[end] - values[end - 1] <= cluster_tol {
            end += 1;
        }
        let mult = end - start;
        let lambda = values[start..end].iter().sum::<f64>() / mult as f64;
        let shifted = c - DenseMatrix::identity(n, n) * lambda;
        let svd = svd_pinv(&shifted, DEFAULT_RANK_TOL);
        // Null vectors are the right singular vectors of the smallest singular values.
        for k in 0..mult {
            let row = svd.vt.nrows() - 1 - k;
            let mut v = svd.vt.row(row).transpose();
            normalize_sign(&mut v);
            pairs.push(EigPair {
                value: values[start + k],
                vector: v,
            });
        }
        start = end;
    }

    for p in &pairs {
        let residual = (c * &p.vector - &p.vector * p.value).norm();
        if residual > 1e-6 * norm {
            return Err(LinalgError::Defective { residual });
        }
    }
    Ok(pairs)
}

/// Flip `v` so that its largest-magnitude entry is positive.
pub fn normalize_sign(v: &mut Vector) {
    let mut best = 0.0_f64;
    let mut sign = 1.0;
    for x in v.iter() {
        if x.abs() > best {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        v.neg_mut();
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    let mut v = Vector::from_fn(dim, |_, _| StandardNormal.sample(rng));
    let n = v.norm();
    v /= n;
    v
}

/// Orthogonalize `w` against every vector in `basis` (two passes of classical Gram-Schmidt).
fn reorthogonalize(w: &mut Vector, basis: &[Vector]) {
    for _ in 0..2 {
        for q in basis {
            let c = q.dot(w);
            w.axpy(-c, q, 1.0);
        }
    }
}

/// Restart policy for [`lanczos_min_eig_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LanczosOptions {
    /// Additional Krylov cycles allowed after the first one.
    pub max_restarts: usize,
    /// Stop once the Ritz residual `||S y - theta y||` falls below `tol * ||S||`.
    pub tol: f64,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self {
            max_restarts: 50,
            tol: 1e-10,
        }
    }
}

/// Smallest eigenpair of the symmetric operator `hvp` by Lanczos with full
/// reorthogonalization, using the default restart policy.
///
/// `iters` is the Krylov subspace size per cycle. Each further cycle restarts
/// from the current Ritz vector until the residual test passes.
pub fn lanczos_min_eig<F>(hvp: F, dim: usize, iters: usize, seed: u64) -> Result<EigPair, LinalgError>
where
    F: Fn(&Vector) -> Vector,
{
    lanczos_min_eig_with(hvp, dim, iters, seed, LanczosOptions::default())
}

/// [`lanczos_min_eig`] with an explicit restart policy. `max_restarts = 0`
/// gives the plain single-cycle iteration.
pub fn lanczos_min_eig_with<F>(
    hvp: F,
    dim: usize,
    iters: usize,
    seed: u64,
    opts: LanczosOptions,
) -> Result<EigPair, LinalgError>
where
    F: Fn(&Vector) -> Vector,
{
    if dim == 0 {
        return Err(LinalgError::DimensionMismatch {
            expected: 1,
            got: 0,
        });
    }
    let steps = iters.max(2).min(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut start = random_unit(&mut rng, dim);
    let mut best: Option<EigPair> = None;
    for _ in 0..=opts.max_restarts {
        let cycle = lanczos_cycle(&hvp, start, steps, &mut rng)?;
        let done = cycle.residual <= opts.tol * cycle.scale.max(f64::MIN_POSITIVE);
        start = cycle.pair.vector.clone();
        let improved = best.as_ref().is_none_or(|b| cycle.pair.value <= b.value);
        if improved {
            best = Some(cycle.pair);
        }
        if done || steps == dim {
            break;
        }
    }
    Ok(best.expect("at least one cycle ran"))
}

struct LanczosCycle {
    pair: EigPair,
    residual: f64,
    scale: f64,
}

fn lanczos_cycle<F>(hvp: &F, start: Vector, steps: usize, rng: &mut ChaCha8Rng) -> Result<LanczosCycle, LinalgError>
where
    F: Fn(&Vector) -> Vector,
{
    let dim = start.len();
    let mut basis: Vec<Vector> = Vec::with_capacity(steps);
    let mut alphas: Vec<f64> = Vec::with_capacity(steps);
    let mut betas: Vec<f64> = Vec::with_capacity(steps);
    let mut scale = 0.0_f64;
    let mut last_beta = 0.0;

    basis.push(start);
    for j in 0..steps {
        let q = &basis[j];
        let mut w = hvp(q);
        if w.len() != dim {
            return Err(LinalgError::DimensionMismatch {
                expected: dim,
                got: w.len(),
            });
        }
        if !w.iter().all(|x| x.is_finite()) {
            return Err(LinalgError::NumericalBreakdown { restarts: 0 });
        }
        let alpha = q.dot(&w);
        scale = scale.max(w.norm());
        w.axpy(-alpha, q, 1.0);
        if j > 0 {
            w.axpy(-betas[j - 1], &basis[j - 1], 1.0);
        }
        reorthogonalize(&mut w, &basis);
        alphas.push(alpha);
        let beta = w.norm();
        if j + 1 == steps {
            last_beta = beta;
            break;
        }
        let breakdown_tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
        if beta > breakdown_tol {
            betas.push(beta);
            basis.push(w / beta);
            continue;
        }
        // Invariant subspace found: continue from a fresh direction.
        betas.push(0.0);
        let mut restarted = None;
        for _ in 0..MAX_LANCZOS_RESTARTS {
            let mut fresh = random_unit(rng, dim);
            reorthogonalize(&mut fresh, &basis);
            let nrm = fresh.norm();
            if nrm > 1e-8 {
                restarted = Some(fresh / nrm);
                break;
            }
        }
        match restarted {
            Some(v) => basis.push(v),
            None => {
                return Err(LinalgError::NumericalBreakdown {
                    restarts: MAX_LANCZOS_RESTARTS,
                })
            }
        }
    }

    let k = alphas.len();
    let mut tri = DenseMatrix::zeros(k, k);
    for i in 0..k {
        tri[(i, i)] = alphas[i];
        if i + 1 < k {
            tri[(i, i + 1)] = betas[i];
            tri[(i + 1, i)] = betas[i];
        }
    }
    let ritz = sym_min_eig(&tri)?;
    let mut vector = Vector::zeros(dim);
    for (i, q) in basis.iter().take(k).enumerate() {
        vector.axpy(ritz.vector[i], q, 1.0);
    }
    let nrm = vector.norm();
    vector /= nrm;
    Ok(LanczosCycle {
        residual: last_beta * ritz.vector[k - 1].abs(),
        pair: EigPair {
            value: ritz.value,
            vector,
        },
        scale,
    })
}

/// Least squares `argmin ||A x - b||` via the rank-truncated pseudoinverse.
pub fn lstsq(a: &DenseMatrix, b: &Vector, rank_tol: f64) -> Vector {
    svd_pinv(a, rank_tol).pinv * b
}

/// Nonnegative least squares `argmin_{x >= 0} ||A x - b||` (Lawson-Hanson active set).
pub fn nnls(a: &DenseMatrix, b: &Vector) -> Vector {
    let n = a.ncols();
    let mut x = Vector::zeros(n);
    if n == 0 {
        return x;
    }
    let mut passive = vec![false; n];
    let atb = a.transpose() * b;
    let tol = 1e-10 * atb.amax().max(1.0);
    let max_outer = 3 * n + 10;

    for _ in 0..max_outer {
        let w = a.transpose() * (b - a * &x);
        let candidate = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(enter) = candidate else { break };
        passive[enter] = true;

        loop {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let sub = a.select_columns(idx.iter());
            let s_sub = lstsq(&sub, b, DEFAULT_RANK_TOL);
            if s_sub.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (k, &j) in idx.iter().enumerate() {
                    x[j] = s_sub[k];
                }
                break;
            }
            let mut step = f64::INFINITY;
            for (k, &j) in idx.iter().enumerate() {
                if s_sub[k] <= 0.0 {
                    let denom = x[j] - s_sub[k];
                    if denom > 0.0 {
                        step = step.min(x[j] / denom);
                    } else {
                        step = 0.0;
                    }
                }
            }
            let step = if step.is_finite() { step } else { 0.0 };
            for (k, &j) in idx.iter().enumerate() {
                x[j] += step * (s_sub[k] - x[j]);
            }
            for &j in &idx {
                if x[j] <= 1e-15 {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_symmetric(n: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DenseMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (&g + g.transpose()) * 0.5
    }

    fn dense_from_pairs(pairs: &[EigPair]) -> DenseMatrix {
        let n = pairs[0].vector.len();
        let mut m = DenseMatrix::zeros(n, n);
        for p in pairs {
            m += &p.vector * p.vector.transpose() * p.value;
        }
        m
    }

    #[test]
    fn sym_eig_identity_and_diagonal() {
        let pairs = sym_eig(&DenseMatrix::identity(3, 3)).unwrap();
        assert!(pairs.iter().all(|p| (p.value - 1.0).abs() < 1e-14));

        let d = DenseMatrix::from_diagonal(&Vector::from_vec(vec![-2.0, 0.0, 5.0]));
        let pairs = sym_eig(&d).unwrap();
        let values: Vec<f64> = pairs.iter().map(|p| p.value).collect();
        assert_eq!(values, vec![-2.0, 0.0, 5.0]);
        for (k, p) in pairs.iter().enumerate() {
            assert!((p.vector[k].abs() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn sym_eig_reconstructs_random() {
        let m = random_symmetric(6, 3);
        let pairs = sym_eig(&m).unwrap();
        assert!((dense_from_pairs(&pairs) - &m).amax() < 1e-8);
        for w in pairs.windows(2) {
            assert!(w[0].value <= w[1].value);
        }
        for (i, p) in pairs.iter().enumerate() {
            for (j, q) in pairs.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((p.vector.dot(&q.vector) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sym_eig_rejects_asymmetric() {
        let mut m = DenseMatrix::identity(3, 3);
        m[(0, 1)] = 0.5;
        assert!(matches!(sym_eig(&m), Err(LinalgError::NotSymmetric { .. })));
    }

    #[test]
    fn sym_eig_rejects_nan() {
        let mut m = DenseMatrix::identity(2, 2);
        m[(0, 0)] = f64::NAN;
        assert_eq!(sym_eig(&m), Err(LinalgError::NonFinite));
    }

    #[test]
    fn svd_pinv_diagonal_and_zero() {
        let d = DenseMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 0.0]);
        let s = svd_pinv(&d, DEFAULT_RANK_TOL);
        assert_eq!(s.rank, 1);
        let expect = DenseMatrix::from_row_slice(2, 2, &[1.0 / 3.0, 0.0, 0.0, 0.0]);
        assert!((s.pinv - expect).amax() < 1e-15);

        let z = DenseMatrix::zeros(3, 2);
        let s = svd_pinv(&z, DEFAULT_RANK_TOL);
        assert_eq!(s.rank, 0);
        assert_eq!(s.pinv, DenseMatrix::zeros(2, 3));
    }

    #[test]
    fn svd_pinv_penrose_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = DenseMatrix::from_fn(8, 5, |_, _| rng.random_range(-1.0..1.0));
        let s = svd_pinv(&m, DEFAULT_RANK_TOL);
        assert_eq!(s.rank, 5);
        let p = &s.pinv;
        assert!((&m * p * &m - &m).amax() < 1e-8);
        assert!((p * &m * p - p).amax() < 1e-8);
        let mp = &m * p;
        let pm = p * &m;
        assert!((&mp - mp.transpose()).amax() < 1e-8);
        assert!((&pm - pm.transpose()).amax() < 1e-8);
        for w in s.singular.as_slice().windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn eig_general_diagonal_and_rotation() {
        let d = DenseMatrix::from_diagonal(&Vector::from_vec(vec![1.0, 2.0, 3.0]));
        let pairs = eig_general(&d, DEFAULT_IMAG_TOL).unwrap();
        let values: Vec<f64> = pairs.iter().map(|p| p.value).collect();
        for (v, e) in values.iter().zip([1.0, 2.0, 3.0]) {
            assert!((v - e).abs() < 1e-12);
        }

        let rot = DenseMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert!(matches!(
            eig_general(&rot, DEFAULT_IMAG_TOL),
            Err(LinalgError::ComplexSpectrum { .. })
        ));
    }

    #[test]
    fn eig_general_similarity_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = DenseMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let ginv = g.clone().try_inverse().unwrap();
        let diag = [-1.5, -0.2, 0.7, 1.1, 2.4];
        let c = &g * DenseMatrix::from_diagonal(&Vector::from_column_slice(&diag)) * &ginv;
        let pairs = eig_general(&c, DEFAULT_IMAG_TOL).unwrap();
        for (p, e) in pairs.iter().zip(diag) {
            assert!((p.value - e).abs() < 1e-7, "{} vs {}", p.value, e);
        }
        let v = DenseMatrix::from_columns(&pairs.iter().map(|p| p.vector.clone()).collect::<Vec<_>>());
        let lam = DenseMatrix::from_diagonal(&Vector::from_iterator(5, pairs.iter().map(|p| p.value)));
        let recon = &v * lam * v.clone().try_inverse().unwrap();
        assert!((recon - &c).amax() < 1e-7);
    }

    #[test]
    fn eig_general_repeated_eigenvalue() {
        let pairs = eig_general(&DenseMatrix::identity(3, 3), DEFAULT_IMAG_TOL).unwrap();
        let v = DenseMatrix::from_columns(&pairs.iter().map(|p| p.vector.clone()).collect::<Vec<_>>());
        assert!(v.determinant().abs() > 0.5);
    }

    #[test]
    fn lanczos_identity_and_diagonal() {
        let id = |v: &Vector| v.clone();
        let p = lanczos_min_eig(id, 4, 20, 1).unwrap();
        assert!((p.value - 1.0).abs() < 1e-12);
        assert!((p.vector.norm() - 1.0).abs() < 1e-12);

        let diag = Vector::from_vec(vec![-7.0, 1.0, 1.0, 1.0]);
        let op = |v: &Vector| v.component_mul(&diag);
        let p = lanczos_min_eig(op, 4, 20, 2).unwrap();
        assert!((p.value + 7.0).abs() < 1e-12);
        assert!((p.vector[0].abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn lanczos_zero_operator() {
        let p = lanczos_min_eig(|v: &Vector| v * 0.0, 5, 20, 9).unwrap();
        assert_eq!(p.value, 0.0);
    }

    #[test]
    fn lanczos_matches_dense_on_random_30() {
        let m = random_symmetric(30, 17);
        let dense = sym_min_eig(&m).unwrap().value;
        let p = lanczos_min_eig(|v: &Vector| &m * v, 30, 30, 4).unwrap();
        assert!((p.value - dense).abs() < 1e-6);
        let single = LanczosOptions {
            max_restarts: 0,
            ..Default::default()
        };
        let p20 = lanczos_min_eig_with(|v: &Vector| &m * v, 30, 20, 4, single).unwrap();
        assert!(p20.value >= dense - 1e-12);
    }

    #[test]
    fn lanczos_full_krylov_is_exact() {
        for n in 2..=12 {
            let m = random_symmetric(n, 100 + n as u64);
            let dense = sym_min_eig(&m).unwrap().value;
            let p = lanczos_min_eig(|v: &Vector| &m * v, n, n, 7).unwrap();
            assert!((p.value - dense).abs() < 1e-9, "n={n}");
        }
    }

    #[test]
    fn lanczos_is_deterministic() {
        let m = random_symmetric(10, 8);
        let a = lanczos_min_eig(|v: &Vector| &m * v, 10, 6, 42).unwrap();
        let b = lanczos_min_eig(|v: &Vector| &m * v, 10, 6, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lanczos_nan_operator_errors() {
        let r = lanczos_min_eig(|v: &Vector| v * f64::NAN, 3, 5, 0);
        assert!(matches!(r, Err(LinalgError::NumericalBreakdown { .. })));
    }

    #[test]
    fn nnls_matches_unconstrained_when_interior() {
        let a = DenseMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let x_true = Vector::from_vec(vec![0.5, 2.0]);
        let b = &a * &x_true;
        let x = nnls(&a, &b);
        assert!((x - x_true).amax() < 1e-12);
    }

    #[test]
    fn nnls_clamps_negative_component() {
        let a = DenseMatrix::identity(2, 2);
        let b = Vector::from_vec(vec![1.0, -3.0]);
        let x = nnls(&a, &b);
        assert!((x[0] - 1.0).abs() < 1e-14);
        assert_eq!(x[1], 0.0);
    }
}
