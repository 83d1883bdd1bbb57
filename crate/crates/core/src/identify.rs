//! Recovering the active samples from a KKT point of a homogeneous network.
//!
//! The stationarity equations give `f(W_j) = W_j / (c alpha a_j)` at every
//! neuron. Interpolating these evaluations recovers `f`, polarization recovers
//! `T = sum_i lambda_i y_i x_i^{(x)alpha}`, and a two-slice pencil recovers the
//! rank-one components.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{ModelParams, NetworkError};
use crate::numkernels::{eig_general, svd_pinv, DenseMatrix, LinalgError, Vector, DEFAULT_IMAG_TOL};
use crate::tensor::{polarize, Component, FeatureIndexing, SymmetricTensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Extract,
    Interpolate,
    Polarize,
    Decompose,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Extract => "extract",
            Stage::Interpolate => "interpolate",
            Stage::Polarize => "polarize",
            Stage::Decompose => "decompose",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IdentifyError {
    #[error("neuron {index} has a ~ 0 but W != 0; parameters are far from a KKT point")]
    InconsistentNeuron { index: usize },
    #[error("no usable neurons")]
    NoEvaluations,
    #[error("interpolation rank {rank} < {needed} unknowns")]
    InterpolationRankDeficient { rank: usize, needed: usize },
    #[error("decomposition failed after {retries} probe retries: {reason}")]
    DecompositionFailed { retries: usize, reason: String },
    #[error("slice rank is ambiguous: sigma_r / sigma_1 = {retained:e}, sigma_(r+1) / sigma_1 = {dropped:e}")]
    RankAmbiguous { retained: f64, dropped: f64 },
    #[error("{fits} exact fits disagree; the evaluations do not determine the components")]
    NotUnique { fits: usize },
    #[error("activation must be homogeneous with degree >= {min}")]
    Unsupported { min: usize },
    #[error("{stage} stage: {source}")]
    AtStage {
        stage: Stage,
        #[source]
        source: Box<IdentifyError>,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl IdentifyError {
    fn at(self, stage: Stage) -> Self {
        IdentifyError::AtStage {
            stage,
            source: Box::new(self),
        }
    }

    /// The error with any stage labels removed.
    pub fn root(&self) -> &IdentifyError {
        match self {
            IdentifyError::AtStage { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Evaluations `values[j] = f(points[j])` of a degree-`degree` homogeneous map.
#[derive(Debug, Clone, PartialEq)]
pub struct FEvaluations {
    pub points: Vec<Vector>,
    pub values: Vec<Vector>,
    pub degree: usize,
}

impl FEvaluations {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.len())
    }

    /// Rescales every pair to a unit point, using homogeneity of `f`.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        for (p, v) in out.points.iter_mut().zip(out.values.iter_mut()) {
            let n = p.norm();
            if n > 0.0 {
                *p /= n;
                *v /= n.powi(self.degree as i32);
            }
        }
        out
    }
}

/// `K_pq = (W_p . W_q)^{alpha - 1}` over the rows of `w`.
pub fn gram_matrix(w: &DenseMatrix, alpha: usize) -> DenseMatrix {
    assert!(alpha >= 2, "alpha >= 2");
    let inner = w * w.transpose();
    inner.map(|v| v.powi(alpha as i32 - 1))
}

/// `f(W_j) = W_j / (c alpha a_j)` for every neuron. Neurons with both `|a_j|`
/// and `||W_j||` below `tol * scale` are dropped; `a_j ~ 0` with `W_j != 0` is an error.
pub fn extract_f_evaluations(params: &ModelParams, tol: f64) -> Result<FEvaluations, IdentifyError> {
    let alpha = params.alpha();
    if !params.activation.is_homogeneous() || alpha < 2 {
        return Err(IdentifyError::Unsupported { min: 2 });
    }
    let c = params.activation.leading();
    let scale = params.a.amax().max(params.w.amax());
    let cut = tol * scale;
    let mut points = Vec::new();
    let mut values = Vec::new();
    for j in 0..params.width() {
        let a = params.a[j];
        let w = params.neuron(j);
        if a.abs() > cut {
            values.push(&w / (c * alpha as f64 * a));
            points.push(w);
        } else if w.amax() > cut {
            return Err(IdentifyError::InconsistentNeuron { index: j });
        }
    }
    if points.is_empty() {
        return Err(IdentifyError::NoEvaluations);
    }
    Ok(FEvaluations {
        points,
        values,
        degree: alpha - 1,
    })
}

/// Coefficients `A` (`d x N`) with `f(w) = A phi(w)` for raw monomial features.
#[derive(Debug, Clone)]
pub struct Interpolant {
    pub coeffs: DenseMatrix,
    pub indexing: FeatureIndexing,
    /// Numerical rank of the feature matrix.
    pub rank: usize,
    /// `||F - V A^T||_F / ||F||_F`.
    pub residual: f64,
}

impl Interpolant {
    pub fn eval(&self, w: &Vector) -> Result<Vector, TensorError> {
        Ok(&self.coeffs * self.indexing.monomial_features(w)?)
    }
}

/// Least-squares fit of `f` in the monomial basis. Points are normalized first
/// (`f` is homogeneous) so the rank test is scale-free.
pub fn interpolate_f(
    evals: &FEvaluations,
    indexing: &FeatureIndexing,
    rank_tol: f64,
) -> Result<Interpolant, IdentifyError> {
    if evals.is_empty() {
        return Err(IdentifyError::NoEvaluations);
    }
    let ev = evals.normalized();
    let (m, n, d) = (ev.len(), indexing.len(), indexing.dim());
    let mut v = DenseMatrix::zeros(m, n);
    let mut f = DenseMatrix::zeros(m, d);
    for j in 0..m {
        v.set_row(j, &indexing.monomial_features(&ev.points[j])?.transpose());
        if ev.values[j].len() != d {
            return Err(TensorError::DimensionMismatch {
                expected: d,
                got: ev.values[j].len(),
            }
            .into());
        }
        f.set_row(j, &ev.values[j].transpose());
    }
    let svd = svd_pinv(&v, rank_tol);
    if svd.rank < n {
        return Err(IdentifyError::InterpolationRankDeficient {
            rank: svd.rank,
            needed: n,
        });
    }
    let at = &svd.pinv * &f;
    let residual = (&f - &v * &at).norm() / f.norm().max(f64::MIN_POSITIVE);
    Ok(Interpolant {
        coeffs: at.transpose(),
        indexing: indexing.clone(),
        rank: svd.rank,
        residual,
    })
}

/// Symmetric tensor whose contraction map is `w -> A phi(w)`, by polarizing
/// `p(w) = <w, A phi(w)>` at coordinate vectors.
pub fn tensor_from_f(coeffs: &DenseMatrix, indexing: &FeatureIndexing) -> Result<SymmetricTensor, IdentifyError> {
    let order = indexing.degree() + 1;
    let d = indexing.dim();
    if coeffs.nrows() != d || coeffs.ncols() != indexing.len() {
        return Err(TensorError::DimensionMismatch {
            expected: d * indexing.len(),
            got: coeffs.nrows() * coeffs.ncols(),
        }
        .into());
    }
    if order > crate::tensor::MAX_ORDER {
        return Err(TensorError::UnsupportedOrder { order }.into());
    }
    let p = |w: &Vector| w.dot(&(coeffs * indexing.monomial_features(w).expect("dims checked")));
    let basis: Vec<Vector> = (0..d)
        .map(|i| {
            let mut e = Vector::zeros(d);
            e[i] = 1.0;
            e
        })
        .collect();
    let mut err = None;
    let t = SymmetricTensor::from_symmetric_fn(order, d, |idx| {
        let us: Vec<Vector> = idx.iter().map(|&i| basis[i].clone()).collect();
        polarize(p, order, &us).unwrap_or_else(|e| {
            err = Some(e);
            0.0
        })
    })?;
    match err {
        Some(e) => Err(e.into()),
        None => Ok(t),
    }
}

/// Result of a direct symmetric fit.
#[derive(Debug, Clone)]
pub struct SymmetricFit {
    pub tensor: SymmetricTensor,
    pub rank: usize,
    pub unknowns: usize,
    pub residual: f64,
}

/// Least-squares fit of a symmetric order-`degree + 1` tensor `T` to the
/// evaluations `T(., w_j, ..., w_j) = v_j`. The unknowns are the distinct
/// entries of `T`, which makes this a constrained version of [`interpolate_f`]
/// needing fewer distinct points.
pub fn fit_symmetric_tensor(evals: &FEvaluations, rank_tol: f64) -> Result<SymmetricFit, IdentifyError> {
    if evals.is_empty() {
        return Err(IdentifyError::NoEvaluations);
    }
    let ev = evals.normalized();
    let d = ev.dim();
    let order = ev.degree + 1;
    if order > crate::tensor::MAX_ORDER {
        return Err(TensorError::UnsupportedOrder { order }.into());
    }
    let canon = FeatureIndexing::new(d, order);
    let unknowns = canon.len();
    let col_of = |sorted: &[usize]| -> usize {
        let mut e = vec![0usize; d];
        for &i in sorted {
            e[i] += 1;
        }
        canon.monomials().iter().position(|m| *m == e).expect("canonical index")
    };
    let tail = d.pow(ev.degree as u32);
    let mut tails: Vec<Vec<usize>> = Vec::with_capacity(tail);
    for flat in 0..tail {
        let mut idx = vec![0usize; ev.degree];
        let mut r = flat;
        for slot in idx.iter_mut().rev() {
            *slot = r % d;
            r /= d;
        }
        tails.push(idx);
    }
    let mut cols = vec![vec![0usize; tail]; d];
    for (k, row) in cols.iter_mut().enumerate() {
        for (t, idx) in tails.iter().enumerate() {
            let mut full = idx.clone();
            full.push(k);
            full.sort_unstable();
            row[t] = col_of(&full);
        }
    }

    let m = ev.len();
    let mut a = DenseMatrix::zeros(m * d, unknowns);
    let mut b = Vector::zeros(m * d);
    for j in 0..m {
        let w = &ev.points[j];
        let prods: Vec<f64> = tails.iter().map(|idx| idx.iter().map(|&i| w[i]).product()).collect();
        for k in 0..d {
            let row = j * d + k;
            b[row] = ev.values[j][k];
            for (t, &p) in prods.iter().enumerate() {
                a[(row, cols[k][t])] += p;
            }
        }
    }
    let svd = svd_pinv(&a, rank_tol);
    if svd.rank < unknowns {
        return Err(IdentifyError::InterpolationRankDeficient {
            rank: svd.rank,
            needed: unknowns,
        });
    }
    let x = &svd.pinv * &b;
    let residual = (&b - &a * &x).norm() / b.norm().max(f64::MIN_POSITIVE);
    let tensor = SymmetricTensor::from_symmetric_fn(order, d, |idx| x[col_of(idx)])?;
    Ok(SymmetricFit {
        tensor,
        rank: svd.rank,
        unknowns,
        residual,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct JennrichOptions {
    pub max_retries: usize,
    /// Minimum relative separation of pencil eigenvalues.
    pub gap_tol: f64,
    /// Relative singular-value cut for the slice rank.
    pub rank_tol: f64,
    pub imag_tol: f64,
}

impl Default for JennrichOptions {
    fn default() -> Self {
        Self {
            max_retries: 8,
            gap_tol: 1e-6,
            rank_tol: 1e-8,
            imag_tol: DEFAULT_IMAG_TOL,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub components: Vec<Component>,
    pub rank: usize,
    pub retries: usize,
    /// Smallest pairwise eigenvalue separation of the accepted pencil, relative
    /// to its largest eigenvalue magnitude.
    pub eigen_gap: f64,
}

/// Pencil eigenvalues and recovered directions for fixed probes `v1`, `v2`.
#[derive(Debug, Clone)]
pub struct PencilResult {
    pub eigenvalues: Vec<f64>,
    pub components: Vec<Component>,
    pub eigen_gap: f64,
}

fn unit_probe(rng: &mut ChaCha8Rng, d: usize) -> Vector {
    loop {
        let v = Vector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let n = v.norm();
        if n > 0.0 {
            return v / n;
        }
    }
}

/// Flips `x` so its first entry above `1e-8` in magnitude is positive.
pub fn canonical_sign(x: &mut Vector) {
    if let Some(v) = x.iter().find(|v| v.abs() > 1e-8) {
        if *v < 0.0 {
            x.neg_mut();
        }
    }
}

fn min_relative_gap(values: &[f64]) -> f64 {
    let scale = values.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted
        .windows(2)
        .map(|w| (w[1] - w[0]) / scale)
        .fold(f64::INFINITY, f64::min)
}

/// Slice rank by the relative cut, with an ambiguity check around it.
fn slice_rank(singular: &Vector, tol: f64) -> Result<usize, IdentifyError> {
    let top = singular[0];
    if !(top > 0.0) {
        return Ok(0);
    }
    let r = singular.iter().filter(|&&s| s > tol * top).count();
    let retained = singular[r - 1] / top;
    let dropped = if r < singular.len() { singular[r] / top } else { 0.0 };
    if retained < 10.0 * tol || dropped > 0.1 * tol {
        return Err(IdentifyError::RankAmbiguous { retained, dropped });
    }
    Ok(r)
}

/// One pencil step: `C = (U^T M(v1) U)^{-1} U^T M(v2) U`, `X = U V^{-T}`.
pub fn pencil_decompose(
    t: &SymmetricTensor,
    v1: &Vector,
    v2: &Vector,
    rank: usize,
    imag_tol: f64,
) -> Result<PencilResult, IdentifyError> {
    if t.order() < 3 {
        return Err(IdentifyError::Unsupported { min: 3 });
    }
    let a = t.contract_matrix_slice(v1)?;
    let b = t.contract_matrix_slice(v2)?;
    let svd = svd_pinv(&a, 1e-14);
    let u = svd.u.columns(0, rank).into_owned();
    let abar = u.transpose() * &a * &u;
    let bbar = u.transpose() * &b * &u;
    let lu = abar.clone().lu();
    let c = lu.solve(&bbar).ok_or_else(|| IdentifyError::DecompositionFailed {
        retries: 0,
        reason: "projected slice is singular".into(),
    })?;
    let pairs = eig_general(&c, imag_tol)?;
    let eigenvalues: Vec<f64> = pairs.iter().map(|p| p.value).collect();
    let eigen_gap = min_relative_gap(&eigenvalues);
    let mut vmat = DenseMatrix::zeros(rank, rank);
    for (k, p) in pairs.iter().enumerate() {
        vmat.set_column(k, &p.vector);
    }
    let vinv_t = vmat
        .clone()
        .try_inverse()
        .ok_or_else(|| IdentifyError::DecompositionFailed {
            retries: 0,
            reason: "eigenvector matrix is singular".into(),
        })?
        .transpose();
    let xhat = &u * vinv_t;

    let mut dirs = DenseMatrix::zeros(t.dim(), rank);
    for k in 0..rank {
        let mut x = xhat.column(k).into_owned();
        x /= x.norm();
        canonical_sign(&mut x);
        dirs.set_column(k, &x);
    }
    // Dual basis: z_k . x_i = delta_ik, so T(z_k, ..., z_k) = b_k.
    let gram = dirs.transpose() * &dirs;
    let gram_inv = gram.try_inverse().ok_or_else(|| IdentifyError::DecompositionFailed {
        retries: 0,
        reason: "recovered directions are dependent".into(),
    })?;
    let duals = &dirs * gram_inv;
    let mut components = Vec::with_capacity(rank);
    for k in 0..rank {
        let b = t.diagonal_poly(&duals.column(k).into_owned())?;
        let x = dirs.column(k).into_owned();
        let comp = Component::new(x, b).map_err(|_| IdentifyError::DecompositionFailed {
            retries: 0,
            reason: format!("component {k} has zero coefficient"),
        })?;
        components.push(comp);
    }
    Ok(PencilResult {
        eigenvalues,
        components,
        eigen_gap,
    })
}

/// Jennrich-style decomposition of a tensor with linearly independent components.
pub fn jennrich_decompose(
    t: &SymmetricTensor,
    expected_rank: Option<usize>,
    seed: u64,
    opts: &JennrichOptions,
) -> Result<Decomposition, IdentifyError> {
    if t.order() < 3 {
        return Err(IdentifyError::Unsupported { min: 3 });
    }
    let d = t.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = String::from("no attempt");
    for attempt in 0..=opts.max_retries {
        let v1 = unit_probe(&mut rng, d);
        let v2 = unit_probe(&mut rng, d);
        let a = t.contract_matrix_slice(&v1)?;
        let rank = match expected_rank {
            Some(r) => r.min(d),
            None => slice_rank(&svd_pinv(&a, 1e-14).singular, opts.rank_tol)?,
        };
        if rank == 0 {
            return Ok(Decomposition {
                components: Vec::new(),
                rank: 0,
                retries: attempt,
                eigen_gap: f64::INFINITY,
            });
        }
        match pencil_decompose(t, &v1, &v2, rank, opts.imag_tol) {
            Ok(res) if res.eigen_gap >= opts.gap_tol || rank == 1 => {
                return Ok(Decomposition {
                    components: res.components,
                    rank,
                    retries: attempt,
                    eigen_gap: res.eigen_gap,
                })
            }
            Ok(res) => last = format!("eigen-gap {:e} below tolerance", res.eigen_gap),
            Err(e) => last = e.to_string(),
        }
    }
    Err(IdentifyError::DecompositionFailed {
        retries: opts.max_retries,
        reason: last,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct DirectOptions {
    /// Random starts per candidate rank.
    pub restarts: usize,
    pub max_iters: usize,
    /// Relative residual below which a fit counts as exact.
    pub fit_tol: f64,
    /// Relative singular-value cut for the Jacobian at an exact fit.
    pub jac_rank_tol: f64,
    pub max_rank: usize,
    /// Two exact fits agree when their factors differ by at most this, relative.
    pub agree_tol: f64,
}

impl Default for DirectOptions {
    fn default() -> Self {
        Self {
            restarts: 20,
            max_iters: 3000,
            fit_tol: 1e-10,
            jac_rank_tol: 1e-8,
            max_rank: 12,
            agree_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DirectFit {
    pub components: Vec<Component>,
    pub rank: usize,
    pub residual: f64,
    pub jacobian_rank: usize,
    /// Distinct evaluation points used.
    pub points: usize,
    /// Exact, locally unique fits found across the starts of the accepted rank.
    pub exact_fits: usize,
}

/// Unit points that differ up to sign, each with its value.
fn distinct_evaluations(evals: &FEvaluations) -> FEvaluations {
    let ev = evals.normalized();
    let mut out = FEvaluations {
        points: Vec::new(),
        values: Vec::new(),
        degree: ev.degree,
    };
    for (p, v) in ev.points.iter().zip(&ev.values) {
        if p.norm() == 0.0 || out.points.iter().any(|q| p.dot(q).abs() > 1.0 - 1e-10) {
            continue;
        }
        out.points.push(p.clone());
        out.values.push(v.clone());
    }
    out
}

/// Residual and Jacobian of `sum_k s_k (u_k . w_j)^{deg} u_k - v_j` stacked over `j`.
fn direct_residual(ev: &FEvaluations, u: &[Vector], signs: &[f64], jac: Option<&mut DenseMatrix>) -> Vector {
    let d = ev.dim();
    let deg = ev.degree as i32;
    let mut r = Vector::zeros(ev.len() * d);
    let mut jac = jac;
    for (j, w) in ev.points.iter().enumerate() {
        let mut row = -&ev.values[j];
        for (k, uk) in u.iter().enumerate() {
            let t = uk.dot(w);
            row.axpy(signs[k] * t.powi(deg), uk, 1.0);
            if let Some(jm) = jac.as_deref_mut() {
                let mut block = DenseMatrix::identity(d, d) * t.powi(deg);
                block.ger(deg as f64 * t.powi(deg - 1), uk, w, 1.0);
                jm.view_mut((j * d, k * d), (d, d)).copy_from(&(block * signs[k]));
            }
        }
        r.rows_mut(j * d, d).copy_from(&row);
    }
    r
}

/// Levenberg-Marquardt from `u`; returns the final factors and residual norm.
fn lm_fit(ev: &FEvaluations, mut u: Vec<Vector>, signs: &[f64], max_iters: usize, target: f64) -> (Vec<Vector>, f64) {
    let d = ev.dim();
    let n = u.len() * d;
    let mut jac = DenseMatrix::zeros(ev.len() * d, n);
    let mut r = direct_residual(ev, &u, signs, Some(&mut jac));
    let mut cost = r.norm();
    let mut mu = 1e-3;
    let mut stall = 0;
    for _ in 0..max_iters {
        if cost <= target || mu > 1e16 || stall > 30 {
            break;
        }
        let a = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        let scale = a.diagonal().max().max(f64::MIN_POSITIVE);
        let mut damped = a.clone();
        for i in 0..n {
            damped[(i, i)] += mu * (a[(i, i)] + 1e-12 * scale);
        }
        let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
            mu *= 4.0;
            continue;
        };
        let trial: Vec<Vector> = u
            .iter()
            .enumerate()
            .map(|(k, uk)| uk + step.rows(k * d, d))
            .collect();
        let tr = direct_residual(ev, &trial, signs, None);
        let tc = tr.norm();
        if tc < cost {
            stall = if tc > cost * (1.0 - 1e-6) { stall + 1 } else { 0 };
            u = trial;
            r = direct_residual(ev, &u, signs, Some(&mut jac));
            cost = tc;
            mu = (mu / 3.0).max(1e-15);
        } else {
            mu *= 4.0;
        }
    }
    (u, cost)
}

/// Fits `f(w) = sum_k s_k (u_k . w)^{deg} u_k` to the evaluations directly,
/// for use when the linear fits have fewer equations than unknowns but the
/// distinct evaluation points outnumber the factors. Ranks are tried in
/// increasing order (or only `rank`); a rank is accepted when some start fits
/// exactly with a full-rank Jacobian, and every such start agrees up to order
/// and sign.
pub fn fit_components_direct(
    evals: &FEvaluations,
    rank: Option<usize>,
    seed: u64,
    opts: &DirectOptions,
) -> Result<DirectFit, IdentifyError> {
    if evals.is_empty() {
        return Err(IdentifyError::NoEvaluations);
    }
    let ev = distinct_evaluations(evals);
    let d = ev.dim();
    let alpha = ev.degree + 1;
    let m = ev.len();
    let vnorm = Vector::from_iterator(m, ev.values.iter().map(|v| v.norm()));
    let total = vnorm.norm().max(f64::MIN_POSITIVE);
    let ranks: Vec<usize> = match rank {
        Some(r) => vec![r],
        None => (1..=opts.max_rank.min(m.saturating_sub(1))).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best_resid = f64::INFINITY;
    for r in ranks {
        // With as many points as factors the system is square and generically
        // has several isolated solutions, so at least one redundant point is required.
        if r >= m {
            return Err(IdentifyError::InterpolationRankDeficient {
                rank: m * d,
                needed: (r + 1) * d,
            });
        }
        let init_scale = (vnorm.mean() / r as f64).powf(1.0 / alpha as f64);
        let mut fits: Vec<(Vec<Vector>, Vec<f64>, f64, usize)> = Vec::new();
        for _ in 0..opts.restarts {
            let signs: Vec<f64> = (0..r)
                .map(|_| if alpha % 2 == 1 || rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            let u0: Vec<Vector> = (0..r)
                .map(|_| Vector::from_fn(d, |_, _| init_scale * rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt()))
                .collect();
            let (u, cost) = lm_fit(&ev, u0, &signs, opts.max_iters, 0.1 * opts.fit_tol * total);
            best_resid = best_resid.min(cost / total);
            if cost > opts.fit_tol * total {
                continue;
            }
            let mut jac = DenseMatrix::zeros(m * d, r * d);
            direct_residual(&ev, &u, &signs, Some(&mut jac));
            let sv = jac.singular_values();
            let jr = sv.iter().filter(|&&s| s > opts.jac_rank_tol * sv.max()).count();
            if jr < r * d {
                continue;
            }
            fits.push((u, signs, cost / total, jr));
        }
        let Some((u, signs, resid, jr)) = fits.first().cloned() else {
            continue;
        };
        let scale = u.iter().map(|x| x.norm()).fold(0.0, f64::max);
        for (other, osigns, _, _) in &fits[1..] {
            let mut used = vec![false; r];
            for (k, uk) in u.iter().enumerate() {
                let hit = (0..r).find(|&l| {
                    if used[l] || osigns[l] != signs[k] {
                        return false;
                    }
                    let diff = if alpha % 2 == 1 {
                        (uk - &other[l]).norm()
                    } else {
                        (uk - &other[l]).norm().min((uk + &other[l]).norm())
                    };
                    diff <= opts.agree_tol * scale
                });
                match hit {
                    Some(l) => used[l] = true,
                    None => return Err(IdentifyError::NotUnique { fits: fits.len() }),
                }
            }
        }
        let components = u
            .iter()
            .zip(&signs)
            .map(|(uk, s)| Component::unit(uk, s * uk.norm().powi(alpha as i32)))
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(DirectFit {
            components,
            rank: r,
            residual: resid,
            jacobian_rank: jr,
            points: m,
            exact_fits: fits.len(),
        });
    }
    Err(IdentifyError::DecompositionFailed {
        retries: opts.restarts,
        reason: format!("no exact low-rank fit; best relative residual {best_resid:e}"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InterpolationMode {
    /// Monomial interpolation of `f`, then polarization.
    Kernel,
    /// Direct least-squares fit of the symmetric tensor.
    Symmetric,
    /// Nonlinear fit of the rank-one factors to the evaluations.
    Direct,
    /// `Kernel`, then `Symmetric`, then `Direct`, each taken when the previous
    /// one has fewer independent equations than unknowns.
    #[default]
    Auto,
}

#[derive(Debug, Clone, Copy)]
pub struct IdentifyOptions {
    /// Neurons with `|a_j|` and `||W_j||` below this (relative) are dropped.
    pub neuron_tol: f64,
    /// Relative cut for the dimension of the span of the neurons.
    pub subspace_tol: f64,
    /// Override for the span dimension.
    pub subspace_dim: Option<usize>,
    pub interp_rank_tol: f64,
    pub mode: InterpolationMode,
    pub expected_rank: Option<usize>,
    pub seed: u64,
    pub jennrich: JennrichOptions,
    pub direct: DirectOptions,
}

impl Default for IdentifyOptions {
    fn default() -> Self {
        Self {
            neuron_tol: 1e-9,
            subspace_tol: 1e-8,
            subspace_dim: None,
            interp_rank_tol: 1e-10,
            mode: InterpolationMode::Auto,
            expected_rank: None,
            seed: 0,
            jennrich: JennrichOptions::default(),
            direct: DirectOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    Kernel,
    Symmetric,
    Direct,
}

#[derive(Debug, Clone)]
pub struct IdentifyReport {
    /// Numerical rank of the Gram matrix of the (projected, normalized) neurons.
    pub gram_rank: usize,
    /// Number of monomial features in the projected space.
    pub n_features: usize,
    pub components: Vec<Component>,
    pub probe_retries: usize,
    pub pencil_eigen_gap: f64,
    /// Dimension of the span of the neurons.
    pub subspace_dim: usize,
    pub neurons_used: usize,
    pub method: FitMethod,
    pub interpolation_rank: usize,
    pub interpolation_residual: f64,
    /// Part of the evaluated values outside the neuron span, relative.
    pub out_of_span: f64,
}

#[derive(Serialize)]
struct ComponentJson {
    b: f64,
    x: Vec<f64>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    gram_rank: usize,
    n_features: usize,
    components: Vec<ComponentJson>,
    probe_retries: usize,
    pencil_eigen_gap: f64,
    subspace_dim: usize,
    neurons_used: usize,
    method: &'a FitMethod,
    interpolation_rank: usize,
    interpolation_residual: f64,
    out_of_span: f64,
}

impl IdentifyReport {
    pub fn to_json(&self) -> serde_json::Value {
        let body = ReportJson {
            gram_rank: self.gram_rank,
            n_features: self.n_features,
            components: self
                .components
                .iter()
                .map(|c| ComponentJson {
                    b: c.coefficient,
                    x: c.direction.iter().copied().collect(),
                })
                .collect(),
            probe_retries: self.probe_retries,
            pencil_eigen_gap: self.pencil_eigen_gap,
            subspace_dim: self.subspace_dim,
            neurons_used: self.neurons_used,
            method: &self.method,
            interpolation_rank: self.interpolation_rank,
            interpolation_residual: self.interpolation_residual,
            out_of_span: self.out_of_span,
        };
        serde_json::to_value(body).expect("report serializes")
    }
}

/// Full pipeline from network parameters to components.
///
/// At a KKT point every `W_j` lies in the span of the active samples, so the
/// evaluations are first expressed in an orthonormal basis of the span of the
/// neurons; interpolation then needs `C(d' + alpha - 2, alpha - 1)` points for
/// span dimension `d'` instead of the full-space count. Components are mapped
/// back to the input space at the end.
pub fn recover_from_params(params: &ModelParams, opts: &IdentifyOptions) -> Result<IdentifyReport, IdentifyError> {
    let alpha = params.alpha();
    if alpha < 3 || !params.activation.is_homogeneous() {
        return Err(IdentifyError::Unsupported { min: 3 }.at(Stage::Extract));
    }
    let evals = extract_f_evaluations(params, opts.neuron_tol).map_err(|e| e.at(Stage::Extract))?;
    let d = evals.dim();
    let mut stacked = DenseMatrix::zeros(evals.len(), d);
    for (j, p) in evals.points.iter().enumerate() {
        stacked.set_row(j, &(p / p.norm()).transpose());
    }
    let svd = svd_pinv(&stacked.transpose(), opts.subspace_tol);
    let d_eff = opts.subspace_dim.unwrap_or(svd.rank).clamp(1, d);
    let basis = svd.u.columns(0, d_eff).into_owned();

    let mut out_num = 0.0;
    let mut out_den = 0.0;
    let reduced = FEvaluations {
        points: evals.points.iter().map(|p| basis.transpose() * p).collect(),
        values: evals
            .values
            .iter()
            .map(|v| {
                let z = basis.transpose() * v;
                out_num += (v - &basis * &z).norm_squared();
                out_den += v.norm_squared();
                z
            })
            .collect(),
        degree: evals.degree,
    };
    let out_of_span = (out_num / out_den.max(f64::MIN_POSITIVE)).sqrt();

    let normalized = reduced.normalized();
    let mut unit_rows = DenseMatrix::zeros(normalized.len(), d_eff);
    for (j, p) in normalized.points.iter().enumerate() {
        unit_rows.set_row(j, &p.transpose());
    }
    let gram_rank = svd_pinv(&gram_matrix(&unit_rows, alpha), opts.interp_rank_tol).rank;
    let indexing = FeatureIndexing::for_order(d_eff, alpha);

    let kernel = || -> Result<(SymmetricTensor, usize, f64), IdentifyError> {
        let interp = interpolate_f(&reduced, &indexing, opts.interp_rank_tol).map_err(|e| e.at(Stage::Interpolate))?;
        let t = tensor_from_f(&interp.coeffs, &indexing).map_err(|e| e.at(Stage::Polarize))?;
        Ok((t, interp.rank, interp.residual))
    };
    let symmetric = || -> Result<(SymmetricTensor, usize, f64), IdentifyError> {
        let fit = fit_symmetric_tensor(&reduced, opts.interp_rank_tol).map_err(|e| e.at(Stage::Interpolate))?;
        Ok((fit.tensor, fit.rank, fit.residual))
    };
    let direct = || -> Result<DirectFit, IdentifyError> {
        fit_components_direct(&reduced, opts.expected_rank, opts.seed, &opts.direct).map_err(|e| e.at(Stage::Decompose))
    };
    let deficient = |e: &IdentifyError| matches!(e.root(), IdentifyError::InterpolationRankDeficient { .. });
    let linear = match opts.mode {
        InterpolationMode::Kernel => Ok((kernel()?, FitMethod::Kernel)),
        InterpolationMode::Symmetric => Ok((symmetric()?, FitMethod::Symmetric)),
        InterpolationMode::Direct => Err(None),
        InterpolationMode::Auto => match kernel() {
            Ok(v) => Ok((v, FitMethod::Kernel)),
            Err(e) if deficient(&e) => match symmetric() {
                Ok(v) => Ok((v, FitMethod::Symmetric)),
                Err(e) if deficient(&e) => Err(Some(e)),
                Err(e) => return Err(e),
            },
            Err(e) => return Err(e),
        },
    };

    let (reduced_components, interp_rank, interp_resid, method, retries, gap) = match linear {
        Ok(((tensor, rank, resid), method)) => {
            let dec = jennrich_decompose(&tensor, opts.expected_rank, opts.seed, &opts.jennrich)
                .map_err(|e| e.at(Stage::Decompose))?;
            (dec.components, rank, resid, method, dec.retries, dec.eigen_gap)
        }
        Err(linear_err) => match direct() {
            Ok(fit) => (fit.components, fit.jacobian_rank, fit.residual, FitMethod::Direct, 0, f64::NAN),
            // When the direct fit finds nothing either, the linear shortfall is the clearer report.
            Err(e) if matches!(e.root(), IdentifyError::DecompositionFailed { .. }) => return Err(linear_err.unwrap_or(e)),
            Err(e) => return Err(e),
        },
    };
    let components = reduced_components
        .iter()
        .map(|c| {
            let mut x = &basis * &c.direction;
            let n = x.norm();
            x /= n;
            let mut b = c.coefficient * n.powi(alpha as i32);
            let before = x.clone();
            canonical_sign(&mut x);
            if x != before && alpha % 2 == 1 {
                b = -b;
            }
            Component::new(x, b)
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(IdentifyReport {
        gram_rank,
        n_features: indexing.len(),
        components,
        probe_retries: retries,
        pencil_eigen_gap: gap,
        subspace_dim: d_eff,
        neurons_used: evals.len(),
        method,
        interpolation_rank: interp_rank,
        interpolation_residual: interp_resid,
        out_of_span,
    })
}

/// Sign-invariant matching error between recovered and planted components:
/// the minimum over assignments of the largest `min(||x - y||, ||x + y||)`,
/// with the coefficient compared after the matching sign flip (odd `alpha`).
/// Returns `(direction_error, coefficient_error)`; exhaustive for up to 8 components.
pub fn component_match_error(found: &[Component], truth: &[Component], alpha: usize) -> (f64, f64) {
    if found.len() != truth.len() {
        return (f64::INFINITY, f64::INFINITY);
    }
    let r = found.len();
    assert!(r <= 8, "exhaustive matching limited to 8 components");
    let pair = |f: &Component, t: &Component| -> (f64, f64) {
        let plus = (&f.direction - &t.direction).norm();
        let minus = (&f.direction + &t.direction).norm();
        if plus <= minus {
            (plus, (f.coefficient - t.coefficient).abs())
        } else {
            let b = if alpha % 2 == 1 { -f.coefficient } else { f.coefficient };
            (minus, (b - t.coefficient).abs())
        }
    };
    let mut best = (f64::INFINITY, f64::INFINITY);
    let mut perm: Vec<usize> = (0..r).collect();
    permutations(&mut perm, 0, &mut |p| {
        let mut dir = 0.0_f64;
        let mut coef = 0.0_f64;
        for (i, &j) in p.iter().enumerate() {
            let (a, b) = pair(&found[i], &truth[j]);
            dir = dir.max(a);
            coef = coef.max(b);
        }
        if dir < best.0 || (dir == best.0 && coef < best.1) {
            best = (dir, coef);
        }
    });
    best
}

fn permutations(p: &mut Vec<usize>, k: usize, visit: &mut dyn FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permutations(p, k + 1, visit);
        p.swap(k, i);
    }
}
