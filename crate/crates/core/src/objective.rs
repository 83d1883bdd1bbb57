//! Reconstruction objectives `L = a1 ||theta - sum_i lambda_i f(theta; x_i)||^2 + a2 sum_i max(-lambda_i, 0) + a3 L_prior`
//! and the per-candidate splitting matrices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{ActivationPoly, ModelParams, MulticlassParams, NetworkError};
use crate::numkernels::{nnls, svd_pinv, DenseMatrix, Vector, DEFAULT_RANK_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("candidate set is empty")]
    EmptySet,
    #[error("invalid candidate {index}: {reason}")]
    InvalidCandidate { index: usize, reason: String },
    #[error("label {label} of candidate {index} is not valid for this map")]
    InvalidLabel { index: usize, label: i64 },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("malformed candidate set: {0}")]
    Malformed(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

fn check_dim(expected: usize, got: usize) -> Result<(), ObjectiveError> {
    if expected == got {
        Ok(())
    } else {
        Err(ObjectiveError::DimensionMismatch { expected, got })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapKind {
    KktBinary,
    MulticlassMargin,
    Ntk,
}

/// The map `f(theta; x)` whose weighted sum should reproduce `theta`.
#[derive(Debug, Clone, PartialEq)]
pub enum ReconMap {
    /// `y grad_theta Phi(theta; x)`, labels `+-1`.
    KktBinary { model: ModelParams },
    /// `grad_theta [Phi_y - Phi_k]` with `k` the runner-up class at `x`.
    MulticlassMargin { model: MulticlassParams },
    /// `y grad_theta Phi(theta_0; x)`; the target is usually `theta - theta_0`.
    Ntk { model: ModelParams, init: ModelParams },
}

impl ReconMap {
    pub fn kind(&self) -> MapKind {
        match self {
            ReconMap::KktBinary { .. } => MapKind::KktBinary,
            ReconMap::MulticlassMargin { .. } => MapKind::MulticlassMargin,
            ReconMap::Ntk { .. } => MapKind::Ntk,
        }
    }

    pub fn ntk(model: ModelParams, init: ModelParams) -> Result<Self, ObjectiveError> {
        check_dim(model.n_params(), init.n_params())?;
        check_dim(model.input_dim(), init.input_dim())?;
        Ok(ReconMap::Ntk { model, init })
    }

    pub fn n_params(&self) -> usize {
        match self {
            ReconMap::KktBinary { model } | ReconMap::Ntk { model, .. } => model.n_params(),
            ReconMap::MulticlassMargin { model } => model.n_params(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ReconMap::KktBinary { model } | ReconMap::Ntk { model, .. } => model.input_dim(),
            ReconMap::MulticlassMargin { model } => model.input_dim(),
        }
    }

    /// Flat parameters of the target model.
    pub fn theta(&self) -> Vector {
        match self {
            ReconMap::KktBinary { model } | ReconMap::Ntk { model, .. } => model.to_flat(),
            ReconMap::MulticlassMargin { model } => model.to_flat(),
        }
    }

    fn check_label(&self, index: usize, label: i64) -> Result<(), ObjectiveError> {
        let ok = match self {
            ReconMap::KktBinary { .. } | ReconMap::Ntk { .. } => label == 1 || label == -1,
            ReconMap::MulticlassMargin { model } => label >= 0 && (label as usize) < model.classes(),
        };
        if ok {
            Ok(())
        } else {
            Err(ObjectiveError::InvalidLabel { index, label })
        }
    }

    /// Lowest-index argmax of `Phi_j(x)` over `j != y`.
    fn runner_up(model: &MulticlassParams, x: &Vector, y: usize) -> Result<usize, ObjectiveError> {
        let out = model.forward(x)?;
        let mut best = None::<(usize, f64)>;
        for (j, &v) in out.iter().enumerate() {
            if j != y && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        Ok(best.expect("at least two classes").0)
    }

    /// `<r, f(x)>` written as `sum_k rho_k sigma(t_k) + c_k sigma'(t_k) (u_k . x)`.
    fn contraction<'a>(&'a self, r: &Vector, x: &Vector, label: i64) -> Result<Contraction<'a>, ObjectiveError> {
        check_dim(self.n_params(), r.len())?;
        check_dim(self.input_dim(), x.len())?;
        self.check_label(0, label)?;
        let (w, act, rho, c, u_off) = match self {
            ReconMap::KktBinary { model } | ReconMap::Ntk { init: model, .. } => {
                let y = label as f64;
                let m = model.width();
                let rho = (0..m).map(|k| y * r[k]).collect();
                let c = (0..m).map(|k| y * model.a[k]).collect();
                (&model.w, &model.activation, rho, c, m)
            }
            ReconMap::MulticlassMargin { model } => {
                let y = label as usize;
                let top = Self::runner_up(model, x, y)?;
                let m = model.width();
                let rho = (0..m).map(|k| r[y * m + k] - r[top * m + k]).collect();
                let c = (0..m).map(|k| model.a[(y, k)] - model.a[(top, k)]).collect();
                (&model.w, &model.activation, rho, c, model.w_offset())
            }
        };
        let (m, d) = (w.nrows(), w.ncols());
        let u = DenseMatrix::from_row_slice(m, d, &r.as_slice()[u_off..u_off + m * d]);
        Ok(Contraction { w, act, rho, c, u })
    }
}

struct Contraction<'a> {
    w: &'a DenseMatrix,
    act: &'a ActivationPoly,
    rho: Vec<f64>,
    c: Vec<f64>,
    u: DenseMatrix,
}

impl Contraction<'_> {
    fn gradient(&self, x: &Vector) -> Vector {
        let t = self.w * x;
        let s = &self.u * x;
        let mut g = Vector::zeros(x.len());
        for k in 0..self.w.nrows() {
            let (d1, d2) = (self.act.derivative(1, t[k]), self.act.derivative(2, t[k]));
            let coef_w = self.rho[k] * d1 + self.c[k] * d2 * s[k];
            let coef_u = self.c[k] * d1;
            for l in 0..x.len() {
                g[l] += coef_w * self.w[(k, l)] + coef_u * self.u[(k, l)];
            }
        }
        g
    }

    fn hessian_vec(&self, x: &Vector, v: &Vector) -> Vector {
        let t = self.w * x;
        let s = &self.u * x;
        let wv = self.w * v;
        let uv = &self.u * v;
        let mut h = Vector::zeros(x.len());
        for k in 0..self.w.nrows() {
            let (d2, d3) = (self.act.derivative(2, t[k]), self.act.derivative(3, t[k]));
            let coef_w = self.rho[k] * d2 * wv[k] + self.c[k] * (d3 * s[k] * wv[k] + d2 * uv[k]);
            let coef_u = self.c[k] * d2 * wv[k];
            for l in 0..x.len() {
                h[l] += coef_w * self.w[(k, l)] + coef_u * self.u[(k, l)];
            }
        }
        h
    }
}

/// Evaluates `f(theta; x)` for one labeled point.
pub fn map_eval(map: &ReconMap, x: &Vector, label: i64) -> Result<Vector, ObjectiveError> {
    check_dim(map.input_dim(), x.len())?;
    map.check_label(0, label)?;
    match map {
        ReconMap::KktBinary { model } | ReconMap::Ntk { init: model, .. } => {
            Ok(model.grad_theta(x)? * label as f64)
        }
        ReconMap::MulticlassMargin { model } => {
            let y = label as usize;
            let top = ReconMap::runner_up(model, x, y)?;
            let (m, d) = (model.width(), model.input_dim());
            let pre = &model.w * x;
            let mut f = Vector::zeros(model.n_params());
            let off = model.w_offset();
            for k in 0..m {
                let s = model.activation.eval(pre[k]);
                f[y * m + k] += s;
                f[top * m + k] -= s;
                let g = (model.a[(y, k)] - model.a[(top, k)]) * model.activation.derivative(1, pre[k]);
                for l in 0..d {
                    f[off + k * d + l] = g * x[l];
                }
            }
            Ok(f)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub id: u64,
    pub parent: Option<u64>,
    pub depth: u32,
}

impl Lineage {
    pub fn root(id: u64) -> Self {
        Self {
            id,
            parent: None,
            depth: 0,
        }
    }

    pub fn child(&self, id: u64) -> Self {
        Self {
            id,
            parent: Some(self.id),
            depth: self.depth + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub x: Vector,
    pub lambda: f64,
    pub label: i64,
    pub lineage: Lineage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    pub target: Vector,
    /// Where the target came from, e.g. a checkpoint path.
    pub target_ref: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct CandidateJson {
    x: Vec<f64>,
    lambda: f64,
    label: i64,
    lineage: Lineage,
}

#[derive(Serialize, Deserialize)]
struct CandidateSetJson {
    target_ref: Option<String>,
    #[serde(default)]
    target: Option<Vec<f64>>,
    candidates: Vec<CandidateJson>,
}

impl CandidateSet {
    pub fn new(candidates: Vec<Candidate>, target: Vector, target_ref: Option<String>) -> Result<Self, ObjectiveError> {
        let first = candidates.first().ok_or(ObjectiveError::EmptySet)?;
        let d = first.x.len();
        let mut ids = std::collections::HashSet::new();
        for (index, c) in candidates.iter().enumerate() {
            let bad = |reason: &str| ObjectiveError::InvalidCandidate {
                index,
                reason: reason.to_string(),
            };
            if c.x.len() != d {
                return Err(bad("dimension differs from the first candidate"));
            }
            if !c.x.iter().all(|v| v.is_finite()) || !c.lambda.is_finite() {
                return Err(bad("non-finite value"));
            }
            if !ids.insert(c.lineage.id) {
                return Err(bad("duplicate lineage id"));
            }
            if c.lineage.parent.is_some_and(|p| p >= c.lineage.id) {
                return Err(bad("parent id must precede the child id"));
            }
        }
        if !target.iter().all(|v| v.is_finite()) {
            return Err(ObjectiveError::Malformed("non-finite target".into()));
        }
        Ok(Self {
            candidates,
            target,
            target_ref,
        })
    }

    /// Root candidates with ids `0..k`.
    pub fn from_points(xs: Vec<Vector>, lambdas: Vec<f64>, labels: Vec<i64>, target: Vector) -> Result<Self, ObjectiveError> {
        check_dim(xs.len(), lambdas.len())?;
        check_dim(xs.len(), labels.len())?;
        let candidates = xs
            .into_iter()
            .zip(lambdas)
            .zip(labels)
            .enumerate()
            .map(|(i, ((x, lambda), label))| Candidate {
                x,
                lambda,
                label,
                lineage: Lineage::root(i as u64),
            })
            .collect();
        Self::new(candidates, target, None)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.candidates[0].x.len()
    }

    pub fn lambdas(&self) -> Vector {
        Vector::from_iterator(self.len(), self.candidates.iter().map(|c| c.lambda))
    }

    pub fn next_id(&self) -> u64 {
        self.candidates.iter().map(|c| c.lineage.id + 1).max().unwrap_or(0)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let body = CandidateSetJson {
            target_ref: self.target_ref.clone(),
            target: Some(self.target.iter().copied().collect()),
            candidates: self
                .candidates
                .iter()
                .map(|c| CandidateJson {
                    x: c.x.iter().copied().collect(),
                    lambda: c.lambda,
                    label: c.label,
                    lineage: c.lineage.clone(),
                })
                .collect(),
        };
        serde_json::to_value(body).expect("candidate set serializes")
    }

    /// Parses a set; `target` overrides (or supplies) the stored target.
    pub fn from_json(value: &serde_json::Value, target: Option<Vector>) -> Result<Self, ObjectiveError> {
        let body: CandidateSetJson =
            serde_json::from_value(value.clone()).map_err(|e| ObjectiveError::Malformed(e.to_string()))?;
        let target = match (target, body.target) {
            (Some(t), _) => t,
            (None, Some(t)) => Vector::from_vec(t),
            (None, None) => return Err(ObjectiveError::Malformed("no target parameters".into())),
        };
        let candidates = body
            .candidates
            .into_iter()
            .map(|c| Candidate {
                x: Vector::from_vec(c.x),
                lambda: c.lambda,
                label: c.label,
                lineage: c.lineage,
            })
            .collect();
        Self::new(candidates, target, body.target_ref)
    }
}

/// Box `[lo, hi]` applied to every coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorBox {
    pub lo: f64,
    pub hi: f64,
}

impl Default for PriorBox {
    fn default() -> Self {
        Self { lo: -1.0, hi: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub prior: PriorBox,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 0.0,
            alpha3: 0.0,
            prior: PriorBox::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let w = [self.alpha1, self.alpha2, self.alpha3];
        if !w.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(ObjectiveError::InvalidWeights("weights must be finite and nonnegative".into()));
        }
        if !(self.prior.lo <= self.prior.hi) {
            return Err(ObjectiveError::InvalidWeights("prior box has lo > hi".into()));
        }
        Ok(())
    }
}

fn check_set(set: &CandidateSet, map: &ReconMap) -> Result<(), ObjectiveError> {
    check_dim(map.n_params(), set.target.len())?;
    check_dim(map.input_dim(), set.dim())?;
    for (i, c) in set.candidates.iter().enumerate() {
        map.check_label(i, c.label)?;
    }
    Ok(())
}

/// Columns `f(theta; x_i)`, `P x k`.
pub fn design_matrix(set: &CandidateSet, map: &ReconMap) -> Result<DenseMatrix, ObjectiveError> {
    check_set(set, map)?;
    let mut f = DenseMatrix::zeros(map.n_params(), set.len());
    for (i, c) in set.candidates.iter().enumerate() {
        f.set_column(i, &map_eval(map, &c.x, c.label)?);
    }
    Ok(f)
}

/// `r = theta - sum_i lambda_i f(theta; x_i)`, summed in candidate order.
pub fn residual(set: &CandidateSet, map: &ReconMap) -> Result<Vector, ObjectiveError> {
    check_set(set, map)?;
    let mut r = set.target.clone();
    for c in &set.candidates {
        if c.lambda != 0.0 {
            r.axpy(-c.lambda, &map_eval(map, &c.x, c.label)?, 1.0);
        }
    }
    Ok(r)
}

fn prior_penalty(x: &Vector, prior: &PriorBox) -> f64 {
    x.iter()
        .map(|&v| (prior.lo - v).max(0.0) + (v - prior.hi).max(0.0))
        .sum()
}

pub fn loss(set: &CandidateSet, map: &ReconMap, weights: &LossWeights) -> Result<f64, ObjectiveError> {
    weights.validate()?;
    let r = residual(set, map)?;
    Ok(loss_from_residual(set, &r, weights))
}

fn loss_from_residual(set: &CandidateSet, r: &Vector, weights: &LossWeights) -> f64 {
    let mut total = weights.alpha1 * r.norm_squared();
    if weights.alpha2 != 0.0 {
        total += weights.alpha2 * set.candidates.iter().map(|c| (-c.lambda).max(0.0)).sum::<f64>();
    }
    if weights.alpha3 != 0.0 {
        total += weights.alpha3
            * set
                .candidates
                .iter()
                .map(|c| prior_penalty(&c.x, &weights.prior))
                .sum::<f64>();
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub x: Vec<Vector>,
    pub lambda: Vector,
}

impl Gradient {
    /// Norm of the stacked `x`-gradient.
    pub fn x_norm(&self) -> f64 {
        self.x.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
    }
}

/// Analytic gradient; subgradient 0 at the hinge kinks.
pub fn grad(set: &CandidateSet, map: &ReconMap, weights: &LossWeights) -> Result<Gradient, ObjectiveError> {
    weights.validate()?;
    let r = residual(set, map)?;
    grad_with_residual(set, map, weights, &r)
}

fn grad_with_residual(
    set: &CandidateSet,
    map: &ReconMap,
    weights: &LossWeights,
    r: &Vector,
) -> Result<Gradient, ObjectiveError> {
    let a1 = weights.alpha1;
    let mut gx = Vec::with_capacity(set.len());
    let mut gl = Vector::zeros(set.len());
    for (i, c) in set.candidates.iter().enumerate() {
        let f = map_eval(map, &c.x, c.label)?;
        gl[i] = -2.0 * a1 * r.dot(&f);
        if c.lambda < 0.0 {
            gl[i] -= weights.alpha2;
        }
        let mut g = if c.lambda != 0.0 && a1 != 0.0 {
            map.contraction(r, &c.x, c.label)?.gradient(&c.x) * (-2.0 * a1 * c.lambda)
        } else {
            Vector::zeros(c.x.len())
        };
        if weights.alpha3 != 0.0 {
            for (gv, &xv) in g.iter_mut().zip(c.x.iter()) {
                if xv < weights.prior.lo {
                    *gv -= weights.alpha3;
                } else if xv > weights.prior.hi {
                    *gv += weights.alpha3;
                }
            }
        }
        gx.push(g);
    }
    Ok(Gradient { x: gx, lambda: gl })
}

/// Loss and gradient sharing one residual evaluation.
pub fn loss_and_grad(
    set: &CandidateSet,
    map: &ReconMap,
    weights: &LossWeights,
) -> Result<(f64, Gradient), ObjectiveError> {
    weights.validate()?;
    let r = residual(set, map)?;
    let g = grad_with_residual(set, map, weights, &r)?;
    Ok((loss_from_residual(set, &r, weights), g))
}

/// `S(x_i) = -2 a1 lambda_i D^2_x <r, f(theta; x)>` at `x_i`, with `r` held fixed.
pub struct SplittingOperator<'a> {
    contraction: Contraction<'a>,
    x: Vector,
    scale: f64,
}

impl SplittingOperator<'_> {
    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn apply(&self, v: &Vector) -> Vector {
        if self.scale == 0.0 {
            return Vector::zeros(self.x.len());
        }
        self.contraction.hessian_vec(&self.x, v) * self.scale
    }

    /// Central differences of `grad_x <r, f>` at step `1e-4 (1 + ||x||)`.
    pub fn apply_fd(&self, v: &Vector) -> Vector {
        let h = 1e-4 * (1.0 + self.x.norm());
        let up = self.contraction.gradient(&(&self.x + v * h));
        let dn = self.contraction.gradient(&(&self.x - v * h));
        (up - dn) * (self.scale / (2.0 * h))
    }

    /// Dense `S`, symmetrized.
    pub fn matrix(&self) -> DenseMatrix {
        let d = self.dim();
        let mut s = DenseMatrix::zeros(d, d);
        for j in 0..d {
            let mut e = Vector::zeros(d);
            e[j] = 1.0;
            s.set_column(j, &self.apply(&e));
        }
        (&s + s.transpose()) * 0.5
    }
}

/// Splitting operator of candidate `i` against a precomputed residual.
pub fn splitting_operator<'a>(
    set: &CandidateSet,
    map: &'a ReconMap,
    weights: &LossWeights,
    r: &Vector,
    i: usize,
) -> Result<SplittingOperator<'a>, ObjectiveError> {
    let c = set.candidates.get(i).ok_or(ObjectiveError::DimensionMismatch {
        expected: set.len(),
        got: i,
    })?;
    Ok(SplittingOperator {
        contraction: map.contraction(r, &c.x, c.label)?,
        x: c.x.clone(),
        scale: -2.0 * weights.alpha1 * c.lambda,
    })
}

pub fn splitting_hvp(
    set: &CandidateSet,
    map: &ReconMap,
    weights: &LossWeights,
    i: usize,
    v: &Vector,
) -> Result<Vector, ObjectiveError> {
    check_dim(set.dim(), v.len())?;
    let r = residual(set, map)?;
    Ok(splitting_operator(set, map, weights, &r, i)?.apply(v))
}

/// Least-squares `lambda` for fixed `x`; with `nonneg`, the NNLS solution.
pub fn lambda_refit(set: &CandidateSet, map: &ReconMap, nonneg: bool) -> Result<Vector, ObjectiveError> {
    let f = design_matrix(set, map)?;
    if nonneg {
        Ok(nnls(&f, &set.target))
    } else {
        Ok(svd_pinv(&f, DEFAULT_RANK_TOL).pinv * &set.target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{kkt_synthesize, LabeledDataset, SynthOptions};
    use crate::numkernels::sym_min_eig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gauss(rng: &mut ChaCha8Rng, d: usize) -> Vector {
        Vector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
    }

    fn binary_model(rng: &mut ChaCha8Rng, m: usize, d: usize, act: ActivationPoly) -> ModelParams {
        let a = gauss(rng, m);
        let w = DenseMatrix::from_fn(m, d, |_, _| rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt());
        ModelParams::new(a, w, act).unwrap()
    }

    fn random_set(rng: &mut ChaCha8Rng, map: &ReconMap, k: usize, labels: &[i64]) -> CandidateSet {
        let d = map.input_dim();
        let xs = (0..k).map(|_| gauss(rng, d)).collect();
        let lam = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lab = (0..k).map(|i| labels[i % labels.len()]).collect();
        let target = gauss(rng, map.n_params());
        CandidateSet::from_points(xs, lam, lab, target).unwrap()
    }

    fn maps(rng: &mut ChaCha8Rng, d: usize) -> Vec<(ReconMap, Vec<i64>)> {
        let act = ActivationPoly::new(vec![0.1, 0.5, -0.3, 1.0]).unwrap();
        let bin = binary_model(rng, 4, d, act.clone());
        let init = binary_model(rng, 4, d, act.clone());
        let multi = MulticlassParams::new(
            DenseMatrix::from_fn(3, 4, |_, _| rng.sample::<f64, _>(StandardNormal)),
            DenseMatrix::from_fn(4, d, |_, _| rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt()),
            act,
        )
        .unwrap();
        vec![
            (ReconMap::KktBinary { model: bin.clone() }, vec![1, -1]),
            (ReconMap::MulticlassMargin { model: multi }, vec![0, 1, 2]),
            (ReconMap::ntk(bin, init).unwrap(), vec![1, -1]),
        ]
    }

    /// Runner-up margin over the second best; FD steps must not cross a tie.
    fn multiclass_gap(map: &ReconMap, set: &CandidateSet) -> f64 {
        let ReconMap::MulticlassMargin { model } = map else {
            return f64::INFINITY;
        };
        set.candidates
            .iter()
            .map(|c| {
                let mut out: Vec<f64> = model
                    .forward(&c.x)
                    .unwrap()
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j as i64 != c.label)
                    .map(|(_, v)| *v)
                    .collect();
                out.sort_by(|a, b| b.total_cmp(a));
                out[0] - out[1]
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn binary_map_sign_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = binary_model(&mut rng, 3, 4, ActivationPoly::power(3));
        let x = gauss(&mut rng, 4);
        let map = ReconMap::KktBinary { model: model.clone() };
        let g = model.grad_theta(&x).unwrap();
        assert_eq!(map_eval(&map, &x, 1).unwrap(), g);
        assert_eq!(map_eval(&map, &x, -1).unwrap(), -g);
        assert!(map_eval(&map, &x, 2).is_err());
        assert!(map_eval(&map, &gauss(&mut rng, 3), 1).is_err());
        let ntk = ReconMap::ntk(model.clone(), model).unwrap();
        assert_eq!(map_eval(&ntk, &x, 1).unwrap(), map_eval(&map, &x, 1).unwrap());
    }

    #[test]
    fn multiclass_map_matches_fd_of_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (map, _) = maps(&mut rng, 3).swap_remove(1);
        let ReconMap::MulticlassMargin { model } = &map else { unreachable!() };
        let x = gauss(&mut rng, 3);
        let y = 1usize;
        let f = map_eval(&map, &x, y as i64).unwrap();
        let margin = |p: &MulticlassParams| {
            let out = p.forward(&x).unwrap();
            let top = (0..3).filter(|&j| j != y).map(|j| out[j]).fold(f64::NEG_INFINITY, f64::max);
            out[y] - top
        };
        let flat = model.to_flat();
        let h = 1e-6;
        for k in 0..flat.len() {
            let mut up = flat.clone();
            up[k] += h;
            let mut dn = flat.clone();
            dn[k] -= h;
            let fd = (margin(&model.with_flat(&up).unwrap()) - margin(&model.with_flat(&dn).unwrap())) / (2.0 * h);
            assert!((fd - f[k]).abs() <= 1e-6 * f.amax().max(1.0), "k {k}: {fd} vs {}", f[k]);
        }
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = binary_model(&mut rng, 3, 2, ActivationPoly::power(3));
        let map = ReconMap::KktBinary { model: model.clone() };
        let theta = model.to_flat();
        let mut set =
            CandidateSet::from_points(vec![gauss(&mut rng, 2)], vec![0.0], vec![1], theta.clone()).unwrap();
        let w = LossWeights::default();
        assert!((loss(&set, &map, &w).unwrap() - theta.norm_squared()).abs() <= 1e-14 * theta.norm_squared());
        assert_eq!(residual(&set, &map).unwrap(), theta);

        set.candidates[0].lambda = -2.0;
        let base = loss(&set, &map, &w).unwrap();
        let w2 = LossWeights { alpha2: 0.7, ..w };
        assert!((loss(&set, &map, &w2).unwrap() - base - 1.4).abs() <= 1e-12);

        set.candidates[0].x = Vector::from_vec(vec![1.5, -3.0]);
        let w3 = LossWeights { alpha3: 2.0, ..w };
        assert!((loss(&set, &map, &w3).unwrap() - base_for(&set, &map) - 2.0 * 2.5).abs() <= 1e-10);
        assert!(loss(&set, &map, &LossWeights { alpha1: -1.0, ..w }).is_err());
    }

    fn base_for(set: &CandidateSet, map: &ReconMap) -> f64 {
        residual(set, map).unwrap().norm_squared()
    }

    #[test]
    fn planted_kkt_candidates_have_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = DenseMatrix::from_fn(3, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        for mut row in x.row_iter_mut() {
            let n = row.norm();
            row /= n;
        }
        let labels = vec![1, -1, 1];
        let lam = vec![0.7, 1.1, 0.9];
        let ds = LabeledDataset::new(x.clone(), labels.clone(), true).unwrap();
        let fx = kkt_synthesize(&ds, &lam, &ActivationPoly::power(3), 10, 4, SynthOptions::default()).unwrap();
        let map = ReconMap::KktBinary {
            model: fx.params.clone(),
        };
        let xs = (0..3).map(|i| ds.sample(i)).collect();
        let set = CandidateSet::from_points(xs, lam.clone(), labels, fx.params.to_flat()).unwrap();
        assert!(residual(&set, &map).unwrap().norm() <= 1e-8);
        assert!(loss(&set, &map, &LossWeights::default()).unwrap() <= 1e-16);
        let refit = lambda_refit(&set, &map, false).unwrap();
        for (a, b) in refit.iter().zip(&lam) {
            assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn residual_is_affine_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (map, labels) in maps(&mut rng, 3) {
            let set = random_set(&mut rng, &map, 3, &labels);
            let r1 = residual(&set, &map).unwrap();
            let mut doubled = set.clone();
            for c in &mut doubled.candidates {
                c.lambda *= 2.0;
            }
            let r2 = residual(&doubled, &map).unwrap();
            let want = &set.target - (&set.target - &r1) * 2.0;
            assert!((r2 - want).amax() <= 1e-12 * set.target.amax().max(1.0));
        }
    }

    #[test]
    fn gradient_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = binary_model(&mut rng, 3, 3, ActivationPoly::power(3));
        let map = ReconMap::KktBinary { model };
        let mut set = random_set(&mut rng, &map, 3, &[1, -1]);
        set.candidates[1].lambda = 0.0;
        let g = grad(&set, &map, &LossWeights::default()).unwrap();
        assert_eq!(g.x[1], Vector::zeros(3));
        let r = residual(&set, &map).unwrap();
        set.target -= r;
        let g = grad(&set, &map, &LossWeights::default()).unwrap();
        assert!(g.x.iter().all(|v| v.amax() <= 1e-12));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let weights = LossWeights {
            alpha1: 1.3,
            alpha2: 0.4,
            alpha3: 0.2,
            prior: PriorBox { lo: -0.8, hi: 0.9 },
        };
        for (map, labels) in maps(&mut rng, 5) {
            let mut set = random_set(&mut rng, &map, 3, &labels);
            while multiclass_gap(&map, &set) < 1e-3 {
                set = random_set(&mut rng, &map, 3, &labels);
            }
            let g = grad(&set, &map, &weights).unwrap();
            let f = |s: &CandidateSet| loss(s, &map, &weights).unwrap();
            let h = 1e-6;
            let scale = g.x.iter().map(|v| v.amax()).fold(g.lambda.amax(), f64::max).max(1.0);
            for i in 0..set.len() {
                for l in 0..set.dim() {
                    let mut up = set.clone();
                    up.candidates[i].x[l] += h;
                    let mut dn = set.clone();
                    dn.candidates[i].x[l] -= h;
                    let fd = (f(&up) - f(&dn)) / (2.0 * h);
                    assert!((fd - g.x[i][l]).abs() <= 1e-5 * scale, "{:?} x[{i}][{l}]: {fd} vs {}", map.kind(), g.x[i][l]);
                }
                let mut up = set.clone();
                up.candidates[i].lambda += h;
                let mut dn = set.clone();
                dn.candidates[i].lambda -= h;
                let fd = (f(&up) - f(&dn)) / (2.0 * h);
                assert!((fd - g.lambda[i]).abs() <= 1e-5 * scale, "{:?} lambda[{i}]", map.kind());
            }
        }
    }

    #[test]
    fn splitting_hvp_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (map, labels) in maps(&mut rng, 3) {
            let mut set = random_set(&mut rng, &map, 2, &labels);
            let r = residual(&set, &map).unwrap();
            set.target -= r;
            let sv = splitting_hvp(&set, &map, &LossWeights::default(), 0, &gauss(&mut rng, 3)).unwrap();
            assert!(sv.amax() <= 1e-12);
        }
    }

    #[test]
    fn quadratic_splitting_matrix_is_constant_in_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = binary_model(&mut rng, 4, 3, ActivationPoly::power(2));
        let map = ReconMap::KktBinary { model };
        let set = random_set(&mut rng, &map, 1, &[1]);
        let mut moved = set.clone();
        moved.candidates[0].x = gauss(&mut rng, 3);
        let w = LossWeights::default();
        let r = residual(&set, &map).unwrap();
        let s1 = splitting_operator(&set, &map, &w, &r, 0).unwrap().matrix();
        let s2 = splitting_operator(&moved, &map, &w, &r, 0).unwrap().matrix();
        assert!((s1 - s2).amax() <= 1e-12);
    }

    #[test]
    fn splitting_symmetric_and_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = LossWeights { alpha1: 0.8, ..Default::default() };
        for (map, labels) in maps(&mut rng, 4) {
            let mut set = random_set(&mut rng, &map, 3, &labels);
            while multiclass_gap(&map, &set) < 1e-2 {
                set = random_set(&mut rng, &map, 3, &labels);
            }
            let r = residual(&set, &map).unwrap();
            for i in 0..3 {
                let op = splitting_operator(&set, &map, &w, &r, i).unwrap();
                let (u, v) = (gauss(&mut rng, 4), gauss(&mut rng, 4));
                let (su, sv) = (op.apply(&u), op.apply(&v));
                assert!((u.dot(&sv) - su.dot(&v)).abs() <= 1e-8 * su.norm().max(1.0));
                let fd = op.apply_fd(&v);
                assert!((&fd - &sv).norm() <= 1e-5 * sv.norm().max(1.0), "{:?}: {}", map.kind(), (&fd - &sv).norm());
                let lin = op.apply(&(&u * 2.0 - &v * 3.0));
                assert!((lin - (su * 2.0 - sv * 3.0)).norm() <= 1e-10 * lin_scale(&op, &u, &v));
            }
        }
    }

    fn lin_scale(op: &SplittingOperator, u: &Vector, v: &Vector) -> f64 {
        op.apply(u).norm().max(op.apply(v).norm()).max(1.0)
    }

    #[test]
    fn curvature_bound_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = LossWeights::default();
        for _ in 0..5 {
            let model = binary_model(&mut rng, 3, 3, ActivationPoly::power(3));
            let map = ReconMap::KktBinary { model };
            let set = random_set(&mut rng, &map, 2, &[1, -1]);
            let r = residual(&set, &map).unwrap();
            let bound = (0..2)
                .map(|i| sym_min_eig(&splitting_operator(&set, &map, &w, &r, i).unwrap().matrix()).unwrap().value)
                .fold(f64::INFINITY, f64::min);
            let n = 6;
            let h = 1e-5;
            let mut hess = DenseMatrix::zeros(n, n);
            for c in 0..n {
                let shift = |s: f64| {
                    let mut p = set.clone();
                    p.candidates[c / 3].x[c % 3] += s;
                    let g = grad(&p, &map, &w).unwrap();
                    Vector::from_iterator(n, g.x.iter().flat_map(|v| v.iter().copied()))
                };
                hess.set_column(c, &((shift(h) - shift(-h)) / (2.0 * h)));
            }
            let hess = (&hess + hess.transpose()) * 0.5;
            assert!(sym_min_eig(&hess).unwrap().value >= bound - 1e-4);
        }
    }

    #[test]
    fn coincident_offspring_preserve_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (map, labels) in maps(&mut rng, 3) {
            let set = random_set(&mut rng, &map, 3, &labels);
            let mut split = set.clone();
            let c = split.candidates.remove(1);
            let next = set.next_id();
            for off in 0..2 {
                split.candidates.push(Candidate {
                    x: c.x.clone(),
                    lambda: c.lambda / 2.0,
                    label: c.label,
                    lineage: c.lineage.child(next + off),
                });
            }
            let split = CandidateSet::new(split.candidates, split.target, None).unwrap();
            let w = LossWeights::default();
            let (a, b) = (loss(&set, &map, &w).unwrap(), loss(&split, &map, &w).unwrap());
            assert!((a - b).abs() <= 1e-14 * a.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn refit_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = binary_model(&mut rng, 3, 2, ActivationPoly::power(3));
        let map = ReconMap::KktBinary { model: model.clone() };
        let x = gauss(&mut rng, 2);
        let f = map_eval(&map, &x, 1).unwrap();
        let set = CandidateSet::from_points(vec![x], vec![0.3], vec![1], f).unwrap();
        assert!((lambda_refit(&set, &map, false).unwrap()[0] - 1.0).abs() <= 1e-12);
        let neg = CandidateSet { target: -&set.target, ..set.clone() };
        assert_eq!(lambda_refit(&neg, &map, true).unwrap()[0], 0.0);
    }

    #[test]
    fn candidate_set_validation_and_json() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut c = |id, parent| Candidate {
            x: gauss(&mut rng, 2),
            lambda: 0.5,
            label: 1,
            lineage: Lineage { id, parent, depth: 0 },
        };
        let good = vec![c(0, None), c(3, Some(0))];
        let set = CandidateSet::new(good, Vector::from_vec(vec![1.0, 2.0]), Some("ck.json".into())).unwrap();
        let back = CandidateSet::from_json(&set.to_json(), None).unwrap();
        assert_eq!(back, set);
        assert!(CandidateSet::new(vec![], Vector::zeros(1), None).is_err());
        assert!(CandidateSet::new(vec![c(1, None), c(1, None)], Vector::zeros(1), None).is_err());
        assert!(CandidateSet::new(vec![c(1, Some(2))], Vector::zeros(1), None).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn refit_never_increases_loss(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (map, labels) in maps(&mut rng, 3) {
                let set = random_set(&mut rng, &map, 4, &labels);
                let before = loss(&set, &map, &LossWeights::default()).unwrap();
                let lam = lambda_refit(&set, &map, false).unwrap();
                let mut after_set = set.clone();
                for (c, l) in after_set.candidates.iter_mut().zip(lam.iter()) {
                    c.lambda = *l;
                }
                let after = loss(&after_set, &map, &LossWeights::default()).unwrap();
                prop_assert!(after <= before * (1.0 + 1e-12) + 1e-12);
            }
        }

        #[test]
        fn single_column_refit_is_projection(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (map, labels) in maps(&mut rng, 3) {
                let set = random_set(&mut rng, &map, 1, &labels);
                let f = map_eval(&map, &set.candidates[0].x, set.candidates[0].label).unwrap();
                let want = set.target.dot(&f) / f.norm_squared();
                let got = lambda_refit(&set, &map, false).unwrap()[0];
                prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
            }
        }
    }
}
