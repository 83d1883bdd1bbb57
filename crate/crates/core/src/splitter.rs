//! First-order descent on candidates and multipliers, alternated with
//! curvature-triggered sample splitting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkernels::{lanczos_min_eig, LinalgError, Vector};
use crate::objective::{
    lambda_refit, loss, loss_and_grad, residual, splitting_operator, Candidate, CandidateSet, Gradient, LossWeights,
    ObjectiveError, ReconMap,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplitError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no candidate with id {0}")]
    UnknownCandidate(u64),
    #[error("split direction must be a unit vector (norm {0})")]
    NotUnit(f64),
    #[error("split step {eta} outside [0, {eta_max}]")]
    InvalidStep { eta: f64, eta_max: f64 },
    #[error("splitting would exceed {max} candidates")]
    CandidateCapExceeded { max: usize },
    #[error("descent diverged at iteration {iter}")]
    Diverged { iter: usize },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct SplitConfig {
    /// First-order tolerance on `||grad_x L||`.
    pub eps: f64,
    /// Curvature tolerance: certified once every `lambda_min(S) >= -eps_h`.
    pub eps_h: f64,
    /// Splitting trigger; candidates below `max(lambda_star, -eps_h)` are split.
    pub lambda_star: f64,
    pub eta_max: f64,
    /// Descent step; estimated from the Gauss-Newton term when absent.
    pub eta_g: Option<f64>,
    pub split_period: usize,
    pub cap_fraction: f64,
    pub max_candidates: usize,
    pub lanczos_iters: usize,
    pub max_iters: usize,
    pub rho_hint: f64,
    pub l_hint: Option<f64>,
    /// Closed-form multiplier refit every this many descent steps.
    pub refit_period: Option<usize>,
    pub nonneg_refit: bool,
    pub one_split_per_scan: bool,
    /// Disables Phase II entirely (baseline runs).
    pub no_split: bool,
    /// Halvings of `eta_max` probed by the line search.
    pub line_search_probes: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            eps_h: 1e-2,
            lambda_star: -0.1,
            eta_max: 0.01,
            eta_g: None,
            split_period: 20_000,
            cap_fraction: 0.5,
            max_candidates: 1024,
            lanczos_iters: 20,
            max_iters: 200_000,
            rho_hint: 10.0,
            l_hint: None,
            refit_period: None,
            nonneg_refit: false,
            one_split_per_scan: false,
            no_split: false,
            line_search_probes: 20,
            log_every: 100,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), SplitError> {
        let bad = |s: &str| Err(SplitError::InvalidConfig(s.into()));
        if !(self.eps > 0.0) {
            return bad("eps must be > 0");
        }
        if !(self.eps_h > 0.0) {
            return bad("eps-h must be > 0");
        }
        if !(self.lambda_star < 0.0) {
            return bad("lambda-star must be < 0");
        }
        if !(self.cap_fraction > 0.0 && self.cap_fraction <= 1.0) {
            return bad("cap-fraction must be in (0, 1]");
        }
        if !(self.eta_max > 0.0) {
            return bad("eta-max must be > 0");
        }
        if self.eta_g.is_some_and(|v| !(v > 0.0)) || self.l_hint.is_some_and(|v| !(v > 0.0)) {
            return bad("eta-g and l-hint must be > 0");
        }
        if self.split_period == 0 || self.lanczos_iters == 0 {
            return bad("split-period and lanczos-iters must be >= 1");
        }
        Ok(())
    }

    /// Splitting threshold actually applied.
    pub fn trigger(&self) -> f64 {
        self.lambda_star.max(-self.eps_h)
    }

    /// At most `max(1, floor(cap_fraction * k))` splits per scan.
    pub fn split_cap(&self, k: usize) -> usize {
        if self.one_split_per_scan {
            1
        } else {
            ((self.cap_fraction * k as f64).floor() as usize).max(1)
        }
    }
}

fn check(state: &CandidateSet, map: &ReconMap) -> Result<(), SplitError> {
    residual(state, map)?;
    Ok(())
}

fn apply_step(state: &CandidateSet, g: &Gradient, step: f64) -> CandidateSet {
    let mut next = state.clone();
    for (i, c) in next.candidates.iter_mut().enumerate() {
        c.x.axpy(-step, &g.x[i], 1.0);
        c.lambda -= step * g.lambda[i];
    }
    next
}

fn grad_norm_sq(g: &Gradient) -> f64 {
    g.x.iter().map(|v| v.norm_squared()).sum::<f64>() + g.lambda.norm_squared()
}

/// Largest eigenvalue of the Gauss-Newton term `2 a1 J^T J` over `(x, lambda)`,
/// by power iteration with finite-difference `J v`.
pub fn estimate_smoothness(
    state: &CandidateSet,
    map: &ReconMap,
    weights: &LossWeights,
    seed: u64,
) -> Result<f64, SplitError> {
    let k = state.len();
    let d = state.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dir = Gradient {
        x: (0..k)
            .map(|_| Vector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal))))
            .collect(),
        lambda: Vector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal))),
    };
    let plain = LossWeights {
        alpha2: 0.0,
        alpha3: 0.0,
        ..*weights
    };
    let mut est = 0.0;
    for _ in 0..30 {
        let n = grad_norm_sq(&dir).sqrt();
        if n == 0.0 {
            break;
        }
        for v in dir.x.iter_mut() {
            *v /= n;
        }
        dir.lambda /= n;
        let h = 1e-6 * (1.0 + state.candidates.iter().map(|c| c.x.amax()).fold(0.0, f64::max));
        let up = residual(&apply_step(state, &dir, -h), map)?;
        let dn = residual(&apply_step(state, &dir, h), map)?;
        // r = theta - sum lambda f, so r(z - hv) - r(z + hv) = 2h J v.
        let jv = (dn - up) / (2.0 * h);
        let gx = gauss_newton_product(state, map, &plain, &jv)?;
        est = grad_norm_sq(&gx).sqrt();
        dir = gx;
    }
    Ok(est)
}

/// `2 a1 J^T u` for residual direction `u`.
fn gauss_newton_product(
    state: &CandidateSet,
    map: &ReconMap,
    weights: &LossWeights,
    u: &Vector,
) -> Result<Gradient, SplitError> {
    // The gradient at residual u is -2 a1 J^T u; shifting the target makes the residual u.
    let base = residual(state, map)?;
    let mut shifted = state.clone();
    shifted.target = &state.target - &base + u;
    let (_, g) = loss_and_grad(&shifted, map, weights)?;
    Ok(Gradient {
        x: g.x.into_iter().map(|v| -v).collect(),
        lambda: -g.lambda,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: f64,
    pub grad_x_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Outcome {
    pub steps: usize,
    pub rejected: usize,
    pub converged: bool,
    pub loss: f64,
    pub grad_x_norm: f64,
    pub step: f64,
}

/// Armijo-backtracked gradient descent on `(x, lambda)`: a step `eta` is
/// accepted when `L_new <= L - (eta / 2) ||grad||^2`, otherwise halved.
/// Stops when `||grad_x L|| <= eps` or after the iteration budget.
/// At most `config.split_period` iterations with initial step `eta_g`.
pub fn phase1_descent(
    state: &mut CandidateSet,
    map: &ReconMap,
    weights: &LossWeights,
    config: &SplitConfig,
    eta_g: f64,
) -> Result<(Phase1Outcome, Vec<IterRecord>), SplitError> {
    let mut trace = Vec::new();
    let window = Window {
        budget: config.split_period,
        offset: 0,
    };
    let out = descend(state, map, weights, config, eta_g, window, &mut trace)?;
    Ok((out, trace))
}

#[derive(Debug, Clone, Copy)]
struct Window {
    budget: usize,
    offset: usize,
}

fn descend(
    state: &mut CandidateSet,
    map: &ReconMap,
    weights: &LossWeights,
    config: &SplitConfig,
    eta_g: f64,
    window: Window,
    trace: &mut Vec<IterRecord>,
) -> Result<Phase1Outcome, SplitError> {
    let Window { budget, offset: iter_offset } = window;
    let (mut l, mut g) = loss_and_grad(state, map, weights)?;
    let mut step = eta_g;
    let mut out = Phase1Outcome {
        steps: 0,
        rejected: 0,
        converged: false,
        loss: l,
        grad_x_norm: g.x_norm(),
        step,
    };
    while out.steps < budget {
        out.grad_x_norm = g.x_norm();
        if out.grad_x_norm <= config.eps {
            out.converged = true;
            break;
        }
        let gsq = grad_norm_sq(&g);
        loop {
            let cand = apply_step(state, &g, step);
            let lc = loss(&cand, map, weights)?;
            if !lc.is_finite() {
                return Err(SplitError::Diverged {
                    iter: iter_offset + out.steps,
                });
            }
            if lc <= l - 0.5 * step * gsq {
                *state = cand;
                break;
            }
            out.rejected += 1;
            step *= 0.5;
            if step < 1e-300 {
                return Err(SplitError::Diverged {
                    iter: iter_offset + out.steps,
                });
            }
        }
        out.steps += 1;
        if let Some(p) = config.refit_period {
            if p > 0 && out.steps % p == 0 {
                let lam = lambda_refit(state, map, config.nonneg_refit)?;
                for (c, v) in state.candidates.iter_mut().zip(lam.iter()) {
                    c.lambda = *v;
                }
            }
        }
        let (nl, ng) = loss_and_grad(state, map, weights)?;
        l = nl;
        g = ng;
        let it = iter_offset + out.steps;
        if config.log_every > 0 && it % config.log_every == 0 {
            trace.push(IterRecord {
                iter: it,
                loss: l,
                grad_x_norm: g.x_norm(),
                step,
            });
        }
        step *= 2.0;
    }
    out.loss = l;
    out.grad_x_norm = g.x_norm();
    out.converged = out.grad_x_norm <= config.eps;
    out.step = step;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanEntry {
    pub index: usize,
    pub id: u64,
    pub lambda_min: f64,
    pub v_min: Vector,
}

#[derive(Debug, Clone, Default)]
pub struct ScanReport {
    /// Every candidate, ascending by `lambda_min`.
    pub entries: Vec<ScanEntry>,
    /// Candidates whose eigensolve failed.
    pub skipped: Vec<(u64, String)>,
}

impl ScanReport {
    pub fn min_lambda(&self) -> f64 {
        self.entries.first().map_or(f64::INFINITY, |e| e.lambda_min)
    }
}

/// `lambda_min(S(x_i))` for every candidate by Lanczos, seeded with `seed + id`.
pub fn scan_all(
    state: &CandidateSet,
    map: &ReconMap,
    weights: &LossWeights,
    config: &SplitConfig,
) -> Result<ScanReport, SplitError> {
    let r = residual(state, map)?;
    let mut report = ScanReport::default();
    for (index, c) in state.candidates.iter().enumerate() {
        let op = splitting_operator(state, map, weights, &r, index)?;
        let d = op.dim();
        if c.lambda == 0.0 {
            let mut v = Vector::zeros(d);
            v[0] = 1.0;
            report.entries.push(ScanEntry {
                index,
                id: c.lineage.id,
                lambda_min: 0.0,
                v_min: v,
            });
            continue;
        }
        match lanczos_min_eig(|v| op.apply(v), d, config.lanczos_iters, config.seed.wrapping_add(c.lineage.id)) {
            Ok(pair) => report.entries.push(ScanEntry {
                index,
                id: c.lineage.id,
                lambda_min: pair.value,
                v_min: pair.vector,
            }),
            Err(e @ LinalgError::NumericalBreakdown { .. }) | Err(e @ LinalgError::NonFinite) => {
                report.skipped.push((c.lineage.id, e.to_string()))
            }
            Err(e) => return Err(ObjectiveError::from(crate::network::NetworkError::from(e)).into()),
        }
    }
    report.entries.sort_by(|a, b| a.lambda_min.total_cmp(&b.lambda_min).then(a.index.cmp(&b.index)));
    Ok(report)
}

/// Candidates with `lambda_min < config.trigger()`, most negative first, capped.
pub fn scan_candidates(
    state: &CandidateSet,
    map: &ReconMap,
    weights: &LossWeights,
    config: &SplitConfig,
) -> Result<Vec<ScanEntry>, SplitError> {
    let report = scan_all(state, map, weights, config)?;
    let cap = config.split_cap(state.len());
    Ok(report
        .entries
        .into_iter()
        .filter(|e| e.lambda_min < config.trigger())
        .take(cap)
        .collect())
}

/// Replaces candidate `id` by `x +- eta v` with half the multiplier each.
pub fn split(state: &CandidateSet, id: u64, v: &Vector, eta: f64, max_candidates: usize) -> Result<CandidateSet, SplitError> {
    let pos = state
        .candidates
        .iter()
        .position(|c| c.lineage.id == id)
        .ok_or(SplitError::UnknownCandidate(id))?;
    let n = v.norm();
    if (n - 1.0).abs() > 1e-10 {
        return Err(SplitError::NotUnit(n));
    }
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(SplitError::InvalidStep {
            eta,
            eta_max: f64::INFINITY,
        });
    }
    if state.len() + 1 > max_candidates {
        return Err(SplitError::CandidateCapExceeded { max: max_candidates });
    }
    let parent = &state.candidates[pos];
    let next = state.next_id();
    let half = parent.lambda / 2.0;
    let plus = Candidate {
        x: &parent.x + v * eta,
        lambda: half,
        label: parent.label,
        lineage: parent.lineage.child(next),
    };
    let minus = Candidate {
        x: &parent.x - v * eta,
        lambda: parent.lambda - half,
        label: parent.label,
        lineage: parent.lineage.child(next + 1),
    };
    let mut candidates = state.candidates.clone();
    candidates.splice(pos..=pos, [plus, minus]);
    Ok(CandidateSet::new(candidates, state.target.clone(), state.target_ref.clone())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSearch {
    pub eta: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    /// `loss_after - loss_before <= (eta^2 / 4) lambda_min` held.
    pub sufficient: bool,
}

/// Probes `eta_max 2^{-j}`, `j = 0..probes`, on the true post-split loss and
/// keeps the lowest loss among probes meeting the sufficient-decrease margin;
/// if none does, the lowest-loss probe overall (largest `eta` on ties) with
/// `sufficient = false`.
pub fn line_search_eta(
    state: &CandidateSet,
    map: &ReconMap,
    weights: &LossWeights,
    id: u64,
    v: &Vector,
    lambda_min: f64,
    config: &SplitConfig,
) -> Result<LineSearch, SplitError> {
    let before = loss(state, map, weights)?;
    let mut best_ok: Option<(f64, f64)> = None;
    let mut best_any: Option<(f64, f64)> = None;
    let mut eta = config.eta_max;
    for _ in 0..config.line_search_probes.max(1) {
        let after = loss(&split(state, id, v, eta, usize::MAX)?, map, weights)?;
        // Differences below rounding level count as ties; ties keep the larger step.
        let noise = 8.0 * f64::EPSILON * before.max(after);
        if best_any.is_none_or(|(_, l)| after < l - noise) {
            best_any = Some((eta, after));
        }
        if after - before <= 0.25 * eta * eta * lambda_min + noise && best_ok.is_none_or(|(_, l)| after < l - noise) {
            best_ok = Some((eta, after));
        }
        eta *= 0.5;
    }
    let ((eta, after), sufficient) = match best_ok {
        Some(b) => (b, true),
        None => (best_any.expect("at least one probe"), false),
    };
    Ok(LineSearch {
        eta,
        loss_before: before,
        loss_after: after,
        sufficient,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvent {
    pub iteration: usize,
    pub candidate: u64,
    pub lambda_min: f64,
    pub eta_used: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub offspring: [u64; 2],
    pub sufficient_decrease: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// `||grad_x L|| <= eps` and every `lambda_min(S) >= -eps_h`.
    Certified,
    BudgetExhausted,
    /// Converged to first order, negative curvature remains, and no split could be made.
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub grad_x_norm: f64,
    pub min_lambda: f64,
    pub eps: f64,
    pub eps_h: f64,
}

impl Certificate {
    pub fn holds(&self) -> bool {
        self.grad_x_norm <= self.eps && self.min_lambda >= -self.eps_h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<IterRecord>,
    pub splits: Vec<SplitEvent>,
    pub skipped_scans: Vec<(u64, String)>,
    pub termination: Termination,
    pub certificate: Certificate,
    pub iterations: usize,
    pub eta_g: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `ceil(4 L0 / (eps_h eta_min^2))`, recorded when every split met the margin.
    pub split_bound: Option<f64>,
}

impl RunLog {
    /// One JSON object per iteration record, then one per split event, then the certificate.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::json!({"type": "iter", "data": r}).to_string());
            out.push('\n');
        }
        for s in &self.splits {
            out.push_str(&serde_json::json!({"type": "split", "data": s}).to_string());
            out.push('\n');
        }
        let summary = serde_json::json!({
            "type": "summary",
            "termination": self.termination,
            "certificate": self.certificate,
            "iterations": self.iterations,
            "eta_g": self.eta_g,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "split_bound": self.split_bound,
            "skipped_scans": self.skipped_scans,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

/// Alternates [`phase1_descent`] with scans and splits until the certificate
/// holds or the iteration budget runs out. Budget exhaustion is reported in
/// the log, with the state reached so far.
pub fn run(
    state: CandidateSet,
    map: &ReconMap,
    weights: &LossWeights,
    config: &SplitConfig,
) -> Result<(CandidateSet, RunLog), SplitError> {
    config.validate()?;
    weights.validate()?;
    check(&state, map)?;
    let mut state = state;
    let eta_g = match (config.eta_g, config.l_hint) {
        (Some(e), _) => e,
        (None, Some(l)) => 1.0 / l,
        (None, None) => {
            let l = estimate_smoothness(&state, map, weights, config.seed)?;
            if l > 0.0 && l.is_finite() {
                1.0 / l
            } else {
                config.eta_max
            }
        }
    };
    let initial_loss = loss(&state, map, weights)?;
    let mut log = RunLog {
        records: Vec::new(),
        splits: Vec::new(),
        skipped_scans: Vec::new(),
        termination: Termination::BudgetExhausted,
        certificate: Certificate {
            grad_x_norm: f64::INFINITY,
            min_lambda: f64::NEG_INFINITY,
            eps: config.eps,
            eps_h: config.eps_h,
        },
        iterations: 0,
        eta_g,
        initial_loss,
        final_loss: initial_loss,
        split_bound: None,
    };
    let mut iters = 0usize;
    loop {
        let budget = config.split_period.min(config.max_iters - iters);
        let window = Window { budget, offset: iters };
        let p1 = descend(&mut state, map, weights, config, eta_g, window, &mut log.records)?;
        iters += p1.steps;
        log.records.push(IterRecord {
            iter: iters,
            loss: p1.loss,
            grad_x_norm: p1.grad_x_norm,
            step: p1.step,
        });
        let scan = scan_all(&state, map, weights, config)?;
        log.skipped_scans.extend(scan.skipped.iter().cloned());
        log.certificate.grad_x_norm = p1.grad_x_norm;
        log.certificate.min_lambda = scan.min_lambda();
        if p1.converged && scan.skipped.is_empty() && log.certificate.holds() {
            log.termination = Termination::Certified;
            break;
        }
        let mut did_split = false;
        if !config.no_split {
            let cap = config.split_cap(state.len());
            let chosen: Vec<ScanEntry> = scan
                .entries
                .into_iter()
                .filter(|e| e.lambda_min < config.trigger())
                .take(cap)
                .collect();
            for e in chosen {
                if state.len() + 1 > config.max_candidates {
                    break;
                }
                let ls = line_search_eta(&state, map, weights, e.id, &e.v_min, e.lambda_min, config)?;
                if ls.loss_after >= ls.loss_before {
                    continue;
                }
                let next = state.next_id();
                state = split(&state, e.id, &e.v_min, ls.eta, config.max_candidates)?;
                log.splits.push(SplitEvent {
                    iteration: iters,
                    candidate: e.id,
                    lambda_min: e.lambda_min,
                    eta_used: ls.eta,
                    loss_before: ls.loss_before,
                    loss_after: ls.loss_after,
                    offspring: [next, next + 1],
                    sufficient_decrease: ls.sufficient,
                });
                did_split = true;
            }
        }
        if iters >= config.max_iters {
            break;
        }
        if p1.converged && !did_split {
            // First-order stationary, certificate failed, nothing left to split.
            log.termination = Termination::Stalled;
            break;
        }
    }
    log.iterations = iters;
    log.final_loss = loss(&state, map, weights)?;
    if !log.splits.is_empty() && log.splits.iter().all(|s| s.sufficient_decrease) {
        let eta_min = log.splits.iter().map(|s| s.eta_used).fold(f64::INFINITY, f64::min);
        log.split_bound = Some((4.0 * initial_loss / (config.eps_h * eta_min * eta_min)).ceil());
    }
    Ok((state, log))
}

/// Two samples mirrored across the first axis and a model invariant under that
/// mirror, with one candidate on the mirror line.
#[derive(Debug, Clone)]
pub struct PlantedInstance {
    pub map: ReconMap,
    /// The two planted samples; their residual is zero.
    pub truth: CandidateSet,
    /// A single candidate at `(1, 0, ..)` carrying the total multiplier.
    pub merged: CandidateSet,
}

/// Cubic network of `2 * pairs` neurons in the plane whose rows come in mirror
/// pairs `(p, q), (p, -q)` with equal outer weights, so `Phi(x1, x2) = Phi(x1, -x2)`.
/// The truth is `x = (1, +-delta)` with unit multipliers. Descent from the merged
/// candidate stays on the mirror line, where a single candidate cannot fit the target.
pub fn planted_merged_instance(pairs: usize, delta: f64, seed: u64) -> Result<PlantedInstance, SplitError> {
    use crate::network::{ActivationPoly, ModelParams};
    use crate::numkernels::DenseMatrix;
    if pairs == 0 {
        return Err(SplitError::InvalidConfig("pairs must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 2 * pairs;
    let mut a = Vector::zeros(m);
    let mut w = DenseMatrix::zeros(m, 2);
    for k in 0..pairs {
        let p: f64 = rng.sample(StandardNormal);
        let q: f64 = rng.sample(StandardNormal);
        let s: f64 = rng.sample(StandardNormal);
        a[2 * k] = s;
        a[2 * k + 1] = s;
        w[(2 * k, 0)] = p;
        w[(2 * k, 1)] = q;
        w[(2 * k + 1, 0)] = p;
        w[(2 * k + 1, 1)] = -q;
    }
    let model = ModelParams::new(a, w, ActivationPoly::power(3)).map_err(ObjectiveError::from)?;
    let map = ReconMap::KktBinary { model };
    let xs = vec![Vector::from_vec(vec![1.0, delta]), Vector::from_vec(vec![1.0, -delta])];
    let zero = CandidateSet::from_points(xs.clone(), vec![1.0, 1.0], vec![1, 1], Vector::zeros(map.n_params()))?;
    let target = -residual(&zero, &map)?;
    let truth = CandidateSet::new(zero.candidates, target.clone(), None)?;
    let merged = CandidateSet::from_points(vec![Vector::from_vec(vec![1.0, 0.0])], vec![2.0], vec![1], target)?;
    Ok(PlantedInstance { map, truth, merged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ActivationPoly, ModelParams};
    use crate::numkernels::{sym_min_eig, DenseMatrix};

    fn merged_stationary(seed: u64) -> (PlantedInstance, CandidateSet) {
        let inst = planted_merged_instance(3, 0.5, seed).unwrap();
        let cfg = SplitConfig {
            no_split: true,
            max_iters: 5000,
            ..Default::default()
        };
        let (state, log) = run(inst.merged.clone(), &inst.map, &LossWeights::default(), &cfg).unwrap();
        assert!(log.certificate.grad_x_norm <= cfg.eps, "seed {seed} did not settle");
        (inst, state)
    }

    #[test]
    fn config_rules() {
        let cfg = SplitConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.split_cap(4), 2);
        assert_eq!(cfg.split_cap(1), 1);
        assert_eq!(cfg.split_cap(3), 1);
        let one = SplitConfig {
            one_split_per_scan: true,
            ..Default::default()
        };
        assert_eq!(one.split_cap(10), 1);
        assert_eq!(cfg.trigger(), -0.01);
        for bad in [
            SplitConfig { eps: 0.0, ..Default::default() },
            SplitConfig { lambda_star: 0.1, ..Default::default() },
            SplitConfig { cap_fraction: 1.5, ..Default::default() },
            SplitConfig { eta_max: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn split_bookkeeping() {
        let inst = planted_merged_instance(2, 0.3, 1).unwrap();
        let v = Vector::from_vec(vec![0.0, 1.0]);
        let w = LossWeights::default();
        let s = split(&inst.merged, 0, &v, 0.0, 10).unwrap();
        assert_eq!(s.len(), 2);
        let (a, b) = (loss(&inst.merged, &inst.map, &w).unwrap(), loss(&s, &inst.map, &w).unwrap());
        assert!((a - b).abs() <= 1e-14 * a.max(1.0));
        let s = split(&inst.merged, 0, &v, 0.01, 10).unwrap();
        assert_eq!(s.candidates[0].lambda + s.candidates[1].lambda, inst.merged.candidates[0].lambda);
        assert_eq!(s.candidates[0].lineage.parent, Some(0));
        assert_eq!(s.candidates[1].lineage.depth, 1);
        assert_eq!(&s.candidates[0].x - &s.candidates[1].x, &v * 0.02);

        let odd = Candidate {
            lambda: 0.3,
            ..inst.merged.candidates[0].clone()
        };
        let odd_set = CandidateSet::new(vec![odd], inst.merged.target.clone(), None).unwrap();
        let s = split(&odd_set, 0, &v, 0.1, 10).unwrap();
        let s2 = split(&s, 1, &v, 0.1, 10).unwrap();
        assert_eq!(s2.candidates.iter().map(|c| c.lambda).sum::<f64>(), 0.3);

        assert!(matches!(split(&inst.merged, 0, &v, 0.01, 1), Err(SplitError::CandidateCapExceeded { max: 1 })));
        assert!(matches!(split(&inst.merged, 7, &v, 0.01, 10), Err(SplitError::UnknownCandidate(7))));
        assert!(matches!(split(&inst.merged, 0, &(&v * 2.0), 0.01, 10), Err(SplitError::NotUnit(_))));
    }

    #[test]
    fn scan_on_zero_residual_is_empty() {
        let inst = planted_merged_instance(2, 0.3, 2).unwrap();
        let cfg = SplitConfig::default();
        assert!(scan_candidates(&inst.truth, &inst.map, &LossWeights::default(), &cfg).unwrap().is_empty());
    }

    #[test]
    fn scan_matches_dense_eigensolve() {
        let (inst, state) = merged_stationary(1);
        let w = LossWeights::default();
        let cfg = SplitConfig::default();
        let found = scan_candidates(&state, &inst.map, &w, &cfg).unwrap();
        assert_eq!(found.len(), 1);
        let r = residual(&state, &inst.map).unwrap();
        let dense = sym_min_eig(&splitting_operator(&state, &inst.map, &w, &r, 0).unwrap().matrix()).unwrap();
        assert!((found[0].lambda_min - dense.value).abs() <= 1e-5 * dense.value.abs().max(1.0));
        assert!(found[0].v_min[1].abs() > 0.999, "splits across the mirror line");
    }

    #[test]
    fn scan_respects_cap() {
        let (inst, state) = merged_stationary(2);
        let v = Vector::from_vec(vec![1.0, 0.0]);
        let s = split(&split(&split(&state, 0, &v, 0.0, 8).unwrap(), 1, &v, 0.0, 8).unwrap(), 2, &v, 0.0, 8).unwrap();
        assert_eq!(s.len(), 4);
        let w = LossWeights::default();
        let cfg = SplitConfig::default();
        let all = scan_all(&s, &inst.map, &w, &cfg).unwrap();
        assert!(all.entries.iter().all(|e| e.lambda_min < cfg.trigger()));
        assert_eq!(scan_candidates(&s, &inst.map, &w, &cfg).unwrap().len(), 2);
    }

    #[test]
    fn split_loss_change_is_second_order() {
        let (inst, state) = merged_stationary(3);
        let w = LossWeights::default();
        let cfg = SplitConfig::default();
        let e = &scan_candidates(&state, &inst.map, &w, &cfg).unwrap()[0];
        let base = loss(&state, &inst.map, &w).unwrap();
        let mut errs = Vec::new();
        for k in 0..3 {
            let eta = 1e-2 / f64::powi(2.0, k);
            let after = loss(&split(&state, e.id, &e.v_min, eta, 8).unwrap(), &inst.map, &w).unwrap();
            let predicted = 0.5 * eta * eta * e.lambda_min;
            errs.push((after - base - predicted).abs());
            assert!((after - base - predicted).abs() <= 0.1 * predicted.abs());
        }
        assert!(errs[0] / errs[1] >= 2f64.powf(2.7) && errs[1] / errs[2] >= 2f64.powf(2.7), "{errs:?}");
    }

    #[test]
    fn line_search_cases() {
        let (inst, state) = merged_stationary(4);
        let w = LossWeights::default();
        let cfg = SplitConfig::default();
        let e = &scan_candidates(&state, &inst.map, &w, &cfg).unwrap()[0];
        let ls = line_search_eta(&state, &inst.map, &w, e.id, &e.v_min, e.lambda_min, &cfg).unwrap();
        assert!(ls.sufficient);
        assert!(ls.eta > 0.0 && ls.eta <= cfg.eta_max);
        assert!(ls.loss_before - ls.loss_after >= 0.25 * ls.eta * ls.eta * e.lambda_min.abs());

        let tiny = SplitConfig { eta_max: 1e-12, ..cfg.clone() };
        let ls = line_search_eta(&state, &inst.map, &w, e.id, &e.v_min, e.lambda_min, &tiny).unwrap();
        assert_eq!(ls.eta, 1e-12);
        assert!((ls.loss_after - ls.loss_before).abs() <= 1e-12 * ls.loss_before);

        // Along the mirror line the curvature is not negative.
        let flat = Vector::from_vec(vec![1.0, 0.0]);
        let ls = line_search_eta(&state, &inst.map, &w, e.id, &flat, -1e-12, &cfg).unwrap();
        assert!(!ls.sufficient || ls.loss_after < ls.loss_before);
    }

    #[test]
    fn phase1_from_solution_takes_no_steps() {
        let inst = planted_merged_instance(2, 0.3, 5).unwrap();
        let mut state = inst.truth.clone();
        let (out, _) = phase1_descent(&mut state, &inst.map, &LossWeights::default(), &SplitConfig::default(), 0.01).unwrap();
        assert_eq!(out.steps, 0);
        assert!(out.converged);
        assert_eq!(state, inst.truth);
    }

    #[test]
    fn phase1_quadratic_map_converges_with_descent_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Vector::from_iterator(4, (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let wm = DenseMatrix::from_fn(4, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let map = ReconMap::KktBinary {
            model: ModelParams::new(a, wm, ActivationPoly::power(2)).unwrap(),
        };
        let x0 = Vector::from_vec(vec![0.6, -0.2, 0.4]);
        let truth = CandidateSet::from_points(vec![x0.clone()], vec![1.0], vec![1], Vector::zeros(map.n_params())).unwrap();
        let target = -residual(&truth, &map).unwrap();
        let start = CandidateSet::from_points(
            vec![&x0 + Vector::from_vec(vec![0.05, 0.02, -0.03])],
            vec![0.9],
            vec![1],
            target,
        )
        .unwrap();
        let w = LossWeights::default();
        let l = 10.0 * estimate_smoothness(&start, &map, &w, 0).unwrap();
        let cfg = SplitConfig {
            split_period: 1,
            ..Default::default()
        };
        let mut state = start;
        let mut converged = false;
        for _ in 0..20_000 {
            let (l0, g0) = loss_and_grad(&state, &map, &w).unwrap();
            let (out, _) = phase1_descent(&mut state, &map, &w, &cfg, 1.0 / l).unwrap();
            if out.converged {
                converged = true;
                break;
            }
            let l1 = loss(&state, &map, &w).unwrap();
            assert!(l1 <= l0 - 0.5 / l * grad_norm_sq(&g0) + 1e-15 * l0);
        }
        assert!(converged);
    }

    #[test]
    fn run_escapes_merged_point() {
        let (inst, state) = merged_stationary(0);
        let w = LossWeights::default();
        let cfg = SplitConfig {
            max_iters: 5000,
            ..Default::default()
        };
        let base_cfg = SplitConfig {
            no_split: true,
            ..cfg.clone()
        };
        let (_, base) = run(state.clone(), &inst.map, &w, &base_cfg).unwrap();
        assert!(base.final_loss > 1e-2);
        assert_eq!(base.termination, Termination::Stalled);
        let (fin, log) = run(state, &inst.map, &w, &cfg).unwrap();
        assert!(log.final_loss <= 1e-6, "{}", log.final_loss);
        assert_eq!(log.termination, Termination::Certified);
        assert!(log.splits.iter().all(|s| s.loss_before - s.loss_after >= cfg.eps_h * s.eta_used.powi(2) / 4.0));
        let bound = log.split_bound.unwrap();
        assert!(log.splits.len() as f64 <= bound);
        let r = residual(&fin, &inst.map).unwrap();
        for i in 0..fin.len() {
            let s = splitting_operator(&fin, &inst.map, &w, &r, i).unwrap().matrix();
            assert!(sym_min_eig(&s).unwrap().value >= -cfg.eps_h);
        }
        let total: f64 = fin.candidates.iter().map(|c| c.lambda).sum();
        assert!(total.is_finite());
    }

    #[test]
    fn run_from_solution_certifies_without_splits() {
        let inst = planted_merged_instance(3, 0.5, 7).unwrap();
        let (_, log) = run(inst.truth.clone(), &inst.map, &LossWeights::default(), &SplitConfig::default()).unwrap();
        assert_eq!(log.termination, Termination::Certified);
        assert!(log.splits.is_empty());
        assert_eq!(log.iterations, 0);
        let lines = log.to_json_lines();
        assert!(lines.lines().last().unwrap().contains("\"certified\""));
    }
}
