//! Exact KKT fixtures and KKT certification for homogeneous networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{check_dim, ActivationPoly, LabeledDataset, ModelParams, NetworkError};
use crate::numkernels::{lstsq, nnls, sym_eig, DenseMatrix, Vector, DEFAULT_RANK_TOL};
use crate::tensor::SymmetricTensor;

/// Result of [`kkt_synthesize`]: parameters and the multipliers they are stationary for.
#[derive(Debug, Clone)]
pub struct KktFixture {
    pub params: ModelParams,
    /// Multipliers actually realized; differs from the request by a positive
    /// rescaling when margins are equalized.
    pub multipliers: Vec<f64>,
    /// `max_i |y_i Phi(x_i) - 1|` over samples with positive multiplier.
    pub margin_spread: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    /// Rescale the multipliers so that every active sample sits exactly on
    /// margin 1. Not every multiplier pattern admits such a point; failures are
    /// retried with a different neuron assignment.
    pub equalize_margins: bool,
    /// Retries allowed for a degenerate Newton start and for a failed
    /// equalization (each retry reassigns neurons to directions).
    pub max_resamples: usize,
    pub newton_iters: usize,
    pub equalize_iters: usize,
    /// Random Newton starts used to collect distinct eigen-directions.
    pub pool_starts: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            equalize_margins: false,
            max_resamples: 50,
            newton_iters: 100,
            equalize_iters: 60,
            pool_starts: 400,
        }
    }
}

/// A neuron at an eigen-direction of the contraction map: `f(w) = sigma * w`.
#[derive(Debug, Clone)]
struct FixedPoint {
    w: Vector,
    sigma: f64,
}

fn fixed_point_residual(t: &SymmetricTensor, w: &Vector, sigma: f64) -> Vector {
    t.contract_vector(w).expect("dims checked") - w * sigma
}

/// Damped Newton on `f(w) - sigma w = 0` from `w`.
fn newton_fixed_point(t: &SymmetricTensor, mut w: Vector, sigma: f64, iters: usize) -> Option<Vector> {
    let alpha = t.order() as f64;
    let d = w.len();
    let mut res = fixed_point_residual(t, &w, sigma);
    for _ in 0..iters {
        let scale = w.norm();
        if scale < 1e-8 || !scale.is_finite() {
            return None;
        }
        if res.norm() <= 1e-14 * scale.max(1.0) {
            return Some(w);
        }
        let jac = t.contract_matrix_slice(&w).ok()? * (alpha - 1.0) - DenseMatrix::identity(d, d) * sigma;
        let step = lstsq(&jac, &res, DEFAULT_RANK_TOL);
        let mut damp = 1.0;
        loop {
            let cand = &w - &step * damp;
            let r = fixed_point_residual(t, &cand, sigma);
            if r.norm() < res.norm() {
                w = cand;
                res = r;
                break;
            }
            damp *= 0.5;
            if damp < 1e-6 {
                // Stalled: accept whatever Newton reached if it already converged.
                return (res.norm() <= 1e-11 * w.norm().max(1.0)).then_some(w);
            }
        }
    }
    (res.norm() <= 1e-11 * w.norm().max(1.0)).then_some(w)
}

fn random_in_span(rng: &mut ChaCha8Rng, basis: &[Vector]) -> Vector {
    let d = basis[0].len();
    let mut u = Vector::zeros(d);
    for x in basis {
        u.axpy(rng.sample::<f64, _>(StandardNormal), x, 1.0);
    }
    u
}

fn draw_fixed_point(
    t: &SymmetricTensor,
    basis: &[Vector],
    rng: &mut ChaCha8Rng,
    opts: &SynthOptions,
) -> Result<FixedPoint, NetworkError> {
    let alpha = t.order();
    for _ in 0..=opts.max_resamples {
        let u = random_in_span(rng, basis);
        let norm = u.norm();
        if norm == 0.0 {
            continue;
        }
        let u = u / norm;
        let p = t.diagonal_poly(&u)?;
        if p.abs() < 1e-8 * t.max_abs().max(f64::MIN_POSITIVE) {
            continue;
        }
        let sigma = p.signum();
        let start = &u * p.abs().powf(-1.0 / (alpha as f64 - 2.0));
        if let Some(w) = newton_fixed_point(t, start, sigma, opts.newton_iters) {
            return Ok(FixedPoint { w, sigma });
        }
    }
    Err(NetworkError::SynthesisFailed(format!(
        "no eigen-direction found after {} resamples",
        opts.max_resamples
    )))
}

/// Quadratic case: fixed points are eigenvectors of the (constant) slice.
fn quadratic_fixed_points(t: &SymmetricTensor) -> Result<Vec<FixedPoint>, NetworkError> {
    let m = t.contract_matrix_slice(&Vector::zeros(t.dim()))?;
    let scale = m.abs().max();
    let pairs = sym_eig(&m)?;
    Ok(pairs
        .into_iter()
        .filter(|p| p.value.abs() > 1e-10 * scale)
        .map(|p| FixedPoint {
            sigma: p.value.signum(),
            w: p.vector / p.value.abs(),
        })
        .collect())
}

/// Neuron `(a_j, W_j)` with `W_j = alpha a_j f(W_j)` and `a_j = p(W_j)`.
fn neuron_from_direction(t: &SymmetricTensor, dir: &Vector) -> Result<(f64, Vector), NetworkError> {
    let alpha = t.order() as f64;
    let u = dir / dir.norm();
    let mu = t.diagonal_poly(&u)?;
    let s = (alpha * mu * mu).powf(-1.0 / (2.0 * alpha - 2.0));
    Ok((s.powf(alpha) * mu, u * s))
}

fn validate_synth_inputs(
    dataset: &LabeledDataset,
    multipliers: &[f64],
    activation: &ActivationPoly,
    width: usize,
) -> Result<Vec<f64>, NetworkError> {
    if !activation.is_homogeneous() {
        return Err(NetworkError::NotHomogeneous);
    }
    if activation.degree() < 2 {
        return Err(NetworkError::InvalidActivation("synthesis needs alpha >= 2".into()));
    }
    if width == 0 {
        return Err(NetworkError::InvalidParams("width must be >= 1".into()));
    }
    check_dim(dataset.len(), multipliers.len())?;
    if multipliers.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(NetworkError::InvalidParams("multipliers must be finite and >= 0".into()));
    }
    dataset.signs()
}

struct Synthesizer<'a> {
    dataset: &'a LabeledDataset,
    signs: Vec<f64>,
    activation: &'a ActivationPoly,
    newton_iters: usize,
}

impl Synthesizer<'_> {
    fn tensor(&self, lambda: &[f64]) -> Result<SymmetricTensor, NetworkError> {
        let t = self.dataset.kkt_tensor(lambda, self.activation.degree())?;
        Ok(t.scale(self.activation.leading()))
    }

    /// One neuron per entry of `assign`, each an index into `pool`.
    fn build(&self, t: &SymmetricTensor, pool: &[FixedPoint], assign: &[usize]) -> Result<ModelParams, NetworkError> {
        let m = assign.len();
        let d = self.dataset.dim();
        let neurons = pool
            .iter()
            .map(|fp| neuron_from_direction(t, &fp.w))
            .collect::<Result<Vec<_>, _>>()?;
        let mut a = Vector::zeros(m);
        let mut w = DenseMatrix::zeros(m, d);
        for (j, &k) in assign.iter().enumerate() {
            a[j] = neurons[k].0;
            w.set_row(j, &neurons[k].1.transpose());
        }
        ModelParams::new(a, w, self.activation.clone())
    }

    /// Re-converges every pool direction for the tensor of `lambda`.
    fn track(&self, lambda: &[f64], pool: &[FixedPoint]) -> Option<(SymmetricTensor, Vec<FixedPoint>)> {
        let t = self.tensor(lambda).ok()?;
        if t.order() == 2 {
            let fresh = quadratic_fixed_points(&t).ok()?;
            let moved = pool
                .iter()
                .map(|fp| {
                    let u = &fp.w / fp.w.norm();
                    fresh
                        .iter()
                        .max_by(|x, y| {
                            let cx = (x.w.dot(&u) / x.w.norm()).abs();
                            let cy = (y.w.dot(&u) / y.w.norm()).abs();
                            cx.total_cmp(&cy)
                        })
                        .cloned()
                })
                .collect::<Option<Vec<_>>>()?;
            return Some((t, moved));
        }
        let mut moved = Vec::with_capacity(pool.len());
        for fp in pool {
            let w = newton_fixed_point(&t, fp.w.clone(), fp.sigma, self.newton_iters)?;
            moved.push(FixedPoint { w, sigma: fp.sigma });
        }
        Some((t, moved))
    }

    fn margins(&self, params: &ModelParams, active: &[usize]) -> Vec<f64> {
        active
            .iter()
            .map(|&i| self.signs[i] * params.forward(&self.dataset.sample(i)).expect("dims checked"))
            .collect()
    }
}

/// Builds parameters that satisfy the stationarity equations exactly for the
/// given multipliers: every neuron sits on an eigen-direction `f(u) = mu u` of
/// `T = c sum_i lambda_i y_i x_i^{(x)alpha}`, scaled so that `W = alpha a f(W)`
/// and `a = p(W)`.
///
/// Exact stationarity forces `W_j` parallel to `f(W_j)`, so neurons can only
/// occupy the finitely many real eigen-directions of `f`. A pool of distinct
/// directions is collected from random starts and every one of them is used
/// when `width` allows.
pub fn kkt_synthesize(
    dataset: &LabeledDataset,
    multipliers: &[f64],
    activation: &ActivationPoly,
    width: usize,
    seed: u64,
    opts: SynthOptions,
) -> Result<KktFixture, NetworkError> {
    let signs = validate_synth_inputs(dataset, multipliers, activation, width)?;
    let d = dataset.dim();
    let active: Vec<usize> = (0..dataset.len()).filter(|&i| multipliers[i] > 0.0).collect();
    if active.is_empty() {
        let params = ModelParams::new(Vector::zeros(width), DenseMatrix::zeros(width, d), activation.clone())?;
        return Ok(KktFixture {
            params,
            multipliers: multipliers.to_vec(),
            margin_spread: 0.0,
        });
    }
    let synth = Synthesizer {
        dataset,
        signs,
        activation,
        newton_iters: opts.newton_iters,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = synth.tensor(multipliers)?;
    let pool = if activation.degree() == 2 {
        quadratic_fixed_points(&t)?
    } else {
        let basis: Vec<Vector> = active.iter().map(|&i| dataset.sample(i)).collect();
        direction_pool(&t, &basis, &mut rng, &opts)?
    };
    if pool.is_empty() {
        return Err(NetworkError::SynthesisFailed("contraction map has no real eigen-direction".into()));
    }

    let attempts = if opts.equalize_margins { opts.max_resamples + 1 } else { 1 };
    let mut last_err = None;
    for attempt in 0..attempts {
        let assign = assign_neurons(pool.len(), width, attempt, &mut rng);
        let outcome = if opts.equalize_margins {
            equalize(&synth, &active, multipliers.to_vec(), pool.clone(), &assign, &opts)
        } else {
            Ok((multipliers.to_vec(), t.clone(), pool.clone()))
        };
        match outcome {
            Ok((lambda, t, moved)) => {
                let params = synth.build(&t, &moved, &assign)?;
                let spread = synth
                    .margins(&params, &active)
                    .iter()
                    .fold(0.0_f64, |acc, q| acc.max((q - 1.0).abs()));
                return Ok(KktFixture {
                    params,
                    multipliers: lambda,
                    margin_spread: spread,
                });
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Distinct eigen-directions reached by Newton from `opts.pool_starts` random
/// starts in the span of the active samples. Directions are compared up to sign.
fn direction_pool(
    t: &SymmetricTensor,
    basis: &[Vector],
    rng: &mut ChaCha8Rng,
    opts: &SynthOptions,
) -> Result<Vec<FixedPoint>, NetworkError> {
    let mut pool: Vec<FixedPoint> = Vec::new();
    for _ in 0..opts.pool_starts.max(1) {
        let fp = draw_fixed_point(t, basis, rng, opts)?;
        let u = &fp.w / fp.w.norm();
        let seen = pool
            .iter()
            .any(|q| (q.w.dot(&u).abs() / q.w.norm() - 1.0).abs() < 1e-8);
        if !seen {
            pool.push(fp);
        }
    }
    Ok(pool)
}

/// First attempt cycles through the pool; later attempts keep every direction
/// once (when width allows) and fill the rest at random.
fn assign_neurons(pool_len: usize, width: usize, attempt: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pool_len).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    (0..width)
        .map(|j| {
            if attempt == 0 || j < order.len() {
                order[j % order.len()]
            } else {
                rng.random_range(0..pool_len)
            }
        })
        .collect()
}

type Tracked = (Vec<f64>, SymmetricTensor, Vec<FixedPoint>);

/// Newton on `log lambda` (active entries) driving every active margin to 1.
/// Pool directions are tracked continuously as the multipliers move.
fn equalize(
    synth: &Synthesizer,
    active: &[usize],
    lambda: Vec<f64>,
    pool: Vec<FixedPoint>,
    assign: &[usize],
    opts: &SynthOptions,
) -> Result<Tracked, NetworkError> {
    let k = active.len();
    let lost = || NetworkError::SynthesisFailed("eigen-direction lost during margin equalization".into());
    let residual = |t: &SymmetricTensor, pts: &[FixedPoint]| -> Result<Vector, NetworkError> {
        let params = synth.build(t, pts, assign)?;
        let q = synth.margins(&params, active);
        Ok(Vector::from_iterator(k, q.iter().map(|q| q - 1.0)))
    };
    let with_log = |base: &[f64], logs: &Vector| -> Vec<f64> {
        let mut out = base.to_vec();
        for (s, &i) in active.iter().enumerate() {
            out[i] = logs[s].exp();
        }
        out
    };

    // Margins scale like c^{-(alpha+1)/(alpha-1)} under lambda -> c lambda: fix the
    // overall level first so Newton starts near the solution.
    let alpha = synth.activation.degree() as f64;
    let mut lambda = lambda;
    let t0 = synth.tensor(&lambda)?;
    let q0 = residual(&t0, &pool)?.add_scalar(1.0);
    let positive: Vec<f64> = q0.iter().filter(|q| **q > 0.0).map(|q| q.ln()).collect();
    if !positive.is_empty() {
        let mean = positive.iter().sum::<f64>() / positive.len() as f64;
        let c = (mean * (alpha - 1.0) / (alpha + 1.0)).exp();
        for &i in active {
            lambda[i] *= c;
        }
    }
    let (mut t, mut pool) = synth.track(&lambda, &pool).ok_or_else(lost)?;

    let mut logs = Vector::from_iterator(k, active.iter().map(|&i| lambda[i].ln()));
    let mut res = residual(&t, &pool)?;
    let h = 1e-6;
    for _ in 0..opts.equalize_iters {
        if res.amax() <= 1e-12 {
            break;
        }
        let mut jac = DenseMatrix::zeros(k, k);
        for s in 0..k {
            let mut up = logs.clone();
            up[s] += h;
            let mut dn = logs.clone();
            dn[s] -= h;
            let (tu, pu) = synth.track(&with_log(&lambda, &up), &pool).ok_or_else(lost)?;
            let (td, pd) = synth.track(&with_log(&lambda, &dn), &pool).ok_or_else(lost)?;
            let col = (residual(&tu, &pu)? - residual(&td, &pd)?) / (2.0 * h);
            jac.set_column(s, &col);
        }
        let mut step = lstsq(&jac, &res, DEFAULT_RANK_TOL);
        let big = step.amax();
        if big > 0.5 {
            step *= 0.5 / big;
        }
        let mut damp = 1.0;
        let mut accepted = false;
        while damp > 1e-4 {
            let cand = &logs - &step * damp;
            let cand_lambda = with_log(&lambda, &cand);
            if let Some((tc, pc)) = synth.track(&cand_lambda, &pool) {
                let rc = residual(&tc, &pc)?;
                if rc.norm() < res.norm() {
                    logs = cand;
                    lambda = cand_lambda;
                    t = tc;
                    pool = pc;
                    res = rc;
                    accepted = true;
                    break;
                }
            }
            damp *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if res.amax() > 1e-9 {
        return Err(NetworkError::SynthesisFailed(format!(
            "margin equalization stalled at spread {:e}",
            res.amax()
        )));
    }
    Ok((lambda, t, pool))
}

/// Approximate KKT certificate of a homogeneous model.
#[derive(Debug, Clone, PartialEq)]
pub struct KktCertificate {
    /// Multipliers for the model rescaled to minimum margin 1; zero off the active set.
    pub multipliers: Vec<f64>,
    pub active_set: Vec<usize>,
    /// `||theta - sum_i lambda_i y_i grad Phi(x_i)|| / ||theta||`.
    pub stationarity_residual: f64,
    /// `max_{i in S} |q_i - 1|` for normalized margins `q`.
    pub margin_violation: f64,
    /// `max_{i in S} lambda_i |q_i - 1|`.
    pub slackness_violation: f64,
    /// Factor applied to `theta` to bring the minimum margin to 1.
    pub scale: f64,
    /// Margins after rescaling.
    pub margins: Vec<f64>,
}

/// Rescales `params` to minimum margin 1, takes the samples within `margin_tol`
/// of that margin as active, and fits multipliers by nonnegative least squares.
pub fn kkt_certify(
    params: &ModelParams,
    dataset: &LabeledDataset,
    margin_tol: f64,
) -> Result<KktCertificate, NetworkError> {
    if !params.activation.is_homogeneous() {
        return Err(NetworkError::NotHomogeneous);
    }
    check_dim(params.input_dim(), dataset.dim())?;
    let signs = dataset.signs()?;
    let n = dataset.len();
    let raw: Vec<f64> = (0..n)
        .map(|i| signs[i] * params.forward(&dataset.sample(i)).expect("dims checked"))
        .collect();
    for (i, &q) in raw.iter().enumerate() {
        if !(q > 0.0) {
            return Err(NetworkError::InfeasibleMargins { index: i, margin: q });
        }
    }
    let q_min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let degree = params.alpha() as f64 + 1.0;
    let scale = q_min.powf(-1.0 / degree);
    let theta = params.scaled(scale);
    let margins: Vec<f64> = raw.iter().map(|q| q / q_min).collect();
    let active_set: Vec<usize> = (0..n).filter(|&i| margins[i] - 1.0 <= margin_tol).collect();

    let flat = theta.to_flat();
    let mut g = DenseMatrix::zeros(flat.len(), active_set.len());
    for (col, &i) in active_set.iter().enumerate() {
        g.set_column(col, &(theta.grad_theta(&dataset.sample(i))? * signs[i]));
    }
    let lam_s = nnls(&g, &flat);
    let resid = (&flat - &g * &lam_s).norm() / flat.norm().max(f64::MIN_POSITIVE);

    let mut multipliers = vec![0.0; n];
    let mut margin_violation = 0.0_f64;
    let mut slackness_violation = 0.0_f64;
    for (col, &i) in active_set.iter().enumerate() {
        multipliers[i] = lam_s[col];
        let gap = (margins[i] - 1.0).abs();
        margin_violation = margin_violation.max(gap);
        slackness_violation = slackness_violation.max(lam_s[col] * gap);
    }
    Ok(KktCertificate {
        multipliers,
        active_set,
        stationarity_residual: resid,
        margin_violation,
        slackness_violation,
        scale,
        margins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DenseMatrix {
        let mut x = DenseMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        for mut row in x.row_iter_mut() {
            let norm = row.norm();
            row /= norm;
        }
        x
    }

    fn dataset(seed: u64, n: usize, d: usize) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = unit_rows(&mut rng, n, d);
        let labels = (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
        LabeledDataset::new(x, labels, true).unwrap()
    }

    /// Orthonormal samples, all labeled +1: every multiplier pattern admits a
    /// point with all margins equal.
    fn positive_dataset(seed: u64, n: usize, d: usize) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = DenseMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q();
        let x = q.transpose().rows(0, n).into_owned();
        LabeledDataset::new(x, vec![1; n], true).unwrap()
    }

    fn stationarity(params: &ModelParams, ds: &LabeledDataset, lambda: &[f64]) -> f64 {
        let theta = params.to_flat();
        let mut sum = Vector::zeros(theta.len());
        for i in 0..ds.len() {
            sum += params.grad_theta(&ds.sample(i)).unwrap() * (lambda[i] * ds.sign(i).unwrap());
        }
        (theta - sum).norm() / params.to_flat().norm()
    }

    #[test]
    fn synthesized_params_are_stationary() {
        let ds = dataset(1, 3, 4);
        let fx = kkt_synthesize(&ds, &[1.0, 0.7, 1.3], &ActivationPoly::power(3), 30, 5, SynthOptions::default())
            .unwrap();
        assert_eq!(fx.multipliers, vec![1.0, 0.7, 1.3]);
        assert!(stationarity(&fx.params, &ds, &fx.multipliers) <= 1e-10);
        let t = ds.kkt_tensor(&fx.multipliers, 3).unwrap();
        for j in 0..30 {
            let w = fx.params.neuron(j);
            let f = t.contract_vector(&w).unwrap();
            let lhs = &f * (3.0 * fx.params.a[j]);
            assert!((lhs - &w).norm() <= 1e-10 * w.norm(), "neuron {j}");
            assert!((fx.params.a[j] - t.diagonal_poly(&w).unwrap()).abs() <= 1e-10 * fx.params.a[j].abs());
        }
    }

    #[test]
    fn zero_multipliers_give_zero_params() {
        let ds = dataset(2, 3, 4);
        let fx = kkt_synthesize(&ds, &[0.0; 3], &ActivationPoly::power(3), 5, 0, SynthOptions::default()).unwrap();
        assert_eq!(fx.params.to_flat().amax(), 0.0);
    }

    #[test]
    fn synthesis_rejects_bad_inputs() {
        let ds = dataset(3, 2, 3);
        let act = ActivationPoly::new(vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(
            kkt_synthesize(&ds, &[1.0, 1.0], &act, 4, 0, SynthOptions::default()).unwrap_err(),
            NetworkError::NotHomogeneous
        );
        assert!(kkt_synthesize(&ds, &[1.0, -1.0], &ActivationPoly::power(3), 4, 0, SynthOptions::default()).is_err());
    }

    fn equalized() -> SynthOptions {
        SynthOptions {
            equalize_margins: true,
            ..Default::default()
        }
    }

    #[test]
    fn equalized_margins_sit_on_one() {
        let ds = positive_dataset(7, 3, 5);
        let fx = kkt_synthesize(&ds, &[1.0, 0.5, 2.0], &ActivationPoly::power(3), 24, 7, equalized()).unwrap();
        assert!(fx.margin_spread <= 1e-9);
        assert!(stationarity(&fx.params, &ds, &fx.multipliers) <= 1e-10);
    }

    #[test]
    fn certify_recovers_planted_multipliers() {
        for seed in 0..5 {
            let ds = positive_dataset(10 + seed, 3, 5);
            let fx = kkt_synthesize(&ds, &[1.0, 0.5, 2.0], &ActivationPoly::power(3), 24, seed, equalized())
                .unwrap();
            let cert = kkt_certify(&fx.params, &ds, 1e-3).unwrap();
            assert_eq!(cert.active_set, vec![0, 1, 2]);
            assert!(cert.stationarity_residual <= 1e-8, "{}", cert.stationarity_residual);
            for i in 0..3 {
                let rel = (cert.multipliers[i] - fx.multipliers[i]).abs() / fx.multipliers[i];
                assert!(rel <= 1e-6, "seed {seed} i {i} rel {rel}");
            }
        }
    }

    #[test]
    fn quadratic_synthesis() {
        let ds = dataset(4, 2, 3);
        let fx = kkt_synthesize(&ds, &[1.0, 1.0], &ActivationPoly::power(2), 6, 1, SynthOptions::default()).unwrap();
        assert!(stationarity(&fx.params, &ds, &fx.multipliers) <= 1e-10);
    }

    #[test]
    fn certify_single_sample() {
        let ds = LabeledDataset::new(DenseMatrix::from_row_slice(1, 2, &[1.0, 0.0]), vec![1], true).unwrap();
        let p = ModelParams::new(
            Vector::from_vec(vec![1.0]),
            DenseMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            ActivationPoly::power(3),
        )
        .unwrap();
        let cert = kkt_certify(&p, &ds, 1e-3).unwrap();
        assert_eq!(cert.active_set, vec![0]);
        assert!(cert.multipliers[0] > 0.0);
    }

    #[test]
    fn certify_rejects_negative_margin() {
        let ds = LabeledDataset::new(DenseMatrix::from_row_slice(1, 2, &[1.0, 0.0]), vec![-1], true).unwrap();
        let p = ModelParams::new(
            Vector::from_vec(vec![1.0]),
            DenseMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            ActivationPoly::power(3),
        )
        .unwrap();
        assert!(matches!(
            kkt_certify(&p, &ds, 1e-3),
            Err(NetworkError::InfeasibleMargins { index: 0, .. })
        ));
    }
}
