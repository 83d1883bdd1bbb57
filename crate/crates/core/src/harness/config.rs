//! Reproducible end-to-end experiments described by a JSON config.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    candidate_points, component_points, ensure_dir, gen_synthetic, match_components, read_dataset_csv, write_dataset_csv, write_json,
    write_matrix_csv, write_text, HarnessError, MatchReport,
};
use crate::identify::{recover_from_params, IdentifyOptions, InterpolationMode};
use crate::network::{
    kkt_certify, kkt_synthesize, train_to_margin, ActivationPoly, LabeledDataset, ModelParams, StepSchedule, SynthOptions, TrainConfig,
};
use crate::numkernels::{DenseMatrix, Vector};
use crate::objective::{CandidateSet, LossWeights, ReconMap};
use crate::splitter::{run, SplitConfig, Termination};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        n: usize,
        d: usize,
        #[serde(default = "yes")]
        unit_norm: bool,
        #[serde(default)]
        independent: bool,
    },
    File {
        path: PathBuf,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub m: usize,
    pub alpha: usize,
    /// `c_0..c_alpha`; `t^alpha` when absent.
    #[serde(default)]
    pub activation_coeffs: Option<Vec<f64>>,
}

impl ModelSpec {
    pub fn activation(&self) -> Result<ActivationPoly, HarnessError> {
        let act = match &self.activation_coeffs {
            Some(c) => ActivationPoly::new(c.clone())?,
            None => ActivationPoly::power(self.alpha),
        };
        if act.degree() != self.alpha {
            return Err(HarnessError::config("model.activation_coeffs", "degree differs from alpha"));
        }
        Ok(act)
    }
}

/// Where the network parameters come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ParamSource {
    /// Exact KKT point for random multipliers in `[0.5, 1.5]`.
    #[default]
    Synthesize,
    /// Gradient descent on the exponential loss.
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    /// Standard deviation of the Gaussian initialization.
    pub init_scale: f64,
    pub step: f64,
    pub max_iters: usize,
    pub schedule: StepSchedule,
    pub stab_window: usize,
    pub stab_tol: f64,
    /// Margin slack defining the active set when certifying.
    pub margin_tol: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            init_scale: 0.3,
            step: 0.05,
            max_iters: 1_000_000,
            schedule: StepSchedule::ScaleInvariant,
            stab_window: 1000,
            stab_tol: 1e-6,
            margin_tol: 1e-2,
        }
    }
}

impl TrainSpec {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            step: self.step,
            max_iters: self.max_iters,
            schedule: self.schedule,
            stab_window: self.stab_window,
            stab_tol: self.stab_tol,
            log_every: self.stab_window.max(1),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifySpec {
    pub expected_rank: Option<usize>,
    pub subspace_dim: Option<usize>,
    pub mode: InterpolationMode,
}

impl IdentifySpec {
    pub fn options(&self, seed: u64) -> IdentifyOptions {
        IdentifyOptions {
            expected_rank: self.expected_rank,
            subspace_dim: self.subspace_dim,
            mode: self.mode,
            seed,
            ..Default::default()
        }
    }
}

/// Splitting reconstruction on the KKT-binary map of the obtained parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructSpec {
    /// Initial candidates, drawn on the sphere with alternating labels.
    pub candidates: usize,
    #[serde(default = "one")]
    pub init_lambda: f64,
    #[serde(default)]
    pub config: SplitConfig,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub source: ParamSource,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub identify: IdentifySpec,
    #[serde(default)]
    pub reconstruct: Option<ReconstructSpec>,
    /// Cosine threshold for the match reports.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_threshold() -> f64 {
    0.95
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Parses and validates; relative dataset paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config {
            field: "config".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        let mut cfg = Self::from_json_str(&text)?;
        if let DatasetSpec::File { path: p } = &mut cfg.dataset {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            HarnessError::Config {
                field: field_from_serde(&msg).unwrap_or_else(|| "config".into()),
                message: msg,
            }
        })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        match &self.dataset {
            DatasetSpec::Synthetic { n, d, independent, .. } => {
                if *n == 0 || *d == 0 {
                    return Err(HarnessError::config("dataset.n", "n and d must be >= 1"));
                }
                if *independent && n > d {
                    return Err(HarnessError::config("dataset.independent", "needs n <= d"));
                }
            }
            DatasetSpec::File { path } => {
                if !path.is_file() {
                    return Err(HarnessError::config("dataset.path", format!("{} does not exist", path.display())));
                }
            }
        }
        if self.model.m == 0 || self.model.alpha == 0 {
            return Err(HarnessError::config("model.m", "m and alpha must be >= 1"));
        }
        self.model.activation()?;
        if let Some(r) = &self.reconstruct {
            if r.candidates == 0 {
                return Err(HarnessError::config("reconstruct.candidates", "must be >= 1"));
            }
            r.config.validate().map_err(|e| HarnessError::config("reconstruct.config", e.to_string()))?;
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(HarnessError::config("threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<LabeledDataset, HarnessError> {
        match &self.dataset {
            DatasetSpec::Synthetic {
                n,
                d,
                unit_norm,
                independent,
            } => gen_synthetic(*n, *d, self.seed, *unit_norm, *independent),
            DatasetSpec::File { path } => read_dataset_csv(path),
        }
    }
}

fn field_from_serde(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_owned())
}

/// Exact KKT parameters for `ds` with multipliers drawn uniformly from `[0.5, 1.5]`.
pub fn synthesize_checkpoint(
    ds: &LabeledDataset,
    m: usize,
    activation: &ActivationPoly,
    seed: u64,
) -> Result<(ModelParams, Vec<f64>), HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda: Vec<f64> = (0..ds.len()).map(|_| rng.random_range(0.5..1.5)).collect();
    let fx = kkt_synthesize(ds, &lambda, activation, m, seed, SynthOptions::default())?;
    Ok((fx.params, fx.multipliers))
}

pub fn random_init(m: usize, d: usize, activation: &ActivationPoly, scale: f64, seed: u64) -> Result<ModelParams, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Vector::from_fn(m, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    let w = DenseMatrix::from_fn(m, d, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    Ok(ModelParams::new(a, w, activation.clone())?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub source: ParamSource,
    pub kkt_residual: Option<f64>,
    /// `None` when identification failed; the error is in `identify_error`.
    pub identify: Option<MatchReport>,
    pub identify_error: Option<String>,
    pub reconstruct: Option<MatchReport>,
    pub reconstruct_loss: Option<f64>,
    pub reconstruct_termination: Option<Termination>,
}

/// Runs dataset, parameters, identification and optional splitting
/// reconstruction, writing every artifact into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentSummary, HarnessError> {
    cfg.validate()?;
    ensure_dir(out)?;
    let ds = cfg.load_dataset()?;
    write_dataset_csv(&out.join("dataset.csv"), &ds)?;
    let act = cfg.model.activation()?;

    let (params, kkt_residual, meta) = match cfg.source {
        ParamSource::Synthesize => {
            let (p, lambda) = synthesize_checkpoint(&ds, cfg.model.m, &act, cfg.seed)?;
            (p, None, json!({ "source": "synthesize", "multipliers": lambda }))
        }
        ParamSource::Train => {
            let init = random_init(cfg.model.m, ds.dim(), &act, cfg.train.init_scale, cfg.seed)?;
            let (p, log) = train_to_margin(&ds, &init, &cfg.train.train_config())?;
            let lines: String = log
                .records
                .iter()
                .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
                .collect();
            write_text(&out.join("train_log.jsonl"), &lines)?;
            let cert = kkt_certify(&p, &ds, cfg.train.margin_tol)?;
            let meta = json!({
                "source": "train",
                "iterations": log.iterations,
                "stop": log.stop,
                "multipliers": cert.multipliers,
                "stationarity_residual": cert.stationarity_residual,
            });
            (p, Some(cert.stationarity_residual), meta)
        }
    };
    write_json(&out.join("checkpoint.json"), &serde_json::to_value(params.to_checkpoint(Some(cfg.seed), meta)).expect("checkpoint"))?;

    let header: Vec<String> = (0..ds.dim()).map(|k| format!("x{k}")).chain(["b".to_string()]).collect();
    let (identify, identify_error) = match recover_from_params(&params, &cfg.identify.options(cfg.seed)) {
        Ok(rep) => {
            write_json(&out.join("identify_report.json"), &rep.to_json())?;
            let rows = DenseMatrix::from_fn(rep.components.len(), ds.dim() + 1, |i, k| {
                let c = &rep.components[i];
                if k < ds.dim() {
                    c.direction[k]
                } else {
                    c.coefficient
                }
            });
            write_matrix_csv(&out.join("components.csv"), &header, &rows)?;
            let report = match_components(&component_points(&rep.components), &ds, cfg.threshold)?;
            write_json(&out.join("match_report.json"), &serde_json::to_value(&report).expect("report"))?;
            (Some(report), None)
        }
        Err(e) => {
            let msg = e.to_string();
            write_json(&out.join("identify_error.json"), &HarnessError::from(e).to_json())?;
            (None, Some(msg))
        }
    };

    let (mut reconstruct, mut reconstruct_loss, mut reconstruct_termination) = (None, None, None);
    if let Some(spec) = &cfg.reconstruct {
        let map = ReconMap::KktBinary { model: params.clone() };
        let set = initial_candidates(ds.dim(), spec.candidates, spec.init_lambda, map.theta(), cfg.seed)?;
        let (fin, log) = run(set, &map, &LossWeights::default(), &spec.config)?;
        write_text(&out.join("run_log.jsonl"), &log.to_json_lines())?;
        write_json(&out.join("candidates.json"), &fin.to_json())?;
        let report = match_components(&candidate_points(&fin), &ds, cfg.threshold)?;
        write_json(&out.join("reconstruct_match.json"), &serde_json::to_value(&report).expect("report"))?;
        reconstruct = Some(report);
        reconstruct_loss = Some(log.final_loss);
        reconstruct_termination = Some(log.termination);
    }

    let summary = ExperimentSummary {
        seed: cfg.seed,
        n: ds.len(),
        d: ds.dim(),
        source: cfg.source,
        kkt_residual,
        identify,
        identify_error,
        reconstruct,
        reconstruct_loss,
        reconstruct_termination,
    };
    write_json(&out.join("summary.json"), &serde_json::to_value(&summary).expect("summary"))?;
    Ok(summary)
}

/// `k` points on the unit sphere with alternating labels and equal multipliers.
pub fn initial_candidates(d: usize, k: usize, lambda: f64, target: Vector, seed: u64) -> Result<CandidateSet, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let xs: Vec<Vector> = (0..k)
        .map(|_| {
            let v = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let n = v.norm();
            v / n
        })
        .collect();
    let labels = (0..k).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
    Ok(CandidateSet::from_points(xs, vec![lambda; k], labels, target)?)
}
