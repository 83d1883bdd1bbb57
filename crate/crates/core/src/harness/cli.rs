//! `recon` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use super::config::{initial_candidates, random_init};
use super::{
    candidate_points, component_points, demo_nonidentifiable, ensure_dir, gen_synthetic, match_components, read_dataset_csv,
    read_matrix_csv, run_experiment, synthesize_checkpoint, write_dataset_csv, write_json, write_matrix_csv, write_run_meta, write_text,
    ExperimentConfig, HarnessError, IdentifySpec, TrainSpec,
};
use crate::identify::{recover_from_params, InterpolationMode};
use crate::network::{kkt_certify, train_to_margin, ActivationPoly, Checkpoint, ModelParams, StepSchedule};
use crate::numkernels::{DenseMatrix, Vector};
use crate::objective::{CandidateSet, LossWeights, ReconMap};
use crate::splitter::{planted_merged_instance, run, SplitConfig};

/// Environment variable that overrides the default output directory.
pub const OUT_DIR_ENV: &str = "RECON_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "recon", version, about = "Reconstruct training samples from network parameters")]
struct Cli {
    /// Output directory; falls back to $RECON_OUT_DIR, then `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Random samples on the sphere with balanced labels.
    GenData(GenDataArgs),
    /// Gradient descent to margin stabilization, or an exact KKT point with `--synthesize`.
    Train(TrainArgs),
    /// KKT certificate of a checkpoint on a dataset.
    Certify(CertifyArgs),
    /// Tensor identification of the samples from a checkpoint.
    Identify(IdentifyArgs),
    /// Splitting optimizer on the reconstruction objective.
    Reconstruct(ReconstructArgs),
    /// Match recovered points against a dataset.
    Evaluate(EvaluateArgs),
    /// Two datasets that no network of degree 1 or 2 can tell apart.
    DemoNonidentifiable(DemoArgs),
    /// Aggregate run logs into one CSV.
    Report(ReportArgs),
    /// Full pipeline from a JSON config.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    seed: u64,
    /// Keep the Gaussian rows unnormalized.
    #[arg(long)]
    no_unit_norm: bool,
    /// Re-draw until the rows are linearly independent.
    #[arg(long)]
    independent: bool,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 3)]
    alpha: usize,
    /// Comma-separated `c_0..c_alpha`; `t^alpha` when absent.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    activation: Option<Vec<f64>>,
    #[arg(long)]
    seed: u64,
    /// Exact KKT point for random multipliers instead of training.
    #[arg(long)]
    synthesize: bool,
    #[arg(long, default_value_t = TrainSpec::default().init_scale)]
    init_scale: f64,
    #[arg(long, default_value_t = TrainSpec::default().step)]
    step: f64,
    #[arg(long, default_value_t = TrainSpec::default().max_iters)]
    max_iters: usize,
    #[arg(long, value_parser = parse_schedule, default_value = "scale-invariant")]
    #[serde(skip)]
    schedule: StepSchedule,
}

#[derive(Debug, Args, Serialize)]
struct CertifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1e-2)]
    margin_tol: f64,
}

#[derive(Debug, Args, Serialize)]
struct IdentifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    expected_rank: Option<usize>,
    #[arg(long)]
    subspace_dim: Option<usize>,
    #[arg(long, value_parser = parse_mode, default_value = "auto")]
    #[serde(skip)]
    mode: InterpolationMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset to match the recovered components against.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    threshold: f64,
}

#[derive(Debug, Args, Serialize)]
struct ReconstructArgs {
    /// Checkpoint defining the KKT-binary map; the target is its parameter vector.
    #[arg(long, conflicts_with = "planted")]
    checkpoint: Option<PathBuf>,
    /// Planted instance with this many mirrored neuron pairs instead of a checkpoint.
    #[arg(long)]
    planted: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    #[arg(long, default_value_t = 4)]
    candidates: usize,
    #[arg(long, default_value_t = 1.0)]
    init_lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file with splitter settings; flags below override it.
    #[arg(long)]
    split_config: Option<PathBuf>,
    #[arg(long)]
    no_split: bool,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    eps_h: Option<f64>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    threshold: f64,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    /// `candidates.json` or a components CSV.
    #[arg(long)]
    recovered: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Cosine level counted as a successful match.
    #[arg(long, default_value_t = 0.95)]
    threshold: f64,
}

#[derive(Debug, Args, Serialize)]
struct DemoArgs {
    #[arg(long)]
    alpha: usize,
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct ReportArgs {
    /// `run_log.jsonl` files.
    #[arg(required = true)]
    logs: Vec<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Runs seeds `seed .. seed + seeds` of the config.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Worker threads for independent seeds.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

fn parse_schedule(s: &str) -> Result<StepSchedule, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown schedule `{s}`"))
}

fn parse_mode(s: &str) -> Result<InterpolationMode, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown mode `{s}`"))
}

/// Parses `argv` (including the program name), runs the command and returns the
/// exit code. Failures print a JSON error object on stderr.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = HarnessError::config("argv", e.render().to_string().trim());
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn dispatch(cli: Cli) -> Result<serde_json::Value, HarnessError> {
    let explicit = cli.out.clone();
    let out = out_dir(cli.out);
    match cli.command {
        Command::GenData(a) => gen_data(&a, &out),
        Command::Train(a) => train(&a, &out),
        Command::Certify(a) => certify(&a, &out),
        Command::Identify(a) => identify(&a, &out),
        Command::Reconstruct(a) => reconstruct(&a, &out),
        Command::Evaluate(a) => evaluate(&a, &out),
        Command::DemoNonidentifiable(a) => demo(&a, &out),
        Command::Report(a) => report(&a, &out),
        Command::Experiment(a) => experiment(&a, explicit),
    }
}

fn begin(out: &Path, command: &str, args: &impl Serialize, seed: Option<u64>) -> Result<(), HarnessError> {
    ensure_dir(out)?;
    write_run_meta(out, command, serde_json::to_value(args).expect("args serialize"), seed)
}

fn gen_data(a: &GenDataArgs, out: &Path) -> Result<serde_json::Value, HarnessError> {
    begin(out, "gen-data", a, Some(a.seed))?;
    let ds = gen_synthetic(a.n, a.d, a.seed, !a.no_unit_norm, a.independent)?;
    let path = out.join("dataset.csv");
    write_dataset_csv(&path, &ds)?;
    Ok(json!({ "dataset": path, "n": ds.len(), "d": ds.dim(), "rank": ds.rank() }))
}

fn load_checkpoint(path: &Path) -> Result<ModelParams, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(ModelParams::from_checkpoint(&ck)?)
}

fn train(a: &TrainArgs, out: &Path) -> Result<serde_json::Value, HarnessError> {
    begin(out, "train", a, Some(a.seed))?;
    let ds = read_dataset_csv(&a.data)?;
    let act = match &a.activation {
        Some(c) => ActivationPoly::new(c.clone())?,
        None => ActivationPoly::power(a.alpha),
    };
    if act.degree() != a.alpha {
        return Err(HarnessError::config("activation", "degree differs from alpha"));
    }
    let (params, meta) = if a.synthesize {
        let (p, lambda) = synthesize_checkpoint(&ds, a.m, &act, a.seed)?;
        (p, json!({ "source": "synthesize", "multipliers": lambda }))
    } else {
        let spec = TrainSpec {
            init_scale: a.init_scale,
            step: a.step,
            max_iters: a.max_iters,
            schedule: a.schedule,
            ..Default::default()
        };
        let init = random_init(a.m, ds.dim(), &act, spec.init_scale, a.seed)?;
        let (p, log) = train_to_margin(&ds, &init, &spec.train_config())?;
        let lines: String = log
            .records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect();
        write_text(&out.join("train_log.jsonl"), &lines)?;
        (p, json!({ "source": "train", "iterations": log.iterations, "stop": log.stop }))
    };
    let path = out.join("checkpoint.json");
    write_json(&path, &serde_json::to_value(params.to_checkpoint(Some(a.seed), meta.clone())).expect("checkpoint"))?;
    Ok(json!({ "checkpoint": path, "meta": meta }))
}

fn certify(a: &CertifyArgs, out: &Path) -> Result<serde_json::Value, HarnessError> {
    begin(out, "certify", a, None)?;
    let params = load_checkpoint(&a.checkpoint)?;
    let ds = read_dataset_csv(&a.data)?;
    let c = kkt_certify(&params.homogenized(), &ds, a.margin_tol)?;
    let v = json!({
        "multipliers": c.multipliers,
        "active_set": c.active_set,
        "stationarity_residual": c.stationarity_residual,
        "margin_violation": c.margin_violation,
        "slackness_violation": c.slackness_violation,
        "scale": c.scale,
        "margins": c.margins,
    });
    write_json(&out.join("certificate.json"), &v)?;
    Ok(json!({ "stationarity_residual": c.stationarity_residual, "active_set": c.active_set }))
}

fn identify(a: &IdentifyArgs, out: &Path) -> Result<serde_json::Value, HarnessError> {
    begin(out, "identify", a, Some(a.seed))?;
    let params = load_checkpoint(&a.checkpoint)?;
    let spec = IdentifySpec {
        expected_rank: a.expected_rank,
        subspace_dim: a.subspace_dim,
        mode: a.mode,
    };
    let rep = recover_from_params(&params, &spec.options(a.seed))?;
    write_json(&out.join("identify_report.json"), &rep.to_json())?;
    let d = params.input_dim();
    let header: Vec<String> = (0..d).map(|k| format!("x{k}")).chain(["b".to_string()]).collect();
    let rows = DenseMatrix::from_fn(rep.components.len(), d + 1, |i, k| {
        let c = &rep.components[i];
        if k < d {
            c.direction[k]
        } else {
            c.coefficient
        }
    });
    write_matrix_csv(&out.join("components.csv"), &header, &rows)?;
    let mut summary = json!({ "components": rep.components.len(), "method": rep.method });
    if let Some(truth) = &a.truth {
        let ds = read_dataset_csv(truth)?;
        let m = match_components(&component_points(&rep.components), &ds, a.threshold)?;
        write_json(&out.join("match_report.json"), &serde_json::to_value(&m).expect("report"))?;
        summary["mean_l2"] = json!(m.mean_l2);
    }
    Ok(summary)
}

fn split_config(a: &ReconstructArgs) -> Result<SplitConfig, HarnessError> {
    let mut cfg = match &a.split_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| HarnessError::Config {
                field: "split_config".into(),
                message: format!("{}: {e}", p.display()),
            })?;
            serde_json::from_str(&text).map_err(|e| HarnessError::config("split_config", e.to_string()))?
        }
        None => SplitConfig::default(),
    };
    cfg.seed = a.seed;
    cfg.no_split |= a.no_split;
    if let Some(v) = a.max_iters {
        cfg.max_iters = v;
    }
    if let Some(v) = a.eps {
        cfg.eps = v;
    }
    if let Some(v) = a.eps_h {
        cfg.eps_h = v;
    }
    cfg.validate().map_err(|e| HarnessError::config("split_config", e.to_string()))?;
    Ok(cfg)
}

fn reconstruct(a: &ReconstructArgs, out: &Path) -> Result<serde_json::Value, HarnessError> {
    begin(out, "reconstruct", a, Some(a.seed))?;
    let cfg = split_config(a)?;
    let (map, set) = match (&a.checkpoint, a.planted) {
        (Some(p), None) => {
            let map = ReconMap::KktBinary { model: load_checkpoint(p)? };
            let set = initial_candidates(map.input_dim(), a.candidates, a.init_lambda, map.theta(), a.seed)?;
            (map, set)
        }
        (None, Some(pairs)) => {
            let inst = planted_merged_instance(pairs, a.delta, a.seed)?;
            (inst.map, inst.merged)
        }
        _ => return Err(HarnessError::config("checkpoint", "give exactly one of --checkpoint and --planted")),
    };
    let (fin, log) = run(set, &map, &LossWeights::default(), &cfg)?;
    write_text(&out.join("run_log.jsonl"), &log.to_json_lines())?;
    write_json(&out.join("candidates.json"), &fin.to_json())?;
    let mut summary = json!({
        "final_loss": log.final_loss,
        "initial_loss": log.initial_loss,
        "splits": log.splits.len(),
        "iterations": log.iterations,
        "termination": log.termination,
        "candidates": fin.len(),
    });
    if let Some(truth) = &a.truth {
        let ds = read_dataset_csv(truth)?;
        let m = match_components(&candidate_points(&fin), &ds, a.threshold)?;
        write_json(&out.join("match_report.json"), &serde_json::to_value(&m).expect("report"))?;
        summary["mean_l2"] = json!(m.mean_l2);
    }
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn read_recovered(path: &Path, d: usize) -> Result<Vec<Vector>, HarnessError> {
    let parse_err = |message: String| HarnessError::Parse {
        path: path.display().to_string(),
        message,
    };
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
        let set = CandidateSet::from_json(&v, None).map_err(|e| parse_err(e.to_string()))?;
        return Ok(candidate_points(&set));
    }
    let (header, m) = read_matrix_csv(path)?;
    let cols: Vec<usize> = (0..header.len()).filter(|&k| header[k].starts_with('x')).collect();
    if cols.len() != d {
        return Err(parse_err(format!("expected {d} coordinate columns, found {}", cols.len())));
    }
    Ok(m.row_iter().map(|r| Vector::from_iterator(d, cols.iter().map(|&k| r[k]))).collect())
}

fn evaluate(a: &EvaluateArgs, out: &Path) -> Result<serde_json::Value, HarnessError> {
    begin(out, "evaluate", a, None)?;
    let ds = read_dataset_csv(&a.truth)?;
    let rec = read_recovered(&a.recovered, ds.dim())?;
    let m = match_components(&rec, &ds, a.threshold)?;
    write_json(&out.join("match_report.json"), &serde_json::to_value(&m).expect("report"))?;
    Ok(json!({ "mean_l2": m.mean_l2, "mean_cosine": m.mean_cosine, "frac_above": m.frac_above, "exact": m.exact }))
}

fn demo(a: &DemoArgs, out: &Path) -> Result<serde_json::Value, HarnessError> {
    begin(out, "demo-nonidentifiable", a, Some(a.seed))?;
    let r = demo_nonidentifiable(a.alpha, a.d, a.m, a.seed)?;
    write_json(&out.join("demo.json"), &serde_json::to_value(&r).expect("demo"))?;
    if !r.holds {
        return Err(HarnessError::Check(format!("residual gap {:e} above tolerance", r.residual_gap)));
    }
    Ok(json!({ "alpha": r.alpha, "residual_gap": r.residual_gap, "holds": r.holds }))
}

fn report(a: &ReportArgs, out: &Path) -> Result<serde_json::Value, HarnessError> {
    begin(out, "report", a, None)?;
    let mut rows = String::from("run,iterations,splits,initial_loss,final_loss,grad_x_norm,min_lambda,termination\n");
    for path in &a.logs {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut splits = 0usize;
        let mut summary = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| HarnessError::Parse {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            match v["type"].as_str() {
                Some("split") => splits += 1,
                Some("summary") => summary = Some(v),
                _ => {}
            }
        }
        let s = summary.ok_or_else(|| HarnessError::Parse {
            path: path.display().to_string(),
            message: "no summary line".into(),
        })?;
        let num = |v: &serde_json::Value| v.as_f64().map_or_else(String::new, super::fmt_f64);
        rows.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            path.display(),
            s["iterations"],
            splits,
            num(&s["initial_loss"]),
            num(&s["final_loss"]),
            num(&s["certificate"]["grad_x_norm"]),
            num(&s["certificate"]["min_lambda"]),
            s["termination"].as_str().unwrap_or(""),
        ));
    }
    let path = out.join("report.csv");
    write_text(&path, &rows)?;
    Ok(json!({ "report": path, "runs": a.logs.len() }))
}

fn experiment(a: &ExperimentArgs, explicit_out: Option<PathBuf>) -> Result<serde_json::Value, HarnessError> {
    let base = ExperimentConfig::load(&a.config)?;
    if a.seeds == 0 || a.parallel == 0 {
        return Err(HarnessError::config("seeds", "seeds and parallel must be >= 1"));
    }
    let out = explicit_out
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| base.output_dir.clone());
    begin(&out, "experiment", &json!({ "args": a, "config": base }), Some(base.seed))?;
    let seeds: Vec<u64> = (0..a.seeds).map(|k| base.seed + k).collect();
    let results: Mutex<Vec<Option<Result<serde_json::Value, HarnessError>>>> = Mutex::new((0..seeds.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..a.parallel.min(seeds.len()) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= seeds.len() {
                    break;
                }
                let cfg = ExperimentConfig {
                    seed: seeds[k],
                    ..base.clone()
                };
                let dir = out.join(format!("seed_{}", seeds[k]));
                let r = run_experiment(&cfg, &dir).map(|s| serde_json::to_value(s).expect("summary"));
                results.lock().expect("no poisoned workers")[k] = Some(r);
            });
        }
    });
    let mut summaries = Vec::with_capacity(seeds.len());
    for r in results.into_inner().expect("no poisoned workers") {
        summaries.push(r.expect("every seed ran")?);
    }
    write_json(&out.join("summaries.json"), &json!(summaries))?;
    Ok(json!({ "runs": summaries.len(), "out": out }))
}
