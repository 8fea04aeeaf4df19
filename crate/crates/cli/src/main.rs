mod csvio;
mod manifest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use weakode::mc::{
    generate_data, resolve_model, EstimatorConfig, EstimatorFailure, EstimatorKind, EstimatorOutput, Experiment, ExperimentConfig, MCReport, McError, ModelConfig, NlsConfig,
    OcConfig, Sampling, TsConfig, CONFIG_VERSION,
};
use weakode::models::{ModelError, MODEL_NAMES};

use crate::manifest::{digest_file, RunManifest};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "WEAKODE_THREADS";

#[derive(Parser)]
#[command(name = "weakode", version, about = "Parameter estimation for ODE/DDE models from orthogonal conditions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate noisy observations of a registered model and write them as CSV.
    Simulate(SimulateArgs),
    /// Smooth a data file and estimate the parameters with one method.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo comparison described by a config file.
    Mc(McArgs),
    /// List the registered models with their default parameters.
    Models,
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// Experiment config supplying the model and data sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    params: Option<Vec<f64>>,
    /// Initial state, or the constant history of a delay model.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    initial: Option<Vec<f64>>,
    /// Observation window as `start,end`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    interval: Option<Vec<f64>>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Scale sigma by the mean absolute trajectory value.
    #[arg(long)]
    relative_noise: bool,
    #[arg(long, value_enum)]
    sampling: Option<SamplingArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplingArg {
    Equispaced,
    Uniform,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Oc,
    Ts,
    Nls,
}

#[derive(clap::Args)]
struct EstimateArgs {
    /// Observation CSV with header `t,y1,...,yd`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    method: Method,
    /// Experiment config; the first estimator of the chosen method is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model name, overriding the config.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON report; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Manifest path; defaults to the report path with `.manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(clap::Args)]
struct McArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for summary.json, summary.tsv, records.tsv and the manifest.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

const EXIT_IO: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_ESTIMATOR: u8 = 4;
const EXIT_BLOW_UP: u8 = 5;

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self { code, error: error.into() }
    }
}

trait OrExit<T> {
    fn or_exit(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn or_exit(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(code, e))
    }
}

fn mc_code(e: &McError) -> u8 {
    match e {
        McError::BlowUp(_) => EXIT_BLOW_UP,
        McError::Config(_) | McError::Model(_) | McError::Conditions(_) | McError::Basis(_) => EXIT_CONFIG,
        McError::Smoother(_) => EXIT_DATA,
        McError::Ode(_) => EXIT_ESTIMATOR,
    }
}

fn mc_failure(e: McError) -> Failure {
    Failure::new(mc_code(&e), e)
}

fn init_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().map_err(|_| Failure::new(EXIT_CONFIG, anyhow::anyhow!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(Failure::new(EXIT_CONFIG, anyhow::anyhow!("{THREADS_ENV} must be positive")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().or_exit(EXIT_CONFIG)?;
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).or_exit(EXIT_IO)?;
    let cfg: ExperimentConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display())).or_exit(EXIT_CONFIG)?;
    if cfg.version != CONFIG_VERSION {
        return Err(Failure::new(
            EXIT_CONFIG,
            anyhow::anyhow!("{}: unsupported config version {} (expected {CONFIG_VERSION})", path.display(), cfg.version),
        ));
    }
    Ok(cfg)
}

fn bare_config(model: &str) -> ExperimentConfig {
    ExperimentConfig {
        version: CONFIG_VERSION,
        model: ModelConfig {
            name: model.into(),
            params: None,
            initial: None,
            interval: None,
        },
        data: Default::default(),
        smoother: Default::default(),
        estimators: Vec::new(),
        mc: Default::default(),
        solver: Default::default(),
    }
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, bytes).with_context(|| format!("writing {}", p.display())).or_exit(EXIT_IO),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes).or_exit(EXIT_IO)
        }
    }
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut cfg = match (&args.config, &args.model) {
        (Some(p), _) => load_config(p)?,
        (None, Some(m)) => bare_config(m),
        (None, None) => return Err(Failure::new(EXIT_CONFIG, anyhow::anyhow!("give --model or --config"))),
    };
    if let Some(m) = &args.model {
        cfg.model.name = m.clone();
    }
    if let Some(p) = args.params {
        cfg.model.params = Some(p);
    }
    if let Some(x0) = args.initial {
        cfg.model.initial = Some(x0);
    }
    if let Some(iv) = args.interval {
        let [a, b] = iv[..] else {
            return Err(Failure::new(EXIT_CONFIG, anyhow::anyhow!("--interval takes `start,end`")));
        };
        cfg.model.interval = Some([a, b]);
    }
    if let Some(n) = args.n {
        cfg.data.n = n;
    }
    if let Some(s) = args.sigma {
        cfg.data.sigma = s;
    }
    if args.relative_noise {
        cfg.data.relative_noise = true;
    }
    if let Some(s) = args.sampling {
        cfg.data.sampling = match s {
            SamplingArg::Equispaced => Sampling::Equispaced,
            SamplingArg::Uniform => Sampling::Uniform,
        };
    }
    let model = resolve_model(&cfg.model).map_err(mc_failure)?;
    let d = &cfg.data;
    let obs = generate_data(&model, &model.true_params, d.n, d.sigma, d.relative_noise, d.sampling, args.seed, 0, &cfg.solver).map_err(|e| {
        if let McError::BlowUp(t) = e {
            eprintln!("blow-up: the {} trajectory at θ = {:?} exceeds the bound before t = {t}", model.name, model.true_params);
        }
        mc_failure(e)
    })?;
    let mut buf = Vec::new();
    csvio::write_observations(&mut buf, &obs).or_exit(EXIT_IO)?;
    write_output(args.out.as_deref(), &buf)?;
    if let Some(p) = &args.out {
        eprintln!("wrote {} observations of {} to {}", obs.len(), model.name, p.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct SmootherSummary {
    interior_knots: Vec<f64>,
    degree: usize,
    coefficients: usize,
    hat_trace: f64,
    sigma2: Vec<f64>,
}

#[derive(Serialize)]
struct EstimateReport {
    model: String,
    method: String,
    label: String,
    n: usize,
    param_names: Vec<String>,
    theta: Vec<f64>,
    standard_errors: Option<Vec<f64>>,
    intervals: Option<Vec<(f64, f64)>>,
    level: f64,
    /// Σᵢ‖yᵢ − φ(tᵢ, θ̂)‖² of the solution started at the initial values
    /// the method used.
    sse: Option<f64>,
    smoother: SmootherSummary,
    details: EstimatorOutput,
}

#[derive(Serialize)]
struct FailureReport {
    model: String,
    method: String,
    label: String,
    error: String,
    kind: &'static str,
}

fn failure_kind(e: &EstimatorFailure) -> &'static str {
    use weakode::baselines::BaselineError as B;
    use weakode::oc_estimator::OcError as O;
    match e {
        EstimatorFailure::Baseline(B::DerivativeProxyUnusable(_)) => "derivative_proxy_unusable",
        EstimatorFailure::Baseline(B::NotConverged(_)) | EstimatorFailure::Oc(O::NotConverged { .. }) => "not_converged",
        EstimatorFailure::Baseline(B::AllStartsFailed(_)) | EstimatorFailure::Oc(O::AllCandidatesFailed(_)) => "all_starts_failed",
        EstimatorFailure::Oc(O::RankDeficient { .. }) => "rank_deficient",
        _ => "estimator_error",
    }
}

fn default_estimator(method: Method) -> EstimatorConfig {
    let (label, kind) = match method {
        Method::Oc => ("OC", EstimatorKind::Oc(OcConfig::default())),
        Method::Ts => ("TS", EstimatorKind::Ts(TsConfig::default())),
        Method::Nls => ("NLS", EstimatorKind::Nls(NlsConfig::default())),
    };
    EstimatorConfig { label: label.into(), kind }
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Oc => "oc",
        Method::Ts => "ts",
        Method::Nls => "nls",
    }
}

fn estimate(args: EstimateArgs) -> Result<(), Failure> {
    let mut cfg = match (&args.config, &args.model) {
        (Some(p), _) => load_config(p)?,
        (None, Some(m)) => bare_config(m),
        (None, None) => return Err(Failure::new(EXIT_CONFIG, anyhow::anyhow!("give --model or --config"))),
    };
    if let Some(m) = &args.model {
        cfg.model.name = m.clone();
    }
    let file = std::fs::File::open(&args.data).with_context(|| format!("opening {}", args.data.display())).or_exit(EXIT_IO)?;
    let obs = csvio::read_observations(file).with_context(|| format!("parsing {}", args.data.display())).or_exit(EXIT_DATA)?;
    let default_model = resolve_model(&cfg.model).map_err(mc_failure)?;
    if default_model.dim() != obs.dim() {
        return Err(Failure::new(
            EXIT_DATA,
            anyhow::anyhow!("{} has {} state columns, model {} has dimension {}", args.data.display(), obs.dim(), default_model.name, default_model.dim()),
        ));
    }
    if cfg.model.interval.is_none() {
        let t = obs.times();
        cfg.model.interval = Some([default_model.interval.0.min(t[0]), t[t.len() - 1]]);
    }
    let chosen = cfg
        .estimators
        .iter()
        .find(|e| e.kind.method() == method_name(args.method))
        .cloned()
        .unwrap_or_else(|| default_estimator(args.method));
    cfg.estimators = vec![chosen.clone()];
    cfg.data.n = obs.len();
    cfg.mc.replicates = 1;
    if let Some(s) = args.seed {
        cfg.mc.seed = s;
    }
    let exp = Experiment::new(cfg.clone()).map_err(mc_failure)?;
    let sfit = exp.smooth(&obs).map_err(|e| Failure::new(EXIT_DATA, e))?;
    let method = method_name(args.method).to_string();
    let result = exp.estimate(0, 0, &obs, &sfit);
    let (bytes, outcome) = match result {
        Ok(out) => {
            let (standard_errors, intervals, level, sse) = match &out {
                EstimatorOutput::Oc { estimate, candidates, .. } => (
                    Some(estimate.standard_errors()),
                    Some(estimate.intervals.clone()),
                    estimate.level,
                    candidates.iter().find(|c| c.0 == estimate.members).map(|c| c.1).filter(|v| v.is_finite()),
                ),
                EstimatorOutput::Ts { estimate } => (None, None, cfg.mc.level, refit_sse(&exp, &sfit, &obs, &estimate.theta)),
                EstimatorOutput::Nls { estimate } => (
                    estimate.covariance.as_ref().map(|c| c.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()),
                    estimate.intervals.clone(),
                    cfg.mc.level,
                    Some(estimate.objective),
                ),
            };
            let report = EstimateReport {
                model: exp.model.name.clone(),
                method: method.clone(),
                label: chosen.label.clone(),
                n: obs.len(),
                param_names: exp.model.param_names.clone(),
                theta: out.theta().to_vec(),
                standard_errors,
                intervals,
                level,
                sse,
                smoother: SmootherSummary {
                    interior_knots: sfit.knots().interior().to_vec(),
                    degree: sfit.degree(),
                    coefficients: sfit.coefficient_count(),
                    hat_trace: sfit.hat_trace(),
                    sigma2: sfit.sigma2().to_vec(),
                },
                details: out,
            };
            (serde_json::to_vec_pretty(&report).or_exit(EXIT_IO)?, Ok(()))
        }
        Err(e) => {
            let report = FailureReport {
                model: exp.model.name.clone(),
                method: method.clone(),
                label: chosen.label.clone(),
                error: e.to_string(),
                kind: failure_kind(&e),
            };
            eprintln!("{} failed: {e}", chosen.label);
            (serde_json::to_vec_pretty(&report).or_exit(EXIT_IO)?, Err(Failure::new(EXIT_ESTIMATOR, e)))
        }
    };
    let mut bytes = bytes;
    bytes.push(b'\n');
    write_output(args.out.as_deref(), &bytes)?;
    let manifest_path = args.manifest.clone().or_else(|| args.out.as_ref().map(|p| p.with_extension("manifest.json")));
    if let Some(mp) = manifest_path {
        let mut m = RunManifest::new("estimate", cfg.mc.seed, serde_json::to_value(&cfg).or_exit(EXIT_IO)?);
        m.inputs.push(digest_file(&args.data).or_exit(EXIT_IO)?);
        if let Some(c) = &args.config {
            m.inputs.push(digest_file(c).or_exit(EXIT_IO)?);
        }
        if let Some(o) = &args.out {
            m.outputs.push(digest_file(o).or_exit(EXIT_IO)?);
        }
        m.write(&mp).or_exit(EXIT_IO)?;
    }
    outcome
}

// SSE of the ODE solution from the smoothed initial state; None for delay
// models, whose history the data do not determine.
fn refit_sse(exp: &Experiment, sfit: &weakode::smoother::SplineFit, obs: &weakode::smoother::Observations, theta: &[f64]) -> Option<f64> {
    use weakode::curve::Curve;
    if exp.model.delay().is_some() {
        return None;
    }
    let mut x0 = vec![0.0; exp.model.dim()];
    sfit.value_into(exp.model.t0(), &mut x0);
    let tr = exp
        .model
        .simulate(theta, &weakode::models::InitialData::State(x0), obs.times(), &exp.config.solver)
        .ok()?;
    if tr.blow_up.is_some() {
        return None;
    }
    let x = tr.matrix();
    Some((obs.values() - x).norm_squared())
}

fn fmt_opt(v: Option<f64>, scale: f64) -> String {
    v.map_or("-".into(), |v| format!("{:.4}", v * scale))
}

fn summary_table(rep: &MCReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} n={} sigma={} replicates={} seed={}", rep.model, rep.n, rep.sigma, rep.replicates, rep.seed);
    let _ = writeln!(s, "label\tmethod\tok\tfailed\tMSE(x1e-2)\tTrV(x1e-2)\tcoverage_joint\tcoverage_intervals\tseconds");
    for e in &rep.summaries {
        let cov = e
            .coverage_intervals
            .as_ref()
            .map_or("-".into(), |c| c.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(","));
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.4}",
            e.label,
            e.method,
            e.successes,
            e.failures,
            fmt_opt((e.successes > 0).then_some(e.mse), 100.0),
            fmt_opt(e.mean_trace, 100.0),
            fmt_opt(e.coverage_joint, 1.0),
            cov,
            e.mean_seconds
        );
    }
    s
}

fn records_table(rep: &MCReport) -> String {
    let mut s = String::new();
    let mut header = vec!["replicate".to_string(), "label".into(), "L".into()];
    header.extend(rep.param_names.iter().cloned());
    header.push("error".into());
    s.push_str(&header.join("\t"));
    s.push('\n');
    for r in &rep.records {
        let mut row = vec![r.replicate.to_string(), r.label.clone(), r.members.map_or(String::new(), |m| m.to_string())];
        match &r.theta {
            Some(t) => row.extend(t.iter().map(|v| format!("{v:.16e}"))),
            None => row.extend(rep.param_names.iter().map(|_| String::new())),
        }
        row.push(r.error.clone().unwrap_or_default().replace(['\t', '\n'], " "));
        s.push_str(&row.join("\t"));
        s.push('\n');
    }
    s
}

fn mc(args: McArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.config)?;
    if let Some(r) = args.replicates {
        cfg.mc.replicates = r;
    }
    if let Some(s) = args.seed {
        cfg.mc.seed = s;
    }
    let exp = Experiment::new(cfg.clone()).map_err(mc_failure)?;
    let rep = exp.run();
    let table = summary_table(&rep);
    print!("{table}");
    for (k, e) in &rep.data_failures {
        eprintln!("replicate {k}: {e}");
    }
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).or_exit(EXIT_IO)?;
        let files = [
            ("summary.json", serde_json::to_string_pretty(&rep).or_exit(EXIT_IO)? + "\n"),
            ("summary.tsv", table),
            ("records.tsv", records_table(&rep)),
        ];
        let mut m = RunManifest::new("mc", cfg.mc.seed, serde_json::to_value(&cfg).or_exit(EXIT_IO)?);
        m.inputs.push(digest_file(&args.config).or_exit(EXIT_IO)?);
        for (name, text) in files {
            let p = dir.join(name);
            std::fs::write(&p, text).with_context(|| format!("writing {}", p.display())).or_exit(EXIT_IO)?;
            m.outputs.push(digest_file(&p).or_exit(EXIT_IO)?);
        }
        m.write(&dir.join("manifest.json")).or_exit(EXIT_IO)?;
    }
    if rep.data_failures.len() == rep.replicates {
        return Err(Failure::new(EXIT_DATA, anyhow::anyhow!("every replicate failed at the data stage")));
    }
    Ok(())
}

fn models() -> Result<(), Failure> {
    for name in MODEL_NAMES {
        let m = weakode::models::model_by_name(name).map_err(|e: ModelError| Failure::new(EXIT_CONFIG, e))?;
        let params: Vec<String> = m.param_names.iter().zip(&m.true_params).map(|(n, v)| format!("{n}={v}")).collect();
        let delay = m.delay().map_or(String::new(), |t| format!(" tau={t}"));
        println!("{name}\tdim={}\t[{}, {}]{delay}\t{}", m.dim(), m.interval.0, m.interval.1, params.join(" "));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads().and_then(|_| match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Estimate(a) => estimate(a),
        Command::Mc(a) => mc(a),
        Command::Models => models(),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
