//! Monte Carlo harness: simulated data, smoothing, every configured
//! estimator per replicate, and aggregate MSE / covariance / coverage.
//!
//! Replicate k draws its noise from the ChaCha8 stream (seed, k) and nothing
//! else, so results do not depend on scheduling or on other replicates.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

use crate::baselines::{nls_estimate, ts_estimate, BaselineError, BaselineEstimate, NlsInitial, NlsSettings, WeightFunction};
use crate::basis::{make_sine_basis, uniform_bspline_testfuncs, BasisError, BoundaryFlags, TestFunctionKind};
use crate::conditions::{BoundaryData, ConditionError, ConditionSet, RightBoundary};
use crate::lm::LmSettings;
use crate::models::{model_by_name, InitialData, ModelError, ModelSpec};
use crate::oc_estimator::{ellipse_hit, interval_hit, select_l, OCEstimate, OcError, OcSettings};
use crate::odesim::{OdeError, SolverSettings};
use crate::quadrature::QuadratureSettings;
use crate::smoother::{fit, gcv_select, BoundaryConstraint, Observations, SmootherError, SplineFit};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum McError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Conditions(#[from] ConditionError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Smoother(#[from] SmootherError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("trajectory blows up at t = {0}")]
    BlowUp(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub params: Option<Vec<f64>>,
    /// Initial state, or the constant history of a delay model.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    #[serde(default)]
    pub interval: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    #[default]
    Equispaced,
    /// Sorted i.i.d. uniform times.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub sigma: f64,
    /// Interpret `sigma` as a fraction of the mean absolute trajectory value.
    #[serde(default)]
    pub relative_noise: bool,
    #[serde(default)]
    pub sampling: Sampling,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 100,
            sigma: 0.0,
            relative_noise: false,
            sampling: Sampling::Equispaced,
        }
    }
}

fn default_degree() -> usize {
    3
}

fn default_knots() -> Vec<usize> {
    vec![4, 6, 8, 10, 12, 15, 20]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmootherConfig {
    #[serde(default = "default_degree")]
    pub degree: usize,
    /// Candidate numbers of uniform interior knots for GCV.
    #[serde(default = "default_knots")]
    pub knots: Vec<usize>,
    /// Knots always present (repeat a value to raise its multiplicity).
    #[serde(default)]
    pub forced_knots: Vec<f64>,
    /// Force the fit through the known initial state.
    #[serde(default)]
    pub constrain_initial: bool,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            knots: default_knots(),
            forced_knots: Vec::new(),
            constrain_initial: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    #[default]
    None,
    /// Known initial state through a left-active member.
    Initial,
    /// Known zero terminal derivative through a right-active member.
    Stationary,
    InitialStationary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartRule {
    #[default]
    Truth,
    Midpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Start {
    Rule(StartRule),
    Values(Vec<f64>),
}

impl Default for Start {
    fn default() -> Self {
        Start::Rule(StartRule::Truth)
    }
}

impl Start {
    fn resolve(&self, model: &ModelSpec) -> Vec<f64> {
        match self {
            Start::Rule(StartRule::Truth) => model.true_params.clone(),
            Start::Rule(StartRule::Midpoint) => model.lower.iter().zip(&model.upper).map(|(l, u)| 0.5 * (l + u)).collect(),
            Start::Values(v) => v.clone(),
        }
    }
}

fn default_basis() -> TestFunctionKind {
    TestFunctionKind::Sine
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcConfig {
    #[serde(default = "default_basis")]
    pub basis: TestFunctionKind,
    /// Candidate L values; more than one triggers selection by prediction
    /// SSE. Empty means every L from the smallest identifiable one to 2dp.
    #[serde(default)]
    pub members: Vec<usize>,
    #[serde(default = "default_degree")]
    pub degree: usize,
    /// Test-function domain; the data interval (shifted by τ for delay
    /// models) by default.
    #[serde(default)]
    pub domain: Option<[f64; 2]>,
    #[serde(default)]
    pub boundary: BoundaryMode,
    #[serde(default)]
    pub weighted: bool,
    #[serde(default)]
    pub equations: Option<Vec<usize>>,
    #[serde(default)]
    pub start: Start,
    #[serde(default)]
    pub extra_starts: usize,
    #[serde(default)]
    pub quadrature: Option<QuadratureSettings>,
}

impl Default for OcConfig {
    fn default() -> Self {
        Self {
            basis: default_basis(),
            members: Vec::new(),
            degree: default_degree(),
            domain: None,
            boundary: BoundaryMode::None,
            weighted: false,
            equations: None,
            start: Start::default(),
            extra_starts: 0,
            quadrature: None,
        }
    }
}

fn default_ramp() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsConfig {
    /// Fraction of the interval covered by each affine ramp of the weight.
    #[serde(default = "default_ramp")]
    pub ramp: f64,
    /// Explicit (t, w) vertices of a piecewise-affine weight; overrides `ramp`.
    #[serde(default)]
    pub weight: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub start: Start,
}

impl Default for TsConfig {
    fn default() -> Self {
        Self {
            ramp: default_ramp(),
            weight: None,
            start: Start::default(),
        }
    }
}

fn default_starts() -> usize {
    20
}

fn default_dispersion() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NlsConfig {
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default = "default_dispersion")]
    pub dispersion: f64,
    /// Optimize the initial values too (started from the first observation).
    #[serde(default)]
    pub estimate_initial: bool,
    #[serde(default)]
    pub start: Start,
}

impl Default for NlsConfig {
    fn default() -> Self {
        Self {
            starts: default_starts(),
            dispersion: default_dispersion(),
            estimate_initial: false,
            start: Start::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum EstimatorKind {
    Oc(OcConfig),
    Ts(TsConfig),
    Nls(NlsConfig),
}

impl EstimatorKind {
    pub fn method(&self) -> &'static str {
        match self {
            EstimatorKind::Oc(_) => "oc",
            EstimatorKind::Ts(_) => "ts",
            EstimatorKind::Nls(_) => "nls",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub label: String,
    #[serde(flatten)]
    pub kind: EstimatorKind,
}

fn default_level() -> f64 {
    0.95
}

fn default_replicates() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_level")]
    pub level: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            replicates: default_replicates(),
            seed: 0,
            level: default_level(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub smoother: SmootherConfig,
    pub estimators: Vec<EstimatorConfig>,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub solver: SolverSettings,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), McError> {
        if self.version != CONFIG_VERSION {
            return Err(McError::Config(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version)));
        }
        if self.data.n < 2 {
            return Err(McError::Config("n must be at least 2".into()));
        }
        if !(self.data.sigma >= 0.0) {
            return Err(McError::Config("sigma must be non-negative".into()));
        }
        if self.mc.replicates == 0 {
            return Err(McError::Config("replicates must be at least 1".into()));
        }
        if !(self.mc.level > 0.0 && self.mc.level < 1.0) {
            return Err(McError::Config("level must lie in (0, 1)".into()));
        }
        if self.estimators.is_empty() {
            return Err(McError::Config("no estimators configured".into()));
        }
        for (i, e) in self.estimators.iter().enumerate() {
            if self.estimators[..i].iter().any(|o| o.label == e.label) {
                return Err(McError::Config(format!("duplicate estimator label `{}`", e.label)));
            }
        }
        Ok(())
    }
}

/// Registry model with the config overrides applied.
pub fn resolve_model(cfg: &ModelConfig) -> Result<ModelSpec, McError> {
    let mut m = model_by_name(&cfg.name)?;
    if let Some(p) = &cfg.params {
        m = m.with_true_params(p.clone())?;
    }
    if let Some(x0) = &cfg.initial {
        if x0.len() != m.dim() {
            return Err(McError::Config(format!("initial values need {} entries", m.dim())));
        }
        let init = match m.initial {
            InitialData::State(_) => InitialData::State(x0.clone()),
            InitialData::ConstantHistory(_) => InitialData::ConstantHistory(x0.clone()),
        };
        m = m.with_initial(init);
    }
    if let Some([a, b]) = cfg.interval {
        if !(b > a) {
            return Err(McError::Config("interval must be increasing".into()));
        }
        m = m.with_interval((a, b));
    }
    Ok(m)
}

/// Observation times on the model interval.
pub fn sample_times(interval: (f64, f64), n: usize, sampling: Sampling, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (a, b) = interval;
    match sampling {
        Sampling::Equispaced => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
        Sampling::Uniform => {
            let mut t: Vec<f64> = (0..n).map(|_| rng.random_range(a..=b)).collect();
            t.sort_by(|x, y| x.partial_cmp(y).unwrap());
            t.dedup();
            t
        }
    }
}

/// Noisy observations of the trajectory at θ. With `relative_noise`, the
/// standard deviation is σ times the mean absolute trajectory value.
#[allow(clippy::too_many_arguments)]
pub fn generate_data(
    model: &ModelSpec,
    theta: &[f64],
    n: usize,
    sigma: f64,
    relative_noise: bool,
    sampling: Sampling,
    seed: u64,
    replicate: u64,
    solver: &SolverSettings,
) -> Result<Observations, McError> {
    if !(sigma >= 0.0) {
        return Err(McError::Config("sigma must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    let times = sample_times(model.interval, n, sampling, &mut rng);
    let tr = model.simulate(theta, &model.initial, &times, solver)?;
    if let Some(t) = tr.blow_up {
        return Err(McError::BlowUp(t));
    }
    let mut y = tr.matrix();
    let scale = if relative_noise {
        sigma * y.iter().map(|v| v.abs()).sum::<f64>() / y.len() as f64
    } else {
        sigma
    };
    if scale > 0.0 {
        for v in y.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += scale * z;
        }
    }
    Ok(Observations::new(times, y)?)
}

/// Effective additive noise level of a configuration.
pub fn noise_level(model: &ModelSpec, data: &DataConfig, solver: &SolverSettings) -> Result<f64, McError> {
    if !data.relative_noise {
        return Ok(data.sigma);
    }
    let obs = generate_data(model, &model.true_params, data.n, 0.0, false, Sampling::Equispaced, 0, 0, solver)?;
    Ok(data.sigma * obs.values().iter().map(|v| v.abs()).sum::<f64>() / obs.values().len() as f64)
}

/// Condition sets for an OC configuration, one per L.
pub fn build_condition_sets(model: &ModelSpec, cfg: &OcConfig) -> Result<Vec<ConditionSet>, McError> {
    let tau = model.delay().unwrap_or(0.0);
    let domain = match cfg.domain {
        Some([a, b]) => (a, b),
        None => (model.interval.0 + tau, model.interval.1),
    };
    let flags = match cfg.boundary {
        BoundaryMode::None => BoundaryFlags::NONE,
        BoundaryMode::Initial => BoundaryFlags::LEFT,
        BoundaryMode::Stationary => BoundaryFlags::RIGHT,
        BoundaryMode::InitialStationary => BoundaryFlags { left: true, right: true },
    };
    let boundary = BoundaryData {
        left: flags.left.then(|| model.initial.values().to_vec()),
        right: flags.right.then(|| RightBoundary::Derivative(vec![0.0; model.dim()])),
    };
    let members = if cfg.members.is_empty() {
        let neq = cfg.equations.as_ref().map_or(model.dim(), |e| e.len()).max(1);
        let lo = model.n_params().div_ceil(neq).max(1) + flags.count();
        (lo..=lo.max(2 * model.dim() * model.n_params())).collect()
    } else {
        cfg.members.clone()
    };
    let mut sets = Vec::with_capacity(members.len());
    for &l in &members {
        let basis = match cfg.basis {
            TestFunctionKind::Sine => {
                if flags.count() > 0 {
                    return Err(McError::Config("boundary members need the bspline basis".into()));
                }
                make_sine_basis(l, domain)?
            }
            TestFunctionKind::Bspline => uniform_bspline_testfuncs(domain, l, cfg.degree, flags)?,
        };
        let mut set = ConditionSet::with_data(model.clone(), basis, boundary.clone())?;
        if let Some(eqs) = &cfg.equations {
            set = set.with_equations(eqs.clone())?;
        }
        if let Some(q) = cfg.quadrature {
            set = set.with_quadrature(q)?;
        }
        sets.push(set);
    }
    Ok(sets)
}

/// Everything one estimator reports on one data set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum EstimatorOutput {
    Oc {
        estimate: OCEstimate,
        /// (L, prediction SSE) per candidate; +∞ marks a failed candidate.
        candidates: Vec<(usize, f64)>,
        failures: Vec<(usize, String)>,
    },
    Ts {
        estimate: BaselineEstimate,
    },
    Nls {
        estimate: BaselineEstimate,
    },
}

impl EstimatorOutput {
    pub fn theta(&self) -> &[f64] {
        match self {
            EstimatorOutput::Oc { estimate, .. } => &estimate.theta,
            EstimatorOutput::Ts { estimate } | EstimatorOutput::Nls { estimate } => &estimate.theta,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorFailure {
    #[error(transparent)]
    Oc(#[from] OcError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

impl EstimatorFailure {
    /// Short message used to group failures in summaries.
    pub fn summary(&self) -> String {
        match self {
            EstimatorFailure::Oc(e @ OcError::RankDeficient { .. }) => format!("rank deficient: {e}"),
            EstimatorFailure::Baseline(BaselineError::AllStartsFailed(_)) => "optimization failed from every start".into(),
            e => e.to_string(),
        }
    }
}

enum Prepared {
    Oc { sets: Vec<ConditionSet>, weighted: bool, start: Vec<f64>, settings: OcSettings },
    Ts { weight: WeightFunction, start: Vec<f64> },
    Nls { settings: NlsSettings, estimate_initial: bool, center: Vec<f64> },
}

/// A validated experiment ready to run replicates.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: ModelSpec,
    prepared: Vec<Prepared>,
}

/// One estimator's outcome on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub label: String,
    pub theta: Option<Vec<f64>>,
    pub covariance: Option<DMatrix<f64>>,
    pub intervals: Option<Vec<(f64, f64)>>,
    pub interval_hits: Option<Vec<bool>>,
    pub ellipse_hit: Option<bool>,
    /// L selected, for OC.
    pub members: Option<usize>,
    pub error: Option<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub label: String,
    pub method: String,
    pub successes: usize,
    pub failures: usize,
    /// Mean ‖θ̂ − θ*‖² over successful replicates.
    pub mse: f64,
    pub mse_per_param: Vec<f64>,
    /// Mean trace of the reported covariance (replicates reporting one).
    pub mean_trace: Option<f64>,
    pub coverage_intervals: Option<Vec<f64>>,
    pub coverage_joint: Option<f64>,
    pub mean_seconds: f64,
    /// Distinct failure messages with their counts.
    pub failure_kinds: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCReport {
    pub model: String,
    pub param_names: Vec<String>,
    pub true_params: Vec<f64>,
    pub n: usize,
    pub sigma: f64,
    pub replicates: usize,
    pub seed: u64,
    pub summaries: Vec<EstimatorSummary>,
    pub records: Vec<ReplicateRecord>,
    /// Replicates whose data generation or smoothing failed.
    pub data_failures: Vec<(usize, String)>,
}

impl MCReport {
    pub fn summary(&self, label: &str) -> Option<&EstimatorSummary> {
        self.summaries.iter().find(|s| s.label == label)
    }
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, McError> {
        config.validate()?;
        let model = resolve_model(&config.model)?;
        let mut prepared = Vec::new();
        let lm = LmSettings::default();
        for (i, e) in config.estimators.iter().enumerate() {
            let p = match &e.kind {
                EstimatorKind::Oc(c) => {
                    let sets = build_condition_sets(&model, c)?;
                    let start = c.start.resolve(&model);
                    model.check_params(&start)?;
                    Prepared::Oc {
                        sets,
                        weighted: c.weighted,
                        start,
                        settings: OcSettings {
                            lm,
                            level: config.mc.level,
                            extra_starts: c.extra_starts,
                            seed: config.mc.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                            ..Default::default()
                        },
                    }
                }
                EstimatorKind::Ts(c) => {
                    let start = c.start.resolve(&model);
                    model.check_params(&start)?;
                    Prepared::Ts {
                        weight: match &c.weight {
                            Some(points) => WeightFunction::new(points.iter().map(|p| (p[0], p[1])).collect()),
                            None => WeightFunction::ramps(model.interval, c.ramp),
                        }
                        .map_err(|e| McError::Config(e.to_string()))?,
                        start,
                    }
                }
                EstimatorKind::Nls(c) => {
                    if c.starts == 0 {
                        return Err(McError::Config("nls needs at least one start".into()));
                    }
                    let center = c.start.resolve(&model);
                    model.check_params(&center)?;
                    Prepared::Nls {
                        settings: NlsSettings {
                            starts: c.starts,
                            dispersion: c.dispersion,
                            seed: config.mc.seed,
                            level: config.mc.level,
                            lm,
                            solver: config.solver,
                        },
                        estimate_initial: c.estimate_initial,
                        center,
                    }
                }
            };
            prepared.push(p);
        }
        Ok(Self { config, model, prepared })
    }

    /// Data for replicate k.
    pub fn data(&self, replicate: usize) -> Result<Observations, McError> {
        let d = &self.config.data;
        generate_data(
            &self.model,
            &self.model.true_params,
            d.n,
            d.sigma,
            d.relative_noise,
            d.sampling,
            self.config.mc.seed,
            replicate as u64,
            &self.config.solver,
        )
    }

    /// GCV-selected spline fit of `obs`.
    pub fn smooth(&self, obs: &Observations) -> Result<SplineFit, McError> {
        let s = &self.config.smoother;
        let constraint = s.constrain_initial.then(|| BoundaryConstraint {
            t: self.model.t0(),
            values: self.model.initial.values().to_vec(),
        });
        let knots = gcv_select(obs, self.model.interval, s.degree, &s.knots, &s.forced_knots, constraint.as_ref())?;
        Ok(fit(obs, &knots, constraint.as_ref())?)
    }

    /// Runs estimator `index` of the config on prepared data.
    pub fn estimate(&self, index: usize, replicate: usize, obs: &Observations, sfit: &SplineFit) -> Result<EstimatorOutput, EstimatorFailure> {
        match &self.prepared[index] {
            Prepared::Oc { sets, weighted, start, settings } => {
                let sel = select_l(sets, sfit, obs, Some(start), settings, *weighted, &self.config.solver)?;
                Ok(EstimatorOutput::Oc {
                    candidates: sel.members.iter().copied().zip(sel.scores.iter().copied()).collect(),
                    failures: sel.failures,
                    estimate: sel.best,
                })
            }
            Prepared::Ts { weight, start } => {
                let est = ts_estimate(sfit, &self.model, weight, start, QuadratureSettings::default(), &LmSettings::default())?;
                Ok(EstimatorOutput::Ts { estimate: est })
            }
            Prepared::Nls { settings, estimate_initial, center } => {
                let init = if *estimate_initial {
                    NlsInitial::Estimate(obs.values().row(0).iter().copied().collect())
                } else {
                    NlsInitial::Known(self.model.initial.values().to_vec())
                };
                let s = NlsSettings {
                    seed: settings.seed ^ (replicate as u64).wrapping_mul(0xD1B5_4A32_D192_ED03),
                    ..settings.clone()
                };
                Ok(EstimatorOutput::Nls {
                    estimate: nls_estimate(obs, &self.model, &init, center, &s)?,
                })
            }
        }
    }

    /// Runs every estimator on prepared data.
    pub fn run_estimators(&self, replicate: usize, obs: &Observations, sfit: &SplineFit) -> Vec<ReplicateRecord> {
        let truth = &self.model.true_params;
        let level = self.config.mc.level;
        (0..self.prepared.len())
            .map(|index| {
                let clock = Instant::now();
                let mut rec = ReplicateRecord {
                    replicate,
                    label: self.config.estimators[index].label.clone(),
                    theta: None,
                    covariance: None,
                    intervals: None,
                    interval_hits: None,
                    ellipse_hit: None,
                    members: None,
                    error: None,
                    seconds: 0.0,
                };
                match self.estimate(index, replicate, obs, sfit) {
                    Ok(EstimatorOutput::Oc { estimate: est, .. }) => {
                        rec.interval_hits = Some((0..truth.len()).map(|i| est.interval_covers(i, truth[i])).collect());
                        rec.ellipse_hit = Some(est.ellipse_covers(truth));
                        rec.members = Some(est.members);
                        rec.theta = Some(est.theta);
                        rec.covariance = Some(est.covariance);
                        rec.intervals = Some(est.intervals);
                    }
                    Ok(EstimatorOutput::Ts { estimate: est } | EstimatorOutput::Nls { estimate: est }) => {
                        if let (Some(cov), Some(iv)) = (&est.covariance, &est.intervals) {
                            rec.interval_hits = Some((0..truth.len()).map(|i| interval_hit(iv[i], truth[i])).collect());
                            rec.ellipse_hit = Some(ellipse_hit(&est.theta, cov, truth, level));
                        }
                        rec.covariance = est.covariance;
                        rec.intervals = est.intervals;
                        rec.theta = Some(est.theta);
                    }
                    Err(e) => rec.error = Some(e.summary()),
                }
                rec.seconds = clock.elapsed().as_secs_f64();
                rec
            })
            .collect()
    }

    /// All records of replicate k, or the data-stage error.
    pub fn replicate(&self, k: usize) -> Result<Vec<ReplicateRecord>, String> {
        let obs = self.data(k).map_err(|e| e.to_string())?;
        let sfit = self.smooth(&obs).map_err(|e| e.to_string())?;
        Ok(self.run_estimators(k, &obs, &sfit))
    }

    pub fn run(&self) -> MCReport {
        let outcomes: Vec<Result<Vec<ReplicateRecord>, String>> = (0..self.config.mc.replicates).into_par_iter().map(|k| self.replicate(k)).collect();
        aggregate(self, outcomes)
    }
}

fn aggregate(exp: &Experiment, outcomes: Vec<Result<Vec<ReplicateRecord>, String>>) -> MCReport {
    let truth = &exp.model.true_params;
    let p = truth.len();
    let mut records = Vec::new();
    let mut data_failures = Vec::new();
    for (k, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => records.extend(r),
            Err(e) => data_failures.push((k, e)),
        }
    }
    let mut summaries = Vec::new();
    for cfg in &exp.config.estimators {
        let recs: Vec<&ReplicateRecord> = records.iter().filter(|r| r.label == cfg.label).collect();
        let ok: Vec<&&ReplicateRecord> = recs.iter().filter(|r| r.theta.is_some()).collect();
        let mut per = vec![0.0; p];
        for r in &ok {
            let th = r.theta.as_ref().unwrap();
            for i in 0..p {
                per[i] += (th[i] - truth[i]).powi(2);
            }
        }
        let count = ok.len().max(1) as f64;
        per.iter_mut().for_each(|v| *v /= count);
        let mse = if ok.is_empty() { f64::NAN } else { per.iter().sum() };
        let with_cov: Vec<&&&ReplicateRecord> = ok.iter().filter(|r| r.covariance.is_some()).collect();
        let mean_trace = (!with_cov.is_empty()).then(|| with_cov.iter().map(|r| r.covariance.as_ref().unwrap().trace()).sum::<f64>() / with_cov.len() as f64);
        let with_hits: Vec<&&&ReplicateRecord> = ok.iter().filter(|r| r.interval_hits.is_some()).collect();
        let coverage_intervals = (!with_hits.is_empty()).then(|| {
            (0..p)
                .map(|i| with_hits.iter().filter(|r| r.interval_hits.as_ref().unwrap()[i]).count() as f64 / with_hits.len() as f64)
                .collect()
        });
        let coverage_joint = (!with_hits.is_empty()).then(|| with_hits.iter().filter(|r| r.ellipse_hit == Some(true)).count() as f64 / with_hits.len() as f64);
        let mut kinds: Vec<(String, usize)> = Vec::new();
        for r in &recs {
            if let Some(e) = &r.error {
                match kinds.iter_mut().find(|k| &k.0 == e) {
                    Some(k) => k.1 += 1,
                    None => kinds.push((e.clone(), 1)),
                }
            }
        }
        summaries.push(EstimatorSummary {
            label: cfg.label.clone(),
            method: cfg.kind.method().into(),
            successes: ok.len(),
            failures: recs.len() - ok.len(),
            mse,
            mse_per_param: per,
            mean_trace,
            coverage_intervals,
            coverage_joint,
            mean_seconds: recs.iter().map(|r| r.seconds).sum::<f64>() / recs.len().max(1) as f64,
            failure_kinds: kinds,
        });
    }
    MCReport {
        model: exp.model.name.clone(),
        param_names: exp.model.param_names.clone(),
        true_params: truth.clone(),
        n: exp.config.data.n,
        sigma: exp.config.data.sigma,
        replicates: exp.config.mc.replicates,
        seed: exp.config.mc.seed,
        summaries,
        records,
        data_failures,
    }
}

/// Validates `config` and runs it.
pub fn run_experiment(config: ExperimentConfig) -> Result<MCReport, McError> {
    Ok(Experiment::new(config)?.run())
}
