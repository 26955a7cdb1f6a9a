//! Monte Carlo harness: builds the model, certificate and baselines for a
//! benchmark, runs seeded trials of the three observers against a
//! mismatched truth plant, sweeps an injected lifted residual, and writes
//! CSV plus a plain-text report.
//!
//! Everything here is a pure function of `(config, seed)`; trials run in
//! parallel and are reduced in seed order.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edmd::{estimate_residual_bound, fit_edmd, true_residual, KoopmanModel, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::lifting::{build_dictionary, DictionarySpec};
use crate::linalg::{spectral_norm, Mat};
use crate::observers::{linkoop_gain, EkfObserver, GainDesign, LinKoopObserver, PkoObserver};
use crate::persidskii::{embed_error_dynamics, split_residual, SectorKind, SectorNonlinearity};
use crate::sdp::SdpSettings;
use crate::synthesis::{bound_coefficient, check_dissipation, solve_gain, CoordinateMode, Certificate, DissipationReport, EmbeddingRecord, SearchSpec};
use crate::systems::{
    fmt_full, prbs_torque, rk4_step, seeded_rng, simulate_plant, step_count, ArmParams, InputSignal, NoiseSpec, Plant,
    SmoothSignal, Trace, VdpParams,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Accepted range for the van der Pol `μ` scale factor.
pub const MU_FACTOR_RANGE: (f64, f64) = (0.5, 2.0);
/// Accepted range for the arm friction scale factors.
pub const FRICTION_SCALE_RANGE: (f64, f64) = (0.1, 3.0);

// rng streams inside one trial seed
const STREAM_INIT: u64 = 1;
const STREAM_MISMATCH: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_DISTURBANCE: u64 = 4;

// purposes for derived seeds
const PURPOSE_TRAINING: u64 = 0x7472_6169;
const PURPOSE_SPLIT: u64 = 0x7370_6c74;
const PURPOSE_PILOT: u64 = 0x7069_6c6f;
const PURPOSE_TUNING: u64 = 0x7475_6e65;
const PURPOSE_SWEEP: u64 = 0x7377_6570;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the `index`-th draw of a given purpose, decorrelated from the
/// plain trial seeds `base + i`.
pub fn derive_seed(base: u64, purpose: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(purpose ^ splitmix64(index)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Vdp,
    Arm,
}

impl Benchmark {
    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Vdp => "vdp",
            Benchmark::Arm => "arm",
        }
    }

    pub fn nominal_plant(self) -> Result<Plant> {
        match self {
            Benchmark::Vdp => Plant::van_der_pol(VdpParams::default()),
            Benchmark::Arm => Plant::arm(ArmParams::default()),
        }
    }
}

impl std::str::FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vdp" => Ok(Benchmark::Vdp),
            "arm" => Ok(Benchmark::Arm),
            other => Err(Error::Config(format!("unknown benchmark `{other}` (expected vdp or arm)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub trajectories: usize,
    pub duration: f64,
    /// Initial states are uniform in `[lo, hi]` per coordinate.
    pub state_box: Vec<[f64; 2]>,
    pub input_amplitude: f64,
    pub input_hold: usize,
    pub validation_fraction: f64,
    pub ridge: Option<f64>,
    /// Weight on `ρ` when fitting the residual envelope.
    pub residual_weight: f64,
}

/// Truth-plant perturbation applied per trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MismatchConfig {
    /// Truth `μ` is the nominal `μ` times this factor (van der Pol).
    pub mu_factor: f64,
    /// Friction scale drawn uniformly from this range (arm).
    pub friction_range: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub duration: f64,
    pub state_box: Vec<[f64; 2]>,
    /// PRBS amplitude; zero means an unforced run.
    pub input_amplitude: f64,
    pub input_hold: usize,
    /// Distance of the initial estimate from the true initial state.
    pub init_offset: f64,
    /// Prefix excluded from RMSE, in seconds.
    pub burn_in: f64,
    pub noise_variance: f64,
    pub mismatch: MismatchConfig,
    pub retain_traces: bool,
}

/// Slope budget for the diagonal residual channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ResidualBudget {
    Fixed { value: f64 },
    /// `f_c + f_v·ω_max` from the nominal arm and the training data.
    Friction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EkfConfig {
    /// Candidate `q` for `Q = q·I`; the best on the tuning trials is used.
    pub process_candidates: Vec<f64>,
    pub tuning_trials: usize,
    pub initial_covariance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverConfig {
    pub sigma: SectorKind,
    pub kappa: Vec<f64>,
    pub residual_budget: ResidualBudget,
    pub pilot_trials: usize,
    pub linkoop: GainDesign,
    pub ekf: EkfConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub grid_points: usize,
    pub refine_iterations: usize,
    pub margin_scale: f64,
    pub coordinates: CoordinateMode,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        let s = SearchSpec::default();
        Self {
            lambda_lo: s.lambda_lo,
            lambda_hi: s.lambda_hi,
            grid_points: s.grid_points,
            refine_iterations: s.refine_iterations,
            margin_scale: s.margin_scale,
            coordinates: s.coordinates,
        }
    }
}

impl SynthesisConfig {
    pub fn search_spec(&self) -> SearchSpec {
        SearchSpec {
            lambda_lo: self.lambda_lo,
            lambda_hi: self.lambda_hi,
            grid_points: self.grid_points,
            refine_iterations: self.refine_iterations,
            margin_scale: self.margin_scale,
            coordinates: self.coordinates,
            sdp: SdpSettings::default(),
            ..SearchSpec::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
    pub trials: usize,
    /// Trailing fraction of each run treated as steady state.
    pub steady_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub benchmark: Benchmark,
    pub seed: u64,
    pub trials: usize,
    pub dt: f64,
    pub dictionary: DictionarySpec,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
    pub observers: ObserverConfig,
    pub synthesis: SynthesisConfig,
    pub sweep: SweepConfig,
    pub output_dir: String,
}

impl ExperimentConfig {
    pub fn preset(benchmark: Benchmark) -> Self {
        let (dictionary, train_amp, eval_amp, noise, budget) = match benchmark {
            Benchmark::Vdp => ("vdp15", 1.0, 0.0, 0.01, ResidualBudget::Fixed { value: 1.0 }),
            Benchmark::Arm => ("arm20", 3.0, 3.0, 0.04, ResidualBudget::Friction),
        };
        let unit_box = vec![[-2.0, 2.0], [-2.0, 2.0]];
        Self {
            schema_version: SCHEMA_VERSION,
            benchmark,
            seed: 42,
            trials: 100,
            dt: 0.02,
            dictionary: DictionarySpec::preset(dictionary),
            training: TrainingConfig {
                trajectories: 200,
                duration: 10.0,
                state_box: unit_box.clone(),
                input_amplitude: train_amp,
                input_hold: 10,
                validation_fraction: 0.2,
                ridge: None,
                residual_weight: 1e3,
            },
            evaluation: EvaluationConfig {
                duration: 10.0,
                state_box: unit_box,
                input_amplitude: eval_amp,
                input_hold: 10,
                init_offset: 0.5,
                burn_in: 1.0,
                noise_variance: noise,
                mismatch: MismatchConfig {
                    mu_factor: 1.15,
                    friction_range: [0.7, 1.3],
                },
                retain_traces: true,
            },
            observers: ObserverConfig {
                sigma: SectorKind::TanhScaled,
                kappa: vec![1.0],
                residual_budget: budget,
                pilot_trials: 5,
                linkoop: GainDesign::Riccati {
                    process: 1.0,
                    measurement: noise,
                },
                ekf: EkfConfig {
                    process_candidates: vec![1e-4, 1e-3, 1e-2],
                    tuning_trials: 5,
                    initial_covariance: 0.25,
                },
            },
            synthesis: SynthesisConfig::default(),
            sweep: SweepConfig {
                epsilons: vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5],
                trials: 50,
                steady_fraction: 0.5,
            },
            output_dir: "results".into(),
        }
    }

    /// Parses JSON, rejecting unknown keys and other schema versions.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(Error::Config(format!("unsupported schema_version {v}"))),
            None => return Err(Error::Config("missing schema_version".into())),
        }
        let config: Self = serde_json::from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.trials < 1 {
            return bad("trials must be >= 1".into());
        }
        step_count(self.training.duration, self.dt)?;
        step_count(self.evaluation.duration, self.dt)?;
        let n = 2;
        for (name, b) in [("training", &self.training.state_box), ("evaluation", &self.evaluation.state_box)] {
            if b.len() != n || b.iter().any(|[lo, hi]| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
                return bad(format!("{name}.state_box needs {n} finite [lo, hi] pairs"));
            }
        }
        let t = &self.training;
        if t.trajectories < 2 || !(t.validation_fraction > 0.0 && t.validation_fraction < 1.0) {
            return bad("training needs >= 2 trajectories and validation_fraction in (0, 1)".into());
        }
        if t.input_hold == 0 || self.evaluation.input_hold == 0 {
            return bad("input_hold must be >= 1".into());
        }
        if !(t.input_amplitude >= 0.0 && self.evaluation.input_amplitude >= 0.0) {
            return bad("input amplitudes must be >= 0".into());
        }
        if !(t.residual_weight > 0.0) {
            return bad("residual_weight must be positive".into());
        }
        let e = &self.evaluation;
        if !(e.burn_in >= 0.0 && e.burn_in < e.duration) {
            return bad("burn_in must lie in [0, duration)".into());
        }
        if !(e.noise_variance >= 0.0 && e.init_offset >= 0.0) {
            return bad("noise_variance and init_offset must be >= 0".into());
        }
        let m = &e.mismatch;
        if !(m.mu_factor >= MU_FACTOR_RANGE.0 && m.mu_factor <= MU_FACTOR_RANGE.1) {
            return bad(format!("mismatch.mu_factor must lie in {MU_FACTOR_RANGE:?}"));
        }
        let [lo, hi] = m.friction_range;
        if !(lo >= FRICTION_SCALE_RANGE.0 && lo <= hi && hi <= FRICTION_SCALE_RANGE.1) {
            return bad(format!("mismatch.friction_range must be ordered within {FRICTION_SCALE_RANGE:?}"));
        }
        let o = &self.observers;
        if o.kappa.len() != 1 {
            return bad("kappa needs one entry per measured output (1)".into());
        }
        SectorNonlinearity::new(o.sigma, o.kappa.clone())?;
        if let ResidualBudget::Fixed { value } = o.residual_budget {
            if !(value >= 0.0 && value.is_finite()) {
                return bad("residual_budget.value must be finite and >= 0".into());
            }
        }
        if o.pilot_trials == 0 || o.ekf.tuning_trials == 0 || o.ekf.process_candidates.is_empty() {
            return bad("pilot_trials, tuning_trials and process_candidates must be non-empty".into());
        }
        if o.ekf.process_candidates.iter().any(|q| !(*q > 0.0)) || !(o.ekf.initial_covariance > 0.0) {
            return bad("EKF weights must be positive".into());
        }
        let s = &self.synthesis;
        if !(s.lambda_lo > 0.0 && s.lambda_lo <= s.lambda_hi && s.grid_points >= 1) {
            return bad("synthesis needs 0 < lambda_lo <= lambda_hi and grid_points >= 1".into());
        }
        let w = &self.sweep;
        if w.trials == 0 || !(w.steady_fraction > 0.0 && w.steady_fraction <= 1.0) {
            return bad("sweep needs trials >= 1 and steady_fraction in (0, 1]".into());
        }
        if w.epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite())) || w.epsilons.windows(2).any(|p| p[0] >= p[1]) {
            return bad("sweep.epsilons must be non-negative and strictly increasing".into());
        }
        Ok(())
    }

    pub fn burn_in_samples(&self) -> usize {
        (self.evaluation.burn_in / self.dt).round() as usize
    }

    pub fn sigma(&self) -> Result<SectorNonlinearity> {
        SectorNonlinearity::new(self.observers.sigma, self.observers.kappa.clone())
    }
}

fn uniform_in_box(rng: &mut impl Rng, bounds: &[[f64; 2]]) -> DVector<f64> {
    DVector::from_iterator(
        bounds.len(),
        bounds
            .iter()
            .map(|&[lo, hi]| if lo == hi { lo } else { rng.random_range(lo..hi) }),
    )
}

fn input_signal(seed: u64, duration: f64, dt: f64, amplitude: f64, hold: usize, dim: usize) -> Result<InputSignal> {
    if amplitude == 0.0 {
        return Ok(InputSignal::zeros(dim, step_count(duration, dt)? + 1));
    }
    prbs_torque(seed, duration, dt, amplitude, hold)
}

/// Simulates the nominal plant from the training box; returns the traces
/// in generation order.
pub fn training_traces(config: &ExperimentConfig) -> Result<Vec<Trace>> {
    let plant = config.benchmark.nominal_plant()?;
    let t = &config.training;
    (0..t.trajectories)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(config.seed, PURPOSE_TRAINING, i as u64);
            let x0 = uniform_in_box(&mut seeded_rng(seed, STREAM_INIT), &t.state_box);
            let u = input_signal(seed, t.duration, config.dt, t.input_amplitude, t.input_hold, plant.input_dim())?;
            simulate_plant(&plant, &x0, &u, t.duration, config.dt, &NoiseSpec::silent())
        })
        .collect()
}

/// EDMD on a seeded train/validation split, with the residual envelope
/// measured on the held-out part.
pub fn fit_model(config: &ExperimentConfig) -> Result<KoopmanModel> {
    let plant = config.benchmark.nominal_plant()?;
    let traces = training_traces(config)?;
    let mut order: Vec<usize> = (0..traces.len()).collect();
    order.shuffle(&mut seeded_rng(derive_seed(config.seed, PURPOSE_SPLIT, 0), 0));
    let n_val = ((traces.len() as f64 * config.training.validation_fraction).round() as usize).clamp(1, traces.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let train: Vec<Trace> = train_idx.iter().map(|&i| traces[i].clone()).collect();
    let val: Vec<Trace> = val_idx.iter().map(|&i| traces[i].clone()).collect();
    let dictionary = build_dictionary(&config.dictionary)?;
    let mut model = fit_edmd(
        &TrajectoryDataset {
            traces: &train,
            dictionary: &dictionary,
            measured: &plant.measured,
        },
        config.training.ridge,
    )?;
    let envelope = estimate_residual_bound(&model, &plant, &val, config.training.residual_weight)?;
    model.residual = Some(envelope.summary());
    model.omega_max = Some(
        traces
            .iter()
            .flat_map(|t| t.states.iter().map(|x| x[1].abs()))
            .fold(0.0, f64::max),
    );
    Ok(model)
}

/// Per-coordinate slope budget for the residual split.
pub fn residual_budget(config: &ExperimentConfig, model: &KoopmanModel) -> f64 {
    match config.observers.residual_budget {
        ResidualBudget::Fixed { value } => value,
        ResidualBudget::Friction => {
            let p = ArmParams::default();
            p.f_c + p.f_v * model.omega_max.unwrap_or(0.0)
        }
    }
}

/// Three observers sharing one `(u, y)` stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverKind {
    Pko,
    LinKoop,
    Ekf,
}

impl ObserverKind {
    pub const ALL: [ObserverKind; 3] = [ObserverKind::Pko, ObserverKind::LinKoop, ObserverKind::Ekf];

    pub fn label(self) -> &'static str {
        match self {
            ObserverKind::Pko => "PKO",
            ObserverKind::LinKoop => "LinKoop",
            ObserverKind::Ekf => "EKF",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            ObserverKind::Pko => "pko",
            ObserverKind::LinKoop => "linkoop",
            ObserverKind::Ekf => "ekf",
        }
    }
}

/// Everything a trial needs, built once per configuration.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub nominal: Plant,
    pub model: KoopmanModel,
    pub certificate: Certificate,
    pub sigma: SectorNonlinearity,
    pub linkoop_gain: Mat,
    pub ekf_process: f64,
}

pub fn synthesize(config: &ExperimentConfig, model: &KoopmanModel) -> Result<Certificate> {
    solve_gain(model, &config.observers.kappa, model.rho(), &config.synthesis.search_spec())
}

/// Mismatched truth plant for a trial seed.
pub fn truth_plant(config: &ExperimentConfig, seed: u64) -> Result<Plant> {
    let m = &config.evaluation.mismatch;
    match config.benchmark {
        Benchmark::Vdp => Plant::van_der_pol(VdpParams {
            mu: VdpParams::default().mu * m.mu_factor,
        }),
        Benchmark::Arm => {
            let [lo, hi] = m.friction_range;
            let scale = if lo == hi {
                lo
            } else {
                seeded_rng(seed, STREAM_MISMATCH).random_range(lo..hi)
            };
            Plant::arm(ArmParams::default().with_friction_scale(scale))
        }
    }
}

/// Truth trace and initial estimate for one trial.
#[derive(Clone, Debug)]
pub struct TrialSetup {
    pub trace: Trace,
    pub x0_hat: DVector<f64>,
}

pub fn setup_trial(config: &ExperimentConfig, truth: &Plant, seed: u64) -> Result<TrialSetup> {
    let e = &config.evaluation;
    let mut rng = seeded_rng(seed, STREAM_INIT);
    let x0 = uniform_in_box(&mut rng, &e.state_box);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let x0_hat = &x0 + DVector::from_vec(vec![e.init_offset * angle.cos(), e.init_offset * angle.sin()]);
    let u = input_signal(seed, e.duration, config.dt, e.input_amplitude, e.input_hold, truth.input_dim())?;
    let noise = NoiseSpec {
        variance: e.noise_variance,
        seed,
        stream_id: STREAM_NOISE,
    };
    let trace = simulate_plant(truth, &x0, &u, e.duration, config.dt, &noise)?;
    Ok(TrialSetup { trace, x0_hat })
}

enum Estimator {
    Pko(Box<PkoObserver>),
    LinKoop(Box<LinKoopObserver>),
    Ekf(Box<EkfObserver>),
}

impl Estimator {
    fn step(&mut self, u: &DVector<f64>, y: &DVector<f64>, dt: f64) -> Result<()> {
        match self {
            Estimator::Pko(o) => o.step(u, y, dt),
            Estimator::LinKoop(o) => o.step(u, y, dt),
            Estimator::Ekf(o) => o.step(u, y, dt),
        }
    }

    fn estimate(&self) -> DVector<f64> {
        match self {
            Estimator::Pko(o) => o.estimate_state(),
            Estimator::LinKoop(o) => o.estimate_state(),
            Estimator::Ekf(o) => o.estimate_state(),
        }
    }
}

fn ekf_for(plant: &Plant, process: f64, config: &ExperimentConfig, x0_hat: &DVector<f64>) -> Result<EkfObserver> {
    let n = plant.state_dim();
    let p = plant.output_dim();
    // R must be positive even for noise-free runs
    let r = config.evaluation.noise_variance.max(1e-8);
    EkfObserver::new(
        plant.clone(),
        Mat::identity(n, n) * process,
        Mat::identity(p, p) * r,
        x0_hat.clone(),
        Mat::identity(n, n) * config.observers.ekf.initial_covariance,
    )
}

/// State estimates per step, `None` once the observer has diverged.
struct Run {
    estimates: Vec<DVector<f64>>,
    diverged: bool,
}

fn run_estimator(mut est: Estimator, trace: &Trace, x0_hat: &DVector<f64>) -> Run {
    let dt = trace.dt();
    let mut estimates = Vec::with_capacity(trace.len());
    estimates.push(x0_hat.clone());
    for k in 0..trace.len() - 1 {
        if est.step(&trace.inputs[k], &trace.outputs_noisy[k], dt).is_err() {
            return Run {
                estimates,
                diverged: true,
            };
        }
        estimates.push(est.estimate());
    }
    Run {
        estimates,
        diverged: false,
    }
}

/// Root-mean-square of `|x − x̂|` over all components, skipping the first
/// `skip` samples.
pub fn rmse(truth: &[DVector<f64>], estimate: &[DVector<f64>], skip: usize) -> Result<f64> {
    let per_state = rmse_per_state(truth, estimate, skip)?;
    Ok(per_state.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Component-wise RMSE; the aggregate is the root of their squared sum.
pub fn rmse_per_state(truth: &[DVector<f64>], estimate: &[DVector<f64>], skip: usize) -> Result<Vec<f64>> {
    if truth.len() != estimate.len() {
        return Err(Error::Dimension(format!(
            "rmse needs equal lengths, got {} and {}",
            truth.len(),
            estimate.len()
        )));
    }
    if truth.len() <= skip {
        return Err(Error::InsufficientData("nothing left after burn-in".into()));
    }
    let n = truth[skip].len();
    let count = (truth.len() - skip) as f64;
    let mut acc = vec![0.0; n];
    for (x, xh) in truth[skip..].iter().zip(&estimate[skip..]) {
        if x.len() != n || xh.len() != n {
            return Err(Error::Dimension("state vectors differ in length".into()));
        }
        for i in 0..n {
            acc[i] += (x[i] - xh[i]).powi(2);
        }
    }
    Ok(acc.into_iter().map(|s| (s / count).sqrt()).collect())
}

fn max_error(truth: &[DVector<f64>], estimate: &[DVector<f64>], skip: usize) -> f64 {
    truth[skip..]
        .iter()
        .zip(&estimate[skip..])
        .map(|(x, xh)| (x - xh).norm())
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObserverOutcome {
    pub observer: ObserverKind,
    /// `∞` when diverged.
    pub rmse: f64,
    pub rmse_per_state: Vec<f64>,
    pub max_error: f64,
    pub diverged: bool,
}

impl ObserverOutcome {
    fn from_run(observer: ObserverKind, run: &Run, truth: &[DVector<f64>], skip: usize) -> Result<Self> {
        if run.diverged {
            let n = truth[0].len();
            return Ok(Self {
                observer,
                rmse: f64::INFINITY,
                rmse_per_state: vec![f64::INFINITY; n],
                max_error: f64::INFINITY,
                diverged: true,
            });
        }
        Ok(Self {
            observer,
            rmse: rmse(truth, &run.estimates, skip)?,
            rmse_per_state: rmse_per_state(truth, &run.estimates, skip)?,
            max_error: max_error(truth, &run.estimates, skip),
            diverged: false,
        })
    }
}

/// Truth and per-observer estimates; diverged observers stop early.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialTraces {
    pub trace: Trace,
    pub estimates: Vec<(ObserverKind, Vec<DVector<f64>>)>,
}

impl TrialTraces {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let n = self.trace.states[0].len();
        let p = self.trace.outputs_noisy[0].len();
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=self.trace.inputs[0].len()).map(|i| format!("u{i}")));
        header.extend((1..=p).map(|i| format!("y{i}")));
        for (kind, _) in &self.estimates {
            header.extend((1..=n).map(|i| format!("{}_x{i}", kind.key())));
        }
        let mut out = header.join(",");
        out.push('\n');
        for k in 0..self.trace.len() {
            let mut row: Vec<f64> = vec![self.trace.times[k]];
            row.extend(self.trace.states[k].iter());
            row.extend(self.trace.inputs[k].iter());
            row.extend(self.trace.outputs_noisy[k].iter());
            for (_, est) in &self.estimates {
                match est.get(k) {
                    Some(x) => row.extend(x.iter()),
                    None => row.extend(std::iter::repeat_n(f64::NAN, n)),
                }
            }
            let cells: Vec<String> = row.into_iter().map(fmt_full).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub seed: u64,
    pub outcomes: Vec<ObserverOutcome>,
    pub traces: Option<TrialTraces>,
}

impl TrialResult {
    pub fn outcome(&self, kind: ObserverKind) -> &ObserverOutcome {
        self.outcomes
            .iter()
            .find(|o| o.observer == kind)
            .expect("every trial carries all observers")
    }

    pub fn any_diverged(&self) -> bool {
        self.outcomes.iter().any(|o| o.diverged)
    }
}

impl Pipeline {
    fn estimator(&self, kind: ObserverKind, x0_hat: &DVector<f64>) -> Result<Estimator> {
        Ok(match kind {
            ObserverKind::Pko => Estimator::Pko(Box::new(PkoObserver::new(
                self.model.clone(),
                self.certificate.gain.clone(),
                self.sigma.clone(),
                x0_hat,
            )?)),
            ObserverKind::LinKoop => Estimator::LinKoop(Box::new(LinKoopObserver::new(
                self.model.clone(),
                self.linkoop_gain.clone(),
                x0_hat,
            )?)),
            ObserverKind::Ekf => Estimator::Ekf(Box::new(ekf_for(&self.nominal, self.ekf_process, &self.config, x0_hat)?)),
        })
    }
}

/// Simulates the mismatched truth once and feeds the same `(u, y)` stream
/// to all three observers.
pub fn run_trial(pipeline: &Pipeline, seed: u64) -> Result<TrialResult> {
    let config = &pipeline.config;
    let truth = truth_plant(config, seed)?;
    let setup = setup_trial(config, &truth, seed)?;
    let skip = config.burn_in_samples();
    let mut outcomes = Vec::with_capacity(3);
    let mut estimates = Vec::with_capacity(3);
    for kind in ObserverKind::ALL {
        let run = run_estimator(pipeline.estimator(kind, &setup.x0_hat)?, &setup.trace, &setup.x0_hat);
        outcomes.push(ObserverOutcome::from_run(kind, &run, &setup.trace.states, skip)?);
        estimates.push((kind, run.estimates));
    }
    let traces = config.evaluation.retain_traces.then(|| TrialTraces {
        trace: setup.trace,
        estimates,
    });
    Ok(TrialResult { seed, outcomes, traces })
}

/// Picks the EKF process weight with the lowest mean RMSE on dedicated
/// tuning seeds (disjoint from the evaluation seeds).
pub fn tune_ekf(config: &ExperimentConfig, nominal: &Plant) -> Result<f64> {
    let skip = config.burn_in_samples();
    let ekf = &config.observers.ekf;
    let setups: Vec<TrialSetup> = (0..ekf.tuning_trials)
        .map(|i| {
            let seed = derive_seed(config.seed, PURPOSE_TUNING, i as u64);
            setup_trial(config, &truth_plant(config, seed)?, seed)
        })
        .collect::<Result<_>>()?;
    let mut best = (f64::INFINITY, ekf.process_candidates[0]);
    for &q in &ekf.process_candidates {
        let mut total = 0.0;
        for s in &setups {
            let run = run_estimator(Estimator::Ekf(Box::new(ekf_for(nominal, q, config, &s.x0_hat)?)), &s.trace, &s.x0_hat);
            total += if run.diverged {
                f64::INFINITY
            } else {
                rmse(&s.trace.states, &run.estimates, skip)?
            };
        }
        let mean = total / setups.len() as f64;
        if mean < best.0 {
            best = (mean, q);
        }
    }
    Ok(best.1)
}

/// Pilot runs of the PKO on the nominal plant supply `(e, Δ)` samples for
/// the residual split; the certificate itself is not re-solved.
pub fn pilot_embedding(config: &ExperimentConfig, nominal: &Plant, model: &KoopmanModel, cert: &Certificate) -> Result<EmbeddingRecord> {
    let sigma = config.sigma()?;
    let mut samples = Vec::new();
    for i in 0..config.observers.pilot_trials {
        let seed = derive_seed(config.seed, PURPOSE_PILOT, i as u64);
        let setup = setup_trial(config, nominal, seed)?;
        let mut pko = PkoObserver::new(model.clone(), cert.gain.clone(), sigma.clone(), &setup.x0_hat)?;
        let trace = &setup.trace;
        for k in 0..trace.len() - 1 {
            let (x, u) = (&trace.states[k], &trace.inputs[k]);
            if k % 5 == 0 {
                let e = model.dictionary.lift(x.as_slice())? - pko.lifted();
                samples.push((e, true_residual(model, nominal, x, u)?));
            }
            if pko.step(u, &trace.outputs_noisy[k], trace.dt()).is_err() {
                break;
            }
        }
    }
    let budget = vec![residual_budget(config, model); model.r()];
    let split = split_residual(&samples, &budget)?;
    let embedded = embed_error_dynamics(model, &cert.gain, &sigma, &split, config.evaluation.noise_variance.sqrt())?;
    Ok(EmbeddingRecord {
        sigma,
        split,
        disturbance_bound: embedded.disturbance_bound,
    })
}

/// Fit, synthesize, bootstrap the split, design the LinKoop gain and tune
/// the EKF.
pub fn build_pipeline(config: &ExperimentConfig) -> Result<Pipeline> {
    config.validate()?;
    let model = fit_model(config)?;
    let certificate = synthesize(config, &model)?;
    build_pipeline_with(config, model, certificate)
}

/// Same as [`build_pipeline`] with a model and certificate supplied.
pub fn build_pipeline_with(config: &ExperimentConfig, model: KoopmanModel, mut certificate: Certificate) -> Result<Pipeline> {
    let nominal = config.benchmark.nominal_plant()?;
    if certificate.dictionary_hash != model.dictionary.spec().hash() {
        return Err(Error::InvalidCertificate("certificate was synthesized for another dictionary".into()));
    }
    certificate.embedding = Some(pilot_embedding(config, &nominal, &model, &certificate)?);
    let linkoop_gain = linkoop_gain(&model, &config.observers.linkoop)?;
    let ekf_process = tune_ekf(config, &nominal)?;
    Ok(Pipeline {
        config: config.clone(),
        nominal,
        sigma: config.sigma()?,
        model,
        certificate,
        linkoop_gain,
        ekf_process,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub observer: ObserverKind,
    /// Over non-diverged trials.
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub rmse_mean_per_state: Vec<f64>,
    pub max_error_mean: f64,
    pub diverged: usize,
    /// `(mean_EKF − mean)/mean_EKF`.
    pub improvement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub trials: usize,
    pub rows: Vec<SummaryRow>,
    /// Trials in which at least one observer diverged.
    pub diverged_trials: usize,
}

impl SummaryTable {
    pub fn row(&self, kind: ObserverKind) -> &SummaryRow {
        self.rows.iter().find(|r| r.observer == kind).expect("all observers summarized")
    }
}

/// Mean and sample standard deviation (`NaN` below two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(results: &[TrialResult]) -> SummaryTable {
    let mut rows: Vec<SummaryRow> = ObserverKind::ALL
        .iter()
        .map(|&kind| {
            let ok: Vec<&ObserverOutcome> = results.iter().map(|t| t.outcome(kind)).filter(|o| !o.diverged).collect();
            let rmses: Vec<f64> = ok.iter().map(|o| o.rmse).collect();
            let (rmse_mean, rmse_std) = mean_std(&rmses);
            let n_state = ok.first().map_or(0, |o| o.rmse_per_state.len());
            let rmse_mean_per_state = (0..n_state)
                .map(|i| mean_std(&ok.iter().map(|o| o.rmse_per_state[i]).collect::<Vec<_>>()).0)
                .collect();
            SummaryRow {
                observer: kind,
                rmse_mean,
                rmse_std,
                rmse_mean_per_state,
                max_error_mean: mean_std(&ok.iter().map(|o| o.max_error).collect::<Vec<_>>()).0,
                diverged: results.len() - ok.len(),
                improvement: f64::NAN,
            }
        })
        .collect();
    let ekf = rows.iter().find(|r| r.observer == ObserverKind::Ekf).map(|r| r.rmse_mean).unwrap_or(f64::NAN);
    for row in &mut rows {
        row.improvement = (ekf - row.rmse_mean) / ekf;
    }
    SummaryTable {
        trials: results.len(),
        rows,
        diverged_trials: results.iter().filter(|t| t.any_diverged()).count(),
    }
}

#[derive(Clone, Debug)]
pub struct BenchmarkRun {
    pub trials: Vec<TrialResult>,
    pub summary: SummaryTable,
}

/// Trial seeds are `seed, seed + 1, …`.
pub fn trial_seeds(config: &ExperimentConfig) -> Vec<u64> {
    (0..config.trials as u64).map(|i| config.seed.wrapping_add(i)).collect()
}

pub fn run_benchmark(pipeline: &Pipeline) -> Result<BenchmarkRun> {
    let trials: Vec<TrialResult> = trial_seeds(&pipeline.config)
        .into_par_iter()
        .map(|seed| run_trial(pipeline, seed))
        .collect::<Result<_>>()?;
    let summary = summarize(&trials);
    Ok(BenchmarkRun { trials, summary })
}

/// Lifted truth `ż = A z + B u + ε w(t)` observed through `y = C_o z + v`.
#[derive(Clone, Debug)]
pub struct LiftedTrial {
    pub seed: u64,
    pub epsilon: f64,
    pub outcomes: Vec<ObserverOutcome>,
    /// `|T(z − ẑ)|` of the PKO at every sample (empty if it diverged).
    pub pko_certificate_error: Vec<f64>,
}

pub fn run_lifted_trial(pipeline: &Pipeline, seed: u64, epsilon: f64, noise_variance: f64) -> Result<LiftedTrial> {
    let config = &pipeline.config;
    let model = &pipeline.model;
    let e = &config.evaluation;
    let dt = config.dt;
    let steps = step_count(e.duration, dt)?;
    let mut rng = seeded_rng(seed, STREAM_INIT);
    let x0 = uniform_in_box(&mut rng, &e.state_box);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let x0_hat = &x0 + DVector::from_vec(vec![e.init_offset * angle.cos(), e.init_offset * angle.sin()]);
    let input = input_signal(seed, e.duration, dt, e.input_amplitude, e.input_hold, model.m())?;
    let w = SmoothSignal::new(seed, STREAM_DISTURBANCE, model.r());
    let mut noise = crate::systems::NoiseSource::new(&NoiseSpec {
        variance: noise_variance,
        seed,
        stream_id: STREAM_NOISE,
    })?;
    let mut z = model.dictionary.lift(x0.as_slice())?;
    let mut trace = Trace {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps + 1),
        outputs_clean: Vec::with_capacity(steps + 1),
        outputs_noisy: Vec::with_capacity(steps + 1),
    };
    let mut lifted = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * dt;
        let y = &model.c_o * &z;
        trace.times.push(t);
        trace.states.push(model.dictionary.project(&z));
        trace.inputs.push(input.at(k).clone());
        trace.outputs_noisy.push(&y + noise.sample(y.len()));
        trace.outputs_clean.push(y);
        lifted.push(z.clone());
        if k < steps {
            let rhs = |t: f64, z: &DVector<f64>, u: &DVector<f64>| model.drift(z, u) + w.at(t) * epsilon;
            z = rk4_step(rhs, &z, input.at(k), t, dt)?;
        }
    }
    let skip = config.burn_in_samples();
    let mut outcomes = Vec::with_capacity(3);
    let mut pko_certificate_error = Vec::new();
    for kind in ObserverKind::ALL {
        if kind == ObserverKind::Pko {
            let mut pko = PkoObserver::new(model.clone(), pipeline.certificate.gain.clone(), pipeline.sigma.clone(), &x0_hat)?;
            let mut estimates = vec![x0_hat.clone()];
            let mut errors = vec![pipeline.certificate.to_certificate_coords(&(&lifted[0] - pko.lifted())).norm()];
            let mut diverged = false;
            for k in 0..steps {
                if pko.step(&trace.inputs[k], &trace.outputs_noisy[k], dt).is_err() {
                    diverged = true;
                    break;
                }
                estimates.push(pko.estimate_state());
                errors.push(pipeline.certificate.to_certificate_coords(&(&lifted[k + 1] - pko.lifted())).norm());
            }
            let run = Run { estimates, diverged };
            outcomes.push(ObserverOutcome::from_run(kind, &run, &trace.states, skip)?);
            if !diverged {
                pko_certificate_error = errors;
            }
        } else {
            let run = run_estimator(pipeline.estimator(kind, &x0_hat)?, &trace, &x0_hat);
            outcomes.push(ObserverOutcome::from_run(kind, &run, &trace.states, skip)?);
        }
    }
    Ok(LiftedTrial {
        seed,
        epsilon,
        outcomes,
        pko_certificate_error,
    })
}

/// Ultimate-bound coefficient `c` and the noise contribution to the
/// certificate-coordinate disturbance bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub c: f64,
    /// `‖T‖`, mapping an injected `|ε w| ≤ ε` into certificate coordinates.
    pub transform_norm: f64,
    /// `‖T K‖·κ_max·3σ_v`.
    pub noise_term: f64,
}

impl BoundTerms {
    pub fn new(pipeline: &Pipeline) -> Self {
        let cert = &pipeline.certificate;
        let noise_std = pipeline.config.evaluation.noise_variance.sqrt();
        Self {
            c: bound_coefficient(cert.gamma, cert.alpha, cert.p_max(), cert.p_min()),
            transform_norm: spectral_norm(&cert.transform),
            noise_term: spectral_norm(&(&cert.transform * &cert.gain)) * pipeline.sigma.kappa_max() * 3.0 * noise_std,
        }
    }

    /// Predicted steady-state bound on `|T e|` for an injected residual of size `ε`.
    pub fn bound(&self, epsilon: f64) -> f64 {
        self.c * (self.transform_norm * epsilon + self.noise_term)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub observer: ObserverKind,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub diverged: usize,
    pub ultimate_bound: f64,
    /// Largest steady-state `|T e|` of the PKO over all trials (PKO rows only).
    pub steady_max_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    LinearFit {
        slope,
        intercept,
        r_squared: if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub bound: BoundTerms,
    pub rows: Vec<SweepRow>,
    pub fits: Vec<(ObserverKind, LinearFit)>,
}

impl SweepResult {
    pub fn rows_for(&self, kind: ObserverKind) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.observer == kind)
    }

    pub fn fit(&self, kind: ObserverKind) -> LinearFit {
        self.fits.iter().find(|f| f.0 == kind).expect("fit per observer").1
    }

    /// PKO steady-state error within `c·ε̃` at every grid point.
    pub fn contained(&self) -> bool {
        self.rows_for(ObserverKind::Pko).all(|r| r.steady_max_error <= r.ultimate_bound)
    }
}

/// Injects `ε·w(t)` into the lifted truth for each `ε` and runs the same
/// seeds at every grid point.
pub fn sweep_epsilon(pipeline: &Pipeline, epsilons: &[f64]) -> Result<SweepResult> {
    let config = &pipeline.config;
    if epsilons.iter().any(|e| !(*e >= 0.0)) || epsilons.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::InvalidParameter("epsilon grid must be non-negative and increasing".into()));
    }
    let bound = BoundTerms::new(pipeline);
    let seeds: Vec<u64> = (0..config.sweep.trials as u64)
        .map(|j| derive_seed(config.seed, PURPOSE_SWEEP, j))
        .collect();
    let steps = step_count(config.evaluation.duration, config.dt)?;
    let steady_start = steps + 1 - ((steps + 1) as f64 * config.sweep.steady_fraction).round().max(1.0) as usize;
    let jobs: Vec<(f64, u64)> = epsilons.iter().flat_map(|&e| seeds.iter().map(move |&s| (e, s))).collect();
    let trials: Vec<LiftedTrial> = jobs
        .into_par_iter()
        .map(|(eps, seed)| run_lifted_trial(pipeline, seed, eps, config.evaluation.noise_variance))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (i, &eps) in epsilons.iter().enumerate() {
        let group = &trials[i * seeds.len()..(i + 1) * seeds.len()];
        for kind in ObserverKind::ALL {
            let outcomes: Vec<&ObserverOutcome> = group.iter().map(|t| &t.outcomes[kind as usize]).collect();
            let ok: Vec<f64> = outcomes.iter().filter(|o| !o.diverged).map(|o| o.rmse).collect();
            let (rmse_mean, rmse_std) = mean_std(&ok);
            let steady_max_error = if kind == ObserverKind::Pko {
                group
                    .iter()
                    .map(|t| {
                        if t.pko_certificate_error.is_empty() {
                            f64::INFINITY
                        } else {
                            t.pko_certificate_error[steady_start..].iter().cloned().fold(0.0, f64::max)
                        }
                    })
                    .fold(0.0, f64::max)
            } else {
                f64::NAN
            };
            rows.push(SweepRow {
                epsilon: eps,
                observer: kind,
                rmse_mean,
                rmse_std,
                diverged: outcomes.len() - ok.len(),
                ultimate_bound: bound.bound(eps),
                steady_max_error,
            });
        }
    }
    let fits = ObserverKind::ALL
        .iter()
        .map(|&kind| {
            let ys: Vec<f64> = rows.iter().filter(|r| r.observer == kind).map(|r| r.rmse_mean).collect();
            (kind, linear_fit(epsilons, &ys))
        })
        .collect();
    Ok(SweepResult { bound, rows, fits })
}

/// Centered-difference dissipation check of one PKO run on the mismatched
/// truth. The disturbance at `t_k` is the exact residual plus the
/// difference the noisy, held measurement makes to the correction,
/// averaged over the two intervals that meet at `t_k`.
pub fn dissipation_trial(pipeline: &Pipeline, seed: u64) -> Result<DissipationReport> {
    let config = &pipeline.config;
    let cert = &pipeline.certificate;
    let model = &pipeline.model;
    let truth = truth_plant(config, seed)?;
    let setup = setup_trial(config, &truth, seed)?;
    let trace = &setup.trace;
    let dt = trace.dt();
    let mut pko = PkoObserver::new(model.clone(), cert.gain.clone(), pipeline.sigma.clone(), &setup.x0_hat)?;
    let mut errors = Vec::with_capacity(trace.len());
    let mut disturbances = Vec::with_capacity(trace.len());
    let ideal = |e: &DVector<f64>| &cert.gain * pipeline.sigma.eval(&(&model.c_o * e));
    let mut left: Option<DVector<f64>> = None;
    for k in 0..trace.len() {
        let (x, u) = (&trace.states[k], &trace.inputs[k]);
        let z = model.dictionary.lift(x.as_slice())?;
        let e = &z - pko.lifted();
        let delta = true_residual(model, &truth, x, u)?;
        let y_right = &trace.outputs_noisy[k];
        let right = &delta + pko.correction(pko.lifted(), y_right) * -1.0 + ideal(&e);
        let d = match &left {
            Some(l) => (l + &right) * 0.5,
            None => right.clone(),
        };
        errors.push(cert.to_certificate_coords(&e));
        disturbances.push(cert.to_certificate_coords(&d));
        if k + 1 == trace.len() {
            break;
        }
        pko.step(u, y_right, dt)?;
        // the previous interval held y_k; its end point sees x_{k+1}
        let x_next = &trace.states[k + 1];
        let z_next = model.dictionary.lift(x_next.as_slice())?;
        let e_next = &z_next - pko.lifted();
        let delta_next = true_residual(model, &truth, x_next, u)?;
        left = Some(delta_next - pko.correction(pko.lifted(), y_right) + ideal(&e_next));
    }
    check_dissipation(cert, &errors, &disturbances, dt)
}

/// `|T(z − ẑ)|` at every sample for the unforced lifted plant `ż = A z`
/// and the PKO driven by the exact, continuous output `y = C_o z`.
/// Plant and observer are integrated as one system, so no sample-and-hold
/// error enters.
pub fn nominal_error_norms(
    model: &KoopmanModel,
    cert: &Certificate,
    sigma: &SectorNonlinearity,
    z0: &DVector<f64>,
    z0_hat: &DVector<f64>,
    duration: f64,
    dt: f64,
) -> Result<Vec<(f64, f64)>> {
    let r = model.r();
    if z0.len() != r || z0_hat.len() != r {
        return Err(Error::Dimension(format!("initial lifted states must have length {r}")));
    }
    let steps = step_count(duration, dt)?;
    let observer = PkoObserver::from_lifted(model.clone(), cert.gain.clone(), sigma.clone(), z0_hat.clone())?;
    let u = DVector::zeros(model.m());
    let rhs = |_: f64, s: &DVector<f64>, u: &DVector<f64>| {
        let z = s.rows(0, r).into_owned();
        let z_hat = s.rows(r, r).into_owned();
        let y = &model.c_o * &z;
        let dz = model.drift(&z, u);
        let dz_hat = model.drift(&z_hat, u) + observer.correction(&z_hat, &y);
        DVector::from_iterator(2 * r, dz.iter().chain(dz_hat.iter()).cloned())
    };
    let mut s = DVector::from_iterator(2 * r, z0.iter().chain(z0_hat.iter()).cloned());
    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let e = s.rows(0, r) - s.rows(r, r);
        out.push((k as f64 * dt, cert.to_certificate_coords(&e).norm()));
        if k < steps {
            s = rk4_step(rhs, &s, &u, k as f64 * dt, dt)?;
        }
    }
    Ok(out)
}

/// What `emit_report` writes; only the parts present are emitted.
pub struct ReportInput<'a> {
    pub pipeline: &'a Pipeline,
    pub benchmark: Option<&'a BenchmarkRun>,
    pub sweep: Option<&'a SweepResult>,
    /// Wall-clock times make the output non-reproducible, so they are opt-in.
    pub record_timings: bool,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn trials_csv(trials: &[TrialResult]) -> String {
    let mut out = String::from("seed,observer,rmse,rmse_x1,rmse_x2,max_err,diverged\n");
    for t in trials {
        for o in &t.outcomes {
            let per: Vec<String> = o.rmse_per_state.iter().map(|v| fmt_full(*v)).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                t.seed,
                o.observer.key(),
                fmt_full(o.rmse),
                per.join(","),
                fmt_full(o.max_error),
                o.diverged
            );
        }
    }
    out
}

pub fn summary_csv(summary: &SummaryTable) -> String {
    let mut out = String::from("observer,rmse_mean,rmse_std,rmse_x1_mean,rmse_x2_mean,max_err_mean,improvement,diverged,trials\n");
    for r in &summary.rows {
        let per: Vec<String> = r.rmse_mean_per_state.iter().map(|v| fmt_full(*v)).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.observer.key(),
            fmt_full(r.rmse_mean),
            fmt_full(r.rmse_std),
            per.join(","),
            fmt_full(r.max_error_mean),
            fmt_full(r.improvement),
            r.diverged,
            summary.trials
        );
    }
    out
}

pub fn sweep_csv(sweep: &SweepResult) -> String {
    let mut out = String::from("epsilon,observer,rmse_mean,rmse_std,theorem2_bound,steady_max_error,diverged\n");
    for r in &sweep.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            fmt_full(r.epsilon),
            r.observer.key(),
            fmt_full(r.rmse_mean),
            fmt_full(r.rmse_std),
            fmt_full(r.ultimate_bound),
            fmt_full(r.steady_max_error),
            r.diverged
        );
    }
    out
}

pub fn report_text(input: &ReportInput<'_>) -> String {
    let p = input.pipeline;
    let cert = &p.certificate;
    let config = &p.config;
    let mut out = String::new();
    let _ = writeln!(out, "benchmark: {}", config.benchmark.name());
    let _ = writeln!(out, "seed: {}", config.seed);
    let _ = writeln!(out, "dictionary: r = {} ({})", p.model.r(), cert.dictionary_hash);
    let _ = writeln!(out, "burn-in excluded from RMSE: {} s", fmt_full(config.evaluation.burn_in));
    let _ = writeln!(out, "ekf process weight: {}", fmt_full(p.ekf_process));
    if let Some(run) = input.benchmark {
        let s = &run.summary;
        let _ = writeln!(out);
        let _ = writeln!(out, "Estimation performance (mean ± std over {} trials)", s.trials);
        let _ = writeln!(
            out,
            "{:<8} {:>24} {:>24} {:>24} {:>24} {:>24} {:>8}",
            "observer", "rmse_mean", "rmse_std", "rmse_x1", "rmse_x2", "improvement", "diverged"
        );
        for r in &s.rows {
            let per = |i: usize| r.rmse_mean_per_state.get(i).map_or(f64::NAN, |v| *v);
            let _ = writeln!(
                out,
                "{:<8} {:>24} {:>24} {:>24} {:>24} {:>24} {:>8}",
                r.observer.label(),
                fmt_full(r.rmse_mean),
                fmt_full(r.rmse_std),
                fmt_full(per(0)),
                fmt_full(per(1)),
                fmt_full(r.improvement),
                r.diverged
            );
        }
        let _ = writeln!(out, "trials with a divergent observer: {}", s.diverged_trials);
    }
    if let Some(sweep) = input.sweep {
        let _ = writeln!(out);
        let _ = writeln!(out, "Residual sweep (bound = c·(‖T‖·ε + noise term))");
        let _ = writeln!(
            out,
            "c = {}, ‖T‖ = {}, noise term = {}",
            fmt_full(sweep.bound.c),
            fmt_full(sweep.bound.transform_norm),
            fmt_full(sweep.bound.noise_term)
        );
        for (kind, fit) in &sweep.fits {
            let _ = writeln!(
                out,
                "{:<8} slope {} intercept {} r^2 {}",
                kind.label(),
                fmt_full(fit.slope),
                fmt_full(fit.intercept),
                fmt_full(fit.r_squared)
            );
        }
        let _ = writeln!(out, "PKO contained at every grid point: {}", sweep.contained());
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "Certificate");
    let c = bound_coefficient(cert.gamma, cert.alpha, cert.p_max(), cert.p_min());
    for (name, value) in [
        ("gamma", cert.gamma),
        ("alpha", cert.alpha),
        ("beta", cert.beta),
        ("c", c),
        ("rho", cert.rho),
        ("xi_max_eig", cert.xi_max_eig),
        ("xi_norm", cert.xi_norm),
    ] {
        let _ = writeln!(out, "{name}: {}", fmt_full(value));
    }
    let _ = writeln!(out, "decision_variables: {}", cert.decision_variables);
    let _ = writeln!(out, "coordinates: {:?}", cert.coordinates);
    match (input.record_timings, cert.solver.wall_time_s) {
        (true, Some(t)) => {
            let _ = writeln!(out, "solver_wall_time_s: {}", fmt_full(t));
        }
        _ => {
            let _ = writeln!(out, "solver_wall_time_s: not recorded");
        }
    }
    if let Some(emb) = &cert.embedding {
        let _ = writeln!(out, "disturbance_bound: {}", fmt_full(emb.disturbance_bound));
        let _ = writeln!(out, "split_d_bound: {}", fmt_full(emb.split.d_bound));
    }
    out
}

/// Writes `config.json`, `model.json`, `cert.json`, `report.txt` and the
/// CSV files for whatever experiments are present.
pub fn emit_report(out: &Path, input: &ReportInput<'_>) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let p = input.pipeline;
    write_file(&out.join("config.json"), &p.config.to_json())?;
    p.model.save(&out.join("model.json"))?;
    let mut cert = p.certificate.clone();
    if !input.record_timings {
        cert.solver.wall_time_s = None;
    }
    cert.save(&out.join("cert.json"))?;
    if let Some(run) = input.benchmark {
        write_file(&out.join("trials.csv"), &trials_csv(&run.trials))?;
        write_file(&out.join("summary.csv"), &summary_csv(&run.summary))?;
        let traced: Vec<&TrialResult> = run.trials.iter().filter(|t| t.traces.is_some()).collect();
        if !traced.is_empty() {
            let dir = out.join("traces");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for t in traced {
                t.traces
                    .as_ref()
                    .expect("filtered")
                    .write_csv(&dir.join(format!("trial_{}.csv", t.seed)))?;
            }
        }
    }
    if let Some(sweep) = input.sweep {
        write_file(&out.join("sweep.csv"), &sweep_csv(sweep))?;
    }
    write_file(&out.join("report.txt"), &report_text(input))
}
