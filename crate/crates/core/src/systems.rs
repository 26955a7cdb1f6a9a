//! Ground-truth plants, the fixed-step integrator, input generators and
//! seeded measurement noise.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VdpParams {
    pub mu: f64,
}

impl Default for VdpParams {
    fn default() -> Self {
        Self { mu: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmParams {
    /// Inertia, kg·m².
    pub inertia: f64,
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    /// Viscous joint damping.
    pub b_f: f64,
    /// Coulomb friction level.
    pub f_c: f64,
    /// Velocity-proportional friction.
    pub f_v: f64,
    /// Scale of the `tanh` that replaces `sgn` in the Coulomb term.
    pub sgn_smoothing: f64,
}

impl Default for ArmParams {
    fn default() -> Self {
        Self {
            inertia: 0.5,
            mass: 1.0,
            length: 0.5,
            gravity: 9.81,
            b_f: 0.2,
            f_c: 0.5,
            f_v: 0.3,
            sgn_smoothing: 0.01,
        }
    }
}

impl ArmParams {
    /// Friction model with both coefficients scaled by `factor`.
    pub fn with_friction_scale(mut self, factor: f64) -> Self {
        self.f_c *= factor;
        self.f_v *= factor;
        self
    }

    pub fn friction(&self, omega: f64) -> f64 {
        self.f_c * (omega / self.sgn_smoothing).tanh() + self.f_v * omega
    }

    fn friction_slope(&self, omega: f64) -> f64 {
        let t = (omega / self.sgn_smoothing).tanh();
        self.f_c * (1.0 - t * t) / self.sgn_smoothing + self.f_v
    }

    fn validate(&self) -> Result<()> {
        let positive = [self.inertia, self.mass, self.length, self.gravity, self.sgn_smoothing];
        let nonneg = [self.b_f, self.f_c, self.f_v];
        if positive.iter().any(|v| !(*v > 0.0)) || nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidParameter(format!("arm parameters out of range: {self:?}")));
        }
        Ok(())
    }
}

/// `ẋ₁ = x₂`, `ẋ₂ = μ(1 − x₁²)x₂ − x₁ + u`.
pub fn vdp_dynamics(x: [f64; 2], u: f64, params: &VdpParams) -> [f64; 2] {
    [x[1], params.mu * (1.0 - x[0] * x[0]) * x[1] - x[0] + u]
}

/// Single-link arm: `J θ̈ = −m g l sin θ − b_f θ̇ − F(θ̇) + τ`.
pub fn arm_dynamics(x: [f64; 2], tau: f64, p: &ArmParams) -> [f64; 2] {
    let (theta, omega) = (x[0], x[1]);
    let acc = (-p.mass * p.gravity * p.length * theta.sin() - p.b_f * omega - p.friction(omega)
        + tau)
        / p.inertia;
    [omega, acc]
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PlantKind {
    VanDerPol(VdpParams),
    Arm(ArmParams),
    Linear(LinearPlant),
}

/// A plant `ẋ = f(x, u)` with coordinate measurements `y = x[measured]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plant {
    pub kind: PlantKind,
    pub measured: Vec<usize>,
}

impl Plant {
    pub fn van_der_pol(params: VdpParams) -> Result<Self> {
        if !(params.mu > 0.0) {
            return Err(Error::InvalidParameter("mu must be positive".into()));
        }
        Ok(Self {
            kind: PlantKind::VanDerPol(params),
            measured: vec![0],
        })
    }

    pub fn arm(params: ArmParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            kind: PlantKind::Arm(params),
            measured: vec![0],
        })
    }

    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>, measured: Vec<usize>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n {
            return Err(Error::Dimension("linear plant needs square A and n-row B".into()));
        }
        if let Some(&index) = measured.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index, dim: n });
        }
        Ok(Self {
            kind: PlantKind::Linear(LinearPlant { a, b }),
            measured,
        })
    }

    pub fn state_dim(&self) -> usize {
        match &self.kind {
            PlantKind::VanDerPol(_) | PlantKind::Arm(_) => 2,
            PlantKind::Linear(l) => l.a.nrows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.kind {
            PlantKind::VanDerPol(_) | PlantKind::Arm(_) => 1,
            PlantKind::Linear(l) => l.b.ncols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.measured.len()
    }

    pub fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            PlantKind::VanDerPol(p) => {
                DVector::from_row_slice(&vdp_dynamics([x[0], x[1]], u[0], p))
            }
            PlantKind::Arm(p) => DVector::from_row_slice(&arm_dynamics([x[0], x[1]], u[0], p)),
            PlantKind::Linear(l) => &l.a * x + &l.b * u,
        }
    }

    /// Analytic `∂f/∂x`.
    pub fn jacobian(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        match &self.kind {
            PlantKind::VanDerPol(p) => DMatrix::from_row_slice(
                2,
                2,
                &[
                    0.0,
                    1.0,
                    -2.0 * p.mu * x[0] * x[1] - 1.0,
                    p.mu * (1.0 - x[0] * x[0]),
                ],
            ),
            PlantKind::Arm(p) => DMatrix::from_row_slice(
                2,
                2,
                &[
                    0.0,
                    1.0,
                    -p.mass * p.gravity * p.length * x[0].cos() / p.inertia,
                    -(p.b_f + p.friction_slope(x[1])) / p.inertia,
                ],
            ),
            PlantKind::Linear(l) => l.a.clone(),
        }
    }

    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.measured.len(), self.measured.iter().map(|&i| x[i]))
    }

    /// `∂h/∂x` for coordinate measurements.
    pub fn output_jacobian(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.measured.len(), self.state_dim());
        for (row, &i) in self.measured.iter().enumerate() {
            h[(row, i)] = 1.0;
        }
        h
    }

    pub fn parameters(&self) -> BTreeMap<String, f64> {
        let mut map = BTreeMap::new();
        match &self.kind {
            PlantKind::VanDerPol(p) => {
                map.insert("mu".into(), p.mu);
            }
            PlantKind::Arm(p) => {
                for (k, v) in [
                    ("J", p.inertia),
                    ("m", p.mass),
                    ("l", p.length),
                    ("g", p.gravity),
                    ("b_f", p.b_f),
                    ("f_c", p.f_c),
                    ("f_v", p.f_v),
                    ("sgn_smoothing", p.sgn_smoothing),
                ] {
                    map.insert(k.into(), v);
                }
            }
            PlantKind::Linear(_) => {}
        }
        map
    }
}

/// One classical Runge–Kutta step with the input held over `[t, t + dt]`.
pub fn rk4_step<F>(f: F, x: &DVector<f64>, u: &DVector<f64>, t: f64, dt: f64) -> Result<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter("dt must be positive".into()));
    }
    let h2 = 0.5 * dt;
    let k1 = f(t, x, u);
    let k2 = f(t + h2, &(x + &k1 * h2), u);
    let k3 = f(t + h2, &(x + &k2 * h2), u);
    let k4 = f(t + dt, &(x + &k3 * dt), u);
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::IntegrationBlowup { time: t + dt })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub variance: f64,
    pub seed: u64,
    pub stream_id: u64,
}

impl NoiseSpec {
    pub fn silent() -> Self {
        Self {
            variance: 0.0,
            seed: 0,
            stream_id: 0,
        }
    }
}

/// Seeded source keyed by `(seed, stream)`; no global RNG state anywhere.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Gaussian measurement noise, i.i.d. per sample.
pub struct NoiseSource {
    std: f64,
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(spec: &NoiseSpec) -> Result<Self> {
        if !(spec.variance >= 0.0) {
            return Err(Error::InvalidParameter("noise variance must be non-negative".into()));
        }
        Ok(Self {
            std: spec.variance.sqrt(),
            rng: seeded_rng(spec.seed, spec.stream_id),
        })
    }

    pub fn sample(&mut self, dim: usize) -> DVector<f64> {
        if self.std == 0.0 {
            return DVector::zeros(dim);
        }
        DVector::from_iterator(
            dim,
            (0..dim).map(|_| self.std * self.rng.sample::<f64, _>(StandardNormal)),
        )
    }
}

/// Piecewise-constant input, one value per sample (held until the next).
#[derive(Clone, Debug, PartialEq)]
pub struct InputSignal {
    pub values: Vec<DVector<f64>>,
}

impl InputSignal {
    pub fn zeros(dim: usize, samples: usize) -> Self {
        Self {
            values: vec![DVector::zeros(dim); samples],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }

    pub fn at(&self, k: usize) -> &DVector<f64> {
        &self.values[k.min(self.values.len() - 1)]
    }
}

pub fn step_count(duration: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(duration > 0.0) {
        return Err(Error::InvalidParameter("duration and dt must be positive".into()));
    }
    let steps = (duration / dt).round();
    if (steps * dt - duration).abs() > 1e-9 * duration.max(1.0) {
        return Err(Error::InvalidParameter(format!(
            "duration {duration} is not a whole number of steps of {dt}"
        )));
    }
    Ok(steps as usize)
}

/// Pseudo-random torque: uniform levels on `[−amplitude, amplitude]`, each
/// held for `hold_steps` samples.
pub fn prbs_torque(seed: u64, duration: f64, dt: f64, amplitude: f64, hold_steps: usize) -> Result<InputSignal> {
    if !(amplitude >= 0.0) || hold_steps == 0 {
        return Err(Error::InvalidParameter(
            "prbs needs amplitude >= 0 and hold_steps >= 1".into(),
        ));
    }
    let samples = step_count(duration, dt)? + 1;
    let mut rng = seeded_rng(seed, 0x5052_4253);
    let mut values = Vec::with_capacity(samples);
    let mut level = 0.0;
    for k in 0..samples {
        if k % hold_steps == 0 {
            level = if amplitude > 0.0 {
                rng.random_range(-amplitude..=amplitude)
            } else {
                0.0
            };
        }
        values.push(DVector::from_element(1, level));
    }
    Ok(InputSignal { values })
}

/// Smooth bounded signal `w(t)` with `|w(t)| ≤ 1`: per component a seeded
/// sum of sinusoids whose amplitudes add up to `1/√dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothSignal {
    terms: Vec<Vec<(f64, f64, f64)>>,
}

impl SmoothSignal {
    pub fn new(seed: u64, stream: u64, dim: usize) -> Self {
        let mut rng = seeded_rng(seed, stream);
        let per_component = 1.0 / (dim as f64).sqrt();
        let terms = (0..dim)
            .map(|_| {
                let raw: Vec<(f64, f64, f64)> = (0..3)
                    .map(|_| {
                        let amp = rng.random_range(0.2..1.0);
                        let omega = rng.random_range(0.5..4.0);
                        let phase = rng.random_range(0.0..std::f64::consts::TAU);
                        (amp, omega, phase)
                    })
                    .collect();
                let total: f64 = raw.iter().map(|t| t.0).sum();
                raw.into_iter()
                    .map(|(a, w, p)| (a * per_component / total, w, p))
                    .collect()
            })
            .collect();
        Self { terms }
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    pub fn at(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(
            self.terms.len(),
            self.terms
                .iter()
                .map(|c| c.iter().map(|(a, w, p)| a * (w * t + p).sin()).sum::<f64>()),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub outputs_clean: Vec<DVector<f64>>,
    pub outputs_noisy: Vec<DVector<f64>>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let n = self.states[0].len();
        let m = self.inputs[0].len();
        let p = self.outputs_clean[0].len();
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.extend((1..=p).map(|i| format!("y{i}")));
        header.extend((1..=p).map(|i| format!("y_noisy{i}")));
        writeln!(out, "{}", header.join(",")).expect("vec write");
        for k in 0..self.len() {
            let row: Vec<String> = std::iter::once(self.times[k])
                .chain(self.states[k].iter().cloned())
                .chain(self.inputs[k].iter().cloned())
                .chain(self.outputs_clean[k].iter().cloned())
                .chain(self.outputs_noisy[k].iter().cloned())
                .map(fmt_full)
                .collect();
            writeln!(out, "{}", row.join(",")).expect("vec write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_full(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub fn simulate_plant(
    plant: &Plant,
    x0: &DVector<f64>,
    input: &InputSignal,
    duration: f64,
    dt: f64,
    noise: &NoiseSpec,
) -> Result<Trace> {
    simulate_plant_disturbed(plant, x0, input, duration, dt, noise, None)
}

/// Same as [`simulate_plant`] with an optional additive state disturbance
/// `ẋ = f(x, u) + w(t)`.
pub fn simulate_plant_disturbed(
    plant: &Plant,
    x0: &DVector<f64>,
    input: &InputSignal,
    duration: f64,
    dt: f64,
    noise: &NoiseSpec,
    disturbance: Option<&dyn Fn(f64) -> DVector<f64>>,
) -> Result<Trace> {
    let steps = step_count(duration, dt)?;
    if x0.len() != plant.state_dim() {
        return Err(Error::Dimension("initial state does not match the plant".into()));
    }
    if input.values.is_empty() || input.dim() != plant.input_dim() {
        return Err(Error::Dimension("input signal does not match the plant".into()));
    }
    let mut source = NoiseSource::new(noise)?;
    let p = plant.output_dim();
    let mut trace = Trace {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps + 1),
        outputs_clean: Vec::with_capacity(steps + 1),
        outputs_noisy: Vec::with_capacity(steps + 1),
    };
    let rhs = |t: f64, x: &DVector<f64>, u: &DVector<f64>| {
        let mut dx = plant.dynamics(x, u);
        if let Some(w) = disturbance {
            dx += w(t);
        }
        dx
    };
    let mut x = x0.clone();
    for k in 0..=steps {
        let t = k as f64 * dt;
        let u = input.at(k).clone();
        let y = plant.output(&x);
        let y_noisy = &y + source.sample(p);
        trace.times.push(t);
        trace.states.push(x.clone());
        trace.inputs.push(u.clone());
        trace.outputs_clean.push(y);
        trace.outputs_noisy.push(y_noisy);
        if k < steps {
            x = rk4_step(rhs, &x, &u, t, dt)?;
        }
    }
    Ok(trace)
}
