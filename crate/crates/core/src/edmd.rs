//! Continuous-time EDMD: least-squares identification of `ż = A z + B u`
//! from lifted trajectory data, and measurement of the lifting residual
//! envelope `|Δ| ≤ ρ|z| + η̄`.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lifting::{build_dictionary, DictionarySpec, ObservableDictionary};
use crate::linalg::{from_rows, to_rows, Mat};
use crate::systems::{Plant, Trace};

/// Traces sharing one sampling step, lifted through one dictionary.
pub struct TrajectoryDataset<'a> {
    pub traces: &'a [Trace],
    pub dictionary: &'a ObservableDictionary,
    /// Measured state coordinates, used to build `C_o`.
    pub measured: &'a [usize],
}

#[derive(Clone, Debug, PartialEq)]
pub struct KoopmanModel {
    pub dictionary: ObservableDictionary,
    pub a: Mat,
    pub b: Mat,
    pub c_o: Mat,
    pub measured: Vec<usize>,
    pub ridge_lambda: f64,
    pub residual: Option<ResidualSummary>,
    /// Largest `|θ̇|` seen in training; sizes the friction sector bound.
    pub omega_max: Option<f64>,
}

/// The scalar part of a [`ResidualCharacterization`], stored with the model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualSummary {
    pub rho: f64,
    pub eta_bar: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualCharacterization {
    pub rho: f64,
    pub eta_bar: f64,
    pub epsilon: f64,
    /// `(|z_k|, |Δ_k|)` per validation sample.
    pub samples: Vec<(f64, f64)>,
}

impl ResidualCharacterization {
    pub fn summary(&self) -> ResidualSummary {
        ResidualSummary {
            rho: self.rho,
            eta_bar: self.eta_bar,
            epsilon: self.epsilon,
        }
    }
}

impl KoopmanModel {
    pub fn r(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.c_o.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.dictionary.state_dim()
    }

    pub fn rho(&self) -> f64 {
        self.residual.map_or(0.0, |r| r.rho)
    }

    /// Lifted vector field of the model, `A z + B u`.
    pub fn drift(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * z + &self.b * u
    }
}

/// Default ridge weight: `1e-6 · trace(G) / r` for the regressor Gram matrix `G`.
pub fn default_ridge(gram_trace: f64, r: usize) -> f64 {
    1e-6 * gram_trace / r as f64
}

/// Fits `(A, B)` by ridge least squares on centered finite-difference
/// derivatives. `ridge_lambda = None` selects [`default_ridge`].
///
/// The centered difference at sample `k` straddles two hold intervals, so
/// the regressor input is the average `(u_{k−1} + u_k)/2`.
pub fn fit_edmd(dataset: &TrajectoryDataset<'_>, ridge_lambda: Option<f64>) -> Result<KoopmanModel> {
    let dict = dataset.dictionary;
    let traces = dataset.traces;
    if traces.is_empty() {
        return Err(Error::InsufficientData("dataset has no traces".into()));
    }
    let n = dict.state_dim();
    let r = dict.total_dim();
    let m = traces[0].inputs[0].len();
    let dt = traces[0].dt();
    for t in traces {
        if t.len() < 3 {
            return Err(Error::InsufficientData("traces need at least 3 samples".into()));
        }
        if (t.dt() - dt).abs() > 1e-12 * dt {
            return Err(Error::InsufficientData("traces do not share a sampling step".into()));
        }
        if t.states[0].len() != n || t.inputs[0].len() != m {
            return Err(Error::Dimension("trace dimensions disagree with the dictionary".into()));
        }
    }
    let samples: usize = traces.iter().map(|t| t.len() - 2).sum();
    let q = r + m;
    if samples < 10 * q {
        return Err(Error::InsufficientData(format!(
            "{samples} regression samples, need at least {}",
            10 * q
        )));
    }

    let mut gram = Mat::zeros(q, q);
    let mut cross = Mat::zeros(r, q);
    let mut psi = DVector::zeros(q);
    for trace in traces {
        let lifted: Vec<DVector<f64>> = trace
            .states
            .iter()
            .map(|x| dict.lift(x.as_slice()))
            .collect::<Result<_>>()?;
        for k in 1..trace.len() - 1 {
            let zdot = (&lifted[k + 1] - &lifted[k - 1]) / (2.0 * dt);
            psi.rows_mut(0, r).copy_from(&lifted[k]);
            if m > 0 {
                let u = (&trace.inputs[k - 1] + &trace.inputs[k]) * 0.5;
                psi.rows_mut(r, m).copy_from(&u);
            }
            gram.ger(1.0, &psi, &psi, 1.0);
            cross.ger(1.0, &zdot, &psi, 1.0);
        }
    }

    let lambda = match ridge_lambda {
        Some(l) if l < 0.0 || !l.is_finite() => {
            return Err(Error::InvalidParameter("ridge_lambda must be finite and >= 0".into()))
        }
        Some(l) => l,
        None => default_ridge(gram.trace(), r),
    };
    if lambda == 0.0 {
        let eig = gram.clone().symmetric_eigen().eigenvalues;
        let max = eig.iter().cloned().fold(0.0, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(max > 0.0) || min <= 1e-13 * max {
            return Err(Error::SingularSystem);
        }
    }
    let regularized = &gram + Mat::identity(q, q) * lambda;
    let chol = regularized.cholesky().ok_or(Error::SingularSystem)?;
    // Θ G = C  ⇔  G Θᵀ = Cᵀ
    let theta = chol.solve(&cross.transpose()).transpose();
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem);
    }

    Ok(KoopmanModel {
        dictionary: dict.clone(),
        a: theta.columns(0, r).into_owned(),
        b: theta.columns(r, m).into_owned(),
        c_o: dict.output_matrix(dataset.measured)?,
        measured: dataset.measured.to_vec(),
        ridge_lambda: lambda,
        residual: None,
        omega_max: None,
    })
}

/// Exact lifting residual `Δ = DΦ(x) f(x, u) − A Φ(x) − B u` against a plant.
pub fn true_residual(
    model: &KoopmanModel,
    plant: &Plant,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    if plant.state_dim() != model.state_dim() {
        return Err(Error::Dimension("plant and model state dimensions differ".into()));
    }
    let z = model.dictionary.lift(x.as_slice())?;
    let jac = model.dictionary.lift_jacobian(x.as_slice())?;
    Ok(jac * plant.dynamics(x, u) - model.drift(&z, u))
}

const RHO_GRID_POINTS: usize = 100;

/// Picks `(ρ, η̄)` from `(|z_k|, |Δ_k|)` samples: a 100-point grid on
/// `[0, ρ_max]` minimizing `η̄(ρ) + w·ρ·median|z|`.
pub fn envelope_from_samples(samples: Vec<(f64, f64)>, weight: f64) -> Result<ResidualCharacterization> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("empty validation set".into()));
    }
    let epsilon = samples.iter().map(|s| s.1).fold(0.0, f64::max);
    let rho_max = samples
        .iter()
        .filter(|s| s.0 > 1e-12)
        .map(|s| s.1 / s.0)
        .fold(0.0, f64::max);
    let mut norms: Vec<f64> = samples.iter().map(|s| s.0).collect();
    norms.sort_by(|a, b| a.total_cmp(b));
    let median = norms[norms.len() / 2];
    let eta_of = |rho: f64| {
        samples
            .iter()
            .map(|&(z, d)| (d - rho * z).max(0.0))
            .fold(0.0, f64::max)
    };
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..RHO_GRID_POINTS {
        let rho = rho_max * i as f64 / (RHO_GRID_POINTS - 1) as f64;
        let eta = eta_of(rho);
        let objective = eta + weight * rho * median;
        if objective < best.0 {
            best = (objective, rho, eta);
        }
    }
    Ok(ResidualCharacterization {
        rho: best.1,
        eta_bar: best.2,
        epsilon,
        samples,
    })
}

pub fn estimate_residual_bound(
    model: &KoopmanModel,
    plant: &Plant,
    validation: &[Trace],
    weight: f64,
) -> Result<ResidualCharacterization> {
    let mut samples = Vec::new();
    for trace in validation {
        for (x, u) in trace.states.iter().zip(&trace.inputs) {
            let delta = true_residual(model, plant, x, u)?;
            let z = model.dictionary.lift(x.as_slice())?;
            samples.push((z.norm(), delta.norm()));
        }
    }
    envelope_from_samples(samples, weight)
}

/// On-disk form of a [`KoopmanModel`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub state_dim: usize,
    pub r: usize,
    pub m: usize,
    pub p: usize,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C_o")]
    pub c_o: Vec<Vec<f64>>,
    pub dictionary: DictionarySpec,
    pub measured: Vec<usize>,
    pub ridge_lambda: f64,
    pub rho: Option<f64>,
    pub eta_bar: Option<f64>,
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_max: Option<f64>,
}

impl KoopmanModel {
    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            state_dim: self.state_dim(),
            r: self.r(),
            m: self.m(),
            p: self.p(),
            a: to_rows(&self.a),
            b: to_rows(&self.b),
            c_o: to_rows(&self.c_o),
            dictionary: self.dictionary.spec().clone(),
            measured: self.measured.clone(),
            ridge_lambda: self.ridge_lambda,
            rho: self.residual.map(|r| r.rho),
            eta_bar: self.residual.map(|r| r.eta_bar),
            epsilon: self.residual.map(|r| r.epsilon),
            omega_max: self.omega_max,
        }
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        let dictionary = build_dictionary(&file.dictionary)?;
        if dictionary.total_dim() != file.r || dictionary.state_dim() != file.state_dim {
            return Err(Error::Dimension("model dimensions disagree with its dictionary".into()));
        }
        let c_o = from_rows(&file.c_o, file.p, file.r, "C_o")?;
        if c_o != dictionary.output_matrix(&file.measured)? {
            return Err(Error::Dimension("C_o is not the selector of `measured`".into()));
        }
        let residual = match (file.rho, file.eta_bar, file.epsilon) {
            (Some(rho), Some(eta_bar), Some(epsilon)) => Some(ResidualSummary {
                rho,
                eta_bar,
                epsilon,
            }),
            (None, None, None) => None,
            _ => return Err(Error::Config("rho, eta_bar and epsilon must come together".into())),
        };
        Ok(Self {
            a: from_rows(&file.a, file.r, file.r, "A")?,
            b: from_rows(&file.b, file.r, file.m, "B")?,
            c_o,
            measured: file.measured.clone(),
            ridge_lambda: file.ridge_lambda,
            residual,
            omega_max: file.omega_max,
            dictionary,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file(&serde_json::from_str(&text)?)
    }
}
