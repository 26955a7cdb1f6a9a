//! The three estimators compared in the benchmarks: the sector-corrected
//! Koopman observer, a linear Koopman Luenberger observer and a
//! continuous-discrete EKF on the original plant.
//!
//! Every observer consumes `(u_k, y_k)` at `t_k` and advances its estimate
//! to `t_{k+1}`, so the estimate at `t_{k+1}` depends on `y_0..y_k` only.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::edmd::KoopmanModel;
use crate::error::{Error, Result};
use crate::linalg::{check_detectable, filter_are, spectral_abscissa, symmetrize, Mat};
use crate::persidskii::{sector_check, SectorGrid, SectorNonlinearity};
use crate::systems::{rk4_step, Plant};

/// Lifted estimates beyond this norm count as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e8;

fn check_finite(v: &DVector<f64>, time: f64) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) && v.norm() <= DIVERGENCE_THRESHOLD {
        Ok(())
    } else {
        Err(Error::ObserverDiverged { time })
    }
}

fn check_step(u: &DVector<f64>, y: &DVector<f64>, m: usize, p: usize, dt: f64) -> Result<()> {
    if u.len() != m || y.len() != p {
        return Err(Error::Dimension(format!(
            "observer step expects u in R^{m} and y in R^{p}, got {} and {}",
            u.len(),
            y.len()
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter("dt must be positive".into()));
    }
    Ok(())
}

/// `ẑ̇ = A ẑ + B u + K σ(y − C_o ẑ)`.
#[derive(Clone, Debug)]
pub struct PkoObserver {
    model: KoopmanModel,
    gain: Mat,
    sigma: SectorNonlinearity,
    z_hat: DVector<f64>,
    time: f64,
}

impl PkoObserver {
    /// Starts from `ẑ(0) = Φ(x̂(0))`.
    pub fn new(model: KoopmanModel, gain: Mat, sigma: SectorNonlinearity, x0_hat: &DVector<f64>) -> Result<Self> {
        let z0 = model.dictionary.lift(x0_hat.as_slice())?;
        Self::from_lifted(model, gain, sigma, z0)
    }

    pub fn from_lifted(model: KoopmanModel, gain: Mat, sigma: SectorNonlinearity, z0: DVector<f64>) -> Result<Self> {
        if gain.shape() != (model.r(), model.p()) {
            return Err(Error::Dimension(format!(
                "gain must be {}x{}, got {}x{}",
                model.r(),
                model.p(),
                gain.nrows(),
                gain.ncols()
            )));
        }
        if sigma.channels() != model.p() {
            return Err(Error::Dimension("one sector channel per measured output".into()));
        }
        if z0.len() != model.r() {
            return Err(Error::Dimension("initial lifted estimate has the wrong length".into()));
        }
        sector_check(&sigma, &SectorGrid::default())?.into_result()?;
        Ok(Self {
            model,
            gain,
            sigma,
            z_hat: z0,
            time: 0.0,
        })
    }

    pub fn gain(&self) -> &Mat {
        &self.gain
    }

    pub fn lifted(&self) -> &DVector<f64> {
        &self.z_hat
    }

    /// Correction term `K σ(y − C_o z)`.
    pub fn correction(&self, z: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        &self.gain * self.sigma.eval(&(y - &self.model.c_o * z))
    }

    pub fn step(&mut self, u: &DVector<f64>, y: &DVector<f64>, dt: f64) -> Result<()> {
        check_step(u, y, self.model.m(), self.model.p(), dt)?;
        let rhs = |_: f64, z: &DVector<f64>, u: &DVector<f64>| self.model.drift(z, u) + self.correction(z, y);
        let next = rk4_step(rhs, &self.z_hat, u, self.time, dt).map_err(|_| Error::ObserverDiverged {
            time: self.time + dt,
        })?;
        self.time += dt;
        check_finite(&next, self.time)?;
        self.z_hat = next;
        Ok(())
    }

    /// The identity prefix of the lifted estimate.
    pub fn estimate_state(&self) -> DVector<f64> {
        self.model.dictionary.project(&self.z_hat)
    }
}

/// `ẑ̇ = A ẑ + B u + L (y − C_o ẑ)`.
#[derive(Clone, Debug)]
pub struct LinKoopObserver {
    model: KoopmanModel,
    gain: Mat,
    z_hat: DVector<f64>,
    time: f64,
}

impl LinKoopObserver {
    pub fn new(model: KoopmanModel, gain: Mat, x0_hat: &DVector<f64>) -> Result<Self> {
        let z0 = model.dictionary.lift(x0_hat.as_slice())?;
        Self::from_lifted(model, gain, z0)
    }

    pub fn from_lifted(model: KoopmanModel, gain: Mat, z0: DVector<f64>) -> Result<Self> {
        if gain.shape() != (model.r(), model.p()) {
            return Err(Error::Dimension(format!("gain must be {}x{}", model.r(), model.p())));
        }
        if z0.len() != model.r() {
            return Err(Error::Dimension("initial lifted estimate has the wrong length".into()));
        }
        let abscissa = spectral_abscissa(&(&model.a - &gain * &model.c_o));
        if !(abscissa < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "A - L C_o is not Hurwitz (spectral abscissa {abscissa:e})"
            )));
        }
        Ok(Self {
            model,
            gain,
            z_hat: z0,
            time: 0.0,
        })
    }

    pub fn gain(&self) -> &Mat {
        &self.gain
    }

    pub fn lifted(&self) -> &DVector<f64> {
        &self.z_hat
    }

    pub fn step(&mut self, u: &DVector<f64>, y: &DVector<f64>, dt: f64) -> Result<()> {
        check_step(u, y, self.model.m(), self.model.p(), dt)?;
        let rhs = |_: f64, z: &DVector<f64>, u: &DVector<f64>| {
            self.model.drift(z, u) + &self.gain * (y - &self.model.c_o * z)
        };
        let next = rk4_step(rhs, &self.z_hat, u, self.time, dt).map_err(|_| Error::ObserverDiverged {
            time: self.time + dt,
        })?;
        self.time += dt;
        check_finite(&next, self.time)?;
        self.z_hat = next;
        Ok(())
    }

    pub fn estimate_state(&self) -> DVector<f64> {
        self.model.dictionary.project(&self.z_hat)
    }
}

/// How the linear Koopman gain is designed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum GainDesign {
    /// Steady-state filter Riccati gain with `Q = process·I`, `R = measurement·I`.
    Riccati { process: f64, measurement: f64 },
    /// Ackermann placement at real poles (`r ≤ 4`, one output).
    Ackermann { poles: Vec<f64> },
}

pub fn linkoop_gain(model: &KoopmanModel, design: &GainDesign) -> Result<Mat> {
    let (a, c) = (&model.a, &model.c_o);
    match design {
        GainDesign::Riccati { process, measurement } => {
            if !(*process >= 0.0 && *measurement > 0.0) {
                return Err(Error::InvalidParameter("Riccati weights need Q >= 0 and R > 0".into()));
            }
            check_detectable(a, c)?;
            let r = a.nrows();
            let p = c.nrows();
            let y = filter_are(a, c, &(Mat::identity(r, r) * *process), &(Mat::identity(p, p) * *measurement))?;
            Ok(y * c.transpose() / *measurement)
        }
        GainDesign::Ackermann { poles } => ackermann(a, c, poles),
    }
}

/// Observer-form Ackermann: `L = φ(A) O⁻¹ e_r` with `O` the observability matrix.
pub fn ackermann(a: &Mat, c: &Mat, poles: &[f64]) -> Result<Mat> {
    let r = a.nrows();
    if c.nrows() != 1 || c.ncols() != r {
        return Err(Error::Dimension("Ackermann placement needs a single output row".into()));
    }
    if r > 4 {
        return Err(Error::InvalidParameter("Ackermann placement is limited to r <= 4".into()));
    }
    if poles.len() != r {
        return Err(Error::InvalidParameter(format!("need {r} poles, got {}", poles.len())));
    }
    let mut obs = Mat::zeros(r, r);
    let mut row = c.clone();
    for i in 0..r {
        obs.set_row(i, &row.row(0));
        row = &row * a;
    }
    let inv = obs
        .try_inverse()
        .ok_or_else(|| Error::Numerical("pair (A, C) is not observable".into()))?;
    // φ(A) = Π (A − pᵢ I)
    let mut phi = Mat::identity(r, r);
    for &pole in poles {
        phi = &phi * (a - Mat::identity(r, r) * pole);
    }
    let l = phi * inv.column(r - 1);
    Ok(Mat::from_column_slice(r, 1, l.as_slice()))
}

/// Continuous-discrete EKF on the nominal plant.
#[derive(Clone, Debug)]
pub struct EkfObserver {
    plant: Plant,
    process: Mat,
    measurement: Mat,
    x_hat: DVector<f64>,
    cov: Mat,
    time: f64,
}

impl EkfObserver {
    pub fn new(plant: Plant, process: Mat, measurement: Mat, x0_hat: DVector<f64>, cov0: Mat) -> Result<Self> {
        let n = plant.state_dim();
        let p = plant.output_dim();
        if process.shape() != (n, n) || cov0.shape() != (n, n) || measurement.shape() != (p, p) {
            return Err(Error::Dimension("EKF covariance shapes do not match the plant".into()));
        }
        if x0_hat.len() != n {
            return Err(Error::Dimension("initial estimate does not match the plant".into()));
        }
        let psd = |m: &Mat| symmetrize(m).symmetric_eigen().eigenvalues.min() >= -1e-12;
        if !psd(&process) || !psd(&cov0) {
            return Err(Error::InvalidParameter("Q and P0 must be positive semidefinite".into()));
        }
        if !(symmetrize(&measurement).symmetric_eigen().eigenvalues.min() > 0.0) {
            return Err(Error::InvalidParameter("R must be positive definite".into()));
        }
        Ok(Self {
            plant,
            process,
            measurement,
            x_hat: x0_hat,
            cov: symmetrize(&cov0),
            time: 0.0,
        })
    }

    pub fn estimate_state(&self) -> DVector<f64> {
        self.x_hat.clone()
    }

    pub fn covariance(&self) -> &Mat {
        &self.cov
    }

    /// Measurement update with `y` at the current time, then RK4 prediction
    /// of `(x̂, P)` to the next sample.
    pub fn step(&mut self, u: &DVector<f64>, y: &DVector<f64>, dt: f64) -> Result<()> {
        let n = self.plant.state_dim();
        check_step(u, y, self.plant.input_dim(), self.plant.output_dim(), dt)?;
        self.update(y)?;

        // x and vec(P) stacked in one vector
        let mut packed = DVector::zeros(n + n * n);
        packed.rows_mut(0, n).copy_from(&self.x_hat);
        packed.rows_mut(n, n * n).copy_from_slice(self.cov.as_slice());
        let rhs = |_: f64, v: &DVector<f64>, u: &DVector<f64>| {
            let x = v.rows(0, n).into_owned();
            let cov = Mat::from_column_slice(n, n, v.rows(n, n * n).as_slice());
            let f = self.plant.jacobian(&x, u);
            let dcov = &f * &cov + &cov * f.transpose() + &self.process;
            let mut out = DVector::zeros(n + n * n);
            out.rows_mut(0, n).copy_from(&self.plant.dynamics(&x, u));
            out.rows_mut(n, n * n).copy_from_slice(dcov.as_slice());
            out
        };
        let next = rk4_step(rhs, &packed, u, self.time, dt).map_err(|_| Error::ObserverDiverged {
            time: self.time + dt,
        })?;
        self.time += dt;
        self.x_hat = next.rows(0, n).into_owned();
        self.cov = clip_psd(&symmetrize(&Mat::from_column_slice(n, n, next.rows(n, n * n).as_slice())));
        check_finite(&self.x_hat, self.time)
    }

    fn update(&mut self, y: &DVector<f64>) -> Result<()> {
        let n = self.plant.state_dim();
        let h = self.plant.output_jacobian();
        let innovation_cov = &h * &self.cov * h.transpose() + &self.measurement;
        let inv = innovation_cov
            .cholesky()
            .ok_or_else(|| Error::Numerical("innovation covariance is singular".into()))?
            .inverse();
        let gain = &self.cov * h.transpose() * inv;
        self.x_hat += &gain * (y - self.plant.output(&self.x_hat));
        // Joseph form
        let ikh = Mat::identity(n, n) - &gain * &h;
        let cov = &ikh * &self.cov * ikh.transpose() + &gain * &self.measurement * gain.transpose();
        self.cov = clip_psd(&symmetrize(&cov));
        Ok(())
    }
}

/// Clips negative eigenvalues of a symmetric matrix to zero.
fn clip_psd(m: &Mat) -> Mat {
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.min() >= 0.0 {
        return m.clone();
    }
    let d = Mat::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0)));
    symmetrize(&(&eig.eigenvectors * d * eig.eigenvectors.transpose()))
}
