//! Observer gain synthesis: the Persidskii LMI as a sequence of SDPs over
//! the multiplier Λ, certificate verification, and the convergence and
//! ultimate-bound quantities derived from a certificate.
//!
//! The LMI constrains a diagonal Lyapunov matrix, so it is not invariant
//! under a change of lifted coordinates. When the dictionary coordinates
//! admit no diagonal certificate (any unmeasured lifted coordinate with a
//! non-negative diagonal entry in `A` rules one out), the problem is posed
//! in balanced coordinates `e' = T e` built from a filter Riccati solution.
//! The observer itself always runs in dictionary coordinates.

use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edmd::KoopmanModel;
use crate::error::{Error, Result};
use crate::linalg::{filter_are, from_rows, max_eig_sym, sqrtm_spd, sym_norm, symmetrize, to_rows, Mat};
use crate::persidskii::{ResidualSplit, SectorNonlinearity};
use crate::sdp::{self, SdpProblem, SdpSettings, SdpStatus, SymTriplet};

pub const P_MIN: f64 = 1e-6;
/// Largest condition number accepted for a balancing transform.
const MAX_TRANSFORM_CONDITION: f64 = 1e12;
/// Lyapunov scale up to which a balanced realization counts as admissible.
const ADMISSIBLE_SCALE: f64 = 1e3;
pub const P_MAX: f64 = 1e6;
pub const GAIN_BOUND: f64 = 1e6;
pub const G_MIN: f64 = 1e-8;
pub const G_MAX: f64 = 1e12;

/// One fixed-Λ instance of the LMI `Ξ(P, K̃, g) ⪯ −margin·I`.
///
/// Block layout of `Ξ` (size `2r + p`):
/// `[[Π₁₁, Π₁₂, P], [Π₁₂ᵀ, Π₂₂, 0], [P, 0, −gI]]` with
/// `Π₁₁ = He(PA) − K̃C − CᵀK̃ᵀ + ρI`, `Π₁₂ = K̃Λ + AᵀCᵀ`, `Π₂₂ = −2Λ·diag(κ)`.
///
/// Decision vector: `[p₁..p_r, K̃ row-major, g]` with `g = γ²`.
#[derive(Clone, Debug)]
pub struct LmiProblem {
    pub a: Mat,
    pub c_o: Mat,
    pub kappa: Vec<f64>,
    pub rho: f64,
    pub lambda: Vec<f64>,
    pub margin: f64,
    pub sdp: SdpProblem,
}

impl LmiProblem {
    pub fn r(&self) -> usize {
        self.a.nrows()
    }

    pub fn p(&self) -> usize {
        self.c_o.nrows()
    }

    pub fn xi_dim(&self) -> usize {
        2 * self.r() + self.p()
    }

    pub fn num_vars(&self) -> usize {
        self.r() + self.r() * self.p() + 1
    }

    /// Splits a decision vector into `(diag P, K̃, g)`.
    pub fn unpack(&self, x: &[f64]) -> (Vec<f64>, Mat, f64) {
        let (r, p) = (self.r(), self.p());
        let k_tilde = Mat::from_fn(r, p, |i, j| x[r + i * p + j]);
        (x[..r].to_vec(), k_tilde, x[r + r * p])
    }

    pub fn pack(&self, p_diag: &[f64], k_tilde: &Mat, g: f64) -> Vec<f64> {
        let mut x = p_diag.to_vec();
        for i in 0..self.r() {
            for j in 0..self.p() {
                x.push(k_tilde[(i, j)]);
            }
        }
        x.push(g);
        x
    }

    /// Dense reconstruction of `Ξ` from its blocks, independent of the SDP
    /// triplet encoding.
    pub fn xi(&self, p_diag: &[f64], k_tilde: &Mat, g: f64) -> Mat {
        let (r, p) = (self.r(), self.p());
        let pm = Mat::from_diagonal(&DVector::from_column_slice(p_diag));
        let lam = Mat::from_diagonal(&DVector::from_column_slice(&self.lambda));
        let kap = Mat::from_diagonal(&DVector::from_column_slice(&self.kappa));
        let pa = &pm * &self.a;
        let kc = k_tilde * &self.c_o;
        let pi11 = &pa + pa.transpose() - &kc - kc.transpose() + Mat::identity(r, r) * self.rho;
        let pi12 = k_tilde * &lam + self.a.transpose() * self.c_o.transpose();
        let pi22 = -(&lam * &kap) * 2.0;
        let n = self.xi_dim();
        let mut xi = Mat::zeros(n, n);
        xi.view_mut((0, 0), (r, r)).copy_from(&pi11);
        xi.view_mut((0, r), (r, p)).copy_from(&pi12);
        xi.view_mut((r, 0), (p, r)).copy_from(&pi12.transpose());
        xi.view_mut((r, r), (p, p)).copy_from(&pi22);
        xi.view_mut((0, r + p), (r, r)).copy_from(&pm);
        xi.view_mut((r + p, 0), (r, r)).copy_from(&pm);
        xi.view_mut((r + p, r + p), (r, r)).copy_from(&(Mat::identity(r, r) * -g));
        xi
    }

    /// Upper-left `(r + p)` block of `Ξ` plus `γ⁻²[P; 0][P; 0]ᵀ`: the
    /// Schur complement of the `−gI` block.
    pub fn schur_reduced(&self, p_diag: &[f64], k_tilde: &Mat, g: f64) -> Mat {
        let (r, p) = (self.r(), self.p());
        let xi = self.xi(p_diag, k_tilde, g);
        let mut red = xi.view((0, 0), (r + p, r + p)).into_owned();
        for i in 0..r {
            red[(i, i)] += p_diag[i] * p_diag[i] / g;
        }
        red
    }
}

/// Assembles the SDP for a fixed multiplier `Λ = diag(lambda)`.
pub fn build_lmi(a: &Mat, c_o: &Mat, kappa: &[f64], rho: f64, lambda: &[f64], margin: f64) -> Result<LmiProblem> {
    let r = a.nrows();
    let p = c_o.nrows();
    if a.ncols() != r || c_o.ncols() != r {
        return Err(Error::Dimension("A must be r x r and C_o p x r".into()));
    }
    if kappa.len() != p || lambda.len() != p {
        return Err(Error::Dimension(format!("kappa and lambda need {p} entries")));
    }
    if kappa.iter().chain(lambda).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidParameter("kappa and lambda must be positive".into()));
    }
    if !(rho >= 0.0 && rho.is_finite()) || !(margin >= 0.0) {
        return Err(Error::InvalidParameter("rho and margin must be non-negative".into()));
    }
    let dim = 2 * r + p;
    let mut constant = Mat::zeros(dim, dim);
    for i in 0..r {
        constant[(i, i)] = rho;
    }
    let ca = c_o * a;
    for i in 0..r {
        for j in 0..p {
            constant[(i, r + j)] = ca[(j, i)];
            constant[(r + j, i)] = ca[(j, i)];
        }
    }
    for j in 0..p {
        constant[(r + j, r + j)] = -2.0 * lambda[j] * kappa[j];
    }

    let mut terms: Vec<Vec<SymTriplet>> = Vec::with_capacity(r + r * p + 1);
    for i in 0..r {
        let mut t: Vec<SymTriplet> = Vec::new();
        for k in 0..r {
            let v = if k == i { 2.0 * a[(i, i)] } else { a[(i, k)] };
            if v != 0.0 {
                t.push((i, k, v));
            }
        }
        t.push((r + p + i, i, 1.0));
        terms.push(t);
    }
    for i in 0..r {
        for j in 0..p {
            let mut t: Vec<SymTriplet> = Vec::new();
            for b in 0..r {
                let v = if b == i { -2.0 * c_o[(j, i)] } else { -c_o[(j, b)] };
                if v != 0.0 {
                    t.push((i, b, v));
                }
            }
            t.push((i, r + j, lambda[j]));
            terms.push(t);
        }
    }
    terms.push((0..r).map(|k| (r + p + k, r + p + k, -1.0)).collect());

    let n = terms.len();
    let mut lower = vec![-GAIN_BOUND; n];
    let mut upper = vec![GAIN_BOUND; n];
    for i in 0..r {
        lower[i] = P_MIN;
        upper[i] = P_MAX;
    }
    lower[n - 1] = G_MIN;
    upper[n - 1] = G_MAX;
    let mut objective = vec![0.0; n];
    objective[n - 1] = 1.0;

    Ok(LmiProblem {
        a: a.clone(),
        c_o: c_o.clone(),
        kappa: kappa.to_vec(),
        rho,
        lambda: lambda.to_vec(),
        margin,
        sdp: SdpProblem {
            dim,
            constant,
            terms,
            objective,
            lower,
            upper,
            margin,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateMode {
    /// Dictionary coordinates when they can work, balanced otherwise.
    Auto,
    Dictionary,
    Balanced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordinates {
    Dictionary,
    Balanced,
}

/// Lifted model expressed in certificate coordinates `e' = T e`.
#[derive(Clone, Debug)]
pub struct Realization {
    pub coordinates: Coordinates,
    pub transform: Mat,
    pub inverse: Mat,
    pub a: Mat,
    pub c_o: Mat,
    /// `ρ·cond(T)`: the growth bound seen in the new coordinates.
    pub rho: f64,
}

impl Realization {
    pub fn dictionary(model: &KoopmanModel, rho: f64) -> Self {
        let r = model.r();
        Self {
            coordinates: Coordinates::Dictionary,
            transform: Mat::identity(r, r),
            inverse: Mat::identity(r, r),
            a: model.a.clone(),
            c_o: model.c_o.clone(),
            rho,
        }
    }

    /// `T = s·M^{1/2}` with `M = Y⁻¹ − Cᵀ diag(1/(2κ)) C` and `Y` the
    /// stabilizing solution of `AY + YAᵀ − YCᵀCY + wI = 0`.
    ///
    /// In these coordinates `P = σI` is feasible once `σ·λ_min(H) > ρ'`,
    /// where `H ≻ 0` is the dissipation the Riccati solution buys. The weight
    /// `w` is picked to minimize the required `σ`, and the scale `s` puts the
    /// matching multiplier at `Λ ≈ I`, the middle of the search grid.
    pub fn balanced(model: &KoopmanModel, kappa: &[f64], rho: f64) -> Result<Self> {
        let r = model.r();
        let p = model.p();
        let c = &model.c_o;
        let half_inv_kappa = Mat::from_fn(p, p, |i, j| if i == j { 0.5 / kappa[i] } else { 0.0 });
        // candidates: (required Lyapunov scale, dissipation floor, realization)
        let mut candidates: Vec<(f64, f64, Self)> = Vec::new();
        let mut last = None;
        for shift in [0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0] {
            let shifted = &model.a + Mat::identity(r, r) * shift;
            for w in [100.0, 10.0, 1.0, 0.1, 0.01, 1e-3, 1e-4] {
                let y = match filter_are(&shifted, c, &(Mat::identity(r, r) * w), &Mat::identity(p, p)) {
                    Ok(y) => y,
                    Err(e) => {
                        last = Some(e);
                        continue;
                    }
                };
                let Some(q) = symmetrize(&y).try_inverse() else {
                    continue;
                };
                let m = symmetrize(&(q - c.transpose() * &half_inv_kappa * c));
                let eig = m.clone().symmetric_eigen();
                let lmax = eig.eigenvalues.max();
                let lmin = eig.eigenvalues.min();
                if !(lmin > MAX_TRANSFORM_CONDITION.recip() * lmax) {
                    continue;
                }
                let t = sqrtm_spd(&(&m / lmax))?;
                let Some(inverse) = t.clone().try_inverse() else {
                    continue;
                };
                let a_t = &t * &model.a * &inverse;
                let c_t = c * &inverse;
                // μ_j = 1/(2κ_j·λ_max(M)) reproduces the Riccati matrix at P = I
                let mu = Mat::from_fn(p, p, |i, j| if i == j { 0.5 / (kappa[i] * lmax) } else { 0.0 });
                let weighted = Mat::identity(r, r) + c_t.transpose() * &mu * &c_t;
                let he = &weighted * &a_t + a_t.transpose() * &weighted;
                let h = -(he - c_t.transpose() * (&mu * 2.0 * Mat::from_diagonal(&DVector::from_column_slice(kappa))) * &c_t);
                let h_min = -max_eig_sym(&(-h));
                if !(h_min > 0.0) {
                    continue;
                }
                let rho_t = rho * (lmax / lmin).sqrt();
                let sigma = (2.0 * rho_t / h_min).max(1.0);
                // λ = 2κλ_max(M)/(s²σ) = 1
                let kappa_mean = kappa.iter().sum::<f64>() / p as f64;
                let scale = (2.0 * kappa_mean * lmax / sigma).sqrt();
                candidates.push((
                    sigma,
                    h_min,
                    Self {
                        coordinates: Coordinates::Balanced,
                        a: a_t,
                        c_o: c_t / scale,
                        rho: rho_t,
                        transform: &t * scale,
                        inverse: &inverse / scale,
                    },
                ));
            }
        }
        // prefer the strongest dissipation among scales the P box can hold,
        // otherwise the least demanding scale
        let admissible = candidates
            .iter()
            .enumerate()
            .filter(|(_, (sigma, _, _))| *sigma <= ADMISSIBLE_SCALE)
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
            .map(|(i, _)| i);
        let pick = admissible.or_else(|| {
            candidates
                .iter()
                .enumerate()
                .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
                .map(|(i, _)| i)
        });
        let best = pick.map(|i| candidates.swap_remove(i)).map(|(s, _, real)| (s, real));
        best.map(|(_, real)| real).ok_or_else(|| {
            last.unwrap_or_else(|| {
                Error::SynthesisInfeasible("no balancing transform with a positive definite Lyapunov matrix".into())
            })
        })
    }
}

/// Whether a diagonal certificate can exist in dictionary coordinates:
/// `Π₁₁` needs `2pᵢAᵢᵢ + ρ < 0` on every coordinate the output cannot reach.
pub fn dictionary_coordinates_admissible(model: &KoopmanModel, rho: f64) -> bool {
    (0..model.r()).all(|i| {
        let measured = (0..model.p()).any(|j| model.c_o[(j, i)] != 0.0);
        measured || (model.a[(i, i)] < 0.0 && rho < 2.0 * P_MAX * -model.a[(i, i)])
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchSpec {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub grid_points: usize,
    pub refine_iterations: usize,
    /// Cyclic coordinate sweeps over Λ when `p > 1`.
    pub sweeps: usize,
    /// The LMI margin is `margin_scale·‖A‖`.
    pub margin_scale: f64,
    pub coordinates: CoordinateMode,
    pub sdp: SdpSettings,
}

impl Default for SearchSpec {
    fn default() -> Self {
        Self {
            lambda_lo: 1e-3,
            lambda_hi: 1e3,
            grid_points: 25,
            refine_iterations: 8,
            sweeps: 2,
            margin_scale: 1e-7,
            coordinates: CoordinateMode::Auto,
            sdp: SdpSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverInfo {
    pub status: String,
    pub lambda_evaluations: usize,
    pub newton_steps: usize,
    /// Optimal `γ` of the SDP at the selected Λ (the certificate itself is
    /// the verified central-path point with the smallest ultimate-bound
    /// coefficient).
    pub gamma_optimal: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

/// Residual split and sector data stored alongside a certificate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub sigma: SectorNonlinearity,
    pub split: ResidualSplit,
    pub disturbance_bound: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    pub r: usize,
    pub p: usize,
    pub coordinates: Coordinates,
    pub transform: Mat,
    pub p_diag: Vec<f64>,
    pub lambda: Vec<f64>,
    pub k_tilde: Mat,
    /// `P⁻¹K̃`, acting in certificate coordinates.
    pub gain_certificate: Mat,
    /// Observer gain in dictionary coordinates, `T⁻¹P⁻¹K̃`.
    pub gain: Mat,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub xi_max_eig: f64,
    pub xi_norm: f64,
    pub rho: f64,
    pub rho_certificate: f64,
    pub kappa: Vec<f64>,
    pub margin: f64,
    pub decision_variables: usize,
    pub dictionary_hash: String,
    pub solver: SolverInfo,
    pub embedding: Option<EmbeddingRecord>,
}

impl Certificate {
    pub fn p_max(&self) -> f64 {
        self.p_diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn p_min(&self) -> f64 {
        self.p_diag.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Maps a dictionary-coordinate error into certificate coordinates.
    pub fn to_certificate_coords(&self, e: &DVector<f64>) -> DVector<f64> {
        &self.transform * e
    }

    pub fn lyapunov(&self, e_cert: &DVector<f64>) -> f64 {
        e_cert
            .iter()
            .zip(&self.p_diag)
            .map(|(v, p)| p * v * v)
            .sum()
    }

    /// LMI instance this certificate claims to satisfy.
    pub fn problem(&self, model: &KoopmanModel) -> Result<LmiProblem> {
        if model.r() != self.r || model.p() != self.p {
            return Err(Error::Dimension("certificate and model dimensions differ".into()));
        }
        let inverse = self
            .transform
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidCertificate("coordinate transform is singular".into()))?;
        let a = &self.transform * &model.a * &inverse;
        let c = &model.c_o * &inverse;
        build_lmi(&a, &c, &self.kappa, self.rho_certificate, &self.lambda, self.margin)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerificationReport {
    pub xi_max_eig: f64,
    pub xi_norm: f64,
    pub p_min: f64,
    pub gain_residual: f64,
    pub schur_max_eig: f64,
}

/// Re-checks a certificate with a symmetric eigensolver: `λ_max(Ξ) <
/// −1e-8·‖Ξ‖`, `P ≻ 0`, `‖PK' − K̃‖ ≤ 1e-10‖K̃‖` and `T K = K'`.
pub fn verify_certificate(cert: &Certificate, problem: &LmiProblem) -> Result<VerificationReport> {
    let report = inspect(cert, problem);
    if !(report.p_min > 0.0) {
        return Err(Error::InvalidCertificate(format!("P has a non-positive entry ({:e})", report.p_min)));
    }
    if !(report.xi_max_eig < -1e-8 * report.xi_norm) {
        return Err(Error::InvalidCertificate(format!(
            "lambda_max(Xi) = {:e} is not below -1e-8 * ||Xi|| = {:e}",
            report.xi_max_eig,
            -1e-8 * report.xi_norm
        )));
    }
    let k_norm = cert.k_tilde.norm();
    if !(report.gain_residual <= 1e-10 * k_norm.max(f64::MIN_POSITIVE)) {
        return Err(Error::InvalidCertificate(format!(
            "gain does not satisfy P K = K_tilde (residual {:e})",
            report.gain_residual
        )));
    }
    let mapped = (&cert.transform * &cert.gain - &cert.gain_certificate).norm();
    if !(mapped <= 1e-9 * cert.gain_certificate.norm().max(f64::MIN_POSITIVE)) {
        return Err(Error::InvalidCertificate(format!(
            "dictionary gain does not map to the certificate gain (residual {mapped:e})"
        )));
    }
    Ok(report)
}

fn inspect(cert: &Certificate, problem: &LmiProblem) -> VerificationReport {
    let g = cert.gamma * cert.gamma;
    let xi = problem.xi(&cert.p_diag, &cert.k_tilde, g);
    let eig = xi.symmetric_eigen().eigenvalues;
    let pm = Mat::from_diagonal(&DVector::from_column_slice(&cert.p_diag));
    VerificationReport {
        xi_max_eig: eig.max(),
        xi_norm: eig.iter().fold(0.0_f64, |a, v| a.max(v.abs())),
        p_min: cert.p_min(),
        gain_residual: (&pm * &cert.gain_certificate - &cert.k_tilde).norm(),
        schur_max_eig: max_eig_sym(&problem.schur_reduced(&cert.p_diag, &cert.k_tilde, g)),
    }
}

/// `α = −λ_max(Ξ)`.
pub fn compute_alpha(xi: &Mat) -> Result<f64> {
    let alpha = -max_eig_sym(xi);
    if alpha > 0.0 {
        Ok(alpha)
    } else {
        Err(Error::InvalidCertificate(format!("alpha = {alpha:e} is not positive")))
    }
}

/// `c = sqrt(γ²·λ_max(P)/(α·λ_min(P)))`.
pub fn bound_coefficient(gamma: f64, alpha: f64, p_max: f64, p_min: f64) -> f64 {
    (gamma * gamma * p_max / (alpha * p_min)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UltimateBoundPrediction {
    pub c: f64,
    pub epsilon: f64,
    pub bound: f64,
    pub settle_time: f64,
}

/// Ultimate bound `c·ε` and the time after which it applies, starting from
/// Lyapunov level `v0`.
pub fn ultimate_bound(cert: &Certificate, epsilon: f64, v0: f64) -> Result<UltimateBoundPrediction> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidParameter("epsilon must be >= 0".into()));
    }
    let c = bound_coefficient(cert.gamma, cert.alpha, cert.p_max(), cert.p_min());
    let level = cert.gamma * cert.gamma * epsilon * epsilon * cert.p_max();
    let settle_time = if epsilon == 0.0 {
        f64::INFINITY
    } else {
        ((cert.p_max() / cert.alpha) * (v0 * cert.alpha / level).ln()).max(0.0)
    };
    Ok(UltimateBoundPrediction {
        c,
        epsilon,
        bound: c * epsilon,
        settle_time,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DissipationReport {
    pub interior_samples: usize,
    pub satisfied: usize,
    pub fraction: f64,
    pub tolerance: f64,
    /// Indices of interior samples that violate the inequality.
    pub violations: Vec<usize>,
}

/// Checks `V̇ ≤ −α|e|² + γ²|d̃|² + tol` on a sampled trajectory, with `V̇`
/// from centered differences and `tol = 1e-3·max V·dt`. Errors and
/// disturbances are in certificate coordinates.
pub fn check_dissipation(
    cert: &Certificate,
    errors: &[DVector<f64>],
    disturbances: &[DVector<f64>],
    dt: f64,
) -> Result<DissipationReport> {
    if errors.len() != disturbances.len() {
        return Err(Error::Dimension("error and disturbance traces differ in length".into()));
    }
    if errors.len() < 3 || !(dt > 0.0) {
        return Err(Error::InsufficientData("dissipation check needs 3 samples and dt > 0".into()));
    }
    if errors.iter().chain(disturbances).any(|v| v.len() != cert.r) {
        return Err(Error::Dimension("trace vectors must have length r".into()));
    }
    let v: Vec<f64> = errors.iter().map(|e| cert.lyapunov(e)).collect();
    let vmax = v.iter().cloned().fold(0.0, f64::max);
    let tolerance = 1e-3 * vmax * dt;
    let g = cert.gamma * cert.gamma;
    let mut violations = Vec::new();
    for k in 1..errors.len() - 1 {
        let vdot = (v[k + 1] - v[k - 1]) / (2.0 * dt);
        let rhs = -cert.alpha * errors[k].norm_squared() + g * disturbances[k].norm_squared();
        if vdot > rhs + tolerance {
            violations.push(k);
        }
    }
    let interior = errors.len() - 2;
    let satisfied = interior - violations.len();
    Ok(DissipationReport {
        interior_samples: interior,
        satisfied,
        fraction: satisfied as f64 / interior as f64,
        tolerance,
        violations,
    })
}

struct Candidate {
    lambda: Vec<f64>,
    g: f64,
    problem: LmiProblem,
    path: Vec<Vec<f64>>,
    newton_steps: usize,
    status: SdpStatus,
}

enum Outcome {
    Feasible(Candidate),
    Infeasible { violation: f64, newton_steps: usize },
}

fn solve_fixed(real: &Realization, kappa: &[f64], lambda: &[f64], margin: f64, settings: &SdpSettings) -> Result<Outcome> {
    let problem = build_lmi(&real.a, &real.c_o, kappa, real.rho, lambda, margin)?;
    let r = problem.r();
    // P = I, K̃ = λ-scaled output injection, g large: a natural phase I seed
    let mut guess = vec![1.0; r];
    guess.extend(std::iter::repeat_n(0.0, r * problem.p()));
    guess.push(1e3);
    let sol = sdp::solve(&problem.sdp, Some(&guess), settings)?;
    Ok(match sol.status {
        SdpStatus::Infeasible { violation } => Outcome::Infeasible {
            violation,
            newton_steps: sol.newton_steps,
        },
        status => {
            let g = sol.x[problem.num_vars() - 1];
            Outcome::Feasible(Candidate {
                lambda: lambda.to_vec(),
                g,
                problem,
                path: sol.path,
                newton_steps: sol.newton_steps,
                status,
            })
        }
    })
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(lo * hi).sqrt()];
    }
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

struct SearchState {
    best: Option<Candidate>,
    least_violation: (f64, Vec<f64>),
    evaluations: usize,
    newton_steps: usize,
}

impl SearchState {
    fn absorb(&mut self, lambda: &[f64], outcome: Outcome) {
        self.evaluations += 1;
        match outcome {
            Outcome::Feasible(c) => {
                self.newton_steps += c.newton_steps;
                if self.best.as_ref().is_none_or(|b| c.g < b.g) {
                    self.best = Some(c);
                }
            }
            Outcome::Infeasible { violation, newton_steps } => {
                self.newton_steps += newton_steps;
                if violation < self.least_violation.0 {
                    self.least_violation = (violation, lambda.to_vec());
                }
            }
        }
    }

    fn g_at(&mut self, real: &Realization, kappa: &[f64], lambda: &[f64], margin: f64, spec: &SearchSpec) -> Result<f64> {
        let outcome = solve_fixed(real, kappa, lambda, margin, &spec.sdp)?;
        let g = match &outcome {
            Outcome::Feasible(c) => c.g,
            Outcome::Infeasible { .. } => f64::INFINITY,
        };
        self.absorb(lambda, outcome);
        Ok(g)
    }
}

/// Golden-section search on `log λ_j` within `[lo, hi]`.
fn refine_channel(
    state: &mut SearchState,
    real: &Realization,
    kappa: &[f64],
    base: &[f64],
    j: usize,
    lo: f64,
    hi: f64,
    margin: f64,
    spec: &SearchSpec,
) -> Result<()> {
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let at = |v: f64| {
        let mut l = base.to_vec();
        l[j] = v.exp();
        l
    };
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let mut f1 = state.g_at(real, kappa, &at(x1), margin, spec)?;
    let mut f2 = state.g_at(real, kappa, &at(x2), margin, spec)?;
    for _ in 0..spec.refine_iterations {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = state.g_at(real, kappa, &at(x1), margin, spec)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = state.g_at(real, kappa, &at(x2), margin, spec)?;
        }
    }
    Ok(())
}

fn search_lambda(real: &Realization, kappa: &[f64], margin: f64, spec: &SearchSpec) -> Result<SearchState> {
    let p = real.c_o.nrows();
    let grid = log_grid(spec.lambda_lo, spec.lambda_hi, spec.grid_points.max(1));
    let outcomes: Vec<Result<Outcome>> = grid
        .par_iter()
        .map(|&l| solve_fixed(real, kappa, &vec![l; p], margin, &spec.sdp))
        .collect();
    let mut state = SearchState {
        best: None,
        least_violation: (f64::INFINITY, Vec::new()),
        evaluations: 0,
        newton_steps: 0,
    };
    let mut grid_g = Vec::with_capacity(grid.len());
    for (l, outcome) in grid.iter().zip(outcomes) {
        let outcome = outcome?;
        grid_g.push(match &outcome {
            Outcome::Feasible(c) => c.g,
            Outcome::Infeasible { .. } => f64::INFINITY,
        });
        state.absorb(&vec![*l; p], outcome);
    }
    let Some(best) = state.best.as_ref() else {
        return Ok(state);
    };
    let k = grid_g
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let lo = grid[k.saturating_sub(1)];
    let hi = grid[(k + 1).min(grid.len() - 1)];
    let mut base = best.lambda.clone();
    if p == 1 {
        if hi > lo {
            refine_channel(&mut state, real, kappa, &base, 0, lo, hi, margin, spec)?;
        }
    } else {
        for _ in 0..spec.sweeps {
            for j in 0..p {
                refine_channel(&mut state, real, kappa, &base, j, spec.lambda_lo, spec.lambda_hi, margin, spec)?;
                base = state.best.as_ref().expect("feasible point kept").lambda.clone();
            }
        }
    }
    Ok(state)
}

fn certificate_from_point(
    problem: &LmiProblem,
    real: &Realization,
    x: &[f64],
    model_rho: f64,
) -> Result<(Certificate, VerificationReport)> {
    let (p_diag, k_tilde, g) = problem.unpack(x);
    let pinv = Mat::from_diagonal(&DVector::from_iterator(p_diag.len(), p_diag.iter().map(|v| 1.0 / v)));
    let gain_certificate = &pinv * &k_tilde;
    let gain = &real.inverse * &gain_certificate;
    let xi = problem.xi(&p_diag, &k_tilde, g);
    let xi_max_eig = max_eig_sym(&xi);
    let alpha = -xi_max_eig;
    let p_max = p_diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let p_min = p_diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let cert = Certificate {
        r: problem.r(),
        p: problem.p(),
        coordinates: real.coordinates,
        transform: real.transform.clone(),
        p_diag,
        lambda: problem.lambda.clone(),
        k_tilde,
        gain_certificate,
        gain,
        gamma: g.sqrt(),
        alpha,
        beta: (p_max / p_min).sqrt(),
        xi_max_eig,
        xi_norm: sym_norm(&xi),
        rho: model_rho,
        rho_certificate: problem.rho,
        kappa: problem.kappa.clone(),
        margin: problem.margin,
        decision_variables: problem.num_vars(),
        dictionary_hash: String::new(),
        solver: SolverInfo {
            status: String::new(),
            lambda_evaluations: 0,
            newton_steps: 0,
            gamma_optimal: 0.0,
            wall_time_s: None,
        },
        embedding: None,
    };
    let report = verify_certificate(&cert, problem)?;
    Ok((cert, report))
}

fn solve_in(
    model: &KoopmanModel,
    real: &Realization,
    kappa: &[f64],
    rho: f64,
    spec: &SearchSpec,
) -> Result<Certificate> {
    let margin = spec.margin_scale * crate::linalg::spectral_norm(&model.a);
    let state = search_lambda(real, kappa, margin, spec)?;
    let Some(best) = state.best else {
        return Err(Error::SynthesisInfeasible(format!(
            "{:?} coordinates: no feasible Lambda on [{:e}, {:e}]; least violation {:e} at Lambda = {:?}",
            real.coordinates, spec.lambda_lo, spec.lambda_hi, state.least_violation.0, state.least_violation.1
        )));
    };
    // Among verified central-path points pick the smallest ultimate-bound
    // coefficient; the γ-optimal endpoint sits on the margin and has α ≈ 0.
    let mut chosen: Option<(f64, Certificate)> = None;
    let mut last_error = None;
    for x in best.path.iter().rev() {
        match certificate_from_point(&best.problem, real, x, rho) {
            Ok((cert, report)) if report.schur_max_eig < 0.0 => {
                let c = bound_coefficient(cert.gamma, cert.alpha, cert.p_max(), cert.p_min());
                if chosen.as_ref().is_none_or(|(best_c, _)| c < *best_c) {
                    chosen = Some((c, cert));
                }
            }
            Ok(_) => {}
            Err(e) => last_error = Some(e),
        }
    }
    let Some((_, mut cert)) = chosen else {
        return Err(last_error.unwrap_or_else(|| Error::SolverFailure("no verified central-path point".into())));
    };
    cert.dictionary_hash = model.dictionary.spec().hash();
    cert.solver = SolverInfo {
        status: format!("{:?}", best.status).to_lowercase(),
        lambda_evaluations: state.evaluations,
        newton_steps: state.newton_steps,
        gamma_optimal: best.g.sqrt(),
        wall_time_s: None,
    };
    Ok(cert)
}

/// Minimizes `γ²` over `(P, K̃)` for each Λ on a log grid, refines around
/// the best grid point, and returns a verified certificate.
pub fn solve_gain(model: &KoopmanModel, kappa: &[f64], rho: f64, spec: &SearchSpec) -> Result<Certificate> {
    let start = Instant::now();
    if kappa.len() != model.p() {
        return Err(Error::Dimension(format!("kappa needs {} entries", model.p())));
    }
    let modes: Vec<Coordinates> = match spec.coordinates {
        CoordinateMode::Dictionary => vec![Coordinates::Dictionary],
        CoordinateMode::Balanced => vec![Coordinates::Balanced],
        CoordinateMode::Auto if dictionary_coordinates_admissible(model, rho) => {
            vec![Coordinates::Dictionary, Coordinates::Balanced]
        }
        CoordinateMode::Auto => vec![Coordinates::Balanced],
    };
    let mut last = None;
    for mode in modes {
        let real = match mode {
            Coordinates::Dictionary => Realization::dictionary(model, rho),
            Coordinates::Balanced => match Realization::balanced(model, kappa, rho) {
                Ok(r) => r,
                // no balancing exists for an undetectable pair, which
                // also rules out any certificate
                Err(e) => {
                    last = Some(last.unwrap_or_else(|| {
                        Error::SynthesisInfeasible(format!("no balanced realization: {e}"))
                    }));
                    continue;
                }
            },
        };
        match solve_in(model, &real, kappa, rho, spec) {
            Ok(mut cert) => {
                cert.solver.wall_time_s = Some(start.elapsed().as_secs_f64());
                return Ok(cert);
            }
            Err(e @ (Error::SynthesisInfeasible(_) | Error::InvalidCertificate(_))) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::SynthesisInfeasible("no coordinate realization available".into())))
}

/// On-disk certificate.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateFile {
    pub r: usize,
    pub p: usize,
    pub coordinates: Coordinates,
    #[serde(rename = "T")]
    pub transform: Vec<Vec<f64>>,
    #[serde(rename = "P")]
    pub p_diag: Vec<f64>,
    #[serde(rename = "Lambda")]
    pub lambda: Vec<f64>,
    #[serde(rename = "K_tilde")]
    pub k_tilde: Vec<Vec<f64>>,
    #[serde(rename = "K_certificate")]
    pub gain_certificate: Vec<Vec<f64>>,
    #[serde(rename = "K")]
    pub gain: Vec<Vec<f64>>,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub xi_max_eig: f64,
    pub xi_norm: f64,
    pub rho: f64,
    pub rho_certificate: f64,
    pub kappa: Vec<f64>,
    pub margin: f64,
    pub decision_variables: usize,
    pub dictionary_hash: String,
    pub solver: SolverInfo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingRecord>,
}

impl Certificate {
    pub fn to_file(&self) -> CertificateFile {
        CertificateFile {
            r: self.r,
            p: self.p,
            coordinates: self.coordinates,
            transform: to_rows(&self.transform),
            p_diag: self.p_diag.clone(),
            lambda: self.lambda.clone(),
            k_tilde: to_rows(&self.k_tilde),
            gain_certificate: to_rows(&self.gain_certificate),
            gain: to_rows(&self.gain),
            gamma: self.gamma,
            alpha: self.alpha,
            beta: self.beta,
            xi_max_eig: self.xi_max_eig,
            xi_norm: self.xi_norm,
            rho: self.rho,
            rho_certificate: self.rho_certificate,
            kappa: self.kappa.clone(),
            margin: self.margin,
            decision_variables: self.decision_variables,
            dictionary_hash: self.dictionary_hash.clone(),
            solver: self.solver.clone(),
            embedding: self.embedding.clone(),
        }
    }

    pub fn from_file(f: &CertificateFile) -> Result<Self> {
        let (r, p) = (f.r, f.p);
        if f.p_diag.len() != r || f.lambda.len() != p || f.kappa.len() != p {
            return Err(Error::Dimension("certificate vector lengths disagree with r, p".into()));
        }
        Ok(Self {
            r,
            p,
            coordinates: f.coordinates,
            transform: from_rows(&f.transform, r, r, "T")?,
            p_diag: f.p_diag.clone(),
            lambda: f.lambda.clone(),
            k_tilde: from_rows(&f.k_tilde, r, p, "K_tilde")?,
            gain_certificate: from_rows(&f.gain_certificate, r, p, "K_certificate")?,
            gain: from_rows(&f.gain, r, p, "K")?,
            gamma: f.gamma,
            alpha: f.alpha,
            beta: f.beta,
            xi_max_eig: f.xi_max_eig,
            xi_norm: f.xi_norm,
            rho: f.rho,
            rho_certificate: f.rho_certificate,
            kappa: f.kappa.clone(),
            margin: f.margin,
            decision_variables: f.decision_variables,
            dictionary_hash: f.dictionary_hash.clone(),
            solver: f.solver.clone(),
            embedding: f.embedding.clone(),
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifting::ObservableDictionary;
    use nalgebra::DMatrix;

    fn toy_model(a: DMatrix<f64>) -> KoopmanModel {
        let n = a.nrows();
        let dictionary = ObservableDictionary::identity(n);
        KoopmanModel {
            c_o: dictionary.output_matrix(&[0]).unwrap(),
            b: DMatrix::zeros(n, 0),
            a,
            measured: vec![0],
            ridge_lambda: 0.0,
            residual: None,
            omega_max: None,
            dictionary,
        }
    }

    fn neg_identity_problem(rho: f64) -> LmiProblem {
        let a = -DMatrix::identity(2, 2);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        build_lmi(&a, &c, &[1.0], rho, &[1.0], 0.0).unwrap()
    }

    #[test]
    fn xi_dimensions() {
        let a = DMatrix::from_fn(15, 15, |i, j| if i == j { -1.0 } else { 0.01 });
        let c = DMatrix::from_fn(1, 15, |_, j| if j == 0 { 1.0 } else { 0.0 });
        let prob = build_lmi(&a, &c, &[1.0], 0.1, &[1.0], 1e-7).unwrap();
        assert_eq!(prob.xi_dim(), 31);
        assert_eq!(prob.sdp.dim, 31);
        assert_eq!(prob.num_vars(), 31);
        assert!(build_lmi(&a, &c, &[0.0], 0.1, &[1.0], 0.0).is_err());
        assert!(build_lmi(&a, &c, &[1.0], 0.1, &[-1.0], 0.0).is_err());
    }

    #[test]
    fn triplets_match_dense_blocks() {
        let a = DMatrix::from_row_slice(3, 3, &[-1.0, 0.4, 0.2, 0.3, -0.5, 0.7, -0.2, 0.1, 0.6]);
        let c = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.5, 0.0, 2.0]);
        let prob = build_lmi(&a, &c, &[1.0, 2.0], 0.3, &[0.7, 1.9], 0.0).unwrap();
        let p_diag = [1.3, 0.4, 2.2];
        let k = DMatrix::from_row_slice(3, 2, &[0.1, -0.3, 0.8, 0.2, -1.1, 0.5]);
        let x = prob.pack(&p_diag, &k, 3.7);
        let (pp, kk, g) = prob.unpack(&x);
        assert_eq!(pp, p_diag.to_vec());
        assert_eq!(kk, k);
        assert_eq!(g, 3.7);
        let dense = prob.xi(&p_diag, &k, 3.7);
        let sparse = prob.sdp.evaluate(&x);
        assert!((dense - sparse).abs().max() < 1e-14);
    }

    #[test]
    fn hand_point_is_feasible() {
        // P = I, K̃ = 0, g = 4 on A = −I: eigenvalues by direct evaluation
        let prob = neg_identity_problem(0.0);
        let xi = prob.xi(&[1.0, 1.0], &DMatrix::zeros(2, 1), 4.0);
        assert!(max_eig_sym(&xi) < 0.0);
    }

    #[test]
    fn huge_rho_is_infeasible() {
        let model = toy_model(-DMatrix::identity(2, 2));
        let spec = SearchSpec {
            grid_points: 5,
            refine_iterations: 0,
            coordinates: CoordinateMode::Dictionary,
            ..SearchSpec::default()
        };
        assert!(matches!(solve_gain(&model, &[1.0], 1e8, &spec), Err(Error::SynthesisInfeasible(_))));
    }

    #[test]
    fn toy_synthesis_meets_hand_point() {
        let model = toy_model(-DMatrix::identity(2, 2));
        let cert = solve_gain(&model, &[1.0], 0.0, &SearchSpec::default()).unwrap();
        assert_eq!(cert.coordinates, Coordinates::Dictionary);
        assert!(cert.solver.gamma_optimal <= 2.0);
        let prob = cert.problem(&model).unwrap();
        verify_certificate(&cert, &prob).unwrap();
        assert!(cert.alpha > 0.0 && cert.beta >= 1.0);
        let back = Certificate::from_file(&serde_json::from_str(&serde_json::to_string(&cert.to_file()).unwrap()).unwrap())
            .unwrap();
        assert_eq!(back, cert);
    }

    #[test]
    fn unstable_mode_uses_balanced_coordinates() {
        // second coordinate is unmeasured and has A₂₂ > 0
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.5]);
        let model = toy_model(a);
        assert!(!dictionary_coordinates_admissible(&model, 0.0));
        let cert = solve_gain(&model, &[1.0], 0.01, &SearchSpec::default()).unwrap();
        assert_eq!(cert.coordinates, Coordinates::Balanced);
        let prob = cert.problem(&model).unwrap();
        let report = verify_certificate(&cert, &prob).unwrap();
        assert!(report.schur_max_eig < 0.0);
        let closed = &model.a - &cert.gain * &model.c_o;
        assert!(crate::linalg::spectral_abscissa(&closed) < 0.0);
    }

    #[test]
    fn tampering_is_caught() {
        let model = toy_model(-DMatrix::identity(2, 2));
        let cert = solve_gain(&model, &[1.0], 0.0, &SearchSpec::default()).unwrap();
        let prob = cert.problem(&model).unwrap();
        let mut halved = cert.clone();
        halved.gamma = cert.solver.gamma_optimal * 0.5;
        assert!(matches!(verify_certificate(&halved, &prob), Err(Error::InvalidCertificate(_))));
        let mut zero = cert.clone();
        zero.p_diag[1] = 0.0;
        assert!(matches!(verify_certificate(&zero, &prob), Err(Error::InvalidCertificate(_))));
        let mut bad_gain = cert.clone();
        bad_gain.gain_certificate[(0, 0)] += 1e-3;
        assert!(verify_certificate(&bad_gain, &prob).is_err());
    }

    #[test]
    fn alpha_and_bound_formulas() {
        let xi = -DMatrix::identity(4, 4) * 2.0;
        assert_eq!(compute_alpha(&xi).unwrap(), 2.0);
        assert_eq!(compute_alpha(&(&xi * 0.5)).unwrap(), 1.0);
        assert!(compute_alpha(&DMatrix::identity(2, 2)).is_err());

        let model = toy_model(-DMatrix::identity(2, 2));
        let mut cert = solve_gain(&model, &[1.0], 0.0, &SearchSpec::default()).unwrap();
        cert.p_diag = vec![1.0, 1.0];
        cert.alpha = 1.0;
        cert.gamma = 2.0;
        let ub = ultimate_bound(&cert, 0.1, 1.0).unwrap();
        assert!((ub.c - 2.0).abs() < 1e-15);
        assert!((ub.bound - 0.2).abs() < 1e-15);
        let ub2 = ultimate_bound(&cert, 0.2, 1.0).unwrap();
        assert!((ub2.bound - 2.0 * ub.bound).abs() < 1e-15);
        // T = (λmax/α)·ln(V0·α/(γ²ε²λmax)) = ln(1/0.04)
        assert!((ub.settle_time - (25.0f64).ln()).abs() < 1e-12);
        assert!(ultimate_bound(&cert, -1.0, 1.0).is_err());
    }

    #[test]
    fn dissipation_trivial_and_negative_control() {
        let model = toy_model(-DMatrix::identity(2, 2));
        let cert = solve_gain(&model, &[1.0], 0.0, &SearchSpec::default()).unwrap();
        let zeros = vec![DVector::zeros(2); 50];
        let rep = check_dissipation(&cert, &zeros, &zeros, 0.02).unwrap();
        assert_eq!(rep.fraction, 1.0);
        // growing error with no disturbance cannot dissipate
        let growing: Vec<_> = (0..50).map(|k| DVector::from_element(2, (0.1 * k as f64).exp())).collect();
        let rep = check_dissipation(&cert, &growing, &zeros, 0.02).unwrap();
        assert_eq!(rep.fraction, 0.0);
        assert_eq!(rep.violations.len(), 48);
        assert!(check_dissipation(&cert, &zeros[..10], &zeros, 0.02).is_err());
    }

    #[test]
    fn smaller_rho_never_raises_gamma() {
        let a = DMatrix::from_row_slice(3, 3, &[-1.0, 0.5, 0.0, 0.0, -0.8, 0.3, 0.2, 0.0, -1.2]);
        let dictionary = ObservableDictionary::identity(3);
        let model = KoopmanModel {
            c_o: dictionary.output_matrix(&[0]).unwrap(),
            b: DMatrix::zeros(3, 0),
            a,
            measured: vec![0],
            ridge_lambda: 0.0,
            residual: None,
            omega_max: None,
            dictionary,
        };
        let spec = SearchSpec {
            coordinates: CoordinateMode::Dictionary,
            ..SearchSpec::default()
        };
        let hi = solve_gain(&model, &[1.0], 0.4, &spec).unwrap();
        let lo = solve_gain(&model, &[1.0], 0.2, &spec).unwrap();
        assert!(lo.solver.gamma_optimal <= hi.solver.gamma_optimal * (1.0 + 1e-6));
    }
}
