//! Sector-bounded nonlinearities, the residual split `Δ = Γ(e) + d`, and
//! assembly of the observer error as a generalized Persidskii system
//!
//! `ė = A₀ e − Σᵢ bᵢ φᵢ(cᵢᵀ e) + d̃`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::edmd::KoopmanModel;
use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SectorKind {
    /// `κ·tanh(s)`
    TanhScaled,
    /// `κ·clamp(s, −limit, limit)`
    Saturation { limit: f64 },
    /// `κ·sign(s)·max(|s| − width, 0)`
    Deadzone { width: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectorNonlinearity {
    pub kind: SectorKind,
    pub kappa: Vec<f64>,
}

impl SectorNonlinearity {
    pub fn new(kind: SectorKind, kappa: Vec<f64>) -> Result<Self> {
        if kappa.is_empty() {
            return Err(Error::InvalidParameter("sector nonlinearity needs at least one channel".into()));
        }
        if kappa.iter().any(|k| !(k.is_finite() && *k > 0.0)) {
            return Err(Error::InvalidParameter("sector slopes must be finite and positive".into()));
        }
        match kind {
            SectorKind::Saturation { limit } if !(limit.is_finite() && limit > 0.0) => {
                return Err(Error::InvalidParameter("saturation limit must be positive".into()))
            }
            SectorKind::Deadzone { width } if !(width.is_finite() && width >= 0.0) => {
                return Err(Error::InvalidParameter("deadzone width must be non-negative".into()))
            }
            _ => {}
        }
        Ok(Self { kind, kappa })
    }

    pub fn tanh(kappa: Vec<f64>) -> Result<Self> {
        Self::new(SectorKind::TanhScaled, kappa)
    }

    pub fn channels(&self) -> usize {
        self.kappa.len()
    }

    pub fn kappa_max(&self) -> f64 {
        self.kappa.iter().cloned().fold(0.0, f64::max)
    }

    pub fn eval_channel(&self, channel: usize, s: f64) -> f64 {
        let k = self.kappa[channel];
        match self.kind {
            SectorKind::TanhScaled => k * s.tanh(),
            SectorKind::Saturation { limit } => k * s.clamp(-limit, limit),
            SectorKind::Deadzone { width } => k * s.signum() * (s.abs() - width).max(0.0),
        }
    }

    /// Componentwise evaluation.
    pub fn eval(&self, s: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(s.len(), |j, _| self.eval_channel(j, s[j]))
    }

    /// Half-width of the interval around 0 on which channel `j` is linear
    /// to within relative error `tol` (zero for a deadzone with width > 0).
    pub fn linear_region(&self, tol: f64) -> f64 {
        match self.kind {
            // tanh(s)/s ≥ 1 − s²/3
            SectorKind::TanhScaled => (3.0 * tol).sqrt(),
            SectorKind::Saturation { limit } => limit,
            SectorKind::Deadzone { width } if width == 0.0 => f64::INFINITY,
            SectorKind::Deadzone { .. } => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SectorGrid {
    pub half_width: f64,
    pub points: usize,
}

impl Default for SectorGrid {
    fn default() -> Self {
        Self {
            half_width: 10.0,
            points: 10_001,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SectorReport {
    pub passed: bool,
    pub channel: usize,
    /// Smallest value of `φ(s)(s − φ(s)/κ)` on the grid.
    pub min_margin: f64,
    pub witness: f64,
}

impl SectorReport {
    pub fn into_result(self) -> Result<()> {
        if self.passed {
            Ok(())
        } else {
            Err(Error::SectorViolation {
                channel: self.channel,
                witness: self.witness,
                margin: self.min_margin,
            })
        }
    }
}

fn check_grid(grid: &SectorGrid) -> Result<()> {
    if !(grid.half_width >= 10.0) || grid.points < 10_000 {
        return Err(Error::InvalidParameter(
            "sector grid must span [-S, S] with S >= 10 and at least 1e4 points".into(),
        ));
    }
    Ok(())
}

/// Checks `φ(s)(s − φ(s)/κ) ≥ 0` for one scalar function on the grid.
pub fn sector_check_fn(phi: impl Fn(f64) -> f64, kappa: f64, grid: &SectorGrid) -> Result<SectorReport> {
    check_grid(grid)?;
    if !(kappa > 0.0) {
        return Err(Error::InvalidParameter("sector slope must be positive".into()));
    }
    let mut report = SectorReport {
        passed: true,
        channel: 0,
        min_margin: f64::INFINITY,
        witness: 0.0,
    };
    let step = 2.0 * grid.half_width / (grid.points - 1) as f64;
    for i in 0..grid.points {
        let s = -grid.half_width + step * i as f64;
        let v = phi(s);
        let margin = v * (s - v / kappa);
        // rounding slack: φ and s/κ agree to a few ulps near the sector edge
        let slack = 1e-14 * (1.0 + s * s) * kappa;
        if margin < report.min_margin {
            report.min_margin = margin;
            report.witness = s;
        }
        if margin < -slack || !margin.is_finite() {
            report.passed = false;
        }
    }
    Ok(report)
}

/// Per-channel sector check; the report names the worst channel.
pub fn sector_check(sigma: &SectorNonlinearity, grid: &SectorGrid) -> Result<SectorReport> {
    let mut worst: Option<SectorReport> = None;
    for j in 0..sigma.channels() {
        let mut report = sector_check_fn(|s| sigma.eval_channel(j, s), sigma.kappa[j], grid)?;
        report.channel = j;
        let replace = match &worst {
            None => true,
            Some(w) => (w.passed && !report.passed) || (w.passed == report.passed && report.min_margin < w.min_margin),
        };
        if replace {
            worst = Some(report);
        }
    }
    Ok(worst.expect("at least one channel"))
}

/// `Γ(e)_j = g_j·tanh(e_j)` plus the sup bound on what it leaves behind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualSplit {
    pub gains: Vec<f64>,
    pub kappa_budget: Vec<f64>,
    pub d_bound: f64,
}

impl ResidualSplit {
    /// `Γ ≡ 0`, `d = Δ`.
    pub fn trivial(dim: usize, max_residual: f64) -> Self {
        Self {
            gains: vec![0.0; dim],
            kappa_budget: vec![0.0; dim],
            d_bound: max_residual,
        }
    }

    pub fn dim(&self) -> usize {
        self.gains.len()
    }

    pub fn gamma(&self, e: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(e.len(), |j, _| self.gains[j] * e[j].tanh())
    }
}

const GOLDEN_ITERATIONS: usize = 80;

fn golden_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..GOLDEN_ITERATIONS {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = f(x2);
        }
        if b - a <= 1e-13 * hi.max(1.0) {
            break;
        }
    }
    // endpoints matter when the optimum sits on the boundary
    let mid = 0.5 * (a + b);
    [lo, mid, hi]
        .into_iter()
        .min_by(|x, y| f(*x).total_cmp(&f(*y)))
        .unwrap()
}

/// Fits one slope per coordinate on `(e, Δ)` samples, minimizing the
/// worst-case remainder `max_k |Δ_{j,k} − g_j tanh(e_{j,k})|` over
/// `g_j ∈ [0, budget_j]`.
pub fn split_residual(samples: &[(DVector<f64>, DVector<f64>)], kappa_budget: &[f64]) -> Result<ResidualSplit> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("split_residual needs samples".into()));
    }
    let dim = samples[0].1.len();
    if kappa_budget.len() != dim {
        return Err(Error::Dimension(format!(
            "kappa_budget has {} entries for residual dimension {dim}",
            kappa_budget.len()
        )));
    }
    if samples.iter().any(|(e, d)| e.len() != dim || d.len() != dim) {
        return Err(Error::Dimension("residual samples have inconsistent lengths".into()));
    }
    if kappa_budget.iter().any(|k| !(k.is_finite() && *k >= 0.0)) {
        return Err(Error::InvalidParameter("kappa_budget must be finite and >= 0".into()));
    }
    let gains: Vec<f64> = (0..dim)
        .map(|j| {
            if kappa_budget[j] == 0.0 {
                return 0.0;
            }
            let worst = |g: f64| {
                samples
                    .iter()
                    .map(|(e, d)| (d[j] - g * e[j].tanh()).abs())
                    .fold(0.0, f64::max)
            };
            golden_min(worst, 0.0, kappa_budget[j])
        })
        .collect();
    let mut split = ResidualSplit {
        gains,
        kappa_budget: kappa_budget.to_vec(),
        d_bound: 0.0,
    };
    split.d_bound = samples
        .iter()
        .map(|(e, d)| (d - split.gamma(e)).norm())
        .fold(0.0, f64::max);
    let trivial = samples.iter().map(|(_, d)| d.norm()).fold(0.0, f64::max);
    if split.d_bound > trivial {
        split = ResidualSplit {
            kappa_budget: kappa_budget.to_vec(),
            ..ResidualSplit::trivial(dim, trivial)
        };
    }
    Ok(split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelSource {
    /// Output-injection channel `i` of the correction `Kσ(·)`.
    Correction(usize),
    /// Diagonal residual channel `j` of `Γ`.
    Residual(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersidskiiChannel {
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub source: ChannelSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersidskiiErrorModel {
    pub a0: Mat,
    pub gain: Mat,
    pub c_o: Mat,
    pub sigma: SectorNonlinearity,
    pub split: ResidualSplit,
    pub channels: Vec<PersidskiiChannel>,
    /// Bound on `|d̃|`: split remainder plus the noise pushed through the
    /// correction, `‖K‖·κ_max·3σ_v`.
    pub disturbance_bound: f64,
}

impl PersidskiiErrorModel {
    pub fn phi(&self, channel: &PersidskiiChannel, s: f64) -> f64 {
        match channel.source {
            ChannelSource::Correction(i) => self.sigma.eval_channel(i, s),
            ChannelSource::Residual(j) => self.split.gains[j] * s.tanh(),
        }
    }

    /// Channel-sum right-hand side `A₀e − Σ bᵢ φᵢ(cᵢᵀe) + d̃`.
    pub fn rhs(&self, e: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
        let mut out = &self.a0 * e + d;
        for ch in &self.channels {
            let v = self.phi(ch, ch.c.dot(e));
            out.axpy(-v, &ch.b, 1.0);
        }
        out
    }
}

/// Assembles the channel list after checking every sector condition.
pub fn embed_error_dynamics(
    model: &KoopmanModel,
    gain: &Mat,
    sigma: &SectorNonlinearity,
    split: &ResidualSplit,
    noise_std: f64,
) -> Result<PersidskiiErrorModel> {
    let r = model.r();
    let p = model.p();
    if gain.nrows() != r || gain.ncols() != p {
        return Err(Error::Dimension(format!("gain must be {r}x{p}")));
    }
    if sigma.channels() != p {
        return Err(Error::Dimension(format!("sigma has {} channels, need {p}", sigma.channels())));
    }
    if split.dim() != r {
        return Err(Error::Dimension(format!("split has {} coordinates, need {r}", split.dim())));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::InvalidParameter("noise_std must be >= 0".into()));
    }
    let grid = SectorGrid::default();
    sector_check(sigma, &grid)?.into_result()?;
    let mut channels = Vec::with_capacity(p + r);
    for i in 0..p {
        channels.push(PersidskiiChannel {
            b: gain.column(i).into_owned(),
            c: model.c_o.row(i).transpose(),
            source: ChannelSource::Correction(i),
        });
    }
    for j in 0..r {
        let g = split.gains[j];
        if g == 0.0 {
            continue;
        }
        if g < 0.0 || g > split.kappa_budget[j] {
            return Err(Error::SectorViolation {
                channel: p + j,
                witness: 1.0,
                margin: g,
            });
        }
        let mut report = sector_check_fn(|s| g * s.tanh(), split.kappa_budget[j], &grid)?;
        report.channel = p + j;
        report.into_result()?;
        let unit = DVector::from_fn(r, |k, _| if k == j { 1.0 } else { 0.0 });
        channels.push(PersidskiiChannel {
            b: unit.clone(),
            c: unit,
            source: ChannelSource::Residual(j),
        });
    }
    Ok(PersidskiiErrorModel {
        a0: model.a.clone(),
        gain: gain.clone(),
        c_o: model.c_o.clone(),
        sigma: sigma.clone(),
        split: split.clone(),
        channels,
        disturbance_bound: split.d_bound + spectral_norm(gain) * sigma.kappa_max() * 3.0 * noise_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifting::ObservableDictionary;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_model(a: DMatrix<f64>, measured: &[usize]) -> KoopmanModel {
        let n = a.nrows();
        let dictionary = ObservableDictionary::identity(n);
        KoopmanModel {
            c_o: dictionary.output_matrix(measured).unwrap(),
            b: DMatrix::zeros(n, 0),
            a,
            measured: measured.to_vec(),
            ridge_lambda: 0.0,
            residual: None,
            omega_max: None,
            dictionary,
        }
    }

    #[test]
    fn sector_eval_values() {
        let t = SectorNonlinearity::tanh(vec![1.0]).unwrap();
        assert_eq!(t.eval_channel(0, 0.0), 0.0);
        let sat = SectorNonlinearity::new(SectorKind::Saturation { limit: 1.0 }, vec![1.0]).unwrap();
        let v = sat.eval_channel(0, 2.0);
        assert_eq!(v, 1.0);
        assert_eq!(v * (2.0 - v), 1.0);
        let t2 = SectorNonlinearity::tanh(vec![2.0]).unwrap();
        // 2·tanh(1) from the exponential form
        let e2 = (2.0f64).exp();
        let oracle = 2.0 * (e2 - 1.0) / (e2 + 1.0);
        assert!((t2.eval_channel(0, 1.0) - oracle).abs() < 1e-12);
        assert!((t2.eval_channel(0, 1.0) - 1.5232).abs() < 1e-4);
        assert!(SectorNonlinearity::tanh(vec![0.0]).is_err());
    }

    #[test]
    fn shipped_kinds_pass_sector_check() {
        let grid = SectorGrid::default();
        for kind in [
            SectorKind::TanhScaled,
            SectorKind::Saturation { limit: 0.7 },
            SectorKind::Deadzone { width: 0.3 },
            SectorKind::Deadzone { width: 0.0 },
        ] {
            let sigma = SectorNonlinearity::new(kind, vec![1.0, 2.5]).unwrap();
            let report = sector_check(&sigma, &grid).unwrap();
            assert!(report.passed, "{kind:?}: {report:?}");
            assert!(report.min_margin >= -1e-12);
        }
    }

    #[test]
    fn deadzone_margin_matches_grid_oracle() {
        // κ·dz(s)·(s − dz(s)) is zero inside the deadzone and w·κ·(|s| − w) outside
        let sigma = SectorNonlinearity::new(SectorKind::Deadzone { width: 0.5 }, vec![1.0]).unwrap();
        for i in 0..=200 {
            let s = -10.0 + 0.1 * i as f64;
            let v = sigma.eval_channel(0, s);
            let expected = if s.abs() <= 0.5 { 0.0 } else { 0.5 * (s.abs() - 0.5) };
            assert!((v * (s - v) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn planted_violator_fails() {
        let report = sector_check_fn(|s| 2.0 * s, 1.0, &SectorGrid::default()).unwrap();
        assert!(!report.passed);
        assert!(report.witness != 0.0);
        assert!(matches!(report.into_result(), Err(Error::SectorViolation { .. })));
        let coarse = SectorGrid {
            half_width: 10.0,
            points: 100,
        };
        assert!(sector_check_fn(|s| s, 1.0, &coarse).is_err());
    }

    #[test]
    fn split_trivial_cases() {
        let samples: Vec<_> = (0..50)
            .map(|k| (DVector::from_element(2, k as f64 * 0.1 - 2.0), DVector::zeros(2)))
            .collect();
        let split = split_residual(&samples, &[1.0, 1.0]).unwrap();
        assert_eq!(split.gains, vec![0.0, 0.0]);
        assert_eq!(split.d_bound, 0.0);

        let samples: Vec<_> = (0..50)
            .map(|k| {
                let t = k as f64 * 0.1;
                (DVector::from_element(1, t - 2.0), DVector::from_element(1, 0.4 * (t - 2.0).tanh() + 0.2))
            })
            .collect();
        let split = split_residual(&samples, &[0.0]).unwrap();
        assert_eq!(split.gains, vec![0.0]);
        let max = samples.iter().map(|s| s.1.norm()).fold(0.0, f64::max);
        assert_eq!(split.d_bound, max);
        assert!(split_residual(&[], &[]).is_err());
    }

    #[test]
    fn split_recovers_planted_slope() {
        let samples: Vec<_> = (0..400)
            .map(|k| {
                let t = k as f64 * 0.05;
                let e = 3.0 * (0.37 * t).sin();
                (DVector::from_element(1, e), DVector::from_element(1, 0.5 * e.tanh() + 0.1 * t.sin()))
            })
            .collect();
        let split = split_residual(&samples, &[2.0]).unwrap();
        // exhaustive grid oracle for the best achievable remainder
        let worst = |g: f64| {
            samples
                .iter()
                .map(|(e, d)| (d[0] - g * e[0].tanh()).abs())
                .fold(0.0, f64::max)
        };
        let best = (0..=20_000).map(|i| worst(i as f64 * 1e-4)).fold(f64::INFINITY, f64::min);
        assert!((split.gains[0] - 0.5).abs() < 0.05, "{:?}", split.gains);
        assert!(split.d_bound <= 0.11);
        assert!(split.d_bound <= best + 1e-6);
    }

    #[test]
    fn embedding_channel_layout() {
        let model = toy_model(-DMatrix::identity(2, 2), &[0]);
        let sigma = SectorNonlinearity::tanh(vec![1.0]).unwrap();
        let k = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let emb = embed_error_dynamics(&model, &k, &sigma, &ResidualSplit::trivial(2, 0.0), 0.0).unwrap();
        assert_eq!(emb.channels.len(), 1);
        assert_eq!(emb.channels[0].b.as_slice(), &[1.0, 0.0]);
        assert_eq!(emb.channels[0].c.as_slice(), &[1.0, 0.0]);

        let zero = embed_error_dynamics(&model, &DMatrix::zeros(2, 1), &sigma, &ResidualSplit::trivial(2, 0.0), 0.0)
            .unwrap();
        let e = DVector::from_row_slice(&[0.3, -0.4]);
        let d = DVector::from_row_slice(&[0.01, 0.02]);
        assert_eq!(zero.rhs(&e, &d), -&e + &d);
    }

    #[test]
    fn embedding_refuses_bad_sector() {
        let model = toy_model(-DMatrix::identity(2, 2), &[0]);
        let sigma = SectorNonlinearity::tanh(vec![1.0]).unwrap();
        let k = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let bad = ResidualSplit {
            gains: vec![2.0, 0.0],
            kappa_budget: vec![1.0, 1.0],
            d_bound: 0.0,
        };
        assert!(matches!(
            embed_error_dynamics(&model, &k, &sigma, &bad, 0.0),
            Err(Error::SectorViolation { channel: 1, .. })
        ));
    }

    #[test]
    fn embedding_matches_direct_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = 5;
        let a = DMatrix::from_fn(r, r, |_, _| rng.random_range(-1.0..1.0));
        let model = toy_model(a.clone(), &[0, 2]);
        let k = DMatrix::from_fn(r, 2, |_, _| rng.random_range(-2.0..2.0));
        let sigma = SectorNonlinearity::tanh(vec![1.0, 1.5]).unwrap();
        let split = ResidualSplit {
            gains: vec![0.3, 0.0, 0.7, 0.1, 0.0],
            kappa_budget: vec![1.0; r],
            d_bound: 0.2,
        };
        let emb = embed_error_dynamics(&model, &k, &sigma, &split, 0.1).unwrap();
        assert_eq!(emb.channels.len(), 2 + 3);
        for _ in 0..100 {
            let e = DVector::from_fn(r, |_, _| rng.random_range(-3.0..3.0));
            let d = DVector::from_fn(r, |_, _| rng.random_range(-1.0..1.0));
            let ce = &model.c_o * &e;
            let corr = DVector::from_fn(2, |i, _| [1.0, 1.5][i] * ce[i].tanh());
            let gamma = DVector::from_fn(r, |j, _| split.gains[j] * e[j].tanh());
            let direct = &a * &e - &k * corr - gamma + &d;
            let assembled = emb.rhs(&e, &d);
            assert!((&assembled - &direct).norm() <= 1e-12 * direct.norm().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn sector_inequality_holds_pointwise(s in -50.0f64..50.0, k in 0.01f64..10.0, w in 0.0f64..3.0) {
            for kind in [SectorKind::TanhScaled, SectorKind::Saturation { limit: w + 0.1 }, SectorKind::Deadzone { width: w }] {
                let sigma = SectorNonlinearity::new(kind, vec![k]).unwrap();
                let v = sigma.eval_channel(0, s);
                prop_assert!(v * (s - v / k) >= -1e-12 * (1.0 + s * s));
                prop_assert_eq!(sigma.eval_channel(0, -s), -v);
            }
        }

        #[test]
        fn split_never_worse_than_trivial(seed in 0u64..1000, budget in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<_> = (0..30)
                .map(|_| {
                    (
                        DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0)),
                        DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)),
                    )
                })
                .collect();
            let split = split_residual(&samples, &[budget; 3]).unwrap();
            let trivial = samples.iter().map(|s| s.1.norm()).fold(0.0, f64::max);
            prop_assert!(split.d_bound <= trivial);
            prop_assert!(split.gains.iter().all(|g| *g >= 0.0 && *g <= budget));
        }
    }
}
