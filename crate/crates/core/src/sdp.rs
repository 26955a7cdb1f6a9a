//! Dense log-barrier solver for a single linear matrix inequality with box
//! bounds:
//!
//! minimize cᵀx  subject to  F₀ + Σ xᵢFᵢ ⪯ −margin·I,  l ≤ x ≤ u.
//!
//! Sized for the few-dozen-variable problems the observer synthesis
//! produces; every `Fᵢ` is stored as sparse symmetric triplets.

use crate::error::{Error, Result};
use crate::linalg::{max_eig_sym, Mat};
use nalgebra::{DVector, Cholesky, Dyn};

/// `(row, col, value)`: `value` at `(row, col)` and `(col, row)`.
pub type SymTriplet = (usize, usize, f64);

#[derive(Clone, Debug)]
pub struct SdpProblem {
    pub dim: usize,
    pub constant: Mat,
    pub terms: Vec<Vec<SymTriplet>>,
    pub objective: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub margin: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdpSettings {
    /// Barrier parameter growth per outer iteration.
    pub mu: f64,
    pub gap_tol: f64,
    pub max_outer: usize,
    pub max_newton: usize,
}

impl Default for SdpSettings {
    fn default() -> Self {
        Self {
            mu: 15.0,
            gap_tol: 1e-6,
            max_outer: 60,
            max_newton: 80,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SdpStatus {
    Optimal,
    /// Phase I certified that no strictly feasible point exists; carries
    /// the smallest shift `s` with `S(x) + sI ≻ 0` that was reached.
    Infeasible { violation: f64 },
    /// Stopped on iteration limits with a strictly feasible point.
    Inaccurate,
}

#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub x: Vec<f64>,
    /// Strictly feasible iterates of phase II, in order.
    pub path: Vec<Vec<f64>>,
    pub newton_steps: usize,
}

impl SdpProblem {
    pub fn num_vars(&self) -> usize {
        self.terms.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        if self.objective.len() != n || self.lower.len() != n || self.upper.len() != n {
            return Err(Error::Dimension("SDP vectors disagree with the variable count".into()));
        }
        if self.constant.nrows() != self.dim || self.constant.ncols() != self.dim {
            return Err(Error::Dimension("SDP constant block has the wrong size".into()));
        }
        for t in self.terms.iter().flatten() {
            if t.0 >= self.dim || t.1 >= self.dim {
                return Err(Error::Dimension("SDP term index outside the block".into()));
            }
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l < u)) {
            return Err(Error::InvalidParameter("SDP box bounds must satisfy lower < upper".into()));
        }
        Ok(())
    }

    /// `F(x) = F₀ + Σ xᵢFᵢ`.
    pub fn evaluate(&self, x: &[f64]) -> Mat {
        let mut f = self.constant.clone();
        for (xi, terms) in x.iter().zip(&self.terms) {
            add_terms(&mut f, terms, *xi);
        }
        f
    }

    /// Box barrier terms with finite bounds.
    fn box_count(&self) -> usize {
        self.lower.iter().filter(|l| l.is_finite()).count() + self.upper.iter().filter(|u| u.is_finite()).count()
    }
}

fn add_terms(m: &mut Mat, terms: &[SymTriplet], scale: f64) {
    for &(a, b, v) in terms {
        m[(a, b)] += scale * v;
        if a != b {
            m[(b, a)] += scale * v;
        }
    }
}

/// Internal form: the slack `S(x) = −F(x) − margin·I − shift·I` where the
/// optional shift variable is the last entry of `x` in phase I.
struct Barrier<'a> {
    problem: &'a SdpProblem,
    phase_one: bool,
    objective: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    /// Each `Fᵢ` as `Σ (e_a uᵀ + u e_aᵀ)` over a few anchor rows `a`.
    factors: Vec<Vec<(usize, Vec<(usize, f64)>)>>,
}

/// Groups the triplets of one coefficient matrix by their most frequent endpoint.
fn factorize(terms: &[SymTriplet]) -> Vec<(usize, Vec<(usize, f64)>)> {
    let mut count = std::collections::HashMap::new();
    for &(a, b, _) in terms {
        *count.entry(a).or_insert(0usize) += 1;
        if a != b {
            *count.entry(b).or_insert(0usize) += 1;
        }
    }
    let mut rows: Vec<(usize, Vec<(usize, f64)>)> = Vec::new();
    for &(a, b, v) in terms {
        let (anchor, other, value) = if a == b {
            (a, a, 0.5 * v)
        } else if (count[&b], b) > (count[&a], a) {
            (b, a, v)
        } else {
            (a, b, v)
        };
        match rows.iter_mut().find(|(r, _)| *r == anchor) {
            Some((_, u)) => u.push((other, value)),
            None => rows.push((anchor, vec![(other, value)])),
        }
    }
    rows
}

impl<'a> Barrier<'a> {
    fn new(problem: &'a SdpProblem, phase_one: bool, objective: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        let factors = problem.terms.iter().map(|t| factorize(t)).collect();
        Self {
            problem,
            phase_one,
            objective,
            lower,
            upper,
            factors,
        }
    }


    fn n(&self) -> usize {
        self.lower.len()
    }

    fn slack(&self, x: &[f64]) -> Mat {
        let p = self.problem;
        let mut s = -p.evaluate(&x[..p.num_vars()]);
        let shift = if self.phase_one { x[p.num_vars()] } else { 0.0 };
        for i in 0..p.dim {
            s[(i, i)] -= p.margin;
            s[(i, i)] += shift;
        }
        s
    }

    fn in_box(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| v > l && v < u)
    }

    /// Barrier value `t·cᵀx − log det S − Σ log(box)`, or `None` outside the domain.
    fn value(&self, x: &[f64], t: f64) -> Option<(f64, Cholesky<f64, Dyn>)> {
        if !self.in_box(x) {
            return None;
        }
        let chol = self.slack(x).cholesky()?;
        let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let mut v = t * dot(&self.objective, x) - logdet;
        for (i, xi) in x.iter().enumerate() {
            if self.lower[i].is_finite() {
                v -= (xi - self.lower[i]).ln();
            }
            if self.upper[i].is_finite() {
                v -= (self.upper[i] - xi).ln();
            }
        }
        v.is_finite().then_some((v, chol))
    }

    fn terms(&self, i: usize) -> &[SymTriplet] {
        if i < self.problem.num_vars() {
            &self.problem.terms[i]
        } else {
            &[]
        }
    }

    /// Gradient and Hessian of the barrier objective at a domain point.
    fn derivatives(&self, x: &[f64], t: f64, chol: &Cholesky<f64, Dyn>) -> (DVector<f64>, Mat) {
        let n = self.n();
        let dim = self.problem.dim;
        let w = chol.inverse();
        let mut grad = DVector::from_fn(n, |i, _| t * self.objective[i]);
        let mut hess = Mat::zeros(n, n);
        let shift_index = self.phase_one.then_some(self.problem.num_vars());
        for i in 0..n {
            // dS/dxᵢ = −Fᵢ, or +I for the phase I shift
            if Some(i) == shift_index {
                grad[i] -= w.trace();
            } else {
                grad[i] += self
                    .terms(i)
                    .iter()
                    .map(|&(a, b, v)| if a == b { v * w[(a, a)] } else { 2.0 * v * w[(a, b)] })
                    .sum::<f64>();
            }
        }
        // Gᵢ = W Fᵢ W from the low-rank factors, then tr(Gᵢ Fⱼ) over the triplets of Fⱼ
        let contract = |g: &Mat, tj: &[SymTriplet]| -> f64 {
            tj.iter()
                .map(|&(c, d, u)| if c == d { u * g[(c, c)] } else { u * (g[(c, d)] + g[(d, c)]) })
                .sum()
        };
        let mut g = Mat::zeros(dim, dim);
        for i in 0..n {
            if Some(i) == shift_index {
                // tr(W W) for the shift, whose sign flips cancel in the product
                hess[(i, i)] = w.iter().map(|v| v * v).sum::<f64>();
                continue;
            }
            g.fill(0.0);
            for (a, u) in &self.factors[i] {
                let mut wu = DVector::zeros(dim);
                for &(k, v) in u {
                    wu.axpy(v, &w.column(k), 1.0);
                }
                let wa = w.column(*a);
                g.ger(1.0, &wa, &wu, 1.0);
                g.ger(1.0, &wu, &wa, 1.0);
            }
            for j in i..n {
                let h = if Some(j) == shift_index { -g.trace() } else { contract(&g, self.terms(j)) };
                hess[(i, j)] = h;
                hess[(j, i)] = h;
            }
        }
        for (i, xi) in x.iter().enumerate() {
            if self.lower[i].is_finite() {
                let d = xi - self.lower[i];
                grad[i] -= 1.0 / d;
                hess[(i, i)] += 1.0 / (d * d);
            }
            if self.upper[i].is_finite() {
                let d = self.upper[i] - xi;
                grad[i] += 1.0 / d;
                hess[(i, i)] += 1.0 / (d * d);
            }
        }
        (grad, hess)
    }

    /// Damped Newton centering at barrier weight `t`. `stop` ends early.
    fn center(
        &self,
        x: &mut Vec<f64>,
        t: f64,
        settings: &SdpSettings,
        steps: &mut usize,
        stop: &dyn Fn(&[f64]) -> bool,
    ) -> Result<bool> {
        let (mut value, mut chol) = self
            .value(x, t)
            .ok_or_else(|| Error::SolverFailure("centering started outside the domain".into()))?;
        for _ in 0..settings.max_newton {
            let (grad, hess) = self.derivatives(x, t, &chol);
            let delta = newton_direction(&hess, &grad)?;
            let decrement = -grad.dot(&delta);
            if !decrement.is_finite() {
                return Err(Error::SolverFailure("non-finite Newton decrement".into()));
            }
            if decrement < 2e-10 {
                return Ok(true);
            }
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..80 {
                let trial: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + step * d).collect();
                if let Some((v, c)) = self.value(&trial, t) {
                    if v <= value - 0.25 * step * decrement {
                        accepted = Some((trial, v, c));
                        break;
                    }
                }
                step *= 0.5;
            }
            *steps += 1;
            let Some((trial, v, c)) = accepted else {
                // no progress possible at machine precision
                return Ok(false);
            };
            *x = trial;
            value = v;
            chol = c;
            if stop(x) {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `H Δ = −g` with Jacobi scaling; adds a tiny ridge if `H` is
/// numerically semidefinite.
fn newton_direction(hess: &Mat, grad: &DVector<f64>) -> Result<DVector<f64>> {
    let n = grad.len();
    let scale = DVector::from_fn(n, |i, _| 1.0 / hess[(i, i)].max(1e-300).sqrt());
    let mut scaled = Mat::from_fn(n, n, |i, j| hess[(i, j)] * scale[i] * scale[j]);
    let rhs = -grad.component_mul(&scale);
    let mut ridge = 0.0;
    for _ in 0..8 {
        if let Some(ch) = scaled.clone().cholesky() {
            return Ok(ch.solve(&rhs).component_mul(&scale));
        }
        let next = if ridge == 0.0 { 1e-12 } else { ridge * 100.0 };
        for i in 0..n {
            scaled[(i, i)] += next - ridge;
        }
        ridge = next;
    }
    Err(Error::SolverFailure("Newton system is not positive definite".into()))
}

/// Strictly interior starting guess for the box.
fn box_interior(lower: &[f64], upper: &[f64], guess: Option<&[f64]>) -> Vec<f64> {
    (0..lower.len())
        .map(|i| {
            let (l, u) = (lower[i], upper[i]);
            let inside = |v: f64| v > l && v < u;
            if let Some(g) = guess.map(|g| g[i]).filter(|v| inside(*v)) {
                return g;
            }
            match (l.is_finite(), u.is_finite()) {
                (true, true) => {
                    let mid = 0.5 * (l + u);
                    // prefer small magnitudes inside wide boxes
                    if inside(0.0) {
                        0.0
                    } else if l >= 0.0 {
                        (l + 1.0).min(mid)
                    } else {
                        mid
                    }
                }
                (true, false) => l + 1.0,
                (false, true) => u - 1.0,
                (false, false) => 0.0,
            }
        })
        .collect()
}

/// Runs phase I, then the barrier path. `guess` seeds phase I.
pub fn solve(problem: &SdpProblem, guess: Option<&[f64]>, settings: &SdpSettings) -> Result<SdpSolution> {
    problem.validate()?;
    let n = problem.num_vars();
    let m_lmi = problem.dim as f64;
    let mut steps = 0usize;

    // Phase I: minimize s subject to S(x) + sI ≻ 0
    let mut x = box_interior(&problem.lower, &problem.upper, guess);
    let slack0 = {
        let mut s = -problem.evaluate(&x);
        for i in 0..problem.dim {
            s[(i, i)] -= problem.margin;
        }
        s
    };
    let lam_min = -max_eig_sym(&(-slack0));
    if lam_min <= 0.0 {
        let s0 = -lam_min + 1.0 + 0.1 * lam_min.abs();
        let floor = -(1.0 + s0);
        let mut lower = problem.lower.clone();
        let mut upper = problem.upper.clone();
        lower.push(floor);
        upper.push(f64::INFINITY);
        let mut objective = vec![0.0; n];
        objective.push(1.0);
        let phase = Barrier::new(problem, true, objective, lower, upper);
        let mut xs = x.clone();
        xs.push(s0);
        let m_total = m_lmi + problem.box_count() as f64 + 1.0;
        let mut t = 1.0 / s0.max(1e-3);
        let target = -1e-9 * (1.0 + s0);
        let stop = |v: &[f64]| v[n] < target;
        let mut found = false;
        for _ in 0..settings.max_outer {
            phase.center(&mut xs, t, settings, &mut steps, &stop)?;
            if xs[n] < target {
                found = true;
                break;
            }
            if xs[n] - m_total / t > 0.0 {
                return Ok(SdpSolution {
                    status: SdpStatus::Infeasible { violation: xs[n] },
                    x: xs[..n].to_vec(),
                    path: Vec::new(),
                    newton_steps: steps,
                });
            }
            t *= settings.mu;
        }
        if !found {
            return Ok(SdpSolution {
                status: SdpStatus::Infeasible { violation: xs[n] },
                x: xs[..n].to_vec(),
                path: Vec::new(),
                newton_steps: steps,
            });
        }
        x = xs[..n].to_vec();
    }

    // Phase II
    let phase = Barrier::new(problem, false, problem.objective.clone(), problem.lower.clone(), problem.upper.clone());
    if phase.value(&x, 1.0).is_none() {
        return Err(Error::SolverFailure("phase I point is not strictly feasible".into()));
    }
    let m_total = m_lmi + problem.box_count() as f64;
    let obj0 = dot(&problem.objective, &x).abs();
    let mut t = m_total / obj0.max(1e-6);
    let mut path = Vec::new();
    let never = |_: &[f64]| false;
    for _ in 0..settings.max_outer {
        let centered = phase.center(&mut x, t, settings, &mut steps, &never)?;
        path.push(x.clone());
        let obj = dot(&problem.objective, &x);
        if m_total / t <= settings.gap_tol * (1.0 + obj.abs()) {
            return Ok(SdpSolution {
                status: if centered { SdpStatus::Optimal } else { SdpStatus::Inaccurate },
                x,
                path,
                newton_steps: steps,
            });
        }
        t *= settings.mu;
    }
    Ok(SdpSolution {
        status: SdpStatus::Inaccurate,
        x,
        path,
        newton_steps: steps,
    })
}
