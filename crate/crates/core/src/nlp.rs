//! Smooth constrained programs and a first-order-stationarity solver.
//!
//! Problems have the form
//!
//! ```text
//! minimize    f(y)
//! subject to  c(y) = 0,  g(y) <= 0,  l <= y <= u
//! ```
//!
//! `solve_nlp` runs an augmented Lagrangian method on `c` and `g` (PHR form)
//! whose subproblems are minimized over the box `[l, u]` by a projected Newton
//! method. Simple bounds are therefore satisfied exactly by every iterate.
//! `check_kkt` re-evaluates the first-order conditions independently of the
//! solver.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::ModelError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub objective: f64,
    pub eq: DVector<f64>,
    pub ineq: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives {
    pub gradient: DVector<f64>,
    pub eq_jacobian: DMatrix<f64>,
    pub ineq_jacobian: DMatrix<f64>,
}

/// A smooth program with equality rows, general inequality rows `g <= 0`
/// and simple variable bounds.
pub trait NlpProblem: Sync {
    fn num_vars(&self) -> usize;
    fn num_eq(&self) -> usize;
    fn num_ineq(&self) -> usize;
    fn lower_bounds(&self) -> &[f64];
    fn upper_bounds(&self) -> &[f64];
    fn evaluate(&self, y: &DVector<f64>) -> Result<Evaluation, EvalError>;
    fn derivatives(&self, y: &DVector<f64>) -> Result<Derivatives, EvalError>;

    /// Hessian of `f + eq_wᵀc + ineq_wᵀg`. The default differences the exact
    /// gradient; implementors with known structure should override it.
    fn lagrangian_hessian(
        &self,
        y: &DVector<f64>,
        eq_w: &DVector<f64>,
        ineq_w: &DVector<f64>,
    ) -> Result<DMatrix<f64>, EvalError> {
        fd_hessian(y, |p| {
            let d = self.derivatives(p)?;
            Ok(lagrangian_gradient(&d, eq_w, ineq_w))
        })
    }
}

/// `∇f + J_cᵀ eq_w + J_gᵀ ineq_w`.
pub fn lagrangian_gradient(d: &Derivatives, eq_w: &DVector<f64>, ineq_w: &DVector<f64>) -> DVector<f64> {
    let mut g = d.gradient.clone();
    if !eq_w.is_empty() {
        g += d.eq_jacobian.tr_mul(eq_w);
    }
    if !ineq_w.is_empty() {
        g += d.ineq_jacobian.tr_mul(ineq_w);
    }
    g
}

/// Central-difference Jacobian of a gradient map, symmetrized.
pub fn fd_hessian<F>(y: &DVector<f64>, mut grad: F) -> Result<DMatrix<f64>, EvalError>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>, EvalError>,
{
    let n = y.len();
    let mut h = DMatrix::zeros(n, n);
    let mut p = y.clone();
    for j in 0..n {
        let step = 6e-6 * y[j].abs().max(1.0);
        p[j] = y[j] + step;
        let gp = grad(&p)?;
        p[j] = y[j] - step;
        let gm = grad(&p)?;
        p[j] = y[j];
        h.set_column(j, &((gp - gm) / (2.0 * step)));
    }
    Ok((&h + h.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    pub kkt_tol: f64,
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    pub penalty_growth: f64,
    pub initial_penalty: f64,
    pub max_penalty: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-6,
            max_outer_iters: 50,
            max_inner_iters: 500,
            penalty_growth: 10.0,
            initial_penalty: 10.0,
            max_penalty: 1e8,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<(), NlpError> {
        let ok = self.kkt_tol > 0.0
            && self.kkt_tol < 1.0
            && self.max_outer_iters > 0
            && self.max_inner_iters > 0
            && self.penalty_growth > 1.0
            && self.initial_penalty > 0.0
            && self.max_penalty >= self.initial_penalty;
        if ok {
            Ok(())
        } else {
            Err(NlpError::InvalidOptions(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NlpError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIters,
    Infeasible,
    Singular,
}

/// Lagrange multipliers: `eq` for `c = 0`, `ineq >= 0` for `g <= 0`,
/// `lower`/`upper >= 0` for the simple bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    pub eq: DVector<f64>,
    pub ineq: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Multipliers {
    pub fn zeros(n: usize, m_eq: usize, m_ineq: usize) -> Self {
        Self {
            eq: DVector::zeros(m_eq),
            ineq: DVector::zeros(m_ineq),
            lower: DVector::zeros(n),
            upper: DVector::zeros(n),
        }
    }
}

/// Initial primal point and optional dual guesses.
#[derive(Debug, Clone, PartialEq)]
pub struct StartPoint {
    pub primal: DVector<f64>,
    pub eq: Option<DVector<f64>>,
    pub ineq: Option<DVector<f64>>,
}

impl StartPoint {
    pub fn primal(primal: DVector<f64>) -> Self {
        Self {
            primal,
            eq: None,
            ineq: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub feasibility: f64,
    /// Includes sign violations of the inequality and bound multipliers.
    pub complementarity: f64,
}

impl KktResiduals {
    fn worst(&self) -> f64 {
        self.stationarity.max(self.feasibility).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub x: DVector<f64>,
    pub objective: f64,
    pub multipliers: Multipliers,
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub wall_time: Duration,
}

impl SolveResult {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// First-order residual norms at `(y, multipliers)`, computed from scratch.
pub fn check_kkt(problem: &dyn NlpProblem, y: &DVector<f64>, m: &Multipliers) -> Result<KktResiduals, NlpError> {
    let n = problem.num_vars();
    dim("point", y.len(), n)?;
    dim("equality multipliers", m.eq.len(), problem.num_eq())?;
    dim("inequality multipliers", m.ineq.len(), problem.num_ineq())?;
    dim("lower-bound multipliers", m.lower.len(), n)?;
    dim("upper-bound multipliers", m.upper.len(), n)?;
    let ev = problem.evaluate(y)?;
    let d = problem.derivatives(y)?;
    Ok(kkt_from_parts(
        problem.lower_bounds(),
        problem.upper_bounds(),
        y,
        &ev,
        &d,
        m,
    ))
}

fn kkt_from_parts(
    lower: &[f64],
    upper: &[f64],
    y: &DVector<f64>,
    ev: &Evaluation,
    d: &Derivatives,
    m: &Multipliers,
) -> KktResiduals {
    let mut grad = lagrangian_gradient(d, &m.eq, &m.ineq);
    grad -= &m.lower;
    grad += &m.upper;
    let stationarity = inf_norm(&grad);

    let mut feasibility = inf_norm(&ev.eq);
    for &g in ev.ineq.iter() {
        feasibility = feasibility.max(g);
    }
    let mut complementarity: f64 = 0.0;
    for (j, &g) in ev.ineq.iter().enumerate() {
        complementarity = complementarity.max((m.ineq[j] * g).abs()).max(-m.ineq[j]);
    }
    for i in 0..y.len() {
        let (l, u) = (lower[i], upper[i]);
        feasibility = feasibility.max(l - y[i]).max(y[i] - u);
        complementarity = complementarity.max(-m.lower[i]).max(-m.upper[i]);
        if l.is_finite() {
            complementarity = complementarity.max((m.lower[i] * (y[i] - l)).abs());
        } else {
            complementarity = complementarity.max(m.lower[i].abs());
        }
        if u.is_finite() {
            complementarity = complementarity.max((m.upper[i] * (u - y[i])).abs());
        } else {
            complementarity = complementarity.max(m.upper[i].abs());
        }
    }
    KktResiduals {
        stationarity,
        feasibility: feasibility.max(0.0),
        complementarity,
    }
}

fn dim(what: &'static str, got: usize, expected: usize) -> Result<(), NlpError> {
    if got == expected {
        Ok(())
    } else {
        Err(NlpError::Dimension { what, expected, got })
    }
}

pub(crate) fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |a, &b| a.max(b.abs()))
}

/// PHR augmented Lagrangian with fixed multiplier estimates and penalty.
struct AugLag<'a> {
    problem: &'a dyn NlpProblem,
    lam: &'a DVector<f64>,
    mu: &'a DVector<f64>,
    rho: f64,
}

impl AugLag<'_> {
    fn value(&self, ev: &Evaluation) -> f64 {
        let rho = self.rho;
        let mut phi = ev.objective + self.lam.dot(&ev.eq) + 0.5 * rho * ev.eq.norm_squared();
        for (j, &g) in ev.ineq.iter().enumerate() {
            let s = (self.mu[j] + rho * g).max(0.0);
            phi += (s * s - self.mu[j] * self.mu[j]) / (2.0 * rho);
        }
        phi
    }

    fn weights(&self, ev: &Evaluation) -> (DVector<f64>, DVector<f64>) {
        let eq_w = self.lam + &ev.eq * self.rho;
        let ineq_w = DVector::from_iterator(
            ev.ineq.len(),
            ev.ineq
                .iter()
                .zip(self.mu.iter())
                .map(|(&g, &m)| (m + self.rho * g).max(0.0)),
        );
        (eq_w, ineq_w)
    }

    fn hessian(
        &self,
        y: &DVector<f64>,
        d: &Derivatives,
        eq_w: &DVector<f64>,
        ineq_w: &DVector<f64>,
    ) -> Result<DMatrix<f64>, EvalError> {
        let mut h = self.problem.lagrangian_hessian(y, eq_w, ineq_w)?;
        if d.eq_jacobian.nrows() > 0 {
            h += d.eq_jacobian.tr_mul(&d.eq_jacobian) * self.rho;
        }
        for (j, &w) in ineq_w.iter().enumerate() {
            if w > 0.0 {
                let row = d.ineq_jacobian.row(j);
                h += row.tr_mul(&row) * self.rho;
            }
        }
        Ok(h)
    }
}

struct InnerOutcome {
    iterations: usize,
    eval: Evaluation,
    derivs: Derivatives,
}

fn projected_gradient_norm(y: &DVector<f64>, g: &DVector<f64>, l: &[f64], u: &[f64]) -> f64 {
    let mut n: f64 = 0.0;
    for i in 0..y.len() {
        let p = (y[i] - g[i]).clamp(l[i], u[i]);
        n = n.max((y[i] - p).abs());
    }
    n
}

/// Projected Newton minimization of the augmented Lagrangian over the box.
fn minimize_in_box(
    al: &AugLag<'_>,
    y: &mut DVector<f64>,
    lower: &[f64],
    upper: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<InnerOutcome, EvalError> {
    let problem = al.problem;
    let n = y.len();
    let mut ev = problem.evaluate(y)?;
    let mut phi = al.value(&ev);
    let mut iterations = 0;
    let mut stagnant = 0;
    loop {
        let derivs = problem.derivatives(y)?;
        let (eq_w, ineq_w) = al.weights(&ev);
        let grad = lagrangian_gradient(&derivs, &eq_w, &ineq_w);
        let pg = projected_gradient_norm(y, &grad, lower, upper);
        if pg <= tol || iterations >= max_iters {
            return Ok(InnerOutcome {
                iterations,
                eval: ev,
                derivs,
            });
        }
        let eps = pg.min(1e-3);
        let active: Vec<bool> = (0..n)
            .map(|i| {
                lower[i] == upper[i]
                    || (y[i] <= lower[i] + eps && grad[i] > 0.0)
                    || (y[i] >= upper[i] - eps && grad[i] < 0.0)
            })
            .collect();
        let free: Vec<usize> = (0..n).filter(|&i| !active[i]).collect();

        let hess = al.hessian(y, &derivs, &eq_w, &ineq_w)?;
        let mut dir = DVector::zeros(n);
        for i in 0..n {
            if active[i] {
                dir[i] = -grad[i] / hess[(i, i)].max(1.0);
            }
        }
        if !free.is_empty() {
            let k = free.len();
            let hff = DMatrix::from_fn(k, k, |a, b| hess[(free[a], free[b])]);
            let gf = DVector::from_fn(k, |a, _| grad[free[a]]);
            let scale = hff.diagonal().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let mut delta = 0.0;
            let step = loop {
                let mut reg = hff.clone();
                for a in 0..k {
                    reg[(a, a)] += delta;
                }
                if let Some(ch) = reg.cholesky() {
                    break ch.solve(&(-&gf));
                }
                delta = if delta == 0.0 { 1e-10 * scale } else { delta * 10.0 };
            };
            for (a, &i) in free.iter().enumerate() {
                dir[i] = step[a];
            }
        }

        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = DVector::from_fn(n, |i, _| (y[i] + alpha * dir[i]).clamp(lower[i], upper[i]));
            if let Ok(tev) = problem.evaluate(&trial) {
                let tphi = al.value(&tev);
                let mut pred = 0.0;
                for i in 0..n {
                    if active[i] {
                        pred += grad[i] * (y[i] - trial[i]);
                    } else {
                        pred -= alpha * grad[i] * dir[i];
                    }
                }
                if tphi.is_finite() && tphi <= phi - 1e-4 * pred {
                    let moved = (&trial - &*y).amax();
                    // Progress below rounding level of the merit value.
                    if phi - tphi <= 1e-15 * phi.abs().max(1.0) {
                        stagnant += 1;
                    } else {
                        stagnant = 0;
                    }
                    *y = trial;
                    phi = tphi;
                    ev = tev;
                    accepted = moved > 0.0;
                    break;
                }
            }
            alpha *= 0.5;
        }
        iterations += 1;
        if !accepted || stagnant >= 3 {
            let derivs = problem.derivatives(y)?;
            return Ok(InnerOutcome {
                iterations,
                eval: ev,
                derivs,
            });
        }
    }
}

/// Multipliers of the simple bounds implied by the Lagrangian gradient.
fn bound_multipliers(
    y: &DVector<f64>,
    grad: &DVector<f64>,
    lower: &[f64],
    upper: &[f64],
) -> (DVector<f64>, DVector<f64>) {
    let n = y.len();
    let mut ml = DVector::zeros(n);
    let mut mu = DVector::zeros(n);
    for i in 0..n {
        if y[i] <= lower[i] && grad[i] > 0.0 {
            ml[i] = grad[i];
        } else if y[i] >= upper[i] && grad[i] < 0.0 {
            mu[i] = -grad[i];
        }
    }
    (ml, mu)
}

/// Solves `problem` to first-order stationarity from `start`.
pub fn solve_nlp(problem: &dyn NlpProblem, start: &StartPoint, opts: &SolveOptions) -> Result<SolveResult, NlpError> {
    let clock = Instant::now();
    opts.validate()?;
    let n = problem.num_vars();
    let m_eq = problem.num_eq();
    let m_in = problem.num_ineq();
    dim("initial guess", start.primal.len(), n)?;
    if let Some(l) = &start.eq {
        dim("equality multiplier guess", l.len(), m_eq)?;
    }
    if let Some(m) = &start.ineq {
        dim("inequality multiplier guess", m.len(), m_in)?;
    }
    let lower = problem.lower_bounds().to_vec();
    let upper = problem.upper_bounds().to_vec();
    dim("lower bounds", lower.len(), n)?;
    dim("upper bounds", upper.len(), n)?;

    let mut y = DVector::from_fn(n, |i, _| {
        start.primal[i].clamp(lower[i].min(upper[i]), upper[i].max(lower[i]))
    });
    let failure = |status, y: DVector<f64>| SolveResult {
        status,
        x: y,
        objective: f64::NAN,
        multipliers: Multipliers::zeros(n, m_eq, m_in),
        stationarity: f64::INFINITY,
        feasibility: f64::INFINITY,
        complementarity: f64::INFINITY,
        outer_iterations: 0,
        inner_iterations: 0,
        wall_time: clock.elapsed(),
    };
    if lower.iter().zip(&upper).any(|(l, u)| l > u) {
        return Ok(failure(SolveStatus::Infeasible, y));
    }
    if problem.evaluate(&y).is_err() {
        return Ok(failure(SolveStatus::Singular, y));
    }

    let mut lam = start.eq.clone().unwrap_or_else(|| DVector::zeros(m_eq));
    let mut mu = start
        .ineq
        .clone()
        .map(|m| m.map(|v| v.max(0.0)))
        .unwrap_or_else(|| DVector::zeros(m_in));
    let mut rho = opts.initial_penalty;
    let inner_tol = 0.1 * opts.kkt_tol;
    let mut prev_violation = f64::INFINITY;
    let mut stalled_at_max = 0;
    let mut inner_total = 0;
    let mut best: Option<(f64, SolveResult)> = None;

    for outer in 1..=opts.max_outer_iters {
        let al = AugLag {
            problem,
            lam: &lam,
            mu: &mu,
            rho,
        };
        let inner = match minimize_in_box(&al, &mut y, &lower, &upper, inner_tol, opts.max_inner_iters) {
            Ok(r) => r,
            Err(_) => {
                let mut r = failure(SolveStatus::Singular, y.clone());
                r.outer_iterations = outer;
                r.inner_iterations = inner_total;
                return Ok(r);
            }
        };
        inner_total += inner.iterations;
        log::trace!("outer {outer}: penalty {rho:e}, {} inner iterations", inner.iterations);
        let (eq_w, ineq_w) = al.weights(&inner.eval);
        let grad = lagrangian_gradient(&inner.derivs, &eq_w, &ineq_w);
        let (ml, mu_b) = bound_multipliers(&y, &grad, &lower, &upper);
        let mults = Multipliers {
            eq: eq_w.clone(),
            ineq: ineq_w.clone(),
            lower: ml,
            upper: mu_b,
        };
        let kkt = kkt_from_parts(&lower, &upper, &y, &inner.eval, &inner.derivs, &mults);
        let result = SolveResult {
            status: SolveStatus::Optimal,
            x: y.clone(),
            objective: inner.eval.objective,
            multipliers: mults,
            stationarity: kkt.stationarity,
            feasibility: kkt.feasibility,
            complementarity: kkt.complementarity,
            outer_iterations: outer,
            inner_iterations: inner_total,
            wall_time: clock.elapsed(),
        };
        if kkt.worst() <= opts.kkt_tol {
            return Ok(result);
        }
        if best.as_ref().is_none_or(|(w, _)| kkt.worst() < *w) {
            best = Some((kkt.worst(), result));
        }

        // Infeasibility measure including complementarity of g.
        let mut violation = inf_norm(&inner.eval.eq);
        for (j, &g) in inner.eval.ineq.iter().enumerate() {
            violation = violation.max(g.max(-mu[j] / rho).abs());
        }
        lam = eq_w.map(|v| v.clamp(-1e12, 1e12));
        mu = ineq_w.map(|v| v.min(1e12));

        if rho >= opts.max_penalty {
            if kkt.feasibility > 1e3 * opts.kkt_tol && violation > 0.9 * prev_violation {
                stalled_at_max += 1;
                if stalled_at_max >= 5 {
                    let (_, mut r) = best.take().expect("best iterate recorded");
                    r.status = SolveStatus::Infeasible;
                    r.wall_time = clock.elapsed();
                    return Ok(r);
                }
            } else {
                stalled_at_max = 0;
            }
        } else if violation > 0.25 * prev_violation {
            rho = (rho * opts.penalty_growth).min(opts.max_penalty);
        }
        prev_violation = violation;
    }
    let (_, mut r) = best.expect("at least one outer iteration");
    r.status = SolveStatus::MaxIters;
    r.inner_iterations = inner_total;
    r.outer_iterations = opts.max_outer_iters;
    r.wall_time = clock.elapsed();
    Ok(r)
}

/// Convex quadratic program with linear constraints:
/// minimize `½ yᵀHy + cᵀy` s.t. `A_eq y = b_eq`, `A_in y <= b_in`, `l <= y <= u`.
#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QuadraticProgram {
    pub fn unconstrained(h: DMatrix<f64>, c: DVector<f64>) -> Self {
        let n = c.len();
        Self {
            h,
            c,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }
}

impl NlpProblem for QuadraticProgram {
    fn num_vars(&self) -> usize {
        self.c.len()
    }
    fn num_eq(&self) -> usize {
        self.b_eq.len()
    }
    fn num_ineq(&self) -> usize {
        self.b_in.len()
    }
    fn lower_bounds(&self) -> &[f64] {
        &self.lower
    }
    fn upper_bounds(&self) -> &[f64] {
        &self.upper
    }
    fn evaluate(&self, y: &DVector<f64>) -> Result<Evaluation, EvalError> {
        if y.len() != self.c.len() {
            return Err(EvalError::Dimension {
                what: "point",
                expected: self.c.len(),
                got: y.len(),
            });
        }
        Ok(Evaluation {
            objective: 0.5 * y.dot(&(&self.h * y)) + self.c.dot(y),
            eq: &self.a_eq * y - &self.b_eq,
            ineq: &self.a_in * y - &self.b_in,
        })
    }
    fn derivatives(&self, y: &DVector<f64>) -> Result<Derivatives, EvalError> {
        Ok(Derivatives {
            gradient: &self.h * y + &self.c,
            eq_jacobian: self.a_eq.clone(),
            ineq_jacobian: self.a_in.clone(),
        })
    }
    fn lagrangian_hessian(
        &self,
        _y: &DVector<f64>,
        _eq_w: &DVector<f64>,
        _ineq_w: &DVector<f64>,
    ) -> Result<DMatrix<f64>, EvalError> {
        Ok(self.h.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_qp(h: f64, c: f64) -> QuadraticProgram {
        QuadraticProgram::unconstrained(DMatrix::from_element(1, 1, h), DVector::from_element(1, c))
    }

    #[test]
    fn unconstrained_least_squares() {
        let a = DVector::from_vec(vec![1.5, -2.0, 0.25]);
        let qp = QuadraticProgram::unconstrained(DMatrix::identity(3, 3) * 2.0, -&a * 2.0);
        let r = solve_nlp(&qp, &StartPoint::primal(DVector::zeros(3)), &SolveOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((&r.x - &a).amax() < 1e-9);
        assert_eq!(r.multipliers.eq.len(), 0);
        assert_eq!(r.multipliers.ineq.len(), 0);
    }

    #[test]
    fn general_inequality_multiplier() {
        // (x-2)² = x² - 4x + 4, s.t. x - 1 <= 0.
        let mut qp = scalar_qp(2.0, -4.0);
        qp.a_in = DMatrix::from_element(1, 1, 1.0);
        qp.b_in = DVector::from_element(1, 1.0);
        let r = solve_nlp(&qp, &StartPoint::primal(DVector::zeros(1)), &SolveOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(r.x[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(r.multipliers.ineq[0], 2.0, epsilon = 1e-5);
    }

    #[test]
    fn bound_multiplier() {
        let mut qp = scalar_qp(2.0, -4.0);
        qp.upper = vec![1.0];
        let r = solve_nlp(&qp, &StartPoint::primal(DVector::zeros(1)), &SolveOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_eq!(r.x[0], 1.0);
        assert_abs_diff_eq!(r.multipliers.upper[0], 2.0, epsilon = 1e-9);
        let kkt = check_kkt(&qp, &r.x, &r.multipliers).unwrap();
        assert!(kkt.stationarity <= 1e-10 && kkt.feasibility <= 1e-10 && kkt.complementarity <= 1e-10);
    }

    #[test]
    fn equality_multiplier() {
        let mut qp = QuadraticProgram::unconstrained(DMatrix::identity(2, 2) * 2.0, DVector::zeros(2));
        qp.a_eq = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        qp.b_eq = DVector::from_element(1, 1.0);
        let opts = SolveOptions {
            kkt_tol: 1e-10,
            ..SolveOptions::default()
        };
        let r = solve_nlp(&qp, &StartPoint::primal(DVector::zeros(2)), &opts).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(r.x[0], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(r.x[1], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(r.multipliers.eq[0], -1.0, epsilon = 1e-6);
    }

    #[test]
    fn kkt_at_analytic_optimum() {
        let mut qp = scalar_qp(2.0, -4.0);
        qp.a_in = DMatrix::from_element(1, 1, 1.0);
        qp.b_in = DVector::from_element(1, 1.0);
        let mut m = Multipliers::zeros(1, 0, 1);
        m.ineq[0] = 2.0;
        let k = check_kkt(&qp, &DVector::from_element(1, 1.0), &m).unwrap();
        assert!(k.stationarity <= 1e-10 && k.feasibility <= 1e-10 && k.complementarity <= 1e-10);

        // Feasible, non-stationary: ∇L = 2(0.5-2) + 0 = -3.
        let k = check_kkt(&qp, &DVector::from_element(1, 0.5), &Multipliers::zeros(1, 0, 1)).unwrap();
        assert_abs_diff_eq!(k.stationarity, 3.0, epsilon = 1e-15);
        assert_eq!(k.feasibility, 0.0);
    }

    #[test]
    fn kkt_zero_at_unconstrained_minimum() {
        let qp = scalar_qp(2.0, -4.0);
        let k = check_kkt(&qp, &DVector::from_element(1, 2.0), &Multipliers::zeros(1, 0, 0)).unwrap();
        assert_eq!(k.stationarity, 0.0);
        assert_eq!(k.feasibility, 0.0);
        assert_eq!(k.complementarity, 0.0);
    }

    #[test]
    fn kkt_rejects_bad_dimensions() {
        let qp = scalar_qp(2.0, -4.0);
        assert!(check_kkt(&qp, &DVector::zeros(2), &Multipliers::zeros(1, 0, 0)).is_err());
        assert!(solve_nlp(&qp, &StartPoint::primal(DVector::zeros(3)), &SolveOptions::default()).is_err());
    }

    #[test]
    fn empty_box_is_infeasible() {
        let mut qp = scalar_qp(2.0, 0.0);
        qp.lower = vec![1.0];
        qp.upper = vec![0.0];
        let r = solve_nlp(&qp, &StartPoint::primal(DVector::zeros(1)), &SolveOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Infeasible);
    }

    #[test]
    fn contradictory_rows_are_infeasible() {
        // x = 2 and x <= 1.
        let mut qp = scalar_qp(2.0, 0.0);
        qp.a_eq = DMatrix::from_element(1, 1, 1.0);
        qp.b_eq = DVector::from_element(1, 2.0);
        qp.a_in = DMatrix::from_element(1, 1, 1.0);
        qp.b_in = DVector::from_element(1, 1.0);
        let r = solve_nlp(&qp, &StartPoint::primal(DVector::zeros(1)), &SolveOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Infeasible);
    }

    #[test]
    fn deterministic() {
        let mut qp = QuadraticProgram::unconstrained(
            DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]),
            DVector::from_vec(vec![-1.0, 4.0]),
        );
        qp.a_in = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        qp.b_in = DVector::from_element(1, -0.5);
        let s = StartPoint::primal(DVector::from_vec(vec![0.3, 0.1]));
        let a = solve_nlp(&qp, &s, &SolveOptions::default()).unwrap();
        let b = solve_nlp(&qp, &s, &SolveOptions::default()).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.multipliers, b.multipliers);
    }

    #[test]
    fn fd_hessian_default_matches_exact() {
        struct Rosen;
        impl NlpProblem for Rosen {
            fn num_vars(&self) -> usize {
                2
            }
            fn num_eq(&self) -> usize {
                0
            }
            fn num_ineq(&self) -> usize {
                0
            }
            fn lower_bounds(&self) -> &[f64] {
                &[f64::NEG_INFINITY; 2]
            }
            fn upper_bounds(&self) -> &[f64] {
                &[f64::INFINITY; 2]
            }
            fn evaluate(&self, y: &DVector<f64>) -> Result<Evaluation, EvalError> {
                Ok(Evaluation {
                    objective: (1.0 - y[0]).powi(2) + 100.0 * (y[1] - y[0] * y[0]).powi(2),
                    eq: DVector::zeros(0),
                    ineq: DVector::zeros(0),
                })
            }
            fn derivatives(&self, y: &DVector<f64>) -> Result<Derivatives, EvalError> {
                let t = y[1] - y[0] * y[0];
                Ok(Derivatives {
                    gradient: DVector::from_vec(vec![-2.0 * (1.0 - y[0]) - 400.0 * y[0] * t, 200.0 * t]),
                    eq_jacobian: DMatrix::zeros(0, 2),
                    ineq_jacobian: DMatrix::zeros(0, 2),
                })
            }
        }
        let y = DVector::from_vec(vec![-0.4, 0.9]);
        let h = Rosen
            .lagrangian_hessian(&y, &DVector::zeros(0), &DVector::zeros(0))
            .unwrap();
        let exact = [
            2.0 - 400.0 * (y[1] - 3.0 * y[0] * y[0]),
            -400.0 * y[0],
            -400.0 * y[0],
            200.0,
        ];
        for (a, b) in h.iter().zip(exact) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-5);
        }
        let r = solve_nlp(&Rosen, &StartPoint::primal(y), &SolveOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(r.x[0], 1.0, epsilon = 1e-5);
    }
}
