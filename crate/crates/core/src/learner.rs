//! Learns the quadratic value `V(x) = (x − x_ref)ᵀ P (x − x_ref)` from expert
//! state–action pairs by minimizing the first-order optimality residuals of
//! the relaxed one-step problem over `P ⪰ eps·I` and multipliers `λ ≥ 0`.
//!
//! For each demonstration the residual is affine in `(P, λ)`:
//! `r_stat = 2R(w − w_ref) + 2Bᵀ P e + J_gᵀ λ` and `r_comp = diag(g) λ`, with
//! `B = ∂x⁺/∂w` and `e = x⁺ − x_ref`. Eliminating `λ` by a per-demo
//! nonnegative least-squares solve leaves a convex, C¹ function of `P`, which
//! is minimized by projected Newton steps on its active-set quadratic model.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DiscreteMap, ModelError, StateVec};
use crate::nlp::EvalError;
use crate::ocp::{build_myopic_ocp, OcpError, RowTag, Transcription};

/// Largest constraint violation tolerated in a demonstration.
pub const DEMO_FEASIBILITY_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("dataset is empty")]
    Empty,
    #[error("demonstration {index} violates its constraints by {violation:e}")]
    InfeasibleDemo { index: usize, violation: f64 },
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid learner options: {0}")]
    InvalidOptions(String),
    #[error("value file: {0}")]
    Io(#[from] std::io::Error),
    #[error("value file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("value matrix is not symmetric positive semidefinite")]
    NotPsd,
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemoSource {
    MixedInteger,
    Relaxed,
}

impl DemoSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DemoSource::MixedInteger => "mixed-integer",
            DemoSource::Relaxed => "relaxed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mixed-integer" => Some(DemoSource::MixedInteger),
            "relaxed" => Some(DemoSource::Relaxed),
            _ => None,
        }
    }
}

/// A state and the expert's control at that state (`w = [u, z]`).
#[derive(Debug, Clone, PartialEq)]
pub struct DemoPair {
    pub x: StateVec,
    pub w: DVector<f64>,
    pub source: DemoSource,
}

/// Demonstrations together with the weights the expert used.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<DemoPair>,
    pub map: DiscreteMap,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub x_ref: StateVec,
}

impl Dataset {
    pub fn new(
        pairs: Vec<DemoPair>,
        map: DiscreteMap,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        x_ref: StateVec,
    ) -> Result<Self, LearnerError> {
        let (n_x, n_w) = (map.model.n_x, map.model.n_w());
        let check = |what, expected, got| {
            if expected == got {
                Ok(())
            } else {
                Err(LearnerError::Dimension { what, expected, got })
            }
        };
        check("Q", n_x, q.nrows())?;
        check("R", n_w, r.nrows())?;
        check("x_ref", n_x, x_ref.len())?;
        for p in &pairs {
            check("demonstration state", n_x, p.x.len())?;
            check("demonstration control", n_w, p.w.len())?;
        }
        Ok(Self {
            pairs,
            map,
            q,
            r,
            x_ref,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Orthonormal basis of symmetric `n×n` matrices: `E_ii` and
/// `(E_ij + E_ji)/√2` for `i < j`, ordered row by row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SymBasis {
    pub n: usize,
}

impl SymBasis {
    pub fn dim(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| (i..self.n).map(move |j| (i, j)))
    }

    pub fn to_vec(&self, m: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.pairs().map(|(i, j)| {
                if i == j {
                    m[(i, i)]
                } else {
                    (m[(i, j)] + m[(j, i)]) / std::f64::consts::SQRT_2
                }
            }),
        )
    }

    pub fn to_mat(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (k, (i, j)) in self.pairs().enumerate() {
            if i == j {
                m[(i, i)] = p[k];
            } else {
                let v = p[k] / std::f64::consts::SQRT_2;
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    pub fn element(&self, k: usize) -> DMatrix<f64> {
        let mut e = DVector::zeros(self.dim());
        e[k] = 1.0;
        self.to_mat(&e)
    }
}

/// Affine residual data of one demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoBlock {
    /// `2R(w − w_ref)`.
    pub a: DVector<f64>,
    /// `∂r_stat/∂p` in the symmetric basis.
    pub t: DMatrix<f64>,
    /// `J_gᵀ`, one column per constraint row.
    pub g_t: DMatrix<f64>,
    /// Constraint values `g(x, w) <= 0`.
    pub g: DVector<f64>,
}

impl DemoBlock {
    pub fn r_stat(&self, p: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64> {
        &self.a + &self.t * p + &self.g_t * lambda
    }

    pub fn r_comp(&self, lambda: &DVector<f64>) -> DVector<f64> {
        self.g.component_mul(lambda)
    }

    /// `[J_gᵀ; diag(g)]`: the multiplier columns of the stacked residual.
    fn multiplier_matrix(&self) -> DMatrix<f64> {
        let (n_w, n_g) = (self.g_t.nrows(), self.g.len());
        let mut m = DMatrix::zeros(n_w + n_g, n_g);
        m.view_mut((0, 0), (n_w, n_g)).copy_from(&self.g_t);
        for j in 0..n_g {
            m[(n_w + j, j)] = self.g[j];
        }
        m
    }

    /// Residual-minimizing `λ >= 0` for fixed `p`.
    pub fn best_multipliers(&self, p: &DVector<f64>) -> DVector<f64> {
        let m = self.multiplier_matrix();
        let mut rhs = DVector::zeros(m.nrows());
        rhs.rows_mut(0, self.a.len()).copy_from(&(-(&self.a + &self.t * p)));
        nnls(&m, &rhs)
    }
}

/// Stacked residual system over a dataset.
#[derive(Debug, Clone)]
pub struct ResidualSystem {
    pub n_x: usize,
    pub n_w: usize,
    pub basis: SymBasis,
    pub blocks: Vec<DemoBlock>,
    /// Constraint row metadata shared by all demonstrations.
    pub rows: Vec<RowTag>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualNorms {
    pub r_stat_inf: f64,
    pub r_comp_inf: f64,
    pub objective: f64,
}

/// Per-demo evaluation at fixed `p` with optimal multipliers.
#[derive(Debug, Clone)]
struct DemoEval {
    lambda: DVector<f64>,
    r_stat: DVector<f64>,
    r_comp: DVector<f64>,
}

impl ResidualSystem {
    pub fn num_demos(&self) -> usize {
        self.blocks.len()
    }

    /// Length of the stacked residual: `M·(n_w + n_g)`.
    pub fn len(&self) -> usize {
        self.blocks.len() * (self.n_w + self.rows.len())
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    fn eval_all(&self, p: &DVector<f64>) -> Vec<DemoEval> {
        self.blocks
            .par_iter()
            .map(|b| {
                let lambda = b.best_multipliers(p);
                DemoEval {
                    r_stat: b.r_stat(p, &lambda),
                    r_comp: b.r_comp(&lambda),
                    lambda,
                }
            })
            .collect()
    }

    fn objective_of(evals: &[DemoEval]) -> f64 {
        evals
            .iter()
            .map(|e| e.r_stat.norm_squared() + e.r_comp.norm_squared())
            .sum()
    }

    /// Objective with the multipliers eliminated, as a function of `p`.
    pub fn reduced_objective(&self, p: &DVector<f64>) -> f64 {
        Self::objective_of(&self.eval_all(p))
    }

    /// Objective for explicitly given multipliers.
    pub fn objective_with(&self, p: &DVector<f64>, lambdas: &[DVector<f64>]) -> f64 {
        self.blocks
            .iter()
            .zip(lambdas)
            .map(|(b, l)| b.r_stat(p, l).norm_squared() + b.r_comp(l).norm_squared())
            .sum()
    }

    /// Optimal multipliers for each demonstration at `p`.
    pub fn multipliers(&self, p: &DVector<f64>) -> Vec<DVector<f64>> {
        self.eval_all(p).into_iter().map(|e| e.lambda).collect()
    }

    pub fn norms(&self, p_mat: &DMatrix<f64>) -> ResidualNorms {
        let evals = self.eval_all(&self.basis.to_vec(p_mat));
        ResidualNorms {
            r_stat_inf: evals.iter().map(|e| e.r_stat.amax()).fold(0.0, f64::max),
            r_comp_inf: evals.iter().map(|e| e.r_comp.amax()).fold(0.0, f64::max),
            objective: Self::objective_of(&evals),
        }
    }

    /// Objective, gradient and active-set Gauss–Newton model at `p`.
    fn model(&self, p: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let np = self.basis.dim();
        let parts: Vec<(f64, DVector<f64>, DMatrix<f64>)> = self
            .blocks
            .par_iter()
            .map(|b| {
                let lambda = b.best_multipliers(p);
                let r_stat = b.r_stat(p, &lambda);
                let r_comp = b.r_comp(&lambda);
                let f = r_stat.norm_squared() + r_comp.norm_squared();
                let grad = b.t.tr_mul(&r_stat) * 2.0;
                // Residual of the active-set least squares is (I − Π)·[a + T p; 0].
                let active: Vec<usize> = (0..lambda.len()).filter(|&j| lambda[j] > 0.0).collect();
                let mut tt = DMatrix::zeros(b.a.len() + b.g.len(), np);
                tt.view_mut((0, 0), (b.a.len(), np)).copy_from(&b.t);
                if !active.is_empty() {
                    let m = b.multiplier_matrix().select_columns(&active);
                    let u = orthonormal_range(&m);
                    tt -= &u * u.tr_mul(&tt);
                }
                (f, grad, tt.tr_mul(&tt) * 2.0)
            })
            .collect();
        let mut f = 0.0;
        let mut g = DVector::zeros(np);
        let mut h = DMatrix::zeros(np, np);
        for (fi, gi, hi) in parts {
            f += fi;
            g += gi;
            h += hi;
        }
        (f, g, h)
    }
}

fn orthonormal_range(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > 1e-12 * smax.max(1e-300))
        .collect();
    u.select_columns(&keep)
}

fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let cut = 1e-13 * svd.singular_values.max();
    svd.solve(b, cut).expect("U and V computed")
}

/// Nonnegative least squares `min ‖A λ − b‖, λ >= 0` (Lawson–Hanson active set).
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    if n == 0 {
        return x;
    }
    let mut passive = vec![false; n];
    let tol = 1e-13 * (1.0 + a.amax() * b.amax()) * (a.nrows().max(n) as f64);
    for _ in 0..(3 * n + 10) {
        let w = a.tr_mul(&(b - a * &x));
        let cand = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(t) = cand else { break };
        passive[t] = true;
        for _ in 0..(3 * n + 10) {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let s_p = lstsq(&a.select_columns(&idx), b);
            let mut s = DVector::zeros(n);
            for (k, &j) in idx.iter().enumerate() {
                s[j] = s_p[k];
            }
            if idx.iter().all(|&j| s[j] > 0.0) {
                x = s;
                break;
            }
            let mut alpha = f64::INFINITY;
            for &j in &idx {
                if s[j] <= 0.0 {
                    alpha = alpha.min(x[j] / (x[j] - s[j]));
                }
            }
            x += (s - &x) * alpha;
            for &j in &idx {
                if x[j] <= 1e-15 {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    x
}

/// Builds the per-demonstration residual blocks. The constraint rows are
/// those of the relaxed one-step problem: integer hulls and successor bounds.
pub fn assemble_residuals(data: &Dataset) -> Result<ResidualSystem, LearnerError> {
    if data.is_empty() {
        return Err(LearnerError::Empty);
    }
    let model = &data.map.model;
    let (n_x, n_w) = (model.n_x, model.n_w());
    let basis = SymBasis { n: n_x };
    let zero = DMatrix::zeros(n_x, n_x);
    let blocks: Vec<Result<DemoBlock, LearnerError>> = data
        .pairs
        .par_iter()
        .enumerate()
        .map(|(index, pair)| {
            let ocp = build_myopic_ocp(&data.map, &data.q, &data.r, &zero, &pair.x, &data.x_ref)?;
            let ev = ocp.evaluate(&pair.w)?;
            let violation = ev.ineq.iter().copied().fold(0.0, f64::max);
            if violation > DEMO_FEASIBILITY_TOL || !violation.is_finite() {
                return Err(LearnerError::InfeasibleDemo { index, violation });
            }
            let d = ocp.derivatives(&pair.w)?;
            let (next, _, b) = data.map.rk4_step_with_sensitivities(&pair.x, &pair.w)?;
            let e = next - &data.x_ref;
            let mut t = DMatrix::zeros(n_w, basis.dim());
            for k in 0..basis.dim() {
                t.set_column(k, &(b.tr_mul(&(basis.element(k) * &e)) * 2.0));
            }
            Ok(DemoBlock {
                a: &data.r * (&pair.w - &ocp.w_ref) * 2.0,
                t,
                g_t: d.ineq_jacobian.transpose(),
                g: ev.ineq,
            })
        })
        .collect();
    let blocks = blocks.into_iter().collect::<Result<Vec<_>, _>>()?;
    let rows = build_myopic_ocp(&data.map, &data.q, &data.r, &zero, &data.pairs[0].x, &data.x_ref)?
        .constraint_set()
        .inequality
        .iter()
        .map(|r| r.tag)
        .collect();
    Ok(ResidualSystem {
        n_x,
        n_w,
        basis,
        blocks,
        rows,
    })
}

/// Symmetrizes `m` (warning when it was not symmetric) and clamps its
/// eigenvalues to at least `eps`.
pub fn project_psd(m: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let asym = (m - m.transpose()).amax();
    if asym > 1e-12 * m.amax().max(1.0) {
        log::warn!("symmetrizing matrix with asymmetry {asym:e} before projection");
    }
    let sym = (m + m.transpose()) * 0.5;
    if sym.nrows() == 0 {
        return sym;
    }
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.min() >= eps {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|v| v.max(eps));
    let u = &eig.eigenvectors;
    let p = u * DMatrix::from_diagonal(&clamped) * u.transpose();
    (&p + p.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnOptions {
    /// Eigenvalue floor on `P`.
    pub eps: f64,
    /// Projected-gradient tolerance.
    pub tol: f64,
    /// Stop when an iteration decreases the objective by less than this fraction.
    pub rel_decrease: f64,
    pub max_iters: usize,
}

impl Default for LearnOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            tol: 1e-8,
            rel_decrease: 1e-10,
            max_iters: 200,
        }
    }
}

impl LearnOptions {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(LearnerError::InvalidOptions(
                "eps must be finite and non-negative".into(),
            ));
        }
        if !(self.tol > 0.0 && self.rel_decrease >= 0.0) || self.max_iters == 0 {
            return Err(LearnerError::InvalidOptions(
                "tolerances must be positive and max_iters at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnStatus {
    Converged,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedValue {
    pub p: DMatrix<f64>,
    pub eps: f64,
    pub objective: f64,
    pub r_stat_inf: f64,
    pub r_comp_inf: f64,
    pub iterations: usize,
    pub status: LearnStatus,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LearnedValueFile {
    #[serde(rename = "P")]
    p: Vec<Vec<f64>>,
    eps: f64,
    r_stat_inf: f64,
    r_comp_inf: f64,
    objective: f64,
    #[serde(default)]
    iterations: usize,
    #[serde(default = "default_status")]
    status: LearnStatus,
}

fn default_status() -> LearnStatus {
    LearnStatus::Converged
}

impl LearnedValue {
    /// Wraps a given matrix, e.g. one read from elsewhere, with its residual norms.
    pub fn from_matrix(p: DMatrix<f64>, eps: f64, norms: ResidualNorms) -> Self {
        Self {
            p,
            eps,
            objective: norms.objective,
            r_stat_inf: norms.r_stat_inf,
            r_comp_inf: norms.r_comp_inf,
            iterations: 0,
            status: LearnStatus::Converged,
        }
    }

    pub fn to_json(&self) -> Result<String, LearnerError> {
        let file = LearnedValueFile {
            p: self.p.row_iter().map(|r| r.iter().copied().collect()).collect(),
            eps: self.eps,
            r_stat_inf: self.r_stat_inf,
            r_comp_inf: self.r_comp_inf,
            objective: self.objective,
            iterations: self.iterations,
            status: self.status,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parses and checks that `P` is square, symmetric and PSD.
    pub fn from_json(text: &str) -> Result<Self, LearnerError> {
        let f: LearnedValueFile = serde_json::from_str(text)?;
        let n = f.p.len();
        if f.p.iter().any(|r| r.len() != n) || n == 0 {
            return Err(LearnerError::NotPsd);
        }
        let p = DMatrix::from_fn(n, n, |i, j| f.p[i][j]);
        if !crate::ocp::is_symmetric_psd(&p) {
            return Err(LearnerError::NotPsd);
        }
        Ok(Self {
            p,
            eps: f.eps,
            objective: f.objective,
            r_stat_inf: f.r_stat_inf,
            r_comp_inf: f.r_comp_inf,
            iterations: f.iterations,
            status: f.status,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), LearnerError> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LearnerError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Residual norms at a fixed `P` with optimal multipliers.
pub fn evaluate_residual_norms(p: &DMatrix<f64>, data: &Dataset) -> Result<ResidualNorms, LearnerError> {
    let sys = assemble_residuals(data)?;
    if p.nrows() != sys.n_x || p.ncols() != sys.n_x {
        return Err(LearnerError::Dimension {
            what: "P",
            expected: sys.n_x,
            got: p.nrows(),
        });
    }
    Ok(sys.norms(p))
}

fn project_vec(basis: &SymBasis, p: &DVector<f64>, eps: f64) -> DVector<f64> {
    basis.to_vec(&project_psd(&basis.to_mat(p), eps))
}

/// Minimizes `q(p) = gᵀ(p − p0) + ½(p − p0)ᵀH(p − p0)` over `mat(p) ⪰ eps·I`.
fn psd_quadratic_step(
    basis: &SymBasis,
    p0: &DVector<f64>,
    g: &DVector<f64>,
    h: &DMatrix<f64>,
    eps: f64,
) -> DVector<f64> {
    let svd = h.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if smax > 0.0 {
        let d = svd.solve(&(-g), 1e-12 * smax).expect("U and V computed");
        let cand = p0 + d;
        if min_eigenvalue(&basis.to_mat(&cand)) >= eps {
            return cand;
        }
    }
    // Accelerated projected gradient.
    let lip = if smax > 0.0 { smax } else { g.norm().max(1.0) };
    let grad = |p: &DVector<f64>| g + h * (p - p0);
    let mut x = p0.clone();
    let mut y = x.clone();
    let mut t = 1.0_f64;
    for _ in 0..20_000 {
        let xn = project_vec(basis, &(&y - grad(&y) / lip), eps);
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let step = (&xn - &x).norm();
        y = &xn + (&xn - &x) * ((t - 1.0) / tn);
        x = xn;
        t = tn;
        if step <= 1e-15 * (1.0 + x.norm()) {
            break;
        }
    }
    x
}

/// Solves the residual-minimization problem over `P ⪰ eps·I`.
pub fn solve_psd_ls(system: &ResidualSystem, opts: &LearnOptions) -> Result<LearnedValue, LearnerError> {
    opts.validate()?;
    if system.is_empty() {
        return Err(LearnerError::Empty);
    }
    let basis = system.basis;
    let mut p = project_vec(&basis, &basis.to_vec(&DMatrix::identity(basis.n, basis.n)), opts.eps);
    let mut status = LearnStatus::MaxIters;
    let mut iterations = 0;
    let (mut f, mut g, mut h) = system.model(&p);
    for it in 1..=opts.max_iters {
        iterations = it;
        let pg = (&p - project_vec(&basis, &(&p - &g), opts.eps)).norm();
        if pg <= opts.tol || f == 0.0 {
            status = LearnStatus::Converged;
            break;
        }
        let target = psd_quadratic_step(&basis, &p, &g, &h, opts.eps);
        let d = &target - &p;
        let slope = g.dot(&d);
        if slope >= 0.0 {
            // No descent available from the model: the iterate is stationary to working precision.
            status = LearnStatus::Converged;
            break;
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let cand = if step == 1.0 { target.clone() } else { &p + &d * step };
            let fc = system.reduced_objective(&cand);
            if fc <= f + 1e-4 * step * slope {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            status = LearnStatus::Converged;
            break;
        };
        let decrease = f - fc;
        p = cand;
        (f, g, h) = system.model(&p);
        if decrease <= opts.rel_decrease * fc.max(f64::MIN_POSITIVE) {
            status = LearnStatus::Converged;
            break;
        }
    }
    let p_mat = basis.to_mat(&p);
    let norms = system.norms(&p_mat);
    Ok(LearnedValue {
        p: p_mat,
        eps: opts.eps,
        objective: norms.objective,
        r_stat_inf: norms.r_stat_inf,
        r_comp_inf: norms.r_comp_inf,
        iterations,
        status,
    })
}

/// Assembles the residual system and solves for `P`.
pub fn learn(data: &Dataset, opts: &LearnOptions) -> Result<LearnedValue, LearnerError> {
    solve_psd_ls(&assemble_residuals(data)?, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use approx::assert_abs_diff_eq;

    fn fishing_data(pairs: Vec<DemoPair>) -> Dataset {
        Dataset::new(
            pairs,
            DiscreteMap::single_step(ModelSpec::lotka_volterra()),
            DMatrix::identity(2, 2),
            DMatrix::from_element(1, 1, 0.01),
            DVector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap()
    }

    fn pair(x: &[f64], w: &[f64]) -> DemoPair {
        DemoPair {
            x: DVector::from_column_slice(x),
            w: DVector::from_column_slice(w),
            source: DemoSource::MixedInteger,
        }
    }

    #[test]
    fn basis_is_orthonormal_and_invertible() {
        let b = SymBasis { n: 3 };
        assert_eq!(b.dim(), 6);
        for i in 0..6 {
            for j in 0..6 {
                let ip = b.element(i).component_mul(&b.element(j)).sum();
                assert_abs_diff_eq!(ip, if i == j { 1.0 } else { 0.0 }, epsilon = 1e-15);
            }
        }
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        assert_abs_diff_eq!((b.to_mat(&b.to_vec(&m)) - &m).amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn nnls_small_cases() {
        let a = DMatrix::identity(2, 2);
        let x = nnls(&a, &DVector::from_vec(vec![1.0, -2.0]));
        assert_eq!(x, DVector::from_vec(vec![1.0, 0.0]));
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let x = nnls(&a, &DVector::from_vec(vec![1.0, 2.0, 1.0]));
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 1.0, epsilon = 1e-12);
        assert!(nnls(&DMatrix::zeros(2, 0), &DVector::zeros(2)).is_empty());
    }

    #[test]
    fn projection_examples() {
        let p = project_psd(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0])), 0.0);
        assert_abs_diff_eq!(
            (p - DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]))).amax(),
            0.0,
            epsilon = 1e-15
        );
        let p = project_psd(&DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0])), 1.0);
        assert_abs_diff_eq!(
            (p - DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]))).amax(),
            0.0,
            epsilon = 1e-15
        );
        let psd = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(project_psd(&psd, 0.1), psd);
    }

    #[test]
    fn equilibrium_demo_has_zero_residual() {
        let data = fishing_data(vec![pair(&[1.0, 1.0], &[0.0])]);
        for p in [
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]),
        ] {
            let n = evaluate_residual_norms(&p, &data).unwrap();
            assert_eq!((n.r_stat_inf, n.r_comp_inf, n.objective), (0.0, 0.0, 0.0));
        }
        let v = learn(&data, &LearnOptions::default()).unwrap();
        assert_eq!(v.objective, 0.0);
        assert!(min_eigenvalue(&v.p) >= v.eps - 1e-10);
    }

    #[test]
    fn stacked_length() {
        let data = fishing_data(vec![pair(&[1.2, 1.1], &[1.0]), pair(&[0.9, 1.0], &[0.0])]);
        let sys = assemble_residuals(&data).unwrap();
        assert_eq!(sys.rows.len(), 4);
        assert_eq!(sys.len(), 2 * (1 + 4));
    }

    #[test]
    fn infeasible_demo_rejected() {
        let data = fishing_data(vec![pair(&[1.2, 1.1], &[0.0]), pair(&[1.2, 1.1], &[1.5])]);
        assert!(matches!(
            assemble_residuals(&data),
            Err(LearnerError::InfeasibleDemo { index: 1, .. })
        ));
        assert!(matches!(
            assemble_residuals(&fishing_data(vec![])),
            Err(LearnerError::Empty)
        ));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let v = LearnedValue {
            p: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            eps: 1e-6,
            objective: 1.5e-9,
            r_stat_inf: 2e-5,
            r_comp_inf: 0.0,
            iterations: 7,
            status: LearnStatus::Converged,
        };
        let text = v.to_json().unwrap();
        assert!(text.contains("\"P\": ["));
        assert_eq!(LearnedValue::from_json(&text).unwrap(), v);
        let bad = text.replace("2.0", "-2.0");
        assert!(matches!(LearnedValue::from_json(&bad), Err(LearnerError::NotPsd)));
    }
}
