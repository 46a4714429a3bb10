//! Direct multiple-shooting transcription of the finite-horizon problem and of
//! the one-step (myopic) problem with a quadratic terminal value.
//!
//! Decision layout of the full problem: `[x_0, w_0, x_1, w_1, …, x_N]`.
//! All quadratic penalties act on deviations `x − x_ref` and `w − w_ref`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{DiscreteMap, ModelError, ModelSpec, StateVec};
use crate::nlp::{fd_hessian, Derivatives, EvalError, Evaluation, Multipliers, NlpProblem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("initial state component {index} = {value} lies outside [{lower}, {upper}]")]
    InfeasibleInput {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("weight `{0}` must be a symmetric positive semidefinite matrix of matching size")]
    InvalidWeight(&'static str),
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("reference is outside the state bounds")]
    ReferenceOutOfBounds,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Symmetric within `1e-12` (relative) and no eigenvalue below `-1e-12`.
pub fn is_symmetric_psd(m: &DMatrix<f64>) -> bool {
    if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return false;
    }
    if m.nrows() == 0 {
        return true;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min() >= -1e-12 * scale
}

fn check_weight(m: &DMatrix<f64>, n: usize, name: &'static str) -> Result<(), OcpError> {
    if m.nrows() != n || !is_symmetric_psd(m) {
        return Err(OcpError::InvalidWeight(name));
    }
    Ok(())
}

/// Finite-horizon tracking problem over a discretized model.
#[derive(Debug, Clone)]
pub struct OcpSpec {
    pub map: DiscreteMap,
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qf: DMatrix<f64>,
    pub x_ref: StateVec,
    pub w_ref: DVector<f64>,
    pub relax_integers: bool,
}

impl OcpSpec {
    /// Terminal weight defaults to `q`, the control reference to zero.
    pub fn new(
        map: DiscreteMap,
        horizon: usize,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        x_ref: StateVec,
    ) -> Result<Self, OcpError> {
        let n_w = map.model.n_w();
        let spec = Self {
            qf: q.clone(),
            x_ref,
            w_ref: DVector::zeros(n_w),
            map,
            horizon,
            q,
            r,
            relax_integers: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_terminal_weight(mut self, qf: DMatrix<f64>) -> Result<Self, OcpError> {
        self.qf = qf;
        self.validate()?;
        Ok(self)
    }

    pub fn with_reference(mut self, x_ref: StateVec) -> Result<Self, OcpError> {
        self.x_ref = x_ref;
        self.validate()?;
        Ok(self)
    }

    pub fn with_horizon(mut self, horizon: usize) -> Result<Self, OcpError> {
        self.horizon = horizon;
        self.validate()?;
        Ok(self)
    }

    pub fn relaxed(mut self, relax: bool) -> Self {
        self.relax_integers = relax;
        self
    }

    pub fn model(&self) -> &ModelSpec {
        &self.map.model
    }

    pub fn validate(&self) -> Result<(), OcpError> {
        let m = &self.map.model;
        if self.horizon == 0 {
            return Err(OcpError::EmptyHorizon);
        }
        check_weight(&self.q, m.n_x, "Q")?;
        check_weight(&self.r, m.n_w(), "R")?;
        check_weight(&self.qf, m.n_x, "Qf")?;
        if self.x_ref.len() != m.n_x {
            return Err(OcpError::Dimension {
                what: "x_ref",
                expected: m.n_x,
                got: self.x_ref.len(),
            });
        }
        if self.w_ref.len() != m.n_w() {
            return Err(OcpError::Dimension {
                what: "w_ref",
                expected: m.n_w(),
                got: self.w_ref.len(),
            });
        }
        let consistent = m.state_bounds.iter().all(|(l, u)| l <= u);
        if consistent && !m.within_bounds(&self.x_ref) {
            return Err(OcpError::ReferenceOutOfBounds);
        }
        Ok(())
    }

    /// Stage cost `x̃ᵀQx̃ + w̃ᵀRw̃`.
    pub fn stage_cost(&self, x: &StateVec, w: &DVector<f64>) -> f64 {
        let dx = x - &self.x_ref;
        let dw = w - &self.w_ref;
        dx.dot(&(&self.q * &dx)) + dw.dot(&(&self.r * &dw))
    }

    pub fn terminal_cost(&self, x: &StateVec) -> f64 {
        let dx = x - &self.x_ref;
        dx.dot(&(&self.qf * &dx))
    }
}

/// Index map of the multiple-shooting decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_x: usize,
    pub n_w: usize,
    pub horizon: usize,
}

impl Layout {
    pub fn len(&self) -> usize {
        (self.horizon + 1) * self.n_x + self.horizon * self.n_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn stride(&self) -> usize {
        self.n_x + self.n_w
    }

    pub fn state(&self, k: usize) -> Range<usize> {
        assert!(k <= self.horizon);
        let s = k * self.stride();
        s..s + self.n_x
    }

    pub fn control(&self, k: usize) -> Range<usize> {
        assert!(k < self.horizon);
        let s = k * self.stride() + self.n_x;
        s..s + self.n_w
    }
}

/// Flat decision vector with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionVector {
    pub layout: Layout,
    pub values: DVector<f64>,
}

impl DecisionVector {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            values: DVector::zeros(layout.len()),
            layout,
        }
    }

    pub fn state(&self, k: usize) -> StateVec {
        self.values.rows_range(self.layout.state(k)).into_owned()
    }

    pub fn control(&self, k: usize) -> DVector<f64> {
        self.values.rows_range(self.layout.control(k)).into_owned()
    }

    pub fn set_state(&mut self, k: usize, x: &StateVec) {
        self.values.rows_range_mut(self.layout.state(k)).copy_from(x);
    }

    pub fn set_control(&mut self, k: usize, w: &DVector<f64>) {
        self.values.rows_range_mut(self.layout.control(k)).copy_from(w);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    InitialPin,
    Defect,
    StateLower,
    StateUpper,
    HullLower,
    HullUpper,
}

/// Origin of one constraint row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowTag {
    pub stage: usize,
    pub kind: ConstraintKind,
    pub component: usize,
}

/// Shape of an inequality row `g(y) <= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowForm {
    /// `value − y[var] <= 0`.
    Lower { var: usize, value: f64 },
    /// `y[var] − value <= 0`.
    Upper { var: usize, value: f64 },
    /// Nonlinear row; `index` into the transcription's general rows.
    General { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InequalityRow {
    pub tag: RowTag,
    pub form: RowForm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub equality: Vec<RowTag>,
    pub inequality: Vec<InequalityRow>,
}

impl ConstraintSet {
    pub fn num_general(&self) -> usize {
        self.inequality
            .iter()
            .filter(|r| matches!(r.form, RowForm::General { .. }))
            .count()
    }
}

/// A transcribed program: objective, equality rows and general (nonlinear)
/// inequality rows are supplied by the implementor; simple-bound rows are
/// described by the constraint set.
pub trait Transcription: Sync {
    fn num_vars(&self) -> usize;
    fn constraint_set(&self) -> &ConstraintSet;

    /// Objective, equality rows and general inequality rows.
    fn eval_core(&self, y: &DVector<f64>) -> Result<Evaluation, EvalError>;
    fn derivs_core(&self, y: &DVector<f64>) -> Result<Derivatives, EvalError>;

    fn hessian_core(
        &self,
        y: &DVector<f64>,
        eq_w: &DVector<f64>,
        general_w: &DVector<f64>,
    ) -> Result<DMatrix<f64>, EvalError> {
        fd_hessian(y, |p| {
            let d = self.derivs_core(p)?;
            Ok(crate::nlp::lagrangian_gradient(&d, eq_w, general_w))
        })
    }

    /// Objective, equality rows and every inequality row in constraint-set order.
    fn evaluate(&self, y: &DVector<f64>) -> Result<Evaluation, EvalError> {
        check_point(y, self.num_vars())?;
        let core = self.eval_core(y)?;
        let rows = &self.constraint_set().inequality;
        let ineq = DVector::from_iterator(
            rows.len(),
            rows.iter().map(|r| match r.form {
                RowForm::Lower { var, value } => value - y[var],
                RowForm::Upper { var, value } => y[var] - value,
                RowForm::General { index } => core.ineq[index],
            }),
        );
        Ok(Evaluation {
            objective: core.objective,
            eq: core.eq,
            ineq,
        })
    }

    /// Exact gradient and Jacobians of every row with respect to `y`.
    fn derivatives(&self, y: &DVector<f64>) -> Result<Derivatives, EvalError> {
        check_point(y, self.num_vars())?;
        let core = self.derivs_core(y)?;
        let rows = &self.constraint_set().inequality;
        let mut jac = DMatrix::zeros(rows.len(), y.len());
        for (i, r) in rows.iter().enumerate() {
            match r.form {
                RowForm::Lower { var, .. } => jac[(i, var)] = -1.0,
                RowForm::Upper { var, .. } => jac[(i, var)] = 1.0,
                RowForm::General { index } => jac.set_row(i, &core.ineq_jacobian.row(index)),
            }
        }
        Ok(Derivatives {
            gradient: core.gradient,
            eq_jacobian: core.eq_jacobian,
            ineq_jacobian: jac,
        })
    }
}

fn check_point(y: &DVector<f64>, n: usize) -> Result<(), EvalError> {
    if y.len() == n {
        Ok(())
    } else {
        Err(EvalError::Dimension {
            what: "decision vector",
            expected: n,
            got: y.len(),
        })
    }
}

/// The finite-horizon problem from a fixed initial state.
#[derive(Debug, Clone)]
pub struct FullOcp {
    pub spec: OcpSpec,
    pub x_init: StateVec,
    pub layout: Layout,
    constraints: ConstraintSet,
}

/// Transcribes the finite-horizon problem from `x_init`.
pub fn build_full_ocp(spec: &OcpSpec, x_init: &StateVec) -> Result<FullOcp, OcpError> {
    spec.validate()?;
    let m = spec.model();
    if x_init.len() != m.n_x {
        return Err(OcpError::Dimension {
            what: "x_init",
            expected: m.n_x,
            got: x_init.len(),
        });
    }
    for (i, (&v, &(lo, hi))) in x_init.iter().zip(&m.state_bounds).enumerate() {
        // Contradictory bounds are left for the solver to report as infeasible.
        if !v.is_finite() || (lo <= hi && (v < lo || v > hi)) {
            return Err(OcpError::InfeasibleInput {
                index: i,
                value: v,
                lower: lo,
                upper: hi,
            });
        }
    }
    let layout = Layout {
        n_x: m.n_x,
        n_w: m.n_w(),
        horizon: spec.horizon,
    };
    let mut equality = Vec::with_capacity((spec.horizon + 1) * m.n_x);
    for i in 0..m.n_x {
        equality.push(RowTag {
            stage: 0,
            kind: ConstraintKind::InitialPin,
            component: i,
        });
    }
    for k in 0..spec.horizon {
        for i in 0..m.n_x {
            equality.push(RowTag {
                stage: k,
                kind: ConstraintKind::Defect,
                component: i,
            });
        }
    }
    let mut inequality = Vec::new();
    for k in 1..=spec.horizon {
        let base = layout.state(k).start;
        for (i, &(lo, hi)) in m.state_bounds.iter().enumerate() {
            if lo.is_finite() {
                inequality.push(InequalityRow {
                    tag: RowTag {
                        stage: k,
                        kind: ConstraintKind::StateLower,
                        component: i,
                    },
                    form: RowForm::Lower {
                        var: base + i,
                        value: lo,
                    },
                });
            }
            if hi.is_finite() {
                inequality.push(InequalityRow {
                    tag: RowTag {
                        stage: k,
                        kind: ConstraintKind::StateUpper,
                        component: i,
                    },
                    form: RowForm::Upper {
                        var: base + i,
                        value: hi,
                    },
                });
            }
        }
    }
    for k in 0..spec.horizon {
        let base = layout.control(k).start + m.n_u;
        for (j, d) in m.z_domains.iter().enumerate() {
            let (lo, hi) = d.hull();
            inequality.push(InequalityRow {
                tag: RowTag {
                    stage: k,
                    kind: ConstraintKind::HullLower,
                    component: j,
                },
                form: RowForm::Lower {
                    var: base + j,
                    value: lo,
                },
            });
            inequality.push(InequalityRow {
                tag: RowTag {
                    stage: k,
                    kind: ConstraintKind::HullUpper,
                    component: j,
                },
                form: RowForm::Upper {
                    var: base + j,
                    value: hi,
                },
            });
        }
    }
    Ok(FullOcp {
        spec: spec.clone(),
        x_init: x_init.clone(),
        layout,
        constraints: ConstraintSet { equality, inequality },
    })
}

impl FullOcp {
    pub fn model(&self) -> &ModelSpec {
        self.spec.model()
    }

    /// Indices of the integer inputs `z_k[j]` in the decision vector, ordered
    /// by stage then channel.
    pub fn integer_vars(&self) -> Vec<usize> {
        let m = self.model();
        (0..self.spec.horizon)
            .flat_map(|k| {
                let base = self.layout.control(k).start + m.n_u;
                (0..m.n_z).map(move |j| base + j)
            })
            .collect()
    }

    /// Trajectory obtained by applying `controls` from `x_init`.
    pub fn rollout(&self, controls: &[DVector<f64>]) -> Result<DecisionVector, OcpError> {
        if controls.len() != self.spec.horizon {
            return Err(OcpError::Dimension {
                what: "control sequence",
                expected: self.spec.horizon,
                got: controls.len(),
            });
        }
        let mut dv = DecisionVector::zeros(self.layout);
        let mut x = self.x_init.clone();
        dv.set_state(0, &x);
        for (k, w) in controls.iter().enumerate() {
            dv.set_control(k, w);
            x = self.spec.map.rk4_step(&x, w)?;
            dv.set_state(k + 1, &x);
        }
        Ok(dv)
    }

    /// Rollout under `w_ref` clamped into the control hulls; falls back to a
    /// constant-state guess when the rollout fails.
    pub fn initial_guess(&self) -> DecisionVector {
        let m = self.model();
        let mut w = self.spec.w_ref.clone();
        for (j, d) in m.z_domains.iter().enumerate() {
            let (lo, hi) = d.hull();
            w[m.n_u + j] = w[m.n_u + j].clamp(lo, hi);
        }
        let controls = vec![w.clone(); self.spec.horizon];
        self.rollout(&controls).unwrap_or_else(|_| {
            let mut dv = DecisionVector::zeros(self.layout);
            for k in 0..=self.spec.horizon {
                dv.set_state(k, &self.x_init);
            }
            for k in 0..self.spec.horizon {
                dv.set_control(k, &w);
            }
            dv
        })
    }

    /// Constant Hessian of the objective: block-diag `2Q, 2R, …, 2Qf`.
    pub fn objective_hessian(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.layout.len(), self.layout.len());
        for k in 0..self.spec.horizon {
            let s = self.layout.state(k).start;
            h.view_mut((s, s), (self.layout.n_x, self.layout.n_x))
                .copy_from(&(&self.spec.q * 2.0));
            let c = self.layout.control(k).start;
            h.view_mut((c, c), (self.layout.n_w, self.layout.n_w))
                .copy_from(&(&self.spec.r * 2.0));
        }
        let s = self.layout.state(self.spec.horizon).start;
        h.view_mut((s, s), (self.layout.n_x, self.layout.n_x))
            .copy_from(&(&self.spec.qf * 2.0));
        h
    }
}

impl Transcription for FullOcp {
    fn num_vars(&self) -> usize {
        self.layout.len()
    }

    fn constraint_set(&self) -> &ConstraintSet {
        &self.constraints
    }

    fn eval_core(&self, y: &DVector<f64>) -> Result<Evaluation, EvalError> {
        check_point(y, self.layout.len())?;
        let (n_x, horizon) = (self.layout.n_x, self.spec.horizon);
        let state = |k: usize| y.rows_range(self.layout.state(k)).into_owned();
        let control = |k: usize| y.rows_range(self.layout.control(k)).into_owned();
        let mut objective = 0.0;
        let mut eq = DVector::zeros((horizon + 1) * n_x);
        let x0 = state(0);
        eq.rows_mut(0, n_x).copy_from(&(&x0 - &self.x_init));
        let mut xk = x0;
        for k in 0..horizon {
            let wk = control(k);
            objective += self.spec.stage_cost(&xk, &wk);
            let next = self.spec.map.rk4_step(&xk, &wk)?;
            let xn = state(k + 1);
            eq.rows_mut((k + 1) * n_x, n_x).copy_from(&(next - &xn));
            xk = xn;
        }
        objective += self.spec.terminal_cost(&xk);
        Ok(Evaluation {
            objective,
            eq,
            ineq: DVector::zeros(0),
        })
    }

    fn derivs_core(&self, y: &DVector<f64>) -> Result<Derivatives, EvalError> {
        check_point(y, self.layout.len())?;
        let n = self.layout.len();
        let (n_x, n_w, horizon) = (self.layout.n_x, self.layout.n_w, self.spec.horizon);
        let mut gradient = DVector::zeros(n);
        let mut jac = DMatrix::zeros((horizon + 1) * n_x, n);
        for i in 0..n_x {
            jac[(i, i)] = 1.0;
        }
        for k in 0..horizon {
            let sr = self.layout.state(k);
            let cr = self.layout.control(k);
            let xk = y.rows_range(sr.clone()).into_owned();
            let wk = y.rows_range(cr.clone()).into_owned();
            let dx = &xk - &self.spec.x_ref;
            let dw = &wk - &self.spec.w_ref;
            gradient
                .rows_range_mut(sr.clone())
                .copy_from(&(&self.spec.q * dx * 2.0));
            gradient
                .rows_range_mut(cr.clone())
                .copy_from(&(&self.spec.r * dw * 2.0));
            let (_, a, b) = self.spec.map.rk4_step_with_sensitivities(&xk, &wk)?;
            let row = (k + 1) * n_x;
            jac.view_mut((row, sr.start), (n_x, n_x)).copy_from(&a);
            jac.view_mut((row, cr.start), (n_x, n_w)).copy_from(&b);
            let next = self.layout.state(k + 1).start;
            for i in 0..n_x {
                jac[(row + i, next + i)] = -1.0;
            }
        }
        let sr = self.layout.state(horizon);
        let dx = y.rows_range(sr.clone()) - &self.spec.x_ref;
        gradient.rows_range_mut(sr).copy_from(&(&self.spec.qf * dx * 2.0));
        Ok(Derivatives {
            gradient,
            eq_jacobian: jac,
            ineq_jacobian: DMatrix::zeros(0, n),
        })
    }

    /// Exact objective curvature plus per-stage differenced dynamics curvature.
    fn hessian_core(
        &self,
        y: &DVector<f64>,
        eq_w: &DVector<f64>,
        _general_w: &DVector<f64>,
    ) -> Result<DMatrix<f64>, EvalError> {
        let mut h = self.objective_hessian();
        let (n_x, n_w) = (self.layout.n_x, self.layout.n_w);
        let map = &self.spec.map;
        for k in 0..self.spec.horizon {
            let nu = eq_w.rows((k + 1) * n_x, n_x).into_owned();
            if nu.iter().all(|&v| v == 0.0) {
                continue;
            }
            let start = self.layout.state(k).start;
            let local = y.rows(start, n_x + n_w).into_owned();
            let block = fd_hessian(&local, |v| {
                let x = v.rows(0, n_x).into_owned();
                let w = v.rows(n_x, n_w).into_owned();
                let (_, a, b) = map.rk4_step_with_sensitivities(&x, &w)?;
                let mut g = DVector::zeros(n_x + n_w);
                g.rows_mut(0, n_x).copy_from(&a.tr_mul(&nu));
                g.rows_mut(n_x, n_w).copy_from(&b.tr_mul(&nu));
                Ok(g)
            })?;
            let mut view = h.view_mut((start, start), (n_x + n_w, n_x + n_w));
            view += block;
        }
        Ok(h)
    }
}

/// One-step problem over `w` with terminal value `(x⁺ − x_ref)ᵀ P (x⁺ − x_ref)`.
#[derive(Debug, Clone)]
pub struct MyopicOcp {
    pub map: DiscreteMap,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub x_now: StateVec,
    pub x_ref: StateVec,
    pub w_ref: DVector<f64>,
    constraints: ConstraintSet,
    /// State index of each general (successor-bound) row and whether it is an upper bound.
    successor_rows: Vec<(usize, bool)>,
}

/// Builds the one-step problem at `x_now`. The successor state is constrained
/// by the state bounds; `x_now` itself may lie outside them.
pub fn build_myopic_ocp(
    map: &DiscreteMap,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
    x_now: &StateVec,
    x_ref: &StateVec,
) -> Result<MyopicOcp, OcpError> {
    let m = &map.model;
    check_weight(q, m.n_x, "Q")?;
    check_weight(r, m.n_w(), "R")?;
    check_weight(p, m.n_x, "P")?;
    for (what, v) in [("x_now", x_now), ("x_ref", x_ref)] {
        if v.len() != m.n_x {
            return Err(OcpError::Dimension {
                what,
                expected: m.n_x,
                got: v.len(),
            });
        }
    }
    let mut inequality = Vec::new();
    for (j, d) in m.z_domains.iter().enumerate() {
        let (lo, hi) = d.hull();
        let var = m.n_u + j;
        inequality.push(InequalityRow {
            tag: RowTag {
                stage: 0,
                kind: ConstraintKind::HullLower,
                component: j,
            },
            form: RowForm::Lower { var, value: lo },
        });
        inequality.push(InequalityRow {
            tag: RowTag {
                stage: 0,
                kind: ConstraintKind::HullUpper,
                component: j,
            },
            form: RowForm::Upper { var, value: hi },
        });
    }
    let mut successor_rows = Vec::new();
    for (i, &(lo, hi)) in m.state_bounds.iter().enumerate() {
        if lo.is_finite() {
            inequality.push(InequalityRow {
                tag: RowTag {
                    stage: 1,
                    kind: ConstraintKind::StateLower,
                    component: i,
                },
                form: RowForm::General {
                    index: successor_rows.len(),
                },
            });
            successor_rows.push((i, false));
        }
        if hi.is_finite() {
            inequality.push(InequalityRow {
                tag: RowTag {
                    stage: 1,
                    kind: ConstraintKind::StateUpper,
                    component: i,
                },
                form: RowForm::General {
                    index: successor_rows.len(),
                },
            });
            successor_rows.push((i, true));
        }
    }
    Ok(MyopicOcp {
        map: map.clone(),
        q: q.clone(),
        r: r.clone(),
        p: p.clone(),
        x_now: x_now.clone(),
        x_ref: x_ref.clone(),
        w_ref: DVector::zeros(m.n_w()),
        constraints: ConstraintSet {
            equality: Vec::new(),
            inequality,
        },
        successor_rows,
    })
}

impl MyopicOcp {
    pub fn model(&self) -> &ModelSpec {
        &self.map.model
    }

    /// `x̃ᵀQx̃ + w̃ᵀRw̃` at the current state.
    pub fn stage_cost(&self, w: &DVector<f64>) -> f64 {
        let dx = &self.x_now - &self.x_ref;
        let dw = w - &self.w_ref;
        dx.dot(&(&self.q * &dx)) + dw.dot(&(&self.r * &dw))
    }

    pub fn value(&self, x_next: &StateVec) -> f64 {
        let e = x_next - &self.x_ref;
        e.dot(&(&self.p * &e))
    }

    fn successor_values(&self, x_next: &StateVec) -> DVector<f64> {
        let b = &self.model().state_bounds;
        DVector::from_iterator(
            self.successor_rows.len(),
            self.successor_rows.iter().map(
                |&(i, upper)| {
                    if upper {
                        x_next[i] - b[i].1
                    } else {
                        b[i].0 - x_next[i]
                    }
                },
            ),
        )
    }
}

impl Transcription for MyopicOcp {
    fn num_vars(&self) -> usize {
        self.model().n_w()
    }

    fn constraint_set(&self) -> &ConstraintSet {
        &self.constraints
    }

    fn eval_core(&self, w: &DVector<f64>) -> Result<Evaluation, EvalError> {
        check_point(w, self.num_vars())?;
        let next = self.map.rk4_step(&self.x_now, w)?;
        Ok(Evaluation {
            objective: self.stage_cost(w) + self.value(&next),
            eq: DVector::zeros(0),
            ineq: self.successor_values(&next),
        })
    }

    fn derivs_core(&self, w: &DVector<f64>) -> Result<Derivatives, EvalError> {
        check_point(w, self.num_vars())?;
        let (next, _, b) = self.map.rk4_step_with_sensitivities(&self.x_now, w)?;
        let e = &next - &self.x_ref;
        let dw = w - &self.w_ref;
        let gradient = &self.r * dw * 2.0 + b.tr_mul(&(&self.p * e)) * 2.0;
        let mut jac = DMatrix::zeros(self.successor_rows.len(), w.len());
        for (row, &(i, upper)) in self.successor_rows.iter().enumerate() {
            let sign = if upper { 1.0 } else { -1.0 };
            jac.set_row(row, &(b.row(i) * sign));
        }
        Ok(Derivatives {
            gradient,
            eq_jacobian: DMatrix::zeros(0, w.len()),
            ineq_jacobian: jac,
        })
    }
}

/// Presents a transcription to the NLP solver: bound rows become variable
/// bounds (optionally tightened further), general rows stay inequality rows.
pub struct BoxedNlp<'a, T: Transcription> {
    pub inner: &'a T,
    lower: Vec<f64>,
    upper: Vec<f64>,
    general: usize,
}

impl<'a, T: Transcription> BoxedNlp<'a, T> {
    pub fn new(inner: &'a T) -> Self {
        let n = inner.num_vars();
        let mut lower = vec![f64::NEG_INFINITY; n];
        let mut upper = vec![f64::INFINITY; n];
        for row in &inner.constraint_set().inequality {
            match row.form {
                RowForm::Lower { var, value } => lower[var] = lower[var].max(value),
                RowForm::Upper { var, value } => upper[var] = upper[var].min(value),
                RowForm::General { .. } => {}
            }
        }
        Self {
            general: inner.constraint_set().num_general(),
            inner,
            lower,
            upper,
        }
    }

    /// Intersects the bounds of `var` with `[lo, hi]`.
    pub fn tighten(&mut self, var: usize, lo: f64, hi: f64) {
        self.lower[var] = self.lower[var].max(lo);
        self.upper[var] = self.upper[var].min(hi);
    }

    /// Overrides the bounds of `var`.
    pub fn set_bounds(&mut self, var: usize, lo: f64, hi: f64) {
        self.lower[var] = lo;
        self.upper[var] = hi;
    }

    /// Multipliers of the transcription's inequality rows, in constraint-set order.
    pub fn row_multipliers(&self, m: &Multipliers) -> DVector<f64> {
        let rows = &self.inner.constraint_set().inequality;
        DVector::from_iterator(
            rows.len(),
            rows.iter().map(|r| match r.form {
                RowForm::Lower { var, value } if value == self.lower[var] => m.lower[var],
                RowForm::Upper { var, value } if value == self.upper[var] => m.upper[var],
                RowForm::Lower { .. } | RowForm::Upper { .. } => 0.0,
                RowForm::General { index } => m.ineq[index],
            }),
        )
    }
}

impl<T: Transcription> NlpProblem for BoxedNlp<'_, T> {
    fn num_vars(&self) -> usize {
        self.inner.num_vars()
    }
    fn num_eq(&self) -> usize {
        self.inner.constraint_set().equality.len()
    }
    fn num_ineq(&self) -> usize {
        self.general
    }
    fn lower_bounds(&self) -> &[f64] {
        &self.lower
    }
    fn upper_bounds(&self) -> &[f64] {
        &self.upper
    }
    fn evaluate(&self, y: &DVector<f64>) -> Result<Evaluation, EvalError> {
        self.inner.eval_core(y)
    }
    fn derivatives(&self, y: &DVector<f64>) -> Result<Derivatives, EvalError> {
        self.inner.derivs_core(y)
    }
    fn lagrangian_hessian(
        &self,
        y: &DVector<f64>,
        eq_w: &DVector<f64>,
        ineq_w: &DVector<f64>,
    ) -> Result<DMatrix<f64>, EvalError> {
        self.inner.hessian_core(y, eq_w, ineq_w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fishing_spec(horizon: usize) -> OcpSpec {
        OcpSpec::new(
            DiscreteMap::single_step(ModelSpec::lotka_volterra()),
            horizon,
            DMatrix::identity(2, 2),
            DMatrix::from_element(1, 1, 0.01),
            DVector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap()
    }

    fn satellite_spec(horizon: usize) -> OcpSpec {
        OcpSpec::new(
            DiscreteMap::single_step(ModelSpec::satellite()),
            horizon,
            DMatrix::from_diagonal(&DVector::from_vec(vec![10.0, 1.0, 1.0])),
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![5.0, 0.0, 0.126]),
        )
        .unwrap()
    }

    #[test]
    fn layout_sizes() {
        let x = DVector::from_vec(vec![1.2, 1.1]);
        let ocp = build_full_ocp(&fishing_spec(30), &x).unwrap();
        assert_eq!(ocp.num_vars(), 92);
        let ocp = build_full_ocp(&satellite_spec(30), &DVector::from_vec(vec![4.4, 0.0, 0.14])).unwrap();
        assert_eq!(ocp.num_vars(), 153);
        let ocp = build_full_ocp(&fishing_spec(1), &x).unwrap();
        assert_eq!(ocp.num_vars(), 5);
        assert_eq!(ocp.constraint_set().equality.len(), 4);
        // x ≥ 0 at stage 1 (2 rows) + z hull at stage 0 (2 rows).
        assert_eq!(ocp.constraint_set().inequality.len(), 4);
    }

    #[test]
    fn layout_ranges_are_disjoint_and_cover() {
        let l = Layout {
            n_x: 3,
            n_w: 2,
            horizon: 4,
        };
        let mut seen = vec![0; l.len()];
        for k in 0..=4 {
            for i in l.state(k) {
                seen[i] += 1;
            }
        }
        for k in 0..4 {
            for i in l.control(k) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn initial_state_outside_bounds_rejected() {
        let err = build_full_ocp(&fishing_spec(3), &DVector::from_vec(vec![-0.1, 1.0]));
        assert!(matches!(err, Err(OcpError::InfeasibleInput { index: 0, .. })));
    }

    #[test]
    fn invalid_weights_rejected() {
        let map = DiscreteMap::single_step(ModelSpec::lotka_volterra());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let x_ref = DVector::from_vec(vec![1.0, 1.0]);
        assert!(OcpSpec::new(map.clone(), 3, bad, DMatrix::identity(1, 1), x_ref.clone()).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(OcpSpec::new(map.clone(), 3, asym, DMatrix::identity(1, 1), x_ref.clone()).is_err());
        assert!(OcpSpec::new(map.clone(), 0, DMatrix::identity(2, 2), DMatrix::identity(1, 1), x_ref).is_err());
        let sat = DiscreteMap::single_step(ModelSpec::satellite());
        let below = DVector::from_vec(vec![2.0, 0.0, 0.0]);
        let r = OcpSpec::new(sat, 3, DMatrix::identity(3, 3), DMatrix::identity(2, 2), below);
        assert!(matches!(r, Err(OcpError::ReferenceOutOfBounds)));
    }

    #[test]
    fn consistent_rollout_has_zero_defects() {
        let ocp = build_full_ocp(&fishing_spec(5), &DVector::from_vec(vec![1.3, 0.8])).unwrap();
        let controls: Vec<_> = [1.0, 0.0, 0.5, 1.0, 0.0]
            .iter()
            .map(|&z| DVector::from_element(1, z))
            .collect();
        let dv = ocp.rollout(&controls).unwrap();
        let ev = ocp.evaluate(&dv.values).unwrap();
        assert!(ev.eq.iter().all(|&v| v == 0.0));
        assert!(ev.ineq.iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn stage_cost_example() {
        let spec = fishing_spec(1);
        let c = spec.stage_cost(&DVector::from_vec(vec![1.5, 1.0]), &DVector::from_element(1, 1.0));
        assert_abs_diff_eq!(c, 0.26, epsilon = 1e-15);
    }

    #[test]
    fn objective_zero_at_reference() {
        let ocp = build_full_ocp(&fishing_spec(4), &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        let dv = ocp.rollout(&vec![DVector::zeros(1); 4]).unwrap();
        let ev = ocp.evaluate(&dv.values).unwrap();
        assert_eq!(ev.objective, 0.0);
        let d = ocp.derivatives(&dv.values).unwrap();
        assert!(d.gradient.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn defect_jacobian_has_negative_identity() {
        let ocp = build_full_ocp(&satellite_spec(3), &DVector::from_vec(vec![4.4, 0.0, 0.14])).unwrap();
        let y = ocp.initial_guess().values;
        let d = ocp.derivatives(&y).unwrap();
        for k in 0..3 {
            let row = (k + 1) * 3;
            let col = ocp.layout.state(k + 1).start;
            for i in 0..3 {
                for j in 0..3 {
                    let expect = if i == j { -1.0 } else { 0.0 };
                    assert_eq!(d.eq_jacobian[(row + i, col + j)], expect);
                }
            }
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let ocp = build_full_ocp(&satellite_spec(4), &DVector::from_vec(vec![5.6, 0.0, 0.11])).unwrap();
        let y = ocp.initial_guess().values.map(|v| v * 1.01 + 0.001);
        let a = ocp.evaluate(&y).unwrap();
        let b = ocp.evaluate(&y).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_point_length() {
        let ocp = build_full_ocp(&fishing_spec(2), &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert!(ocp.evaluate(&DVector::zeros(3)).is_err());
        assert!(ocp.derivatives(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn myopic_row_counts() {
        let p = DMatrix::identity(2, 2);
        let fish = build_myopic_ocp(
            &DiscreteMap::single_step(ModelSpec::lotka_volterra()),
            &DMatrix::identity(2, 2),
            &DMatrix::from_element(1, 1, 0.01),
            &p,
            &DVector::from_vec(vec![1.0, 1.0]),
            &DVector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap();
        assert_eq!(fish.num_vars(), 1);
        assert_eq!(fish.constraint_set().inequality.len(), 4);
        let sat = build_myopic_ocp(
            &DiscreteMap::single_step(ModelSpec::satellite()),
            &DMatrix::identity(3, 3),
            &DMatrix::identity(2, 2),
            &DMatrix::identity(3, 3),
            &DVector::from_vec(vec![5.0, 0.0, 0.126]),
            &DVector::from_vec(vec![5.0, 0.0, 0.126]),
        )
        .unwrap();
        assert_eq!(sat.num_vars(), 2);
        assert_eq!(sat.constraint_set().inequality.len(), 6);
        assert_eq!(sat.constraint_set().num_general(), 2);
    }

    #[test]
    fn myopic_rejects_indefinite_value() {
        let r = build_myopic_ocp(
            &DiscreteMap::single_step(ModelSpec::lotka_volterra()),
            &DMatrix::identity(2, 2),
            &DMatrix::from_element(1, 1, 0.01),
            &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
            &DVector::from_vec(vec![1.0, 1.0]),
            &DVector::from_vec(vec![1.0, 1.0]),
        );
        assert!(matches!(r, Err(OcpError::InvalidWeight("P"))));
    }

    #[test]
    fn boxed_adapter_moves_bounds() {
        let ocp = build_full_ocp(&fishing_spec(3), &DVector::from_vec(vec![1.2, 1.1])).unwrap();
        let nlp = BoxedNlp::new(&ocp);
        assert_eq!(nlp.num_ineq(), 0);
        assert_eq!(nlp.num_eq(), 8);
        let z0 = ocp.integer_vars()[0];
        assert_eq!((nlp.lower_bounds()[z0], nlp.upper_bounds()[z0]), (0.0, 1.0));
        let x1 = ocp.layout.state(1).start;
        assert_eq!(nlp.lower_bounds()[x1], 0.0);
        assert_eq!(nlp.upper_bounds()[x1], f64::INFINITY);
        // x_0 is pinned by equality rows only.
        assert_eq!(nlp.lower_bounds()[0], f64::NEG_INFINITY);
    }

    fn fd_check<T: Transcription>(t: &T, y: &DVector<f64>, tol: f64) {
        let d = t.derivatives(y).unwrap();
        let ev0 = t.evaluate(y).unwrap();
        for j in 0..y.len() {
            let h = 1e-6 * y[j].abs().max(1.0);
            let mut yp = y.clone();
            yp[j] += h;
            let mut ym = y.clone();
            ym[j] -= h;
            let (ep, em) = (t.evaluate(&yp).unwrap(), t.evaluate(&ym).unwrap());
            let g = (ep.objective - em.objective) / (2.0 * h);
            assert!((g - d.gradient[j]).abs() <= tol * (1.0 + g.abs()), "grad {j}");
            for i in 0..ev0.eq.len() {
                let fd = (ep.eq[i] - em.eq[i]) / (2.0 * h);
                assert!(
                    (fd - d.eq_jacobian[(i, j)]).abs() <= tol * (1.0 + fd.abs()),
                    "eq {i},{j}"
                );
            }
            for i in 0..ev0.ineq.len() {
                let fd = (ep.ineq[i] - em.ineq[i]) / (2.0 * h);
                assert!(
                    (fd - d.ineq_jacobian[(i, j)]).abs() <= tol * (1.0 + fd.abs()),
                    "ineq {i},{j}"
                );
            }
        }
    }

    #[test]
    fn full_derivatives_match_differences() {
        let ocp = build_full_ocp(&satellite_spec(3), &DVector::from_vec(vec![4.4, 0.0, 0.14])).unwrap();
        let mut y = ocp.initial_guess().values;
        for (i, v) in y.iter_mut().enumerate() {
            *v += 0.01 * ((i as f64) * 0.7).sin();
        }
        fd_check(&ocp, &y, 1e-6);
        let ocp = build_full_ocp(&fishing_spec(4), &DVector::from_vec(vec![1.2, 1.1])).unwrap();
        let mut y = ocp.initial_guess().values;
        for (i, v) in y.iter_mut().enumerate() {
            *v += 0.05 * ((i as f64) * 1.3).cos();
        }
        fd_check(&ocp, &y, 1e-6);
    }

    #[test]
    fn myopic_derivatives_match_differences() {
        let sat = build_myopic_ocp(
            &DiscreteMap::single_step(ModelSpec::satellite()),
            &DMatrix::from_diagonal(&DVector::from_vec(vec![10.0, 1.0, 1.0])),
            &DMatrix::identity(2, 2),
            &DMatrix::from_row_slice(3, 3, &[49.0, 81.4, 81.5, 81.4, 164.0, 239.0, 81.5, 239.0, 509.0]),
            &DVector::from_vec(vec![4.6, 0.05, 0.13]),
            &DVector::from_vec(vec![5.0, 0.0, 0.126]),
        )
        .unwrap();
        fd_check(&sat, &DVector::from_vec(vec![0.3, -0.6]), 1e-6);
    }

    #[test]
    fn myopic_matches_one_step_full_problem() {
        let x = DVector::from_vec(vec![1.3, 0.7]);
        let p = DMatrix::from_row_slice(2, 2, &[0.6, 0.46, 0.46, 0.36]);
        let spec = fishing_spec(1).with_terminal_weight(p.clone()).unwrap();
        let full = build_full_ocp(&spec, &x).unwrap();
        let my = build_myopic_ocp(&spec.map, &spec.q, &spec.r, &p, &x, &spec.x_ref).unwrap();
        for z in [0.0, 0.25, 1.0] {
            let w = DVector::from_element(1, z);
            let dv = full.rollout(std::slice::from_ref(&w)).unwrap();
            let a = full.evaluate(&dv.values).unwrap().objective;
            let b = my.evaluate(&w).unwrap().objective;
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn exact_hessian_override_matches_differences() {
        let ocp = build_full_ocp(&fishing_spec(3), &DVector::from_vec(vec![1.2, 1.1])).unwrap();
        let y = ocp.initial_guess().values;
        let nu = DVector::from_fn(8, |i, _| 0.3 * (i as f64) - 1.0);
        let empty = DVector::zeros(0);
        let exact = ocp.hessian_core(&y, &nu, &empty).unwrap();
        let generic = fd_hessian(&y, |p| {
            let d = ocp.derivs_core(p)?;
            Ok(crate::nlp::lagrangian_gradient(&d, &nu, &empty))
        })
        .unwrap();
        assert!((exact - generic).amax() < 1e-6);
    }

    #[test]
    fn relaxed_full_problem_solves_to_kkt() {
        use crate::nlp::{check_kkt, solve_nlp, SolveOptions, SolveStatus, StartPoint};
        let ocp = build_full_ocp(&fishing_spec(10), &DVector::from_vec(vec![1.2, 1.1])).unwrap();
        let nlp = BoxedNlp::new(&ocp);
        let r = solve_nlp(
            &nlp,
            &StartPoint::primal(ocp.initial_guess().values),
            &SolveOptions::default(),
        )
        .unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        let k = check_kkt(&nlp, &r.x, &r.multipliers).unwrap();
        assert!(
            k.stationarity <= 1e-6 && k.feasibility <= 1e-6 && k.complementarity <= 1e-6,
            "{k:?}"
        );
        for &v in &ocp.integer_vars() {
            assert!((0.0..=1.0).contains(&r.x[v]));
        }
    }
}
