//! Receding-horizon controllers: the one-step controller with a learned
//! quadratic value, full-horizon mixed-integer MPC, and its continuous
//! relaxation (used as an expert).

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::learner::LearnedValue;
use crate::minlp::{branch_and_bound, BnbOptions, MinlpError, MinlpStatus};
use crate::model::{DiscreteMap, ModelSpec, StateVec};
use crate::nlp::{solve_nlp, NlpError, SolveOptions, SolveStatus, StartPoint};
use crate::ocp::{build_full_ocp, build_myopic_ocp, BoxedNlp, OcpError, OcpSpec, Transcription};

/// Successor-state violation tolerated for a candidate to count as feasible.
pub const CANDIDATE_FEASIBILITY_TOL: f64 = 1e-8;
/// Objective difference below which candidates tie; the earlier one wins.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Minlp(#[from] MinlpError),
    #[error(transparent)]
    Nlp(#[from] NlpError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub z: Vec<i64>,
    pub w: DVector<f64>,
    pub objective: f64,
    /// Largest constraint violation of the successor state.
    pub violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// Applied control `[u, z]`.
    pub w: DVector<f64>,
    pub objective: f64,
    pub wall_time: Duration,
    pub feasible: bool,
    /// Branch-and-bound nodes, for controllers that search a tree.
    pub nodes: Option<usize>,
    pub candidates: Option<Vec<Candidate>>,
}

/// One control per call from a measured state.
pub trait Controller: Send {
    fn name(&self) -> &str;
    fn step(&mut self, x: &StateVec) -> Result<StepResult, ControllerError>;
    /// Forgets any warm-start information.
    fn reset(&mut self) {}
}

/// Cartesian product of the integer domains in lexicographic order
/// (first channel most significant).
pub fn enumerate_integer_grid(model: &ModelSpec) -> Vec<Vec<i64>> {
    let mut grid: Vec<Vec<i64>> = vec![Vec::new()];
    for d in &model.z_domains {
        grid = grid
            .into_iter()
            .flat_map(|prefix| {
                d.values().iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect();
    }
    grid
}

/// Picks the feasible candidate with the least objective (earliest on ties);
/// without feasible candidates, the least-violating one.
fn select(cands: &[Candidate]) -> (usize, bool) {
    let mut best: Option<usize> = None;
    for (i, c) in cands.iter().enumerate() {
        if c.violation <= CANDIDATE_FEASIBILITY_TOL && best.is_none_or(|b| c.objective < cands[b].objective - TIE_TOL) {
            best = Some(i);
        }
    }
    if let Some(b) = best {
        return (b, true);
    }
    let mut least = 0;
    for (i, c) in cands.iter().enumerate() {
        if c.violation < cands[least].violation {
            least = i;
        }
    }
    (least, false)
}

/// One-step controller with terminal value `(x⁺ − x_ref)ᵀ P (x⁺ − x_ref)`.
#[derive(Debug, Clone)]
pub struct MyopicController {
    pub map: DiscreteMap,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub x_ref: StateVec,
    pub p: DMatrix<f64>,
    pub grid: Vec<Vec<i64>>,
    pub nlp: SolveOptions,
    pub record_candidates: bool,
}

impl MyopicController {
    pub fn new(
        map: DiscreteMap,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        x_ref: StateVec,
        value: &LearnedValue,
    ) -> Result<Self, ControllerError> {
        // Validates shapes and P.
        build_myopic_ocp(&map, &q, &r, &value.p, &x_ref, &x_ref)?;
        Ok(Self {
            grid: enumerate_integer_grid(&map.model),
            map,
            q,
            r,
            x_ref,
            p: value.p.clone(),
            nlp: SolveOptions::default(),
            record_candidates: false,
        })
    }

    fn candidate(&self, x: &StateVec, z: &[i64]) -> Result<Candidate, ControllerError> {
        let m = &self.map.model;
        let ocp = build_myopic_ocp(&self.map, &self.q, &self.r, &self.p, x, &self.x_ref)?;
        let mut w = DVector::zeros(m.n_w());
        for (j, &v) in z.iter().enumerate() {
            w[m.n_u + j] = v as f64;
        }
        if m.n_u > 0 {
            let mut nlp = BoxedNlp::new(&ocp);
            for (j, &v) in z.iter().enumerate() {
                nlp.set_bounds(m.n_u + j, v as f64, v as f64);
            }
            let r = solve_nlp(&nlp, &StartPoint::primal(w.clone()), &self.nlp)?;
            if matches!(r.status, SolveStatus::Singular) {
                return Ok(Candidate {
                    z: z.to_vec(),
                    w,
                    objective: f64::INFINITY,
                    violation: f64::INFINITY,
                });
            }
            w = r.x;
            for (j, &v) in z.iter().enumerate() {
                w[m.n_u + j] = v as f64;
            }
        }
        Ok(match ocp.evaluate(&w) {
            Ok(ev) => Candidate {
                z: z.to_vec(),
                violation: ev.ineq.iter().copied().fold(0.0, f64::max),
                objective: ev.objective,
                w,
            },
            Err(_) => Candidate {
                z: z.to_vec(),
                w,
                objective: f64::INFINITY,
                violation: f64::INFINITY,
            },
        })
    }

    /// Evaluates every integer candidate and applies the selection rule.
    pub fn myopic_step(&self, x: &StateVec) -> Result<StepResult, ControllerError> {
        let clock = Instant::now();
        let cands = self
            .grid
            .par_iter()
            .map(|z| self.candidate(x, z))
            .collect::<Result<Vec<_>, _>>()?;
        let (best, feasible) = select(&cands);
        Ok(StepResult {
            w: cands[best].w.clone(),
            objective: cands[best].objective,
            wall_time: clock.elapsed(),
            feasible,
            nodes: None,
            candidates: self.record_candidates.then_some(cands),
        })
    }
}

impl Controller for MyopicController {
    fn name(&self) -> &str {
        "myopic"
    }

    fn step(&mut self, x: &StateVec) -> Result<StepResult, ControllerError> {
        self.myopic_step(x)
    }
}

/// Shifts a multiple-shooting solution one stage forward, repeating the last stage.
pub fn shift_solution(spec: &OcpSpec, prev: &DVector<f64>, x_now: &StateVec) -> DVector<f64> {
    let (n_x, n_w, horizon) = (spec.model().n_x, spec.model().n_w(), spec.horizon);
    let stride = n_x + n_w;
    let mut y = prev.clone();
    for k in 0..horizon.saturating_sub(1) {
        let src = prev.rows((k + 1) * stride, stride).into_owned();
        y.rows_mut(k * stride, stride).copy_from(&src);
    }
    if horizon >= 1 {
        // Last control repeated; final state kept.
        let last_w = prev.rows((horizon - 1) * stride + n_x, n_w).into_owned();
        y.rows_mut((horizon - 1) * stride + n_x, n_w).copy_from(&last_w);
        let last_x = prev.rows(horizon * stride, n_x).into_owned();
        y.rows_mut((horizon - 1) * stride, n_x).copy_from(&last_x);
    }
    y.rows_mut(0, n_x).copy_from(x_now);
    y
}

/// Full-horizon mixed-integer MPC solved by branch-and-bound.
#[derive(Debug, Clone)]
pub struct FullMinmpcController {
    pub spec: OcpSpec,
    pub bnb: BnbOptions,
    pub warm_start: bool,
    name: String,
    previous: Option<DVector<f64>>,
}

impl FullMinmpcController {
    pub fn new(spec: OcpSpec, bnb: BnbOptions) -> Self {
        Self {
            spec,
            bnb,
            warm_start: true,
            name: "full".into(),
            previous: None,
        }
    }

    /// Horizon one with the stage weight as terminal weight and no learned value.
    pub fn short_no_value(spec: &OcpSpec, bnb: BnbOptions) -> Result<Self, ControllerError> {
        let short = spec.clone().with_horizon(1)?.with_terminal_weight(spec.q.clone())?;
        Ok(Self {
            name: "short-no-v".into(),
            ..Self::new(short, bnb)
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn full_minmpc_step(
        &self,
        x: &StateVec,
        warm: Option<&DVector<f64>>,
    ) -> Result<(StepResult, Option<DVector<f64>>), ControllerError> {
        let clock = Instant::now();
        let ocp = match build_full_ocp(&self.spec, x) {
            Ok(o) => o,
            Err(OcpError::InfeasibleInput { .. }) => {
                return Ok((fallback_step(&self.spec, warm, clock.elapsed()), None));
            }
            Err(e) => return Err(e.into()),
        };
        let shifted = warm.map(|w| shift_solution(&self.spec, w, x));
        let r = branch_and_bound(&ocp, shifted.as_ref(), &self.bnb)?;
        match r.incumbent {
            Some(inc) => Ok((
                StepResult {
                    w: inc.control(0),
                    objective: r.objective,
                    wall_time: clock.elapsed(),
                    feasible: r.status != MinlpStatus::Infeasible,
                    nodes: Some(r.nodes),
                    candidates: None,
                },
                Some(inc.values),
            )),
            None => {
                let mut s = fallback_step(&self.spec, warm, clock.elapsed());
                s.nodes = Some(r.nodes);
                Ok((s, None))
            }
        }
    }
}

/// First control of the shifted previous plan, or the reference control
/// rounded into the integer domains.
fn fallback_step(spec: &OcpSpec, warm: Option<&DVector<f64>>, elapsed: Duration) -> StepResult {
    let m = spec.model();
    let w = match warm {
        Some(prev) if spec.horizon > 1 => prev.rows(2 * m.n_x + m.n_w(), m.n_w()).into_owned(),
        Some(prev) => prev.rows(m.n_x, m.n_w()).into_owned(),
        None => {
            let mut w = spec.w_ref.clone();
            for (j, d) in m.z_domains.iter().enumerate() {
                w[m.n_u + j] = d.nearest(w[m.n_u + j]) as f64;
            }
            w
        }
    };
    StepResult {
        w,
        objective: f64::INFINITY,
        wall_time: elapsed,
        feasible: false,
        nodes: None,
        candidates: None,
    }
}

impl Controller for FullMinmpcController {
    fn name(&self) -> &str {
        &self.name
    }

    fn step(&mut self, x: &StateVec) -> Result<StepResult, ControllerError> {
        let warm = if self.warm_start { self.previous.take() } else { None };
        let (step, sol) = self.full_minmpc_step(x, warm.as_ref())?;
        self.previous = sol;
        Ok(step)
    }

    fn reset(&mut self) {
        self.previous = None;
    }
}

/// Full-horizon MPC with integer inputs relaxed to their hulls.
#[derive(Debug, Clone)]
pub struct RelaxedNmpcController {
    pub spec: OcpSpec,
    pub nlp: SolveOptions,
    previous: Option<(DVector<f64>, DVector<f64>)>,
}

impl RelaxedNmpcController {
    pub fn new(spec: OcpSpec, nlp: SolveOptions) -> Self {
        Self {
            spec: spec.relaxed(true),
            nlp,
            previous: None,
        }
    }
}

impl Controller for RelaxedNmpcController {
    fn name(&self) -> &str {
        "relaxed"
    }

    fn step(&mut self, x: &StateVec) -> Result<StepResult, ControllerError> {
        let clock = Instant::now();
        let ocp = match build_full_ocp(&self.spec, x) {
            Ok(o) => o,
            Err(OcpError::InfeasibleInput { .. }) => {
                let prev = self.previous.take().map(|p| p.0);
                return Ok(fallback_step(&self.spec, prev.as_ref(), clock.elapsed()));
            }
            Err(e) => return Err(e.into()),
        };
        let start = match self.previous.take() {
            Some((y, eq)) => StartPoint {
                primal: shift_solution(&self.spec, &y, x),
                eq: Some(eq),
                ineq: None,
            },
            None => StartPoint::primal(ocp.initial_guess().values),
        };
        let nlp = BoxedNlp::new(&ocp);
        let r = solve_nlp(&nlp, &start, &self.nlp)?;
        let ok = r.status == SolveStatus::Optimal;
        let w = r.x.rows_range(ocp.layout.control(0)).into_owned();
        let step = StepResult {
            w,
            objective: r.objective,
            wall_time: clock.elapsed(),
            feasible: ok,
            nodes: None,
            candidates: None,
        };
        if ok {
            self.previous = Some((r.x, r.multipliers.eq));
        }
        Ok(step)
    }

    fn reset(&mut self) {
        self.previous = None;
    }
}
