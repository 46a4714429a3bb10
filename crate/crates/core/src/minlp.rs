//! Branch-and-bound over the integer inputs of a transcribed horizon problem,
//! with continuous relaxations solved by [`solve_nlp`] and a sum-up-rounding
//! incumbent at the root.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::model::IntegerDomain;
use crate::nlp::{solve_nlp, NlpError, SolveOptions, SolveStatus, StartPoint};
use crate::ocp::{BoxedNlp, DecisionVector, FullOcp, OcpError, Transcription};

/// Distance to the nearest domain member below which a relaxed value counts as integral.
pub const INTEGRALITY_TOL: f64 = 1e-6;
/// Largest state-bound violation accepted for an incumbent.
pub const FEASIBILITY_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MinlpError {
    #[error("relaxed value {value} at position {index} lies outside the domain hull [{lower}, {upper}]")]
    OutsideHull {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("invalid branch-and-bound options: {0}")]
    InvalidOptions(String),
    #[error("root relaxation failed with status {0:?}")]
    RootFailure(SolveStatus),
    #[error(transparent)]
    Nlp(#[from] NlpError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error("trace output: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace output: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BranchRule {
    /// Largest distance to the nearest domain member; ties go to the earliest stage.
    #[default]
    MostFractional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NodeOrder {
    /// Depth-first until an incumbent exists, then best-bound.
    #[default]
    DepthThenBestBound,
    BestBound,
    DepthFirst,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnbOptions {
    pub abs_gap: f64,
    pub rel_gap: f64,
    pub node_limit: usize,
    pub time_limit: Option<Duration>,
    pub branching: BranchRule,
    pub node_order: NodeOrder,
    pub nlp: SolveOptions,
    pub record_trace: bool,
}

impl Default for BnbOptions {
    fn default() -> Self {
        Self {
            abs_gap: 1e-6,
            rel_gap: 1e-4,
            node_limit: 100_000,
            time_limit: None,
            branching: BranchRule::default(),
            node_order: NodeOrder::default(),
            nlp: SolveOptions::default(),
            record_trace: false,
        }
    }
}

impl BnbOptions {
    pub fn validate(&self) -> Result<(), MinlpError> {
        if !(self.abs_gap >= 0.0 && self.rel_gap >= 0.0) {
            return Err(MinlpError::InvalidOptions("gaps must be non-negative".into()));
        }
        if self.node_limit < 1 {
            return Err(MinlpError::InvalidOptions("node_limit must be at least 1".into()));
        }
        self.nlp.validate()?;
        Ok(())
    }

    fn gap_tolerance(&self, objective: f64) -> f64 {
        self.abs_gap.max(self.rel_gap * objective.abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MinlpStatus {
    /// Gap closed within tolerance (including an exhausted tree).
    Optimal,
    /// Time limit reached with the gap still open.
    GapLimit,
    NodeLimit,
    Infeasible,
}

/// One row of the per-node trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub node: usize,
    pub depth: usize,
    pub bound: f64,
    pub incumbent: f64,
    pub decision: String,
}

#[derive(Debug, Clone)]
pub struct MinlpResult {
    pub status: MinlpStatus,
    /// Best integral point, with states obtained by rolling the dynamics forward.
    pub incumbent: Option<DecisionVector>,
    /// Objective of the incumbent, `+inf` without one.
    pub objective: f64,
    pub bound: f64,
    pub nodes: usize,
    pub wall_time: Duration,
    /// Child relaxations whose objective fell below their parent's.
    pub nonconvexity_events: usize,
    pub trace: Vec<TraceRow>,
}

impl MinlpResult {
    pub fn gap(&self) -> f64 {
        self.objective - self.bound
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<(), MinlpError> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.trace {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Rounds one relaxed channel so that the running sum tracks the relaxed one.
///
/// `σ_k = Σ_{j≤k} a_j − Σ_{j<k} b_j` and `b_k` is the domain member nearest to
/// `σ_k`, ties going to the larger member.
pub fn sum_up_rounding(relaxed: &[f64], domain: &IntegerDomain) -> Result<Vec<i64>, MinlpError> {
    let (lo, hi) = domain.hull();
    let mut out = Vec::with_capacity(relaxed.len());
    let mut sigma = 0.0;
    for (k, &a) in relaxed.iter().enumerate() {
        if !(a >= lo - 1e-9 && a <= hi + 1e-9) {
            return Err(MinlpError::OutsideHull {
                index: k,
                value: a,
                lower: lo,
                upper: hi,
            });
        }
        sigma += a;
        let b = domain.nearest(sigma);
        sigma -= b as f64;
        out.push(b);
    }
    Ok(out)
}

struct Node {
    id: usize,
    depth: usize,
    /// Lower bound inherited from the parent relaxation.
    bound: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
    start: StartPoint,
    decision: String,
}

struct Keyed(Node);

impl PartialEq for Keyed {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Keyed {}
impl PartialOrd for Keyed {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Keyed {
    // Max-heap: smallest bound first, then smallest id.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .bound
            .total_cmp(&self.0.bound)
            .then_with(|| other.0.id.cmp(&self.0.id))
    }
}

enum Open {
    Stack(Vec<Node>),
    Heap(BinaryHeap<Keyed>),
}

impl Open {
    fn push(&mut self, n: Node) {
        match self {
            Open::Stack(s) => s.push(n),
            Open::Heap(h) => h.push(Keyed(n)),
        }
    }
    fn pop(&mut self) -> Option<Node> {
        match self {
            Open::Stack(s) => s.pop(),
            Open::Heap(h) => h.pop().map(|k| k.0),
        }
    }
    fn min_bound(&self) -> f64 {
        let it: Box<dyn Iterator<Item = f64>> = match self {
            Open::Stack(s) => Box::new(s.iter().map(|n| n.bound)),
            Open::Heap(h) => Box::new(h.iter().map(|k| k.0.bound)),
        };
        it.fold(f64::INFINITY, f64::min)
    }
    fn switch_to_heap(&mut self) {
        if let Open::Stack(s) = self {
            let h = s.drain(..).map(Keyed).collect();
            *self = Open::Heap(h);
        }
    }
}

/// Integral candidate obtained from a relaxed point: rounds `z`, keeps `u`,
/// and rolls the dynamics forward. `None` if the rollout fails or violates
/// the state bounds by more than [`FEASIBILITY_TOL`].
pub fn integral_rollout(ocp: &FullOcp, point: &DVector<f64>) -> Option<(f64, DecisionVector)> {
    let m = ocp.model();
    let controls: Vec<DVector<f64>> = (0..ocp.spec.horizon)
        .map(|k| {
            let mut w = point.rows_range(ocp.layout.control(k)).into_owned();
            for (j, d) in m.z_domains.iter().enumerate() {
                w[m.n_u + j] = d.nearest(w[m.n_u + j]) as f64;
            }
            w
        })
        .collect();
    let dv = ocp.rollout(&controls).ok()?;
    for k in 1..=ocp.spec.horizon {
        if m.bound_violation(&dv.state(k)) > FEASIBILITY_TOL {
            return None;
        }
    }
    let obj = ocp.evaluate(&dv.values).ok()?.objective;
    obj.is_finite().then_some((obj, dv))
}

/// Solves the problem with every integer input fixed to `z_seq` (stage-major).
/// Without continuous inputs the rollout is the unique feasible point.
pub fn solve_fixed_integers(
    ocp: &FullOcp,
    z_seq: &[f64],
    guess: &DVector<f64>,
    opts: &SolveOptions,
) -> Result<Option<(f64, DecisionVector)>, MinlpError> {
    let ivars = ocp.integer_vars();
    let mut point = guess.clone();
    for (&v, &z) in ivars.iter().zip(z_seq) {
        point[v] = z;
    }
    if ocp.model().n_u == 0 {
        return Ok(integral_rollout(ocp, &point));
    }
    let mut nlp = BoxedNlp::new(ocp);
    for (&v, &z) in ivars.iter().zip(z_seq) {
        nlp.set_bounds(v, z, z);
    }
    let r = solve_nlp(&nlp, &StartPoint::primal(point), opts)?;
    if matches!(r.status, SolveStatus::Infeasible | SolveStatus::Singular) {
        return Ok(None);
    }
    Ok(integral_rollout(ocp, &r.x))
}

/// Branch-and-bound on `ocp`. `warm` seeds the root relaxation and, when its
/// integer inputs are integral, is offered as a first incumbent.
pub fn branch_and_bound(
    ocp: &FullOcp,
    warm: Option<&DVector<f64>>,
    opts: &BnbOptions,
) -> Result<MinlpResult, MinlpError> {
    opts.validate()?;
    let clock = Instant::now();
    let model = ocp.model();
    let ivars = ocp.integer_vars();
    let domain_of = |idx: usize| &model.z_domains[idx % model.n_z.max(1)];
    let (root_lower, root_upper): (Vec<f64>, Vec<f64>) = (0..ivars.len()).map(|i| domain_of(i).hull()).unzip();

    let mut incumbent: Option<(f64, DecisionVector)> = None;
    let mut trace = Vec::new();
    let mut nonconvexity_events = 0;
    let mut pruned_bound = f64::INFINITY;

    let root_guess = match warm {
        Some(w) if w.len() == ocp.num_vars() => {
            if let Some(c) = integral_candidate(ocp, w, &ivars, domain_of) {
                incumbent = Some(c);
            }
            w.clone()
        }
        _ => ocp.initial_guess().values,
    };

    let mut open = match opts.node_order {
        NodeOrder::BestBound => Open::Heap(BinaryHeap::new()),
        _ => Open::Stack(Vec::new()),
    };
    if incumbent.is_some() && opts.node_order == NodeOrder::DepthThenBestBound {
        open.switch_to_heap();
    }
    open.push(Node {
        id: 0,
        depth: 0,
        bound: f64::NEG_INFINITY,
        lower: root_lower,
        upper: root_upper,
        start: StartPoint::primal(root_guess),
        decision: "root".into(),
    });
    let mut next_id = 1;
    let mut nodes = 0;
    let mut limit: Option<MinlpStatus> = None;

    while let Some(node) = open.pop() {
        if nodes >= opts.node_limit {
            open.push(node);
            limit = Some(MinlpStatus::NodeLimit);
            break;
        }
        if opts.time_limit.is_some_and(|t| clock.elapsed() >= t) {
            open.push(node);
            limit = Some(MinlpStatus::GapLimit);
            break;
        }
        if let Some((best, _)) = &incumbent {
            if node.bound >= best - opts.gap_tolerance(*best) {
                pruned_bound = pruned_bound.min(node.bound);
                continue;
            }
        }
        nodes += 1;

        let mut nlp = BoxedNlp::new(ocp);
        for (i, &v) in ivars.iter().enumerate() {
            nlp.set_bounds(v, node.lower[i], node.upper[i]);
        }
        let r = solve_nlp(&nlp, &node.start, &opts.nlp)?;
        let incumbent_value = incumbent.as_ref().map_or(f64::INFINITY, |c| c.0);
        let mut record = |bound: f64, what: &str| {
            if opts.record_trace {
                trace.push(TraceRow {
                    node: node.id,
                    depth: node.depth,
                    bound,
                    incumbent: incumbent_value,
                    decision: format!("{}; {}", node.decision, what),
                });
            }
        };
        match r.status {
            SolveStatus::Infeasible | SolveStatus::Singular => {
                if node.id == 0 {
                    record(f64::INFINITY, "root relaxation infeasible");
                    if r.status == SolveStatus::Singular {
                        return Err(MinlpError::RootFailure(r.status));
                    }
                    return Ok(MinlpResult {
                        status: MinlpStatus::Infeasible,
                        incumbent: None,
                        objective: f64::INFINITY,
                        bound: f64::INFINITY,
                        nodes,
                        wall_time: clock.elapsed(),
                        nonconvexity_events,
                        trace,
                    });
                }
                record(f64::INFINITY, "infeasible");
                continue;
            }
            SolveStatus::Optimal | SolveStatus::MaxIters => {}
        }
        // A local solve of a nonconvex relaxation can undercut its parent.
        let bound = if r.status == SolveStatus::Optimal {
            if r.objective < node.bound - 1e-9 * (1.0 + node.bound.abs()) {
                nonconvexity_events += 1;
                log::debug!(
                    "node {} relaxation {} below parent bound {}",
                    node.id,
                    r.objective,
                    node.bound
                );
            }
            r.objective
        } else {
            node.bound
        };

        if node.id == 0 {
            if let Some(c) = sur_candidate(ocp, &r.x, &ivars, &opts.nlp)? {
                if incumbent.as_ref().is_none_or(|b| c.0 < b.0) {
                    incumbent = Some(c);
                }
            }
        }

        if let Some((best, _)) = &incumbent {
            if bound >= best - opts.gap_tolerance(*best) {
                pruned_bound = pruned_bound.min(bound);
                record(bound, "pruned by bound");
                continue;
            }
        }

        // Most fractional integer input, earliest stage on ties.
        let mut branch: Option<(usize, f64)> = None;
        for (i, &v) in ivars.iter().enumerate() {
            let dist = domain_of(i).distance(r.x[v]);
            if dist > INTEGRALITY_TOL && branch.is_none_or(|(_, d)| dist > d) {
                branch = Some((i, dist));
            }
        }
        let Some((bi, _)) = branch else {
            match integral_candidate(ocp, &r.x, &ivars, domain_of)
                .map(Some)
                .unwrap_or_else(|| {
                    let z: Vec<f64> = ivars
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| domain_of(i).nearest(r.x[v]) as f64)
                        .collect();
                    solve_fixed_integers(ocp, &z, &r.x, &opts.nlp).ok().flatten()
                }) {
                Some(c) if incumbent.as_ref().is_none_or(|b| c.0 < b.0) => {
                    record(bound, "integral; new incumbent");
                    incumbent = Some(c);
                    if opts.node_order == NodeOrder::DepthThenBestBound {
                        open.switch_to_heap();
                    }
                }
                Some(_) => record(bound, "integral; not better"),
                None => record(bound, "integral; rollout infeasible"),
            }
            continue;
        };

        let v = r.x[ivars[bi]];
        let d = domain_of(bi);
        let down = d.floor_member(v).expect("relaxed value inside hull") as f64;
        let up = d.ceil_member(v).expect("relaxed value inside hull") as f64;
        record(bound, &format!("branch var {} at {:.6}", bi, v));
        let child = |id: usize, lo: f64, hi: f64, tag: String| {
            let mut lower = node.lower.clone();
            let mut upper = node.upper.clone();
            lower[bi] = lower[bi].max(lo);
            upper[bi] = upper[bi].min(hi);
            Node {
                id,
                depth: node.depth + 1,
                bound,
                lower,
                upper,
                start: StartPoint {
                    primal: r.x.clone(),
                    eq: Some(r.multipliers.eq.clone()),
                    ineq: Some(r.multipliers.ineq.clone()),
                },
                decision: tag,
            }
        };
        let lo_child = child(next_id, f64::NEG_INFINITY, down, format!("z{} <= {}", bi, down));
        let hi_child = child(next_id + 1, up, f64::INFINITY, format!("z{} >= {}", bi, up));
        next_id += 2;
        // On a stack the nearer child is explored first.
        if v - down < up - v {
            open.push(hi_child);
            open.push(lo_child);
        } else {
            open.push(lo_child);
            open.push(hi_child);
        }
    }

    let objective = incumbent.as_ref().map_or(f64::INFINITY, |c| c.0);
    let open_bound = open.min_bound();
    let status = match limit {
        Some(s) => {
            let b = open_bound.min(pruned_bound).min(objective);
            if incumbent.is_some() && objective - b <= opts.gap_tolerance(objective) {
                MinlpStatus::Optimal
            } else {
                s
            }
        }
        None if incumbent.is_some() => MinlpStatus::Optimal,
        None => MinlpStatus::Infeasible,
    };
    let bound = if limit.is_some() {
        open_bound.min(pruned_bound).min(objective)
    } else {
        pruned_bound.min(objective)
    };
    Ok(MinlpResult {
        status,
        objective,
        bound,
        incumbent: incumbent.map(|c| c.1),
        nodes,
        wall_time: clock.elapsed(),
        nonconvexity_events,
        trace,
    })
}

fn integral_candidate<'a>(
    ocp: &FullOcp,
    point: &DVector<f64>,
    ivars: &[usize],
    domain_of: impl Fn(usize) -> &'a IntegerDomain,
) -> Option<(f64, DecisionVector)> {
    let integral = ivars
        .iter()
        .enumerate()
        .all(|(i, &v)| domain_of(i).distance(point[v]) <= INTEGRALITY_TOL);
    if integral {
        integral_rollout(ocp, point)
    } else {
        None
    }
}

fn sur_candidate(
    ocp: &FullOcp,
    relaxed: &DVector<f64>,
    ivars: &[usize],
    opts: &SolveOptions,
) -> Result<Option<(f64, DecisionVector)>, MinlpError> {
    let m = ocp.model();
    let n = ocp.spec.horizon;
    let mut z = vec![0.0; ivars.len()];
    for (j, d) in m.z_domains.iter().enumerate() {
        let channel: Vec<f64> = (0..n).map(|k| relaxed[ivars[k * m.n_z + j]]).collect();
        for (k, b) in sum_up_rounding(&channel, d)?.into_iter().enumerate() {
            z[k * m.n_z + j] = b as f64;
        }
    }
    solve_fixed_integers(ocp, &z, relaxed, opts)
}

/// Writes a trace to any writer as CSV.
pub fn write_trace<W: Write>(rows: &[TraceRow], out: W) -> Result<(), MinlpError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DiscreteMap, ModelSpec};
    use crate::ocp::{build_full_ocp, OcpSpec};
    use nalgebra::DMatrix;

    fn fishing(horizon: usize, x0: [f64; 2]) -> FullOcp {
        let spec = OcpSpec::new(
            DiscreteMap::single_step(ModelSpec::lotka_volterra()),
            horizon,
            DMatrix::identity(2, 2),
            DMatrix::from_element(1, 1, 0.01),
            DVector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap();
        build_full_ocp(&spec, &DVector::from_vec(x0.to_vec())).unwrap()
    }

    fn tight() -> BnbOptions {
        BnbOptions {
            abs_gap: 1e-7,
            rel_gap: 0.0,
            ..BnbOptions::default()
        }
    }

    #[test]
    fn sur_hand_traces() {
        let b = IntegerDomain::binary();
        assert_eq!(sum_up_rounding(&[0.6, 0.3, 0.8], &b).unwrap(), vec![1, 0, 1]);
        assert_eq!(sum_up_rounding(&[0.5, 0.5], &b).unwrap(), vec![1, 0]);
        assert_eq!(sum_up_rounding(&[1.0, 0.0, 1.0, 1.0], &b).unwrap(), vec![1, 0, 1, 1]);
        let t = IntegerDomain::ternary();
        assert_eq!(sum_up_rounding(&[-0.4, -0.4, -0.4], &t).unwrap(), vec![0, -1, 0]);
        assert!(sum_up_rounding(&[1.5], &b).is_err());
        assert!(sum_up_rounding(&[], &b).unwrap().is_empty());
    }

    #[test]
    fn options_validated() {
        let o = BnbOptions {
            node_limit: 0,
            ..BnbOptions::default()
        };
        assert!(o.validate().is_err());
        let o = BnbOptions {
            abs_gap: -1.0,
            ..BnbOptions::default()
        };
        assert!(o.validate().is_err());
    }

    #[test]
    fn matches_enumeration_on_two_stages() {
        let ocp = fishing(2, [1.2, 1.1]);
        let r = branch_and_bound(&ocp, None, &tight()).unwrap();
        assert_eq!(r.status, MinlpStatus::Optimal);
        let mut best = f64::INFINITY;
        for a in [0.0, 1.0] {
            for b in [0.0, 1.0] {
                let c = [DVector::from_element(1, a), DVector::from_element(1, b)];
                let dv = ocp.rollout(&c).unwrap();
                best = best.min(ocp.evaluate(&dv.values).unwrap().objective);
            }
        }
        assert!((r.objective - best).abs() <= 1e-6, "{} vs {}", r.objective, best);
        let inc = r.incumbent.unwrap();
        for k in 0..2 {
            let z = inc.control(k)[0];
            assert!(z == 0.0 || z == 1.0);
        }
    }

    #[test]
    fn integral_root_finishes_at_once() {
        // At the fixed point nothing is gained by fishing.
        let ocp = fishing(3, [1.0, 1.0]);
        let r = branch_and_bound(&ocp, None, &tight()).unwrap();
        assert_eq!(r.status, MinlpStatus::Optimal);
        assert_eq!(r.nodes, 1);
        assert!(r.objective.abs() < 1e-12);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let mut model = ModelSpec::lotka_volterra();
        model.state_bounds[0] = (1.0, 0.5);
        let spec = OcpSpec::new(
            DiscreteMap::single_step(model),
            2,
            DMatrix::identity(2, 2),
            DMatrix::from_element(1, 1, 0.01),
            DVector::from_vec(vec![1.0, 1.0]),
        );
        // Reference validation is skipped for contradictory bounds.
        let spec = spec.unwrap();
        let ocp = build_full_ocp(&spec, &DVector::from_vec(vec![1.2, 1.1])).unwrap();
        let r = branch_and_bound(&ocp, None, &tight()).unwrap();
        assert_eq!(r.status, MinlpStatus::Infeasible);
        assert!(r.incumbent.is_none());
    }

    #[test]
    fn node_limit_reports_incumbent() {
        let ocp = fishing(6, [1.5, 0.9]);
        let opts = BnbOptions {
            node_limit: 1,
            ..tight()
        };
        let r = branch_and_bound(&ocp, None, &opts).unwrap();
        assert!(matches!(r.status, MinlpStatus::NodeLimit | MinlpStatus::Optimal));
        assert_eq!(r.nodes, 1);
        assert!(r.bound <= r.objective);
    }

    #[test]
    fn trace_rows_written() {
        let ocp = fishing(3, [1.5, 0.9]);
        let opts = BnbOptions {
            record_trace: true,
            ..tight()
        };
        let r = branch_and_bound(&ocp, None, &opts).unwrap();
        assert_eq!(r.trace.len(), r.nodes);
        let mut buf = Vec::new();
        write_trace(&r.trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("node,depth,bound,incumbent,decision"));
    }

    #[test]
    fn deterministic() {
        let ocp = fishing(4, [0.8, 1.3]);
        let a = branch_and_bound(&ocp, None, &tight()).unwrap();
        let b = branch_and_bound(&ocp, None, &tight()).unwrap();
        assert_eq!(a.objective, b.objective);
        assert_eq!(a.nodes, b.nodes);
        assert_eq!(a.incumbent.unwrap().values, b.incumbent.unwrap().values);
    }
}
