//! Closed-loop simulation against a (possibly mismatched) plant, expert
//! demonstration generation, and the file formats used to store both.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{Controller, ControllerError, FullMinmpcController, RelaxedNmpcController};
use crate::learner::{Dataset, DemoPair, DemoSource, LearnerError, DEMO_FEASIBILITY_TOL};
use crate::minlp::BnbOptions;
use crate::model::{DiscreteMap, LotkaVolterra, ModelError, ModelSpec, Satellite, StateVec, ThrustEfficiency};
use crate::nlp::SolveOptions;
use crate::ocp::{build_myopic_ocp, OcpError, OcpSpec, Transcription};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("initial state {0:?} lies outside the state bounds")]
    InitialStateOutOfBounds(Vec<f64>),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

/// Dynamics used to advance the simulated system.
#[derive(Debug, Clone)]
pub struct PlantSpec {
    pub name: String,
    pub map: DiscreteMap,
}

impl PlantSpec {
    /// The controller's own model as plant.
    pub fn nominal(model: ModelSpec) -> Self {
        Self {
            name: format!("{}-nominal", model.name),
            map: DiscreteMap::single_step(model),
        }
    }
}

/// Fishing dynamics with harvest coefficients 10% above nominal.
pub fn fishing_plant() -> PlantSpec {
    PlantSpec {
        name: "lotka-volterra-mismatch".into(),
        map: DiscreteMap::single_step(ModelSpec::lotka_volterra_with(LotkaVolterra { c1: 0.44, c2: 0.22 })),
    }
}

/// Satellite dynamics whose thrust efficiency varies with the radius.
pub fn satellite_plant() -> PlantSpec {
    PlantSpec {
        name: "satellite-variable-thrust".into(),
        map: DiscreteMap::single_step(ModelSpec::satellite_with(Satellite {
            thrust: ThrustEfficiency::AltitudeDependent,
            ..Satellite::NOMINAL
        })),
    }
}

/// Mismatched plant registered for a benchmark name.
pub fn mismatch_plant(model: &str) -> Result<PlantSpec, HarnessError> {
    match model {
        "lotka-volterra" => Ok(fishing_plant()),
        "satellite" => Ok(satellite_plant()),
        other => Ok(PlantSpec::nominal(ModelSpec::by_name(other)?)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub x0: StateVec,
    pub steps: usize,
    pub x_ref: StateVec,
    /// Carried into the result; every shipped controller is deterministic.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `‖x_T − x_ref‖∞`.
    pub final_deviation_inf: f64,
    /// `Ts · Σ_{t<T} ‖x_t − x_ref‖²`.
    pub integrated_sq_deviation: f64,
    pub max_bound_violation: f64,
    pub infeasible_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationRecord {
    pub step: usize,
    pub amount: f64,
}

/// Closed-loop trajectories. Per-step wall times are kept apart from the
/// serialized result so that result files are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimResult {
    pub controller: String,
    pub plant: String,
    pub model: String,
    pub ts: f64,
    pub seed: u64,
    pub x_ref: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub feasible: Vec<bool>,
    pub violations: Vec<ViolationRecord>,
    pub metrics: Metrics,
    /// Why the run stopped before `steps` controller calls, if it did.
    pub terminated: Option<String>,
    #[serde(skip)]
    pub step_times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timings {
    pub controller: String,
    /// Seconds per controller call.
    pub step_times: Vec<f64>,
}

/// Recomputes the tracking metrics from stored trajectories.
pub fn compute_metrics(
    states: &[Vec<f64>],
    feasible: &[bool],
    violations: &[ViolationRecord],
    x_ref: &[f64],
    ts: f64,
) -> Metrics {
    let dev = |x: &Vec<f64>| x.iter().zip(x_ref).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let sq = |x: &Vec<f64>| x.iter().zip(x_ref).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let t = states.len().saturating_sub(1);
    Metrics {
        final_deviation_inf: states.last().map_or(0.0, dev),
        integrated_sq_deviation: ts * states[..t].iter().map(sq).sum::<f64>(),
        max_bound_violation: violations.iter().map(|v| v.amount).fold(0.0, f64::max),
        infeasible_steps: feasible.iter().filter(|&&f| !f).count(),
    }
}

/// Runs `cfg.steps` controller calls, applying each control to the plant for one sample.
pub fn simulate_closed_loop(
    controller: &mut dyn Controller,
    plant: &PlantSpec,
    cfg: &SimConfig,
) -> Result<SimResult, HarnessError> {
    let model = &plant.map.model;
    if cfg.x0.len() != model.n_x || !model.within_bounds(&cfg.x0) {
        return Err(HarnessError::InitialStateOutOfBounds(cfg.x0.iter().copied().collect()));
    }
    let mut x = cfg.x0.clone();
    let mut states = vec![x.iter().copied().collect::<Vec<_>>()];
    let mut controls = Vec::with_capacity(cfg.steps);
    let mut feasible = Vec::with_capacity(cfg.steps);
    let mut step_times = Vec::with_capacity(cfg.steps);
    let mut violations = Vec::new();
    let mut terminated = None;
    for t in 0..cfg.steps {
        let clock = Instant::now();
        let step = match controller.step(&x) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("{}: failed at step {t}: {e}", controller.name());
                terminated = Some(format!("controller failed at step {t}: {e}"));
                break;
            }
        };
        let elapsed = clock.elapsed().as_secs_f64();
        if !step.feasible {
            log::debug!("{}: no feasible control at step {t}", controller.name());
        }
        x = match plant.map.rk4_step(&x, &step.w) {
            Ok(next) => next,
            Err(e) => {
                log::warn!("plant integration failed at step {t}: {e}");
                terminated = Some(format!("plant integration failed at step {t}: {e}"));
                break;
            }
        };
        let v = model.bound_violation(&x);
        if v > 0.0 {
            violations.push(ViolationRecord { step: t + 1, amount: v });
        }
        controls.push(step.w.iter().copied().collect());
        feasible.push(step.feasible);
        step_times.push(elapsed);
        states.push(x.iter().copied().collect());
    }
    if let Some(first) = feasible.iter().position(|f| !f) {
        log::warn!(
            "{}: no feasible control at {} of {} steps, first at step {first}",
            controller.name(),
            feasible.iter().filter(|f| !**f).count(),
            feasible.len()
        );
    }
    let x_ref: Vec<f64> = cfg.x_ref.iter().copied().collect();
    let metrics = compute_metrics(&states, &feasible, &violations, &x_ref, model.ts);
    Ok(SimResult {
        controller: controller.name().to_string(),
        plant: plant.name.clone(),
        model: model.name.clone(),
        ts: model.ts,
        seed: cfg.seed,
        x_ref,
        states,
        controls,
        feasible,
        violations,
        metrics,
        terminated,
        step_times,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertKind {
    MixedInteger,
    Relaxed,
}

impl ExpertKind {
    pub fn source(self) -> DemoSource {
        match self {
            ExpertKind::MixedInteger => DemoSource::MixedInteger,
            ExpertKind::Relaxed => DemoSource::Relaxed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoTrajectory {
    pub x0: StateVec,
    /// Step index and pair for every recorded demonstration.
    pub pairs: Vec<(usize, DemoPair)>,
    pub truncated: Option<String>,
    pub wall_time: Duration,
}

#[derive(Debug, Clone)]
pub struct DemoRun {
    pub kind: ExpertKind,
    pub spec: OcpSpec,
    pub trajectories: Vec<DemoTrajectory>,
    pub wall_time: Duration,
}

impl DemoRun {
    pub fn dataset(&self) -> Result<Dataset, HarnessError> {
        let pairs = self
            .trajectories
            .iter()
            .flat_map(|t| t.pairs.iter().map(|(_, p)| p.clone()))
            .collect();
        Ok(Dataset::new(
            pairs,
            self.spec.map.clone(),
            self.spec.q.clone(),
            self.spec.r.clone(),
            self.spec.x_ref.clone(),
        )?)
    }
}

/// Largest violation of the relaxed one-step constraints at `(x, w)`.
pub fn demo_violation(spec: &OcpSpec, x: &StateVec, w: &DVector<f64>) -> Result<f64, HarnessError> {
    let zero = DMatrix::zeros(spec.model().n_x, spec.model().n_x);
    let ocp = build_myopic_ocp(&spec.map, &spec.q, &spec.r, &zero, x, &spec.x_ref)?;
    Ok(match ocp.evaluate(w) {
        Ok(ev) => ev.ineq.iter().copied().fold(0.0, f64::max),
        Err(_) => f64::INFINITY,
    })
}

/// Runs the expert in closed loop on the nominal model from each initial
/// state (trajectories in parallel) and records the state–control pairs.
pub fn generate_demonstrations(
    kind: ExpertKind,
    spec: &OcpSpec,
    bnb: &BnbOptions,
    nlp: &SolveOptions,
    initial_states: &[StateVec],
    steps: usize,
) -> Result<DemoRun, HarnessError> {
    let clock = Instant::now();
    let model = spec.model();
    for x0 in initial_states {
        if x0.len() != model.n_x || !model.within_bounds(x0) {
            return Err(HarnessError::InitialStateOutOfBounds(x0.iter().copied().collect()));
        }
    }
    let trajectories = initial_states
        .par_iter()
        .map(|x0| {
            let t0 = Instant::now();
            let mut expert: Box<dyn Controller> = match kind {
                ExpertKind::MixedInteger => Box::new(FullMinmpcController::new(spec.clone(), bnb.clone())),
                ExpertKind::Relaxed => Box::new(RelaxedNmpcController::new(spec.clone(), nlp.clone())),
            };
            let mut x = x0.clone();
            let mut pairs = Vec::with_capacity(steps);
            let mut truncated = None;
            for t in 0..steps {
                let step = match expert.step(&x) {
                    Ok(s) => s,
                    Err(e) => {
                        truncated = Some(format!("step {t}: expert error: {e}"));
                        break;
                    }
                };
                if !step.feasible {
                    truncated = Some(format!("step {t}: expert returned no feasible solution"));
                    break;
                }
                let v = demo_violation(spec, &x, &step.w)?;
                if v > DEMO_FEASIBILITY_TOL {
                    truncated = Some(format!("step {t}: demonstration violates constraints by {v:e}"));
                    break;
                }
                pairs.push((
                    t,
                    DemoPair {
                        x: x.clone(),
                        w: step.w.clone(),
                        source: kind.source(),
                    },
                ));
                x = match spec.map.rk4_step(&x, &step.w) {
                    Ok(n) => n,
                    Err(e) => {
                        truncated = Some(format!("step {t}: integration failed: {e}"));
                        break;
                    }
                };
            }
            if let Some(reason) = &truncated {
                log::warn!("demonstration from {:?} truncated: {reason}", x0.as_slice());
            }
            Ok(DemoTrajectory {
                x0: x0.clone(),
                pairs,
                truncated,
                wall_time: t0.elapsed(),
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(DemoRun {
        kind,
        spec: spec.clone(),
        trajectories,
        wall_time: clock.elapsed(),
    })
}

/// Default demonstration starts for a benchmark.
pub fn default_initial_states(model: &str) -> Vec<StateVec> {
    let raw: &[&[f64]] = match model {
        "lotka-volterra" => &[&[1.2, 1.1], &[0.8, 1.3], &[1.5, 0.9]],
        "satellite" => &[&[4.4, 0.0, 0.14], &[5.6, 0.0, 0.11], &[5.0, 0.1, 0.126]],
        _ => &[],
    };
    raw.iter().map(|s| DVector::from_column_slice(s)).collect()
}

/// Demonstration steps per trajectory for a benchmark.
pub fn default_demo_steps(model: &str) -> usize {
    match model {
        "satellite" => 40,
        _ => 120,
    }
}

/// Reference cost-to-go weights for the two benchmarks. They carry four
/// significant digits and neither is exactly PSD.
pub fn reference_value(model: &str) -> Option<DMatrix<f64>> {
    match model {
        "lotka-volterra" => Some(DMatrix::from_row_slice(2, 2, &[0.5965, 0.4627, 0.4627, 0.3589])),
        "satellite" => Some(DMatrix::from_row_slice(
            3,
            3,
            &[48.7, 81.4, 81.5, 81.4, 164.0, 239.0, 81.5, 239.0, 509.0],
        )),
        _ => None,
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that parses back to the same bits.
    format!("{v:?}")
}

fn header(model: &ModelSpec) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=model.n_x).map(|i| format!("x{i}")));
    h.extend((1..=model.n_u).map(|i| format!("u{i}")));
    h.extend((1..=model.n_z).map(|i| format!("z{i}")));
    h.push("source".into());
    h
}

/// Writes one demonstration trajectory as CSV.
pub fn write_demo_csv(path: &Path, model: &ModelSpec, pairs: &[(usize, DemoPair)]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header(model))?;
    for (t, p) in pairs {
        let mut rec = vec![t.to_string()];
        rec.extend(p.x.iter().map(|&v| fmt_f64(v)));
        rec.extend(p.w.iter().map(|&v| fmt_f64(v)));
        rec.push(p.source.as_str().to_string());
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

fn format_err(path: &Path, message: impl Into<String>) -> HarnessError {
    HarnessError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn read_demo_csv(path: &Path, model: &ModelSpec) -> Result<Vec<(usize, DemoPair)>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    let expected = header(model);
    let got: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if got != expected {
        return Err(format_err(path, format!("header {got:?} does not match {expected:?}")));
    }
    let (n_x, n_w) = (model.n_x, model.n_w());
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, HarnessError> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| format_err(path, format!("row {}: column {}: {e}", line + 2, i + 1)))
        };
        let t = rec[0]
            .parse::<usize>()
            .map_err(|e| format_err(path, format!("row {}: t: {e}", line + 2)))?;
        let x = DVector::from_iterator(n_x, (1..=n_x).map(num).collect::<Result<Vec<_>, _>>()?);
        let w = DVector::from_iterator(n_w, (1 + n_x..1 + n_x + n_w).map(num).collect::<Result<Vec<_>, _>>()?);
        let source = DemoSource::parse(&rec[1 + n_x + n_w])
            .ok_or_else(|| format_err(path, format!("row {}: unknown source", line + 2)))?;
        out.push((t, DemoPair { x, w, source }));
    }
    Ok(out)
}

/// Dataset description written next to the per-trajectory CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model: String,
    pub expert: ExpertKind,
    pub ts: f64,
    pub steps_per_sample: usize,
    pub horizon: usize,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub qf: Vec<Vec<f64>>,
    pub x_ref: Vec<f64>,
    /// Number of demonstrations.
    pub m: usize,
    pub files: Vec<String>,
    pub truncated: Vec<Option<String>>,
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return None;
    }
    Some(DMatrix::from_fn(n, c, |i, j| rows[i][j]))
}

/// Writes one CSV per trajectory and `manifest.json` into `dir`.
pub fn write_demo_run(dir: &Path, run: &DemoRun) -> Result<Manifest, HarnessError> {
    fs::create_dir_all(dir)?;
    let model = run.spec.model();
    let mut files = Vec::new();
    for (i, t) in run.trajectories.iter().enumerate() {
        let name = format!("trajectory_{i}.csv");
        write_demo_csv(&dir.join(&name), model, &t.pairs)?;
        files.push(name);
    }
    let manifest = Manifest {
        model: model.name.clone(),
        expert: run.kind,
        ts: model.ts,
        steps_per_sample: run.spec.map.steps_per_sample,
        horizon: run.spec.horizon,
        q: matrix_rows(&run.spec.q),
        r: matrix_rows(&run.spec.r),
        qf: matrix_rows(&run.spec.qf),
        x_ref: run.spec.x_ref.iter().copied().collect(),
        m: run.trajectories.iter().map(|t| t.pairs.len()).sum(),
        files,
        truncated: run.trajectories.iter().map(|t| t.truncated.clone()).collect(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

/// Reads a manifest and its trajectory files back into a dataset.
pub fn load_dataset(manifest_path: &Path) -> Result<(Manifest, Dataset), HarnessError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let model = ModelSpec::by_name(&manifest.model)?;
    if manifest.ts != model.ts {
        return Err(format_err(
            manifest_path,
            format!("sampling time {} does not match the model's {}", manifest.ts, model.ts),
        ));
    }
    let map = DiscreteMap::new(model, manifest.steps_per_sample)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for f in &manifest.files {
        pairs.extend(read_demo_csv(&dir.join(f), &map.model)?.into_iter().map(|(_, p)| p));
    }
    if pairs.len() != manifest.m {
        return Err(format_err(
            manifest_path,
            format!(
                "manifest lists {} demonstrations, files hold {}",
                manifest.m,
                pairs.len()
            ),
        ));
    }
    let q = matrix_from_rows(&manifest.q).ok_or_else(|| format_err(manifest_path, "ragged Q"))?;
    let r = matrix_from_rows(&manifest.r).ok_or_else(|| format_err(manifest_path, "ragged R"))?;
    let x_ref = DVector::from_vec(manifest.x_ref.clone());
    let data = Dataset::new(pairs, map, q, r, x_ref)?;
    Ok((manifest, data))
}

/// Writes the state and control trajectories of a run as CSV
/// (`t,x…,u…,z…`; the control columns of the final row are empty).
pub fn write_sim_csv(path: &Path, model: &ModelSpec, res: &SimResult) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut h = header(model);
    h.pop();
    w.write_record(&h)?;
    for (t, x) in res.states.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(x.iter().map(|&v| fmt_f64(v)));
        match res.controls.get(t) {
            Some(c) => rec.extend(c.iter().map(|&v| fmt_f64(v))),
            None => rec.extend(std::iter::repeat_n(String::new(), model.n_w())),
        }
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// States and controls read back from a trajectory CSV.
pub type SimRows = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Reads the trajectories written by [`write_sim_csv`].
pub fn read_sim_csv(path: &Path, model: &ModelSpec) -> Result<SimRows, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    let (n_x, n_w) = (model.n_x, model.n_w());
    let mut states = Vec::new();
    let mut controls = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |s: &str| s.parse::<f64>().map_err(|e| format_err(path, e.to_string()));
        states.push((1..=n_x).map(|i| parse(&rec[i])).collect::<Result<Vec<_>, _>>()?);
        if !rec[1 + n_x].is_empty() {
            controls.push(
                (1 + n_x..1 + n_x + n_w)
                    .map(|i| parse(&rec[i]))
                    .collect::<Result<Vec<_>, _>>()?,
            );
        }
    }
    Ok((states, controls))
}
