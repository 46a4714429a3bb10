//! Run configuration read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use minmpc_core::harness::{default_demo_steps, default_initial_states, matrix_from_rows, ExpertKind};
use minmpc_core::learner::LearnOptions;
use minmpc_core::minlp::BnbOptions;
use minmpc_core::model::{DiscreteMap, ModelSpec, StateVec};
use minmpc_core::ocp::{is_symmetric_psd, OcpSpec};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

/// Machine-readable rejection reason.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reason {
    Io,
    Syntax,
    UnknownField,
    MissingField,
    InvalidValue,
    UnknownBenchmark,
    Dimension,
    NotPsd,
}

impl Reason {
    pub fn code(self) -> &'static str {
        match self {
            Reason::Io => "io",
            Reason::Syntax => "syntax",
            Reason::UnknownField => "unknown-field",
            Reason::MissingField => "missing-field",
            Reason::InvalidValue => "invalid-value",
            Reason::UnknownBenchmark => "unknown-benchmark",
            Reason::Dimension => "dimension",
            Reason::NotPsd => "not-psd",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub reason: Reason,
    pub path: PathBuf,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{l}: ", self.path.display())?,
            None => write!(f, "{}: ", self.path.display())?,
        }
        write!(f, "error[{}]: {}", self.reason.code(), self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantKind {
    #[default]
    Mismatch,
    Nominal,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    benchmark: String,
    horizon: usize,
    q: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    qf: Option<Vec<Vec<f64>>>,
    x_ref: Vec<f64>,
    expert: ExpertKind,
    out_dir: PathBuf,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    demos: RawDemos,
    #[serde(default)]
    learner: RawLearner,
    #[serde(default)]
    simulation: RawSimulation,
    #[serde(default)]
    bnb: RawBnb,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDemos {
    initial_states: Option<Vec<Vec<f64>>>,
    steps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLearner {
    eps: Option<f64>,
    tol: Option<f64>,
    rel_decrease: Option<f64>,
    max_iters: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimulation {
    x0: Option<Vec<f64>>,
    steps: Option<usize>,
    #[serde(default)]
    plant: PlantKind,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBnb {
    abs_gap: Option<f64>,
    rel_gap: Option<f64>,
    node_limit: Option<usize>,
    time_limit_s: Option<f64>,
}

/// Validated configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub path: PathBuf,
    pub benchmark: String,
    pub spec: OcpSpec,
    pub expert: ExpertKind,
    pub demo_states: Vec<StateVec>,
    pub demo_steps: usize,
    pub learn: LearnOptions,
    pub sim_x0: Option<StateVec>,
    pub sim_steps: usize,
    pub plant: PlantKind,
    pub bnb: BnbOptions,
    pub out_dir: PathBuf,
    pub seed: u64,
}

pub const DEFAULT_SIM_STEPS: usize = 150;

struct Ctx<'a> {
    path: &'a Path,
    text: &'a str,
}

impl Ctx<'_> {
    fn err(&self, reason: Reason, key: Option<&str>, message: impl Into<String>) -> ConfigError {
        ConfigError {
            reason,
            path: self.path.to_path_buf(),
            line: key.and_then(|k| key_line(self.text, k)),
            message: message.into(),
        }
    }

    fn matrix(&self, key: &str, rows: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>, ConfigError> {
        let m = matrix_from_rows(rows).ok_or_else(|| {
            self.err(
                Reason::Dimension,
                Some(key),
                format!("{key} has rows of unequal length"),
            )
        })?;
        if m.nrows() != n || m.ncols() != n {
            return Err(self.err(
                Reason::Dimension,
                Some(key),
                format!("{key} is {}x{}, expected {n}x{n}", m.nrows(), m.ncols()),
            ));
        }
        if !is_symmetric_psd(&m) {
            return Err(self.err(
                Reason::NotPsd,
                Some(key),
                format!("{key} is not symmetric positive semidefinite"),
            ));
        }
        Ok(m)
    }

    fn vector(&self, key: &str, v: &[f64], n: usize) -> Result<StateVec, ConfigError> {
        if v.len() != n {
            return Err(self.err(
                Reason::Dimension,
                Some(key),
                format!("{key} has {} entries, expected {n}", v.len()),
            ));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(self.err(Reason::InvalidValue, Some(key), format!("{key} has a non-finite entry")));
        }
        Ok(DVector::from_column_slice(v))
    }

    fn positive(&self, key: &str, v: Option<f64>, default: f64) -> Result<f64, ConfigError> {
        let v = v.unwrap_or(default);
        if v.is_finite() && v > 0.0 {
            Ok(v)
        } else {
            Err(self.err(
                Reason::InvalidValue,
                Some(key),
                format!("{key} must be positive and finite"),
            ))
        }
    }
}

/// First line whose text starts with `key =` (1-based).
fn key_line(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

fn syntax_error(path: &Path, text: &str, e: &toml::de::Error) -> ConfigError {
    let message = e.message().trim().to_string();
    let reason = if message.starts_with("unknown field") {
        Reason::UnknownField
    } else if message.starts_with("missing field") {
        Reason::MissingField
    } else if message.starts_with("unknown variant") || message.starts_with("invalid") {
        Reason::InvalidValue
    } else {
        Reason::Syntax
    };
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
    ConfigError {
        reason,
        path: path.to_path_buf(),
        line,
        message,
    }
}

pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        reason: Reason::Io,
        path: path.to_path_buf(),
        line: None,
        message: e.to_string(),
    })?;
    parse(path, &text)
}

pub fn parse(path: &Path, text: &str) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| syntax_error(path, text, &e))?;
    let cx = Ctx { path, text };
    let model = ModelSpec::by_name(&raw.benchmark).map_err(|_| {
        cx.err(
            Reason::UnknownBenchmark,
            Some("benchmark"),
            format!("unknown benchmark \"{}\"", raw.benchmark),
        )
    })?;
    if raw.horizon == 0 {
        return Err(cx.err(Reason::InvalidValue, Some("horizon"), "horizon must be at least 1"));
    }
    let (n_x, n_w) = (model.n_x, model.n_w());
    let q = cx.matrix("q", &raw.q, n_x)?;
    let r = cx.matrix("r", &raw.r, n_w)?;
    let qf = raw.qf.as_deref().map(|m| cx.matrix("qf", m, n_x)).transpose()?;
    let x_ref = cx.vector("x_ref", &raw.x_ref, n_x)?;
    let mut spec = OcpSpec::new(DiscreteMap::single_step(model.clone()), raw.horizon, q, r, x_ref)
        .map_err(|e| cx.err(Reason::InvalidValue, None, e.to_string()))?;
    if let Some(qf) = qf {
        spec = spec
            .with_terminal_weight(qf)
            .map_err(|e| cx.err(Reason::InvalidValue, Some("qf"), e.to_string()))?;
    }

    let demo_states = match &raw.demos.initial_states {
        Some(states) => states
            .iter()
            .map(|s| cx.vector("initial_states", s, n_x))
            .collect::<Result<Vec<_>, _>>()?,
        None => default_initial_states(&model.name),
    };
    if demo_states.is_empty() {
        return Err(cx.err(
            Reason::MissingField,
            Some("initial_states"),
            "no demonstration initial states",
        ));
    }
    if let Some(x) = demo_states.iter().find(|x| !model.within_bounds(x)) {
        return Err(cx.err(
            Reason::InvalidValue,
            Some("initial_states"),
            format!("initial state {:?} violates the state bounds", x.as_slice()),
        ));
    }
    let demo_steps = raw.demos.steps.unwrap_or_else(|| default_demo_steps(&model.name));

    let defaults = LearnOptions::default();
    let learn = LearnOptions {
        eps: cx.positive("eps", raw.learner.eps, defaults.eps)?,
        tol: cx.positive("tol", raw.learner.tol, defaults.tol)?,
        rel_decrease: cx.positive("rel_decrease", raw.learner.rel_decrease, defaults.rel_decrease)?,
        max_iters: raw.learner.max_iters.unwrap_or(defaults.max_iters),
    };
    learn
        .validate()
        .map_err(|e| cx.err(Reason::InvalidValue, None, e.to_string()))?;

    let sim_x0 = raw
        .simulation
        .x0
        .as_deref()
        .map(|x| cx.vector("x0", x, n_x))
        .transpose()?;
    if let Some(x) = &sim_x0 {
        if !model.within_bounds(x) {
            return Err(cx.err(Reason::InvalidValue, Some("x0"), "x0 violates the state bounds"));
        }
    }

    let mut bnb = BnbOptions::default();
    if raw.bnb.abs_gap.is_some() {
        bnb.abs_gap = cx.positive("abs_gap", raw.bnb.abs_gap, 0.0)?;
    }
    if let Some(g) = raw.bnb.rel_gap {
        if !(g.is_finite() && g >= 0.0) {
            return Err(cx.err(Reason::InvalidValue, Some("rel_gap"), "rel_gap must be non-negative"));
        }
        bnb.rel_gap = g;
    }
    if let Some(n) = raw.bnb.node_limit {
        if n == 0 {
            return Err(cx.err(
                Reason::InvalidValue,
                Some("node_limit"),
                "node_limit must be at least 1",
            ));
        }
        bnb.node_limit = n;
    }
    if raw.bnb.time_limit_s.is_some() {
        bnb.time_limit = Some(Duration::from_secs_f64(cx.positive(
            "time_limit_s",
            raw.bnb.time_limit_s,
            0.0,
        )?));
    }

    Ok(RunConfig {
        path: path.to_path_buf(),
        benchmark: model.name.clone(),
        spec,
        expert: raw.expert,
        demo_states,
        demo_steps,
        learn,
        sim_x0,
        sim_steps: raw.simulation.steps.unwrap_or(DEFAULT_SIM_STEPS),
        plant: raw.simulation.plant,
        bnb,
        out_dir: raw.out_dir,
        seed: raw.seed,
    })
}
