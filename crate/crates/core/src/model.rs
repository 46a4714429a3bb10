//! Continuous-time benchmark systems and the fixed-step RK4 map used by every
//! controller, solver and simulator in the crate.
//!
//! A model is a vector field `ẋ = f(x, w)` with `w = [u, z]`, where `u` are
//! continuous inputs and `z` are integer inputs drawn from finite domains.
//! Integer inputs are stored as reals so the same evaluation path serves the
//! continuous relaxation (z anywhere in the convex hull of its domain).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Plant or model state.
pub type StateVec = DVector<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("vector field is singular at the evaluation point ({0})")]
    Singularity(&'static str),
    #[error("non-finite value produced in RK4 substep {substep}")]
    NonFinite { substep: usize },
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("unknown model `{0}` (expected `lotka-volterra` or `satellite`)")]
    UnknownModel(String),
}

/// Finite, sorted set of admissible values for one integer input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegerDomain(Vec<i64>);

impl IntegerDomain {
    pub fn new(mut values: Vec<i64>) -> Result<Self, ModelError> {
        if values.is_empty() {
            return Err(ModelError::Invalid("empty integer domain".into()));
        }
        values.sort_unstable();
        values.dedup();
        Ok(Self(values))
    }

    pub fn binary() -> Self {
        Self(vec![0, 1])
    }

    pub fn ternary() -> Self {
        Self(vec![-1, 0, 1])
    }

    pub fn values(&self) -> &[i64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Convex hull `[min, max]` used by the continuous relaxation.
    pub fn hull(&self) -> (f64, f64) {
        (self.0[0] as f64, self.0[self.0.len() - 1] as f64)
    }

    /// Exact membership of a real value.
    pub fn contains(&self, v: f64) -> bool {
        self.0.iter().any(|&m| m as f64 == v)
    }

    /// Largest member `<= v`, if any.
    pub fn floor_member(&self, v: f64) -> Option<i64> {
        self.0.iter().rev().copied().find(|&m| m as f64 <= v)
    }

    /// Smallest member `>= v`, if any.
    pub fn ceil_member(&self, v: f64) -> Option<i64> {
        self.0.iter().copied().find(|&m| m as f64 >= v)
    }

    /// Distance from `v` to the closest member.
    pub fn distance(&self, v: f64) -> f64 {
        self.0
            .iter()
            .map(|&m| (m as f64 - v).abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Closest member; ties go to the larger member.
    pub fn nearest(&self, v: f64) -> i64 {
        let mut best = self.0[0];
        let mut best_dist = f64::INFINITY;
        for &m in &self.0 {
            let d = (m as f64 - v).abs();
            if d <= best_dist {
                best = m;
                best_dist = d;
            }
        }
        best
    }
}

/// Continuous-time vector field `ẋ = f(x, w)` with its exact Jacobians.
pub trait VectorField: Send + Sync + fmt::Debug {
    fn eval(&self, x: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>, ModelError>;

    /// Returns `(∂f/∂x, ∂f/∂w)`.
    fn jacobians(&self, x: &DVector<f64>, w: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError>;
}

/// Predator-prey fishing dynamics with harvest rates `c1`, `c2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LotkaVolterra {
    pub c1: f64,
    pub c2: f64,
}

impl LotkaVolterra {
    pub const NOMINAL: Self = Self { c1: 0.4, c2: 0.2 };

    pub fn rhs(&self, x: [f64; 2], z: f64) -> [f64; 2] {
        let [x1, x2] = x;
        [x1 - x1 * x2 - self.c1 * x1 * z, -x2 + x1 * x2 - self.c2 * x2 * z]
    }
}

/// Nominal fishing right-hand side.
pub fn lv_rhs(x: [f64; 2], z: f64) -> [f64; 2] {
    LotkaVolterra::NOMINAL.rhs(x, z)
}

impl VectorField for LotkaVolterra {
    fn eval(&self, x: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        check_len("state", x.len(), 2)?;
        check_len("control", w.len(), 1)?;
        let d = self.rhs([x[0], x[1]], w[0]);
        Ok(DVector::from_column_slice(&d))
    }

    fn jacobians(&self, x: &DVector<f64>, w: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        check_len("state", x.len(), 2)?;
        check_len("control", w.len(), 1)?;
        let (x1, x2, z) = (x[0], x[1], w[0]);
        let jx = DMatrix::from_row_slice(2, 2, &[1.0 - x2 - self.c1 * z, -x1, x2, -1.0 + x1 - self.c2 * z]);
        let jw = DMatrix::from_row_slice(2, 1, &[-self.c1 * x1, -self.c2 * x2]);
        Ok((jx, jw))
    }
}

/// Thrust efficiency of the satellite actuators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThrustEfficiency {
    Constant(f64),
    /// `exp((5 − x1 + 2 ln 0.1) / 2)`: equals 0.1 at the reference radius.
    AltitudeDependent,
}

impl ThrustEfficiency {
    pub fn value(&self, x1: f64) -> f64 {
        match *self {
            Self::Constant(d3) => d3,
            Self::AltitudeDependent => altitude_thrust_efficiency(x1),
        }
    }

    pub fn derivative(&self, x1: f64) -> f64 {
        match *self {
            Self::Constant(_) => 0.0,
            Self::AltitudeDependent => -0.5 * altitude_thrust_efficiency(x1),
        }
    }
}

pub fn altitude_thrust_efficiency(x1: f64) -> f64 {
    ((5.0 - x1 + 2.0 * 0.1f64.ln()) / 2.0).exp()
}

/// Planar orbit in polar coordinates with radial and tangential impulsive thrust.
/// State: radius, radial velocity, angular velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Satellite {
    pub d1: f64,
    pub d2: f64,
    pub thrust: ThrustEfficiency,
}

impl Satellite {
    pub const NOMINAL: Self = Self {
        d1: 2.0,
        d2: 0.1,
        thrust: ThrustEfficiency::Constant(0.1),
    };

    pub fn rhs(&self, x: [f64; 3], z: [f64; 2]) -> Result<[f64; 3], ModelError> {
        let [x1, x2, x3] = x;
        if x1 == 0.0 {
            return Err(ModelError::Singularity("satellite radius x1 = 0"));
        }
        let d3 = self.thrust.value(x1);
        Ok([
            x2,
            x1 * x3 * x3 - self.d1 / (x1 * x1) + d3 * z[0],
            -2.0 * x2 * x3 / x1 - self.d2 * x3 * x3 / x1 + d3 * z[1] / x1,
        ])
    }
}

/// Nominal satellite right-hand side.
pub fn sat_rhs(x: [f64; 3], z: [f64; 2]) -> Result<[f64; 3], ModelError> {
    Satellite::NOMINAL.rhs(x, z)
}

impl VectorField for Satellite {
    fn eval(&self, x: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        check_len("state", x.len(), 3)?;
        check_len("control", w.len(), 2)?;
        let d = self.rhs([x[0], x[1], x[2]], [w[0], w[1]])?;
        Ok(DVector::from_column_slice(&d))
    }

    fn jacobians(&self, x: &DVector<f64>, w: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        check_len("state", x.len(), 3)?;
        check_len("control", w.len(), 2)?;
        let (x1, x2, x3) = (x[0], x[1], x[2]);
        let (z1, z2) = (w[0], w[1]);
        if x1 == 0.0 {
            return Err(ModelError::Singularity("satellite radius x1 = 0"));
        }
        let d3 = self.thrust.value(x1);
        let dd3 = self.thrust.derivative(x1);
        let (d1, d2) = (self.d1, self.d2);
        let x1sq = x1 * x1;
        let jx = DMatrix::from_row_slice(
            3,
            3,
            &[
                0.0,
                1.0,
                0.0,
                x3 * x3 + 2.0 * d1 / (x1sq * x1) + dd3 * z1,
                0.0,
                2.0 * x1 * x3,
                2.0 * x2 * x3 / x1sq + d2 * x3 * x3 / x1sq + (dd3 * x1 - d3) * z2 / x1sq,
                -2.0 * x3 / x1,
                -2.0 * x2 / x1 - 2.0 * d2 * x3 / x1,
            ],
        );
        let jw = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, d3, 0.0, 0.0, d3 / x1]);
        Ok((jx, jw))
    }
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<(), ModelError> {
    if got == expected {
        Ok(())
    } else {
        Err(ModelError::Dimension { what, expected, got })
    }
}

/// Continuous and integer parts of one control decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVec {
    pub u: DVector<f64>,
    /// Integer inputs as reals; integral except in relaxed mode.
    pub z: DVector<f64>,
}

impl ControlVec {
    pub fn new(u: DVector<f64>, z: DVector<f64>) -> Self {
        Self { u, z }
    }

    pub fn from_flat(n_u: usize, w: &[f64]) -> Self {
        Self {
            u: DVector::from_column_slice(&w[..n_u]),
            z: DVector::from_column_slice(&w[n_u..]),
        }
    }

    /// `w = [u, z]`.
    pub fn to_flat(&self) -> DVector<f64> {
        DVector::from_iterator(self.u.len() + self.z.len(), self.u.iter().chain(self.z.iter()).copied())
    }

    pub fn is_integral_in(&self, domains: &[IntegerDomain]) -> bool {
        self.z.len() == domains.len() && self.z.iter().zip(domains).all(|(&v, d)| d.contains(v))
    }

    pub fn within_hulls(&self, domains: &[IntegerDomain]) -> bool {
        self.z.len() == domains.len()
            && self.z.iter().zip(domains).all(|(&v, d)| {
                let (lo, hi) = d.hull();
                v >= lo && v <= hi
            })
    }
}

/// Linear field `ẋ = A x + B w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearField {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearField {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self, ModelError> {
        if !a.is_square() {
            return Err(ModelError::Invalid("A must be square".into()));
        }
        check_len("rows of B", b.nrows(), a.nrows())?;
        Ok(Self { a, b })
    }
}

impl VectorField for LinearField {
    fn eval(&self, x: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        check_len("state", x.len(), self.a.ncols())?;
        check_len("control", w.len(), self.b.ncols())?;
        Ok(&self.a * x + &self.b * w)
    }

    fn jacobians(&self, x: &DVector<f64>, w: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        check_len("state", x.len(), self.a.ncols())?;
        check_len("control", w.len(), self.b.ncols())?;
        Ok((self.a.clone(), self.b.clone()))
    }
}

/// Dynamics, integer domains, state bounds and sampling interval of a system.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub n_x: usize,
    pub n_u: usize,
    pub n_z: usize,
    pub field: Arc<dyn VectorField>,
    pub z_domains: Vec<IntegerDomain>,
    /// Per-state `(lower, upper)`; either side may be infinite.
    pub state_bounds: Vec<(f64, f64)>,
    pub ts: f64,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("n_x", &self.n_x)
            .field("n_u", &self.n_u)
            .field("n_z", &self.n_z)
            .field("field", &self.field)
            .field("z_domains", &self.z_domains)
            .field("state_bounds", &self.state_bounds)
            .field("ts", &self.ts)
            .finish()
    }
}

impl ModelSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        n_x: usize,
        n_u: usize,
        field: Arc<dyn VectorField>,
        z_domains: Vec<IntegerDomain>,
        state_bounds: Vec<(f64, f64)>,
        ts: f64,
    ) -> Result<Self, ModelError> {
        if !(ts > 0.0 && ts.is_finite()) {
            return Err(ModelError::Invalid(format!("sampling time must be positive, got {ts}")));
        }
        if n_x == 0 {
            return Err(ModelError::Invalid("model needs at least one state".into()));
        }
        check_len("state bounds", state_bounds.len(), n_x)?;
        Ok(Self {
            name: name.into(),
            n_x,
            n_u,
            n_z: z_domains.len(),
            field,
            z_domains,
            state_bounds,
            ts,
        })
    }

    pub fn lotka_volterra() -> Self {
        Self::lotka_volterra_with(LotkaVolterra::NOMINAL)
    }

    pub fn lotka_volterra_with(params: LotkaVolterra) -> Self {
        Self::new(
            "lotka-volterra",
            2,
            0,
            Arc::new(params),
            vec![IntegerDomain::binary()],
            vec![(0.0, f64::INFINITY), (0.0, f64::INFINITY)],
            0.1,
        )
        .expect("fishing model is well formed")
    }

    pub fn satellite() -> Self {
        Self::satellite_with(Satellite::NOMINAL)
    }

    pub fn satellite_with(params: Satellite) -> Self {
        Self::new(
            "satellite",
            3,
            0,
            Arc::new(params),
            vec![IntegerDomain::ternary(), IntegerDomain::ternary()],
            vec![
                (3.0, 7.0),
                (f64::NEG_INFINITY, f64::INFINITY),
                (f64::NEG_INFINITY, f64::INFINITY),
            ],
            0.5,
        )
        .expect("satellite model is well formed")
    }

    /// Damped oscillator with one continuous and one integer input in
    /// `{-3, …, 3}`; states unbounded. Used as a linear test system.
    pub fn oscillator() -> Self {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.2]);
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 0.3, 1.0, 0.5]);
        Self::new(
            "oscillator",
            2,
            1,
            Arc::new(LinearField::new(a, b).expect("square system")),
            vec![IntegerDomain::new((-3..=3).collect()).expect("nonempty")],
            vec![(f64::NEG_INFINITY, f64::INFINITY); 2],
            0.2,
        )
        .expect("oscillator model is well formed")
    }

    /// Nominal model registered under `name`.
    pub fn by_name(name: &str) -> Result<Self, ModelError> {
        match name {
            "lotka-volterra" => Ok(Self::lotka_volterra()),
            "satellite" => Ok(Self::satellite()),
            "oscillator" => Ok(Self::oscillator()),
            other => Err(ModelError::UnknownModel(other.to_string())),
        }
    }

    pub fn n_w(&self) -> usize {
        self.n_u + self.n_z
    }

    pub fn rhs(&self, x: &StateVec, w: &DVector<f64>) -> Result<StateVec, ModelError> {
        check_len("state", x.len(), self.n_x)?;
        check_len("control", w.len(), self.n_w())?;
        self.field.eval(x, w)
    }

    /// Largest violation of the state bounds (0 when inside).
    pub fn bound_violation(&self, x: &StateVec) -> f64 {
        x.iter()
            .zip(&self.state_bounds)
            .map(|(&v, &(lo, hi))| (lo - v).max(v - hi).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn within_bounds(&self, x: &StateVec) -> bool {
        self.bound_violation(x) == 0.0
    }
}

/// Sampled-data map: RK4 with `steps_per_sample` substeps over one interval.
#[derive(Debug, Clone)]
pub struct DiscreteMap {
    pub model: ModelSpec,
    pub steps_per_sample: usize,
}

impl DiscreteMap {
    pub fn new(model: ModelSpec, steps_per_sample: usize) -> Result<Self, ModelError> {
        if steps_per_sample == 0 {
            return Err(ModelError::Invalid("steps_per_sample must be >= 1".into()));
        }
        Ok(Self {
            model,
            steps_per_sample,
        })
    }

    pub fn single_step(model: ModelSpec) -> Self {
        Self {
            model,
            steps_per_sample: 1,
        }
    }

    pub fn substep(&self) -> f64 {
        self.model.ts / self.steps_per_sample as f64
    }

    /// State after one sampling interval under zero-order hold on `w`.
    pub fn rk4_step(&self, x: &StateVec, w: &DVector<f64>) -> Result<StateVec, ModelError> {
        check_len("state", x.len(), self.model.n_x)?;
        check_len("control", w.len(), self.model.n_w())?;
        let f = &self.model.field;
        let h = self.substep();
        let mut x = x.clone();
        for s in 0..self.steps_per_sample {
            let k1 = f.eval(&x, w)?;
            let k2 = f.eval(&(&x + &k1 * (0.5 * h)), w)?;
            let k3 = f.eval(&(&x + &k2 * (0.5 * h)), w)?;
            let k4 = f.eval(&(&x + &k3 * h), w)?;
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite { substep: s });
            }
        }
        Ok(x)
    }

    /// State after one interval together with `∂x⁺/∂x` and `∂x⁺/∂w`,
    /// propagated forward through every RK4 stage.
    pub fn rk4_step_with_sensitivities(
        &self,
        x: &StateVec,
        w: &DVector<f64>,
    ) -> Result<(StateVec, DMatrix<f64>, DMatrix<f64>), ModelError> {
        check_len("state", x.len(), self.model.n_x)?;
        check_len("control", w.len(), self.model.n_w())?;
        let n_x = self.model.n_x;
        let n_w = self.model.n_w();
        let f = &self.model.field;
        let h = self.substep();
        let mut x = x.clone();
        let mut sx = DMatrix::<f64>::identity(n_x, n_x);
        let mut sw = DMatrix::<f64>::zeros(n_x, n_w);
        for s in 0..self.steps_per_sample {
            // Stage derivatives with respect to the substep's start state and w.
            let k1 = f.eval(&x, w)?;
            let (a1, b1) = f.jacobians(&x, w)?;
            let dk1x = a1.clone();
            let dk1w = b1;

            let x2 = &x + &k1 * (0.5 * h);
            let k2 = f.eval(&x2, w)?;
            let (a2, b2) = f.jacobians(&x2, w)?;
            let dk2x = &a2 * (DMatrix::identity(n_x, n_x) + &dk1x * (0.5 * h));
            let dk2w = &a2 * &dk1w * (0.5 * h) + b2;

            let x3 = &x + &k2 * (0.5 * h);
            let k3 = f.eval(&x3, w)?;
            let (a3, b3) = f.jacobians(&x3, w)?;
            let dk3x = &a3 * (DMatrix::identity(n_x, n_x) + &dk2x * (0.5 * h));
            let dk3w = &a3 * &dk2w * (0.5 * h) + b3;

            let x4 = &x + &k3 * h;
            let k4 = f.eval(&x4, w)?;
            let (a4, b4) = f.jacobians(&x4, w)?;
            let dk4x = &a4 * (DMatrix::identity(n_x, n_x) + &dk3x * h);
            let dk4w = &a4 * &dk3w * h + b4;

            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite { substep: s });
            }
            let step_x = DMatrix::identity(n_x, n_x) + (dk1x + dk2x * 2.0 + dk3x * 2.0 + dk4x) * (h / 6.0);
            let step_w = (dk1w + dk2w * 2.0 + dk3w * 2.0 + dk4w) * (h / 6.0);
            sw = &step_x * sw + step_w;
            sx = step_x * sx;
        }
        Ok((x, sx, sw))
    }
}
