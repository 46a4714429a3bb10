//! Oracles shared by the integration tests.
#![allow(dead_code)]

use minmpc_core::minlp::solve_fixed_integers;
use minmpc_core::model::{DiscreteMap, ModelSpec, StateVec};
use minmpc_core::nlp::SolveOptions;
use minmpc_core::ocp::{build_full_ocp, FullOcp, OcpSpec};
use nalgebra::{DMatrix, DVector};

pub fn fishing_spec(horizon: usize) -> OcpSpec {
    OcpSpec::new(
        DiscreteMap::single_step(ModelSpec::lotka_volterra()),
        horizon,
        DMatrix::identity(2, 2),
        DMatrix::from_element(1, 1, 0.01),
        DVector::from_vec(vec![1.0, 1.0]),
    )
    .unwrap()
}

pub fn satellite_spec(horizon: usize) -> OcpSpec {
    OcpSpec::new(
        DiscreteMap::single_step(ModelSpec::satellite()),
        horizon,
        DMatrix::from_diagonal(&DVector::from_vec(vec![10.0, 1.0, 1.0])),
        DMatrix::identity(2, 2),
        DVector::from_vec(vec![5.0, 0.0, 0.126]),
    )
    .unwrap()
}

pub fn full_ocp(spec: &OcpSpec, x0: &[f64]) -> FullOcp {
    build_full_ocp(spec, &DVector::from_column_slice(x0)).unwrap()
}

/// Minimum over every integer sequence of the fixed-integer problem.
pub fn enumerate_sequences(ocp: &FullOcp) -> f64 {
    let m = ocp.model();
    let slots = ocp.integer_vars().len();
    let sizes: Vec<usize> = (0..slots).map(|i| m.z_domains[i % m.n_z].len()).collect();
    let total: usize = sizes.iter().product();
    let guess = ocp.initial_guess().values;
    let mut best = f64::INFINITY;
    for code in 0..total {
        let mut c = code;
        let z: Vec<f64> = (0..slots)
            .map(|i| {
                let v = m.z_domains[i % m.n_z].values()[c % sizes[i]];
                c /= sizes[i];
                v as f64
            })
            .collect();
        let obj = if m.n_u == 0 {
            rollout_cost(ocp, &z)
        } else {
            solve_fixed_integers(ocp, &z, &guess, &SolveOptions::default())
                .unwrap()
                .map(|(obj, _)| obj)
        };
        if let Some(obj) = obj {
            best = best.min(obj);
        }
    }
    best
}

/// Cost of a fixed integer sequence by forward simulation, `None` if a
/// predicted state leaves its bounds. Only valid when `n_u = 0`.
pub fn rollout_cost(ocp: &FullOcp, z: &[f64]) -> Option<f64> {
    let spec = &ocp.spec;
    let m = ocp.model();
    let quad = |a: &DMatrix<f64>, v: &DVector<f64>| (v.transpose() * a * v)[0];
    let mut x = ocp.x_init.clone();
    let mut cost = 0.0;
    for w in z.chunks(m.n_z) {
        let w = DVector::from_column_slice(w);
        cost += quad(&spec.q, &(&x - &spec.x_ref)) + quad(&spec.r, &(&w - &spec.w_ref));
        x = rk4(m, &x, &w);
        let inside = m
            .state_bounds
            .iter()
            .zip(x.iter())
            .all(|(&(lo, hi), &v)| v >= lo - 1e-8 && v <= hi + 1e-8);
        if !inside {
            return None;
        }
    }
    Some(cost + quad(&spec.qf, &(&x - &spec.x_ref)))
}

/// Sum-up rounding on a contiguous integer range, written out directly:
/// carry the accumulated deficit and round it half up.
pub fn sur_by_hand(relaxed: &[f64], lo: i64, hi: i64) -> Vec<i64> {
    let mut out = Vec::new();
    let mut carry = 0.0;
    for &a in relaxed {
        let target = carry + a;
        let b = ((target + 0.5).floor() as i64).clamp(lo, hi);
        carry = target - b as f64;
        out.push(b);
    }
    out
}

/// Classical RK4 step of the model's vector field, spelled out.
pub fn rk4(model: &ModelSpec, x: &StateVec, w: &DVector<f64>) -> StateVec {
    let h = model.ts;
    let f = |y: &StateVec| model.rhs(y, w).unwrap();
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (h / 2.0)));
    let k3 = f(&(x + &k2 * (h / 2.0)));
    let k4 = f(&(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

pub struct MyopicOracle {
    pub w: DVector<f64>,
    pub objective: f64,
    /// Gap between the best and second-best feasible objective.
    pub margin: f64,
}

/// Exhaustive one-step search for models without continuous inputs.
pub fn myopic_by_enumeration(
    model: &ModelSpec,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
    x_ref: &StateVec,
    x: &StateVec,
) -> Option<MyopicOracle> {
    assert_eq!(model.n_u, 0);
    let mut combos: Vec<Vec<f64>> = vec![vec![]];
    for d in &model.z_domains {
        combos = combos
            .iter()
            .flat_map(|c| d.values().iter().map(move |&v| [c.clone(), vec![v as f64]].concat()))
            .collect();
    }
    let dx = x - x_ref;
    let mut scored: Vec<(f64, DVector<f64>)> = Vec::new();
    for c in combos {
        let w = DVector::from_vec(c);
        let next = rk4(model, x, &w);
        let feasible = model
            .state_bounds
            .iter()
            .zip(next.iter())
            .all(|(&(l, u), &v)| v >= l - 1e-8 && v <= u + 1e-8);
        if !feasible {
            continue;
        }
        let e = &next - x_ref;
        let obj = dx.dot(&(q * &dx)) + w.dot(&(r * &w)) + e.dot(&(p * &e));
        scored.push((obj, w));
    }
    let best = scored.iter().enumerate().min_by(|a, b| a.1 .0.total_cmp(&b.1 .0))?.0;
    let margin = scored
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != best)
        .map(|(_, s)| s.0 - scored[best].0)
        .fold(f64::INFINITY, f64::min);
    Some(MyopicOracle {
        w: scored[best].1.clone(),
        objective: scored[best].0,
        margin,
    })
}

/// Largest relative deviation between the map's sensitivities and central differences.
pub fn sensitivity_error(map: &DiscreteMap, x: &StateVec, w: &DVector<f64>) -> f64 {
    let (_, ax, aw) = map.rk4_step_with_sensitivities(x, w).unwrap();
    let col = |v: &DVector<f64>, i: usize, h: f64| -> DVector<f64> {
        let mut p = v.clone();
        let mut m = v.clone();
        p[i] += h;
        m[i] -= h;
        (map.rk4_step(&p, w).unwrap() - map.rk4_step(&m, w).unwrap()) / (2.0 * h)
    };
    let colw = |i: usize, h: f64| -> DVector<f64> {
        let mut p = w.clone();
        let mut m = w.clone();
        p[i] += h;
        m[i] -= h;
        (map.rk4_step(x, &p).unwrap() - map.rk4_step(x, &m).unwrap()) / (2.0 * h)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let h = 1e-6 * x[i].abs().max(1.0);
        let fd = col(x, i, h);
        let an = ax.column(i).into_owned();
        worst = worst.max((an - &fd).amax() / fd.amax().max(1.0));
    }
    for i in 0..w.len() {
        let h = 1e-6 * w[i].abs().max(1.0);
        let fd = colw(i, h);
        let an = aw.column(i).into_owned();
        worst = worst.max((an - &fd).amax() / fd.amax().max(1.0));
    }
    worst
}
