use std::time::Instant;

mod common;

use common::{enumerate_sequences, fishing_spec, full_ocp, satellite_spec};
use minmpc_core::minlp::{branch_and_bound, BnbOptions, MinlpStatus};
use minmpc_core::ocp::FullOcp;

fn fishing(horizon: usize, x0: &[f64]) -> FullOcp {
    full_ocp(&fishing_spec(horizon), x0)
}

fn satellite(horizon: usize, x0: &[f64]) -> FullOcp {
    full_ocp(&satellite_spec(horizon), x0)
}

fn tight() -> BnbOptions {
    BnbOptions {
        abs_gap: 1e-7,
        rel_gap: 0.0,
        ..BnbOptions::default()
    }
}

#[test]
fn fishing_matches_enumeration() {
    for (n, x0) in [
        (2, [1.2, 1.1]),
        (4, [0.8, 1.3]),
        (6, [1.5, 0.9]),
        (8, [1.2, 1.1]),
        (8, [0.7, 0.6]),
    ] {
        let ocp = fishing(n, &x0);
        let t = Instant::now();
        let r = branch_and_bound(&ocp, None, &tight()).unwrap();
        let bt = t.elapsed();
        let e = enumerate_sequences(&ocp);
        println!(
            "fishing N={n} x0={x0:?}: bnb {} ({} nodes, {:?}, nonconvex {}) enum {}",
            r.objective, r.nodes, bt, r.nonconvexity_events, e
        );
        assert_eq!(r.status, MinlpStatus::Optimal);
        assert!((r.objective - e).abs() <= 1e-6);
    }
}

#[test]
fn satellite_matches_enumeration() {
    for (n, x0) in [
        (1, [4.4, 0.0, 0.14]),
        (2, [5.6, 0.0, 0.11]),
        (3, [4.4, 0.0, 0.14]),
        (3, [5.0, 0.1, 0.126]),
    ] {
        let ocp = satellite(n, &x0);
        let t = Instant::now();
        let r = branch_and_bound(&ocp, None, &tight()).unwrap();
        let bt = t.elapsed();
        let e = enumerate_sequences(&ocp);
        println!(
            "satellite N={n} x0={x0:?}: bnb {} ({} nodes, {:?}, nonconvex {}) enum {}",
            r.objective, r.nodes, bt, r.nonconvexity_events, e
        );
        assert_eq!(r.status, MinlpStatus::Optimal);
        assert!((r.objective - e).abs() <= 1e-6);
    }
}
