//! Fixtures shared by the benchmarks.

use barrier_synth::system::make_double_integrator;
use barrier_synth::{BoxSet, CbfCandidate, QpProblem, SystemModel};
use nalgebra::{DMatrix, DVector};

pub fn double_integrator() -> (SystemModel, BoxSet) {
    let sys = make_double_integrator(0.0, 0.1).expect("valid parameters");
    (sys, BoxSet::new(vec![-300.0], vec![300.0]).expect("valid box"))
}

/// The two-piece candidate: the constraint itself plus a velocity cap.
pub fn two_candidates() -> Vec<CbfCandidate> {
    vec![
        CbfCandidate::identity(2),
        CbfCandidate {
            scale: vec![0.0, 10.0],
            shift: vec![0.0, 0.0],
            offset: 30.0,
        },
    ]
}

/// Dense `m`-input problem with three active-ish rows.
pub fn qp(m: usize) -> QpProblem {
    let h = DMatrix::from_fn(m, m, |i, j| if i == j { 2.0 + i as f64 } else { 0.3 });
    let q = DVector::from_fn(m, |i, _| (i as f64 - 1.0) * 1.5);
    let a = DMatrix::from_fn(3, m, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
    let b = DVector::from_fn(3, |i, _| -0.5 + 0.2 * i as f64);
    let bounds = BoxSet::new(vec![-1.0; m], vec![1.0; m]).expect("valid box");
    QpProblem::new(h, q, a, b, bounds).expect("valid problem")
}
