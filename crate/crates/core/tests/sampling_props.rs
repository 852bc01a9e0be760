mod common;

use barrier_synth::boundary::{auto_epsilon, extract_boundary};
use barrier_synth::qp::min_zdot_residual;
use barrier_synth::sampler::{batch_rng, classify, draw_batch, ExtraFeasible, SampleClass};
use barrier_synth::system::eval_zdot;
use common::{di, input_box, samples, state_box};
use proptest::prelude::*;
use rand::seq::SliceRandom;

#[test]
fn merge_adds_counts_and_brackets_jaccard() {
    let a = samples(2187, 11);
    let b = samples(6561, 12);
    let m = a.merge(&b).unwrap();
    assert_eq!(m.tracker.n_total, a.tracker.n_total + b.tracker.n_total);
    assert_eq!(m.tracker.n_feasible, a.tracker.n_feasible + b.tracker.n_feasible);
    let (lo, hi) = if a.jaccard() < b.jaccard() {
        (a.jaccard(), b.jaccard())
    } else {
        (b.jaccard(), a.jaccard())
    };
    assert!(m.jaccard() >= lo && m.jaccard() <= hi);
}

#[test]
fn recorded_history_respects_increment_bound() {
    for seed in 0..4 {
        let s = samples(59049, seed);
        assert!(s.tracker.increment_bound_holds(), "seed {seed}");
        for w in s.tracker.history.windows(2) {
            let dn = (w[1].n - w[0].n) as f64;
            assert!((w[1].j - w[0].j).abs() <= dn / w[1].n as f64 + 1e-15);
        }
    }
}

#[test]
fn classification_ignores_batch_order() {
    let sys = di();
    let mut rng = batch_rng(5, 0);
    let states = draw_batch(&state_box(), 2000, &mut rng);
    let forward: Vec<_> = states
        .iter()
        .map(|x| classify(&sys, &input_box(), x, 1e-9, &ExtraFeasible::DriftPositive).unwrap())
        .collect();
    let mut order: Vec<usize> = (0..states.len()).collect();
    order.shuffle(&mut batch_rng(6, 0));
    for i in order {
        let r = classify(&sys, &input_box(), &states[i], 1e-9, &ExtraFeasible::DriftPositive).unwrap();
        assert_eq!(r, forward[i]);
    }
}

#[test]
fn feasible_records_re_verify() {
    let sys = di();
    let s = samples(19683, 3);
    for r in s.feasible() {
        if ExtraFeasible::DriftPositive.admits(&sys, &r.state) {
            continue;
        }
        let (u, _) = min_zdot_residual(&sys, &r.state, &input_box()).unwrap();
        assert!(input_box().contains(&u));
        assert!(eval_zdot(&sys, &r.state, &u).abs() <= s.zero_tol.sqrt() * (1.0 + r.state[1].abs()));
    }
}

#[test]
fn boundary_is_feasible_and_monotone_in_epsilon() {
    let s = samples(19683, 4);
    let eps = auto_epsilon(&s).unwrap();
    let small = extract_boundary(&s, eps, false).unwrap();
    let large = extract_boundary(&s, 2.0 * eps, false).unwrap();
    let feasible: std::collections::HashSet<Vec<u64>> = s
        .feasible()
        .map(|r| r.state.iter().map(|v| v.to_bits()).collect())
        .collect();
    let key = |p: &Vec<f64>| p.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    assert!(small.points.iter().all(|p| feasible.contains(&key(p))));
    let big: std::collections::HashSet<Vec<u64>> = large.points.iter().map(key).collect();
    assert!(small.points.iter().all(|p| big.contains(&key(p))));
    assert!(large.len() >= small.len());
}

/// Distance from `(x, v)` to the analytic frontier, per axis in units of the
/// denormalized epsilon.
fn frontier_distance(p: &[f64], ex: f64, ev: f64) -> f64 {
    let (x, v) = (p[0], p[1]);
    let mut best = f64::INFINITY;
    // Velocity cap for x ≤ −3.
    let xc = x.clamp(-10.0, -3.0);
    best = best.min(((x - xc) / ex).abs().max(((v - 30.0) / ev).abs()));
    // Damped edge x = −0.1·v, 0 < v ≤ 30: scan the segment.
    for i in 0..=600 {
        let vs = 30.0 * i as f64 / 600.0;
        best = best.min(((x + 0.1 * vs) / ex).abs().max(((v - vs) / ev).abs()));
    }
    // Wall x = 0 for v ≤ 0.
    best = best.min((x / ex).abs().max((v.max(0.0) / ev).abs()));
    best
}

#[test]
fn boundary_hugs_the_analytic_frontier() {
    let s = samples(59049, 0);
    let eps = auto_epsilon(&s).unwrap();
    let b = extract_boundary(&s, eps, false).unwrap();
    let ex = b.epsilon_along(&s.bounds, 0);
    let ev = b.epsilon_along(&s.bounds, 1);
    let near = b.points.iter().filter(|p| frontier_distance(p, ex, ev) <= 2.0).count();
    assert!(near as f64 >= 0.95 * b.len() as f64, "{near} of {}", b.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn classes_follow_the_constraint_sign(p in -10.0f64..0.0, v in -40.0f64..40.0) {
        let sys = di();
        let r = classify(&sys, &input_box(), &[p, v], 1e-9, &ExtraFeasible::Never).unwrap();
        let z = sys.hcf().value(&[p, v]);
        if z < 0.0 {
            prop_assert_eq!(r.class, SampleClass::OutsideZ);
        } else {
            prop_assert_ne!(r.class, SampleClass::OutsideZ);
        }
    }
}
