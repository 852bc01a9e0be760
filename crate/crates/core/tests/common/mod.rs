#![allow(dead_code)]

use barrier_synth::sampler::{run_sampling, ExtraFeasible, SampleSet, SamplingConfig};
use barrier_synth::system::make_double_integrator;
use barrier_synth::{BoxSet, CbfCandidate, SystemModel};

pub fn di() -> SystemModel {
    make_double_integrator(0.0, 0.1).unwrap()
}

pub fn input_box() -> BoxSet {
    BoxSet::new(vec![-300.0], vec![300.0]).unwrap()
}

pub fn state_box() -> BoxSet {
    BoxSet::new(vec![-10.0, -40.0], vec![0.0, 40.0]).unwrap()
}

/// Fixed-size sample set: the first checkpoint at or above `n`, no early stop.
pub fn samples(n: usize, seed: u64) -> SampleSet {
    let mut cfg = SamplingConfig::new(state_box());
    cfg.seed = seed;
    cfg.n_max = n;
    cfg.n_min = n;
    cfg.n_first = n.min(cfg.n_first);
    run_sampling(&di(), &input_box(), &cfg, &ExtraFeasible::DriftPositive).unwrap()
}

/// `−x − 𝟙{ẋ>0}·ẋ/3`.
pub fn tilted_single() -> Vec<CbfCandidate> {
    vec![CbfCandidate {
        scale: vec![1.0, 10.0 / 3.0],
        shift: vec![0.0, 0.0],
        offset: 0.0,
    }]
}

/// `z` itself plus the velocity cap `30 − max(ẋ, 0)`.
pub fn constraint_and_cap() -> Vec<CbfCandidate> {
    vec![
        CbfCandidate::identity(2),
        CbfCandidate {
            scale: vec![0.0, 10.0],
            shift: vec![0.0, 0.0],
            offset: 30.0,
        },
    ]
}
