//! Small reference instances shared by the verification suite and tests.

use std::sync::Arc;

use crate::env::{Instance, Prompt, RewardSpec, TrajectorySpace};
use crate::policy::{tilt_policy, TabularPolicy};
use crate::rng::StreamKey;

pub const COUNTEREXAMPLE_BETA: f64 = 1.0;

/// Two-outcome instance: the space `V = 1, T = 1` holds exactly the
/// trajectories `S` and `0`. The reference is uniform, and `0` carries
/// transformed reward `ln 2` (binary reward 1 with `a_q = ln 2`, `b_q = 0`).
/// At `beta = 1` the tilted target is `(2/3, 1/3)` and `Z = 3/2`.
pub fn binary_counterexample() -> (Instance, TabularPolicy) {
    let space = TrajectorySpace::new(1, 1).expect("valid space");
    let e = Arc::new(space.enumerate().expect("tiny space"));
    let prompt = Prompt::new("binary", vec![], "binary", 2f64.ln(), 0.0).expect("valid prompt");
    let spec = binary_counterexample_reward();
    let inst = Instance::new(prompt, &spec, e).expect("valid instance");
    (inst, TabularPolicy::uniform(&space))
}

pub fn binary_counterexample_reward() -> RewardSpec {
    RewardSpec::ExplicitSet {
        trajectories: vec!["0".into()],
    }
}

/// Seeded instance with a hash-density reward and a random reference.
pub fn random_instance(seed: u64, v: usize, t: usize, density: f64) -> (Instance, TabularPolicy) {
    let space = TrajectorySpace::new(v, t).expect("valid space");
    let e = Arc::new(space.enumerate().expect("small space"));
    let prompt = Prompt::new(format!("r{seed}"), vec![], "h", 1.0, 0.0).expect("valid prompt");
    let spec = RewardSpec::SeededHashDensity { density, seed };
    let inst = Instance::new(prompt, &spec, e).expect("valid instance");
    let pi_ref = TabularPolicy::random(&space, 1.0, &mut StreamKey::root(seed).child("ref").stream());
    (inst, pi_ref)
}

/// Temperature at which [`multimodal_instance`] is trained.
pub const MULTIMODAL_BETA: f64 = 2.0;

/// `V = 3, T = 3` with three disjoint reward regions and a uniform reference.
pub fn multimodal_instance() -> (Instance, TabularPolicy) {
    let space = TrajectorySpace::new(3, 3).expect("valid space");
    let e = Arc::new(space.enumerate().expect("small space"));
    let spec = RewardSpec::MultiModalRegions {
        regions: vec!["0-*-S".into(), "2-1-..".into(), "1-1-1".into()],
    };
    let prompt = Prompt::new("mm", vec![], "mm", 1.0, 0.0).expect("valid prompt");
    let inst = Instance::new(prompt, &spec, e).expect("valid instance");
    (inst, TabularPolicy::uniform(&space))
}

pub const TWO_MODE_BETA: f64 = 2.0;
pub const TWO_MODE_BIAS: f64 = 3.0;

pub fn two_mode_reward() -> RewardSpec {
    RewardSpec::MultiModalRegions {
        regions: vec!["0-S".into(), "1-..".into()],
    }
}

/// Two reward modes over `V = 3, T = 3`: the single trajectory `0-S`, which
/// the reference favours, and the thirteen trajectories starting with `1`.
/// The reference is uniform tilted by `exp(TWO_MODE_BIAS)` toward `0-S`.
pub fn two_mode_instance() -> (Instance, TabularPolicy) {
    let space = TrajectorySpace::new(3, 3).expect("valid space");
    let e = Arc::new(space.enumerate().expect("small space"));
    let prompt = Prompt::new("twomode", vec![], "twomode", 1.0, 0.0).expect("valid prompt");
    let bias_spec = RewardSpec::MultiModalRegions {
        regions: vec!["0-S".into()],
    };
    let bias = Instance::new(prompt.clone(), &bias_spec, e.clone()).expect("valid instance");
    let pi_ref = tilt_policy(&TabularPolicy::uniform(&space), &bias, TWO_MODE_BIAS);
    let inst = Instance::new(prompt, &two_mode_reward(), e).expect("valid instance");
    (inst, pi_ref)
}
