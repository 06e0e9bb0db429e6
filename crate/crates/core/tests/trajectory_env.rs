use std::sync::Arc;

use anchorlab::env::{group_normalize, reward, reward_transform, Instance, Prompt, RewardSpec, Trajectory, TrajectorySpace};
use proptest::prelude::*;

fn closed_form_count(v: u128, t: u32) -> u128 {
    (0..t).map(|l| v.pow(l)).sum::<u128>() + v.pow(t)
}

proptest! {
    #[test]
    fn enumeration_count_matches_closed_form(v in 1usize..5, t in 1usize..6) {
        let space = TrajectorySpace::new(v, t).unwrap();
        let e = space.enumerate().unwrap();
        prop_assert_eq!(e.len() as u128, closed_form_count(v as u128, t as u32));
        prop_assert_eq!(space.count(), closed_form_count(v as u128, t as u32));
    }

    #[test]
    fn group_normalize_standardizes(rewards in prop::collection::vec(-5.0f64..5.0, 2..16)) {
        let out = group_normalize(&rewards, 1e-6).unwrap();
        let n = out.len() as f64;
        let mean = out.iter().sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-12);
        let m = rewards.iter().sum::<f64>() / n;
        let s = (rewards.iter().map(|r| (r - m).powi(2)).sum::<f64>() / n).sqrt();
        if s > 1e-6 {
            let sd = (out.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
            prop_assert!((sd - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reward_transform_is_affine(a in 0.01f64..10.0, b in -10.0f64..10.0) {
        let q = Prompt::new("q", vec![], "r", a, b).unwrap();
        // exact up to the rounding of a + b
        let diff = reward_transform(&q, 1.0) - reward_transform(&q, 0.0);
        prop_assert!((diff - a).abs() <= 2.0 * f64::EPSILON * (a.abs() + b.abs()));
        prop_assert_eq!(reward_transform(&q, 0.0), b);
    }

    #[test]
    fn trajectory_strings_roundtrip(v in 1usize..4, t in 1usize..4, pick in 0usize..1000) {
        let space = TrajectorySpace::new(v, t).unwrap();
        let e = space.enumerate().unwrap();
        let o = e.get(pick % e.len()).clone();
        let back: Trajectory = o.to_string().parse().unwrap();
        prop_assert_eq!(&back, &o);
        prop_assert_eq!(e.index_of(&back).unwrap(), pick % e.len());
    }
}

#[test]
fn group_normalize_examples() {
    assert_eq!(group_normalize(&[1.0, 1.0, 0.0, 0.0], 1e-6).unwrap(), vec![1.0, 1.0, -1.0, -1.0]);
    assert_eq!(group_normalize(&[1.0; 4], 1e-6).unwrap(), vec![0.0; 4]);
    let s = (3.0f64 / 16.0).sqrt();
    let hand: Vec<f64> = [1.0, 0.0, 0.0, 0.0].iter().map(|r| (r - 0.25) / s).collect();
    let got = group_normalize(&[1.0, 0.0, 0.0, 0.0], 1e-6).unwrap();
    for (a, b) in got.iter().zip(&hand) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(group_normalize(&[1.0], 1e-6).is_err());
}

#[test]
fn reward_transform_examples() {
    let id = Prompt::new("q", vec![], "r", 1.0, 0.0).unwrap();
    assert_eq!(reward_transform(&id, 1.0), 1.0);
    let shifted = Prompt::new("q", vec![], "r", 2.0, -1.0).unwrap();
    assert_eq!(reward_transform(&shifted, 0.0), -1.0);
    let binary = Prompt::new("q", vec![], "r", 2f64.ln(), 0.0).unwrap();
    assert_eq!(reward_transform(&binary, 1.0), 2f64.ln());
}

#[test]
fn reward_is_pure() {
    let space = TrajectorySpace::new(3, 3).unwrap();
    let spec = RewardSpec::SeededHashDensity { density: 0.4, seed: 9 };
    let o: Trajectory = "2-0-S".parse().unwrap();
    let first = reward(&spec, &space, &o).unwrap();
    let compiled = spec.compile(&space).unwrap();
    for _ in 0..1_000_000 {
        assert_eq!(compiled.reward(&o), first);
    }
}

#[test]
fn stop_sorts_first_and_encodings_are_hyphen_joined() {
    let space = TrajectorySpace::new(2, 2).unwrap();
    let e = space.enumerate().unwrap();
    let names: Vec<String> = e.trajectories().iter().map(|o| o.to_string()).collect();
    assert_eq!(names, ["S", "0-S", "0-0", "0-1", "1-S", "1-0", "1-1"]);
}

#[test]
fn instance_rewards_follow_spec_and_transform() {
    let space = TrajectorySpace::new(2, 2).unwrap();
    let e = Arc::new(space.enumerate().unwrap());
    let spec = RewardSpec::MultiModalRegions {
        regions: vec!["0-..".into()],
    };
    let q = Prompt::new("q", vec![], "r", 3.0, 0.5).unwrap();
    let inst = Instance::new(q, &spec, e.clone()).unwrap();
    for (i, o) in e.trajectories().iter().enumerate() {
        let hit = o.tokens().first() == Some(&0);
        assert_eq!(inst.rewards()[i], if hit { 1.0 } else { 0.0 });
        assert_eq!(inst.tilde_rewards()[i], if hit { 3.5 } else { 0.5 });
    }
}
