//! Exact accuracy and diversity diagnostics over an enumerated space.
//!
//! Every function takes the policy's probability vector aligned with the
//! instance enumeration, so callers compute `policy.probs(e)` once.

use serde::Serialize;

use crate::env::Instance;
use crate::error::{Error, Result};
use crate::policy::TabularPolicy;

/// `1 - (1 - p)^k` without cancellation for small `p`.
fn hit_prob(p: f64, k: u32) -> f64 {
    let p = p.clamp(0.0, 1.0);
    if p >= 1.0 {
        return if k == 0 { 0.0 } else { 1.0 };
    }
    -(k as f64 * (-p).ln_1p()).exp_m1()
}

fn check_len(probs: &[f64], inst: &Instance) -> Result<()> {
    if probs.len() != inst.enumeration().len() {
        return Err(Error::Contract(format!(
            "probability vector has {} entries, enumeration has {}",
            probs.len(),
            inst.enumeration().len()
        )));
    }
    Ok(())
}

pub fn mass_on_correct(probs: &[f64], inst: &Instance) -> Result<f64> {
    check_len(probs, inst)?;
    let m: f64 = inst
        .rewards()
        .iter()
        .zip(probs)
        .filter(|(r, _)| **r == 1.0)
        .map(|(_, p)| p)
        .sum();
    Ok(m.clamp(0.0, 1.0))
}

pub fn pass_at_k_exact(probs: &[f64], inst: &Instance, k: u32) -> Result<f64> {
    Ok(hit_prob(mass_on_correct(probs, inst)?, k))
}

/// Expected number of distinct reward-1 trajectories among `k` draws.
pub fn distinct_correct_expected(probs: &[f64], inst: &Instance, k: u32) -> Result<f64> {
    check_len(probs, inst)?;
    Ok(inst
        .rewards()
        .iter()
        .zip(probs)
        .filter(|(r, _)| **r == 1.0)
        .map(|(_, &p)| hit_prob(p, k))
        .sum())
}

/// Entropy (nats) of the policy conditioned on the correct set.
pub fn mode_entropy(probs: &[f64], inst: &Instance) -> Result<f64> {
    let mass = mass_on_correct(probs, inst)?;
    if mass <= 0.0 {
        return Err(Error::Contract("policy puts zero mass on the correct set".into()));
    }
    Ok(inst
        .rewards()
        .iter()
        .zip(probs)
        .filter(|(r, p)| **r == 1.0 && **p > 0.0)
        .map(|(_, &p)| {
            let c = p / mass;
            -c * c.ln()
        })
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiversityReport {
    pub prompt_id: String,
    pub k: u32,
    pub pass_at_k: f64,
    pub distinct_correct_expected: f64,
    pub mass_on_correct: f64,
    /// `None` when the policy has no mass on the correct set.
    pub mode_entropy: Option<f64>,
}

impl DiversityReport {
    pub fn from_probs(probs: &[f64], inst: &Instance, k: u32) -> Result<Self> {
        let mass = mass_on_correct(probs, inst)?;
        Ok(Self {
            prompt_id: inst.id().to_string(),
            k,
            pass_at_k: hit_prob(mass, k),
            distinct_correct_expected: distinct_correct_expected(probs, inst, k)?,
            mass_on_correct: mass,
            mode_entropy: if mass > 0.0 {
                Some(mode_entropy(probs, inst)?)
            } else {
                None
            },
        })
    }

    pub fn compute(policy: &TabularPolicy, inst: &Instance, k: u32) -> Result<Self> {
        if policy.space() != inst.space() {
            return Err(Error::Contract("policy and instance spaces differ".into()));
        }
        Self::from_probs(&policy.probs(inst.enumeration()), inst, k)
    }

    pub const CSV_HEADER: &'static str =
        "prompt_id,k,pass_at_k,distinct_correct_expected,mass_on_correct,mode_entropy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.prompt_id,
            self.k,
            self.pass_at_k,
            self.distinct_correct_expected,
            self.mass_on_correct,
            self.mode_entropy.map(|h| h.to_string()).unwrap_or_default()
        )
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::env::{Prompt, RewardSpec, TrajectorySpace};

    fn inst_with(correct: &[&str], v: usize, t: usize) -> Instance {
        let space = TrajectorySpace::new(v, t).unwrap();
        let e = Arc::new(space.enumerate().unwrap());
        let spec = RewardSpec::ExplicitSet {
            trajectories: correct.iter().map(|s| s.to_string()).collect(),
        };
        Instance::new(Prompt::new("m", vec![], "x", 1.0, 0.0).unwrap(), &spec, e).unwrap()
    }

    fn probs_on(inst: &Instance, mass: &[(&str, f64)]) -> Vec<f64> {
        let e = inst.enumeration();
        let mut p = vec![0.0; e.len()];
        for (s, m) in mass {
            p[e.index_of(&s.parse().unwrap()).unwrap()] = *m;
        }
        p
    }

    #[test]
    fn pass_at_k_closed_forms() {
        let inst = inst_with(&["0-S"], 2, 2);
        let p = probs_on(&inst, &[("0-S", 0.5), ("1-S", 0.5)]);
        assert_eq!(pass_at_k_exact(&p, &inst, 1).unwrap(), 0.5);
        assert!((pass_at_k_exact(&p, &inst, 4).unwrap() - 0.9375).abs() < 1e-15);
        let zero = probs_on(&inst, &[("1-S", 1.0)]);
        for k in 1..10 {
            assert_eq!(pass_at_k_exact(&zero, &inst, k).unwrap(), 0.0);
            assert_eq!(distinct_correct_expected(&zero, &inst, k).unwrap(), 0.0);
        }
        assert!(mode_entropy(&zero, &inst).is_err());
        assert!(DiversityReport::from_probs(&zero, &inst, 4).unwrap().mode_entropy.is_none());
    }

    #[test]
    fn distinct_count_cases() {
        let inst = inst_with(&["0-S", "1-S", "0-0", "1-1"], 2, 2);
        let delta = probs_on(&inst, &[("0-S", 1.0)]);
        for k in [1, 2, 8, 64] {
            assert_eq!(distinct_correct_expected(&delta, &inst, k).unwrap(), 1.0);
        }
        let uni = probs_on(&inst, &[("0-S", 0.25), ("1-S", 0.25), ("0-0", 0.25), ("1-1", 0.25)]);
        assert!((distinct_correct_expected(&uni, &inst, 1).unwrap() - 1.0).abs() < 1e-15);
        assert!((mode_entropy(&uni, &inst).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(mode_entropy(&delta, &inst).unwrap(), 0.0);
        // k = 2: each of four items hit with 1 - 0.75^2
        assert!((distinct_correct_expected(&uni, &inst, 2).unwrap() - 4.0 * (1.0 - 0.5625)).abs() < 1e-15);
    }

    #[test]
    fn three_mode_entropy_by_hand() {
        let inst = inst_with(&["0-S", "1-S", "1-1"], 2, 2);
        let p = probs_on(&inst, &[("0-S", 0.25), ("1-S", 0.125), ("1-1", 0.125), ("S", 0.5)]);
        let hand = -(0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((mode_entropy(&p, &inst).unwrap() - hand).abs() < 1e-15);
        assert_eq!(mass_on_correct(&p, &inst).unwrap(), 0.5);
    }
}
