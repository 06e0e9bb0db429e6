//! Enumerable trajectory spaces, prompts, binary verifier rewards and the
//! fixed affine reward transform.
//!
//! A trajectory is a sequence of at most `max_len` symbols drawn from the
//! tokens `0..V` plus a STOP symbol (column index `V`). It ends when STOP is
//! emitted or when `max_len` tokens have been emitted. Every prefix of
//! length `< max_len` is a decision point with `V + 1` choices.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ENUMERATION_CAP: u64 = 2_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpace {
    alphabet_size: usize,
    max_len: usize,
}

impl TrajectorySpace {
    pub fn new(alphabet_size: usize, max_len: usize) -> Result<Self> {
        if alphabet_size == 0 {
            return Err(Error::InvalidSpace("alphabet_size must be >= 1".into()));
        }
        if max_len == 0 {
            return Err(Error::InvalidSpace("max_len must be >= 1".into()));
        }
        if alphabet_size > u32::MAX as usize - 1 {
            return Err(Error::InvalidSpace("alphabet_size too large".into()));
        }
        Ok(Self {
            alphabet_size,
            max_len,
        })
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Tokens plus STOP.
    pub fn num_symbols(&self) -> usize {
        self.alphabet_size + 1
    }

    pub fn stop_symbol(&self) -> usize {
        self.alphabet_size
    }

    fn geometric_sum(&self, terms: usize) -> Option<u128> {
        let v = self.alphabet_size as u128;
        let mut total: u128 = 0;
        let mut pow: u128 = 1;
        for k in 0..terms {
            total = total.checked_add(pow)?;
            if k + 1 < terms {
                pow = pow.checked_mul(v)?;
            }
        }
        Some(total)
    }

    /// Closed-form trajectory count, `sum_{L=0}^{T} V^L`. Saturates at `u128::MAX`.
    pub fn count(&self) -> u128 {
        self.geometric_sum(self.max_len + 1).unwrap_or(u128::MAX)
    }

    /// Number of decision prefixes (policy table rows), `sum_{L<T} V^L`.
    pub fn num_rows(&self) -> usize {
        self.geometric_sum(self.max_len)
            .and_then(|n| usize::try_from(n).ok())
            .expect("row count checked by enumeration cap")
    }

    pub fn check_cap(&self, cap: u64) -> Result<()> {
        let count = self.count();
        if count > cap as u128 {
            return Err(Error::EnumerationTooLarge { count, cap });
        }
        Ok(())
    }

    /// Row index of a decision prefix.
    pub fn row_of(&self, prefix: &[u32]) -> usize {
        debug_assert!(prefix.len() < self.max_len);
        let v = self.alphabet_size;
        let offset: usize = (0..prefix.len()).map(|k| v.pow(k as u32)).sum();
        let within = prefix
            .iter()
            .fold(0usize, |acc, &t| acc * v + t as usize);
        offset + within
    }

    /// Inverse of [`row_of`](Self::row_of).
    pub fn prefix_of_row(&self, mut row: usize) -> Vec<u32> {
        let v = self.alphabet_size;
        let mut len = 0usize;
        loop {
            let width = v.pow(len as u32);
            if row < width {
                break;
            }
            row -= width;
            len += 1;
        }
        let mut prefix = vec![0u32; len];
        for slot in prefix.iter_mut().rev() {
            *slot = (row % v) as u32;
            row /= v;
        }
        prefix
    }

    pub fn validate(&self, o: &Trajectory) -> Result<()> {
        if let Some(&t) = o.tokens.iter().find(|&&t| t as usize >= self.alphabet_size) {
            return Err(Error::InvalidTrajectory(format!(
                "{o}: token {t} outside alphabet of size {}",
                self.alphabet_size
            )));
        }
        let ok = if o.stopped {
            o.tokens.len() < self.max_len
        } else {
            o.tokens.len() == self.max_len
        };
        if !ok {
            return Err(Error::InvalidTrajectory(format!(
                "{o}: incomplete or overlong for max_len {}",
                self.max_len
            )));
        }
        Ok(())
    }

    /// Number of complete trajectories below a prefix of length `depth`.
    fn subtree_size(&self, depth: usize) -> usize {
        (0..=self.max_len - depth)
            .map(|k| self.alphabet_size.pow(k as u32))
            .sum()
    }

    /// Position of a valid trajectory in lexicographic enumeration order.
    pub fn index_of(&self, o: &Trajectory) -> usize {
        let mut idx = 0usize;
        for (depth, &t) in o.tokens.iter().enumerate() {
            // STOP sorts before every token at each decision point.
            idx += 1 + t as usize * self.subtree_size(depth + 1);
        }
        idx
    }

    pub fn enumerate(&self) -> Result<Enumeration> {
        self.enumerate_with_cap(DEFAULT_ENUMERATION_CAP)
    }

    /// Lexicographic, duplicate-free enumeration. Refuses spaces above `cap`.
    pub fn enumerate_with_cap(&self, cap: u64) -> Result<Enumeration> {
        self.check_cap(cap)?;
        let count = self.count() as usize;
        let mut trajectories = Vec::with_capacity(count);
        let mut step_offsets = Vec::with_capacity(count + 1);
        let mut steps = Vec::new();
        step_offsets.push(0);
        let mut prefix = Vec::with_capacity(self.max_len);
        self.walk(&mut prefix, &mut trajectories, &mut step_offsets, &mut steps);
        debug_assert_eq!(trajectories.len(), count);
        Ok(Enumeration {
            space: *self,
            trajectories,
            step_offsets,
            steps,
        })
    }

    fn walk(
        &self,
        prefix: &mut Vec<u32>,
        out: &mut Vec<Trajectory>,
        offsets: &mut Vec<usize>,
        steps: &mut Vec<Step>,
    ) {
        let push = |o: Trajectory, out: &mut Vec<Trajectory>, offsets: &mut Vec<usize>, steps: &mut Vec<Step>| {
            steps.extend(self.steps_of(&o));
            offsets.push(steps.len());
            out.push(o);
        };
        if prefix.len() == self.max_len {
            push(Trajectory::new(prefix.clone(), false), out, offsets, steps);
            return;
        }
        push(Trajectory::new(prefix.clone(), true), out, offsets, steps);
        for t in 0..self.alphabet_size as u32 {
            prefix.push(t);
            self.walk(prefix, out, offsets, steps);
            prefix.pop();
        }
    }

    /// Decision points visited by a trajectory, in order.
    pub fn steps_of(&self, o: &Trajectory) -> Vec<Step> {
        let mut out = Vec::with_capacity(o.tokens.len() + 1);
        let v = self.alphabet_size;
        let mut offset = 0usize;
        let mut within = 0usize;
        let mut width = 1usize;
        for (depth, &t) in o.tokens.iter().enumerate() {
            out.push(Step {
                row: (offset + within) as u32,
                symbol: t,
            });
            offset += width;
            width *= v;
            within = within * v + t as usize;
            debug_assert!(depth < self.max_len);
        }
        if o.stopped {
            out.push(Step {
                row: (offset + within) as u32,
                symbol: self.stop_symbol() as u32,
            });
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Step {
    pub row: u32,
    pub symbol: u32,
}

/// A complete trajectory: emitted tokens and whether it ended with STOP.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Trajectory {
    tokens: Vec<u32>,
    stopped: bool,
}

impl Trajectory {
    pub fn new(tokens: Vec<u32>, stopped: bool) -> Self {
        Self { tokens, stopped }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn stopped(&self) -> bool {
        self.stopped
    }

    /// Symbol sequence with STOP mapped below every token.
    fn sort_key(&self) -> impl Iterator<Item = u64> + '_ {
        self.tokens
            .iter()
            .map(|&t| t as u64 + 1)
            .chain(self.stopped.then_some(0))
    }
}

impl Ord for Trajectory {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sort_key().cmp(other.sort_key())
    }
}

impl PartialOrd for Trajectory {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for t in &self.tokens {
            if !first {
                f.write_str("-")?;
            }
            write!(f, "{t}")?;
            first = false;
        }
        if self.stopped {
            if !first {
                f.write_str("-")?;
            }
            f.write_str("S")?;
        }
        Ok(())
    }
}

impl FromStr for Trajectory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::InvalidTrajectory("empty trajectory string".into()));
        }
        let parts: Vec<&str> = s.split('-').collect();
        let mut tokens = Vec::with_capacity(parts.len());
        let mut stopped = false;
        for (i, p) in parts.iter().enumerate() {
            if *p == "S" {
                if i + 1 != parts.len() {
                    return Err(Error::InvalidTrajectory(format!("{s}: STOP before end")));
                }
                stopped = true;
            } else {
                let t: u32 = p
                    .parse()
                    .map_err(|_| Error::InvalidTrajectory(format!("{s}: bad symbol {p:?}")))?;
                tokens.push(t);
            }
        }
        Ok(Trajectory { tokens, stopped })
    }
}

/// Every trajectory of a space in lexicographic order, with the decision
/// points each one visits.
#[derive(Clone, Debug)]
pub struct Enumeration {
    space: TrajectorySpace,
    trajectories: Vec<Trajectory>,
    step_offsets: Vec<usize>,
    steps: Vec<Step>,
}

impl Enumeration {
    pub fn space(&self) -> &TrajectorySpace {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn get(&self, i: usize) -> &Trajectory {
        &self.trajectories[i]
    }

    pub fn steps(&self, i: usize) -> &[Step] {
        &self.steps[self.step_offsets[i]..self.step_offsets[i + 1]]
    }

    pub fn index_of(&self, o: &Trajectory) -> Result<usize> {
        self.space.validate(o)?;
        Ok(self.space.index_of(o))
    }
}

// ---------------------------------------------------------------------------
// Rewards

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RewardSpec {
    /// Reward 1 exactly on the listed trajectories.
    ExplicitSet { trajectories: Vec<String> },
    /// Reward 1 on a pseudo-random subset of expected density `density`.
    SeededHashDensity { density: f64, seed: u64 },
    /// Reward 1 on trajectories matching any region pattern.
    ///
    /// Patterns are hyphen-joined elements: a token index, `*` (any token),
    /// or `S` (STOP, last only). A trailing `..` matches any completion.
    MultiModalRegions { regions: Vec<String> },
}

#[derive(Clone, Debug, PartialEq)]
enum PatternElem {
    Token(u32),
    AnyToken,
    Stop,
}

#[derive(Clone, Debug, PartialEq)]
struct Region {
    elems: Vec<PatternElem>,
    open_tail: bool,
}

impl Region {
    fn parse(s: &str, space: &TrajectorySpace) -> Result<Self> {
        let mut parts: Vec<&str> = s.trim().split('-').collect();
        let open_tail = parts.last() == Some(&"..");
        if open_tail {
            parts.pop();
        }
        let mut elems = Vec::with_capacity(parts.len());
        for (i, p) in parts.iter().enumerate() {
            let e = match *p {
                "*" => PatternElem::AnyToken,
                "S" if i + 1 == parts.len() && !open_tail => PatternElem::Stop,
                "" if parts.len() == 1 && open_tail => continue,
                _ => {
                    let t: u32 = p
                        .parse()
                        .map_err(|_| Error::Config(format!("region {s:?}: bad element {p:?}")))?;
                    if t as usize >= space.alphabet_size() {
                        return Err(Error::Config(format!("region {s:?}: token {t} outside alphabet")));
                    }
                    PatternElem::Token(t)
                }
            };
            elems.push(e);
        }
        Ok(Region { elems, open_tail })
    }

    fn matches(&self, o: &Trajectory) -> bool {
        let symbols: Vec<Option<u32>> = o
            .tokens
            .iter()
            .map(|&t| Some(t))
            .chain(o.stopped.then_some(None))
            .collect();
        if self.open_tail {
            if symbols.len() < self.elems.len() {
                return false;
            }
        } else if symbols.len() != self.elems.len() {
            return false;
        }
        self.elems.iter().zip(&symbols).all(|(e, s)| match (e, s) {
            (PatternElem::Token(t), Some(x)) => t == x,
            (PatternElem::AnyToken, Some(_)) => true,
            (PatternElem::Stop, None) => true,
            _ => false,
        })
    }
}

/// A reward spec validated against a space.
#[derive(Clone, Debug)]
pub struct CompiledReward {
    inner: Compiled,
}

#[derive(Clone, Debug)]
enum Compiled {
    Explicit(std::collections::HashSet<Trajectory>),
    Hash { density: f64, seed: u64 },
    Regions(Vec<Region>),
}

impl RewardSpec {
    pub fn compile(&self, space: &TrajectorySpace) -> Result<CompiledReward> {
        let inner = match self {
            RewardSpec::ExplicitSet { trajectories } => {
                let mut set = std::collections::HashSet::new();
                for s in trajectories {
                    let o: Trajectory = s
                        .parse()
                        .map_err(|e| Error::Config(format!("explicit-set entry {s:?}: {e}")))?;
                    space
                        .validate(&o)
                        .map_err(|e| Error::Config(format!("explicit-set entry {s:?}: {e}")))?;
                    set.insert(o);
                }
                Compiled::Explicit(set)
            }
            RewardSpec::SeededHashDensity { density, seed } => {
                if !(*density > 0.0 && *density < 1.0) {
                    return Err(Error::Config(format!(
                        "seeded-hash-density requires density in (0,1), got {density}"
                    )));
                }
                Compiled::Hash {
                    density: *density,
                    seed: *seed,
                }
            }
            RewardSpec::MultiModalRegions { regions } => {
                if regions.is_empty() {
                    return Err(Error::Config("multi-modal-regions needs at least one region".into()));
                }
                Compiled::Regions(
                    regions
                        .iter()
                        .map(|r| Region::parse(r, space))
                        .collect::<Result<_>>()?,
                )
            }
        };
        Ok(CompiledReward { inner })
    }
}

impl CompiledReward {
    /// Binary verifier reward of a complete trajectory.
    pub fn reward(&self, o: &Trajectory) -> u8 {
        let hit = match &self.inner {
            Compiled::Explicit(set) => set.contains(o),
            Compiled::Hash { density, seed } => hash_unit(*seed, o) < *density,
            Compiled::Regions(regions) => regions.iter().any(|r| r.matches(o)),
        };
        hit as u8
    }
}

/// Convenience wrapper: compile and evaluate in one call.
pub fn reward(spec: &RewardSpec, space: &TrajectorySpace, o: &Trajectory) -> Result<u8> {
    space.validate(o)?;
    Ok(spec.compile(space)?.reward(o))
}

fn hash_unit(seed: u64, o: &Trajectory) -> f64 {
    // FNV-1a over the seed and the canonical symbol sequence, then a
    // splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for b in seed.to_le_bytes() {
        eat(b);
    }
    for &t in &o.tokens {
        for b in (t + 1).to_le_bytes() {
            eat(b);
        }
    }
    eat(o.stopped as u8);
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

// ---------------------------------------------------------------------------
// Prompts and reward transforms

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prompt {
    pub id: String,
    pub features: Vec<f64>,
    #[serde(rename = "reward")]
    pub reward_spec_ref: String,
    #[serde(default = "one")]
    pub affine_a: f64,
    #[serde(default)]
    pub affine_b: f64,
}

fn one() -> f64 {
    1.0
}

impl Prompt {
    pub fn new(
        id: impl Into<String>,
        features: Vec<f64>,
        reward_spec_ref: impl Into<String>,
        affine_a: f64,
        affine_b: f64,
    ) -> Result<Self> {
        let p = Self {
            id: id.into(),
            features,
            reward_spec_ref: reward_spec_ref.into(),
            affine_a,
            affine_b,
        };
        p.validate(None)?;
        Ok(p)
    }

    pub fn validate(&self, feature_dim: Option<usize>) -> Result<()> {
        if !(self.affine_a > 0.0 && self.affine_a.is_finite()) {
            return Err(Error::Config(format!(
                "prompt {}: affine_a must be positive, got {}",
                self.id, self.affine_a
            )));
        }
        if !self.affine_b.is_finite() {
            return Err(Error::Config(format!("prompt {}: affine_b not finite", self.id)));
        }
        if let Some(d) = feature_dim {
            if self.features.len() != d {
                return Err(Error::Config(format!(
                    "prompt {}: {} features, expected {d}",
                    self.id,
                    self.features.len()
                )));
            }
        }
        Ok(())
    }
}

/// `a_q * r + b_q`.
pub fn reward_transform(q: &Prompt, r: f64) -> f64 {
    q.affine_a * r + q.affine_b
}

pub const DEFAULT_EPS_FLOOR: f64 = 1e-6;

/// Group-normalized rewards `(r_i - mean) / max(std, eps_floor)` with the
/// population standard deviation. A group with exactly zero spread yields
/// all-zero advantages.
pub fn group_normalize(rewards: &[f64], eps_floor: f64) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::InvalidGroup(format!("group of size {g}; need at least 2")));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(vec![0.0; g]);
    }
    let denom = std.max(eps_floor);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

// ---------------------------------------------------------------------------
// Instances

/// One prompt bound to its enumerated space and per-trajectory rewards.
#[derive(Clone, Debug)]
pub struct Instance {
    prompt: Prompt,
    enumeration: Arc<Enumeration>,
    rewards: Vec<f64>,
    tilde: Vec<f64>,
}

impl Instance {
    pub fn new(prompt: Prompt, spec: &RewardSpec, enumeration: Arc<Enumeration>) -> Result<Self> {
        prompt.validate(None)?;
        let compiled = spec.compile(enumeration.space())?;
        let rewards: Vec<f64> = enumeration
            .trajectories()
            .iter()
            .map(|o| compiled.reward(o) as f64)
            .collect();
        let tilde = rewards.iter().map(|&r| reward_transform(&prompt, r)).collect();
        Ok(Self {
            prompt,
            enumeration,
            rewards,
            tilde,
        })
    }

    pub fn prompt(&self) -> &Prompt {
        &self.prompt
    }

    pub fn id(&self) -> &str {
        &self.prompt.id
    }

    pub fn space(&self) -> &TrajectorySpace {
        self.enumeration.space()
    }

    pub fn enumeration(&self) -> &Enumeration {
        &self.enumeration
    }

    pub fn shared_enumeration(&self) -> Arc<Enumeration> {
        Arc::clone(&self.enumeration)
    }

    /// Binary verifier rewards in enumeration order.
    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// Transformed rewards `a_q r + b_q` in enumeration order.
    pub fn tilde_rewards(&self) -> &[f64] {
        &self.tilde
    }

    pub fn correct_indices(&self) -> Vec<usize> {
        (0..self.rewards.len()).filter(|&i| self.rewards[i] == 1.0).collect()
    }

    /// Same instance with a different affine transform.
    pub fn with_affine(&self, a: f64, b: f64) -> Result<Self> {
        let mut prompt = self.prompt.clone();
        prompt.affine_a = a;
        prompt.affine_b = b;
        prompt.validate(None)?;
        let tilde = self.rewards.iter().map(|&r| reward_transform(&prompt, r)).collect();
        Ok(Self {
            prompt,
            enumeration: Arc::clone(&self.enumeration),
            rewards: self.rewards.clone(),
            tilde,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_count(v: usize, t: usize, depth: usize) -> u128 {
        // one STOP completion at this node, or a truncated leaf
        if depth == t {
            return 1;
        }
        1 + (0..v).map(|_| brute_count(v, t, depth + 1)).sum::<u128>()
    }

    #[test]
    fn degenerate_alphabet_has_two_trajectories() {
        let s = TrajectorySpace::new(1, 1).unwrap();
        let e = s.enumerate().unwrap();
        let names: Vec<String> = e.trajectories().iter().map(|o| o.to_string()).collect();
        assert_eq!(names, vec!["S", "0"]);
        assert_eq!(s.count(), 2);
    }

    #[test]
    fn count_matches_recursive_oracle() {
        for v in 1..=4 {
            for t in 1..=5 {
                let s = TrajectorySpace::new(v, t).unwrap();
                let expect = brute_count(v, t, 0);
                assert_eq!(s.count(), expect, "V={v} T={t}");
                assert_eq!(s.enumerate().unwrap().len() as u128, expect);
            }
        }
        // V=2, T=2: S, 0-S, 0-0, 0-1, 1-S, 1-0, 1-1
        assert_eq!(TrajectorySpace::new(2, 2).unwrap().count(), 7);
    }

    #[test]
    fn enumeration_sorted_unique_complete_and_indexed() {
        let s = TrajectorySpace::new(3, 3).unwrap();
        let e = s.enumerate().unwrap();
        for w in e.trajectories().windows(2) {
            assert!(w[0] < w[1], "{} !< {}", w[0], w[1]);
        }
        for (i, o) in e.trajectories().iter().enumerate() {
            s.validate(o).unwrap();
            assert_eq!(s.index_of(o), i);
            let steps = s.steps_of(o);
            assert_eq!(steps, e.steps(i));
        }
    }

    #[test]
    fn enumeration_cap_refuses() {
        let s = TrajectorySpace::new(10, 8).unwrap();
        assert!(matches!(
            s.enumerate(),
            Err(Error::EnumerationTooLarge { .. })
        ));
        let small = TrajectorySpace::new(2, 2).unwrap();
        assert!(small.enumerate_with_cap(6).is_err());
        assert!(small.enumerate_with_cap(7).is_ok());
    }

    #[test]
    fn rows_roundtrip() {
        let s = TrajectorySpace::new(3, 4).unwrap();
        for row in 0..s.num_rows() {
            let p = s.prefix_of_row(row);
            assert_eq!(s.row_of(&p), row);
        }
    }

    #[test]
    fn trajectory_strings() {
        let o: Trajectory = "0-2-1-S".parse().unwrap();
        assert_eq!(o.tokens(), &[0, 2, 1]);
        assert!(o.stopped());
        assert_eq!(o.to_string(), "0-2-1-S");
        assert_eq!("S".parse::<Trajectory>().unwrap().to_string(), "S");
        assert!("S-1".parse::<Trajectory>().is_err());
        assert!("x".parse::<Trajectory>().is_err());
        let s = TrajectorySpace::new(3, 3).unwrap();
        assert!(s.validate(&"0-1".parse().unwrap()).is_err());
        assert!(s.validate(&"0-1-2-S".parse().unwrap()).is_err());
        assert!(s.validate(&"0-5-S".parse().unwrap()).is_err());
    }

    #[test]
    fn explicit_set_membership() {
        let s = TrajectorySpace::new(2, 2).unwrap();
        let spec = RewardSpec::ExplicitSet {
            trajectories: vec!["0-1".into(), "S".into()],
        };
        assert_eq!(reward(&spec, &s, &"0-1".parse().unwrap()).unwrap(), 1);
        assert_eq!(reward(&spec, &s, &"S".parse().unwrap()).unwrap(), 1);
        assert_eq!(reward(&spec, &s, &"1-1".parse().unwrap()).unwrap(), 0);
        let bad = RewardSpec::ExplicitSet {
            trajectories: vec!["0-1-1".into()],
        };
        assert!(matches!(bad.compile(&s), Err(Error::Config(_))));
    }

    #[test]
    fn hash_density_over_small_space() {
        let s = TrajectorySpace::new(2, 4).unwrap();
        let e = s.enumerate().unwrap();
        let rho = 0.25;
        let r = RewardSpec::SeededHashDensity { density: rho, seed: 9 }
            .compile(&s)
            .unwrap();
        let n = e.len() as f64;
        let hits = e.trajectories().iter().map(|o| r.reward(o) as f64).sum::<f64>();
        let band = 4.0 * (rho * (1.0 - rho) / n).sqrt();
        assert!((hits / n - rho).abs() <= band);
        // determinism
        for o in e.trajectories() {
            assert_eq!(r.reward(o), r.reward(o));
        }
    }

    #[test]
    fn regions_match_patterns() {
        let s = TrajectorySpace::new(3, 3).unwrap();
        let r = RewardSpec::MultiModalRegions {
            regions: vec!["0-S".into(), "1-*-..".into(), "2-2-S".into()],
        }
        .compile(&s)
        .unwrap();
        let hit = |x: &str| r.reward(&x.parse().unwrap());
        assert_eq!(hit("0-S"), 1);
        assert_eq!(hit("0-0-S"), 0);
        assert_eq!(hit("1-S"), 0);
        assert_eq!(hit("1-0-S"), 1);
        assert_eq!(hit("1-2-2"), 1);
        assert_eq!(hit("2-2-S"), 1);
        assert_eq!(hit("2-2-1"), 0);
        assert!(RewardSpec::MultiModalRegions { regions: vec!["7".into()] }
            .compile(&s)
            .is_err());
    }

    #[test]
    fn affine_transform() {
        let q = Prompt::new("q", vec![], "r", 1.0, 0.0).unwrap();
        assert_eq!(reward_transform(&q, 1.0), 1.0);
        let q = Prompt::new("q", vec![], "r", 2.0, -1.0).unwrap();
        assert_eq!(reward_transform(&q, 0.0), -1.0);
        assert_eq!(
            reward_transform(&q, 1.0) - reward_transform(&q, 0.0),
            q.affine_a
        );
        let q = Prompt::new("q", vec![], "r", 1.0, 0.0).unwrap();
        assert_eq!(reward_transform(&q, 2f64.ln()), 2f64.ln());
        assert!(Prompt::new("q", vec![], "r", 0.0, 0.0).is_err());
    }

    #[test]
    fn group_normalize_cases() {
        assert_eq!(
            group_normalize(&[1.0, 1.0, 0.0, 0.0], DEFAULT_EPS_FLOOR).unwrap(),
            vec![1.0, 1.0, -1.0, -1.0]
        );
        assert_eq!(
            group_normalize(&[1.0; 4], DEFAULT_EPS_FLOOR).unwrap(),
            vec![0.0; 4]
        );
        let got = group_normalize(&[1.0, 0.0, 0.0, 0.0], DEFAULT_EPS_FLOOR).unwrap();
        let s = (3.0f64 / 16.0).sqrt();
        let expect = [0.75 / s, -0.25 / s, -0.25 / s, -0.25 / s];
        for (g, e) in got.iter().zip(expect) {
            assert!((g - e).abs() < 1e-14);
        }
        assert!(matches!(
            group_normalize(&[1.0], DEFAULT_EPS_FLOOR),
            Err(Error::InvalidGroup(_))
        ));
    }

    #[test]
    fn unknown_reward_kind_is_config_error() {
        let err = toml::from_str::<RewardSpec>("kind = \"oracle-llm\"").unwrap_err();
        assert!(err.to_string().contains("oracle-llm"));
    }
}
