//! Full-prefix tabular softmax policies.
//!
//! Each decision prefix owns its own row of logits over the `V` tokens and
//! STOP, so the class contains every full-support distribution over the
//! trajectory space.

use std::fmt::Write as _;

use crate::env::{Enumeration, Instance, Step, Trajectory, TrajectorySpace};
use crate::error::{Error, Result};
use crate::rng::{uniform, Stream};

/// Logits are clamped to this range before every softmax.
pub const LOGIT_CLAMP: f64 = 40.0;

/// A dense `(prefix row, symbol)` table, used both for logits and gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitTable {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl LogitTable {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn for_space(space: &TrajectorySpace) -> Self {
        Self::zeros(space.num_rows(), space.num_symbols())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &LogitTable, scale: f64) {
        assert_eq!(self.data.len(), other.data.len(), "table shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn dot(&self, other: &LogitTable) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let clamp = |x: f64| x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    let max = logits.iter().map(|&x| clamp(x)).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&x| (clamp(x) - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = clamp(x) - lse;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    space: TrajectorySpace,
    logits: LogitTable,
}

impl TabularPolicy {
    pub fn uniform(space: &TrajectorySpace) -> Self {
        Self {
            space: *space,
            logits: LogitTable::for_space(space),
        }
    }

    pub fn from_logits(space: &TrajectorySpace, logits: LogitTable) -> Result<Self> {
        if logits.rows != space.num_rows() || logits.cols != space.num_symbols() {
            return Err(Error::InvalidSpace(format!(
                "logit table {}x{} does not fit space with {} rows and {} symbols",
                logits.rows,
                logits.cols,
                space.num_rows(),
                space.num_symbols()
            )));
        }
        if logits.data.iter().any(|x| x.is_nan()) {
            return Err(Error::InvalidSpace("NaN logit".into()));
        }
        Ok(Self {
            space: *space,
            logits,
        })
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random(space: &TrajectorySpace, scale: f64, rng: &mut Stream) -> Self {
        let mut logits = LogitTable::for_space(space);
        for x in logits.as_mut_slice() {
            *x = scale * (2.0 * uniform(rng) - 1.0);
        }
        Self {
            space: *space,
            logits,
        }
    }

    pub fn space(&self) -> &TrajectorySpace {
        &self.space
    }

    pub fn logits(&self) -> &LogitTable {
        &self.logits
    }

    /// Gradient step on the logits: `logits += step * direction`.
    pub fn apply(&mut self, direction: &LogitTable, step: f64) {
        self.logits.add_scaled(direction, step);
    }

    pub fn row_log_probs(&self, row: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.space.num_symbols()];
        log_softmax_into(self.logits.row(row), &mut out);
        out
    }

    pub fn row_probs(&self, row: usize) -> Vec<f64> {
        self.row_log_probs(row).into_iter().map(f64::exp).collect()
    }

    /// Log-softmax of every row.
    pub fn log_softmax_table(&self) -> LogitTable {
        let mut t = LogitTable::for_space(&self.space);
        for r in 0..t.rows {
            let (src, dst) = (self.logits.row(r), &mut t.data[r * t.cols..(r + 1) * t.cols]);
            log_softmax_into(src, dst);
        }
        t
    }

    pub fn log_prob(&self, o: &Trajectory) -> Result<f64> {
        self.space.validate(o)?;
        Ok(self
            .space
            .steps_of(o)
            .iter()
            .map(|s| self.row_log_probs(s.row as usize)[s.symbol as usize])
            .sum())
    }

    /// Log-probability of every enumerated trajectory.
    pub fn log_probs(&self, e: &Enumeration) -> Vec<f64> {
        debug_assert_eq!(e.space(), &self.space);
        let table = self.log_softmax_table();
        (0..e.len())
            .map(|i| {
                e.steps(i)
                    .iter()
                    .map(|s| table.get(s.row as usize, s.symbol as usize))
                    .sum()
            })
            .collect()
    }

    pub fn probs(&self, e: &Enumeration) -> Vec<f64> {
        self.log_probs(e).into_iter().map(f64::exp).collect()
    }

    fn sample_one(&self, table: &LogitTable, rng: &mut Stream) -> Trajectory {
        let stop = self.space.stop_symbol();
        let mut tokens = Vec::with_capacity(self.space.max_len());
        let mut row = 0usize;
        let v = self.space.alphabet_size();
        let mut offset = 0usize;
        let mut width = 1usize;
        let mut within = 0usize;
        while tokens.len() < self.space.max_len() {
            let u = uniform(rng);
            let lp = table.row(row);
            let mut acc = 0.0;
            let mut choice = stop;
            for (sym, &l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    choice = sym;
                    break;
                }
            }
            if choice == stop {
                return Trajectory::new(tokens, true);
            }
            tokens.push(choice as u32);
            offset += width;
            width *= v;
            within = within * v + choice;
            row = offset + within;
        }
        Trajectory::new(tokens, false)
    }

    /// `n` i.i.d. ancestral samples.
    pub fn sample(&self, rng: &mut Stream, n: usize) -> Vec<Trajectory> {
        let table = self.log_softmax_table();
        (0..n).map(|_| self.sample_one(&table, rng)).collect()
    }

    /// Ancestral samples returned as enumeration indices.
    pub fn sample_indices(&self, rng: &mut Stream, n: usize) -> Vec<usize> {
        let table = self.log_softmax_table();
        (0..n)
            .map(|_| self.space.index_of(&self.sample_one(&table, rng)))
            .collect()
    }

    /// Analytic `grad log pi(o)`: for each visited row, one-hot of the chosen
    /// symbol minus the row's softmax; zero elsewhere.
    pub fn score_gradient(&self, o: &Trajectory) -> Result<LogitTable> {
        self.space.validate(o)?;
        let mut acc = ScoreAccumulator::new(&self.space);
        acc.add(&self.space.steps_of(o), 1.0);
        Ok(acc.finish(self))
    }
}

/// Accumulates `sum_o c(o) * grad log pi(o)` without materializing each
/// per-trajectory gradient: chosen-symbol mass per row is collected and the
/// softmax correction is applied once in [`finish`](Self::finish).
#[derive(Clone, Debug)]
pub struct ScoreAccumulator {
    chosen: LogitTable,
    visits: Vec<f64>,
}

impl ScoreAccumulator {
    pub fn new(space: &TrajectorySpace) -> Self {
        Self {
            chosen: LogitTable::for_space(space),
            visits: vec![0.0; space.num_rows()],
        }
    }

    pub fn add(&mut self, steps: &[Step], coef: f64) {
        for s in steps {
            let (r, c) = (s.row as usize, s.symbol as usize);
            self.chosen.data[r * self.chosen.cols + c] += coef;
            self.visits[r] += coef;
        }
    }

    pub fn finish(self, policy: &TabularPolicy) -> LogitTable {
        let ScoreAccumulator { mut chosen, visits } = self;
        for (r, &b) in visits.iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            let p = policy.row_probs(r);
            for (g, pj) in chosen.row_mut(r).iter_mut().zip(p) {
                *g -= pj * b;
            }
        }
        chosen
    }
}

/// Exact policy proportional to `base(o) * exp(log_tilt(o))`, re-expressed as
/// full-prefix conditionals through subtree log-masses.
pub fn tilt_by(base: &TabularPolicy, e: &Enumeration, log_tilt: &[f64]) -> TabularPolicy {
    assert_eq!(log_tilt.len(), e.len());
    let space = *base.space();
    let log_mass: Vec<f64> = base
        .log_probs(e)
        .iter()
        .zip(log_tilt)
        .map(|(a, b)| a + b)
        .collect();
    let mut edge = LogitTable::for_space(&space);
    edge.as_mut_slice().fill(f64::NEG_INFINITY);
    for (i, &lm) in log_mass.iter().enumerate() {
        for s in e.steps(i) {
            let (r, c) = (s.row as usize, s.symbol as usize);
            let cur = edge.get(r, c);
            edge.set(r, c, log_add(cur, lm));
        }
    }
    for r in 0..edge.rows() {
        let row = edge.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for x in row.iter_mut() {
            *x = if x.is_finite() { *x - max } else { -LOGIT_CLAMP };
        }
    }
    TabularPolicy {
        space,
        logits: edge,
    }
}

/// Tilt a base policy toward the prompt's binary reward: `base * exp(strength * r)`.
pub fn tilt_policy(base: &TabularPolicy, inst: &Instance, strength: f64) -> TabularPolicy {
    let tilt: Vec<f64> = inst.rewards().iter().map(|r| strength * r).collect();
    tilt_by(base, inst.enumeration(), &tilt)
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// # anchorlab policy checkpoint v1
// # alphabet_size=V max_len=T seed=S prompts=P
// prompt_id,prefix,symbol,logit
// <rows: prompts in order, prefix rows in index order, STOP then tokens>

pub const CHECKPOINT_MAGIC: &str = "# anchorlab policy checkpoint v1";

pub fn write_checkpoint(entries: &[(&str, &TabularPolicy)], seed: u64) -> Result<String> {
    let space = match entries.first() {
        Some((_, p)) => *p.space(),
        None => return Err(Error::EmptyInput("policy checkpoint needs at least one prompt")),
    };
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(
        out,
        "# alphabet_size={} max_len={} seed={seed} prompts={}",
        space.alphabet_size(),
        space.max_len(),
        entries.len()
    );
    out.push_str("prompt_id,prefix,symbol,logit\n");
    let stop = space.stop_symbol();
    for (id, policy) in entries {
        if policy.space() != &space {
            return Err(Error::InvalidSpace("checkpoint policies must share one space".into()));
        }
        for r in 0..space.num_rows() {
            let prefix = space
                .prefix_of_row(r)
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join("-");
            let order = std::iter::once(stop).chain(0..stop);
            for c in order {
                let sym = if c == stop { "S".to_string() } else { c.to_string() };
                let _ = writeln!(out, "{id},{prefix},{sym},{}", policy.logits.get(r, c));
            }
        }
    }
    Ok(out)
}

pub struct PolicyCheckpoint {
    pub space: TrajectorySpace,
    pub seed: u64,
    pub policies: Vec<(String, TabularPolicy)>,
}

pub fn read_checkpoint(text: &str) -> Result<PolicyCheckpoint> {
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::Parse("missing policy checkpoint header".into()));
    }
    let dims = lines
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .ok_or_else(|| Error::Parse("missing dimension line".into()))?;
    let mut v = None;
    let mut t = None;
    let mut seed = None;
    for kv in dims.split_whitespace() {
        let (k, val) = kv
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad header field {kv:?}")))?;
        let n: u64 = val
            .parse()
            .map_err(|_| Error::Parse(format!("bad header value {kv:?}")))?;
        match k {
            "alphabet_size" => v = Some(n as usize),
            "max_len" => t = Some(n as usize),
            "seed" => seed = Some(n),
            "prompts" => {}
            _ => return Err(Error::Parse(format!("unknown header field {k:?}"))),
        }
    }
    let space = TrajectorySpace::new(
        v.ok_or_else(|| Error::Parse("alphabet_size missing".into()))?,
        t.ok_or_else(|| Error::Parse("max_len missing".into()))?,
    )?;
    if lines.next() != Some("prompt_id,prefix,symbol,logit") {
        return Err(Error::Parse("missing column header".into()));
    }
    let mut policies: Vec<(String, TabularPolicy)> = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Parse(format!("bad checkpoint row {line:?}")));
        }
        if policies.last().map(|(id, _)| id.as_str()) != Some(f[0]) {
            policies.push((f[0].to_string(), TabularPolicy::uniform(&space)));
        }
        let prefix: Vec<u32> = if f[1].is_empty() {
            Vec::new()
        } else {
            f[1].split('-')
                .map(|s| s.parse().map_err(|_| Error::Parse(format!("bad prefix {:?}", f[1]))))
                .collect::<Result<_>>()?
        };
        if prefix.len() >= space.max_len() || prefix.iter().any(|&x| x as usize >= space.alphabet_size()) {
            return Err(Error::Parse(format!("prefix {:?} outside space", f[1])));
        }
        let col = if f[2] == "S" {
            space.stop_symbol()
        } else {
            let c: usize = f[2].parse().map_err(|_| Error::Parse(format!("bad symbol {:?}", f[2])))?;
            if c >= space.alphabet_size() {
                return Err(Error::Parse(format!("symbol {c} outside alphabet")));
            }
            c
        };
        let logit: f64 = f[3].parse().map_err(|_| Error::Parse(format!("bad logit {:?}", f[3])))?;
        let row = space.row_of(&prefix);
        policies.last_mut().unwrap().1.logits.set(row, col, logit);
    }
    Ok(PolicyCheckpoint {
        space,
        seed: seed.ok_or_else(|| Error::Parse("seed missing".into()))?,
        policies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;

    fn space(v: usize, t: usize) -> TrajectorySpace {
        TrajectorySpace::new(v, t).unwrap()
    }

    #[test]
    fn uniform_binary_log_prob() {
        let s = space(1, 1);
        let p = TabularPolicy::uniform(&s);
        for o in s.enumerate().unwrap().trajectories() {
            assert!((p.log_prob(o).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn near_delta_log_prob() {
        let s = space(2, 2);
        let mut logits = LogitTable::for_space(&s);
        let o: Trajectory = "1-0".parse().unwrap();
        for st in s.steps_of(&o) {
            logits.set(st.row as usize, st.symbol as usize, 30.0);
        }
        let p = TabularPolicy::from_logits(&s, logits).unwrap();
        // two rows, each with 1 - 2e^-30 mass on the chosen symbol
        assert!(p.log_prob(&o).unwrap() > -1e-9);
        let single = {
            let s1 = space(2, 1);
            let mut l = LogitTable::for_space(&s1);
            l.set(0, 0, 30.0);
            TabularPolicy::from_logits(&s1, l).unwrap()
        };
        assert!(single.log_prob(&"0".parse().unwrap()).unwrap() > -1e-9);
    }

    #[test]
    fn normalization_over_enumeration() {
        let s = space(3, 3);
        let e = s.enumerate().unwrap();
        let p = TabularPolicy::random(&s, 3.0, &mut StreamKey::root(5).stream());
        let total: f64 = p.probs(&e).iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        for r in 0..s.num_rows() {
            assert!((p.row_probs(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for (i, o) in e.trajectories().iter().enumerate() {
            assert!((p.log_prob(o).unwrap() - p.log_probs(&e)[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn malformed_trajectory_rejected() {
        let s = space(2, 2);
        let p = TabularPolicy::uniform(&s);
        assert!(matches!(
            p.log_prob(&"0".parse().unwrap()),
            Err(Error::InvalidTrajectory(_))
        ));
    }

    #[test]
    fn sampling_determinism_and_delta() {
        let s = space(3, 3);
        let p = TabularPolicy::random(&s, 1.0, &mut StreamKey::root(1).stream());
        let a = p.sample(&mut StreamKey::root(42).stream(), 8);
        let b = p.sample(&mut StreamKey::root(42).stream(), 8);
        assert_eq!(a, b);

        let mut logits = LogitTable::for_space(&s);
        for r in 0..s.num_rows() {
            logits.set(r, 1, 40.0);
        }
        let delta = TabularPolicy::from_logits(&s, logits).unwrap();
        let draws = delta.sample(&mut StreamKey::root(2).stream(), 50);
        assert!(draws.iter().all(|o| o.to_string() == "1-1-1"));
    }

    #[test]
    fn uniform_binary_sampling_frequency() {
        let s = space(1, 1);
        let p = TabularPolicy::uniform(&s);
        let n = 100_000;
        let idx = p.sample_indices(&mut StreamKey::root(11).stream(), n);
        // index 1 is the emitted-token trajectory "0"
        let freq = idx.iter().filter(|&&i| i == 1).count() as f64 / n as f64;
        assert!((freq - 0.5).abs() <= 4.0 * (0.25 / n as f64).sqrt());
    }

    #[test]
    fn score_gradient_uniform_row() {
        let s = space(1, 1);
        let p = TabularPolicy::uniform(&s);
        let g = p.score_gradient(&"0".parse().unwrap()).unwrap();
        assert_eq!(g.row(0), &[0.5, -0.5]);
    }

    #[test]
    fn score_identity_under_enumeration() {
        let s = space(3, 3);
        let e = s.enumerate().unwrap();
        let p = TabularPolicy::random(&s, 2.0, &mut StreamKey::root(8).stream());
        let probs = p.probs(&e);
        let mut acc = ScoreAccumulator::new(&s);
        for (i, pr) in probs.iter().enumerate() {
            acc.add(e.steps(i), *pr);
        }
        let g = acc.finish(&p);
        assert!(g.max_abs() < 1e-10, "max |E grad log pi| = {}", g.max_abs());
    }

    #[test]
    fn tilt_identity_and_binary_instance() {
        let s = space(3, 2);
        let e = s.enumerate().unwrap();
        let base = TabularPolicy::random(&s, 1.5, &mut StreamKey::root(3).stream());
        let same = tilt_by(&base, &e, &vec![0.0; e.len()]);
        for r in 0..s.num_rows() {
            for (a, b) in base.row_probs(r).iter().zip(same.row_probs(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        let s1 = space(1, 1);
        let e1 = s1.enumerate().unwrap();
        let uni = TabularPolicy::uniform(&s1);
        // index 1 = "0" carries reward ln 2
        let tilted = tilt_by(&uni, &e1, &[0.0, 2f64.ln()]);
        let probs = tilted.probs(&e1);
        assert!((probs[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((probs[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let s = space(2, 3);
        let a = TabularPolicy::random(&s, 2.0, &mut StreamKey::root(1).stream());
        let b = TabularPolicy::random(&s, 2.0, &mut StreamKey::root(2).stream());
        let text = write_checkpoint(&[("qa", &a), ("qb", &b)], 77).unwrap();
        let ck = read_checkpoint(&text).unwrap();
        assert_eq!(ck.seed, 77);
        assert_eq!(ck.space, s);
        assert_eq!(ck.policies[0].1, a);
        assert_eq!(ck.policies[1].1, b);
        assert_eq!(ck.policies[1].0, "qb");
        let names: Vec<&str> = ck.policies.iter().map(|(n, _)| n.as_str()).collect();
        let again = write_checkpoint(
            &ck.policies.iter().map(|(n, p)| (n.as_str(), p)).collect::<Vec<_>>(),
            77,
        )
        .unwrap();
        assert_eq!(names, ["qa", "qb"]);
        assert_eq!(text, again);
    }
}
