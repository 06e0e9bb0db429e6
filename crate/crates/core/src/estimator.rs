//! Importance-sampled partition-function labels.
//!
//! Weights are `w = (pi_ref / p_T) exp(beta r~)` for samples drawn from the
//! proposal `p_T`. Three aggregators turn a weight list into a label:
//! log-space mean (`LSE`), mean log-weight (`GM`) and the linear-scale mean
//! reported in log space (`LINEAR-LOG`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{group_normalize, Instance, Trajectory, DEFAULT_EPS_FLOOR};
use crate::error::{Error, Result};
use crate::oracle::{exact_weight_stats, log_sum_exp};
use crate::policy::TabularPolicy;
use crate::rng::{sample_without_replacement, uniform, Stream, StreamKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregator {
    #[serde(rename = "LSE")]
    Lse,
    #[serde(rename = "GM")]
    Gm,
    #[serde(rename = "LINEAR-LOG")]
    LinearLog,
}

impl std::fmt::Display for Aggregator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregator::Lse => "LSE",
            Aggregator::Gm => "GM",
            Aggregator::LinearLog => "LINEAR-LOG",
        })
    }
}

/// Per-sample `log pi_ref - log p_T + beta r~`.
pub fn log_weights(
    pi_ref: &TabularPolicy,
    p_t: &TabularPolicy,
    inst: &Instance,
    beta: f64,
    samples: &[Trajectory],
) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|o| {
            let lp = p_t.log_prob(o)?;
            if lp == f64::NEG_INFINITY {
                return Err(Error::SupportViolation {
                    trajectory: o.to_string(),
                    detail: "sample has zero proposal probability".into(),
                });
            }
            let i = inst.enumeration().index_of(o)?;
            Ok(pi_ref.log_prob(o)? - lp + beta * inst.tilde_rewards()[i])
        })
        .collect()
}

/// `logsumexp(log_w) - ln N`.
pub fn estimate_lse(log_w: &[f64]) -> Result<f64> {
    if log_w.is_empty() {
        return Err(Error::EmptyInput("log-weight list"));
    }
    Ok(log_sum_exp(log_w) - (log_w.len() as f64).ln())
}

/// Mean log-weight. Any `-inf` entry makes the estimate `-inf`.
pub fn estimate_gm(log_w: &[f64]) -> Result<f64> {
    if log_w.is_empty() {
        return Err(Error::EmptyInput("log-weight list"));
    }
    if log_w.iter().any(|&x| x == f64::NEG_INFINITY) {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(log_w.iter().sum::<f64>() / log_w.len() as f64)
}

/// Linear-scale mean weight, `exp(LSE + ln N) / N`.
pub fn estimate_linear(log_w: &[f64]) -> Result<f64> {
    let lse = estimate_lse(log_w)?;
    let n = log_w.len() as f64;
    let z = (lse + n.ln()).exp() / n;
    if !z.is_finite() {
        return Err(Error::Overflow(format!("linear-scale estimate exp({lse})")));
    }
    Ok(z)
}

/// Log-space label under the chosen aggregator.
pub fn aggregate(agg: Aggregator, log_w: &[f64]) -> Result<f64> {
    match agg {
        Aggregator::Lse => estimate_lse(log_w),
        Aggregator::Gm => estimate_gm(log_w),
        Aggregator::LinearLog => estimate_linear(log_w).map(f64::ln),
    }
}

/// Self-normalized sample estimates `(CV^2, ESS)` of a weight list.
pub fn sample_cv2_ess(log_w: &[f64]) -> (f64, f64) {
    let lse = log_sum_exp(log_w);
    if lse == f64::NEG_INFINITY {
        return (f64::NAN, 0.0);
    }
    let sum_sq: f64 = log_w.iter().map(|x| (2.0 * (x - lse)).exp()).sum();
    let n = log_w.len() as f64;
    (n * sum_sq - 1.0, 1.0 / sum_sq)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsLabel {
    pub prompt_id: String,
    pub log_z_hat: f64,
    pub aggregator: Aggregator,
    pub n: usize,
    pub measured_cv2: f64,
    pub ess: f64,
    /// Set when every weight is zero (log-weights all `-inf`).
    pub degenerate: bool,
    pub rng_key: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelOptions {
    pub n: usize,
    pub aggregator: Aggregator,
    /// Use batch group-normalized rewards in place of the fixed affine transform.
    #[serde(default)]
    pub plugin_normalization: bool,
}

impl Default for LabelOptions {
    fn default() -> Self {
        Self {
            n: 8,
            aggregator: Aggregator::Lse,
            plugin_normalization: false,
        }
    }
}

/// Stage-1 label for one prompt from `n` proposal samples. Also returns the
/// sampled trajectories (enumeration indices) and their binary rewards.
pub fn stage1_label(
    pi_ref: &TabularPolicy,
    p_t: &TabularPolicy,
    inst: &Instance,
    beta: f64,
    opts: &LabelOptions,
    key: &StreamKey,
) -> Result<(IsLabel, Vec<usize>)> {
    if opts.n == 0 {
        return Err(Error::EmptyInput("stage-1 sample count"));
    }
    let idx = p_t.sample_indices(&mut key.stream(), opts.n);
    let e = inst.enumeration();
    let lr = pi_ref.log_probs(e);
    let lp = p_t.log_probs(e);
    let tilde: Vec<f64> = if opts.plugin_normalization {
        let raw: Vec<f64> = idx.iter().map(|&i| inst.rewards()[i]).collect();
        if raw.len() >= 2 {
            group_normalize(&raw, DEFAULT_EPS_FLOOR)?
        } else {
            vec![0.0; raw.len()]
        }
    } else {
        idx.iter().map(|&i| inst.tilde_rewards()[i]).collect()
    };
    let log_w: Vec<f64> = idx
        .iter()
        .zip(&tilde)
        .map(|(&i, r)| lr[i] - lp[i] + beta * r)
        .collect();
    let value = aggregate(opts.aggregator, &log_w)?;
    let (cv2, ess) = sample_cv2_ess(&log_w);
    Ok((
        IsLabel {
            prompt_id: inst.id().to_string(),
            log_z_hat: value,
            aggregator: opts.aggregator,
            n: opts.n,
            measured_cv2: cv2,
            ess,
            degenerate: value == f64::NEG_INFINITY,
            rng_key: key.to_string(),
        },
        idx,
    ))
}

// ---------------------------------------------------------------------------
// Replication machinery

/// Inverse-CDF sampler over enumeration indices. Draws the same distribution
/// as ancestral sampling at a fraction of the cost.
#[derive(Clone, Debug)]
pub struct IndexSampler {
    cdf: Vec<f64>,
}

impl IndexSampler {
    pub fn new(probs: &[f64]) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        // Absorb rounding slack into the last index with positive mass.
        if let Some(last) = probs.iter().rposition(|&p| p > 0.0) {
            cdf[last..].fill(f64::INFINITY);
        }
        Self { cdf }
    }

    pub fn draw(&self, rng: &mut Stream) -> usize {
        let u = uniform(rng);
        self.cdf.partition_point(|&c| c <= u)
    }
}

/// Log-weights of every trajectory and the proposal sampler, precomputed.
#[derive(Clone, Debug)]
pub struct WeightTable {
    pub log_w: Vec<f64>,
    pub sampler: IndexSampler,
}

impl WeightTable {
    pub fn new(pi_ref: &TabularPolicy, p_t: &TabularPolicy, inst: &Instance, beta: f64) -> Self {
        let e = inst.enumeration();
        let lr = pi_ref.log_probs(e);
        let lp = p_t.log_probs(e);
        let log_w = (0..e.len())
            .map(|i| lr[i] - lp[i] + beta * inst.tilde_rewards()[i])
            .collect();
        Self {
            log_w,
            sampler: IndexSampler::new(&p_t.probs(e)),
        }
    }

    pub fn draw_log_weights(&self, rng: &mut Stream, n: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..n).map(|_| self.log_w[self.sampler.draw(rng)]));
    }
}

/// Per-replication estimates from fresh proposal samples.
#[derive(Clone, Debug, Default)]
pub struct Replications {
    pub linear: Vec<f64>,
    pub lse: Vec<f64>,
    pub gm: Vec<f64>,
}

impl Replications {
    pub fn run(table: &WeightTable, n: usize, reps: usize, key: &StreamKey) -> Self {
        let rows: Vec<(f64, f64, f64)> = (0..reps)
            .into_par_iter()
            .map_init(Vec::new, |buf, r| {
                let mut rng = key.index(r as u64).stream();
                table.draw_log_weights(&mut rng, n, buf);
                let lse = estimate_lse(buf).expect("n >= 1");
                let gm = estimate_gm(buf).expect("n >= 1");
                let lin = (lse).exp();
                (lin, lse, gm)
            })
            .collect();
        let mut out = Replications::default();
        for (a, b, c) in rows {
            out.linear.push(a);
            out.lse.push(b);
            out.gm.push(c);
        }
        out
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------------------
// Sample-count study: shared pool, subsampling without replacement

pub const MIN_STUDY_REPLICATIONS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyRow {
    pub prompt_id: String,
    pub m: usize,
    pub replication_count: usize,
    pub var_log_z: f64,
    pub rel_bias_mean: f64,
    pub rel_bias_median: f64,
    pub exact_log_z: f64,
    pub exact_cv2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyAggregate {
    pub m: usize,
    pub prompts: usize,
    pub var_log_z_mean: f64,
    pub var_log_z_std: f64,
    pub rel_bias_mean: f64,
    pub rel_bias_std: f64,
    pub rel_bias_median_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyTable {
    pub rows: Vec<StudyRow>,
    pub aggregates: Vec<StudyAggregate>,
}

pub struct StudyPrompt<'a> {
    pub inst: &'a Instance,
    pub pi_ref: &'a TabularPolicy,
    pub p_t: &'a TabularPolicy,
}

/// Per prompt: draw a pool of `pool_size` proposal samples, take the pooled
/// LSE estimate as pseudo ground truth, then subsample `M` without
/// replacement `replications` times for every `M`.
pub fn variance_bias_study(
    prompts: &[StudyPrompt<'_>],
    beta: f64,
    pool_size: usize,
    subsample_sizes: &[usize],
    replications: usize,
    key: &StreamKey,
) -> Result<StudyTable> {
    if replications < MIN_STUDY_REPLICATIONS {
        return Err(Error::Config(format!(
            "variance-bias study needs at least {MIN_STUDY_REPLICATIONS} replications, got {replications}"
        )));
    }
    if subsample_sizes.is_empty() {
        return Err(Error::Config("no subsample sizes given".into()));
    }
    if let Some(&m) = subsample_sizes.iter().find(|&&m| m == 0 || m >= pool_size) {
        return Err(Error::Config(format!(
            "subsample size {m} must be in 1..{pool_size} (pool size)"
        )));
    }
    let per_prompt: Vec<Result<Vec<StudyRow>>> = prompts
        .par_iter()
        .map(|sp| {
            let inst = sp.inst;
            let stats = exact_weight_stats(sp.pi_ref, sp.p_t, inst, beta)?;
            let table = WeightTable::new(sp.pi_ref, sp.p_t, inst, beta);
            let pkey = key.child(&format!("prompt:{}", inst.id()));
            let mut pool = Vec::with_capacity(pool_size);
            table.draw_log_weights(&mut pkey.child("pool").stream(), pool_size, &mut pool);
            let pool_est = estimate_lse(&pool)?;
            let mut rows = Vec::with_capacity(subsample_sizes.len());
            let mut sub = Vec::new();
            for &m in subsample_sizes {
                let mut logs = Vec::with_capacity(replications);
                let mut rel = Vec::with_capacity(replications);
                for r in 0..replications {
                    let mut rng = pkey.child(&format!("m:{m}")).index(r as u64).stream();
                    sub.clear();
                    sub.extend(
                        sample_without_replacement(&mut rng, pool_size, m)
                            .into_iter()
                            .map(|i| pool[i]),
                    );
                    let est = estimate_lse(&sub)?;
                    logs.push(est);
                    rel.push(((est - pool_est).exp() - 1.0).abs());
                }
                rows.push(StudyRow {
                    prompt_id: inst.id().to_string(),
                    m,
                    replication_count: replications,
                    var_log_z: variance(&logs),
                    rel_bias_mean: mean(&rel),
                    rel_bias_median: median(&rel),
                    exact_log_z: stats.log_z,
                    exact_cv2: stats.cv2,
                });
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_prompt {
        rows.extend(r?);
    }
    let aggregates = subsample_sizes
        .iter()
        .map(|&m| {
            let sel: Vec<&StudyRow> = rows.iter().filter(|r| r.m == m).collect();
            let var: Vec<f64> = sel.iter().map(|r| r.var_log_z).collect();
            let bias: Vec<f64> = sel.iter().map(|r| r.rel_bias_mean).collect();
            let med: Vec<f64> = sel.iter().map(|r| r.rel_bias_median).collect();
            StudyAggregate {
                m,
                prompts: sel.len(),
                var_log_z_mean: mean(&var),
                var_log_z_std: std_dev(&var),
                rel_bias_mean: mean(&bias),
                rel_bias_std: std_dev(&bias),
                rel_bias_median_mean: mean(&med),
            }
        })
        .collect();
    Ok(StudyTable { rows, aggregates })
}
