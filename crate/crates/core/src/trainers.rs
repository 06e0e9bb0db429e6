//! Stage-3 optimizers on tabular policies and the property checks built
//! on the same residual algebra.
//!
//! Four objectives share one training loop:
//!
//! * `DISA`: squared trajectory-balance residual against a frozen anchor.
//! * `FLOWRL`: the same residual with a per-prompt learned log-partition
//!   scalar updated jointly with the policy.
//! * `GRPO`: REINFORCE with group-normalized rewards as advantages.
//! * `SFT`: full-batch cross-entropy on reward-1 teacher samples.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amortizer::Amortizer;
use crate::env::{group_normalize, Instance, DEFAULT_EPS_FLOOR};
use crate::error::{Error, Result};
use crate::metrics::distinct_correct_expected;
use crate::oracle::{
    exact_kl_logs, exact_log_partition, exact_tilted_target, expected_residual_gradient, target_policy, Sampling,
};
use crate::policy::{LogitTable, ScoreAccumulator, TabularPolicy};
use crate::rng::{Stream, StreamKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "DISA")]
    Disa,
    #[serde(rename = "FLOWRL")]
    FlowRl,
    #[serde(rename = "GRPO")]
    Grpo,
    #[serde(rename = "SFT")]
    Sft,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Disa, Objective::FlowRl, Objective::Grpo, Objective::Sft];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Disa => "DISA",
            Objective::FlowRl => "FLOWRL",
            Objective::Grpo => "GRPO",
            Objective::Sft => "SFT",
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown objective {s:?}")))
    }
}

/// How the trajectory-balance gradient is formed each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientEstimator {
    /// `group_size` on-policy rollouts per prompt.
    Sampled,
    /// Enumeration-exact expectation under the current policy.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyInit {
    Reference,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub beta: f64,
    pub group_size: usize,
    pub lr_policy: f64,
    pub lr_partition: f64,
    pub steps: usize,
    pub seed: u64,
    /// Keep the `R^2 grad log pi` part of the on-policy gradient.
    pub score_term: bool,
    pub estimator: GradientEstimator,
    pub init: PolicyInit,
    /// Sample count for the distinct-correct metric.
    pub k: u32,
    pub eps_floor: f64,
    /// Divide the log-likelihood ratio by the number of decisions in the
    /// trajectory. Off by default; the unnormalized residual is the reference
    /// objective.
    pub length_normalized: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Disa,
            beta: 15.0,
            group_size: 8,
            lr_policy: 0.05,
            lr_partition: 0.1,
            steps: 200,
            seed: 0,
            score_term: true,
            estimator: GradientEstimator::Sampled,
            init: PolicyInit::Reference,
            k: 8,
            eps_floor: DEFAULT_EPS_FLOOR,
            length_normalized: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // beta = 0 is accepted: the target is then the reference itself
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config("beta must be finite and >= 0".into()));
        }
        if self.objective == Objective::Grpo && self.group_size < 2 {
            return Err(Error::Config("GRPO needs group_size >= 2".into()));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be >= 1".into()));
        }
        if !(self.lr_policy >= 0.0) || !(self.lr_partition >= 0.0) {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if !(self.eps_floor > 0.0) {
            return Err(Error::Config("eps_floor must be > 0".into()));
        }
        Ok(())
    }
}

/// Source of the DISA anchor `log Z(q)` substitute.
#[derive(Clone, Debug)]
pub enum Anchor<'a> {
    Frozen(&'a Amortizer),
    /// Enumeration-exact log-partition of each prompt.
    Exact,
    /// Fixed value per prompt id.
    Table(BTreeMap<String, f64>),
}

impl Anchor<'_> {
    pub fn value(&self, inst: &Instance, pi_ref: &TabularPolicy, beta: f64) -> Result<f64> {
        match self {
            Anchor::Frozen(g) => g.predict(&inst.prompt().features),
            Anchor::Exact => Ok(exact_log_partition(pi_ref, inst, beta)),
            Anchor::Table(t) => t
                .get(inst.id())
                .copied()
                .ok_or_else(|| Error::Config(format!("no anchor for prompt {}", inst.id()))),
        }
    }
}

/// Per-prompt learned log-partition scalars, all starting at 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FlowRlState {
    table: BTreeMap<String, f64>,
}

impl FlowRlState {
    pub fn new<'a>(ids: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            table: ids.into_iter().map(|id| (id.to_string(), 0.0)).collect(),
        }
    }

    pub fn get(&self, id: &str) -> f64 {
        self.table.get(id).copied().unwrap_or(0.0)
    }

    /// Overwrite one scalar; used to probe the policy/partition coupling.
    pub fn set(&mut self, id: &str, v: f64) {
        self.table.insert(id.to_string(), v);
    }

    pub fn table(&self) -> &BTreeMap<String, f64> {
        &self.table
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Objective value on the step's own samples (or exact when enumerated).
    pub sampled_loss: f64,
    /// Descent direction actually applied, before the learning rate.
    pub gradient: LogitTable,
    /// FLOWRL only: derivative of the loss with respect to `log Z_phi`.
    pub partition_derivative: Option<f64>,
}

/// Multiplier on `log pi_theta - log pi_ref` in the residual.
fn ratio_scale(decisions: usize, cfg: &TrainConfig) -> f64 {
    if cfg.length_normalized {
        1.0 / decisions.max(1) as f64
    } else {
        1.0
    }
}

/// Loss and gradient of the squared residual with a given anchor value,
/// either from `group_size` rollouts or from the enumeration.
pub fn tb_direction(
    policy: &TabularPolicy,
    pi_ref: &TabularPolicy,
    inst: &Instance,
    anchor: f64,
    cfg: &TrainConfig,
    rng: &mut Stream,
) -> (f64, LogitTable, f64) {
    match cfg.estimator {
        GradientEstimator::Exact if cfg.length_normalized => {
            let e = inst.enumeration();
            let probs = policy.probs(e);
            let lp = policy.log_probs(e);
            let lr = pi_ref.log_probs(e);
            let mut acc = ScoreAccumulator::new(policy.space());
            let (mut loss, mut d_anchor) = (0.0, 0.0);
            for i in 0..e.len() {
                if probs[i] == 0.0 {
                    continue;
                }
                let scale = ratio_scale(e.steps(i).len(), cfg);
                let r = anchor + scale * (lp[i] - lr[i]) - cfg.beta * inst.tilde_rewards()[i];
                loss += probs[i] * r * r;
                d_anchor += 2.0 * probs[i] * r;
                let coef = if cfg.score_term { r * r + 2.0 * scale * r } else { 2.0 * scale * r };
                acc.add(e.steps(i), probs[i] * coef);
            }
            (loss, acc.finish(policy), d_anchor)
        }
        GradientEstimator::Exact => {
            let g = expected_residual_gradient(
                policy,
                pi_ref,
                inst,
                cfg.beta,
                anchor,
                Sampling::OnPolicy,
                cfg.score_term,
            );
            (g.loss, g.gradient, g.anchor_derivative)
        }
        GradientEstimator::Sampled => {
            let e = inst.enumeration();
            let idx = policy.sample_indices(rng, cfg.group_size);
            let table = policy.log_softmax_table();
            let ref_table = pi_ref.log_softmax_table();
            let n = idx.len() as f64;
            let mut acc = ScoreAccumulator::new(policy.space());
            let (mut loss, mut d_anchor) = (0.0, 0.0);
            for &i in &idx {
                let steps = e.steps(i);
                let lp: f64 = steps.iter().map(|s| table.get(s.row as usize, s.symbol as usize)).sum();
                let lr: f64 = steps
                    .iter()
                    .map(|s| ref_table.get(s.row as usize, s.symbol as usize))
                    .sum();
                let scale = ratio_scale(steps.len(), cfg);
                let r = anchor + scale * (lp - lr) - cfg.beta * inst.tilde_rewards()[i];
                loss += r * r / n;
                d_anchor += 2.0 * r / n;
                let coef = if cfg.score_term { r * r + 2.0 * scale * r } else { 2.0 * scale * r };
                acc.add(steps, coef / n);
            }
            (loss, acc.finish(policy), d_anchor)
        }
    }
}

/// One descent step on the squared residual against the frozen anchor. The
/// anchor is only read.
pub fn disa_step(
    policy: &mut TabularPolicy,
    pi_ref: &TabularPolicy,
    inst: &Instance,
    anchor: &Anchor<'_>,
    cfg: &TrainConfig,
    rng: &mut Stream,
) -> Result<StepOutput> {
    if let Anchor::Frozen(g) = anchor {
        if !g.is_frozen() {
            return Err(Error::Contract("DISA requires a frozen amortizer".into()));
        }
    }
    let a = anchor.value(inst, pi_ref, cfg.beta)?;
    let (loss, grad, _) = tb_direction(policy, pi_ref, inst, a, cfg, rng);
    policy.apply(&grad, -cfg.lr_policy);
    Ok(StepOutput {
        sampled_loss: loss,
        gradient: grad,
        partition_derivative: None,
    })
}

/// One joint step on the policy and the prompt's learned log-partition.
pub fn flowrl_step(
    policy: &mut TabularPolicy,
    state: &mut FlowRlState,
    pi_ref: &TabularPolicy,
    inst: &Instance,
    cfg: &TrainConfig,
    rng: &mut Stream,
) -> Result<StepOutput> {
    let log_z_phi = state.get(inst.id());
    let (loss, grad, d_anchor) = tb_direction(policy, pi_ref, inst, log_z_phi, cfg, rng);
    policy.apply(&grad, -cfg.lr_policy);
    state.set(inst.id(), log_z_phi - cfg.lr_partition * d_anchor);
    Ok(StepOutput {
        sampled_loss: loss,
        gradient: grad,
        partition_derivative: Some(d_anchor),
    })
}

/// Group-normalized REINFORCE ascent step. Rewards enter only through the
/// group normalization, so any positive affine map of them is a no-op.
pub fn grpo_step(policy: &mut TabularPolicy, inst: &Instance, cfg: &TrainConfig, rng: &mut Stream) -> Result<StepOutput> {
    if cfg.group_size < 2 {
        return Err(Error::InvalidGroup("GRPO needs at least 2 rollouts".into()));
    }
    let idx = policy.sample_indices(rng, cfg.group_size);
    let raw: Vec<f64> = idx.iter().map(|&i| inst.tilde_rewards()[i]).collect();
    let out = grpo_step_on(policy, inst, &idx, &raw, cfg)?;
    Ok(out)
}

/// GRPO update on a given rollout group and its rewards.
pub fn grpo_step_on(
    policy: &mut TabularPolicy,
    inst: &Instance,
    idx: &[usize],
    rewards: &[f64],
    cfg: &TrainConfig,
) -> Result<StepOutput> {
    let adv = group_normalize(rewards, cfg.eps_floor)?;
    let e = inst.enumeration();
    let n = idx.len() as f64;
    let mut acc = ScoreAccumulator::new(policy.space());
    for (&i, &a) in idx.iter().zip(&adv) {
        if a != 0.0 {
            acc.add(e.steps(i), -a / n);
        }
    }
    let grad = acc.finish(policy);
    policy.apply(&grad, -cfg.lr_policy);
    let mean_reward = rewards.iter().sum::<f64>() / n;
    Ok(StepOutput {
        sampled_loss: -mean_reward,
        gradient: grad,
        partition_derivative: None,
    })
}

/// Mean negative log-likelihood of the dataset (enumeration indices).
pub fn cross_entropy(policy: &TabularPolicy, inst: &Instance, dataset: &[usize]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("SFT dataset"));
    }
    let lp = policy.log_probs(inst.enumeration());
    Ok(-dataset.iter().map(|&i| lp[i]).sum::<f64>() / dataset.len() as f64)
}

/// Gradient of [`cross_entropy`] with respect to the logits.
pub fn cross_entropy_gradient(policy: &TabularPolicy, inst: &Instance, dataset: &[usize]) -> Result<LogitTable> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("SFT dataset"));
    }
    let e = inst.enumeration();
    let mut acc = ScoreAccumulator::new(policy.space());
    let w = -1.0 / dataset.len() as f64;
    for &i in dataset {
        acc.add(e.steps(i), w);
    }
    Ok(acc.finish(policy))
}

/// One full-batch cross-entropy step toward the teacher samples.
pub fn sft_step(policy: &mut TabularPolicy, inst: &Instance, dataset: &[usize], cfg: &TrainConfig) -> Result<StepOutput> {
    let loss = cross_entropy(policy, inst, dataset)?;
    let grad = cross_entropy_gradient(policy, inst, dataset)?;
    policy.apply(&grad, -cfg.lr_policy);
    Ok(StepOutput {
        sampled_loss: loss,
        gradient: grad,
        partition_derivative: None,
    })
}

/// One prompt's training inputs.
#[derive(Clone, Debug)]
pub struct TrainPrompt<'a> {
    pub inst: &'a Instance,
    pub pi_ref: &'a TabularPolicy,
    /// Reward-1 teacher samples (enumeration indices) for SFT.
    pub sft_data: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub objective: Objective,
    /// Oracle objective value after the step, averaged over prompts.
    pub loss: f64,
    /// `KL(pi_theta || target)`, averaged over prompts.
    pub kl_fwd: f64,
    /// `KL(target || pi_theta)`, averaged over prompts.
    pub kl_rev: f64,
    /// Norm of the applied policy gradient over all prompts (0 initially).
    pub grad_norm: f64,
    pub distinct_correct_at_k: f64,
    /// Mean learned log-partition (FLOWRL only).
    pub log_z_phi: Option<f64>,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str =
        "step,objective,loss,kl_fwd,kl_rev,grad_norm,distinct_correct_at_k,log_z_phi";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.objective,
            self.loss,
            self.kl_fwd,
            self.kl_rev,
            self.grad_norm,
            self.distinct_correct_at_k,
            self.log_z_phi.map(|v| v.to_string()).unwrap_or_default()
        )
    }
}

/// Final per-prompt metrics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PromptFinal {
    pub prompt_id: String,
    pub kl_fwd: f64,
    pub kl_rev: f64,
    pub distinct_correct_at_k: f64,
    pub log_z_phi: Option<f64>,
}

/// A Stage-3 optimization trace. `records` has one entry per step; the
/// state before any update is kept separately in `initial`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub initial: StepRecord,
    pub records: Vec<StepRecord>,
    /// Step with the lowest `kl_fwd` (0 is the initial state).
    pub best_step: usize,
    pub finals: Vec<PromptFinal>,
}

impl TrainRun {
    pub fn last(&self) -> &StepRecord {
        self.records.last().unwrap_or(&self.initial)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(StepRecord::CSV_HEADER);
        s.push('\n');
        for r in std::iter::once(&self.initial).chain(&self.records) {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run: TrainRun,
    pub policies: Vec<TabularPolicy>,
    /// Policies at `run.best_step`.
    pub best_policies: Vec<TabularPolicy>,
    pub flow_state: Option<FlowRlState>,
}

struct PromptOracle {
    target_log_probs: Vec<f64>,
    anchor: Option<f64>,
}

struct PromptMetrics {
    loss: f64,
    kl_fwd: f64,
    kl_rev: f64,
    distinct: f64,
}

fn prompt_metrics(
    cfg: &TrainConfig,
    p: &TrainPrompt<'_>,
    oracle: &PromptOracle,
    policy: &TabularPolicy,
    log_z_phi: Option<f64>,
) -> Result<PromptMetrics> {
    let e = p.inst.enumeration();
    let lp = policy.log_probs(e);
    let probs: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
    let loss = match cfg.objective {
        Objective::Disa | Objective::FlowRl => {
            let anchor = log_z_phi.or(oracle.anchor).unwrap_or(0.0);
            let lr = p.pi_ref.log_probs(e);
            (0..e.len())
                .map(|i| {
                    let scale = ratio_scale(e.steps(i).len(), cfg);
                    let r = anchor + scale * (lp[i] - lr[i]) - cfg.beta * p.inst.tilde_rewards()[i];
                    probs[i] * r * r
                })
                .sum()
        }
        Objective::Grpo => -probs.iter().zip(p.inst.rewards()).map(|(a, b)| a * b).sum::<f64>(),
        Objective::Sft => cross_entropy(policy, p.inst, &p.sft_data)?,
    };
    Ok(PromptMetrics {
        loss,
        kl_fwd: exact_kl_logs(&lp, &oracle.target_log_probs),
        kl_rev: exact_kl_logs(&oracle.target_log_probs, &lp),
        distinct: distinct_correct_expected(&probs, p.inst, cfg.k)?,
    })
}

/// Runs `cfg.steps` synchronous updates over all prompts, recording exact
/// oracle metrics after every step. Prompts are processed concurrently and
/// reduced in prompt order, so results do not depend on the thread count.
pub fn run_training(cfg: &TrainConfig, prompts: &[TrainPrompt<'_>], anchor: Option<&Anchor<'_>>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::EmptyInput("training prompts"));
    }
    if cfg.objective == Objective::Disa && anchor.is_none() {
        return Err(Error::Config("DISA needs an anchor".into()));
    }
    if cfg.objective == Objective::Sft {
        if let Some(p) = prompts.iter().find(|p| p.sft_data.is_empty()) {
            return Err(Error::Config(format!("prompt {} has an empty SFT dataset", p.inst.id())));
        }
    }
    let oracles: Vec<PromptOracle> = prompts
        .iter()
        .map(|p| {
            let anchor_value = match (cfg.objective, anchor) {
                (Objective::Disa, Some(a)) => Some(a.value(p.inst, p.pi_ref, cfg.beta)?),
                _ => None,
            };
            Ok(PromptOracle {
                target_log_probs: exact_tilted_target(p.pi_ref, p.inst, cfg.beta).log_probs(),
                anchor: anchor_value,
            })
        })
        .collect::<Result<_>>()?;

    let mut policies: Vec<TabularPolicy> = prompts
        .iter()
        .map(|p| match cfg.init {
            PolicyInit::Reference => p.pi_ref.clone(),
            PolicyInit::Uniform => TabularPolicy::uniform(p.inst.space()),
        })
        .collect();
    let mut flow: Vec<f64> = vec![0.0; prompts.len()];
    let is_flow = cfg.objective == Objective::FlowRl;

    let record = |step: usize, policies: &[TabularPolicy], flow: &[f64], grad_sq: f64| -> Result<(StepRecord, Vec<PromptMetrics>)> {
        let per: Vec<PromptMetrics> = prompts
            .par_iter()
            .zip(&oracles)
            .zip(policies)
            .zip(flow)
            .map(|(((p, o), pol), &z)| prompt_metrics(cfg, p, o, pol, is_flow.then_some(z)))
            .collect::<Result<_>>()?;
        let n = per.len() as f64;
        let rec = StepRecord {
            step,
            objective: cfg.objective,
            loss: per.iter().map(|m| m.loss).sum::<f64>() / n,
            kl_fwd: per.iter().map(|m| m.kl_fwd).sum::<f64>() / n,
            kl_rev: per.iter().map(|m| m.kl_rev).sum::<f64>() / n,
            grad_norm: grad_sq.sqrt(),
            distinct_correct_at_k: per.iter().map(|m| m.distinct).sum::<f64>() / n,
            log_z_phi: is_flow.then(|| flow.iter().sum::<f64>() / n),
        };
        Ok((rec, per))
    };

    let (initial, mut last_per) = record(0, &policies, &flow, 0.0)?;
    let mut best = (initial.kl_fwd, 0usize, policies.clone());
    let mut records = Vec::with_capacity(cfg.steps);
    let keys: Vec<StreamKey> = prompts
        .iter()
        .map(|p| StreamKey::for_prompt(cfg.seed, p.inst.id(), "train").child(cfg.objective.name()))
        .collect();

    for step in 1..=cfg.steps {
        let grads: Vec<f64> = policies
            .par_iter_mut()
            .zip(flow.par_iter_mut())
            .zip(prompts.par_iter())
            .zip(keys.par_iter())
            .map(|(((pol, z), p), key)| -> Result<f64> {
                let mut rng = key.index(step as u64).stream();
                let out = match cfg.objective {
                    Objective::Disa => {
                        disa_step(pol, p.pi_ref, p.inst, anchor.expect("checked above"), cfg, &mut rng)?
                    }
                    Objective::FlowRl => {
                        let mut st = FlowRlState::default();
                        st.set(p.inst.id(), *z);
                        let out = flowrl_step(pol, &mut st, p.pi_ref, p.inst, cfg, &mut rng)?;
                        *z = st.get(p.inst.id());
                        out
                    }
                    Objective::Grpo => grpo_step(pol, p.inst, cfg, &mut rng)?,
                    Objective::Sft => sft_step(pol, p.inst, &p.sft_data, cfg)?,
                };
                let n = out.gradient.norm();
                Ok(n * n)
            })
            .collect::<Result<_>>()?;
        let grad_sq: f64 = grads.iter().sum();
        let (rec, per) = record(step, &policies, &flow, grad_sq)?;
        if rec.kl_fwd < best.0 {
            best = (rec.kl_fwd, step, policies.clone());
        }
        records.push(rec);
        last_per = per;
    }

    let finals = prompts
        .iter()
        .zip(&last_per)
        .zip(&flow)
        .map(|((p, m), &z)| PromptFinal {
            prompt_id: p.inst.id().to_string(),
            kl_fwd: m.kl_fwd,
            kl_rev: m.kl_rev,
            distinct_correct_at_k: m.distinct,
            log_z_phi: is_flow.then_some(z),
        })
        .collect();
    let flow_state = is_flow.then(|| {
        let mut st = FlowRlState::default();
        for (p, &z) in prompts.iter().zip(&flow) {
            st.set(p.inst.id(), z);
        }
        st
    });
    Ok(TrainOutcome {
        run: TrainRun {
            config: cfg.clone(),
            initial,
            records,
            best_step: best.1,
            finals,
        },
        policies,
        best_policies: best.2,
        flow_state,
    })
}

// ---------------------------------------------------------------------------
// Property checks

/// Deviation of the anchor from the exact log-partition.
#[derive(Clone, Debug)]
pub enum Perturbation {
    /// The same offset for every trajectory of the prompt.
    Constant(f64),
    /// One offset per enumerated trajectory.
    PerTrajectory(Vec<f64>),
}

/// One prompt's contribution to the envelope comparison.
#[derive(Clone, Debug)]
pub struct EnvelopeEntry<'a> {
    pub inst: &'a Instance,
    pub pi_theta: &'a TabularPolicy,
    pub pi_ref: &'a TabularPolicy,
    pub perturbation: Perturbation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnvelopeReport {
    /// Loss with the perturbed anchor.
    pub l_disa: f64,
    /// Loss with the exact log-partition.
    pub l_tb: f64,
    /// Root mean squared perturbation under the on-policy distribution.
    pub sigma: f64,
    pub bound: f64,
    /// `bound - |l_disa - l_tb|`; non-negative when the envelope holds.
    pub slack: f64,
}

impl EnvelopeReport {
    pub fn holds(&self) -> bool {
        self.slack >= -1e-12 * (1.0 + self.bound)
    }
}

/// Compares the on-policy squared-residual loss under a perturbed anchor
/// with the exact-anchor loss, averaged over prompts, against
/// `sigma^2 + 2 sigma sqrt(L_TB)`.
pub fn envelope_check(entries: &[EnvelopeEntry<'_>], beta: f64) -> Result<EnvelopeReport> {
    if entries.is_empty() {
        return Err(Error::EmptyInput("envelope prompts"));
    }
    let (mut l_disa, mut l_tb, mut s2) = (0.0, 0.0, 0.0);
    for en in entries {
        let e = en.inst.enumeration();
        let log_z = exact_log_partition(en.pi_ref, en.inst, beta);
        let lp = en.pi_theta.log_probs(e);
        let lr = en.pi_ref.log_probs(e);
        for i in 0..e.len() {
            let p = lp[i].exp();
            let r = log_z + lp[i] - lr[i] - beta * en.inst.tilde_rewards()[i];
            let eta = match &en.perturbation {
                Perturbation::Constant(c) => *c,
                Perturbation::PerTrajectory(v) => v[i],
            };
            l_tb += p * r * r;
            l_disa += p * (r + eta) * (r + eta);
            s2 += p * eta * eta;
        }
    }
    let n = entries.len() as f64;
    let (l_disa, l_tb, s2) = (l_disa / n, l_tb / n, s2 / n);
    let sigma = s2.sqrt();
    let bound = s2 + 2.0 * sigma * l_tb.sqrt();
    Ok(EnvelopeReport {
        l_disa,
        l_tb,
        sigma,
        bound,
        slack: bound - (l_disa - l_tb).abs(),
    })
}

/// Envelope with the anchor supplied by an amortizer.
pub fn envelope_check_amortizer(
    g: &Amortizer,
    prompts: &[(&Instance, &TabularPolicy, &TabularPolicy)],
    beta: f64,
) -> Result<EnvelopeReport> {
    let entries = prompts
        .iter()
        .map(|&(inst, pi_theta, pi_ref)| {
            let eta = g.predict(&inst.prompt().features)? - exact_log_partition(pi_ref, inst, beta);
            Ok(EnvelopeEntry {
                inst,
                pi_theta,
                pi_ref,
                perturbation: Perturbation::Constant(eta),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    envelope_check(&entries, beta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StationaritySampling {
    OnPolicy,
    /// Uniform over enumerated trajectories, independent of the policy.
    FixedUniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StationarityReport {
    pub eta: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Gradient of the expected squared residual at the exact tilted target with
/// anchor `log Z + eta`.
pub fn stationarity_check(
    pi_ref: &TabularPolicy,
    inst: &Instance,
    beta: f64,
    eta: f64,
    sampling: StationaritySampling,
) -> StationarityReport {
    let target = target_policy(pi_ref, inst, beta);
    let anchor = exact_log_partition(pi_ref, inst, beta) + eta;
    let uniform;
    let s = match sampling {
        StationaritySampling::OnPolicy => Sampling::OnPolicy,
        StationaritySampling::FixedUniform => {
            let n = inst.enumeration().len();
            uniform = vec![1.0 / n as f64; n];
            Sampling::Fixed(&uniform)
        }
    };
    let g = expected_residual_gradient(&target, pi_ref, inst, beta, anchor, s, true);
    StationarityReport {
        eta,
        loss: g.loss,
        grad_norm: g.gradient.norm(),
    }
}
