//! Numeric checks of the estimator and objective properties: unbiasedness
//! and log-space bias of the partition estimators, fixed-point recovery and
//! stationarity of anchored training, the anchor-error envelope, and the
//! two-outcome counterexample values.

use serde::Serialize;

use crate::config::{EtaMode, Fault};
use crate::env::Instance;
use crate::error::Result;
use crate::estimator::{mean, Replications, WeightTable};
use crate::fixtures::{binary_counterexample, multimodal_instance, random_instance, COUNTEREXAMPLE_BETA, MULTIMODAL_BETA};
use crate::oracle::{exact_log_partition, exact_tb_loss, exact_tilted_target, exact_weight_stats, target_policy};
use crate::policy::{tilt_policy, LogitTable, TabularPolicy};
use crate::rng::{uniform, StreamKey};
use crate::trainers::{
    envelope_check, run_training, stationarity_check, Anchor, EnvelopeEntry, Objective, Perturbation, PolicyInit,
    StationaritySampling, TrainConfig, TrainPrompt,
};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub skipped: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            skipped: false,
            detail,
        }
    }

    fn skipped(name: &str, detail: &str) -> Self {
        Self {
            name: name.into(),
            passed: true,
            skipped: true,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        let tag = if self.skipped {
            "SKIP"
        } else if self.passed {
            "PASS"
        } else {
            "FAIL"
        };
        format!("{tag} {}: {}", self.name, self.detail)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Budgets and fault switches for [`verify_props`].
#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    pub replications: usize,
    pub envelope_draws: usize,
    pub training_steps: usize,
    pub eta_mode: EtaMode,
    pub fault: Fault,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            replications: 100_000,
            envelope_draws: 200,
            training_steps: 5000,
            eta_mode: EtaMode::Constant,
            fault: Fault::None,
        }
    }
}

/// Policy on the two-outcome space putting mass `p` on the rewarded outcome.
pub fn binary_policy(reference: &TabularPolicy, p: f64) -> TabularPolicy {
    let mut logits = LogitTable::for_space(reference.space());
    logits.set(0, 0, (p / (1.0 - p)).ln());
    TabularPolicy::from_logits(reference.space(), logits).expect("finite logits")
}

pub struct CounterexampleValues {
    pub log_z: f64,
    /// (mass on `0`, mass on `S`)
    pub target: (f64, f64),
    pub loss_at_target: f64,
    pub loss_at_09: f64,
}

pub const COUNTEREXAMPLE_ETA: f64 = -2.0;

pub fn counterexample_values() -> CounterexampleValues {
    let (inst, pi_ref) = binary_counterexample();
    let beta = COUNTEREXAMPLE_BETA;
    let log_z = exact_log_partition(&pi_ref, &inst, beta);
    let t = exact_tilted_target(&pi_ref, &inst, beta);
    let loss = |p: f64| {
        let pol = binary_policy(&pi_ref, p);
        let probs = pol.probs(inst.enumeration());
        exact_tb_loss(&pol, &pi_ref, &inst, beta, log_z + COUNTEREXAMPLE_ETA, &probs)
    };
    CounterexampleValues {
        log_z,
        target: (t.target_probs[1], t.target_probs[0]),
        loss_at_target: loss(2.0 / 3.0),
        loss_at_09: loss(0.9),
    }
}

pub fn check_counterexample() -> CheckResult {
    let v = counterexample_values();
    let ok = (v.log_z - 1.5f64.ln()).abs() <= 1e-12
        && (v.target.0 - 2.0 / 3.0).abs() <= 1e-12
        && (v.target.1 - 1.0 / 3.0).abs() <= 1e-12
        && (v.loss_at_target - 4.0).abs() <= 1e-12
        && (v.loss_at_09 - 3.627).abs() <= 0.01
        && v.loss_at_09 < v.loss_at_target;
    CheckResult::new(
        "counterexample-values",
        ok,
        format!(
            "log Z = {:.15}, target = ({:.15}, {:.15}), L(2/3) = {:.15}, L(0.9) = {:.6}",
            v.log_z, v.target.0, v.target.1, v.loss_at_target, v.loss_at_09
        ),
    )
}

/// A named instance with its reference and proposal.
pub struct EstimatorCase {
    pub inst: Instance,
    pub pi_ref: TabularPolicy,
    pub p_t: TabularPolicy,
    pub beta: f64,
}

/// The counterexample (proposal = reference) plus five seeded random
/// environments with reward-tilted proposals, all with `CV^2 <= 1`.
pub fn unbiasedness_cases() -> Vec<EstimatorCase> {
    let (inst, pi_ref) = binary_counterexample();
    let mut cases = vec![EstimatorCase {
        p_t: pi_ref.clone(),
        inst,
        pi_ref,
        beta: COUNTEREXAMPLE_BETA,
    }];
    let mut seed = 100;
    while cases.len() < 6 {
        let (inst, pi_ref) = random_instance(seed, 3, 3, 0.3);
        seed += 1;
        let p_t = tilt_policy(&pi_ref, &inst, 0.5);
        let cv2 = exact_weight_stats(&pi_ref, &p_t, &inst, 1.0).map(|s| s.cv2).unwrap_or(f64::INFINITY);
        if cv2 <= 1.0 && inst.correct_indices().len() > 0 {
            cases.push(EstimatorCase {
                inst,
                pi_ref,
                p_t,
                beta: 1.0,
            });
        }
    }
    cases
}

pub fn check_unbiasedness(replications: usize, seed: u64) -> Result<CheckResult> {
    let mut ok = true;
    let mut worst = 0.0f64;
    let mut cells = 0;
    for (ci, c) in unbiasedness_cases().iter().enumerate() {
        let stats = exact_weight_stats(&c.pi_ref, &c.p_t, &c.inst, c.beta)?;
        let table = WeightTable::new(&c.pi_ref, &c.p_t, &c.inst, c.beta);
        for n in [1usize, 2, 8] {
            let key = StreamKey::root(seed).child("unbiased").index(ci as u64).child(&format!("n:{n}"));
            let reps = Replications::run(&table, n, replications, &key);
            let m = mean(&reps.linear);
            let tol = 4.0 * (stats.var / (n * replications) as f64).sqrt();
            let z = (m - stats.z).abs() / tol.max(f64::MIN_POSITIVE);
            worst = worst.max(z);
            ok &= (m - stats.z).abs() <= tol;
            cells += 1;
        }
    }
    Ok(CheckResult::new(
        "is-unbiasedness",
        ok,
        format!("{cells} cells, worst |mean - Z| = {worst:.3} of the 4-sigma band"),
    ))
}

/// Measured `E[log Z_hat] - log Z` for the LSE and GM aggregators.
pub struct BiasMeasurement {
    pub n: usize,
    pub lse_bias: f64,
    pub gm_bias: f64,
}

pub fn measure_bias(case: &EstimatorCase, ns: &[usize], replications: usize, key: &StreamKey, fault: Fault) -> Result<(f64, Vec<BiasMeasurement>)> {
    let stats = exact_weight_stats(&case.pi_ref, &case.p_t, &case.inst, case.beta)?;
    let table = WeightTable::new(&case.pi_ref, &case.p_t, &case.inst, case.beta);
    let out = ns
        .iter()
        .map(|&n| {
            let reps = Replications::run(&table, n, replications, &key.child(&format!("n:{n}")));
            let gm_scale = match fault {
                Fault::None => 1.0,
                Fault::GmOffByOne if n > 1 => n as f64 / (n - 1) as f64,
                Fault::GmOffByOne => 1.0,
            };
            BiasMeasurement {
                n,
                lse_bias: mean(&reps.lse) - stats.log_z,
                gm_bias: gm_scale * mean(&reps.gm) - stats.log_z,
            }
        })
        .collect();
    Ok((stats.cv2, out))
}

fn counterexample_case() -> EstimatorCase {
    let (inst, pi_ref) = binary_counterexample();
    EstimatorCase {
        p_t: pi_ref.clone(),
        inst,
        pi_ref,
        beta: COUNTEREXAMPLE_BETA,
    }
}

fn within_factor_two(measured: f64, predicted: f64) -> bool {
    let r = measured / predicted;
    (0.5..=2.0).contains(&r)
}

pub fn check_jensen_bias(replications: usize, seed: u64) -> Result<CheckResult> {
    let case = counterexample_case();
    let (cv2, rows) = measure_bias(&case, &[4, 8, 16], replications, &StreamKey::root(seed).child("jensen"), Fault::None)?;
    let mut ok = (0.1..=1.0).contains(&cv2);
    let mut parts = vec![format!("CV^2 = {cv2:.6}")];
    for r in &rows {
        let pred = -cv2 / (2.0 * r.n as f64);
        ok &= within_factor_two(r.lse_bias, pred);
        parts.push(format!("N={}: {:.3e} vs {:.3e}", r.n, r.lse_bias, pred));
    }
    Ok(CheckResult::new("jensen-bias", ok, parts.join(", ")))
}

pub fn check_gm_bias(replications: usize, seed: u64, fault: Fault) -> Result<CheckResult> {
    let case = counterexample_case();
    let (cv2, rows) = measure_bias(&case, &[4, 64], replications, &StreamKey::root(seed).child("gm"), fault)?;
    let pred = -cv2 / 2.0;
    let (a, b) = (&rows[0], &rows[1]);
    let gm_level = within_factor_two(a.gm_bias, pred) && within_factor_two(b.gm_bias, pred);
    let gm_flat = ((a.gm_bias - b.gm_bias) / a.gm_bias).abs() < 0.2;
    let lse_shrinks = a.lse_bias.abs() >= 3.0 * b.lse_bias.abs();
    let ok = gm_level && gm_flat && lse_shrinks;
    let mut detail = format!(
        "GM bias {:.4e} (N=4), {:.4e} (N=64) vs -CV^2/2 = {:.4e}; LSE bias {:.3e} -> {:.3e}",
        a.gm_bias, b.gm_bias, pred, a.lse_bias, b.lse_bias
    );
    if !gm_level {
        detail.push_str("; geometric-mean aggregator bias does not match the non-vanishing -CV^2/2 level");
    }
    if !gm_flat {
        detail.push_str("; geometric-mean bias is not flat in N");
    }
    if !lse_shrinks {
        detail.push_str("; LSE bias did not shrink 3x");
    }
    Ok(CheckResult::new("gm-bias", ok, detail))
}

pub struct FixedPointOutcome {
    pub counterexample_kl: f64,
    pub counterexample_loss: f64,
    pub counterexample_p: f64,
    pub multimodal_kl: f64,
}

/// DISA with the exact anchor from a uniform start on the counterexample and
/// the multimodal instance.
pub fn fixed_point_runs(steps: usize, seed: u64) -> Result<FixedPointOutcome> {
    let run = |inst: &Instance, pi_ref: &TabularPolicy, beta: f64| -> Result<(f64, f64, TabularPolicy)> {
        let cfg = TrainConfig {
            objective: Objective::Disa,
            beta,
            steps,
            seed,
            init: PolicyInit::Uniform,
            ..Default::default()
        };
        let p = TrainPrompt {
            inst,
            pi_ref,
            sft_data: vec![],
        };
        let out = run_training(&cfg, &[p], Some(&Anchor::Exact))?;
        let last = out.run.last().clone();
        Ok((last.kl_fwd, last.loss, out.policies.into_iter().next().expect("one prompt")))
    };
    let (inst, pi_ref) = binary_counterexample();
    let (c_kl, c_loss, c_pol) = run(&inst, &pi_ref, COUNTEREXAMPLE_BETA)?;
    let c_p = c_pol.probs(inst.enumeration())[1];
    let (inst, pi_ref) = multimodal_instance();
    let (m_kl, _, _) = run(&inst, &pi_ref, MULTIMODAL_BETA)?;
    Ok(FixedPointOutcome {
        counterexample_kl: c_kl,
        counterexample_loss: c_loss,
        counterexample_p: c_p,
        multimodal_kl: m_kl,
    })
}

pub fn check_fixed_point(steps: usize, seed: u64) -> Result<CheckResult> {
    let o = fixed_point_runs(steps, seed)?;
    let ok = o.counterexample_kl < 1e-6 && o.counterexample_loss < 1e-8 && o.multimodal_kl < 1e-4;
    Ok(CheckResult::new(
        "fixed-point-recovery",
        ok,
        format!(
            "two-outcome KL = {:.3e}, loss = {:.3e}, p = {:.6}; V=3,T=3 KL = {:.3e} after {steps} steps",
            o.counterexample_kl, o.counterexample_loss, o.counterexample_p, o.multimodal_kl
        ),
    ))
}

pub fn check_stationarity(eta_mode: EtaMode) -> CheckResult {
    if eta_mode == EtaMode::Trajectory {
        return CheckResult::skipped(
            "on-policy-stationarity",
            "anchor error varies across trajectories of a prompt; the target is stationary only for prompt-level offsets",
        );
    }
    let (binary, binary_ref) = binary_counterexample();
    let (mm, mm_ref) = multimodal_instance();
    let mut worst: f64 = 0.0;
    for eta in [-2.0, 1.0] {
        worst = worst.max(stationarity_check(&binary_ref, &binary, COUNTEREXAMPLE_BETA, eta, StationaritySampling::OnPolicy).grad_norm);
        worst = worst.max(stationarity_check(&mm_ref, &mm, MULTIMODAL_BETA, eta, StationaritySampling::OnPolicy).grad_norm);
    }
    let off = stationarity_check(&binary_ref, &binary, COUNTEREXAMPLE_BETA, -2.0, StationaritySampling::FixedUniform).grad_norm;
    CheckResult::new(
        "on-policy-stationarity",
        worst <= 1e-9 && off > 1e-6,
        format!("max on-policy gradient norm {worst:.3e}; fixed-uniform gradient norm {off:.3e}"),
    )
}

/// Outcome of the randomized envelope sweep.
pub struct EnvelopeSweep {
    pub draws: usize,
    pub violations: usize,
    pub min_slack: f64,
    pub equality_slack: f64,
}

pub fn envelope_sweep(draws: usize, seed: u64, eta_mode: EtaMode) -> Result<EnvelopeSweep> {
    let beta = 1.5;
    let prompts: Vec<(Instance, TabularPolicy)> = (0..3).map(|i| random_instance(900 + i, 2, 3, 0.4)).collect();
    let mut violations = 0;
    let mut min_slack = f64::INFINITY;
    for d in 0..draws {
        let mut rng = StreamKey::root(seed).child("envelope").index(d as u64).stream();
        let thetas: Vec<TabularPolicy> = prompts
            .iter()
            .map(|(inst, _)| TabularPolicy::random(inst.space(), 2.0, &mut rng))
            .collect();
        let shared = 6.0 * uniform(&mut rng) - 3.0;
        let entries: Vec<EnvelopeEntry<'_>> = prompts
            .iter()
            .zip(&thetas)
            .map(|((inst, pi_ref), theta)| {
                let perturbation = match eta_mode {
                    EtaMode::Constant => Perturbation::Constant(shared),
                    EtaMode::PerPrompt => Perturbation::Constant(6.0 * uniform(&mut rng) - 3.0),
                    EtaMode::Trajectory => Perturbation::PerTrajectory(
                        (0..inst.enumeration().len()).map(|_| 6.0 * uniform(&mut rng) - 3.0).collect(),
                    ),
                };
                EnvelopeEntry {
                    inst,
                    pi_theta: theta,
                    pi_ref,
                    perturbation,
                }
            })
            .collect();
        let r = envelope_check(&entries, beta)?;
        min_slack = min_slack.min(r.slack);
        if !r.holds() {
            violations += 1;
        }
    }
    let (inst, pi_ref) = binary_counterexample();
    let target = target_policy(&pi_ref, &inst, COUNTEREXAMPLE_BETA);
    let eq = envelope_check(
        &[EnvelopeEntry {
            inst: &inst,
            pi_theta: &target,
            pi_ref: &pi_ref,
            perturbation: Perturbation::Constant(COUNTEREXAMPLE_ETA),
        }],
        COUNTEREXAMPLE_BETA,
    )?;
    Ok(EnvelopeSweep {
        draws,
        violations,
        min_slack,
        equality_slack: eq.slack,
    })
}

pub fn check_envelope(draws: usize, seed: u64, eta_mode: EtaMode) -> Result<CheckResult> {
    let s = envelope_sweep(draws, seed, eta_mode)?;
    Ok(CheckResult::new(
        "anchor-error-envelope",
        s.violations == 0 && s.equality_slack.abs() <= 1e-10,
        format!(
            "{} draws, {} violations, min slack {:.3e}, equality-case slack {:.3e}",
            s.draws, s.violations, s.min_slack, s.equality_slack
        ),
    ))
}

/// Runs every check. Errors inside a check are reported as failures.
pub fn verify_props(opts: &VerifyOptions) -> VerifyReport {
    let fail = |name: &str, e: crate::error::Error| CheckResult::new(name, false, format!("error: {e}"));
    let checks = vec![
        check_counterexample(),
        check_unbiasedness(opts.replications, opts.seed).unwrap_or_else(|e| fail("is-unbiasedness", e)),
        check_jensen_bias(opts.replications, opts.seed).unwrap_or_else(|e| fail("jensen-bias", e)),
        check_gm_bias(opts.replications, opts.seed, opts.fault).unwrap_or_else(|e| fail("gm-bias", e)),
        check_fixed_point(opts.training_steps, opts.seed).unwrap_or_else(|e| fail("fixed-point-recovery", e)),
        check_stationarity(opts.eta_mode),
        check_envelope(opts.envelope_draws, opts.seed, opts.eta_mode).unwrap_or_else(|e| fail("anchor-error-envelope", e)),
    ];
    VerifyReport { checks }
}
