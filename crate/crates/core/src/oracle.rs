//! Exact ground truth by enumeration: partition functions, tilted targets,
//! divergences, importance-weight moments, trajectory-balance losses and
//! their expected gradients.
//!
//! Nothing here samples. Every estimator and trainer is checked against
//! these values.

use crate::env::Instance;
use crate::error::{Error, Result};
use crate::policy::{tilt_by, LogitTable, ScoreAccumulator, TabularPolicy};

/// Max-shifted log-sum-exp. All `-inf` inputs (or an empty slice) give `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Unnormalized target log-mass `log pi_ref(o) + beta * r~(q, o)` per trajectory.
pub fn target_log_mass(pi_ref: &TabularPolicy, inst: &Instance, beta: f64) -> Vec<f64> {
    pi_ref
        .log_probs(inst.enumeration())
        .iter()
        .zip(inst.tilde_rewards())
        .map(|(lp, r)| lp + beta * r)
        .collect()
}

pub fn exact_log_partition(pi_ref: &TabularPolicy, inst: &Instance, beta: f64) -> f64 {
    log_sum_exp(&target_log_mass(pi_ref, inst, beta))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExactTarget {
    pub log_z: f64,
    pub target_probs: Vec<f64>,
    pub beta: f64,
}

impl ExactTarget {
    pub fn log_probs(&self) -> Vec<f64> {
        self.target_probs.iter().map(|p| p.ln()).collect()
    }
}

pub fn exact_tilted_target(pi_ref: &TabularPolicy, inst: &Instance, beta: f64) -> ExactTarget {
    let mass = target_log_mass(pi_ref, inst, beta);
    let log_z = log_sum_exp(&mass);
    ExactTarget {
        log_z,
        target_probs: mass.iter().map(|m| (m - log_z).exp()).collect(),
        beta,
    }
}

/// The tilted target as a tabular policy (exact conditionals).
pub fn target_policy(pi_ref: &TabularPolicy, inst: &Instance, beta: f64) -> TabularPolicy {
    let tilt: Vec<f64> = inst.tilde_rewards().iter().map(|r| beta * r).collect();
    tilt_by(pi_ref, inst.enumeration(), &tilt)
}

/// `KL(p || q) = sum p ln(p/q)` over a shared support.
pub fn exact_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::SupportViolation {
            trajectory: "-".into(),
            detail: format!("tables of length {} and {}", p.len(), q.len()),
        });
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::SupportViolation {
                trajectory: format!("#{i}"),
                detail: format!("p = {pi} but q = {qi}"),
            });
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}

/// KL computed from log tables, robust when probabilities underflow.
pub fn exact_kl_logs(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum::<f64>()
        .max(0.0)
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightStats {
    pub log_z: f64,
    pub z: f64,
    /// `Var_{p_T}(w)`
    pub var: f64,
    /// `Var(w) / Z^2`
    pub cv2: f64,
    /// `1 / (1 + CV^2)`
    pub ess_fraction: f64,
}

/// Exact moments of `w = (pi_ref / p_T) exp(beta r~)` under `p_T`.
pub fn exact_weight_stats(
    pi_ref: &TabularPolicy,
    p_t: &TabularPolicy,
    inst: &Instance,
    beta: f64,
) -> Result<WeightStats> {
    let e = inst.enumeration();
    weight_stats_from_logs(
        &pi_ref.log_probs(e),
        &p_t.log_probs(e),
        inst.tilde_rewards(),
        beta,
        |i| e.get(i).to_string(),
    )
}

pub fn weight_stats_from_logs(
    log_ref: &[f64],
    log_pt: &[f64],
    tilde: &[f64],
    beta: f64,
    name: impl Fn(usize) -> String,
) -> Result<WeightStats> {
    let mut log_w = Vec::with_capacity(log_ref.len());
    for i in 0..log_ref.len() {
        let target = log_ref[i] + beta * tilde[i];
        if target > f64::NEG_INFINITY && log_pt[i] == f64::NEG_INFINITY {
            return Err(Error::SupportViolation {
                trajectory: name(i),
                detail: "proposal has zero mass where the tilted target does not".into(),
            });
        }
        log_w.push(target - log_pt[i]);
    }
    let log_z = log_sum_exp(
        &log_w
            .iter()
            .zip(log_pt)
            .map(|(w, p)| w + p)
            .collect::<Vec<_>>(),
    );
    // Var/Z^2 = E_pT[(w/Z - 1)^2], evaluated in scaled form.
    let cv2: f64 = log_w
        .iter()
        .zip(log_pt)
        .filter(|(_, p)| **p > f64::NEG_INFINITY)
        .map(|(w, p)| p.exp() * ((w - log_z).exp() - 1.0).powi(2))
        .sum();
    let z = log_z.exp();
    Ok(WeightStats {
        log_z,
        z,
        var: cv2 * z * z,
        cv2,
        ess_fraction: 1.0 / (1.0 + cv2),
    })
}

/// Per-trajectory residual `anchor + log pi_theta - log pi_ref - beta r~`.
pub fn residuals(
    pi_theta: &TabularPolicy,
    pi_ref: &TabularPolicy,
    inst: &Instance,
    beta: f64,
    anchor: f64,
) -> Vec<f64> {
    let e = inst.enumeration();
    let lt = pi_theta.log_probs(e);
    let lr = pi_ref.log_probs(e);
    (0..e.len())
        .map(|i| anchor + lt[i] - lr[i] - beta * inst.tilde_rewards()[i])
        .collect()
}

/// `E_{o ~ sampling}[(log_z_value + log pi_theta - log pi_ref - beta r~)^2]`.
pub fn exact_tb_loss(
    pi_theta: &TabularPolicy,
    pi_ref: &TabularPolicy,
    inst: &Instance,
    beta: f64,
    log_z_value: f64,
    sampling: &[f64],
) -> f64 {
    residuals(pi_theta, pi_ref, inst, beta, log_z_value)
        .iter()
        .zip(sampling)
        .map(|(r, s)| s * r * r)
        .sum()
}

/// Which distribution the squared residual is averaged under.
#[derive(Clone, Copy, Debug)]
pub enum Sampling<'a> {
    /// Rollouts from the current policy; the gradient carries the score term.
    OnPolicy,
    /// A fixed, parameter-independent behaviour table.
    Fixed(&'a [f64]),
}

#[derive(Clone, Debug)]
pub struct ResidualGradient {
    pub loss: f64,
    pub gradient: LogitTable,
    /// `E[2 R]`, the derivative with respect to the anchor value.
    pub anchor_derivative: f64,
}

/// Enumeration-exact loss and gradient of the squared trajectory-balance
/// residual with respect to the policy logits.
///
/// On-policy, `grad E_pi[R^2] = E_pi[R^2 grad log pi] + E_pi[2 R grad log pi]`
/// since `grad R = grad log pi`. With `score_term = false` only the second
/// (semi-gradient) part is kept.
pub fn expected_residual_gradient(
    pi_theta: &TabularPolicy,
    pi_ref: &TabularPolicy,
    inst: &Instance,
    beta: f64,
    anchor: f64,
    sampling: Sampling<'_>,
    score_term: bool,
) -> ResidualGradient {
    let e = inst.enumeration();
    let res = residuals(pi_theta, pi_ref, inst, beta, anchor);
    let on_policy;
    let weights: &[f64] = match sampling {
        Sampling::OnPolicy => {
            on_policy = pi_theta.probs(e);
            &on_policy
        }
        Sampling::Fixed(mu) => mu,
    };
    let with_score = score_term && matches!(sampling, Sampling::OnPolicy);
    let mut acc = ScoreAccumulator::new(pi_theta.space());
    let mut loss = 0.0;
    let mut anchor_derivative = 0.0;
    for (i, (&w, &r)) in weights.iter().zip(&res).enumerate() {
        if w == 0.0 {
            continue;
        }
        loss += w * r * r;
        anchor_derivative += 2.0 * w * r;
        let coef = if with_score { r * r + 2.0 * r } else { 2.0 * r };
        acc.add(e.steps(i), w * coef);
    }
    ResidualGradient {
        loss,
        gradient: acc.finish(pi_theta),
        anchor_derivative,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{binary_counterexample, random_instance, COUNTEREXAMPLE_BETA};
    use crate::policy::TabularPolicy;

    #[test]
    fn beta_zero_partition_is_one() {
        let (inst, pi_ref) = random_instance(4, 3, 3, 0.3);
        assert!(exact_log_partition(&pi_ref, &inst, 0.0).abs() < 1e-12);
        let t = exact_tilted_target(&pi_ref, &inst, 0.0);
        for (a, b) in t.target_probs.iter().zip(pi_ref.probs(inst.enumeration())) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn counterexample_partition_and_target() {
        let (inst, pi_ref) = binary_counterexample();
        let log_z = exact_log_partition(&pi_ref, &inst, COUNTEREXAMPLE_BETA);
        assert!((log_z - 1.5f64.ln()).abs() < 1e-12);
        let t = exact_tilted_target(&pi_ref, &inst, COUNTEREXAMPLE_BETA);
        // enumeration order: "S" (reward 0), "0" (reward ln 2)
        assert!((t.target_probs[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((t.target_probs[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn naive_loop_agrees_with_lse() {
        let (inst, pi_ref) = random_instance(21, 3, 3, 0.4);
        let beta = 1.7;
        let probs = pi_ref.probs(inst.enumeration());
        let mut naive = 0.0f64;
        for (p, r) in probs.iter().zip(inst.tilde_rewards()) {
            naive += p * (beta * r).exp();
        }
        assert!((exact_log_partition(&pi_ref, &inst, beta) - naive.ln()).abs() < 1e-10);
    }

    #[test]
    fn shift_is_absorbed_into_partition() {
        let (inst, pi_ref) = random_instance(9, 2, 4, 0.3);
        let beta = 2.0;
        let shifted = inst.with_affine(inst.prompt().affine_a, inst.prompt().affine_b + 0.7).unwrap();
        let a = exact_tilted_target(&pi_ref, &inst, beta);
        let b = exact_tilted_target(&pi_ref, &shifted, beta);
        assert!((b.log_z - a.log_z - beta * 0.7).abs() < 1e-12);
        for (x, y) in a.target_probs.iter().zip(&b.target_probs) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn kl_cases() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(exact_kl(&p, &p).unwrap(), 0.0);
        let hand = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
        let got = exact_kl(&[2.0 / 3.0, 1.0 / 3.0], &[0.5, 0.5]).unwrap();
        assert!((got - hand).abs() < 1e-15);
        assert!(matches!(
            exact_kl(&[0.5, 0.5], &[1.0, 0.0]),
            Err(Error::SupportViolation { .. })
        ));
    }

    #[test]
    fn weight_stats_cases() {
        let (inst, pi_ref) = binary_counterexample();
        let s = exact_weight_stats(&pi_ref, &pi_ref, &inst, 0.0).unwrap();
        assert!(s.var.abs() < 1e-15 && s.cv2.abs() < 1e-15);
        assert!((s.ess_fraction - 1.0).abs() < 1e-15);

        let s = exact_weight_stats(&pi_ref, &pi_ref, &inst, 1.0).unwrap();
        assert!((s.z - 1.5).abs() < 1e-12);
        assert!((s.var - 0.25).abs() < 1e-12);
        assert!((s.cv2 - 1.0 / 9.0).abs() < 1e-12);

        let cv: Vec<f64> = [0.5, 1.0, 2.0]
            .iter()
            .map(|&b| exact_weight_stats(&pi_ref, &pi_ref, &inst, b).unwrap().cv2)
            .collect();
        assert!(cv[0] < cv[1] && cv[1] < cv[2]);
    }

    #[test]
    fn change_of_measure_identity() {
        let (inst, pi_ref) = random_instance(33, 3, 3, 0.3);
        let p_t = crate::policy::tilt_policy(&pi_ref, &inst, 1.3);
        let beta = 1.1;
        let e = inst.enumeration();
        let lr = pi_ref.log_probs(e);
        let lp = p_t.log_probs(e);
        let ez: f64 = (0..e.len())
            .map(|i| lp[i].exp() * (lr[i] - lp[i] + beta * inst.tilde_rewards()[i]).exp())
            .sum();
        let z = exact_log_partition(&pi_ref, &inst, beta).exp();
        assert!((ez - z).abs() < 1e-12 * z.max(1.0));
    }

    #[test]
    fn support_violation_names_trajectory() {
        let err = weight_stats_from_logs(
            &[0.5f64.ln(), 0.5f64.ln()],
            &[0.0, f64::NEG_INFINITY],
            &[0.0, 1.0],
            1.0,
            |i| format!("traj{i}"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("traj1"));
    }

    #[test]
    fn counterexample_losses() {
        let (inst, pi_ref) = binary_counterexample();
        let beta = COUNTEREXAMPLE_BETA;
        let log_z = 1.5f64.ln();
        let policy_with = |p: f64| {
            let mut l = LogitTable::for_space(inst.space());
            // column 0 = token "0", column 1 = STOP
            l.set(0, 0, (p / (1.0 - p)).ln());
            TabularPolicy::from_logits(inst.space(), l).unwrap()
        };
        let target = policy_with(2.0 / 3.0);
        let on = |pol: &TabularPolicy| pol.probs(inst.enumeration());
        assert!(exact_tb_loss(&target, &pi_ref, &inst, beta, log_z, &on(&target)).abs() < 1e-12);
        let l23 = exact_tb_loss(&target, &pi_ref, &inst, beta, log_z - 2.0, &on(&target));
        assert!((l23 - 4.0).abs() < 1e-12);
        let p9 = policy_with(0.9);
        let l09 = exact_tb_loss(&p9, &pi_ref, &inst, beta, log_z - 2.0, &on(&p9));
        assert!((l09 - 3.627).abs() < 0.01, "{l09}");
        assert!(l09 < l23);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (inst, pi_ref) = random_instance(5, 2, 3, 0.4);
        let theta = TabularPolicy::random(inst.space(), 1.0, &mut crate::rng::StreamKey::root(6).stream());
        let beta = 1.3;
        let anchor = 0.4;
        let g = expected_residual_gradient(&theta, &pi_ref, &inst, beta, anchor, Sampling::OnPolicy, true);
        let loss_at = |pol: &TabularPolicy| {
            let probs = pol.probs(inst.enumeration());
            exact_tb_loss(pol, &pi_ref, &inst, beta, anchor, &probs)
        };
        let h = 1e-6;
        for k in 0..theta.logits().as_slice().len() {
            let mut dir = LogitTable::for_space(inst.space());
            dir.as_mut_slice()[k] = 1.0;
            let mut plus = theta.clone();
            plus.apply(&dir, h);
            let mut minus = theta.clone();
            minus.apply(&dir, -h);
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            assert!((fd - g.gradient.as_slice()[k]).abs() < 1e-6, "k={k} fd={fd} an={}", g.gradient.as_slice()[k]);
        }
    }
}
