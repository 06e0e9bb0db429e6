//! Run configuration: a TOML document with a strict schema. Unknown keys are
//! rejected and every cross-field constraint is checked in [`RunConfig::validate`]
//! before any computation starts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::amortizer::FitOptions;
use crate::env::{Enumeration, Instance, Prompt, RewardSpec, TrajectorySpace, DEFAULT_ENUMERATION_CAP};
use crate::error::{Error, Result};
use crate::estimator::LabelOptions;
use crate::policy::{tilt_policy, TabularPolicy};
use crate::rng::{uniform, StreamKey};
use crate::trainers::{GradientEstimator, Objective, PolicyInit, TrainConfig};

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "ANCHORLAB_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub id: String,
    #[serde(default)]
    pub features: Vec<f64>,
    /// Key into the `rewards` table.
    pub reward: String,
    #[serde(default = "one")]
    pub affine_a: f64,
    #[serde(default)]
    pub affine_b: f64,
}

fn one() -> f64 {
    1.0
}

/// Seeded prompt family: each generated prompt gets uniform features in
/// `[-1, 1]`, a hash-density reward with its own seed, and an affine offset
/// `b = b_weights . features` so that the log-partition depends on features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedPrompts {
    pub count: usize,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
    pub feature_dim: usize,
    pub density: f64,
    #[serde(default = "one")]
    pub affine_a: f64,
    #[serde(default)]
    pub b_weights: Vec<f64>,
}

fn default_prefix() -> String {
    "g".into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceKind {
    Uniform,
    /// Logits drawn uniformly from `[-scale, scale]`.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub kind: ReferenceKind,
    #[serde(default = "one")]
    pub scale: f64,
    /// Optional extra tilt `exp(bias_strength)` on trajectories matching
    /// these region patterns.
    #[serde(default)]
    pub bias_regions: Vec<String>,
    #[serde(default)]
    pub bias_strength: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            kind: ReferenceKind::Uniform,
            scale: 1.0,
            bias_regions: Vec::new(),
            bias_strength: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalConfig {
    /// Proposal is the reference tilted by `exp(tilt * r)` toward reward-1
    /// trajectories; 0 keeps the reference.
    #[serde(default)]
    pub tilt: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorMode {
    /// Frozen Stage-2 amortizer.
    Amortizer,
    /// Enumeration-exact log-partition; Stage 2 is skipped.
    Exact,
    /// Raw Stage-1 labels per prompt; Stage 2 is skipped.
    Labels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage3Config {
    pub objective: Objective,
    pub anchor: AnchorMode,
    pub group_size: usize,
    pub lr_policy: f64,
    pub lr_partition: f64,
    pub steps: usize,
    pub score_term: bool,
    pub estimator: GradientEstimator,
    pub init: PolicyInit,
    pub k: u32,
    /// Length-normalized log-likelihood ratio in the residual (off by default).
    pub length_normalized: bool,
}

impl Default for Stage3Config {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            objective: t.objective,
            anchor: AnchorMode::Amortizer,
            group_size: t.group_size,
            lr_policy: t.lr_policy,
            lr_partition: t.lr_partition,
            steps: t.steps,
            score_term: t.score_term,
            estimator: t.estimator,
            init: t.init,
            k: t.k,
            length_normalized: t.length_normalized,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub axis: Option<String>,
    pub beta: Vec<f64>,
    pub n: Vec<usize>,
    pub proposal_strength: Vec<f64>,
    pub objective: Vec<Objective>,
    /// Stage-1 label replications per cell for the variance column.
    pub replications: usize,
    /// Paired training seeds per cell (offsets of the global seed).
    pub train_seeds: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axis: None,
            beta: Vec::new(),
            n: Vec::new(),
            proposal_strength: Vec::new(),
            objective: Vec::new(),
            replications: 200,
            train_seeds: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NStudyConfig {
    pub pool_size: usize,
    pub subsample_sizes: Vec<usize>,
    pub replications: usize,
}

impl Default for NStudyConfig {
    fn default() -> Self {
        Self {
            pool_size: 32,
            subsample_sizes: vec![2, 4, 8, 16],
            replications: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaMode {
    /// One offset shared by all prompts.
    Constant,
    /// One offset per prompt.
    PerPrompt,
    /// Offsets that vary across trajectories of a prompt.
    Trajectory,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    None,
    /// Geometric-mean aggregator divides the log-weight sum by `N - 1`.
    GmOffByOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub replications: usize,
    pub envelope_draws: usize,
    pub training_steps: usize,
    pub eta_mode: EtaMode,
    pub fault: Fault,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            replications: 100_000,
            envelope_draws: 200,
            training_steps: 5000,
            eta_mode: EtaMode::Constant,
            fault: Fault::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub beta: f64,
    pub space: TrajectorySpace,
    #[serde(default = "default_cap")]
    pub enumeration_cap: u64,
    #[serde(default)]
    pub rewards: BTreeMap<String, RewardSpec>,
    #[serde(default)]
    pub prompts: Vec<PromptConfig>,
    #[serde(default)]
    pub generate: Option<GeneratedPrompts>,
    #[serde(default)]
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub proposal: ProposalConfig,
    #[serde(default)]
    pub stage1: LabelOptions,
    #[serde(default)]
    pub stage2: FitOptions,
    #[serde(default)]
    pub stage3: Stage3Config,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub nstudy: NStudyConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

fn default_cap() -> u64 {
    DEFAULT_ENUMERATION_CAP
}

/// Materialized prompts with their reference and proposal policies.
#[derive(Clone, Debug)]
pub struct Environment {
    pub enumeration: Arc<Enumeration>,
    pub instances: Vec<Instance>,
    pub references: Vec<TabularPolicy>,
    pub proposals: Vec<TabularPolicy>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Output directory: explicit argument, then the environment variable,
    /// then the config, then `out`.
    pub fn resolve_output_dir(&self, explicit: Option<&Path>) -> PathBuf {
        if let Some(p) = explicit {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(p);
        }
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn train_config(&self) -> TrainConfig {
        let s = &self.stage3;
        TrainConfig {
            objective: s.objective,
            beta: self.beta,
            group_size: s.group_size,
            lr_policy: s.lr_policy,
            lr_partition: s.lr_partition,
            steps: s.steps,
            seed: self.seed,
            score_term: s.score_term,
            estimator: s.estimator,
            init: s.init,
            k: s.k,
            length_normalized: s.length_normalized,
            ..TrainConfig::default()
        }
    }

    /// Explicit prompts followed by generated ones.
    pub fn all_prompts(&self) -> Result<(Vec<Prompt>, BTreeMap<String, RewardSpec>)> {
        let mut rewards = self.rewards.clone();
        let mut prompts = Vec::new();
        for p in &self.prompts {
            prompts.push(Prompt::new(p.id.clone(), p.features.clone(), p.reward.clone(), p.affine_a, p.affine_b)?);
        }
        if let Some(g) = &self.generate {
            let mut rng = StreamKey::root(self.seed).child("generate").stream();
            for i in 0..g.count {
                let id = format!("{}{i:03}", g.id_prefix);
                let features: Vec<f64> = (0..g.feature_dim).map(|_| 2.0 * uniform(&mut rng) - 1.0).collect();
                let reward_seed = (uniform(&mut rng) * 2f64.powi(52)) as u64;
                let b: f64 = g.b_weights.iter().zip(&features).map(|(w, x)| w * x).sum();
                let key = format!("{id}-reward");
                rewards.insert(
                    key.clone(),
                    RewardSpec::SeededHashDensity {
                        density: g.density,
                        seed: reward_seed,
                    },
                );
                prompts.push(Prompt::new(id, features, key, g.affine_a, b)?);
            }
        }
        Ok((prompts, rewards))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        self.space.check_cap(self.enumeration_cap)?;
        if let Some(g) = &self.generate {
            if !(0.0..=1.0).contains(&g.density) {
                return bad("generate.density must lie in [0, 1]".into());
            }
            if !g.b_weights.is_empty() && g.b_weights.len() != g.feature_dim {
                return bad("generate.b_weights must have feature_dim entries".into());
            }
        }
        let (prompts, rewards) = self.all_prompts()?;
        if prompts.is_empty() {
            return bad("no prompts configured".into());
        }
        let dim = prompts[0].features.len();
        let mut seen = std::collections::BTreeSet::new();
        for p in &prompts {
            if p.id.contains(',') || p.id.contains('\n') || p.id.is_empty() {
                return bad(format!("prompt id {:?} must be non-empty without commas or newlines", p.id));
            }
            if !seen.insert(p.id.clone()) {
                return bad(format!("duplicate prompt id {:?}", p.id));
            }
            p.validate(Some(dim))?;
            let spec = rewards
                .get(&p.reward_spec_ref)
                .ok_or_else(|| Error::Config(format!("prompt {} references unknown reward {:?}", p.id, p.reward_spec_ref)))?;
            spec.compile(&self.space)?;
        }
        if !self.reference.bias_regions.is_empty() {
            RewardSpec::MultiModalRegions {
                regions: self.reference.bias_regions.clone(),
            }
            .compile(&self.space)?;
        }
        if self.stage1.n == 0 {
            return bad("stage1.n must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.stage2.val_fraction) {
            return bad("stage2.val_fraction must lie in [0, 1)".into());
        }
        self.train_config().validate()?;
        if self.stage3.anchor == AnchorMode::Amortizer && self.stage3.objective == Objective::Disa {
            let n_val = if prompts.len() >= 3 && self.stage2.val_fraction > 0.0 {
                ((prompts.len() as f64 * self.stage2.val_fraction).round() as usize).clamp(1, prompts.len() - 2)
            } else {
                0
            };
            if prompts.len() - n_val < 2 {
                return bad("amortizer anchor needs at least 2 training prompts; use anchor = \"exact\"".into());
            }
        }
        if let Some(axis) = &self.sweep.axis {
            SweepAxis::parse(axis)?;
        }
        let ns = &self.nstudy;
        if ns.subsample_sizes.iter().any(|&m| m == 0 || m >= ns.pool_size) {
            return bad("nstudy.subsample_sizes must lie in 1..pool_size".into());
        }
        Ok(())
    }

    /// Builds instances, references and proposals for every prompt.
    pub fn environment(&self) -> Result<Environment> {
        self.environment_with(self.proposal.tilt, self.seed)
    }

    /// Same as [`environment`](Self::environment) with an explicit proposal tilt.
    pub fn environment_with(&self, tilt: f64, seed: u64) -> Result<Environment> {
        let e = Arc::new(self.space.enumerate_with_cap(self.enumeration_cap)?);
        let (prompts, rewards) = self.all_prompts()?;
        let bias = if self.reference.bias_regions.is_empty() || self.reference.bias_strength == 0.0 {
            None
        } else {
            Some(RewardSpec::MultiModalRegions {
                regions: self.reference.bias_regions.clone(),
            })
        };
        let mut instances = Vec::with_capacity(prompts.len());
        let mut references = Vec::with_capacity(prompts.len());
        let mut proposals = Vec::with_capacity(prompts.len());
        for p in prompts {
            let spec = &rewards[&p.reward_spec_ref];
            let mut pi_ref = match self.reference.kind {
                ReferenceKind::Uniform => TabularPolicy::uniform(&self.space),
                ReferenceKind::Random => TabularPolicy::random(
                    &self.space,
                    self.reference.scale,
                    &mut StreamKey::for_prompt(seed, &p.id, "reference").stream(),
                ),
            };
            if let Some(b) = &bias {
                let bias_inst = Instance::new(p.clone(), b, e.clone())?;
                pi_ref = tilt_policy(&pi_ref, &bias_inst, self.reference.bias_strength);
            }
            let inst = Instance::new(p, spec, e.clone())?;
            let p_t = if tilt == 0.0 {
                pi_ref.clone()
            } else {
                tilt_policy(&pi_ref, &inst, tilt)
            };
            instances.push(inst);
            references.push(pi_ref);
            proposals.push(p_t);
        }
        Ok(Environment {
            enumeration: e,
            instances,
            references,
            proposals,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Beta,
    N,
    ProposalStrength,
    Objective,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SweepAxis::Beta),
            "N" | "n" => Ok(SweepAxis::N),
            "proposal_strength" => Ok(SweepAxis::ProposalStrength),
            "objective" => Ok(SweepAxis::Objective),
            _ => Err(Error::Config(format!(
                "unknown sweep axis {s:?}; expected beta, N, proposal_strength or objective"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Beta => "beta",
            SweepAxis::N => "N",
            SweepAxis::ProposalStrength => "proposal_strength",
            SweepAxis::Objective => "objective",
        }
    }
}
