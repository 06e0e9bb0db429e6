//! End-to-end orchestration and artifact emission: the three-stage
//! pipeline, parameter sweeps, the sample-count study, oracle dumps and
//! checkpoint metrics.
//!
//! Every file is written to a temporary sibling and renamed into place. The
//! pipeline manifest lists each emitted file with its SHA-256 and contains no
//! timestamps, so identical inputs give byte-identical manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::amortizer::{fit, label_manifest, sigma_g, Amortizer, LabelPoint};
use crate::config::{AnchorMode, Environment, RunConfig, SweepAxis};
use crate::error::{Error, Result};
use crate::estimator::{mean, stage1_label, variance, variance_bias_study, Aggregator, IsLabel, Replications, StudyPrompt, WeightTable};
use crate::metrics::{mass_on_correct, DiversityReport};
use crate::oracle::{entropy, exact_kl_logs, exact_tilted_target, exact_weight_stats};
use crate::policy::{read_checkpoint, write_checkpoint, TabularPolicy};
use crate::rng::StreamKey;
use crate::trainers::{run_training, Anchor, Objective, TrainOutcome, TrainPrompt};

pub const LABELS_FILE: &str = "labels.csv";
pub const AMORTIZER_FILE: &str = "amortizer.ckpt";
pub const TRAIN_FILE: &str = "train.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ORACLE_FILE: &str = "oracle.csv";
pub const POLICY_FILE: &str = "policy.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub complete: bool,
    pub seed: u64,
    /// Stream-key patterns used by each stage.
    pub streams: BTreeMap<String, String>,
    pub stages: Vec<StageStatus>,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    /// Checks that every listed file exists under `dir` with the recorded hash.
    pub fn verify_files(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            let p = dir.join(&f.path);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if sha256_hex(&bytes) != f.sha256 {
                return Err(Error::Contract(format!("hash mismatch for {}", f.path)));
            }
        }
        Ok(())
    }
}

/// Collects files written into one output directory.
struct ArtifactWriter {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl ArtifactWriter {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), contents)?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileEntry {
            path: name.to_string(),
            sha256: sha256_hex(contents),
            bytes: contents.len() as u64,
        });
        Ok(())
    }
}

fn csv_float(x: f64) -> String {
    x.to_string()
}

pub const LABELS_HEADER: &str = "prompt_id,log_z_hat,aggregator,n,measured_cv2,ess,degenerate,rng_key";

pub fn labels_csv(labels: &[IsLabel]) -> String {
    let mut s = format!("{LABELS_HEADER}\n");
    for l in labels {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            l.prompt_id,
            csv_float(l.log_z_hat),
            l.aggregator,
            l.n,
            csv_float(l.measured_cv2),
            csv_float(l.ess),
            l.degenerate,
            l.rng_key
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleRow {
    pub prompt_id: String,
    pub beta: f64,
    pub log_z: f64,
    /// Weight CV^2 under the configured proposal.
    pub cv2: f64,
    pub ess_fraction: f64,
    pub target_entropy: f64,
    /// Number of reward-1 trajectories.
    pub mode_count: usize,
}

pub const ORACLE_HEADER: &str = "prompt_id,beta,log_z,cv2,ess_fraction,target_entropy,mode_count";

pub fn oracle_rows(env: &Environment, beta: f64) -> Result<Vec<OracleRow>> {
    env.instances
        .par_iter()
        .zip(&env.references)
        .zip(&env.proposals)
        .map(|((inst, pi_ref), p_t)| {
            let stats = exact_weight_stats(pi_ref, p_t, inst, beta)?;
            let target = exact_tilted_target(pi_ref, inst, beta);
            Ok(OracleRow {
                prompt_id: inst.id().to_string(),
                beta,
                log_z: stats.log_z,
                cv2: stats.cv2,
                ess_fraction: stats.ess_fraction,
                target_entropy: entropy(&target.target_probs),
                mode_count: inst.correct_indices().len(),
            })
        })
        .collect()
}

pub fn oracle_csv(rows: &[OracleRow]) -> String {
    let mut s = format!("{ORACLE_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.prompt_id,
            csv_float(r.beta),
            csv_float(r.log_z),
            csv_float(r.cv2),
            csv_float(r.ess_fraction),
            csv_float(r.target_entropy),
            r.mode_count
        ));
    }
    s
}

/// Stage-1 output: one label per prompt and the reward-1 teacher samples.
pub struct Stage1 {
    pub labels: Vec<IsLabel>,
    pub sft_data: Vec<Vec<usize>>,
}

pub fn run_stage1(cfg: &RunConfig, env: &Environment) -> Result<Stage1> {
    let results: Vec<(IsLabel, Vec<usize>)> = env
        .instances
        .par_iter()
        .zip(&env.references)
        .zip(&env.proposals)
        .map(|((inst, pi_ref), p_t)| {
            let key = StreamKey::for_prompt(cfg.seed, inst.id(), "stage1");
            let (label, idx) = stage1_label(pi_ref, p_t, inst, cfg.beta, &cfg.stage1, &key)?;
            let correct = idx.into_iter().filter(|&i| inst.rewards()[i] == 1.0).collect();
            Ok((label, correct))
        })
        .collect::<Result<_>>()?;
    let (labels, sft_data) = results.into_iter().unzip();
    Ok(Stage1 { labels, sft_data })
}

pub struct Stage2 {
    pub amortizer: Amortizer,
    pub sigma_g: f64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

pub fn run_stage2(cfg: &RunConfig, env: &Environment, stage1: &Stage1) -> Result<Stage2> {
    if let Some(l) = stage1.labels.iter().find(|l| !l.log_z_hat.is_finite()) {
        return Err(Error::Contract(format!(
            "prompt {} has a non-finite Stage-1 label; raise stage1.n or the proposal tilt",
            l.prompt_id
        )));
    }
    let points: Vec<LabelPoint> = env
        .instances
        .iter()
        .zip(&stage1.labels)
        .map(|(inst, l)| LabelPoint {
            prompt_id: inst.id().to_string(),
            features: inst.prompt().features.clone(),
            target: l.log_z_hat,
        })
        .collect();
    let report = fit(&points, &cfg.stage2)?;
    let exact: Vec<(Vec<f64>, f64)> = env
        .instances
        .iter()
        .zip(&env.references)
        .map(|(inst, pi_ref)| {
            (
                inst.prompt().features.clone(),
                crate::oracle::exact_log_partition(pi_ref, inst, cfg.beta),
            )
        })
        .collect();
    let s = sigma_g(&report.amortizer, &exact)?;
    Ok(Stage2 {
        amortizer: report.amortizer,
        sigma_g: s,
        train_ids: report.train_ids,
        val_ids: report.val_ids,
    })
}

pub fn run_stage3(
    cfg: &RunConfig,
    env: &Environment,
    stage1: &Stage1,
    stage2: Option<&Stage2>,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut tc = cfg.train_config();
    tc.seed = seed;
    let prompts: Vec<TrainPrompt<'_>> = env
        .instances
        .iter()
        .zip(&env.references)
        .zip(&stage1.sft_data)
        .map(|((inst, pi_ref), data)| TrainPrompt {
            inst,
            pi_ref,
            sft_data: data.clone(),
        })
        .collect();
    let anchor = match cfg.stage3.anchor {
        AnchorMode::Exact => Anchor::Exact,
        AnchorMode::Labels => Anchor::Table(
            stage1
                .labels
                .iter()
                .map(|l| (l.prompt_id.clone(), l.log_z_hat))
                .collect(),
        ),
        AnchorMode::Amortizer => match stage2 {
            Some(s) => Anchor::Frozen(&s.amortizer),
            None => return Err(Error::Contract("amortizer anchor without a Stage-2 fit".into())),
        },
    };
    let needs_anchor = tc.objective == Objective::Disa;
    run_training(&tc, &prompts, needs_anchor.then_some(&anchor))
}

fn stage2_needed(cfg: &RunConfig) -> bool {
    cfg.stage3.anchor == AnchorMode::Amortizer
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub summary: serde_json::Value,
}

fn stream_patterns(cfg: &RunConfig) -> BTreeMap<String, String> {
    let s = cfg.seed;
    let mut m = BTreeMap::new();
    m.insert("prompt-generation".into(), format!("{s}/generate"));
    m.insert("reference".into(), format!("{s}/prompt:<id>/reference"));
    m.insert("stage1".into(), format!("{s}/prompt:<id>/stage1"));
    m.insert("stage2-split".into(), format!("{}/amortizer-split", cfg.stage2.split_seed));
    m.insert("stage3".into(), format!("{s}/prompt:<id>/train/<objective>/#<step>"));
    m
}

/// Runs Stages 1 to 3 and writes all artifacts into `dir`. On a stage error
/// the manifest is still written, flagged incomplete, and the error is
/// returned tagged with the stage name.
pub fn run_pipeline(cfg: &RunConfig, dir: &Path) -> Result<PipelineOutcome> {
    let mut w = ArtifactWriter::new(dir)?;
    let mut stages: Vec<StageStatus> = Vec::new();
    let result = pipeline_stages(cfg, &mut w, &mut stages);
    let complete = result.is_ok();
    let (failed_stage, err) = match result {
        Ok(summary) => (None, Ok(summary)),
        Err((stage, e)) => (Some(stage), Err(e)),
    };
    if let Some(stage) = failed_stage {
        stages.push(StageStatus {
            stage: stage.into(),
            status: format!("failed: {}", err.as_ref().err().expect("error present")),
        });
    }
    w.files.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        complete,
        seed: cfg.seed,
        streams: stream_patterns(cfg),
        stages,
        files: w.files.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    match (failed_stage, err) {
        (None, Ok(summary)) => Ok(PipelineOutcome {
            dir: dir.to_path_buf(),
            manifest,
            summary,
        }),
        (Some(stage), Err(e)) => Err(e.in_stage(stage)),
        _ => unreachable!(),
    }
}

type StageResult<T> = std::result::Result<T, (&'static str, Error)>;

fn pipeline_stages(cfg: &RunConfig, w: &mut ArtifactWriter, stages: &mut Vec<StageStatus>) -> StageResult<serde_json::Value> {
    let tag = |stage: &'static str| move |e: Error| (stage, e);
    let ok = |stages: &mut Vec<StageStatus>, stage: &str, status: &str| {
        stages.push(StageStatus {
            stage: stage.into(),
            status: status.into(),
        })
    };

    cfg.validate().map_err(tag("config"))?;
    let env = cfg.environment().map_err(tag("environment"))?;
    let oracle = oracle_rows(&env, cfg.beta).map_err(tag("oracle"))?;
    w.write(ORACLE_FILE, oracle_csv(&oracle).as_bytes()).map_err(tag("oracle"))?;
    ok(stages, "oracle", "ok");

    let s1 = run_stage1(cfg, &env).map_err(tag("stage1"))?;
    w.write(LABELS_FILE, labels_csv(&s1.labels).as_bytes()).map_err(tag("stage1"))?;
    ok(stages, "stage1", "ok");

    let s2 = if stage2_needed(cfg) {
        let s2 = run_stage2(cfg, &env, &s1).map_err(tag("stage2"))?;
        w.write(AMORTIZER_FILE, s2.amortizer.to_checkpoint().as_bytes()).map_err(tag("stage2"))?;
        ok(stages, "stage2", "ok");
        Some(s2)
    } else {
        let why = match cfg.stage3.anchor {
            AnchorMode::Exact => "skipped: exact anchor override",
            _ => "skipped: raw label anchor",
        };
        ok(stages, "stage2", why);
        None
    };

    let out = run_stage3(cfg, &env, &s1, s2.as_ref(), cfg.seed).map_err(tag("stage3"))?;
    w.write(TRAIN_FILE, out.run.to_csv().as_bytes()).map_err(tag("stage3"))?;
    let ids: Vec<&str> = env.instances.iter().map(|i| i.id()).collect();
    let entries: Vec<(&str, &TabularPolicy)> = ids.iter().copied().zip(&out.policies).collect();
    let ckpt = write_checkpoint(&entries, cfg.seed).map_err(tag("stage3"))?;
    w.write(POLICY_FILE, ckpt.as_bytes()).map_err(tag("stage3"))?;

    let prompts: Vec<serde_json::Value> = env
        .instances
        .iter()
        .zip(&out.policies)
        .zip(&oracle)
        .zip(&s1.labels)
        .zip(&out.run.finals)
        .map(|((((inst, pol), o), l), f)| {
            let probs = pol.probs(inst.enumeration());
            json!({
                "prompt_id": inst.id(),
                "exact_log_z": o.log_z,
                "stage1_label": l.log_z_hat,
                "anchor": s2.as_ref().and_then(|s| s.amortizer.predict(&inst.prompt().features).ok()),
                "final_kl_fwd": f.kl_fwd,
                "final_kl_rev": f.kl_rev,
                "final_mass_on_correct": mass_on_correct(&probs, inst).unwrap_or(f64::NAN),
                "final_distinct_correct_at_k": f.distinct_correct_at_k,
                "final_log_z_phi": f.log_z_phi,
            })
        })
        .collect();
    let summary = json!({
        "config": serde_json::to_value(cfg).expect("config serializes"),
        "train_config": out.run.config,
        "steps": out.run.records.len(),
        "initial": out.run.initial,
        "final": out.run.last(),
        "best_step": out.run.best_step,
        "stage2": s2.as_ref().map(|s| json!({
            "kind": s.amortizer.kind().to_string(),
            "train_mse": s.amortizer.train_mse(),
            "val_mse": s.amortizer.val_mse(),
            "sigma_g": s.sigma_g,
            "label_manifest": s.amortizer.label_manifest(),
            "train_prompts": s.train_ids,
            "val_prompts": s.val_ids,
        })),
        "prompts": prompts,
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    w.write(SUMMARY_FILE, text.as_bytes()).map_err(tag("stage3"))?;
    ok(stages, "stage3", "ok");
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub axis_value: String,
    pub seed: u64,
    pub prompt_id: String,
    pub metric: String,
    pub value: f64,
    pub status: String,
}

pub const SWEEP_HEADER: &str = "axis,axis_value,seed,prompt_id,metric,value,status";

impl SweepRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.axis,
            self.axis_value,
            self.seed,
            self.prompt_id,
            self.metric,
            csv_float(self.value),
            self.status.replace([',', '\n'], ";")
        )
    }
}

pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub failed_cells: usize,
    pub path: PathBuf,
}

fn sweep_cells(cfg: &RunConfig, axis: SweepAxis) -> Result<Vec<(String, RunConfig)>> {
    let s = &cfg.sweep;
    let cells: Vec<(String, RunConfig)> = match axis {
        SweepAxis::Beta => s
            .beta
            .iter()
            .map(|&b| {
                let mut c = cfg.clone();
                c.beta = b;
                (b.to_string(), c)
            })
            .collect(),
        SweepAxis::N => s
            .n
            .iter()
            .map(|&n| {
                let mut c = cfg.clone();
                c.stage1.n = n;
                (n.to_string(), c)
            })
            .collect(),
        SweepAxis::ProposalStrength => s
            .proposal_strength
            .iter()
            .map(|&t| {
                let mut c = cfg.clone();
                c.proposal.tilt = t;
                (t.to_string(), c)
            })
            .collect(),
        SweepAxis::Objective => s
            .objective
            .iter()
            .map(|&o| {
                let mut c = cfg.clone();
                c.stage3.objective = o;
                (o.to_string(), c)
            })
            .collect(),
    };
    if cells.is_empty() {
        return Err(Error::Config(format!("sweep axis {} has no values listed", axis.name())));
    }
    Ok(cells)
}

fn label_column(reps: &Replications, agg: Aggregator) -> Vec<f64> {
    match agg {
        Aggregator::Lse => reps.lse.clone(),
        Aggregator::Gm => reps.gm.clone(),
        Aggregator::LinearLog => reps.linear.iter().map(|z| z.ln()).collect(),
    }
}

/// Metrics of one sweep cell: oracle values, Stage-1 label replication
/// statistics, and final training metrics for each paired seed.
pub fn evaluate_cell(cfg: &RunConfig) -> Result<Vec<(u64, String, String, f64)>> {
    cfg.validate()?;
    let env = cfg.environment()?;
    let mut out = Vec::new();
    for (inst, (pi_ref, p_t)) in env.instances.iter().zip(env.references.iter().zip(&env.proposals)) {
        let stats = exact_weight_stats(pi_ref, p_t, inst, cfg.beta)?;
        // change-of-measure identity evaluated under this proposal
        let table = WeightTable::new(pi_ref, p_t, inst, cfg.beta);
        let pt = p_t.probs(inst.enumeration());
        let z_identity: f64 = table.log_w.iter().zip(&pt).map(|(lw, p)| p * lw.exp()).sum();
        let key = StreamKey::for_prompt(cfg.seed, inst.id(), "stage1").child("replications");
        let reps = Replications::run(&table, cfg.stage1.n, cfg.sweep.replications, &key);
        let labels = label_column(&reps, cfg.stage1.aggregator);
        let id = inst.id().to_string();
        for (m, v) in [
            ("exact_log_z", stats.log_z),
            ("log_z_under_proposal", z_identity.ln()),
            ("exact_cv2", stats.cv2),
            ("ess_fraction", stats.ess_fraction),
            ("label_mean", mean(&labels)),
            ("label_var", variance(&labels)),
        ] {
            out.push((cfg.seed, id.clone(), m.to_string(), v));
        }
    }
    let s1 = run_stage1(cfg, &env)?;
    let s2 = if stage2_needed(cfg) {
        Some(run_stage2(cfg, &env, &s1)?)
    } else {
        None
    };
    for k in 0..cfg.sweep.train_seeds.max(1) as u64 {
        let seed = cfg.seed.wrapping_add(k);
        let res = run_stage3(cfg, &env, &s1, s2.as_ref(), seed)?;
        for (inst, (f, pol)) in env.instances.iter().zip(res.run.finals.iter().zip(&res.policies)) {
            let probs = pol.probs(inst.enumeration());
            let id = inst.id().to_string();
            out.push((seed, id.clone(), "final_kl_fwd".into(), f.kl_fwd));
            out.push((seed, id.clone(), "final_kl_rev".into(), f.kl_rev));
            out.push((seed, id.clone(), "final_distinct_correct_at_k".into(), f.distinct_correct_at_k));
            out.push((seed, id, "final_mass_on_correct".into(), mass_on_correct(&probs, inst)?));
        }
    }
    Ok(out)
}

/// Runs one cell per axis value on a pool of `workers` threads and writes
/// `sweep-<axis>.csv`. A failing cell is recorded and the sweep continues.
pub fn run_sweep(cfg: &RunConfig, axis: SweepAxis, dir: &Path, workers: Option<usize>) -> Result<SweepOutcome> {
    let cells = sweep_cells(cfg, axis)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<(String, Result<Vec<(u64, String, String, f64)>>)> =
        pool.install(|| cells.par_iter().map(|(v, c)| (v.clone(), evaluate_cell(c))).collect());
    let mut rows = Vec::new();
    let mut failed = 0;
    for (v, r) in results {
        match r {
            Ok(metrics) => rows.extend(metrics.into_iter().map(|(seed, prompt_id, metric, value)| SweepRow {
                axis: axis.name().into(),
                axis_value: v.clone(),
                seed,
                prompt_id,
                metric,
                value,
                status: "ok".into(),
            })),
            Err(e) => {
                failed += 1;
                rows.push(SweepRow {
                    axis: axis.name().into(),
                    axis_value: v,
                    seed: cfg.seed,
                    prompt_id: String::new(),
                    metric: "cell".into(),
                    value: f64::NAN,
                    status: format!("error: {e}"),
                });
            }
        }
    }
    let mut text = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    let path = dir.join(format!("sweep-{}.csv", axis.name()));
    write_atomic(&path, text.as_bytes())?;
    Ok(SweepOutcome {
        rows,
        failed_cells: failed,
        path,
    })
}

// ---------------------------------------------------------------------------
// Sample-count study, oracle dump, checkpoint metrics

pub const NSTUDY_FILE: &str = "nstudy.csv";
pub const NSTUDY_AGGREGATE_FILE: &str = "nstudy_aggregate.csv";

pub fn run_nstudy(cfg: &RunConfig, dir: &Path) -> Result<crate::estimator::StudyTable> {
    cfg.validate()?;
    let env = cfg.environment()?;
    let prompts: Vec<StudyPrompt<'_>> = env
        .instances
        .iter()
        .zip(&env.references)
        .zip(&env.proposals)
        .map(|((inst, pi_ref), p_t)| StudyPrompt { inst, pi_ref, p_t })
        .collect();
    let ns = &cfg.nstudy;
    let table = variance_bias_study(
        &prompts,
        cfg.beta,
        ns.pool_size,
        &ns.subsample_sizes,
        ns.replications,
        &StreamKey::root(cfg.seed).child("nstudy"),
    )?;
    let mut rows = String::from("prompt_id,m,replications,var_log_z,rel_bias_mean,rel_bias_median,exact_log_z,exact_cv2\n");
    for r in &table.rows {
        rows.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.prompt_id,
            r.m,
            r.replication_count,
            csv_float(r.var_log_z),
            csv_float(r.rel_bias_mean),
            csv_float(r.rel_bias_median),
            csv_float(r.exact_log_z),
            csv_float(r.exact_cv2)
        ));
    }
    let mut agg = String::from("m,prompts,var_log_z_mean,var_log_z_std,rel_bias_mean,rel_bias_std,rel_bias_median_mean\n");
    for a in &table.aggregates {
        agg.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            a.m,
            a.prompts,
            csv_float(a.var_log_z_mean),
            csv_float(a.var_log_z_std),
            csv_float(a.rel_bias_mean),
            csv_float(a.rel_bias_std),
            csv_float(a.rel_bias_median_mean)
        ));
    }
    write_atomic(&dir.join(NSTUDY_FILE), rows.as_bytes())?;
    write_atomic(&dir.join(NSTUDY_AGGREGATE_FILE), agg.as_bytes())?;
    Ok(table)
}

pub fn run_oracle_dump(cfg: &RunConfig, dir: &Path) -> Result<Vec<OracleRow>> {
    cfg.validate()?;
    let env = cfg.environment()?;
    let rows = oracle_rows(&env, cfg.beta)?;
    write_atomic(&dir.join(ORACLE_FILE), oracle_csv(&rows).as_bytes())?;
    Ok(rows)
}

pub const METRICS_FILE: &str = "metrics.csv";

/// Recomputes diversity and target-distance metrics for every policy in a
/// checkpoint against the configured prompts.
pub fn run_checkpoint_metrics(cfg: &RunConfig, checkpoint: &Path, dir: &Path) -> Result<Vec<(DiversityReport, f64, f64)>> {
    cfg.validate()?;
    let text = std::fs::read_to_string(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let ckpt = read_checkpoint(&text)?;
    if ckpt.space != cfg.space {
        return Err(Error::Config("checkpoint space differs from the configured space".into()));
    }
    let env = cfg.environment()?;
    let by_id: BTreeMap<&str, usize> = env.instances.iter().enumerate().map(|(i, inst)| (inst.id(), i)).collect();
    let mut out = Vec::new();
    let mut csv = format!("{},kl_fwd,kl_rev\n", DiversityReport::CSV_HEADER);
    for (id, pol) in &ckpt.policies {
        let &i = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Config(format!("checkpoint prompt {id:?} is not in the config")))?;
        let inst = &env.instances[i];
        let rep = DiversityReport::compute(pol, inst, cfg.stage3.k)?;
        let lp = pol.log_probs(inst.enumeration());
        let target = exact_tilted_target(&env.references[i], inst, cfg.beta).log_probs();
        let (fwd, rev) = (exact_kl_logs(&lp, &target), exact_kl_logs(&target, &lp));
        csv.push_str(&format!("{},{},{}\n", rep.csv_row(), csv_float(fwd), csv_float(rev)));
        out.push((rep, fwd, rev));
    }
    write_atomic(&dir.join(METRICS_FILE), csv.as_bytes())?;
    Ok(out)
}

/// Label-set hash as recorded in amortizer checkpoints, for external audit.
pub fn labels_hash(labels: &[IsLabel], env: &Environment) -> String {
    let points: Vec<LabelPoint> = env
        .instances
        .iter()
        .zip(labels)
        .map(|(inst, l)| LabelPoint {
            prompt_id: inst.id().to_string(),
            features: inst.prompt().features.clone(),
            target: l.log_z_hat,
        })
        .collect();
    label_manifest(&points)
}
