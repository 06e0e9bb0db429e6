use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_anchorlab");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut c = Command::new(BIN);
    c.args(args).env_remove("ANCHORLAB_OUT");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

const VERIFY_BASE: &str = r#"
seed = 2
beta = 1.0

[space]
alphabet_size = 1
max_len = 1

[rewards.binary]
kind = "explicit-set"
trajectories = ["0"]

[[prompts]]
id = "binary"
reward = "binary"
affine_a = 0.6931471805599453

[stage3]
anchor = "exact"

[verify]
replications = 20000
envelope_draws = 20
training_steps = 2000
"#;

fn write_cfg(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn pipeline_succeeds_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("counterexample.cfg");
    let out = run(&["pipeline", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    for f in ["manifest.json", "labels.csv", "train.csv", "summary.json", "policy.ckpt", "oracle.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn environment_variable_sets_output_and_flag_overrides_it() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("counterexample.cfg");
    let cfg = cfg.to_str().unwrap();
    let out = run(&["oracle-dump", "--config", cfg], &[("ANCHORLAB_OUT", env_dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert!(env_dir.path().join("oracle.csv").exists());
    let out = run(
        &["oracle-dump", "--config", cfg, "--out", flag_dir.path().to_str().unwrap()],
        &[("ANCHORLAB_OUT", env_dir.path())],
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(flag_dir.path().join("oracle.csv").exists());
}

#[test]
fn malformed_or_missing_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_cfg(dir.path(), "bad.cfg", "beta = 1.0\n[space]\nalphabet_size = 2\nmax_len = 2\nbogus = 1\n");
    let out = run(&["pipeline", "--config", bad.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
    let out = run(&["pipeline", "--config", dir.path().join("absent.cfg").to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["nstudy"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = configs().join("counterexample.cfg");
    let out = run(&["sweep", "--config", cfg.to_str().unwrap(), "--axis", "temperature"], &[]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
}

#[test]
fn injected_geometric_mean_fault_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "fault.cfg", &format!("{VERIFY_BASE}fault = \"gm-off-by-one\"\n"));
    let out = run(&["verify-props", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], &[]);
    let t = text(&out);
    assert_eq!(out.status.code(), Some(1), "{t}");
    assert!(t.contains("FAIL") && t.contains("geometric-mean"), "{t}");
    assert!(dir.path().join("verify.json").exists());
}

#[test]
fn clean_verification_passes_and_trajectory_mode_skips_envelope() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "ok.cfg", VERIFY_BASE);
    let out = run(&["verify-props", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], &[]);
    let t = text(&out);
    assert_eq!(out.status.code(), Some(0), "{t}");
    assert!(!t.contains("FAIL"), "{t}");

    let cfg = write_cfg(dir.path(), "traj.cfg", &format!("{VERIFY_BASE}eta_mode = \"trajectory\"\n"));
    let out = run(&["verify-props", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], &[]);
    let t = text(&out);
    assert!(t.lines().any(|l| l.starts_with("SKIP")), "{t}");
}

#[test]
fn metrics_reads_pipeline_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("counterexample.cfg");
    let (cfg, d) = (cfg.to_str().unwrap(), dir.path().to_str().unwrap());
    assert_eq!(run(&["pipeline", "--config", cfg, "--out", d], &[]).status.code(), Some(0));
    let out = run(&["metrics", "--config", cfg, "--out", d], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert!(text(&out).contains("binary pass@"));
    let out = run(&["metrics", "--config", cfg, "--out", d, "--checkpoint", "/nonexistent/policy.ckpt"], &[]);
    assert_eq!(out.status.code(), Some(1));
}
