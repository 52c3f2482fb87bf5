use std::path::Path;
use std::process::{Command, Output};

fn lipbc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lipbc"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("LIPBC_JOBS")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lipbc(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn field(record: &str, key: &str) -> f64 {
    record
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {record}"))
        .parse()
        .unwrap()
}

fn pendulum_pipeline(dir: &Path) {
    ok(dir, &["train-expert", "--env", "pendulum", "--seed", "1", "--out", "expert.lbcf"]);
    ok(dir, &["collect", "--expert-weights", "expert.lbcf", "--n-traj", "4", "--seed", "2", "--out", "data.lbcf"]);
    ok(
        dir,
        &[
            "train-bc", "--method", "lipsnet", "--dataset", "data.lbcf", "--steps", "60", "--eval-interval", "30",
            "--eval-episodes", "1", "--hidden", "16", "--seed", "3", "--out-weights", "w.lbcf", "--log", "log.csv",
        ],
    );
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = lipbc(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(lipbc(dir.path(), &["certify", "--bogus", "1"]).status.code(), Some(2));
}

#[test]
fn missing_and_corrupt_artifacts_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["certify", "--weights", "w.lbcf", "--gamma", "0.9", "--rmax", "1", "--eps", "0.1"];
    let out = lipbc(dir.path(), &args);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kind=missing-artifact"));
    std::fs::write(dir.path().join("w.lbcf"), b"not a container").unwrap();
    assert_eq!(lipbc(dir.path(), &args).status.code(), Some(4));
}

#[test]
fn certify_prints_the_substituted_alpha_for_a_categorical_head() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["train-expert", "--env", "cartpole", "--seed", "0", "--out", "w.lbcf"]);
    let rec = ok(dir.path(), &["certify", "--weights", "w.lbcf", "--gamma", "0.9", "--rmax", "1", "--eps", "0.1", "--head", "categorical"]);
    assert!(rec.starts_with("certificate "));
    let alpha = field(&rec, "alpha");
    assert!((alpha - 1.0 / (0.1f64 * 0.1)).abs() / 100.0 < 1e-12);
    let (l_pi, theta) = (field(&rec, "l_pi"), field(&rec, "theta"));
    assert!((theta - alpha * l_pi * 0.1).abs() <= 1e-12 * theta);
    let zero = ok(dir.path(), &["certify", "--weights", "w.lbcf", "--gamma", "0.9", "--rmax", "1", "--eps", "0"]);
    assert_eq!(field(&zero, "theta"), 0.0);
    let wrong = lipbc(dir.path(), &["certify", "--weights", "w.lbcf", "--gamma", "0.9", "--rmax", "1", "--eps", "0.1", "--head", "deterministic"]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn pipeline_outputs_carry_verifiable_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pendulum_pipeline(d);
    for f in ["expert.lbcf", "data.lbcf", "w.lbcf", "log.csv"] {
        assert!(d.join(format!("{f}.manifest")).exists(), "{f} has no manifest");
    }
    let log = std::fs::read_to_string(d.join("log.csv")).unwrap();
    assert!(log.starts_with("step,train_loss,aux_loss,eval_score\n"));

    // tampering is detected by downstream subcommands
    let mut bytes = std::fs::read(d.join("data.lbcf")).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(d.join("data.lbcf"), bytes).unwrap();
    let out = lipbc(d, &["train-bc", "--method", "vanilla", "--dataset", "data.lbcf", "--steps", "5", "--out-weights", "v.lbcf"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn rerunning_from_a_manifest_reproduces_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pendulum_pipeline(d);
    let first = std::fs::read(d.join("w.lbcf")).unwrap();
    std::fs::remove_file(d.join("w.lbcf")).unwrap();
    std::fs::copy(d.join("w.lbcf.manifest"), d.join("replay.cfg")).unwrap();
    ok(d, &["--config", "replay.cfg", "train-bc"]);
    assert_eq!(std::fs::read(d.join("w.lbcf")).unwrap(), first);
}

#[test]
fn evaluate_is_deterministic_under_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pendulum_pipeline(d);
    std::fs::write(
        d.join("sweep.cfg"),
        "[evaluate]\nenv = pendulum\nvictims = lipsnet:3:w.lbcf\nattacks = none, random, adversarial, rs\n\
         noise_levels = 0.01\nattack_models = 1\nepisodes_per_model = 2\nrs_sgld_steps = 5\n\
         adversary_steps = 10\nadversary_rollout_episodes = 1\nrs_updates = 1\nrs_steps_per_env = 32\nrs_envs = 1\nrs_epochs = 1\nout = out\n",
    )
    .unwrap();
    ok(d, &["evaluate", "--config", "sweep.cfg", "--seed", "7"]);
    let csv = std::fs::read(d.join("out/report.csv")).unwrap();
    let svg = std::fs::read(d.join("out/pendulum_linf_worstcase.svg")).unwrap();
    ok(d, &["evaluate", "--config", "sweep.cfg", "--seed", "7"]);
    assert_eq!(std::fs::read(d.join("out/report.csv")).unwrap(), csv);
    assert_eq!(std::fs::read(d.join("out/pendulum_linf_worstcase.svg")).unwrap(), svg);
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 4);
}

#[test]
fn evaluate_reports_missing_attack_models() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pendulum_pipeline(d);
    std::fs::create_dir(d.join("attacks")).unwrap();
    std::fs::write(
        d.join("sweep.cfg"),
        "[evaluate]\nenv = pendulum\nvictims = lipsnet:3:w.lbcf\nattacks = adversarial\nnoise_levels = 0.01\nattack_dir = attacks\nout = out\n",
    )
    .unwrap();
    assert_eq!(lipbc(d, &["evaluate", "--config", "sweep.cfg"]).status.code(), Some(3));
    assert!(!d.join("out").exists());
}
