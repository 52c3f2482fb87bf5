//! Subcommand implementations. Relative paths, in flags and config files
//! alike, are resolved against the working directory.

use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use lipbc_core::adversaries::{
    train_adversary, train_rs_critic, AdversaryTrainConfig, AttackKind, AttackModel, RsConfig,
};
use lipbc_core::bc_train::{self, Method, MethodConfig, Sr2lConfig, TrainConfig};
use lipbc_core::certificate::{alpha, MdpConstants, PerturbationBudget, PolicyClass};
use lipbc_core::envs::EnvId;
use lipbc_core::eval_harness::{self, attack_model_path, attack_train_seed, AttackSource, SweepConfig, Victim};
use lipbc_core::expert_data::{self, Dataset, Expert, ExpertConfig};
use lipbc_core::lipschitz_net::{HeadKind, LipsNetConfig, PolicyNetwork};
use lipbc_core::{Error, Norm, Result};

use crate::config::{parse_list, require, resolve, ConfigFile, Section};
use crate::manifest::{verify_input, RunManifest};
use crate::{AttackTrainArgs, CertifyArgs, CollectArgs, EvaluateArgs, TrainBcArgs, TrainExpertArgs};

pub struct Context {
    pub config: ConfigFile,
}

impl Context {
    pub fn new(path: Option<&Path>) -> Result<Self> {
        let config = match path {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        Ok(Self { config })
    }

    fn section(&self, name: &str) -> Section {
        self.config.section(name)
    }
}

fn parse_flag<T: std::str::FromStr>(flag: &Option<String>, name: &str) -> Result<Option<T>> {
    match flag {
        None => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|_| Error::Contract(format!("--{name}: cannot parse '{v}'"))),
    }
}

fn list_flag<T: std::str::FromStr>(flag: &Option<String>, section: &Section, key: &str) -> Result<Option<Vec<T>>> {
    match flag {
        Some(v) => parse_list(v).map(Some).map_err(|_| Error::Contract(format!("--{key}: cannot parse '{v}'"))),
        None => section.get_list(key),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn load_network(path: &Path) -> Result<PolicyNetwork> {
    verify_input(path)?;
    PolicyNetwork::load(path)
}

fn network_env(net: &PolicyNetwork) -> Result<EnvId> {
    net.env_id.parse().map_err(|_| Error::Schema(format!("weights name unknown environment '{}'", net.env_id)))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

pub fn train_expert(ctx: &Context, a: &TrainExpertArgs) -> Result<()> {
    let s = ctx.section("train-expert");
    let env: EnvId = require(parse_flag(&a.env, "env")?, &s, "env")?;
    let seed = resolve(a.seed, &s, "seed", 0)?;
    let out: PathBuf = require(a.out.clone(), &s, "out")?;
    let defaults = ExpertConfig::default();
    let cfg = ExpertConfig {
        max_env_steps: resolve(a.max_env_steps, &s, "max_env_steps", defaults.max_env_steps)?,
        eval_episodes: resolve(a.eval_episodes, &s, "eval_episodes", defaults.eval_episodes)?,
        ..defaults
    };
    info!("training {env} expert (seed {seed})");
    let expert = expert_data::train_expert(env, &cfg, seed)?;
    ensure_parent(&out)?;
    expert.save(&out)?;
    let mut m = RunManifest::new("train-expert", seed);
    m.set("env", env).set("out", out.display()).set("max_env_steps", cfg.max_env_steps).set("eval_episodes", cfg.eval_episodes);
    m.add_output(&out)?;
    m.write_sidecars(&[&out])?;
    info!("expert {} written to {}", expert.id(), out.display());
    Ok(())
}

pub fn collect(ctx: &Context, a: &CollectArgs) -> Result<()> {
    let s = ctx.section("collect");
    let weights: PathBuf = require(a.expert_weights.clone(), &s, "expert_weights")?;
    let n_traj = resolve(a.n_traj, &s, "n_traj", 100)?;
    let seed = resolve(a.seed, &s, "seed", 0)?;
    let out: PathBuf = require(a.out.clone(), &s, "out")?;
    verify_input(&weights)?;
    let expert = Expert::load(&weights)?;
    let env = match parse_flag::<EnvId>(&a.env, "env")?.or(s.get("env")?) {
        Some(e) if e != expert.env()? => {
            return Err(Error::Contract(format!("expert acts in {}, not {e}", expert.env()?)));
        }
        Some(e) => e,
        None => expert.env()?,
    };
    let ds = expert_data::collect(&expert, env, n_traj, seed)?;
    ensure_parent(&out)?;
    ds.save(&out)?;
    let mut m = RunManifest::new("collect", seed);
    m.set("env", env).set("expert_weights", weights.display()).set("n_traj", n_traj).set("out", out.display());
    m.add_input(&weights)?;
    m.add_output(&out)?;
    m.write_sidecars(&[&out])?;
    info!("{} records, mean return {:.2}, written to {}", ds.len(), ds.mean_return(), out.display());
    Ok(())
}

pub fn train_bc(ctx: &Context, a: &TrainBcArgs) -> Result<()> {
    let s = ctx.section("train-bc");
    let method: Method = require(parse_flag(&a.method, "method")?, &s, "method")?;
    let dataset: PathBuf = require(a.dataset.clone(), &s, "dataset")?;
    let seed = resolve(a.seed, &s, "seed", 0)?;
    let out: PathBuf = require(a.out_weights.clone(), &s, "out_weights")?;
    let log_path: Option<PathBuf> = a.log.clone().or(s.get("log")?);
    let lips_default = LipsNetConfig::default();
    let sr_default = Sr2lConfig::default();
    let mut m = RunManifest::new("train-bc", seed);
    let method_cfg = match method {
        Method::Vanilla => MethodConfig::Vanilla,
        Method::LipsNet => {
            let target = resolve(a.target_lipschitz, &s, "target_lipschitz", lips_default.target_lipschitz)?;
            let lambda = resolve(a.lambda, &s, "lambda", lips_default.aux_weight)?;
            m.set("target_lipschitz", target).set("lambda", lambda);
            MethodConfig::LipsNet(LipsNetConfig::new(target, lambda)?)
        }
        Method::Sr2l => {
            let eps = resolve(a.sr2l_eps, &s, "sr2l_eps", sr_default.epsilon)?;
            let weight = resolve(a.sr2l_weight, &s, "sr2l_weight", sr_default.reg_weight)?;
            let norm: Norm = resolve(parse_flag(&a.norm, "norm")?, &s, "norm", sr_default.norm)?;
            m.set("sr2l_eps", eps).set("sr2l_weight", weight).set("norm", norm);
            MethodConfig::Sr2l(Sr2lConfig { epsilon: eps, reg_weight: weight, norm, ..sr_default })
        }
    };
    let mut cfg = TrainConfig::new(method_cfg, seed);
    cfg.total_steps = resolve(a.steps, &s, "steps", cfg.total_steps)?;
    cfg.learning_rate = resolve(a.lr, &s, "lr", cfg.learning_rate)?;
    cfg.batch_size = resolve(a.batch_size, &s, "batch_size", cfg.batch_size)?;
    cfg.eval_interval = resolve(a.eval_interval, &s, "eval_interval", cfg.eval_interval)?;
    cfg.eval_episodes = resolve(a.eval_episodes, &s, "eval_episodes", cfg.eval_episodes)?;
    cfg.hidden = list_flag(&a.hidden, &s, "hidden")?;

    verify_input(&dataset)?;
    let ds = Dataset::load(&dataset)?;
    let split = expert_data::split(&ds, seed)?;
    info!("{method} on {} ({} train / {} val trajectories)", ds.env, split.train.n_trajectories(), split.val.n_trajectories());
    let outcome = bc_train::train(&cfg, &split, ds.env)?;
    info!("best checkpoint at step {} with eval score {:.2}", outcome.best.step, outcome.best.eval_score);

    ensure_parent(&out)?;
    outcome.best.network.save(&out)?;
    m.set("method", method)
        .set("dataset", dataset.display())
        .set("out_weights", out.display())
        .set("steps", cfg.total_steps)
        .set("lr", cfg.learning_rate)
        .set("batch_size", cfg.batch_size)
        .set("eval_interval", cfg.eval_interval)
        .set("eval_episodes", cfg.eval_episodes)
        .set("hidden", join(&cfg.hidden_for(ds.env)));
    m.add_input(&dataset)?;
    m.add_output(&out)?;
    let mut outputs = vec![out.as_path()];
    if let Some(log_path) = &log_path {
        ensure_parent(log_path)?;
        bc_train::save_log_csv(&outcome.log, log_path)?;
        m.set("log", log_path.display());
        m.add_output(log_path)?;
        outputs.push(log_path);
    }
    m.write_sidecars(&outputs)?;
    Ok(())
}

pub fn attack_train(ctx: &Context, a: &AttackTrainArgs) -> Result<()> {
    let s = ctx.section("attack-train");
    let weights: PathBuf = require(a.weights.clone(), &s, "weights")?;
    let kind: AttackKind = require(parse_flag(&a.kind, "kind")?, &s, "kind")?;
    if !kind.is_learned() {
        return Err(Error::Contract(format!("'{kind}' attacks have no model to train")));
    }
    let eps: Vec<f64> = list_flag(&a.eps, &s, "eps")?.ok_or_else(|| Error::Contract("missing required setting 'eps'".into()))?;
    let norm: Norm = resolve(parse_flag(&a.norm, "norm")?, &s, "norm", Norm::Linf)?;
    let models = resolve(a.models, &s, "models", 4)?;
    let method: String = resolve(a.method.clone(), &s, "method", "policy".to_string())?;
    let victim_seed = resolve(a.victim_seed, &s, "victim_seed", 0)?;
    let seed = resolve(a.seed, &s, "seed", 0)?;
    let out_dir: PathBuf = require(a.out_dir.clone(), &s, "out_dir")?;
    let mut adv_cfg = AdversaryTrainConfig::default();
    adv_cfg.steps = resolve(a.steps, &s, "steps", adv_cfg.steps)?;
    let mut rs_cfg = RsConfig::default();
    rs_cfg.n_updates = resolve(a.rs_updates, &s, "rs_updates", rs_cfg.n_updates)?;
    let budgets: Vec<PerturbationBudget> = eps.iter().map(|&e| PerturbationBudget::new(e, norm)).collect::<Result<_>>()?;

    let victim = load_network(&weights)?;
    let env = network_env(&victim)?;
    std::fs::create_dir_all(&out_dir)?;
    info!("training {models} {kind} model(s) for {} budget(s)", budgets.len());
    let written: Vec<Vec<PathBuf>> = match kind {
        AttackKind::Rs => (0..models)
            .into_par_iter()
            .map(|k| {
                let critic = AttackModel::Critic(train_rs_critic(&victim, env, &rs_cfg, attack_train_seed(seed, victim_seed, kind, k))?);
                budgets
                    .iter()
                    .map(|b| {
                        let path = attack_model_path(&out_dir, &method, victim_seed, kind, b, k);
                        critic.save(&path, b)?;
                        Ok(path)
                    })
                    .collect()
            })
            .collect::<Result<_>>()?,
        _ => budgets
            .par_iter()
            .flat_map(|b| (0..models).into_par_iter().map(move |k| (*b, k)))
            .map(|(b, k)| {
                let adv = train_adversary(&victim, env, b, &adv_cfg, attack_train_seed(seed, victim_seed, kind, k))?;
                let path = attack_model_path(&out_dir, &method, victim_seed, kind, &b, k);
                AttackModel::Adversary(adv).save(&path, &b)?;
                Ok(vec![path])
            })
            .collect::<Result<_>>()?,
    };
    let mut paths: Vec<PathBuf> = written.into_iter().flatten().collect();
    paths.sort();
    let mut m = RunManifest::new("attack-train", seed);
    m.set("weights", weights.display())
        .set("kind", kind)
        .set("eps", join(&eps))
        .set("norm", norm)
        .set("models", models)
        .set("method", &method)
        .set("victim_seed", victim_seed)
        .set("steps", adv_cfg.steps)
        .set("rs_updates", rs_cfg.n_updates)
        .set("out_dir", out_dir.display());
    m.add_input(&weights)?;
    for p in &paths {
        m.add_output(p)?;
    }
    m.write_sidecars(&paths.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    Ok(())
}

/// `method:seed:path` entries of the `victims` key.
fn parse_victim(spec: &str) -> Result<(String, u64, PathBuf)> {
    let mut parts = spec.splitn(3, ':');
    match (parts.next(), parts.next().map(str::parse::<u64>), parts.next()) {
        (Some(m), Some(Ok(seed)), Some(p)) if !m.is_empty() && !p.is_empty() => Ok((m.to_string(), seed, PathBuf::from(p))),
        _ => Err(Error::Contract(format!("victim '{spec}' is not method:seed:path"))),
    }
}

pub fn evaluate(ctx: &Context, a: &EvaluateArgs) -> Result<()> {
    let s = ctx.section("evaluate");
    let env: EnvId = require(None, &s, "env")?;
    let seed = resolve(a.seed, &s, "seed", 0)?;
    let out: PathBuf = require(a.out.clone(), &s, "out")?;
    let victim_specs: Vec<String> = s.get_list("victims")?.unwrap_or_default();
    if victim_specs.is_empty() {
        return Err(Error::Contract("evaluate needs at least one entry in 'victims'".into()));
    }
    let mut m = RunManifest::new("evaluate", seed);
    let mut victims = Vec::new();
    for spec in &victim_specs {
        let (method, vseed, path) = parse_victim(spec)?;
        let network = load_network(&path)?;
        if network_env(&network)? != env {
            return Err(Error::Contract(format!("{} acts in {}, sweep is over {env}", path.display(), network.env_id)));
        }
        m.add_input(&path)?;
        victims.push(Victim { method, seed: vseed, network });
    }
    let mut cfg = SweepConfig::new(env, victims, seed);
    cfg.attacks = s.get_list("attacks")?.unwrap_or(cfg.attacks);
    cfg.noise_levels = s.get_list("noise_levels")?.unwrap_or(cfg.noise_levels);
    cfg.norms = s.get_list("norms")?.unwrap_or(cfg.norms);
    cfg.episodes_per_model = resolve(a.episodes, &s, "episodes_per_model", cfg.episodes_per_model)?;
    cfg.attack_models = resolve(None, &s, "attack_models", cfg.attack_models)?;
    cfg.rs_sgld_steps = resolve(None, &s, "rs_sgld_steps", cfg.rs_sgld_steps)?;
    let attack_dir: Option<PathBuf> = a.attack_dir.clone().or(s.get("attack_dir")?);

    let mut adv = AdversaryTrainConfig::default();
    adv.steps = resolve(None, &s, "adversary_steps", adv.steps)?;
    adv.learning_rate = resolve(None, &s, "adversary_lr", adv.learning_rate)?;
    adv.batch_size = resolve(None, &s, "adversary_batch_size", adv.batch_size)?;
    adv.hidden = resolve(None, &s, "adversary_hidden", adv.hidden)?;
    adv.rollout_episodes = resolve(None, &s, "adversary_rollout_episodes", adv.rollout_episodes)?;
    let mut rs = RsConfig::default();
    rs.n_updates = resolve(None, &s, "rs_updates", rs.n_updates)?;
    rs.steps_per_env = resolve(None, &s, "rs_steps_per_env", rs.steps_per_env)?;
    rs.n_envs = resolve(None, &s, "rs_envs", rs.n_envs)?;
    rs.epochs = resolve(None, &s, "rs_epochs", rs.epochs)?;
    rs.learning_rate = resolve(None, &s, "rs_lr", rs.learning_rate)?;
    rs.minibatch = resolve(None, &s, "rs_minibatch", rs.minibatch)?;
    rs.hidden = s.get_list("rs_hidden")?.unwrap_or(rs.hidden);

    m.set("env", env)
        .set("out", out.display())
        .set("victims", victim_specs.join(","))
        .set("attacks", join(&cfg.attacks))
        .set("noise_levels", join(&cfg.noise_levels))
        .set("norms", join(&cfg.norms))
        .set("episodes_per_model", cfg.episodes_per_model)
        .set("attack_models", cfg.attack_models)
        .set("rs_sgld_steps", cfg.rs_sgld_steps);
    match &attack_dir {
        Some(dir) => {
            m.set("attack_dir", dir.display());
            cfg.attack_source = AttackSource::Directory(dir.clone());
        }
        None => {
            m.set("adversary_steps", adv.steps)
                .set("adversary_lr", adv.learning_rate)
                .set("adversary_batch_size", adv.batch_size)
                .set("adversary_hidden", adv.hidden)
                .set("adversary_rollout_episodes", adv.rollout_episodes)
                .set("rs_updates", rs.n_updates)
                .set("rs_steps_per_env", rs.steps_per_env)
                .set("rs_envs", rs.n_envs)
                .set("rs_epochs", rs.epochs)
                .set("rs_lr", rs.learning_rate)
                .set("rs_minibatch", rs.minibatch)
                .set("rs_hidden", join(&rs.hidden));
            cfg.attack_source = AttackSource::Inline { adversary: adv, rs };
        }
    }

    info!(
        "sweeping {} victim(s) × {} attack(s) × {} budget(s) × {} norm(s)",
        cfg.victims.len(),
        cfg.attacks.len(),
        cfg.noise_levels.len(),
        cfg.norms.len()
    );
    let report = eval_harness::run_sweep(&cfg)?;
    let files = eval_harness::emit_outputs(&report, &out)?;
    for f in &files {
        m.add_output(f)?;
    }
    m.write_sidecars(&files.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    info!("report written to {}", out.display());
    Ok(())
}

pub fn certify(ctx: &Context, a: &CertifyArgs) -> Result<()> {
    let s = ctx.section("certify");
    let weights: PathBuf = require(a.weights.clone(), &s, "weights")?;
    let gamma: f64 = require(a.gamma, &s, "gamma")?;
    let rmax: f64 = require(a.rmax, &s, "rmax")?;
    let eps: f64 = require(a.eps, &s, "eps")?;
    let norm: Norm = resolve(parse_flag(&a.norm, "norm")?, &s, "norm", Norm::Linf)?;
    let head: Option<HeadKind> = parse_flag(&a.head, "head")?.or(s.get("head")?);

    let net = load_network(&weights)?;
    if let Some(h) = head {
        if h != net.head {
            return Err(Error::Contract(format!("--head {h} does not match the {} head of {}", net.head, weights.display())));
        }
    }
    let class = PolicyClass::for_head(net.head);
    let (l_r, l_p) = match class {
        PolicyClass::Stochastic => (a.lr.or(s.get("lr")?).unwrap_or(0.0), a.lp.or(s.get("lp")?).unwrap_or(0.0)),
        PolicyClass::Deterministic => {
            let env_constants = network_env(&net).ok().map(|e| e.manifest().constants);
            let pick = |flag: Option<f64>, key: &str, fallback: Option<f64>| -> Result<f64> {
                flag.or(s.get(key)?).or(fallback).ok_or_else(|| {
                    Error::Contract(format!("deterministic heads need --{key} (no environment constants recorded)"))
                })
            };
            (pick(a.lr, "lr", env_constants.map(|c| c.l_r))?, pick(a.lp, "lp", env_constants.map(|c| c.l_p))?)
        }
    };
    let constants = MdpConstants::new(gamma, rmax, l_r, l_p)?;
    let budget = PerturbationBudget::new(eps, norm)?;
    let result = lipbc_core::certificate::certify(&net, &constants, &budget)?;
    debug_assert_eq!(result.alpha, alpha(&constants, class)?);
    println!(
        "certificate head={} norm={norm} gamma={gamma} rmax={rmax} l_r={l_r} l_p={l_p} alpha={} l_pi={} eps={eps} theta={}",
        result.head, result.alpha, result.l_pi, result.theta_bound
    );
    Ok(())
}
