//! Noise sweeps over methods × attacks × budgets × seeds, worst-case
//! aggregation, and CSV/SVG output.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::adversaries::{
    train_adversary, train_rs_critic, AdversarialAttack, AdversaryTrainConfig, AttackKind, AttackModel, RandomNoise, RsAttack,
    RsConfig,
};
use crate::certificate::PerturbationBudget;
use crate::envs::{perturbed_rollout, Env, EnvId, NetworkPolicy, NoAdversary, ObservationAdversary};
use crate::error::{Error, Result};
use crate::lipschitz_net::PolicyNetwork;
use crate::rng;
use crate::tensor::Norm;

/// A trained policy under evaluation.
#[derive(Clone, Debug)]
pub struct Victim {
    pub method: String,
    /// Training seed.
    pub seed: u64,
    pub network: PolicyNetwork,
}

/// Where learned attack models come from.
#[derive(Clone, Debug)]
pub enum AttackSource {
    /// Train them during the sweep.
    Inline { adversary: AdversaryTrainConfig, rs: RsConfig },
    /// Load artifacts named by [`attack_model_path`].
    Directory(PathBuf),
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub env: EnvId,
    pub victims: Vec<Victim>,
    pub attacks: Vec<AttackKind>,
    pub noise_levels: Vec<f64>,
    pub norms: Vec<Norm>,
    pub episodes_per_model: usize,
    pub attack_models: usize,
    pub seed: u64,
    pub attack_source: AttackSource,
    /// SGLD iterations per RS attack step.
    pub rs_sgld_steps: usize,
}

impl SweepConfig {
    pub fn new(env: EnvId, victims: Vec<Victim>, seed: u64) -> Self {
        Self {
            env,
            victims,
            attacks: AttackKind::ALL.to_vec(),
            noise_levels: default_noise_levels(env),
            norms: vec![Norm::Linf],
            episodes_per_model: 75,
            attack_models: 4,
            seed,
            attack_source: AttackSource::Inline { adversary: AdversaryTrainConfig::default(), rs: RsConfig::default() },
            rs_sgld_steps: 100,
        }
    }
}

pub fn default_noise_levels(env: EnvId) -> Vec<f64> {
    match env {
        EnvId::CartPole => vec![0.02, 0.04, 0.06, 0.08, 0.10, 0.12],
        EnvId::Pendulum => vec![0.01, 0.02, 0.03, 0.04, 0.05, 0.06],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub env: EnvId,
    pub method: String,
    pub attack: AttackKind,
    pub norm: Norm,
    pub eps: f64,
    pub seed: u64,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub n_episodes: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

pub const CSV_HEADER: &str = "env,method,attack,norm,eps,seed,mean_reward,std_reward,n_episodes";

/// File name of a stored attack model.
pub fn attack_model_path(dir: &Path, method: &str, seed: u64, kind: AttackKind, budget: &PerturbationBudget, model: usize) -> PathBuf {
    dir.join(format!("{method}_{seed}_{kind}_{}_eps{}_m{model}.lbcf", budget.norm, budget.epsilon))
}

/// Seed of one evaluation episode; shared by every cell so attacks are
/// compared on the same initial states.
pub fn episode_seed(master: u64, model: usize, episode: usize, per_model: usize) -> u64 {
    rng::derive_seed(master, "episode", (model * per_model + episode) as u64)
}

/// Training seed of learned attack model `model` for one victim.
pub fn attack_train_seed(master: u64, victim_seed: u64, kind: AttackKind, model: usize) -> u64 {
    rng::derive_seed(rng::derive_seed(master, kind.as_str(), victim_seed), "attack-model", model as u64)
}

type ModelKey = (usize, AttackKind, usize, usize, usize);

/// Trains or loads every learned attack model the sweep needs.
/// RS critics do not depend on the budget, so inline training shares one
/// critic per (victim, model) across all budgets.
fn prepare_models(cfg: &SweepConfig) -> Result<HashMap<ModelKey, Arc<AttackModel>>> {
    let mut jobs = Vec::new();
    for (v, _) in cfg.victims.iter().enumerate() {
        for &kind in cfg.attacks.iter().filter(|k| k.is_learned()) {
            for (ni, _) in cfg.norms.iter().enumerate() {
                for (ei, &eps) in cfg.noise_levels.iter().enumerate() {
                    if eps == 0.0 {
                        continue;
                    }
                    for k in 0..cfg.attack_models {
                        jobs.push((v, kind, ni, ei, k));
                    }
                }
            }
        }
    }
    let shared_critic = |key: &ModelKey| -> ModelKey { (key.0, key.1, 0, 0, key.4) };
    let mut unique: Vec<ModelKey> = Vec::new();
    for job in &jobs {
        let key = match (&cfg.attack_source, job.1) {
            (AttackSource::Inline { .. }, AttackKind::Rs) => shared_critic(job),
            _ => *job,
        };
        if !unique.contains(&key) {
            unique.push(key);
        }
    }
    let built: Vec<Result<(ModelKey, Arc<AttackModel>)>> = unique
        .par_iter()
        .map(|&key @ (v, kind, ni, ei, k)| {
            let victim = &cfg.victims[v];
            let budget = PerturbationBudget::new(cfg.noise_levels[ei], cfg.norms[ni])?;
            let model = match &cfg.attack_source {
                AttackSource::Directory(dir) => {
                    AttackModel::load(&attack_model_path(dir, &victim.method, victim.seed, kind, &budget, k), cfg.env, &budget)?
                }
                AttackSource::Inline { adversary, rs } => {
                    let seed = attack_train_seed(cfg.seed, victim.seed, kind, k);
                    match kind {
                        AttackKind::Adversarial => {
                            AttackModel::Adversary(train_adversary(&victim.network, cfg.env, budget, adversary, seed)?)
                        }
                        AttackKind::Rs => AttackModel::Critic(train_rs_critic(&victim.network, cfg.env, rs, seed)?),
                        _ => unreachable!("only learned kinds are prepared"),
                    }
                }
            };
            Ok((key, Arc::new(model)))
        })
        .collect();
    let mut built_map = HashMap::new();
    for item in built {
        let (k, m) = item?;
        built_map.insert(k, m);
    }
    let mut out = HashMap::new();
    for job in jobs {
        let key = match (&cfg.attack_source, job.1) {
            (AttackSource::Inline { .. }, AttackKind::Rs) => shared_critic(&job),
            _ => job,
        };
        out.insert(job, Arc::clone(&built_map[&key]));
    }
    Ok(out)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs every (victim, attack, norm, ε) cell with
/// `attack_models × episodes_per_model` episodes.
pub fn run_sweep(cfg: &SweepConfig) -> Result<EvalReport> {
    if cfg.victims.is_empty() || cfg.attacks.is_empty() || cfg.norms.is_empty() || cfg.noise_levels.is_empty() {
        return Err(Error::Contract("sweep needs victims, attacks, norms and noise levels".into()));
    }
    if cfg.attack_models == 0 || cfg.episodes_per_model == 0 {
        return Err(Error::Contract("sweep needs at least one attack model and one episode".into()));
    }
    for budget in cfg.norms.iter().flat_map(|&n| cfg.noise_levels.iter().map(move |&e| PerturbationBudget::new(e, n))) {
        budget?;
    }
    let manifest = cfg.env.manifest();
    let policies: Vec<NetworkPolicy> =
        cfg.victims.iter().map(|v| NetworkPolicy::new(&v.network, manifest)).collect::<Result<_>>()?;
    let models = prepare_models(cfg)?;

    let mut cells = Vec::new();
    for (v, _) in cfg.victims.iter().enumerate() {
        for &kind in &cfg.attacks {
            for (ni, _) in cfg.norms.iter().enumerate() {
                for (ei, _) in cfg.noise_levels.iter().enumerate() {
                    cells.push((v, kind, ni, ei));
                }
            }
        }
    }
    let rows: Vec<Result<ReportRow>> = cells
        .par_iter()
        .map(|&(v, kind, ni, ei)| {
            let victim = &cfg.victims[v];
            let budget = PerturbationBudget::new(cfg.noise_levels[ei], cfg.norms[ni])?;
            let mut returns = Vec::with_capacity(cfg.attack_models * cfg.episodes_per_model);
            let mut env = Env::new(cfg.env);
            for k in 0..cfg.attack_models {
                let model = models.get(&(v, kind, ni, ei, k));
                let mut hook: Box<dyn ObservationAdversary + '_> = match (kind, model.map(|m| m.as_ref())) {
                    (_, _) if budget.epsilon == 0.0 => Box::new(NoAdversary),
                    (AttackKind::None, _) => Box::new(NoAdversary),
                    (AttackKind::Random, _) => Box::new(RandomNoise::new(budget)),
                    (AttackKind::Adversarial, Some(AttackModel::Adversary(a))) => Box::new(AdversarialAttack { adversary: a }),
                    (AttackKind::Rs, Some(AttackModel::Critic(c))) => {
                        Box::new(RsAttack::new(c, &victim.network, budget, cfg.rs_sgld_steps)?)
                    }
                    _ => return Err(Error::Schema(format!("attack model for {kind} has the wrong type"))),
                };
                for j in 0..cfg.episodes_per_model {
                    let seed = episode_seed(cfg.seed, k, j, cfg.episodes_per_model);
                    let out = perturbed_rollout(&mut env, &policies[v], hook.as_mut(), &budget, seed)?;
                    returns.push(out.total_reward);
                }
            }
            let (mean_reward, std_reward) = mean_std(&returns);
            Ok(ReportRow {
                env: cfg.env,
                method: victim.method.clone(),
                attack: kind,
                norm: budget.norm,
                eps: budget.epsilon,
                seed: victim.seed,
                mean_reward,
                std_reward,
                n_episodes: returns.len(),
            })
        })
        .collect();
    Ok(EvalReport { rows: rows.into_iter().collect::<Result<_>>()? })
}

/// Pooled mean and standard deviation over rows (across training seeds).
fn pool(rows: &[&ReportRow]) -> (f64, f64) {
    let n: f64 = rows.iter().map(|r| r.n_episodes as f64).sum();
    let mean = rows.iter().map(|r| r.mean_reward * r.n_episodes as f64).sum::<f64>() / n;
    let var = rows
        .iter()
        .map(|r| r.n_episodes as f64 * (r.std_reward.powi(2) + (r.mean_reward - mean).powi(2)))
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

/// Pooled mean and std of the weakest attack for a (method, norm, ε) cell;
/// "none" rows are excluded.
pub fn worst_case_stats(report: &EvalReport, method: &str, norm: Norm, eps: f64) -> Result<(AttackKind, f64, f64)> {
    let mut by_kind: Vec<(AttackKind, Vec<&ReportRow>)> = Vec::new();
    for r in report.rows.iter().filter(|r| {
        r.method == method && r.norm == norm && r.eps.to_bits() == eps.to_bits() && r.attack != AttackKind::None
    }) {
        match by_kind.iter_mut().find(|(k, _)| *k == r.attack) {
            Some((_, rows)) => rows.push(r),
            None => by_kind.push((r.attack, vec![r])),
        }
    }
    if by_kind.is_empty() {
        return Err(Error::Contract(format!("no attack rows for {method} at {norm} ε={eps}")));
    }
    by_kind.sort_by_key(|(k, _)| *k);
    let mut best: Option<(AttackKind, f64, f64)> = None;
    for (kind, rows) in &by_kind {
        let (m, s) = pool(rows);
        if best.map_or(true, |(_, bm, _)| m < bm) {
            best = Some((*kind, m, s));
        }
    }
    Ok(best.expect("non-empty"))
}

/// Worst-case mean reward over the attack kinds of a cell.
pub fn worst_case(report: &EvalReport, method: &str, norm: Norm, eps: f64) -> Result<f64> {
    Ok(worst_case_stats(report, method, norm, eps)?.1)
}

/// Pooled mean reward of one attack kind across seeds.
pub fn attack_mean(report: &EvalReport, method: &str, attack: AttackKind, norm: Norm, eps: f64) -> Result<f64> {
    let rows: Vec<&ReportRow> = report
        .rows
        .iter()
        .filter(|r| r.method == method && r.attack == attack && r.norm == norm && r.eps.to_bits() == eps.to_bits())
        .collect();
    if rows.is_empty() {
        return Err(Error::Contract(format!("no {attack} rows for {method} at {norm} ε={eps}")));
    }
    Ok(pool(&rows).0)
}

pub fn to_csv(report: &EvalReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.env, r.method, r.attack, r.norm, r.eps, r.seed, r.mean_reward, r.std_reward, r.n_episodes
        );
    }
    out
}

fn first_seen<T: PartialEq + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for i in items {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

/// Line chart of worst-case mean reward against ε, one series per method
/// with a shaded ±std band.
pub fn render_svg(report: &EvalReport, env: EnvId, norm: Norm) -> Result<String> {
    let rows: Vec<&ReportRow> = report.rows.iter().filter(|r| r.env == env && r.norm == norm).collect();
    let methods = first_seen(rows.iter().map(|r| r.method.clone()));
    if methods.is_empty() {
        return Err(Error::Contract(format!("no rows for {env} under {norm}")));
    }
    let mut eps: Vec<f64> = first_seen(rows.iter().filter(|r| r.attack != AttackKind::None).map(|r| r.eps));
    eps.sort_by(f64::total_cmp);
    let mut series = Vec::new();
    for m in &methods {
        let pts: Vec<(f64, f64, f64)> = eps
            .iter()
            .filter_map(|&e| worst_case_stats(report, m, norm, e).ok().map(|(_, mu, sd)| (e, mu, sd)))
            .collect();
        series.push((m.clone(), pts));
    }
    if series.iter().all(|(_, p)| p.is_empty()) {
        return Err(Error::Contract(format!("no attacked cells for {env} under {norm}")));
    }
    let manifest = env.manifest();
    let y_max = manifest.episode_cap as f64 * manifest.r_max;
    let (x_lo, x_hi) = match (eps.first(), eps.last()) {
        (Some(&a), Some(&b)) if b > a => (a, b),
        (Some(&a), _) => (a - 0.01, a + 0.01),
        _ => (0.0, 1.0),
    };
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * pw;
    let sy = |y: f64| TOP + (1.0 - y.clamp(0.0, y_max) / y_max) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{env} ({norm}): worst-case mean reward</text>"#,
        LEFT + pw / 2.0
    );
    let _ = writeln!(s, r#"<g font-family="sans-serif" font-size="11">"#);
    for k in 0..=5 {
        let y = y_max * k as f64 / 5.0;
        let py = sy(y);
        let _ = writeln!(s, r##"<line x1="{LEFT:.2}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#ddd"/>"##, LEFT + pw);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{y:.0}</text>"#, LEFT - 6.0, py + 4.0);
    }
    for &e in &eps {
        let px = sx(e);
        let _ = writeln!(s, r##"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="#000"/>"##, TOP + ph, TOP + ph + 5.0);
        let _ = writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{e}</text>"#, TOP + ph + 18.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">noise level ε</text>"#, LEFT + pw / 2.0, HEIGHT - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">worst-case mean reward</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r##"<g stroke="#000" stroke-width="1">"##);
    let _ = writeln!(s, r#"<line x1="{LEFT:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/>"#, TOP + ph, LEFT + pw, TOP + ph);
    let _ = writeln!(s, r#"<line x1="{LEFT:.2}" y1="{TOP:.2}" x2="{LEFT:.2}" y2="{:.2}"/>"#, TOP + ph);
    let _ = writeln!(s, "</g>");
    for (i, (method, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !pts.is_empty() {
            let upper: Vec<String> = pts.iter().map(|&(e, m, sd)| format!("{:.2},{:.2}", sx(e), sy(m + sd))).collect();
            let lower: Vec<String> = pts.iter().rev().map(|&(e, m, sd)| format!("{:.2},{:.2}", sx(e), sy(m - sd))).collect();
            let _ = writeln!(s, r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, upper.join(" "), lower.join(" "));
            let line: Vec<String> = pts.iter().map(|&(e, m, _)| format!("{:.2},{:.2}", sx(e), sy(m))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
            for &(e, m, _) in pts {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(e), sy(m));
            }
        }
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(s, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12">{method}</text>"#,
            lx + 26.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes `report.csv` and one `{env}_{norm}_worstcase.svg` per (env, norm).
/// Everything is rendered before the first write, so a failure leaves no
/// partial output.
pub fn emit_outputs(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.rows.is_empty() {
        return Err(Error::Contract("empty report".into()));
    }
    let mut files = vec![(dir.join("report.csv"), to_csv(report))];
    let pairs = first_seen(report.rows.iter().map(|r| (r.env, r.norm)));
    for (env, norm) in pairs {
        files.push((dir.join(format!("{env}_{norm}_worstcase.svg")), render_svg(report, env, norm)?));
    }
    std::fs::create_dir_all(dir)?;
    for (path, body) in &files {
        std::fs::write(path, body)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}
