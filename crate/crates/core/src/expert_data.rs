//! Experts, demonstration collection and the BC dataset format.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::container::{sha256_hex, Container};
use crate::envs::{pendulum, Action, ActionSpace, Env, EnvId, EnvManifest, NetworkPolicy, Policy};
use crate::error::{Error, Result};
use crate::lipschitz_net::{HeadKind, NetMode, PolicyNetwork};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Matrix;

/// Desk-scale REINFORCE settings for the CartPole expert.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertConfig {
    pub hidden: Vec<usize>,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub episodes_per_update: usize,
    pub gamma: f64,
    /// Environment steps spent on sampled (training) episodes.
    pub max_env_steps: usize,
    /// Greedy evaluation episodes behind the acceptance threshold.
    pub eval_episodes: usize,
    /// Mean greedy return the expert must reach.
    pub threshold: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            policy_lr: 1e-2,
            value_lr: 1e-2,
            episodes_per_update: 8,
            gamma: 0.99,
            max_env_steps: 200_000,
            eval_episodes: 100,
            threshold: 475.0,
        }
    }
}

/// Swing-up controller for the pendulum: energy pumping far from the top,
/// PD stabilization near it.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyShapingController {
    pub energy_gain: f64,
    pub kp: f64,
    pub kd: f64,
    /// PD takes over when `cos θ` exceeds this.
    pub capture_cos: f64,
}

impl Default for EnergyShapingController {
    fn default() -> Self {
        Self { energy_gain: 1.0, kp: 10.0, kd: 2.0, capture_cos: 0.9 }
    }
}

impl EnergyShapingController {
    /// `E = θ̇²/6 + 5 cos θ` per unit mass; `Ė = θ̇ u` under the pendulum dynamics.
    pub fn energy(theta: f64, theta_dot: f64) -> f64 {
        theta_dot * theta_dot / 6.0 + 0.5 * pendulum::GRAVITY * pendulum::LENGTH * theta.cos()
    }

    pub fn torque(&self, theta: f64, theta_dot: f64) -> f64 {
        let th = pendulum::angle_normalize(theta);
        let u = if th.cos() > self.capture_cos {
            -self.kp * th - self.kd * theta_dot
        } else {
            let top = 0.5 * pendulum::GRAVITY * pendulum::LENGTH;
            let deficit = top - Self::energy(th, theta_dot);
            // at rest the sign is ambiguous; kick in the positive direction
            let dir = if theta_dot == 0.0 { 1.0 } else { theta_dot.signum() };
            self.energy_gain * deficit * dir
        };
        u.clamp(-pendulum::MAX_TORQUE, pendulum::MAX_TORQUE)
    }
}

/// A demonstrator: a trained network or the scripted pendulum controller.
#[derive(Clone, Debug)]
pub enum Expert {
    Network(PolicyNetwork),
    EnergyShaping(EnergyShapingController),
}

impl Expert {
    pub fn env(&self) -> Result<EnvId> {
        match self {
            Expert::Network(net) => net.env_id.parse(),
            Expert::EnergyShaping(_) => Ok(EnvId::Pendulum),
        }
    }

    /// Noise-free action for an observation.
    pub fn action(&self, obs: &[f64]) -> Result<Action> {
        match self {
            Expert::Network(net) => {
                let manifest = self.env()?.manifest();
                Ok(NetworkPolicy::action_from_output(&manifest.action_space, &net.forward(obs)?))
            }
            Expert::EnergyShaping(c) => {
                let (th, dot) = pendulum::Pendulum::state_from_observation(obs);
                Ok(Action::Continuous(vec![c.torque(th, dot)]))
            }
        }
    }

    pub fn to_container(&self) -> Container {
        match self {
            Expert::Network(net) => net.to_container(),
            Expert::EnergyShaping(c) => {
                let mut out = Container::new("scripted-expert");
                out.set("env", EnvId::Pendulum)
                    .set("controller", "energy-shaping")
                    .set_f64("energy_gain", c.energy_gain)
                    .set_f64("kp", c.kp)
                    .set_f64("kd", c.kd)
                    .set_f64("capture_cos", c.capture_cos);
                out
            }
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        match c.kind.as_str() {
            "policy" => Ok(Expert::Network(PolicyNetwork::from_container(c)?)),
            "scripted-expert" => Ok(Expert::EnergyShaping(EnergyShapingController {
                energy_gain: c.parse("energy_gain")?,
                kp: c.parse("kp")?,
                kd: c.parse("kd")?,
                capture_cos: c.parse("capture_cos")?,
            })),
            other => Err(Error::Schema(format!("'{other}' is not an expert artifact"))),
        }
    }

    /// Content hash identifying this expert in dataset provenance.
    pub fn id(&self) -> String {
        sha256_hex(&self.to_container().to_bytes())[..16].to_string()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

impl Policy for Expert {
    fn act(&self, observation: &[f64]) -> Result<Action> {
        self.action(observation)
    }
}

/// Trains (CartPole) or instantiates (Pendulum) an expert and verifies it
/// against the acceptance threshold.
pub fn train_expert(env: EnvId, cfg: &ExpertConfig, seed: u64) -> Result<Expert> {
    match env {
        EnvId::CartPole => train_cartpole_expert(cfg, seed).map(Expert::Network),
        EnvId::Pendulum => {
            let expert = Expert::EnergyShaping(EnergyShapingController::default());
            let starts = pendulum_eval_starts(cfg.eval_episodes.min(20), seed);
            let achieved = mean_return_from(&expert, &starts)?;
            let best = pendulum_attainable_return(&starts);
            log::info!("pendulum expert {achieved:.2} vs attainable {best:.2}");
            if achieved < 0.9 * best {
                return Err(Error::TrainingFailure(format!(
                    "pendulum controller reaches {achieved:.2}, below 90% of the attainable {best:.2}"
                )));
            }
            Ok(expert)
        }
    }
}

/// Greedy evaluation seeds shared by the expert trainer and its tests.
pub fn expert_eval_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, "expert-eval", 0)
}

fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    out
}

/// REINFORCE with a learned state-value baseline and normalized advantages.
fn train_cartpole_expert(cfg: &ExpertConfig, seed: u64) -> Result<PolicyNetwork> {
    let id = EnvId::CartPole;
    let manifest = id.manifest();
    let mut init = rng::child_rng(seed, "expert-init", 0);
    let mut policy =
        PolicyNetwork::new(&mut init, manifest.state_dim, &cfg.hidden, 2, HeadKind::Categorical, NetMode::Vanilla, id.as_str());
    let mut value =
        PolicyNetwork::new(&mut init, manifest.state_dim, &cfg.hidden, 1, HeadKind::Deterministic, NetMode::Vanilla, id.as_str());
    let mut policy_opt = Adam::new(AdamConfig::with_lr(cfg.policy_lr));
    let mut value_opt = Adam::new(AdamConfig::with_lr(cfg.value_lr));
    let mut sampler = rng::child_rng(seed, "expert-sampling", 0);
    let mut env = Env::new(id);
    let value_scale = 1.0 - cfg.gamma;
    let eval_seed = expert_eval_seed(seed);

    let mut env_steps = 0usize;
    let mut episode = 0u64;
    let mut best: Option<(f64, PolicyNetwork)> = None;
    while env_steps < cfg.max_env_steps {
        let frozen = policy.frozen()?;
        let (mut states, mut actions, mut returns) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..cfg.episodes_per_update {
            let mut obs = env.reset_seeded(rng::derive_seed(seed, "expert-episode", episode));
            episode += 1;
            let mut rewards = Vec::new();
            loop {
                let p = frozen.output(&obs);
                let a = if sampler.gen::<f64>() < p[0] { 0 } else { 1 };
                states.extend_from_slice(&obs);
                actions.push(a);
                let (state, r) = env.step(&Action::Discrete(a))?;
                rewards.push(r);
                env_steps += 1;
                if state.done() {
                    break;
                }
                obs = state.observation;
            }
            returns.extend(discounted_returns(&rewards, cfg.gamma));
        }
        let rows = actions.len();
        let x = Matrix::new(rows, manifest.state_dim, states)?;

        // baseline fit and advantages
        let mut tape = Tape::new();
        let vv = value.register(&mut tape);
        let xv = tape.leaf(x.clone());
        let pred = value.forward_tape(&mut tape, &vv, xv)?;
        let baseline: Vec<f64> = tape.value(pred).data().iter().map(|v| v / value_scale).collect();
        let target = tape.leaf(Matrix::new(rows, 1, returns.iter().map(|g| g * value_scale).collect())?);
        let diff = tape.sub(pred, target)?;
        let sq = tape.square(diff);
        let value_loss = tape.mean(sq);
        let grads = vv.gradients(&tape.backward(value_loss)?);
        value.adam_step(&mut value_opt, &grads);

        let mut adv: Vec<f64> = returns.iter().zip(&baseline).map(|(g, b)| g - b).collect();
        let mean = adv.iter().sum::<f64>() / rows as f64;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / rows as f64).sqrt().max(1e-8);
        adv.iter_mut().for_each(|a| *a = (*a - mean) / std);

        let mut tape = Tape::new();
        let pv = policy.register(&mut tape);
        let xv = tape.leaf(x);
        let logits = policy.logits_tape(&mut tape, &pv, xv)?;
        let loss = tape.weighted_cross_entropy(logits, &actions, &adv)?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::TrainingFailure("policy-gradient loss diverged".into()));
        }
        let grads = pv.gradients(&tape.backward(loss)?);
        policy.adam_step(&mut policy_opt, &grads);

        // cheap greedy probe; full evaluation only for promising policies
        let greedy = NetworkPolicy::new(&policy, manifest)?;
        let probe = crate::envs::mean_clean_return(id, &greedy, 10, eval_seed)?;
        if probe >= cfg.threshold && best.as_ref().map_or(true, |(b, _)| probe > *b) {
            let full = crate::envs::mean_clean_return(id, &greedy, cfg.eval_episodes, eval_seed)?;
            log::info!("expert: {env_steps} env steps, greedy mean {full:.1}");
            if full >= cfg.threshold {
                return Ok(policy);
            }
            best = Some((probe, policy.clone()));
        }
    }
    Err(Error::TrainingFailure(format!(
        "cartpole expert did not reach a greedy mean of {} within {} environment steps",
        cfg.threshold, cfg.max_env_steps
    )))
}

/// Initial pendulum states drawn by the standard reset for `count` episodes.
pub fn pendulum_eval_starts(count: usize, seed: u64) -> Vec<(f64, f64)> {
    let eval_seed = expert_eval_seed(seed);
    let mut env = Env::new(EnvId::Pendulum);
    (0..count)
        .map(|k| {
            let obs = env.reset_seeded(rng::derive_seed(eval_seed, "episode", k as u64));
            pendulum::Pendulum::state_from_observation(&obs)
        })
        .collect()
}

fn mean_return_from(expert: &Expert, starts: &[(f64, f64)]) -> Result<f64> {
    let mut env = Env::new(EnvId::Pendulum);
    let mut total = 0.0;
    for &(th, dot) in starts {
        env.set_pendulum_state(th, dot)?;
        let mut obs = env.observation().to_vec();
        loop {
            let (state, r) = env.step(&expert.action(&obs)?)?;
            total += r;
            if state.done() {
                break;
            }
            obs = state.observation;
        }
    }
    Ok(total / starts.len().max(1) as f64)
}

/// Best attainable mean undiscounted return from the given starts, by
/// finite-horizon dynamic programming on a (θ, θ̇) grid with bilinear
/// interpolation and a discretized torque set.
pub fn pendulum_attainable_return(starts: &[(f64, f64)]) -> f64 {
    use std::f64::consts::PI;
    const NT: usize = 144;
    const ND: usize = 97;
    const NU: usize = 21;
    let dth = 2.0 * PI / NT as f64;
    let ddot = 2.0 * pendulum::MAX_SPEED / (ND - 1) as f64;
    let torques: Vec<f64> = (0..NU).map(|k| -pendulum::MAX_TORQUE + 2.0 * pendulum::MAX_TORQUE * k as f64 / (NU - 1) as f64).collect();
    let interp = |v: &[f64], th: f64, dot: f64| -> f64 {
        let ti = (th + PI).rem_euclid(2.0 * PI) / dth;
        let di = ((dot + pendulum::MAX_SPEED) / ddot).clamp(0.0, (ND - 1) as f64);
        let (t0, d0) = (ti.floor() as usize % NT, (di.floor() as usize).min(ND - 2));
        let (ft, fd) = (ti - ti.floor(), di - d0 as f64);
        let t1 = (t0 + 1) % NT;
        let at = |t: usize, d: usize| v[t * ND + d];
        (1.0 - ft) * ((1.0 - fd) * at(t0, d0) + fd * at(t0, d0 + 1)) + ft * ((1.0 - fd) * at(t1, d0) + fd * at(t1, d0 + 1))
    };
    // precompute successors once; dynamics are time invariant
    let mut succ = Vec::with_capacity(NT * ND * NU);
    for t in 0..NT {
        for d in 0..ND {
            let th = -PI + t as f64 * dth;
            let dot = -pendulum::MAX_SPEED + d as f64 * ddot;
            for &u in &torques {
                let (th2, dot2, r) = pendulum::Pendulum::dynamics(th, dot, u).expect("torque in range");
                succ.push((th2, dot2, r));
            }
        }
    }
    let mut v = vec![0.0; NT * ND];
    for _ in 0..pendulum::EPISODE_CAP {
        let next: Vec<f64> = (0..NT * ND)
            .into_par_iter()
            .map(|i| {
                succ[i * NU..(i + 1) * NU]
                    .iter()
                    .map(|&(th2, dot2, r)| r + interp(&v, th2, dot2))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        v = next;
    }
    starts.iter().map(|&(th, dot)| interp(&v, th, dot)).sum::<f64>() / starts.len().max(1) as f64
}

/// Expert demonstrations: flat state and action arrays plus trajectory ends.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub env: EnvId,
    /// Row-major `len × n` states.
    pub states: Vec<f64>,
    /// Row-major `len × k` actions; discrete actions are stored as the index.
    pub actions: Vec<f64>,
    /// Exclusive end offset of each trajectory.
    pub boundaries: Vec<usize>,
    /// Undiscounted return of each trajectory.
    pub returns: Vec<f64>,
    pub expert_id: String,
    pub seed: u64,
}

impl Dataset {
    pub fn empty(env: EnvId, expert_id: &str, seed: u64) -> Self {
        Self { env, states: vec![], actions: vec![], boundaries: vec![], returns: vec![], expert_id: expert_id.into(), seed }
    }

    pub fn manifest(&self) -> &'static EnvManifest {
        self.env.manifest()
    }

    pub fn state_dim(&self) -> usize {
        self.manifest().state_dim
    }

    /// Stored action width: 1 for discrete spaces.
    pub fn action_width(&self) -> usize {
        match &self.manifest().action_space {
            ActionSpace::Discrete(_) => 1,
            ActionSpace::Box { low, .. } => low.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.boundaries.last().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_trajectories(&self) -> usize {
        self.boundaries.len()
    }

    pub fn trajectory(&self, i: usize) -> Range<usize> {
        let start = if i == 0 { 0 } else { self.boundaries[i - 1] };
        start..self.boundaries[i]
    }

    pub fn state(&self, i: usize) -> &[f64] {
        let n = self.state_dim();
        &self.states[i * n..(i + 1) * n]
    }

    pub fn raw_action(&self, i: usize) -> &[f64] {
        let k = self.action_width();
        &self.actions[i * k..(i + 1) * k]
    }

    pub fn action(&self, i: usize) -> Action {
        match self.manifest().action_space {
            ActionSpace::Discrete(_) => Action::Discrete(self.actions[i] as usize),
            ActionSpace::Box { .. } => Action::Continuous(self.raw_action(i).to_vec()),
        }
    }

    pub fn mean_return(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len().max(1) as f64
    }

    fn push_trajectory(&mut self, states: &[f64], actions: &[f64], ret: f64) {
        self.states.extend_from_slice(states);
        self.actions.extend_from_slice(actions);
        let steps = states.len() / self.state_dim();
        self.boundaries.push(self.len() + steps);
        self.returns.push(ret);
    }

    /// A new dataset holding the listed trajectories in the given order.
    pub fn select(&self, trajectories: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.env, &self.expert_id, self.seed);
        let (n, k) = (self.state_dim(), self.action_width());
        for &t in trajectories {
            let r = self.trajectory(t);
            out.push_trajectory(&self.states[r.start * n..r.end * n], &self.actions[r.start * k..r.end * k], self.returns[t]);
        }
        out
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let m = self.manifest();
        let (n, k) = (m.state_dim, self.action_width());
        if self.states.len() != self.len() * n || self.actions.len() != self.len() * k {
            return Err(Error::Schema("dataset arrays disagree with the boundary index".into()));
        }
        if self.boundaries.windows(2).any(|w| w[1] <= w[0]) || self.boundaries.first() == Some(&0) {
            return Err(Error::Schema("trajectory boundaries must be strictly increasing".into()));
        }
        if self.returns.len() != self.boundaries.len() {
            return Err(Error::Schema("one return per trajectory".into()));
        }
        for i in 0..self.len() {
            let ok = match &m.action_space {
                ActionSpace::Discrete(count) => {
                    let a = self.actions[i];
                    a.fract() == 0.0 && a >= 0.0 && (a as usize) < *count
                }
                space => space.contains(&self.action(i)),
            };
            if !ok {
                return Err(Error::Schema(format!("record {i} holds an invalid action")));
            }
        }
        if self.states.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("non-finite state".into()));
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("dataset");
        self.manifest().write_header(&mut c);
        c.set("records", self.len())
            .set("trajectories", self.n_trajectories())
            .set("expert", &self.expert_id)
            .set("seed", self.seed);
        c.push_section("states", self.states.clone())
            .push_section("actions", self.actions.clone())
            .push_section("boundaries", self.boundaries.iter().map(|&b| b as f64).collect())
            .push_section("returns", self.returns.clone());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("dataset")?;
        let manifest = EnvManifest::from_header(c)?;
        let ds = Dataset {
            env: manifest.id,
            states: c.section("states")?.to_vec(),
            actions: c.section("actions")?.to_vec(),
            boundaries: c.section("boundaries")?.iter().map(|&b| b as usize).collect(),
            returns: c.section("returns")?.to_vec(),
            expert_id: c.get("expert")?.to_string(),
            seed: c.parse("seed")?,
        };
        if c.parse::<usize>("records")? != ds.len() || c.parse::<usize>("trajectories")? != ds.n_trajectories() {
            return Err(Error::Schema("dataset counts disagree with its contents".into()));
        }
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    /// States as a batch matrix for the given record indices.
    pub fn state_batch(&self, indices: &[usize]) -> Matrix {
        let n = self.state_dim();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.state(i));
        }
        Matrix::new(indices.len(), n, data).expect("finite states")
    }
}

/// Rolls out the expert for `n_trajectories` complete episodes. Trajectories
/// are generated in parallel from per-trajectory seeds and concatenated in
/// order.
pub fn collect(expert: &Expert, env: EnvId, n_trajectories: usize, seed: u64) -> Result<Dataset> {
    if expert.env()? != env {
        return Err(Error::Contract(format!("expert for {} cannot act in {env}", expert.env()?)));
    }
    let width = match &env.manifest().action_space {
        ActionSpace::Discrete(_) => 1,
        ActionSpace::Box { low, .. } => low.len(),
    };
    let episodes: Vec<Result<(Vec<f64>, Vec<f64>, f64)>> = (0..n_trajectories)
        .into_par_iter()
        .map(|k| {
            let mut e = Env::new(env);
            let mut obs = e.reset_seeded(rng::derive_seed(seed, "collect", k as u64));
            let (mut states, mut actions, mut ret) = (Vec::new(), Vec::new(), 0.0);
            loop {
                let action = expert.action(&obs)?;
                states.extend_from_slice(&obs);
                match &action {
                    Action::Discrete(a) => actions.push(*a as f64),
                    Action::Continuous(v) => actions.extend_from_slice(v),
                }
                let (state, r) = e.step(&action)?;
                ret += r;
                if state.done() {
                    return Ok((states, actions, ret));
                }
                obs = state.observation;
            }
        })
        .collect();
    let mut ds = Dataset::empty(env, &expert.id(), seed);
    for ep in episodes {
        let (s, a, r) = ep?;
        debug_assert_eq!(a.len() * env.manifest().state_dim, s.len() * width);
        ds.push_trajectory(&s, &a, r);
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub val: Dataset,
    /// Source trajectory ids of each part.
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
}

/// Trajectory-level 70/30 split after a seeded shuffle.
pub fn split(ds: &Dataset, seed: u64) -> Result<SplitDataset> {
    let t = ds.n_trajectories();
    if t < 2 {
        return Err(Error::Contract(format!("splitting needs at least 2 trajectories, got {t}")));
    }
    let mut ids: Vec<usize> = (0..t).collect();
    ids.shuffle(&mut rng::child_rng(seed, "split", 0));
    let n_train = ((0.7 * t as f64).round() as usize).clamp(1, t - 1);
    let (train_ids, val_ids) = (ids[..n_train].to_vec(), ids[n_train..].to_vec());
    Ok(SplitDataset { train: ds.select(&train_ids), val: ds.select(&val_ids), train_ids, val_ids })
}
