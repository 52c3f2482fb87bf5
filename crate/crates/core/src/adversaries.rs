//! Evaluation-time attacks: bounded random noise, the learned adversary
//! network, and the Robust Sarsa critic with SGLD inner optimization.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::certificate::PerturbationBudget;
use crate::container::Container;
use crate::envs::{Action, ActionSpace, Env, EnvId, NetworkPolicy, ObservationAdversary, Policy};
use crate::error::{Error, Result};
use crate::lipschitz_net::{FrozenPolicy, HeadKind, NetMode, NetVars, PolicyNetwork};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::tape::{project_onto_ball, Tape, Var};
use crate::tensor::{Matrix, Norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackKind {
    None,
    Random,
    Adversarial,
    Rs,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [AttackKind::None, AttackKind::Random, AttackKind::Adversarial, AttackKind::Rs];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Random => "random",
            AttackKind::Adversarial => "adversarial",
            AttackKind::Rs => "rs",
        }
    }

    /// Whether the attack needs a trained model per victim.
    pub fn is_learned(self) -> bool {
        matches!(self, AttackKind::Adversarial | AttackKind::Rs)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttackKind::None),
            "random" => Ok(AttackKind::Random),
            "adversarial" => Ok(AttackKind::Adversarial),
            "rs" => Ok(AttackKind::Rs),
            other => Err(Error::Contract(format!("unknown attack kind '{other}'"))),
        }
    }
}

/// Attack description used by the sweep harness.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub budget: PerturbationBudget,
    pub n_attack_models: usize,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, budget: PerturbationBudget) -> Self {
        Self { kind, budget, n_attack_models: 4 }
    }
}

/// `s + ε u` with `u ~ U[-1, 1]ⁿ` (ℓ∞) or `s + ε g/‖g‖₂` with Gaussian `g` (ℓ₂).
pub fn random_noise(s: &[f64], budget: &PerturbationBudget, rng: &mut impl Rng) -> Vec<f64> {
    let eps = budget.epsilon;
    if eps == 0.0 {
        return s.to_vec();
    }
    match budget.norm {
        Norm::L2 => loop {
            let g: Vec<f64> = (0..s.len()).map(|_| rng.sample(StandardNormal)).collect();
            let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                break s.iter().zip(g).map(|(x, gv)| x + eps * gv / n).collect();
            }
        },
        _ => s.iter().map(|x| x + eps * rng.gen_range(-1.0..=1.0)).collect(),
    }
}

/// Random-noise hook, reseeded per episode.
pub struct RandomNoise {
    budget: PerturbationBudget,
    rng: rng::Rng,
}

impl RandomNoise {
    pub fn new(budget: PerturbationBudget) -> Self {
        Self { budget, rng: rng::rng_from(0) }
    }
}

impl ObservationAdversary for RandomNoise {
    fn begin_episode(&mut self, seed: u64) {
        self.rng = rng::child_rng(seed, "random-noise", 0);
    }

    fn perturb(&mut self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(random_noise(s, &self.budget, &mut self.rng))
    }
}

/// Mean policy-output distance between two batches of outputs: ℓ₂ rows for
/// deterministic heads, ℓ₁ of the probabilities (2·TV) for categorical ones.
pub fn output_divergence_tape(tape: &mut Tape, head: HeadKind, p: Var, q: Var) -> Result<Var> {
    let diff = tape.sub(q, p)?;
    let per_row = match head {
        HeadKind::Deterministic => tape.row_l2_norm(diff),
        HeadKind::Categorical => {
            let a = tape.abs(diff);
            tape.sum_cols(a)
        }
    };
    Ok(tape.mean(per_row))
}

/// The state adversary `µ_φ(s) = proj_{B_ε(s)}(s + ε · tanh(MLP_φ(s)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversaryNet {
    pub mlp: PolicyNetwork,
    pub budget: PerturbationBudget,
    /// Content hash of the policy this adversary was trained against.
    pub victim: String,
}

impl AdversaryNet {
    pub fn new(rng: &mut impl Rng, state_dim: usize, hidden: usize, budget: PerturbationBudget) -> Self {
        let mlp = PolicyNetwork::new(rng, state_dim, &[hidden], state_dim, HeadKind::Deterministic, NetMode::Vanilla, "adversary");
        Self { mlp, budget, victim: String::new() }
    }

    /// Zero final layer, so `µ_φ(s) = s`.
    pub fn zero_offset(rng: &mut impl Rng, state_dim: usize, hidden: usize, budget: PerturbationBudget) -> Self {
        let mut adv = Self::new(rng, state_dim, hidden, budget);
        let last = adv.mlp.layers.last_mut().expect("two layers");
        last.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        last.bias.iter_mut().for_each(|b| *b = 0.0);
        adv
    }

    pub fn perturb(&self, s: &[f64]) -> Result<Vec<f64>> {
        let off = self.mlp.forward(s)?;
        Ok(self.offset_to_state(s, &off))
    }

    /// `µ_φ` applied to every row of a batch.
    pub fn perturb_batch(&self, states: &Matrix) -> Result<Matrix> {
        let f = self.mlp.frozen()?;
        let mut out = Vec::with_capacity(states.data().len());
        for r in 0..states.rows() {
            let s = states.row_slice(r);
            out.extend(self.offset_to_state(s, &f.output(s)));
        }
        Matrix::new(states.rows(), states.cols(), out)
    }

    fn offset_to_state(&self, s: &[f64], off: &[f64]) -> Vec<f64> {
        let eps = self.budget.epsilon;
        let mut d: Vec<f64> = off.iter().map(|o| eps * o.tanh()).collect();
        project_onto_ball(&mut d, self.budget.norm, eps);
        s.iter().zip(d).map(|(a, b)| a + b).collect()
    }

    /// Records `ŝ` for a batch of states on the tape.
    pub fn perturbed_tape(&self, tape: &mut Tape, vars: &NetVars, s: Var) -> Result<Var> {
        let off = self.mlp.forward_tape(tape, vars, s)?;
        let t = tape.tanh(off);
        let d = tape.mul_const(t, self.budget.epsilon);
        let d = tape.project_ball(d, self.budget.norm, self.budget.epsilon)?;
        tape.add(s, d)
    }

    /// Batch-mean `D(π(s), π(µ_φ(s)))` and its gradient with respect to φ,
    /// the victim held fixed.
    pub fn divergence_and_gradient(&self, victim: &PolicyNetwork, states: &Matrix) -> Result<(f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let av = self.mlp.register(&mut tape);
        let pv = victim.register(&mut tape);
        let s = tape.leaf(states.clone());
        let s_hat = self.perturbed_tape(&mut tape, &av, s)?;
        let p = victim.forward_tape(&mut tape, &pv, s)?;
        let q = victim.forward_tape(&mut tape, &pv, s_hat)?;
        let d = output_divergence_tape(&mut tape, victim.head, p, q)?;
        let value = tape.value(d).item();
        let grads = av.gradients(&tape.backward(d)?);
        Ok((value, grads))
    }

    /// One plain gradient-ascent step `φ ← φ + η ∂D/∂φ`; returns D before the step.
    pub fn ascent_step(&mut self, victim: &PolicyNetwork, states: &Matrix, lr: f64) -> Result<f64> {
        let (value, grads) = self.divergence_and_gradient(victim, states)?;
        for (p, g) in self.mlp.parameters_mut().into_iter().zip(&grads) {
            for (pv, gv) in p.iter_mut().zip(g.data()) {
                *pv += lr * gv;
            }
        }
        Ok(value)
    }

    pub fn to_container(&self) -> Container {
        let mut c = self.mlp.to_container();
        c.kind = "adversary".into();
        c.set_f64("epsilon", self.budget.epsilon).set("norm", self.budget.norm).set("victim", &self.victim);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("adversary")?;
        let mut inner = c.clone();
        inner.kind = "policy".into();
        let budget = PerturbationBudget::new(c.parse("epsilon")?, c.parse("norm")?)?;
        Ok(Self { mlp: PolicyNetwork::from_container(&inner)?, budget, victim: c.get("victim")?.to_string() })
    }
}

/// Adversary hook backed by a trained [`AdversaryNet`].
pub struct AdversarialAttack<'a> {
    pub adversary: &'a AdversaryNet,
}

impl ObservationAdversary for AdversarialAttack<'_> {
    fn perturb(&mut self, s: &[f64]) -> Result<Vec<f64>> {
        self.adversary.perturb(s)
    }
}

/// Training settings for a standalone adversary attack model.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversaryTrainConfig {
    pub hidden: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Clean victim episodes whose states form the training distribution.
    pub rollout_episodes: usize,
}

impl Default for AdversaryTrainConfig {
    fn default() -> Self {
        Self { hidden: 64, steps: 2000, learning_rate: 1e-3, batch_size: 256, rollout_episodes: 10 }
    }
}

/// States visited by the victim in clean episodes.
pub fn victim_states(victim: &PolicyNetwork, env: EnvId, episodes: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let policy = NetworkPolicy::new(victim, env.manifest())?;
    let mut e = Env::new(env);
    let mut states = Vec::new();
    for k in 0..episodes {
        let mut obs = e.reset_seeded(rng::derive_seed(seed, "victim-states", k as u64));
        loop {
            states.push(obs.clone());
            let (state, _) = e.step(&policy.act(&obs)?)?;
            if state.done() {
                break;
            }
            obs = state.observation;
        }
    }
    Ok(states)
}

fn batch_from(states: &[Vec<f64>], rng: &mut impl Rng, size: usize) -> Matrix {
    let n = states[0].len();
    let mut data = Vec::with_capacity(size * n);
    for _ in 0..size {
        data.extend_from_slice(&states[rng.gen_range(0..states.len())]);
    }
    Matrix::new(size, n, data).expect("finite states")
}

/// Trains an adversary against a fixed victim by maximizing the policy
/// output divergence over the victim's own state distribution (Adam ascent).
pub fn train_adversary(
    victim: &PolicyNetwork,
    env: EnvId,
    budget: PerturbationBudget,
    cfg: &AdversaryTrainConfig,
    seed: u64,
) -> Result<AdversaryNet> {
    let states = victim_states(victim, env, cfg.rollout_episodes, seed)?;
    let mut adv = AdversaryNet::new(&mut rng::child_rng(seed, "adversary-init", 0), env.manifest().state_dim, cfg.hidden, budget);
    adv.victim = crate::container::sha256_hex(&victim.to_container().to_bytes());
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut sampler = rng::child_rng(seed, "adversary-batches", 0);
    for _ in 0..cfg.steps {
        let batch = batch_from(&states, &mut sampler, cfg.batch_size);
        let (value, grads) = adv.divergence_and_gradient(victim, &batch)?;
        if !value.is_finite() {
            return Err(Error::TrainingFailure("adversary objective diverged".into()));
        }
        let ascent: Vec<Matrix> = grads.iter().map(|g| g.scale(-1.0)).collect();
        adv.mlp.adam_step(&mut opt, &ascent);
    }
    Ok(adv)
}

/// Settings of a Stochastic Gradient Langevin Dynamics minimization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgldConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Inverse temperature; `f64::INFINITY` disables the noise.
    pub beta: f64,
}

impl SgldConfig {
    /// Attack defaults: 100 steps of size `0.01 ε` at `β = 10⁴`.
    pub fn for_budget(budget: &PerturbationBudget) -> Self {
        Self { steps: 100, step_size: 0.01 * budget.epsilon, beta: 1e4 }
    }
}

/// Projected SGLD over `B_ε(center)`:
/// `x ← proj(x − η ∇f(x) − √(2η/β) ξ)`, starting at `start`.
/// Returns the best iterate visited (the start included) and its value.
pub fn sgld_minimize(
    objective: &mut dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    center: &[f64],
    start: &[f64],
    budget: &PerturbationBudget,
    cfg: &SgldConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, f64)> {
    let mut x = start.to_vec();
    budget.project(center, &mut x);
    let (mut f, mut g) = objective(&x)?;
    let (mut best, mut best_f) = (x.clone(), f);
    let noise = if cfg.beta.is_finite() { (2.0 * cfg.step_size / cfg.beta).sqrt() } else { 0.0 };
    for _ in 0..cfg.steps {
        for (xi, gi) in x.iter_mut().zip(&g) {
            let xi_noise: f64 = if noise > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
            *xi -= cfg.step_size * gi + noise * xi_noise;
        }
        budget.project(center, &mut x);
        (f, g) = objective(&x)?;
        if f < best_f {
            best_f = f;
            best.clone_from(&x);
        }
    }
    Ok((best, best_f))
}

/// Robust Sarsa settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RsConfig {
    pub learning_rate: f64,
    pub steps_per_env: usize,
    pub n_envs: usize,
    pub n_updates: usize,
    /// SGLD iterations of the attack.
    pub sgld_steps: usize,
    pub penalty_weight: f64,
    /// ℓ∞ radius of `B(a)` as a fraction of the action range.
    pub penalty_radius: f64,
    /// SGLD iterations of the penalty's inner maximization.
    pub penalty_sgld_steps: usize,
    pub hidden: Vec<usize>,
    pub minibatch: usize,
    /// Passes over each round's transitions.
    pub epochs: usize,
}

impl Default for RsConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            steps_per_env: 512,
            n_envs: 4,
            n_updates: 50,
            sgld_steps: 100,
            penalty_weight: 0.1,
            penalty_radius: 0.05,
            penalty_sgld_steps: 10,
            hidden: vec![64],
            minibatch: 256,
            epochs: 10,
        }
    }
}

/// One on-policy transition `(s, a, r, s', a')` with encoded actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub next_action: Vec<f64>,
    /// Failure termination; truncated episodes bootstrap.
    pub terminal: bool,
}

/// Action-value critic `Q(s, a)` of a fixed victim.
#[derive(Clone, Debug, PartialEq)]
pub struct RsCritic {
    pub q: PolicyNetwork,
    pub state_dim: usize,
    pub action_space: ActionSpace,
    pub gamma: f64,
    pub victim: String,
}

impl RsCritic {
    pub fn new(rng: &mut impl Rng, state_dim: usize, action_space: ActionSpace, gamma: f64, hidden: &[usize]) -> Self {
        let k = action_space.encoding_dim();
        let q = PolicyNetwork::new(rng, state_dim + k, hidden, 1, HeadKind::Deterministic, NetMode::Vanilla, "critic");
        Self { q, state_dim, action_space, gamma, victim: String::new() }
    }

    fn input(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let mut x = s.to_vec();
        x.extend_from_slice(a);
        x
    }

    pub fn value(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        Ok(self.q.forward(&self.input(s, a))?[0])
    }

    /// Batch TD plus robustness-penalty loss; returns `(loss, td_loss)` and
    /// takes one optimizer step.
    pub fn td_update(&mut self, batch: &[&Transition], cfg: &RsConfig, opt: &mut Adam, rng: &mut impl Rng) -> Result<(f64, f64)> {
        let frozen = self.q.frozen()?;
        let cols = self.q.input_dim();
        let mut x = Vec::with_capacity(batch.len() * cols);
        let mut y = Vec::with_capacity(batch.len());
        for t in batch {
            x.extend(self.input(&t.state, &t.action));
            let boot = if t.terminal { 0.0 } else { frozen.output(&self.input(&t.next_state, &t.next_action))[0] };
            y.push(t.reward + self.gamma * boot);
        }
        let mut tape = Tape::new();
        let vars = self.q.register(&mut tape);
        let xv = tape.leaf(Matrix::new(batch.len(), cols, x)?);
        let q = self.q.forward_tape(&mut tape, &vars, xv)?;
        let target = tape.leaf(Matrix::new(batch.len(), 1, y)?);
        let diff = tape.sub(q, target)?;
        let sq = tape.square(diff);
        let td = tape.mean(sq);
        let td_value = tape.value(td).item();
        let loss = if cfg.penalty_weight > 0.0 {
            let perturbed = self.worst_actions(&frozen, batch, cfg, rng)?;
            let pv = tape.leaf(Matrix::new(batch.len(), cols, perturbed)?);
            let qp = self.q.forward_tape(&mut tape, &vars, pv)?;
            let gap = tape.sub(qp, q)?;
            let gap2 = tape.square(gap);
            let pen = tape.mean(gap2);
            let pen = tape.mul_const(pen, cfg.penalty_weight);
            tape.add(td, pen)?
        } else {
            td
        };
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::TrainingFailure("Robust Sarsa loss diverged".into()));
        }
        let grads = vars.gradients(&tape.backward(loss)?);
        self.q.adam_step(opt, &grads);
        Ok((value, td_value))
    }

    /// Inner maximization of `(Q(s, ã) − Q(s, a))²` over the ℓ∞ box `B(a)` by
    /// SGLD started at a random point of the box. Returns critic inputs `[s, ã]`.
    fn worst_actions(&self, frozen: &FrozenPolicy, batch: &[&Transition], cfg: &RsConfig, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let radius = cfg.penalty_radius * self.action_space.range();
        let ball = PerturbationBudget::linf(radius);
        let sgld = SgldConfig { steps: cfg.penalty_sgld_steps, step_size: 0.25 * radius, beta: 1e4 };
        let n = self.state_dim;
        let mut out = Vec::with_capacity(batch.len() * frozen.input_dim());
        for t in batch {
            let q_a = frozen.output(&self.input(&t.state, &t.action))[0];
            let start: Vec<f64> = t.action.iter().map(|a| a + rng.gen_range(-radius..=radius)).collect();
            let mut objective = |a: &[f64]| -> Result<(f64, Vec<f64>)> {
                let trace = frozen.trace(&self.input(&t.state, a));
                let gap = trace.output()[0] - q_a;
                let grad = frozen.input_gradient(&trace, &[1.0]);
                // ascent on gap², expressed as descent on −gap² with a sign step
                let g: Vec<f64> = grad[n..].iter().map(|d| -(2.0 * gap * d).signum()).collect();
                Ok((-gap * gap, g))
            };
            let (best, _) = sgld_minimize(&mut objective, &t.action, &start, &ball, &sgld, rng)?;
            out.extend(self.input(&t.state, &best));
        }
        Ok(out)
    }

    pub fn to_container(&self) -> Container {
        let mut c = self.q.to_container();
        c.kind = "rs-critic".into();
        c.set("state_dim", self.state_dim).set_f64("gamma", self.gamma).set("victim", &self.victim);
        c
    }

    pub fn from_container(c: &Container, env: EnvId) -> Result<Self> {
        c.expect_kind("rs-critic")?;
        let mut inner = c.clone();
        inner.kind = "policy".into();
        let q = PolicyNetwork::from_container(&inner)?;
        let manifest = env.manifest();
        if q.input_dim() != manifest.state_dim + manifest.action_space.encoding_dim() {
            return Err(Error::Schema(format!("critic input width does not fit {env}")));
        }
        Ok(Self {
            q,
            state_dim: manifest.state_dim,
            action_space: manifest.action_space.clone(),
            gamma: c.parse("gamma")?,
            victim: c.get("victim")?.to_string(),
        })
    }
}

/// Collects `steps` on-policy transitions from one persistent environment.
fn collect_transitions(
    env: &mut Env,
    obs: &mut Vec<f64>,
    policy: &NetworkPolicy,
    steps: usize,
    episode_seed: &mut impl FnMut() -> u64,
) -> Result<Vec<Transition>> {
    let space = env.manifest().action_space.clone();
    let mut out = Vec::with_capacity(steps);
    let mut action = policy.act(obs)?;
    for _ in 0..steps {
        let (state, reward) = env.step(&action)?;
        let next_action = policy.act(&state.observation)?;
        out.push(Transition {
            state: obs.clone(),
            action: space.encode(&action),
            reward,
            next_state: state.observation.clone(),
            next_action: space.encode(&next_action),
            terminal: state.terminal,
        });
        if state.done() {
            *obs = env.reset_seeded(episode_seed());
            action = policy.act(obs)?;
        } else {
            *obs = state.observation;
            action = next_action;
        }
    }
    Ok(out)
}

/// Runs `n_updates` rounds of on-policy collection (`n_envs × steps_per_env`
/// transitions) followed by `epochs` minibatch passes of TD + penalty.
pub fn train_rs_critic(victim: &PolicyNetwork, env: EnvId, cfg: &RsConfig, seed: u64) -> Result<RsCritic> {
    let manifest = env.manifest();
    let policy = NetworkPolicy::new(victim, manifest)?;
    let mut critic = RsCritic::new(
        &mut rng::child_rng(seed, "critic-init", 0),
        manifest.state_dim,
        manifest.action_space.clone(),
        manifest.constants.gamma,
        &cfg.hidden,
    );
    critic.victim = crate::container::sha256_hex(&victim.to_container().to_bytes());
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut rng = rng::child_rng(seed, "critic-train", 0);
    let mut envs: Vec<Env> = (0..cfg.n_envs).map(|_| Env::new(env)).collect();
    let mut episode = 0u64;
    let mut next_seed = || {
        episode += 1;
        rng::derive_seed(seed, "critic-episode", episode)
    };
    let mut obs: Vec<Vec<f64>> = envs.iter_mut().map(|e| e.reset_seeded(next_seed())).collect();
    for round in 0..cfg.n_updates {
        let mut data = Vec::with_capacity(cfg.n_envs * cfg.steps_per_env);
        for (e, o) in envs.iter_mut().zip(obs.iter_mut()) {
            data.extend(collect_transitions(e, o, &policy, cfg.steps_per_env, &mut next_seed)?);
        }
        let mut last = 0.0;
        for _ in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.minibatch) {
                let batch: Vec<&Transition> = chunk.iter().map(|&i| &data[i]).collect();
                last = critic.td_update(&batch, cfg, &mut opt, &mut rng)?.1;
            }
        }
        log::debug!("rs critic round {round}: td loss {last:.4}");
    }
    Ok(critic)
}

/// Expected critic value of the victim's response to `ŝ`, with its gradient in `ŝ`.
fn attack_objective(critic: &RsCritic, q: &FrozenPolicy, victim: &FrozenPolicy, s: &[f64], s_hat: &[f64]) -> (f64, Vec<f64>) {
    let trace = victim.trace(s_hat);
    let n = critic.state_dim;
    match &critic.action_space {
        ActionSpace::Discrete(m) => {
            // Σ_a π(a|ŝ) Q(s, a)
            let qs: Vec<f64> = (0..*m)
                .map(|a| q.output(&critic.input(s, &critic.action_space.encode(&Action::Discrete(a))))[0])
                .collect();
            let value = trace.output().iter().zip(&qs).map(|(p, q)| p * q).sum();
            (value, victim.input_gradient(&trace, &qs))
        }
        ActionSpace::Box { low, high } => {
            let raw = trace.output();
            let action: Vec<f64> = raw.iter().zip(low.iter().zip(high)).map(|(v, (l, h))| v.clamp(*l, *h)).collect();
            let qt = q.trace(&critic.input(s, &action));
            let dq = q.input_gradient(&qt, &[1.0]);
            let upstream: Vec<f64> = dq[n..]
                .iter()
                .zip(raw.iter().zip(low.iter().zip(high)))
                .map(|(d, (v, (l, h)))| if v < l || v > h { 0.0 } else { *d })
                .collect();
            (qt.output()[0], victim.input_gradient(&trace, &upstream))
        }
    }
}

/// SGLD search for `argmin_{ŝ ∈ B_ε(s)} Q(s, π(ŝ))`, starting at `s`.
/// Returns the best perturbed state and its critic value.
pub fn rs_attack(
    critic: &RsCritic,
    victim: &FrozenPolicy,
    s: &[f64],
    budget: &PerturbationBudget,
    sgld: &SgldConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, f64)> {
    let q = critic.q.frozen()?;
    if budget.epsilon == 0.0 {
        let (v, _) = attack_objective(critic, &q, victim, s, s);
        return Ok((s.to_vec(), v));
    }
    let mut objective = |x: &[f64]| Ok(attack_objective(critic, &q, victim, s, x));
    sgld_minimize(&mut objective, s, s, budget, sgld, rng)
}

/// Robust Sarsa attack hook.
pub struct RsAttack<'a> {
    critic: &'a RsCritic,
    victim: FrozenPolicy,
    budget: PerturbationBudget,
    sgld: SgldConfig,
    rng: rng::Rng,
}

impl<'a> RsAttack<'a> {
    pub fn new(critic: &'a RsCritic, victim: &PolicyNetwork, budget: PerturbationBudget, sgld_steps: usize) -> Result<Self> {
        let sgld = SgldConfig { steps: sgld_steps, ..SgldConfig::for_budget(&budget) };
        Ok(Self { critic, victim: victim.frozen()?, budget, sgld, rng: rng::rng_from(0) })
    }
}

impl ObservationAdversary for RsAttack<'_> {
    fn begin_episode(&mut self, seed: u64) {
        self.rng = rng::child_rng(seed, "rs-attack", 0);
    }

    fn perturb(&mut self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(rs_attack(self.critic, &self.victim, s, &self.budget, &self.sgld, &mut self.rng)?.0)
    }
}

/// A trained attack model of either learned kind.
#[derive(Clone, Debug, PartialEq)]
pub enum AttackModel {
    Adversary(AdversaryNet),
    Critic(RsCritic),
}

impl AttackModel {
    pub fn save(&self, path: &Path, budget: &PerturbationBudget) -> Result<()> {
        let mut c = match self {
            AttackModel::Adversary(a) => a.to_container(),
            AttackModel::Critic(q) => q.to_container(),
        };
        c.set_f64("epsilon", budget.epsilon).set("norm", budget.norm);
        c.write(path)
    }

    /// Loads an attack artifact and checks its budget against `budget`.
    pub fn load(path: &Path, env: EnvId, budget: &PerturbationBudget) -> Result<Self> {
        let c = Container::read(path)?;
        let eps: f64 = c.parse("epsilon")?;
        let norm: Norm = c.parse("norm")?;
        if eps.to_bits() != budget.epsilon.to_bits() || norm != budget.norm {
            return Err(Error::BudgetMismatch(format!(
                "{} was trained for {norm} ε={eps}, requested {budget}",
                path.display()
            )));
        }
        match c.kind.as_str() {
            "adversary" => Ok(AttackModel::Adversary(AdversaryNet::from_container(&c)?)),
            "rs-critic" => Ok(AttackModel::Critic(RsCritic::from_container(&c, env)?)),
            other => Err(Error::Schema(format!("'{other}' is not an attack artifact"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lipschitz_net::{Activation, LipschitzLayer};

    fn linear_victim(k: f64) -> PolicyNetwork {
        let layer = LipschitzLayer {
            weight: Matrix::new(1, 1, vec![k]).unwrap(),
            bias: vec![0.0],
            budget: 0.0,
            activation: Activation::Identity,
        };
        PolicyNetwork::from_layers(vec![layer], HeadKind::Deterministic, NetMode::Vanilla, "toy").unwrap()
    }

    #[test]
    fn random_noise_respects_each_norm() {
        let s = [0.3, -1.0, 2.0, 0.0];
        let mut r = rng::rng_from(5);
        assert_eq!(random_noise(&s, &PerturbationBudget::linf(0.0), &mut r), s.to_vec());
        for _ in 0..1000 {
            let x = random_noise(&s, &PerturbationBudget::l2(0.07), &mut r);
            let d = crate::tensor::distance(&s, &x, Norm::L2);
            assert!((d - 0.07).abs() < 1e-12);
        }
    }

    #[test]
    fn linf_noise_is_bounded_and_zero_mean() {
        let s = [1.0, -2.0, 0.5];
        let eps = 0.1;
        let mut r = rng::rng_from(6);
        let n = 100_000;
        let mut sums = [0.0; 3];
        for _ in 0..n {
            let x = random_noise(&s, &PerturbationBudget::linf(eps), &mut r);
            for i in 0..3 {
                let d = x[i] - s[i];
                assert!(d.abs() <= eps);
                sums[i] += d;
            }
        }
        // U[-ε, ε] has std ε/√3; 3σ band on the mean
        let band = 3.0 * eps / 3f64.sqrt() / (n as f64).sqrt();
        for total in sums {
            assert!((total / n as f64).abs() < band);
        }
    }

    #[test]
    fn zero_offset_adversary_is_identity() {
        let adv = AdversaryNet::zero_offset(&mut rng::rng_from(0), 3, 8, PerturbationBudget::linf(0.2));
        let s = [0.1, 0.2, -0.3];
        assert_eq!(adv.perturb(&s).unwrap(), s.to_vec());
    }

    #[test]
    fn constant_victim_leaves_adversary_unchanged() {
        let victim = linear_victim(0.0);
        let mut adv = AdversaryNet::new(&mut rng::rng_from(1), 1, 4, PerturbationBudget::linf(0.1));
        let before = adv.clone();
        adv.ascent_step(&victim, &Matrix::new(3, 1, vec![0.1, 0.5, -0.2]).unwrap(), 0.01).unwrap();
        assert_eq!(adv, before);
    }

    #[test]
    fn scalar_ascent_moves_offset_toward_the_boundary() {
        // π(s) = k s and a bias-only adversary: D = |k| ε |tanh(φ)|, so ascent
        // pushes tanh(φ) toward ±1 along sign(φ).
        let victim = linear_victim(2.0);
        let mut adv = AdversaryNet::zero_offset(&mut rng::rng_from(2), 1, 2, PerturbationBudget::linf(0.1));
        adv.mlp.layers[1].bias[0] = 0.05;
        let states = Matrix::new(4, 1, vec![0.3, -0.1, 0.0, 0.7]).unwrap();
        let mut last = 0.0;
        for _ in 0..200 {
            let d = adv.ascent_step(&victim, &states, 1.0).unwrap();
            assert!(d >= last - 1e-12);
            last = d;
        }
        for &x in states.data() {
            assert!(adv.perturb(&[x]).unwrap()[0] - x > 0.09);
        }
        // hand-derived gradient of the first step
        let mut fresh = AdversaryNet::zero_offset(&mut rng::rng_from(2), 1, 2, PerturbationBudget::linf(0.1));
        fresh.mlp.layers[1].bias[0] = 0.05;
        let (_, grads) = fresh.divergence_and_gradient(&victim, &states).unwrap();
        let expected = 2.0 * 0.1 * (1.0 - 0.05f64.tanh().powi(2));
        assert!((grads[4].data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn trained_adversary_finds_the_grid_optimum_on_a_linear_victim() {
        let victim = linear_victim(-1.5);
        let budget = PerturbationBudget::linf(0.1);
        let mut adv = AdversaryNet::new(&mut rng::rng_from(3), 1, 8, budget);
        let states = Matrix::new(5, 1, vec![-0.4, -0.1, 0.0, 0.2, 0.5]).unwrap();
        for _ in 0..3000 {
            adv.ascent_step(&victim, &states, 0.5).unwrap();
        }
        for &s in states.data() {
            // grid oracle: D(s') = 1.5|s' − s| over B_ε(s) peaks at the boundary
            let grid_best = (0..=200)
                .map(|i| s - 0.1 + 0.2 * i as f64 / 200.0)
                .map(|x| 1.5 * (x - s).abs())
                .fold(0.0, f64::max);
            let got = 1.5 * (adv.perturb(&[s]).unwrap()[0] - s).abs();
            assert!(got >= 0.95 * grid_best, "s={s}: {got} vs {grid_best}");
        }
    }

    #[test]
    fn adversary_outputs_are_always_feasible() {
        for norm in [Norm::Linf, Norm::L2] {
            let budget = PerturbationBudget::new(0.05, norm).unwrap();
            let adv = AdversaryNet::new(&mut rng::rng_from(4), 4, 16, budget);
            let mut r = rng::rng_from(9);
            for _ in 0..500 {
                let s: Vec<f64> = (0..4).map(|_| r.gen_range(-3.0..3.0)).collect();
                assert!(budget.contains(&s, &adv.perturb(&s).unwrap()));
            }
        }
    }

    #[test]
    fn sgld_recovers_a_convex_minimizer() {
        let z = [0.03, -0.02, 0.01];
        let s = [0.0; 3];
        let budget = PerturbationBudget::linf(0.05);
        let mut f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let d: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a - b).collect();
            Ok((d.iter().map(|v| v * v).sum(), d.iter().map(|v| 2.0 * v).collect()))
        };
        let cfg = SgldConfig { steps: 200, step_size: 0.1, beta: f64::INFINITY };
        let (best, value) = sgld_minimize(&mut f, &s, &s, &budget, &cfg, &mut rng::rng_from(0)).unwrap();
        assert!(crate::tensor::distance(&best, &z, Norm::L2) < 1e-3);
        assert!(value < 1e-6);
    }

    #[test]
    fn noiseless_sgld_step_is_a_projected_gradient_step() {
        let z = [0.5, -0.5];
        let s = [0.0, 0.0];
        let budget = PerturbationBudget::l2(0.1);
        let mut f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let d: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a - b).collect();
            Ok((d.iter().map(|v| v * v).sum(), d.iter().map(|v| 2.0 * v).collect()))
        };
        let cfg = SgldConfig { steps: 1, step_size: 0.02, beta: f64::INFINITY };
        let start = [0.01, 0.0];
        let (best, _) = sgld_minimize(&mut f, &s, &start, &budget, &cfg, &mut rng::rng_from(0)).unwrap();
        let mut expected = [0.01 - 0.02 * 2.0 * (0.01 - 0.5), 0.0 - 0.02 * 2.0 * 0.5];
        budget.project(&s, &mut expected);
        assert_eq!(best, expected.to_vec());
    }

    #[test]
    fn absorbing_mdp_sarsa_reaches_the_analytic_fixed_point() {
        // one state, one action, constant reward, never terminates: Q = r/(1−γ)
        let (r, gamma) = (0.5, 0.9);
        let space = ActionSpace::Box { low: vec![-1.0], high: vec![1.0] };
        let mut critic = RsCritic::new(&mut rng::rng_from(0), 2, space, gamma, &[16]);
        let t = Transition {
            state: vec![0.2, -0.4],
            action: vec![0.3],
            reward: r,
            next_state: vec![0.2, -0.4],
            next_action: vec![0.3],
            terminal: false,
        };
        let cfg = RsConfig { penalty_weight: 0.0, learning_rate: 1e-2, ..RsConfig::default() };
        let mut opt = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
        let mut rng = rng::rng_from(1);
        let batch = vec![&t; 8];
        for _ in 0..3000 {
            critic.td_update(&batch, &cfg, &mut opt, &mut rng).unwrap();
        }
        let q = critic.value(&t.state, &t.action).unwrap();
        let target = r / (1.0 - gamma);
        assert!((q - target).abs() / target < 0.05, "Q = {q}, expected {target}");
    }

    #[test]
    fn zero_penalty_update_is_plain_semi_gradient_sarsa() {
        let space = ActionSpace::Discrete(2);
        let critic = RsCritic::new(&mut rng::rng_from(3), 2, space.clone(), 0.9, &[8]);
        let ts: Vec<Transition> = (0..6)
            .map(|i| Transition {
                state: vec![i as f64 * 0.1, -0.2],
                action: space.encode(&Action::Discrete(i % 2)),
                reward: 1.0,
                next_state: vec![i as f64 * 0.1 + 0.05, -0.1],
                next_action: space.encode(&Action::Discrete((i + 1) % 2)),
                terminal: i == 5,
            })
            .collect();
        let batch: Vec<&Transition> = ts.iter().collect();
        let cfg = RsConfig { penalty_weight: 0.0, ..RsConfig::default() };

        let mut a = critic.clone();
        let mut opt = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
        a.td_update(&batch, &cfg, &mut opt, &mut rng::rng_from(0)).unwrap();

        // reference: gradient of mean (Q(s,a) − y)² with y frozen, computed by
        // central differences, then the same first Adam step
        let mut b = critic.clone();
        let frozen = critic.q.frozen().unwrap();
        let ys: Vec<f64> = ts
            .iter()
            .map(|t| {
                let mut x = t.next_state.clone();
                x.extend(&t.next_action);
                t.reward + if t.terminal { 0.0 } else { 0.9 * frozen.output(&x)[0] }
            })
            .collect();
        let loss = |net: &PolicyNetwork| -> f64 {
            ts.iter()
                .zip(&ys)
                .map(|(t, y)| {
                    let mut x = t.state.clone();
                    x.extend(&t.action);
                    (net.forward(&x).unwrap()[0] - y).powi(2)
                })
                .sum::<f64>()
                / ts.len() as f64
        };
        let mut grads = Vec::new();
        let groups: Vec<usize> = b.q.parameters_mut().iter().map(|p| p.len()).collect();
        for (gi, len) in groups.into_iter().enumerate() {
            let mut g = vec![0.0; len];
            for (k, gk) in g.iter_mut().enumerate() {
                let mut plus = b.q.clone();
                plus.parameters_mut()[gi][k] += 1e-6;
                let mut minus = b.q.clone();
                minus.parameters_mut()[gi][k] -= 1e-6;
                *gk = (loss(&plus) - loss(&minus)) / 2e-6;
            }
            grads.push(Matrix::new(1, len, g).unwrap());
        }
        let mut opt = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
        b.q.adam_step(&mut opt, &grads);
        for (pa, pb) in a.q.parameters_mut().into_iter().zip(b.q.parameters_mut()) {
            for (x, y) in pa.iter().zip(pb.iter()) {
                assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn rs_attack_is_feasible_and_never_worse_than_the_start() {
        let mut r = rng::rng_from(8);
        let victim = PolicyNetwork::new(&mut r, 3, &[8], 1, HeadKind::Deterministic, NetMode::Vanilla, "pendulum");
        let space = ActionSpace::Box { low: vec![-2.0], high: vec![2.0] };
        let critic = RsCritic::new(&mut r, 3, space, 0.99, &[8]);
        let frozen = victim.frozen().unwrap();
        for norm in [Norm::Linf, Norm::L2] {
            let budget = PerturbationBudget::new(0.05, norm).unwrap();
            let s = [0.3, -0.2, 0.1];
            let (s_hat, v) = rs_attack(&critic, &frozen, &s, &budget, &SgldConfig::for_budget(&budget), &mut r).unwrap();
            assert!(budget.contains(&s, &s_hat));
            let (v0, _) = attack_objective(&critic, &critic.q.frozen().unwrap(), &frozen, &s, &s);
            assert!(v <= v0);
        }
        let zero = PerturbationBudget::linf(0.0);
        let s = [0.1, 0.2, 0.3];
        assert_eq!(rs_attack(&critic, &frozen, &s, &zero, &SgldConfig::for_budget(&zero), &mut r).unwrap().0, s.to_vec());
    }

    #[test]
    fn attack_gradient_matches_finite_differences() {
        let mut r = rng::rng_from(11);
        let victim = PolicyNetwork::new(&mut r, 4, &[8], 2, HeadKind::Categorical, NetMode::Vanilla, "cartpole");
        let critic = RsCritic::new(&mut r, 4, ActionSpace::Discrete(2), 0.99, &[8]);
        let frozen = victim.frozen().unwrap();
        let s = [0.1, -0.3, 0.05, 0.2];
        let x = [0.12, -0.28, 0.04, 0.21];
        let q = critic.q.frozen().unwrap();
        let (_, g) = attack_objective(&critic, &q, &frozen, &s, &x);
        for i in 0..4 {
            let (mut p, mut m) = (x, x);
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (attack_objective(&critic, &q, &frozen, &s, &p).0 - attack_objective(&critic, &q, &frozen, &s, &m).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[i]);
        }
    }
}
