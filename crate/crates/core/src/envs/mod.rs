//! Deterministic, seedable classic-control environments and the
//! observation-perturbation loop of the state-adversarial setting: the agent
//! acts on `ŝ ∈ B_ε(s)` while the dynamics evolve on the true `s`.

pub mod cartpole;
pub mod pendulum;

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;

use crate::certificate::{MdpConstants, PerturbationBudget};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::lipschitz_net::{FrozenPolicy, HeadKind, PolicyNetwork};
use crate::rng;
use crate::tensor::{self, argmax, Norm};

pub use cartpole::CartPole;
pub use pendulum::Pendulum;

/// Discount used by certificates and critics for both environments.
pub const GAMMA: f64 = 0.99;
/// Safety factor applied to sampled MDP Lipschitz constants.
pub const CONSTANT_INFLATION: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EnvId {
    CartPole,
    Pendulum,
}

impl EnvId {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::CartPole => "cartpole",
            EnvId::Pendulum => "pendulum",
        }
    }

    pub fn manifest(self) -> &'static EnvManifest {
        static CARTPOLE: OnceLock<EnvManifest> = OnceLock::new();
        static PENDULUM: OnceLock<EnvManifest> = OnceLock::new();
        match self {
            EnvId::CartPole => CARTPOLE.get_or_init(|| EnvManifest::build(self)),
            EnvId::Pendulum => PENDULUM.get_or_init(|| EnvManifest::build(self)),
        }
    }

    /// Head a policy for this environment must have.
    pub fn policy_head(self) -> HeadKind {
        match self {
            EnvId::CartPole => HeadKind::Categorical,
            EnvId::Pendulum => HeadKind::Deterministic,
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cartpole" | "cartpole-v1" => Ok(EnvId::CartPole),
            "pendulum" | "pendulum-v1" => Ok(EnvId::Pendulum),
            other => Err(Error::Contract(format!("unknown environment '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ActionSpace {
    Discrete(usize),
    Box { low: Vec<f64>, high: Vec<f64> },
}

impl ActionSpace {
    /// Width of the action encoding (one-hot for discrete spaces).
    pub fn encoding_dim(&self) -> usize {
        match self {
            ActionSpace::Discrete(n) => *n,
            ActionSpace::Box { low, .. } => low.len(),
        }
    }

    pub fn contains(&self, action: &Action) -> bool {
        match (self, action) {
            (ActionSpace::Discrete(n), Action::Discrete(a)) => a < n,
            (ActionSpace::Box { low, high }, Action::Continuous(v)) => {
                v.len() == low.len()
                    && v.iter().zip(low.iter().zip(high)).all(|(x, (l, h))| x.is_finite() && x >= l && x <= h)
            }
            _ => false,
        }
    }

    /// Vector form of an action: one-hot for discrete, the raw vector otherwise.
    pub fn encode(&self, action: &Action) -> Vec<f64> {
        match (self, action) {
            (ActionSpace::Discrete(n), Action::Discrete(a)) => {
                let mut v = vec![0.0; *n];
                v[*a] = 1.0;
                v
            }
            (_, Action::Continuous(v)) => v.clone(),
            (ActionSpace::Box { low, .. }, Action::Discrete(a)) => vec![*a as f64; low.len()],
        }
    }

    /// Largest coordinate range of the encoding.
    pub fn range(&self) -> f64 {
        match self {
            ActionSpace::Discrete(_) => 1.0,
            ActionSpace::Box { low, high } => {
                low.iter().zip(high).map(|(l, h)| h - l).fold(0.0, f64::max)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

/// Static description of an environment.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvManifest {
    pub id: EnvId,
    pub state_dim: usize,
    pub action_space: ActionSpace,
    pub episode_cap: usize,
    /// Per-step reward lies in `[0, r_max]`.
    pub r_max: f64,
    /// Sampled and inflated Lipschitz constants with the discount.
    pub constants: MdpConstants,
    /// Units of each observation coordinate; ε is measured in these units.
    pub observation_units: &'static str,
}

impl EnvManifest {
    fn build(id: EnvId) -> Self {
        let (l_r, l_p) = estimate_mdp_lipschitz(id, 20_000, 0);
        let (state_dim, action_space, episode_cap, units) = match id {
            EnvId::CartPole => (
                4,
                ActionSpace::Discrete(2),
                cartpole::EPISODE_CAP,
                "x [m], x_dot [m/s], theta [rad], theta_dot [rad/s] (raw)",
            ),
            EnvId::Pendulum => (
                3,
                ActionSpace::Box { low: vec![-pendulum::MAX_TORQUE], high: vec![pendulum::MAX_TORQUE] },
                pendulum::EPISODE_CAP,
                "cos(theta), sin(theta), theta_dot/8 (all in [-1, 1])",
            ),
        };
        let constants = MdpConstants {
            gamma: GAMMA,
            r_max: 1.0,
            l_r: CONSTANT_INFLATION * l_r,
            l_p: CONSTANT_INFLATION * l_p,
        };
        Self { id, state_dim, action_space, episode_cap, r_max: 1.0, constants, observation_units: units }
    }

    pub fn write_header(&self, c: &mut Container) {
        c.set("env", self.id)
            .set("state_dim", self.state_dim)
            .set("episode_cap", self.episode_cap);
        match &self.action_space {
            ActionSpace::Discrete(n) => {
                c.set("action_kind", "discrete").set("action_dim", n);
            }
            ActionSpace::Box { low, .. } => {
                c.set("action_kind", "box").set("action_dim", low.len());
            }
        }
        c.set_f64("r_max", self.r_max)
            .set_f64("gamma", self.constants.gamma)
            .set_f64("l_r", self.constants.l_r)
            .set_f64("l_p", self.constants.l_p);
    }

    /// Resolves the manifest named in a container header and checks that the
    /// recorded shape agrees with the built-in environment.
    pub fn from_header(c: &Container) -> Result<&'static Self> {
        let id: EnvId = c.get("env")?.parse().map_err(|e: Error| Error::Schema(e.to_string()))?;
        let m = id.manifest();
        if c.parse::<usize>("state_dim")? != m.state_dim
            || c.parse::<usize>("action_dim")? != m.action_space.encoding_dim()
        {
            return Err(Error::Schema(format!("{id} manifest in file disagrees with the environment")));
        }
        Ok(m)
    }
}

/// Observable state after a step.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    /// Failure termination; absorbing.
    pub terminal: bool,
    /// Episode cap reached.
    pub truncated: bool,
    pub step_index: usize,
}

impl EnvState {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

#[derive(Clone, Debug)]
enum Dynamics {
    CartPole(CartPole),
    Pendulum(Pendulum),
}

/// A running environment instance.
#[derive(Clone, Debug)]
pub struct Env {
    manifest: &'static EnvManifest,
    dynamics: Dynamics,
    state: EnvState,
}

impl Env {
    pub fn new(id: EnvId) -> Self {
        let manifest = id.manifest();
        let dynamics = match id {
            EnvId::CartPole => Dynamics::CartPole(CartPole::new()),
            EnvId::Pendulum => Dynamics::Pendulum(Pendulum::new()),
        };
        let observation = vec![0.0; manifest.state_dim];
        Self { manifest, dynamics, state: EnvState { observation, terminal: false, truncated: false, step_index: 0 } }
    }

    pub fn manifest(&self) -> &'static EnvManifest {
        self.manifest
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn observation(&self) -> &[f64] {
        &self.state.observation
    }

    /// Samples an initial state from the standard neighbourhood.
    pub fn reset(&mut self, rng: &mut impl Rng) -> Vec<f64> {
        let observation = match &mut self.dynamics {
            Dynamics::CartPole(c) => c.reset(rng).to_vec(),
            Dynamics::Pendulum(p) => {
                p.reset(rng);
                p.observation().to_vec()
            }
        };
        self.state = EnvState { observation: observation.clone(), terminal: false, truncated: false, step_index: 0 };
        observation
    }

    pub fn reset_seeded(&mut self, seed: u64) -> Vec<f64> {
        self.reset(&mut rng::child_rng(seed, "reset", 0))
    }

    /// Places a pendulum at an explicit `(θ, θ̇)`.
    pub fn set_pendulum_state(&mut self, theta: f64, theta_dot: f64) -> Result<()> {
        match &mut self.dynamics {
            Dynamics::Pendulum(p) => {
                *p = Pendulum::with_state(theta, theta_dot);
                self.state = EnvState { observation: p.observation().to_vec(), terminal: false, truncated: false, step_index: 0 };
                Ok(())
            }
            Dynamics::CartPole(_) => Err(Error::Contract("not a pendulum".into())),
        }
    }

    pub fn step(&mut self, action: &Action) -> Result<(EnvState, f64)> {
        if self.state.done() {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        if !self.manifest.action_space.contains(action) {
            return Err(Error::Contract(format!("action {action:?} outside the action space")));
        }
        let (observation, terminal, reward) = match (&mut self.dynamics, action) {
            (Dynamics::CartPole(c), Action::Discrete(a)) => {
                c.state = CartPole::dynamics(c.state, *a)?;
                (c.state.to_vec(), CartPole::is_failure(&c.state), 1.0)
            }
            (Dynamics::Pendulum(p), Action::Continuous(u)) => {
                let (th, dot, r) = Pendulum::dynamics(p.theta, p.theta_dot, u[0])?;
                p.theta = th;
                p.theta_dot = dot;
                (p.observation().to_vec(), false, r)
            }
            _ => unreachable!("action space checked above"),
        };
        let step_index = self.state.step_index + 1;
        let truncated = !terminal && step_index >= self.manifest.episode_cap;
        self.state = EnvState { observation, terminal, truncated, step_index };
        Ok((self.state.clone(), reward))
    }
}

/// Maps observations to actions.
pub trait Policy: Send + Sync {
    fn act(&self, observation: &[f64]) -> Result<Action>;
}

/// A policy network acting greedily: argmax for categorical heads, the
/// clipped raw output for deterministic heads.
#[derive(Clone, Debug)]
pub struct NetworkPolicy {
    frozen: FrozenPolicy,
    space: ActionSpace,
}

impl NetworkPolicy {
    pub fn new(net: &PolicyNetwork, manifest: &EnvManifest) -> Result<Self> {
        if net.input_dim() != manifest.state_dim {
            return Err(Error::Dimension(format!(
                "{}-input policy for a {}-dimensional {} observation",
                net.input_dim(),
                manifest.state_dim,
                manifest.id
            )));
        }
        if net.output_dim() != manifest.action_space.encoding_dim() || net.head != manifest.id.policy_head() {
            return Err(Error::Dimension(format!("policy head does not match the {} action space", manifest.id)));
        }
        Ok(Self { frozen: net.frozen()?, space: manifest.action_space.clone() })
    }

    pub fn frozen(&self) -> &FrozenPolicy {
        &self.frozen
    }

    pub fn action_from_output(space: &ActionSpace, output: &[f64]) -> Action {
        match space {
            ActionSpace::Discrete(_) => Action::Discrete(argmax(output)),
            ActionSpace::Box { low, high } => Action::Continuous(
                output.iter().zip(low.iter().zip(high)).map(|(v, (l, h))| v.clamp(*l, *h)).collect(),
            ),
        }
    }
}

impl Policy for NetworkPolicy {
    fn act(&self, observation: &[f64]) -> Result<Action> {
        Ok(Self::action_from_output(&self.space, &self.frozen.output(observation)))
    }
}

/// The adversary µ: s ↦ ŝ. Outputs are projected onto `B_ε(s)` by the
/// rollout loop, so implementations may propose any point.
pub trait ObservationAdversary {
    /// Called before every episode with an episode-specific seed.
    fn begin_episode(&mut self, _seed: u64) {}
    fn perturb(&mut self, s: &[f64]) -> Result<Vec<f64>>;
}

/// Leaves observations untouched.
pub struct NoAdversary;

impl ObservationAdversary for NoAdversary {
    fn perturb(&mut self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(s.to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeOutcome {
    /// Undiscounted return.
    pub total_reward: f64,
    pub discounted_return: f64,
    pub steps: usize,
    /// Largest `‖ŝ − s‖` seen, in the budget's norm.
    pub max_perturbation: f64,
}

/// Runs one episode where the policy sees `project_{B_ε(s)}(µ(s))` and the
/// environment advances on the true state.
pub fn perturbed_rollout(
    env: &mut Env,
    policy: &dyn Policy,
    adversary: &mut dyn ObservationAdversary,
    budget: &PerturbationBudget,
    seed: u64,
) -> Result<EpisodeOutcome> {
    let gamma = env.manifest().constants.gamma;
    let mut s = env.reset_seeded(seed);
    adversary.begin_episode(rng::derive_seed(seed, "adversary", 0));
    let mut out = EpisodeOutcome { total_reward: 0.0, discounted_return: 0.0, steps: 0, max_perturbation: 0.0 };
    let mut discount = 1.0;
    loop {
        let mut s_hat = if budget.epsilon == 0.0 { s.clone() } else { adversary.perturb(&s)? };
        if s_hat.len() != s.len() {
            return Err(Error::Dimension("adversary changed the observation dimension".into()));
        }
        budget.project(&s, &mut s_hat);
        out.max_perturbation = out.max_perturbation.max(tensor::distance(&s, &s_hat, budget.norm));
        let action = policy.act(&s_hat)?;
        let (state, reward) = env.step(&action)?;
        out.total_reward += reward;
        out.discounted_return += discount * reward;
        discount *= gamma;
        out.steps += 1;
        if state.done() {
            return Ok(out);
        }
        s = state.observation;
    }
}

pub fn clean_rollout(env: &mut Env, policy: &dyn Policy, seed: u64) -> Result<EpisodeOutcome> {
    perturbed_rollout(env, policy, &mut NoAdversary, &PerturbationBudget::linf(0.0), seed)
}

/// Mean undiscounted return over `episodes` clean episodes seeded from `seed`.
pub fn mean_clean_return(id: EnvId, policy: &dyn Policy, episodes: usize, seed: u64) -> Result<f64> {
    let mut env = Env::new(id);
    let mut total = 0.0;
    for k in 0..episodes {
        total += clean_rollout(&mut env, policy, rng::derive_seed(seed, "episode", k as u64))?.total_reward;
    }
    Ok(total / episodes.max(1) as f64)
}

/// Transition function on observations used for constant estimation:
/// `(observation, action) → (next observation, reward)`.
fn observation_transition(id: EnvId, obs: &[f64], action: f64) -> (Vec<f64>, f64) {
    match id {
        EnvId::CartPole => {
            let s = [obs[0], obs[1], obs[2], obs[3]];
            let a = if action > 0.5 { 1 } else { 0 };
            let next = CartPole::dynamics(s, a).expect("valid action");
            (next.to_vec(), 1.0)
        }
        EnvId::Pendulum => {
            let (th, dot) = Pendulum::state_from_observation(obs);
            let (th2, dot2, r) = Pendulum::dynamics(th, dot, action).expect("torque in range");
            (Pendulum::observe(th2, dot2).to_vec(), r)
        }
    }
}

/// Sampled finite-difference estimates `(L_r, L_P)` over the reachable
/// state box, with input distance `‖s − s'‖ + ‖a − a'‖`. The maximum over
/// the ℓ₂ and ℓ∞ metrics is returned so the constants hold for both budgets.
pub fn estimate_mdp_lipschitz(id: EnvId, samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = rng::child_rng(seed, "mdp-constants", id as u64);
    let (mut l_r, mut l_p) = (0.0f64, 0.0f64);
    for _ in 0..samples {
        let (s1, a1, s2, a2) = match id {
            EnvId::CartPole => {
                let s1 = vec![
                    rng.gen_range(-cartpole::X_THRESHOLD..cartpole::X_THRESHOLD),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-cartpole::THETA_THRESHOLD..cartpole::THETA_THRESHOLD),
                    rng.gen_range(-3.5..3.5),
                ];
                let s2: Vec<f64> = s1.iter().map(|v| v + rng.gen_range(-1e-4..1e-4)).collect();
                let a = if rng.gen::<bool>() { 1.0 } else { 0.0 };
                (s1, a, s2, a)
            }
            EnvId::Pendulum => {
                let th = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let dot = rng.gen_range(-pendulum::MAX_SPEED..pendulum::MAX_SPEED);
                let a1 = rng.gen_range(-pendulum::MAX_TORQUE..pendulum::MAX_TORQUE);
                let th2 = th + rng.gen_range(-1e-4..1e-4);
                let dot2 = (dot + rng.gen_range(-1e-3..1e-3)).clamp(-pendulum::MAX_SPEED, pendulum::MAX_SPEED);
                let a2 = (a1 + rng.gen_range(-1e-4..1e-4)).clamp(-pendulum::MAX_TORQUE, pendulum::MAX_TORQUE);
                (Pendulum::observe(th, dot).to_vec(), a1, Pendulum::observe(th2, dot2).to_vec(), a2)
            }
        };
        let (n1, r1) = observation_transition(id, &s1, a1);
        let (n2, r2) = observation_transition(id, &s2, a2);
        for norm in [Norm::L2, Norm::Linf] {
            let d_in = tensor::distance(&s1, &s2, norm) + (a1 - a2).abs();
            if d_in <= 0.0 {
                continue;
            }
            l_r = l_r.max((r1 - r2).abs() / d_in);
            l_p = l_p.max(tensor::distance(&n1, &n2, norm) / d_in);
        }
    }
    (l_r, l_p)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(Action);
    impl Policy for Constant {
        fn act(&self, _: &[f64]) -> Result<Action> {
            Ok(self.0.clone())
        }
    }

    /// Pushes every coordinate far away; projection must pull it back.
    struct Wild;
    impl ObservationAdversary for Wild {
        fn perturb(&mut self, s: &[f64]) -> Result<Vec<f64>> {
            Ok(s.iter().enumerate().map(|(i, v)| v + 10.0 * if i % 2 == 0 { 1.0 } else { -1.0 }).collect())
        }
    }

    #[test]
    fn cartpole_terminates_past_twelve_degrees_with_unit_reward() {
        let mut env = Env::new(EnvId::CartPole);
        env.reset_seeded(0);
        let mut last = None;
        for _ in 0..500 {
            let (state, r) = env.step(&Action::Discrete(1)).unwrap();
            assert_eq!(r, 1.0);
            if state.done() {
                last = Some(state);
                break;
            }
        }
        let state = last.expect("constant push must topple the pole");
        assert!(state.terminal);
        assert!(state.observation[2].abs() > cartpole::THETA_THRESHOLD || state.observation[0].abs() > cartpole::X_THRESHOLD);
        assert!(env.step(&Action::Discrete(0)).is_err(), "terminal states absorb");
    }

    #[test]
    fn step_rejects_bad_actions() {
        let mut env = Env::new(EnvId::Pendulum);
        env.reset_seeded(0);
        assert!(env.step(&Action::Continuous(vec![3.0])).is_err());
        assert!(env.step(&Action::Discrete(0)).is_err());
        let mut env = Env::new(EnvId::CartPole);
        env.reset_seeded(0);
        assert!(env.step(&Action::Discrete(2)).is_err());
    }

    #[test]
    fn pendulum_episode_is_capped_with_bounded_rewards() {
        let mut env = Env::new(EnvId::Pendulum);
        env.reset_seeded(3);
        let mut steps = 0;
        loop {
            let (state, r) = env.step(&Action::Continuous(vec![0.5])).unwrap();
            assert!((0.0..=env.manifest().r_max).contains(&r));
            steps += 1;
            if state.done() {
                assert!(state.truncated && !state.terminal);
                break;
            }
        }
        assert_eq!(steps, pendulum::EPISODE_CAP);
    }

    #[test]
    fn manifests_satisfy_invariants() {
        let cp = EnvId::CartPole.manifest();
        assert_eq!(cp.episode_cap, 500);
        assert_eq!(cp.action_space, ActionSpace::Discrete(2));
        assert_eq!(cp.constants.l_r, 0.0);
        let pd = EnvId::Pendulum.manifest();
        assert!(pd.constants.l_p > 0.0 && pd.constants.l_r > 0.0);
        assert!(pd.constants.validate().is_ok());
        let mut c = Container::new("dataset");
        pd.write_header(&mut c);
        assert_eq!(EnvManifest::from_header(&c).unwrap(), pd);
    }

    #[test]
    fn zero_budget_and_identity_adversary_match_clean_rollout() {
        let policy = Constant(Action::Continuous(vec![1.0]));
        let mut env = Env::new(EnvId::Pendulum);
        let clean = clean_rollout(&mut env, &policy, 5).unwrap();
        let zero = perturbed_rollout(&mut env, &policy, &mut Wild, &PerturbationBudget::linf(0.0), 5).unwrap();
        let ident = perturbed_rollout(&mut env, &policy, &mut NoAdversary, &PerturbationBudget::l2(0.3), 5).unwrap();
        assert_eq!(clean, zero);
        assert_eq!(clean.total_reward, ident.total_reward);
    }

    #[test]
    fn projection_bounds_every_perturbation() {
        let policy = Constant(Action::Discrete(0));
        let mut env = Env::new(EnvId::CartPole);
        for budget in [PerturbationBudget::linf(0.05), PerturbationBudget::l2(0.05)] {
            let out = perturbed_rollout(&mut env, &policy, &mut Wild, &budget, 1).unwrap();
            assert!(out.max_perturbation <= budget.epsilon * (1.0 + 1e-9));
            assert!(out.max_perturbation > 0.0);
        }
    }

    #[test]
    fn rollouts_are_deterministic() {
        let policy = Constant(Action::Continuous(vec![-0.7]));
        let a = clean_rollout(&mut Env::new(EnvId::Pendulum), &policy, 11).unwrap();
        let b = clean_rollout(&mut Env::new(EnvId::Pendulum), &policy, 11).unwrap();
        assert_eq!(a.total_reward.to_bits(), b.total_reward.to_bits());
        assert_eq!(a.discounted_return.to_bits(), b.discounted_return.to_bits());
    }
}
