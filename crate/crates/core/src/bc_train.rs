//! Behavior-cloning trainers: vanilla, LipsNet and SR²L.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::adversaries::{output_divergence_tape, AdversaryNet};
use crate::certificate::PerturbationBudget;
use crate::envs::{mean_clean_return, ActionSpace, EnvId, NetworkPolicy};
use crate::error::{Error, Result};
use crate::expert_data::{Dataset, SplitDataset};
use crate::lipschitz_net::{auxiliary_loss, HeadKind, LipsNetConfig, NetMode, NetVars, PolicyNetwork};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Matrix, Norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Vanilla,
    LipsNet,
    Sr2l,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::LipsNet => "lipsnet",
            Method::Sr2l => "sr2l",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(Method::Vanilla),
            "lipsnet" => Ok(Method::LipsNet),
            "sr2l" => Ok(Method::Sr2l),
            other => Err(Error::Contract(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sr2lConfig {
    pub reg_weight: f64,
    pub adversary_lr: f64,
    pub adversary_steps: usize,
    pub epsilon: f64,
    pub norm: Norm,
    pub adversary_hidden: usize,
}

impl Default for Sr2lConfig {
    fn default() -> Self {
        Self { reg_weight: 0.1, adversary_lr: 1e-3, adversary_steps: 5, epsilon: 0.1, norm: Norm::Linf, adversary_hidden: 64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MethodConfig {
    Vanilla,
    LipsNet(LipsNetConfig),
    Sr2l(Sr2lConfig),
}

impl MethodConfig {
    pub fn method(&self) -> Method {
        match self {
            MethodConfig::Vanilla => Method::Vanilla,
            MethodConfig::LipsNet(_) => Method::LipsNet,
            MethodConfig::Sr2l(_) => Method::Sr2l,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    pub method: MethodConfig,
    /// Hidden widths; `None` selects the per-environment default.
    pub hidden: Option<Vec<usize>>,
}

impl TrainConfig {
    pub fn new(method: MethodConfig, seed: u64) -> Self {
        Self {
            total_steps: 500_000,
            learning_rate: 3e-4,
            batch_size: 256,
            eval_interval: 1000,
            eval_episodes: 10,
            seed,
            method,
            hidden: None,
        }
    }

    pub fn hidden_for(&self, env: EnvId) -> Vec<usize> {
        self.hidden.clone().unwrap_or_else(|| default_hidden(env))
    }
}

pub fn default_hidden(env: EnvId) -> Vec<usize> {
    match env {
        EnvId::CartPole => vec![64],
        EnvId::Pendulum => vec![128, 128],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: PolicyNetwork,
    pub step: usize,
    /// Mean clean return over the fixed evaluation episodes.
    pub eval_score: f64,
    /// BC loss on the validation split.
    pub val_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    /// Mean BC loss since the previous checkpoint.
    pub train_loss: f64,
    /// Mean auxiliary (LipsNet) or smoothing (SR²L) term since the previous checkpoint.
    pub aux_loss: f64,
    pub eval_score: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: Vec<LogRow>,
    /// Final SR²L adversary.
    pub adversary: Option<AdversaryNet>,
}

pub fn write_log_csv(rows: &[LogRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "step,train_loss,aux_loss,eval_score")?;
    for r in rows {
        writeln!(out, "{},{:?},{:?},{:?}", r.step, r.train_loss, r.aux_loss, r.eval_score)?;
    }
    Ok(())
}

pub fn save_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_log_csv(rows, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Expert targets of a batch in the form the loss needs.
pub enum Targets {
    Labels(Vec<usize>),
    Values(Matrix),
}

pub fn batch_targets(ds: &Dataset, indices: &[usize]) -> Targets {
    match ds.manifest().action_space {
        ActionSpace::Discrete(_) => Targets::Labels(indices.iter().map(|&i| ds.actions[i] as usize).collect()),
        ActionSpace::Box { .. } => {
            let k = ds.action_width();
            let mut data = Vec::with_capacity(indices.len() * k);
            for &i in indices {
                data.extend_from_slice(ds.raw_action(i));
            }
            Targets::Values(Matrix::new(indices.len(), k, data).expect("finite actions"))
        }
    }
}

/// BC loss of a batch: mean squared ℓ₂ error for deterministic heads, mean
/// cross-entropy for categorical heads.
pub fn bc_loss(net: &PolicyNetwork, tape: &mut Tape, vars: &NetVars, states: Var, targets: &Targets) -> Result<Var> {
    let z = net.logits_tape(tape, vars, states)?;
    match (net.head, targets) {
        (HeadKind::Categorical, Targets::Labels(labels)) => tape.cross_entropy(z, labels),
        (HeadKind::Deterministic, Targets::Values(a)) => {
            let t = tape.leaf(a.clone());
            let diff = tape.sub(z, t)?;
            let sq = tape.square(diff);
            let per_row = tape.sum_cols(sq);
            Ok(tape.mean(per_row))
        }
        _ => Err(Error::Contract(format!("{} head does not match the dataset's actions", net.head))),
    }
}

/// Full BC loss of a dataset, evaluated without gradients.
pub fn dataset_loss(net: &PolicyNetwork, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(f64::NAN);
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut tape = Tape::new();
    let vars = net.register(&mut tape);
    let x = tape.leaf(ds.state_batch(&idx));
    let loss = bc_loss(net, &mut tape, &vars, x, &batch_targets(ds, &idx))?;
    Ok(tape.value(loss).item())
}

/// Initial policy network for a method: LipsNet mode only for LipsNet.
pub fn init_network(env: EnvId, cfg: &TrainConfig) -> PolicyNetwork {
    let manifest = env.manifest();
    let mode = if cfg.method.method() == Method::LipsNet { NetMode::LipsNet } else { NetMode::Vanilla };
    PolicyNetwork::new(
        &mut rng::child_rng(cfg.seed, "bc-init", 0),
        manifest.state_dim,
        &cfg.hidden_for(env),
        manifest.action_space.encoding_dim(),
        env.policy_head(),
        mode,
        env.as_str(),
    )
}

/// Per-step loss pieces.
struct StepLoss {
    total: Var,
    bc: f64,
    aux: f64,
}

/// Trains a BC policy on `split.train`, scoring a checkpoint every
/// `eval_interval` steps and returning the best one.
pub fn train(cfg: &TrainConfig, split: &SplitDataset, env: EnvId) -> Result<TrainOutcome> {
    let train_ds = &split.train;
    if train_ds.env != env {
        return Err(Error::Contract(format!("{} dataset used to train a {env} policy", train_ds.env)));
    }
    if train_ds.is_empty() {
        return Err(Error::Contract("empty training split".into()));
    }
    if cfg.eval_interval == 0 || cfg.batch_size == 0 {
        return Err(Error::Contract("eval_interval and batch_size must be positive".into()));
    }
    let manifest = env.manifest();
    let mut net = init_network(env, cfg);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut sampler = rng::child_rng(cfg.seed, "bc-batches", 0);
    let eval_seed = rng::derive_seed(cfg.seed, "bc-eval", 0);

    let mut adversary = match cfg.method {
        MethodConfig::Sr2l(s) => Some(AdversaryNet::new(
            &mut rng::child_rng(cfg.seed, "sr2l-adversary", 0),
            manifest.state_dim,
            s.adversary_hidden,
            PerturbationBudget::new(s.epsilon, s.norm)?,
        )),
        _ => None,
    };

    let mut log = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let (mut bc_sum, mut aux_sum, mut since) = (0.0, 0.0, 0usize);
    for step in 1..=cfg.total_steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| sampler.gen_range(0..train_ds.len())).collect();
        let states = train_ds.state_batch(&idx);
        let targets = batch_targets(train_ds, &idx);

        if let (Some(adv), MethodConfig::Sr2l(s)) = (adversary.as_mut(), &cfg.method) {
            for _ in 0..s.adversary_steps {
                adv.ascent_step(&net, &states, s.adversary_lr)?;
            }
        }

        let mut tape = Tape::new();
        let vars = net.register(&mut tape);
        let x = tape.leaf(states);
        let loss = step_loss(&net, &mut tape, &vars, x, &targets, &cfg.method, adversary.as_ref())?;
        if !loss.bc.is_finite() || !loss.aux.is_finite() {
            return Err(Error::TrainingFailure(format!(
                "{} training diverged at step {step} (bc loss {}, aux {})",
                cfg.method.method(),
                loss.bc,
                loss.aux
            )));
        }
        let grads = vars.gradients(&tape.backward(loss.total)?);
        net.adam_step(&mut opt, &grads);
        bc_sum += loss.bc;
        aux_sum += loss.aux;
        since += 1;

        if step % cfg.eval_interval == 0 || step == cfg.total_steps {
            let policy = NetworkPolicy::new(&net, manifest)?;
            let eval_score = mean_clean_return(env, &policy, cfg.eval_episodes, eval_seed)?;
            log.push(LogRow { step, train_loss: bc_sum / since as f64, aux_loss: aux_sum / since as f64, eval_score });
            (bc_sum, aux_sum, since) = (0.0, 0.0, 0);
            if best.as_ref().map_or(true, |b| eval_score > b.eval_score) {
                let val_loss = dataset_loss(&net, &split.val)?;
                best = Some(Checkpoint { network: net.clone(), step, eval_score, val_loss });
            }
        }
    }
    let best = best.ok_or_else(|| Error::Contract("total_steps must be positive".into()))?;
    Ok(TrainOutcome { best, log, adversary })
}

fn step_loss(
    net: &PolicyNetwork,
    tape: &mut Tape,
    vars: &NetVars,
    x: Var,
    targets: &Targets,
    method: &MethodConfig,
    adversary: Option<&AdversaryNet>,
) -> Result<StepLoss> {
    let bc = bc_loss(net, tape, vars, x, targets)?;
    let bc_value = tape.value(bc).item();
    match method {
        MethodConfig::Vanilla => Ok(StepLoss { total: bc, bc: bc_value, aux: 0.0 }),
        MethodConfig::LipsNet(l) => {
            let aux = auxiliary_loss(tape, vars, l)?;
            let aux_value = tape.value(aux).item();
            Ok(StepLoss { total: tape.add(bc, aux)?, bc: bc_value, aux: aux_value })
        }
        MethodConfig::Sr2l(s) => {
            let adv = adversary.expect("SR²L keeps an adversary");
            // ŝ is a constant for the policy update
            let s_hat = adv.perturb_batch(tape.value(x))?;
            let s_hat = tape.leaf(s_hat);
            let p = net.forward_tape(tape, vars, x)?;
            let q = net.forward_tape(tape, vars, s_hat)?;
            let d = output_divergence_tape(tape, net.head, p, q)?;
            let reg = tape.mul_const(d, s.reg_weight);
            let reg_value = tape.value(reg).item();
            Ok(StepLoss { total: tape.add(bc, reg)?, bc: bc_value, aux: reg_value })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert_data::{collect, split, EnergyShapingController, Expert};
    use crate::lipschitz_net::{Activation, LipschitzLayer};

    fn cartpole_split() -> SplitDataset {
        // a linear stand-in expert keeps the fixture fast
        let layer = LipschitzLayer {
            weight: Matrix::new(2, 4, vec![0.0, 0.0, -1.0, -1.0, 0.0, 0.0, 1.0, 1.0]).unwrap(),
            bias: vec![0.0, 0.0],
            budget: 1.0,
            activation: Activation::Identity,
        };
        let net = PolicyNetwork::from_layers(vec![layer], HeadKind::Categorical, NetMode::Vanilla, "cartpole").unwrap();
        let ds = collect(&Expert::Network(net), EnvId::CartPole, 6, 0).unwrap();
        split(&ds, 0).unwrap()
    }

    fn short(method: MethodConfig) -> TrainConfig {
        TrainConfig { total_steps: 60, eval_interval: 20, batch_size: 32, eval_episodes: 2, ..TrainConfig::new(method, 5) }
    }

    #[test]
    fn uniform_categorical_prediction_costs_ln_two() {
        let layer = LipschitzLayer {
            weight: Matrix::zeros(2, 4),
            bias: vec![0.3, 0.3],
            budget: 0.0,
            activation: Activation::Identity,
        };
        let net = PolicyNetwork::from_layers(vec![layer], HeadKind::Categorical, NetMode::Vanilla, "cartpole").unwrap();
        let mut tape = Tape::new();
        let vars = net.register(&mut tape);
        let x = tape.leaf(Matrix::new(3, 4, (0..12).map(|v| v as f64 * 0.1).collect()).unwrap());
        let loss = bc_loss(&net, &mut tape, &vars, x, &Targets::Labels(vec![0, 1, 1])).unwrap();
        assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn deterministic_loss_matches_hand_computation_and_vanishes_on_exact_fit() {
        let layer = LipschitzLayer {
            weight: Matrix::new(1, 2, vec![1.0, -2.0]).unwrap(),
            bias: vec![0.5],
            budget: 0.0,
            activation: Activation::Identity,
        };
        let net = PolicyNetwork::from_layers(vec![layer], HeadKind::Deterministic, NetMode::Vanilla, "pendulum").unwrap();
        let states = Matrix::new(2, 2, vec![1.0, 1.0, 0.0, 2.0]).unwrap();
        // outputs: 1 − 2 + 0.5 = −0.5 and −4 + 0.5 = −3.5
        let eval = |targets: Vec<f64>| {
            let mut tape = Tape::new();
            let vars = net.register(&mut tape);
            let x = tape.leaf(states.clone());
            let t = Targets::Values(Matrix::new(2, 1, targets).unwrap());
            let l = bc_loss(&net, &mut tape, &vars, x, &t).unwrap();
            tape.value(l).item()
        };
        assert_eq!(eval(vec![-0.5, -3.5]), 0.0);
        assert!((eval(vec![0.5, -1.5]) - (1.0 + 4.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn head_dataset_mismatch_is_rejected() {
        let net = PolicyNetwork::new(&mut rng::rng_from(0), 4, &[4], 2, HeadKind::Categorical, NetMode::Vanilla, "cartpole");
        let mut tape = Tape::new();
        let vars = net.register(&mut tape);
        let x = tape.leaf(Matrix::zeros(1, 4));
        assert!(bc_loss(&net, &mut tape, &vars, x, &Targets::Values(Matrix::zeros(1, 2))).is_err());
    }

    #[test]
    fn best_checkpoint_has_the_max_score_and_earliest_tie() {
        let out = train(&short(MethodConfig::Vanilla), &cartpole_split(), EnvId::CartPole).unwrap();
        assert_eq!(out.log.len(), 3);
        let max = out.log.iter().map(|r| r.eval_score).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best.eval_score, max);
        let first = out.log.iter().find(|r| r.eval_score == max).unwrap();
        assert_eq!(out.best.step, first.step);
    }

    #[test]
    fn training_is_deterministic() {
        let sp = cartpole_split();
        let cfg = short(MethodConfig::LipsNet(LipsNetConfig::default()));
        let a = train(&cfg, &sp, EnvId::CartPole).unwrap();
        let b = train(&cfg, &sp, EnvId::CartPole).unwrap();
        assert_eq!(a.best.network.to_container().to_bytes(), b.best.network.to_container().to_bytes());
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn zero_budget_sr2l_equals_vanilla() {
        let sp = cartpole_split();
        let vanilla = train(&short(MethodConfig::Vanilla), &sp, EnvId::CartPole).unwrap();
        let s = Sr2lConfig { epsilon: 0.0, ..Sr2lConfig::default() };
        let sr2l = train(&short(MethodConfig::Sr2l(s)), &sp, EnvId::CartPole).unwrap();
        assert_eq!(vanilla.best.network, sr2l.best.network);
        for (a, b) in vanilla.log.iter().zip(&sr2l.log) {
            assert_eq!(a.train_loss, b.train_loss);
            assert_eq!(b.aux_loss, 0.0);
        }
    }

    #[test]
    fn sr2l_regularizer_is_nonnegative() {
        let sp = cartpole_split();
        let out = train(&short(MethodConfig::Sr2l(Sr2lConfig::default())), &sp, EnvId::CartPole).unwrap();
        assert!(out.log.iter().all(|r| r.aux_loss >= 0.0));
        assert!(out.adversary.is_some());
    }

    #[test]
    fn pendulum_bc_reduces_the_regression_loss() {
        let ds = collect(&Expert::EnergyShaping(EnergyShapingController::default()), EnvId::Pendulum, 4, 1).unwrap();
        let sp = split(&ds, 1).unwrap();
        let cfg = TrainConfig { hidden: Some(vec![16]), learning_rate: 3e-3, ..short(MethodConfig::Vanilla) };
        let before = dataset_loss(&init_network(EnvId::Pendulum, &cfg), &sp.train).unwrap();
        let out = train(&cfg, &sp, EnvId::Pendulum).unwrap();
        assert!(out.log.last().unwrap().train_loss < before);
    }

    #[test]
    fn log_csv_has_the_fixed_header() {
        let mut buf = Vec::new();
        write_log_csv(&[LogRow { step: 1000, train_loss: 0.5, aux_loss: 0.0, eval_score: 500.0 }], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,train_loss,aux_loss,eval_score\n1000,0.5,0.0,500.0\n");
    }
}
