//! Weight-normalized policy networks with certified Lipschitz constants.
//!
//! Every affine layer carries a trainable budget `c`. In `lipsnet` mode the
//! layer uses `Ŵ = W · softplus(c) / ‖W‖∞`, so its induced ∞-norm is exactly
//! `softplus(c)` and the whole network is `∏ softplus(c_i)`-Lipschitz from
//! `(ℝⁿ, ‖·‖∞)` to `(ℝᵐ, ‖·‖∞)`. With 1-Lipschitz activations this gives
//!
//! * deterministic head: `‖f(x) − f(y)‖₂ ≤ m · L · ‖x − y‖_p`
//! * categorical head:   `TV(f(x), f(y)) ≤ (m²/2) · L · ‖x − y‖_p`
//!
//! for any `p ≥ 1`, because `‖x − y‖∞ ≤ ‖x − y‖_p`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{self, Matrix, Norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Schema(format!("unknown activation '{other}'"))),
        }
    }
}

/// Output head of a policy network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    /// Raw affine output used directly as a continuous action.
    Deterministic,
    /// Softmax distribution over discrete actions.
    Categorical,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Deterministic => "deterministic",
            HeadKind::Categorical => "categorical",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(HeadKind::Deterministic),
            "categorical" => Ok(HeadKind::Categorical),
            other => Err(Error::UnsupportedHead(other.to_string())),
        }
    }
}

/// Whether layers are weight-normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetMode {
    LipsNet,
    Vanilla,
}

impl NetMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NetMode::LipsNet => "lipsnet",
            NetMode::Vanilla => "vanilla",
        }
    }
}

impl FromStr for NetMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lipsnet" => Ok(NetMode::LipsNet),
            "vanilla" => Ok(NetMode::Vanilla),
            other => Err(Error::Schema(format!("unknown network mode '{other}'"))),
        }
    }
}

/// Target constant and weight of the hinge penalty on `∏ softplus(c_i)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipsNetConfig {
    pub target_lipschitz: f64,
    pub aux_weight: f64,
}

impl LipsNetConfig {
    pub fn new(target_lipschitz: f64, aux_weight: f64) -> Result<Self> {
        if !(target_lipschitz > 0.0) || !target_lipschitz.is_finite() {
            return Err(Error::Contract(format!("target Lipschitz must be finite and > 0, got {target_lipschitz}")));
        }
        if !(aux_weight >= 0.0) || !aux_weight.is_finite() {
            return Err(Error::Contract(format!("auxiliary weight must be finite and >= 0, got {aux_weight}")));
        }
        Ok(Self { target_lipschitz, aux_weight })
    }
}

impl Default for LipsNetConfig {
    fn default() -> Self {
        Self { target_lipschitz: 10.0, aux_weight: 0.001 }
    }
}

/// One affine layer `y = σ(Ŵ x + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzLayer {
    /// Raw weights, out × in.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    /// Pre-softplus Lipschitz budget.
    pub budget: f64,
    pub activation: Activation,
}

fn uniform_fan_in(rng: &mut impl Rng, fan_in: usize, count: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..count).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl LipschitzLayer {
    /// Uniform fan-in initialization with the budget matched to the initial
    /// weight norm, so that `Ŵ = W` at the start of training.
    pub fn init(rng: &mut impl Rng, inputs: usize, outputs: usize, activation: Activation) -> Self {
        let weight = Matrix::from_vec(outputs, inputs, uniform_fan_in(rng, inputs, inputs * outputs));
        let bias = uniform_fan_in(rng, inputs, outputs);
        let norm = tensor::mat_inf_norm(&weight).unwrap_or(0.0);
        let budget = tensor::softplus_inverse(norm).unwrap_or(0.0);
        Self { weight, bias, budget, activation }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    /// `softplus(c)`, the certified induced norm of the normalized weight.
    pub fn lipschitz_budget(&self) -> f64 {
        tensor::softplus(self.budget)
    }

    /// `W · softplus(c) / ‖W‖∞`; scales up as well as down.
    pub fn normalized_weight(&self) -> Result<Matrix> {
        let norm = tensor::mat_inf_norm(&self.weight)?;
        if norm == 0.0 {
            return Err(Error::DegenerateLayer { layer: 0 });
        }
        Ok(self.weight.scale(self.lipschitz_budget() / norm))
    }

    pub fn effective_weight(&self, mode: NetMode) -> Result<Matrix> {
        match mode {
            NetMode::LipsNet => self.normalized_weight(),
            NetMode::Vanilla => Ok(self.weight.clone()),
        }
    }

    fn is_degenerate(&self) -> bool {
        self.weight.data().iter().all(|&v| v == 0.0)
    }
}

/// Tape handles for one network's parameters.
#[derive(Clone, Debug)]
pub struct NetVars {
    layers: Vec<LayerVars>,
}

#[derive(Clone, Copy, Debug)]
struct LayerVars {
    weight: Var,
    bias: Var,
    budget: Var,
}

impl NetVars {
    pub fn budgets(&self) -> Vec<Var> {
        self.layers.iter().map(|l| l.budget).collect()
    }

    /// Gradients in the order of [`PolicyNetwork::parameters_mut`].
    pub fn gradients(&self, grads: &Gradients) -> Vec<Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [grads.wrt(l.weight), grads.wrt(l.bias), grads.wrt(l.budget)])
            .collect()
    }
}

/// A fully connected policy network.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNetwork {
    pub layers: Vec<LipschitzLayer>,
    pub head: HeadKind,
    pub mode: NetMode,
    /// Environment this policy acts in; recorded in weight files.
    pub env_id: String,
}

impl PolicyNetwork {
    /// ReLU hidden layers of the given widths, identity output layer.
    pub fn new(
        rng: &mut impl Rng,
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        head: HeadKind,
        mode: NetMode,
        env_id: &str,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 == dims.len() { Activation::Identity } else { Activation::Relu };
                LipschitzLayer::init(rng, w[0], w[1], act)
            })
            .collect();
        Self { layers, head, mode, env_id: env_id.to_string() }
    }

    /// Builds a network from explicit layers, checking that dimensions chain.
    pub fn from_layers(
        layers: Vec<LipschitzLayer>,
        head: HeadKind,
        mode: NetMode,
        env_id: &str,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(Error::Dimension(format!("layer {i}: bias length {} vs {} outputs", l.bias.len(), l.outputs())));
            }
            if i > 0 && layers[i - 1].outputs() != l.inputs() {
                return Err(Error::Dimension(format!("layer {i} expects {} inputs, previous layer emits {}", l.inputs(), layers[i - 1].outputs())));
            }
        }
        Ok(Self { layers, head, mode, env_id: env_id.to_string() })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, LipschitzLayer::outputs)
    }

    /// Number of affine layers, M.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(LipschitzLayer::outputs).collect()
    }

    /// Weights actually used in the forward pass.
    pub fn effective_weights(&self) -> Result<Vec<Matrix>> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.effective_weight(self.mode).map_err(|e| match e {
                    Error::DegenerateLayer { .. } => Error::DegenerateLayer { layer: i },
                    other => other,
                })
            })
            .collect()
    }

    /// `∏ softplus(c_i)`.
    pub fn budget_product(&self) -> f64 {
        self.layers.iter().map(LipschitzLayer::lipschitz_budget).product()
    }

    /// `L^FC = ∏ ‖Ŵ_i‖∞` over the effective weights (raw weights in vanilla
    /// mode). In lipsnet mode this equals `∏ softplus(c_i)` up to rounding.
    pub fn certified_network_lipschitz(&self) -> Result<f64> {
        self.effective_weights()?
            .iter()
            .map(tensor::mat_inf_norm)
            .product()
    }

    /// Policy-level constant fed to the certificate: `m · L^FC` for a
    /// deterministic head (ℓ₂ output distance), `(m²/2) · L^FC` for a
    /// categorical head (TV output distance). Valid for every input norm.
    pub fn certified_policy_lipschitz(&self, _input_norm: Norm) -> Result<f64> {
        let m = self.output_dim() as f64;
        let fc = self.certified_network_lipschitz()?;
        Ok(match self.head {
            HeadKind::Deterministic => m * fc,
            HeadKind::Categorical => 0.5 * m * m * fc,
        })
    }

    /// Precomputes effective weights for fast single-state evaluation.
    pub fn frozen(&self) -> Result<FrozenPolicy> {
        let weights = self.effective_weights()?;
        let layers = weights
            .into_iter()
            .zip(&self.layers)
            .map(|(weight, l)| FrozenLayer { weight, bias: l.bias.clone(), activation: l.activation })
            .collect();
        Ok(FrozenPolicy { layers, head: self.head })
    }

    /// Single-state forward pass: raw output or action probabilities.
    pub fn forward(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.input_dim() {
            return Err(Error::Dimension(format!("state of length {} for a {}-input network", s.len(), self.input_dim())));
        }
        Ok(self.frozen()?.output(s))
    }

    /// Records every parameter as a tape leaf.
    pub fn register(&self, tape: &mut Tape) -> NetVars {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                weight: tape.leaf(l.weight.clone()),
                bias: tape.leaf(Matrix::row(&l.bias)),
                budget: tape.constant_scalar(l.budget),
            })
            .collect();
        NetVars { layers }
    }

    /// Pre-softmax outputs for a batch (rows of `x`).
    pub fn logits_tape(&self, tape: &mut Tape, vars: &NetVars, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.input_dim() {
            return Err(Error::Dimension(format!("batch with {} columns for a {}-input network", tape.value(x).cols(), self.input_dim())));
        }
        let mut h = x;
        for (layer, v) in self.layers.iter().zip(&vars.layers) {
            let w = match self.mode {
                NetMode::Vanilla => v.weight,
                NetMode::LipsNet => {
                    let norm = tape.inf_norm(v.weight)?;
                    if tape.value(norm).item() == 0.0 {
                        return Err(Error::DegenerateLayer { layer: 0 });
                    }
                    let inv = tape.recip(norm);
                    let sp = tape.softplus(v.budget);
                    let factor = tape.mul(sp, inv)?;
                    tape.scale_by(v.weight, factor)?
                }
            };
            h = tape.linear(h, w, v.bias)?;
            if layer.activation == Activation::Relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Batch forward pass: raw output (deterministic) or probabilities (categorical).
    pub fn forward_tape(&self, tape: &mut Tape, vars: &NetVars, x: Var) -> Result<Var> {
        let z = self.logits_tape(tape, vars, x)?;
        Ok(match self.head {
            HeadKind::Deterministic => z,
            HeadKind::Categorical => tape.softmax(z),
        })
    }

    /// Parameter groups `[W_0, b_0, c_0, W_1, …]`.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [l.weight.data_mut(), l.bias.as_mut_slice(), std::slice::from_mut(&mut l.budget)]
            })
            .collect()
    }

    /// Applies one optimizer step with gradients in [`NetVars::gradients`] order.
    pub fn adam_step(&mut self, adam: &mut Adam, grads: &[Matrix]) {
        let gs: Vec<&[f64]> = grads.iter().map(Matrix::data).collect();
        adam.step(&mut self.parameters_mut(), &gs);
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len() + 1).sum()
    }

    /// Re-initializes the weights of any layer that collapsed to zero.
    /// Returns the indices of repaired layers.
    pub fn repair_degenerate_layers(&mut self, rng: &mut impl Rng) -> Vec<usize> {
        let mut repaired = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            if l.is_degenerate() {
                let (r, c) = l.weight.shape();
                l.weight = Matrix::from_vec(r, c, uniform_fan_in(rng, c, r * c));
                repaired.push(i);
            }
        }
        repaired
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.budget.is_finite()
                && l.weight.data().iter().all(|v| v.is_finite())
                && l.bias.iter().all(|v| v.is_finite())
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("policy");
        let dims: Vec<String> = std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(LipschitzLayer::outputs))
            .map(|d| d.to_string())
            .collect();
        let acts: Vec<&str> = self.layers.iter().map(|l| l.activation.as_str()).collect();
        c.set("env", &self.env_id)
            .set("head", self.head)
            .set("n", self.input_dim())
            .set("m", self.output_dim())
            .set("M", self.depth())
            .set("mode", self.mode.as_str())
            .set("dims", dims.join(","))
            .set("activations", acts.join(","));
        for (i, l) in self.layers.iter().enumerate() {
            c.push_section(&format!("layer{i}.weight"), l.weight.data().to_vec());
            c.push_section(&format!("layer{i}.bias"), l.bias.clone());
            c.push_section(&format!("layer{i}.budget"), vec![l.budget]);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("policy")?;
        let dims: Vec<usize> = c.parse_list("dims")?;
        let acts: Vec<Activation> = c.parse_list("activations")?;
        let depth: usize = c.parse("M")?;
        if dims.len() != depth + 1 || acts.len() != depth {
            return Err(Error::Schema("layer count disagrees with dims/activations".into()));
        }
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let w = c.section(&format!("layer{i}.weight"))?;
            let b = c.section(&format!("layer{i}.bias"))?;
            let budget = c.section(&format!("layer{i}.budget"))?;
            if budget.len() != 1 || b.len() != dims[i + 1] {
                return Err(Error::Schema(format!("layer {i} section sizes")));
            }
            let weight = Matrix::new(dims[i + 1], dims[i], w.to_vec()).map_err(|e| Error::Schema(e.to_string()))?;
            layers.push(LipschitzLayer { weight, bias: b.to_vec(), budget: budget[0], activation: acts[i] });
        }
        let net = Self::from_layers(layers, c.parse("head")?, c.parse("mode")?, c.get("env")?)?;
        if net.input_dim() != c.parse::<usize>("n")? || net.output_dim() != c.parse::<usize>("m")? {
            return Err(Error::Schema("n/m disagree with layer dims".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Hinge penalty `λ · max(∏ softplus(c_i) − L_target, 0)` recorded on the tape.
/// The subgradient at the kink is zero.
pub fn auxiliary_loss(tape: &mut Tape, vars: &NetVars, cfg: &LipsNetConfig) -> Result<Var> {
    let mut product: Option<Var> = None;
    for c in vars.budgets() {
        let sp = tape.softplus(c);
        product = Some(match product {
            None => sp,
            Some(p) => tape.mul(p, sp)?,
        });
    }
    let product = product.ok_or_else(|| Error::Contract("network has no layers".into()))?;
    let excess = tape.add_const(product, -cfg.target_lipschitz);
    let hinge = tape.relu(excess);
    Ok(tape.mul_const(hinge, cfg.aux_weight))
}

/// Scalar form of [`auxiliary_loss`] for a given budget product.
pub fn auxiliary_loss_value(budget_product: f64, cfg: &LipsNetConfig) -> f64 {
    cfg.aux_weight * (budget_product - cfg.target_lipschitz).max(0.0)
}

/// Total-variation distance `½ Σ |p_i − q_i|` between probability vectors.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    for (name, d) in [("p", p), ("q", q)] {
        let total: f64 = d.iter().sum();
        if (total - 1.0).abs() > 1e-6 || d.iter().any(|&v| v < -1e-12) {
            return Err(Error::Contract(format!("{name} is not a probability vector (sum {total})")));
        }
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

#[derive(Clone, Debug)]
struct FrozenLayer {
    weight: Matrix,
    bias: Vec<f64>,
    activation: Activation,
}

/// A network with precomputed effective weights, for rollouts and attacks.
#[derive(Clone, Debug)]
pub struct FrozenPolicy {
    layers: Vec<FrozenLayer>,
    head: HeadKind,
}

/// Activations saved by [`FrozenPolicy::trace`] for an input-gradient pass.
pub struct ForwardTrace {
    /// Pre-activation of every layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
    head: HeadKind,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Pre-softmax values of the last layer.
    pub fn logits(&self) -> &[f64] {
        self.pre.last().map_or(&[], Vec::as_slice)
    }
}

impl FrozenPolicy {
    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.rows())
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in &self.layers {
            let mut z = tensor::matvec_unchecked(&l.weight, &h);
            for (zi, b) in z.iter_mut().zip(&l.bias) {
                *zi += b;
            }
            if l.activation == Activation::Relu {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = z;
        }
        h
    }

    pub fn output(&self, x: &[f64]) -> Vec<f64> {
        let z = self.logits(x);
        match self.head {
            HeadKind::Deterministic => z,
            HeadKind::Categorical => tensor::softmax_slice(&z),
        }
    }

    pub fn trace(&self, x: &[f64]) -> ForwardTrace {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for l in &self.layers {
            let mut z = tensor::matvec_unchecked(&l.weight, &h);
            for (zi, b) in z.iter_mut().zip(&l.bias) {
                *zi += b;
            }
            h = match l.activation {
                Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
                Activation::Identity => z.clone(),
            };
            pre.push(z);
        }
        let output = match self.head {
            HeadKind::Deterministic => h,
            HeadKind::Categorical => tensor::softmax_slice(&h),
        };
        ForwardTrace { pre, output, head: self.head }
    }

    /// Gradient of `⟨upstream, output⟩` with respect to the input.
    pub fn input_gradient(&self, trace: &ForwardTrace, upstream: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = match trace.head {
            HeadKind::Deterministic => upstream.to_vec(),
            HeadKind::Categorical => {
                let p = &trace.output;
                let dot: f64 = p.iter().zip(upstream).map(|(a, b)| a * b).sum();
                p.iter().zip(upstream).map(|(pv, u)| pv * (u - dot)).collect()
            }
        };
        for (l, z) in self.layers.iter().zip(&trace.pre).rev() {
            if l.activation == Activation::Relu {
                for (gv, zv) in g.iter_mut().zip(z) {
                    if *zv <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            // gᵀ W
            let mut next = vec![0.0; l.weight.cols()];
            for (r, gv) in g.iter().enumerate() {
                if *gv == 0.0 {
                    continue;
                }
                for (n, w) in next.iter_mut().zip(l.weight.row_slice(r)) {
                    *n += gv * w;
                }
            }
            g = next;
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use proptest::prelude::*;

    fn layer(weight: Matrix, bias: Vec<f64>, sp: f64, act: Activation) -> LipschitzLayer {
        LipschitzLayer { weight, bias, budget: tensor::softplus_inverse(sp).unwrap(), activation: act }
    }

    #[test]
    fn normalized_weight_rescales_to_budget() {
        let l = layer(Matrix::identity(2).scale(4.0), vec![0.0; 2], 2.0, Activation::Identity);
        let w = l.normalized_weight().unwrap();
        for (a, b) in w.data().iter().zip(Matrix::identity(2).scale(2.0).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // budget equal to the current norm leaves W unchanged
        let w0 = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.25]]).unwrap();
        let l = layer(w0.clone(), vec![0.0; 2], 3.0, Activation::Identity);
        for (a, b) in l.normalized_weight().unwrap().data().iter().zip(w0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_layer_is_degenerate_and_repairable() {
        let l = layer(Matrix::zeros(2, 2), vec![0.0; 2], 1.0, Activation::Identity);
        assert!(matches!(l.normalized_weight(), Err(Error::DegenerateLayer { .. })));
        let mut net = PolicyNetwork::from_layers(vec![l], HeadKind::Deterministic, NetMode::LipsNet, "test").unwrap();
        assert!(matches!(net.effective_weights(), Err(Error::DegenerateLayer { layer: 0 })));
        let fixed = net.repair_degenerate_layers(&mut rng_from(0));
        assert_eq!(fixed, vec![0]);
        assert!(net.effective_weights().is_ok());
    }

    #[test]
    fn forward_single_identity_layer() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let l = layer(w.clone(), vec![0.0; 2], 3.0, Activation::Identity);
        let net = PolicyNetwork::from_layers(vec![l], HeadKind::Deterministic, NetMode::LipsNet, "test").unwrap();
        let s = [0.3, -0.7];
        let out = net.forward(&s).unwrap();
        let expected = w.matvec(&s).unwrap();
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn categorical_with_equal_logits_is_uniform() {
        let l = layer(Matrix::filled(3, 2, 0.5), vec![0.1; 3], 1.0, Activation::Identity);
        let net = PolicyNetwork::from_layers(vec![l], HeadKind::Categorical, NetMode::LipsNet, "test").unwrap();
        for p in net.forward(&[0.4, -1.2]).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_layer_forward_by_hand() {
        // Vanilla mode with hand-set weights.
        let w1 = Matrix::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.5]]).unwrap();
        let w2 = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let l1 = LipschitzLayer { weight: w1, bias: vec![0.5, -3.0], budget: 0.0, activation: Activation::Relu };
        let l2 = LipschitzLayer { weight: w2, bias: vec![0.25], budget: 0.0, activation: Activation::Identity };
        let net = PolicyNetwork::from_layers(vec![l1, l2], HeadKind::Deterministic, NetMode::Vanilla, "test").unwrap();
        // s = (1, 2): z1 = (1-2+0.5, 2+1-3) = (-0.5, 0) → relu (0, 0); out = 0.25
        assert_eq!(net.forward(&[1.0, 2.0]).unwrap(), vec![0.25]);
        // s = (3, 1): z1 = (2.5, 3.5) → out = 6.25
        assert_eq!(net.forward(&[3.0, 1.0]).unwrap(), vec![6.25]);
    }

    #[test]
    fn certified_constants() {
        let l1 = layer(Matrix::identity(2), vec![0.0; 2], 2.0, Activation::Relu);
        let l2 = layer(Matrix::filled(4, 2, 1.0), vec![0.0; 4], 3.0, Activation::Identity);
        let mut net = PolicyNetwork::from_layers(vec![l1, l2], HeadKind::Deterministic, NetMode::LipsNet, "test").unwrap();
        let fc = net.certified_network_lipschitz().unwrap();
        assert!((fc - 6.0).abs() < 1e-12);
        assert!((net.certified_policy_lipschitz(Norm::Linf).unwrap() - 24.0).abs() < 1e-11);

        let l3 = layer(Matrix::filled(3, 4, 0.25), vec![0.0; 3], 1.0, Activation::Identity);
        net.layers[1].activation = Activation::Relu;
        net.layers.push(l3);
        net.head = HeadKind::Categorical;
        // L^FC = 2·3·1 = 6, m = 3 → (9/2)·6 = 27
        assert!((net.certified_policy_lipschitz(Norm::L2).unwrap() - 27.0).abs() < 1e-11);

        let single = PolicyNetwork::from_layers(
            vec![layer(Matrix::identity(1), vec![0.0], 1.0, Activation::Identity)],
            HeadKind::Categorical,
            NetMode::Vanilla,
            "test",
        )
        .unwrap();
        assert_eq!(single.certified_network_lipschitz().unwrap(), 1.0);
        assert_eq!(single.certified_policy_lipschitz(Norm::L1).unwrap(), 0.5);
    }

    #[test]
    fn auxiliary_loss_hinge_values() {
        let cfg = LipsNetConfig::new(10.0, 0.001).unwrap();
        assert_eq!(auxiliary_loss_value(5.0, &cfg), 0.0);
        assert!((auxiliary_loss_value(15.0, &cfg) - 0.005).abs() < 1e-15);
        assert_eq!(auxiliary_loss_value(10.0, &cfg), 0.0);
        assert!(LipsNetConfig::new(0.0, 1.0).is_err());
        assert!(LipsNetConfig::new(1.0, -1.0).is_err());
    }

    #[test]
    fn auxiliary_loss_on_tape_matches_scalar_form_and_gradient() {
        let mut net = PolicyNetwork::new(&mut rng_from(3), 3, &[5], 2, HeadKind::Deterministic, NetMode::LipsNet, "test");
        net.layers[0].budget = tensor::softplus_inverse(3.0).unwrap();
        net.layers[1].budget = tensor::softplus_inverse(5.0).unwrap();
        let cfg = LipsNetConfig::new(10.0, 0.001).unwrap();
        let mut tape = Tape::new();
        let vars = net.register(&mut tape);
        let loss = auxiliary_loss(&mut tape, &vars, &cfg).unwrap();
        assert!((tape.value(loss).item() - 0.005).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-6;
        for (k, c) in vars.budgets().into_iter().enumerate() {
            let analytic = grads.wrt(c).item();
            let mut plus = net.clone();
            plus.layers[k].budget += h;
            let mut minus = net.clone();
            minus.layers[k].budget -= h;
            let numeric = (auxiliary_loss_value(plus.budget_product(), &cfg)
                - auxiliary_loss_value(minus.budget_product(), &cfg))
                / (2.0 * h);
            assert!((analytic - numeric).abs() <= 1e-4 * numeric.abs());
        }
    }

    #[test]
    fn tv_distance_cases() {
        assert_eq!(tv_distance(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let tv = tv_distance(&tensor::softmax(&[0.0, 0.0]), &tensor::softmax(&[3.0f64.ln(), 0.0])).unwrap();
        assert!((tv - 0.25).abs() < 1e-15);
        assert!(tv <= 3.0f64.ln());
        assert!(matches!(tv_distance(&[0.5, 0.6], &[0.5, 0.5]), Err(Error::Contract(_))));
        assert!(tv_distance(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn weight_file_round_trip_is_bit_exact() {
        let net = PolicyNetwork::new(&mut rng_from(9), 4, &[8, 6], 2, HeadKind::Categorical, NetMode::LipsNet, "cartpole");
        let back = PolicyNetwork::from_container(&Container::from_bytes(&net.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_container().to_bytes(), net.to_container().to_bytes());
    }

    #[test]
    fn tape_forward_matches_frozen_forward() {
        for mode in [NetMode::LipsNet, NetMode::Vanilla] {
            for head in [HeadKind::Deterministic, HeadKind::Categorical] {
                let net = PolicyNetwork::new(&mut rng_from(11), 3, &[7, 5], 4, head, mode, "test");
                let batch = Matrix::from_rows(&[vec![0.1, -0.4, 0.9], vec![1.5, 0.2, -0.3]]).unwrap();
                let mut tape = Tape::new();
                let vars = net.register(&mut tape);
                let x = tape.leaf(batch.clone());
                let y = net.forward_tape(&mut tape, &vars, x).unwrap();
                for r in 0..2 {
                    let direct = net.forward(batch.row_slice(r)).unwrap();
                    for (a, b) in tape.value(y).row_slice(r).iter().zip(&direct) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn frozen_input_gradient_matches_tape() {
        for head in [HeadKind::Deterministic, HeadKind::Categorical] {
            let net = PolicyNetwork::new(&mut rng_from(12), 3, &[6], 3, head, NetMode::LipsNet, "test");
            let x = [0.2, -0.5, 0.8];
            let upstream = [0.7, -1.3, 0.4];
            let frozen = net.frozen().unwrap();
            let trace = frozen.trace(&x);
            let fast = frozen.input_gradient(&trace, &upstream);

            let mut tape = Tape::new();
            let vars = net.register(&mut tape);
            let xv = tape.leaf(Matrix::row(&x));
            let y = net.forward_tape(&mut tape, &vars, xv).unwrap();
            let u = tape.leaf(Matrix::row(&upstream));
            let prod = tape.mul(y, u).unwrap();
            let loss = tape.sum(prod);
            let slow = tape.backward(loss).unwrap().wrt(xv);
            for (a, b) in fast.iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    proptest! {
        #[test]
        fn normalized_norm_equals_softplus_budget(
            seed in any::<u64>(),
            c in -5.0f64..5.0,
            rows in 1usize..8,
            cols in 1usize..8,
        ) {
            let mut l = LipschitzLayer::init(&mut rng_from(seed), cols, rows, Activation::Relu);
            l.budget = c;
            let n = tensor::mat_inf_norm(&l.normalized_weight().unwrap()).unwrap();
            let sp = tensor::softplus(c);
            prop_assert!((n - sp).abs() <= 1e-9 * sp);
        }

        #[test]
        fn softmax_tv_lemma(
            (x, y) in (1usize..=8).prop_flat_map(|m| (
                prop::collection::vec(-10.0f64..10.0, m),
                prop::collection::vec(-10.0f64..10.0, m),
            ))
        ) {
            let m = x.len() as f64;
            let tv = tv_distance(&tensor::softmax(&x), &tensor::softmax(&y)).unwrap();
            prop_assert!(tv <= 0.5 * m * tensor::distance(&x, &y, Norm::L1) + 1e-12);
        }
    }
}
