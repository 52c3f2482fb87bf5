//! Robustness certificates for state-adversarial MDPs.
//!
//! For a Lipschitz MDP with rewards in `[0, R_max]` and a policy with
//! Lipschitz constant `L_π`, the worst-case value drop under any adversary
//! confined to an ε-ball is bounded by `Θ ≤ α · L_π · ε` with
//!
//! * stochastic policy:    `α = R_max / (1 − γ)²`
//! * deterministic policy: `α = (L_r + γ R_max L_P / (1 − γ)) / (1 − γ)`

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::lipschitz_net::{tv_distance, HeadKind, PolicyNetwork};
use crate::rng;
use crate::tensor::{self, Norm};

/// Constants of a Lipschitz MDP.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MdpConstants {
    pub gamma: f64,
    pub r_max: f64,
    /// Reward Lipschitz constant.
    pub l_r: f64,
    /// Transition Lipschitz constant.
    pub l_p: f64,
}

impl MdpConstants {
    pub fn new(gamma: f64, r_max: f64, l_r: f64, l_p: f64) -> Result<Self> {
        let c = Self { gamma, r_max, l_r, l_p };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Domain(format!("discount factor must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.r_max > 0.0) || !self.r_max.is_finite() {
            return Err(Error::Domain(format!("reward bound must be positive, got {}", self.r_max)));
        }
        if !(self.l_r >= 0.0 && self.l_p >= 0.0) || !self.l_r.is_finite() || !self.l_p.is_finite() {
            return Err(Error::Domain("Lipschitz constants must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Radius and norm of the adversary's perturbation ball `B_ε(s)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationBudget {
    pub epsilon: f64,
    pub norm: Norm,
}

impl PerturbationBudget {
    pub fn new(epsilon: f64, norm: Norm) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::Contract(format!("epsilon must be finite and >= 0, got {epsilon}")));
        }
        if norm == Norm::L1 {
            return Err(Error::Contract("perturbation budgets use the l2 or linf norm".into()));
        }
        Ok(Self { epsilon, norm })
    }

    pub fn linf(epsilon: f64) -> Self {
        Self { epsilon, norm: Norm::Linf }
    }

    pub fn l2(epsilon: f64) -> Self {
        Self { epsilon, norm: Norm::L2 }
    }

    /// Whether `s_hat` lies in the ball around `s` up to relative slack `1e-9`.
    pub fn contains(&self, s: &[f64], s_hat: &[f64]) -> bool {
        tensor::distance(s, s_hat, self.norm) <= self.epsilon * (1.0 + 1e-9) + 1e-15
    }

    /// Projects `s_hat` onto `B_ε(s)` in place.
    pub fn project(&self, s: &[f64], s_hat: &mut [f64]) {
        let mut delta: Vec<f64> = s_hat.iter().zip(s).map(|(a, b)| a - b).collect();
        crate::tape::project_onto_ball(&mut delta, self.norm, self.epsilon);
        for ((out, base), d) in s_hat.iter_mut().zip(s).zip(delta) {
            *out = base + d;
        }
    }
}

impl fmt::Display for PerturbationBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.norm, self.epsilon)
    }
}

/// Which α branch applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyClass {
    Stochastic,
    Deterministic,
}

impl PolicyClass {
    pub fn for_head(head: HeadKind) -> Self {
        match head {
            HeadKind::Categorical => PolicyClass::Stochastic,
            HeadKind::Deterministic => PolicyClass::Deterministic,
        }
    }
}

impl FromStr for PolicyClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" | "categorical" => Ok(PolicyClass::Stochastic),
            "deterministic" => Ok(PolicyClass::Deterministic),
            other => Err(Error::UnsupportedHead(other.to_string())),
        }
    }
}

pub fn alpha(constants: &MdpConstants, class: PolicyClass) -> Result<f64> {
    constants.validate()?;
    let MdpConstants { gamma, r_max, l_r, l_p } = *constants;
    let horizon = 1.0 - gamma;
    Ok(match class {
        PolicyClass::Stochastic => r_max / (horizon * horizon),
        PolicyClass::Deterministic => (l_r + gamma * r_max * l_p / horizon) / horizon,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CertificateResult {
    pub alpha: f64,
    /// Policy Lipschitz constant used in the bound.
    pub l_pi: f64,
    pub epsilon: f64,
    /// Upper bound on the worst-case value drop, `α · L_π · ε`.
    pub theta_bound: f64,
    pub head: HeadKind,
}

/// Certificate from the network's global Lipschitz constant.
pub fn certify(net: &PolicyNetwork, constants: &MdpConstants, budget: &PerturbationBudget) -> Result<CertificateResult> {
    let alpha = alpha(constants, PolicyClass::for_head(net.head))?;
    let l_pi = net.certified_policy_lipschitz(budget.norm)?;
    Ok(CertificateResult { alpha, l_pi, epsilon: budget.epsilon, theta_bound: alpha * l_pi * budget.epsilon, head: net.head })
}

/// Policy output distance: ℓ₂ for deterministic heads, TV for categorical.
pub fn policy_distance(head: HeadKind, a: &[f64], b: &[f64]) -> Result<f64> {
    match head {
        HeadKind::Deterministic => Ok(tensor::distance(a, b, Norm::L2)),
        HeadKind::Categorical => tv_distance(a, b),
    }
}

/// Random point on the unit sphere of `norm`. For ℓ∞, every other draw is a
/// cube vertex, where ratios of piecewise-linear maps peak.
fn unit_direction(rng: &mut impl Rng, dim: usize, norm: Norm, index: usize) -> Vec<f64> {
    match norm {
        Norm::Linf => {
            if index % 2 == 0 {
                (0..dim).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()
            } else {
                let mut u: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let k = rng.gen_range(0..dim);
                u[k] = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                u
            }
        }
        _ => loop {
            let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = tensor::vector_norm(&g, norm);
            if n > 0.0 {
                break g.into_iter().map(|v| v / n).collect();
            }
        },
    }
}

const RADIUS_FACTORS: [f64; 7] = [1.0, 0.3, 0.1, 0.03, 0.01, 0.003, 0.001];

/// Sampled lower estimate of the local Lipschitz constant
/// `sup_{s' ∈ B_ε(s)} D(π(s), π(s')) / ‖s − s'‖`.
pub fn estimate_local_lipschitz(
    net: &PolicyNetwork,
    s: &[f64],
    budget: &PerturbationBudget,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Contract("local Lipschitz estimation needs at least one sample".into()));
    }
    if !(budget.epsilon > 0.0) {
        return Err(Error::Contract("local Lipschitz estimation needs epsilon > 0".into()));
    }
    if s.len() != net.input_dim() {
        return Err(Error::Dimension(format!("state of length {} for a {}-input network", s.len(), net.input_dim())));
    }
    let frozen = net.frozen()?;
    let base = frozen.output(s);
    let mut rng = rng::child_rng(seed, "local-lipschitz", 0);
    let mut best = 0.0f64;
    for i in 0..samples {
        let u = unit_direction(&mut rng, s.len(), budget.norm, i);
        let radius = budget.epsilon * RADIUS_FACTORS[(i / 2) % RADIUS_FACTORS.len()];
        let s2: Vec<f64> = s.iter().zip(&u).map(|(a, d)| a + radius * d).collect();
        let d_in = tensor::distance(s, &s2, budget.norm);
        if d_in == 0.0 {
            continue;
        }
        let d_out = policy_distance(net.head, &base, &frozen.output(&s2))?;
        best = best.max(d_out / d_in);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lipschitz_net::{Activation, LipschitzLayer, NetMode};
    use crate::rng::rng_from;
    use crate::tensor::Matrix;

    #[test]
    fn alpha_by_substitution() {
        let c = MdpConstants::new(0.9, 1.0, 0.0, 0.0).unwrap();
        assert!((alpha(&c, PolicyClass::Stochastic).unwrap() - 100.0).abs() < 1e-10);
        let c = MdpConstants::new(0.5, 1.0, 1.0, 1.0).unwrap();
        assert!((alpha(&c, PolicyClass::Deterministic).unwrap() - 4.0).abs() < 1e-15);
        for gamma in [0.1, 0.5, 0.99] {
            let c = MdpConstants::new(gamma, 7.0, 0.0, 0.0).unwrap();
            assert_eq!(alpha(&c, PolicyClass::Deterministic).unwrap(), 0.0);
        }
    }

    #[test]
    fn alpha_rejects_bad_discount() {
        assert!(matches!(MdpConstants::new(1.0, 1.0, 0.0, 0.0), Err(Error::Domain(_))));
        let raw = MdpConstants { gamma: 0.0, r_max: 1.0, l_r: 0.0, l_p: 0.0 };
        assert!(matches!(alpha(&raw, PolicyClass::Stochastic), Err(Error::Domain(_))));
    }

    #[test]
    fn alpha_is_monotone() {
        let base = MdpConstants::new(0.8, 2.0, 0.5, 0.3).unwrap();
        for class in [PolicyClass::Stochastic, PolicyClass::Deterministic] {
            let a0 = alpha(&base, class).unwrap();
            for bumped in [
                MdpConstants { gamma: 0.9, ..base },
                MdpConstants { r_max: 3.0, ..base },
                MdpConstants { l_r: 0.6, ..base },
                MdpConstants { l_p: 0.4, ..base },
            ] {
                assert!(alpha(&bumped, class).unwrap() >= a0);
            }
        }
    }

    fn linear_net(a: Matrix, head: HeadKind) -> PolicyNetwork {
        let bias = vec![0.0; a.rows()];
        let layer = LipschitzLayer { weight: a, bias, budget: 0.0, activation: Activation::Identity };
        PolicyNetwork::from_layers(vec![layer], head, NetMode::Vanilla, "test").unwrap()
    }

    #[test]
    fn certify_products() {
        // Categorical single layer with L^FC = 1/9·... choose m = 2, L^FC = 2 → L_π = 4
        let net = linear_net(Matrix::from_rows(&[vec![1.0, 1.0], vec![-1.0, 0.5]]).unwrap(), HeadKind::Categorical);
        assert_eq!(net.certified_policy_lipschitz(Norm::Linf).unwrap(), 4.0);
        let c = MdpConstants::new(0.9, 1.0, 0.0, 0.0).unwrap();
        let r = certify(&net, &c, &PerturbationBudget::linf(0.0)).unwrap();
        assert_eq!(r.theta_bound, 0.0);
        let r = certify(&net, &c, &PerturbationBudget::linf(0.03)).unwrap();
        // α = 100, L_π = 4 → 12; the α=100, L_π=2 case is half of that
        assert!((r.theta_bound - 12.0).abs() < 1e-9);
        assert!((r.alpha * 2.0 * 0.03 - 6.0).abs() < 1e-9);
        let r2 = certify(&net, &c, &PerturbationBudget::linf(0.06)).unwrap();
        assert!((r2.theta_bound - 2.0 * r.theta_bound).abs() < 1e-9);
    }

    #[test]
    fn budget_validation_and_projection() {
        assert!(PerturbationBudget::new(-0.1, Norm::L2).is_err());
        assert!(PerturbationBudget::new(0.1, Norm::L1).is_err());
        let b = PerturbationBudget::l2(1.0);
        let s = [1.0, 1.0];
        let mut s_hat = [4.0, 5.0];
        b.project(&s, &mut s_hat);
        assert!(b.contains(&s, &s_hat));
        assert!((s_hat[0] - 1.6).abs() < 1e-12 && (s_hat[1] - 1.8).abs() < 1e-12);
    }

    #[test]
    fn constant_network_has_zero_local_constant() {
        let mut net = PolicyNetwork::new(&mut rng_from(1), 3, &[4], 2, HeadKind::Deterministic, NetMode::Vanilla, "test");
        net.layers[1].weight = Matrix::zeros(2, 4);
        let est = estimate_local_lipschitz(&net, &[0.1, 0.2, 0.3], &PerturbationBudget::linf(0.1), 200, 0).unwrap();
        assert_eq!(est, 0.0);
    }

    #[test]
    fn linear_map_estimate_reaches_vertex_oracle() {
        let a = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.3, 0.7, -1.1]]).unwrap();
        let net = linear_net(a.clone(), HeadKind::Deterministic);
        // sup over the ℓ∞ ball of ‖A d‖₂ / ‖d‖∞ is attained at a cube vertex
        let mut oracle = 0.0f64;
        for mask in 0..8u32 {
            let v: Vec<f64> = (0..3).map(|j| if mask >> j & 1 == 1 { 1.0 } else { -1.0 }).collect();
            oracle = oracle.max(tensor::vector_norm(&a.matvec(&v).unwrap(), Norm::L2));
        }
        let est = estimate_local_lipschitz(&net, &[0.0, 1.0, -1.0], &PerturbationBudget::linf(0.2), 2000, 3).unwrap();
        assert!(est <= oracle * (1.0 + 1e-9));
        assert!(est >= oracle * (1.0 - 1e-9), "estimate {est} vs oracle {oracle}");
        assert!(est <= net.certified_policy_lipschitz(Norm::Linf).unwrap());
    }

    #[test]
    fn estimate_never_exceeds_certified_constant() {
        for (seed, head, norm) in [
            (1, HeadKind::Deterministic, Norm::Linf),
            (2, HeadKind::Categorical, Norm::L2),
            (3, HeadKind::Categorical, Norm::Linf),
        ] {
            let net = PolicyNetwork::new(&mut rng_from(seed), 4, &[16, 16], 3, head, NetMode::LipsNet, "test");
            let bound = net.certified_policy_lipschitz(norm).unwrap();
            let budget = PerturbationBudget::new(0.5, norm).unwrap();
            let est = estimate_local_lipschitz(&net, &[0.2, -0.1, 0.4, 0.0], &budget, 500, seed).unwrap();
            assert!(est > 0.0 && est <= bound, "{est} vs {bound}");
        }
    }

    #[test]
    fn estimate_rejects_bad_arguments() {
        let net = PolicyNetwork::new(&mut rng_from(1), 2, &[], 1, HeadKind::Deterministic, NetMode::Vanilla, "test");
        assert!(estimate_local_lipschitz(&net, &[0.0, 0.0], &PerturbationBudget::linf(0.1), 0, 0).is_err());
        assert!(estimate_local_lipschitz(&net, &[0.0, 0.0], &PerturbationBudget::linf(0.0), 5, 0).is_err());
    }
}
