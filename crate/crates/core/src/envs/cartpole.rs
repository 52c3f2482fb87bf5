//! Cart-pole balancing with Euler integration and the usual termination box.

use rand::Rng;

use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.8;
pub const MASS_CART: f64 = 1.0;
pub const MASS_POLE: f64 = 0.1;
pub const TOTAL_MASS: f64 = MASS_CART + MASS_POLE;
/// Half the pole length.
pub const HALF_LENGTH: f64 = 0.5;
pub const POLE_MASS_LENGTH: f64 = MASS_POLE * HALF_LENGTH;
pub const FORCE_MAG: f64 = 10.0;
pub const TAU: f64 = 0.02;
pub const X_THRESHOLD: f64 = 2.4;
pub const THETA_THRESHOLD: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;
pub const EPISODE_CAP: usize = 500;

/// Observation `(x, ẋ, θ, θ̇)` in raw units (m, m/s, rad, rad/s).
#[derive(Clone, Debug, PartialEq)]
pub struct CartPole {
    pub(crate) state: [f64; 4],
}

impl CartPole {
    pub fn new() -> Self {
        Self { state: [0.0; 4] }
    }

    pub fn reset(&mut self, rng: &mut impl Rng) -> [f64; 4] {
        for v in &mut self.state {
            *v = rng.gen_range(-0.05..0.05);
        }
        self.state
    }

    /// One Euler step; action 1 pushes right, 0 pushes left.
    pub fn dynamics(state: [f64; 4], action: usize) -> Result<[f64; 4]> {
        let force = match action {
            0 => -FORCE_MAG,
            1 => FORCE_MAG,
            other => return Err(Error::Contract(format!("cart-pole action {other} out of range"))),
        };
        let [x, x_dot, theta, theta_dot] = state;
        let (sin, cos) = theta.sin_cos();
        let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin) / TOTAL_MASS;
        let theta_acc = (GRAVITY * sin - cos * temp)
            / (HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos * cos / TOTAL_MASS));
        let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS;
        Ok([
            x + TAU * x_dot,
            x_dot + TAU * x_acc,
            theta + TAU * theta_dot,
            theta_dot + TAU * theta_acc,
        ])
    }

    pub fn is_failure(state: &[f64; 4]) -> bool {
        state[0].abs() > X_THRESHOLD || state[2].abs() > THETA_THRESHOLD
    }
}

impl Default for CartPole {
    fn default() -> Self {
        Self::new()
    }
}
