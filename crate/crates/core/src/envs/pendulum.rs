//! Torque-limited pendulum swing-up. Angle 0 is upright.
//!
//! Observations are `(cos θ, sin θ, θ̇ / 8)` so every coordinate lies in
//! `[-1, 1]`. The native cost `θ² + 0.1 θ̇² + 0.001 u²` is remapped to a
//! per-step reward `1 − cost / COST_MAX ∈ [0, 1]`.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};

pub const GRAVITY: f64 = 10.0;
pub const MASS: f64 = 1.0;
pub const LENGTH: f64 = 1.0;
pub const DT: f64 = 0.05;
pub const MAX_SPEED: f64 = 8.0;
pub const MAX_TORQUE: f64 = 2.0;
pub const EPISODE_CAP: usize = 200;
/// Largest possible per-step cost.
pub const COST_MAX: f64 = PI * PI + 0.1 * MAX_SPEED * MAX_SPEED + 0.001 * MAX_TORQUE * MAX_TORQUE;

#[derive(Clone, Debug, PartialEq)]
pub struct Pendulum {
    pub(crate) theta: f64,
    pub(crate) theta_dot: f64,
}

pub fn angle_normalize(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

impl Pendulum {
    pub fn new() -> Self {
        Self { theta: 0.0, theta_dot: 0.0 }
    }

    pub fn with_state(theta: f64, theta_dot: f64) -> Self {
        Self { theta, theta_dot }
    }

    pub fn reset(&mut self, rng: &mut impl Rng) {
        self.theta = rng.gen_range(-PI..PI);
        self.theta_dot = rng.gen_range(-1.0..1.0);
    }

    pub fn observation(&self) -> [f64; 3] {
        Self::observe(self.theta, self.theta_dot)
    }

    pub fn observe(theta: f64, theta_dot: f64) -> [f64; 3] {
        [theta.cos(), theta.sin(), theta_dot / MAX_SPEED]
    }

    /// Inverts [`Pendulum::observe`].
    pub fn state_from_observation(obs: &[f64]) -> (f64, f64) {
        (obs[1].atan2(obs[0]), obs[2] * MAX_SPEED)
    }

    pub fn cost(theta: f64, theta_dot: f64, torque: f64) -> f64 {
        let th = angle_normalize(theta);
        th * th + 0.1 * theta_dot * theta_dot + 0.001 * torque * torque
    }

    pub fn reward(theta: f64, theta_dot: f64, torque: f64) -> f64 {
        (1.0 - Self::cost(theta, theta_dot, torque) / COST_MAX).clamp(0.0, 1.0)
    }

    /// Semi-implicit Euler step; returns `(θ', θ̇', reward)`.
    pub fn dynamics(theta: f64, theta_dot: f64, torque: f64) -> Result<(f64, f64, f64)> {
        if !torque.is_finite() || torque.abs() > MAX_TORQUE {
            return Err(Error::Contract(format!("pendulum torque {torque} outside [-2, 2]")));
        }
        let reward = Self::reward(theta, theta_dot, torque);
        let acc = 3.0 * GRAVITY / (2.0 * LENGTH) * theta.sin() + 3.0 / (MASS * LENGTH * LENGTH) * torque;
        let new_dot = (theta_dot + acc * DT).clamp(-MAX_SPEED, MAX_SPEED);
        Ok((theta + new_dot * DT, new_dot, reward))
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upright_is_a_fixed_point() {
        let (mut th, mut dot) = (0.0, 0.0);
        for _ in 0..200 {
            let (t, d, r) = Pendulum::dynamics(th, dot, 0.0).unwrap();
            assert_eq!(r, 1.0);
            th = t;
            dot = d;
        }
        assert_eq!((th, dot), (0.0, 0.0));
    }

    #[test]
    fn reward_is_in_unit_interval() {
        assert_eq!(Pendulum::reward(PI, MAX_SPEED, MAX_TORQUE), 0.0);
        assert_eq!(Pendulum::reward(0.0, 0.0, 0.0), 1.0);
        let r = Pendulum::reward(1.0, 2.0, 1.0);
        assert!(r > 0.0 && r < 1.0);
    }

    #[test]
    fn torque_out_of_bounds_is_rejected() {
        assert!(Pendulum::dynamics(0.0, 0.0, 2.5).is_err());
        assert!(Pendulum::dynamics(0.0, 0.0, f64::NAN).is_err());
    }

    #[test]
    fn observation_round_trip() {
        let (th, dot) = Pendulum::state_from_observation(&Pendulum::observe(2.0, -3.0));
        assert!((th - 2.0).abs() < 1e-12 && (dot + 3.0).abs() < 1e-12);
    }
}
