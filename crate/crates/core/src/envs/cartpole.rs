//! Cart-pole balancing with the classic v1 constants and Euler integration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{invalid_action, Env, EnvKind, StepResult};
use crate::backbone::ObsShape;
use crate::error::{Result, TitError};

pub const GRAVITY: f64 = 9.8;
pub const MASS_CART: f64 = 1.0;
pub const MASS_POLE: f64 = 0.1;
pub const TOTAL_MASS: f64 = MASS_CART + MASS_POLE;
/// Half the pole length.
pub const LENGTH: f64 = 0.5;
pub const POLE_MASS_LENGTH: f64 = MASS_POLE * LENGTH;
pub const FORCE_MAG: f64 = 10.0;
pub const TAU: f64 = 0.02;
pub const THETA_THRESHOLD: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;
pub const X_THRESHOLD: f64 = 2.4;
pub const MAX_STEPS: usize = 500;
pub const RESET_BOUND: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct CartPole {
    /// `(x, x_dot, theta, theta_dot)`.
    state: [f64; 4],
    steps: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl CartPole {
    pub fn new(seed: u64) -> Self {
        let mut env = Self {
            state: [0.0; 4],
            steps: 0,
            done: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.reset(None);
        env
    }

    pub fn state(&self) -> [f64; 4] {
        self.state
    }

    /// Overrides the physical state, e.g. to probe the dynamics.
    pub fn set_state(&mut self, state: [f64; 4]) {
        self.state = state;
        self.steps = 0;
        self.done = false;
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn observation(&self) -> Vec<f32> {
        self.state.iter().map(|&v| v as f32).collect()
    }
}

impl Env for CartPole {
    fn id(&self) -> EnvKind {
        EnvKind::CartPole
    }

    fn obs_shape(&self) -> ObsShape {
        ObsShape::Array { dim: 4 }
    }

    fn action_count(&self) -> usize {
        2
    }

    fn reset(&mut self, seed: Option<u64>) -> Vec<f32> {
        if let Some(seed) = seed {
            self.rng = ChaCha8Rng::seed_from_u64(seed);
        }
        for v in &mut self.state {
            *v = self.rng.random_range(-RESET_BOUND..=RESET_BOUND);
        }
        self.steps = 0;
        self.done = false;
        self.observation()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        if action > 1 {
            return Err(invalid_action(EnvKind::CartPole, action));
        }
        if self.done {
            return Err(TitError::Env(
                "cartpole: step after episode end; call reset".into(),
            ));
        }
        let [x, x_dot, theta, theta_dot] = self.state;
        let force = if action == 1 { FORCE_MAG } else { -FORCE_MAG };
        let (sin, cos) = theta.sin_cos();
        let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin) / TOTAL_MASS;
        let theta_acc = (GRAVITY * sin - cos * temp)
            / (LENGTH * (4.0 / 3.0 - MASS_POLE * cos * cos / TOTAL_MASS));
        let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS;
        self.state = [
            x + TAU * x_dot,
            x_dot + TAU * x_acc,
            theta + TAU * theta_dot,
            theta_dot + TAU * theta_acc,
        ];
        self.steps += 1;
        let [x, _, theta, _] = self.state;
        let terminated = !(-X_THRESHOLD..=X_THRESHOLD).contains(&x)
            || !(-THETA_THRESHOLD..=THETA_THRESHOLD).contains(&theta);
        let truncated = !terminated && self.steps >= MAX_STEPS;
        self.done = terminated || truncated;
        Ok(StepResult {
            obs: self.observation(),
            reward: 1.0,
            terminated,
            truncated,
        })
    }

    /// Pushes the cart toward the side the pole is falling to.
    fn expert_action(&self) -> usize {
        let [_, _, theta, theta_dot] = self.state;
        usize::from(theta + 0.5 * theta_dot > 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_seeded_and_bounded() {
        let mut a = CartPole::new(0);
        let mut b = CartPole::new(1);
        assert_eq!(a.reset(Some(7)), b.reset(Some(7)));
        for seed in 0..1000 {
            let obs = a.reset(Some(seed));
            assert_eq!(obs.len(), 4);
            assert!(obs.iter().all(|v| v.abs() <= RESET_BOUND as f32));
        }
    }

    #[test]
    fn one_euler_step_by_hand() {
        let mut env = CartPole::new(0);
        env.set_state([0.0; 4]);
        let r = env.step(1).unwrap();
        // From rest: temp = F/M, theta_acc = -temp / (l (4/3 - m/M)).
        let temp = FORCE_MAG / TOTAL_MASS;
        let theta_acc = -temp / (LENGTH * (4.0 / 3.0 - MASS_POLE / TOTAL_MASS));
        let x_acc = temp - POLE_MASS_LENGTH * theta_acc / TOTAL_MASS;
        assert_eq!(env.state(), [0.0, TAU * x_acc, 0.0, TAU * theta_acc]);
        assert_eq!(r.reward, 1.0);
        // Angle moves on the following step, opposite to the push.
        env.step(1).unwrap();
        let angle_change = env.state()[2];
        assert!(angle_change < 0.0);
        // Mirror: pushing left tips the pole to positive angles.
        env.set_state([0.0; 4]);
        env.step(0).unwrap();
        env.step(0).unwrap();
        assert!(env.state()[2] > 0.0);
    }

    #[test]
    fn terminates_past_the_angle_limit() {
        let mut env = CartPole::new(0);
        env.set_state([0.0, 0.0, THETA_THRESHOLD - 1e-4, 1.0]);
        let r = env.step(1).unwrap();
        assert!(r.terminated && !r.truncated);
        assert!(env.step(0).is_err());
    }

    #[test]
    fn truncates_at_five_hundred_steps() {
        let mut env = CartPole::new(3);
        let mut total = 0.0;
        let mut last = None;
        for _ in 0..MAX_STEPS {
            let a = env.expert_action();
            let r = env.step(a).unwrap();
            total += r.reward;
            let done = r.done();
            last = Some(r);
            if done {
                break;
            }
        }
        let last = last.unwrap();
        assert_eq!(total, 500.0);
        assert!(last.truncated && !last.terminated);
    }

    #[test]
    fn rejects_invalid_action() {
        assert!(matches!(CartPole::new(0).step(2), Err(TitError::Env(_))));
    }
}
