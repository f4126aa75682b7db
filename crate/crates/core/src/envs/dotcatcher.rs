//! A ball falls through a 24×24 frame, drifting two columns per step and
//! bouncing off the side walls; a three-pixel paddle on the bottom row moves
//! one column per step. The drift direction is not visible in a single
//! frame, so a policy needs at least two frames to know where the ball will
//! land.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{invalid_action, Env, EnvKind, StepResult};
use crate::backbone::ObsShape;
use crate::error::{Result, TitError};

pub const SIZE: usize = 24;
pub const PADDLE_ROW: usize = SIZE - 1;
pub const PADDLE_HALF_WIDTH: i32 = 1;
pub const BALL_SPEED: i32 = 2;
pub const BALLS_PER_EPISODE: usize = 8;
/// Steps from spawn to landing.
pub const STEPS_PER_BALL: usize = PADDLE_ROW;
pub const ON: f32 = 255.0;

pub const LEFT: usize = 0;
pub const STAY: usize = 1;
pub const RIGHT: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ball {
    pub row: usize,
    pub col: i32,
    pub vx: i32,
}

#[derive(Clone, Debug)]
pub struct DotCatcher {
    ball: Ball,
    /// Centre column of the paddle.
    paddle: i32,
    balls_done: usize,
    steps: usize,
    done: bool,
    rng: ChaCha8Rng,
}

/// Horizontal move with reflection off the walls at columns 0 and 23.
fn drift(col: i32, vx: i32) -> (i32, i32) {
    let max = SIZE as i32 - 1;
    let next = col + vx;
    if next < 0 {
        (-next, -vx)
    } else if next > max {
        (2 * max - next, -vx)
    } else {
        (next, vx)
    }
}

impl DotCatcher {
    pub fn new(seed: u64) -> Self {
        let mut env = Self {
            ball: Ball {
                row: 0,
                col: 0,
                vx: 1,
            },
            paddle: SIZE as i32 / 2,
            balls_done: 0,
            steps: 0,
            done: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.reset(None);
        env
    }

    pub fn ball(&self) -> &Ball {
        &self.ball
    }

    pub fn paddle(&self) -> i32 {
        self.paddle
    }

    /// Places the ball and paddle directly, e.g. to probe the dynamics.
    pub fn set_state(&mut self, ball: Ball, paddle: i32) {
        self.ball = ball;
        self.paddle = paddle.clamp(PADDLE_HALF_WIDTH, SIZE as i32 - 1 - PADDLE_HALF_WIDTH);
        self.done = false;
    }

    fn spawn(&mut self) {
        self.ball = Ball {
            row: 0,
            col: self.rng.random_range(0..SIZE as i32),
            vx: if self.rng.random_bool(0.5) {
                BALL_SPEED
            } else {
                -BALL_SPEED
            },
        };
    }

    pub fn render(&self) -> Vec<f32> {
        let mut frame = vec![0.0; SIZE * SIZE];
        if self.ball.row < PADDLE_ROW {
            frame[self.ball.row * SIZE + self.ball.col as usize] = ON;
        }
        for c in self.paddle - PADDLE_HALF_WIDTH..=self.paddle + PADDLE_HALF_WIDTH {
            frame[PADDLE_ROW * SIZE + c as usize] = ON;
        }
        frame
    }

    /// Column where the current ball will reach the paddle row.
    pub fn landing_column(&self) -> i32 {
        let (mut col, mut vx) = (self.ball.col, self.ball.vx);
        for _ in self.ball.row..PADDLE_ROW {
            (col, vx) = drift(col, vx);
        }
        col
    }
}

impl Env for DotCatcher {
    fn id(&self) -> EnvKind {
        EnvKind::DotCatcher
    }

    fn obs_shape(&self) -> ObsShape {
        EnvKind::DotCatcher.obs_shape()
    }

    fn action_count(&self) -> usize {
        3
    }

    fn reset(&mut self, seed: Option<u64>) -> Vec<f32> {
        if let Some(seed) = seed {
            self.rng = ChaCha8Rng::seed_from_u64(seed);
        }
        self.paddle = SIZE as i32 / 2;
        self.balls_done = 0;
        self.steps = 0;
        self.done = false;
        self.spawn();
        self.render()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        if action > RIGHT {
            return Err(invalid_action(EnvKind::DotCatcher, action));
        }
        if self.done {
            return Err(TitError::Env(
                "dotcatcher: step after episode end; call reset".into(),
            ));
        }
        let max = SIZE as i32 - 1 - PADDLE_HALF_WIDTH;
        self.paddle = (self.paddle + action as i32 - 1).clamp(PADDLE_HALF_WIDTH, max);
        let (col, vx) = drift(self.ball.col, self.ball.vx);
        self.ball = Ball {
            row: self.ball.row + 1,
            col,
            vx,
        };
        self.steps += 1;
        let mut reward = 0.0;
        if self.ball.row == PADDLE_ROW {
            reward = if (self.ball.col - self.paddle).abs() <= PADDLE_HALF_WIDTH {
                1.0
            } else {
                -1.0
            };
            self.balls_done += 1;
            if self.balls_done == BALLS_PER_EPISODE {
                self.done = true;
            } else {
                self.spawn();
            }
        }
        Ok(StepResult {
            obs: self.render(),
            reward,
            terminated: self.done,
            truncated: false,
        })
    }

    /// Moves the paddle toward the landing column.
    fn expert_action(&self) -> usize {
        match self.landing_column().cmp(&self.paddle) {
            std::cmp::Ordering::Less => LEFT,
            std::cmp::Ordering::Equal => STAY,
            std::cmp::Ordering::Greater => RIGHT,
        }
    }
}
