//! Desk-scale environments and observation preprocessing.

pub mod cartpole;
pub mod gridworld;

use std::collections::VecDeque;

use thiserror::Error;

pub use cartpole::{
    cartpole_reset, cartpole_step, render_cartpole, CartPoleEnv, CartPoleParams, CartPoleState, ImageCartPoleEnv,
};
pub use gridworld::{gridworld_new, gridworld_value_iteration, GridworldEnv, QTable};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("step called on a terminal state")]
    SteppedTerminal,
    #[error("action {action} out of range for {n_actions} actions")]
    BadAction { action: usize, n_actions: usize },
    #[error("invalid environment parameter: {0}")]
    InvalidParam(String),
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// The episode is over (failure, goal or time limit).
    pub done: bool,
    /// The episode ended only because the step limit was reached; the next
    /// state still has a bootstrap value.
    pub truncated: bool,
}

impl Step {
    /// Whether the transition should be stored as terminal for TD targets.
    pub fn bootstrap_terminal(&self) -> bool {
        self.done && !self.truncated
    }
}

/// An episodic environment with a discrete action set.
pub trait Environment {
    fn n_actions(&self) -> usize;
    fn obs_dim(&self) -> usize;
    /// Reseeds the environment's internal random stream.
    fn reseed(&mut self, seed: u64);
    fn reset(&mut self) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<Step, EnvError>;
    /// Fixed observations on which the two Q-networks are compared.
    fn probe_observations(&self) -> Vec<Vec<f64>>;
    fn name(&self) -> &'static str;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObsMode {
    StateVector,
    ImageStack,
}

/// Stack of the last `m` frames, most recent last, padded by repeating the
/// earliest available frame. Values are clamped to `[0, 1]`.
pub fn preprocess(frames: &[Vec<f64>], m: usize) -> Result<Vec<f64>, EnvError> {
    if frames.is_empty() {
        return Err(EnvError::InvalidParam("preprocess needs at least one frame".into()));
    }
    if m == 0 {
        return Err(EnvError::InvalidParam("stack depth must be positive".into()));
    }
    let take = frames.len().min(m);
    let window = &frames[frames.len() - take..];
    let mut out = Vec::with_capacity(m * window[0].len());
    for _ in 0..m - take {
        out.extend(window[0].iter().map(|v| v.clamp(0.0, 1.0)));
    }
    for f in window {
        out.extend(f.iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Ok(out)
}

/// Rolling window that feeds [`preprocess`].
#[derive(Debug, Clone)]
pub struct FrameStack {
    depth: usize,
    frames: VecDeque<Vec<f64>>,
}

impl FrameStack {
    pub fn new(depth: usize) -> Self {
        Self {
            depth,
            frames: VecDeque::with_capacity(depth),
        }
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn push(&mut self, frame: Vec<f64>) {
        if self.frames.len() == self.depth {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
    }

    pub fn observation(&self) -> Result<Vec<f64>, EnvError> {
        let frames: Vec<Vec<f64>> = self.frames.iter().cloned().collect();
        preprocess(&frames, self.depth)
    }
}
