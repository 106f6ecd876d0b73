//! Rectangular gridworld with an absorbing goal cell and optional slip.
//!
//! Cells are indexed `row * width + col`. Actions: 0 up, 1 right, 2 down,
//! 3 left; moves into a wall leave the agent in place. Entering the goal pays
//! `goal_reward` and ends the episode, every other move pays `step_reward`.
//! With probability `slip_prob` the chosen action is replaced by one drawn
//! uniformly from all four.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvError, Environment, Step};

pub const N_ACTIONS: usize = 4;

#[derive(Debug, Clone)]
pub struct GridworldEnv {
    width: usize,
    height: usize,
    goal: usize,
    step_reward: f64,
    goal_reward: f64,
    slip_prob: f64,
    state: usize,
    done: bool,
    rng: ChaCha8Rng,
}

pub fn gridworld_new(
    width: usize,
    height: usize,
    goal_cell: usize,
    step_reward: f64,
    goal_reward: f64,
    slip_prob: f64,
) -> Result<GridworldEnv, EnvError> {
    if width == 0 || height == 0 || width * height < 2 {
        return Err(EnvError::InvalidParam(format!("grid {width}x{height} needs at least two cells")));
    }
    if goal_cell >= width * height {
        return Err(EnvError::InvalidParam(format!("goal cell {goal_cell} outside {width}x{height} grid")));
    }
    if !(0.0..1.0).contains(&slip_prob) {
        return Err(EnvError::InvalidParam(format!("slip_prob {slip_prob} not in [0, 1)")));
    }
    if !step_reward.is_finite() || !goal_reward.is_finite() {
        return Err(EnvError::InvalidParam("rewards must be finite".into()));
    }
    Ok(GridworldEnv {
        width,
        height,
        goal: goal_cell,
        step_reward,
        goal_reward,
        slip_prob,
        state: if goal_cell == 0 { 1 } else { 0 },
        done: false,
        rng: ChaCha8Rng::seed_from_u64(0),
    })
}

impl GridworldEnv {
    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    pub fn goal(&self) -> usize {
        self.goal
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Places the agent at `cell` (for tests and probes).
    pub fn set_state(&mut self, cell: usize) {
        assert!(cell < self.n_states());
        self.state = cell;
        self.done = cell == self.goal;
    }

    pub fn one_hot(&self, cell: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states()];
        v[cell] = 1.0;
        v
    }

    /// Cell reached by moving `action` from `cell`, ignoring slip.
    pub fn move_from(&self, cell: usize, action: usize) -> usize {
        let (r, c) = (cell / self.width, cell % self.width);
        let (r, c) = match action {
            0 if r > 0 => (r - 1, c),
            1 if c + 1 < self.width => (r, c + 1),
            2 if r + 1 < self.height => (r + 1, c),
            3 if c > 0 => (r, c - 1),
            _ => (r, c),
        };
        r * self.width + c
    }

    fn reward_for(&self, next: usize) -> (f64, bool) {
        if next == self.goal {
            (self.goal_reward, true)
        } else {
            (self.step_reward, false)
        }
    }

    /// `(probability, next cell, reward, terminal)` for every outcome of `action` in `cell`.
    pub fn outcomes(&self, cell: usize, action: usize) -> Vec<(f64, usize, f64, bool)> {
        let mut out = Vec::with_capacity(N_ACTIONS + 1);
        let intended = self.move_from(cell, action);
        let (r, t) = self.reward_for(intended);
        out.push((1.0 - self.slip_prob, intended, r, t));
        if self.slip_prob > 0.0 {
            for a in 0..N_ACTIONS {
                let next = self.move_from(cell, a);
                let (r, t) = self.reward_for(next);
                out.push((self.slip_prob / N_ACTIONS as f64, next, r, t));
            }
        }
        out
    }

    /// Every non-goal cell.
    pub fn non_goal_cells(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_states()).filter(move |&c| c != self.goal)
    }
}

impl Environment for GridworldEnv {
    fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    fn obs_dim(&self) -> usize {
        self.n_states()
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Uniform start over non-goal cells.
    fn reset(&mut self) -> Vec<f64> {
        let k = self.rng.random_range(0..self.n_states() - 1);
        self.state = if k >= self.goal { k + 1 } else { k };
        self.done = false;
        self.one_hot(self.state)
    }

    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        if self.done {
            return Err(EnvError::SteppedTerminal);
        }
        if action >= N_ACTIONS {
            return Err(EnvError::BadAction {
                action,
                n_actions: N_ACTIONS,
            });
        }
        let effective = if self.slip_prob > 0.0 && self.rng.random::<f64>() < self.slip_prob {
            self.rng.random_range(0..N_ACTIONS)
        } else {
            action
        };
        let next = self.move_from(self.state, effective);
        let (reward, terminal) = self.reward_for(next);
        self.state = next;
        self.done = terminal;
        Ok(Step {
            obs: self.one_hot(next),
            reward,
            done: terminal,
            truncated: false,
        })
    }

    fn probe_observations(&self) -> Vec<Vec<f64>> {
        self.non_goal_cells().map(|c| self.one_hot(c)).collect()
    }

    fn name(&self) -> &'static str {
        "gridworld"
    }
}

/// Tabular action values; the goal row is identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<f64>,
    /// Sup-norm Bellman residual at return.
    pub residual: f64,
}

impl QTable {
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Greedy action, ties to the lowest index.
    pub fn greedy(&self, s: usize) -> usize {
        crate::trainer::argmax(self.row(s))
    }
}

/// Bellman backup of `q` for one state-action pair.
pub fn bellman_backup(env: &GridworldEnv, q: &[f64], gamma: f64, s: usize, a: usize) -> f64 {
    env.outcomes(s, a)
        .into_iter()
        .map(|(p, next, r, terminal)| {
            let future = if terminal {
                0.0
            } else {
                q[next * N_ACTIONS..(next + 1) * N_ACTIONS]
                    .iter()
                    .fold(f64::NEG_INFINITY, |m, v| m.max(*v))
            };
            p * (r + gamma * future)
        })
        .sum()
}

/// Q-value iteration until the sup-norm Bellman residual is at most `tol`.
pub fn gridworld_value_iteration(env: &GridworldEnv, gamma: f64, tol: f64) -> Result<QTable, EnvError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(EnvError::InvalidParam(format!("gamma {gamma} not in [0, 1)")));
    }
    if !(tol > 0.0) {
        return Err(EnvError::InvalidParam(format!("tolerance {tol} must be positive")));
    }
    let n = env.n_states();
    let mut q = vec![0.0; n * N_ACTIONS];
    let mut next = q.clone();
    loop {
        let mut residual: f64 = 0.0;
        for s in env.non_goal_cells() {
            for a in 0..N_ACTIONS {
                let v = bellman_backup(env, &q, gamma, s, a);
                residual = residual.max((v - q[s * N_ACTIONS + a]).abs());
                next[s * N_ACTIONS + a] = v;
            }
        }
        std::mem::swap(&mut q, &mut next);
        if residual <= tol {
            // Residual of the returned table, not of its predecessor.
            let mut final_res: f64 = 0.0;
            for s in env.non_goal_cells() {
                for a in 0..N_ACTIONS {
                    final_res = final_res.max((bellman_backup(env, &q, gamma, s, a) - q[s * N_ACTIONS + a]).abs());
                }
            }
            return Ok(QTable {
                n_states: n,
                n_actions: N_ACTIONS,
                values: q,
                residual: final_res,
            });
        }
    }
}
