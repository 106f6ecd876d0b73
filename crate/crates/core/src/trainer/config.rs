use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::envs::ObsMode;
use crate::network::ActivationKind;

/// The four training algorithms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Single network, periodic clone target, gradient updates.
    Dql,
    /// Single network, periodic clone target, error-driven updates.
    Edql,
    /// Two networks alternating roles, gradient updates.
    GCoop,
    /// Two networks alternating roles, error-driven updates.
    Coop,
}

impl Variant {
    pub fn is_dual(self) -> bool {
        matches!(self, Self::GCoop | Self::Coop)
    }

    pub fn is_edl(self) -> bool {
        matches!(self, Self::Edql | Self::Coop)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dql => "dql",
            Self::Edql => "edql",
            Self::GCoop => "gcoop",
            Self::Coop => "coop",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dql" => Ok(Self::Dql),
            "edql" => Ok(Self::Edql),
            "gcoop" | "g-coop" => Ok(Self::GCoop),
            "coop" => Ok(Self::Coop),
            other => Err(format!("unknown variant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaMode {
    /// Fixed per-layer decay coefficients.
    Constant,
    /// `λ⁽ⁱ⁾ = sign(⟨∂J_E/∂W, W⟩)·c`, recomputed every update.
    Signed,
}

impl FromStr for LambdaMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(Self::Constant),
            "signed" => Ok(Self::Signed),
            other => Err(format!("unknown lambda_mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("config key `{key}`: {reason}")]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub variant: Variant,
    pub gamma: f64,
    pub alpha: f64,
    /// One entry per layer, or a single entry broadcast to every layer.
    pub lambdas: Vec<f64>,
    pub lambda_mode: LambdaMode,
    /// Magnitude `c` for [`LambdaMode::Signed`].
    pub lambda_c: f64,
    pub s_scale: f64,
    pub s_decay: f64,
    /// Draw `s = s_scale·g` instead of `s_scale·|g|`.
    pub signed_s: bool,
    /// Uniform diagonal of `P`, in `(0, 1]`.
    pub p_scale: f64,
    pub eps_init: f64,
    pub eps_min: f64,
    pub eps_decay: f64,
    /// Plays between role swaps (dual) or target refreshes (single).
    pub toggle_period: usize,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub episodes: usize,
    pub max_steps: usize,
    /// Stop after this many environment steps in total; 0 means no limit.
    pub step_budget: usize,
    pub seed: u64,
    pub td_clip: f64,
    pub hidden: Vec<usize>,
    pub activation: ActivationKind,
    pub bias: bool,
    pub obs_mode: ObsMode,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Coop,
            gamma: 0.99,
            alpha: 0.01,
            lambdas: vec![1e-4],
            lambda_mode: LambdaMode::Constant,
            lambda_c: 1e-4,
            s_scale: 0.05,
            s_decay: 0.999,
            signed_s: false,
            p_scale: 1.0,
            eps_init: 1.0,
            eps_min: 0.01,
            eps_decay: 0.99,
            toggle_period: 50,
            buffer_capacity: 5000,
            batch_size: 32,
            episodes: 1000,
            max_steps: 200,
            step_budget: 0,
            seed: 0,
            td_clip: 1.0,
            hidden: vec![64],
            activation: ActivationKind::Relu,
            bias: true,
            obs_mode: ObsMode::StateVector,
        }
    }
}

fn check(ok: bool, key: &str, reason: impl Into<String>) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::new(key, reason))
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check(self.gamma > 0.0 && self.gamma < 1.0, "gamma", format!("{} not in (0, 1)", self.gamma))?;
        check(self.alpha > 0.0 && self.alpha.is_finite(), "alpha", format!("{} must be > 0", self.alpha))?;
        check(!self.lambdas.is_empty(), "lambdas", "at least one value required")?;
        check(
            self.lambdas.iter().all(|l| *l >= 0.0 && l.is_finite()),
            "lambdas",
            "values must be >= 0",
        )?;
        check((0.0..=1.0).contains(&self.lambda_c), "lambda_c", format!("{} not in [0, 1]", self.lambda_c))?;
        check(self.s_scale >= 0.0 && self.s_scale.is_finite(), "s_scale", format!("{} must be >= 0", self.s_scale))?;
        check(self.s_decay > 0.0 && self.s_decay <= 1.0, "s_decay", format!("{} not in (0, 1]", self.s_decay))?;
        check(self.p_scale > 0.0 && self.p_scale <= 1.0, "p_scale", format!("{} not in (0, 1]", self.p_scale))?;
        check((0.0..=1.0).contains(&self.eps_init), "eps_init", format!("{} not in [0, 1]", self.eps_init))?;
        check(
            (0.0..=1.0).contains(&self.eps_min) && self.eps_min <= self.eps_init,
            "eps_min",
            format!("{} not in [0, eps_init]", self.eps_min),
        )?;
        check(self.eps_decay > 0.0 && self.eps_decay <= 1.0, "eps_decay", format!("{} not in (0, 1]", self.eps_decay))?;
        check(self.toggle_period >= 1, "toggle_period", "must be >= 1")?;
        check(self.buffer_capacity >= 1, "buffer_capacity", "must be >= 1")?;
        check(self.batch_size >= 1, "batch_size", "must be >= 1")?;
        check(self.max_steps >= 1, "max_steps", "must be >= 1")?;
        check(self.td_clip > 0.0, "td_clip", format!("{} must be > 0", self.td_clip))?;
        check(self.hidden.iter().all(|h| *h > 0), "hidden", "layer sizes must be positive")?;
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }

    /// Per-layer λ for the configured architecture, broadcasting a single value.
    pub fn layer_lambdas(&self) -> Result<Vec<f64>, ConfigError> {
        self.lambdas_for(self.depth())
    }

    pub fn lambdas_for(&self, depth: usize) -> Result<Vec<f64>, ConfigError> {
        match self.lambdas.len() {
            1 => Ok(vec![self.lambdas[0]; depth]),
            n if n == depth => Ok(self.lambdas.clone()),
            n => Err(ConfigError::new("lambdas", format!("{n} values for a {depth}-layer network"))),
        }
    }
}
