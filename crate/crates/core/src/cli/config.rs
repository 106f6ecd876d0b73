//! `key = value` run configuration files.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::str::FromStr;

use crate::envs::{gridworld_new, CartPoleEnv, CartPoleParams, Environment, GridworldEnv, ImageCartPoleEnv, ObsMode};
use crate::network::ActivationKind;
use crate::trainer::{ConfigError, LambdaMode, TrainerConfig, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Gridworld,
    CartPole,
}

impl FromStr for EnvKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gridworld" => Ok(Self::Gridworld),
            "cartpole" => Ok(Self::CartPole),
            other => Err(format!("unknown env `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridParams {
    pub width: usize,
    pub height: usize,
    /// Defaults to the last cell.
    pub goal: Option<usize>,
    pub step_reward: f64,
    pub goal_reward: f64,
    pub slip_prob: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            width: 4,
            height: 4,
            goal: None,
            step_reward: 0.0,
            goal_reward: 1.0,
            slip_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvKind,
    pub trainer: TrainerConfig,
    pub image_h: usize,
    pub image_w: usize,
    pub image_m: usize,
    pub grid: GridParams,
    /// Stop once the rolling mean return reaches this value.
    pub target_mean100: Option<f64>,
    pub out: Option<PathBuf>,
}

pub const REQUIRED_KEYS: [&str; 3] = ["env", "variant", "episodes"];

pub const KNOWN_KEYS: [&str; 37] = [
    "env",
    "variant",
    "gamma",
    "alpha",
    "lambdas",
    "lambda_mode",
    "lambda_c",
    "s_scale",
    "s_decay",
    "signed_s",
    "p_scale",
    "eps_init",
    "eps_min",
    "eps_decay",
    "toggle_period",
    "buffer_capacity",
    "batch_size",
    "episodes",
    "max_steps",
    "step_budget",
    "seed",
    "td_clip",
    "hidden",
    "activation",
    "bias",
    "obs_mode",
    "image_h",
    "image_w",
    "image_m",
    "grid_width",
    "grid_height",
    "grid_goal",
    "step_reward",
    "goal_reward",
    "slip_prob",
    "target_mean100",
    "out",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| ConfigError::new(key, format!("cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse(key, v))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::new(key, format!("expected true/false, got `{value}`"))),
    }
}

fn parse_with<T>(key: &str, value: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<T, ConfigError> {
    f(value).map_err(|e| ConfigError::new(key, e))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig {
            env: EnvKind::Gridworld,
            trainer: TrainerConfig::default(),
            image_h: 16,
            image_w: 16,
            image_m: 4,
            grid: GridParams::default(),
            target_mean100: None,
            out: None,
        };
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::new(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, got `{line}`"),
                ));
            };
            let key = key.trim();
            let value = value.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(ConfigError::new(key, "unknown key"));
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::new(key, "given more than once"));
            }
            cfg.set(key, value)?;
        }
        for key in REQUIRED_KEYS {
            if !seen.contains(key) {
                return Err(ConfigError::new(key, "required key missing"));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let t = &mut self.trainer;
        match key {
            "env" => self.env = parse_with(key, value, EnvKind::from_str)?,
            "variant" => t.variant = parse_with(key, value, Variant::from_str)?,
            "gamma" => t.gamma = parse(key, value)?,
            "alpha" => t.alpha = parse(key, value)?,
            "lambdas" => t.lambdas = parse_list(key, value)?,
            "lambda_mode" => t.lambda_mode = parse_with(key, value, LambdaMode::from_str)?,
            "lambda_c" => t.lambda_c = parse(key, value)?,
            "s_scale" => t.s_scale = parse(key, value)?,
            "s_decay" => t.s_decay = parse(key, value)?,
            "signed_s" => t.signed_s = parse_bool(key, value)?,
            "p_scale" => t.p_scale = parse(key, value)?,
            "eps_init" => t.eps_init = parse(key, value)?,
            "eps_min" => t.eps_min = parse(key, value)?,
            "eps_decay" => t.eps_decay = parse(key, value)?,
            "toggle_period" => t.toggle_period = parse(key, value)?,
            "buffer_capacity" => t.buffer_capacity = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "episodes" => t.episodes = parse(key, value)?,
            "max_steps" => t.max_steps = parse(key, value)?,
            "step_budget" => t.step_budget = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "td_clip" => t.td_clip = parse(key, value)?,
            "hidden" => t.hidden = parse_list(key, value)?,
            "activation" => t.activation = parse_with(key, value, ActivationKind::from_str)?,
            "bias" => t.bias = parse_bool(key, value)?,
            "obs_mode" => {
                t.obs_mode = match value {
                    "state" => ObsMode::StateVector,
                    "image" => ObsMode::ImageStack,
                    other => return Err(ConfigError::new(key, format!("expected state or image, got `{other}`"))),
                }
            }
            "image_h" => self.image_h = parse(key, value)?,
            "image_w" => self.image_w = parse(key, value)?,
            "image_m" => self.image_m = parse(key, value)?,
            "grid_width" => self.grid.width = parse(key, value)?,
            "grid_height" => self.grid.height = parse(key, value)?,
            "grid_goal" => self.grid.goal = Some(parse(key, value)?),
            "step_reward" => self.grid.step_reward = parse(key, value)?,
            "goal_reward" => self.grid.goal_reward = parse(key, value)?,
            "slip_prob" => self.grid.slip_prob = parse(key, value)?,
            "target_mean100" => self.target_mean100 = Some(parse(key, value)?),
            "out" => self.out = Some(PathBuf::from(value)),
            _ => return Err(ConfigError::new(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.trainer.validate()?;
        if self.trainer.obs_mode == ObsMode::ImageStack {
            if self.env != EnvKind::CartPole {
                return Err(ConfigError::new("obs_mode", "image observations exist for cartpole only"));
            }
            if self.image_h < 8 {
                return Err(ConfigError::new("image_h", "must be >= 8"));
            }
            if self.image_w < 8 {
                return Err(ConfigError::new("image_w", "must be >= 8"));
            }
            if self.image_m < 1 {
                return Err(ConfigError::new("image_m", "must be >= 1"));
            }
        }
        if self.env == EnvKind::Gridworld {
            self.gridworld().map_err(|e| ConfigError::new("grid_width", e.to_string()))?;
        }
        self.trainer.layer_lambdas()?;
        Ok(())
    }

    fn gridworld(&self) -> Result<GridworldEnv, crate::envs::EnvError> {
        let g = &self.grid;
        let goal = g.goal.unwrap_or((g.width * g.height).saturating_sub(1));
        gridworld_new(g.width, g.height, goal, g.step_reward, g.goal_reward, g.slip_prob)
    }

    pub fn build_env(&self) -> Result<Box<dyn Environment + Send>, crate::envs::EnvError> {
        let params = CartPoleParams {
            max_steps: self.trainer.max_steps,
            ..CartPoleParams::default()
        };
        Ok(match (self.env, self.trainer.obs_mode) {
            (EnvKind::Gridworld, _) => Box::new(self.gridworld()?),
            (EnvKind::CartPole, ObsMode::StateVector) => Box::new(CartPoleEnv::new(params)),
            (EnvKind::CartPole, ObsMode::ImageStack) => {
                Box::new(ImageCartPoleEnv::new(params, self.image_h, self.image_w, self.image_m)?)
            }
        })
    }
}
