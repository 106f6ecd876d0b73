//! Episode loop for DQL, EDQL, G-coop and coop.
//!
//! Dual-network variants keep two independently initialised networks. Every
//! `toggle_period` plays the actor and target roles swap; only the actor is
//! updated, against TD targets bootstrapped from the other network.
//! Single-network variants update one network against a clone that is
//! refreshed every `toggle_period` plays.

mod config;
mod metrics;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::envs::{EnvError, Environment};
use crate::linalg::Matrix;
use crate::network::{
    self, build_feedback_matrix, compute_transform, forward, init_network, mlp_specs, predict, signed_lambda,
    NetworkError, NetworkParams, Preconditioner, TdError,
};
use crate::parallel;
use crate::replay::{ReplayBuffer, ReplayError, Transition};

pub use config::{ConfigError, LambdaMode, TrainerConfig, Variant};
pub use metrics::{window_stats, MetricsRecord, RollingStats};

/// Window for the rolling return statistics.
pub const STATS_WINDOW: usize = 100;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("non-finite TD value for batch sample {index}")]
    NonFiniteTd { index: usize },
    #[error("empty update batch")]
    EmptyBatch,
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// `r` when terminal, else `r + γ·max(next_q)`.
pub fn td_target(reward: f64, terminal: bool, next_q: &[f64], gamma: f64) -> f64 {
    if terminal {
        reward
    } else {
        reward + gamma * next_q.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in q.iter().enumerate().skip(1) {
        if *v > q[best] {
            best = i;
        }
    }
    best
}

/// ε-greedy choice. Always consumes exactly one uniform draw, plus one more
/// when exploring.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], eps: f64, rng: &mut R) -> usize {
    if rng.random::<f64>() < eps {
        rng.random_range(0..q.len())
    } else {
        argmax(q)
    }
}

/// Whether the first network is the actor on play `play` (zero-based).
pub fn first_is_actor(play: usize, period: usize) -> bool {
    (play / period).is_multiple_of(2)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent sub-seed for one random stream of a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

pub(crate) mod streams {
    pub const NET1: u64 = 1;
    pub const NET2: u64 = 2;
    pub const ENV: u64 = 3;
    pub const ACTION: u64 = 4;
    pub const REPLAY: u64 = 5;
    pub const PERTURB: u64 = 6;
}

/// Result of one minibatch update.
#[derive(Debug, Clone)]
pub struct UpdateReport {
    pub params: NetworkParams,
    /// Largest `|ε|` that entered a feedback computation (after clipping).
    pub max_abs_td: f64,
    /// λ actually applied per layer.
    pub lambdas: Vec<f64>,
}

struct SampleFeedback {
    feedback: Vec<Matrix>,
    /// Backpropagated δ, kept only when the signed-λ rule needs it.
    gradient: Option<Vec<Matrix>>,
    td: f64,
}

fn sample_feedback(
    actor: &NetworkParams,
    target: &NetworkParams,
    t: &Transition,
    index: usize,
    cfg: &TrainerConfig,
    s: f64,
) -> Result<SampleFeedback> {
    let trace = forward(actor, &t.obs)?;
    let next_q = predict(target, &t.next_obs)?;
    let y = td_target(t.reward, t.terminal, &next_q, cfg.gamma);
    if !y.is_finite() || trace.output().iter().any(|v| !v.is_finite()) {
        return Err(TrainError::NonFiniteTd { index });
    }
    let eps = TdError::from_target(trace.output(), t.action, y, Some(cfg.td_clip))?;
    let edl = cfg.variant.is_edl();
    let want_gradient = edl && cfg.lambda_mode == LambdaMode::Signed;
    let mut feedback = Vec::with_capacity(actor.depth());
    let mut gradient = want_gradient.then(|| Vec::with_capacity(actor.depth()));
    for layer in 0..actor.depth() {
        let transform = compute_transform(actor, &trace, layer)?;
        if let Some(g) = gradient.as_mut() {
            g.push(network::gradient_feedback(&trace, layer, &transform, &eps)?);
        }
        let fb = if edl && s != 0.0 {
            let (b, _) = build_feedback_matrix(&transform, s)?;
            network::edl_feedback(&trace, layer, &b, &eps)?
        } else {
            network::gradient_feedback(&trace, layer, &transform, &eps)?
        };
        feedback.push(fb);
    }
    Ok(SampleFeedback {
        feedback,
        gradient,
        td: eps.value(),
    })
}

fn batch_mean(per_sample: impl Iterator<Item = Vec<Matrix>>, n: usize) -> Result<Vec<Matrix>> {
    let mut acc: Option<Vec<Matrix>> = None;
    for fbs in per_sample {
        match acc.as_mut() {
            None => acc = Some(fbs),
            Some(sum) => {
                for (s, f) in sum.iter_mut().zip(&fbs) {
                    s.add_scaled_assign(f, 1.0).map_err(NetworkError::from)?;
                }
            }
        }
    }
    let inv = 1.0 / n as f64;
    acc.ok_or(TrainError::EmptyBatch)?
        .iter()
        .map(|m| Ok(m.scale(inv).map_err(NetworkError::from)?))
        .collect()
}

/// One minibatch update of `actor` against TD targets from `target`.
///
/// Each sample's TD error is masked to the taken action and clipped to
/// `±td_clip`. Error-driven variants replace each layer's transform with
/// `B = U(Σ + sI)Vᵀ`; `s == 0` takes the gradient path exactly. Per-layer
/// feedback is averaged over the batch before a single [`network::apply_update`].
pub fn coop_update_step(
    actor: &NetworkParams,
    target: &NetworkParams,
    batch: &[&Transition],
    cfg: &TrainerConfig,
    s: f64,
) -> Result<UpdateReport> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let indexed: Vec<(usize, &Transition)> = batch.iter().copied().enumerate().collect();
    let samples = parallel::map(&indexed, |(i, t)| sample_feedback(actor, target, t, *i, cfg, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let max_abs_td = samples.iter().fold(0.0_f64, |m, s| m.max(s.td.abs()));
    let n = samples.len();

    let mut lambdas = cfg.lambdas_for(actor.depth())?;
    let mut feedback_sum = Vec::with_capacity(n);
    let mut gradient_sum = Vec::with_capacity(n);
    for s in samples {
        feedback_sum.push(s.feedback);
        if let Some(g) = s.gradient {
            gradient_sum.push(g);
        }
    }
    let mut feedback = batch_mean(feedback_sum.into_iter(), n)?;

    if cfg.lambda_mode == LambdaMode::Signed {
        let gradient = if gradient_sum.is_empty() {
            feedback.clone()
        } else {
            batch_mean(gradient_sum.into_iter(), n)?
        };
        for (layer, lam) in lambdas.iter_mut().enumerate() {
            *lam = signed_lambda(&gradient[layer], actor.weights(layer), cfg.lambda_c)?;
        }
    }
    if cfg.variant.is_edl() && cfg.p_scale != 1.0 {
        let p = Preconditioner::uniform(actor, cfg.p_scale);
        feedback = feedback
            .into_iter()
            .enumerate()
            .map(|(layer, m)| p.apply(layer, m))
            .collect::<network::Result<Vec<_>>>()?;
    }
    let params = network::apply_update(actor, &feedback, cfg.alpha, &lambdas)?;
    Ok(UpdateReport {
        params,
        max_abs_td,
        lambdas,
    })
}

/// Networks and telemetry of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: Vec<MetricsRecord>,
    /// Dual variants: both networks. Single variants: online network, then its target clone.
    pub networks: Vec<NetworkParams>,
    /// Minibatch updates received by the first and second network.
    pub updates: [usize; 2],
    pub total_steps: usize,
    /// Largest clipped `|ε|` seen by any update.
    pub max_abs_td: f64,
}

fn probe_stats(a: &NetworkParams, b: &NetworkParams, probes: &[Vec<f64>]) -> Result<(f64, f64, f64)> {
    let mut sum_a = 0.0;
    let mut sum_b = 0.0;
    let mut diff_sq = 0.0;
    let mut count = 0usize;
    for x in probes {
        let qa = predict(a, x)?;
        let qb = predict(b, x)?;
        for (u, v) in qa.iter().zip(&qb) {
            sum_a += u;
            sum_b += v;
            diff_sq += (u - v) * (u - v);
            count += 1;
        }
    }
    let n = count.max(1) as f64;
    Ok((sum_a / n, sum_b / n, diff_sq.sqrt()))
}

pub fn run_training<E: Environment + ?Sized>(cfg: &TrainerConfig, env: &mut E) -> Result<RunOutcome> {
    run_training_with(cfg, env, |_| true)
}

/// [`run_training`] with an observer called after every episode; returning
/// `false` stops the run early.
pub fn run_training_with<E, F>(cfg: &TrainerConfig, env: &mut E, mut observer: F) -> Result<RunOutcome>
where
    E: Environment + ?Sized,
    F: FnMut(&MetricsRecord) -> bool,
{
    cfg.validate()?;
    let lambdas = cfg.layer_lambdas()?;
    debug_assert_eq!(lambdas.len(), cfg.depth());

    let specs = mlp_specs(env.obs_dim(), &cfg.hidden, env.n_actions(), cfg.activation);
    let first = init_network(&specs, derive_seed(cfg.seed, streams::NET1), cfg.bias)?;
    let second = if cfg.variant.is_dual() {
        init_network(&specs, derive_seed(cfg.seed, streams::NET2), cfg.bias)?
    } else {
        first.clone()
    };
    let mut nets = [first, second];

    env.reseed(derive_seed(cfg.seed, streams::ENV));
    let mut action_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::ACTION));
    let mut replay_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::REPLAY));
    let mut perturb_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::PERTURB));
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let probes = env.probe_observations();

    let mut eps = cfg.eps_init;
    let mut s_scale = if cfg.variant.is_edl() { cfg.s_scale } else { 0.0 };
    let mut stats = RollingStats::new(STATS_WINDOW);
    let mut metrics = Vec::with_capacity(cfg.episodes);
    let mut updates = [0usize; 2];
    let mut plays = 0usize;
    let mut max_abs_td: f64 = 0.0;

    'episodes: for episode in 1..=cfg.episodes {
        let started = Instant::now();
        let mut obs = env.reset();
        let mut episode_return = 0.0;
        let mut budget_hit = false;
        for k in 0..cfg.max_steps {
            let actor = if cfg.variant.is_dual() && !first_is_actor(plays, cfg.toggle_period) {
                1
            } else {
                0
            };
            let q = predict(&nets[actor], &obs)?;
            let action = select_action(&q, eps, &mut action_rng);
            let step = env.step(action)?;
            episode_return += step.reward;
            let last = step.done || k + 1 == cfg.max_steps;
            buffer.push(Transition {
                obs: std::mem::take(&mut obs),
                action,
                reward: step.reward,
                next_obs: step.obs.clone(),
                terminal: step.bootstrap_terminal(),
            });
            obs = step.obs;

            if buffer.len() >= cfg.batch_size {
                let s = if cfg.variant.is_edl() && s_scale > 0.0 {
                    let g: f64 = StandardNormal.sample(&mut perturb_rng);
                    if cfg.signed_s {
                        s_scale * g
                    } else {
                        s_scale * g.abs()
                    }
                } else {
                    0.0
                };
                let batch = buffer.sample(cfg.batch_size, &mut replay_rng)?;
                let target = if cfg.variant.is_dual() { &nets[1 - actor] } else { &nets[1] };
                let report = coop_update_step(&nets[actor], target, &batch, cfg, s)?;
                max_abs_td = max_abs_td.max(report.max_abs_td);
                nets[actor] = report.params;
                updates[actor] += 1;
            }

            plays += 1;
            if !cfg.variant.is_dual() && plays.is_multiple_of(cfg.toggle_period) {
                nets[1] = nets[0].clone();
            }
            if cfg.step_budget > 0 && plays >= cfg.step_budget {
                budget_hit = true;
            }
            if last || budget_hit {
                break;
            }
        }

        let (mean100, std100) = stats.push(episode_return);
        let (q1_mean, q2_mean, qdiff) = probe_stats(&nets[0], &nets[1], &probes)?;
        let record = MetricsRecord {
            episode,
            variant: cfg.variant,
            seed: cfg.seed,
            episode_return,
            mean100,
            std100,
            q1_mean,
            q2_mean,
            qdiff,
            eps,
            s_scale,
            buffer_fill: buffer.len(),
            ms: started.elapsed().as_secs_f64() * 1e3,
        };
        let keep_going = observer(&record);
        metrics.push(record);
        eps = (eps * cfg.eps_decay).max(cfg.eps_min);
        s_scale *= cfg.s_decay;
        if !keep_going || budget_hit {
            break 'episodes;
        }
    }

    Ok(RunOutcome {
        metrics,
        networks: nets.to_vec(),
        updates,
        total_steps: plays,
        max_abs_td,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{gridworld_new, gridworld_value_iteration, GridworldEnv};
    use crate::network::ActivationKind;

    fn grid_cfg(variant: Variant) -> TrainerConfig {
        TrainerConfig {
            variant,
            gamma: 0.9,
            alpha: 0.5,
            lambdas: vec![0.0],
            s_scale: 0.05,
            eps_init: 1.0,
            eps_min: 0.1,
            eps_decay: 0.98,
            toggle_period: 10,
            buffer_capacity: 500,
            batch_size: 8,
            episodes: 20,
            max_steps: 30,
            hidden: vec![],
            activation: ActivationKind::Identity,
            ..Default::default()
        }
    }

    fn grid() -> GridworldEnv {
        gridworld_new(3, 3, 8, 0.0, 1.0, 0.0).unwrap()
    }

    #[test]
    fn td_target_cases() {
        assert_eq!(td_target(1.0, true, &[5.0, 7.0], 0.9), 1.0);
        assert!((td_target(0.0, false, &[10.0, 3.0], 0.9) - 9.0).abs() < 1e-15);
    }

    #[test]
    fn td_target_is_consistent_with_value_iteration() {
        let env = gridworld_new(4, 4, 15, -0.02, 1.0, 0.0).unwrap();
        let gamma = 0.95;
        let q = gridworld_value_iteration(&env, gamma, 1e-12).unwrap();
        for s in env.non_goal_cells() {
            for a in 0..4 {
                let next = env.move_from(s, a);
                let terminal = next == env.goal();
                let r = if terminal { 1.0 } else { -0.02 };
                let y = td_target(r, terminal, q.row(next), gamma);
                assert!((y - q.get(s, a)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn greedy_selection_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_action(&[1.0, 5.0, 2.0], 0.0, &mut rng), 1);
        assert_eq!(select_action(&[3.0, 3.0], 0.0, &mut rng), 0);
    }

    #[test]
    fn exploration_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[select_action(&[0.0, 1.0, 2.0, 3.0], 1.0, &mut rng)] += 1;
        }
        let mean = draws as f64 * 0.25;
        let sd = (draws as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn toggle_semantics() {
        assert_eq!((0..2).map(|p| first_is_actor(p, 1)).collect::<Vec<_>>(), vec![true, false]);
        assert_eq!(
            (0..6).map(|p| first_is_actor(p, 2)).collect::<Vec<_>>(),
            vec![true, true, false, false, true, true]
        );
    }

    #[test]
    fn zero_td_leaves_actor_unchanged() {
        let specs = mlp_specs(9, &[], 4, ActivationKind::Identity);
        let net = init_network(&specs, 3, true).unwrap();
        let env = grid();
        let obs = env.one_hot(0);
        let next = env.one_hot(1);
        let q = predict(&net, &obs).unwrap();
        let next_q = predict(&net, &next).unwrap();
        let gamma = 0.9;
        // Reward chosen so the target equals the current estimate.
        let reward = q[2] - gamma * next_q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let t = Transition {
            obs,
            action: 2,
            reward,
            next_obs: next,
            terminal: false,
        };
        let cfg = TrainerConfig {
            gamma,
            lambdas: vec![0.0],
            ..grid_cfg(Variant::Coop)
        };
        let report = coop_update_step(&net, &net, &[&t], &cfg, 0.3).unwrap();
        assert!(report.max_abs_td < 1e-12);
        assert!(report.params.distance(&net) < 1e-12);
    }

    #[test]
    fn coop_without_perturbation_equals_gcoop_step() {
        let specs = mlp_specs(9, &[5], 4, ActivationKind::Tanh);
        let a = init_network(&specs, 1, true).unwrap();
        let b = init_network(&specs, 2, true).unwrap();
        let env = grid();
        let batch: Vec<Transition> = (0..6)
            .map(|i| Transition {
                obs: env.one_hot(i),
                action: i % 4,
                reward: if i == 5 { 1.0 } else { 0.0 },
                next_obs: env.one_hot(i + 1),
                terminal: i == 5,
            })
            .collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let coop = coop_update_step(&a, &b, &refs, &TrainerConfig { s_scale: 0.0, ..grid_cfg(Variant::Coop) }, 0.0).unwrap();
        let gcoop = coop_update_step(&a, &b, &refs, &grid_cfg(Variant::GCoop), 0.0).unwrap();
        assert_eq!(coop.params, gcoop.params);
        let perturbed = coop_update_step(&a, &b, &refs, &grid_cfg(Variant::Coop), 0.2).unwrap();
        assert_ne!(perturbed.params, gcoop.params);
    }

    #[test]
    fn single_transition_step_on_one_hot_linear_net() {
        // Linear one-hot net without bias: Q(s, a) = W[s, a]. The TD step moves
        // exactly the taken entry by α·(y − W[s, a]).
        let specs = mlp_specs(9, &[], 4, ActivationKind::Identity);
        let net = init_network(&specs, 8, false).unwrap();
        let target = init_network(&specs, 9, false).unwrap();
        let env = grid();
        let t = Transition {
            obs: env.one_hot(3),
            action: 1,
            reward: 0.25,
            next_obs: env.one_hot(4),
            terminal: false,
        };
        let cfg = TrainerConfig {
            bias: false,
            alpha: 0.3,
            td_clip: 100.0,
            ..grid_cfg(Variant::GCoop)
        };
        let report = coop_update_step(&net, &target, &[&t], &cfg, 0.0).unwrap();
        let next_max = (0..4).map(|a| target.weights(0).get(4, a)).fold(f64::NEG_INFINITY, f64::max);
        let y = 0.25 + cfg.gamma * next_max;
        let w = net.weights(0).get(3, 1);
        let expected = w + 0.3 * (y - w);
        let got = report.params.weights(0);
        assert!((got.get(3, 1) - expected).abs() < 1e-15);
        for r in 0..9 {
            for c in 0..4 {
                if (r, c) != (3, 1) {
                    assert_eq!(got.get(r, c), net.weights(0).get(r, c));
                }
            }
        }
    }

    #[test]
    fn zero_episodes_yield_no_metrics() {
        let mut env = grid();
        let out = run_training(&TrainerConfig { episodes: 0, ..grid_cfg(Variant::Coop) }, &mut env).unwrap();
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn runs_are_deterministic_per_seed() {
        let strip = |m: &[MetricsRecord]| -> Vec<MetricsRecord> {
            m.iter().map(|r| MetricsRecord { ms: 0.0, ..r.clone() }).collect()
        };
        for variant in [Variant::Dql, Variant::Edql, Variant::GCoop, Variant::Coop] {
            let cfg = grid_cfg(variant);
            let a = run_training(&cfg, &mut grid()).unwrap();
            let b = run_training(&cfg, &mut grid()).unwrap();
            assert_eq!(strip(&a.metrics), strip(&b.metrics));
            assert_eq!(a.networks, b.networks);
        }
    }

    #[test]
    fn dual_roles_split_updates_evenly() {
        let cfg = TrainerConfig {
            batch_size: 1,
            toggle_period: 7,
            step_budget: 7 * 40,
            episodes: 10_000,
            ..grid_cfg(Variant::Coop)
        };
        let out = run_training(&cfg, &mut grid()).unwrap();
        assert_eq!(out.total_steps, 280);
        assert_eq!(out.updates, [140, 140]);
    }

    #[test]
    fn td_values_never_exceed_clip() {
        let cfg = TrainerConfig {
            td_clip: 0.05,
            alpha: 0.9,
            ..grid_cfg(Variant::Coop)
        };
        let out = run_training(&cfg, &mut grid()).unwrap();
        assert!(out.max_abs_td <= 0.05);
        assert!(out.max_abs_td > 0.0);
    }
}
