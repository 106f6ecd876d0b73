//! Cart-pole balancing with Euler integration and a coarse rasteriser.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvError, Environment, FrameStack, Step};

/// Physical constants and episode limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPoleParams {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Half the pole length.
    pub half_length: f64,
    pub force: f64,
    pub dt: f64,
    pub x_limit: f64,
    pub angle_limit: f64,
    pub max_steps: usize,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            force: 10.0,
            dt: 0.02,
            x_limit: 2.4,
            angle_limit: 12.0 * std::f64::consts::PI / 180.0,
            max_steps: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub steps: usize,
    pub done: bool,
}

impl CartPoleState {
    pub fn upright(x: f64, x_dot: f64, theta: f64, theta_dot: f64) -> Self {
        Self {
            x,
            x_dot,
            theta,
            theta_dot,
            steps: 0,
            done: false,
        }
    }

    pub fn vector(&self) -> Vec<f64> {
        vec![self.x, self.x_dot, self.theta, self.theta_dot]
    }
}

fn random_start<R: Rng>(rng: &mut R) -> CartPoleState {
    let mut draw = || rng.random_range(-0.05..=0.05);
    CartPoleState::upright(draw(), draw(), draw(), draw())
}

/// Initial state uniform in `[-0.05, 0.05]⁴`, bit-exact per seed.
pub fn cartpole_reset(seed: u64) -> CartPoleState {
    random_start(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// One Euler step. Action 0 pushes left, 1 pushes right. Reward is 1 on every
/// step, including the one that ends the episode.
pub fn cartpole_step(params: &CartPoleParams, state: &CartPoleState, action: usize) -> Result<(CartPoleState, f64, bool), EnvError> {
    if state.done {
        return Err(EnvError::SteppedTerminal);
    }
    if action > 1 {
        return Err(EnvError::BadAction { action, n_actions: 2 });
    }
    let p = params;
    let force = if action == 1 { p.force } else { -p.force };
    let total_mass = p.cart_mass + p.pole_mass;
    let pole_ml = p.pole_mass * p.half_length;
    let (sin, cos) = state.theta.sin_cos();
    let temp = (force + pole_ml * state.theta_dot * state.theta_dot * sin) / total_mass;
    let theta_acc = (p.gravity * sin - cos * temp)
        / (p.half_length * (4.0 / 3.0 - p.pole_mass * cos * cos / total_mass));
    let x_acc = temp - pole_ml * theta_acc * cos / total_mass;

    let mut next = CartPoleState {
        x: state.x + p.dt * state.x_dot,
        x_dot: state.x_dot + p.dt * x_acc,
        theta: state.theta + p.dt * state.theta_dot,
        theta_dot: state.theta_dot + p.dt * theta_acc,
        steps: state.steps + 1,
        done: false,
    };
    next.done = next.x.abs() > p.x_limit || next.theta.abs() > p.angle_limit || next.steps >= p.max_steps;
    Ok((next, 1.0, next.done))
}

const TRACK: f64 = 0.3;
const CART: f64 = 0.7;
const POLE: f64 = 1.0;

/// Grayscale `h x w` frame, row-major, values in `[0, 1]`.
///
/// Geometry is computed relative to the frame's vertical centre line so that
/// the state `(-x, -θ)` renders as the exact horizontal mirror of `(x, θ)`.
pub fn render_cartpole(params: &CartPoleParams, state: &CartPoleState, h: usize, w: usize) -> Result<Vec<f64>, EnvError> {
    if h < 8 || w < 8 {
        return Err(EnvError::InvalidParam(format!("frame {h}x{w} below the 8x8 minimum")));
    }
    let (hf, wf) = (h as f64, w as f64);
    let cart_half_w = (wf / 10.0).max(1.0);
    let cart_h = (hf / 8.0).max(1.0);
    let track_row = (hf * 0.8).floor();
    let scale = (wf / 2.0 - cart_half_w) / params.x_limit;
    let cart_offset = state.x * scale;
    let pivot_y = track_row - cart_h;
    let pole_len = hf * 0.45;
    let pole_half_thickness = 0.5;
    let (sin, cos) = state.theta.sin_cos();

    let mut frame = vec![0.0; h * w];
    for r in 0..h {
        let cy = r as f64 + 0.5;
        for c in 0..w {
            let dx = (c as f64 + 0.5 - wf / 2.0) - cart_offset;
            let mut v: f64 = 0.0;
            if r as f64 == track_row {
                v = TRACK;
            }
            // Edges are shaded by approximate pixel coverage so sub-pixel motion shows up.
            if cy >= pivot_y && cy <= track_row {
                let cover = (cart_half_w + 0.5 - dx.abs()).clamp(0.0, 1.0);
                v = v.max(CART * cover);
            }
            // Pole: segment from the pivot along (sin θ, cos θ), y measured upward.
            let dy = pivot_y - cy;
            let along = dx * sin + dy * cos;
            let across = (dx * cos - dy * sin).abs();
            let cover_across = (pole_half_thickness + 0.5 - across).clamp(0.0, 1.0);
            let cover_along = (along + 0.5).min(pole_len + 0.5 - along).clamp(0.0, 1.0);
            v = v.max(POLE * cover_across * cover_along);
            frame[r * w + c] = v.clamp(0.0, 1.0);
        }
    }
    Ok(frame)
}

/// State-vector cart-pole environment.
#[derive(Debug, Clone)]
pub struct CartPoleEnv {
    params: CartPoleParams,
    state: CartPoleState,
    rng: ChaCha8Rng,
}

impl CartPoleEnv {
    pub fn new(params: CartPoleParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = random_start(&mut rng);
        Self { params, state, rng }
    }

    pub fn params(&self) -> &CartPoleParams {
        &self.params
    }

    pub fn state(&self) -> &CartPoleState {
        &self.state
    }

    /// Fixed probe states spread over the non-terminal region.
    pub fn probe_states(&self) -> Vec<CartPoleState> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_cafe);
        (0..32)
            .map(|_| {
                CartPoleState::upright(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.15..0.15),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect()
    }
}

impl Default for CartPoleEnv {
    fn default() -> Self {
        Self::new(CartPoleParams::default())
    }
}

impl Environment for CartPoleEnv {
    fn n_actions(&self) -> usize {
        2
    }

    fn obs_dim(&self) -> usize {
        4
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn reset(&mut self) -> Vec<f64> {
        self.state = random_start(&mut self.rng);
        self.state.vector()
    }

    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        let (next, reward, done) = cartpole_step(&self.params, &self.state, action)?;
        let failed = next.x.abs() > self.params.x_limit || next.theta.abs() > self.params.angle_limit;
        self.state = next;
        Ok(Step {
            obs: next.vector(),
            reward,
            done,
            truncated: done && !failed,
        })
    }

    fn probe_observations(&self) -> Vec<Vec<f64>> {
        self.probe_states().iter().map(CartPoleState::vector).collect()
    }

    fn name(&self) -> &'static str {
        "cartpole"
    }
}

/// Cart-pole observed through a stack of rendered frames.
#[derive(Debug, Clone)]
pub struct ImageCartPoleEnv {
    inner: CartPoleEnv,
    height: usize,
    width: usize,
    stack: FrameStack,
    depth: usize,
}

impl ImageCartPoleEnv {
    pub fn new(params: CartPoleParams, height: usize, width: usize, depth: usize) -> Result<Self, EnvError> {
        if height < 8 || width < 8 {
            return Err(EnvError::InvalidParam(format!("frame {height}x{width} below the 8x8 minimum")));
        }
        if depth == 0 {
            return Err(EnvError::InvalidParam("frame stack depth must be positive".into()));
        }
        Ok(Self {
            inner: CartPoleEnv::new(params),
            height,
            width,
            stack: FrameStack::new(depth),
            depth,
        })
    }

    fn frame(&self, state: &CartPoleState) -> Vec<f64> {
        render_cartpole(&self.inner.params, state, self.height, self.width).expect("dimensions validated")
    }
}

impl Environment for ImageCartPoleEnv {
    fn n_actions(&self) -> usize {
        2
    }

    fn obs_dim(&self) -> usize {
        self.depth * self.height * self.width
    }

    fn reseed(&mut self, seed: u64) {
        self.inner.reseed(seed);
    }

    fn reset(&mut self) -> Vec<f64> {
        self.inner.reset();
        self.stack.clear();
        self.stack.push(self.frame(&self.inner.state));
        self.stack.observation().expect("stack holds a frame")
    }

    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        let mut step = self.inner.step(action)?;
        self.stack.push(self.frame(&self.inner.state));
        step.obs = self.stack.observation()?;
        Ok(step)
    }

    /// Probe states rendered as static stacks.
    fn probe_observations(&self) -> Vec<Vec<f64>> {
        self.inner
            .probe_states()
            .iter()
            .map(|s| {
                let f = self.frame(s);
                super::preprocess(&[f], self.depth).expect("non-empty")
            })
            .collect()
    }

    fn name(&self) -> &'static str {
        "cartpole-image"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_alternating(params: &CartPoleParams, start: CartPoleState, n: usize) -> Vec<CartPoleState> {
        let mut s = start;
        let mut out = vec![s];
        for k in 0..n {
            if s.done {
                break;
            }
            s = cartpole_step(params, &s, k % 2).unwrap().0;
            out.push(s);
        }
        out
    }

    /// Same equations of motion written as a 2x2 linear system solved by Cramer's rule:
    ///   (M + m) ẍ + m l cos θ θ̈ = F + m l θ̇² sin θ
    ///   cos θ ẍ + (4/3) l θ̈      = g sin θ
    fn reference_accels(p: &CartPoleParams, s: &CartPoleState, force: f64) -> (f64, f64) {
        let (m, big_m, l, g) = (p.pole_mass, p.cart_mass, p.half_length, p.gravity);
        let (sin, cos) = (s.theta.sin(), s.theta.cos());
        let a11 = big_m + m;
        let a12 = m * l * cos;
        let a21 = cos;
        let a22 = 4.0 / 3.0 * l;
        let b1 = force + m * l * s.theta_dot * s.theta_dot * sin;
        let b2 = g * sin;
        let det = a11 * a22 - a12 * a21;
        ((b1 * a22 - a12 * b2) / det, (a11 * b2 - a21 * b1) / det)
    }

    #[test]
    fn matches_independent_integrator() {
        let p = CartPoleParams::default();
        let start = CartPoleState::upright(0.0, 0.0, 0.0, 0.0);
        let traj = run_alternating(&p, start, 40);
        assert!(traj.len() > 11, "alternating policy should survive more than 10 steps");
        let mut s = start;
        for (k, expected) in traj.iter().enumerate().skip(1) {
            let force = if (k - 1) % 2 == 1 { p.force } else { -p.force };
            let (xa, ta) = reference_accels(&p, &s, force);
            s = CartPoleState {
                x: s.x + p.dt * s.x_dot,
                x_dot: s.x_dot + p.dt * xa,
                theta: s.theta + p.dt * s.theta_dot,
                theta_dot: s.theta_dot + p.dt * ta,
                steps: s.steps + 1,
                done: false,
            };
            for (a, b) in s.vector().iter().zip(expected.vector()) {
                assert!((a - b).abs() < 1e-10, "step {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn termination_rules() {
        let p = CartPoleParams::default();
        let tilted = CartPoleState::upright(0.0, 0.0, 12.5_f64.to_radians(), 0.5_f64.to_radians() / p.dt);
        let (next, r, done) = cartpole_step(&p, &tilted, 1).unwrap();
        assert!(next.theta > 12.0_f64.to_radians());
        assert!(done && r == 1.0);

        let far = CartPoleState::upright(2.5 - 0.02 * 0.0, 0.0, 0.0, 0.0);
        let (_, _, done) = cartpole_step(&p, &far, 0).unwrap();
        assert!(done);

        let mut late = CartPoleState::upright(0.0, 0.0, 0.0, 0.0);
        late.steps = 199;
        let (next, _, done) = cartpole_step(&p, &late, 0).unwrap();
        assert!(done && next.steps == 200);
        assert_eq!(cartpole_step(&p, &next, 0), Err(EnvError::SteppedTerminal));
    }

    #[test]
    fn angle_above_twelve_degrees_terminates() {
        // θ lands at exactly 13° after the step.
        let p = CartPoleParams::default();
        let target = 13.0 * std::f64::consts::PI / 180.0;
        let s = CartPoleState::upright(0.0, 0.0, target - p.dt * 1.0, 1.0);
        let (next, _, done) = cartpole_step(&p, &s, 0).unwrap();
        assert!((next.theta - target).abs() < 1e-12);
        assert!(done);
    }

    #[test]
    fn reset_is_bit_exact_per_seed() {
        let a = cartpole_reset(99);
        let b = cartpole_reset(99);
        assert_eq!(a.vector().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.vector().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(a.vector().iter().all(|v| v.abs() <= 0.05));
        assert_ne!(cartpole_reset(1), cartpole_reset(2));
    }

    #[test]
    fn return_equals_episode_length_and_caps_at_200() {
        let mut env = CartPoleEnv::default();
        env.reseed(3);
        env.reset();
        let mut total = 0.0;
        let mut steps = 0;
        loop {
            // Push against the pole's lean.
            let a = usize::from(env.state().theta + 0.5 * env.state().theta_dot > 0.0);
            let s = env.step(a).unwrap();
            total += s.reward;
            steps += 1;
            if s.done {
                assert!(s.truncated);
                break;
            }
        }
        assert_eq!(total, steps as f64);
        assert_eq!(steps, 200);
    }

    #[test]
    fn render_properties() {
        let p = CartPoleParams::default();
        let (h, w) = (16, 16);
        let centre = render_cartpole(&p, &CartPoleState::upright(0.0, 0.0, 0.0, 0.0), h, w).unwrap();
        let moved = render_cartpole(&p, &CartPoleState::upright(1.0, 0.0, 0.0, 0.0), h, w).unwrap();
        assert_ne!(centre, moved);
        assert!(centre.iter().all(|v| (0.0..=1.0).contains(v)));

        // Centred cart: its pixels are symmetric around column w/2.
        let cart_row = (0..h).find(|&r| (0..w).any(|c| centre[r * w + c] == CART)).unwrap();
        let cols: Vec<usize> = (0..w).filter(|&c| centre[cart_row * w + c] == CART).collect();
        let mid = (cols[0] + cols[cols.len() - 1] + 1) as f64 / 2.0;
        assert_eq!(mid, w as f64 / 2.0);

        for &(x, th) in &[(0.7, 0.1), (-1.3, -0.05), (2.0, 0.2)] {
            let a = render_cartpole(&p, &CartPoleState::upright(x, 0.0, th, 0.0), h, w).unwrap();
            let b = render_cartpole(&p, &CartPoleState::upright(-x, 0.0, -th, 0.0), h, w).unwrap();
            for r in 0..h {
                for c in 0..w {
                    assert_eq!(a[r * w + c], b[r * w + (w - 1 - c)]);
                }
            }
        }
        assert!(render_cartpole(&p, &CartPoleState::upright(0.0, 0.0, 0.0, 0.0), 4, 16).is_err());
    }

    #[test]
    fn image_env_shapes() {
        let mut env = ImageCartPoleEnv::new(CartPoleParams::default(), 16, 16, 4).unwrap();
        env.reseed(1);
        let obs = env.reset();
        assert_eq!(obs.len(), 4 * 256);
        assert_eq!(&obs[..256], &obs[768..]);
        let s = env.step(1).unwrap();
        assert_eq!(s.obs.len(), env.obs_dim());
        assert_eq!(env.probe_observations().len(), 32);
    }
}
