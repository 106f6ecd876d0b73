//! Numerical checks of the cost decomposition, the cost-gap bound and the
//! descent conditions of the error-driven update, on random networks.
//!
//! All quantities refer to a single sample: input `x`, taken action `a` and a
//! fixed scalar target `y`, so `ε = y − ŷ_a` and `J_E = ½ε²`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{frobenius_norm, vec_norm, Matrix};
use crate::network::{
    self, build_feedback_matrix, compute_transform, forward, init_network, regularized_empirical_cost,
    regularizer, signed_lambda, ActivationKind, LayerSpec, NetworkError, NetworkParams, Preconditioner, TdError,
};
use crate::parallel;
use crate::trainer::derive_seed;

pub type Result<T> = std::result::Result<T, NetworkError>;

/// One supervised sample with a fixed target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub action: usize,
    pub target: f64,
}

impl Sample {
    pub fn td_error(&self, net: &NetworkParams) -> Result<TdError> {
        let out = network::predict(net, &self.x)?;
        TdError::from_target(&out, self.action, self.target, None)
    }

    /// `J_E = ½ε²`.
    pub fn cost(&self, net: &NetworkParams) -> Result<f64> {
        let e = self.td_error(net)?.value();
        Ok(0.5 * e * e)
    }
}

/// Per-layer δ (`= −∂J_E/∂W`) together with the forward trace and TD error.
struct Backprop {
    trace: network::ForwardTrace,
    eps: TdError,
    transforms: Vec<Matrix>,
    deltas: Vec<Matrix>,
}

fn backprop(net: &NetworkParams, sample: &Sample) -> Result<Backprop> {
    let trace = forward(net, &sample.x)?;
    let eps = TdError::from_target(trace.output(), sample.action, sample.target, None)?;
    let mut transforms = Vec::with_capacity(net.depth());
    let mut deltas = Vec::with_capacity(net.depth());
    for layer in 0..net.depth() {
        let t = compute_transform(net, &trace, layer)?;
        deltas.push(network::gradient_feedback(&trace, layer, &t, &eps)?);
        transforms.push(t);
    }
    Ok(Backprop {
        trace,
        eps,
        transforms,
        deltas,
    })
}

/// Analytic `∂J_E/∂Ŵ⁽ⁱ⁾` for every layer.
pub fn analytic_gradient(net: &NetworkParams, sample: &Sample) -> Result<Vec<Matrix>> {
    backprop(net, sample)?
        .deltas
        .iter()
        .map(|d| Ok(d.scale(-1.0)?))
        .collect()
}

/// Worst entry-wise disagreement between central finite differences of `J_E`
/// and [`analytic_gradient`]. Each difference is divided by
/// `max(|fd|, |analytic|, ‖∇J_E‖_∞)` so that entries near zero do not blow up.
pub fn gradient_check(net: &NetworkParams, sample: &Sample, h: f64) -> Result<f64> {
    let analytic = analytic_gradient(net, sample)?;
    let scale = analytic.iter().fold(0.0_f64, |m, g| m.max(g.max_abs()));
    let mut worst: f64 = 0.0;
    for (layer, grad) in analytic.iter().enumerate() {
        let w = net.weights(layer);
        for idx in 0..w.data().len() {
            let mut plus = w.data().to_vec();
            let mut minus = w.data().to_vec();
            plus[idx] += h;
            minus[idx] -= h;
            let np = net.with_weights(layer, Matrix::new(w.rows(), w.cols(), plus)?)?;
            let nm = net.with_weights(layer, Matrix::new(w.rows(), w.cols(), minus)?)?;
            let fd = (sample.cost(&np)? - sample.cost(&nm)?) / (2.0 * h);
            let an = grad.data()[idx];
            let denom = fd.abs().max(an.abs()).max(scale);
            if denom > 0.0 {
                worst = worst.max((fd - an).abs() / denom);
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    /// Regularized empirical cost `½ε² + Σλ R(W)`.
    pub h: f64,
    /// `Σ ½tr(δᵀW) + Σλ R(W)`.
    pub trace_sum: f64,
    pub xi: f64,
}

fn trace_form(deltas: &[Matrix], net: &NetworkParams, lambdas: &[f64], p: &Preconditioner) -> Result<f64> {
    let mut sum = 0.0;
    for (layer, (d, lam)) in deltas.iter().zip(lambdas).enumerate() {
        let w = net.weights(layer);
        let pw = p.apply(layer, w.clone())?;
        sum += 0.5 * d.inner(&pw)? + lam * regularizer(w);
    }
    Ok(sum)
}

fn check_lambdas(net: &NetworkParams, lambdas: &[f64]) -> Result<()> {
    if lambdas.len() != net.depth() {
        return Err(NetworkError::PerLayerCount(lambdas.len(), net.depth()));
    }
    Ok(())
}

/// Splits `H` into its layer-trace form and the residual `ξ = H − trace_sum`.
pub fn lemma1_decompose(net: &NetworkParams, sample: &Sample, lambdas: &[f64]) -> Result<Decomposition> {
    check_lambdas(net, lambdas)?;
    let bp = backprop(net, sample)?;
    let h = regularized_empirical_cost(&bp.eps, net, lambdas)?;
    let trace_sum = trace_form(&bp.deltas, net, lambdas, &Preconditioner::Identity)?;
    Ok(Decomposition {
        h,
        trace_sum,
        xi: h - trace_sum,
    })
}

/// Measured constants of the cost-gap bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstants {
    pub depth: usize,
    /// Largest Frobenius norm of any layer's weights.
    pub w_b: f64,
    /// Largest layer input width, bias unit included.
    pub eta: usize,
}

impl BoundConstants {
    pub fn measure(net: &NetworkParams) -> Self {
        let w_b = net
            .layers()
            .iter()
            .fold(0.0_f64, |m, l| m.max(frobenius_norm(&l.weights)));
        let eta = net.layers().iter().map(|l| l.weights.rows()).max().unwrap_or(0);
        Self {
            depth: net.depth(),
            w_b,
            eta,
        }
    }

    /// `d·|s|/2·‖ε‖·W_B·√η`.
    pub fn bound(&self, s: f64, eps_norm: f64) -> f64 {
        self.depth as f64 * s.abs() / 2.0 * eps_norm * self.w_b * (self.eta as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    /// `|H − 𝓗(s)|`.
    pub gap: f64,
    /// `d·|s|/2·‖ε‖·W_B·√η + |ξ|`.
    pub bound: f64,
    pub xi_norm: f64,
    /// `|𝓗(s) − 𝓗(0)|`, the part of the gap that depends on `s`.
    pub s_gap: f64,
    /// `d·|s|/2·‖ε‖·W_B·√η` alone.
    pub s_bound: f64,
    pub h: f64,
    pub edl_cost: f64,
    pub constants: BoundConstants,
    pub eps_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Precondition {
    /// `‖f⁽ⁱ⁻¹⁾‖ ≥ √η` at this layer.
    InputNorm { layer: usize, norm: f64 },
    /// `‖P‖ > 1` at this layer.
    PreconditionerNorm { layer: usize, norm: f64 },
}

impl fmt::Display for Precondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InputNorm { layer, norm } => write!(f, "layer {layer} input norm {norm} >= sqrt(eta)"),
            Self::PreconditionerNorm { layer, norm } => write!(f, "layer {layer} ||P|| = {norm} > 1"),
        }
    }
}

/// Compares `H` with the error-driven cost `𝓗(s) = Σ ½tr(σᵀPW) + Σλ R(W)`.
/// Returns `Ok(Err(_))` when a precondition of the bound does not hold.
pub fn theorem1_gap(
    net: &NetworkParams,
    sample: &Sample,
    s: f64,
    p: &Preconditioner,
    lambdas: &[f64],
) -> Result<std::result::Result<GapReport, Precondition>> {
    check_lambdas(net, lambdas)?;
    let constants = BoundConstants::measure(net);
    let bp = backprop(net, sample)?;
    let root_eta = (constants.eta as f64).sqrt();
    for (layer, f) in bp.trace.inputs.iter().enumerate() {
        let norm = vec_norm(f);
        if norm >= root_eta {
            return Ok(Err(Precondition::InputNorm { layer, norm }));
        }
        let pn = p.norm(layer);
        if pn > 1.0 {
            return Ok(Err(Precondition::PreconditionerNorm { layer, norm: pn }));
        }
    }
    let mut sigmas = Vec::with_capacity(net.depth());
    for (layer, t) in bp.transforms.iter().enumerate() {
        let (b, _) = build_feedback_matrix(t, s)?;
        sigmas.push(network::edl_feedback(&bp.trace, layer, &b, &bp.eps)?);
    }
    let h = regularized_empirical_cost(&bp.eps, net, lambdas)?;
    let edl_cost = trace_form(&sigmas, net, lambdas, p)?;
    let edl_zero = trace_form(&bp.deltas, net, lambdas, p)?;
    let xi_norm = (h - edl_zero).abs();
    let eps_norm = bp.eps.magnitude();
    let s_bound = constants.bound(s, eps_norm);
    Ok(Ok(GapReport {
        gap: (h - edl_cost).abs(),
        bound: s_bound + xi_norm,
        xi_norm,
        s_gap: (edl_cost - edl_zero).abs(),
        s_bound,
        h,
        edl_cost,
        constants,
        eps_norm,
    }))
}

/// Settings for one descent trial.
#[derive(Debug, Clone, PartialEq)]
pub struct DescentConfig {
    /// `s = s_scale·|g|`, `g ~ N(0, 1)`.
    pub s_scale: f64,
    /// Magnitude `c` of the signed λ; 0 disables the decay term.
    pub lambda_c: f64,
    pub p: Preconditioner,
    /// Number of `s` draws averaged per trial.
    pub s_draws: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentReport {
    /// `Σ ⟨δ, Pδ⟩`, averaged over the draws.
    pub v1: f64,
    /// `Σ ⟨δ, P(σ − δ)⟩`, averaged over the draws.
    pub v2: f64,
    /// `Σ −λ⟨δ, W⟩`.
    pub v3: f64,
    /// Smallest per-draw value of each term.
    pub min_v: [f64; 3],
    /// Largest step size at which the mean first difference stayed `≤ 0`.
    pub alpha_threshold: f64,
    /// Step size the first difference was evaluated at (half the threshold).
    pub alpha: f64,
    /// Mean over draws of `J_E(θ_{k+1}) − J_E(θ_k)` at `alpha`.
    pub first_difference: f64,
    pub s_draws: usize,
    pub s_mean: f64,
}

/// Largest step before the cost rises, when the cost never rises.
pub const ALPHA_CAP: f64 = 1e6;
const ALPHA_START: f64 = 1e-3;
const ALPHA_FLOOR: f64 = 1e-300;
const BISECTION_STEPS: usize = 60;

/// Largest `α` (up to [`ALPHA_CAP`]) with `phi(α) ≤ 0`, found by doubling and
/// then bisecting the first sign change.
pub fn bisect_alpha<F>(mut phi: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut lo = ALPHA_START;
    while phi(lo)? > 0.0 {
        lo *= 0.5;
        if lo < ALPHA_FLOOR {
            return Ok(0.0);
        }
    }
    let mut hi = lo * 2.0;
    loop {
        if hi > ALPHA_CAP {
            return Ok(ALPHA_CAP);
        }
        if phi(hi)? > 0.0 {
            break;
        }
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if phi(mid)? > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(lo)
}

/// One error-driven step on `sample` with `s` drawn `cfg.s_draws` times,
/// signed λ and preconditioner `P`. Reports the three descent terms and the
/// actual change of `J_E` at half the bisected step-size threshold.
pub fn theorem2_descent<R: Rng + ?Sized>(
    net: &NetworkParams,
    sample: &Sample,
    cfg: &DescentConfig,
    rng: &mut R,
) -> Result<DescentReport> {
    let bp = backprop(net, sample)?;
    let depth = net.depth();
    let draws = cfg.s_draws.max(1);

    let mut lambdas = Vec::with_capacity(depth);
    let mut v3 = 0.0;
    for (layer, d) in bp.deltas.iter().enumerate() {
        let w = net.weights(layer);
        let lam = signed_lambda(d, w, cfg.lambda_c)?;
        v3 += -lam * d.inner(w)?;
        lambdas.push(lam);
    }

    let mut v1 = 0.0;
    for (layer, d) in bp.deltas.iter().enumerate() {
        v1 += d.inner(&cfg.p.apply(layer, d.clone())?)?;
    }

    let mut directions: Vec<Vec<Matrix>> = Vec::with_capacity(draws);
    let mut v2_sum = 0.0;
    let mut v2_min = f64::INFINITY;
    let mut s_sum = 0.0;
    for _ in 0..draws {
        let g: f64 = StandardNormal.sample(rng);
        let s = cfg.s_scale * g.abs();
        s_sum += s;
        let mut v2 = 0.0;
        let mut dir = Vec::with_capacity(depth);
        for (layer, t) in bp.transforms.iter().enumerate() {
            let (b, _) = build_feedback_matrix(t, s)?;
            let sigma = network::edl_feedback(&bp.trace, layer, &b, &bp.eps)?;
            let mut diff = sigma.clone();
            diff.add_scaled_assign(&bp.deltas[layer], -1.0)?;
            v2 += bp.deltas[layer].inner(&cfg.p.apply(layer, diff)?)?;
            let mut step = cfg.p.apply(layer, sigma)?;
            step.add_scaled_assign(net.weights(layer), -lambdas[layer])?;
            dir.push(step);
        }
        v2_sum += v2;
        v2_min = v2_min.min(v2);
        directions.push(dir);
    }

    let base = sample.cost(net)?;
    let no_decay = vec![0.0; depth];
    let mut phi = |alpha: f64| -> Result<f64> {
        let mut acc = 0.0;
        for dir in &directions {
            let next = network::apply_update(net, dir, alpha, &no_decay)?;
            acc += sample.cost(&next)? - base;
        }
        Ok(acc / directions.len() as f64)
    };
    let alpha_threshold = bisect_alpha(&mut phi)?;
    let alpha = 0.5 * alpha_threshold;
    let first_difference = if alpha > 0.0 { phi(alpha)? } else { 0.0 };

    Ok(DescentReport {
        v1,
        v2: v2_sum / draws as f64,
        v3,
        min_v: [v1, v2_min, v3],
        alpha_threshold,
        alpha,
        first_difference,
        s_draws: draws,
        s_mean: s_sum / draws as f64,
    })
}

/// Thresholds used by the verification suites.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub gradient: f64,
    pub gradient_linear: f64,
    pub lemma: f64,
    pub bound_slack: f64,
    pub positivity: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            gradient: 1e-4,
            gradient_linear: 1e-10,
            lemma: 1e-12,
            bound_slack: 1e-9,
            positivity: 1e-12,
        }
    }
}

impl Tolerances {
    /// The same threshold everywhere.
    pub fn uniform(t: f64) -> Self {
        Self {
            gradient: t,
            gradient_linear: t,
            lemma: t,
            bound_slack: t,
            positivity: t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    Gradient,
    Lemma1,
    Theorem1,
    Theorem2,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Gradient, Suite::Lemma1, Suite::Theorem1, Suite::Theorem2];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gradient => "gradient",
            Self::Lemma1 => "lemma1",
            Self::Theorem1 => "theorem1",
            Self::Theorem2 => "theorem2",
        }
    }

    /// Fraction of non-skipped trials that must pass.
    pub fn required_fraction(self) -> f64 {
        match self {
            Self::Theorem2 => 0.99,
            _ => 1.0,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One verification trial. Fields that do not apply to the suite are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub suite: Suite,
    pub trial: usize,
    pub depth: usize,
    pub eta: usize,
    pub w_b: f64,
    pub s: f64,
    pub eps_norm: f64,
    pub h: f64,
    pub edl_cost: f64,
    pub xi: f64,
    pub gap: f64,
    pub bound: f64,
    pub v1: f64,
    pub v2: f64,
    pub v3: f64,
    pub alpha: f64,
    pub first_difference: f64,
    pub grad_error: f64,
    /// Threshold the pass flag was decided with.
    pub tol: f64,
    pub skipped: bool,
    pub passed: bool,
    pub note: String,
}

impl TrialRecord {
    fn empty(suite: Suite, trial: usize, net: &NetworkParams) -> Self {
        let c = BoundConstants::measure(net);
        Self {
            suite,
            trial,
            depth: c.depth,
            eta: c.eta,
            w_b: c.w_b,
            s: f64::NAN,
            eps_norm: f64::NAN,
            h: f64::NAN,
            edl_cost: f64::NAN,
            xi: f64::NAN,
            gap: f64::NAN,
            bound: f64::NAN,
            v1: f64::NAN,
            v2: f64::NAN,
            v3: f64::NAN,
            alpha: f64::NAN,
            first_difference: f64::NAN,
            grad_error: f64::NAN,
            tol: f64::NAN,
            skipped: false,
            passed: false,
            note: String::new(),
        }
    }

    /// Re-derives the pass flag from the stored numbers.
    pub fn recompute_pass(&self) -> bool {
        if self.skipped {
            return false;
        }
        match self.suite {
            Suite::Gradient => self.grad_error < self.tol,
            Suite::Lemma1 => (self.h - (self.edl_cost + self.xi)).abs() <= self.tol,
            Suite::Theorem1 => self.gap <= self.bound + self.tol,
            Suite::Theorem2 => {
                self.v1 >= -self.tol && self.v2 >= -self.tol && self.v3 >= -self.tol && self.first_difference <= 0.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSummary {
    pub suite: Suite,
    pub trials: usize,
    pub skipped: usize,
    pub passed: usize,
    pub required_fraction: f64,
}

impl SuiteSummary {
    pub fn pass(&self) -> bool {
        let run = self.trials - self.skipped;
        run > 0 && self.passed as f64 >= self.required_fraction * run as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryReport {
    pub trials: usize,
    pub seed: u64,
    pub tolerances: Tolerances,
    /// `s` draws averaged per descent trial.
    pub s_draws: usize,
    pub records: Vec<TrialRecord>,
}

impl TheoryReport {
    pub fn summaries(&self) -> Vec<SuiteSummary> {
        Suite::ALL
            .iter()
            .filter_map(|&suite| {
                let rows: Vec<&TrialRecord> = self.records.iter().filter(|r| r.suite == suite).collect();
                if rows.is_empty() {
                    return None;
                }
                Some(SuiteSummary {
                    suite,
                    trials: rows.len(),
                    skipped: rows.iter().filter(|r| r.skipped).count(),
                    passed: rows.iter().filter(|r| r.passed).count(),
                    required_fraction: suite.required_fraction(),
                })
            })
            .collect()
    }

    pub fn all_pass(&self) -> bool {
        let s = self.summaries();
        !s.is_empty() && s.iter().all(SuiteSummary::pass)
    }
}

/// Random network with `1..=max_depth` layers and widths in `2..=max_width`.
/// Hidden layers use `hidden`, the head is linear, bias on.
pub fn random_network<R: Rng + ?Sized>(
    rng: &mut R,
    max_depth: usize,
    max_width: usize,
    hidden: ActivationKind,
) -> Result<NetworkParams> {
    let depth = rng.random_range(1..=max_depth.max(1));
    let mut dims = Vec::with_capacity(depth + 1);
    for _ in 0..=depth {
        dims.push(rng.random_range(2..=max_width.max(2)));
    }
    let specs: Vec<LayerSpec> = (0..depth)
        .map(|i| {
            let act = if i + 1 == depth { ActivationKind::Identity } else { hidden };
            LayerSpec::new(dims[i], dims[i + 1], act)
        })
        .collect();
    init_network(&specs, rng.random(), true)
}

/// Input uniform in `[-1, 1]`, random action and a target `ŷ_a + N(0, 1)`.
pub fn random_sample<R: Rng + ?Sized>(rng: &mut R, net: &NetworkParams) -> Result<Sample> {
    let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let action = rng.random_range(0..net.output_dim());
    let out = network::predict(net, &x)?;
    let g: f64 = StandardNormal.sample(rng);
    Ok(Sample {
        x,
        action,
        target: out[action] + g,
    })
}

fn random_lambdas<R: Rng + ?Sized>(rng: &mut R, depth: usize) -> Vec<f64> {
    (0..depth).map(|_| rng.random_range(0.0..0.1)).collect()
}

/// Largest input width (bias excluded) so that `η ≤ 16`.
const MAX_WIDTH: usize = 15;
const MAX_DEPTH: usize = 3;
const FD_STEP: f64 = 1e-5;
/// `s` values cycled through the cost-gap trials.
pub const GAP_S_VALUES: [f64; 3] = [0.01, 0.1, 0.5];

fn trial_rng(seed: u64, suite: Suite, trial: usize) -> ChaCha8Rng {
    let stream = (suite as u64 + 1) << 32 | trial as u64;
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

fn gradient_trial(seed: u64, trial: usize, tol: &Tolerances) -> Result<TrialRecord> {
    let mut rng = trial_rng(seed, Suite::Gradient, trial);
    let linear = trial % 2 == 1;
    let act = if linear { ActivationKind::Identity } else { ActivationKind::Tanh };
    let net = random_network(&mut rng, MAX_DEPTH, MAX_WIDTH, act)?;
    let sample = random_sample(&mut rng, &net)?;
    let mut rec = TrialRecord::empty(Suite::Gradient, trial, &net);
    rec.grad_error = gradient_check(&net, &sample, FD_STEP)?;
    rec.eps_norm = sample.td_error(&net)?.magnitude();
    rec.tol = if linear { tol.gradient_linear } else { tol.gradient };
    rec.note = if linear { "identity".into() } else { "tanh".into() };
    rec.passed = rec.recompute_pass();
    Ok(rec)
}

fn lemma_trial(seed: u64, trial: usize, tol: &Tolerances) -> Result<TrialRecord> {
    let mut rng = trial_rng(seed, Suite::Lemma1, trial);
    let net = random_network(&mut rng, MAX_DEPTH, MAX_WIDTH, ActivationKind::Tanh)?;
    let sample = random_sample(&mut rng, &net)?;
    let lambdas = random_lambdas(&mut rng, net.depth());
    let d = lemma1_decompose(&net, &sample, &lambdas)?;
    let mut rec = TrialRecord::empty(Suite::Lemma1, trial, &net);
    rec.h = d.h;
    rec.edl_cost = d.trace_sum;
    rec.xi = d.xi;
    rec.eps_norm = sample.td_error(&net)?.magnitude();
    rec.tol = tol.lemma;
    rec.passed = rec.recompute_pass();
    Ok(rec)
}

fn gap_trial(seed: u64, trial: usize, tol: &Tolerances) -> Result<TrialRecord> {
    let mut rng = trial_rng(seed, Suite::Theorem1, trial);
    let net = random_network(&mut rng, MAX_DEPTH, MAX_WIDTH, ActivationKind::Tanh)?;
    let sample = random_sample(&mut rng, &net)?;
    let lambdas = random_lambdas(&mut rng, net.depth());
    let s = GAP_S_VALUES[trial % GAP_S_VALUES.len()];
    let mut rec = TrialRecord::empty(Suite::Theorem1, trial, &net);
    rec.s = s;
    rec.tol = tol.bound_slack;
    match theorem1_gap(&net, &sample, s, &Preconditioner::Identity, &lambdas)? {
        Ok(g) => {
            // The row checks the s-dependent part; H, 𝓗(s) and ξ are kept for
            // the full inequality |H − 𝓗(s)| ≤ bound + |ξ|.
            rec.h = g.h;
            rec.edl_cost = g.edl_cost;
            rec.xi = g.xi_norm;
            rec.gap = g.s_gap;
            rec.bound = g.s_bound;
            rec.eps_norm = g.eps_norm;
            rec.passed = rec.recompute_pass();
        }
        Err(p) => {
            rec.skipped = true;
            rec.note = p.to_string();
        }
    }
    Ok(rec)
}

/// Diagonal `P` with entries uniform in `[0.1, 1]`.
pub fn random_preconditioner<R: Rng + ?Sized>(rng: &mut R, net: &NetworkParams) -> Preconditioner {
    Preconditioner::Diagonal(
        net.layers()
            .iter()
            .map(|l| (0..l.weights.rows()).map(|_| rng.random_range(0.1..=1.0)).collect())
            .collect(),
    )
}

fn descent_trial(seed: u64, trial: usize, tol: &Tolerances, s_draws: usize) -> Result<TrialRecord> {
    let mut rng = trial_rng(seed, Suite::Theorem2, trial);
    let net = random_network(&mut rng, MAX_DEPTH, MAX_WIDTH, ActivationKind::Tanh)?;
    let sample = random_sample(&mut rng, &net)?;
    let cfg = DescentConfig {
        s_scale: rng.random_range(0.01..=0.5),
        lambda_c: rng.random_range(0.0..=0.1),
        p: random_preconditioner(&mut rng, &net),
        s_draws,
    };
    let r = theorem2_descent(&net, &sample, &cfg, &mut rng)?;
    let mut rec = TrialRecord::empty(Suite::Theorem2, trial, &net);
    rec.s = r.s_mean;
    rec.eps_norm = sample.td_error(&net)?.magnitude();
    rec.v1 = r.min_v[0];
    rec.v2 = r.min_v[1];
    rec.v3 = r.min_v[2];
    rec.alpha = r.alpha;
    rec.first_difference = r.first_difference;
    rec.tol = tol.positivity;
    rec.passed = rec.recompute_pass();
    if !rec.passed {
        rec.note = format!("alpha_threshold={:e} s_scale={} lambda_c={}", r.alpha_threshold, cfg.s_scale, cfg.lambda_c);
    }
    Ok(rec)
}

/// Trials per suite for the descent check: twice the requested count.
pub fn descent_trials(trials: usize) -> usize {
    2 * trials
}

/// Default number of `s` draws per descent trial.
pub const S_DRAWS: usize = 16;

/// Runs the requested suites; trials run through [`parallel::map`].
pub fn run_suites(suites: &[Suite], trials: usize, seed: u64, tol: Tolerances) -> Result<TheoryReport> {
    let mut jobs: Vec<(Suite, usize)> = Vec::new();
    for &suite in suites {
        let n = if suite == Suite::Theorem2 { descent_trials(trials) } else { trials };
        jobs.extend((0..n).map(|t| (suite, t)));
    }
    let records = parallel::map(&jobs, |&(suite, t)| match suite {
        Suite::Gradient => gradient_trial(seed, t, &tol),
        Suite::Lemma1 => lemma_trial(seed, t, &tol),
        Suite::Theorem1 => gap_trial(seed, t, &tol),
        Suite::Theorem2 => descent_trial(seed, t, &tol, S_DRAWS),
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(TheoryReport {
        trials,
        seed,
        tolerances: tol,
        s_draws: S_DRAWS,
        records,
    })
}

pub fn verify_all(trials: usize, seed: u64, tol: Tolerances) -> Result<TheoryReport> {
    run_suites(&Suite::ALL, trials, seed, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Layer;

    fn linear_scalar(w: &[f64]) -> NetworkParams {
        let spec = LayerSpec::new(w.len(), 1, ActivationKind::Identity);
        let weights = Matrix::new(w.len(), 1, w.to_vec()).unwrap();
        NetworkParams::from_layers(vec![Layer { spec, weights }], false).unwrap()
    }

    #[test]
    fn lemma_on_linear_scalar_net_matches_hand_evaluation() {
        // ŷ = w·x, δ = x ε, tr(δᵀW) = ε ŷ.
        let net = linear_scalar(&[0.5, -1.0]);
        let sample = Sample {
            x: vec![2.0, 1.0],
            action: 0,
            target: 3.0,
        };
        let lam = 0.2;
        let d = lemma1_decompose(&net, &sample, &[lam]).unwrap();
        let y_hat = 0.0;
        let eps = 3.0 - y_hat;
        let reg = lam * 0.5 * (0.25 + 1.0);
        assert!((d.h - (0.5 * eps * eps + reg)).abs() < 1e-15);
        assert!((d.trace_sum - (0.5 * eps * y_hat + reg)).abs() < 1e-15);
        assert!((d.xi - 0.5 * eps * (eps - y_hat)).abs() < 1e-15);

        let net = linear_scalar(&[1.0, 1.0]);
        let d = lemma1_decompose(&net, &sample, &[0.0]).unwrap();
        // ŷ = 3, ε = 0 would be trivial; use target 5: ε = 2.
        let sample5 = Sample { target: 5.0, ..sample };
        let d5 = lemma1_decompose(&net, &sample5, &[0.0]).unwrap();
        assert_eq!(d.h, 0.0);
        assert!((d5.trace_sum - 0.5 * 2.0 * 3.0).abs() < 1e-15);
        assert!((d5.xi - (2.0 - 3.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_error_leaves_only_regularizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = random_network(&mut rng, 3, 6, ActivationKind::Tanh).unwrap();
        let mut sample = random_sample(&mut rng, &net).unwrap();
        sample.target = network::predict(&net, &sample.x).unwrap()[sample.action];
        let lambdas = vec![0.05; net.depth()];
        let d = lemma1_decompose(&net, &sample, &lambdas).unwrap();
        let reg: f64 = net
            .layers()
            .iter()
            .map(|l| 0.05 * regularizer(&l.weights))
            .sum();
        assert_eq!(d.xi, 0.0);
        assert!((d.h - reg).abs() < 1e-15);
        assert_eq!(d.h, d.trace_sum);
    }

    #[test]
    fn identity_holds_on_random_nets() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = random_network(&mut rng, 3, 10, ActivationKind::Tanh).unwrap();
            let sample = random_sample(&mut rng, &net).unwrap();
            let lambdas = random_lambdas(&mut rng, net.depth());
            let d = lemma1_decompose(&net, &sample, &lambdas).unwrap();
            assert!((d.h - (d.trace_sum + d.xi)).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_perturbation_has_no_s_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = random_network(&mut rng, 3, 8, ActivationKind::Tanh).unwrap();
        let sample = random_sample(&mut rng, &net).unwrap();
        let lambdas = vec![0.01; net.depth()];
        let g = theorem1_gap(&net, &sample, 0.0, &Preconditioner::Identity, &lambdas)
            .unwrap()
            .unwrap();
        assert_eq!(g.s_gap, 0.0);
        assert_eq!(g.s_bound, 0.0);
        let lemma = lemma1_decompose(&net, &sample, &lambdas).unwrap();
        assert!((g.edl_cost - lemma.trace_sum).abs() <= 1e-10);
        assert!(g.gap <= 1e-10 + g.xi_norm);
    }

    #[test]
    fn s_gap_is_linear_in_s() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = random_network(&mut rng, 3, 8, ActivationKind::Tanh).unwrap();
        let sample = random_sample(&mut rng, &net).unwrap();
        let lambdas = vec![0.0; net.depth()];
        let p = Preconditioner::Identity;
        let one = theorem1_gap(&net, &sample, 0.1, &p, &lambdas).unwrap().unwrap();
        let two = theorem1_gap(&net, &sample, 0.2, &p, &lambdas).unwrap().unwrap();
        assert!(one.s_gap > 0.0);
        assert!((two.s_gap - 2.0 * one.s_gap).abs() <= 1e-12 * two.s_gap.max(1.0));
    }

    #[test]
    fn s_bound_holds_on_hundred_nets() {
        for trial in 0..100 {
            let rec = gap_trial(5, trial, &Tolerances::default()).unwrap();
            assert!(!rec.skipped, "{}", rec.note);
            assert!(rec.eta <= 16 && rec.depth <= 3);
            assert!(rec.passed, "trial {trial}: {} > {}", rec.gap, rec.bound);
            // The full inequality with ξ also holds.
            assert!((rec.h - rec.edl_cost).abs() <= rec.bound + rec.xi + 1e-9);
        }
    }

    #[test]
    fn oversized_input_is_reported() {
        let net = linear_scalar(&[1.0, 1.0]);
        let sample = Sample {
            x: vec![3.0, 0.0],
            action: 0,
            target: 0.0,
        };
        let r = theorem1_gap(&net, &sample, 0.1, &Preconditioner::Identity, &[0.0]).unwrap();
        assert!(matches!(r, Err(Precondition::InputNorm { layer: 0, .. })));
    }

    #[test]
    fn zero_error_gives_zero_descent_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = random_network(&mut rng, 3, 8, ActivationKind::Tanh).unwrap();
        let mut sample = random_sample(&mut rng, &net).unwrap();
        sample.target = network::predict(&net, &sample.x).unwrap()[sample.action];
        let cfg = DescentConfig {
            s_scale: 0.1,
            lambda_c: 0.05,
            p: Preconditioner::Identity,
            s_draws: 4,
        };
        let r = theorem2_descent(&net, &sample, &cfg, &mut rng).unwrap();
        assert_eq!((r.v1, r.v2, r.v3), (0.0, 0.0, 0.0));
        assert_eq!(r.first_difference, 0.0);
    }

    #[test]
    fn plain_gradient_step_descends_at_first_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = random_network(&mut rng, 3, 8, ActivationKind::Tanh).unwrap();
        let sample = random_sample(&mut rng, &net).unwrap();
        let grad = analytic_gradient(&net, &sample).unwrap();
        let norm_sq: f64 = grad.iter().map(|g| g.inner(g).unwrap()).sum();
        let deltas: Vec<Matrix> = grad.iter().map(|g| g.scale(-1.0).unwrap()).collect();
        let base = sample.cost(&net).unwrap();
        let zeros = vec![0.0; net.depth()];
        let mut prev_ratio = f64::INFINITY;
        for alpha in [1e-3, 1e-4, 1e-5] {
            let next = network::apply_update(&net, &deltas, alpha, &zeros).unwrap();
            let diff = sample.cost(&next).unwrap() - base;
            assert!(diff <= 0.0);
            let err = (diff + alpha * norm_sq).abs() / alpha;
            assert!(err < prev_ratio);
            prev_ratio = err;
        }
        assert!(prev_ratio < 1e-3 * norm_sq.max(1e-12) + 1e-9);
    }

    #[test]
    fn descent_terms_are_nonnegative() {
        let report = run_suites(&[Suite::Theorem2], 20, 1, Tolerances::default()).unwrap();
        let s = &report.summaries()[0];
        assert_eq!(s.trials, 40);
        for r in &report.records {
            assert!(r.v1 >= -1e-12 && r.v2 >= -1e-12 && r.v3 >= -1e-12, "{r:?}");
        }
        assert!(s.pass(), "{s:?}");
    }

    #[test]
    fn v2_matches_closed_form_without_preconditioner() {
        // With P = I: ⟨δ, σ − δ⟩ = s‖f‖² εᵀUΣUᵀε.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = random_network(&mut rng, 2, 6, ActivationKind::Tanh).unwrap();
        let sample = random_sample(&mut rng, &net).unwrap();
        let bp = backprop(&net, &sample).unwrap();
        let s = 0.3;
        for layer in 0..net.depth() {
            let t = &bp.transforms[layer];
            let (b, svd) = build_feedback_matrix(t, s).unwrap();
            let sigma = network::edl_feedback(&bp.trace, layer, &b, &bp.eps).unwrap();
            let mut diff = sigma;
            diff.add_scaled_assign(&bp.deltas[layer], -1.0).unwrap();
            let v2 = bp.deltas[layer].inner(&diff).unwrap();
            let e = bp.eps.vector();
            let ut_e: Vec<f64> = (0..svd.sigma.len())
                .map(|k| (0..e.len()).map(|r| svd.u.get(r, k) * e[r]).sum())
                .collect();
            let quad: f64 = ut_e.iter().zip(&svd.sigma).map(|(a, sv)| sv * a * a).sum();
            let f2 = vec_norm(&bp.trace.inputs[layer]).powi(2);
            let expect = s * f2 * quad;
            assert!((v2 - expect).abs() <= 1e-10 * expect.abs().max(1.0), "{v2} vs {expect}");
        }
    }

    #[test]
    fn gradient_check_linear_and_tanh() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lin = random_network(&mut rng, 3, 10, ActivationKind::Identity).unwrap();
            let s = random_sample(&mut rng, &lin).unwrap();
            assert!(gradient_check(&lin, &s, FD_STEP).unwrap() <= 1e-10);
            let tanh = random_network(&mut rng, 2, 10, ActivationKind::Tanh).unwrap();
            let s = random_sample(&mut rng, &tanh).unwrap();
            assert!(gradient_check(&tanh, &s, FD_STEP).unwrap() < 1e-4);
        }
    }

    #[test]
    fn zero_input_without_bias_has_zero_first_layer_gradient() {
        let specs = network::mlp_specs(3, &[4], 2, ActivationKind::Tanh);
        let net = init_network(&specs, 7, false).unwrap();
        let sample = Sample {
            x: vec![0.0; 3],
            action: 1,
            target: 1.0,
        };
        let g = analytic_gradient(&net, &sample).unwrap();
        assert_eq!(g[0].max_abs(), 0.0);
    }

    #[test]
    fn bisection_finds_sign_change() {
        // φ(α) = α(α − 3): negative on (0, 3).
        let t = bisect_alpha(|a| Ok(a * (a - 3.0))).unwrap();
        assert!((t - 3.0).abs() < 1e-9);
        assert_eq!(bisect_alpha(|_| Ok(-1.0)).unwrap(), ALPHA_CAP);
        assert_eq!(bisect_alpha(|_| Ok(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn reports_are_deterministic_and_flags_recomputable() {
        let a = verify_all(3, 42, Tolerances::default()).unwrap();
        let b = verify_all(3, 42, Tolerances::default()).unwrap();
        // NaN fields defeat ==, the formatted form does not.
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        for r in &a.records {
            assert_eq!(r.passed, r.recompute_pass());
        }
        assert!(a.all_pass());
        assert!(!verify_all(3, 42, Tolerances::uniform(0.0)).unwrap().all_pass());
    }
}
