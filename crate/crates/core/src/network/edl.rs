//! Layer-wise error transport, feedback matrices, costs and the weight update.
//!
//! Sign convention: the TD error is `ε = y − ŷ` and the feedback
//! `δ⁽ⁱ⁾ = f⁽ⁱ⁻¹⁾ ⊗ (εᵀ 𝒯⁽ⁱ⁾)` equals `−∂J_E/∂Ŵ⁽ⁱ⁾` for `J_E = ½‖ε‖²`.
//! [`apply_update`] therefore *adds* `α·feedback`, so with `B = 𝒯` the step is
//! plain gradient descent on `J_E`.

use super::{ForwardTrace, NetworkError, NetworkParams, Result};
use crate::linalg::{self, frobenius_norm, matmul, LinalgError, Matrix, SvdResult};

/// TD error of one sample: non-zero only at the action that was taken.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdError {
    n_actions: usize,
    action: usize,
    value: f64,
}

impl TdError {
    pub fn new(n_actions: usize, action: usize, value: f64) -> Result<Self> {
        if action >= n_actions {
            return Err(NetworkError::ActionOutOfRange { action, n_actions });
        }
        Ok(Self {
            n_actions,
            action,
            value,
        })
    }

    /// `target − ŷ[action]`, optionally clipped to `±clip`.
    pub fn from_target(output: &[f64], action: usize, target: f64, clip: Option<f64>) -> Result<Self> {
        let mut value = target - output.get(action).copied().unwrap_or(f64::NAN);
        if let Some(c) = clip {
            value = value.clamp(-c, c);
        }
        Self::new(output.len(), action, value)
    }

    pub fn action(&self) -> usize {
        self.action
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn magnitude(&self) -> f64 {
        self.value.abs()
    }

    pub fn vector(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.n_actions];
        v[self.action] = self.value;
        v
    }
}

/// `𝒯⁽ⁱ⁾`: Jacobian of the network output with respect to layer `layer`'s
/// pre-activation, evaluated at the trace. Shape `output_dim x out_dim(layer)`.
/// `layer` is zero-based; the last layer yields `diag(f'(z))`.
pub fn compute_transform(params: &NetworkParams, trace: &ForwardTrace, layer: usize) -> Result<Matrix> {
    params.check_layer(layer)?;
    let depth = params.depth();
    let last = &params.layers()[depth - 1];
    let out = last.spec.out_dim;
    let mut t: Vec<f64> = vec![0.0; out * out];
    for (k, &z) in trace.pre[depth - 1].iter().enumerate() {
        t[k * out + k] = last.spec.activation.derivative(z);
    }
    let mut width = out;
    for j in (layer..depth - 1).rev() {
        let next = &params.layers()[j + 1].weights;
        let spec = params.layers()[j].spec;
        let eta = spec.out_dim;
        let mut t_new = vec![0.0; out * eta];
        for a in 0..out {
            let t_row = &t[a * width..(a + 1) * width];
            for c in 0..eta {
                let w_row = next.row(c);
                let acc: f64 = t_row.iter().zip(w_row).map(|(x, w)| x * w).sum();
                t_new[a * eta + c] = acc * spec.activation.derivative(trace.pre[j][c]);
            }
        }
        t = t_new;
        width = eta;
    }
    Ok(Matrix::new(out, width, t)?)
}

fn layer_feedback(trace: &ForwardTrace, layer: usize, map: &Matrix, eps: &TdError) -> Result<Matrix> {
    if layer >= trace.depth() {
        return Err(NetworkError::LayerOutOfRange {
            index: layer,
            depth: trace.depth(),
        });
    }
    if map.rows() != eps.n_actions() || map.cols() != trace.pre[layer].len() {
        return Err(LinalgError::DimensionMismatch {
            op: "layer_feedback",
            left: (eps.n_actions(), trace.pre[layer].len()),
            right: map.shape(),
        }
        .into());
    }
    let projected = map.left_mul_vec(&eps.vector())?;
    Ok(Matrix::outer(&trace.inputs[layer], &projected)?)
}

/// Backpropagated feedback `δ⁽ⁱ⁾ = f⁽ⁱ⁻¹⁾ ⊗ (εᵀ 𝒯⁽ⁱ⁾)`, shaped like `Ŵ⁽ⁱ⁾`.
pub fn gradient_feedback(trace: &ForwardTrace, layer: usize, transform: &Matrix, eps: &TdError) -> Result<Matrix> {
    layer_feedback(trace, layer, transform, eps)
}

/// Error-driven feedback `σ⁽ⁱ⁾ = f⁽ⁱ⁻¹⁾ ⊗ (εᵀ B⁽ⁱ⁾)`.
pub fn edl_feedback(trace: &ForwardTrace, layer: usize, b: &Matrix, eps: &TdError) -> Result<Matrix> {
    layer_feedback(trace, layer, b, eps)
}

/// `B = U (Σ + s I) Vᵀ` from the thin SVD of `transform`. With `s == 0` the
/// transform itself is returned so the error-driven path reproduces the
/// gradient path bit for bit.
pub fn build_feedback_matrix(transform: &Matrix, s: f64) -> Result<(Matrix, SvdResult)> {
    let svd = linalg::svd(transform)?;
    let b = if s == 0.0 {
        transform.clone()
    } else {
        svd.reconstruct_shifted(s)?
    };
    Ok((b, svd))
}

/// Symmetric positive definite matrix `P` applied to each layer's feedback.
#[derive(Debug, Clone, PartialEq)]
pub enum Preconditioner {
    Identity,
    /// One diagonal per layer, each entry in `(0, 1]`, length = weight rows.
    Diagonal(Vec<Vec<f64>>),
}

impl Preconditioner {
    /// Same diagonal value `p` on every layer.
    pub fn uniform(params: &NetworkParams, p: f64) -> Self {
        if p == 1.0 {
            return Self::Identity;
        }
        Self::Diagonal(
            params
                .layers()
                .iter()
                .map(|l| vec![p; l.weights.rows()])
                .collect(),
        )
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Self::Identity)
    }

    /// Spectral norm of the layer's `P`.
    pub fn norm(&self, layer: usize) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::Diagonal(d) => d[layer].iter().fold(0.0, |m, v| m.max(v.abs())),
        }
    }

    pub fn matrix(&self, layer: usize, n: usize) -> Result<Matrix> {
        match self {
            Self::Identity => Ok(Matrix::identity(n)),
            Self::Diagonal(d) => Ok(Matrix::from_diag(&d[layer])?),
        }
    }

    /// `P · m` for layer `layer`.
    pub fn apply(&self, layer: usize, m: Matrix) -> Result<Matrix> {
        match self {
            Self::Identity => Ok(m),
            Self::Diagonal(d) => {
                let diag = &d[layer];
                if diag.len() != m.rows() {
                    return Err(LinalgError::DimensionMismatch {
                        op: "precondition",
                        left: (diag.len(), diag.len()),
                        right: m.shape(),
                    }
                    .into());
                }
                let cols = m.cols();
                let mut data = m.into_data();
                for (r, &p) in diag.iter().enumerate() {
                    data[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v *= p);
                }
                Ok(Matrix::new(diag.len(), cols, data)?)
            }
        }
    }
}

/// `R(W) = ½‖W‖_F²`.
pub fn regularizer(w: &Matrix) -> f64 {
    let n = frobenius_norm(w);
    0.5 * n * n
}

/// Layer cost `½[tr(σᵀ P W) + λ R(W)]`.
pub fn layer_cost(sigma: &Matrix, p: &Matrix, w: &Matrix, lambda: f64) -> Result<f64> {
    let pw = matmul(p, w)?;
    let tr = sigma.inner(&pw)?;
    Ok(0.5 * (tr + lambda * regularizer(w)))
}

pub fn total_cost(per_layer: &[f64]) -> f64 {
    per_layer.iter().sum()
}

/// `H = ½‖ε‖² + Σ λ⁽ⁱ⁾ R(Ŵ⁽ⁱ⁾)`.
pub fn regularized_empirical_cost(eps: &TdError, params: &NetworkParams, lambdas: &[f64]) -> Result<f64> {
    if lambdas.len() != params.depth() {
        return Err(NetworkError::PerLayerCount(lambdas.len(), params.depth()));
    }
    let reg: f64 = params
        .layers()
        .iter()
        .zip(lambdas)
        .map(|(l, lam)| lam * regularizer(&l.weights))
        .sum();
    Ok(0.5 * eps.value() * eps.value() + reg)
}

/// λ chosen so the regularizer's contribution to the one-step change of
/// `J_E` is non-positive: `sign(⟨∂J_E/∂W, W⟩)·c` with `∂J_E/∂W = −δ`.
pub fn signed_lambda(delta: &Matrix, w: &Matrix, c: f64) -> Result<f64> {
    let corr = -delta.inner(w)?;
    Ok(if corr > 0.0 {
        c
    } else if corr < 0.0 {
        -c
    } else {
        0.0
    })
}

/// `Ŵ⁽ⁱ⁾ ← Ŵ⁽ⁱ⁾ + α (F⁽ⁱ⁾ − λ⁽ⁱ⁾ Ŵ⁽ⁱ⁾)`.
pub fn apply_update(params: &NetworkParams, feedbacks: &[Matrix], alpha: f64, lambdas: &[f64]) -> Result<NetworkParams> {
    let depth = params.depth();
    if feedbacks.len() != depth {
        return Err(NetworkError::PerLayerCount(feedbacks.len(), depth));
    }
    if lambdas.len() != depth {
        return Err(NetworkError::PerLayerCount(lambdas.len(), depth));
    }
    let mut layers = params.layers().to_vec();
    for (i, ((layer, fb), &lam)) in layers.iter_mut().zip(feedbacks).zip(lambdas).enumerate() {
        if fb.shape() != layer.weights.shape() {
            return Err(LinalgError::DimensionMismatch {
                op: "apply_update",
                left: layer.weights.shape(),
                right: fb.shape(),
            }
            .into());
        }
        let data: Vec<f64> = layer
            .weights
            .data()
            .iter()
            .zip(fb.data())
            .map(|(&w, &f)| w + alpha * (f - lam * w))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NetworkError::NonFiniteUpdate { layer: i });
        }
        layer.weights = Matrix::new(layer.weights.rows(), layer.weights.cols(), data)?;
    }
    NetworkParams::from_layers(layers, params.has_bias())
}
