//! First-order optimizers.
//!
//! Every rule fits `θ ← θ − α/ψ(g₁..g_t) · φ(g₁..g_t)`:
//!
//! | kind     | φ                            | ψ                        |
//! |----------|------------------------------|--------------------------|
//! | Sgd      | g_t                          | 1                        |
//! | Momentum | m_t = β m_{t−1} + g_t        | 1                        |
//! | Nesterov | g_t + β m_t                  | 1                        |
//! | AdaGrad  | g_t                          | √(Σ g²) + ε              |
//! | RmsProp  | g_t                          | √(s_t) + ε, s_t = β₂ s_{t−1} + (1−β₂) g_t² |
//! | Adam     | m_t / (1 − β₁ᵗ)              | √(s_t / (1 − β₂ᵗ)) + ε   |
//!
//! Adam's moments are bias corrected. The learning rate is constant.

use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::nn::{Architecture, Gradients, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Nesterov,
    #[serde(rename = "adagrad")]
    AdaGrad,
    #[serde(rename = "rmsprop")]
    RmsProp,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Momentum decay for `Momentum` / `Nesterov`.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    /// Second-moment decay, shared by `RmsProp` and `Adam`.
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            beta: default_beta(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    /// Momentum SGD, α = 0.004, β = 0.9.
    pub fn offline_default() -> Self {
        Self::new(OptimizerKind::Momentum, 0.004)
    }

    /// Adam, α = 0.01, β₁ = 0.9, β₂ = 0.999.
    pub fn online_default() -> Self {
        Self::new(OptimizerKind::Adam, 0.01)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(usage(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, value) in [("beta", self.beta), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&value) {
                return Err(usage(format!("{name} must lie in [0, 1), got {value}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(usage(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Gradients,
    pub second_moment: Gradients,
}

impl OptimizerState {
    pub fn new(arch: &Architecture) -> Self {
        Self {
            step: 0,
            first_moment: Gradients::zeros(arch),
            second_moment: Gradients::zeros(arch),
        }
    }
}

/// Pure update: returns the new parameters and state, leaving inputs untouched.
pub fn step(
    state: &OptimizerState,
    params: &Mlp,
    grads: &Gradients,
    cfg: &OptimizerConfig,
) -> Result<(Mlp, OptimizerState)> {
    let mut params = params.clone();
    let mut state = state.clone();
    step_in_place(&mut state, &mut params, grads, cfg)?;
    Ok((params, state))
}

pub fn step_in_place(
    state: &mut OptimizerState,
    params: &mut Mlp,
    grads: &Gradients,
    cfg: &OptimizerConfig,
) -> Result<()> {
    params.check_gradients(grads)?;
    params.check_gradients(&state.first_moment)?;
    params.check_gradients(&state.second_moment)?;
    state.step += 1;

    let alpha = cfg.learning_rate;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);

    let moments = state
        .first_moment
        .iter_mut()
        .zip(state.second_moment.iter_mut());
    for ((theta, &g), (m, s)) in params.params_mut().zip(grads.iter()).zip(moments) {
        match cfg.kind {
            OptimizerKind::Sgd => *theta -= alpha * g,
            OptimizerKind::Momentum => {
                *m = cfg.beta * *m + g;
                *theta -= alpha * *m;
            }
            OptimizerKind::Nesterov => {
                *m = cfg.beta * *m + g;
                *theta -= alpha * (g + cfg.beta * *m);
            }
            OptimizerKind::AdaGrad => {
                *s += g * g;
                *theta -= alpha * g / (s.sqrt() + cfg.eps);
            }
            OptimizerKind::RmsProp => {
                *s = cfg.beta2 * *s + (1.0 - cfg.beta2) * g * g;
                *theta -= alpha * g / (s.sqrt() + cfg.eps);
            }
            OptimizerKind::Adam => {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *s = cfg.beta2 * *s + (1.0 - cfg.beta2) * g * g;
                *theta -= alpha * (*m / bias1) / ((*s / bias2).sqrt() + cfg.eps);
            }
        }
    }
    Ok(())
}
