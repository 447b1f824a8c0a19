//! Adam and the sharpness-aware (SAM) wrapper around it.
//!
//! A SAM step evaluates the gradient `g` at the current weights `w`, moves
//! to `w + rho * g / ||g||` (global L2 norm over every parameter), takes the
//! gradient there, restores `w` exactly and hands that second gradient to
//! Adam.

use thiserror::Error;

use crate::nn::DoubleEncoderDecoder;
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in `{name}` at index {index}; step aborted")]
    NonFiniteGradient { name: String, index: usize },
    #[error("gradient count/shape does not match parameters: {0}")]
    Shape(String),
    #[error("invalid optimizer setting: {0}")]
    Config(String),
    #[error("loss evaluation failed: {0}")]
    Loss(Box<dyn std::error::Error + Send + Sync>),
}

/// Gradient norms below this skip the SAM ascent step.
pub const SAM_MIN_GRAD_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are `f64`; updated weights are
/// rounded to `f32` so they stay exactly checkpointable.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { config, step_count: 0, m: zeros.clone(), v: zeros }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update using the gradients accumulated in the store.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<(), OptimError> {
        let grads = params.grads();
        self.step_with(params, &grads)
    }

    /// One update with explicitly supplied gradients, aligned with the
    /// store's parameter order. Leaves all state untouched on error.
    pub fn step_with(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<(), OptimError> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(OptimError::Shape(format!(
                "{} gradients / {} moment buffers for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(OptimError::Shape(format!(
                    "`{}` is {:?} but its gradient is {:?}",
                    p.name,
                    p.value.shape(),
                    g.shape()
                )));
            }
            if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(OptimError::NonFiniteGradient { name: p.name.clone(), index });
            }
        }

        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = (*w - lr * m_hat / (v_hat.sqrt() + eps)) as f32 as f64;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamConfig {
    pub rho: f64,
}

impl Default for SamConfig {
    fn default() -> Self {
        Self { rho: 0.05 }
    }
}

impl SamConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(OptimError::Config(format!("rho must be finite and positive, got {}", self.rho)));
        }
        Ok(())
    }
}

/// What happened during one [`sam_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct SamReport {
    /// Loss at the unperturbed weights.
    pub loss: f64,
    /// Global L2 norm of the gradient at the unperturbed weights.
    pub grad_norm: f64,
    /// Global L2 norm of the applied perturbation; `None` when the ascent
    /// step was skipped because the gradient vanished.
    pub perturbation_norm: Option<f64>,
}

/// Anything that owns a parameter store.
pub trait HasParams {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl HasParams for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}

impl HasParams for DoubleEncoderDecoder {
    fn params(&self) -> &ParamStore {
        DoubleEncoderDecoder::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        DoubleEncoderDecoder::params_mut(self)
    }
}

fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

fn eval<M, E, F>(model: &mut M, loss_fn: &mut F) -> Result<f64, OptimError>
where
    M: HasParams,
    E: std::error::Error + Send + Sync + 'static,
    F: FnMut(&mut M) -> Result<f64, E>,
{
    model.params_mut().zero_grad();
    loss_fn(model).map_err(|e| OptimError::Loss(Box::new(e)))
}

/// Plain Adam step: one gradient evaluation, one update.
pub fn adam_step<M, E, F>(adam: &mut Adam, model: &mut M, mut loss_fn: F) -> Result<f64, OptimError>
where
    M: HasParams,
    E: std::error::Error + Send + Sync + 'static,
    F: FnMut(&mut M) -> Result<f64, E>,
{
    let loss = eval(model, &mut loss_fn)?;
    adam.step(model.params_mut())?;
    Ok(loss)
}

/// One SAM step wrapping Adam.
///
/// `loss_fn` must compute the loss at the model's current parameters and
/// accumulate its gradients into the store; gradients are zeroed before
/// each of its two calls. Returns the loss at the unperturbed point.
pub fn sam_step<M, E, F>(config: &SamConfig, adam: &mut Adam, model: &mut M, mut loss_fn: F) -> Result<SamReport, OptimError>
where
    M: HasParams,
    E: std::error::Error + Send + Sync + 'static,
    F: FnMut(&mut M) -> Result<f64, E>,
{
    config.validate()?;
    let loss = eval(model, &mut loss_fn)?;
    let grads = model.params().grads();
    let grad_norm = global_norm(&grads);
    if !grad_norm.is_finite() {
        // Let Adam name the offending entry.
        adam.step_with(model.params_mut(), &grads)?;
    }
    if grad_norm < SAM_MIN_GRAD_NORM {
        adam.step_with(model.params_mut(), &grads)?;
        return Ok(SamReport { loss, grad_norm, perturbation_norm: None });
    }

    let saved = model.params().values();
    let scale = config.rho / grad_norm;
    let mut perturbation_sq = 0.0;
    for (p, g) in model.params_mut().iter_mut().zip(&grads) {
        for (w, &gi) in p.value.data_mut().iter_mut().zip(g.data()) {
            let e = scale * gi;
            perturbation_sq += e * e;
            *w += e;
        }
    }
    let adversarial = eval(model, &mut loss_fn);
    model.params_mut().set_values(&saved);
    adversarial?;
    adam.step(model.params_mut())?;
    Ok(SamReport { loss, grad_norm, perturbation_norm: Some(perturbation_sq.sqrt()) })
}
