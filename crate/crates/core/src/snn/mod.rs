//! Spiking network: LIF layers with BNTT, unrolled over time and trained by
//! surrogate-gradient backpropagation through time.

mod bntt;
mod model;
mod neuron;

pub use crate::nn::Mode;
pub use bntt::BnttLayer;
pub use model::{stack_trains, SnnModel, SpikeRecorder};
pub use neuron::{lif_step, surrogate_grad, LifOutput, LifParams, ResetMode, SpikeFunction};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct SnnConfig {
    pub time_steps: usize,
    /// Leak factor, in (0, 1).
    pub leak: f64,
    /// Firing threshold.
    pub threshold: f64,
    /// Surrogate peak height ("substitution rate").
    pub alpha: f64,
    pub bn_epsilon: f64,
    /// Decay of the BNTT running statistics.
    pub bn_momentum: f64,
    pub reset: ResetMode,
    pub spike_fn: SpikeFunction,
    /// Elementwise gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for SnnConfig {
    fn default() -> Self {
        Self {
            time_steps: 10,
            leak: 0.9,
            threshold: 1.0,
            alpha: 0.3,
            bn_epsilon: 1e-5,
            bn_momentum: 0.9,
            reset: ResetMode::Hard,
            spike_fn: SpikeFunction::Heaviside,
            grad_clip: Some(5.0),
        }
    }
}

impl SnnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.time_steps == 0 {
            return bad("time steps must be at least 1");
        }
        if !(self.leak > 0.0 && self.leak < 1.0) {
            return bad("leak must lie in (0, 1)");
        }
        if !(self.threshold > 0.0) {
            return bad("threshold must be positive");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if !(self.bn_epsilon > 0.0) {
            return bad("bn epsilon must be positive");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return bad("bn momentum must lie in (0, 1)");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("gradient clip must be positive");
        }
        Ok(())
    }

    pub fn lif_params<R: Real>(&self) -> LifParams<R> {
        LifParams {
            leak: R::of(self.leak),
            threshold: R::of(self.threshold),
            alpha: R::of(self.alpha),
            reset: self.reset,
            spike_fn: self.spike_fn,
        }
    }
}
