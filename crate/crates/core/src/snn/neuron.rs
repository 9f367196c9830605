//! Leaky integrate-and-fire dynamics and the piecewise-linear surrogate.

use crate::error::Result;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ResetMode {
    /// Membrane set to zero after a spike.
    #[default]
    Hard,
    /// Threshold subtracted after a spike.
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SpikeFunction {
    /// Binary threshold crossing.
    #[default]
    Heaviside,
    /// The integral of the surrogate: a smooth ramp from 0 to `alpha * theta`
    /// whose derivative is exactly the surrogate. Used to check gradients.
    Relaxed,
}

/// Neuron constants resolved to the working float type.
#[derive(Clone, Copy, Debug)]
pub struct LifParams<R> {
    pub leak: R,
    pub threshold: R,
    pub alpha: R,
    pub reset: ResetMode,
    pub spike_fn: SpikeFunction,
}

impl<R: Real> LifParams<R> {
    /// `alpha * max(0, 1 - |(u - theta) / theta|)`
    #[inline]
    pub fn surrogate(&self, u: R) -> R {
        let hat = R::one() - ((u - self.threshold) / self.threshold).abs();
        self.alpha * hat.max(R::zero())
    }

    #[inline]
    pub fn spike(&self, u: R) -> R {
        match self.spike_fn {
            SpikeFunction::Heaviside => {
                if u >= self.threshold {
                    R::one()
                } else {
                    R::zero()
                }
            }
            SpikeFunction::Relaxed => {
                let th = self.threshold;
                let two = R::of(2.0);
                let ramp = if u <= R::zero() {
                    R::zero()
                } else if u <= th {
                    u * u / (two * th)
                } else if u <= two * th {
                    let d = u - th;
                    th / two + d - d * d / (two * th)
                } else {
                    th
                };
                self.alpha * ramp
            }
        }
    }

    /// Derivative of the spike value as seen by the reset gate. The binary
    /// threshold is flat almost everywhere, so only the relaxed gate has one.
    #[inline]
    fn gate_derivative(&self, u: R) -> R {
        match self.spike_fn {
            SpikeFunction::Heaviside => R::zero(),
            SpikeFunction::Relaxed => self.surrogate(u),
        }
    }

    #[inline]
    pub fn reset(&self, u: R, s: R) -> R {
        match self.reset {
            ResetMode::Hard => u * (R::one() - s),
            ResetMode::Soft => u - self.threshold * s,
        }
    }

    /// `d u_post / d u_pre` through the reset, with the spike output path
    /// excluded (that path carries the surrogate).
    #[inline]
    pub fn reset_derivative(&self, u: R) -> R {
        let s = self.spike(u);
        let gate = self.gate_derivative(u);
        match self.reset {
            ResetMode::Hard => R::one() - s - u * gate,
            ResetMode::Soft => R::one() - self.threshold * gate,
        }
    }
}

/// One integration step of a layer of LIF neurons.
#[derive(Clone, Debug)]
pub struct LifOutput<R> {
    /// Potential carried to the next step (after reset).
    pub membrane: Tensor<R>,
    pub spikes: Tensor<R>,
    /// `leak * u_prev + input`, before thresholding.
    pub pre_reset: Tensor<R>,
}

pub fn lif_step<R: Real>(u_prev: &Tensor<R>, weighted_input: &Tensor<R>, params: &LifParams<R>) -> Result<LifOutput<R>> {
    let pre_reset = u_prev.zip_map(weighted_input, |u, x| params.leak * u + x)?;
    let spikes = pre_reset.map(|u| params.spike(u));
    let membrane = pre_reset.zip_map(&spikes, |u, s| params.reset(u, s))?;
    Ok(LifOutput {
        membrane,
        spikes,
        pre_reset,
    })
}

pub fn surrogate_grad<R: Real>(u: &Tensor<R>, params: &LifParams<R>) -> Tensor<R> {
    u.map(|v| params.surrogate(v))
}
