//! Batch normalization through time: one scale and one set of running
//! statistics per time step, no additive shift.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{batchnorm_backward, batchnorm_eval_forward, batchnorm_train_forward, BnCache};
use crate::nn::Mode;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BnttLayer<R = f32> {
    /// `[T, C]`; row `t` scales step `t` only.
    pub gamma: Tensor<R>,
    pub running_mean: Tensor<R>,
    pub running_var: Tensor<R>,
    /// `[1]`: number of training batches folded into the running statistics.
    pub tracked: Tensor<R>,
    pub epsilon: R,
    pub momentum: R,
}

impl<R: Real> BnttLayer<R> {
    pub fn new(time_steps: usize, channels: usize, epsilon: R, momentum: R) -> Self {
        Self {
            gamma: Tensor::full(&[time_steps, channels], R::one()),
            running_mean: Tensor::zeros(&[time_steps, channels]),
            running_var: Tensor::full(&[time_steps, channels], R::one()),
            tracked: Tensor::zeros(&[1]),
            epsilon,
            momentum,
        }
    }

    pub fn time_steps(&self) -> usize {
        self.gamma.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[1]
    }

    pub fn has_running_stats(&self) -> bool {
        self.tracked.data()[0] > R::zero()
    }

    fn row(t: &Tensor<R>, step: usize) -> &[R] {
        let c = t.shape()[1];
        &t.data()[step * c..(step + 1) * c]
    }

    fn row_mut(t: &mut Tensor<R>, step: usize) -> &mut [R] {
        let c = t.shape()[1];
        &mut t.data_mut()[step * c..(step + 1) * c]
    }

    /// Normalizes the step-`t` pre-activation. Returns the cache needed by
    /// [`BnttLayer::backward`] whenever batch statistics were used.
    pub fn forward(&mut self, x: &Tensor<R>, step: usize, mode: Mode) -> Result<(Tensor<R>, Option<BnCache<R>>)> {
        if step >= self.time_steps() {
            return Err(shape_err(format!(
                "time step {step} out of range for {} BNTT slices",
                self.time_steps()
            )));
        }
        match mode {
            Mode::Eval => {
                if !self.has_running_stats() {
                    return Err(Error::StatsUnavailable);
                }
                let y = batchnorm_eval_forward(
                    x,
                    Self::row(&self.gamma, step),
                    Self::row(&self.running_mean, step),
                    Self::row(&self.running_var, step),
                    self.epsilon,
                )?;
                Ok((y, None))
            }
            Mode::Train | Mode::BatchStats => {
                let (y, cache, moments) = batchnorm_train_forward(x, Self::row(&self.gamma, step), self.epsilon)?;
                if mode == Mode::Train {
                    let m = self.momentum;
                    let keep = R::one() - m;
                    let bessel = if moments.count > 1 {
                        R::of(moments.count as f64 / (moments.count - 1) as f64)
                    } else {
                        R::one()
                    };
                    for (r, &b) in Self::row_mut(&mut self.running_mean, step).iter_mut().zip(&moments.mean) {
                        *r = m * *r + keep * b;
                    }
                    for (r, &b) in Self::row_mut(&mut self.running_var, step).iter_mut().zip(&moments.var) {
                        *r = m * *r + keep * b * bessel;
                    }
                }
                Ok((y, Some(cache)))
            }
        }
    }

    /// Marks one more training batch as folded into the running statistics.
    pub fn count_batch(&mut self) {
        self.tracked.data_mut()[0] += R::one();
    }

    /// Returns `(grad_x, grad_gamma_t)` for step `t`.
    pub fn backward(&self, grad_u: &Tensor<R>, cache: Option<&BnCache<R>>, step: usize) -> Result<(Tensor<R>, Vec<R>)> {
        let cache = cache.ok_or(Error::MissingCache("BNTT step"))?;
        batchnorm_backward(grad_u, cache, Self::row(&self.gamma, step))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_before_training_is_rejected() {
        let mut bn = BnttLayer::<f32>::new(3, 2, 1e-5, 0.9);
        let x = Tensor::zeros(&[4, 2]);
        assert!(matches!(bn.forward(&x, 0, Mode::Eval), Err(Error::StatsUnavailable)));
        assert!(bn.forward(&x, 3, Mode::Train).is_err());
    }

    #[test]
    fn steps_have_independent_slices() {
        let mut bn = BnttLayer::<f64>::new(2, 1, 0.0, 0.9);
        bn.gamma.data_mut()[1] = 3.0;
        let x = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
        let (y0, _) = bn.forward(&x, 0, Mode::Train).unwrap();
        let (y1, _) = bn.forward(&x, 1, Mode::BatchStats).unwrap();
        assert_eq!(y0.data(), &[-1.0, 1.0]);
        assert_eq!(y1.data(), &[-3.0, 3.0]);
        // only step 0 was a training pass
        assert!((bn.running_mean.data()[0] - 0.1).abs() < 1e-12);
        assert_eq!(bn.running_mean.data()[1], 0.0);
    }

    #[test]
    fn identity_with_unit_moments() {
        let eps = 1e-3f64;
        let mut bn = BnttLayer::<f64>::new(1, 1, eps, 0.9);
        // mean 0, biased variance 1 - eps
        let a = (1.0 - eps).sqrt();
        let x = Tensor::new(vec![2, 1], vec![-a, a]).unwrap();
        let (y, _) = bn.forward(&x, 0, Mode::Train).unwrap();
        for (o, i) in y.data().iter().zip(x.data()) {
            assert!((o - i).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_and_single_sample() {
        let mut bn = BnttLayer::<f64>::new(1, 2, 1e-5, 0.9);
        let x = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 3.0, -2.0, 5.0]).unwrap();
        let (_, cache) = bn.forward(&x, 0, Mode::Train).unwrap();
        let (gx, gg) = bn.backward(&Tensor::zeros(x.shape()), cache.as_ref(), 0).unwrap();
        assert!(gx.data().iter().chain(&gg).all(|&v| v == 0.0));

        let g = Tensor::new(vec![1, 2, 1, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let (_, gg) = bn.backward(&g, cache.as_ref(), 0).unwrap();
        let xhat = cache.unwrap().normalized;
        assert!((gg[0] - (0.5 * xhat.data()[0] - 1.0 * xhat.data()[1])).abs() < 1e-12);
        assert!(bn.backward(&g, None, 0).is_err());
    }
}
