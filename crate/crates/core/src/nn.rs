//! Loss, plain SGD and named parameter snapshots.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// How normalization statistics are obtained during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics updated; caches kept for backward.
    Train,
    /// Running statistics; nothing cached.
    Eval,
    /// Batch statistics without touching running statistics. Used to score
    /// a model that has never seen a training batch.
    BatchStats,
}

impl Mode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

/// Cross-entropy of the softmax of one logit row, computed with max-subtraction.
pub fn cross_entropy<R: Real>(logits: &[R], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let as64: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let max = as64.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + as64.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - as64[label])
}

/// Mean cross-entropy over a batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<R: Real>(logits: &Tensor<R>, labels: &[usize]) -> Result<(f64, Tensor<R>)> {
    let (n, c) = match *logits.shape() {
        [n, c] if n == labels.len() => (n, c),
        ref s => {
            return Err(shape_err(format!(
                "logits {s:?} do not match {} labels",
                labels.len()
            )))
        }
    };
    let mut grad = Tensor::zeros(&[n, c]);
    let mut total = 0.0;
    let inv_n = R::one() / R::of(n as f64);
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        total += cross_entropy(row, label)?;
        let max = row.iter().copied().fold(R::neg_infinity(), R::max);
        let exps: Vec<R> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: R = exps.iter().copied().sum();
        let g = &mut grad.data_mut()[i * c..(i + 1) * c];
        for (j, (gj, e)) in g.iter_mut().zip(exps).enumerate() {
            let target = if j == label { R::one() } else { R::zero() };
            *gj = (e / z - target) * inv_n;
        }
    }
    Ok((total / n as f64, grad))
}

/// Index of the largest logit in each row (first on ties).
pub fn argmax_rows<R: Real>(logits: &Tensor<R>) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, R::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// `p -= eta * g` for every parameter.
pub fn sgd_step<R: Real>(params: &mut [&mut Tensor<R>], grads: &[Tensor<R>], eta: R) -> Result<()> {
    if params.len() != grads.len() {
        return Err(shape_err(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        p.expect_same_shape(g, "sgd_step")?;
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= eta * d;
        }
    }
    Ok(())
}

pub fn clip_elementwise<R: Real>(grads: &mut [Tensor<R>], limit: R) {
    for g in grads {
        for v in g.data_mut() {
            *v = v.max(-limit).min(limit);
        }
    }
}

/// Ordered, named tensors: everything a model exchanges with the server
/// (weights, scales and normalization statistics).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| shape_err(format!("parameter `{name}` missing")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same names in the same order with the same shapes.
    pub fn is_congruent(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let uniform = [0.7f64; 5];
        assert!((cross_entropy(&uniform, 2).unwrap() - 5f64.ln()).abs() < 1e-12);
        let l = cross_entropy(&[1000.0f32, -1000.0], 0).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-12);
        let l = cross_entropy(&[1.0f64, 0.0], 0).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
        assert!(cross_entropy(&[0.0f32, 0.0], 2).is_err());
    }

    #[test]
    fn batch_gradient_sums_to_zero_per_row() {
        let logits = Tensor::new(vec![2, 3], vec![0.1f64, 2.0, -1.0, 0.0, 0.0, 5.0]).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &[1, 0]).unwrap();
        for row in g.data().chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_examples() {
        let mut w = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let g = Tensor::new(vec![1], vec![0.5]).unwrap();
        sgd_step(&mut [&mut w], std::slice::from_ref(&g), 0.1).unwrap();
        assert!((w.data()[0] - 0.95).abs() < 1e-15);

        let orig = Tensor::from_fn(&[3, 2], |i| i as f32 * 0.37 - 0.2);
        let mut p = orig.clone();
        sgd_step(&mut [&mut p], &[Tensor::zeros(&[3, 2])], 0.1).unwrap();
        assert_eq!(p, orig);

        // power-of-two step and gradients keep the arithmetic exact
        let g = Tensor::from_fn(&[3, 2], |i| i as f32 * 0.25);
        sgd_step(&mut [&mut p], std::slice::from_ref(&g), 0.5).unwrap();
        sgd_step(&mut [&mut p], &[g.map(|v| -v)], 0.5).unwrap();
        assert_eq!(p, orig);
    }

    #[test]
    fn argmax_prefers_first_tie() {
        let l = Tensor::new(vec![2, 3], vec![1.0f32, 3.0, 3.0, -1.0, -2.0, -3.0]).unwrap();
        assert_eq!(argmax_rows(&l), vec![1, 0]);
    }
}
