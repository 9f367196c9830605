//! Image-to-spike-train encoders: receptive-field ternary encoding (NRFE) and
//! Poisson rate coding.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TemporalMode {
    /// A fresh receptive field is drawn for every time step.
    #[default]
    ResamplePerStep,
    /// One receptive field per channel serves all time steps.
    Static,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NrfeVariant {
    /// Three-branch rule on `q = x* + g`, comparisons inclusive.
    #[default]
    Literal,
    /// `+1` where `x* >= g`, otherwise `0`.
    Threshold,
}

/// Receptive-field encoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NrfeParams {
    pub side: usize,
    pub kernel_size: usize,
    pub batch_size: usize,
    pub channels: usize,
    pub epochs: usize,
    pub mu_g: f64,
    pub sigma_g: f64,
    pub temporal_mode: TemporalMode,
    pub variant: NrfeVariant,
}

/// Closed-form receptive-field mean and spread.
///
/// `mu_g = (1/s) Σ_{i=1..s} (2i-1) / (2(s-ks))`, which collapses to
/// `s / (2(s-ks))` because the odd numbers up to `2s-1` sum to `s²`;
/// `sigma_g = B·C·E / (s-ks)`.
pub fn receptive_field_params(
    side: usize,
    kernel_size: usize,
    batch_size: usize,
    channels: usize,
    epochs: usize,
) -> Result<NrfeParams> {
    if side <= kernel_size {
        return Err(Error::InvalidArgument(format!(
            "receptive field needs side > kernel size, got s={side}, ks={kernel_size}"
        )));
    }
    if batch_size == 0 || channels == 0 || epochs == 0 {
        return Err(Error::InvalidArgument(
            "batch size, channels and epochs must be at least 1".into(),
        ));
    }
    let gap = (side - kernel_size) as f64;
    Ok(NrfeParams {
        side,
        kernel_size,
        batch_size,
        channels,
        epochs,
        mu_g: side as f64 / (2.0 * gap),
        sigma_g: (batch_size * channels * epochs) as f64 / gap,
        temporal_mode: TemporalMode::default(),
        variant: NrfeVariant::default(),
    })
}

impl NrfeParams {
    /// Overrides the field distribution, e.g. `N(0, 1)` for the unshaped baseline.
    pub fn with_field(mut self, mu_g: f64, sigma_g: f64) -> Self {
        self.mu_g = mu_g;
        self.sigma_g = sigma_g;
        self
    }

    pub fn with_temporal_mode(mut self, mode: TemporalMode) -> Self {
        self.temporal_mode = mode;
        self
    }

    pub fn with_variant(mut self, variant: NrfeVariant) -> Self {
        self.variant = variant;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alphabet {
    /// {-1, 0, +1}
    Ternary,
    /// {0, 1}
    Binary,
    /// Unencoded normalized intensities.
    Analog,
}

impl Alphabet {
    pub fn contains(self, v: f32) -> bool {
        match self {
            Alphabet::Ternary => v == -1.0 || v == 0.0 || v == 1.0,
            Alphabet::Binary => v == 0.0 || v == 1.0,
            Alphabet::Analog => v.is_finite(),
        }
    }
}

/// `T` per-step tensors of shape `[C, s, s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTrain {
    pub steps: Vec<Tensor>,
    pub alphabet: Alphabet,
}

impl SpikeTrain {
    pub fn time_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn is_well_formed(&self) -> bool {
        self.steps.iter().all(|s| s.data().iter().all(|&v| self.alphabet.contains(v)))
    }

    pub fn nonzero_events(&self) -> usize {
        self.steps.iter().map(Tensor::count_nonzero).sum()
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [c, h, w] if h == w => Ok((c, h)),
        ref s => Err(shape_err(format!("image must be [C, s, s], got {s:?}"))),
    }
}

/// Per-channel min-max scaling to `[0, 1]`; constant channels become zeros.
pub fn normalize(image: &Tensor) -> Result<Tensor> {
    let (channels, side) = image_dims(image)?;
    let plane = side * side;
    let mut out = image.clone();
    for ch in out.data_mut().chunks_mut(plane).take(channels) {
        let (lo, hi) = ch
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        for v in ch.iter_mut() {
            *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
        }
    }
    Ok(out)
}

/// An `s × s` matrix of i.i.d. `N(mu_g, sigma_g²)` draws.
pub fn sample_gaussian_field(params: &NrfeParams, rng: &mut Rng) -> Tensor {
    let side = params.side;
    if params.sigma_g == 0.0 {
        return Tensor::full(&[side, side], params.mu_g as f32);
    }
    let normal = Normal::new(params.mu_g, params.sigma_g).expect("finite non-negative sigma");
    Tensor::from_fn(&[side, side], |_| normal.sample(rng) as f32)
}

/// Ternary code of one pixel from its normalized intensity and field value.
pub fn nrfe_code(x: f32, g: f32, variant: NrfeVariant) -> f32 {
    match variant {
        NrfeVariant::Literal => {
            let q = x + g;
            if q >= x && q >= g {
                1.0
            } else if q <= x && q <= g {
                -1.0
            } else {
                0.0
            }
        }
        NrfeVariant::Threshold => {
            if x >= g {
                1.0
            } else {
                0.0
            }
        }
    }
}

pub fn nrfe_encode(image: &Tensor, params: &NrfeParams, time_steps: usize, rng: &mut Rng) -> Result<SpikeTrain> {
    if time_steps == 0 {
        return Err(Error::InvalidArgument("time steps must be at least 1".into()));
    }
    let (channels, side) = image_dims(image)?;
    if side != params.side {
        return Err(shape_err(format!(
            "encoder configured for side {}, image has side {side}",
            params.side
        )));
    }
    let norm = normalize(image)?;
    let plane = side * side;
    let fields: Vec<Tensor> = match params.temporal_mode {
        TemporalMode::Static => (0..channels).map(|_| sample_gaussian_field(params, rng)).collect(),
        TemporalMode::ResamplePerStep => Vec::new(),
    };
    let mut steps = Vec::with_capacity(time_steps);
    for _ in 0..time_steps {
        let mut step = Tensor::zeros(&[channels, side, side]);
        for ch in 0..channels {
            let fresh;
            let field = match params.temporal_mode {
                TemporalMode::Static => &fields[ch],
                TemporalMode::ResamplePerStep => {
                    fresh = sample_gaussian_field(params, rng);
                    &fresh
                }
            };
            let xs = &norm.data()[ch * plane..(ch + 1) * plane];
            let out = &mut step.data_mut()[ch * plane..(ch + 1) * plane];
            for ((o, &x), &g) in out.iter_mut().zip(xs).zip(field.data()) {
                *o = nrfe_code(x, g, params.variant);
            }
        }
        steps.push(step);
    }
    Ok(SpikeTrain {
        steps,
        alphabet: Alphabet::Ternary,
    })
}

/// Each pixel fires independently with probability equal to its normalized intensity.
pub fn rate_encode(image: &Tensor, time_steps: usize, rng: &mut Rng) -> Result<SpikeTrain> {
    if time_steps == 0 {
        return Err(Error::InvalidArgument("time steps must be at least 1".into()));
    }
    let norm = normalize(image)?;
    let steps = (0..time_steps)
        .map(|_| {
            let mut step = norm.clone();
            for v in step.data_mut() {
                *v = if rng.random::<f32>() < *v { 1.0 } else { 0.0 };
            }
            step
        })
        .collect();
    Ok(SpikeTrain {
        steps,
        alphabet: Alphabet::Binary,
    })
}

/// How images reach the first layer of a spiking network.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    Nrfe(NrfeParams),
    Rate,
    /// Normalized intensities repeated at every step.
    Direct,
}

impl Encoder {
    pub fn encode(&self, image: &Tensor, time_steps: usize, rng: &mut Rng) -> Result<SpikeTrain> {
        match self {
            Encoder::Nrfe(p) => nrfe_encode(image, p, time_steps, rng),
            Encoder::Rate => rate_encode(image, time_steps, rng),
            Encoder::Direct => {
                if time_steps == 0 {
                    return Err(Error::InvalidArgument("time steps must be at least 1".into()));
                }
                let norm = normalize(image)?;
                Ok(SpikeTrain {
                    steps: vec![norm; time_steps],
                    alphabet: Alphabet::Analog,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn image(channels: &[&[f32]]) -> Tensor {
        let side = (channels[0].len() as f64).sqrt() as usize;
        let data: Vec<f32> = channels.iter().flat_map(|c| c.iter().copied()).collect();
        Tensor::new(vec![channels.len(), side, side], data).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let out = normalize(&image(&[&[0., 255., 0., 255.]])).unwrap();
        assert_eq!(out.data(), &[0., 1., 0., 1.]);
        let out = normalize(&image(&[&[10., 10., 10., 10.]])).unwrap();
        assert_eq!(out.data(), &[0.; 4]);
        let out = normalize(&image(&[&[0., 51., 255., 255.]])).unwrap();
        assert_eq!(out.data(), &[0., 0.2, 1., 1.]);
    }

    #[test]
    fn normalize_is_per_channel() {
        let out = normalize(&image(&[&[0., 100., 50., 100.], &[200., 250., 250., 225.]])).unwrap();
        assert_eq!(out.data(), &[0., 1., 0.5, 1., 0., 1., 1., 0.5]);
    }

    #[test]
    fn closed_forms_against_literal_sums() {
        for (s, ks, b, c, e) in [(28, 3, 8, 3, 2), (2, 1, 1, 1, 1), (16, 3, 8, 3, 2), (9, 5, 2, 1, 3)] {
            let p = receptive_field_params(s, ks, b, c, e).unwrap();
            let literal: f64 = (1..=s).map(|i| (2 * i - 1) as f64 / (2.0 * (s - ks) as f64)).sum::<f64>() / s as f64;
            assert!((p.mu_g - literal).abs() < 1e-12, "{s} {ks}");
            assert_eq!(p.sigma_g, (b * c * e) as f64 / (s - ks) as f64);
        }
        let p = receptive_field_params(28, 3, 8, 3, 2).unwrap();
        assert_eq!(p.mu_g, 0.56);
        assert_eq!(p.sigma_g, 1.92);
        let p = receptive_field_params(2, 1, 1, 1, 1).unwrap();
        assert_eq!((p.mu_g, p.sigma_g), (1.0, 1.0));
        assert!(receptive_field_params(3, 3, 1, 1, 1).is_err());
        assert!(receptive_field_params(2, 3, 1, 1, 1).is_err());
    }

    #[test]
    fn code_examples() {
        assert_eq!(nrfe_code(0.5, 0.3, NrfeVariant::Literal), 1.0);
        assert_eq!(nrfe_code(0.0, -0.2, NrfeVariant::Literal), -1.0);
        assert_eq!(nrfe_code(0.5, -0.2, NrfeVariant::Literal), 0.0);
        assert_eq!(nrfe_code(0.5, 0.3, NrfeVariant::Threshold), 1.0);
        assert_eq!(nrfe_code(0.2, 0.3, NrfeVariant::Threshold), 0.0);
    }

    #[test]
    fn degenerate_field_is_constant() {
        let p = receptive_field_params(4, 1, 1, 1, 1).unwrap().with_field(0.7, 0.0);
        let g = sample_gaussian_field(&p, &mut rng_from(1));
        assert!(g.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn field_statistics() {
        let p = receptive_field_params(28, 3, 8, 3, 2).unwrap();
        let mut rng = rng_from(11);
        let mut xs = Vec::new();
        while xs.len() < 10_000 {
            xs.extend(sample_gaussian_field(&p, &mut rng).data().iter().map(|&v| v as f64));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - 0.56).abs() <= 0.06, "mean {mean}");
        assert!((sd - 1.92).abs() <= 0.1, "sd {sd}");
        let a = sample_gaussian_field(&p, &mut rng_from(5));
        let b = sample_gaussian_field(&p, &mut rng_from(5));
        assert_eq!(a, b);
    }

    #[test]
    fn static_mode_repeats_steps() {
        let p = receptive_field_params(4, 1, 1, 1, 1).unwrap().with_temporal_mode(TemporalMode::Static);
        let img = Tensor::from_fn(&[2, 4, 4], |i| (i * 7 % 256) as f32);
        let train = nrfe_encode(&img, &p, 5, &mut rng_from(3)).unwrap();
        assert!(train.steps.windows(2).all(|w| w[0] == w[1]));
        let p = p.with_temporal_mode(TemporalMode::ResamplePerStep);
        let train = nrfe_encode(&img, &p, 5, &mut rng_from(3)).unwrap();
        assert!(train.steps.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn encode_rejects_zero_steps_and_wrong_side() {
        let p = receptive_field_params(4, 1, 1, 1, 1).unwrap();
        let img = Tensor::zeros(&[1, 4, 4]);
        assert!(nrfe_encode(&img, &p, 0, &mut rng_from(0)).is_err());
        assert!(nrfe_encode(&Tensor::zeros(&[1, 5, 5]), &p, 1, &mut rng_from(0)).is_err());
        assert!(rate_encode(&img, 0, &mut rng_from(0)).is_err());
    }

    #[test]
    fn rate_examples() {
        let zero = Tensor::zeros(&[1, 4, 4]);
        let t = rate_encode(&zero, 20, &mut rng_from(1)).unwrap();
        assert_eq!(t.nonzero_events(), 0);

        let img = image(&[&[0., 127.5, 255., 255.]]);
        let steps = 10_000;
        let t = rate_encode(&img, steps, &mut rng_from(9)).unwrap();
        assert!(t.is_well_formed());
        let fired = |px: usize| t.steps.iter().filter(|s| s.data()[px] == 1.0).count();
        assert_eq!(fired(0), 0);
        assert_eq!(fired(2), steps);
        let rate = fired(1) as f64 / steps as f64;
        assert!((rate - 0.5).abs() <= 0.05, "rate {rate}");
    }
}
