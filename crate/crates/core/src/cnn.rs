//! The conventional baseline: the same layer stack with ReLU activations and
//! ordinary scale-only batch norm, fed normalized pixels.

use crate::arch::{glorot_uniform, Architecture, ResolvedLayer};
use crate::error::{shape_err, Error, Result};
use crate::kernels::{
    avgpool_backward, avgpool_forward, batchnorm_backward, batchnorm_eval_forward, batchnorm_train_forward,
    conv2d_backward_impl, conv2d_forward, linear_backward, linear_forward, BnCache, ConvSpec,
};
use crate::nn::{clip_elementwise, sgd_step, softmax_cross_entropy, Mode, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CnnConfig {
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub grad_clip: Option<f64>,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            bn_epsilon: 1e-5,
            bn_momentum: 0.9,
            grad_clip: Some(5.0),
        }
    }
}

/// Scale-only batch norm (shift fixed at zero) with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<R = f32> {
    pub gamma: Tensor<R>,
    pub running_mean: Tensor<R>,
    pub running_var: Tensor<R>,
    pub tracked: Tensor<R>,
    pub epsilon: R,
    pub momentum: R,
}

impl<R: Real> BatchNorm<R> {
    pub fn new(channels: usize, epsilon: R, momentum: R) -> Self {
        Self {
            gamma: Tensor::full(&[channels], R::one()),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], R::one()),
            tracked: Tensor::zeros(&[1]),
            epsilon,
            momentum,
        }
    }

    pub fn has_running_stats(&self) -> bool {
        self.tracked.data()[0] > R::zero()
    }

    pub fn forward(&mut self, x: &Tensor<R>, mode: Mode) -> Result<(Tensor<R>, Option<BnCache<R>>)> {
        if mode == Mode::Eval {
            if !self.has_running_stats() {
                return Err(Error::StatsUnavailable);
            }
            let y = batchnorm_eval_forward(
                x,
                self.gamma.data(),
                self.running_mean.data(),
                self.running_var.data(),
                self.epsilon,
            )?;
            return Ok((y, None));
        }
        let (y, cache, moments) = batchnorm_train_forward(x, self.gamma.data(), self.epsilon)?;
        if mode == Mode::Train {
            let m = self.momentum;
            let keep = R::one() - m;
            let bessel = if moments.count > 1 {
                R::of(moments.count as f64 / (moments.count - 1) as f64)
            } else {
                R::one()
            };
            for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&moments.mean) {
                *r = m * *r + keep * b;
            }
            for (r, &b) in self.running_var.data_mut().iter_mut().zip(&moments.var) {
                *r = m * *r + keep * b * bessel;
            }
            self.tracked.data_mut()[0] += R::one();
        }
        Ok((y, Some(cache)))
    }

    pub fn backward(&self, grad_y: &Tensor<R>, cache: Option<&BnCache<R>>) -> Result<(Tensor<R>, Tensor<R>)> {
        let cache = cache.ok_or(Error::MissingCache("batch norm"))?;
        let (gx, gg) = batchnorm_backward(grad_y, cache, self.gamma.data())?;
        Ok((gx, Tensor::new(self.gamma.shape().to_vec(), gg)?))
    }
}

#[derive(Clone, Debug)]
enum CnnLayer<R: Real> {
    Activated {
        conv: Option<ConvSpec>,
        weight: Tensor<R>,
        bn: BatchNorm<R>,
        resolved: ResolvedLayer,
    },
    Pool {
        window: usize,
    },
}

#[derive(Clone, Debug)]
enum LayerCache<R: Real> {
    Activated {
        in_shape: Vec<usize>,
        input: Tensor<R>,
        bn: Option<BnCache<R>>,
        /// ReLU input.
        normalized: Tensor<R>,
    },
    Pool {
        in_shape: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
struct ForwardCache<R: Real> {
    layers: Vec<LayerCache<R>>,
    head_input: Tensor<R>,
    head_in_shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct CnnModel<R: Real = f32> {
    arch: Architecture,
    config: CnnConfig,
    layers: Vec<CnnLayer<R>>,
    head: Tensor<R>,
    head_layer: ResolvedLayer,
    cache: Option<ForwardCache<R>>,
}

fn flatten<R: Real>(x: Tensor<R>, batch: usize) -> Result<Tensor<R>> {
    if x.rank() == 2 {
        return Ok(x);
    }
    let flat = x.len() / batch;
    x.reshape(&[batch, flat])
}

impl<R: Real> CnnModel<R> {
    /// Weights are drawn in the same order and with the same shapes as the
    /// spiking model, so equal seeds give equal initial weights.
    pub fn new(arch: Architecture, config: CnnConfig, rng: &mut Rng) -> Result<Self> {
        if !(config.bn_epsilon > 0.0) || !(config.bn_momentum > 0.0 && config.bn_momentum < 1.0) {
            return Err(Error::InvalidArgument("bn epsilon must be positive and momentum in (0, 1)".into()));
        }
        let (eps, momentum) = (R::of(config.bn_epsilon), R::of(config.bn_momentum));
        let mut layers = Vec::new();
        let mut head = None;
        for layer in arch.resolve()? {
            match &layer {
                ResolvedLayer::Conv { spec, .. } => layers.push(CnnLayer::Activated {
                    conv: Some(*spec),
                    weight: glorot_uniform(&spec.weight_shape(), rng),
                    bn: BatchNorm::new(spec.out_channels, eps, momentum),
                    resolved: layer.clone(),
                }),
                ResolvedLayer::Dense {
                    in_features,
                    out_features,
                    ..
                } => layers.push(CnnLayer::Activated {
                    conv: None,
                    weight: glorot_uniform(&[*out_features, *in_features], rng),
                    bn: BatchNorm::new(*out_features, eps, momentum),
                    resolved: layer.clone(),
                }),
                ResolvedLayer::AvgPool { window, .. } => layers.push(CnnLayer::Pool { window: *window }),
                ResolvedLayer::Head {
                    in_features,
                    out_features,
                    ..
                } => head = Some((glorot_uniform(&[*out_features, *in_features], rng), layer.clone())),
            }
        }
        let (head, head_layer) = head.expect("resolve always ends with a head");
        Ok(Self {
            arch,
            config,
            layers,
            head,
            head_layer,
            cache: None,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn has_running_stats(&self) -> bool {
        self.layers.iter().all(|l| match l {
            CnnLayer::Activated { bn, .. } => bn.has_running_stats(),
            CnnLayer::Pool { .. } => true,
        })
    }

    /// Logits for a `[N, C, s, s]` batch of normalized images.
    pub fn forward(&mut self, input: &Tensor<R>, mode: Mode) -> Result<Tensor<R>> {
        let expected = [self.arch.in_channels, self.arch.input_side, self.arch.input_side];
        let batch = match input.shape() {
            [n, rest @ ..] if rest == expected => *n,
            s => return Err(shape_err(format!("input {s:?} does not match [N, {expected:?}]"))),
        };
        let keep_cache = mode.uses_batch_stats();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &mut self.layers {
            match layer {
                CnnLayer::Activated { conv, weight, bn, .. } => {
                    let in_shape = x.shape().to_vec();
                    let xin = match conv {
                        Some(_) => x,
                        None => flatten(x, batch)?,
                    };
                    let z = match conv {
                        Some(spec) => conv2d_forward(&xin, weight, spec)?,
                        None => linear_forward(&xin, weight)?,
                    };
                    let (y, bn_cache) = bn.forward(&z, mode)?;
                    x = y.map(|v| v.max(R::zero()));
                    if keep_cache {
                        caches.push(LayerCache::Activated {
                            in_shape,
                            input: xin,
                            bn: bn_cache,
                            normalized: y,
                        });
                    }
                }
                CnnLayer::Pool { window } => {
                    if keep_cache {
                        caches.push(LayerCache::Pool {
                            in_shape: x.shape().to_vec(),
                        });
                    }
                    x = avgpool_forward(&x, *window)?;
                }
            }
        }
        let head_in_shape = x.shape().to_vec();
        let xin = flatten(x, batch)?;
        let logits = linear_forward(&xin, &self.head)?;
        self.cache = keep_cache.then_some(ForwardCache {
            layers: caches,
            head_input: xin,
            head_in_shape,
        });
        Ok(logits)
    }

    /// Gradients in [`CnnModel::trainable_mut`] order; no clipping.
    pub fn backward(&self, grad_logits: &Tensor<R>) -> Result<Vec<Tensor<R>>> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache("CNN forward pass"))?;
        let (gx, head_grad) = linear_backward(grad_logits, &cache.head_input, &self.head)?;
        let mut upstream = gx.reshape(&cache.head_in_shape)?;
        let first_weighted = self
            .layers
            .iter()
            .position(|l| matches!(l, CnnLayer::Activated { .. }));
        let mut layer_grads = Vec::new();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            match (layer, &cache.layers[li]) {
                (CnnLayer::Pool { window }, LayerCache::Pool { in_shape }) => {
                    upstream = avgpool_backward(&upstream, in_shape, *window)?;
                }
                (
                    CnnLayer::Activated { conv, weight, bn, .. },
                    LayerCache::Activated {
                        in_shape,
                        input,
                        bn: bn_cache,
                        normalized,
                    },
                ) => {
                    let need_input = Some(li) != first_weighted;
                    let g_relu = upstream.zip_map(normalized, |g, y| if y > R::zero() { g } else { R::zero() })?;
                    let (gz, g_gamma) = bn.backward(&g_relu, bn_cache.as_ref())?;
                    let (gx, gw) = match conv {
                        Some(spec) => conv2d_backward_impl(&gz, input, weight, spec, need_input)?,
                        None => {
                            let (gx, gw) = linear_backward(&gz, input, weight)?;
                            (Some(gx), gw)
                        }
                    };
                    layer_grads.push((gw, g_gamma));
                    match gx {
                        Some(g) => upstream = g.reshape(in_shape)?,
                        None => break,
                    }
                }
                _ => return Err(Error::MissingCache("layer cache mismatch")),
            }
        }
        layer_grads.reverse();
        let mut grads = Vec::with_capacity(layer_grads.len() * 2 + 1);
        for (w, g) in layer_grads {
            grads.push(w);
            grads.push(g);
        }
        grads.push(head_grad);
        Ok(grads)
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let CnnLayer::Activated { weight, bn, .. } = layer {
                out.push(weight);
                out.push(&mut bn.gamma);
            }
        }
        out.push(&mut self.head);
        out
    }

    pub fn trainable(&self) -> Vec<&Tensor<R>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let CnnLayer::Activated { weight, bn, .. } = layer {
                out.push(weight);
                out.push(&bn.gamma);
            }
        }
        out.push(&self.head);
        out
    }

    pub fn train_batch(&mut self, input: &Tensor<R>, labels: &[usize], eta: f64) -> Result<f64> {
        let logits = self.forward(input, Mode::Train)?;
        let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
        let mut grads = self.backward(&grad)?;
        self.cache = None;
        if let Some(limit) = self.config.grad_clip {
            clip_elementwise(&mut grads, R::of(limit));
        }
        sgd_step(&mut self.trainable_mut(), &grads, R::of(eta))?;
        Ok(loss)
    }

    pub fn predict(&mut self, input: &Tensor<R>) -> Result<Tensor<R>> {
        let mode = if self.has_running_stats() { Mode::Eval } else { Mode::BatchStats };
        let out = self.forward(input, mode);
        self.cache = None;
        out
    }

    pub fn param_set(&self) -> ParamSet {
        let mut set = ParamSet::new();
        for layer in &self.layers {
            if let CnnLayer::Activated { weight, bn, resolved, .. } = layer {
                let bn_name = resolved.bn_prefix().expect("activated layers are normalized");
                set.push(format!("{}.weight", resolved.prefix()), weight.cast());
                set.push(format!("{bn_name}.gamma"), bn.gamma.cast());
                set.push(format!("{bn_name}.running_mean"), bn.running_mean.cast());
                set.push(format!("{bn_name}.running_var"), bn.running_var.cast());
                set.push(format!("{bn_name}.tracked"), bn.tracked.cast());
            }
        }
        set.push(format!("{}.weight", self.head_layer.prefix()), self.head.cast());
        set
    }

    pub fn load_param_set(&mut self, set: &ParamSet) -> Result<()> {
        if !self.param_set().is_congruent(set) {
            return Err(shape_err("parameter set does not match this architecture"));
        }
        let mut it = set.iter().map(|(_, t)| t.cast::<R>());
        for layer in &mut self.layers {
            if let CnnLayer::Activated { weight, bn, .. } = layer {
                *weight = it.next().expect("congruent");
                bn.gamma = it.next().expect("congruent");
                bn.running_mean = it.next().expect("congruent");
                bn.running_var = it.next().expect("congruent");
                bn.tracked = it.next().expect("congruent");
            }
        }
        self.head = it.next().expect("congruent");
        self.cache = None;
        Ok(())
    }
}
