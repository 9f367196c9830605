use crate::arch::{glorot_uniform, Architecture, ResolvedLayer};
use crate::encoding::SpikeTrain;
use crate::error::{shape_err, Error, Result};
use crate::kernels::{avgpool_backward, avgpool_forward, conv2d_backward_impl, conv2d_forward, linear_backward, linear_forward, BnCache, ConvSpec};
use crate::nn::{clip_elementwise, sgd_step, softmax_cross_entropy, ParamSet};
use crate::rng::Rng;
use crate::nn::Mode;
use crate::snn::bntt::BnttLayer;
use crate::snn::neuron::{lif_step, LifParams};
use crate::snn::SnnConfig;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Conv(ConvSpec),
    Dense,
}

#[derive(Clone, Debug)]
enum SnnLayer<R: Real> {
    Spiking {
        op: Op,
        weight: Tensor<R>,
        bn: BnttLayer<R>,
        resolved: ResolvedLayer,
    },
    Pool {
        window: usize,
    },
}

#[derive(Clone, Debug)]
enum LayerCache<R: Real> {
    Spiking {
        /// Shape of the incoming activation before any flattening.
        in_shape: Vec<usize>,
        inputs: Vec<Tensor<R>>,
        bn: Vec<Option<BnCache<R>>>,
        pre_reset: Vec<Tensor<R>>,
    },
    Pool {
        in_shape: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
struct ForwardCache<R: Real> {
    layers: Vec<LayerCache<R>>,
    head_inputs: Vec<Tensor<R>>,
    /// Shape of the last hidden activation, before flattening into the head.
    head_in_shape: Vec<usize>,
}

/// Event and spike counts accumulated over forward passes.
///
/// Counts are sums over samples and time steps; rates divide by the number of
/// (unit, step, sample) slots, so every rate lies in `[0, 1]` for binary spikes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpikeRecorder {
    /// Per weighted layer (head included): `(nonzero inputs, input slots)`.
    pub input_events: Vec<(f64, f64)>,
    /// Per spiking layer: `(spikes, neuron slots)`.
    pub firing: Vec<(f64, f64)>,
    pub samples: usize,
}

impl SpikeRecorder {
    fn ensure(&mut self, weighted: usize, spiking: usize) {
        if self.input_events.len() != weighted {
            self.input_events = vec![(0.0, 0.0); weighted];
        }
        if self.firing.len() != spiking {
            self.firing = vec![(0.0, 0.0); spiking];
        }
    }

    pub fn input_rates(&self) -> Vec<f64> {
        self.input_events.iter().map(|&(n, d)| if d > 0.0 { n / d } else { 0.0 }).collect()
    }

    pub fn firing_rates(&self) -> Vec<f64> {
        self.firing.iter().map(|&(n, d)| if d > 0.0 { n / d } else { 0.0 }).collect()
    }

    /// Associative merge of two recorders over the same architecture.
    pub fn merge(&mut self, other: &SpikeRecorder) {
        self.ensure(other.input_events.len(), other.firing.len());
        for (a, b) in self.input_events.iter_mut().zip(&other.input_events) {
            a.0 += b.0;
            a.1 += b.1;
        }
        for (a, b) in self.firing.iter_mut().zip(&other.firing) {
            a.0 += b.0;
            a.1 += b.1;
        }
        self.samples += other.samples;
    }
}

/// Stacks per-sample spike trains into per-step `[N, C, s, s]` batches.
pub fn stack_trains<R: Real>(trains: &[&SpikeTrain]) -> Result<Vec<Tensor<R>>> {
    let first = trains.first().ok_or_else(|| shape_err("empty batch"))?;
    let steps = first.time_steps();
    if trains.iter().any(|t| t.time_steps() != steps) {
        return Err(shape_err("spike trains in a batch differ in length"));
    }
    (0..steps)
        .map(|t| {
            let items: Vec<&Tensor> = trains.iter().map(|tr| &tr.steps[t]).collect();
            Ok(Tensor::stack(&items)?.cast())
        })
        .collect()
}

/// The spiking classifier: hidden LIF layers with BNTT and a leaky,
/// non-firing accumulator head whose final-step potentials are the logits.
#[derive(Clone, Debug)]
pub struct SnnModel<R: Real = f32> {
    arch: Architecture,
    config: SnnConfig,
    layers: Vec<SnnLayer<R>>,
    head: Tensor<R>,
    head_layer: ResolvedLayer,
    cache: Option<ForwardCache<R>>,
    recorder: SpikeRecorder,
}

impl<R: Real> SnnModel<R> {
    pub fn new(arch: Architecture, config: SnnConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let resolved = arch.resolve()?;
        let (eps, momentum) = (R::of(config.bn_epsilon), R::of(config.bn_momentum));
        let mut layers = Vec::new();
        let mut head = None;
        for layer in resolved {
            match &layer {
                ResolvedLayer::Conv { spec, .. } => layers.push(SnnLayer::Spiking {
                    op: Op::Conv(*spec),
                    weight: glorot_uniform(&spec.weight_shape(), rng),
                    bn: BnttLayer::new(config.time_steps, spec.out_channels, eps, momentum),
                    resolved: layer.clone(),
                }),
                ResolvedLayer::Dense {
                    in_features,
                    out_features,
                    ..
                } => layers.push(SnnLayer::Spiking {
                    op: Op::Dense,
                    weight: glorot_uniform(&[*out_features, *in_features], rng),
                    bn: BnttLayer::new(config.time_steps, *out_features, eps, momentum),
                    resolved: layer.clone(),
                }),
                ResolvedLayer::AvgPool { window, .. } => layers.push(SnnLayer::Pool { window: *window }),
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
            recorder: SpikeRecorder::default(),
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn config(&self) -> &SnnConfig {
        &self.config
    }

    pub fn recorder(&self) -> &SpikeRecorder {
        &self.recorder
    }

    pub fn reset_recorder(&mut self) {
        self.recorder = SpikeRecorder::default();
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn spiking_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, SnnLayer::Spiking { .. })).count()
    }

    /// True once every BNTT layer has folded in at least one training batch.
    pub fn has_running_stats(&self) -> bool {
        self.layers.iter().all(|l| match l {
            SnnLayer::Spiking { bn, .. } => bn.has_running_stats(),
            SnnLayer::Pool { .. } => true,
        })
    }

    /// Unrolls the network over the `T` input steps (each `[N, C, s, s]`) and
    /// returns the head's step-`T` membrane potentials, `[N, classes]`.
    pub fn forward(&mut self, input: &[Tensor<R>], mode: Mode) -> Result<Tensor<R>> {
        let steps = self.config.time_steps;
        if input.len() != steps {
            return Err(shape_err(format!(
                "model runs {steps} time steps, input has {}",
                input.len()
            )));
        }
        let expected = [self.arch.in_channels, self.arch.input_side, self.arch.input_side];
        let batch = match input[0].shape() {
            [n, rest @ ..] if rest == expected => *n,
            s => return Err(shape_err(format!("input step {s:?} does not match [N, {expected:?}]"))),
        };
        if input.iter().any(|x| x.shape() != input[0].shape()) {
            return Err(shape_err("input steps differ in shape"));
        }
        let lif: LifParams<R> = self.config.lif_params();
        let keep_cache = mode.uses_batch_stats();
        let spiking = self.spiking_count();
        self.recorder.ensure(spiking + 1, spiking);
        self.recorder.samples += batch;

        let mut caches: Vec<LayerCache<R>> = Vec::new();
        let mut head_inputs = Vec::new();
        let mut head_in_shape = Vec::new();
        let mut membranes: Vec<Option<Tensor<R>>> = vec![None; self.layers.len()];
        let classes = self.arch.num_classes;
        let mut head_u = Tensor::zeros(&[batch, classes]);

        for (t, x_t) in input.iter().enumerate() {
            let mut x = x_t.clone();
            let (mut wi, mut si) = (0, 0);
            for (li, layer) in self.layers.iter_mut().enumerate() {
                match layer {
                    SnnLayer::Spiking { op, weight, bn, .. } => {
                        let in_shape = x.shape().to_vec();
                        let xin = match op {
                            Op::Dense if x.rank() != 2 => {
                                let flat = x.len() / batch;
                                x.reshape(&[batch, flat])?
                            }
                            _ => x,
                        };
                        let ev = &mut self.recorder.input_events[wi];
                        ev.0 += xin.count_nonzero() as f64;
                        ev.1 += xin.len() as f64;
                        let z = match op {
                            Op::Conv(spec) => conv2d_forward(&xin, weight, spec)?,
                            Op::Dense => linear_forward(&xin, weight)?,
                        };
                        let (y, bn_cache) = bn.forward(&z, t, mode)?;
                        let u_prev = membranes[li].take().unwrap_or_else(|| Tensor::zeros(y.shape()));
                        let out = lif_step(&u_prev, &y, &lif)?;
                        let fire = &mut self.recorder.firing[si];
                        fire.0 += out.spikes.sum().to_f64().unwrap_or(0.0);
                        fire.1 += out.spikes.len() as f64;
                        membranes[li] = Some(out.membrane);
                        if keep_cache {
                            if t == 0 {
                                caches.push(LayerCache::Spiking {
                                    in_shape,
                                    inputs: Vec::with_capacity(steps),
                                    bn: Vec::with_capacity(steps),
                                    pre_reset: Vec::with_capacity(steps),
                                });
                            }
                            if let LayerCache::Spiking { inputs, bn, pre_reset, .. } = &mut caches[li] {
                                inputs.push(xin);
                                bn.push(bn_cache);
                                pre_reset.push(out.pre_reset);
                            }
                        }
                        x = out.spikes;
                        wi += 1;
                        si += 1;
                    }
                    SnnLayer::Pool { window } => {
                        if keep_cache && t == 0 {
                            caches.push(LayerCache::Pool {
                                in_shape: x.shape().to_vec(),
                            });
                        }
                        x = avgpool_forward(&x, *window)?;
                    }
                }
            }
            if t == 0 {
                head_in_shape = x.shape().to_vec();
            }
            let xin = if x.rank() != 2 {
                let flat = x.len() / batch;
                x.reshape(&[batch, flat])?
            } else {
                x
            };
            let ev = &mut self.recorder.input_events[wi];
            ev.0 += xin.count_nonzero() as f64;
            ev.1 += xin.len() as f64;
            let z = linear_forward(&xin, &self.head)?;
            let leak = lif.leak;
            for (u, &zi) in head_u.data_mut().iter_mut().zip(z.data()) {
                *u = leak * *u + zi;
            }
            if keep_cache {
                head_inputs.push(xin);
            }
        }

        if mode == Mode::Train {
            for layer in &mut self.layers {
                if let SnnLayer::Spiking { bn, .. } = layer {
                    bn.count_batch();
                }
            }
        }
        self.cache = keep_cache.then_some(ForwardCache {
            layers: caches,
            head_inputs,
            head_in_shape,
        });
        Ok(head_u)
    }

    /// Backpropagation through time from `dL/dlogits`. Gradients come back in
    /// [`SnnModel::trainable_mut`] order: per spiking layer its weights then
    /// its `[T, C]` scales, then the head weights. No clipping is applied.
    pub fn backward(&self, grad_logits: &Tensor<R>) -> Result<Vec<Tensor<R>>> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache("SNN forward pass"))?;
        if grad_logits.shape() != [grad_logits.shape()[0], self.arch.num_classes] {
            return Err(shape_err("logit gradient has the wrong shape"));
        }
        let lif: LifParams<R> = self.config.lif_params();
        let steps = self.config.time_steps;

        // Head: u_T = Σ_t leak^(T-1-t) · W x_t
        let mut head_grad = Tensor::zeros(self.head.shape());
        let mut upstream: Vec<Tensor<R>> = Vec::with_capacity(steps);
        let mut coef = R::one();
        let mut coefs = vec![R::one(); steps];
        for c in coefs.iter_mut().rev() {
            *c = coef;
            coef *= lif.leak;
        }
        for t in 0..steps {
            let mut gz = grad_logits.clone();
            gz.scale(coefs[t]);
            let (gx, gw) = linear_backward(&gz, &cache.head_inputs[t], &self.head)?;
            head_grad.add_assign(&gw)?;
            upstream.push(gx.reshape(&cache.head_in_shape)?);
        }

        let first_weighted = self
            .layers
            .iter()
            .position(|l| matches!(l, SnnLayer::Spiking { .. }));
        let mut layer_grads: Vec<(Tensor<R>, Tensor<R>)> = Vec::new();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            match (layer, &cache.layers[li]) {
                (SnnLayer::Pool { window }, LayerCache::Pool { in_shape }) => {
                    for g in upstream.iter_mut() {
                        *g = avgpool_backward(g, in_shape, *window)?;
                    }
                }
                (
                    SnnLayer::Spiking { op, weight, bn, .. },
                    LayerCache::Spiking {
                        in_shape,
                        inputs,
                        bn: bn_caches,
                        pre_reset,
                    },
                ) => {
                    let need_input = Some(li) != first_weighted;
                    let mut grad_w = Tensor::zeros(weight.shape());
                    let mut grad_gamma = Tensor::zeros(bn.gamma.shape());
                    let channels = bn.channels();
                    let mut next: Option<Tensor<R>> = None;
                    for t in (0..steps).rev() {
                        let u = &pre_reset[t];
                        let gs = &upstream[t];
                        gs.expect_same_shape(u, "spike gradient")?;
                        let mut du = Tensor::zeros(u.shape());
                        {
                            let dd = du.data_mut();
                            for (i, (&ui, &gi)) in u.data().iter().zip(gs.data()).enumerate() {
                                dd[i] = gi * lif.surrogate(ui);
                            }
                            if let Some(nx) = &next {
                                for (i, (&ui, &ni)) in u.data().iter().zip(nx.data()).enumerate() {
                                    dd[i] += lif.reset_derivative(ui) * lif.leak * ni;
                                }
                            }
                        }
                        let (gz, gg) = bn.backward(&du, bn_caches[t].as_ref(), t)?;
                        grad_gamma.data_mut()[t * channels..(t + 1) * channels].copy_from_slice(&gg);
                        let (gx, gw) = match op {
                            Op::Conv(spec) => conv2d_backward_impl(&gz, &inputs[t], weight, spec, need_input)?,
                            Op::Dense => {
                                let (gx, gw) = linear_backward(&gz, &inputs[t], weight)?;
                                (Some(gx), gw)
                            }
                        };
                        grad_w.add_assign(&gw)?;
                        upstream[t] = match gx {
                            Some(g) => g.reshape(in_shape)?,
                            None => Tensor::zeros(&[1]),
                        };
                        next = Some(du);
                    }
                    layer_grads.push((grad_w, grad_gamma));
                    if !need_input {
                        // only parameter-free pooling can sit below the first weighted layer
                        break;
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
            if let SnnLayer::Spiking { weight, bn, .. } = layer {
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
            if let SnnLayer::Spiking { weight, bn, .. } = layer {
                out.push(weight);
                out.push(&bn.gamma);
            }
        }
        out.push(&self.head);
        out
    }

    /// Mean batch loss and its logit gradient for the cached forward pass.
    pub fn loss(&self, logits: &Tensor<R>, labels: &[usize]) -> Result<(f64, Tensor<R>)> {
        softmax_cross_entropy(logits, labels)
    }

    /// Forward, BPTT, optional clipping and one SGD step. Returns the mean loss.
    pub fn train_batch(&mut self, input: &[Tensor<R>], labels: &[usize], eta: f64) -> Result<f64> {
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

    /// Logits for inference, with running statistics once they exist.
    pub fn predict(&mut self, input: &[Tensor<R>]) -> Result<Tensor<R>> {
        let mode = if self.has_running_stats() { Mode::Eval } else { Mode::BatchStats };
        let out = self.forward(input, mode);
        self.cache = None;
        out
    }

    /// Every exchanged tensor, in layer order.
    pub fn param_set(&self) -> ParamSet {
        let mut set = ParamSet::new();
        for layer in &self.layers {
            if let SnnLayer::Spiking { weight, bn, resolved, .. } = layer {
                let bn_name = resolved.bn_prefix().expect("spiking layers are normalized");
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
        let mine = self.param_set();
        if !mine.is_congruent(set) {
            return Err(shape_err("parameter set does not match this architecture"));
        }
        let mut it = set.iter().map(|(_, t)| t.cast::<R>());
        for layer in &mut self.layers {
            if let SnnLayer::Spiking { weight, bn, .. } = layer {
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
