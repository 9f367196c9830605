//! Synchronous FedAvg: client sampling, local training, size-weighted
//! aggregation and evaluation, round by round.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::{index, SliceRandom};

use crate::arch::Architecture;
use crate::cnn::{CnnConfig, CnnModel};
use crate::data::LabeledDataset;
use crate::encoding::{Encoder, SpikeTrain};
use crate::error::{shape_err, Error, Result};
use crate::nn::{argmax_rows, ParamSet};
use crate::rng::{derived_rng, stream};
use crate::snn::{stack_trains, SnnConfig, SnnModel, SpikeRecorder};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Snn,
    Cnn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FedConfig {
    pub clients: usize,
    /// Participation fraction `F` in (0, 1].
    pub fraction: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rounds: usize,
    pub eval_batch: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            clients: 20,
            fraction: 0.5,
            local_epochs: 2,
            batch_size: 8,
            learning_rate: 0.1,
            rounds: 100,
            eval_batch: 64,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.clients == 0 {
            return bad("need at least one client");
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad("participation fraction must lie in (0, 1]");
        }
        if self.local_epochs == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return bad("epochs and batch sizes must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        Ok(())
    }

    /// `max(round_half_up(F * K), 1)`, never more than `K`.
    pub fn clients_per_round(&self) -> usize {
        let m = (self.fraction * self.clients as f64 + 0.5).floor() as usize;
        m.clamp(1, self.clients)
    }
}

/// Uniform sample without replacement, ascending ids.
pub fn select_clients(config: &FedConfig, seed: u64, round: usize) -> Vec<usize> {
    let mut rng = derived_rng(seed, &[stream::SELECT, round as u64]);
    let mut ids = index::sample(&mut rng, config.clients, config.clients_per_round()).into_vec();
    ids.sort_unstable();
    ids
}

/// Either network, behind one training and inference interface.
#[derive(Clone, Debug)]
pub enum Model {
    Snn(SnnModel),
    Cnn(CnnModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Snn(_) => ModelKind::Snn,
            Model::Cnn(_) => ModelKind::Cnn,
        }
    }

    /// Steps per input sample: the SNN's `T`, 1 for the CNN.
    pub fn time_steps(&self) -> usize {
        match self {
            Model::Snn(m) => m.config().time_steps,
            Model::Cnn(_) => 1,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        match self {
            Model::Snn(m) => m.architecture(),
            Model::Cnn(m) => m.architecture(),
        }
    }

    pub fn param_set(&self) -> ParamSet {
        match self {
            Model::Snn(m) => m.param_set(),
            Model::Cnn(m) => m.param_set(),
        }
    }

    pub fn load_param_set(&mut self, set: &ParamSet) -> Result<()> {
        match self {
            Model::Snn(m) => m.load_param_set(set),
            Model::Cnn(m) => m.load_param_set(set),
        }
    }

    /// One SGD step on a batch of per-step inputs (a single step for the CNN).
    pub fn train_batch(&mut self, steps: &[Tensor], labels: &[usize], eta: f64) -> Result<f64> {
        match self {
            Model::Snn(m) => m.train_batch(steps, labels, eta),
            Model::Cnn(m) => m.train_batch(single(steps)?, labels, eta),
        }
    }

    pub fn predict(&mut self, steps: &[Tensor]) -> Result<Tensor> {
        match self {
            Model::Snn(m) => m.predict(steps),
            Model::Cnn(m) => m.predict(single(steps)?),
        }
    }
}

fn single(steps: &[Tensor]) -> Result<&Tensor> {
    match steps {
        [x] => Ok(x),
        _ => Err(shape_err(format!("the CNN takes one input step, got {}", steps.len()))),
    }
}

/// Everything a run needs besides the data.
#[derive(Clone, Debug)]
pub struct Setup {
    pub fed: FedConfig,
    pub model: ModelKind,
    pub snn: SnnConfig,
    pub cnn: CnnConfig,
    /// Input encoder of the spiking network; the CNN always sees normalized pixels.
    pub encoder: Encoder,
    pub arch: Architecture,
    pub seed: u64,
    /// Fill the `wall_ms` column. Off by default so metrics stay byte-identical.
    pub record_time: bool,
}

impl Setup {
    pub fn validate(&self) -> Result<()> {
        self.fed.validate()?;
        self.snn.validate()?;
        self.arch.resolve()?;
        Ok(())
    }

    /// Steps per encoded sample.
    pub fn time_steps(&self) -> usize {
        match self.model {
            ModelKind::Snn => self.snn.time_steps,
            ModelKind::Cnn => 1,
        }
    }

    fn input_encoder(&self) -> &Encoder {
        match self.model {
            ModelKind::Snn => &self.encoder,
            ModelKind::Cnn => &Encoder::Direct,
        }
    }

    /// Freshly initialized model from the experiment's init stream.
    pub fn init_model(&self) -> Result<Model> {
        let mut rng = derived_rng(self.seed, &[stream::INIT]);
        Ok(match self.model {
            ModelKind::Snn => Model::Snn(SnnModel::new(self.arch.clone(), self.snn.clone(), &mut rng)?),
            ModelKind::Cnn => Model::Cnn(CnnModel::new(self.arch.clone(), self.cnn.clone(), &mut rng)?),
        })
    }

    /// Encodes image `i` of a training shard for `(round, client)`.
    pub fn encode_train(&self, shard: &LabeledDataset, round: usize, client: usize, i: usize) -> Result<SpikeTrain> {
        let mut rng = derived_rng(self.seed, &[stream::ENCODE, round as u64, client as u64, i as u64]);
        self.input_encoder().encode(&shard.image(i), self.time_steps(), &mut rng)
    }

    /// Encodes a test set with the fixed evaluation stream.
    pub fn encode_test(&self, test: &LabeledDataset) -> Result<Vec<SpikeTrain>> {
        encode_eval(self.input_encoder(), self.time_steps(), self.seed, test)
    }

    /// Sample order of one local epoch.
    pub fn epoch_order(&self, n: usize, round: usize, client: usize, epoch: usize) -> Vec<usize> {
        let mut rng = derived_rng(self.seed, &[stream::SHUFFLE, round as u64, client as u64, epoch as u64]);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }
}

/// Encodes evaluation images, image `i` from the stream `[EVAL, i]` of `seed`.
pub fn encode_eval(encoder: &Encoder, time_steps: usize, seed: u64, data: &LabeledDataset) -> Result<Vec<SpikeTrain>> {
    (0..data.len())
        .map(|i| {
            let mut rng = derived_rng(seed, &[stream::EVAL, i as u64]);
            encoder.encode(&data.image(i), time_steps, &mut rng)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ClientResult {
    pub client: usize,
    pub params: ParamSet,
    pub size: usize,
    /// Sample-weighted mean of the batch losses over all local epochs.
    pub mean_loss: f64,
}

/// Copies the global weights, encodes the shard once, then runs `E` epochs of
/// shuffled mini-batches (the short last batch included).
pub fn client_update(
    setup: &Setup,
    template: &Model,
    global: &ParamSet,
    shard: &LabeledDataset,
    round: usize,
    client: usize,
) -> Result<ClientResult> {
    if shard.is_empty() {
        return Err(Error::InvalidArgument(format!("client {client} has an empty shard")));
    }
    let mut model = template.clone();
    model.load_param_set(global)?;
    let encoded: Vec<SpikeTrain> = (0..shard.len())
        .map(|i| setup.encode_train(shard, round, client, i))
        .collect::<Result<_>>()?;
    let b = setup.fed.batch_size;
    let (mut loss_sum, mut seen) = (0.0, 0usize);
    for epoch in 0..setup.fed.local_epochs {
        let order = setup.epoch_order(shard.len(), round, client, epoch);
        for batch in order.chunks(b) {
            let trains: Vec<&SpikeTrain> = batch.iter().map(|&i| &encoded[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| shard.labels[i]).collect();
            let steps = stack_trains::<f32>(&trains)?;
            let loss = model.train_batch(&steps, &labels, setup.fed.learning_rate)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
    }
    Ok(ClientResult {
        client,
        params: model.param_set(),
        size: shard.len(),
        mean_loss: loss_sum / seen as f64,
    })
}

/// Weighted mean of parameter sets with `p_k = n_k / Σ n_k`, accumulated in
/// f64 in the order given.
pub fn aggregate(updates: &[(&ParamSet, usize)]) -> Result<ParamSet> {
    let (first, _) = updates.first().ok_or_else(|| Error::InvalidArgument("nothing to aggregate".into()))?;
    if let Some((bad, _)) = updates.iter().find(|(p, _)| !p.is_congruent(first)) {
        return Err(shape_err(format!(
            "update with {} tensors is not congruent with the first",
            bad.len()
        )));
    }
    let total: usize = updates.iter().map(|&(_, n)| n).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("aggregation weights sum to zero".into()));
    }
    let weights: Vec<f64> = updates.iter().map(|&(_, n)| n as f64 / total as f64).collect();
    let mut out = ParamSet::new();
    for (ti, (name, tensor)) in first.iter().enumerate() {
        let mut acc = vec![0f64; tensor.len()];
        for ((set, _), &p) in updates.iter().zip(&weights) {
            let (_, t) = set.iter().nth(ti).expect("congruent");
            for (a, &v) in acc.iter_mut().zip(t.data()) {
                *a += p * v as f64;
            }
        }
        out.push(name, Tensor::new(tensor.shape().to_vec(), acc.into_iter().map(|v| v as f32).collect())?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub accuracy: f64,
    pub recorder: SpikeRecorder,
}

/// Top-1 accuracy over pre-encoded test samples.
pub fn evaluate(model: &mut Model, encoded: &[SpikeTrain], labels: &[usize], batch: usize) -> Result<Evaluation> {
    if encoded.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    if encoded.len() != labels.len() {
        return Err(shape_err("test encodings and labels differ in length"));
    }
    if let Model::Snn(m) = model {
        m.reset_recorder();
    }
    let mut correct = 0usize;
    for (chunk, chunk_labels) in encoded.chunks(batch.max(1)).zip(labels.chunks(batch.max(1))) {
        let trains: Vec<&SpikeTrain> = chunk.iter().collect();
        let logits = model.predict(&stack_trains::<f32>(&trains)?)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(chunk_labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    let recorder = match model {
        Model::Snn(m) => m.recorder().clone(),
        Model::Cnn(_) => SpikeRecorder::default(),
    };
    Ok(Evaluation {
        accuracy: correct as f64 / encoded.len() as f64,
        recorder,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_acc: f64,
    /// `None` for the initial evaluation.
    pub mean_train_loss: Option<f64>,
    pub selected: Vec<usize>,
    pub wall_ms: Option<f64>,
    /// Firing rate of each spiking layer on the test set; empty for the CNN.
    pub spike_rates: Vec<f64>,
}

/// Server state between rounds.
#[derive(Clone, Debug)]
pub struct FederatedState {
    pub global: ParamSet,
    pub round: usize,
    pub shards: Vec<LabeledDataset>,
    pub metrics: Vec<RoundMetrics>,
    template: Model,
    test_encoded: Vec<SpikeTrain>,
    test_labels: Vec<usize>,
}

impl FederatedState {
    /// Initial model, encoded test set and the round-0 evaluation row.
    pub fn new(setup: &Setup, shards: Vec<LabeledDataset>, test: &LabeledDataset) -> Result<Self> {
        setup.validate()?;
        if shards.len() != setup.fed.clients {
            return Err(Error::InvalidArgument(format!(
                "{} shards for {} clients",
                shards.len(),
                setup.fed.clients
            )));
        }
        let template = setup.init_model()?;
        let mut state = Self {
            global: template.param_set(),
            round: 0,
            shards,
            metrics: Vec::new(),
            template,
            test_encoded: setup.encode_test(test)?,
            test_labels: test.labels.clone(),
        };
        let start = Instant::now();
        let eval = state.evaluate_global(setup)?;
        state.metrics.push(RoundMetrics {
            round: 0,
            test_acc: eval.accuracy,
            mean_train_loss: None,
            selected: Vec::new(),
            wall_ms: setup.record_time.then(|| start.elapsed().as_secs_f64() * 1e3),
            spike_rates: rates_of(&state.template, &eval),
        });
        Ok(state)
    }

    pub fn global_model(&self) -> Result<Model> {
        let mut m = self.template.clone();
        m.load_param_set(&self.global)?;
        Ok(m)
    }

    pub fn evaluate_global(&self, setup: &Setup) -> Result<Evaluation> {
        let mut model = self.global_model()?;
        evaluate(&mut model, &self.test_encoded, &self.test_labels, setup.fed.eval_batch)
    }

    /// Select, train locally from the same snapshot, aggregate in ascending
    /// client order, evaluate.
    pub fn run_round(&mut self, setup: &Setup) -> Result<&RoundMetrics> {
        let start = Instant::now();
        let round = self.round + 1;
        let selected = select_clients(&setup.fed, setup.seed, round);
        let results: Vec<ClientResult> = selected
            .iter()
            .map(|&k| client_update(setup, &self.template, &self.global, &self.shards[k], round, k))
            .collect::<Result<_>>()?;
        let updates: Vec<(&ParamSet, usize)> = results.iter().map(|r| (&r.params, r.size)).collect();
        self.global = aggregate(&updates)?;
        self.round = round;
        let total: usize = results.iter().map(|r| r.size).sum();
        let mean_loss = results.iter().map(|r| r.mean_loss * r.size as f64).sum::<f64>() / total as f64;
        let eval = self.evaluate_global(setup)?;
        self.metrics.push(RoundMetrics {
            round,
            test_acc: eval.accuracy,
            mean_train_loss: Some(mean_loss),
            selected,
            wall_ms: setup.record_time.then(|| start.elapsed().as_secs_f64() * 1e3),
            spike_rates: rates_of(&self.template, &eval),
        });
        Ok(self.metrics.last().expect("just pushed"))
    }
}

fn rates_of(model: &Model, eval: &Evaluation) -> Vec<f64> {
    match model {
        Model::Snn(_) => eval.recorder.firing_rates(),
        Model::Cnn(_) => Vec::new(),
    }
}

pub struct ExperimentResult {
    pub metrics: Vec<RoundMetrics>,
    pub model: Model,
}

/// `R` rounds after the initial evaluation.
pub fn run_experiment(setup: &Setup, shards: Vec<LabeledDataset>, test: &LabeledDataset) -> Result<ExperimentResult> {
    let mut state = FederatedState::new(setup, shards, test)?;
    for _ in 0..setup.fed.rounds {
        state.run_round(setup)?;
    }
    let model = state.global_model()?;
    Ok(ExperimentResult {
        metrics: state.metrics,
        model,
    })
}

pub fn metrics_header(spiking_layers: usize) -> String {
    let mut h = String::from("round,test_acc,mean_train_loss,selected_clients,wall_ms");
    for l in 1..=spiking_layers {
        let _ = write!(h, ",spike_rate_l{l}");
    }
    h
}

/// Metrics table with one row per evaluation. Selected ids are `;`-separated.
pub fn metrics_csv(metrics: &[RoundMetrics], spiking_layers: usize) -> String {
    let mut out = metrics_header(spiking_layers);
    out.push('\n');
    for m in metrics {
        let _ = write!(out, "{},{:.6},", m.round, m.test_acc);
        if let Some(l) = m.mean_train_loss {
            let _ = write!(out, "{l:.6}");
        }
        let ids: Vec<String> = m.selected.iter().map(usize::to_string).collect();
        let _ = write!(out, ",{},", ids.join(";"));
        if let Some(w) = m.wall_ms {
            let _ = write!(out, "{w:.1}");
        }
        for l in 0..spiking_layers {
            out.push(',');
            if let Some(r) = m.spike_rates.get(l) {
                let _ = write!(out, "{r:.6}");
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn participation_counts() {
        let mut c = FedConfig::default();
        assert_eq!(c.clients_per_round(), 10);
        c.fraction = 0.01;
        assert_eq!(c.clients_per_round(), 1);
        c.fraction = 0.025;
        assert_eq!(c.clients_per_round(), 1);
        c.fraction = 0.075;
        assert_eq!(c.clients_per_round(), 2);
        c.fraction = 1.0;
        assert_eq!(c.clients_per_round(), 20);
        assert_eq!(select_clients(&c, 1, 3), (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn aggregate_examples() {
        let set = |v: &[f32]| {
            let mut s = ParamSet::new();
            s.push("w", Tensor::new(vec![v.len()], v.to_vec()).unwrap());
            s
        };
        let (a, b) = (set(&[1.0, 3.0]), set(&[3.0, 1.0]));
        assert_eq!(aggregate(&[(&a, 5), (&b, 5)]).unwrap(), set(&[2.0, 2.0]));
        assert_eq!(aggregate(&[(&a, 7)]).unwrap(), a);
        let (z, f) = (set(&[0.0]), set(&[4.0]));
        assert_eq!(aggregate(&[(&z, 100), (&f, 300)]).unwrap(), set(&[3.0]));
        assert!(aggregate(&[(&a, 1), (&z, 1)]).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = vec![
            RoundMetrics {
                round: 0,
                test_acc: 0.25,
                mean_train_loss: None,
                selected: vec![],
                wall_ms: None,
                spike_rates: vec![0.1, 0.2],
            },
            RoundMetrics {
                round: 1,
                test_acc: 0.5,
                mean_train_loss: Some(1.0),
                selected: vec![0, 3],
                wall_ms: None,
                spike_rates: vec![],
            },
        ];
        assert_eq!(
            metrics_csv(&rows, 2),
            "round,test_acc,mean_train_loss,selected_clients,wall_ms,spike_rate_l1,spike_rate_l2\n\
             0,0.250000,,,,0.100000,0.200000\n\
             1,0.500000,1.000000,0;3,,,\n"
        );
    }
}
