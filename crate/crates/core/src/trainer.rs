//! Hybrid-precision MLP training on crossbar-hosted weights.
//!
//! One training step:
//!
//! 1. take the effective weight matrix of every layer as the step snapshot;
//! 2. forward and backward every sample against the snapshot and average
//!    the full-precision gradients over the batch;
//! 3. accumulate `-lr * grad` into each layer's fixed-point accumulator;
//! 4. drain the accumulators (bit flips in binary mode, pulse counts in
//!    multilevel mode) and program the resulting device updates;
//! 5. update the digital biases with plain SGD.
//!
//! Each layer multiplies its column currents by the digital scale
//! `1/sqrt(fan_in)`. Crossbar networks additionally multiply the output
//! layer by [`TrainingConfig::logit_gain`]: the stored weights are fixed at
//! unit magnitude, so without the gain the logits stay too small for the
//! softmax to become confident.
//!
//! [`UpdateMode::Float`] swaps the crossbars for dense `f64` matrices, which
//! gives the floating-point reference run. Its weight step is
//! `-lr * grad / scale^2`, i.e. plain SGD on the scaled weights `scale * W`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::accumulator::GradientAccumulator;
use crate::crossbar::CrossbarArray;
use crate::device::MacroModel;
use crate::error::{Error, Result};
use crate::matrix::{Matrix, SignMatrix};
use crate::mlp::{self, fan_in_scale, ForwardPass, Gradients, LayerParams};
use crate::mnist::Dataset;
use crate::rng::{DrawKind, RngKey, StreamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    Binary,
    Multilevel,
    /// Full-precision dense weights, no devices.
    Float,
}

impl std::str::FromStr for UpdateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Self::Binary),
            "multilevel" => Ok(Self::Multilevel),
            "float" => Ok(Self::Float),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected binary, multilevel or float)"
            ))),
        }
    }
}

/// Initial crossbar weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// Seeded uniform random signs, programmed after the array is built.
    RandomSigns,
    /// Leave every synapse at the array's power-on `-1`.
    AllNegative,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub threshold: f64,
    pub mode: UpdateMode,
    pub seed: u64,
    pub init: WeightInit,
    /// Extra digital gain on the output layer of crossbar networks.
    pub logit_gain: f64,
    /// When false the biases stay at their initial values.
    pub train_biases: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 8,
            epochs: 10,
            threshold: 0.002,
            mode: UpdateMode::Binary,
            seed: 42,
            init: WeightInit::RandomSigns,
            logit_gain: 8.0,
            train_biases: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return Err(Error::Config(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        if !(self.logit_gain.is_finite() && self.logit_gain > 0.0) {
            return Err(Error::Config(format!(
                "logit_gain must be positive, got {}",
                self.logit_gain
            )));
        }
        Ok(())
    }
}

/// Layer sizes `[n_in, hidden..., n_out]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology(Vec<usize>);

impl Topology {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::domain("topology needs at least an input and an output layer"));
        }
        if sizes.iter().any(|&n| n == 0) {
            return Err(Error::domain("layer sizes must be at least 1"));
        }
        Ok(Self(sizes))
    }

    pub fn sizes(&self) -> &[usize] {
        &self.0
    }

    pub fn inputs(&self) -> usize {
        self.0[0]
    }

    pub fn outputs(&self) -> usize {
        *self.0.last().expect("validated")
    }

    pub fn weight_layers(&self) -> usize {
        self.0.len() - 1
    }
}

impl Default for Topology {
    fn default() -> Self {
        Self(vec![784, 128, 10])
    }
}

#[derive(Clone, Debug)]
pub enum Synapses {
    Crossbar {
        array: CrossbarArray,
        accumulator: GradientAccumulator,
        /// Mirror of the signs currently programmed in `array`.
        signs: SignMatrix,
    },
    Dense(Matrix),
}

impl Synapses {
    pub fn weights(&self) -> &Matrix {
        match self {
            Synapses::Crossbar { array, .. } => array.effective_weights(),
            Synapses::Dense(w) => w,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub synapses: Synapses,
    pub bias: Vec<f64>,
    pub scale: f64,
}

impl Layer {
    pub fn params(&self) -> LayerParams<'_> {
        LayerParams {
            weights: self.synapses.weights(),
            bias: &self.bias,
            scale: self.scale,
        }
    }
}

/// Totals for one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub samples: usize,
    pub loss_sum: f64,
    pub correct: usize,
    /// Synapses whose stored weight changed.
    pub bit_flips: u64,
    pub program_events: u64,
}

impl StepStats {
    fn absorb(&mut self, other: &StepStats) {
        self.samples += other.samples;
        self.loss_sum += other.loss_sum;
        self.correct += other.correct;
        self.bit_flips += other.bit_flips;
        self.program_events += other.program_events;
    }
}

/// One row of per-epoch results.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub bit_flips: u64,
    pub program_events: u64,
}

#[derive(Clone, Debug)]
pub struct Network {
    topology: Topology,
    layers: Vec<Layer>,
    mode: UpdateMode,
    seed: u64,
    train_biases: bool,
    steps: u64,
    init_program_events: u64,
}

impl Network {
    /// Build a network for `config.mode`. Crossbar modes build one array per
    /// weight layer from `model`; biases start at zero.
    pub fn new(topology: &Topology, model: &MacroModel, config: &TrainingConfig) -> Result<Self> {
        config.validate()?;
        let sizes = topology.sizes();
        let mut layers = Vec::with_capacity(topology.weight_layers());
        let mut init_program_events = 0;
        let last = topology.weight_layers() - 1;
        for (l, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let layer_id = l as u32;
            let synapses = match config.mode {
                UpdateMode::Float => {
                    let mut rng = init_key(config.seed, layer_id).rng(DrawKind::Init);
                    Synapses::Dense(Matrix::from_fn(fan_in, fan_out, |_, _| {
                        rng.sample::<f64, _>(StandardNormal)
                    }))
                }
                UpdateMode::Binary | UpdateMode::Multilevel => {
                    let mut array = CrossbarArray::build(fan_in, fan_out, *model, config.seed, layer_id)?;
                    if config.init == WeightInit::RandomSigns {
                        let mut rng = init_key(config.seed, layer_id).rng(DrawKind::Init);
                        let data = (0..fan_in * fan_out)
                            .map(|_| if rng.random_bool(0.5) { 1 } else { -1 })
                            .collect();
                        let signs = SignMatrix::from_vec(fan_in, fan_out, data)?;
                        init_program_events += array.program_signs(&signs)?;
                    }
                    Synapses::Crossbar {
                        signs: array.signs(),
                        accumulator: GradientAccumulator::new(fan_in, fan_out, config.threshold)?,
                        array,
                    }
                }
            };
            let gain = if l == last && config.mode != UpdateMode::Float {
                config.logit_gain
            } else {
                1.0
            };
            layers.push(Layer {
                synapses,
                bias: vec![0.0; fan_out],
                scale: gain * fan_in_scale(fan_in),
            });
        }
        Ok(Self {
            topology: topology.clone(),
            layers,
            mode: config.mode,
            seed: config.seed,
            train_biases: config.train_biases,
            steps: 0,
            init_program_events,
        })
    }

    /// Full-precision network with the given weights and biases.
    pub fn from_dense(weights: Vec<Matrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::domain("need one bias vector per weight matrix"));
        }
        let mut sizes = vec![weights[0].rows()];
        sizes.extend(weights.iter().map(|w| w.cols()));
        let topology = Topology::new(sizes)?;
        let layers: Vec<Layer> = weights
            .into_iter()
            .zip(biases)
            .map(|(w, b)| Layer {
                scale: fan_in_scale(w.rows()),
                synapses: Synapses::Dense(w),
                bias: b,
            })
            .collect();
        let net = Self {
            topology,
            layers,
            mode: UpdateMode::Float,
            seed: 0,
            train_biases: true,
            steps: 0,
            init_program_events: 0,
        };
        mlp::forward(&net.params(), &vec![0.0; net.topology.inputs()])?;
        Ok(net)
    }

    /// Crossbar network assembled from existing arrays, e.g. restored from
    /// a dump. Only `mode`, `threshold` and `logit_gain` of `config` are used.
    pub fn from_arrays(
        arrays: Vec<CrossbarArray>,
        biases: Vec<Vec<f64>>,
        config: &TrainingConfig,
    ) -> Result<Self> {
        config.validate()?;
        let (mode, threshold) = (config.mode, config.threshold);
        if arrays.is_empty() || arrays.len() != biases.len() {
            return Err(Error::domain("need one bias vector per array"));
        }
        if mode == UpdateMode::Float {
            return Err(Error::domain("crossbar network cannot use float mode"));
        }
        let mut sizes = vec![arrays[0].rows()];
        sizes.extend(arrays.iter().map(|a| a.cols()));
        let topology = Topology::new(sizes)?;
        let mut layers = Vec::with_capacity(arrays.len());
        let last = arrays.len() - 1;
        for (l, (array, bias)) in arrays.into_iter().zip(biases).enumerate() {
            let gain = if l == last { config.logit_gain } else { 1.0 };
            layers.push(Layer {
                scale: gain * fan_in_scale(array.rows()),
                synapses: Synapses::Crossbar {
                    signs: array.signs(),
                    accumulator: GradientAccumulator::new(array.rows(), array.cols(), threshold)?,
                    array,
                },
                bias,
            });
        }
        let net = Self {
            topology,
            layers,
            mode,
            seed: 0,
            train_biases: config.train_biases,
            steps: 0,
            init_program_events: 0,
        };
        mlp::forward(&net.params(), &vec![0.0; net.topology.inputs()])?;
        Ok(net)
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn mode(&self) -> UpdateMode {
        self.mode
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn set_train_biases(&mut self, on: bool) {
        self.train_biases = on;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Program events spent on the initial random-sign programming.
    pub fn init_program_events(&self) -> u64 {
        self.init_program_events
    }

    /// Current weight snapshot of every layer.
    pub fn params(&self) -> Vec<LayerParams<'_>> {
        self.layers.iter().map(Layer::params).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardPass> {
        if x.len() != self.topology.inputs() {
            return Err(Error::domain(format!(
                "input length {} does not match {} network inputs",
                x.len(),
                self.topology.inputs()
            )));
        }
        mlp::forward(&self.params(), x)
    }

    pub fn backward(&self, pass: &ForwardPass, label: usize) -> Result<Gradients> {
        mlp::backward(&self.params(), pass, label)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(self.forward(x)?.predicted())
    }

    /// Batch-averaged loss gradients against the current snapshot, plus the
    /// batch loss/accuracy totals.
    pub fn batch_gradients(&self, data: &Dataset, batch: &[usize]) -> Result<(Gradients, StepStats)> {
        if batch.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        if data.dim() != self.topology.inputs() {
            return Err(Error::domain(format!(
                "dataset width {} does not match {} network inputs",
                data.dim(),
                self.topology.inputs()
            )));
        }
        let params = self.params();
        let mut grads = Gradients::zeros(&params);
        let mut stats = StepStats::default();
        let mut x = Vec::with_capacity(data.dim());
        for &i in batch {
            data.input_into(i, &mut x);
            let label = data.label(i);
            let pass = mlp::forward(&params, &x)?;
            stats.loss_sum += mlp::cross_entropy(&pass.probs, label)?;
            stats.correct += usize::from(pass.predicted() == label);
            mlp::backward_into(&params, &pass, label, &mut grads)?;
        }
        stats.samples = batch.len();
        grads.scale(1.0 / batch.len() as f64);
        Ok((grads, stats))
    }

    /// Apply averaged gradients: accumulate, drain, program devices, and
    /// step the biases. Returns `(bit_flips, program_events)`.
    pub fn apply_gradients(&mut self, grads: Gradients, learning_rate: f64) -> Result<(u64, u64)> {
        let mut flips_total = 0;
        let mut events_total = 0;
        let mode = self.mode;
        let train_biases = self.train_biases;
        for (layer, (mut gw, gb)) in self
            .layers
            .iter_mut()
            .zip(grads.weights.into_iter().zip(grads.biases))
        {
            gw.scale(-learning_rate);
            match &mut layer.synapses {
                Synapses::Dense(w) => w.add_scaled(&gw, 1.0 / (layer.scale * layer.scale)),
                Synapses::Crossbar {
                    array,
                    accumulator,
                    signs,
                } => {
                    accumulator.accumulate(&gw)?;
                    match mode {
                        UpdateMode::Binary => {
                            let flips = accumulator.drain_binary(signs)?;
                            let n = signs.apply_flips(&flips)?;
                            if n > 0 {
                                flips_total += n as u64;
                                events_total += array.program_signs(signs)?;
                            }
                        }
                        UpdateMode::Multilevel => {
                            let pulses = accumulator.drain_multilevel();
                            let report = array.apply_pulses(&pulses)?;
                            flips_total += report.synapses;
                            events_total += report.program_events;
                            if report.synapses > 0 {
                                *signs = array.signs();
                            }
                        }
                        UpdateMode::Float => unreachable!("float networks hold dense layers"),
                    }
                }
            }
            if train_biases {
                for (b, g) in layer.bias.iter_mut().zip(&gb) {
                    *b -= learning_rate * g;
                }
            }
        }
        Ok((flips_total, events_total))
    }

    /// One hybrid training step over `batch` (indices into `data`).
    pub fn train_step(&mut self, data: &Dataset, batch: &[usize], config: &TrainingConfig) -> Result<StepStats> {
        let (grads, mut stats) = self.batch_gradients(data, batch)?;
        let (flips, events) = self.apply_gradients(grads, config.learning_rate)?;
        stats.bit_flips = flips;
        stats.program_events = events;
        self.steps += 1;
        Ok(stats)
    }

    /// Seeded shuffle of `0..n` for the given epoch.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let key = RngKey::new(self.seed, StreamId::default(), epoch as u64);
        order.shuffle(&mut key.rng(DrawKind::Shuffle));
        order
    }

    /// Train over every sample of `train` once, then score on `test`.
    pub fn train_epoch(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        config: &TrainingConfig,
        epoch: usize,
    ) -> Result<Metrics> {
        if train.is_empty() {
            return Err(Error::domain("training set is empty"));
        }
        let order = self.epoch_order(train.len(), epoch);
        let mut totals = StepStats::default();
        for batch in order.chunks(config.batch_size) {
            let stats = self.train_step(train, batch, config)?;
            totals.absorb(&stats);
        }
        Ok(Metrics {
            epoch,
            train_loss: totals.loss_sum / totals.samples as f64,
            train_acc: totals.correct as f64 / totals.samples as f64,
            test_acc: self.evaluate(test)?,
            bit_flips: totals.bit_flips,
            program_events: totals.program_events,
        })
    }

    /// Fraction of samples whose argmax prediction matches the label.
    pub fn evaluate(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::domain("evaluation set is empty"));
        }
        let params = self.params();
        let mut x = Vec::with_capacity(data.dim());
        let mut correct = 0usize;
        for i in 0..data.len() {
            data.input_into(i, &mut x);
            let pass = mlp::forward(&params, &x)?;
            correct += usize::from(pass.predicted() == data.label(i));
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

fn init_key(seed: u64, layer: u32) -> RngKey {
    RngKey::new(seed, StreamId::new(layer, 0, 0, 0), 0)
}
