//! Timed forward simulation, error transport and minibatch SGD.
//!
//! Each sample is a static input injected for `interval_ms`. The first
//! `settle_ms` let the membranes settle; every later step contributes to
//! learning. The output error at a step is `spikes(t) − onehot(target)`,
//! and the four mechanisms differ only in how it reaches hidden layer `n`:
//!
//! | mechanism | `e_n(t)`                               |
//! |-----------|----------------------------------------|
//! | BP        | `[W_{n+1}ᵀ e_{n+1}(t)] ⊙ g(a_n(t))`    |
//! | FA        | `[B_n e_{n+1}(t)] ⊙ g(a_n(t))`         |
//! | DFA/aDFA  | `[B_n e(t)] ⊙ g(a_n(t))`               |
//!
//! with `g = f′` except for aDFA. The output layer always uses
//! `e(t) ⊙ g(a_out(t))`. Gradients `Σ_t e_n(t)·x_n(t)ᵀ` are summed over a
//! minibatch and applied once with the per-layer rate `lr_base / fan_in`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backward::BackwardFnSpec;
use crate::dataset::Dataset;
use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::lif::{integrate_step_in_place, layer_drive_into, LayerState, LifParams, Presyn};
use crate::linalg::Matrix;
use crate::rng::{stream_rng, Stream};
use crate::scalar::Real;
use crate::topology::NetworkState;

/// Samples per gradient partial. Partials are reduced in index order, so
/// results do not depend on the number of worker threads.
const CHUNK: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Bp,
    Fa,
    Dfa,
    Adfa,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::Bp, Mechanism::Fa, Mechanism::Dfa, Mechanism::Adfa];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Bp => "bp",
            Mechanism::Fa => "fa",
            Mechanism::Dfa => "dfa",
            Mechanism::Adfa => "adfa",
        }
    }

    /// Calibrated `lr_base` for each mechanism.
    pub fn default_lr(self) -> f64 {
        match self {
            Mechanism::Bp => DEFAULT_LR_BP,
            Mechanism::Fa => DEFAULT_LR_FA,
            Mechanism::Dfa => DEFAULT_LR_DFA,
            Mechanism::Adfa => DEFAULT_LR_ADFA,
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bp" => Ok(Mechanism::Bp),
            "fa" => Ok(Mechanism::Fa),
            "dfa" => Ok(Mechanism::Dfa),
            "adfa" => Ok(Mechanism::Adfa),
            other => Err(Error::Config(format!(
                "unknown mechanism {other:?} (expected bp, fa, dfa or adfa)"
            ))),
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const DEFAULT_LR_BP: f64 = 3.0;
pub const DEFAULT_LR_FA: f64 = 3.0;
pub const DEFAULT_LR_DFA: f64 = 3.0;
pub const DEFAULT_LR_ADFA: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
pub struct TrainConfig<T> {
    pub mechanism: Mechanism,
    /// Backward function. `None` means the LIF surrogate derivative.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backward: Option<BackwardFnSpec<T>>,
    /// Permits a non-surrogate `g` for BP, FA and DFA.
    #[serde(default)]
    pub allow_g_override: bool,
    pub lif: LifParams<T>,
    pub epochs: usize,
    pub batch_size: usize,
    pub interval_ms: T,
    pub settle_ms: T,
    pub lr_base: T,
    pub seed: u64,
    /// Worker threads for per-sample work; results are identical for any value.
    #[serde(default = "one")]
    pub threads: usize,
}

fn one() -> usize {
    1
}

impl<T: Real> TrainConfig<T> {
    pub fn new(mechanism: Mechanism) -> Self {
        Self {
            mechanism,
            backward: None,
            allow_g_override: false,
            lif: LifParams::default(),
            epochs: 20,
            batch_size: 100,
            interval_ms: T::lit(100.0),
            settle_ms: T::lit(20.0),
            lr_base: T::lit(mechanism.default_lr()),
            seed: 0,
            threads: 1,
        }
    }

    pub fn with_backward(mut self, g: BackwardFnSpec<T>) -> Self {
        self.backward = Some(g);
        self
    }

    pub fn total_steps(&self) -> usize {
        self.lif.steps_for(self.interval_ms)
    }

    pub fn settle_steps(&self) -> usize {
        self.lif.steps_for(self.settle_ms)
    }

    pub fn recorded_steps(&self) -> usize {
        self.total_steps() - self.settle_steps()
    }

    pub fn validate(&self) -> Result<()> {
        self.lif.validate()?;
        if !(self.settle_ms >= T::zero() && self.settle_ms < self.interval_ms) {
            return Err(Error::Config(
                "train.settle_ms must be >= 0 and < train.interval_ms".into(),
            ));
        }
        if self.settle_steps() >= self.total_steps() {
            return Err(Error::Config("training window is shorter than one step".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.lr_base.is_finite() && self.lr_base >= T::zero()) {
            return Err(Error::Config("train.lr_base must be finite and >= 0".into()));
        }
        self.resolved_backward()?.validate()
    }

    /// The `g` actually used in the backward pass.
    pub fn resolved_backward(&self) -> Result<BackwardFnSpec<T>> {
        match &self.backward {
            None => Ok(BackwardFnSpec::surrogate(&self.lif)),
            Some(g) if self.mechanism == Mechanism::Adfa || g.is_surrogate() || self.allow_g_override => {
                Ok(g.clone())
            }
            Some(g) => Err(Error::Config(format!(
                "{} uses the surrogate derivative; a {} backward function requires allow_g_override",
                self.mechanism,
                g.family()
            ))),
        }
    }
}

/// Activity of one layer over the training window.
#[derive(Debug, Clone, Default)]
pub struct LayerTrace<T> {
    pub neurons: usize,
    /// Drive is the same at every step (static presynaptic input) and only
    /// one row is stored.
    pub static_drive: bool,
    drive: Vec<T>,
    spike_index: Vec<u32>,
    spike_offsets: Vec<usize>,
    /// Spikes per neuron over the whole interval, settle window included.
    pub spike_counts: Vec<u32>,
}

impl<T: Real> LayerTrace<T> {
    /// Preactivation `a_n(t)` at recorded step `t`.
    pub fn drive_at(&self, t: usize) -> &[T] {
        let row = if self.static_drive { 0 } else { t };
        &self.drive[row * self.neurons..(row + 1) * self.neurons]
    }

    /// Indices of neurons that fired at recorded step `t`.
    pub fn spikes_at(&self, t: usize) -> &[u32] {
        &self.spike_index[self.spike_offsets[t]..self.spike_offsets[t + 1]]
    }

    fn clear(&mut self, neurons: usize, static_drive: bool) {
        self.neurons = neurons;
        self.static_drive = static_drive;
        self.drive.clear();
        self.spike_index.clear();
        self.spike_offsets.clear();
        self.spike_offsets.push(0);
        self.spike_counts.clear();
        self.spike_counts.resize(neurons, 0);
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardTrace<T> {
    pub input: Vec<T>,
    pub settle_steps: usize,
    pub recorded_steps: usize,
    /// One entry per weight layer (hidden layers, then the output).
    pub layers: Vec<LayerTrace<T>>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn output(&self) -> &LayerTrace<T> {
        self.layers.last().expect("trace has an output layer")
    }

    /// Presynaptic activity `x_n(t)` of weight layer `n` at recorded step `t`.
    pub fn presyn(&self, n: usize, t: usize) -> PresynRef<'_, T> {
        if n == 0 {
            PresynRef::Static(&self.input)
        } else {
            PresynRef::Spikes(self.layers[n - 1].spikes_at(t))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum PresynRef<'a, T> {
    Static(&'a [T]),
    Spikes(&'a [u32]),
}

/// Reusable per-worker buffers.
#[derive(Debug, Clone, Default)]
struct Scratch<T> {
    states: Vec<LayerState<T>>,
    drive: Vec<Vec<T>>,
    spikes: Vec<Vec<bool>>,
    active: Vec<Vec<usize>>,
}

impl<T: Real> Scratch<T> {
    fn prepare(&mut self, dims: &[usize]) {
        let layers = dims.len() - 1;
        if self.states.len() != layers || self.states.iter().zip(&dims[1..]).any(|(s, &d)| s.len() != d) {
            self.states = dims[1..].iter().map(|&d| LayerState::new(d)).collect();
            self.drive = dims[1..].iter().map(|&d| vec![T::zero(); d]).collect();
            self.spikes = dims[1..].iter().map(|&d| vec![false; d]).collect();
            self.active = dims[1..].iter().map(|&d| Vec::with_capacity(d)).collect();
        } else {
            self.states.iter_mut().for_each(LayerState::reset);
        }
    }
}

/// Runs one sample through the network for the full interval.
pub fn forward_sample<T: Real>(
    net: &NetworkState<T>,
    input: &[T],
    cfg: &TrainConfig<T>,
) -> Result<ForwardTrace<T>> {
    let mut trace = ForwardTrace::default();
    forward_into(net, input, cfg, true, &mut Scratch::default(), &mut trace)?;
    Ok(trace)
}

fn forward_into<T: Real>(
    net: &NetworkState<T>,
    input: &[T],
    cfg: &TrainConfig<T>,
    record: bool,
    scratch: &mut Scratch<T>,
    trace: &mut ForwardTrace<T>,
) -> Result<()> {
    ensure_len("input sample", net.input_dim(), input.len())?;
    ensure_finite("input sample", input)?;
    let layers = net.num_weight_layers();
    let total = cfg.total_steps();
    let settle = cfg.settle_steps();

    scratch.prepare(&net.dims);
    trace.input.clear();
    trace.input.extend_from_slice(input);
    trace.settle_steps = settle;
    trace.recorded_steps = total.saturating_sub(settle);
    trace.layers.resize_with(layers, LayerTrace::default);
    for (n, lt) in trace.layers.iter_mut().enumerate() {
        lt.clear(net.dims[n + 1], n == 0);
    }

    // the first layer sees the same input every step
    layer_drive_into(&net.weights[0], &net.biases[0], Presyn::Real(input), &mut scratch.drive[0])?;
    if record {
        trace.layers[0].drive.extend_from_slice(&scratch.drive[0]);
    }

    for t in 0..total {
        let recording = record && t >= settle;
        for n in 0..layers {
            if n > 0 {
                layer_drive_into(
                    &net.weights[n],
                    &net.biases[n],
                    Presyn::Spikes {
                        active: &scratch.active[n - 1],
                        len: net.dims[n],
                    },
                    &mut scratch.drive[n],
                )?;
            }
            integrate_step_in_place(
                &mut scratch.states[n],
                &scratch.drive[n],
                &cfg.lif,
                &mut scratch.spikes[n],
            )?;
            let active = &mut scratch.active[n];
            active.clear();
            active.extend(
                scratch.spikes[n]
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &s)| s.then_some(i)),
            );
            let lt = &mut trace.layers[n];
            for &i in active.iter() {
                lt.spike_counts[i] += 1;
            }
            if recording {
                if n > 0 {
                    lt.drive.extend_from_slice(&scratch.drive[n]);
                }
                lt.spike_index.extend(active.iter().map(|&i| i as u32));
                lt.spike_offsets.push(lt.spike_index.len());
            }
        }
    }
    Ok(())
}

/// Class with the most output spikes over the interval; ties go to the
/// lowest index, so an all-silent output decodes to class 0.
pub fn decode_counts(counts: &[u32]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

pub fn decode_output<T: Real>(trace: &ForwardTrace<T>) -> usize {
    decode_counts(&trace.output().spike_counts)
}

fn fill_error<T: Real>(trace: &ForwardTrace<T>, target: usize, t: usize, e: &mut [T]) {
    e.iter_mut().for_each(|x| *x = T::zero());
    e[target] = -T::one();
    for &k in trace.output().spikes_at(t) {
        e[k as usize] += T::one();
    }
}

/// `e(t) = spikes(t) − onehot(target)` for each recorded step, flattened
/// step-major.
pub fn output_error<T: Real>(trace: &ForwardTrace<T>, target: usize) -> Result<Vec<T>> {
    let classes = trace.output().neurons;
    if target >= classes {
        return Err(Error::LabelOutOfRange {
            label: target,
            classes,
        });
    }
    let mut e = vec![T::zero(); trace.recorded_steps * classes];
    for (t, row) in e.chunks_mut(classes).enumerate() {
        fill_error(trace, target, t, row);
    }
    Ok(e)
}

/// Per-layer modulated errors, each flattened step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSignal<T> {
    /// Raw output error `e(t)`.
    pub output: Vec<T>,
    /// `layers[n]` holds `e_n(t)` for weight layer `n`.
    pub layers: Vec<Vec<T>>,
}

/// Computes `e_n(t)` for one step into `errs`, top layer first.
struct BackwardStep<'a, T> {
    mechanism: Mechanism,
    net: &'a NetworkState<T>,
    g: &'a BackwardFnSpec<T>,
    /// `g(a_0)` for the static first layer, evaluated once per sample.
    g_static: Vec<T>,
    proj: Vec<Vec<T>>,
}

impl<'a, T: Real> BackwardStep<'a, T> {
    fn new(
        mechanism: Mechanism,
        net: &'a NetworkState<T>,
        g: &'a BackwardFnSpec<T>,
    ) -> Result<Self> {
        let layers = net.num_weight_layers();
        if matches!(mechanism, Mechanism::Fa | Mechanism::Dfa | Mechanism::Adfa) {
            let have = match mechanism {
                Mechanism::Fa => net.feedback.chain.len(),
                _ => net.feedback.direct.len(),
            };
            if have < layers - 1 {
                return Err(Error::MissingFeedback(have));
            }
        }
        Ok(Self {
            mechanism,
            net,
            g,
            g_static: Vec::new(),
            proj: net.dims[1..].iter().map(|&d| vec![T::zero(); d]).collect(),
        })
    }

    fn begin_sample(&mut self, trace: &ForwardTrace<T>) {
        let a0 = trace.layers[0].drive_at(0);
        self.g_static.clear();
        self.g_static.extend(a0.iter().map(|&a| self.g.value(a)));
    }

    fn step(&mut self, trace: &ForwardTrace<T>, e: &[T], t: usize, errs: &mut [Vec<T>]) {
        let last = self.net.num_weight_layers() - 1;
        for n in (0..=last).rev() {
            let (below, above) = errs.split_at_mut(n + 1);
            let target = &mut below[n];
            if n == last {
                target.copy_from_slice(e);
            } else {
                let upstream = &above[0];
                let proj = &mut self.proj[n];
                match self.mechanism {
                    Mechanism::Bp => self.net.weights[n + 1].matvec_transposed_into(upstream, proj),
                    Mechanism::Fa => self.net.feedback.chain[n].matvec_into(upstream, proj),
                    Mechanism::Dfa | Mechanism::Adfa => {
                        self.net.feedback.direct[n].matvec_into(e, proj)
                    }
                }
                target.copy_from_slice(proj);
            }
            if n == 0 {
                for (x, gv) in target.iter_mut().zip(&self.g_static) {
                    *x *= *gv;
                }
            } else {
                let a = trace.layers[n].drive_at(t);
                for (x, &ai) in target.iter_mut().zip(a) {
                    if !x.is_zero() {
                        *x *= self.g.value(ai);
                    }
                }
            }
        }
    }
}

/// Transports the output error to every layer, step by step.
pub fn backward_errors<T: Real>(
    mechanism: Mechanism,
    trace: &ForwardTrace<T>,
    e: &[T],
    net: &NetworkState<T>,
    g: &BackwardFnSpec<T>,
) -> Result<ErrorSignal<T>> {
    let classes = net.output_dim();
    ensure_len("output error", trace.recorded_steps * classes, e.len())?;
    let mut step = BackwardStep::new(mechanism, net, g)?;
    step.begin_sample(trace);
    let mut errs: Vec<Vec<T>> = net.dims[1..].iter().map(|&d| vec![T::zero(); d]).collect();
    let mut layers: Vec<Vec<T>> = net.dims[1..]
        .iter()
        .map(|&d| Vec::with_capacity(d * trace.recorded_steps))
        .collect();
    for t in 0..trace.recorded_steps {
        step.step(trace, &e[t * classes..(t + 1) * classes], t, &mut errs);
        for (dst, src) in layers.iter_mut().zip(&errs) {
            dst.extend_from_slice(src);
        }
    }
    Ok(ErrorSignal {
        output: e.to_vec(),
        layers,
    })
}

/// Summed `Σ e_n(t)·x_n(t)ᵀ` and `Σ e_n(t)` per weight layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Matrix<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros(net: &NetworkState<T>) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            biases: net.biases.iter().map(|b| vec![T::zero(); b.len()]).collect(),
        }
    }

    fn clear(&mut self) {
        self.weights.iter_mut().for_each(Matrix::fill_zero);
        self.biases.iter_mut().flatten().for_each(|b| *b = T::zero());
    }

    fn add(&mut self, other: &Gradients<T>) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_scaled(T::one(), b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|m| m.as_slice().iter().all(|x| x.is_zero()))
            && self.biases.iter().flatten().all(|x| x.is_zero())
    }

    /// Adds one sample's contribution from precomputed errors.
    pub fn accumulate(&mut self, trace: &ForwardTrace<T>, errors: &ErrorSignal<T>) -> Result<()> {
        let mut static_sum = vec![T::zero(); self.biases[0].len()];
        for t in 0..trace.recorded_steps {
            for (n, layer_errs) in errors.layers.iter().enumerate() {
                let d = self.biases[n].len();
                let e_n = &layer_errs[t * d..(t + 1) * d];
                self.add_step(trace, n, t, e_n, &mut static_sum)?;
            }
        }
        self.finish_sample(trace, &static_sum);
        Ok(())
    }

    fn add_step(
        &mut self,
        trace: &ForwardTrace<T>,
        n: usize,
        t: usize,
        e_n: &[T],
        static_sum: &mut [T],
    ) -> Result<()> {
        if e_n.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { layer: n, step: t });
        }
        match trace.presyn(n, t) {
            PresynRef::Static(_) => {
                for (s, e) in static_sum.iter_mut().zip(e_n) {
                    *s += *e;
                }
            }
            PresynRef::Spikes(active) => {
                if !active.is_empty() {
                    let cols: Vec<usize> = active.iter().map(|&j| j as usize).collect();
                    self.weights[n].add_to_columns(e_n, &cols);
                }
                for (b, e) in self.biases[n].iter_mut().zip(e_n) {
                    *b += *e;
                }
            }
        }
        Ok(())
    }

    /// The static input is the same at every step, so its outer product is
    /// taken once with the step-summed error.
    fn finish_sample(&mut self, trace: &ForwardTrace<T>, static_sum: &[T]) {
        self.weights[0].add_outer(T::one(), static_sum, &trace.input);
        for (b, s) in self.biases[0].iter_mut().zip(static_sum) {
            *b += *s;
        }
    }
}

/// Per-layer learning rate `lr_base / fan_in`.
pub fn layer_learning_rates<T: Real>(net: &NetworkState<T>, lr_base: T) -> Vec<T> {
    net.dims[..net.dims.len() - 1]
        .iter()
        .map(|&fan_in| lr_base / T::from_usize(fan_in).unwrap())
        .collect()
}

/// `W_n ← W_n − lr_n·ΔW_n`, `b_n ← b_n − lr_n·Δb_n`.
pub fn apply_gradients<T: Real>(net: &mut NetworkState<T>, grads: &Gradients<T>, lr_base: T) -> Result<()> {
    let rates = layer_learning_rates(net, lr_base);
    for (n, g) in grads.weights.iter().enumerate() {
        if let Some(i) = g.as_slice().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                layer: n,
                step: i / g.cols().max(1),
            });
        }
    }
    for (n, lr) in rates.into_iter().enumerate() {
        net.weights[n].add_scaled(-lr, &grads.weights[n]);
        for (b, d) in net.biases[n].iter_mut().zip(&grads.biases[n]) {
            *b -= lr * *d;
        }
    }
    Ok(())
}

/// Accumulates a batch of traces with their errors and applies the update.
pub fn accumulate_and_apply<T: Real>(
    net: &mut NetworkState<T>,
    traces: &[ForwardTrace<T>],
    errors: &[ErrorSignal<T>],
    lr_base: T,
) -> Result<()> {
    ensure_len("error signals", traces.len(), errors.len())?;
    let mut grads = Gradients::zeros(net);
    for (trace, err) in traces.iter().zip(errors) {
        grads.accumulate(trace, err)?;
    }
    apply_gradients(net, &grads, lr_base)
}

/// Per-epoch outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub fingerprint: String,
    pub epochs: Vec<EpochRecord>,
}

impl RunRecord {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_acc)
    }

    /// `epoch,train_acc,test_acc`. Deterministic for a given config.
    pub fn write_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "train_acc", "test_acc"])?;
        for e in &self.epochs {
            out.write_record([
                e.epoch.to_string(),
                format!("{:.6}", e.train_acc),
                e.test_acc.map(|a| format!("{a:.6}")).unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// `epoch,wall_ms`, kept apart from the deterministic record.
    pub fn write_timing_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "wall_ms"])?;
        for e in &self.epochs {
            out.write_record([e.epoch.to_string(), e.wall_ms.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn with_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if threads <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Gradient partial for one chunk of samples, plus the number decoded correctly.
fn chunk_gradients<T: Real>(
    net: &NetworkState<T>,
    data: &Dataset<T>,
    indices: &[usize],
    cfg: &TrainConfig<T>,
    g: &BackwardFnSpec<T>,
    grads: &mut Gradients<T>,
) -> Result<usize> {
    let classes = net.output_dim();
    let mut scratch = Scratch::default();
    let mut trace = ForwardTrace::default();
    let mut step = BackwardStep::new(cfg.mechanism, net, g)?;
    let mut errs: Vec<Vec<T>> = net.dims[1..].iter().map(|&d| vec![T::zero(); d]).collect();
    let mut e = vec![T::zero(); classes];
    let mut static_sum = vec![T::zero(); net.dims[1]];
    let mut correct = 0;
    for &i in indices {
        let target = data.label(i);
        if target >= classes {
            return Err(Error::LabelOutOfRange { label: target, classes });
        }
        forward_into(net, data.image(i), cfg, true, &mut scratch, &mut trace)?;
        if decode_output(&trace) == target {
            correct += 1;
        }
        step.begin_sample(&trace);
        static_sum.iter_mut().for_each(|s| *s = T::zero());
        for t in 0..trace.recorded_steps {
            fill_error(&trace, target, t, &mut e);
            step.step(&trace, &e, t, &mut errs);
            for (n, e_n) in errs.iter().enumerate() {
                grads.add_step(&trace, n, t, e_n, &mut static_sum)?;
            }
        }
        grads.finish_sample(&trace, &static_sum);
    }
    Ok(correct)
}

/// Gradients of one minibatch, reduced chunk by chunk in index order.
fn batch_gradients<T: Real>(
    net: &NetworkState<T>,
    data: &Dataset<T>,
    batch: &[usize],
    cfg: &TrainConfig<T>,
    g: &BackwardFnSpec<T>,
    total: &mut Gradients<T>,
    scratch: &mut Gradients<T>,
) -> Result<usize> {
    total.clear();
    if cfg.threads <= 1 {
        let mut correct = 0;
        for chunk in batch.chunks(CHUNK) {
            scratch.clear();
            correct += chunk_gradients(net, data, chunk, cfg, g, scratch)?;
            total.add(scratch);
        }
        return Ok(correct);
    }
    let partials: Vec<Result<(Gradients<T>, usize)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = Gradients::zeros(net);
            let c = chunk_gradients(net, data, chunk, cfg, g, &mut grads)?;
            Ok((grads, c))
        })
        .collect();
    let mut correct = 0;
    for p in partials {
        let (grads, c) = p?;
        total.add(&grads);
        correct += c;
    }
    Ok(correct)
}

/// Trains for `cfg.epochs`, evaluating on `test` after each epoch.
pub fn train<T: Real>(
    net: &mut NetworkState<T>,
    train_set: &Dataset<T>,
    test_set: Option<&Dataset<T>>,
    cfg: &TrainConfig<T>,
) -> Result<RunRecord> {
    train_with(net, train_set, test_set, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<T: Real>(
    net: &mut NetworkState<T>,
    train_set: &Dataset<T>,
    test_set: Option<&Dataset<T>>,
    cfg: &TrainConfig<T>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunRecord> {
    cfg.validate()?;
    net.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    ensure_len("training sample", net.input_dim(), train_set.dim())?;
    let g = cfg.resolved_backward()?;
    let mut record = RunRecord::default();
    let mut total = Gradients::zeros(net);
    let mut partial = Gradients::zeros(net);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut stream_rng(cfg.seed, Stream::Shuffle, epoch as u64));
        let mut correct = 0;
        for batch in order.chunks(cfg.batch_size) {
            let net_ref: &NetworkState<T> = net;
            correct += with_pool(cfg.threads, || {
                batch_gradients(net_ref, train_set, batch, cfg, &g, &mut total, &mut partial)
            })??;
            apply_gradients(net, &total, cfg.lr_base)?;
        }
        let test_acc = match test_set {
            Some(ds) => Some(evaluate(net, ds, cfg)?),
            None => None,
        };
        let rec = EpochRecord {
            epoch,
            train_acc: correct as f64 / train_set.len() as f64,
            test_acc,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {epoch}: train {:.4} test {}",
            rec.train_acc,
            rec.test_acc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into())
        );
        on_epoch(&rec);
        record.epochs.push(rec);
    }
    Ok(record)
}

/// Predicted class of every sample, without learning.
pub fn predict<T: Real>(net: &NetworkState<T>, data: &Dataset<T>, cfg: &TrainConfig<T>) -> Result<Vec<usize>> {
    ensure_len("evaluation sample", net.input_dim(), data.dim())?;
    let run_chunk = |range: std::ops::Range<usize>| -> Result<Vec<usize>> {
        let mut scratch = Scratch::default();
        let mut trace = ForwardTrace::default();
        range
            .map(|i| {
                forward_into(net, data.image(i), cfg, false, &mut scratch, &mut trace)?;
                Ok(decode_output(&trace))
            })
            .collect()
    };
    let chunks: Vec<std::ops::Range<usize>> = (0..data.len())
        .step_by(CHUNK * 10)
        .map(|s| s..(s + CHUNK * 10).min(data.len()))
        .collect();
    let parts: Vec<Result<Vec<usize>>> = with_pool(cfg.threads, || {
        if cfg.threads <= 1 {
            chunks.iter().cloned().map(run_chunk).collect()
        } else {
            chunks.par_iter().cloned().map(run_chunk).collect()
        }
    })?;
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Fraction of samples decoded to their label.
pub fn evaluate<T: Real>(net: &NetworkState<T>, data: &Dataset<T>, cfg: &TrainConfig<T>) -> Result<f64> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let predicted = predict(net, data, cfg)?;
    let correct = predicted
        .iter()
        .enumerate()
        .filter(|(i, &p)| p == data.label(*i))
        .count();
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::topology::{InitStats, NetworkTopology};

    fn net(dims: &[usize], seed: u64) -> NetworkState<f64> {
        let topo = NetworkTopology::new(dims.to_vec(), seed).unwrap();
        NetworkState::initialize(&topo, &InitStats::default()).unwrap()
    }

    fn short_cfg(mechanism: Mechanism) -> TrainConfig<f64> {
        let mut cfg = TrainConfig::new(mechanism);
        cfg.interval_ms = 10.0;
        cfg.settle_ms = 2.0;
        cfg.batch_size = 4;
        cfg.epochs = 2;
        cfg.lr_base = 0.5;
        cfg
    }

    /// Two well separated classes in four dimensions.
    fn toy(n: usize, seed: u64) -> Dataset<f64> {
        use rand::Rng;
        let mut rng = stream_rng(seed, Stream::Trial, 0);
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = (i % 2) as u8;
            let hot = if c == 0 { [1.0, 1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0, 1.0] };
            pixels.extend(hot.iter().map(|h| h * 0.9 + 0.2 * rng.random::<f64>()));
            labels.push(c);
        }
        Dataset::new(pixels, 4, labels, Split::Train).unwrap()
    }

    /// Eight classes, each lighting one input coordinate.
    fn classes8(n: usize, seed: u64) -> Dataset<f64> {
        use rand::Rng;
        let mut rng = stream_rng(seed, Stream::Trial, 0);
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 8;
            pixels.extend((0..8).map(|j| if j == c { 3.6 } else { 0.0 } + 0.2 * rng.random::<f64>()));
            labels.push(c as u8);
        }
        Dataset::new(pixels, 8, labels, Split::Train).unwrap()
    }

    fn dense_presyn(trace: &ForwardTrace<f64>, n: usize, t: usize, len: usize) -> Vec<f64> {
        match trace.presyn(n, t) {
            PresynRef::Static(x) => x.to_vec(),
            PresynRef::Spikes(active) => {
                let mut x = vec![0.0; len];
                for &j in active {
                    x[j as usize] = 1.0;
                }
                x
            }
        }
    }

    #[test]
    fn decoding_picks_the_busiest_output() {
        assert_eq!(decode_counts(&[5, 9, 2]), 1);
        assert_eq!(decode_counts(&[0, 0, 0]), 0);
        assert_eq!(decode_counts(&[7, 7, 1]), 0);
        assert_eq!(decode_counts(&[1, 3, 3]), 1);
    }

    #[test]
    fn output_error_is_spikes_minus_target() {
        let net = net(&[4, 6, 3], 3);
        let cfg = short_cfg(Mechanism::Dfa);
        let x = toy(1, 0);
        let trace = forward_sample(&net, x.image(0), &cfg).unwrap();
        assert_eq!(trace.recorded_steps, 32);
        let e = output_error(&trace, 2).unwrap();
        for t in 0..trace.recorded_steps {
            let mut want = vec![0.0, 0.0, -1.0];
            for &k in trace.output().spikes_at(t) {
                want[k as usize] += 1.0;
            }
            assert_eq!(&e[t * 3..(t + 1) * 3], &want[..]);
        }
        assert!(matches!(
            output_error(&trace, 3),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn layer_errors_follow_each_mechanism() {
        let net = net(&[4, 5, 6, 3], 11);
        let x = toy(2, 1);
        for mech in Mechanism::ALL {
            let cfg = short_cfg(mech);
            let g = cfg.resolved_backward().unwrap();
            let trace = forward_sample(&net, x.image(1), &cfg).unwrap();
            let e = output_error(&trace, 1).unwrap();
            let sig = backward_errors(mech, &trace, &e, &net, &g).unwrap();
            for t in 0..trace.recorded_steps {
                let raw = &e[t * 3..(t + 1) * 3];
                let gv = |n: usize, i: usize| g.value(trace.layers[n].drive_at(t)[i]);
                let at = |n: usize, d: usize| sig.layers[n][t * d..(t + 1) * d].to_vec();
                let e2 = at(2, 3);
                for i in 0..3 {
                    assert_eq!(e2[i], raw[i] * gv(2, i));
                }
                let e1 = at(1, 6);
                let e0 = at(0, 5);
                for i in 0..6 {
                    let proj: f64 = match mech {
                        Mechanism::Bp => (0..3).map(|k| net.weights[2].get(k, i) * e2[k]).sum(),
                        Mechanism::Fa => (0..3).map(|k| net.feedback.chain[1].get(i, k) * e2[k]).sum(),
                        _ => (0..3).map(|k| net.feedback.direct[1].get(i, k) * raw[k]).sum(),
                    };
                    approx::assert_relative_eq!(e1[i], proj * gv(1, i), max_relative = 1e-12, epsilon = 1e-300);
                }
                for i in 0..5 {
                    let proj: f64 = match mech {
                        Mechanism::Bp => (0..6).map(|k| net.weights[1].get(k, i) * e1[k]).sum(),
                        Mechanism::Fa => (0..6).map(|k| net.feedback.chain[0].get(i, k) * e1[k]).sum(),
                        _ => (0..3).map(|k| net.feedback.direct[0].get(i, k) * raw[k]).sum(),
                    };
                    approx::assert_relative_eq!(e0[i], proj * gv(0, i), max_relative = 1e-12, epsilon = 1e-300);
                }
            }
        }
    }

    #[test]
    fn gradients_are_summed_outer_products() {
        let net = net(&[4, 5, 3], 2);
        let cfg = short_cfg(Mechanism::Bp);
        let g = cfg.resolved_backward().unwrap();
        let x = toy(2, 4);
        let mut grads = Gradients::zeros(&net);
        let mut want: Vec<Matrix<f64>> = net.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        let mut want_b: Vec<Vec<f64>> = net.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        for i in 0..2 {
            let trace = forward_sample(&net, x.image(i), &cfg).unwrap();
            let e = output_error(&trace, x.label(i)).unwrap();
            let sig = backward_errors(Mechanism::Bp, &trace, &e, &net, &g).unwrap();
            grads.accumulate(&trace, &sig).unwrap();
            for n in 0..2 {
                let (rows, cols) = net.weights[n].shape();
                for t in 0..trace.recorded_steps {
                    let e_n = &sig.layers[n][t * rows..(t + 1) * rows];
                    let x_n = dense_presyn(&trace, n, t, cols);
                    for r in 0..rows {
                        want_b[n][r] += e_n[r];
                        for c in 0..cols {
                            let v = want[n].get(r, c) + e_n[r] * x_n[c];
                            want[n].set(r, c, v);
                        }
                    }
                }
            }
        }
        for n in 0..2 {
            for (a, b) in grads.weights[n].as_slice().iter().zip(want[n].as_slice()) {
                approx::assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
            for (a, b) in grads.biases[n].iter().zip(&want_b[n]) {
                approx::assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn zero_error_gives_zero_update() {
        let mut net = net(&[4, 5, 3], 2);
        let before = net.clone();
        let cfg = short_cfg(Mechanism::Dfa);
        let trace = forward_sample(&net, toy(1, 0).image(0), &cfg).unwrap();
        let zeros = ErrorSignal {
            output: vec![0.0; 3 * trace.recorded_steps],
            layers: vec![vec![0.0; 5 * trace.recorded_steps], vec![0.0; 3 * trace.recorded_steps]],
        };
        let mut grads = Gradients::zeros(&net);
        grads.accumulate(&trace, &zeros).unwrap();
        assert!(grads.is_zero());
        accumulate_and_apply(&mut net, &[trace], &[zeros], 1.0).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn non_finite_errors_are_reported() {
        let net = net(&[4, 5, 3], 2);
        let cfg = short_cfg(Mechanism::Dfa);
        let trace = forward_sample(&net, toy(1, 0).image(0), &cfg).unwrap();
        let steps = trace.recorded_steps;
        let mut bad = ErrorSignal {
            output: vec![0.0; 3 * steps],
            layers: vec![vec![0.0; 5 * steps], vec![0.0; 3 * steps]],
        };
        bad.layers[1][3 * 7 + 1] = f64::NAN;
        let err = Gradients::zeros(&net).accumulate(&trace, &bad).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { layer: 1, step: 7 }));
    }

    #[test]
    fn learning_rate_scales_with_fan_in() {
        let net = net(&[784, 1000, 10], 0);
        let lr = layer_learning_rates(&net, 2.0);
        assert_eq!(lr, vec![2.0 / 784.0, 2.0 / 1000.0]);
        approx::assert_relative_eq!(lr[0] / lr[1], 1000.0 / 784.0, max_relative = 1e-15);
    }

    #[test]
    fn adfa_with_the_surrogate_matches_dfa_exactly() {
        let data = toy(24, 5);
        let mut a = net(&[4, 6, 2], 8);
        let mut b = a.clone();
        let dfa = short_cfg(Mechanism::Dfa);
        let mut adfa = short_cfg(Mechanism::Adfa);
        adfa.backward = Some(BackwardFnSpec::surrogate(&adfa.lif));
        let ra = train(&mut a, &data, Some(&data), &dfa).unwrap();
        let rb = train(&mut b, &data, Some(&data), &adfa).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.final_test_acc(), rb.final_test_acc());
    }

    #[test]
    fn zero_gamma_freezes_hidden_layers_under_feedback_mechanisms() {
        let data = toy(16, 6);
        let topo = NetworkTopology::new(vec![4, 6, 5, 2], 4).unwrap();
        let stats = InitStats { gamma: 0.0, ..InitStats::default() };
        let start = NetworkState::<f64>::initialize(&topo, &stats).unwrap();
        for mech in [Mechanism::Fa, Mechanism::Dfa, Mechanism::Adfa] {
            let mut n = start.clone();
            train(&mut n, &data, None, &short_cfg(mech)).unwrap();
            assert_eq!(n.weights[..2], start.weights[..2], "{mech}");
            assert_eq!(n.biases[..2], start.biases[..2], "{mech}");
        }
    }

    #[test]
    fn feedback_is_never_trained() {
        let data = toy(16, 6);
        for mech in Mechanism::ALL {
            let mut n = net(&[4, 6, 5, 2], 4);
            let sum = n.feedback_checksum();
            train(&mut n, &data, None, &short_cfg(mech)).unwrap();
            assert_eq!(n.feedback_checksum(), sum);
        }
    }

    #[test]
    fn shorter_runs_are_prefixes_of_longer_ones() {
        let data = toy(20, 2);
        let mut cfg = short_cfg(Mechanism::Fa);
        let mut a = net(&[4, 6, 2], 1);
        let mut b = a.clone();
        cfg.epochs = 2;
        let ra = train(&mut a, &data, Some(&data), &cfg).unwrap();
        cfg.epochs = 3;
        let rb = train(&mut b, &data, Some(&data), &cfg).unwrap();
        for (x, y) in ra.epochs.iter().zip(&rb.epochs) {
            assert_eq!((x.epoch, x.train_acc, x.test_acc), (y.epoch, y.train_acc, y.test_acc));
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let data = toy(40, 3);
        let mut cfg = short_cfg(Mechanism::Bp);
        cfg.batch_size = 25;
        let mut a = net(&[4, 6, 2], 1);
        let mut b = a.clone();
        let ra = train(&mut a, &data, Some(&data), &cfg).unwrap();
        cfg.threads = 3;
        let rb = train(&mut b, &data, Some(&data), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.final_test_acc(), rb.final_test_acc());
    }

    #[test]
    fn every_mechanism_learns_a_separable_task() {
        let data = classes8(80, 9);
        for (mech, lr) in [(Mechanism::Bp, 1.0), (Mechanism::Fa, 3.0), (Mechanism::Dfa, 1.0), (Mechanism::Adfa, 3.0)] {
            let mut cfg = short_cfg(mech);
            cfg.interval_ms = 40.0;
            cfg.settle_ms = 8.0;
            cfg.epochs = 50;
            cfg.batch_size = 10;
            cfg.lr_base = lr;
            if mech == Mechanism::Adfa {
                cfg.backward = Some(BackwardFnSpec::opto(0.1, 150.0));
            }
            let mut n = net(&[8, 16, 8], 5);
            let mut best: f64 = 0.0;
            train_with(&mut n, &data, None, &cfg, |r| best = best.max(r.train_acc)).unwrap();
            assert_eq!(best, 1.0, "{mech}");
        }
    }

    #[test]
    fn empty_inputs_and_bad_configs_are_rejected() {
        let mut n = net(&[4, 6, 2], 1);
        let cfg = short_cfg(Mechanism::Dfa);
        let empty = Dataset::<f64>::new(vec![], 4, vec![], Split::Test).unwrap();
        assert!(matches!(evaluate(&n, &empty, &cfg), Err(Error::EmptyDataset)));
        assert!(matches!(train(&mut n, &empty, None, &cfg), Err(Error::EmptyDataset)));
        let mut window = cfg.clone();
        window.settle_ms = window.interval_ms;
        assert!(window.validate().is_err());
        let opto = cfg.clone().with_backward(BackwardFnSpec::opto(0.1, 150.0));
        assert!(opto.validate().is_err());
        let allowed = TrainConfig { allow_g_override: true, ..opto };
        assert!(allowed.validate().is_ok());
        let wrong_dim = toy(4, 0);
        assert!(train(&mut net(&[3, 4, 2], 0), &wrong_dim, None, &cfg).is_err());
    }

    #[test]
    fn csv_records_exclude_wall_time() {
        let rec = RunRecord {
            fingerprint: "f".into(),
            epochs: vec![EpochRecord { epoch: 1, train_acc: 0.5, test_acc: Some(0.25), wall_ms: 12 }],
        };
        let mut out = Vec::new();
        rec.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "epoch,train_acc,test_acc\n1,0.500000,0.250000\n");
        let mut out = Vec::new();
        rec.write_timing_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "epoch,wall_ms\n1,12\n");
    }
}
