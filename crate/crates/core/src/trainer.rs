//! Mini-batch SGD for a softmax classifier that produces the logits to be
//! calibrated.
//!
//! The head is linear by default, with an optional ReLU hidden layer. In
//! online mode every batch's raw logits are folded into an EMA accumulator and,
//! once warm-up has passed, mapped through [`online_inverse`] before the loss.
//! Prediction always returns raw logits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibrate::{finalize, BetaMode, CalibrationParams};
use crate::error::{Error, Result};
use crate::record::{ClassLayout, Matrix};
use crate::stats::{RunningStats, StatsConfig, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::synth::Dataset;

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineLogn {
    pub beta_mode: BetaMode,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Optimizer steps before the inverse transform is applied.
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn default_warmup() -> usize {
    100
}

impl OnlineLogn {
    pub fn new(beta_mode: BetaMode) -> Self {
        Self {
            beta_mode,
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
            warmup_steps: default_warmup(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Width of the ReLU hidden layer; `None` for a linear head.
    #[serde(default)]
    pub hidden_units: Option<usize>,
    #[serde(default)]
    pub online: Option<OnlineLogn>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 20,
            batch_size: 64,
            seed: 0,
            weight_decay: 0.0,
            hidden_units: None,
            online: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidParameter("weight decay must be >= 0".into()));
        }
        if self.hidden_units == Some(0) {
            return Err(Error::InvalidParameter("hidden layer needs at least one unit".into()));
        }
        Ok(())
    }
}

/// Fully connected layer, `weights` stored as `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    fn gaussian(inputs: usize, outputs: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut layer = Self::zeros(inputs, outputs);
        for w in layer.weights.as_mut_slice() {
            let z: f64 = StandardNormal.sample(rng);
            *w = std * z;
        }
        layer
    }

    fn inputs(&self) -> usize {
        self.weights.cols()
    }

    fn outputs(&self) -> usize {
        self.weights.rows()
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.outputs());
        for i in 0..x.rows() {
            let xi = x.row(i);
            let oi = out.row_mut(i);
            for (k, o) in oi.iter_mut().enumerate() {
                *o = self.bias[k] + dot(self.weights.row(k), xi);
            }
        }
        out
    }

    fn sq_norm(&self) -> f64 {
        self.weights.as_slice().iter().map(|w| w * w).sum()
    }

    fn is_finite(&self) -> bool {
        self.weights.as_slice().iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-slot affine map `z * scale + shift` applied to logits before the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitAffine {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl LogitAffine {
    pub fn from_params(params: &CalibrationParams) -> Self {
        Self {
            scale: params.scales(),
            shift: params.adj_mean.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub hidden: Option<Dense>,
    pub output: Dense,
    pub layout: ClassLayout,
    pub train_config: TrainConfig,
    /// Statistics accumulated in online mode.
    #[serde(default)]
    pub online_stats: Option<RunningStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean cross-entropy over the training set before the first update.
    pub initial_loss: f64,
    /// Mean batch cross-entropy of each epoch.
    pub epoch_loss: Vec<f64>,
}

impl TrainLog {
    pub fn final_loss(&self) -> f64 {
        self.epoch_loss.last().copied().unwrap_or(self.initial_loss)
    }

    /// CSV with columns `epoch,loss`; epoch 0 is the initial loss.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        s.push_str(&format!("0,{}\n", self.initial_loss));
        for (e, l) in self.epoch_loss.iter().enumerate() {
            s.push_str(&format!("{},{}\n", e + 1, l));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub hidden: Option<Dense>,
    pub output: Dense,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(self.hidden.as_ref(), &self.output)
    }
}

fn flatten_layers(hidden: Option<&Dense>, output: &Dense) -> Vec<f64> {
    let mut v = Vec::new();
    for layer in hidden.into_iter().chain(std::iter::once(output)) {
        v.extend_from_slice(layer.weights.as_slice());
        v.extend_from_slice(&layer.bias);
    }
    v
}

struct ForwardPass {
    hidden_pre: Option<Matrix>,
    hidden: Option<Matrix>,
    logits: Matrix,
}

impl ModelParams {
    /// Fresh parameters for `inputs` features; deterministic in `config.seed`.
    pub fn init(inputs: usize, layout: ClassLayout, config: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(INIT_STREAM);
        let k = layout.num_slots();
        let (hidden, output) = match config.hidden_units {
            Some(h) => (
                Some(Dense::gaussian(inputs, h, (2.0 / inputs as f64).sqrt(), &mut rng)),
                Dense::gaussian(h, k, (1.0 / h as f64).sqrt(), &mut rng),
            ),
            None => (None, Dense::zeros(inputs, k)),
        };
        Self {
            hidden,
            output,
            layout,
            train_config: config.clone(),
            online_stats: None,
        }
    }

    pub fn num_inputs(&self) -> usize {
        self.hidden.as_ref().unwrap_or(&self.output).inputs()
    }

    pub fn num_outputs(&self) -> usize {
        self.output.outputs()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        flatten_layers(self.hidden.as_ref(), &self.output)
    }

    /// Overwrites all parameters from a vector laid out like [`flat_params`](Self::flat_params).
    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.flat_params().len();
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: values.len(),
                record: None,
            });
        }
        let mut rest = values;
        for layer in self.hidden.iter_mut().chain(std::iter::once(&mut self.output)) {
            let nw = layer.weights.as_slice().len();
            layer.weights.as_mut_slice().copy_from_slice(&rest[..nw]);
            rest = &rest[nw..];
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&rest[..nb]);
            rest = &rest[nb..];
        }
        Ok(())
    }

    fn forward(&self, x: &Matrix) -> ForwardPass {
        match &self.hidden {
            Some(h) => {
                let pre = h.forward(x);
                let mut act = pre.clone();
                act.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                let logits = self.output.forward(&act);
                ForwardPass {
                    hidden_pre: Some(pre),
                    hidden: Some(act),
                    logits,
                }
            }
            None => ForwardPass {
                hidden_pre: None,
                hidden: None,
                logits: self.output.forward(x),
            },
        }
    }

    /// Mean softmax cross-entropy plus `weight_decay / 2 * ||W||^2`, and its
    /// gradient. `affine` is applied to the logits before the softmax and is
    /// treated as a constant.
    pub fn loss_and_gradient(
        &self,
        x: &Matrix,
        labels: &[usize],
        affine: Option<&LogitAffine>,
        weight_decay: f64,
    ) -> Result<(f64, Gradients)> {
        self.check_inputs(x)?;
        if labels.len() != x.rows() {
            return Err(Error::DimensionMismatch {
                expected: x.rows(),
                found: labels.len(),
                record: None,
            });
        }
        let fwd = self.forward(x);
        let (ce, grads) = self.backward(x, labels, &fwd, affine, weight_decay)?;
        let mut reg = self.output.sq_norm();
        if let Some(h) = &self.hidden {
            reg += h.sq_norm();
        }
        Ok((ce + 0.5 * weight_decay * reg, grads))
    }

    /// Returns the mean cross-entropy (without the decay term) and gradients.
    fn backward(
        &self,
        x: &Matrix,
        labels: &[usize],
        fwd: &ForwardPass,
        affine: Option<&LogitAffine>,
        weight_decay: f64,
    ) -> Result<(f64, Gradients)> {
        let b = x.rows();
        let k = self.num_outputs();
        let inv_b = 1.0 / b as f64;
        // dL/dz for each sample
        let mut g = Matrix::zeros(b, k);
        let mut loss = 0.0;
        let mut z = vec![0.0; k];
        for i in 0..b {
            let label = labels[i];
            if label >= k {
                return Err(Error::LabelOutOfRange {
                    record: i,
                    label,
                    num_classes: k,
                });
            }
            z.copy_from_slice(fwd.logits.row(i));
            if let Some(a) = affine {
                for ((v, s), t) in z.iter_mut().zip(&a.scale).zip(&a.shift) {
                    *v = *v * s + t;
                }
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - z[label];
            let gi = g.row_mut(i);
            for (c, gv) in gi.iter_mut().enumerate() {
                let p = (z[c] - lse).exp();
                let y = if c == label { 1.0 } else { 0.0 };
                *gv = (p - y) * inv_b;
                if let Some(a) = affine {
                    *gv *= a.scale[c];
                }
            }
        }
        loss *= inv_b;

        let input = fwd.hidden.as_ref().unwrap_or(x);
        let mut out_grad = Dense::zeros(self.output.inputs(), k);
        accumulate_layer_grad(&mut out_grad, &g, input);
        add_decay(&mut out_grad, &self.output, weight_decay);

        let hidden_grad = match (&self.hidden, &fwd.hidden_pre) {
            (Some(h), Some(pre)) => {
                let units = h.outputs();
                let mut gh = Matrix::zeros(b, units);
                for i in 0..b {
                    let gi = g.row(i);
                    let pi = pre.row(i);
                    let ghi = gh.row_mut(i);
                    for (c, &gc) in gi.iter().enumerate() {
                        if gc == 0.0 {
                            continue;
                        }
                        for (u, w) in self.output.weights.row(c).iter().enumerate() {
                            ghi[u] += gc * w;
                        }
                    }
                    for (v, p) in ghi.iter_mut().zip(pi) {
                        if *p <= 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                let mut hg = Dense::zeros(h.inputs(), units);
                accumulate_layer_grad(&mut hg, &gh, x);
                add_decay(&mut hg, h, weight_decay);
                Some(hg)
            }
            _ => None,
        };
        Ok((
            loss,
            Gradients {
                hidden: hidden_grad,
                output: out_grad,
            },
        ))
    }

    fn check_inputs(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.num_inputs() {
            return Err(Error::DimensionMismatch {
                expected: self.num_inputs(),
                found: x.cols(),
                record: None,
            });
        }
        Ok(())
    }

    fn apply(&mut self, grads: &Gradients, lr: f64) {
        step(&mut self.output, &grads.output, lr);
        if let (Some(h), Some(g)) = (self.hidden.as_mut(), grads.hidden.as_ref()) {
            step(h, g, lr);
        }
    }

    fn is_finite(&self) -> bool {
        self.output.is_finite() && self.hidden.as_ref().is_none_or(Dense::is_finite)
    }

    fn mean_loss(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        let fwd = self.forward(x);
        let (ce, _) = self.backward(x, labels, &fwd, None, 0.0)?;
        Ok(ce)
    }
}

fn accumulate_layer_grad(layer: &mut Dense, g: &Matrix, input: &Matrix) {
    for i in 0..g.rows() {
        let xi = input.row(i);
        for (c, &gc) in g.row(i).iter().enumerate() {
            if gc == 0.0 {
                continue;
            }
            layer.bias[c] += gc;
            for (w, xv) in layer.weights.row_mut(c).iter_mut().zip(xi) {
                *w += gc * xv;
            }
        }
    }
}

fn add_decay(grad: &mut Dense, params: &Dense, weight_decay: f64) {
    if weight_decay == 0.0 {
        return;
    }
    for (g, w) in grad.weights.as_mut_slice().iter_mut().zip(params.weights.as_slice()) {
        *g += weight_decay * w;
    }
}

fn step(layer: &mut Dense, grad: &Dense, lr: f64) {
    for (w, g) in layer.weights.as_mut_slice().iter_mut().zip(grad.weights.as_slice()) {
        *w -= lr * g;
    }
    for (b, g) in layer.bias.iter_mut().zip(&grad.bias) {
        *b -= lr * g;
    }
}

/// Trains a classifier on `dataset`. Deterministic in `config.seed`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let layout = dataset.layout;
    let mut model = ModelParams::init(dataset.features.cols(), layout, config);
    let initial_loss = model.mean_loss(&dataset.features, &dataset.labels)?;

    let mut online = match &config.online {
        Some(o) => Some((
            o,
            RunningStats::new(
                layout.num_slots(),
                StatsConfig {
                    momentum: o.momentum,
                    eps: o.eps,
                    bg_index: layout.bg_index(),
                },
            )?,
        )),
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut steps = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let x = dataset.features.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
            let fwd = model.forward(&x);
            let affine = match online.as_mut() {
                Some((o, stats)) => {
                    if fwd.logits.as_slice().iter().any(|v| !v.is_finite()) {
                        return Err(Error::Divergence {
                            epoch,
                            batch: bi,
                            loss: f64::NAN,
                        });
                    }
                    stats.update_ema_rows(&fwd.logits)?;
                    if steps >= o.warmup_steps {
                        Some(LogitAffine::from_params(&finalize(stats, o.beta_mode, 1.0)?))
                    } else {
                        None
                    }
                }
                None => None,
            };
            let (loss, grads) = model.backward(&x, &labels, &fwd, affine.as_ref(), config.weight_decay)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi, loss });
            }
            model.apply(&grads, config.learning_rate);
            if !model.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi, loss });
            }
            total += loss;
            batches += 1;
            steps += 1;
        }
        epoch_loss.push(total / batches as f64);
    }
    model.online_stats = online.map(|(_, s)| s);
    Ok((
        model,
        TrainLog {
            initial_loss,
            epoch_loss,
        },
    ))
}

/// Raw logits for each row of `features`.
pub fn predict_logits(model: &ModelParams, features: &Matrix) -> Result<Matrix> {
    model.check_inputs(features)?;
    Ok(model.forward(features).logits)
}
