//! Branched network mapping sub-6GHz features to a mmW BS distribution and
//! per-beam rate estimates.
//!
//! ```text
//! input B_μ×n_f ─ conv 1×n_f (32) ─ conv B_μ×32 (64) ─ dense 128 ─ dense 256 ─┬─ dense 128 ─ dense 64 (h_A) ─ dense B_m ─ softmax
//!                                                                              │                    │
//!                                                                              └─ dense 128 ─ dense 64 ─ concat[h_A, ·] ─ dense 128 ─ dense M ─ ReLU
//! ```
//!
//! Both convolutions are valid with stride 1, so each reduces to a dense map:
//! the first is shared across BS rows, the second spans the whole
//! `B_μ × 32` activation. ReLU follows every hidden layer.

pub mod checkpoint;
pub mod gradcheck;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::top_b_indices;
use crate::features::{FeatureMatrix, Sample, N_FEATURES};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub b_mu: usize,
    pub n_features: usize,
    pub b_m: usize,
    pub n_beams: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub base_dense: [usize; 2],
    pub branch_dense: [usize; 2],
    pub joint_dense: usize,
    pub init: String,
    pub rng_seed: u64,
}

impl ModelConfig {
    pub fn new(b_mu: usize, b_m: usize, n_beams: usize, rng_seed: u64) -> Self {
        Self {
            b_mu,
            n_features: N_FEATURES,
            b_m,
            n_beams,
            conv1_filters: 32,
            conv2_filters: 64,
            base_dense: [128, 256],
            branch_dense: [128, 64],
            joint_dense: 128,
            init: "he-uniform".into(),
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.b_mu,
            self.n_features,
            self.b_m,
            self.n_beams,
            self.conv1_filters,
            self.conv2_filters,
            self.base_dense[0],
            self.base_dense[1],
            self.branch_dense[0],
            self.branch_dense[1],
            self.joint_dense,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config(format!("every model size must be at least 1: {self:?}")));
        }
        if self.init != "he-uniform" {
            return Err(Error::Config(format!("unknown init scheme {:?}", self.init)));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.b_mu * self.n_features
    }

    /// `(fan_in, fan_out)` of every layer in [`LAYER_NAMES`] order.
    pub fn layer_shapes(&self) -> [(usize, usize); N_LAYERS] {
        let [base1, base2] = self.base_dense;
        let [br1, br2] = self.branch_dense;
        [
            (self.n_features, self.conv1_filters),
            (self.b_mu * self.conv1_filters, self.conv2_filters),
            (self.conv2_filters, base1),
            (base1, base2),
            (base2, br1),
            (br1, br2),
            (br2, self.b_m),
            (base2, br1),
            (br1, br2),
            (2 * br2, self.joint_dense),
            (self.joint_dense, self.n_beams),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

pub const N_LAYERS: usize = 11;

pub const LAYER_NAMES: [&str; N_LAYERS] = [
    "conv1",
    "conv2",
    "base_dense1",
    "base_dense2",
    "bs_dense1",
    "bs_dense2",
    "bs_logits",
    "beam_dense1",
    "beam_dense2",
    "beam_joint",
    "beam_rates",
];

const CONV1: usize = 0;
const CONV2: usize = 1;
const BASE1: usize = 2;
const BASE2: usize = 3;
const BS1: usize = 4;
const BS2: usize = 5;
const BS_OUT: usize = 6;
const BEAM1: usize = 7;
const BEAM2: usize = 8;
const BEAM_JOINT: usize = 9;
const BEAM_OUT: usize = 10;

/// Layers that only feed the beam-rate head.
pub const BEAM_ONLY_LAYERS: [usize; 2] = [BEAM_JOINT, BEAM_OUT];

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in × fan_out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn apply(&self, input: &Array2<f64>) -> Array2<f64> {
        input.dot(&self.weight) + &self.bias
    }
}

/// Parameter store; gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub config: ModelConfig,
    pub layers: Vec<Dense>,
}

impl Params {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            config: config.clone(),
            layers: config.layer_shapes().iter().map(|&(i, o)| Dense::zeros(i, o)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// `(name, values)` for every tensor, weights before biases.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(2 * N_LAYERS);
        for (name, layer) in LAYER_NAMES.iter().zip(&self.layers) {
            out.push((format!("{name}.weight"), layer.weight.as_slice().expect("standard layout")));
            out.push((format!("{name}.bias"), layer.bias.as_slice().expect("standard layout")));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::with_capacity(2 * N_LAYERS);
        for (name, layer) in LAYER_NAMES.iter().zip(&mut self.layers) {
            out.push((format!("{name}.weight"), layer.weight.as_slice_mut().expect("standard layout")));
            out.push((format!("{name}.bias"), layer.bias.as_slice_mut().expect("standard layout")));
        }
        out
    }

    /// Tensor `index` in [`Params::tensors`] order.
    pub(crate) fn tensor_mut(&mut self, index: usize) -> &mut [f64] {
        let layer = &mut self.layers[index / 2];
        let values = if index % 2 == 0 {
            layer.weight.as_slice_mut()
        } else {
            layer.bias.as_slice_mut()
        };
        values.expect("standard layout")
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }
}

/// Initial bias of the rate head, near the typical mean of a target vector.
pub const RATE_HEAD_BIAS: f64 = 0.1;
/// Shrink factor on the rate head's initial weights.
pub const RATE_HEAD_WEIGHT_SCALE: f64 = 0.1;

/// Scaled-uniform fan-in initialization, `U(±√(6/fan_in))`, zero biases.
///
/// The rate head is the exception: its weights are drawn at a tenth of that
/// range and its bias starts at 0.1, so every output ReLU starts active.
pub fn init_model(config: &ModelConfig) -> Result<Params> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut params = Params::zeros(config);
    for (i, layer) in params.layers.iter_mut().enumerate() {
        let mut limit = (6.0 / layer.weight.nrows() as f64).sqrt();
        if i == BEAM_OUT {
            limit *= RATE_HEAD_WEIGHT_SCALE;
            layer.bias.fill(RATE_HEAD_BIAS);
        }
        layer.weight.mapv_inplace(|_| rng.gen_range(-limit..limit));
    }
    Ok(params)
}

/// Relative weights of the two loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.0, reg: 1.0 }
    }
}

/// Inputs and labels for a mini-batch, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub bs_labels: Vec<usize>,
    pub targets: Array2<f64>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let samples: Vec<&Sample> = samples.into_iter().collect();
        let n_in = samples.first().map_or(0, |s| s.features.n_rows() * N_FEATURES);
        let n_out = samples.first().map_or(0, |s| s.target.len());
        let mut inputs = Array2::zeros((samples.len(), n_in));
        let mut targets = Array2::zeros((samples.len(), n_out));
        for (i, s) in samples.iter().enumerate() {
            for (dst, v) in inputs.row_mut(i).iter_mut().zip(s.features.flat()) {
                *dst = v;
            }
            for (dst, v) in targets.row_mut(i).iter_mut().zip(&s.target) {
                *dst = *v;
            }
        }
        Self {
            inputs,
            bs_labels: samples.iter().map(|s| s.label.bs_index).collect(),
            targets,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Activations kept from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Input fed to each layer (already reshaped for the convolutions).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
    /// Softmax over BS logits, `batch × B_m`.
    pub bs_probs: Array2<f64>,
    /// Final ReLU output, `batch × M`.
    pub beam_rates: Array2<f64>,
}

fn relu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| v.max(0.0))
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn check_input_width(params: &Params, inputs: &Array2<f64>) -> Result<()> {
    let expected = params.config.input_len();
    if inputs.ncols() != expected {
        return Err(Error::Contract(format!(
            "model expects {} x {} inputs ({expected} values), got {}",
            params.config.b_mu,
            params.config.n_features,
            inputs.ncols()
        )));
    }
    Ok(())
}

/// Batched forward pass; `inputs` is `batch × (B_μ·n_f)` in row-major
/// feature-matrix order.
pub fn forward_batch(params: &Params, inputs: &Array2<f64>) -> Result<ForwardPass> {
    check_input_width(params, inputs)?;
    let cfg = &params.config;
    let batch = inputs.nrows();
    let l = &params.layers;
    let mut layer_in: Vec<Array2<f64>> = Vec::with_capacity(N_LAYERS);
    let mut pre: Vec<Array2<f64>> = Vec::with_capacity(N_LAYERS);
    let mut run = |idx: usize, input: Array2<f64>| -> Array2<f64> {
        let z = l[idx].apply(&input);
        let a = relu(&z);
        layer_in.push(input);
        pre.push(z);
        a
    };

    let rows = inputs
        .to_shape((batch * cfg.b_mu, cfg.n_features))
        .expect("contiguous input")
        .to_owned();
    let a1 = run(CONV1, rows);
    let a1 = a1
        .into_shape_with_order((batch, cfg.b_mu * cfg.conv1_filters))
        .expect("contiguous activation");
    let a2 = run(CONV2, a1);
    let a3 = run(BASE1, a2);
    let base = run(BASE2, a3);
    let a5 = run(BS1, base.clone());
    let h_a = run(BS2, a5);
    // bs_logits: linear, softmax applied below.
    let _ = run(BS_OUT, h_a.clone());
    let a8 = run(BEAM1, base);
    let h_b = run(BEAM2, a8);
    let joint_in = ndarray::concatenate(Axis(1), &[h_a.view(), h_b.view()]).expect("matching rows");
    let a10 = run(BEAM_JOINT, joint_in);
    let beam_rates = run(BEAM_OUT, a10);

    let bs_probs = softmax_rows(&pre[BS_OUT]);
    Ok(ForwardPass {
        inputs: layer_in,
        pre,
        bs_probs,
        beam_rates,
    })
}

/// Model output for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub bs_probs: Vec<f64>,
    pub beam_rates: Vec<f64>,
}

pub fn forward(params: &Params, input: &FeatureMatrix) -> Result<Output> {
    let row = Array2::from_shape_vec((1, input.n_rows() * N_FEATURES), input.flat().collect())
        .expect("row length matches");
    let pass = forward_batch(params, &row)?;
    Ok(Output {
        bs_probs: pass.bs_probs.row(0).to_vec(),
        beam_rates: pass.beam_rates.row(0).to_vec(),
    })
}

/// `λ_cls·CE + λ_reg·MSE` for one sample; CE in nats, MSE averaged over beams.
pub fn loss(output: &Output, bs_label: usize, target: &[f64], weights: LossWeights) -> f64 {
    let ce = -output.bs_probs[bs_label].ln();
    let mse = output
        .beam_rates
        .iter()
        .zip(target)
        .map(|(r, t)| (r - t).powi(2))
        .sum::<f64>()
        / target.len() as f64;
    weights.cls * ce + weights.reg * mse
}

/// Per-sample losses of a forward pass.
pub fn batch_losses(pass: &ForwardPass, batch: &Batch, weights: LossWeights) -> Vec<f64> {
    (0..batch.len())
        .map(|i| {
            let ce = -pass.bs_probs[[i, batch.bs_labels[i]]].ln();
            let diff = &pass.beam_rates.row(i) - &batch.targets.row(i);
            let mse = diff.mapv(|d| d * d).mean().unwrap_or(0.0);
            weights.cls * ce + weights.reg * mse
        })
        .collect()
}

/// Mean loss over the batch.
pub fn batch_loss(params: &Params, batch: &Batch, weights: LossWeights) -> Result<f64> {
    let pass = forward_batch(params, &batch.inputs)?;
    let losses = batch_losses(&pass, batch, weights);
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn relu_mask(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    ndarray::Zip::from(grad).and(pre).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Backpropagates the mean batch loss. Returns `(mean loss, gradient)`.
pub fn backward(params: &Params, batch: &Batch, weights: LossWeights) -> Result<(f64, Params)> {
    if batch.is_empty() {
        return Err(Error::Contract("cannot backpropagate an empty batch".into()));
    }
    let pass = forward_batch(params, &batch.inputs)?;
    let losses = batch_losses(&pass, batch, weights);
    let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    let grad = backward_from(params, &pass, batch, weights);
    Ok((mean_loss, grad))
}

pub(crate) fn backward_from(params: &Params, pass: &ForwardPass, batch: &Batch, weights: LossWeights) -> Params {
    let cfg = &params.config;
    let n = batch.len() as f64;
    let l = &params.layers;
    let mut grad = params.zeros_like();

    // Fills the gradient of layer `idx` from dL/dz and returns dL/d(input).
    let mut dense_back = |idx: usize, dz: &Array2<f64>| -> Array2<f64> {
        grad.layers[idx].weight = pass.inputs[idx].t().dot(dz);
        grad.layers[idx].bias = dz.sum_axis(Axis(0));
        dz.dot(&l[idx].weight.t())
    };

    // Regression head: MSE then the output ReLU.
    let mut dz_out = (&pass.beam_rates - &batch.targets) * (2.0 * weights.reg / (n * cfg.n_beams as f64));
    relu_mask(&mut dz_out, &pass.pre[BEAM_OUT]);
    let mut d_joint = dense_back(BEAM_OUT, &dz_out);
    relu_mask(&mut d_joint, &pass.pre[BEAM_JOINT]);
    let d_concat = dense_back(BEAM_JOINT, &d_joint);
    let h = cfg.branch_dense[1];
    let d_h_a_joint = d_concat.slice(s![.., ..h]).to_owned();
    let mut d_h_b = d_concat.slice(s![.., h..]).to_owned();

    // Classification head: softmax + cross-entropy gives probs - onehot.
    let mut dz_logits = pass.bs_probs.clone();
    for (i, &y) in batch.bs_labels.iter().enumerate() {
        dz_logits[[i, y]] -= 1.0;
    }
    dz_logits *= weights.cls / n;
    let mut d_h_a = dense_back(BS_OUT, &dz_logits) + d_h_a_joint;

    relu_mask(&mut d_h_b, &pass.pre[BEAM2]);
    let mut d = dense_back(BEAM2, &d_h_b);
    relu_mask(&mut d, &pass.pre[BEAM1]);
    let d_base_beam = dense_back(BEAM1, &d);

    relu_mask(&mut d_h_a, &pass.pre[BS2]);
    let mut d = dense_back(BS2, &d_h_a);
    relu_mask(&mut d, &pass.pre[BS1]);
    let d_base_bs = dense_back(BS1, &d);

    let mut d = d_base_beam + d_base_bs;
    relu_mask(&mut d, &pass.pre[BASE2]);
    let mut d = dense_back(BASE2, &d);
    relu_mask(&mut d, &pass.pre[BASE1]);
    let mut d = dense_back(BASE1, &d);
    relu_mask(&mut d, &pass.pre[CONV2]);
    let d = dense_back(CONV2, &d);
    let mut d = d
        .into_shape_with_order((batch.len() * cfg.b_mu, cfg.conv1_filters))
        .expect("contiguous gradient");
    relu_mask(&mut d, &pass.pre[CONV1]);
    let _ = dense_back(CONV1, &d);
    grad
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub bs_index: usize,
    /// Top-b beams, best first.
    pub beams: Vec<usize>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict_output(output: &Output, b: usize) -> Result<Prediction> {
    Ok(Prediction {
        bs_index: argmax(&output.bs_probs),
        beams: top_b_indices(&output.beam_rates, b)?,
    })
}

/// Soft-decision BS choice plus the `b` highest-rated beams.
pub fn predict(params: &Params, input: &FeatureMatrix, b: usize) -> Result<Prediction> {
    predict_output(&forward(params, input)?, b)
}

/// Outputs for many feature matrices at once, in input order.
pub fn forward_many(params: &Params, inputs: &[&FeatureMatrix]) -> Result<Vec<Output>> {
    let width = params.config.input_len();
    let mut x = Array2::zeros((inputs.len(), width));
    for (i, m) in inputs.iter().enumerate() {
        if m.n_rows() * N_FEATURES != width {
            return Err(Error::Contract(format!("input {i} has {} BS rows", m.n_rows())));
        }
        for (dst, v) in x.row_mut(i).iter_mut().zip(m.flat()) {
            *dst = v;
        }
    }
    let pass = forward_batch(params, &x)?;
    Ok((0..inputs.len())
        .map(|i| Output {
            bs_probs: pass.bs_probs.row(i).to_vec(),
            beam_rates: pass.beam_rates.row(i).to_vec(),
        })
        .collect())
}
