//! Dataset splitting, optimizers, the mini-batch training loop and the
//! training-fraction sweep.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::evaluate;
use crate::features::{fit_normalizer, NormStats, Sample};
use crate::model::{backward, batch_losses, forward_batch, init_model, Batch, LossWeights, ModelConfig, Params};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub split_ratio: f64,
    pub training_data_fraction: f64,
    pub rng_seed: u64,
    pub lambda_cls: f64,
    pub lambda_reg: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            split_ratio: 0.8,
            training_data_fraction: 1.0,
            rng_seed: 7,
            lambda_cls: 1.0,
            lambda_reg: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            cls: self.lambda_cls,
            reg: self.lambda_reg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio)));
        }
        if !(self.training_data_fraction > 0.0 && self.training_data_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "training_data_fraction must lie in (0, 1], got {}",
                self.training_data_fraction
            )));
        }
        if !(self.lambda_cls >= 0.0 && self.lambda_reg >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Disjoint train/test index lists covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then the first `round(ratio·n)` indices train.
pub fn split_dataset(n_samples: usize, ratio: f64, seed: u64) -> Result<Split> {
    if n_samples < 2 {
        return Err(Error::Data(format!("need at least 2 samples to split, got {n_samples}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let n_train = (ratio * n_samples as f64).round() as usize;
    if n_train == 0 || n_train == n_samples {
        return Err(Error::Data(format!(
            "ratio {ratio} leaves an empty side when splitting {n_samples} samples"
        )));
    }
    let mut idx: Vec<usize> = (0..n_samples).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(n_train);
    Ok(Split { train: idx, test })
}

impl Split {
    pub fn to_text(&self, config_hash: &str) -> String {
        let join = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        format!(
            "# beamsel-split v1\n# config_hash={config_hash}\ntrain {}\ntest {}\n",
            join(&self.train),
            join(&self.test)
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("# beamsel-split v1") {
            return Err(Error::Data("missing '# beamsel-split v1' header".into()));
        }
        let mut lines = lines.skip_while(|l| l.starts_with('#'));
        let mut list = |tag: &str| -> Result<Vec<usize>> {
            let line = lines.next().ok_or_else(|| Error::Data(format!("missing {tag} line")))?;
            let mut tokens = line.split_whitespace();
            if tokens.next() != Some(tag) {
                return Err(Error::Data(format!("expected {tag} line")));
            }
            tokens
                .map(|t| t.parse().map_err(|_| Error::Data(format!("bad index {t:?}"))))
                .collect()
        };
        Ok(Self {
            train: list("train")?,
            test: list("test")?,
        })
    }

    pub fn write(&self, path: &Path, config_hash: &str) -> Result<()> {
        std::fs::write(path, self.to_text(config_hash)).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Checks the split is disjoint and covers exactly `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Data(format!("split index {i} is out of range or repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Data("split does not cover every sample".into()));
        }
        Ok(())
    }
}

/// Normalizer fitted on the train side, plus both sides normalized.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub norm: NormStats,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn prepare(samples: &[Sample], split: &Split) -> Result<PreparedData> {
    split.validate(samples.len())?;
    let norm = fit_normalizer(split.train.iter().map(|&i| &samples[i].features))?;
    let apply = |idx: &[usize]| -> Vec<Sample> {
        idx.iter()
            .map(|&i| {
                let mut s = samples[i].clone();
                s.features = norm.normalize(&s.features);
                s
            })
            .collect()
    };
    Ok(PreparedData {
        train: apply(&split.train),
        test: apply(&split.test),
        norm,
    })
}

pub trait Optimizer {
    fn step(&mut self, params: &mut Params, grad: &Params);
}

pub struct Sgd {
    pub learning_rate: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut Params, grad: &Params) {
        for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(grad.tensors()) {
            for (p, g) in p.iter_mut().zip(g) {
                *p -= self.learning_rate * g;
            }
        }
    }
}

/// Adaptive-moment estimation with bias correction.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Params,
    v: Params,
    t: i32,
}

impl Adam {
    pub fn new(params: &Params, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut Params, grad: &Params) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for (((_, p), (_, g)), ((_, m), (_, v))) in tensors {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

pub fn make_optimizer(params: &Params, config: &TrainConfig) -> Box<dyn Optimizer> {
    match config.optimizer {
        OptimizerKind::Sgd => Box::new(Sgd {
            learning_rate: config.learning_rate,
        }),
        OptimizerKind::Adam => Box::new(Adam::new(params, config.learning_rate)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub bs_accuracy: f64,
    pub top1_beam_accuracy: f64,
    pub top3_beam_accuracy: f64,
    pub total_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_csv(&self, config_hash: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        writeln!(buf, "# beamsel-history v1").expect("write to vec");
        writeln!(buf, "# config_hash={config_hash}").expect("write to vec");
        let mut w = csv::Writer::from_writer(buf);
        for r in &self.epochs {
            w.serialize(r).map_err(|e| Error::Data(format!("CSV: {e}")))?;
        }
        w.into_inner().map_err(|e| Error::Data(format!("CSV: {e}")))
    }

    pub fn write(&self, path: &Path, config_hash: &str) -> Result<()> {
        std::fs::write(path, self.to_csv(config_hash)?).map_err(|e| Error::io(path, e))
    }
}

fn mean_loss(params: &Params, samples: &[Sample], weights: LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(512) {
        let batch = Batch::from_samples(chunk);
        let pass = forward_batch(params, &batch.inputs)?;
        total += batch_losses(&pass, &batch, weights).iter().sum::<f64>();
    }
    Ok(total / samples.len() as f64)
}

/// Number of leading training samples used for a data fraction.
pub fn fraction_count(n_train: usize, fraction: f64) -> usize {
    ((fraction * n_train as f64).ceil() as usize).clamp(1, n_train)
}

/// Mini-batch training on normalized samples. The first
/// `training_data_fraction` of `train` is used; `validation` feeds the
/// per-epoch history.
pub fn train(
    mut params: Params,
    train: &[Sample],
    validation: &[Sample],
    config: &TrainConfig,
) -> Result<(Params, History)> {
    config.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Data("training needs non-empty train and validation sets".into()));
    }
    let train = &train[..fraction_count(train.len(), config.training_data_fraction)];
    let weights = config.loss_weights();
    let mut optimizer = make_optimizer(&params, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let top3 = 3.min(params.config.n_beams);
    let mut history = History::default();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = Batch::from_samples(chunk.iter().map(|&i| &train[i]));
            let (loss, grad) = backward(&params, &batch, weights)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss became {loss} at epoch {epoch}, batch {step}; \
                     try a smaller learning rate than {}",
                    config.learning_rate
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            optimizer.step(&mut params, &grad);
        }
        let report = evaluate(&params, validation, 1)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss: mean_loss(&params, validation, weights)?,
            bs_accuracy: report.bs_accuracy,
            top1_beam_accuracy: report.beam_accuracy_at(1),
            top3_beam_accuracy: report.beam_accuracy_at(top3),
            total_accuracy: report.total_accuracy_at(1),
        };
        log::debug!(
            "epoch {epoch}: loss {:.5} bs {:.3} beam@1 {:.3} beam@3 {:.3} total {:.3}",
            record.train_loss,
            record.bs_accuracy,
            record.top1_beam_accuracy,
            record.top3_beam_accuracy,
            record.total_accuracy
        );
        history.epochs.push(record);
    }
    Ok((params, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub train_samples: usize,
    pub bs_accuracy: f64,
    pub top1_beam_accuracy: f64,
    pub top3_beam_accuracy: f64,
    pub total_accuracy: f64,
}

/// Trains a fresh model per fraction (same init seed each time) on the
/// leading part of `train` and scores it on the fixed `test` set. Rows come
/// back sorted by fraction.
pub fn ratio_sweep(
    model: &ModelConfig,
    train_set: &[Sample],
    test: &[Sample],
    fractions: &[f64],
    config: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    let mut fractions = fractions.to_vec();
    if let Some(bad) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Config(format!("sweep fractions must lie in (0, 1], got {bad}")));
    }
    fractions.sort_by(|a, b| a.partial_cmp(b).expect("finite fractions"));
    fractions.dedup();
    let mut rows = Vec::with_capacity(fractions.len());
    for fraction in fractions {
        let cfg = TrainConfig {
            training_data_fraction: fraction,
            ..config.clone()
        };
        let (_, history) = train(init_model(model)?, train_set, test, &cfg)?;
        let last = history.last().expect("at least one epoch");
        rows.push(SweepRow {
            fraction,
            train_samples: fraction_count(train_set.len(), fraction),
            bs_accuracy: last.bs_accuracy,
            top1_beam_accuracy: last.top1_beam_accuracy,
            top3_beam_accuracy: last.top3_beam_accuracy,
            total_accuracy: last.total_accuracy,
        });
        log::info!("sweep fraction {fraction}: total accuracy {:.3}", last.total_accuracy);
    }
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow], config_hash: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    writeln!(buf, "# beamsel-sweep v1").expect("write to vec");
    writeln!(buf, "# config_hash={config_hash}").expect("write to vec");
    let mut w = csv::Writer::from_writer(buf);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("CSV: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Data(format!("CSV: {e}")))
}
