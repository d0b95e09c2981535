//! Run configuration: one TOML file layered over a named preset.
//!
//! Every key is optional in the file; missing keys come from the preset
//! (`desk` unless the file or the command line names another). Tables merge
//! key by key, arrays and scalars replace.

use std::path::{Path, PathBuf};

use beamsel::channel::{ArrayGeometry, BandConfig};
use beamsel::dataset::GenerationConfig;
use beamsel::features::TargetScaling;
use beamsel::model::ModelConfig;
use beamsel::scene::SceneConfig;
use beamsel::train::{OptimizerKind, TrainConfig};
use beamsel::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const PRESETS: [&str; 2] = ["desk", "paper"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookSection {
    pub n_beams: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSection {
    /// Fixed γ; calibrated from `target_snr_db` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub target_snr_db: f64,
    pub target_scaling: TargetScaling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub split_ratio: f64,
    pub training_data_fraction: f64,
    pub lambda_cls: f64,
    pub lambda_reg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Beam budgets to report; the first one is the summary row.
    pub beams: Vec<usize>,
    pub diagnostics: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub fractions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    pub samples: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    /// Entries checked per tensor; 0 checks all of them.
    pub max_entries_per_tensor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    /// Drives the split, the shuffle order, model init and any sampling.
    pub seed: u64,
    pub out: PathBuf,
    pub scene: SceneConfig,
    pub sub6_band: BandConfig,
    pub mmw_band: BandConfig,
    pub sub6_array: ArrayGeometry,
    pub mmw_array: ArrayGeometry,
    pub codebook: CodebookSection,
    pub labels: LabelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub gradcheck: GradcheckSection,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let generation = match name {
            "desk" => GenerationConfig::desk(),
            "paper" => GenerationConfig::paper(),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        let train = TrainConfig::default();
        Ok(Self {
            preset: name.into(),
            seed: 1,
            out: PathBuf::from("runs").join(name),
            scene: generation.scene,
            sub6_band: generation.sub6_band,
            mmw_band: generation.mmw_band,
            sub6_array: generation.sub6_array,
            mmw_array: generation.mmw_array,
            codebook: CodebookSection {
                n_beams: generation.n_beams,
            },
            labels: LabelSection {
                gamma: generation.gamma,
                target_snr_db: generation.target_snr_db,
                target_scaling: generation.target_scaling,
            },
            train: TrainSection {
                epochs: train.epochs,
                batch_size: train.batch_size,
                learning_rate: train.learning_rate,
                optimizer: train.optimizer,
                split_ratio: train.split_ratio,
                training_data_fraction: train.training_data_fraction,
                lambda_cls: train.lambda_cls,
                lambda_reg: train.lambda_reg,
            },
            eval: EvalSection {
                beams: vec![1, 3, 5],
                diagnostics: false,
            },
            sweep: SweepSection {
                fractions: vec![0.1, 0.25, 0.5, 0.75, 1.0],
            },
            gradcheck: GradcheckSection {
                samples: 10,
                epsilon: 1e-5,
                tolerance: 1e-4,
                max_entries_per_tensor: 64,
            },
        })
    }

    /// Resolves `text` over its preset. `preset_override` wins over the
    /// file's own `preset` key.
    pub fn from_toml(text: &str, preset_override: Option<&str>) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid TOML: {e}")))?;
        let name = match (preset_override, user.get("preset")) {
            (Some(name), _) => name.to_string(),
            (None, Some(toml::Value::String(name))) => name.clone(),
            (None, Some(other)) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            (None, None) => "desk".to_string(),
        };
        let mut merged = toml::Table::try_from(Self::preset(&name)?).expect("preset serializes");
        merge(&mut merged, user);
        merged.insert("preset".into(), toml::Value::String(name));
        let config: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid configuration: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path`, or starts from the preset alone when `path` is `None`.
    pub fn load(path: Option<&Path>, preset_override: Option<&str>) -> Result<Self> {
        match path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
                Self::from_toml(&text, preset_override)
                    .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_kind(&e))))
            }
            None => {
                let config = Self::preset(preset_override.unwrap_or("desk"))?;
                config.validate()?;
                Ok(config)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generation().validate()?;
        self.train_config().validate()?;
        let m = self.codebook.n_beams;
        if self.eval.beams.is_empty() {
            return Err(Error::Config("eval.beams must list at least one beam budget".into()));
        }
        if let Some(b) = self.eval.beams.iter().find(|&&b| b == 0 || b > m) {
            return Err(Error::Config(format!(
                "eval.beams entry {b} is outside 1..={m} (codebook.n_beams)"
            )));
        }
        if let Some(f) = self.sweep.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::Config(format!("sweep.fractions entry {f} is outside (0, 1]")));
        }
        if self.gradcheck.samples == 0 {
            return Err(Error::Config("gradcheck.samples must be at least 1".into()));
        }
        if !(self.gradcheck.epsilon > 0.0 && self.gradcheck.tolerance > 0.0) {
            return Err(Error::Config("gradcheck.epsilon and gradcheck.tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            scene: self.scene.clone(),
            sub6_band: self.sub6_band.clone(),
            mmw_band: self.mmw_band.clone(),
            sub6_array: self.sub6_array,
            mmw_array: self.mmw_array,
            n_beams: self.codebook.n_beams,
            gamma: self.labels.gamma,
            target_snr_db: self.labels.target_snr_db,
            target_scaling: self.labels.target_scaling,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            split_ratio: t.split_ratio,
            training_data_fraction: t.training_data_fraction,
            rng_seed: self.seed,
            lambda_cls: t.lambda_cls,
            lambda_reg: t.lambda_reg,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(
            self.scene.n_sub6_bs(),
            self.scene.n_mmw_bs(),
            self.codebook.n_beams,
            self.seed,
        )
    }

    /// SHA-256 of the resolved configuration. The output directory is left
    /// out so the same run written to two places carries the same hash.
    pub fn hash(&self) -> String {
        let mut hashed = self.clone();
        hashed.out = PathBuf::new();
        let json = serde_json::to_vec(&hashed).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn strip_kind(e: &Error) -> String {
    match e {
        Error::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}
