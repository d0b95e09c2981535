//! Pipeline commands. Each reads and writes files under the run's output
//! directory and returns a summary for the caller to print.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use beamsel::dataset::{generate, Dataset};
use beamsel::eval::{emit_report, evaluate_with_diagnostics, latency_ratio, write_diagnostics, EvalReport};
use beamsel::features::{FeatureMatrix, Sample, N_FEATURES};
use beamsel::model::checkpoint::{Checkpoint, CheckpointHeader};
use beamsel::model::gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
use beamsel::model::{init_model, Batch, ModelConfig, LAYER_NAMES};
use beamsel::codebook::{label_from_table, RateTable};
use beamsel::scene::Point3;
use beamsel::train::{prepare, ratio_sweep, split_dataset, sweep_to_csv, train, History, Split, SweepRow};
use beamsel::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

/// File names inside the output directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.txt")
    }
    pub fn split(&self) -> PathBuf {
        self.dir.join("split.txt")
    }
    pub fn scene(&self) -> PathBuf {
        self.dir.join("scene.txt")
    }
    pub fn generation_log(&self) -> PathBuf {
        self.dir.join("generate.log")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }
    pub fn history(&self) -> PathBuf {
        self.dir.join("history.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.csv")
    }
    pub fn diagnostics(&self) -> PathBuf {
        self.dir.join("diagnostics.csv")
    }
    pub fn sweep(&self) -> PathBuf {
        self.dir.join("sweep.csv")
    }
    pub fn gradcheck(&self) -> PathBuf {
        self.dir.join("gradcheck.txt")
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub samples: usize,
    pub users: usize,
    pub excluded: usize,
    pub gamma: f64,
    pub dataset_hash: String,
    pub seconds: f64,
}

/// Scene, channels, labels and features to `dataset.txt`, plus the split,
/// the scene export, the resolved config and a generation log.
pub fn cmd_generate(config: &RunConfig) -> Result<GenerateSummary> {
    let paths = RunPaths::new(&config.out);
    ensure_dir(&paths.dir)?;
    let hash = config.hash();
    let start = Instant::now();
    let (scene, dataset) = generate(&config.generation(), &hash)?;
    let split = split_dataset(dataset.len(), config.train.split_ratio, config.seed)?;
    let seconds = start.elapsed().as_secs_f64();

    write_file(&paths.config(), config.to_toml())?;
    dataset.write(&paths.dataset())?;
    split.write(&paths.split(), &hash)?;
    scene.write_records(&paths.scene(), &hash)?;

    let summary = GenerateSummary {
        samples: dataset.len(),
        users: dataset.meta.n_users,
        excluded: dataset.meta.n_excluded,
        gamma: dataset.meta.gamma,
        dataset_hash: dataset.hash(),
        seconds,
    };
    let mut per_bs = vec![0usize; dataset.meta.b_m];
    for s in &dataset.samples {
        per_bs[s.label.bs_index] += 1;
    }
    let mut log = String::new();
    let _ = writeln!(log, "# beamsel-generate v1");
    let _ = writeln!(log, "# config_hash={hash}");
    let _ = writeln!(log, "preset {}", config.preset);
    let _ = writeln!(log, "scene_hash {}", dataset.meta.scene_hash);
    let _ = writeln!(log, "dataset_hash {}", summary.dataset_hash);
    let _ = writeln!(log, "users {}", summary.users);
    let _ = writeln!(log, "samples {}", summary.samples);
    let _ = writeln!(log, "excluded {}", summary.excluded);
    let _ = writeln!(log, "gamma {:e}", summary.gamma);
    let _ = writeln!(log, "train {} test {}", split.train.len(), split.test.len());
    for (b, n) in per_bs.iter().enumerate() {
        let _ = writeln!(log, "label_bs {b} {n}");
    }
    write_file(&paths.generation_log(), log)?;
    Ok(summary)
}

/// Dataset plus the split that goes with it: `split.txt` beside the dataset
/// when present, otherwise a fresh split from the run seed.
pub fn load_dataset(config: &RunConfig, dataset_path: &Path) -> Result<(Dataset, Split)> {
    let dataset = Dataset::read(dataset_path)?;
    let m = config.model_config();
    if (dataset.meta.b_mu, dataset.meta.b_m, dataset.meta.n_beams) != (m.b_mu, m.b_m, m.n_beams) {
        return Err(Error::Config(format!(
            "{} has B_mu={}, B_m={}, M={} but the config describes B_mu={}, B_m={}, M={}",
            dataset_path.display(),
            dataset.meta.b_mu,
            dataset.meta.b_m,
            dataset.meta.n_beams,
            m.b_mu,
            m.b_m,
            m.n_beams
        )));
    }
    let split_path = dataset_path.with_file_name("split.txt");
    let split = if split_path.exists() {
        let split = Split::read(&split_path)?;
        split.validate(dataset.len()).map_err(|e| {
            Error::Data(format!("{} does not match {}: {e}", split_path.display(), dataset_path.display()))
        })?;
        split
    } else {
        split_dataset(dataset.len(), config.train.split_ratio, config.seed)?
    };
    Ok((dataset, split))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub history: History,
    pub checkpoint: PathBuf,
    pub seconds: f64,
}

pub fn cmd_train(config: &RunConfig, dataset_path: &Path) -> Result<TrainSummary> {
    let paths = RunPaths::new(&config.out);
    ensure_dir(&paths.dir)?;
    let (dataset, split) = load_dataset(config, dataset_path)?;
    let data = prepare(&dataset.samples, &split)?;
    let model = config.model_config();
    let train_cfg = config.train_config();
    let start = Instant::now();
    let (params, history) = train(init_model(&model)?, &data.train, &data.test, &train_cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    let hash = config.hash();
    let checkpoint = Checkpoint {
        header: CheckpointHeader {
            model,
            norm: data.norm,
            config_hash: hash.clone(),
            dataset_hash: dataset.hash(),
            epochs_trained: train_cfg.epochs,
        },
        params,
    };
    checkpoint.save(&paths.checkpoint())?;
    history.write(&paths.history(), &hash)?;
    Ok(TrainSummary {
        history,
        checkpoint: paths.checkpoint(),
        seconds,
    })
}

/// Scores a checkpoint on the test side of the split. The report's summary
/// row uses the first entry of `beams`.
pub fn cmd_eval(config: &RunConfig, dataset_path: &Path, checkpoint_path: &Path, beams: &[usize]) -> Result<EvalReport> {
    let paths = RunPaths::new(&config.out);
    ensure_dir(&paths.dir)?;
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    let (dataset, split) = load_dataset(config, dataset_path)?;
    if checkpoint.header.dataset_hash != dataset.hash() {
        return Err(Error::Data(format!(
            "{} was trained on a different dataset than {}",
            checkpoint_path.display(),
            dataset_path.display()
        )));
    }
    let m = dataset.meta.n_beams;
    let b = *beams
        .first()
        .ok_or_else(|| Error::Config("at least one beam budget is required".into()))?;
    if let Some(bad) = beams.iter().find(|&&b| b == 0 || b > m) {
        return Err(Error::Config(format!("beam budget {bad} is outside 1..={m}")));
    }
    let norm = &checkpoint.header.norm;
    let test: Vec<Sample> = split
        .test
        .iter()
        .map(|&i| {
            let mut s = dataset.samples[i].clone();
            s.features = norm.normalize(&s.features);
            s
        })
        .collect();
    let (report, diagnostics) = evaluate_with_diagnostics(&checkpoint.params, &test, b)?;
    emit_report(&report, &paths.report(), &config.hash())?;
    if config.eval.diagnostics {
        write_diagnostics(&diagnostics, &paths.diagnostics())?;
    }
    Ok(report)
}

/// One line per requested beam budget.
pub fn render_eval(report: &EvalReport, beams: &[usize]) -> String {
    let mut out = format!("bs_accuracy {:.4} on {} test samples\n", report.bs_accuracy, report.sample_count);
    for &b in beams {
        let _ = writeln!(
            out,
            "b={b:<3} beam_accuracy {:.4} total_accuracy {:.4} rate_ratio {:.4} measurements {b}/{} ({:.4})",
            report.beam_accuracy_at(b),
            report.total_accuracy_at(b),
            report.rate_ratio_at(b),
            report.n_beams,
            latency_ratio(b, report.n_beams).unwrap_or(f64::NAN),
        );
    }
    out
}

pub fn cmd_sweep(config: &RunConfig, dataset_path: &Path, fractions: &[f64]) -> Result<Vec<SweepRow>> {
    let paths = RunPaths::new(&config.out);
    ensure_dir(&paths.dir)?;
    let (dataset, split) = load_dataset(config, dataset_path)?;
    let data = prepare(&dataset.samples, &split)?;
    let rows = ratio_sweep(&config.model_config(), &data.train, &data.test, fractions, &config.train_config())?;
    write_file(&paths.sweep(), sweep_to_csv(&rows, &config.hash())?)?;
    Ok(rows)
}

/// Random samples shaped like normalized dataset entries: features in
/// `[0, 1]`, consistent labels drawn from a random rate table.
pub fn synthetic_samples(model: &ModelConfig, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let rows = (0..model.b_mu)
                .map(|_| {
                    let mut r = [0.0; N_FEATURES];
                    r.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
                    r
                })
                .collect();
            let rates = RateTable {
                n_bs: model.b_m,
                n_beams: model.n_beams,
                rates: (0..model.b_m * model.n_beams).map(|_| rng.gen_range(0.0..10.0)).collect(),
            };
            let label = label_from_table(&rates, true);
            Sample {
                user_id: i,
                features: FeatureMatrix::from_rows(rows).expect("finite features"),
                target: label.rate_vector_at_best_bs.iter().map(|r| r / label.rate).collect(),
                label,
                rates,
                position: Point3::new(0.0, 0.0, 0.0),
            }
        })
        .collect()
}

/// Finite-difference check of a freshly initialized model on
/// `gradcheck.samples` synthetic samples. `corrupt` scales the analytic
/// gradient of one tensor by 1.5 to show the check can fail.
pub fn cmd_gradcheck(config: &RunConfig, corrupt: Option<&str>) -> Result<GradCheckReport> {
    let paths = RunPaths::new(&config.out);
    ensure_dir(&paths.dir)?;
    let model = config.model_config();
    let params = init_model(&model)?;
    let samples = synthetic_samples(&model, config.gradcheck.samples, config.seed);
    let batch = Batch::from_samples(&samples);
    if let Some(name) = corrupt {
        let known = LAYER_NAMES
            .iter()
            .any(|l| name == format!("{l}.weight") || name == format!("{l}.bias"));
        if !known {
            return Err(Error::Config(format!(
                "unknown tensor {name:?}; names look like \"{}.weight\"",
                LAYER_NAMES[0]
            )));
        }
    }
    let opts = GradCheckOptions {
        epsilon: config.gradcheck.epsilon,
        tolerance: config.gradcheck.tolerance,
        max_entries_per_tensor: match config.gradcheck.max_entries_per_tensor {
            0 => None,
            k => Some(k),
        },
        seed: config.seed,
        corrupt: corrupt.map(|name| (name.to_string(), 1.5)),
    };
    let report = gradient_check(&params, &batch, config.train_config().loss_weights(), &opts)?;
    let mut text = format!("# beamsel-gradcheck v1\n# config_hash={}\n", config.hash());
    text.push_str(&report.render());
    write_file(&paths.gradcheck(), text)?;
    Ok(report)
}
