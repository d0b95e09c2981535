//! Dataset generation (scene → channels → oracle labels → features) and the
//! versioned line-record dataset file.
//!
//! File layout:
//!
//! ```text
//! # beamsel-dataset v1
//! # columns=azimuth,elevation,rx_power_db,phase,delay
//! # meta={...json...}
//! user <id> bs <b> beam <m> rate <r> features <B_μ·5 floats> target <M floats> rates <B_m·M floats> pos <x> <y> <z>
//! ```
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! reproduces every value bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{channel_vectors, path_from_geometry, ArrayGeometry, BandConfig, PathParams};
use crate::codebook::{calibrate_gamma, dft_codebook, exhaustive_search_with_table, label_from_table, RateTable};
use crate::features::{
    assemble_input, extract_features, regression_target, FeatureMatrix, Sample, TargetScaling, FEATURE_COLUMNS,
    N_FEATURES,
};
use crate::scene::{build_scene, Point3, Scene, SceneConfig, Tier};
use crate::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
const HEADER: &str = "# beamsel-dataset v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub scene: SceneConfig,
    pub sub6_band: BandConfig,
    pub mmw_band: BandConfig,
    pub sub6_array: ArrayGeometry,
    pub mmw_array: ArrayGeometry,
    pub n_beams: usize,
    /// Fixed γ; when absent γ is calibrated to `target_snr_db`.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_snr_db")]
    pub target_snr_db: f64,
    #[serde(default)]
    pub target_scaling: TargetScaling,
}

fn default_snr_db() -> f64 {
    10.0
}

impl GenerationConfig {
    pub fn desk() -> Self {
        Self {
            scene: SceneConfig::desk(),
            sub6_band: BandConfig::sub6_3p5ghz(),
            mmw_band: BandConfig::mmw_28ghz(),
            sub6_array: ArrayGeometry::ula(4),
            mmw_array: ArrayGeometry::ula(32),
            n_beams: 16,
            gamma: None,
            target_snr_db: default_snr_db(),
            target_scaling: TargetScaling::PerSample,
        }
    }

    pub fn paper() -> Self {
        Self {
            scene: SceneConfig::paper(),
            sub6_array: ArrayGeometry::ula(16),
            mmw_array: ArrayGeometry::ula(256),
            n_beams: 64,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.sub6_band.validate()?;
        self.mmw_band.validate()?;
        self.sub6_array.validate()?;
        self.mmw_array.validate()?;
        if self.n_beams == 0 {
            return Err(Error::Config("codebook needs at least one beam".into()));
        }
        if let Some(g) = self.gamma {
            if !(g.is_finite() && g >= 0.0) {
                return Err(Error::Config(format!("gamma must be non-negative, got {g}")));
            }
        }
        if !self.target_snr_db.is_finite() {
            return Err(Error::Config(format!("target_snr_db must be finite, got {}", self.target_snr_db)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub scene_hash: String,
    /// Hash of the run configuration that produced the file, if any.
    pub config_hash: String,
    pub gamma: f64,
    pub b_mu: usize,
    pub n_features: usize,
    pub b_m: usize,
    pub n_beams: usize,
    pub target_scaling: TargetScaling,
    pub n_users: usize,
    /// Users dropped because every mmW link was blocked.
    pub n_excluded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

/// Builds the scene, labels every user by exhaustive search and assembles
/// samples. Users without mmW coverage are excluded and counted, as are
/// covered users whose best rate is exactly zero (they sit in a common
/// null of every beam).
pub fn generate(config: &GenerationConfig, config_hash: &str) -> Result<(Scene, Dataset)> {
    config.validate()?;
    let scene = build_scene(&config.scene)?;
    let codebook = dft_codebook(config.mmw_array.n_elements, config.n_beams)?;
    let users = scene.place_users();
    let sub6: Vec<_> = scene.tier(Tier::Sub6).collect();
    let mmw: Vec<_> = scene.tier(Tier::Mmw).collect();

    let mmw_paths: Vec<Vec<PathParams>> = users
        .par_iter()
        .map(|&u| mmw.iter().map(|bs| path_from_geometry(bs, u, &config.mmw_band, &scene)).collect())
        .collect::<Result<_>>()?;

    let gamma = match config.gamma {
        Some(g) => g,
        None => {
            let mut best: Vec<f64> = mmw_paths
                .iter()
                .map(|ps| ps.iter().map(|p| p.gain).fold(0.0, f64::max))
                .filter(|&g| g > 0.0)
                .collect();
            if best.is_empty() {
                return Err(Error::Data("no user has an unblocked mmW link".into()));
            }
            best.sort_by(|a, b| a.partial_cmp(b).expect("finite gains"));
            calibrate_gamma(
                best[best.len() / 2],
                config.mmw_array.n_elements,
                config.mmw_band.subcarrier_limit,
                config.target_snr_db,
            )?
        }
    };

    let labeled: Vec<Option<(FeatureMatrix, RateTable, crate::codebook::OracleLabel)>> = users
        .par_iter()
        .zip(&mmw_paths)
        .map(|(&u, paths)| {
            let channels: Vec<_> = paths
                .iter()
                .map(|p| channel_vectors(p, &config.mmw_array, &config.mmw_band))
                .collect();
            let refs: Vec<_> = channels.iter().collect();
            let (label, table) = exhaustive_search_with_table(&refs, &codebook, gamma)?;
            if !label.coverage || label.rate <= 0.0 {
                return Ok(None);
            }
            let rows = sub6
                .iter()
                .map(|bs| {
                    let p = path_from_geometry(bs, u, &config.sub6_band, &scene)?;
                    Ok((bs.tier_index, extract_features(&p, &config.sub6_band)))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Some((assemble_input(rows, sub6.len())?, table, label)))
        })
        .collect::<Result<_>>()?;

    let global_max = labeled.iter().flatten().map(|(_, _, l)| l.rate).fold(0.0, f64::max);
    let mut samples = Vec::with_capacity(labeled.len());
    for (user_id, item) in labeled.into_iter().enumerate() {
        if let Some((features, rates, label)) = item {
            samples.push(Sample {
                user_id,
                target: regression_target(&label, config.target_scaling, global_max),
                features,
                label,
                rates,
                position: users[user_id],
            });
        }
    }
    let n_excluded = users.len() - samples.len();
    log::info!(
        "generated {} samples from {} users ({} without a usable mmW link), gamma = {gamma:e}",
        samples.len(),
        users.len(),
        n_excluded
    );

    let meta = DatasetMeta {
        version: DATASET_VERSION,
        scene_hash: scene.hash(),
        config_hash: config_hash.to_string(),
        gamma,
        b_mu: sub6.len(),
        n_features: N_FEATURES,
        b_m: mmw.len(),
        n_beams: config.n_beams,
        target_scaling: config.target_scaling,
        n_users: users.len(),
        n_excluded,
    };
    Ok((scene, Dataset { meta, samples }))
}

fn push_floats(out: &mut String, tag: &str, values: impl IntoIterator<Item = f64>) {
    out.push(' ');
    out.push_str(tag);
    for v in values {
        let _ = write!(out, " {v}");
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER}");
        let _ = writeln!(out, "# columns={}", FEATURE_COLUMNS.join(","));
        let _ = writeln!(out, "# meta={}", serde_json::to_string(&self.meta).expect("meta serializes"));
        for s in &self.samples {
            let l = &s.label;
            let _ = write!(out, "user {} bs {} beam {} rate {}", s.user_id, l.bs_index, l.beam_index, l.rate);
            push_floats(&mut out, "features", s.features.flat());
            push_floats(&mut out, "target", s.target.iter().copied());
            push_floats(&mut out, "rates", s.rates.rates.iter().copied());
            push_floats(&mut out, "pos", [s.position.x, s.position.y, s.position.z]);
            out.push('\n');
        }
        out
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, HEADER)) => {}
            Some((_, other)) => return Err(Error::Data(format!("unsupported dataset header {other:?}"))),
            None => return Err(Error::Data("empty dataset file".into())),
        }
        let mut meta: Option<DatasetMeta> = None;
        let mut samples = Vec::new();
        for (lineno, line) in lines {
            let lineno = lineno + 1;
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(cols) = comment.strip_prefix("columns=") {
                    if cols != FEATURE_COLUMNS.join(",") {
                        return Err(Error::Data(format!("line {lineno}: unexpected feature columns {cols}")));
                    }
                } else if let Some(json) = comment.strip_prefix("meta=") {
                    meta = Some(
                        serde_json::from_str(json)
                            .map_err(|e| Error::Data(format!("line {lineno}: bad metadata: {e}")))?,
                    );
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let meta = meta
                .as_ref()
                .ok_or_else(|| Error::Data(format!("line {lineno}: record before metadata")))?;
            samples.push(parse_record(line, meta).map_err(|msg| Error::Data(format!("line {lineno}: {msg}")))?);
        }
        let meta = meta.ok_or_else(|| Error::Data("dataset has no metadata line".into()))?;
        if meta.version != DATASET_VERSION {
            return Err(Error::Data(format!("unsupported dataset version {}", meta.version)));
        }
        Ok(Self { meta, samples })
    }
}

struct Tokens<'a> {
    inner: std::str::SplitWhitespace<'a>,
}

impl<'a> Tokens<'a> {
    fn tag(&mut self, expected: &str) -> std::result::Result<(), String> {
        match self.inner.next() {
            Some(t) if t == expected => Ok(()),
            other => Err(format!("expected {expected:?}, found {other:?}")),
        }
    }

    fn value<T: std::str::FromStr>(&mut self, what: &str) -> std::result::Result<T, String> {
        let t = self.inner.next().ok_or_else(|| format!("missing {what}"))?;
        t.parse().map_err(|_| format!("bad {what} {t:?}"))
    }

    fn floats(&mut self, tag: &str, n: usize) -> std::result::Result<Vec<f64>, String> {
        self.tag(tag)?;
        (0..n).map(|_| self.value(tag)).collect()
    }
}

fn parse_record(line: &str, meta: &DatasetMeta) -> std::result::Result<Sample, String> {
    let mut t = Tokens {
        inner: line.split_whitespace(),
    };
    t.tag("user")?;
    let user_id = t.value("user id")?;
    t.tag("bs")?;
    let bs_index: usize = t.value("bs label")?;
    t.tag("beam")?;
    let beam_index: usize = t.value("beam label")?;
    t.tag("rate")?;
    let rate: f64 = t.value("rate")?;
    let flat = t.floats("features", meta.b_mu * meta.n_features)?;
    let target = t.floats("target", meta.n_beams)?;
    let rates = t.floats("rates", meta.b_m * meta.n_beams)?;
    let pos = t.floats("pos", 3)?;
    if let Some(extra) = t.inner.next() {
        return Err(format!("trailing token {extra:?}"));
    }
    if bs_index >= meta.b_m || beam_index >= meta.n_beams {
        return Err(format!("label ({bs_index}, {beam_index}) out of range"));
    }
    if target.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err("regression target outside [0, 1]".into());
    }
    let rows = flat
        .chunks(N_FEATURES)
        .map(|c| c.try_into().expect("chunk of N_FEATURES"))
        .collect();
    let features = FeatureMatrix::from_rows(rows).map_err(|e| e.to_string())?;
    let rates = RateTable {
        n_bs: meta.b_m,
        n_beams: meta.n_beams,
        rates,
    };
    let label = label_from_table(&rates, true);
    if (label.bs_index, label.beam_index) != (bs_index, beam_index) || label.rate != rate {
        return Err("label does not match the stored rate table".into());
    }
    Ok(Sample {
        user_id,
        features,
        label,
        target,
        rates,
        position: Point3::new(pos[0], pos[1], pos[2]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> GenerationConfig {
        let mut cfg = GenerationConfig::desk();
        cfg.scene.user_grid_spacing = 4.0;
        cfg.scene.user_rows = 3;
        cfg.mmw_band.subcarrier_limit = 8;
        cfg.sub6_band.subcarrier_limit = 8;
        cfg
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let cfg = tiny_config();
        let (scene, ds) = generate(&cfg, "abc").unwrap();
        assert_eq!(ds.meta.n_users, scene.users.len());
        assert_eq!(ds.meta.n_users, ds.len() + ds.meta.n_excluded);
        assert_eq!((ds.meta.b_mu, ds.meta.b_m, ds.meta.n_beams), (2, 4, 16));
        for s in &ds.samples {
            assert_eq!(s.features.n_rows(), 2);
            assert!(s.label.coverage);
            assert_eq!(s.target.iter().cloned().fold(0.0, f64::max), 1.0);
            assert_eq!(s.target[s.label.beam_index], 1.0);
        }
        let (_, again) = generate(&cfg, "abc").unwrap();
        assert_eq!(ds.to_text(), again.to_text());

        let back = Dataset::parse(&ds.to_text()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn calibrated_gamma_sets_median_snr() {
        let cfg = tiny_config();
        let (_, ds) = generate(&cfg, "").unwrap();
        let fixed = GenerationConfig { gamma: Some(ds.meta.gamma), ..cfg };
        let (_, again) = generate(&fixed, "").unwrap();
        assert_eq!(again.samples, ds.samples);
    }

    #[test]
    fn rejects_corrupt_records() {
        let (_, ds) = generate(&tiny_config(), "").unwrap();
        let text = ds.to_text();
        let truncated = text.replacen(" pos ", " pos 1 ", 1);
        assert!(Dataset::parse(&truncated).is_err());
        assert!(Dataset::parse("# beamsel-dataset v9\n").is_err());
        let no_meta: String = text.lines().filter(|l| !l.starts_with("# meta")).map(|l| format!("{l}\n")).collect();
        assert!(Dataset::parse(&no_meta).is_err());
    }
}
