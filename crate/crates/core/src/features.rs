//! Sub-6GHz CSI features and min-max normalization.

use serde::{Deserialize, Serialize};

use crate::channel::{BandConfig, PathParams};
use crate::codebook::{OracleLabel, RateTable};
use crate::scene::Point3;
use crate::{Error, Result};

/// Features per sub-6GHz BS.
pub const N_FEATURES: usize = 5;

/// Column order of every feature row; part of the dataset format.
pub const FEATURE_COLUMNS: [&str; N_FEATURES] = ["azimuth", "elevation", "rx_power_db", "phase", "delay"];

/// Lower clamp for the receive-power feature.
pub const POWER_FLOOR_DB: f64 = -200.0;

/// `(θ, φ, 10·log10(P_T·ρ), κ, Γ)` of a sub-6GHz path.
pub fn extract_features(path: &PathParams, band: &BandConfig) -> [f64; N_FEATURES] {
    let p_rx = band.tx_power * path.gain;
    let p_db = if p_rx > 0.0 { (10.0 * p_rx.log10()).max(POWER_FLOOR_DB) } else { POWER_FLOOR_DB };
    [path.azimuth, path.elevation, p_db, path.phase, path.delay]
}

/// `B_μ × n_f` model input, one row per sub-6GHz BS in id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: Vec<[f64; N_FEATURES]>,
}

impl FeatureMatrix {
    pub fn from_rows(rows: Vec<[f64; N_FEATURES]>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("feature matrix needs at least one BS row".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("feature matrix contains non-finite values".into()));
        }
        Ok(Self { rows })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[[f64; N_FEATURES]] {
        &self.rows
    }

    /// Row-major flattening, `B_μ · n_f` values.
    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().flatten().copied()
    }
}

/// Orders `(bs_id, features)` pairs by id; every id in `0..b_mu` must
/// appear exactly once.
pub fn assemble_input(mut per_bs: Vec<(usize, [f64; N_FEATURES])>, b_mu: usize) -> Result<FeatureMatrix> {
    per_bs.sort_by_key(|(id, _)| *id);
    let ids: Vec<usize> = per_bs.iter().map(|(id, _)| *id).collect();
    if ids != (0..b_mu).collect::<Vec<_>>() {
        return Err(Error::Contract(format!(
            "expected feature rows for sub-6GHz BSs 0..{b_mu}, got {ids:?}"
        )));
    }
    FeatureMatrix::from_rows(per_bs.into_iter().map(|(_, f)| f).collect())
}

/// Per-column min/max over every BS row of the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub scheme: String,
    pub min: [f64; N_FEATURES],
    pub max: [f64; N_FEATURES],
}

pub fn fit_normalizer<'a>(training: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<NormStats> {
    let mut min = [f64::INFINITY; N_FEATURES];
    let mut max = [f64::NEG_INFINITY; N_FEATURES];
    let mut seen = false;
    for m in training {
        seen = true;
        for row in m.rows() {
            for c in 0..N_FEATURES {
                min[c] = min[c].min(row[c]);
                max[c] = max[c].max(row[c]);
            }
        }
    }
    if !seen {
        return Err(Error::Data("cannot fit a normalizer on an empty training split".into()));
    }
    Ok(NormStats {
        scheme: "minmax".into(),
        min,
        max,
    })
}

impl NormStats {
    fn span(&self, c: usize) -> f64 {
        self.max[c] - self.min[c]
    }

    /// Maps each column to `[0, 1]` over the training range; constant
    /// columns map to 0. Unseen values may land outside `[0, 1]`.
    pub fn normalize(&self, m: &FeatureMatrix) -> FeatureMatrix {
        let rows = m
            .rows()
            .iter()
            .map(|row| {
                let mut out = [0.0; N_FEATURES];
                for c in 0..N_FEATURES {
                    let span = self.span(c);
                    out[c] = if span > 0.0 { (row[c] - self.min[c]) / span } else { 0.0 };
                }
                out
            })
            .collect();
        FeatureMatrix { rows }
    }

    /// Inverse of [`NormStats::normalize`] for non-constant columns;
    /// constant columns return the training value.
    pub fn denormalize(&self, m: &FeatureMatrix) -> FeatureMatrix {
        let rows = m
            .rows()
            .iter()
            .map(|row| {
                let mut out = [0.0; N_FEATURES];
                for c in 0..N_FEATURES {
                    out[c] = self.min[c] + row[c] * self.span(c);
                }
                out
            })
            .collect();
        FeatureMatrix { rows }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetScaling {
    /// Divide each rate vector by its own maximum.
    #[default]
    PerSample,
    /// Divide by the largest rate in the whole dataset.
    Global,
}

impl TargetScaling {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetScaling::PerSample => "per-sample",
            TargetScaling::Global => "global",
        }
    }
}

/// One labeled user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub user_id: usize,
    pub features: FeatureMatrix,
    pub label: OracleLabel,
    /// Scaled rate vector at the oracle BS, entries in `[0, 1]`.
    pub target: Vec<f64>,
    /// All mmW (BS, beam) rates, kept for rate-ratio evaluation.
    pub rates: RateTable,
    /// Diagnostic only; never part of the model input.
    pub position: Point3,
}

/// Regression target for `label` under `scaling`; `global_max` is only
/// read for [`TargetScaling::Global`].
pub fn regression_target(label: &OracleLabel, scaling: TargetScaling, global_max: f64) -> Vec<f64> {
    let denom = match scaling {
        TargetScaling::PerSample => label.rate,
        TargetScaling::Global => global_max,
    };
    if denom > 0.0 {
        label.rate_vector_at_best_bs.iter().map(|r| r / denom).collect()
    } else {
        vec![0.0; label.rate_vector_at_best_bs.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::path_from_geometry;
    use crate::scene::{build_scene, Building, BsSite, SceneConfig, Tier};
    use proptest::prelude::*;

    fn path(gain: f64, azimuth: f64) -> PathParams {
        PathParams {
            gain,
            phase: 1.0,
            delay: 2e-7,
            azimuth,
            elevation: -0.1,
            blocked: false,
        }
    }

    #[test]
    fn unit_gain_is_zero_db() {
        let band = BandConfig::sub6_3p5ghz();
        let f = extract_features(&path(1.0, 0.0), &band);
        assert_eq!(f, [0.0, -0.1, 0.0, 1.0, 2e-7]);
        assert_eq!(extract_features(&path(0.0, 0.2), &band)[2], POWER_FLOOR_DB);
    }

    #[test]
    fn blocked_link_is_twenty_db_down() {
        let cfg = SceneConfig {
            sub6_sites: vec![BsSite::new(50.0, -10.0, 90.0)],
            user_rows: 1,
            ..SceneConfig::desk()
        };
        let blocked = build_scene(&SceneConfig {
            buildings: vec![Building::new(Point3::new(40.0, -6.0, 0.0), Point3::new(60.0, -2.0, 40.0))],
            ..cfg.clone()
        })
        .unwrap();
        let clear = build_scene(&SceneConfig { buildings: vec![], ..cfg }).unwrap();
        let band = BandConfig::sub6_3p5ghz();
        let user = Point3::new(50.0, 10.0, 1.5);
        let fb = extract_features(
            &path_from_geometry(blocked.tier(Tier::Sub6).next().unwrap(), user, &band, &blocked).unwrap(),
            &band,
        );
        let fc = extract_features(
            &path_from_geometry(clear.tier(Tier::Sub6).next().unwrap(), user, &band, &clear).unwrap(),
            &band,
        );
        assert!((fc[2] - fb[2] - 20.0).abs() < 1e-9);
        assert!(fb[0].abs() < 1e-12);
    }

    #[test]
    fn assemble_orders_rows_by_bs() {
        let m = assemble_input(vec![(1, [1.0; 5]), (0, [0.0; 5])], 2).unwrap();
        assert_eq!(m.n_rows(), 2);
        assert_eq!(m.rows()[0], [0.0; 5]);
        assert_eq!(m.rows()[1], [1.0; 5]);
        assert_eq!(assemble_input(vec![(0, [3.0; 5])], 1).unwrap().n_rows(), 1);
        assert!(matches!(assemble_input(vec![(0, [0.0; 5])], 2), Err(Error::Contract(_))));
        assert!(assemble_input(vec![(0, [0.0; 5]), (0, [0.0; 5])], 2).is_err());
    }

    #[test]
    fn normalizer_extremes_and_constant_columns() {
        let a = FeatureMatrix::from_rows(vec![[1.0, 5.0, -3.0, 0.0, 2.0]]).unwrap();
        let b = FeatureMatrix::from_rows(vec![[3.0, 5.0, -1.0, 1.0, 4.0]]).unwrap();
        let stats = fit_normalizer([&a, &b]).unwrap();
        assert_eq!(stats.normalize(&a).rows()[0], [0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(stats.normalize(&b).rows()[0], [1.0, 0.0, 1.0, 1.0, 1.0]);
        let outside = FeatureMatrix::from_rows(vec![[5.0, 5.0, -1.0, 1.0, 4.0]]).unwrap();
        assert_eq!(stats.normalize(&outside).rows()[0][0], 2.0);
        assert!(fit_normalizer(std::iter::empty()).is_err());
    }

    #[test]
    fn per_sample_target_peaks_at_one() {
        let label = OracleLabel {
            bs_index: 0,
            beam_index: 1,
            rate: 4.0,
            rate_vector_at_best_bs: vec![1.0, 4.0, 2.0],
            coverage: true,
        };
        assert_eq!(regression_target(&label, TargetScaling::PerSample, 0.0), vec![0.25, 1.0, 0.5]);
        assert_eq!(regression_target(&label, TargetScaling::Global, 8.0), vec![0.125, 0.5, 0.25]);
    }

    proptest! {
        #[test]
        fn denormalize_inverts_normalize(
            rows in proptest::collection::vec(proptest::array::uniform5(-1e3..1e3f64), 2..6),
            probe in proptest::array::uniform5(-1e3..1e3f64),
        ) {
            let train: Vec<_> = rows.iter().map(|r| FeatureMatrix::from_rows(vec![*r]).unwrap()).collect();
            let stats = fit_normalizer(&train).unwrap();
            let x = FeatureMatrix::from_rows(vec![probe]).unwrap();
            let back = stats.denormalize(&stats.normalize(&x));
            for c in 0..N_FEATURES {
                if stats.max[c] > stats.min[c] {
                    prop_assert!((back.rows()[0][c] - probe[c]).abs() <= 1e-9 * (1.0 + probe[c].abs()));
                }
            }
        }
    }
}
