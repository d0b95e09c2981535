//! Accuracy metrics, measurement-count comparison against exhaustive search
//! and the CSV report.
//!
//! A beam "hit" at level `b` means the oracle beam is among the `b` highest
//! predicted rates, judged regardless of whether the BS was predicted
//! correctly. Total accuracy additionally requires the correct BS.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codebook::top_b_indices;
use crate::features::Sample;
use crate::model::{argmax, forward_many, Output, Params};
use crate::{Error, Result};

pub const REPORT_SCHEMA: &str = "beamsel-report v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Beam budget the summary row refers to.
    pub b: usize,
    pub n_beams: usize,
    pub sample_count: usize,
    pub bs_accuracy: f64,
    /// Index `b-1` holds the level-`b` value, for `b = 1..=M`.
    pub beam_accuracy: Vec<f64>,
    pub total_accuracy: Vec<f64>,
    /// Mean of (best measured rate among the predicted top-b at the
    /// predicted BS) / (oracle rate).
    pub rate_ratio: Vec<f64>,
    /// Beam accuracy restricted to samples whose BS was predicted correctly.
    pub beam_accuracy_given_bs: Vec<f64>,
}

impl EvalReport {
    pub fn beam_accuracy_at(&self, b: usize) -> f64 {
        self.beam_accuracy[b - 1]
    }

    pub fn total_accuracy_at(&self, b: usize) -> f64 {
        self.total_accuracy[b - 1]
    }

    pub fn rate_ratio_at(&self, b: usize) -> f64 {
        self.rate_ratio[b - 1]
    }

    /// Total accuracy at the report's own beam budget.
    pub fn total(&self) -> f64 {
        self.total_accuracy_at(self.b)
    }

    /// Beam measurements needed with prediction vs exhaustive search at the
    /// predicted BS.
    pub fn measurements(&self) -> (usize, usize) {
        (self.b, self.n_beams)
    }
}

/// Fraction of the exhaustive beam sweep spent when measuring `b` beams.
pub fn latency_ratio(b: usize, n_beams: usize) -> Result<f64> {
    if b == 0 || b > n_beams {
        return Err(Error::Contract(format!("b = {b} outside 1..={n_beams}")));
    }
    Ok(b as f64 / n_beams as f64)
}

/// Per-sample comparison of oracle and prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDiagnostic {
    pub user_id: usize,
    pub oracle_bs: usize,
    pub oracle_beam: usize,
    pub oracle_rate: f64,
    pub predicted_bs: usize,
    pub predicted_beam: usize,
    /// Position of the oracle beam in the predicted ranking (0 = top).
    pub oracle_beam_rank: usize,
    /// Rate of the predicted top-1 beam at the predicted BS.
    pub predicted_rate: f64,
}

fn diagnose(sample: &Sample, output: &Output, n_beams: usize) -> Result<(SampleDiagnostic, Vec<usize>)> {
    let ranking = top_b_indices(&output.beam_rates, n_beams)?;
    let predicted_bs = argmax(&output.bs_probs);
    let rank = ranking
        .iter()
        .position(|&m| m == sample.label.beam_index)
        .expect("ranking is a permutation");
    Ok((
        SampleDiagnostic {
            user_id: sample.user_id,
            oracle_bs: sample.label.bs_index,
            oracle_beam: sample.label.beam_index,
            oracle_rate: sample.label.rate,
            predicted_bs,
            predicted_beam: ranking[0],
            oracle_beam_rank: rank,
            predicted_rate: sample.rates.get(predicted_bs, ranking[0]),
        },
        ranking,
    ))
}

/// Scores precomputed model outputs against their samples.
pub fn evaluate_outputs(outputs: &[Output], samples: &[Sample], b: usize) -> Result<(EvalReport, Vec<SampleDiagnostic>)> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty test set".into()));
    }
    if outputs.len() != samples.len() {
        return Err(Error::Contract(format!("{} outputs for {} samples", outputs.len(), samples.len())));
    }
    let m = samples[0].target.len();
    if b == 0 || b > m {
        return Err(Error::Contract(format!("b = {b} outside 1..={m}")));
    }

    let mut bs_hits = 0usize;
    let mut beam_hits = vec![0usize; m];
    let mut total_hits = vec![0usize; m];
    let mut ratio_sum = vec![0.0f64; m];
    let mut diagnostics = Vec::with_capacity(samples.len());
    for (sample, output) in samples.iter().zip(outputs) {
        let (diag, ranking) = diagnose(sample, output, m)?;
        let bs_ok = diag.predicted_bs == diag.oracle_bs;
        bs_hits += bs_ok as usize;
        let mut best_measured = 0.0f64;
        for level in 0..m {
            best_measured = best_measured.max(sample.rates.get(diag.predicted_bs, ranking[level]));
            let hit = diag.oracle_beam_rank <= level;
            beam_hits[level] += hit as usize;
            total_hits[level] += (hit && bs_ok) as usize;
            ratio_sum[level] += if sample.label.rate > 0.0 { best_measured / sample.label.rate } else { 1.0 };
        }
        diagnostics.push(diag);
    }

    let n = samples.len() as f64;
    let frac = |v: &[usize]| v.iter().map(|&c| c as f64 / n).collect::<Vec<_>>();
    let given_bs = total_hits
        .iter()
        .map(|&c| if bs_hits > 0 { c as f64 / bs_hits as f64 } else { 0.0 })
        .collect();
    let report = EvalReport {
        b,
        n_beams: m,
        sample_count: samples.len(),
        bs_accuracy: bs_hits as f64 / n,
        beam_accuracy: frac(&beam_hits),
        total_accuracy: frac(&total_hits),
        rate_ratio: ratio_sum.iter().map(|s| s / n).collect(),
        beam_accuracy_given_bs: given_bs,
    };
    Ok((report, diagnostics))
}

/// Runs the model on normalized `samples` and scores it.
pub fn evaluate(params: &Params, samples: &[Sample], b: usize) -> Result<EvalReport> {
    Ok(evaluate_with_diagnostics(params, samples, b)?.0)
}

pub fn evaluate_with_diagnostics(
    params: &Params,
    samples: &[Sample],
    b: usize,
) -> Result<(EvalReport, Vec<SampleDiagnostic>)> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty test set".into()));
    }
    let inputs: Vec<_> = samples.iter().map(|s| &s.features).collect();
    let outputs = forward_many(params, &inputs)?;
    evaluate_outputs(&outputs, samples, b)
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportRow {
    kind: String,
    b: usize,
    beam_accuracy: f64,
    total_accuracy: f64,
    rate_ratio: f64,
    beam_accuracy_given_bs: f64,
    measurements: usize,
    exhaustive_measurements: usize,
    latency_ratio: f64,
    bs_accuracy: f64,
    samples: usize,
}

fn csv_error(e: csv::Error) -> Error {
    Error::Data(format!("CSV: {e}"))
}

/// One `level` row per `b = 1..=M` followed by a `summary` row at the
/// report's own `b`; two leading `#` lines carry the schema and config hash.
pub fn report_to_csv(report: &EvalReport, config_hash: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    writeln!(buf, "# {REPORT_SCHEMA}").expect("write to vec");
    writeln!(buf, "# config_hash={config_hash}").expect("write to vec");
    let mut w = csv::Writer::from_writer(buf);
    let row = |kind: &str, b: usize| -> Result<ReportRow> {
        Ok(ReportRow {
            kind: kind.into(),
            b,
            beam_accuracy: report.beam_accuracy_at(b),
            total_accuracy: report.total_accuracy_at(b),
            rate_ratio: report.rate_ratio_at(b),
            beam_accuracy_given_bs: report.beam_accuracy_given_bs[b - 1],
            measurements: b,
            exhaustive_measurements: report.n_beams,
            latency_ratio: latency_ratio(b, report.n_beams)?,
            bs_accuracy: report.bs_accuracy,
            samples: report.sample_count,
        })
    };
    for b in 1..=report.n_beams {
        w.serialize(row("level", b)?).map_err(csv_error)?;
    }
    w.serialize(row("summary", report.b)?).map_err(csv_error)?;
    w.into_inner().map_err(|e| Error::Data(format!("CSV: {e}")))
}

pub fn emit_report(report: &EvalReport, path: &Path, config_hash: &str) -> Result<()> {
    std::fs::write(path, report_to_csv(report, config_hash)?).map_err(|e| Error::io(path, e))
}

pub fn parse_report(text: &str) -> Result<EvalReport> {
    let mut lines = text.lines();
    if lines.next() != Some(&format!("# {REPORT_SCHEMA}")) {
        return Err(Error::Data(format!("report does not start with '# {REPORT_SCHEMA}'")));
    }
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let rows: Vec<ReportRow> = r.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_error)?;
    let (summary, levels) = match rows.split_last() {
        Some((s, l)) if s.kind == "summary" && l.iter().all(|r| r.kind == "level") => (s, l),
        _ => return Err(Error::Data("report must end with exactly one summary row".into())),
    };
    if levels.iter().enumerate().any(|(i, r)| r.b != i + 1) {
        return Err(Error::Data("report levels must run b = 1..=M".into()));
    }
    Ok(EvalReport {
        b: summary.b,
        n_beams: levels.len(),
        sample_count: summary.samples,
        bs_accuracy: summary.bs_accuracy,
        beam_accuracy: levels.iter().map(|r| r.beam_accuracy).collect(),
        total_accuracy: levels.iter().map(|r| r.total_accuracy).collect(),
        rate_ratio: levels.iter().map(|r| r.rate_ratio).collect(),
        beam_accuracy_given_bs: levels.iter().map(|r| r.beam_accuracy_given_bs).collect(),
    })
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_report(&text)
}

pub fn write_diagnostics(diagnostics: &[SampleDiagnostic], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for d in diagnostics {
        w.serialize(d).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{label_from_table, RateTable};
    use crate::features::FeatureMatrix;
    use crate::scene::Point3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_samples(rng: &mut ChaCha8Rng, n: usize, b_m: usize, m: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let rates = RateTable {
                    n_bs: b_m,
                    n_beams: m,
                    rates: (0..b_m * m).map(|_| rng.gen_range(0.0..10.0)).collect(),
                };
                let label = label_from_table(&rates, true);
                Sample {
                    user_id: i,
                    features: FeatureMatrix::from_rows(vec![[0.0; 5]]).unwrap(),
                    target: label.rate_vector_at_best_bs.iter().map(|r| r / label.rate).collect(),
                    label,
                    rates,
                    position: Point3::new(0.0, 0.0, 0.0),
                }
            })
            .collect()
    }

    fn oracle_output(s: &Sample) -> Output {
        let mut probs = vec![0.0; s.rates.n_bs];
        probs[s.label.bs_index] = 1.0;
        Output {
            bs_probs: probs,
            beam_rates: s.target.clone(),
        }
    }

    #[test]
    fn oracle_outputs_score_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = random_samples(&mut rng, 50, 4, 8);
        let outputs: Vec<_> = samples.iter().map(oracle_output).collect();
        let (r, _) = evaluate_outputs(&outputs, &samples, 1).unwrap();
        assert_eq!(r.bs_accuracy, 1.0);
        assert!(r.beam_accuracy.iter().all(|&a| a == 1.0));
        assert!(r.total_accuracy.iter().all(|&a| a == 1.0));
        assert!(r.rate_ratio.iter().all(|&a| (a - 1.0).abs() < 1e-15));
    }

    #[test]
    fn full_budget_always_hits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples = random_samples(&mut rng, 40, 3, 6);
        let outputs: Vec<_> = (0..40)
            .map(|_| Output {
                bs_probs: vec![1.0 / 3.0; 3],
                beam_rates: (0..6).map(|_| rng.gen_range(0.0..1.0)).collect(),
            })
            .collect();
        let (r, _) = evaluate_outputs(&outputs, &samples, 6).unwrap();
        assert_eq!(r.beam_accuracy_at(6), 1.0);
    }

    #[test]
    fn random_bs_guess_is_near_one_quarter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4000;
        let samples = random_samples(&mut rng, n, 4, 4);
        let outputs: Vec<_> = (0..n)
            .map(|_| {
                let mut probs = vec![0.0; 4];
                probs[rng.gen_range(0..4)] = 1.0;
                Output {
                    bs_probs: probs,
                    beam_rates: vec![0.5; 4],
                }
            })
            .collect();
        let (r, _) = evaluate_outputs(&outputs, &samples, 1).unwrap();
        // 4σ binomial band around 1/4.
        let sigma = (0.25f64 * 0.75 / n as f64).sqrt();
        assert!((r.bs_accuracy - 0.25).abs() < 4.0 * sigma, "{}", r.bs_accuracy);
    }

    #[test]
    fn latency_examples() {
        assert!((latency_ratio(3, 64).unwrap() - 0.046875).abs() < 1e-15);
        assert_eq!(latency_ratio(16, 16).unwrap(), 1.0);
        assert_eq!(latency_ratio(1, 16).unwrap(), 0.0625);
        assert!(latency_ratio(0, 16).is_err());
        assert!(latency_ratio(17, 16).is_err());
    }

    #[test]
    fn empty_test_set_is_rejected() {
        assert!(matches!(evaluate_outputs(&[], &[], 1), Err(Error::Data(_))));
    }

    #[test]
    fn report_csv_round_trip_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples = random_samples(&mut rng, 30, 2, 5);
        let outputs: Vec<_> = (0..30)
            .map(|_| Output {
                bs_probs: vec![0.6, 0.4],
                beam_rates: (0..5).map(|_| rng.gen_range(0.0..1.0)).collect(),
            })
            .collect();
        let (report, _) = evaluate_outputs(&outputs, &samples, 3).unwrap();
        let bytes = report_to_csv(&report, "cafe").unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        // two comment lines, header, M level rows, one summary row
        assert_eq!(text.lines().count(), 2 + 1 + 5 + 1);
        assert_eq!(parse_report(&text).unwrap(), report);
        assert_eq!(report_to_csv(&report, "cafe").unwrap(), bytes);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn metric_invariants(seed in 0u64..1_000_000, b in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples = random_samples(&mut rng, 12, 3, 8);
            let outputs: Vec<_> = (0..12)
                .map(|_| Output {
                    bs_probs: (0..3).map(|_| rng.gen_range(0.0..1.0)).collect(),
                    beam_rates: (0..8).map(|_| rng.gen_range(0.0..1.0)).collect(),
                })
                .collect();
            let (r, diags) = evaluate_outputs(&outputs, &samples, b).unwrap();
            for w in r.beam_accuracy.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            for level in 1..=8 {
                prop_assert!(r.total_accuracy_at(level) <= r.bs_accuracy);
                prop_assert!(r.total_accuracy_at(level) <= r.beam_accuracy_at(level));
                prop_assert!((0.0..=1.0 + 1e-12).contains(&r.rate_ratio_at(level)));
            }
            for ((d, s), o) in diags.iter().zip(&samples).zip(&outputs) {
                let top = top_b_indices(&o.beam_rates, b).unwrap();
                let in_top = top.contains(&s.label.beam_index);
                prop_assert_eq!(in_top, d.oracle_beam_rank < b);
                if d.predicted_bs == s.label.bs_index && in_top {
                    let best = top.iter().map(|&m| s.rates.get(d.predicted_bs, m)).fold(0.0, f64::max);
                    prop_assert_eq!(best, s.label.rate);
                }
            }
        }
    }
}
