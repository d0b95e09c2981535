//! Central finite-difference check of the analytic gradient.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{backward, batch_losses, forward_batch, Batch, ForwardPass, LossWeights, Params, BS_OUT};
use crate::Result;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Check at most this many entries per tensor (chosen at random);
    /// `None` checks every entry.
    pub max_entries_per_tensor: Option<usize>,
    pub seed: u64,
    /// Multiplies the analytic gradient of the named tensor by the factor
    /// before comparing. Negative control for the checker itself.
    pub corrupt: Option<(String, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            max_entries_per_tensor: None,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub total: usize,
    /// Entries left out because a `±ε` probe flipped some ReLU on or off,
    /// which makes the central difference meaningless there.
    pub kinks: usize,
    /// `‖g_a − g_n‖ / (‖g_a‖ + ‖g_n‖)` over the checked entries.
    pub rel_error: f64,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.rel_error < self.tolerance)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<20} {:>8} {:>8} {:>6} {:>12} {:>12}\n",
            "tensor", "checked", "total", "kinks", "rel_error", "max_abs"
        );
        for t in &self.tensors {
            out.push_str(&format!(
                "{:<20} {:>8} {:>8} {:>6} {:>12.3e} {:>12.3e}\n",
                t.name, t.checked, t.total, t.kinks, t.rel_error, t.max_abs_diff
            ));
        }
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        out.push_str(&format!("{verdict}: max rel_error {:.3e} (tolerance {:.0e})\n", self.max_rel_error(), self.tolerance));
        out
    }
}

fn relative(diff2: f64, a2: f64, n2: f64) -> f64 {
    let denom = a2.sqrt() + n2.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff2.sqrt() / denom
    }
}

/// On/off state of every ReLU in a pass; the BS logits feed a softmax
/// instead and are skipped.
fn relu_pattern(pass: &ForwardPass) -> impl Iterator<Item = bool> + '_ {
    pass.pre
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != BS_OUT)
        .flat_map(|(_, z)| z.iter().map(|&v| v > 0.0))
}

/// Mean loss, and whether the ReLU pattern matches `reference`.
fn probe_loss(params: &Params, batch: &Batch, weights: LossWeights, reference: &[bool]) -> Result<(f64, bool)> {
    let pass = forward_batch(params, &batch.inputs)?;
    let losses = batch_losses(&pass, batch, weights);
    let same = relu_pattern(&pass).eq(reference.iter().copied());
    Ok((losses.iter().sum::<f64>() / losses.len() as f64, same))
}

/// Central differences for every sampled entry, skipping entries whose
/// probes cross a ReLU kink.
pub fn gradient_check(params: &Params, batch: &Batch, weights: LossWeights, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (_, mut analytic) = backward(params, batch, weights)?;
    if let Some((name, factor)) = &opts.corrupt {
        for (tname, values) in analytic.tensors_mut() {
            if &tname == name {
                values.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    let reference: Vec<bool> = relu_pattern(&forward_batch(params, &batch.inputs)?).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let tensors = params.tensors();
    let mut jobs: Vec<(usize, usize)> = Vec::new();
    for (t, (_, values)) in tensors.iter().enumerate() {
        let entries: Vec<usize> = match opts.max_entries_per_tensor {
            Some(k) if k < values.len() => {
                let mut v = sample(&mut rng, values.len(), k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..values.len()).collect(),
        };
        jobs.extend(entries.into_iter().map(|e| (t, e)));
    }

    let numeric: Vec<Option<f64>> = jobs
        .par_chunks(256)
        .map(|chunk| -> Result<Vec<Option<f64>>> {
            let mut probe = params.clone();
            let mut out = Vec::with_capacity(chunk.len());
            for &(t, e) in chunk {
                let original = tensors[t].1[e];
                let set = |p: &mut Params, v: f64| p.tensor_mut(t)[e] = v;
                set(&mut probe, original + opts.epsilon);
                let (plus, smooth_plus) = probe_loss(&probe, batch, weights, &reference)?;
                set(&mut probe, original - opts.epsilon);
                let (minus, smooth_minus) = probe_loss(&probe, batch, weights, &reference)?;
                set(&mut probe, original);
                out.push((smooth_plus && smooth_minus).then(|| (plus - minus) / (2.0 * opts.epsilon)));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let analytic = analytic.tensors();
    let mut report = GradCheckReport {
        tolerance: opts.tolerance,
        tensors: tensors
            .iter()
            .map(|(name, v)| TensorCheck {
                name: name.clone(),
                checked: 0,
                total: v.len(),
                kinks: 0,
                rel_error: 0.0,
                max_abs_diff: 0.0,
            })
            .collect(),
    };
    let mut sums = vec![(0.0, 0.0, 0.0); tensors.len()];
    for (&(t, e), &n) in jobs.iter().zip(&numeric) {
        let entry = &mut report.tensors[t];
        let Some(n) = n else {
            entry.kinks += 1;
            continue;
        };
        let a = analytic[t].1[e];
        entry.checked += 1;
        entry.max_abs_diff = entry.max_abs_diff.max((a - n).abs());
        let s = &mut sums[t];
        s.0 += (a - n).powi(2);
        s.1 += a * a;
        s.2 += n * n;
    }
    for (entry, (d, a, n)) in report.tensors.iter_mut().zip(sums) {
        entry.rel_error = relative(d, a, n);
    }
    Ok(report)
}
