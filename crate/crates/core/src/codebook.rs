//! DFT beam codebook, per-beam achievable rate and the exhaustive-search
//! oracle used to label users.

use std::cmp::Ordering;
use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `M × N`, one unit-norm beam per row.
    pub beams: Array2<Complex64>,
    /// Spatial frequency `ω_m` of each beam; entries are `exp(jπ n ω_m)/√N`.
    pub spatial_freqs: Vec<f64>,
}

impl Codebook {
    pub fn n_beams(&self) -> usize {
        self.beams.nrows()
    }

    pub fn n_elements(&self) -> usize {
        self.beams.ncols()
    }

    pub fn beam(&self, m: usize) -> ArrayView1<'_, Complex64> {
        self.beams.row(m)
    }

    /// Reorders beams; `order[i]` is the source index of new beam `i`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let beams = Array2::from_shape_fn(self.beams.dim(), |(i, n)| self.beams[[order[i], n]]);
        Self {
            beams,
            spatial_freqs: order.iter().map(|&i| self.spatial_freqs[i]).collect(),
        }
    }
}

/// `M` beams on a uniform spatial-frequency grid `ω_m = -1 + (2m+1)/M`.
///
/// Under the transpose product `Hᵀv` used for rates, beam `m` collects
/// energy from arrivals with `cos φ · sin θ ≈ -ω_m` (for half-wavelength
/// spacing).
pub fn dft_codebook(n_elements: usize, n_beams: usize) -> Result<Codebook> {
    if n_beams == 0 || n_elements == 0 {
        return Err(Error::Config("codebook needs at least one beam and one element".into()));
    }
    let scale = 1.0 / (n_elements as f64).sqrt();
    let spatial_freqs: Vec<f64> = (0..n_beams)
        .map(|m| -1.0 + (2 * m + 1) as f64 / n_beams as f64)
        .collect();
    let beams = Array2::from_shape_fn((n_beams, n_elements), |(m, n)| {
        Complex64::from_polar(scale, PI * n as f64 * spatial_freqs[m])
    });
    Ok(Codebook { beams, spatial_freqs })
}

/// `Σ_k log₂(1 + γ |H[k]ᵀ v|²)` over the rows of a `K × N` channel.
pub fn beam_rate(channel: &Array2<Complex64>, beam: ArrayView1<'_, Complex64>, gamma: f64) -> Result<f64> {
    if channel.ncols() != beam.len() {
        return Err(Error::Contract(format!(
            "beam has {} entries but the channel has {} antennas",
            beam.len(),
            channel.ncols()
        )));
    }
    Ok(channel
        .rows()
        .into_iter()
        .map(|h| {
            let y: Complex64 = h.iter().zip(beam.iter()).map(|(a, b)| a * b).sum();
            (1.0 + gamma * y.norm_sqr()).log2()
        })
        .sum())
}

pub fn rate_vector(channel: &Array2<Complex64>, codebook: &Codebook, gamma: f64) -> Result<Vec<f64>> {
    (0..codebook.n_beams())
        .map(|m| beam_rate(channel, codebook.beam(m), gamma))
        .collect()
}

/// Rates of every (BS, beam) pair for one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub n_bs: usize,
    pub n_beams: usize,
    /// Row-major `[bs * n_beams + beam]`.
    pub rates: Vec<f64>,
}

impl RateTable {
    pub fn compute(channels: &[&Array2<Complex64>], codebook: &Codebook, gamma: f64) -> Result<Self> {
        let mut rates = Vec::with_capacity(channels.len() * codebook.n_beams());
        for h in channels {
            rates.extend(rate_vector(h, codebook, gamma)?);
        }
        Ok(Self {
            n_bs: channels.len(),
            n_beams: codebook.n_beams(),
            rates,
        })
    }

    pub fn row(&self, bs: usize) -> &[f64] {
        &self.rates[bs * self.n_beams..(bs + 1) * self.n_beams]
    }

    pub fn get(&self, bs: usize, beam: usize) -> f64 {
        self.rates[bs * self.n_beams + beam]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleLabel {
    pub bs_index: usize,
    pub beam_index: usize,
    /// Sum rate over the K subcarriers at the chosen pair.
    pub rate: f64,
    pub rate_vector_at_best_bs: Vec<f64>,
    /// False when every mmW link of the user is blocked.
    pub coverage: bool,
}

/// Argmax over a rate table, lowest BS then lowest beam winning ties.
pub fn label_from_table(table: &RateTable, coverage: bool) -> OracleLabel {
    if !coverage {
        return OracleLabel {
            bs_index: 0,
            beam_index: 0,
            rate: 0.0,
            rate_vector_at_best_bs: vec![0.0; table.n_beams],
            coverage: false,
        };
    }
    let (mut best_bs, mut best_beam, mut best) = (0, 0, f64::NEG_INFINITY);
    for bs in 0..table.n_bs {
        for (beam, &r) in table.row(bs).iter().enumerate() {
            if r > best {
                (best_bs, best_beam, best) = (bs, beam, r);
            }
        }
    }
    OracleLabel {
        bs_index: best_bs,
        beam_index: best_beam,
        rate: best,
        rate_vector_at_best_bs: table.row(best_bs).to_vec(),
        coverage: true,
    }
}

/// Evaluates all `B_m × M` pairs for one user and returns the best one.
pub fn exhaustive_search(channels: &[&Array2<Complex64>], codebook: &Codebook, gamma: f64) -> Result<OracleLabel> {
    Ok(exhaustive_search_with_table(channels, codebook, gamma)?.0)
}

pub fn exhaustive_search_with_table(
    channels: &[&Array2<Complex64>],
    codebook: &Codebook,
    gamma: f64,
) -> Result<(OracleLabel, RateTable)> {
    if channels.is_empty() {
        return Err(Error::Contract("exhaustive search needs at least one mmW link".into()));
    }
    let table = RateTable::compute(channels, codebook, gamma)?;
    let coverage = channels.iter().any(|h| h.iter().any(|c| c.norm_sqr() > 0.0));
    Ok((label_from_table(&table, coverage), table))
}

/// Indices of the `b` largest rates, descending, ties to the lower index.
pub fn top_b_indices(rates: &[f64], b: usize) -> Result<Vec<usize>> {
    if b == 0 || b > rates.len() {
        return Err(Error::Contract(format!("b = {b} outside 1..={}", rates.len())));
    }
    let mut idx: Vec<usize> = (0..rates.len()).collect();
    // Stable sort keeps ascending index order among equal rates.
    idx.sort_by(|&i, &j| rates[j].partial_cmp(&rates[i]).unwrap_or(Ordering::Equal));
    idx.truncate(b);
    Ok(idx)
}

/// γ that puts a link of gain `reference_gain` at `snr_db` per subcarrier
/// when served by a matched beam (`|Hᵀv|² = ρN/K`).
pub fn calibrate_gamma(reference_gain: f64, n_elements: usize, n_subcarriers: usize, snr_db: f64) -> Result<f64> {
    if !(reference_gain > 0.0) {
        return Err(Error::Data("cannot calibrate gamma without an unblocked mmW link".into()));
    }
    Ok(10f64.powf(snr_db / 10.0) * n_subcarriers as f64 / (reference_gain * n_elements as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{array_response, channel_vectors, ArrayGeometry, BandConfig, PathParams};
    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat_path(gain: f64, azimuth: f64, elevation: f64) -> PathParams {
        PathParams {
            gain,
            phase: 0.7,
            delay: 0.0,
            azimuth,
            elevation,
            blocked: false,
        }
    }

    #[test]
    fn single_element_beams_are_one() {
        let cb = dft_codebook(1, 7).unwrap();
        assert!(cb.beams.iter().all(|c| (c - Complex64::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn square_codebook_is_orthonormal() {
        for n in [2, 4, 8, 16, 32] {
            let cb = dft_codebook(n, n).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let g: Complex64 = cb.beam(i).iter().zip(cb.beam(j).iter()).map(|(a, b)| a.conj() * b).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((g - Complex64::new(expect, 0.0)).norm() < 1e-12, "n={n} ({i},{j}) {g}");
                }
            }
        }
    }

    #[test]
    fn rate_of_zero_channel_is_zero() {
        let cb = dft_codebook(4, 8).unwrap();
        let h = Array2::zeros((3, 4));
        assert_eq!(rate_vector(&h, &cb, 5.0).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn scalar_rate() {
        let h = Array2::from_elem((1, 1), Complex64::new(1.0, 0.0));
        let v = Array1::from_elem(1, Complex64::new(1.0, 0.0));
        assert!((beam_rate(&h, v.view(), 1.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_contract_violation() {
        let h = Array2::zeros((2, 4));
        let v = Array1::zeros(3);
        assert!(matches!(beam_rate(&h, v.view(), 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn matched_beam_dominates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let geom = ArrayGeometry::ula(16);
        let band = BandConfig { subcarrier_limit: 8, ..BandConfig::mmw_28ghz() };
        let gamma = 3.0;
        let cb = dft_codebook(16, 32).unwrap();
        for _ in 0..10 {
            let p = flat_path(rng.gen_range(0.1..2.0), rng.gen_range(-1.5..1.5), rng.gen_range(-0.5..0.5));
            let h = channel_vectors(&p, &geom, &band);
            let a = array_response(&geom, p.azimuth, p.elevation);
            let matched: Array1<Complex64> = a.iter().map(|x| x.conj() / 4.0).collect();
            // Matched gain per subcarrier is ρN/K.
            let y: Complex64 = h.row(0).iter().zip(matched.iter()).map(|(a, b)| a * b).sum();
            assert!((y.norm_sqr() - p.gain * 16.0 / 8.0).abs() < 1e-12);
            let best = beam_rate(&h, matched.view(), gamma).unwrap();
            for r in rate_vector(&h, &cb, gamma).unwrap() {
                assert!(r <= best + 1e-12);
            }
            for _ in 0..1000 {
                let v: Array1<Complex64> =
                    (0..16).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
                let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
                let v = v.mapv(|c| c / norm);
                assert!(beam_rate(&h, v.view(), gamma).unwrap() <= best + 1e-12);
            }
        }
    }

    /// Circular distance on the spatial-frequency circle of period 2.
    fn circ(a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(2.0);
        d.min(2.0 - d)
    }

    #[test]
    fn argmax_beam_matches_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let geom = ArrayGeometry::ula(32);
        let band = BandConfig { subcarrier_limit: 4, ..BandConfig::mmw_28ghz() };
        let cb = dft_codebook(32, 16).unwrap();
        let mut checked = 0;
        while checked < 200 {
            let p = flat_path(1.0, rng.gen_range(-1.5..1.5), rng.gen_range(-0.6..0.6));
            let u = p.elevation.cos() * p.azimuth.sin();
            let dists: Vec<f64> = cb.spatial_freqs.iter().map(|&w| circ(-w, u)).collect();
            let mut sorted = dists.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            // Skip arrivals sitting near a boundary between two beams.
            if sorted[1] - sorted[0] < 0.02 {
                continue;
            }
            let nearest = dists.iter().position(|&d| d == sorted[0]).unwrap();
            let h = channel_vectors(&p, &geom, &band);
            let rates = rate_vector(&h, &cb, 10.0).unwrap();
            assert_eq!(top_b_indices(&rates, 1).unwrap()[0], nearest, "u = {u}");
            checked += 1;
        }
    }

    #[test]
    fn permuting_codebook_permutes_rates() {
        let geom = ArrayGeometry::ula(8);
        let band = BandConfig { subcarrier_limit: 4, ..BandConfig::mmw_28ghz() };
        let h = channel_vectors(&flat_path(0.5, 0.3, 0.1), &geom, &band);
        let cb = dft_codebook(8, 6).unwrap();
        let order = [3, 0, 5, 1, 4, 2];
        let r = rate_vector(&h, &cb, 2.0).unwrap();
        let rp = rate_vector(&h, &cb.permuted(&order), 2.0).unwrap();
        for (i, &src) in order.iter().enumerate() {
            assert_eq!(rp[i], r[src]);
        }
    }

    #[test]
    fn top_b_examples() {
        assert_eq!(top_b_indices(&[0.1, 0.9, 0.3], 1).unwrap(), vec![1]);
        assert_eq!(top_b_indices(&[0.5; 4], 2).unwrap(), vec![0, 1]);
        let mut all = top_b_indices(&[0.2, 0.4, 0.1, 0.3], 4).unwrap();
        assert_eq!(all, vec![1, 3, 0, 2]);
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(top_b_indices(&[0.1, 0.2], 0).is_err());
        assert!(top_b_indices(&[0.1, 0.2], 3).is_err());
    }

    #[test]
    fn single_unblocked_bs_is_selected() {
        let geom = ArrayGeometry::ula(4);
        let band = BandConfig { subcarrier_limit: 2, ..BandConfig::mmw_28ghz() };
        let cb = dft_codebook(4, 4).unwrap();
        let zero = Array2::zeros((2, 4));
        let live = channel_vectors(&flat_path(1e-6, 0.4, 0.0), &geom, &band);
        let label = exhaustive_search(&[&zero, &zero, &live], &cb, 1e6).unwrap();
        assert!(label.coverage);
        assert_eq!(label.bs_index, 2);
        assert_eq!(label.rate, label.rate_vector_at_best_bs[label.beam_index]);

        let none = exhaustive_search(&[&zero, &zero], &cb, 1e6).unwrap();
        assert!(!none.coverage);
        assert_eq!(none.rate, 0.0);
    }

    #[test]
    fn gamma_calibration_hits_target_snr() {
        let gamma = calibrate_gamma(1e-9, 32, 64, 10.0).unwrap();
        assert!((gamma * 1e-9 * 32.0 / 64.0 - 10.0).abs() < 1e-9);
        assert!(calibrate_gamma(0.0, 32, 64, 10.0).is_err());
    }

    fn random_channel(rng: &mut ChaCha8Rng, k: usize, n: usize) -> Array2<Complex64> {
        Array2::from_shape_fn((k, n), |_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    proptest! {
        #[test]
        fn rate_monotone_in_gamma(seed in 0u64..1000, g in 0.0..100.0f64, dg in 0.0..100.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_channel(&mut rng, 3, 4);
            let cb = dft_codebook(4, 5).unwrap();
            for m in 0..5 {
                let lo = beam_rate(&h, cb.beam(m), g).unwrap();
                let hi = beam_rate(&h, cb.beam(m), g + dg).unwrap();
                prop_assert!(hi >= lo);
            }
        }

        #[test]
        fn top_b_nested(rates in proptest::collection::vec(0.0..10.0f64, 2..40), frac in 0.0..1.0f64) {
            let b = 1 + ((rates.len() - 1) as f64 * frac) as usize;
            let small = top_b_indices(&rates, b).unwrap();
            let large = top_b_indices(&rates, b + 1).unwrap();
            prop_assert!(small.iter().all(|i| large.contains(i)));
        }

        #[test]
        fn oracle_dominates_all_pairs(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = dft_codebook(4, 4).unwrap();
            let hs: Vec<_> = (0..3).map(|_| random_channel(&mut rng, 2, 4)).collect();
            let refs: Vec<_> = hs.iter().collect();
            let (label, table) = exhaustive_search_with_table(&refs, &cb, 2.0).unwrap();
            prop_assert!(table.rates.iter().all(|&r| r <= label.rate));
        }

        #[test]
        fn gamma_scaling_keeps_argmax(seed in 0u64..1000, scale in 0.01..100.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = dft_codebook(4, 4).unwrap();
            let hs: Vec<_> = (0..2).map(|_| random_channel(&mut rng, 1, 4)).collect();
            let refs: Vec<_> = hs.iter().collect();
            // With one subcarrier the rate is monotone in |Hᵀv|², so the
            // ordering of pairs cannot depend on γ.
            let a = exhaustive_search(&refs, &cb, 1.0).unwrap();
            let b = exhaustive_search(&refs, &cb, scale).unwrap();
            prop_assert_eq!((a.bs_index, a.beam_index), (b.bs_index, b.beam_index));
        }

        #[test]
        fn codebook_permutation_relabels_oracle(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = dft_codebook(4, 6).unwrap();
            let hs: Vec<_> = (0..2).map(|_| random_channel(&mut rng, 2, 4)).collect();
            let refs: Vec<_> = hs.iter().collect();
            let order = [5, 2, 0, 4, 1, 3];
            let a = exhaustive_search(&refs, &cb, 3.0).unwrap();
            let b = exhaustive_search(&refs, &cb.permuted(&order), 3.0).unwrap();
            prop_assert_eq!(a.bs_index, b.bs_index);
            prop_assert_eq!(order[b.beam_index], a.beam_index);
            prop_assert_eq!(a.rate, b.rate);
        }
    }
}
