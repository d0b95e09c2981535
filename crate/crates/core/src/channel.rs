//! Single-path geometric OFDM channels for both bands.
//!
//! Each (BS, user) link carries one path whose parameters come straight
//! from geometry: free-space gain, carrier phase, delay and the arrival
//! direction expressed in the BS array frame. The frequency response over
//! the first `K` sampled subcarriers is
//!
//! ```text
//! H[k] = sqrt(ρ/K) · exp(j(κ + 2πk/K · Γ·B)) · a(θ, φ),   k = 1..K
//! ```

use std::f64::consts::PI;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scene::{dot, BaseStation, Point3, Scene, Tier};
use crate::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Extra attenuation of a blocked sub-6GHz path, in dB.
pub const SUB6_BLOCKAGE_DB: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub n_elements: usize,
    pub spacing_wavelengths: f64,
}

impl ArrayGeometry {
    pub fn ula(n_elements: usize) -> Self {
        Self {
            n_elements,
            spacing_wavelengths: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_elements == 0 {
            return Err(Error::Config("array needs at least one element".into()));
        }
        if !(self.spacing_wavelengths.is_finite() && self.spacing_wavelengths > 0.0) {
            return Err(Error::Config(format!(
                "antenna spacing must be positive, got {}",
                self.spacing_wavelengths
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandConfig {
    pub carrier_frequency: f64,
    pub bandwidth: f64,
    pub n_subcarriers_total: usize,
    pub sampling_factor: usize,
    /// Number of leading sampled subcarriers actually synthesized (`K`).
    pub subcarrier_limit: usize,
    pub tx_power: f64,
    pub noise_variance: f64,
}

impl BandConfig {
    pub fn mmw_28ghz() -> Self {
        Self {
            carrier_frequency: 28e9,
            bandwidth: 0.5e9,
            n_subcarriers_total: 1024,
            sampling_factor: 1,
            subcarrier_limit: 64,
            tx_power: 1.0,
            noise_variance: 1.0,
        }
    }

    pub fn sub6_3p5ghz() -> Self {
        Self {
            carrier_frequency: 3.5e9,
            bandwidth: 0.02e9,
            ..Self::mmw_28ghz()
        }
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency
    }

    /// `P_T / (K σ²)`.
    pub fn gamma(&self) -> f64 {
        self.tx_power / (self.subcarrier_limit as f64 * self.noise_variance)
    }

    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("carrier_frequency", self.carrier_frequency),
            ("bandwidth", self.bandwidth),
            ("tx_power", self.tx_power),
            ("noise_variance", self.noise_variance),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("band {name} must be positive, got {v}")));
            }
        }
        if self.n_subcarriers_total == 0 || self.sampling_factor == 0 || self.subcarrier_limit == 0 {
            return Err(Error::Config("subcarrier counts and sampling factor must be positive".into()));
        }
        if self.subcarrier_limit > self.n_subcarriers_total {
            return Err(Error::Config(format!(
                "subcarrier_limit {} exceeds n_subcarriers_total {}",
                self.subcarrier_limit, self.n_subcarriers_total
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    /// Linear power gain ρ.
    pub gain: f64,
    /// κ in `[0, 2π)`.
    pub phase: f64,
    /// Γ in seconds.
    pub delay: f64,
    /// θ in `(-π, π]`, measured from broadside towards the array axis.
    pub azimuth: f64,
    /// φ in `[-π/2, π/2]`, positive above the array.
    pub elevation: f64,
    pub blocked: bool,
}

/// `a_n = exp(j 2π d n cos φ sin θ)` for `n = 0..N`.
pub fn array_response(geometry: &ArrayGeometry, azimuth: f64, elevation: f64) -> Vec<Complex64> {
    let step = 2.0 * PI * geometry.spacing_wavelengths * elevation.cos() * azimuth.sin();
    (0..geometry.n_elements)
        .map(|n| Complex64::from_polar(1.0, step * n as f64))
        .collect()
}

pub fn path_from_geometry(bs: &BaseStation, user: Point3, band: &BandConfig, scene: &Scene) -> Result<PathParams> {
    let d = user.distance(bs.position);
    if !(d > 0.0) {
        return Err(Error::Domain(format!(
            "user at ({}, {}, {}) coincides with base station {}",
            user.x, user.y, user.z, bs.id
        )));
    }
    let dir = user.sub(bs.position).map(|c| c / d);
    let lambda = band.wavelength();
    let blocked = scene.is_blocked(bs.position, user);

    let mut gain = (lambda / (4.0 * PI * d)).powi(2);
    if blocked {
        gain = match bs.tier {
            Tier::Mmw => 0.0,
            Tier::Sub6 => gain * 10f64.powf(-SUB6_BLOCKAGE_DB / 10.0),
        };
    }

    let azimuth = dot(dir, bs.axis).atan2(dot(dir, bs.broadside));
    let elevation = dir[2].clamp(-1.0, 1.0).asin();
    Ok(PathParams {
        gain,
        phase: (-2.0 * PI * d / lambda).rem_euclid(2.0 * PI),
        delay: d / SPEED_OF_LIGHT,
        // atan2 returns -π for (-0, -x); fold it into (-π, π].
        azimuth: if azimuth == -PI { PI } else { azimuth },
        elevation,
        blocked,
    })
}

/// Frequency response over the first `K = subcarrier_limit` subcarriers,
/// shape `K × N` (row `k-1` holds `H[k]`).
pub fn channel_vectors(path: &PathParams, geometry: &ArrayGeometry, band: &BandConfig) -> Array2<Complex64> {
    let k_count = band.subcarrier_limit;
    let n = geometry.n_elements;
    if path.gain == 0.0 {
        return Array2::zeros((k_count, n));
    }
    let a = array_response(geometry, path.azimuth, path.elevation);
    let amp = (path.gain / k_count as f64).sqrt();
    Array2::from_shape_fn((k_count, n), |(row, col)| {
        let k = (row + 1) as f64;
        let theta = path.phase + 2.0 * PI * k / k_count as f64 * path.delay * band.bandwidth;
        Complex64::from_polar(amp, theta) * a[col]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Sub6,
    Mmw,
}

impl From<Tier> for Band {
    fn from(t: Tier) -> Self {
        match t {
            Tier::Sub6 => Band::Sub6,
            Tier::Mmw => Band::Mmw,
        }
    }
}

/// Path parameters and channel matrices for every (BS, user) link of one tier.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    pub band: Band,
    pub band_config: BandConfig,
    pub geometry: ArrayGeometry,
    pub n_bs: usize,
    pub n_users: usize,
    /// Indexed `[bs * n_users + user]`.
    pub paths: Vec<PathParams>,
    /// Indexed like `paths`; each is `K × N`.
    pub channels: Vec<Array2<Complex64>>,
}

impl ChannelSet {
    /// Synthesizes all links of `tier`; link order is `(bs, user)` regardless
    /// of how the work is scheduled.
    pub fn generate(scene: &Scene, tier: Tier, band: &BandConfig, geometry: &ArrayGeometry) -> Result<Self> {
        band.validate()?;
        geometry.validate()?;
        let stations: Vec<&BaseStation> = scene.tier(tier).collect();
        let users = scene.place_users();
        let links: Vec<(PathParams, Array2<Complex64>)> = (0..stations.len() * users.len())
            .into_par_iter()
            .map(|i| {
                let bs = stations[i / users.len()];
                let path = path_from_geometry(bs, users[i % users.len()], band, scene)?;
                let h = channel_vectors(&path, geometry, band);
                Ok((path, h))
            })
            .collect::<Result<_>>()?;
        let (paths, channels) = links.into_iter().unzip();
        Ok(Self {
            band: tier.into(),
            band_config: band.clone(),
            geometry: *geometry,
            n_bs: stations.len(),
            n_users: users.len(),
            paths,
            channels,
        })
    }

    pub fn path(&self, bs: usize, user: usize) -> &PathParams {
        &self.paths[bs * self.n_users + user]
    }

    pub fn channel(&self, bs: usize, user: usize) -> &Array2<Complex64> {
        &self.channels[bs * self.n_users + user]
    }

    /// All BS links of one user, in BS order.
    pub fn user_links(&self, user: usize) -> Vec<&Array2<Complex64>> {
        (0..self.n_bs).map(|bs| self.channel(bs, user)).collect()
    }
}

const CHANNEL_MAGIC: &[u8; 8] = b"BSELCHN1";

#[derive(Serialize, Deserialize)]
struct ChannelHeader {
    version: u32,
    band: Band,
    band_config: BandConfig,
    geometry: ArrayGeometry,
    scene_hash: String,
    n_bs: usize,
    n_users: usize,
}

impl ChannelSet {
    /// Binary layout: magic, little-endian u64 header length, JSON header,
    /// then per link the six path fields and `K·N` (re, im) pairs, all as
    /// little-endian f64.
    pub fn write_to(&self, path: &Path, scene_hash: &str) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = serde_json::to_vec(&ChannelHeader {
            version: 1,
            band: self.band,
            band_config: self.band_config.clone(),
            geometry: self.geometry,
            scene_hash: scene_hash.to_string(),
            n_bs: self.n_bs,
            n_users: self.n_users,
        })
        .expect("header serializes");
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        write(CHANNEL_MAGIC)?;
        write(&(header.len() as u64).to_le_bytes())?;
        write(&header)?;
        for (p, h) in self.paths.iter().zip(&self.channels) {
            let blocked = if p.blocked { 1.0 } else { 0.0 };
            for v in [p.gain, p.phase, p.delay, p.azimuth, p.elevation, blocked] {
                write(&v.to_le_bytes())?;
            }
            for c in h.iter() {
                write(&c.re.to_le_bytes())?;
                write(&c.im.to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a file written by [`ChannelSet::write_to`], returning the set
    /// and the scene hash recorded in its header.
    pub fn read_from(path: &Path) -> Result<(Self, String)> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut read = |buf: &mut [u8]| r.read_exact(buf).map_err(|e| Error::io(path, e));
        let mut magic = [0u8; 8];
        read(&mut magic)?;
        if &magic != CHANNEL_MAGIC {
            return Err(Error::Data(format!("{} is not a channel file", path.display())));
        }
        let mut len = [0u8; 8];
        read(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        read(&mut header)?;
        let header: ChannelHeader =
            serde_json::from_slice(&header).map_err(|e| Error::Data(format!("bad channel header: {e}")))?;
        if header.version != 1 {
            return Err(Error::Data(format!("unsupported channel file version {}", header.version)));
        }
        let (k, n) = (header.band_config.subcarrier_limit, header.geometry.n_elements);
        let links = header.n_bs * header.n_users;
        let mut next = || -> Result<f64> {
            let mut b = [0u8; 8];
            read(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let mut paths = Vec::with_capacity(links);
        let mut channels = Vec::with_capacity(links);
        for _ in 0..links {
            let mut f = [0.0; 6];
            for v in &mut f {
                *v = next()?;
            }
            paths.push(PathParams {
                gain: f[0],
                phase: f[1],
                delay: f[2],
                azimuth: f[3],
                elevation: f[4],
                blocked: f[5] != 0.0,
            });
            let mut data = Vec::with_capacity(k * n);
            for _ in 0..k * n {
                let re = next()?;
                data.push(Complex64::new(re, next()?));
            }
            channels.push(Array2::from_shape_vec((k, n), data).expect("shape matches length"));
        }
        let set = Self {
            band: header.band,
            band_config: header.band_config,
            geometry: header.geometry,
            n_bs: header.n_bs,
            n_users: header.n_users,
            paths,
            channels,
        };
        Ok((set, header.scene_hash))
    }
}
