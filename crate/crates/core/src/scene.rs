//! Synthetic street scene: base stations on both tiers, box-shaped buildings
//! and a regular grid of users on the road surface.
//!
//! The road occupies `x ∈ [0, road_length]`, `y ∈ [0, road_width]` at ground
//! level. Buildings are axis-aligned boxes; a link is blocked when the open
//! segment between its endpoints enters the interior of any box.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn sub(self, other: Point3) -> [f64; 3] {
        [self.x - other.x, self.y - other.y, self.z - other.z]
    }

    pub fn distance(self, other: Point3) -> f64 {
        norm(self.sub(other))
    }

    fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    fn coords(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

pub(crate) fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Axis-aligned building volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub min: Point3,
    pub max: Point3,
}

impl Building {
    pub const fn new(min: Point3, max: Point3) -> Self {
        Self { min, max }
    }

    /// Strict interior test; points on a face are outside.
    pub fn contains(&self, p: Point3) -> bool {
        let (lo, hi, p) = (self.min.coords(), self.max.coords(), p.coords());
        (0..3).all(|i| lo[i] < p[i] && p[i] < hi[i])
    }

    /// Whether the open segment `(a, b)` passes through the box interior.
    fn intersects_open_segment(&self, a: Point3, b: Point3) -> bool {
        let (lo, hi) = (self.min.coords(), self.max.coords());
        let (a, b) = (a.coords(), b.coords());
        let mut t_enter = 0.0_f64;
        let mut t_exit = 1.0_f64;
        for i in 0..3 {
            let d = b[i] - a[i];
            if d == 0.0 {
                if !(lo[i] < a[i] && a[i] < hi[i]) {
                    return false;
                }
                continue;
            }
            let (mut t0, mut t1) = ((lo[i] - a[i]) / d, (hi[i] - a[i]) / d);
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_enter = t_enter.max(t0);
            t_exit = t_exit.min(t1);
            if t_enter >= t_exit {
                return false;
            }
        }
        t_enter < t_exit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Sub6,
    Mmw,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Sub6 => "sub6",
            Tier::Mmw => "mmw",
        }
    }
}

/// Ground position of a base station mast and the horizontal direction its
/// array faces. The mast height comes from the tier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsSite {
    pub x: f64,
    pub y: f64,
    /// Horizontal broadside direction in degrees, counter-clockwise from +x.
    pub facing_deg: f64,
}

impl BsSite {
    pub const fn new(x: f64, y: f64, facing_deg: f64) -> Self {
        Self { x, y, facing_deg }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub road_length: f64,
    pub road_width: f64,
    pub sub6_sites: Vec<BsSite>,
    pub mmw_sites: Vec<BsSite>,
    pub sub6_height: f64,
    pub mmw_height: f64,
    pub user_grid_spacing: f64,
    /// Number of user rows centered on the road axis; `0` fills the width.
    #[serde(default)]
    pub user_rows: usize,
    pub user_height: f64,
    pub buildings: Vec<Building>,
    pub rng_seed: u64,
    /// Uniform position jitter as a fraction of half the grid spacing.
    #[serde(default)]
    pub user_jitter: f64,
}

impl SceneConfig {
    pub fn n_sub6_bs(&self) -> usize {
        self.sub6_sites.len()
    }

    pub fn n_mmw_bs(&self) -> usize {
        self.mmw_sites.len()
    }

    /// 200 m street canyon: two macro sites at the road ends on opposite
    /// sides, four small cells on alternating sides, each in a 10 m gap
    /// between the six buildings lining the street.
    pub fn desk() -> Self {
        let south = |x0: f64, x1: f64, h: f64| Building::new(Point3::new(x0, -20.0, 0.0), Point3::new(x1, -1.0, h));
        let north = |x0: f64, x1: f64, h: f64| Building::new(Point3::new(x0, 21.0, 0.0), Point3::new(x1, 40.0, h));
        Self {
            road_length: 200.0,
            road_width: 20.0,
            sub6_sites: vec![BsSite::new(-10.0, -15.0, 10.0), BsSite::new(210.0, 35.0, 190.0)],
            mmw_sites: vec![
                BsSite::new(30.0, -4.0, 90.0),
                BsSite::new(80.0, 24.0, -90.0),
                BsSite::new(130.0, -4.0, 90.0),
                BsSite::new(180.0, 24.0, -90.0),
            ],
            sub6_height: 25.0,
            mmw_height: 8.0,
            user_grid_spacing: 0.5,
            user_rows: 16,
            user_height: 1.5,
            buildings: vec![
                south(0.0, 25.0, 18.0),
                south(35.0, 125.0, 22.0),
                south(135.0, 200.0, 16.0),
                north(0.0, 75.0, 20.0),
                north(85.0, 175.0, 24.0),
                north(185.0, 200.0, 18.0),
            ],
            rng_seed: 1,
            user_jitter: 0.0,
        }
    }

    /// 400 m street canyon with eight small cells, matching the paper-scale
    /// deployment (two macro sites, eight mmW sites).
    pub fn paper() -> Self {
        let road_length = 400.0;
        let xs: Vec<f64> = (0..8).map(|i| 25.0 + 50.0 * i as f64).collect();
        let mmw_sites = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                if i % 2 == 0 {
                    BsSite::new(x, -4.0, 90.0)
                } else {
                    BsSite::new(x, 24.0, -90.0)
                }
            })
            .collect();
        let mut buildings = Vec::new();
        for (side, (y0, y1)) in [(-20.0, -1.0), (21.0, 40.0)].into_iter().enumerate() {
            let gaps: Vec<f64> = xs.iter().skip(side).step_by(2).copied().collect();
            let mut x0 = 0.0;
            for (j, x1) in gaps.iter().map(|x| x - 5.0).chain([road_length + 5.0]).enumerate() {
                let height = 14.0 + 4.0 * ((j + side) % 3) as f64;
                buildings.push(Building::new(Point3::new(x0, y0, 0.0), Point3::new(x1.min(road_length), y1, height)));
                x0 = x1 + 10.0;
            }
        }
        Self {
            road_length,
            road_width: 20.0,
            sub6_sites: vec![BsSite::new(-10.0, -15.0, 10.0), BsSite::new(410.0, 35.0, 190.0)],
            mmw_sites,
            sub6_height: 25.0,
            mmw_height: 8.0,
            user_grid_spacing: 0.5,
            user_rows: 16,
            user_height: 1.5,
            buildings,
            rng_seed: 1,
            user_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("road_length", self.road_length),
            ("road_width", self.road_width),
            ("user_grid_spacing", self.user_grid_spacing),
            ("sub6_height", self.sub6_height),
            ("mmw_height", self.mmw_height),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !self.user_height.is_finite() || self.user_height < 0.0 {
            return Err(Error::Config(format!("user_height must be non-negative, got {}", self.user_height)));
        }
        if !(0.0..1.0).contains(&self.user_jitter) {
            return Err(Error::Config(format!("user_jitter must lie in [0, 1), got {}", self.user_jitter)));
        }
        if self.sub6_sites.is_empty() {
            return Err(Error::Config("scene needs at least one sub-6GHz base station".into()));
        }
        if self.mmw_sites.is_empty() {
            return Err(Error::Config("scene needs at least one mmW base station".into()));
        }
        for (i, b) in self.buildings.iter().enumerate() {
            if !(b.min.is_finite() && b.max.is_finite()) {
                return Err(Error::Config(format!("building {i} has non-finite corners")));
            }
            if !(b.min.x < b.max.x && b.min.y < b.max.y && b.min.z < b.max.z) {
                return Err(Error::Config(format!("building {i} has min corner not below max corner")));
            }
        }
        Ok(())
    }
}

/// A base station resolved into world coordinates with its array frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseStation {
    /// Scene-wide id; sub-6GHz stations come first.
    pub id: usize,
    pub tier: Tier,
    /// Index within the tier, used as class label for mmW stations.
    pub tier_index: usize,
    pub position: Point3,
    /// Unit broadside direction (horizontal).
    pub broadside: [f64; 3],
    /// Unit array axis (horizontal, perpendicular to broadside).
    pub axis: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub base_stations: Vec<BaseStation>,
    pub users: Vec<Point3>,
    pub buildings: Vec<Building>,
    pub config: SceneConfig,
}

pub fn build_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;

    let mut base_stations = Vec::with_capacity(config.n_sub6_bs() + config.n_mmw_bs());
    let tiers = [
        (Tier::Sub6, &config.sub6_sites, config.sub6_height),
        (Tier::Mmw, &config.mmw_sites, config.mmw_height),
    ];
    for (tier, sites, height) in tiers {
        for (tier_index, site) in sites.iter().enumerate() {
            let position = Point3::new(site.x, site.y, height);
            if !position.is_finite() || !site.facing_deg.is_finite() {
                return Err(Error::Config(format!(
                    "{} base station {tier_index} has a non-finite position",
                    tier.as_str()
                )));
            }
            if let Some(k) = config.buildings.iter().position(|b| b.contains(position)) {
                return Err(Error::Config(format!(
                    "{} base station {tier_index} at ({}, {}, {}) lies inside building {k}",
                    tier.as_str(),
                    position.x,
                    position.y,
                    position.z
                )));
            }
            let (s, c) = site.facing_deg.to_radians().sin_cos();
            base_stations.push(BaseStation {
                id: base_stations.len(),
                tier,
                tier_index,
                position,
                broadside: [c, s, 0.0],
                axis: [-s, c, 0.0],
            });
        }
    }

    let users = grid_users(config)?;
    Ok(Scene {
        base_stations,
        users,
        buildings: config.buildings.clone(),
        config: config.clone(),
    })
}

fn grid_users(config: &SceneConfig) -> Result<Vec<Point3>> {
    let spacing = config.user_grid_spacing;
    let n_cols = (config.road_length / spacing + 1e-9).floor() as usize;
    let max_rows = (config.road_width / spacing + 1e-9).floor() as usize;
    let n_rows = if config.user_rows == 0 { max_rows } else { config.user_rows };
    if n_cols == 0 || n_rows == 0 {
        return Err(Error::Config(format!(
            "user grid is empty: spacing {spacing} m does not fit the {} m x {} m road",
            config.road_length, config.road_width
        )));
    }
    if n_rows > max_rows {
        return Err(Error::Config(format!(
            "user grid has {n_rows} rows but only {max_rows} fit across the {} m road",
            config.road_width
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let half = 0.5 * spacing * config.user_jitter;
    let y_center = 0.5 * config.road_width;
    let mut users = Vec::with_capacity(n_rows * n_cols);
    for row in 0..n_rows {
        let y = y_center + (row as f64 - 0.5 * (n_rows as f64 - 1.0)) * spacing;
        for col in 0..n_cols {
            let x = (col as f64 + 0.5) * spacing;
            let (dx, dy) = if half > 0.0 {
                (rng.gen_range(-half..half), rng.gen_range(-half..half))
            } else {
                (0.0, 0.0)
            };
            users.push(Point3::new(x + dx, y + dy, config.user_height));
        }
    }
    Ok(users)
}

impl Scene {
    pub fn n_sub6_bs(&self) -> usize {
        self.config.n_sub6_bs()
    }

    pub fn n_mmw_bs(&self) -> usize {
        self.config.n_mmw_bs()
    }

    pub fn tier(&self, tier: Tier) -> impl Iterator<Item = &BaseStation> {
        self.base_stations.iter().filter(move |bs| bs.tier == tier)
    }

    /// User positions in row-major order along the road axis.
    pub fn place_users(&self) -> &[Point3] {
        &self.users
    }

    /// True iff the open segment `(a, b)` crosses the interior of a building.
    pub fn is_blocked(&self, a: Point3, b: Point3) -> bool {
        is_blocked(&self.buildings, a, b)
    }

    /// SHA-256 over the canonical JSON encoding of the scene.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("scene serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Line-record export: `bs`, `building` and `user` records, one per line.
    pub fn export_records(&self, config_hash: &str) -> String {
        let mut out = format!("# beamsel-scene v1\n# config_hash={config_hash}\n");
        for bs in &self.base_stations {
            let p = bs.position;
            let _ = writeln!(out, "bs {} {} {} {} {}", bs.id, bs.tier.as_str(), p.x, p.y, p.z);
        }
        for (i, b) in self.buildings.iter().enumerate() {
            let _ = writeln!(
                out,
                "building {i} {} {} {} {} {} {}",
                b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z
            );
        }
        for (i, u) in self.users.iter().enumerate() {
            let _ = writeln!(out, "user {i} {} {} {}", u.x, u.y, u.z);
        }
        out
    }

    pub fn write_records(&self, path: &Path, config_hash: &str) -> Result<()> {
        std::fs::write(path, self.export_records(config_hash)).map_err(|e| Error::io(path, e))
    }
}

/// Segment/box occlusion test, symmetric in its endpoints.
pub fn is_blocked(buildings: &[Building], a: Point3, b: Point3) -> bool {
    // Canonical endpoint order keeps the floating-point path identical for
    // (a, b) and (b, a).
    let (a, b) = if a.coords() <= b.coords() { (a, b) } else { (b, a) };
    buildings.iter().any(|bld| bld.intersects_open_segment(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_box() -> Building {
        Building::new(Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 1.0, 1.0))
    }

    fn small_config() -> SceneConfig {
        SceneConfig {
            road_length: 200.0,
            road_width: 20.0,
            user_grid_spacing: 1.0,
            user_rows: 2,
            ..SceneConfig::desk()
        }
    }

    #[test]
    fn grid_arithmetic() {
        let scene = build_scene(&small_config()).unwrap();
        let users = scene.place_users();
        assert_eq!(users.len(), 400);
        assert_eq!(users[0], Point3::new(0.5, 9.5, 1.5));
        assert_eq!(users[199], Point3::new(199.5, 9.5, 1.5));
        assert_eq!(users[200], Point3::new(0.5, 10.5, 1.5));
        let min_x = users.iter().map(|u| u.x).fold(f64::INFINITY, f64::min);
        let min_y = users.iter().map(|u| u.y).fold(f64::INFINITY, f64::min);
        assert_eq!((users[0].x, users[0].y), (min_x, min_y));
    }

    #[test]
    fn users_are_unique() {
        let scene = build_scene(&SceneConfig::desk()).unwrap();
        let mut keys: Vec<_> = scene.users.iter().map(|u| (u.x.to_bits(), u.y.to_bits())).collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), scene.users.len());
    }

    #[test]
    fn paper_preset_has_ten_stations() {
        let scene = build_scene(&SceneConfig::paper()).unwrap();
        assert_eq!(scene.base_stations.len(), 10);
        assert_eq!(scene.tier(Tier::Sub6).count(), 2);
        assert_eq!(scene.tier(Tier::Mmw).count(), 8);
        assert!(scene.base_stations[..2].iter().all(|b| b.tier == Tier::Sub6));
    }

    #[test]
    fn deterministic_build() {
        let cfg = SceneConfig { user_jitter: 0.3, ..SceneConfig::desk() };
        let a = build_scene(&cfg).unwrap();
        let b = build_scene(&cfg).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.export_records(""), b.export_records(""));
        let other = build_scene(&SceneConfig { rng_seed: 2, ..cfg }).unwrap();
        assert_ne!(a.hash(), other.hash());
    }

    #[test]
    fn rejects_bs_inside_building() {
        let mut cfg = SceneConfig::desk();
        cfg.mmw_sites[1] = BsSite::new(100.0, 30.0, -90.0);
        let err = build_scene(&cfg).unwrap_err().to_string();
        assert!(err.contains("mmw base station 1"), "{err}");
        assert!(err.contains("building 4"), "{err}");
    }

    #[test]
    fn rejects_empty_grid_and_missing_tiers() {
        let cfg = SceneConfig { user_grid_spacing: 500.0, ..SceneConfig::desk() };
        assert!(matches!(build_scene(&cfg), Err(Error::Config(_))));
        let cfg = SceneConfig { mmw_sites: vec![], ..SceneConfig::desk() };
        assert!(build_scene(&cfg).unwrap_err().to_string().contains("mmW"));
    }

    #[test]
    fn segment_through_center_is_blocked() {
        let b = [unit_box()];
        assert!(is_blocked(&b, Point3::new(-1.0, 0.5, 0.5), Point3::new(2.0, 0.5, 0.5)));
        assert!(is_blocked(&b, Point3::new(-1.0, -1.0, -1.0), Point3::new(2.0, 2.0, 2.0)));
    }

    #[test]
    fn segment_outside_is_clear() {
        let b = [unit_box()];
        assert!(!is_blocked(&b, Point3::new(-1.0, 2.0, 0.5), Point3::new(2.0, 2.0, 0.5)));
        // Stops short of the box.
        assert!(!is_blocked(&b, Point3::new(-3.0, 0.5, 0.5), Point3::new(-0.1, 0.5, 0.5)));
    }

    /// Dense sampling oracle: any strictly interior sample point means blocked.
    fn sampled_blocked(b: &Building, a: Point3, c: Point3, n: usize) -> bool {
        (1..n).any(|i| {
            let t = i as f64 / n as f64;
            b.contains(Point3::new(a.x + t * (c.x - a.x), a.y + t * (c.y - a.y), a.z + t * (c.z - a.z)))
        })
    }

    #[test]
    fn grazing_face_is_not_blocked() {
        let b = unit_box();
        let cases = [
            // along the top face
            (Point3::new(-1.0, 0.5, 1.0), Point3::new(2.0, 0.5, 1.0)),
            // along a side face
            (Point3::new(0.5, 1.0, -1.0), Point3::new(0.5, 1.0, 2.0)),
            // along an edge
            (Point3::new(-1.0, 1.0, 1.0), Point3::new(2.0, 1.0, 1.0)),
            // touching a corner
            (Point3::new(-1.0, -1.0, 1.0), Point3::new(1.0, 1.0, 1.0)),
        ];
        for (a, c) in cases {
            assert!(!sampled_blocked(&b, a, c, 10_000));
            assert!(!is_blocked(&[b], a, c), "{a:?} -> {c:?}");
        }
    }

    fn point() -> impl Strategy<Value = Point3> {
        (-3.0..4.0f64, -3.0..4.0f64, -3.0..4.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn blocked_is_symmetric(a in point(), b in point()) {
            let blds = [unit_box(), Building::new(Point3::new(2.0, -1.0, 0.0), Point3::new(3.0, 3.0, 2.0))];
            prop_assert_eq!(is_blocked(&blds, a, b), is_blocked(&blds, b, a));
        }

        #[test]
        fn no_buildings_never_blocks(a in point(), b in point()) {
            prop_assert!(!is_blocked(&[], a, b));
        }

        #[test]
        fn matches_sampling_oracle(a in point(), b in point()) {
            let bld = unit_box();
            let exact = is_blocked(&[bld], a, b);
            // Sampling can only miss tiny chords, never invent a hit.
            if sampled_blocked(&bld, a, b, 2_000) {
                prop_assert!(exact);
            }
        }
    }
}
