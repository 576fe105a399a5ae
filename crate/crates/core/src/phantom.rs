//! Deterministic synthetic angiography-like studies with exact lesion ground truth.
//!
//! Vessels are smoothed 3D random walks drawn as bright tubes inside a central
//! disk; lesions are ellipsoidal filling defects placed on a vessel centerline
//! and fully enclosed by it.

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, Volume};

const PLACEMENT_RETRIES: usize = 500;
const DATASET_ATTEMPTS: u64 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub vessel_count: usize,
    pub vessel_radius_range: (f32, f32),
    pub lesion_count_range: (usize, usize),
    pub lesion_radius_range_voxels: (f32, f32),
    pub background_noise_sigma: f32,
    pub vessel_intensity: f32,
    pub lesion_intensity: f32,
    pub background_intensity: f32,
    /// Vessels stay within this fraction of the half-width around the in-plane center.
    pub region_radius_frac: f32,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: Dims::new(128, 128, 40),
            vessel_count: 6,
            vessel_radius_range: (4.0, 6.5),
            lesion_count_range: (1, 3),
            lesion_radius_range_voxels: (3.0, 4.5),
            background_noise_sigma: 20.0,
            vessel_intensity: 350.0,
            lesion_intensity: 60.0,
            background_intensity: -400.0,
            region_radius_frac: 0.55,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let Dims { width, height, depth } = self.dims;
        if width < 16 || height < 16 || depth < 8 {
            return bad(format!("phantom dims {} too small (min 16x16x8)", self.dims));
        }
        let (rmin, rmax) = self.lesion_radius_range_voxels;
        if !(rmin >= 2.0) || rmax < rmin {
            return bad(format!("lesion radius range ({rmin}, {rmax}) must satisfy 2 <= min <= max"));
        }
        let (vmin, vmax) = self.vessel_radius_range;
        if !(vmin > 0.0) || vmax < vmin {
            return bad(format!("vessel radius range ({vmin}, {vmax}) invalid"));
        }
        if self.lesion_count_range.1 < self.lesion_count_range.0 {
            return bad("lesion count range has max < min".into());
        }
        if self.lesion_count_range.1 > 0 && vmax - 1.0 < rmin {
            return bad(format!(
                "lesions of radius {rmin} cannot fit inside vessels of radius <= {vmax}"
            ));
        }
        if !(self.background_intensity < self.lesion_intensity
            && self.lesion_intensity < self.vessel_intensity)
        {
            return bad("intensities must satisfy background < lesion < vessel".into());
        }
        if !(self.background_noise_sigma >= 0.0) {
            return bad("background noise sigma must be >= 0".into());
        }
        if !(self.region_radius_frac > 0.0 && self.region_radius_frac <= 1.0) {
            return bad("region radius fraction must lie in (0, 1]".into());
        }
        if self.lesion_count_range.1 > 0 && self.vessel_count == 0 {
            return bad("lesions need at least one vessel".into());
        }
        Ok(())
    }
}

/// Placement record of one lesion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub center: [f32; 3],
    pub radii: [f32; 3],
    pub voxel_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomStudy {
    pub id: String,
    pub seed: u64,
    /// HU-like intensities.
    pub volume: Volume,
    pub gt_mask: Volume,
    pub slice_labels: Vec<u8>,
    pub lesions: Vec<LesionSpec>,
}

impl PhantomStudy {
    pub fn is_positive(&self) -> bool {
        !self.lesions.is_empty()
    }
}

/// Per-slice labels: 1 when the slice holds at least one lesion voxel.
pub fn slice_labels_from_mask(mask: &Volume) -> Vec<u8> {
    let d = mask.dims().depth;
    (0..d)
        .map(|z| mask.slice(z).iter().any(|&v| v != 0.0) as u8)
        .collect()
}

/// SplitMix64 step; derives independent child seeds from a master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Vessel {
    path: Vec<[f32; 3]>,
    radius: f32,
}

pub fn generate_phantom(config: &PhantomConfig) -> Result<PhantomStudy> {
    generate_with_lesions(config, None, format!("phantom_{:016x}", config.seed))
}

fn generate_with_lesions(
    config: &PhantomConfig,
    lesion_count: Option<usize>,
    id: String,
) -> Result<PhantomStudy> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dims = config.dims;
    let (cx, cy) = (dims.width as f32 / 2.0, dims.height as f32 / 2.0);
    let region = config.region_radius_frac * cx.min(cy);

    let vessels: Vec<Vessel> = (0..config.vessel_count)
        .map(|_| random_vessel(&mut rng, dims, (cx, cy), region, config.vessel_radius_range))
        .collect();

    let mut occupancy = vec![0.0f32; dims.len()];
    for v in &vessels {
        stamp_tube(&mut occupancy, dims, v);
    }

    let n_lesions = match lesion_count {
        Some(n) => n,
        None => {
            let (lo, hi) = config.lesion_count_range;
            rng.random_range(lo..=hi)
        }
    };

    let mut gt = vec![false; dims.len()];
    let mut lesions = Vec::with_capacity(n_lesions);
    for _ in 0..n_lesions {
        let placed = (0..PLACEMENT_RETRIES)
            .find_map(|_| try_place_lesion(&mut rng, config, &vessels, &occupancy, &gt));
        let Some((spec, voxels)) = placed else {
            return Err(Error::Generation {
                seed: config.seed,
                reason: format!(
                    "could not place lesion {} of {n_lesions} after {PLACEMENT_RETRIES} attempts",
                    lesions.len() + 1
                ),
            });
        };
        for i in voxels {
            gt[i] = true;
        }
        lesions.push(spec);
    }

    let noise = Normal::new(0.0f32, config.background_noise_sigma.max(0.0))
        .map_err(|e| Error::Config(e.to_string()))?;
    let span = config.vessel_intensity - config.background_intensity;
    let data: Vec<f32> = occupancy
        .iter()
        .zip(&gt)
        .map(|(&occ, &lesion)| {
            let base = if lesion {
                config.lesion_intensity
            } else {
                config.background_intensity + occ * span
            };
            let n = if config.background_noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            base + n
        })
        .collect();

    let volume = Volume::new(data, dims)?;
    let gt_mask = Volume::mask_from_fn(dims, |i| gt[i]);
    let slice_labels = slice_labels_from_mask(&gt_mask);
    Ok(PhantomStudy {
        id,
        seed: config.seed,
        volume,
        gt_mask,
        slice_labels,
        lesions,
    })
}

fn random_vessel(
    rng: &mut ChaCha8Rng,
    dims: Dims,
    (cx, cy): (f32, f32),
    region: f32,
    (rmin, rmax): (f32, f32),
) -> Vessel {
    let radius = if rmax > rmin { rng.random_range(rmin..=rmax) } else { rmin };
    let inner = (region - radius).max(1.0);
    let ang: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let rad = inner * rng.random::<f32>().sqrt();
    let zmax = (dims.depth - 1) as f32;
    let mut pos = [cx + rad * ang.cos(), cy + rad * ang.sin(), rng.random_range(0.0..=zmax)];
    let gauss = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut dir = normalize([
        gauss.sample(rng),
        gauss.sample(rng),
        gauss.sample(rng) * 1.5,
    ]);
    let steps = 2 * dims.depth + dims.width / 2;
    let mut raw = Vec::with_capacity(steps);
    for _ in 0..steps {
        raw.push(pos);
        dir = normalize([
            dir[0] + 0.25 * gauss.sample(rng),
            dir[1] + 0.25 * gauss.sample(rng),
            dir[2] + 0.25 * gauss.sample(rng),
        ]);
        let mut next = [pos[0] + dir[0], pos[1] + dir[1], pos[2] + dir[2]];
        let (dx, dy) = (next[0] - cx, next[1] - cy);
        let r = (dx * dx + dy * dy).sqrt();
        if r > inner {
            // reflect the radial component back into the disk
            let (nx, ny) = (dx / r, dy / r);
            let radial = dir[0] * nx + dir[1] * ny;
            dir[0] -= 2.0 * radial * nx;
            dir[1] -= 2.0 * radial * ny;
            next = [pos[0] + dir[0], pos[1] + dir[1], pos[2] + dir[2]];
        }
        if next[2] < 0.0 || next[2] > zmax {
            dir[2] = -dir[2];
            next[2] = pos[2] + dir[2];
        }
        pos = [next[0], next[1], next[2].clamp(0.0, zmax)];
    }
    let half = 2usize;
    let path = (0..raw.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(raw.len() - 1);
            let n = (hi - lo + 1) as f32;
            let mut acc = [0.0f32; 3];
            for p in &raw[lo..=hi] {
                for a in 0..3 {
                    acc[a] += p[a];
                }
            }
            [acc[0] / n, acc[1] / n, acc[2] / n]
        })
        .collect();
    Vessel { path, radius }
}

fn normalize(v: [f32; 3]) -> [f32; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-6);
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Union of spheres along the path with a one-voxel linear edge ramp.
fn stamp_tube(occ: &mut [f32], dims: Dims, vessel: &Vessel) {
    let reach = vessel.radius + 1.0;
    for p in &vessel.path {
        let lo = |c: f32| (c - reach).floor().max(0.0) as usize;
        let hi = |c: f32, n: usize| ((c + reach).ceil() as usize).min(n - 1);
        for z in lo(p[2])..=hi(p[2], dims.depth) {
            for y in lo(p[1])..=hi(p[1], dims.height) {
                for x in lo(p[0])..=hi(p[0], dims.width) {
                    let d = ((x as f32 - p[0]).powi(2)
                        + (y as f32 - p[1]).powi(2)
                        + (z as f32 - p[2]).powi(2))
                    .sqrt();
                    let v = (vessel.radius + 0.5 - d).clamp(0.0, 1.0);
                    let i = dims.index(x, y, z);
                    if v > occ[i] {
                        occ[i] = v;
                    }
                }
            }
        }
    }
}

fn try_place_lesion(
    rng: &mut ChaCha8Rng,
    config: &PhantomConfig,
    vessels: &[Vessel],
    occupancy: &[f32],
    existing: &[bool],
) -> Option<(LesionSpec, Vec<usize>)> {
    let dims = config.dims;
    let vessel = &vessels[rng.random_range(0..vessels.len())];
    let (rmin, rmax) = config.lesion_radius_range_voxels;
    let cap = vessel.radius - 1.0;
    if cap < rmin {
        return None;
    }
    let hi = rmax.min(cap);
    let mut radius = || if hi > rmin { rng.random_range(rmin..=hi) } else { rmin };
    let radii = [radius(), radius(), radius()];
    let margin = radii[2].ceil() + 1.0;
    let zmax = dims.depth as f32 - 1.0 - margin;
    let eligible: Vec<&[f32; 3]> = vessel
        .path
        .iter()
        .filter(|p| p[2] >= margin && p[2] <= zmax)
        .collect();
    if eligible.is_empty() {
        return None;
    }
    let center = *eligible[rng.random_range(0..eligible.len())];
    let mut voxels = Vec::new();
    let lo = |c: f32, r: f32| (c - r).floor().max(0.0) as usize;
    let up = |c: f32, r: f32, n: usize| ((c + r).ceil() as usize).min(n - 1);
    for z in lo(center[2], radii[2])..=up(center[2], radii[2], dims.depth) {
        for y in lo(center[1], radii[1])..=up(center[1], radii[1], dims.height) {
            for x in lo(center[0], radii[0])..=up(center[0], radii[0], dims.width) {
                let q = ((x as f32 - center[0]) / radii[0]).powi(2)
                    + ((y as f32 - center[1]) / radii[1]).powi(2)
                    + ((z as f32 - center[2]) / radii[2]).powi(2);
                if q <= 1.0 {
                    voxels.push(dims.index(x, y, z));
                }
            }
        }
    }
    let mean_radius = (radii[0] + radii[1] + radii[2]) / 3.0;
    if voxels.is_empty() || (mean_radius >= 2.3 && voxels.len() < 50) {
        return None;
    }
    // fully inside the tube, and at least two voxels away from any other lesion
    let (w, h, d) = (dims.width as isize, dims.height as isize, dims.depth as isize);
    for &i in &voxels {
        if occupancy[i] < 1.0 {
            return None;
        }
        let (x, y, z) = dims.coords(i);
        for dz in -2isize..=2 {
            for dy in -2isize..=2 {
                for dx in -2isize..=2 {
                    let (nx, ny, nz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if nx < 0 || ny < 0 || nz < 0 || nx >= w || ny >= h || nz >= d {
                        continue;
                    }
                    if existing[dims.index(nx as usize, ny as usize, nz as usize)] {
                        return None;
                    }
                }
            }
        }
    }
    let spec = LesionSpec {
        center,
        radii,
        voxel_count: voxels.len(),
    };
    Some((spec, voxels))
}

/// Generates `n_studies` studies; exactly `floor(n * positivity)` carry lesions.
pub fn generate_dataset(
    config: &PhantomConfig,
    n_studies: usize,
    positivity: f64,
) -> Result<Vec<PhantomStudy>> {
    if !(0.0..=1.0).contains(&positivity) {
        return Err(Error::Precondition(format!(
            "positivity must lie in [0, 1], got {positivity}"
        )));
    }
    config.validate()?;
    let n_pos = (n_studies as f64 * positivity).floor() as usize;
    if n_pos > 0 && config.lesion_count_range.1 == 0 {
        return Err(Error::Config(
            "positive studies requested but lesion_count_range allows no lesions".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n_studies).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX)));
    let mut positive = vec![false; n_studies];
    for &i in &order[..n_pos] {
        positive[i] = true;
    }
    (0..n_studies)
        .into_par_iter()
        .map(|i| {
            // a crowded draw may fail placement; fall back to the next derived stream
            let mut last_err = None;
            for attempt in 0..DATASET_ATTEMPTS {
                let seed = derive_seed(config.seed, i as u64 + (attempt << 32));
                let mut cfg = config.clone();
                cfg.seed = seed;
                let count = if positive[i] {
                    let (lo, hi) = config.lesion_count_range;
                    let lo = lo.max(1);
                    ChaCha8Rng::seed_from_u64(derive_seed(seed, 1)).random_range(lo..=hi)
                } else {
                    0
                };
                match generate_with_lesions(&cfg, Some(count), format!("study_{i:04}")) {
                    Ok(s) => return Ok(s),
                    Err(e @ Error::Generation { .. }) => last_err = Some(e),
                    Err(e) => return Err(e),
                }
            }
            Err(last_err.expect("at least one attempt"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{connected_components, Connectivity};

    fn small() -> PhantomConfig {
        PhantomConfig {
            dims: Dims::new(64, 64, 24),
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = PhantomConfig { seed: 7, ..small() };
        let a = generate_phantom(&cfg).unwrap();
        let b = generate_phantom(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&PhantomConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.volume, c.volume);
    }

    #[test]
    fn no_lesions_means_empty_truth() {
        let cfg = PhantomConfig {
            lesion_count_range: (0, 0),
            ..small()
        };
        let s = generate_phantom(&cfg).unwrap();
        assert_eq!(s.gt_mask.count_nonzero(), 0);
        assert!(s.slice_labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn three_lesions_three_components() {
        for seed in 0..5 {
            let cfg = PhantomConfig {
                lesion_count_range: (3, 3),
                seed,
                ..PhantomConfig::default()
            };
            let s = generate_phantom(&cfg).unwrap();
            let cs = connected_components(&s.gt_mask, Connectivity::Full26).unwrap();
            assert_eq!(cs.len(), 3, "seed {seed}");
            assert_eq!(s.lesions.len(), 3);
        }
    }

    #[test]
    fn labels_lesions_and_intensities_are_consistent() {
        let cfg = PhantomConfig {
            lesion_count_range: (2, 3),
            background_noise_sigma: 0.0,
            ..small()
        };
        for seed in 0..6 {
            let s = generate_phantom(&PhantomConfig { seed, ..cfg.clone() }).unwrap();
            assert_eq!(s.slice_labels, slice_labels_from_mask(&s.gt_mask));
            for (z, &l) in s.slice_labels.iter().enumerate() {
                let any = s.gt_mask.slice(z).iter().any(|&v| v == 1.0);
                assert_eq!(l == 1, any);
            }
            for (i, &g) in s.gt_mask.data().iter().enumerate() {
                if g == 1.0 {
                    assert_eq!(s.volume.data()[i], cfg.lesion_intensity);
                }
            }
            for l in &s.lesions {
                let mean = l.radii.iter().sum::<f32>() / 3.0;
                if mean >= 2.3 {
                    assert!(l.voxel_count >= 50);
                }
            }
        }
    }

    #[test]
    fn dataset_positivity_and_determinism() {
        let cfg = PhantomConfig { seed: 3, ..small() };
        let ds = generate_dataset(&cfg, 16, 0.25).unwrap();
        assert_eq!(ds.iter().filter(|s| s.is_positive()).count(), 4);
        assert_eq!(ds, generate_dataset(&cfg, 16, 0.25).unwrap());
        let neg = generate_dataset(&cfg, 4, 0.0).unwrap();
        assert!(neg.iter().all(|s| s.gt_mask.count_nonzero() == 0));
        assert!(matches!(generate_dataset(&cfg, 4, 1.5), Err(Error::Precondition(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small();
        cfg.lesion_radius_range_voxels = (1.5, 3.0);
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.lesion_intensity = 500.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn impossible_placement_reports_seed() {
        let cfg = PhantomConfig {
            dims: Dims::new(32, 32, 8),
            lesion_count_range: (40, 40),
            seed: 99,
            ..PhantomConfig::default()
        };
        match generate_phantom(&cfg) {
            Err(Error::Generation { seed, .. }) => assert_eq!(seed, 99),
            other => panic!("expected generation error, got {other:?}"),
        }
    }
}
