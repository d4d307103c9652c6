//! Synthetic-world generator: ground-truth population built as
//! built-up times occupancy, Voronoi census regions with exact zonal
//! counts, binary built-up labels, and a four-season input stack whose
//! bands are invertible noisy transforms of the latent fields. Every
//! artifact is deterministic in the seed, which makes the generator the
//! oracle for the end-to-end tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::census::{zonal_sum, CensusTable};
use crate::grid::{FeatureGroup, Grid, GridStack, Transform};
use crate::regions::{merge_smallest, MergeEvent, RegionMap};
use crate::{Error, Result};

/// Season labels with their compositing windows.
pub const SEASONS: [(&str, &str, &str); 4] = [
    ("spring", "2020-03-01", "2020-05-31"),
    ("summer", "2020-06-01", "2020-08-31"),
    ("autumn", "2020-09-01", "2020-11-30"),
    ("winter", "2020-12-01", "2021-02-28"),
];

/// Region-count ladder used by the scalability experiments.
pub const COARSEN_LADDER: [usize; 6] = [512, 156, 128, 64, 32, 16];

/// Shape of the generated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub width: usize,
    pub height: usize,
    pub n_regions: usize,
    /// Settlement kernels summed into the built-up field.
    pub n_blobs: usize,
    /// Persons per built-up unit across the occupancy ramp.
    pub occupancy_range: (f64, f64),
    /// Standard deviation of the per-pixel input noise.
    pub noise_sigma: f64,
    pub n_s1_bands: usize,
    pub n_s2_bands: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            width: 256,
            height: 256,
            n_regions: 100,
            n_blobs: 40,
            occupancy_range: (1.0, 5.0),
            noise_sigma: 0.05,
            n_s1_bands: 2,
            n_s2_bands: 4,
            seed: 0,
        }
    }
}

impl WorldConfig {
    fn check(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("world dimensions must be positive".into()));
        }
        if self.n_regions == 0 || self.n_regions > self.width * self.height {
            return Err(Error::Config(format!(
                "n_regions {} out of range for a {}x{} world",
                self.n_regions, self.width, self.height
            )));
        }
        if self.occupancy_range.0 <= 0.0 || self.occupancy_range.1 < self.occupancy_range.0 {
            return Err(Error::Config("occupancy range must be positive and ordered".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        if self.n_s1_bands == 0 && self.n_s2_bands == 0 {
            return Err(Error::Config("need at least one imagery band".into()));
        }
        Ok(())
    }
}

/// Everything the generator emits.
#[derive(Debug, Clone)]
pub struct World {
    pub inputs: GridStack,
    pub truth_population: Grid,
    pub truth_builtup: Grid,
    pub truth_occupancy: Grid,
    pub regions: RegionMap,
    pub census: CensusTable,
    pub builtup_labels: Grid,
}

/// Name of the AUX band carrying the exact built-up field in every
/// stack member; the external-weights variant points at it.
pub const BUILTUP_REF_BAND: &str = "builtup_ref";

struct BandModel {
    offset: f64,
    builtup_gain: f64,
    occupancy_gain: f64,
    builtup_quad: f64,
}

/// Generate the world. The ground truth satisfies population =
/// builtup * occupancy per pixel; the census equals the zonal sums of
/// the truth; input bands are affine-plus-mild-quadratic transforms of
/// the latent fields with independent seasonal noise.
pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (w, h) = (config.width, config.height);
    let n = w * h;
    let transform = Transform::new(0.0, 0.0, 10.0, 10.0);

    // Built-up field: clipped sum of Gaussian blobs in [0, 1].
    let min_dim = w.min(h) as f64;
    let mut blob_params = Vec::with_capacity(config.n_blobs);
    for _ in 0..config.n_blobs {
        let cx: f64 = rng.gen_range(0.0..w as f64);
        let cy: f64 = rng.gen_range(0.0..h as f64);
        let sigma: f64 = rng.gen_range(min_dim / 64.0..min_dim / 12.0);
        let amp: f64 = rng.gen_range(0.5..1.3);
        blob_params.push((cx, cy, sigma, amp));
    }
    let mut builtup = vec![0.0f32; n];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for &(cx, cy, sigma, amp) in &blob_params {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                acc += amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
            builtup[y * w + x] = acc.clamp(0.0, 1.0) as f32;
        }
    }

    // Occupancy: a clamped linear ramp along a random direction.
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (occ_min, occ_max) = config.occupancy_range;
    let mut occupancy = vec![0.0f32; n];
    let mut occ_normalized = vec![0.0f64; n];
    for y in 0..h {
        for x in 0..w {
            let xn = if w > 1 { x as f64 / (w - 1) as f64 } else { 0.5 };
            let yn = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.5 };
            let t = (0.5 + (xn - 0.5) * theta.cos() + (yn - 0.5) * theta.sin())
                .clamp(0.0, 1.0);
            occ_normalized[y * w + x] = t;
            occupancy[y * w + x] = (occ_min + (occ_max - occ_min) * t) as f32;
        }
    }

    // Truth population: the factorization holds bit-exactly.
    let population: Vec<f32> =
        builtup.iter().zip(&occupancy).map(|(&b, &o)| b * o).collect();

    // Voronoi regions over distinct seed pixels; ties go to the lower id.
    let seed_cells = rand::seq::index::sample(&mut rng, n, config.n_regions);
    let seed_points: Vec<(f64, f64)> = seed_cells
        .iter()
        .map(|c| ((c % w) as f64, (c / w) as f64))
        .collect();
    let mut indices = vec![0u32; n];
    for y in 0..h {
        for x in 0..w {
            let mut best = 0u32;
            let mut best_d = f64::INFINITY;
            for (i, &(sx, sy)) in seed_points.iter().enumerate() {
                let dx = x as f64 - sx;
                let dy = y as f64 - sy;
                let d = dx * dx + dy * dy;
                if d < best_d {
                    best_d = d;
                    best = i as u32;
                }
            }
            indices[y * w + x] = best;
        }
    }
    let regions = RegionMap::from_indices(w, h, transform, indices)?;

    // Binary built-up labels.
    let labels: Vec<f32> =
        builtup.iter().map(|&b| if b > 0.5 { 1.0 } else { 0.0 }).collect();

    // Input bands: fixed per-band transforms of the latent fields,
    // alternating emphasis so both fields stay recoverable from either
    // imagery group.
    let n_imagery = config.n_s1_bands + config.n_s2_bands;
    let mut band_models = Vec::with_capacity(n_imagery);
    for k in 0..n_imagery {
        let offset = rng.gen_range(-0.2..0.2);
        let (builtup_gain, occupancy_gain) = if k % 2 == 0 {
            (rng.gen_range(0.9..1.3), rng.gen_range(0.1..0.3))
        } else {
            (rng.gen_range(0.1..0.3), rng.gen_range(0.9..1.3))
        };
        let builtup_quad = rng.gen_range(-0.15..0.15);
        band_models.push(BandModel { offset, builtup_gain, occupancy_gain, builtup_quad });
    }

    let mut band_names = Vec::new();
    let mut groups = Vec::new();
    for k in 0..config.n_s1_bands {
        band_names.push(format!("s1_{k}"));
        groups.push(FeatureGroup::S1);
    }
    for k in 0..config.n_s2_bands {
        band_names.push(format!("s2_{k}"));
        groups.push(FeatureGroup::S2);
    }
    band_names.push(BUILTUP_REF_BAND.to_string());
    groups.push(FeatureGroup::Aux);

    let mut members = Vec::with_capacity(SEASONS.len());
    for _ in SEASONS {
        let mut values = Vec::with_capacity(n * (n_imagery + 1));
        for model in &band_models {
            for i in 0..n {
                let b = builtup[i] as f64;
                let t = occ_normalized[i];
                let clean = model.offset
                    + model.builtup_gain * b
                    + model.occupancy_gain * t
                    + model.builtup_quad * b * b;
                let noise = if config.noise_sigma > 0.0 {
                    config.noise_sigma * standard_normal(&mut rng)
                } else {
                    0.0
                };
                values.push((clean + noise) as f32);
            }
        }
        values.extend_from_slice(&builtup);
        members.push(Grid::from_parts(
            w,
            h,
            transform,
            band_names.clone(),
            groups.clone(),
            values,
            vec![true; n * (n_imagery + 1)],
        )?);
    }
    let inputs = GridStack::new(
        members,
        SEASONS.iter().map(|(name, _, _)| name.to_string()).collect(),
    )?;

    let truth_population = Grid::from_parts(
        w,
        h,
        transform,
        vec!["population".into()],
        vec![FeatureGroup::Aux],
        population,
        vec![true; n],
    )?;
    let truth_builtup = Grid::from_parts(
        w,
        h,
        transform,
        vec!["builtup".into()],
        vec![FeatureGroup::Aux],
        builtup,
        vec![true; n],
    )?;
    let truth_occupancy = Grid::from_parts(
        w,
        h,
        transform,
        vec!["occupancy".into()],
        vec![FeatureGroup::Aux],
        occupancy,
        vec![true; n],
    )?;
    let builtup_labels = Grid::from_parts(
        w,
        h,
        transform,
        vec!["builtup_label".into()],
        vec![FeatureGroup::Aux],
        labels,
        vec![true; n],
    )?;

    // Census: exact zonal sums of the truth.
    let sums = zonal_sum(&truth_population, &regions)?;
    let census = CensusTable::new(sums.sums, format!("synthetic-seed{}", config.seed))?;

    Ok(World {
        inputs,
        truth_population,
        truth_builtup,
        truth_occupancy,
        regions,
        census,
        builtup_labels,
    })
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Merge regions down to `target_count` and fold census counts along
/// the merge log.
pub fn coarsen_census(
    map: &RegionMap,
    census: &CensusTable,
    target_count: usize,
) -> Result<(RegionMap, CensusTable, Vec<MergeEvent>)> {
    let (merged_map, log) = merge_smallest(map, target_count)?;
    let mut entries = census.entries.clone();
    for event in &log {
        let absorbed = entries.remove(&event.absorbed).ok_or_else(|| {
            Error::CensusRegionMismatch(format!(
                "merge log references region {} missing from the census",
                event.absorbed
            ))
        })?;
        *entries
            .get_mut(&event.kept)
            .ok_or_else(|| Error::MissingCensusEntry(event.kept))? += absorbed;
    }
    let label = format!("{}-m{}", census.label, target_count);
    Ok((merged_map, CensusTable::new(entries, label)?, log))
}
