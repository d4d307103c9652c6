//! Raster data model: multi-band float grids with per-cell validity,
//! temporal stacks, compositing, block aggregation, and photometric
//! augmentation.
//!
//! Values are stored band-sequential, row-major. Grids are immutable
//! after construction and safe to share across threads; every operation
//! here returns a new grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Affine placement of a raster in map coordinates (no rotation terms).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size_x: f64,
    pub pixel_size_y: f64,
}

impl Transform {
    pub fn new(origin_x: f64, origin_y: f64, pixel_size_x: f64, pixel_size_y: f64) -> Self {
        Transform { origin_x, origin_y, pixel_size_x, pixel_size_y }
    }

    /// Map coordinates of the center of pixel (x, y).
    pub fn pixel_center(&self, x: usize, y: usize) -> (f64, f64) {
        (
            self.origin_x + (x as f64 + 0.5) * self.pixel_size_x,
            self.origin_y + (y as f64 + 0.5) * self.pixel_size_y,
        )
    }

    pub fn pixel_area(&self) -> f64 {
        self.pixel_size_x * self.pixel_size_y
    }
}

/// Feature group a band belongs to; drives feature masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureGroup {
    S1,
    S2,
    #[serde(rename = "AUX")]
    Aux,
}

impl FeatureGroup {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureGroup::S1 => "S1",
            FeatureGroup::S2 => "S2",
            FeatureGroup::Aux => "AUX",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "S1" => Ok(FeatureGroup::S1),
            "S2" => Ok(FeatureGroup::S2),
            "AUX" => Ok(FeatureGroup::Aux),
            other => Err(Error::Config(format!("unknown feature group {other:?}"))),
        }
    }

    /// Canonical ordering used wherever groups are iterated.
    pub const ALL: [FeatureGroup; 3] = [FeatureGroup::S1, FeatureGroup::S2, FeatureGroup::Aux];
}

/// Multi-band float raster with a per-cell-per-band validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    bands: usize,
    transform: Transform,
    values: Vec<f32>,
    valid: Vec<bool>,
    band_names: Vec<String>,
    groups: Vec<FeatureGroup>,
}

impl Grid {
    /// Build a grid from raw buffers, validating the layout invariants.
    pub fn from_parts(
        width: usize,
        height: usize,
        transform: Transform,
        band_names: Vec<String>,
        groups: Vec<FeatureGroup>,
        values: Vec<f32>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let bands = band_names.len();
        if groups.len() != bands {
            return Err(Error::InvalidGrid(format!(
                "{} band names but {} groups",
                bands,
                groups.len()
            )));
        }
        let cells = width * height * bands;
        if values.len() != cells {
            return Err(Error::InvalidGrid(format!(
                "expected {cells} values, got {}",
                values.len()
            )));
        }
        if valid.len() != cells {
            return Err(Error::InvalidGrid(format!(
                "expected {cells} mask entries, got {}",
                valid.len()
            )));
        }
        if transform.pixel_size_x <= 0.0 || transform.pixel_size_y <= 0.0 {
            return Err(Error::InvalidGrid("pixel sizes must be positive".into()));
        }
        Ok(Grid { width, height, bands, transform, values, valid, band_names, groups })
    }

    /// All-valid grid filled with a constant.
    pub fn filled(
        width: usize,
        height: usize,
        transform: Transform,
        band_names: Vec<String>,
        groups: Vec<FeatureGroup>,
        fill: f32,
    ) -> Result<Self> {
        let bands = band_names.len();
        let cells = width * height * bands;
        Grid::from_parts(
            width,
            height,
            transform,
            band_names,
            groups,
            vec![fill; cells],
            vec![true; cells],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn transform(&self) -> Transform {
        self.transform
    }

    pub fn band_names(&self) -> &[String] {
        &self.band_names
    }

    pub fn groups(&self) -> &[FeatureGroup] {
        &self.groups
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn index(&self, band: usize, x: usize, y: usize) -> usize {
        band * self.width * self.height + y * self.width + x
    }

    #[inline]
    pub fn value(&self, band: usize, x: usize, y: usize) -> f32 {
        self.values[self.index(band, x, y)]
    }

    #[inline]
    pub fn is_valid(&self, band: usize, x: usize, y: usize) -> bool {
        self.valid[self.index(band, x, y)]
    }

    /// Band index by name.
    pub fn band_index(&self, name: &str) -> Result<usize> {
        self.band_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::MissingBand(name.to_string()))
    }

    /// Contiguous value slice of one band.
    pub fn band_values(&self, band: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.values[band * n..(band + 1) * n]
    }

    /// Contiguous mask slice of one band.
    pub fn band_valid(&self, band: usize) -> &[bool] {
        let n = self.width * self.height;
        &self.valid[band * n..(band + 1) * n]
    }

    /// True when a pixel is valid in every band.
    pub fn pixel_valid(&self, x: usize, y: usize) -> bool {
        (0..self.bands).all(|b| self.is_valid(b, x, y))
    }

    /// Same dims and transform as another raster-shaped object.
    pub fn aligned_with(&self, width: usize, height: usize, transform: &Transform) -> bool {
        self.width == width && self.height == height && self.transform == *transform
    }

    /// Sum of valid cells of one band, accumulated in double precision.
    pub fn valid_sum(&self, band: usize) -> f64 {
        let n = self.width * self.height;
        let vals = self.band_values(band);
        let mask = self.band_valid(band);
        let mut acc = 0.0f64;
        for i in 0..n {
            if mask[i] {
                acc += vals[i] as f64;
            }
        }
        acc
    }
}

/// Temporal stack of dimensionally identical grids.
#[derive(Debug, Clone)]
pub struct GridStack {
    members: Vec<Grid>,
    timestamps: Vec<String>,
}

impl GridStack {
    pub fn new(members: Vec<Grid>, timestamps: Vec<String>) -> Result<Self> {
        if members.len() != timestamps.len() {
            return Err(Error::InvalidGrid(format!(
                "{} members but {} timestamps",
                members.len(),
                timestamps.len()
            )));
        }
        if let Some(first) = members.first() {
            for (i, m) in members.iter().enumerate().skip(1) {
                let same = m.width == first.width
                    && m.height == first.height
                    && m.transform == first.transform
                    && m.band_names == first.band_names
                    && m.groups == first.groups;
                if !same {
                    return Err(Error::InvalidGrid(format!(
                        "stack member {i} does not match member 0 in dims/transform/band layout"
                    )));
                }
            }
        }
        for (i, t) in timestamps.iter().enumerate() {
            if timestamps[..i].contains(t) {
                return Err(Error::InvalidGrid(format!("duplicate timestamp {t:?}")));
            }
        }
        Ok(GridStack { members, timestamps })
    }

    pub fn members(&self) -> &[Grid] {
        &self.members
    }

    pub fn timestamps(&self) -> &[String] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member_by_timestamp(&self, label: &str) -> Result<&Grid> {
        let idx = self
            .timestamps
            .iter()
            .position(|t| t == label)
            .ok_or_else(|| Error::Config(format!("no stack member labelled {label:?}")))?;
        Ok(&self.members[idx])
    }
}

/// How to reduce a stack to one composite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompositeMethod {
    Median,
    Mean,
}

/// Per pixel per band, the median or mean over members whose cell is
/// valid. An output cell is invalid iff no member is valid there.
/// Even-count median is the mean of the two middle values.
pub fn composite(stack: &GridStack, method: CompositeMethod) -> Result<Grid> {
    if stack.is_empty() {
        return Err(Error::EmptyStack);
    }
    let first = &stack.members()[0];
    let (w, h, bands) = (first.width, first.height, first.bands);
    let n = w * h;
    let mut values = vec![0.0f32; n * bands];
    let mut valid = vec![false; n * bands];

    values
        .par_chunks_mut(w)
        .zip(valid.par_chunks_mut(w))
        .enumerate()
        .for_each(|(chunk, (vals, mask))| {
            let band = chunk / h;
            let y = chunk % h;
            let mut samples: Vec<f64> = Vec::with_capacity(stack.len());
            for x in 0..w {
                samples.clear();
                for m in stack.members() {
                    let i = m.index(band, x, y);
                    if m.valid[i] {
                        samples.push(m.values[i] as f64);
                    }
                }
                if samples.is_empty() {
                    continue;
                }
                let out = match method {
                    CompositeMethod::Mean => {
                        samples.iter().sum::<f64>() / samples.len() as f64
                    }
                    CompositeMethod::Median => {
                        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
                        let k = samples.len();
                        if k % 2 == 1 {
                            samples[k / 2]
                        } else {
                            (samples[k / 2 - 1] + samples[k / 2]) / 2.0
                        }
                    }
                };
                vals[x] = out as f32;
                mask[x] = true;
            }
        });

    Grid::from_parts(
        w,
        h,
        first.transform,
        first.band_names.clone(),
        first.groups.clone(),
        values,
        valid,
    )
}

/// Sum each factor-by-factor block into one output cell. Invalid inputs
/// contribute 0; an output cell is invalid iff its whole block is
/// invalid. Accumulation is double precision regardless of storage.
pub fn block_aggregate(grid: &Grid, factor: usize) -> Result<Grid> {
    if factor == 0 || grid.width % factor != 0 || grid.height % factor != 0 {
        return Err(Error::NonDivisible {
            width: grid.width,
            height: grid.height,
            factor,
        });
    }
    let (ow, oh) = (grid.width / factor, grid.height / factor);
    let on = ow * oh;
    let mut values = vec![0.0f32; on * grid.bands];
    let mut valid = vec![false; on * grid.bands];

    values
        .par_chunks_mut(ow)
        .zip(valid.par_chunks_mut(ow))
        .enumerate()
        .for_each(|(chunk, (vals, mask))| {
            let band = chunk / oh;
            let oy = chunk % oh;
            for ox in 0..ow {
                let mut acc = 0.0f64;
                let mut any_valid = false;
                for dy in 0..factor {
                    let y = oy * factor + dy;
                    for dx in 0..factor {
                        let x = ox * factor + dx;
                        let i = grid.index(band, x, y);
                        if grid.valid[i] {
                            acc += grid.values[i] as f64;
                            any_valid = true;
                        }
                    }
                }
                vals[ox] = acc as f32;
                mask[ox] = any_valid;
            }
        });

    let t = grid.transform;
    Grid::from_parts(
        ow,
        oh,
        Transform::new(
            t.origin_x,
            t.origin_y,
            t.pixel_size_x * factor as f64,
            t.pixel_size_y * factor as f64,
        ),
        grid.band_names.clone(),
        grid.groups.clone(),
        values,
        valid,
    )
}

/// Like [`block_aggregate`] but keeps double precision per output cell.
/// Used where mass conservation is checked at 1e-12 relative.
pub fn block_aggregate_f64(grid: &Grid, band: usize, factor: usize) -> Result<Vec<f64>> {
    if factor == 0 || grid.width % factor != 0 || grid.height % factor != 0 {
        return Err(Error::NonDivisible {
            width: grid.width,
            height: grid.height,
            factor,
        });
    }
    let (ow, oh) = (grid.width / factor, grid.height / factor);
    let mut out = vec![0.0f64; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0f64;
            for dy in 0..factor {
                for dx in 0..factor {
                    let i = grid.index(band, ox * factor + dx, oy * factor + dy);
                    if grid.valid[i] {
                        acc += grid.values[i] as f64;
                    }
                }
            }
            out[oy * ow + ox] = acc;
        }
    }
    Ok(out)
}

/// Per band, map values x -> a*x + b with a ~ N(1, contrast_sigma) and
/// b ~ N(0, brightness_sigma), drawn deterministically from the seed.
/// The validity mask is unchanged.
pub fn photometric_augment(
    grid: &Grid,
    brightness_sigma: f64,
    contrast_sigma: f64,
    rng_seed: u64,
) -> Grid {
    let all = vec![true; grid.bands];
    photometric_augment_bands(grid, brightness_sigma, contrast_sigma, rng_seed, &all)
}

/// [`photometric_augment`] restricted to selected bands. Training uses
/// this to jitter imagery while leaving AUX reference bands (external
/// weights, labels) untouched. Coefficients are drawn for every band so
/// the stream is identical whichever selection is applied.
pub fn photometric_augment_bands(
    grid: &Grid,
    brightness_sigma: f64,
    contrast_sigma: f64,
    rng_seed: u64,
    apply: &[bool],
) -> Grid {
    assert!(brightness_sigma >= 0.0 && contrast_sigma >= 0.0, "sigmas must be nonnegative");
    assert_eq!(apply.len(), grid.bands, "selection length");
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut coeffs = Vec::with_capacity(grid.bands);
    for _ in 0..grid.bands {
        let a = sample_normal(&mut rng, 1.0, contrast_sigma);
        let b = sample_normal(&mut rng, 0.0, brightness_sigma);
        coeffs.push((a, b));
    }
    let n = grid.width * grid.height;
    let mut values = grid.values.clone();
    for (band, &(a, b)) in coeffs.iter().enumerate() {
        if !apply[band] {
            continue;
        }
        for v in &mut values[band * n..(band + 1) * n] {
            *v = (a * (*v as f64) + b) as f32;
        }
    }
    Grid {
        values,
        valid: grid.valid.clone(),
        band_names: grid.band_names.clone(),
        groups: grid.groups.clone(),
        ..*grid
    }
}

fn sample_normal(rng: &mut ChaCha8Rng, mean: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        // Still consume a draw so band streams stay aligned.
        let _ = rand::Rng::gen::<f64>(rng);
        return mean;
    }
    Normal::new(mean, sigma).expect("valid normal").sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_transform() -> Transform {
        Transform::new(0.0, 0.0, 10.0, 10.0)
    }

    fn single_band(width: usize, height: usize, values: Vec<f32>, valid: Vec<bool>) -> Grid {
        Grid::from_parts(
            width,
            height,
            test_transform(),
            vec!["b0".into()],
            vec![FeatureGroup::Aux],
            values,
            valid,
        )
        .unwrap()
    }

    fn stack_of(values: &[f32], valid: &[bool]) -> GridStack {
        let members: Vec<Grid> = values
            .iter()
            .zip(valid)
            .map(|(&v, &ok)| single_band(1, 1, vec![v], vec![ok]))
            .collect();
        let labels = (0..members.len()).map(|i| format!("t{i}")).collect();
        GridStack::new(members, labels).unwrap()
    }

    #[test]
    fn composite_median_odd_count() {
        let s = stack_of(&[1.0, 3.0, 100.0], &[true, true, true]);
        let g = composite(&s, CompositeMethod::Median).unwrap();
        assert_eq!(g.value(0, 0, 0), 3.0);
    }

    #[test]
    fn composite_median_even_count_after_masking() {
        let s = stack_of(&[1.0, 3.0, 100.0], &[true, true, false]);
        let g = composite(&s, CompositeMethod::Median).unwrap();
        assert_eq!(g.value(0, 0, 0), 2.0);
    }

    #[test]
    fn composite_mean() {
        let s = stack_of(&[1.0, 3.0, 100.0], &[true, true, true]);
        let g = composite(&s, CompositeMethod::Mean).unwrap();
        assert!((g.value(0, 0, 0) - 34.666_667).abs() < 1e-5);
    }

    #[test]
    fn composite_all_invalid_cell_stays_invalid() {
        let s = stack_of(&[1.0, 2.0], &[false, false]);
        let g = composite(&s, CompositeMethod::Median).unwrap();
        assert!(!g.is_valid(0, 0, 0));
    }

    #[test]
    fn composite_mean_of_identical_members_is_exact() {
        let members: Vec<Grid> = (0..3)
            .map(|_| single_band(2, 1, vec![0.1, 7.25], vec![true, true]))
            .collect();
        let stack =
            GridStack::new(members, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let g = composite(&stack, CompositeMethod::Mean).unwrap();
        assert_eq!(g.value(0, 0, 0), 0.1f32);
        assert_eq!(g.value(0, 1, 0), 7.25f32);
    }

    #[test]
    fn composite_empty_stack_errors() {
        let s = GridStack::new(vec![], vec![]).unwrap();
        assert!(matches!(composite(&s, CompositeMethod::Mean), Err(Error::EmptyStack)));
    }

    #[test]
    fn block_aggregate_sums_blocks() {
        let g = single_band(2, 2, vec![1.0; 4], vec![true; 4]);
        let out = block_aggregate(&g, 2).unwrap();
        assert_eq!(out.width(), 1);
        assert_eq!(out.height(), 1);
        assert_eq!(out.value(0, 0, 0), 4.0);
        assert_eq!(out.transform().pixel_size_x, 20.0);
    }

    #[test]
    fn block_aggregate_factor_one_is_identity() {
        let g = single_band(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![true; 6]);
        let out = block_aggregate(&g, 1).unwrap();
        assert_eq!(out.values(), g.values());
        assert_eq!(out.valid_mask(), g.valid_mask());
        assert_eq!(out.transform(), g.transform());
    }

    #[test]
    fn block_aggregate_matches_brute_force() {
        // 20x20 grid with mixed validity vs an independent double loop.
        let mut rng_state = 12345u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng_state >> 33) as f32 / (1u64 << 31) as f32
        };
        let values: Vec<f32> = (0..400).map(|_| next() * 10.0 - 5.0).collect();
        let valid: Vec<bool> = (0..400).map(|_| next() > 0.2).collect();
        let g = single_band(20, 20, values.clone(), valid.clone());
        let out = block_aggregate(&g, 10).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut expect = 0.0f64;
                for dy in 0..10 {
                    for dx in 0..10 {
                        let i = (oy * 10 + dy) * 20 + ox * 10 + dx;
                        if valid[i] {
                            expect += values[i] as f64;
                        }
                    }
                }
                assert!((out.value(0, ox, oy) as f64 - expect).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn block_aggregate_conserves_mass() {
        let values: Vec<f32> = (0..64).map(|i| (i as f32) * 0.37 + 0.1).collect();
        let valid: Vec<bool> = (0..64).map(|i| i % 7 != 0).collect();
        let g = single_band(8, 8, values, valid);
        let out = block_aggregate_f64(&g, 0, 4).unwrap();
        let total_out: f64 = out.iter().sum();
        let total_in = g.valid_sum(0);
        assert!((total_out - total_in).abs() <= 1e-12 * total_in.abs().max(1.0));
    }

    #[test]
    fn block_aggregate_invalid_block_flagged() {
        let g = single_band(2, 2, vec![1.0; 4], vec![false, false, true, true]);
        let out = block_aggregate(&g, 2).unwrap();
        assert!(out.is_valid(0, 0, 0));
        assert_eq!(out.value(0, 0, 0), 2.0);
        let g2 = single_band(2, 2, vec![1.0; 4], vec![false; 4]);
        let out2 = block_aggregate(&g2, 2).unwrap();
        assert!(!out2.is_valid(0, 0, 0));
    }

    #[test]
    fn block_aggregate_rejects_non_divisible() {
        let g = single_band(3, 2, vec![0.0; 6], vec![true; 6]);
        assert!(matches!(block_aggregate(&g, 2), Err(Error::NonDivisible { .. })));
    }

    #[test]
    fn augment_zero_sigmas_is_identity() {
        let g = single_band(2, 2, vec![1.5, -2.0, 0.0, 3.25], vec![true, false, true, true]);
        let out = photometric_augment(&g, 0.0, 0.0, 99);
        assert_eq!(out.values(), g.values());
        assert_eq!(out.valid_mask(), g.valid_mask());
    }

    #[test]
    fn augment_same_seed_is_deterministic() {
        let g = single_band(2, 2, vec![1.5, -2.0, 0.5, 3.25], vec![true; 4]);
        let a = photometric_augment(&g, 0.1, 0.1, 42);
        let b = photometric_augment(&g, 0.1, 0.1, 42);
        assert_eq!(a.values(), b.values());
        let c = photometric_augment(&g, 0.1, 0.1, 43);
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn augment_keeps_constant_bands_constant() {
        let g = single_band(3, 1, vec![2.5, 2.5, 2.5], vec![true; 3]);
        let out = photometric_augment(&g, 0.1, 0.1, 42);
        let v = out.value(0, 0, 0);
        assert_eq!(out.value(0, 1, 0), v);
        assert_eq!(out.value(0, 2, 0), v);
    }

    #[test]
    fn stack_rejects_duplicate_timestamps() {
        let g = single_band(1, 1, vec![0.0], vec![true]);
        let err = GridStack::new(vec![g.clone(), g], vec!["a".into(), "a".into()]);
        assert!(err.is_err());
    }
}
