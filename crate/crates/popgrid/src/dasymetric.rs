//! Dasymetric rescaling: per census region, scale predicted pixels so
//! their sum matches the census count, plus scale-factor diagnostics.
//!
//! Regions where the model predicts zero mass are left at zero and
//! their census counts are reported as unallocated, which keeps the
//! failure visible instead of silently spreading people uniformly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::census::{zonal_sum, CensusTable};
use crate::grid::Grid;
use crate::regions::{RegionMap, NODATA};
use crate::{Error, Result};

/// Per-region multiplicative deviation between predictions and census.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionFactor {
    pub region_id: u32,
    pub predicted_sum: f64,
    pub census: f64,
    pub factor: f64,
}

/// Scale-factor distribution and national totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleFactorReport {
    pub factors: Vec<RegionFactor>,
    pub p10: f64,
    pub median: f64,
    pub p90: f64,
    /// Sum of predicted region totals before rescaling.
    pub national_estimate: f64,
    /// Sum of census counts over the mapped regions.
    pub national_census: f64,
    /// Census mass of regions whose predicted sum is zero.
    pub unallocated: f64,
    pub zero_sum_regions: Vec<u32>,
    /// Region sums after rescaling, in double precision (the f32
    /// raster quantizes these at ~1e-7 relative).
    pub adjusted_sums: BTreeMap<u32, f64>,
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    assert!((0.0..=1.0).contains(&q));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

fn build_report(
    sums: &BTreeMap<u32, f64>,
    census: &CensusTable,
    rescaled: bool,
) -> Result<ScaleFactorReport> {
    let mut factors = Vec::new();
    let mut zero_sum_regions = Vec::new();
    let mut unallocated = 0.0f64;
    let mut national_estimate = 0.0f64;
    let mut national_census = 0.0f64;
    let mut adjusted_sums = BTreeMap::new();
    for (&id, &sum) in sums {
        let count = census.get(id).ok_or(Error::MissingCensusEntry(id))?;
        national_estimate += sum;
        national_census += count;
        if sum > 0.0 {
            let factor = count / sum;
            factors.push(RegionFactor { region_id: id, predicted_sum: sum, census: count, factor });
            adjusted_sums.insert(id, if rescaled { sum * factor } else { sum });
        } else {
            zero_sum_regions.push(id);
            unallocated += count;
            adjusted_sums.insert(id, if rescaled { 0.0 } else { sum });
        }
    }
    let mut sorted: Vec<f64> = factors.iter().map(|f| f.factor).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (p10, median, p90) = if sorted.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        (quantile(&sorted, 0.1), quantile(&sorted, 0.5), quantile(&sorted, 0.9))
    };
    Ok(ScaleFactorReport {
        factors,
        p10,
        median,
        p90,
        national_estimate,
        national_census,
        unallocated,
        zero_sum_regions,
        adjusted_sums,
    })
}

/// Scale-factor diagnostics without touching the map.
pub fn scale_factors(
    pop: &Grid,
    map: &RegionMap,
    census: &CensusTable,
) -> Result<ScaleFactorReport> {
    let sums = zonal_sum(pop, map)?;
    build_report(&sums.sums, census, false)
}

/// Rescale band 0 of `pop` region by region so sums match the census.
/// Zero-sum regions stay at zero; their counts land in the report's
/// unallocated mass. Pixels outside every region pass through.
pub fn dasymetric_rescale(
    pop: &Grid,
    map: &RegionMap,
    census: &CensusTable,
) -> Result<(Grid, ScaleFactorReport)> {
    let sums = zonal_sum(pop, map)?;
    let report = build_report(&sums.sums, census, true)?;
    let factor_by_region: BTreeMap<u32, f64> =
        report.factors.iter().map(|f| (f.region_id, f.factor)).collect();

    let n = pop.width() * pop.height();
    let mut values = pop.values().to_vec();
    let mask = pop.band_valid(0);
    for i in 0..n {
        let id = map.indices()[i];
        if id == NODATA || !mask[i] {
            continue;
        }
        if let Some(&factor) = factor_by_region.get(&id) {
            values[i] = (values[i] as f64 * factor) as f32;
        }
        // Zero-sum regions keep their (zero-mass) pixels untouched.
    }
    let out = Grid::from_parts(
        pop.width(),
        pop.height(),
        pop.transform(),
        pop.band_names().to_vec(),
        pop.groups().to_vec(),
        values,
        pop.valid_mask().to_vec(),
    )?;
    Ok((out, report))
}

/// Per-region factors as `region_id,predicted_sum,census,factor` CSV.
pub fn factors_to_csv(report: &ScaleFactorReport) -> String {
    let mut out = String::from("region_id,predicted_sum,census,factor\n");
    for f in &report.factors {
        out.push_str(&format!(
            "{},{},{},{}\n",
            f.region_id, f.predicted_sum, f.census, f.factor
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FeatureGroup, Transform};

    fn pop_grid(w: usize, h: usize, values: Vec<f32>) -> Grid {
        let n = values.len();
        Grid::from_parts(
            w,
            h,
            Transform::new(0.0, 0.0, 10.0, 10.0),
            vec!["population".into()],
            vec![FeatureGroup::Aux],
            values,
            vec![true; n],
        )
        .unwrap()
    }

    fn map_of(w: usize, h: usize, indices: Vec<u32>) -> RegionMap {
        RegionMap::from_indices(w, h, Transform::new(0.0, 0.0, 10.0, 10.0), indices).unwrap()
    }

    fn table(pairs: &[(u32, f64)]) -> CensusTable {
        CensusTable::new(pairs.iter().copied().collect(), "t").unwrap()
    }

    #[test]
    fn proportional_split() {
        let pop = pop_grid(2, 1, vec![1.0, 3.0]);
        let map = map_of(2, 1, vec![0, 0]);
        let census = table(&[(0, 8.0)]);
        let (out, report) = dasymetric_rescale(&pop, &map, &census).unwrap();
        assert_eq!(out.values(), &[2.0, 6.0]);
        assert_eq!(report.factors[0].factor, 2.0);
        assert_eq!(report.unallocated, 0.0);
        assert!((report.adjusted_sums[&0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn identity_when_sums_match() {
        let pop = pop_grid(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let map = map_of(2, 2, vec![0, 0, 1, 1]);
        let census = table(&[(0, 3.0), (1, 7.0)]);
        let (out, report) = dasymetric_rescale(&pop, &map, &census).unwrap();
        assert_eq!(out.values(), pop.values());
        assert_eq!(report.p10, 1.0);
        assert_eq!(report.median, 1.0);
        assert_eq!(report.p90, 1.0);
    }

    #[test]
    fn zero_sum_region_reports_unallocated() {
        let pop = pop_grid(2, 2, vec![0.0, 0.0, 3.0, 1.0]);
        let map = map_of(2, 2, vec![0, 0, 1, 1]);
        let census = table(&[(0, 5.0), (1, 8.0)]);
        let (out, report) = dasymetric_rescale(&pop, &map, &census).unwrap();
        assert_eq!(&out.values()[..2], &[0.0, 0.0]);
        assert_eq!(&out.values()[2..], &[6.0, 2.0]);
        assert_eq!(report.unallocated, 5.0);
        assert_eq!(report.zero_sum_regions, vec![0]);
        assert_eq!(report.adjusted_sums[&0], 0.0);
    }

    #[test]
    fn missing_census_entry_errors() {
        let pop = pop_grid(2, 1, vec![1.0, 1.0]);
        let map = map_of(2, 1, vec![0, 3]);
        let census = table(&[(0, 1.0)]);
        assert!(matches!(
            dasymetric_rescale(&pop, &map, &census),
            Err(Error::MissingCensusEntry(3))
        ));
    }

    #[test]
    fn rescaling_preserves_ranking() {
        let pop = pop_grid(4, 1, vec![0.5, 3.0, 1.0, 2.0]);
        let map = map_of(4, 1, vec![0, 0, 0, 0]);
        let census = table(&[(0, 100.0)]);
        let (out, _) = dasymetric_rescale(&pop, &map, &census).unwrap();
        let v = out.values();
        assert!(v[0] < v[2] && v[2] < v[3] && v[3] < v[1]);
    }

    #[test]
    fn idempotent_bitwise_on_dyadic_case() {
        // Values and counts exactly representable: second pass factors
        // are exactly 1 and the raster is bit-identical.
        let pop = pop_grid(2, 1, vec![1.0, 3.0]);
        let map = map_of(2, 1, vec![0, 0]);
        let census = table(&[(0, 8.0)]);
        let (once, _) = dasymetric_rescale(&pop, &map, &census).unwrap();
        let (twice, report) = dasymetric_rescale(&once, &map, &census).unwrap();
        assert_eq!(once.values(), twice.values());
        assert_eq!(report.factors[0].factor, 1.0);
    }

    #[test]
    fn idempotent_within_storage_precision() {
        // After the first pass the raster is quantized to f32, so the
        // second pass can move values by at most that quantization.
        let values: Vec<f32> = (0..24).map(|i| 0.1 + (i as f32) * 0.37).collect();
        let indices: Vec<u32> = (0..24).map(|i| (i % 3) as u32).collect();
        let pop = pop_grid(6, 4, values);
        let map = map_of(6, 4, indices);
        let census = table(&[(0, 13.7), (1, 2.1), (2, 55.0)]);
        let (once, _) = dasymetric_rescale(&pop, &map, &census).unwrap();
        let (twice, _) = dasymetric_rescale(&once, &map, &census).unwrap();
        for (a, b) in once.values().iter().zip(twice.values()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn mass_conserved_in_double_precision() {
        let values: Vec<f32> = (0..60).map(|i| ((i * 37 % 11) as f32) * 0.71).collect();
        let indices: Vec<u32> = (0..60).map(|i| (i / 12) as u32).collect();
        let pop = pop_grid(10, 6, values);
        let map = map_of(10, 6, indices);
        let census = table(&[(0, 9.5), (1, 22.0), (2, 7.25), (3, 101.0), (4, 0.5)]);
        let (_, report) = dasymetric_rescale(&pop, &map, &census).unwrap();
        for f in &report.factors {
            let adj = report.adjusted_sums[&f.region_id];
            assert!((adj - f.census).abs() / f.census.max(1.0) < 1e-9);
        }
    }

    #[test]
    fn quantiles_match_sort_oracle() {
        let mut state = 17u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) * 3.0 + 0.1
        };
        let values: Vec<f32> = (0..48).map(|_| next() as f32).collect();
        let indices: Vec<u32> = (0..48).map(|i| (i % 12) as u32).collect();
        let pop = pop_grid(8, 6, values);
        let map = map_of(8, 6, indices);
        let census = table(&(0u32..12).map(|i| (i, next() * 10.0)).collect::<Vec<_>>());
        let report = scale_factors(&pop, &map, &census).unwrap();
        let mut sorted: Vec<f64> = report.factors.iter().map(|f| f.factor).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(report.p10, quantile(&sorted, 0.1));
        assert_eq!(report.median, quantile(&sorted, 0.5));
        assert_eq!(report.p90, quantile(&sorted, 0.9));
        assert!(report.p10 <= report.median && report.median <= report.p90);
    }

    #[test]
    fn scale_factors_leave_map_untouched() {
        let pop = pop_grid(2, 1, vec![1.0, 3.0]);
        let map = map_of(2, 1, vec![0, 0]);
        let census = table(&[(0, 8.0)]);
        let report = scale_factors(&pop, &map, &census).unwrap();
        assert_eq!(report.factors[0].factor, 2.0);
        assert_eq!(report.national_estimate, 4.0);
        assert_eq!(report.national_census, 8.0);
    }

    #[test]
    fn factors_csv_shape() {
        let pop = pop_grid(2, 1, vec![1.0, 3.0]);
        let map = map_of(2, 1, vec![0, 0]);
        let census = table(&[(0, 8.0)]);
        let report = scale_factors(&pop, &map, &census).unwrap();
        let csv = factors_to_csv(&report);
        assert_eq!(csv, "region_id,predicted_sum,census,factor\n0,4,8,2\n");
    }
}
