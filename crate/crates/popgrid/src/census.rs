//! Census tables, zonal aggregation, and the dataset-difficulty score
//! that drives the weight-decay heuristic.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::grid::Grid;
use crate::regions::{RegionMap, NODATA};
use crate::{Error, Result};

/// Region id to nonnegative population count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusTable {
    pub entries: BTreeMap<u32, f64>,
    pub label: String,
}

impl CensusTable {
    pub fn new(entries: BTreeMap<u32, f64>, label: impl Into<String>) -> Result<Self> {
        for (&id, &count) in &entries {
            if count < 0.0 {
                return Err(Error::NegativeCount { region_id: id, count });
            }
        }
        Ok(CensusTable { entries, label: label.into() })
    }

    pub fn total(&self) -> f64 {
        self.entries.values().sum()
    }

    pub fn get(&self, id: u32) -> Option<f64> {
        self.entries.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Zonal sums of a single-band grid, with the set of regions that had
/// no valid cell flagged explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct ZonalSums {
    pub sums: BTreeMap<u32, f64>,
    pub empty_regions: BTreeSet<u32>,
}

/// Sum the valid cells of `grid` (band 0) within each region of `map`.
/// Regions whose cells are all invalid report 0 and are flagged.
pub fn zonal_sum(grid: &Grid, map: &RegionMap) -> Result<ZonalSums> {
    if !grid.aligned_with(map.width(), map.height(), &map.transform()) {
        return Err(Error::Misaligned("grid and region map differ in dims or transform".into()));
    }
    let values = grid.band_values(0);
    let mask = grid.band_valid(0);
    let mut sums: BTreeMap<u32, f64> = BTreeMap::new();
    let mut touched: BTreeSet<u32> = BTreeSet::new();
    for (i, &id) in map.indices().iter().enumerate() {
        if id == NODATA {
            continue;
        }
        let entry = sums.entry(id).or_insert(0.0);
        if mask[i] {
            *entry += values[i] as f64;
            touched.insert(id);
        }
    }
    let empty_regions = sums.keys().filter(|id| !touched.contains(id)).copied().collect();
    Ok(ZonalSums { sums, empty_regions })
}

/// Upscaling factor, region count, and their ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetDifficulty {
    /// Mean region area divided by target cell area.
    pub upscaling: f64,
    pub n_regions: usize,
    /// upscaling / n_regions.
    pub difficulty: f64,
}

/// Difficulty of disaggregating censuses of the given granularity onto
/// cells of the given area.
pub fn difficulty(
    avg_region_area: f64,
    cell_area: f64,
    n_regions: usize,
) -> Result<DatasetDifficulty> {
    if avg_region_area <= 0.0 || cell_area <= 0.0 {
        return Err(Error::NonPositive("region and cell areas must be positive".into()));
    }
    if n_regions < 1 {
        return Err(Error::NonPositive("n_regions must be at least 1".into()));
    }
    let upscaling = avg_region_area / cell_area;
    Ok(DatasetDifficulty {
        upscaling,
        n_regions,
        difficulty: upscaling / n_regions as f64,
    })
}

/// Parse a `region_id,count` CSV (UTF-8, LF line endings).
pub fn parse_census_csv(text: &str, label: impl Into<String>) -> Result<CensusTable> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "region_id,count" => {}
        other => {
            return Err(Error::MalformedRow {
                line: 1,
                message: format!(
                    "expected header \"region_id,count\", found {:?}",
                    other.map(|(_, l)| l).unwrap_or("")
                ),
            })
        }
    }
    let mut entries = BTreeMap::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, ',');
        let id_str = parts.next().unwrap_or("");
        let count_str = parts.next().ok_or(Error::MalformedRow {
            line: line_no,
            message: "missing count column".into(),
        })?;
        let id: u32 = id_str.trim().parse().map_err(|_| Error::MalformedRow {
            line: line_no,
            message: format!("region_id {id_str:?} is not a u32"),
        })?;
        let count: f64 = count_str.trim().parse().map_err(|_| Error::MalformedRow {
            line: line_no,
            message: format!("count {count_str:?} is not a number"),
        })?;
        if count < 0.0 {
            return Err(Error::NegativeCount { region_id: id, count });
        }
        if entries.insert(id, count).is_some() {
            return Err(Error::DuplicateRegionId(id));
        }
    }
    CensusTable::new(entries, label)
}

/// Load a census CSV from disk; the file stem becomes the label.
pub fn load_census_csv(path: &Path) -> Result<CensusTable> {
    let text = std::fs::read_to_string(path)?;
    let label = path.file_stem().and_then(|s| s.to_str()).unwrap_or("census").to_string();
    parse_census_csv(&text, label)
}

/// Serialize a census table as `region_id,count` CSV.
pub fn census_to_csv(table: &CensusTable) -> String {
    let mut out = String::from("region_id,count\n");
    for (id, count) in &table.entries {
        out.push_str(&format!("{id},{count}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FeatureGroup, Transform};

    fn grid_1band(w: usize, h: usize, values: Vec<f32>, valid: Vec<bool>) -> Grid {
        Grid::from_parts(
            w,
            h,
            Transform::new(0.0, 0.0, 1.0, 1.0),
            vec!["pop".into()],
            vec![FeatureGroup::Aux],
            values,
            valid,
        )
        .unwrap()
    }

    fn map_of(w: usize, h: usize, indices: Vec<u32>) -> RegionMap {
        RegionMap::from_indices(w, h, Transform::new(0.0, 0.0, 1.0, 1.0), indices).unwrap()
    }

    #[test]
    fn zonal_sum_small_case() {
        let g = grid_1band(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![true; 4]);
        let m = map_of(2, 2, vec![0, 0, 1, 1]);
        let z = zonal_sum(&g, &m).unwrap();
        assert_eq!(z.sums[&0], 3.0);
        assert_eq!(z.sums[&1], 7.0);
        assert!(z.empty_regions.is_empty());
    }

    #[test]
    fn zonal_sum_all_invalid_flags_empty() {
        let g = grid_1band(2, 1, vec![5.0, 6.0], vec![false, false]);
        let m = map_of(2, 1, vec![3, 9]);
        let z = zonal_sum(&g, &m).unwrap();
        assert_eq!(z.sums[&3], 0.0);
        assert_eq!(z.sums[&9], 0.0);
        assert!(z.empty_regions.contains(&3));
        assert!(z.empty_regions.contains(&9));
    }

    #[test]
    fn zonal_sum_matches_brute_force() {
        let mut state = 7u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        let n = 64 * 64;
        let values: Vec<f32> = (0..n).map(|_| (next() * 20.0 - 5.0) as f32).collect();
        let valid: Vec<bool> = (0..n).map(|_| next() > 0.15).collect();
        let indices: Vec<u32> = (0..n).map(|_| (next() * 5.0) as u32).collect();
        let g = grid_1band(64, 64, values.clone(), valid.clone());
        let m = map_of(64, 64, indices.clone());
        let z = zonal_sum(&g, &m).unwrap();
        for region in 0u32..5 {
            let mut expect = 0.0f64;
            for i in 0..n {
                if indices[i] == region && valid[i] {
                    expect += values[i] as f64;
                }
            }
            assert!((z.sums[&region] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn zonal_sum_partition_additivity() {
        let values: Vec<f32> = (0..36).map(|i| i as f32 * 0.5).collect();
        let valid: Vec<bool> = (0..36).map(|i| i % 5 != 0).collect();
        let indices: Vec<u32> = (0..36).map(|i| (i % 3) as u32).collect();
        let g = grid_1band(6, 6, values, valid);
        let m = map_of(6, 6, indices);
        let z = zonal_sum(&g, &m).unwrap();
        let by_regions: f64 = z.sums.values().sum();
        let global = g.valid_sum(0);
        assert!((by_regions - global).abs() <= 1e-12 * global.abs().max(1.0));
        // Trivial one-region map equals the global sum.
        let one = map_of(6, 6, vec![0; 36]);
        let z1 = zonal_sum(&g, &one).unwrap();
        assert_eq!(z1.sums[&0], global);
    }

    #[test]
    fn zonal_sum_rejects_misaligned() {
        let g = grid_1band(2, 2, vec![0.0; 4], vec![true; 4]);
        let m = map_of(2, 1, vec![0, 0]);
        assert!(matches!(zonal_sum(&g, &m), Err(Error::Misaligned(_))));
    }

    #[test]
    fn difficulty_reference_values() {
        // Upscaling factors are expressed in target cells per region.
        let rwanda = difficulty(83.0 * 83.0, 1.0, 381).unwrap();
        assert!((rwanda.difficulty - 18.08).abs() < 0.01);
        let switzerland = difficulty(42.0 * 42.0, 1.0, 2318).unwrap();
        assert!((switzerland.difficulty - 0.761).abs() < 0.001);
        let s_eq_n = difficulty(50.0, 1.0, 50).unwrap();
        assert_eq!(s_eq_n.difficulty, 1.0);
    }

    #[test]
    fn difficulty_rejects_nonpositive() {
        assert!(difficulty(0.0, 1.0, 3).is_err());
        assert!(difficulty(1.0, -2.0, 3).is_err());
        assert!(difficulty(1.0, 1.0, 0).is_err());
    }

    #[test]
    fn census_csv_round_trip() {
        let t = parse_census_csv("region_id,count\n3,10.5\n", "t").unwrap();
        assert_eq!(t.entries[&3], 10.5);
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn census_csv_rejects_negative_count() {
        let err = parse_census_csv("region_id,count\n3,-1\n", "t");
        assert!(matches!(err, Err(Error::NegativeCount { region_id: 3, .. })));
    }

    #[test]
    fn census_csv_rejects_duplicate_id() {
        let err = parse_census_csv("region_id,count\n3,1\n3,2\n", "t");
        assert!(matches!(err, Err(Error::DuplicateRegionId(3))));
    }

    #[test]
    fn census_csv_rejects_malformed_rows() {
        assert!(matches!(
            parse_census_csv("region_id,count\nfoo,1\n", "t"),
            Err(Error::MalformedRow { line: 2, .. })
        ));
        assert!(matches!(
            parse_census_csv("region_id,count\n7\n", "t"),
            Err(Error::MalformedRow { line: 2, .. })
        ));
        assert!(matches!(
            parse_census_csv("bad header\n", "t"),
            Err(Error::MalformedRow { line: 1, .. })
        ));
    }
}
