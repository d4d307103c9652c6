//! Evaluation metrics (R2, MAE, RMSE) and the grid-vs-grid and
//! grid-vs-blocks evaluation drivers, plus scatter export for log-log
//! plots.

use serde::{Deserialize, Serialize};

use crate::census::{zonal_sum, CensusTable};
use crate::grid::{block_aggregate, Grid};
use crate::regions::RegionMap;
use crate::{Error, Result};

/// Metric bundle over one evaluation unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r2: f64,
    pub mae: f64,
    pub rmse: f64,
    pub n: usize,
    pub unit: String,
}

/// R2 = 1 - SSres/SStot (population variance, plain sums), MAE, RMSE.
pub fn metrics(truth: &[f64], pred: &[f64], unit: impl Into<String>) -> Result<EvalReport> {
    if truth.len() != pred.len() {
        return Err(Error::LengthMismatch { truth: truth.len(), pred: pred.len() });
    }
    let n = truth.len();
    if n < 2 {
        return Err(Error::ZeroVariance);
    }
    let mean = truth.iter().sum::<f64>() / n as f64;
    let mut ss_tot = 0.0f64;
    let mut ss_res = 0.0f64;
    let mut abs_sum = 0.0f64;
    for i in 0..n {
        let d_tot = truth[i] - mean;
        ss_tot += d_tot * d_tot;
        let d = truth[i] - pred[i];
        ss_res += d * d;
        abs_sum += d.abs();
    }
    if ss_tot == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(EvalReport {
        r2: 1.0 - ss_res / ss_tot,
        mae: abs_sum / n as f64,
        rmse: (ss_res / n as f64).sqrt(),
        n,
        unit: unit.into(),
    })
}

/// Block-aggregate both rasters by `factor`, then run [`metrics`] over
/// the jointly valid cells of band 0.
pub fn evaluate_grid(pred: &Grid, truth: &Grid, aggregate_factor: usize) -> Result<EvalReport> {
    if !pred.aligned_with(truth.width(), truth.height(), &truth.transform()) {
        return Err(Error::Misaligned("prediction and truth differ in dims or transform".into()));
    }
    let pred_agg = block_aggregate(pred, aggregate_factor)?;
    let truth_agg = block_aggregate(truth, aggregate_factor)?;
    let n = pred_agg.width() * pred_agg.height();
    let mut t = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    let pv = pred_agg.band_values(0);
    let pm = pred_agg.band_valid(0);
    let tv = truth_agg.band_values(0);
    let tm = truth_agg.band_valid(0);
    for i in 0..n {
        if pm[i] && tm[i] {
            p.push(pv[i] as f64);
            t.push(tv[i] as f64);
        }
    }
    if t.is_empty() {
        return Err(Error::NoJointlyValidCells);
    }
    let cell = truth_agg.transform().pixel_area();
    metrics(&t, &p, format!("{cell} map-unit^2 cell"))
}

/// Zonal-sum predictions per block, compare against the truth counts.
pub fn evaluate_blocks(
    pred: &Grid,
    blocks: &RegionMap,
    truth_table: &CensusTable,
) -> Result<EvalReport> {
    let sums = zonal_sum(pred, blocks)?;
    let mut t = Vec::with_capacity(sums.sums.len());
    let mut p = Vec::with_capacity(sums.sums.len());
    for (id, sum) in &sums.sums {
        let truth = truth_table.get(*id).ok_or(Error::MissingCensusEntry(*id))?;
        t.push(truth);
        p.push(*sum);
    }
    metrics(&t, &p, "census block")
}

/// CSV of (truth, pred) pairs. With a positive floor, values below it
/// collapse into the floor bin so log-log scatter plots stay bounded;
/// a zero floor passes the data through unchanged.
pub fn scatter_export(truth: &[f64], pred: &[f64], floor: f64) -> Result<String> {
    if truth.len() != pred.len() {
        return Err(Error::LengthMismatch { truth: truth.len(), pred: pred.len() });
    }
    let bin = |v: f64| if floor > 0.0 && v < floor { floor } else { v };
    let mut out = String::from("truth,pred\n");
    for (t, p) in truth.iter().zip(pred) {
        out.push_str(&format!("{},{}\n", bin(*t), bin(*p)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FeatureGroup, Transform};

    #[test]
    fn identity_prediction() {
        let truth = vec![1.0, 2.0, 3.0];
        let r = metrics(&truth, &truth, "u").unwrap();
        assert_eq!(r.r2, 1.0);
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.n, 3);
    }

    #[test]
    fn constant_mean_prediction_scores_zero() {
        let truth = vec![0.0, 2.0, 4.0];
        let pred = vec![2.0, 2.0, 2.0];
        let r = metrics(&truth, &pred, "u").unwrap();
        assert_eq!(r.r2, 0.0);
    }

    #[test]
    fn hand_case() {
        let truth = vec![0.0, 2.0, 4.0];
        let pred = vec![1.0, 2.0, 3.0];
        let r = metrics(&truth, &pred, "u").unwrap();
        assert_eq!(r.r2, 0.75);
        assert!((r.mae - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.rmse - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn error_paths() {
        assert!(matches!(
            metrics(&[1.0, 2.0], &[1.0], "u"),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(metrics(&[1.0], &[1.0], "u"), Err(Error::ZeroVariance)));
        assert!(matches!(
            metrics(&[3.0, 3.0, 3.0], &[1.0, 2.0, 3.0], "u"),
            Err(Error::ZeroVariance)
        ));
    }

    #[test]
    fn mae_bounded_by_rmse() {
        let mut state = 99u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        for _ in 0..50 {
            let truth: Vec<f64> = (0..37).map(|_| next() * 100.0 - 50.0).collect();
            let pred: Vec<f64> = (0..37).map(|_| next() * 100.0 - 50.0).collect();
            let r = metrics(&truth, &pred, "u").unwrap();
            assert!(r.mae <= r.rmse);
        }
    }

    #[test]
    fn translation_leaves_errors_unchanged() {
        let truth = vec![1.0, 5.0, 2.0, 8.0];
        let pred = vec![1.5, 4.0, 2.5, 9.0];
        let a = metrics(&truth, &pred, "u").unwrap();
        let shifted_t: Vec<f64> = truth.iter().map(|v| v + 100.0).collect();
        let shifted_p: Vec<f64> = pred.iter().map(|v| v + 100.0).collect();
        let b = metrics(&shifted_t, &shifted_p, "u").unwrap();
        assert!((a.mae - b.mae).abs() < 1e-12);
        assert!((a.rmse - b.rmse).abs() < 1e-12);
    }

    fn grid_of(w: usize, h: usize, values: Vec<f32>, valid: Vec<bool>) -> Grid {
        Grid::from_parts(
            w,
            h,
            Transform::new(0.0, 0.0, 10.0, 10.0),
            vec!["population".into()],
            vec![FeatureGroup::Aux],
            values,
            valid,
        )
        .unwrap()
    }

    #[test]
    fn grid_identity_any_factor() {
        let values: Vec<f32> = (0..64).map(|i| i as f32).collect();
        let g = grid_of(8, 8, values, vec![true; 64]);
        for factor in [1usize, 2, 4] {
            let r = evaluate_grid(&g, &g, factor).unwrap();
            assert_eq!(r.r2, 1.0, "factor {factor}");
        }
    }

    #[test]
    fn grid_matches_independent_block_loop() {
        let mut state = 3u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        let pred_v: Vec<f32> = (0..400).map(|_| (next() * 10.0) as f32).collect();
        let truth_v: Vec<f32> = (0..400).map(|_| (next() * 10.0) as f32).collect();
        let pred = grid_of(20, 20, pred_v.clone(), vec![true; 400]);
        let truth = grid_of(20, 20, truth_v.clone(), vec![true; 400]);
        let got = evaluate_grid(&pred, &truth, 10).unwrap();

        // Independent per-block loop with the same storage rule.
        let block = |v: &[f32], ox: usize, oy: usize| {
            let mut acc = 0.0f64;
            for dy in 0..10 {
                for dx in 0..10 {
                    acc += v[(oy * 10 + dy) * 20 + ox * 10 + dx] as f64;
                }
            }
            acc as f32 as f64
        };
        let mut t = Vec::new();
        let mut p = Vec::new();
        for oy in 0..2 {
            for ox in 0..2 {
                t.push(block(&truth_v, ox, oy));
                p.push(block(&pred_v, ox, oy));
            }
        }
        let want = metrics(&t, &p, "u").unwrap();
        assert!((got.r2 - want.r2).abs() < 1e-12);
        assert!((got.mae - want.mae).abs() < 1e-12);
        assert!((got.rmse - want.rmse).abs() < 1e-12);
    }

    #[test]
    fn grid_disjoint_masks_error() {
        let a = grid_of(2, 2, vec![1.0; 4], vec![true, true, false, false]);
        let b = grid_of(2, 2, vec![1.0; 4], vec![false, false, true, true]);
        assert!(matches!(evaluate_grid(&a, &b, 1), Err(Error::NoJointlyValidCells)));
    }

    #[test]
    fn blocks_exact_match_and_composition() {
        use std::collections::BTreeMap;
        let pred = grid_of(4, 1, vec![1.0, 2.0, 3.0, 4.0], vec![true; 4]);
        let blocks = RegionMap::from_indices(
            4,
            1,
            Transform::new(0.0, 0.0, 10.0, 10.0),
            vec![0, 0, 1, 1],
        )
        .unwrap();
        let mut entries = BTreeMap::new();
        entries.insert(0u32, 3.0);
        entries.insert(1u32, 7.0);
        let table = CensusTable::new(entries, "t").unwrap();
        let r = evaluate_blocks(&pred, &blocks, &table).unwrap();
        assert_eq!(r.r2, 1.0);
        assert_eq!(r.n, 2);

        // Compositional: equals metrics(zonal sums, truth).
        let sums = zonal_sum(&pred, &blocks).unwrap();
        let t: Vec<f64> = table.entries.values().copied().collect();
        let p: Vec<f64> = sums.sums.values().copied().collect();
        let direct = metrics(&t, &p, "census block").unwrap();
        assert_eq!(r, direct);
    }

    #[test]
    fn blocks_single_block_is_zero_variance() {
        use std::collections::BTreeMap;
        let pred = grid_of(2, 1, vec![1.0, 2.0], vec![true; 2]);
        let blocks =
            RegionMap::from_indices(2, 1, Transform::new(0.0, 0.0, 10.0, 10.0), vec![4, 4])
                .unwrap();
        let mut entries = BTreeMap::new();
        entries.insert(4u32, 3.0);
        let table = CensusTable::new(entries, "t").unwrap();
        assert!(matches!(
            evaluate_blocks(&pred, &blocks, &table),
            Err(Error::ZeroVariance)
        ));
    }

    #[test]
    fn blocks_missing_truth_errors() {
        use std::collections::BTreeMap;
        let pred = grid_of(2, 1, vec![1.0, 2.0], vec![true; 2]);
        let blocks =
            RegionMap::from_indices(2, 1, Transform::new(0.0, 0.0, 10.0, 10.0), vec![4, 5])
                .unwrap();
        let table = CensusTable::new(BTreeMap::new(), "t").unwrap();
        assert!(matches!(
            evaluate_blocks(&pred, &blocks, &table),
            Err(Error::MissingCensusEntry(4))
        ));
    }

    #[test]
    fn scatter_floor_binning() {
        let csv = scatter_export(&[0.2, 3.0], &[0.3, 4.0], 0.5).unwrap();
        assert_eq!(csv, "truth,pred\n0.5,0.5\n3,4\n");
        let raw = scatter_export(&[0.2, -1.0], &[0.3, 4.0], 0.0).unwrap();
        assert_eq!(raw, "truth,pred\n0.2,0.3\n-1,4\n");
        // Row count is preserved.
        assert_eq!(raw.lines().count(), 3);
    }
}
