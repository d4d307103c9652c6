//! Bagged prediction: average the population maps of independently
//! seeded model members applied to each seasonal composite. Summation
//! runs in a fixed order (member id, then composite position) so bag
//! output is bit-reproducible no matter how the manifest lists its
//! members.

use serde::{Deserialize, Serialize};

use crate::grid::{FeatureGroup, Grid, GridStack};
use crate::predictor::{population_forward, PredictorParams};
use crate::{Error, Result};

/// Which (member x composite) estimates enter the average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BagMode {
    /// One member on one composite.
    Single,
    /// The first member (by id) on every composite.
    SeasonsOnly,
    /// Every member on the first composite.
    MembersOnly,
    /// Every member on every composite.
    Full,
}

/// One ensemble member: a stable id (usually the params file stem) and
/// its parameters.
#[derive(Debug, Clone)]
pub struct BagMember {
    pub id: String,
    pub params: PredictorParams,
}

/// The ensemble: members plus the seasonal composites they see.
#[derive(Debug)]
pub struct Bag {
    pub members: Vec<BagMember>,
    pub composites: GridStack,
    pub mode: BagMode,
}

/// On-disk description of a bag: params paths, composite labels, mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BagManifest {
    pub members: Vec<String>,
    pub composites: Vec<String>,
    pub mode: BagMode,
}

impl Bag {
    pub fn new(members: Vec<BagMember>, composites: GridStack, mode: BagMode) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptySelection);
        }
        if composites.is_empty() {
            return Err(Error::EmptyStack);
        }
        Ok(Bag { members, composites, mode })
    }

    /// Member indices sorted by id, then composite indices, selected
    /// per mode.
    fn selection(&self) -> Vec<(usize, usize)> {
        let mut member_order: Vec<usize> = (0..self.members.len()).collect();
        member_order.sort_by(|&a, &b| self.members[a].id.cmp(&self.members[b].id));
        let composites: Vec<usize> = (0..self.composites.len()).collect();
        match self.mode {
            BagMode::Single => vec![(member_order[0], composites[0])],
            BagMode::SeasonsOnly => {
                composites.iter().map(|&c| (member_order[0], c)).collect()
            }
            BagMode::MembersOnly => {
                member_order.iter().map(|&m| (m, composites[0])).collect()
            }
            BagMode::Full => member_order
                .iter()
                .flat_map(|&m| composites.iter().map(move |&c| (m, c)))
                .collect(),
        }
    }
}

/// Mean over the selected estimates. Output bands: `population`,
/// `builtup`, `occupancy` (all means; the diagnostic bands are
/// non-physical composites), and `population_std`, the member spread.
/// Returns the grid together with the number of averaged estimates.
pub fn bag_predict(bag: &Bag) -> Result<(Grid, usize)> {
    let selection = bag.selection();
    if selection.is_empty() {
        return Err(Error::EmptySelection);
    }
    let first = &bag.composites.members()[0];
    let (w, h) = (first.width(), first.height());
    let n = w * h;

    let mut sum_pop = vec![0.0f64; n];
    let mut sum_sq_pop = vec![0.0f64; n];
    let mut sum_builtup = vec![0.0f64; n];
    let mut sum_occ = vec![0.0f64; n];
    let mut all_valid = vec![true; n];

    for &(m, c) in &selection {
        let pred = population_forward(
            &bag.composites.members()[c],
            &bag.members[m].params,
        )?;
        let pop = pred.band_values(0);
        let bu = pred.band_values(1);
        let occ = pred.band_values(2);
        let mask = pred.band_valid(0);
        for i in 0..n {
            if !mask[i] {
                all_valid[i] = false;
                continue;
            }
            let p = pop[i] as f64;
            sum_pop[i] += p;
            sum_sq_pop[i] += p * p;
            sum_builtup[i] += bu[i] as f64;
            sum_occ[i] += occ[i] as f64;
        }
    }

    let k = selection.len() as f64;
    let mut values = vec![0.0f32; 4 * n];
    let mut valid = vec![false; 4 * n];
    for i in 0..n {
        if !all_valid[i] {
            continue;
        }
        let mean = sum_pop[i] / k;
        let var = (sum_sq_pop[i] / k - mean * mean).max(0.0);
        values[i] = mean as f32;
        values[n + i] = (sum_builtup[i] / k) as f32;
        values[2 * n + i] = (sum_occ[i] / k) as f32;
        values[3 * n + i] = var.sqrt() as f32;
        valid[i] = true;
        valid[n + i] = true;
        valid[2 * n + i] = true;
        valid[3 * n + i] = true;
    }
    let grid = Grid::from_parts(
        w,
        h,
        first.transform(),
        vec![
            "population".into(),
            "builtup".into(),
            "occupancy".into(),
            "population_std".into(),
        ],
        vec![FeatureGroup::Aux; 4],
        values,
        valid,
    )?;
    Ok((grid, selection.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Transform;
    use crate::predictor::{
        init_branch, FeatureConfig, HeadKind, Provenance, Variant,
    };

    fn test_stack(n_members: usize, seed_offset: u64) -> GridStack {
        let (w, h) = (6, 5);
        let mut members = Vec::new();
        for m in 0..n_members {
            let values: Vec<f32> = (0..w * h)
                .map(|i| ((i as u64 + seed_offset + m as u64 * 13) % 17) as f32 / 17.0)
                .collect();
            members.push(
                Grid::from_parts(
                    w,
                    h,
                    Transform::new(0.0, 0.0, 10.0, 10.0),
                    vec!["s".into()],
                    vec![FeatureGroup::S1],
                    values,
                    vec![true; w * h],
                )
                .unwrap(),
            );
        }
        let labels = (0..n_members).map(|i| format!("season{i}")).collect();
        GridStack::new(members, labels).unwrap()
    }

    fn member(id: &str, seed: u64) -> BagMember {
        let config = FeatureConfig::new(0, &[FeatureGroup::S1]).unwrap();
        BagMember {
            id: id.to_string(),
            params: PredictorParams {
                variant: Variant::Direct,
                builtup: None,
                occupancy: init_branch(1, &[6, 5], HeadKind::Softplus, seed, false),
                external_weight_band: None,
                feature_config: config,
                provenance: Provenance::default(),
            },
        }
    }

    #[test]
    fn estimate_counts_per_mode() {
        let stack = test_stack(4, 0);
        let members: Vec<BagMember> =
            (0..5).map(|i| member(&format!("m{i}"), i as u64)).collect();
        for (mode, expect) in [
            (BagMode::Single, 1usize),
            (BagMode::SeasonsOnly, 4),
            (BagMode::MembersOnly, 5),
            (BagMode::Full, 20),
        ] {
            let bag = Bag::new(members.clone(), stack.clone(), mode).unwrap();
            let (_, count) = bag_predict(&bag).unwrap();
            assert_eq!(count, expect, "{mode:?}");
        }
    }

    #[test]
    fn single_matches_population_forward() {
        let stack = test_stack(1, 3);
        let m = member("only", 9);
        let direct = population_forward(&stack.members()[0], &m.params).unwrap();
        let bag = Bag::new(vec![m], stack, BagMode::Single).unwrap();
        let (out, count) = bag_predict(&bag).unwrap();
        assert_eq!(count, 1);
        assert_eq!(out.band_values(0), direct.band_values(0));
        // Spread of a single estimate is zero.
        assert!(out.band_values(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_members_match_seasons_only() {
        let stack = test_stack(3, 1);
        let shared = member("a", 5);
        let mut clone_b = shared.clone();
        clone_b.id = "b".into();
        let full = Bag::new(
            vec![shared.clone(), clone_b],
            stack.clone(),
            BagMode::Full,
        )
        .unwrap();
        let seasons = Bag::new(vec![shared], stack, BagMode::SeasonsOnly).unwrap();
        let (full_out, _) = bag_predict(&full).unwrap();
        let (seasons_out, _) = bag_predict(&seasons).unwrap();
        for (a, b) in full_out.band_values(0).iter().zip(seasons_out.band_values(0)) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn mean_lies_within_member_envelope() {
        let stack = test_stack(2, 7);
        let members: Vec<BagMember> =
            (0..3).map(|i| member(&format!("m{i}"), 40 + i as u64)).collect();
        let bag = Bag::new(members.clone(), stack.clone(), BagMode::Full).unwrap();
        let (out, _) = bag_predict(&bag).unwrap();
        // Envelope per pixel over all (member, composite) estimates.
        let mut lo = vec![f64::INFINITY; 30];
        let mut hi = vec![f64::NEG_INFINITY; 30];
        for m in &members {
            for c in stack.members() {
                let pred = population_forward(c, &m.params).unwrap();
                for (i, &v) in pred.band_values(0).iter().enumerate() {
                    lo[i] = lo[i].min(v as f64);
                    hi[i] = hi[i].max(v as f64);
                }
            }
        }
        for (i, &v) in out.band_values(0).iter().enumerate() {
            // f32 rounding of the mean can graze the envelope edge.
            assert!(v as f64 >= lo[i] - 1e-6 && v as f64 <= hi[i] + 1e-6);
        }
    }

    #[test]
    fn permutation_invariant_with_sorted_reduction() {
        let stack = test_stack(3, 2);
        let a = member("alpha", 1);
        let b = member("beta", 2);
        let c = member("gamma", 3);
        let fwd = Bag::new(
            vec![a.clone(), b.clone(), c.clone()],
            stack.clone(),
            BagMode::Full,
        )
        .unwrap();
        let rev = Bag::new(vec![c, b, a], stack, BagMode::Full).unwrap();
        let (x, _) = bag_predict(&fwd).unwrap();
        let (y, _) = bag_predict(&rev).unwrap();
        let bits = |g: &Grid| g.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x), bits(&y));
    }

    #[test]
    fn jensen_mse_inequality() {
        let stack = test_stack(4, 11);
        let members: Vec<BagMember> =
            (0..5).map(|i| member(&format!("m{i}"), 60 + i as u64)).collect();
        let bag = Bag::new(members.clone(), stack.clone(), BagMode::Full).unwrap();
        let (out, count) = bag_predict(&bag).unwrap();
        assert_eq!(count, 20);
        // Arbitrary truth raster.
        let truth: Vec<f64> = (0..30).map(|i| ((i * 7) % 5) as f64 * 0.3).collect();
        let mse = |pred: &[f64]| -> f64 {
            pred.iter()
                .zip(&truth)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / truth.len() as f64
        };
        let mut member_mse_sum = 0.0;
        let mut n_estimates = 0usize;
        for m in &members {
            for c in stack.members() {
                let pred = population_forward(c, &m.params).unwrap();
                let p: Vec<f64> = pred.band_values(0).iter().map(|&v| v as f64).collect();
                member_mse_sum += mse(&p);
                n_estimates += 1;
            }
        }
        let bag_mse = mse(&out.band_values(0).iter().map(|&v| v as f64).collect::<Vec<_>>());
        assert!(bag_mse <= member_mse_sum / n_estimates as f64 + 1e-9);
    }

    #[test]
    fn empty_bag_is_rejected() {
        let stack = test_stack(1, 0);
        assert!(matches!(
            Bag::new(vec![], stack, BagMode::Full),
            Err(Error::EmptySelection)
        ));
    }

    #[test]
    fn manifest_round_trips() {
        let manifest = BagManifest {
            members: vec!["m0.json".into(), "m1.json".into()],
            composites: vec!["spring".into(), "summer".into()],
            mode: BagMode::Full,
        };
        let json = serde_json::to_string(&manifest).unwrap();
        let back: BagManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back.members, manifest.members);
        assert_eq!(back.mode, BagMode::Full);
    }
}
