//! Weak supervision from census aggregates: the log-L1 regional loss
//! with a sparsity regularizer, Adam with a stepped learning-rate
//! decay, region batching with seasonal sampling and photometric
//! jitter, and the architecture-ablation harness.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::census::CensusTable;
use crate::grid::{FeatureGroup, Grid, GridStack};
use crate::predictor::{
    backward, forward_pixels, softplus_inv, transfer_hidden, BranchGrads, PredictorParams,
    Variant,
};
use crate::regions::RegionMap;
use crate::{Error, Result};

/// Hyper-parameters for weak-supervision training. Serializes to JSON
/// so experiment definitions stay versionable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Regions per optimization step.
    pub batch_regions: usize,
    pub epochs: usize,
    /// Coupled L2 strength; see [`weight_decay_from_difficulty`].
    pub lambda_wd: f64,
    /// Apply weight decay after the Adam update instead of adding it
    /// to the gradient.
    pub decoupled_wd: bool,
    pub sparsity_weight: f64,
    pub seed: u64,
    /// Learning rate multiplier applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub brightness_sigma: f64,
    pub contrast_sigma: f64,
    /// Initialize occupancy hidden layers from the built-up branch.
    pub transfer_init: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_regions: 2,
            epochs: 0,
            lambda_wd: 0.0,
            decoupled_wd: false,
            sparsity_weight: 0.01,
            seed: 0,
            lr_decay: 0.75,
            lr_decay_every: 5,
            brightness_sigma: 0.1,
            contrast_sigma: 0.1,
            transfer_init: false,
        }
    }
}

/// First/second moment estimates for Adam.
#[derive(Debug, Clone)]
pub struct OptimState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimState {
    pub fn new(len: usize) -> Self {
        OptimState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn timestep(&self) -> usize {
        self.t as usize
    }

    /// One Adam update with bias correction. Weight decay is coupled
    /// (added to the gradient) unless `decoupled`.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        lambda_wd: f64,
        decoupled: bool,
    ) {
        assert_eq!(params.len(), self.m.len(), "optimizer state shape");
        assert_eq!(grads.len(), self.m.len(), "gradient shape");
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let mut g = grads[i];
            if !decoupled && lambda_wd != 0.0 {
                g += lambda_wd * params[i];
            }
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            if decoupled && lambda_wd != 0.0 {
                params[i] -= lr * lambda_wd * params[i];
            }
        }
    }
}

/// One Adam step shaped like the rest of the pipeline's operations.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimState,
    lr: f64,
    config: &TrainConfig,
) {
    state.step(
        params,
        grads,
        lr,
        config.beta1,
        config.beta2,
        config.epsilon,
        config.lambda_wd,
        config.decoupled_wd,
    );
}

/// Sum over regions of |log(1 + c_j) - log(1 + sum_j)|. The offset of 1
/// bounds the logarithms in regions with few or no inhabitants.
pub fn loss_log_l1(census: &CensusTable, region_sums: &BTreeMap<u32, f64>) -> Result<f64> {
    let mut loss = 0.0f64;
    for (&id, &count) in &census.entries {
        let sum = *region_sums.get(&id).ok_or(Error::MissingRegionSum(id))?;
        if sum < 0.0 {
            return Err(Error::NegativeRegionSum { region_id: id, sum });
        }
        loss += ((1.0 + count).ln() - (1.0 + sum).ln()).abs();
    }
    Ok(loss)
}

/// `weight` times the mean prediction over the batch's valid pixels.
pub fn sparsity_penalty(outputs: &[f64], weight: f64) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(weight * outputs.iter().sum::<f64>() / outputs.len() as f64)
}

/// Weight decay strength from the dataset difficulty score via the
/// heuristic 5 * lambda = D * 1e-6.
pub fn weight_decay_from_difficulty(difficulty: f64) -> Result<f64> {
    if difficulty <= 0.0 {
        return Err(Error::NonPositive(format!("difficulty {difficulty}")));
    }
    Ok(difficulty / 5e6)
}

/// Stepped decay: base_lr * decay^(epoch / every).
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.base_lr * config.lr_decay.powi((epoch / config.lr_decay_every) as i32)
}

/// One row of the loss history CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub log_l1: f64,
    pub sparsity: f64,
    pub lr: f64,
}

/// Loss history as `epoch,batch,loss,log_l1,sparsity,lr` CSV.
pub fn history_to_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("epoch,batch,loss,log_l1,sparsity,lr\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.batch, r.loss, r.log_l1, r.sparsity, r.lr
        ));
    }
    out
}

/// Total built-up mass over the usable region pixels of `grid`:
/// the denominator of the average-occupancy bias initialization.
fn builtup_mass(
    grid: &Grid,
    map: &RegionMap,
    params: &PredictorParams,
    region_pixels: &BTreeMap<u32, Vec<usize>>,
) -> Result<f64> {
    let _ = map;
    let mut mass = 0.0f64;
    for pixels in region_pixels.values() {
        let cache = forward_pixels(grid, params, pixels)?;
        for (w, _) in cache.weights.iter().zip(&cache.pixels) {
            mass += w;
        }
    }
    Ok(mass)
}

/// Prepare `params0` for training: optional hidden-weight transfer from
/// the built-up branch, then occupancy head bias set so that
/// softplus(bias) equals the country-wide average occupancy rate
/// (total census over total built-up mass on the first stack member).
pub fn initialize_for_training(
    params0: &PredictorParams,
    stack: &GridStack,
    map: &RegionMap,
    census: &CensusTable,
    config: &TrainConfig,
) -> Result<PredictorParams> {
    if stack.is_empty() {
        return Err(Error::EmptyStack);
    }
    let mut params = params0.clone();
    if config.transfer_init {
        let builtup = params.builtup.clone().ok_or_else(|| {
            Error::Config("transfer_init requires a built-up branch".into())
        })?;
        transfer_hidden(&builtup, &mut params.occupancy)?;
    }
    let grid = &stack.members()[0];
    if !grid.aligned_with(map.width(), map.height(), &map.transform()) {
        return Err(Error::Misaligned("inputs and region map differ".into()));
    }
    let region_pixels = census_region_pixels(map, census)?;
    let mass = builtup_mass(grid, map, &params, &region_pixels)?;
    if mass <= 0.0 {
        return Err(Error::Config(format!(
            "built-up mass {mass} cannot seed the occupancy bias"
        )));
    }
    let factor = census.total() / mass;
    if factor <= 0.0 {
        return Err(Error::Config(format!("average occupancy rate {factor} not positive")));
    }
    params.occupancy.head_bias = softplus_inv(factor);
    Ok(params)
}

/// Pixel lists per census region; errors when a census id is missing
/// from the map.
fn census_region_pixels(
    map: &RegionMap,
    census: &CensusTable,
) -> Result<BTreeMap<u32, Vec<usize>>> {
    let mut by_region = map.pixels_by_region();
    let mut out = BTreeMap::new();
    for &id in census.entries.keys() {
        match by_region.remove(&id) {
            Some(pixels) => {
                out.insert(id, pixels);
            }
            None => {
                return Err(Error::CensusRegionMismatch(format!(
                    "census region {id} not present in the region map"
                )))
            }
        }
    }
    Ok(out)
}

/// Train the occupancy (or direct) branch against census aggregates.
///
/// Epochs iterate the census regions in seed-shuffled order. Each batch
/// draws one stack member and a photometric jitter, runs the forward
/// pass, evaluates log-L1 plus the sparsity term, backpropagates, and
/// takes one Adam step at the scheduled learning rate. Zero epochs
/// return `params0` untouched.
pub fn train(
    stack: &GridStack,
    map: &RegionMap,
    census: &CensusTable,
    params0: &PredictorParams,
    config: &TrainConfig,
) -> Result<(PredictorParams, Vec<LossRecord>)> {
    if config.epochs == 0 {
        return Ok((params0.clone(), Vec::new()));
    }
    if config.batch_regions == 0 {
        return Err(Error::Config("batch_regions must be at least 1".into()));
    }
    if stack.is_empty() {
        return Err(Error::EmptyStack);
    }
    let region_pixels = census_region_pixels(map, census)?;
    let mut params = initialize_for_training(params0, stack, map, census, config)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut region_order: Vec<u32> = region_pixels.keys().copied().collect();
    let mut history = Vec::new();
    let mut opt = OptimState::new(params.occupancy.len());
    let imagery: Vec<bool> = stack.members()[0]
        .groups()
        .iter()
        .map(|g| *g != FeatureGroup::Aux)
        .collect();

    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        region_order.shuffle(&mut rng);
        for (batch_idx, batch) in region_order.chunks(config.batch_regions).enumerate() {
            let member = rng.gen_range(0..stack.len());
            let aug_seed = rng.gen::<u64>();
            let grid = crate::grid::photometric_augment_bands(
                &stack.members()[member],
                config.brightness_sigma,
                config.contrast_sigma,
                aug_seed,
                &imagery,
            );

            // Fixed reduction order regardless of batch shuffling.
            let mut ids: Vec<u32> = batch.to_vec();
            ids.sort_unstable();

            // Phase 1: forward each region (parallel, independent).
            let forwards: Vec<Result<(u32, crate::predictor::BatchCache, f64)>> = ids
                .par_iter()
                .map(|&id| {
                    let cache = forward_pixels(&grid, &params, &region_pixels[&id])?;
                    let sum: f64 = cache.population.iter().sum();
                    Ok((id, cache, sum))
                })
                .collect();
            let mut region_data = Vec::with_capacity(forwards.len());
            for f in forwards {
                region_data.push(f?);
            }

            let total_pixels: usize = region_data.iter().map(|(_, c, _)| c.pixels.len()).sum();
            if total_pixels == 0 {
                return Err(Error::EmptyBatch);
            }
            let population_total: f64 =
                region_data.iter().map(|(_, _, s)| *s).sum();
            let mut log_l1 = 0.0f64;
            let mut seeds_per_region = Vec::with_capacity(region_data.len());
            for (id, cache, sum) in &region_data {
                let count = census.get(*id).expect("validated census id");
                if *sum < 0.0 {
                    return Err(Error::NegativeRegionSum { region_id: *id, sum: *sum });
                }
                let gap = (1.0 + count).ln() - (1.0 + sum).ln();
                log_l1 += gap.abs();
                // d|gap|/d sum, with the subgradient at 0 taken as 0.
                let sign = if gap > 0.0 {
                    1.0
                } else if gap < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let region_seed = -sign / (1.0 + sum);
                let sparsity_seed = config.sparsity_weight / total_pixels as f64;
                seeds_per_region.push(vec![region_seed + sparsity_seed; cache.pixels.len()]);
            }
            let sparsity =
                config.sparsity_weight * population_total / total_pixels as f64;
            let objective = log_l1 + sparsity;
            if !objective.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_idx });
            }

            // Phase 2: backward per region (parallel), reduce in id order.
            let grads_list: Vec<Result<BranchGrads>> = region_data
                .par_iter()
                .zip(seeds_per_region.par_iter())
                .map(|((_, cache, _), seeds)| backward(&params, cache, seeds))
                .collect();
            let mut total_grads = BranchGrads::zeros_like(&params.occupancy);
            for g in grads_list {
                total_grads.add(&g?);
            }

            let mut flat = params.occupancy.to_flat();
            adam_step(&mut flat, &total_grads.to_flat(), &mut opt, lr, config);
            params.occupancy.set_from_flat(&flat);

            history.push(LossRecord {
                epoch,
                batch: batch_idx,
                loss: objective,
                log_l1,
                sparsity,
                lr,
            });
        }
    }
    params.provenance.seed = config.seed;
    params.provenance.epochs = config.epochs;
    params.provenance.dataset_label = census.label.clone();
    Ok((params, history))
}

// ---------------------------------------------------------------------------
// Architecture ablation harness
// ---------------------------------------------------------------------------

/// The four architecture-ablation cases: factored vs direct estimation,
/// crossed with initializing hidden weights from the built-up branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationCase {
    FactoredTransfer,
    DirectTransfer,
    FactoredScratch,
    DirectScratch,
}

impl AblationCase {
    pub const ALL: [AblationCase; 4] = [
        AblationCase::FactoredTransfer,
        AblationCase::DirectTransfer,
        AblationCase::FactoredScratch,
        AblationCase::DirectScratch,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AblationCase::FactoredTransfer => "factored+transfer",
            AblationCase::DirectTransfer => "direct+transfer",
            AblationCase::FactoredScratch => "factored+scratch",
            AblationCase::DirectScratch => "direct+scratch",
        }
    }

    pub fn factored(&self) -> bool {
        matches!(self, AblationCase::FactoredTransfer | AblationCase::FactoredScratch)
    }

    pub fn transfer(&self) -> bool {
        matches!(self, AblationCase::FactoredTransfer | AblationCase::DirectTransfer)
    }
}

/// One trained-and-evaluated ablation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRun {
    pub case: AblationCase,
    pub seed: u64,
    pub pixel_r2: f64,
    pub mae: f64,
    pub rmse: f64,
}

/// Train one ablation case at one seed and return its pixel-level
/// metrics against the truth raster.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_case(
    case: AblationCase,
    stack: &GridStack,
    map: &RegionMap,
    census: &CensusTable,
    truth: &Grid,
    builtup_branch: &crate::predictor::BranchParams,
    feature_config: &crate::predictor::FeatureConfig,
    base_config: &TrainConfig,
    seed: u64,
) -> Result<AblationRun> {
    use crate::predictor::{init_branch, HeadKind, Provenance};

    let grid = &stack.members()[0];
    let in_dim = feature_config.feature_len(grid);
    let hidden_dims: Vec<usize> =
        builtup_branch.hidden.iter().map(|l| l.out_dim).collect();
    let occupancy = init_branch(in_dim, &hidden_dims, HeadKind::Softplus, seed, true);
    let params0 = PredictorParams {
        variant: if case.factored() { Variant::Factored } else { Variant::Direct },
        builtup: if case.factored() { Some(builtup_branch.clone()) } else { None },
        occupancy,
        external_weight_band: None,
        feature_config: feature_config.clone(),
        provenance: Provenance::default(),
    };
    let mut config = base_config.clone();
    config.seed = seed;
    config.transfer_init = case.transfer();
    if config.transfer_init && !case.factored() {
        // Direct variant has no built-up branch to transfer from at
        // train time; copy the hidden weights here instead.
        let mut params0 = params0;
        let mut occ = params0.occupancy.clone();
        transfer_hidden(builtup_branch, &mut occ)?;
        params0.occupancy = occ;
        config.transfer_init = false;
        return finish_ablation_run(case, stack, map, census, truth, &params0, &config, seed);
    }
    finish_ablation_run(case, stack, map, census, truth, &params0, &config, seed)
}

#[allow(clippy::too_many_arguments)]
fn finish_ablation_run(
    case: AblationCase,
    stack: &GridStack,
    map: &RegionMap,
    census: &CensusTable,
    truth: &Grid,
    params0: &PredictorParams,
    config: &TrainConfig,
    seed: u64,
) -> Result<AblationRun> {
    let (trained, _) = train(stack, map, census, params0, config)?;
    let pred = crate::predictor::population_forward(&stack.members()[0], &trained)?;
    let report = crate::eval::evaluate_grid(&pred, truth, 1)?;
    Ok(AblationRun {
        case,
        seed,
        pixel_r2: report.r2,
        mae: report.mae,
        rmse: report.rmse,
    })
}

/// Median of a sample; linear interpolation between order statistics.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

// ---------------------------------------------------------------------------
// Experiment harnesses
// ---------------------------------------------------------------------------

/// Params for the external-weights setup: the exact built-up reference
/// band carries the weights, only the occupancy branch trains.
pub fn external_weights_params(
    stack: &GridStack,
    feature_config: &crate::predictor::FeatureConfig,
    hidden_dims: &[usize],
    seed: u64,
    weight_band: &str,
) -> Result<PredictorParams> {
    use crate::predictor::{init_branch, HeadKind, Provenance};
    if stack.is_empty() {
        return Err(Error::EmptyStack);
    }
    let grid = &stack.members()[0];
    grid.band_index(weight_band)?;
    let in_dim = feature_config.feature_len(grid);
    Ok(PredictorParams {
        variant: Variant::ExternalWeights,
        builtup: None,
        occupancy: init_branch(in_dim, hidden_dims, HeadKind::Softplus, seed, true),
        external_weight_band: Some(weight_band.to_string()),
        feature_config: feature_config.clone(),
        provenance: Provenance::default(),
    })
}

/// Weight decay from the world's granularity: mean region area over
/// the one-hectare-analog cell (a 10x10 pixel block).
pub fn lambda_for_region_count(map: &RegionMap) -> Result<f64> {
    let n_regions = map.ids().len();
    let pixel_area = map.transform().pixel_area();
    let avg_region_area =
        map.assigned_pixels() as f64 * pixel_area / n_regions as f64;
    let cell_area = 100.0 * pixel_area;
    let d = crate::census::difficulty(avg_region_area, cell_area, n_regions)?;
    weight_decay_from_difficulty(d.difficulty)
}

/// One rung of the scalability ladder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LadderRun {
    pub n_regions: usize,
    pub seed: u64,
    pub pixel_r2: f64,
    pub mae: f64,
    pub rmse: f64,
    pub lambda_wd: f64,
}

/// Coarsen the census along `rungs` and retrain at every rung and
/// seed, with the weight decay re-derived from each rung's difficulty.
/// Pixel-level metrics are measured against the truth raster.
pub fn run_scalability_ladder(
    world: &crate::synth::World,
    rungs: &[usize],
    seeds: &[u64],
    base_config: &TrainConfig,
    hidden_dims: &[usize],
) -> Result<Vec<LadderRun>> {
    let feature_config = crate::predictor::FeatureConfig::new(
        0,
        &[FeatureGroup::S1, FeatureGroup::S2],
    )?;
    let mut rows = Vec::new();
    for &target in rungs {
        let (map, census, _) =
            crate::synth::coarsen_census(&world.regions, &world.census, target)?;
        let lambda = lambda_for_region_count(&map)?;
        for &seed in seeds {
            let mut config = base_config.clone();
            config.seed = seed;
            config.lambda_wd = lambda;
            let params0 = external_weights_params(
                &world.inputs,
                &feature_config,
                hidden_dims,
                seed,
                crate::synth::BUILTUP_REF_BAND,
            )?;
            let (trained, _) = train(&world.inputs, &map, &census, &params0, &config)?;
            let pred =
                crate::predictor::population_forward(&world.inputs.members()[0], &trained)?;
            let report = crate::eval::evaluate_grid(&pred, &world.truth_population, 1)?;
            rows.push(LadderRun {
                n_regions: target,
                seed,
                pixel_r2: report.r2,
                mae: report.mae,
                rmse: report.rmse,
                lambda_wd: lambda,
            });
        }
    }
    Ok(rows)
}

/// Architecture-ablation report: per-run rows plus per-case medians.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchitectureAblationReport {
    pub runs: Vec<AblationRun>,
    pub median_r2: BTreeMap<String, f64>,
}

/// Train every ablation case at every seed on one dataset. The
/// built-up branch is pretrained once (fixed seed) and shared, the way
/// a single pretrained extractor backs all ensemble members.
#[allow(clippy::too_many_arguments)]
pub fn run_architecture_ablation(
    world: &crate::synth::World,
    map: &RegionMap,
    census: &CensusTable,
    seeds: &[u64],
    base_config: &TrainConfig,
    hidden_dims: &[usize],
    pretrain_epochs: usize,
    pretrain_lr: f64,
) -> Result<ArchitectureAblationReport> {
    let feature_config = crate::predictor::FeatureConfig::new(
        0,
        &[FeatureGroup::S1, FeatureGroup::S2],
    )?;
    let builtup = crate::predictor::pretrain_builtup(
        &world.inputs,
        &world.builtup_labels,
        &feature_config,
        hidden_dims,
        pretrain_epochs,
        1_000_003,
        pretrain_lr,
    )?;
    let mut runs = Vec::new();
    for case in AblationCase::ALL {
        for &seed in seeds {
            runs.push(run_ablation_case(
                case,
                &world.inputs,
                map,
                census,
                &world.truth_population,
                &builtup,
                &feature_config,
                base_config,
                seed,
            )?);
        }
    }
    let mut median_r2 = BTreeMap::new();
    for case in AblationCase::ALL {
        let values: Vec<f64> = runs
            .iter()
            .filter(|r| r.case == case)
            .map(|r| r.pixel_r2)
            .collect();
        median_r2.insert(case.label().to_string(), median(&values));
    }
    Ok(ArchitectureAblationReport { runs, median_r2 })
}

/// One modality-ablation row: which groups were enabled and what the
/// trained model scored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModalityRun {
    pub groups: Vec<String>,
    pub seed: u64,
    pub pixel_r2: f64,
    pub mae: f64,
    pub rmse: f64,
}

/// Feature-group masking ablation: train with S1 only, S2 only, and
/// both, at each seed.
pub fn run_modality_ablation(
    world: &crate::synth::World,
    seeds: &[u64],
    base_config: &TrainConfig,
    hidden_dims: &[usize],
) -> Result<Vec<ModalityRun>> {
    let masks: [&[FeatureGroup]; 3] = [
        &[FeatureGroup::S1],
        &[FeatureGroup::S2],
        &[FeatureGroup::S1, FeatureGroup::S2],
    ];
    let mut rows = Vec::new();
    for mask in masks {
        let feature_config = crate::predictor::FeatureConfig::new(0, mask)?;
        for &seed in seeds {
            let mut config = base_config.clone();
            config.seed = seed;
            let params0 = external_weights_params(
                &world.inputs,
                &feature_config,
                hidden_dims,
                seed,
                crate::synth::BUILTUP_REF_BAND,
            )?;
            let (trained, _) =
                train(&world.inputs, &world.regions, &world.census, &params0, &config)?;
            let pred =
                crate::predictor::population_forward(&world.inputs.members()[0], &trained)?;
            let report = crate::eval::evaluate_grid(&pred, &world.truth_population, 1)?;
            rows.push(ModalityRun {
                groups: mask.iter().map(|g| g.as_str().to_string()).collect(),
                seed,
                pixel_r2: report.r2,
                mae: report.mae,
                rmse: report.rmse,
            });
        }
    }
    Ok(rows)
}

/// One ensembling-ablation row, Table-style: the averaging mode, the
/// number of estimates, metrics of the averaged map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsemblingRun {
    pub mode: String,
    pub estimates: usize,
    pub pixel_r2: f64,
    pub mae: f64,
    pub rmse: f64,
}

/// Train `n_members` seeds, then evaluate single, seasons-only,
/// members-only, and full bags against the truth.
pub fn run_ensembling_ablation(
    world: &crate::synth::World,
    n_members: usize,
    base_config: &TrainConfig,
    hidden_dims: &[usize],
) -> Result<Vec<EnsemblingRun>> {
    use crate::ensemble::{bag_predict, Bag, BagMember, BagMode};
    let feature_config = crate::predictor::FeatureConfig::new(
        0,
        &[FeatureGroup::S1, FeatureGroup::S2],
    )?;
    let mut members = Vec::with_capacity(n_members);
    for seed in 0..n_members as u64 {
        let mut config = base_config.clone();
        config.seed = seed;
        let params0 = external_weights_params(
            &world.inputs,
            &feature_config,
            hidden_dims,
            seed,
            crate::synth::BUILTUP_REF_BAND,
        )?;
        let (trained, _) =
            train(&world.inputs, &world.regions, &world.census, &params0, &config)?;
        members.push(BagMember { id: format!("member{seed}"), params: trained });
    }
    let mut rows = Vec::new();
    for mode in [BagMode::Single, BagMode::SeasonsOnly, BagMode::MembersOnly, BagMode::Full] {
        let bag = Bag::new(members.clone(), world.inputs.clone(), mode)?;
        let (pred, estimates) = bag_predict(&bag)?;
        let report = crate::eval::evaluate_grid(&pred, &world.truth_population, 1)?;
        rows.push(EnsemblingRun {
            mode: format!("{mode:?}"),
            estimates,
            pixel_r2: report.r2,
            mae: report.mae,
            rmse: report.rmse,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_zero_when_sums_match() {
        let mut entries = BTreeMap::new();
        entries.insert(1u32, 10.0);
        entries.insert(2u32, 0.0);
        let census = CensusTable::new(entries, "t").unwrap();
        let mut sums = BTreeMap::new();
        sums.insert(1u32, 10.0);
        sums.insert(2u32, 0.0);
        assert_eq!(loss_log_l1(&census, &sums).unwrap(), 0.0);
    }

    #[test]
    fn loss_hand_case_ln10() {
        let mut entries = BTreeMap::new();
        entries.insert(5u32, 9.0);
        let census = CensusTable::new(entries, "t").unwrap();
        let mut sums = BTreeMap::new();
        sums.insert(5u32, 99.0);
        let loss = loss_log_l1(&census, &sums).unwrap();
        assert!((loss - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_missing_sum_is_reported() {
        let mut entries = BTreeMap::new();
        entries.insert(5u32, 9.0);
        let census = CensusTable::new(entries, "t").unwrap();
        let sums = BTreeMap::new();
        assert!(matches!(
            loss_log_l1(&census, &sums),
            Err(Error::MissingRegionSum(5))
        ));
    }

    #[test]
    fn sparsity_cases() {
        assert_eq!(sparsity_penalty(&[0.0, 0.0], 0.01).unwrap(), 0.0);
        assert!((sparsity_penalty(&[10.0, 10.0, 10.0], 0.01).unwrap() - 0.1).abs() < 1e-15);
        assert!(matches!(sparsity_penalty(&[], 0.01), Err(Error::EmptyBatch)));
        let vals: Vec<f64> = (0..17).map(|i| (i as f64) * 0.71 - 3.0).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(
            (sparsity_penalty(&vals, 0.01).unwrap() - 0.01 * mean).abs() < 1e-12
        );
    }

    #[test]
    fn weight_decay_heuristic() {
        assert_eq!(weight_decay_from_difficulty(18.0).unwrap(), 3.6e-6);
        assert!((weight_decay_from_difficulty(0.8).unwrap() - 1.6e-7).abs() < 1e-20);
        assert_eq!(weight_decay_from_difficulty(5.0).unwrap(), 1e-6);
        assert!(weight_decay_from_difficulty(0.0).is_err());
    }

    #[test]
    fn lr_schedule() {
        let config = TrainConfig { base_lr: 1e-3, ..Default::default() };
        assert_eq!(lr_at(0, &config), 1e-3);
        assert_eq!(lr_at(4, &config), 1e-3);
        assert_eq!(lr_at(5, &config), 0.75e-3);
        assert!((lr_at(12, &config) - 0.5625e-3).abs() < 1e-18);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut params = vec![1.0, -2.0, 3.0];
        let mut state = OptimState::new(3);
        let config = TrainConfig::default();
        adam_step(&mut params, &[0.0, 0.0, 0.0], &mut state, 1e-3, &config);
        assert_eq!(params, vec![1.0, -2.0, 3.0]);
        assert_eq!(state.timestep(), 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut params = vec![0.0, 0.0];
        let mut state = OptimState::new(2);
        let config = TrainConfig::default();
        let lr = 1e-2;
        adam_step(&mut params, &[3.0, -0.5], &mut state, lr, &config);
        assert!((params[0] + lr).abs() < 1e-6, "step {}", params[0]);
        assert!((params[1] - lr).abs() < 1e-6, "step {}", params[1]);
    }

    #[test]
    fn adam_coupled_decay_shrinks_weights() {
        let mut params = vec![10.0];
        let mut state = OptimState::new(1);
        let config = TrainConfig { lambda_wd: 1e-2, ..Default::default() };
        adam_step(&mut params, &[0.0], &mut state, 1e-3, &config);
        assert!(params[0] < 10.0);
    }

    #[test]
    fn config_json_round_trip() {
        let config = TrainConfig {
            epochs: 42,
            lambda_wd: 3.6e-6,
            seed: 7,
            transfer_init: true,
            ..Default::default()
        };
        let json = serde_json::to_string(&config).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, config);
        // Partial configs fall back to defaults.
        let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.base_lr, 1e-3);
        assert_eq!(partial.batch_regions, 2);
    }

    #[test]
    fn history_csv_format() {
        let history = vec![LossRecord {
            epoch: 0,
            batch: 1,
            loss: 2.5,
            log_l1: 2.0,
            sparsity: 0.5,
            lr: 1e-3,
        }];
        let csv = history_to_csv(&history);
        assert_eq!(csv, "epoch,batch,loss,log_l1,sparsity,lr\n0,1,2.5,2,0.5,0.001\n");
    }

    #[test]
    fn median_interpolates() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
