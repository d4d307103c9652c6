//! The factored per-pixel population model: a frozen built-up branch
//! times a trainable occupancy branch, with a direct-regression variant
//! and an external-weights variant, plus exact reverse-mode gradients
//! for every trainable parameter.
//!
//! Both branches are small MLPs over per-pixel features (optionally a
//! 3x3 window). The built-up head is a sigmoid, the occupancy head a
//! softplus, so the factored product is positive wherever the weight
//! layer is.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{FeatureGroup, Grid, GridStack};
use crate::{Error, Result};

/// Default hidden widths of both branches.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

/// Which bands feed the model and how much spatial context they get.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// 0 = per-pixel, 1 = 3x3 neighborhood.
    pub window_radius: usize,
    pub group_mask: BTreeSet<FeatureGroup>,
}

impl FeatureConfig {
    pub fn new(window_radius: usize, groups: &[FeatureGroup]) -> Result<Self> {
        if window_radius > 1 {
            return Err(Error::Config("window_radius must be 0 or 1".into()));
        }
        let group_mask: BTreeSet<FeatureGroup> = groups.iter().copied().collect();
        if group_mask.is_empty() {
            return Err(Error::Config("group_mask must be nonempty".into()));
        }
        Ok(FeatureConfig { window_radius, group_mask })
    }

    /// Bands of `grid` enabled by the mask, in grid band order grouped
    /// by the canonical group order.
    pub fn enabled_bands(&self, grid: &Grid) -> Vec<usize> {
        let mut bands = Vec::new();
        for group in FeatureGroup::ALL {
            if !self.group_mask.contains(&group) {
                continue;
            }
            for (b, g) in grid.groups().iter().enumerate() {
                if *g == group {
                    bands.push(b);
                }
            }
        }
        bands
    }

    pub fn feature_len(&self, grid: &Grid) -> usize {
        let window = (2 * self.window_radius + 1).pow(2);
        self.enabled_bands(grid).len() * window
    }
}

#[inline]
fn mirror(coord: isize, len: usize) -> usize {
    if coord < 0 {
        (-coord - 1) as usize
    } else if coord as usize >= len {
        2 * len - 1 - coord as usize
    } else {
        coord as usize
    }
}

/// A pixel is usable iff every enabled band is valid at its center.
pub fn pixel_usable(grid: &Grid, bands: &[usize], x: usize, y: usize) -> bool {
    bands.iter().all(|&b| grid.is_valid(b, x, y))
}

fn fill_features(
    grid: &Grid,
    bands: &[usize],
    radius: usize,
    x: usize,
    y: usize,
    out: &mut Vec<f64>,
) {
    out.clear();
    let r = radius as isize;
    for &b in bands {
        let center = grid.value(b, x, y);
        for dy in -r..=r {
            let yy = mirror(y as isize + dy, grid.height());
            for dx in -r..=r {
                let xx = mirror(x as isize + dx, grid.width());
                // Invalid neighbors fall back to the center value.
                let v = if grid.is_valid(b, xx, yy) { grid.value(b, xx, yy) } else { center };
                out.push(v as f64);
            }
        }
    }
}

/// Feature vector at one pixel: enabled-group band values over the
/// (2r+1)^2 window, mirror-padded at borders, ordered by group, band,
/// then window row-major.
pub fn extract_features(
    grid: &Grid,
    config: &FeatureConfig,
    x: usize,
    y: usize,
) -> Result<Vec<f64>> {
    let bands = config.enabled_bands(grid);
    if !pixel_usable(grid, &bands, x, y) {
        return Err(Error::InvalidPixel { x, y });
    }
    let mut out = Vec::with_capacity(config.feature_len(grid));
    fill_features(grid, &bands, config.window_radius, x, y, &mut out);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Branch parameters
// ---------------------------------------------------------------------------

/// Output activation of a branch head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Sigmoid,
    Softplus,
}

/// One dense layer, weights row-major `[out_dim][in_dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    fn check(&self) -> Result<()> {
        if self.weights.len() != self.in_dim * self.out_dim || self.biases.len() != self.out_dim {
            return Err(Error::ShapeMismatch(format!(
                "layer {}x{} carries {} weights and {} biases",
                self.out_dim,
                self.in_dim,
                self.weights.len(),
                self.biases.len()
            )));
        }
        Ok(())
    }
}

/// MLP with ReLU hidden layers and a scalar head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchParams {
    pub hidden: Vec<DenseLayer>,
    pub head_weights: Vec<f64>,
    pub head_bias: f64,
    pub head: HeadKind,
}

impl BranchParams {
    pub fn in_dim(&self) -> usize {
        self.hidden.first().map(|l| l.in_dim).unwrap_or(self.head_weights.len())
    }

    /// Validate that the layer shapes chain to a scalar head.
    pub fn check_shapes(&self) -> Result<()> {
        let mut dim = self.in_dim();
        for layer in &self.hidden {
            layer.check()?;
            if layer.in_dim != dim {
                return Err(Error::ShapeMismatch(format!(
                    "layer expects {} inputs, got {}",
                    layer.in_dim, dim
                )));
            }
            dim = layer.out_dim;
        }
        if self.head_weights.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "head expects {} inputs, got {}",
                self.head_weights.len(),
                dim
            )));
        }
        Ok(())
    }

    /// Number of scalar parameters.
    pub fn len(&self) -> usize {
        self.hidden.iter().map(|l| l.weights.len() + l.biases.len()).sum::<usize>()
            + self.head_weights.len()
            + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flatten parameters in a fixed order (layers, then head).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for layer in &self.hidden {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.biases);
        }
        out.extend_from_slice(&self.head_weights);
        out.push(self.head_bias);
        out
    }

    /// Overwrite parameters from a flat vector in the same order.
    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "flat parameter length");
        let mut pos = 0;
        for layer in &mut self.hidden {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = layer.biases.len();
            layer.biases.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        let nh = self.head_weights.len();
        self.head_weights.copy_from_slice(&flat[pos..pos + nh]);
        pos += nh;
        self.head_bias = flat[pos];
    }
}

/// Seeded initialization. Hidden layers get scaled normal weights;
/// the head is small random unless `zero_head` (used when the head
/// bias carries the occupancy-rate initialization).
pub fn init_branch(
    in_dim: usize,
    hidden_dims: &[usize],
    head: HeadKind,
    seed: u64,
    zero_head: bool,
) -> BranchParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |sigma: f64, rng: &mut ChaCha8Rng| {
        // Box-Muller keeps the draw count per parameter fixed.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mut hidden = Vec::with_capacity(hidden_dims.len());
    let mut dim = in_dim;
    for &out_dim in hidden_dims {
        let sigma = (2.0 / dim as f64).sqrt();
        let weights = (0..dim * out_dim).map(|_| normal(sigma, &mut rng)).collect();
        hidden.push(DenseLayer { in_dim: dim, out_dim, weights, biases: vec![0.0; out_dim] });
        dim = out_dim;
    }
    let head_weights = if zero_head {
        vec![0.0; dim]
    } else {
        let sigma = (1.0 / dim as f64).sqrt();
        (0..dim).map(|_| normal(sigma, &mut rng)).collect()
    };
    BranchParams { hidden, head_weights, head_bias: 0.0, head }
}

/// Copy hidden-layer weights from one branch into another. Heads are
/// left untouched because their activations differ.
pub fn transfer_hidden(src: &BranchParams, dst: &mut BranchParams) -> Result<()> {
    if src.hidden.len() != dst.hidden.len() {
        return Err(Error::ShapeMismatch(format!(
            "cannot transfer {} hidden layers into {}",
            src.hidden.len(),
            dst.hidden.len()
        )));
    }
    for (s, d) in src.hidden.iter().zip(&mut dst.hidden) {
        if s.in_dim != d.in_dim || s.out_dim != d.out_dim {
            return Err(Error::ShapeMismatch(format!(
                "hidden layer {}x{} vs {}x{}",
                s.out_dim, s.in_dim, d.out_dim, d.in_dim
            )));
        }
        d.weights.copy_from_slice(&s.weights);
        d.biases.copy_from_slice(&s.biases);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Scalar math
// ---------------------------------------------------------------------------

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Inverse of softplus; the occupancy head bias is initialized with
/// `softplus_inv(average occupancy rate)`.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus range is positive");
    if y > 30.0 {
        // exp(y) overflows no earlier than y ~ 709; above 30 the
        // correction term is below f64 resolution anyway.
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Dot product with four fixed-order accumulators: deterministic while
/// leaving room for instruction-level parallelism.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    for j in chunks * 4..a.len() {
        acc[0] += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

// ---------------------------------------------------------------------------
// Forward and backward
// ---------------------------------------------------------------------------

/// Activations cached by a forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct BranchCache {
    pub features: Vec<f64>,
    /// Post-ReLU activations per hidden layer.
    pub hidden_post: Vec<Vec<f64>>,
    /// Head pre-activation.
    pub head_pre: f64,
    /// Head output.
    pub output: f64,
}

/// Forward pass through a branch, returning the scalar output.
pub fn branch_forward(features: &[f64], params: &BranchParams) -> Result<f64> {
    Ok(forward_cached(features, params)?.output)
}

/// Forward pass that keeps the activations needed by [`branch_backward`].
pub fn forward_cached(features: &[f64], params: &BranchParams) -> Result<BranchCache> {
    if features.len() != params.in_dim() {
        return Err(Error::ShapeMismatch(format!(
            "branch expects {} features, got {}",
            params.in_dim(),
            features.len()
        )));
    }
    let mut hidden_post = Vec::with_capacity(params.hidden.len());
    let mut current: Vec<f64> = features.to_vec();
    for layer in &params.hidden {
        let mut next = vec![0.0f64; layer.out_dim];
        for (o, out) in next.iter_mut().enumerate() {
            let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            let z = layer.biases[o] + dot(row, &current);
            *out = if z > 0.0 { z } else { 0.0 };
        }
        hidden_post.push(next.clone());
        current = next;
    }
    let head_pre = params.head_bias + dot(&params.head_weights, &current);
    let output = match params.head {
        HeadKind::Sigmoid => sigmoid(head_pre),
        HeadKind::Softplus => softplus(head_pre),
    };
    Ok(BranchCache { features: features.to_vec(), hidden_post, head_pre, output })
}

/// Built-up score in (0, 1): MLP then sigmoid.
pub fn builtup_forward(features: &[f64], params: &BranchParams) -> Result<f64> {
    debug_assert_eq!(params.head, HeadKind::Sigmoid);
    branch_forward(features, params)
}

/// Occupancy rate (persons per built-up unit), strictly positive:
/// MLP then softplus.
pub fn occupancy_forward(features: &[f64], params: &BranchParams) -> Result<f64> {
    debug_assert_eq!(params.head, HeadKind::Softplus);
    branch_forward(features, params)
}

/// Gradients shaped like one branch's trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchGrads {
    pub hidden: Vec<DenseLayer>,
    pub head_weights: Vec<f64>,
    pub head_bias: f64,
}

impl BranchGrads {
    pub fn zeros_like(params: &BranchParams) -> Self {
        BranchGrads {
            hidden: params
                .hidden
                .iter()
                .map(|l| DenseLayer {
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
            head_weights: vec![0.0; params.head_weights.len()],
            head_bias: 0.0,
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.hidden {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.biases);
        }
        out.extend_from_slice(&self.head_weights);
        out.push(self.head_bias);
        out
    }

    pub fn add(&mut self, other: &BranchGrads) {
        for (a, b) in self.hidden.iter_mut().zip(&other.hidden) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += y;
            }
        }
        for (x, y) in self.head_weights.iter_mut().zip(&other.head_weights) {
            *x += y;
        }
        self.head_bias += other.head_bias;
    }
}

/// Accumulate d(loss)/d(params) for one pixel given d(loss)/d(output).
/// ReLU and |x| subgradients at 0 are taken as 0.
pub fn branch_backward(
    params: &BranchParams,
    cache: &BranchCache,
    d_output: f64,
    grads: &mut BranchGrads,
) {
    let d_pre = match params.head {
        HeadKind::Sigmoid => d_output * cache.output * (1.0 - cache.output),
        HeadKind::Softplus => d_output * sigmoid(cache.head_pre),
    };
    branch_backward_from_head_pre(params, cache, d_pre, grads);
}

/// Backward pass seeded at the head pre-activation; used by losses that
/// fold the head derivative into the seed (e.g. cross-entropy on
/// logits).
pub fn branch_backward_from_head_pre(
    params: &BranchParams,
    cache: &BranchCache,
    d_pre: f64,
    grads: &mut BranchGrads,
) {
    let last = cache.hidden_post.last().map(|v| v.as_slice()).unwrap_or(&cache.features);
    for (g, h) in grads.head_weights.iter_mut().zip(last) {
        *g += d_pre * h;
    }
    grads.head_bias += d_pre;

    // d(loss)/d(activation) flowing backwards.
    let mut d_act: Vec<f64> = params.head_weights.iter().map(|w| w * d_pre).collect();

    for li in (0..params.hidden.len()).rev() {
        let layer = &params.hidden[li];
        let post = &cache.hidden_post[li];
        let input: &[f64] =
            if li == 0 { &cache.features } else { &cache.hidden_post[li - 1] };
        let layer_grads = &mut grads.hidden[li];
        let mut d_input = vec![0.0f64; layer.in_dim];
        for o in 0..layer.out_dim {
            // ReLU gate: post > 0 iff pre-activation > 0.
            if post[o] <= 0.0 {
                continue;
            }
            let d = d_act[o];
            if d == 0.0 {
                continue;
            }
            let w_row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            let g_row = &mut layer_grads.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            for i in 0..layer.in_dim {
                g_row[i] += d * input[i];
                d_input[i] += d * w_row[i];
            }
            layer_grads.biases[o] += d;
        }
        d_act = d_input;
    }
}

// ---------------------------------------------------------------------------
// Full predictor
// ---------------------------------------------------------------------------

/// How the per-pixel weight layer (the built-up factor) is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Frozen built-up MLP times trainable occupancy MLP.
    Factored,
    /// Single softplus-headed branch regresses population directly.
    Direct,
    /// A named raster band replaces the built-up branch.
    ExternalWeights,
}

/// Run provenance recorded into serialized parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub seed: u64,
    pub epochs: usize,
    pub dataset_label: String,
}

/// The complete model: variant, branches, feature config, provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub variant: Variant,
    /// Present only for the factored variant; always frozen under the
    /// weak-supervision objective.
    pub builtup: Option<BranchParams>,
    /// The trainable branch: occupancy rate, or the direct population
    /// head in the direct variant.
    pub occupancy: BranchParams,
    pub external_weight_band: Option<String>,
    pub feature_config: FeatureConfig,
    pub provenance: Provenance,
}

impl PredictorParams {
    pub fn check(&self) -> Result<()> {
        self.occupancy.check_shapes()?;
        match self.variant {
            Variant::Factored => {
                let b = self.builtup.as_ref().ok_or_else(|| {
                    Error::ShapeMismatch("factored variant requires a built-up branch".into())
                })?;
                b.check_shapes()?;
            }
            Variant::Direct => {
                if self.builtup.is_some() {
                    return Err(Error::ShapeMismatch(
                        "direct variant must carry exactly one branch".into(),
                    ));
                }
            }
            Variant::ExternalWeights => {
                if self.external_weight_band.is_none() {
                    return Err(Error::MissingBand("<external weight band unset>".into()));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let params: PredictorParams = serde_json::from_str(text)?;
        params.check()?;
        Ok(params)
    }
}

/// Per-pixel weight factor: frozen built-up score, external band value,
/// or 1 for the direct variant.
fn pixel_weight(
    grid: &Grid,
    params: &PredictorParams,
    features: &[f64],
    external_band: Option<usize>,
    x: usize,
    y: usize,
) -> Result<Option<f64>> {
    match params.variant {
        Variant::Factored => {
            let branch = params.builtup.as_ref().expect("checked");
            Ok(Some(branch_forward(features, branch)?))
        }
        Variant::Direct => Ok(Some(1.0)),
        Variant::ExternalWeights => {
            let band = external_band.expect("checked");
            if !grid.is_valid(band, x, y) {
                return Ok(None);
            }
            Ok(Some(grid.value(band, x, y) as f64))
        }
    }
}

fn external_band_index(grid: &Grid, params: &PredictorParams) -> Result<Option<usize>> {
    match (params.variant, &params.external_weight_band) {
        (Variant::ExternalWeights, Some(name)) => Ok(Some(grid.band_index(name)?)),
        (Variant::ExternalWeights, None) => {
            Err(Error::MissingBand("<external weight band unset>".into()))
        }
        _ => Ok(None),
    }
}

/// Predict population, built-up factor, and occupancy over a whole
/// grid. Output bands: `population`, `builtup`, `occupancy`. Pixels
/// that are invalid in any enabled band stay invalid.
pub fn population_forward(grid: &Grid, params: &PredictorParams) -> Result<Grid> {
    params.check()?;
    let bands = params.feature_config.enabled_bands(grid);
    if bands.is_empty() {
        return Err(Error::Config("group mask selects no bands of this grid".into()));
    }
    let external_band = external_band_index(grid, params)?;
    let (w, h) = (grid.width(), grid.height());
    let radius = params.feature_config.window_radius;

    let rows: Vec<Result<Vec<(f32, f32, f32, bool)>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut features = Vec::with_capacity(params.feature_config.feature_len(grid));
            let mut row = Vec::with_capacity(w);
            for x in 0..w {
                if !pixel_usable(grid, &bands, x, y) {
                    row.push((0.0, 0.0, 0.0, false));
                    continue;
                }
                fill_features(grid, &bands, radius, x, y, &mut features);
                let weight =
                    match pixel_weight(grid, params, &features, external_band, x, y)? {
                        Some(wt) => wt,
                        None => {
                            row.push((0.0, 0.0, 0.0, false));
                            continue;
                        }
                    };
                let occ = branch_forward(&features, &params.occupancy)?;
                let pop = weight * occ;
                row.push((pop as f32, weight as f32, occ as f32, true));
            }
            Ok(row)
        })
        .collect();

    let n = w * h;
    let mut values = vec![0.0f32; 3 * n];
    let mut valid = vec![false; 3 * n];
    for (y, row) in rows.into_iter().enumerate() {
        let row = row?;
        for (x, (pop, weight, occ, ok)) in row.into_iter().enumerate() {
            let i = y * w + x;
            values[i] = pop;
            values[n + i] = weight;
            values[2 * n + i] = occ;
            valid[i] = ok;
            valid[n + i] = ok;
            valid[2 * n + i] = ok;
        }
    }
    Grid::from_parts(
        w,
        h,
        grid.transform(),
        vec!["population".into(), "builtup".into(), "occupancy".into()],
        vec![FeatureGroup::Aux; 3],
        values,
        valid,
    )
}

/// Forward state over an explicit pixel set, kept for the backward pass.
#[derive(Debug)]
pub struct BatchCache {
    /// Linear pixel indices that were usable, in input order.
    pub pixels: Vec<usize>,
    /// Built-up factor per usable pixel.
    pub weights: Vec<f64>,
    /// Trainable-branch cache per usable pixel.
    pub caches: Vec<BranchCache>,
    /// Population prediction per usable pixel.
    pub population: Vec<f64>,
}

/// Forward over the usable subset of `pixel_ids`, caching activations.
pub fn forward_pixels(
    grid: &Grid,
    params: &PredictorParams,
    pixel_ids: &[usize],
) -> Result<BatchCache> {
    params.check()?;
    let bands = params.feature_config.enabled_bands(grid);
    if bands.is_empty() {
        return Err(Error::Config("group mask selects no bands of this grid".into()));
    }
    let external_band = external_band_index(grid, params)?;
    let w = grid.width();
    let radius = params.feature_config.window_radius;

    let mut pixels = Vec::with_capacity(pixel_ids.len());
    let mut weights = Vec::with_capacity(pixel_ids.len());
    let mut caches = Vec::with_capacity(pixel_ids.len());
    let mut population = Vec::with_capacity(pixel_ids.len());
    let mut features = Vec::with_capacity(params.feature_config.feature_len(grid));
    for &pid in pixel_ids {
        let (x, y) = (pid % w, pid / w);
        if !pixel_usable(grid, &bands, x, y) {
            continue;
        }
        fill_features(grid, &bands, radius, x, y, &mut features);
        let Some(weight) = pixel_weight(grid, params, &features, external_band, x, y)? else {
            continue;
        };
        let cache = forward_cached(&features, &params.occupancy)?;
        let pop = weight * cache.output;
        pixels.push(pid);
        weights.push(weight);
        population.push(pop);
        caches.push(cache);
    }
    Ok(BatchCache { pixels, weights, caches, population })
}

/// Reverse-mode gradients of the objective w.r.t. the trainable branch,
/// given d(objective)/d(population) per cached pixel. Frozen built-up
/// parameters receive no entry: their gradient is identically zero.
pub fn backward(
    params: &PredictorParams,
    cache: &BatchCache,
    seeds: &[f64],
) -> Result<BranchGrads> {
    if seeds.len() != cache.pixels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} seeds for {} cached pixels",
            seeds.len(),
            cache.pixels.len()
        )));
    }
    let mut grads = BranchGrads::zeros_like(&params.occupancy);
    for i in 0..cache.pixels.len() {
        // d pop / d occupancy_output = weight.
        let d_out = seeds[i] * cache.weights[i];
        if d_out != 0.0 {
            branch_backward(&params.occupancy, &cache.caches[i], d_out, &mut grads);
        }
    }
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Built-up pretraining
// ---------------------------------------------------------------------------

/// Binary cross-entropy over valid labeled pixels, with gradients
/// produced by the same reverse-mode machinery as the main objective.
pub fn bce_loss_and_grads(
    grid: &Grid,
    labels: &Grid,
    branch: &BranchParams,
    config: &FeatureConfig,
) -> Result<(f64, BranchGrads, usize)> {
    if !grid.aligned_with(labels.width(), labels.height(), &labels.transform()) {
        return Err(Error::Misaligned("labels not aligned with inputs".into()));
    }
    let bands = config.enabled_bands(grid);
    let (w, h) = (grid.width(), grid.height());
    let mut grads = BranchGrads::zeros_like(branch);
    let mut loss = 0.0f64;
    let mut count = 0usize;
    let mut features = Vec::with_capacity(config.feature_len(grid));
    for y in 0..h {
        for x in 0..w {
            if !labels.is_valid(0, x, y) || !pixel_usable(grid, &bands, x, y) {
                continue;
            }
            let label = labels.value(0, x, y);
            if label != 0.0 && label != 1.0 {
                return Err(Error::BadLabel { value: label });
            }
            count += 1;
            fill_features(grid, &bands, config.window_radius, x, y, &mut features);
            let cache = forward_cached(&features, branch)?;
            let z = cache.head_pre;
            let yv = label as f64;
            // Stable BCE on logits.
            loss += z.max(0.0) - z * yv + (-z.abs()).exp().ln_1p();
            // d(BCE)/dz = sigmoid(z) - y, seeded at the logit.
            let d_pre = sigmoid(z) - yv;
            branch_backward_from_head_pre(branch, &cache, d_pre, &mut grads);
        }
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    let scale = 1.0 / count as f64;
    loss *= scale;
    for layer in &mut grads.hidden {
        for v in &mut layer.weights {
            *v *= scale;
        }
        for v in &mut layer.biases {
            *v *= scale;
        }
    }
    for v in &mut grads.head_weights {
        *v *= scale;
    }
    grads.head_bias *= scale;
    Ok((loss, grads, count))
}

/// Fraction of labeled pixels where thresholding the score at 0.5
/// reproduces the label.
pub fn builtup_accuracy(
    grid: &Grid,
    labels: &Grid,
    branch: &BranchParams,
    config: &FeatureConfig,
) -> Result<f64> {
    let bands = config.enabled_bands(grid);
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut features = Vec::new();
    for y in 0..grid.height() {
        for x in 0..grid.width() {
            if !labels.is_valid(0, x, y) || !pixel_usable(grid, &bands, x, y) {
                continue;
            }
            fill_features(grid, &bands, config.window_radius, x, y, &mut features);
            let score = branch_forward(&features, branch)?;
            let predicted = score > 0.5;
            let label = labels.value(0, x, y) != 0.0;
            if predicted == label {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(correct as f64 / total as f64)
}

/// Mean built-up score over usable pixels.
pub fn mean_builtup_score(
    grid: &Grid,
    branch: &BranchParams,
    config: &FeatureConfig,
) -> Result<f64> {
    let bands = config.enabled_bands(grid);
    let mut sum = 0.0f64;
    let mut total = 0usize;
    let mut features = Vec::new();
    for y in 0..grid.height() {
        for x in 0..grid.width() {
            if !pixel_usable(grid, &bands, x, y) {
                continue;
            }
            fill_features(grid, &bands, config.window_radius, x, y, &mut features);
            sum += branch_forward(&features, branch)?;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(sum / total as f64)
}

/// Train a sigmoid-headed built-up branch against binary labels with
/// Adam, cycling through stack members season by season. Returns the
/// branch ready to freeze.
pub fn pretrain_builtup(
    stack: &GridStack,
    labels: &Grid,
    config: &FeatureConfig,
    hidden_dims: &[usize],
    epochs: usize,
    seed: u64,
    lr: f64,
) -> Result<BranchParams> {
    if stack.is_empty() {
        return Err(Error::EmptyStack);
    }
    let first = &stack.members()[0];
    let in_dim = config.feature_len(first);
    let mut branch = init_branch(in_dim, hidden_dims, HeadKind::Sigmoid, seed, false);
    if epochs == 0 {
        return Ok(branch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = crate::training::OptimState::new(branch.len());
    for _ in 0..epochs {
        let member = rng.gen_range(0..stack.len());
        let grid = &stack.members()[member];
        let (loss, grads, _) = bce_loss_and_grads(grid, labels, &branch, config)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: opt.timestep(), batch: 0 });
        }
        let mut flat = branch.to_flat();
        opt.step(&mut flat, &grads.to_flat(), lr, 0.9, 0.999, 1e-8, 0.0, false);
        branch.set_from_flat(&flat);
    }
    Ok(branch)
}
