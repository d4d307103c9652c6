//! Weakly supervised dasymetric population mapping.
//!
//! The crate trains a factored per-pixel predictor (built-up score times
//! occupancy rate) against coarse census aggregates, produces population
//! rasters, rescales them to census totals, and evaluates the result.
//! A synthetic-world generator with known ground truth makes the whole
//! pipeline verifiable at desk scale.
//!
//! Modules map onto the pipeline stages:
//!
//! - [`grid`]: raster data model, GridPack container, compositing,
//!   block aggregation, photometric augmentation
//! - [`regions`]: polygon parsing, rasterization, region merging,
//!   IoU-based boundary matching
//! - [`census`]: census tables, zonal sums, dataset difficulty
//! - [`predictor`]: the factored model with analytic gradients
//! - [`training`]: weak-supervision loss, Adam, the training loop,
//!   ablation harnesses
//! - [`ensemble`]: bagged prediction over members and composites
//! - [`dasymetric`]: rescaling to census totals, scale-factor reports
//! - [`eval`]: R2/MAE/RMSE metrics and evaluation drivers
//! - [`synth`]: synthetic-world oracle

pub mod census;
pub mod cli;
pub mod dasymetric;
pub mod ensemble;
pub mod eval;
pub mod grid;
pub mod gridpack;
pub mod predictor;
pub mod regions;
pub mod synth;
pub mod training;

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the pipeline. Each variant is a distinct
/// diagnostic; the CLI maps them onto its exit-code taxonomy.
#[derive(Debug)]
pub enum Error {
    /// File does not start with the GridPack magic bytes.
    BadMagic,
    /// File ends before the payload or mask declared by the header.
    TruncatedPayload { expected: usize, actual: usize },
    /// Header fields disagree with each other or with the file size.
    SizeMismatch(String),
    /// Header declares a dtype this reader does not support.
    UnsupportedDtype(String),
    /// Header (or other) JSON failed to parse or validate.
    Json(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Grid invariant violated at construction.
    InvalidGrid(String),
    /// Composite called on an empty stack.
    EmptyStack,
    /// Block aggregation factor does not divide the raster dimensions.
    NonDivisible { width: usize, height: usize, factor: usize },
    /// Two rasters expected to share dims/transform do not.
    Misaligned(String),
    /// GeoJSON feature with a geometry type outside the supported subset.
    UnsupportedGeometry(String),
    /// GeoJSON feature without an integer region_id property.
    MissingRegionId,
    /// The same region_id appears on two features or census rows.
    DuplicateRegionId(u32),
    /// Polygon ring violates the ring invariants.
    BadRing(String),
    /// Rasterization target has zero pixels.
    ZeroAreaRaster,
    /// Census row failed to parse.
    MalformedRow { line: usize, message: String },
    /// Census count below zero.
    NegativeCount { region_id: u32, count: f64 },
    /// Difficulty inputs must be positive.
    NonPositive(String),
    /// Predictor parameter shapes do not chain.
    ShapeMismatch(String),
    /// Feature extraction requested at an invalid pixel.
    InvalidPixel { x: usize, y: usize },
    /// Variant requires a band the grid does not carry.
    MissingBand(String),
    /// Labels for built-up pretraining must be 0, 1, or invalid.
    BadLabel { value: f32 },
    /// A census region has no sum entry (or vice versa).
    MissingRegionSum(u32),
    /// Region sums fed to the loss must be nonnegative.
    NegativeRegionSum { region_id: u32, sum: f64 },
    /// Loss evaluated on an empty batch.
    EmptyBatch,
    /// Census table and region map disagree on the id set.
    CensusRegionMismatch(String),
    /// Training objective became NaN or infinite.
    NonFiniteLoss { epoch: usize, batch: usize },
    /// Region present in the map but absent from the census.
    MissingCensusEntry(u32),
    /// Metric inputs have different lengths.
    LengthMismatch { truth: usize, pred: usize },
    /// R2 undefined: truth values carry no variance.
    ZeroVariance,
    /// Grid evaluation found no cell valid in both rasters.
    NoJointlyValidCells,
    /// Ensemble selection is empty.
    EmptySelection,
    /// Region merging target out of range.
    BadMergeTarget { current: usize, target: usize },
    /// Free-form configuration error.
    Config(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::BadMagic => write!(f, "bad magic: not a GridPack file"),
            Error::TruncatedPayload { expected, actual } => {
                write!(f, "truncated payload: expected {expected} bytes, found {actual}")
            }
            Error::SizeMismatch(msg) => write!(f, "header/payload size mismatch: {msg}"),
            Error::UnsupportedDtype(d) => write!(f, "unsupported dtype {d:?}"),
            Error::Json(msg) => write!(f, "malformed JSON: {msg}"),
            Error::Io(e) => write!(f, "I/O error: {e}"),
            Error::InvalidGrid(msg) => write!(f, "invalid grid: {msg}"),
            Error::EmptyStack => write!(f, "empty stack: nothing to composite"),
            Error::NonDivisible { width, height, factor } => write!(
                f,
                "dimensions {width}x{height} not divisible by aggregation factor {factor}"
            ),
            Error::Misaligned(msg) => write!(f, "misaligned rasters: {msg}"),
            Error::UnsupportedGeometry(t) => write!(f, "unsupported geometry: {t}"),
            Error::MissingRegionId => write!(f, "feature missing integer region_id property"),
            Error::DuplicateRegionId(id) => write!(f, "duplicate region_id {id}"),
            Error::BadRing(msg) => write!(f, "bad ring: {msg}"),
            Error::ZeroAreaRaster => write!(f, "zero-area raster"),
            Error::MalformedRow { line, message } => {
                write!(f, "malformed row at line {line}: {message}")
            }
            Error::NegativeCount { region_id, count } => {
                write!(f, "negative count {count} for region {region_id}")
            }
            Error::NonPositive(msg) => write!(f, "nonpositive input: {msg}"),
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::InvalidPixel { x, y } => write!(f, "pixel ({x}, {y}) is fully invalid"),
            Error::MissingBand(name) => write!(f, "missing band {name:?}"),
            Error::BadLabel { value } => {
                write!(f, "label {value} outside {{0, 1, invalid}}")
            }
            Error::MissingRegionSum(id) => write!(f, "missing region sum for region {id}"),
            Error::NegativeRegionSum { region_id, sum } => {
                write!(f, "negative sum {sum} for region {region_id}")
            }
            Error::EmptyBatch => write!(f, "empty batch"),
            Error::CensusRegionMismatch(msg) => {
                write!(f, "census/region mismatch: {msg}")
            }
            Error::NonFiniteLoss { epoch, batch } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}")
            }
            Error::MissingCensusEntry(id) => write!(f, "region {id} missing from census"),
            Error::LengthMismatch { truth, pred } => {
                write!(f, "length mismatch: {truth} truth vs {pred} predicted values")
            }
            Error::ZeroVariance => write!(f, "zero variance: R2 undefined"),
            Error::NoJointlyValidCells => write!(f, "no jointly valid cells"),
            Error::EmptySelection => write!(f, "empty ensemble selection"),
            Error::BadMergeTarget { current, target } => {
                write!(f, "merge target {target} out of range for {current} regions")
            }
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}

impl Error {
    /// True for failures of the numerics themselves rather than of the
    /// inputs; the CLI reports these with a dedicated exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }
}
