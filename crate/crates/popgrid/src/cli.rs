//! Command-line front end: wires the pipeline stages into reproducible
//! runs. Every subcommand writes exactly one run manifest next to its
//! outputs; identical inputs and seeds give byte-identical outputs,
//! with manifests differing only in timestamp and duration.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
//! failure.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::census::{census_to_csv, load_census_csv};
use crate::dasymetric::{dasymetric_rescale, factors_to_csv, scale_factors};
use crate::ensemble::{bag_predict, Bag, BagMember, BagManifest};
use crate::eval::{evaluate_blocks, evaluate_grid, scatter_export};
use crate::grid::{composite, CompositeMethod, FeatureGroup, Grid, GridStack, Transform};
use crate::gridpack::{read_grid, read_region_map, write_grid, write_region_map};
use crate::predictor::{
    init_branch, population_forward, pretrain_builtup, BranchParams, FeatureConfig, HeadKind,
    PredictorParams, Provenance, Variant, DEFAULT_HIDDEN,
};
use crate::regions::{iou_match, merge_smallest, parse_regions};
use crate::synth::{coarsen_census, generate_world, WorldConfig, BUILTUP_REF_BAND, SEASONS};
use crate::training::{
    history_to_csv, run_architecture_ablation, run_ensembling_ablation, run_modality_ablation,
    run_scalability_ladder, train, weight_decay_from_difficulty, TrainConfig,
};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "popgrid",
    version,
    about = "Weakly supervised dasymetric population mapping",
    disable_help_subcommand = true
)]
struct Cli {
    /// Cap worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world with known ground truth.
    Synth(SynthArgs),
    /// Rasterize GeoJSON regions onto a pixel grid.
    Rasterize(RasterizeArgs),
    /// Reduce a seasonal stack to one composite.
    Composite(CompositeArgs),
    /// Train the built-up extractor against binary labels.
    PretrainBuiltup(PretrainArgs),
    /// Train the occupancy model against census aggregates.
    Train(TrainArgs),
    /// Predict a population map with one model or a bag.
    Predict(PredictArgs),
    /// Rescale a predicted map to census totals.
    Disaggregate(DisaggregateArgs),
    /// Evaluate a map against a truth raster or census blocks.
    Evaluate(EvaluateArgs),
    /// Merge the smallest regions down to a target count.
    MergeRegions(MergeRegionsArgs),
    /// Match two region maps by intersection-over-union.
    MatchRegions(MatchRegionsArgs),
    /// Scale-factor distribution diagnostics.
    ScaleReport(ScaleReportArgs),
    /// Architecture / ensembling / modality / scalability experiments.
    Ablate(AblateArgs),
}

// ---------------------------------------------------------------------------
// Stack manifests
// ---------------------------------------------------------------------------

/// Season windows recorded alongside synthetic stacks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeasonWindow {
    pub name: String,
    pub start: String,
    pub end: String,
}

/// On-disk description of a grid stack: member files plus labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackManifest {
    pub members: Vec<String>,
    pub timestamps: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seasons: Vec<SeasonWindow>,
}

/// Load a stack manifest and its member grids (paths resolve relative
/// to the manifest).
pub fn load_stack(path: &Path) -> Result<GridStack> {
    let text = std::fs::read_to_string(path)?;
    let manifest: StackManifest = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut members = Vec::with_capacity(manifest.members.len());
    for member in &manifest.members {
        members.push(read_grid(&base.join(member))?);
    }
    GridStack::new(members, manifest.timestamps)
}

/// Write stack members as GridPacks plus the manifest JSON.
pub fn save_stack(dir: &Path, prefix: &str, stack: &GridStack) -> Result<PathBuf> {
    let mut members = Vec::new();
    for (grid, label) in stack.members().iter().zip(stack.timestamps()) {
        let file = format!("{prefix}_{label}.gpk");
        write_grid(&dir.join(&file), grid)?;
        members.push(file);
    }
    let manifest = StackManifest {
        members,
        timestamps: stack.timestamps().to_vec(),
        seasons: SEASONS
            .iter()
            .map(|(name, start, end)| SeasonWindow {
                name: name.to_string(),
                start: start.to_string(),
                end: end.to_string(),
            })
            .collect(),
    };
    let path = dir.join("stack.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    subcommand: String,
    argv: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started_unix: f64,
    duration_seconds: f64,
}

struct RunInfo {
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    /// Where the manifest goes.
    manifest_path: PathBuf,
}

fn manifest_beside(primary_output: &Path) -> PathBuf {
    let mut name = primary_output
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".into());
    name.push_str(".manifest.json");
    primary_output.with_file_name(name)
}

/// Entry point used by `main`; returns the process exit code.
pub fn run<I: IntoIterator<Item = String>>(argv: I) -> i32 {
    let argv: Vec<String> = argv.into_iter().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    if let Some(threads) = cli.threads {
        // Ignore the error if a pool already exists (tests call run()
        // repeatedly in one process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let clock = Instant::now();
    let subcommand = subcommand_name(&cli.command).to_string();
    match dispatch(cli.command) {
        Ok(info) => {
            let manifest = RunManifest {
                tool: "popgrid",
                version: env!("CARGO_PKG_VERSION"),
                subcommand,
                argv,
                seed: info.seed,
                inputs: info.inputs.iter().map(|p| p.display().to_string()).collect(),
                outputs: info.outputs.iter().map(|p| p.display().to_string()).collect(),
                started_unix: started,
                duration_seconds: clock.elapsed().as_secs_f64(),
            };
            match serde_json::to_string_pretty(&manifest)
                .map_err(Error::from)
                .and_then(|text| std::fs::write(&info.manifest_path, text).map_err(Error::from))
            {
                Ok(()) => 0,
                Err(err) => {
                    eprintln!("error: failed to write run manifest: {err}");
                    2
                }
            }
        }
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_numeric() {
                3
            } else {
                2
            }
        }
    }
}

fn subcommand_name(command: &Command) -> &'static str {
    match command {
        Command::Synth(_) => "synth",
        Command::Rasterize(_) => "rasterize",
        Command::Composite(_) => "composite",
        Command::PretrainBuiltup(_) => "pretrain-builtup",
        Command::Train(_) => "train",
        Command::Predict(_) => "predict",
        Command::Disaggregate(_) => "disaggregate",
        Command::Evaluate(_) => "evaluate",
        Command::MergeRegions(_) => "merge-regions",
        Command::MatchRegions(_) => "match-regions",
        Command::ScaleReport(_) => "scale-report",
        Command::Ablate(_) => "ablate",
    }
}

fn dispatch(command: Command) -> Result<RunInfo> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Rasterize(args) => cmd_rasterize(args),
        Command::Composite(args) => cmd_composite(args),
        Command::PretrainBuiltup(args) => cmd_pretrain(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Disaggregate(args) => cmd_disaggregate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::MergeRegions(args) => cmd_merge_regions(args),
        Command::MatchRegions(args) => cmd_match_regions(args),
        Command::ScaleReport(args) => cmd_scale_report(args),
        Command::Ablate(args) => cmd_ablate(args),
    }
}

fn parse_groups(spec: &str) -> Result<Vec<FeatureGroup>> {
    spec.split(',').map(|s| FeatureGroup::parse(s.trim())).collect()
}

fn parse_hidden(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad hidden width {s:?}")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 100)]
    regions: usize,
    #[arg(long, default_value_t = 40)]
    blobs: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 2)]
    s1_bands: usize,
    #[arg(long, default_value_t = 4)]
    s2_bands: usize,
    #[arg(long, default_value_t = 1.0)]
    occupancy_min: f64,
    #[arg(long, default_value_t = 5.0)]
    occupancy_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn cmd_synth(args: SynthArgs) -> Result<RunInfo> {
    let config = WorldConfig {
        width: args.width,
        height: args.height,
        n_regions: args.regions,
        n_blobs: args.blobs,
        occupancy_range: (args.occupancy_min, args.occupancy_max),
        noise_sigma: args.noise,
        n_s1_bands: args.s1_bands,
        n_s2_bands: args.s2_bands,
        seed: args.seed,
    };
    let world = generate_world(&config)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let dir = &args.out_dir;
    let mut outputs = Vec::new();

    outputs.push(save_stack(dir, "inputs", &world.inputs)?);
    for (grid, label) in world.inputs.members().iter().zip(world.inputs.timestamps()) {
        let _ = grid;
        outputs.push(dir.join(format!("inputs_{label}.gpk")));
    }
    for (name, grid) in [
        ("truth_population.gpk", &world.truth_population),
        ("truth_builtup.gpk", &world.truth_builtup),
        ("truth_occupancy.gpk", &world.truth_occupancy),
        ("builtup_labels.gpk", &world.builtup_labels),
    ] {
        let path = dir.join(name);
        write_grid(&path, grid)?;
        outputs.push(path);
    }
    let regions_path = dir.join("regions.gpk");
    write_region_map(&regions_path, &world.regions)?;
    outputs.push(regions_path);
    let census_path = dir.join("census.csv");
    std::fs::write(&census_path, census_to_csv(&world.census))?;
    outputs.push(census_path);
    let world_path = dir.join("world.json");
    std::fs::write(&world_path, serde_json::to_string_pretty(&config)?)?;
    outputs.push(world_path);

    Ok(RunInfo {
        seed: Some(args.seed),
        inputs: vec![],
        outputs,
        manifest_path: dir.join("run_manifest.json"),
    })
}

// ---------------------------------------------------------------------------
// rasterize
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
struct RasterizeArgs {
    #[arg(long)]
    geojson: PathBuf,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
    #[arg(long, default_value_t = 0.0)]
    origin_x: f64,
    #[arg(long, default_value_t = 0.0)]
    origin_y: f64,
    #[arg(long, default_value_t = 10.0)]
    pixel_size_x: f64,
    #[arg(long, default_value_t = 10.0)]
    pixel_size_y: f64,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_rasterize(args: RasterizeArgs) -> Result<RunInfo> {
    let text = std::fs::read_to_string(&args.geojson)?;
    let partition = parse_regions(&text)?;
    let transform =
        Transform::new(args.origin_x, args.origin_y, args.pixel_size_x, args.pixel_size_y);
    let map = crate::regions::rasterize(&partition, transform, args.width, args.height)?;
    write_region_map(&args.out, &map)?;
    Ok(RunInfo {
        seed: None,
        inputs: vec![args.geojson],
        outputs: vec![args.out.clone()],
        manifest_path: manifest_beside(&args.out),
    })
}

// ---------------------------------------------------------------------------
// composite
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
struct CompositeArgs {
    #[arg(long)]
    stack: PathBuf,
    /// "median" or "mean".
    #[arg(long)]
    method: String,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_composite(args: CompositeArgs) -> Result<RunInfo> {
    let stack = load_stack(&args.stack)?;
    let method = match args.method.as_str() {
        "median" => CompositeMethod::Median,
        "mean" => CompositeMethod::Mean,
        other => return Err(Error::Config(format!("unknown composite method {other:?}"))),
    };
    let out = composite(&stack, method)?;
    write_grid(&args.out, &out)?;
    Ok(RunInfo {
        seed: None,
        inputs: vec![args.stack],
        outputs: vec![args.out.clone()],
        manifest_path: manifest_beside(&args.out),
    })
}

// ---------------------------------------------------------------------------
// pretrain-builtup
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    stack: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    window_radius: usize,
    #[arg(long, default_value = "S1,S2")]
    groups: String,
    #[arg(long, default_value = "64,64")]
    hidden: String,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_pretrain(args: PretrainArgs) -> Result<RunInfo> {
    let stack = load_stack(&args.stack)?;
    let labels = read_grid(&args.labels)?;
    let config = FeatureConfig::new(args.window_radius, &parse_groups(&args.groups)?)?;
    let hidden = parse_hidden(&args.hidden)?;
    let branch =
        pretrain_builtup(&stack, &labels, &config, &hidden, args.epochs, args.seed, args.lr)?;
    std::fs::write(&args.out, serde_json::to_string_pretty(&branch)?)?;
    Ok(RunInfo {
        seed: Some(args.seed),
        inputs: vec![args.stack, args.labels],
        outputs: vec![args.out.clone()],
        manifest_path: manifest_beside(&args.out),
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    stack: PathBuf,
    #[arg(long)]
    regions: PathBuf,
    #[arg(long)]
    census: PathBuf,
    /// JSON TrainConfig; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    batch_regions: Option<usize>,
    #[arg(long)]
    lambda_wd: Option<f64>,
    /// Derive lambda_wd from a difficulty score instead.
    #[arg(long, conflicts_with = "lambda_wd")]
    difficulty: Option<f64>,
    #[arg(long)]
    brightness_sigma: Option<f64>,
    #[arg(long)]
    contrast_sigma: Option<f64>,
    /// factored | direct | external
    #[arg(long, default_value = "external")]
    variant: String,
    /// Band carrying external weights (external variant).
    #[arg(long, default_value = BUILTUP_REF_BAND)]
    external_band: String,
    /// Pretrained built-up branch JSON (factored variant).
    #[arg(long)]
    builtup_params: Option<PathBuf>,
    /// Initialize occupancy hidden layers from the built-up branch.
    #[arg(long, default_value_t = false)]
    transfer: bool,
    #[arg(long, default_value_t = 0)]
    window_radius: usize,
    #[arg(long, default_value = "S1,S2")]
    groups: String,
    #[arg(long, default_value = "64,64")]
    hidden: String,
    #[arg(long)]
    out_dir: PathBuf,
}

fn cmd_train(args: TrainArgs) -> Result<RunInfo> {
    let stack = load_stack(&args.stack)?;
    let map = read_region_map(&args.regions)?;
    let census = load_census_csv(&args.census)?;

    let mut config: TrainConfig = match &args.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if let Some(lr) = args.base_lr {
        config.base_lr = lr;
    }
    if let Some(batch) = args.batch_regions {
        config.batch_regions = batch;
    }
    if let Some(lambda) = args.lambda_wd {
        config.lambda_wd = lambda;
    }
    if let Some(difficulty) = args.difficulty {
        config.lambda_wd = weight_decay_from_difficulty(difficulty)?;
    }
    if let Some(sigma) = args.brightness_sigma {
        config.brightness_sigma = sigma;
    }
    if let Some(sigma) = args.contrast_sigma {
        config.contrast_sigma = sigma;
    }
    config.transfer_init = args.transfer;
    if config.epochs == 0 {
        return Err(Error::Config("epochs must be set (flag or config file)".into()));
    }

    let feature_config = FeatureConfig::new(args.window_radius, &parse_groups(&args.groups)?)?;
    let hidden = parse_hidden(&args.hidden)?;
    let grid = &stack.members()[0];
    let in_dim = feature_config.feature_len(grid);
    let occupancy = init_branch(in_dim, &hidden, HeadKind::Softplus, config.seed, true);

    let params0 = match args.variant.as_str() {
        "external" => PredictorParams {
            variant: Variant::ExternalWeights,
            builtup: None,
            occupancy,
            external_weight_band: Some(args.external_band.clone()),
            feature_config,
            provenance: Provenance::default(),
        },
        "direct" => PredictorParams {
            variant: Variant::Direct,
            builtup: None,
            occupancy,
            external_weight_band: None,
            feature_config,
            provenance: Provenance::default(),
        },
        "factored" => {
            let path = args.builtup_params.as_ref().ok_or_else(|| {
                Error::Config("factored variant requires --builtup-params".into())
            })?;
            let branch: BranchParams =
                serde_json::from_str(&std::fs::read_to_string(path)?)?;
            branch.check_shapes()?;
            PredictorParams {
                variant: Variant::Factored,
                builtup: Some(branch),
                occupancy,
                external_weight_band: None,
                feature_config,
                provenance: Provenance::default(),
            }
        }
        other => return Err(Error::Config(format!("unknown variant {other:?}"))),
    };

    let (trained, history) = train(&stack, &map, &census, &params0, &config)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let params_path = args.out_dir.join("params.json");
    std::fs::write(&params_path, trained.to_json())?;
    let history_path = args.out_dir.join("history.csv");
    std::fs::write(&history_path, history_to_csv(&history))?;
    let config_path = args.out_dir.join("train_config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&config)?)?;

    let mut inputs = vec![args.stack, args.regions, args.census];
    if let Some(path) = args.config {
        inputs.push(path);
    }
    if let Some(path) = args.builtup_params {
        inputs.push(path);
    }
    Ok(RunInfo {
        seed: Some(config.seed),
        inputs,
        outputs: vec![params_path, history_path, config_path],
        manifest_path: args.out_dir.join("run_manifest.json"),
    })
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    stack: PathBuf,
    /// Parameters of a single model.
    #[arg(long, conflicts_with = "bag")]
    params: Option<PathBuf>,
    /// Composite label to predict on (single-model mode).
    #[arg(long)]
    composite: Option<String>,
    /// Bag manifest JSON for ensemble prediction.
    #[arg(long)]
    bag: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_predict(args: PredictArgs) -> Result<RunInfo> {
    let stack = load_stack(&args.stack)?;
    let mut inputs = vec![args.stack.clone()];
    let out_grid = match (&args.params, &args.bag) {
        (Some(params_path), None) => {
            let params = PredictorParams::from_json(&std::fs::read_to_string(params_path)?)?;
            inputs.push(params_path.clone());
            let grid = match &args.composite {
                Some(label) => stack.member_by_timestamp(label)?,
                None => &stack.members()[0],
            };
            population_forward(grid, &params)?
        }
        (None, Some(bag_path)) => {
            let manifest: BagManifest =
                serde_json::from_str(&std::fs::read_to_string(bag_path)?)?;
            inputs.push(bag_path.clone());
            let base = bag_path.parent().unwrap_or_else(|| Path::new("."));
            let mut members = Vec::new();
            for member_path in &manifest.members {
                let resolved = base.join(member_path);
                let params =
                    PredictorParams::from_json(&std::fs::read_to_string(&resolved)?)?;
                inputs.push(resolved);
                members.push(BagMember { id: member_path.clone(), params });
            }
            let selected = select_composites(&stack, &manifest.composites)?;
            let bag = Bag::new(members, selected, manifest.mode)?;
            let (grid, count) = bag_predict(&bag)?;
            println!("bag estimates: {count}");
            grid
        }
        _ => {
            return Err(Error::Config(
                "predict needs exactly one of --params or --bag".into(),
            ))
        }
    };
    write_grid(&args.out, &out_grid)?;
    Ok(RunInfo {
        seed: None,
        inputs,
        outputs: vec![args.out.clone()],
        manifest_path: manifest_beside(&args.out),
    })
}

fn select_composites(stack: &GridStack, labels: &[String]) -> Result<GridStack> {
    if labels.is_empty() {
        return Ok(stack.clone());
    }
    let mut members = Vec::new();
    for label in labels {
        members.push(stack.member_by_timestamp(label)?.clone());
    }
    GridStack::new(members, labels.to_vec())
}

// ---------------------------------------------------------------------------
// disaggregate
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
struct DisaggregateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    regions: PathBuf,
    #[arg(long)]
    census: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Scale-factor report JSON (defaults next to --out).
    #[arg(long)]
    report: Option<PathBuf>,
}

fn cmd_disaggregate(args: DisaggregateArgs) -> Result<RunInfo> {
    let pred = read_grid(&args.pred)?;
    let map = read_region_map(&args.regions)?;
    let census = load_census_csv(&args.census)?;
    let (adjusted, report) = dasymetric_rescale(&pred, &map, &census)?;
    write_grid(&args.out, &adjusted)?;
    let report_path = args
        .report
        .unwrap_or_else(|| args.out.with_extension("report.json"));
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    Ok(RunInfo {
        seed: None,
        inputs: vec![args.pred, args.regions, args.census],
        outputs: vec![args.out.clone(), report_path],
        manifest_path: manifest_beside(&args.out),
    })
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Truth raster (grid evaluation).
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    factor: usize,
    /// Census blocks raster (block evaluation).
    #[arg(long, conflicts_with = "truth")]
    blocks: Option<PathBuf>,
    /// Block truth counts (block evaluation).
    #[arg(long)]
    truth_census: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also export a truth,pred scatter CSV.
    #[arg(long)]
    scatter: Option<PathBuf>,
    /// Scatter floor bin (values below collapse onto it).
    #[arg(long, default_value_t = 0.5)]
    scatter_floor: f64,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<RunInfo> {
    let pred = read_grid(&args.pred)?;
    let mut inputs = vec![args.pred.clone()];
    let mut outputs = Vec::new();
    let report = match (&args.truth, &args.blocks) {
        (Some(truth_path), None) => {
            let truth = read_grid(truth_path)?;
            inputs.push(truth_path.clone());
            if let Some(scatter_path) = &args.scatter {
                let (t, p) = aggregated_pairs(&pred, &truth, args.factor)?;
                std::fs::write(scatter_path, scatter_export(&t, &p, args.scatter_floor)?)?;
                outputs.push(scatter_path.clone());
            }
            evaluate_grid(&pred, &truth, args.factor)?
        }
        (None, Some(blocks_path)) => {
            let blocks = read_region_map(blocks_path)?;
            let census_path = args.truth_census.as_ref().ok_or_else(|| {
                Error::Config("block evaluation requires --truth-census".into())
            })?;
            let table = load_census_csv(census_path)?;
            inputs.push(blocks_path.clone());
            inputs.push(census_path.clone());
            evaluate_blocks(&pred, &blocks, &table)?
        }
        _ => {
            return Err(Error::Config(
                "evaluate needs exactly one of --truth or --blocks".into(),
            ))
        }
    };
    println!(
        "r2 = {:.6}  mae = {:.6}  rmse = {:.6}  n = {}  unit = {}",
        report.r2, report.mae, report.rmse, report.n, report.unit
    );
    std::fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
    outputs.insert(0, args.out.clone());
    Ok(RunInfo {
        seed: None,
        inputs,
        outputs,
        manifest_path: manifest_beside(&args.out),
    })
}

fn aggregated_pairs(pred: &Grid, truth: &Grid, factor: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let pred_agg = crate::grid::block_aggregate(pred, factor)?;
    let truth_agg = crate::grid::block_aggregate(truth, factor)?;
    let n = pred_agg.width() * pred_agg.height();
    let mut t = Vec::new();
    let mut p = Vec::new();
    for i in 0..n {
        if pred_agg.band_valid(0)[i] && truth_agg.band_valid(0)[i] {
            p.push(pred_agg.band_values(0)[i] as f64);
            t.push(truth_agg.band_values(0)[i] as f64);
        }
    }
    Ok((t, p))
}

// ---------------------------------------------------------------------------
// merge-regions
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
struct MergeRegionsArgs {
    #[arg(long)]
    regions: PathBuf,
    #[arg(long)]
    target: usize,
    #[arg(long)]
    out: PathBuf,
    /// Merge log JSON (defaults next to --out).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Census to fold along the merges.
    #[arg(long)]
    census: Option<PathBuf>,
    #[arg(long)]
    census_out: Option<PathBuf>,
}

#[derive(Serialize)]
struct MergeLogEntry {
    kept: u32,
    absorbed: u32,
    fallback: bool,
}

fn cmd_merge_regions(args: MergeRegionsArgs) -> Result<RunInfo> {
    let map = read_region_map(&args.regions)?;
    let mut inputs = vec![args.regions.clone()];
    let mut outputs = vec![args.out.clone()];
    let log = if let Some(census_path) = &args.census {
        let census = load_census_csv(census_path)?;
        inputs.push(census_path.clone());
        let (merged, folded, log) = coarsen_census(&map, &census, args.target)?;
        write_region_map(&args.out, &merged)?;
        let census_out = args
            .census_out
            .clone()
            .unwrap_or_else(|| args.out.with_extension("census.csv"));
        std::fs::write(&census_out, census_to_csv(&folded))?;
        outputs.push(census_out);
        log
    } else {
        let (merged, log) = merge_smallest(&map, args.target)?;
        write_region_map(&args.out, &merged)?;
        log
    };
    let log_path = args.log.unwrap_or_else(|| args.out.with_extension("merges.json"));
    let entries: Vec<MergeLogEntry> = log
        .iter()
        .map(|e| MergeLogEntry { kept: e.kept, absorbed: e.absorbed, fallback: e.fallback })
        .collect();
    std::fs::write(&log_path, serde_json::to_string_pretty(&entries)?)?;
    outputs.push(log_path);
    Ok(RunInfo {
        seed: None,
        inputs,
        outputs,
        manifest_path: manifest_beside(&args.out),
    })
}

// ---------------------------------------------------------------------------
// match-regions
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
struct MatchRegionsArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_match_regions(args: MatchRegionsArgs) -> Result<RunInfo> {
    let a = read_region_map(&args.a)?;
    let b = read_region_map(&args.b)?;
    let matches = iou_match(&a, &b, args.threshold)?;
    let mut csv = String::from("id_a,id_b,iou\n");
    for (ia, ib, iou) in &matches {
        csv.push_str(&format!("{ia},{ib},{iou}\n"));
    }
    std::fs::write(&args.out, csv)?;
    println!("{} matches at threshold {}", matches.len(), args.threshold);
    Ok(RunInfo {
        seed: None,
        inputs: vec![args.a, args.b],
        outputs: vec![args.out.clone()],
        manifest_path: manifest_beside(&args.out),
    })
}

// ---------------------------------------------------------------------------
// scale-report
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
struct ScaleReportArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    regions: PathBuf,
    #[arg(long)]
    census: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-region factors CSV (defaults next to --out).
    #[arg(long)]
    factors_csv: Option<PathBuf>,
}

fn cmd_scale_report(args: ScaleReportArgs) -> Result<RunInfo> {
    let pred = read_grid(&args.pred)?;
    let map = read_region_map(&args.regions)?;
    let census = load_census_csv(&args.census)?;
    let report = scale_factors(&pred, &map, &census)?;
    println!(
        "p10 = {:.4}  median = {:.4}  p90 = {:.4}  national estimate = {:.1}  national census = {:.1}",
        report.p10, report.median, report.p90, report.national_estimate, report.national_census
    );
    std::fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
    let csv_path =
        args.factors_csv.unwrap_or_else(|| args.out.with_extension("factors.csv"));
    std::fs::write(&csv_path, factors_to_csv(&report))?;
    Ok(RunInfo {
        seed: None,
        inputs: vec![args.pred, args.regions, args.census],
        outputs: vec![args.out.clone(), csv_path],
        manifest_path: manifest_beside(&args.out),
    })
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
struct AblateArgs {
    /// Experiment definition JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Deserialize)]
struct AblateConfig {
    /// architecture | ensembling | modality | scalability
    experiment: String,
    #[serde(default)]
    world: WorldConfig,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default = "default_hidden")]
    hidden: Vec<usize>,
    /// Architecture only: coarsen the census to this many regions.
    #[serde(default)]
    coarsen_to: Option<usize>,
    #[serde(default = "default_pretrain_epochs")]
    pretrain_epochs: usize,
    #[serde(default = "default_pretrain_lr")]
    pretrain_lr: f64,
    /// Scalability only: the region-count ladder.
    #[serde(default = "default_rungs")]
    rungs: Vec<usize>,
    /// Ensembling only: member count.
    #[serde(default = "default_members")]
    n_members: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}

fn default_pretrain_epochs() -> usize {
    150
}

fn default_pretrain_lr() -> f64 {
    1e-2
}

fn default_rungs() -> Vec<usize> {
    vec![100, 64, 32, 16]
}

fn default_members() -> usize {
    5
}

fn cmd_ablate(args: AblateArgs) -> Result<RunInfo> {
    let config: AblateConfig =
        serde_json::from_str(&std::fs::read_to_string(&args.config)?)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let world = generate_world(&config.world)?;
    let report_path = args.out_dir.join("report.json");
    match config.experiment.as_str() {
        "architecture" => {
            let (map, census) = match config.coarsen_to {
                Some(target) => {
                    let (m, c, _) = coarsen_census(&world.regions, &world.census, target)?;
                    (m, c)
                }
                None => (world.regions.clone(), world.census.clone()),
            };
            let report = run_architecture_ablation(
                &world,
                &map,
                &census,
                &config.seeds,
                &config.train,
                &config.hidden,
                config.pretrain_epochs,
                config.pretrain_lr,
            )?;
            std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
            for (case, r2) in &report.median_r2 {
                println!("{case}: median pixel r2 = {r2:.4}");
            }
        }
        "ensembling" => {
            let rows = run_ensembling_ablation(
                &world,
                config.n_members,
                &config.train,
                &config.hidden,
            )?;
            std::fs::write(&report_path, serde_json::to_string_pretty(&rows)?)?;
            for row in &rows {
                println!(
                    "{}: estimates = {}, r2 = {:.4}",
                    row.mode, row.estimates, row.pixel_r2
                );
            }
        }
        "modality" => {
            let rows =
                run_modality_ablation(&world, &config.seeds, &config.train, &config.hidden)?;
            std::fs::write(&report_path, serde_json::to_string_pretty(&rows)?)?;
            for row in &rows {
                println!("{:?} seed {}: r2 = {:.4}", row.groups, row.seed, row.pixel_r2);
            }
        }
        "scalability" => {
            let rows = run_scalability_ladder(
                &world,
                &config.rungs,
                &config.seeds,
                &config.train,
                &config.hidden,
            )?;
            std::fs::write(&report_path, serde_json::to_string_pretty(&rows)?)?;
            for row in &rows {
                println!(
                    "{} regions seed {}: r2 = {:.4}",
                    row.n_regions, row.seed, row.pixel_r2
                );
            }
        }
        other => return Err(Error::Config(format!("unknown experiment {other:?}"))),
    }
    Ok(RunInfo {
        seed: config.seeds.first().copied(),
        inputs: vec![args.config],
        outputs: vec![report_path],
        manifest_path: args.out_dir.join("run_manifest.json"),
    })
}
