//! Command-line front end tying the pipeline together: dataset
//! simulation, denoiser pretraining, Siamese training, reference
//! estimation, localization, evaluation, and rendering.
//!
//! Every command takes an explicit `--seed` (never the wall clock), so two
//! runs with identical flags produce identical artifacts. Default output
//! paths live under `./out`, or under `$NOISEPRINT_OUT` when that is set.
//! A TOML file passed with `--config` supplies per-subcommand flag
//! defaults (one table per subcommand, keys named like the flags);
//! explicit flags always win over the file.

use crate::denoiser::{pretrain_denoiser, PretrainConfig};
use crate::error::{Error, Result};
use crate::eval::{
    read_report_roc, run_benchmark, write_report, BenchmarkConfig, BenchmarkReport, Method,
    RocCurve,
};
use crate::fingerprint::{
    estimate_noiseprint_reference, estimate_prnu, load_noiseprint_reference, load_prnu_reference,
    reference_kind, save_noiseprint_reference, save_prnu_reference, WienerConfig,
};
use crate::io::{read_pgm, write_atomic, write_float_plane, write_mask_pgm};
use crate::io::read_float_plane;
use crate::localize::{
    noiseprint_heatmap, prnu_heatmap, render_heatmap_png, threshold, Aggregation, WindowConfig,
};
use crate::net::{NetConfig, NoiseprintNet};
use crate::nn::adam::AdamConfig;
use crate::plane::Plane;
use crate::siamese::{train_siamese, BatchSpec, LabelRule, TrainConfig, TrainImage};
use crate::simulate::{
    build_dataset, derived_rng, read_manifest, render_scene, DatasetConfig, DatasetManifest,
    Role,
};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use image::{Rgb, RgbImage};
use std::ffi::OsString;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

fn default_out(name: &str) -> PathBuf {
    let root = std::env::var_os("NOISEPRINT_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"));
    root.join(name)
}

#[derive(Debug, Parser)]
#[command(
    name = "noiseprint",
    version,
    about = "Camera-fingerprint extraction and image forgery localization",
    long_about = "Camera-fingerprint extraction and image forgery localization.\n\
                  Default output paths live under ./out, or under $NOISEPRINT_OUT when set.\n\
                  --config FILE reads flag defaults from a TOML file with one table per\n\
                  subcommand (keys named like the flags); explicit flags win."
)]
pub struct Cli {
    /// TOML file with per-subcommand flag defaults; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a synthetic multi-camera dataset with forged test images.
    Simulate(SimulateArgs),
    /// Pretrain a residual denoiser on synthetic scenes with AWGN.
    Pretrain(PretrainArgs),
    /// Train the fingerprint extractor with the Siamese distance loss.
    Train(TrainArgs),
    /// Estimate per-device reference fingerprints from pristine images.
    Estimate(EstimateArgs),
    /// Score one test image against a reference fingerprint.
    Localize(LocalizeArgs),
    /// Compute pixel-level metrics over a dataset's forged test images.
    Evaluate(EvaluateArgs),
    /// Sweep methods × reference counts and write a full report.
    Bench(BenchArgs),
    /// Render a heatmap or a report's ROC curve to PNG.
    Render(RenderArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Noiseprint,
    Prnu,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Noiseprint => Method::Noiseprint,
            MethodArg::Prnu => Method::Prnu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggregationArg {
    Mean,
    Max,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Aggregation {
        match a {
            AggregationArg::Mean => Aggregation::Mean,
            AggregationArg::Max => Aggregation::Max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelRuleArg {
    /// Positive pairs share camera model and patch position.
    ModelAndPosition,
    /// Ablation: positive pairs only need to share the camera model.
    ModelOnly,
}

impl From<LabelRuleArg> for LabelRule {
    fn from(r: LabelRuleArg) -> LabelRule {
        match r {
            LabelRuleArg::ModelAndPosition => LabelRule::ModelAndPosition,
            LabelRuleArg::ModelOnly => LabelRule::ModelOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Dataset output directory.
    #[arg(long, default_value_os_t = default_out("dataset"))]
    pub root: PathBuf,
    /// Master seed; every image derives its own stream from it.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Number of camera models.
    #[arg(long, default_value_t = 6)]
    pub models: usize,
    /// Devices per camera model.
    #[arg(long, default_value_t = 2)]
    pub devices: usize,
    /// Images per device.
    #[arg(long, default_value_t = 60)]
    pub images: usize,
    /// Camera models assigned to the training role.
    #[arg(long, default_value_t = 4)]
    pub train_models: usize,
    /// Camera models assigned to the validation role.
    #[arg(long, default_value_t = 1)]
    pub val_models: usize,
    /// Pristine reference images per test-side device.
    #[arg(long, default_value_t = 20)]
    pub reference_images: usize,
    /// Forged test images per test-side device.
    #[arg(long, default_value_t = 20)]
    pub forged_images: usize,
    /// Image width in pixels.
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    /// Image height in pixels.
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    /// Per-device PRNU strength σ_K.
    #[arg(long, default_value_t = 0.02)]
    pub prnu_sigma: f32,
    /// Model-pattern amplitude α.
    #[arg(long, default_value_t = 0.015)]
    pub amplitude: f32,
    /// Acquisition noise σ_n.
    #[arg(long, default_value_t = 0.01)]
    pub noise_sigma: f32,
    /// Pattern periods cycled across models.
    #[arg(long, value_delimiter = ',', action = ArgAction::Set, default_values_t = [4usize, 8])]
    pub periods: Vec<usize>,
    /// Block-quantization steps cycled across models (0 disables).
    #[arg(long, value_delimiter = ',', action = ArgAction::Set, default_values_t = [0.0f32, 0.02])]
    pub quantizations: Vec<f32>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Output path for the denoiser weights.
    #[arg(long, default_value_os_t = default_out("denoiser.net"))]
    pub out: PathBuf,
    /// Seed for weight init, scene rendering, and batch sampling.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Number of convolutional layers.
    #[arg(long, default_value_t = 8)]
    pub depth: usize,
    /// Channels per hidden layer.
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    /// Convolution kernel size.
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    /// AWGN level the denoiser trains against.
    #[arg(long, default_value_t = 0.04)]
    pub sigma: f32,
    /// Synthetic scenes rendered as training material.
    #[arg(long, default_value_t = 24)]
    pub scenes: usize,
    /// Side length of the rendered square scenes.
    #[arg(long, default_value_t = 128)]
    pub scene_size: usize,
    /// Training iterations.
    #[arg(long, default_value_t = 800)]
    pub iterations: usize,
    /// Patches per minibatch.
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Square patch side length.
    #[arg(long, default_value_t = 32)]
    pub patch: usize,
    /// ADAM learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root containing manifest.txt.
    #[arg(long, default_value_os_t = default_out("dataset"))]
    pub root: PathBuf,
    /// Output path for the extractor weights.
    #[arg(long, default_value_os_t = default_out("extractor.net"))]
    pub out: PathBuf,
    /// CSV training-log path.
    #[arg(long, default_value_os_t = default_out("train_log.csv"))]
    pub log: PathBuf,
    /// Warm-start weights (e.g. a pretrained denoiser). The architecture
    /// flags below apply to cold starts only.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Seed for weight init and batch sampling.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Number of convolutional layers.
    #[arg(long, default_value_t = 8)]
    pub depth: usize,
    /// Channels per hidden layer.
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    /// Convolution kernel size.
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    /// Training iterations.
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    /// ADAM learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f32,
    /// L2 decay on convolution weights.
    #[arg(long, default_value_t = 1e-5)]
    pub weight_decay: f32,
    /// Patch sets per minibatch.
    #[arg(long, default_value_t = 16)]
    pub sets: usize,
    /// Patches per set (same model, same position, distinct images).
    #[arg(long, default_value_t = 4)]
    pub set_size: usize,
    /// Square patch side length.
    #[arg(long, default_value_t = 32)]
    pub patch: usize,
    /// Position grid modulus for set sampling.
    #[arg(long, default_value_t = 8)]
    pub modulus: usize,
    /// Iterations between validation passes.
    #[arg(long, default_value_t = 50)]
    pub val_every: usize,
    /// Number of fixed validation batches.
    #[arg(long, default_value_t = 2)]
    pub val_batches: usize,
    /// Pair-labeling rule (model-only is the ablation).
    #[arg(long, value_enum, default_value_t = LabelRuleArg::ModelAndPosition)]
    pub label_rule: LabelRuleArg,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Dataset root containing manifest.txt.
    #[arg(long, default_value_os_t = default_out("dataset"))]
    pub root: PathBuf,
    /// Directory the reference files are written into.
    #[arg(long, default_value_os_t = default_out("references"))]
    pub out_dir: PathBuf,
    /// Extractor weights (required for the noiseprint method).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Methods to build references for.
    #[arg(long, value_enum, value_delimiter = ',', action = ArgAction::Set,
          default_values_t = [MethodArg::Noiseprint, MethodArg::Prnu])]
    pub methods: Vec<MethodArg>,
    /// Reference images per device (0 = all available).
    #[arg(long, default_value_t = 0)]
    pub n_ref: usize,
    /// Wiener window for the PRNU method.
    #[arg(long, default_value_t = 3)]
    pub wiener_window: usize,
    /// Accepted for uniformity; estimation itself is deterministic.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    /// Test image (16-bit PGM).
    #[arg(long)]
    pub image: PathBuf,
    /// Reference fingerprint file (kind read from its .meta sidecar).
    #[arg(long)]
    pub reference: PathBuf,
    /// Extractor weights (required for noiseprint references).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Heatmap output (float-plane file).
    #[arg(long, default_value_os_t = default_out("heatmap.fplane"))]
    pub out: PathBuf,
    /// Also render the heatmap to this PNG.
    #[arg(long)]
    pub png: Option<PathBuf>,
    /// Also threshold the heatmap into a binary mask at this score.
    #[arg(long)]
    pub threshold: Option<f32>,
    /// Mask output path (defaults next to --out when --threshold is set).
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
    /// Analysis window side length.
    #[arg(long, default_value_t = 64)]
    pub window: usize,
    /// Window stride.
    #[arg(long, default_value_t = 8)]
    pub stride: usize,
    /// How overlapping windows combine into pixel scores.
    #[arg(long, value_enum, default_value_t = AggregationArg::Mean)]
    pub aggregation: AggregationArg,
    /// Wiener window; must match the PRNU reference.
    #[arg(long, default_value_t = 3)]
    pub wiener_window: usize,
    /// Accepted for uniformity; localization itself is deterministic.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MetricFlags {
    /// Dataset root containing manifest.txt.
    #[arg(long, default_value_os_t = default_out("dataset"))]
    pub root: PathBuf,
    /// Extractor weights (required when methods include noiseprint).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Methods to evaluate.
    #[arg(long, value_enum, value_delimiter = ',', action = ArgAction::Set,
          default_values_t = [MethodArg::Noiseprint, MethodArg::Prnu])]
    pub methods: Vec<MethodArg>,
    /// Analysis window side length.
    #[arg(long, default_value_t = 64)]
    pub window: usize,
    /// Window stride.
    #[arg(long, default_value_t = 8)]
    pub stride: usize,
    /// How overlapping windows combine into pixel scores.
    #[arg(long, value_enum, default_value_t = AggregationArg::Mean)]
    pub aggregation: AggregationArg,
    /// Wiener window for the PRNU baseline.
    #[arg(long, default_value_t = 3)]
    pub wiener_window: usize,
    /// Accepted for uniformity; evaluation itself is deterministic.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: MetricFlags,
    /// Reference images per device (0 = all available).
    #[arg(long, default_value_t = 0)]
    pub n_ref: usize,
    /// Report output path.
    #[arg(long, default_value_os_t = default_out("metrics.txt"))]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: MetricFlags,
    /// Reference-count sweep; infeasible entries are skipped with a
    /// warning.
    #[arg(long, value_delimiter = ',', action = ArgAction::Set,
          default_values_t = [50usize, 10, 1])]
    pub n_refs: Vec<usize>,
    /// Report output path.
    #[arg(long, default_value_os_t = default_out("benchmark.txt"))]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("input").required(true)))]
pub struct RenderArgs {
    /// Heatmap float-plane to render.
    #[arg(long, group = "input")]
    pub heatmap: Option<PathBuf>,
    /// Metrics/benchmark report to plot a ROC curve from.
    #[arg(long, group = "input")]
    pub report: Option<PathBuf>,
    /// Cell method to plot (with --report).
    #[arg(long, value_enum, default_value_t = MethodArg::Noiseprint)]
    pub method: MethodArg,
    /// Cell reference count to plot (with --report).
    #[arg(long, default_value_t = 50)]
    pub n_ref: usize,
    /// Output PNG path.
    #[arg(long, default_value_os_t = default_out("render.png"))]
    pub out: PathBuf,
    /// Lower bound of a shared heatmap color scale (give --max too).
    #[arg(long)]
    pub min: Option<f32>,
    /// Upper bound of a shared heatmap color scale (give --min too).
    #[arg(long)]
    pub max: Option<f32>,
    /// Accepted for uniformity; rendering itself is deterministic.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

const SUBCOMMANDS: [&str; 8] = [
    "simulate", "pretrain", "train", "estimate", "localize", "evaluate", "bench", "render",
];

/// Splices flags derived from the `--config` TOML file in right after the
/// subcommand token, before the user's own flags. Scalar flags use
/// last-one-wins and list flags replace on re-occurrence, so anything
/// typed explicitly overrides the file.
fn config_layered_argv(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut config: Option<PathBuf> = None;
    let mut sub_idx: Option<usize> = None;
    let mut skip_next = false;
    for (i, tok) in argv.iter().enumerate().skip(1) {
        if skip_next {
            skip_next = false;
            continue;
        }
        let s = tok.to_string_lossy();
        if s == "--config" {
            if let Some(v) = argv.get(i + 1) {
                config = Some(PathBuf::from(v));
            }
            skip_next = true;
            continue;
        }
        if let Some(v) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
            continue;
        }
        if sub_idx.is_none() && !s.starts_with('-') && SUBCOMMANDS.contains(&s.as_ref()) {
            sub_idx = Some(i);
        }
    }
    let (Some(config), Some(sub_idx)) = (config, sub_idx) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&config).map_err(Error::io(&config))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::format(&config, 1, e.message().to_string()))?;
    let sub_name = argv[sub_idx].to_string_lossy().into_owned();
    let Some(section) = table.get(&sub_name) else {
        return Ok(argv);
    };
    let toml::Value::Table(section) = section else {
        return Err(Error::InvalidArgument(format!(
            "config section [{sub_name}] must be a table of flag values"
        )));
    };
    let mut flags: Vec<OsString> = Vec::new();
    for (key, value) in section {
        let flag: OsString = format!("--{}", key.replace('_', "-")).into();
        let scalar = |v: &toml::Value| -> Result<String> {
            match v {
                toml::Value::String(s) => Ok(s.clone()),
                toml::Value::Integer(i) => Ok(i.to_string()),
                toml::Value::Float(f) => Ok(f.to_string()),
                other => Err(Error::InvalidArgument(format!(
                    "config key {sub_name}.{key} has unsupported type {}",
                    other.type_str()
                ))),
            }
        };
        match value {
            toml::Value::Boolean(true) => flags.push(flag),
            toml::Value::Boolean(false) => {}
            toml::Value::Array(items) => {
                let parts =
                    items.iter().map(scalar).collect::<Result<Vec<String>>>()?.join(",");
                flags.push(flag);
                flags.push(parts.into());
            }
            other => {
                let v = scalar(other)?;
                flags.push(flag);
                flags.push(v.into());
            }
        }
    }
    let mut out = argv;
    out.splice(sub_idx + 1..sub_idx + 1, flags);
    Ok(out)
}

/// Makes every flag of every subcommand override its own earlier
/// occurrences, so the config layer's injected tokens lose to flags the
/// user typed afterwards.
fn self_overriding(mut cmd: clap::Command) -> clap::Command {
    fn override_args(cmd: clap::Command) -> clap::Command {
        cmd.mut_args(|a| {
            let id = a.get_id().clone();
            a.overrides_with(id)
        })
    }
    cmd = override_args(cmd);
    let subs: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in subs {
        cmd = cmd.mut_subcommand(name, override_args);
    }
    cmd
}

fn parse_cli(argv: Vec<OsString>) -> std::result::Result<Cli, Box<clap::Error>> {
    let mut cmd = self_overriding(<Cli as clap::CommandFactory>::command());
    let matches = cmd.try_get_matches_from_mut(argv).map_err(Box::new)?;
    <Cli as clap::FromArgMatches>::from_arg_matches(&matches).map_err(Box::new)
}

enum RunFailure {
    Usage(Box<clap::Error>),
    Op(Error),
}

fn execute(argv: Vec<OsString>) -> std::result::Result<(), RunFailure> {
    let argv = config_layered_argv(argv).map_err(RunFailure::Op)?;
    let cli = parse_cli(argv).map_err(RunFailure::Usage)?;
    dispatch(cli.command).map_err(RunFailure::Op)
}

/// Process entry point: parses the real argv and runs the command.
/// Operational failures print a single `error: …` line and exit nonzero.
pub fn main_entry() -> ExitCode {
    match execute(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(RunFailure::Usage(e)) => e.exit(),
        Err(RunFailure::Op(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Runs one invocation from explicit arguments (the program name goes
/// first), for tests and embedding. Usage problems surface as errors
/// except `--help`/`--version`, which print and succeed.
pub fn run(argv: &[&str]) -> Result<()> {
    match execute(argv.iter().map(OsString::from).collect()) {
        Ok(()) => Ok(()),
        Err(RunFailure::Usage(e)) => match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                print!("{e}");
                Ok(())
            }
            _ => Err(Error::InvalidArgument(e.to_string())),
        },
        Err(RunFailure::Op(e)) => Err(e),
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Localize(a) => cmd_localize(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Render(a) => cmd_render(a),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
        }
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let config = DatasetConfig {
        root: a.root.clone(),
        models: a.models,
        devices_per_model: a.devices,
        images_per_device: a.images,
        train_models: a.train_models,
        val_models: a.val_models,
        reference_images: a.reference_images,
        forged_images: a.forged_images,
        width: a.width,
        height: a.height,
        prnu_sigma: a.prnu_sigma,
        amplitude: a.amplitude,
        noise_sigma: a.noise_sigma,
        periods: a.periods,
        quantizations: a.quantizations,
        seed: a.seed,
    };
    let manifest = build_dataset(&config)?;
    let forged = manifest.records_with_role(Role::ForgedTest).count();
    println!(
        "wrote {} images ({} forged) under {}",
        manifest.records.len(),
        forged,
        a.root.display()
    );
    println!("manifest at {}", a.root.join("manifest.txt").display());
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let net_config = NetConfig { depth: a.depth, channels: a.channels, kernel: a.kernel };
    net_config.validate()?;
    let scenes = (0..a.scenes)
        .map(|i| {
            render_scene(
                &mut derived_rng(a.seed, &[0x5CE4E, i as u64]),
                a.scene_size,
                a.scene_size,
            )
        })
        .collect::<Result<Vec<Plane>>>()?;
    let mut net = NoiseprintNet::he_init(net_config, &mut derived_rng(a.seed, &[0x141217]))?;
    let config = PretrainConfig {
        iters: a.iterations,
        batch: a.batch,
        patch: a.patch,
        adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
        seed: a.seed,
    };
    let outcome = pretrain_denoiser(&mut net, &scenes, a.sigma, &config)?;
    ensure_parent(&a.out)?;
    net.save(&a.out)?;
    let final_loss = outcome.loss_history.last().copied().unwrap_or(f64::NAN);
    println!("saved denoiser weights to {}", a.out.display());
    println!("final pretraining loss {final_loss:.6e} after {} iterations", a.iterations);
    Ok(())
}

fn to_train_images(records: Vec<(crate::simulate::ManifestRecord, Plane)>) -> Vec<TrainImage> {
    records
        .into_iter()
        .enumerate()
        .map(|(i, (rec, pixels))| TrainImage {
            model_id: rec.model_id,
            device_id: rec.device_id,
            image_id: i,
            pixels,
        })
        .collect()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let manifest = read_manifest(&a.root.join("manifest.txt"))?;
    let train = to_train_images(crate::simulate::load_role_images(
        &a.root,
        &manifest,
        &[Role::Train],
    )?);
    let val = to_train_images(crate::simulate::load_role_images(
        &a.root,
        &manifest,
        &[Role::Validation],
    )?);
    let mut net = match &a.init {
        Some(path) => NoiseprintNet::load(path)?,
        None => NoiseprintNet::he_init(
            NetConfig { depth: a.depth, channels: a.channels, kernel: a.kernel },
            &mut derived_rng(a.seed, &[0x141217]),
        )?,
    };
    ensure_parent(&a.log)?;
    ensure_parent(&a.out)?;
    let config = TrainConfig {
        batch: BatchSpec {
            n_sets: a.sets,
            set_size: a.set_size,
            patch: a.patch,
            position_modulus: a.modulus,
        },
        iters: a.iterations,
        adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
        weight_decay: a.weight_decay,
        val_every: a.val_every,
        val_batches: a.val_batches,
        seed: a.seed,
        label_rule: a.label_rule.into(),
        log_path: Some(a.log.clone()),
    };
    let outcome = train_siamese(&mut net, &train, &val, &config)?;
    net.save(&a.out)?;
    println!("saved extractor weights to {}", a.out.display());
    println!(
        "best validation at iteration {}: loss {:.6e}, positive mean {:.6e}, negative mean {:.6e} (ratio {:.3})",
        outcome.best.iteration,
        outcome.best.loss,
        outcome.best.pos_mean,
        outcome.best.neg_mean,
        outcome.best.pos_mean / outcome.best.neg_mean
    );
    println!("training log at {}", a.log.display());
    Ok(())
}

/// Reference-role images grouped per (model, device), in manifest order.
fn reference_groups(
    root: &Path,
    manifest: &DatasetManifest,
) -> Result<Vec<((usize, usize), Vec<Plane>)>> {
    let mut groups: Vec<((usize, usize), Vec<Plane>)> = Vec::new();
    for rec in &manifest.records {
        if rec.role != Role::Reference {
            continue;
        }
        let img = read_pgm(&root.join(&rec.path))?;
        let key = (rec.model_id, rec.device_id);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(img),
            None => groups.push((key, vec![img])),
        }
    }
    if groups.is_empty() {
        return Err(Error::Infeasible(
            "manifest lists no reference-role images".into(),
        ));
    }
    Ok(groups)
}

fn wiener_from_flag(window: usize) -> Result<WienerConfig> {
    WienerConfig::new(window, WienerConfig::default().noise_variance())
}

fn cmd_estimate(a: EstimateArgs) -> Result<()> {
    let manifest = read_manifest(&a.root.join("manifest.txt"))?;
    let groups = reference_groups(&a.root, &manifest)?;
    let net = match (&a.weights, a.methods.contains(&MethodArg::Noiseprint)) {
        (Some(path), true) => Some(NoiseprintNet::load(path)?),
        (None, true) => {
            return Err(Error::InvalidArgument(
                "the noiseprint method needs --weights".into(),
            ))
        }
        _ => None,
    };
    let wiener = wiener_from_flag(a.wiener_window)?;
    std::fs::create_dir_all(&a.out_dir).map_err(Error::io(&a.out_dir))?;
    let mut written = 0usize;
    for ((model, device), images) in &groups {
        let n = if a.n_ref == 0 { images.len() } else { a.n_ref };
        if n > images.len() {
            return Err(Error::InvalidArgument(format!(
                "device m{model:02}_d{device:02} has {} reference images, {n} requested",
                images.len()
            )));
        }
        let source = format!("m{model:02}_d{device:02} n={n}");
        for method in &a.methods {
            match method {
                MethodArg::Noiseprint => {
                    let net = net.as_ref().expect("checked above");
                    let mut r = estimate_noiseprint_reference(&images[..n], net)?;
                    r.source = source.clone();
                    let path = a.out_dir.join(format!("m{model:02}_d{device:02}.noiseprint.ref"));
                    save_noiseprint_reference(&path, &r)?;
                    println!("wrote {}", path.display());
                    written += 1;
                }
                MethodArg::Prnu => {
                    let mut r = if n == 1 {
                        eprintln!(
                            "note: single-image PRNU estimate for m{model:02}_d{device:02}"
                        );
                        estimate_prnu(&[images[0].clone(), images[0].clone()], &wiener)?
                    } else {
                        estimate_prnu(&images[..n], &wiener)?
                    };
                    r.n_images = n;
                    r.source = source.clone();
                    let path = a.out_dir.join(format!("m{model:02}_d{device:02}.prnu.ref"));
                    save_prnu_reference(&path, &r)?;
                    println!("wrote {}", path.display());
                    written += 1;
                }
            }
        }
    }
    println!("{written} reference files under {}", a.out_dir.display());
    Ok(())
}

fn cmd_localize(a: LocalizeArgs) -> Result<()> {
    let image = read_pgm(&a.image)?;
    let window = WindowConfig {
        window: a.window,
        stride: a.stride,
        aggregation: a.aggregation.into(),
    };
    let kind = reference_kind(&a.reference)?;
    let heat = match kind.as_str() {
        "noiseprint" => {
            let weights = a.weights.as_ref().ok_or_else(|| {
                Error::InvalidArgument("a noiseprint reference needs --weights".into())
            })?;
            let net = NoiseprintNet::load(weights)?;
            let reference = load_noiseprint_reference(&a.reference)?;
            let digest = net.weights_digest();
            if reference.extractor_id != digest {
                return Err(Error::InvalidArgument(format!(
                    "reference was built with extractor {}, but the supplied weights digest is {digest}",
                    reference.extractor_id
                )));
            }
            let residual = net.extract_residual(&image)?;
            noiseprint_heatmap(&residual, &reference, &window)?
        }
        "prnu" => {
            let reference = load_prnu_reference(&a.reference)?;
            let wiener = wiener_from_flag(a.wiener_window)?;
            prnu_heatmap(&image, &reference, &wiener, &window)?
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown reference kind \"{other}\" at {}",
                a.reference.display()
            )))
        }
    };
    ensure_parent(&a.out)?;
    write_float_plane(&a.out, &heat)?;
    let (lo, hi) = heat.min_max();
    println!("wrote heatmap to {} (scores {lo:.4e}..{hi:.4e})", a.out.display());
    if let Some(png) = &a.png {
        ensure_parent(png)?;
        render_heatmap_png(&heat, png, None)?;
        println!("wrote {}", png.display());
    }
    if let Some(tau) = a.threshold {
        let mask = threshold(&heat, tau);
        let mask_path = a
            .mask_out
            .clone()
            .unwrap_or_else(|| crate::io::path_with_suffix(&a.out, ".mask.pgm"));
        ensure_parent(&mask_path)?;
        write_mask_pgm(&mask_path, &mask)?;
        println!(
            "wrote mask to {} ({} pixels above {tau})",
            mask_path.display(),
            mask.count_set()
        );
    }
    Ok(())
}

fn min_reference_count(manifest: &DatasetManifest) -> Result<usize> {
    let mut counts: Vec<((usize, usize), usize)> = Vec::new();
    for rec in &manifest.records {
        if rec.role != Role::Reference {
            continue;
        }
        let key = (rec.model_id, rec.device_id);
        match counts.iter_mut().find(|(k, _)| *k == key) {
            Some((_, c)) => *c += 1,
            None => counts.push((key, 1)),
        }
    }
    counts
        .iter()
        .map(|&(_, c)| c)
        .min()
        .ok_or_else(|| Error::Infeasible("manifest lists no reference-role images".into()))
}

fn run_metrics(common: &MetricFlags, n_refs: Vec<usize>, out: &Path) -> Result<()> {
    let manifest = read_manifest(&common.root.join("manifest.txt"))?;
    let methods: Vec<Method> = common.methods.iter().map(|&m| m.into()).collect();
    let net = match (&common.weights, methods.contains(&Method::Noiseprint)) {
        (Some(path), true) => Some(NoiseprintNet::load(path)?),
        (None, true) => {
            return Err(Error::InvalidArgument(
                "the noiseprint method needs --weights".into(),
            ))
        }
        _ => None,
    };
    let config = BenchmarkConfig {
        methods,
        n_refs,
        window: WindowConfig {
            window: common.window,
            stride: common.stride,
            aggregation: common.aggregation.into(),
        },
        wiener: wiener_from_flag(common.wiener_window)?,
    };
    let report = run_benchmark(&common.root, &manifest, net.as_ref(), &config)?;
    ensure_parent(out)?;
    write_report(out, &report)?;
    print_report_summary(&report, out);
    Ok(())
}

fn print_report_summary(report: &BenchmarkReport, out: &Path) {
    println!("wrote report to {}", out.display());
    for cell in &report.cells {
        println!(
            "cell {} n_ref={}: auc {:.4} f1 {:.4} f1_oracle {:.4} over {} images",
            cell.method.as_str(),
            cell.n_ref,
            cell.auc,
            cell.f1,
            cell.f1_oracle,
            cell.n_images
        );
    }
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let n_ref = if a.n_ref == 0 {
        let manifest = read_manifest(&a.common.root.join("manifest.txt"))?;
        min_reference_count(&manifest)?
    } else {
        a.n_ref
    };
    run_metrics(&a.common, vec![n_ref], &a.out)
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    run_metrics(&a.common, a.n_refs, &a.out)
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    if let Some(heatmap) = &a.heatmap {
        let plane = read_float_plane(heatmap)?;
        let bounds = match (a.min, a.max) {
            (Some(lo), Some(hi)) => Some((lo, hi)),
            (None, None) => None,
            _ => {
                return Err(Error::InvalidArgument(
                    "a shared color scale needs both --min and --max".into(),
                ))
            }
        };
        ensure_parent(&a.out)?;
        let rendered = render_heatmap_png(&plane, &a.out, bounds)?;
        println!(
            "wrote {} (scale {:.4e}..{:.4e})",
            a.out.display(),
            rendered.lo,
            rendered.hi
        );
        return Ok(());
    }
    let report = a.report.as_ref().expect("clap group requires one input");
    let roc = read_report_roc(report, a.method.into(), a.n_ref)?;
    let plot = roc_plot_image(&roc, 640);
    let mut bytes = Vec::new();
    image::DynamicImage::ImageRgb8(plot)
        .write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::InvalidArgument(format!("PNG encoding failed: {e}")))?;
    ensure_parent(&a.out)?;
    write_atomic(&a.out, &bytes)?;
    println!(
        "wrote ROC plot for {} n_ref={} to {} ({} points)",
        match a.method {
            MethodArg::Noiseprint => "noiseprint",
            MethodArg::Prnu => "prnu",
        },
        a.n_ref,
        a.out.display(),
        roc.points.len()
    );
    Ok(())
}

fn draw_line(img: &mut RgbImage, a: (i32, i32), b: (i32, i32), color: Rgb<u8>) {
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let dy = -(y1 - y0).abs();
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, color);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Plain raster plot of a ROC curve: unit box with quarter gridlines, the
/// chance diagonal, and the curve itself.
fn roc_plot_image(roc: &RocCurve, size: u32) -> RgbImage {
    let margin = 40i32;
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let lo = margin;
    let hi = size as i32 - margin;
    let span = (hi - lo) as f64;
    let to_px = |fpr: f64, tpr: f64| -> (i32, i32) {
        let x = lo as f64 + fpr.clamp(0.0, 1.0) * span;
        let y = hi as f64 - tpr.clamp(0.0, 1.0) * span;
        (x.round() as i32, y.round() as i32)
    };
    let grid = Rgb([225, 225, 225]);
    for q in 1..4 {
        let at = lo + (q * (hi - lo)) / 4;
        draw_line(&mut img, (at, lo), (at, hi), grid);
        draw_line(&mut img, (lo, at), (hi, at), grid);
    }
    draw_line(&mut img, (lo, hi), (hi, lo), Rgb([170, 170, 170]));
    let frame = Rgb([0, 0, 0]);
    draw_line(&mut img, (lo, lo), (hi, lo), frame);
    draw_line(&mut img, (hi, lo), (hi, hi), frame);
    draw_line(&mut img, (hi, hi), (lo, hi), frame);
    draw_line(&mut img, (lo, hi), (lo, lo), frame);
    let curve = Rgb([30, 90, 200]);
    for pair in roc.points.windows(2) {
        let a = to_px(pair[0].fpr, pair[0].tpr);
        let b = to_px(pair[1].fpr, pair[1].tpr);
        draw_line(&mut img, a, b, curve);
        draw_line(&mut img, (a.0, a.1 + 1), (b.0, b.1 + 1), curve);
    }
    img
}
