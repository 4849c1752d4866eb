//! Command-line surface. Every command prints one JSON summary line on
//! success; failures become a `{"error": {...}}` line and a nonzero exit.

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tch::Tensor;

use styleres::checkpoint::CheckpointBundle;
use styleres::editops::{apply_edit, discover_attribute_directions, parse_layer_spec, DirectionBank, EditSpec, DEFAULT_BETA};
use styleres::evalharness::{run_protocol, ProtocolConfig, VariantSource};
use styleres::experiment::{run_experiment, Profile};
use styleres::models::Models;
use styleres::shapesdata::{load_folder, measure_attributes, sample_dataset, save_png, FolderItem, ImageBatch, Measurement};
use styleres::trainer::{train, Stage, TrainConfig};

use crate::service::{serve, AppState, LoadedModel, ServiceConfig};

#[derive(Parser, Debug)]
#[command(name = "styleres", version, about = "Residual-feature GAN inversion and editing on synthetic shapes")]
pub struct Cli {
    /// Master seed (data rendering, sampling, training).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Compute device; only `cpu` is supported.
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
    /// Image resolution for data commands; checked against checkpoints elsewhere.
    #[arg(long, global = true)]
    pub resolution: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthetic dataset utilities.
    Data {
        #[command(subcommand)]
        action: DataCommand,
    },
    /// Train one stage.
    Train(TrainArgs),
    /// Edit-direction discovery.
    Directions {
        #[command(subcommand)]
        action: DirectionsCommand,
    },
    /// Reconstruct a folder of PNGs.
    Invert(InvertArgs),
    /// Apply a named direction to a folder of PNGs.
    Edit(EditArgs),
    /// Run the evaluation protocol over trained variants.
    Eval(EvalArgs),
    /// Serve the HTTP inference API.
    Serve(ServeArgs),
    /// Train every stage and variant, then evaluate.
    Experiment(ExperimentArgs),
}

#[derive(Subcommand, Debug)]
pub enum DataCommand {
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    Inspect {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StageArg {
    Classifier,
    Gan,
    E0,
    Styleres,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Classifier => Stage::Classifier,
            StageArg::Gan => Stage::Gan,
            StageArg::E0 => Stage::E0,
            StageArg::Styleres => Stage::Styleres,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub stage: StageArg,
    /// JSON training config; missing fields take defaults.
    #[arg(long, conflicts_with = "profile")]
    pub config: Option<PathBuf>,
    /// Use a named profile's config for the stage instead of a file.
    #[arg(long)]
    pub profile: Option<String>,
    /// Checkpoint of the previous stage.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Interrupted checkpoint of this stage.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MethodArg {
    Supervised,
    Pca,
    All,
}

#[derive(Subcommand, Debug)]
pub enum DirectionsCommand {
    Discover {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        method: MethodArg,
        /// Latent samples to generate and label.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        pca_components: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct InvertArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EditArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub directions: PathBuf,
    #[arg(long)]
    pub direction: String,
    #[arg(long, default_value_t = DEFAULT_BETA, allow_negative_numbers = true)]
    pub beta: f64,
    /// Style rows to edit, e.g. `0-3,7`.
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Comma-separated `name=checkpoint` pairs.
    #[arg(long)]
    pub variants: String,
    #[arg(long)]
    pub directions: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// Extra PNG folder appended to the eval set.
    #[arg(long)]
    pub extra: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Defaults to $STYLERES_CKPT.
    #[arg(long, env = "STYLERES_CKPT")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub directions: Option<PathBuf>,
    #[arg(long)]
    pub cors_origin: Option<String>,
    #[arg(long, default_value_t = 1800)]
    pub ttl_secs: u64,
    #[arg(long, default_value_t = 256)]
    pub max_sessions: usize,
    #[arg(long, default_value_t = 4 << 20)]
    pub max_upload_bytes: usize,
    /// Built UI assets, served under /ui.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    #[arg(long, default_value = "lite")]
    pub profile: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Load stages whose final checkpoint matches the config instead of retraining.
    #[arg(long)]
    pub reuse: bool,
}

/// Failure reported to the user as a JSON line.
#[derive(Debug)]
pub struct CliError {
    pub code: String,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: "usage".into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.code == "usage" {
            2
        } else {
            1
        }
    }

    pub fn to_json(&self) -> Value {
        json!({"error": {"code": self.code, "message": self.message}})
    }
}

impl From<styleres::Error> for CliError {
    fn from(e: styleres::Error) -> Self {
        Self {
            code: e.code().into(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        styleres::Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn existing(path: &Path) -> CliResult<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::usage(format!("no such file or directory: {}", path.display())))
    }
}

fn load_bundle(path: &Path) -> CliResult<CheckpointBundle> {
    Ok(CheckpointBundle::load(existing(path)?)?)
}

fn check_resolution(cli: &Cli, models: &Models) -> CliResult<()> {
    match cli.resolution {
        Some(r) if r != models.config.resolution() => Err(CliError::usage(format!(
            "--resolution {r} does not match the checkpoint's {}",
            models.config.resolution()
        ))),
        _ => Ok(()),
    }
}

pub fn run(cli: &Cli) -> CliResult<Value> {
    if cli.device != "cpu" {
        return Err(CliError::usage(format!("unsupported device `{}`; only `cpu` is available", cli.device)));
    }
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Data { action } => match action {
            DataCommand::Synth { n, out } => data_synth(seed, *n, cli.resolution.unwrap_or(64), out),
            DataCommand::Inspect { input } => data_inspect(existing(input)?, cli.resolution.unwrap_or(64)),
        },
        Command::Train(a) => train_cmd(cli, a),
        Command::Directions {
            action: DirectionsCommand::Discover {
                ckpt,
                method,
                n,
                pca_components,
                out,
            },
        } => discover(cli, seed, ckpt, *method, *n, *pca_components, out),
        Command::Invert(a) => invert_cmd(cli, a),
        Command::Edit(a) => edit_cmd(cli, a),
        Command::Eval(a) => eval_cmd(seed, a),
        Command::Serve(a) => serve_cmd(a),
        Command::Experiment(a) => {
            let profile = Profile::by_name(&a.profile).map_err(|e| CliError::usage(e.to_string()))?;
            let outcome = run_experiment(&profile, seed, &a.out, a.reuse)?;
            Ok(json!({
                "profile": outcome.profile,
                "seed": outcome.seed,
                "report": outcome.report_path,
                "stage_seconds": outcome.stage_seconds,
            }))
        }
    }
}

fn data_synth(seed: u64, n: usize, resolution: usize, out: &Path) -> CliResult<Value> {
    fs::create_dir_all(out)?;
    let data = sample_dataset(seed, n, resolution)?;
    let mut index = fs::File::create(out.join("attributes.jsonl"))?;
    for (i, (img, attrs)) in data.iter().enumerate() {
        let file = format!("{i:05}.png");
        save_png(img, 0, out.join(&file))?;
        let mut line = serde_json::to_value(attrs).map_err(styleres::Error::from)?;
        line["file"] = json!(file);
        writeln!(index, "{line}")?;
    }
    Ok(json!({"written": n, "resolution": resolution, "out": out}))
}

fn data_inspect(input: &Path, resolution: usize) -> CliResult<Value> {
    let (mut images, mut unmeasurable) = (0usize, 0usize);
    let mut skipped = Vec::new();
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for item in load_folder(input, resolution)? {
        match item {
            FolderItem::Warning { path, message } => skipped.push(json!({"path": path, "message": message})),
            FolderItem::Image { image, .. } => {
                images += 1;
                match measure_attributes(&image) {
                    Measurement::Measured(a) => {
                        for (k, v) in [a.size, a.pos_x, a.pos_y].into_iter().enumerate() {
                            if let Some(v) = v {
                                sums[k] += v;
                                counts[k] += 1;
                            }
                        }
                    }
                    _ => unmeasurable += 1,
                }
            }
        }
    }
    let mean = |k: usize| (counts[k] > 0).then(|| sums[k] / counts[k] as f64);
    Ok(json!({
        "images": images,
        "unmeasurable": unmeasurable,
        "skipped": skipped,
        "mean_size": mean(0),
        "mean_pos_x": mean(1),
        "mean_pos_y": mean(2),
    }))
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> CliResult<Value> {
    let stage = Stage::from(a.stage);
    let mut cfg = match (&a.config, &a.profile) {
        (Some(path), _) => {
            let text = fs::read_to_string(existing(path)?)?;
            serde_json::from_str::<TrainConfig>(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
        }
        (None, Some(name)) => Profile::by_name(name)
            .map_err(|e| CliError::usage(e.to_string()))?
            .stage_config(stage, cli.seed.unwrap_or(0)),
        (None, None) => TrainConfig::default(),
    };
    cfg.stage = stage;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(it) = a.iterations {
        cfg.iterations = it;
    }
    if let Some(r) = cli.resolution {
        if r != cfg.model.resolution() {
            return Err(CliError::usage(format!("--resolution {r} does not match the config's {}", cfg.model.resolution())));
        }
    }
    let init = a.init.as_deref().map(load_bundle).transpose()?;
    let resume = a.resume.as_deref().map(load_bundle).transpose()?;
    let bundle = train(&cfg, init.as_ref(), resume.as_ref(), &a.out)?;
    Ok(json!({
        "stage": stage.name(),
        "iteration": bundle.metadata.get("iteration"),
        "checkpoint": a.out.join("final.ckpt"),
    }))
}

#[allow(clippy::too_many_arguments)]
fn discover(
    cli: &Cli,
    seed: u64,
    ckpt: &Path,
    method: MethodArg,
    n: usize,
    pca_components: usize,
    out: &Path,
) -> CliResult<Value> {
    let models = Models::from_bundle(&load_bundle(ckpt)?)?;
    check_resolution(cli, &models)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pcs = if matches!(method, MethodArg::Supervised) { 0 } else { pca_components };
    let found = discover_attribute_directions(models.generator()?, n, &mut rng, pcs)?;
    let keep = |m: &str| match method {
        MethodArg::Supervised => m == "supervised",
        MethodArg::Pca => m == "pca",
        MethodArg::All => true,
    };
    let mut bank = DirectionBank::default();
    for (name, e) in found.iter().filter(|(_, e)| keep(&e.method)) {
        let v: Vec<f64> = e.vector.iter().map(|&x| x as f64).collect();
        bank.insert(name, &v, &e.method, e.score)?;
    }
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    bank.save(out)?;
    Ok(json!({
        "directions": bank.iter().map(|(k, e)| json!({"name": k, "method": e.method, "score": e.score})).collect::<Vec<_>>(),
        "out": out,
    }))
}

/// Runs `f` on every decodable image of `input`, writing `<stem>.png`.
fn map_folder(
    models: &Models,
    input: &Path,
    out: &Path,
    f: impl Fn(&Tensor) -> styleres::Result<Tensor>,
) -> CliResult<Value> {
    fs::create_dir_all(out)?;
    let mut written = 0;
    let mut skipped = Vec::new();
    for item in load_folder(existing(input)?, models.config.resolution())? {
        match item {
            FolderItem::Warning { path, message } => skipped.push(json!({"path": path, "message": message})),
            FolderItem::Image { path, image } => {
                let y = tch::no_grad(|| f(&image.to_tensor()))?;
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                save_png(&ImageBatch::from_tensor(&y)?, 0, out.join(format!("{stem}.png")))?;
                written += 1;
            }
        }
    }
    Ok(json!({"written": written, "skipped": skipped, "out": out}))
}

fn invert_cmd(cli: &Cli, a: &InvertArgs) -> CliResult<Value> {
    let models = Models::from_bundle(&load_bundle(&a.ckpt)?)?;
    check_resolution(cli, &models)?;
    let p = models.pipeline(models.res.is_some())?;
    map_folder(&models, &a.input, &a.out, |x| {
        let enc = p.encode(x)?;
        Ok(p.from_codes(&enc.f0, &enc.wplus, &enc.wplus)?.image)
    })
}

fn edit_cmd(cli: &Cli, a: &EditArgs) -> CliResult<Value> {
    let models = Models::from_bundle(&load_bundle(&a.ckpt)?)?;
    check_resolution(cli, &models)?;
    let bank = DirectionBank::load(existing(&a.directions)?)?;
    let entry = bank
        .get(&a.direction)
        .ok_or_else(|| CliError::usage(format!("direction `{}` is not in {}", a.direction, a.directions.display())))?;
    let layers = a
        .layers
        .as_deref()
        .map(|s| parse_layer_spec(s, models.config.generator.num_layers()))
        .transpose()?;
    let spec = EditSpec::direction(entry.vector.clone(), a.beta)?.with_layers(layers);
    let p = models.pipeline(models.res.is_some())?;
    map_folder(&models, &a.input, &a.out, |x| {
        let enc = p.encode(x)?;
        let w_edit = apply_edit(&enc.wplus, &spec)?;
        Ok(p.from_codes(&enc.f0, &enc.wplus, &w_edit)?.image)
    })
}

pub fn parse_variants(list: &str) -> CliResult<Vec<VariantSource>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (name, path) = item
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("expected name=checkpoint, got `{item}`")))?;
            Ok(VariantSource::new(name.trim(), path.trim()))
        })
        .collect::<CliResult<Vec<_>>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(CliError::usage("--variants is empty"))
            } else {
                Ok(v)
            }
        })
}

fn eval_cmd(seed: u64, a: &EvalArgs) -> CliResult<Value> {
    let sources = parse_variants(&a.variants)?;
    let bank = DirectionBank::load(existing(&a.directions)?)?;
    let cfg = ProtocolConfig {
        eval_images: a.n,
        eval_seed: seed.wrapping_add(10_000_019),
        extra_folder: a.extra.clone(),
        ..ProtocolConfig::default()
    };
    let report = run_protocol(&sources, &bank, &cfg, &a.out)?;
    Ok(json!({
        "report": a.out.join("report.json"),
        "variants": report.variants.keys().collect::<Vec<_>>(),
    }))
}

fn serve_cmd(a: &ServeArgs) -> CliResult<Value> {
    let model = match &a.ckpt {
        Some(p) => Some(LoadedModel::load(existing(p)?)?),
        None => {
            log::warn!("no checkpoint given; /invert and /edit will answer 503");
            None
        }
    };
    let bank = match &a.directions {
        Some(p) => DirectionBank::load(existing(p)?)?,
        None => DirectionBank::default(),
    };
    let cfg = ServiceConfig {
        session_ttl: Duration::from_secs(a.ttl_secs),
        max_sessions: a.max_sessions,
        max_upload_bytes: a.max_upload_bytes,
        cors_origin: a.cors_origin.clone(),
        static_dir: a.static_dir.clone(),
        ..ServiceConfig::default()
    };
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::usage(format!("bad listen address: {e}")))?;
    let state = Arc::new(AppState::new(model, bank, cfg));
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(serve(addr, state))?;
    Ok(json!({"stopped": true}))
}
