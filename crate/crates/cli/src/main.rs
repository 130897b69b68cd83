//! `progae`: train, evaluate and edit progressive generator-encoder models.
//!
//! Any configuration key can be overridden with `--key.path=value`; see
//! `progae --help` for the full list.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use progae_core::checkpoint;
use progae_core::config::{Config, Preset};
use progae_core::data::{decode_image, encode_grid_png, encode_png, ingest, Dataset, Partition};
use progae_core::latent_ops::{code_grid, edit_code, extract_attribute, AttributeVector, GridSpec, Interpolation};
use progae_core::metrics::{
    dataset_features, fid, fit_feature_stats, perceptual_path_length, DeskExtractor, FeatureDistance,
    FeatureExtractor, MetricReport, PerceptualMetric, SquaredL2,
};
use progae_core::model::{FrozenModel, ImageBatch};
use progae_core::trainer::ablation::{run_ablation, AblationSpec};
use progae_core::trainer::{run_schedule, Checkpointer, JsonlLog, RunOutcome, TrainState};
use progae_core::{Error, Tensor};

#[derive(Parser)]
#[command(name = "progae", version, about = "Progressive adversarial generator-encoder toolkit")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset used when no file is given.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Random seed (`seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured dataset through every resolution phase.
    Train {
        /// Output directory for the log, config and checkpoints.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute metrics on a checkpoint's averaged decoder.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fid: bool,
        #[arg(long)]
        ppl: bool,
        /// FID samples (`metrics.fid_samples`).
        #[arg(long)]
        n: Option<usize>,
        /// PPL endpoint pairs (`metrics.ppl.pairs`).
        #[arg(long)]
        pairs: Option<usize>,
        /// PPL step (`metrics.ppl.epsilon`).
        #[arg(long)]
        epsilon: Option<f64>,
        /// Feature extractor saved by `fit-extractor`.
        #[arg(long)]
        extractor: Option<PathBuf>,
    },
    /// Train the small feature extractor used for desk-scale FID.
    FitExtractor {
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode and decode images.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Decode an interpolation strip or grid between encoded images.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 2, 4 or 6 corner images.
        #[arg(long, num_args = 2..=6, required = true)]
        corners: Vec<PathBuf>,
        /// Cells of a two-corner strip.
        #[arg(long, default_value_t = 8)]
        cells: usize,
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        cols: Option<usize>,
        #[arg(long, default_value = "slerp")]
        interpolation: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Shift images along an attribute direction.
    Manipulate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Attribute vector JSON written by `extract-attr`.
        #[arg(long)]
        attribute: PathBuf,
        /// Edit intensities; one output frame each.
        #[arg(long = "lambda", required = true, allow_negative_numbers = true)]
        lambdas: Vec<f64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Attribute direction from two image sets (mean code of A minus mean code of B).
    ExtractAttr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        set_a: PathBuf,
        #[arg(long)]
        set_b: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the configured dataset as PNG files plus a factor table.
    ExportData {
        #[arg(long)]
        out: PathBuf,
        /// Also write `<factor>/a` (above median) and `<factor>/b` (below) from the train split.
        #[arg(long)]
        split_factor: Option<String>,
    },
    /// Run the normalization-scheme by margin ablation matrix.
    Ablate {
        /// Ablation spec TOML; the standard nine cells when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        #[arg(long)]
        extractor: Option<PathBuf>,
    },
    /// Serve a checkpoint over HTTP.
    Serve {
        /// `serve.checkpoint`
        #[arg(long)]
        checkpoint: Option<String>,
        /// `serve.bind`
        #[arg(long)]
        bind: Option<String>,
        /// `serve.attributes_dir`
        #[arg(long)]
        attributes_dir: Option<String>,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

/// Failures that map to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Splits `--a.b=value` config overrides from the arguments clap parses.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--") {
            Some(kv) if kv.split_once('=').is_some_and(|(k, _)| k.contains('.')) => overrides.push(kv.to_string()),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

fn keys_help() -> String {
    let defaults: std::collections::BTreeMap<_, _> = Preset::DeskSynthetic.config().flatten().into_iter().collect();
    let mut out = String::from("Configuration keys (override with --key=value; desk-synthetic defaults shown):\n");
    for key in Config::keys() {
        match defaults.get(&key) {
            Some(v) => out.push_str(&format!("  {key} = {v}\n")),
            None => out.push_str(&format!("  {key}\n")),
        }
    }
    out
}

fn resolve_config(args: &ConfigArgs, overrides: &[String]) -> Result<Config> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => Config::load(path).with_context(|| format!("reading {}", path.display()))?,
        (None, Some(name)) => Config::preset(name)?,
        (None, None) => Preset::DeskSynthetic.config(),
    };
    cfg.apply_overrides(overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_image(path: &Path, resolution: usize) -> Result<ImageBatch> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let chw = decode_image(&bytes, resolution).with_context(|| format!("decoding {}", path.display()))?;
    Ok(ImageBatch::new(Tensor::new(&[1, 3, resolution, resolution], chw)?)?)
}

fn read_dir_images(dir: &Path, resolution: usize) -> Result<ImageBatch> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!(UsageError(format!("no images in {}", dir.display())));
    }
    let batches = paths
        .iter()
        .map(|p| read_image(p, resolution))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageBatch::concat(&batches)?)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

/// Output file tag: checkpoint content hash and seed.
fn tag(checkpoint: &Path, seed: u64) -> Result<String> {
    Ok(format!("{}-s{seed}", checkpoint::file_hash(checkpoint)?))
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    println!("{}", path.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(FrozenModel, Config)> {
    checkpoint::load_frozen(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn dataset_for(cfg: &Config) -> Result<Dataset> {
    Ok(ingest(&cfg.data, cfg.model.max_resolution, cfg.seed)?)
}

fn load_extractor(path: Option<&Path>) -> Result<Option<DeskExtractor>> {
    path.map(|p| DeskExtractor::load(p).with_context(|| format!("loading extractor {}", p.display())))
        .transpose()
}

fn train(cfg: Config, out: &Path, resume: Option<&Path>) -> Result<ExitCode> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut state = match resume {
        Some(p) => checkpoint::load_compatible(p, &cfg)?,
        None => TrainState::new(cfg.clone())?,
    };
    state.config.save(&out.join("config.toml"))?;
    let dataset = dataset_for(&state.config)?;
    let mut log = JsonlLog::append(&out.join("log.jsonl"))?;
    let ckpt = out.join("checkpoint.bin");
    let mut saver = Checkpointer::new(&ckpt, state.config.train.checkpoint_every, &state);
    let outcome = run_schedule(&mut state, &dataset, &mut [&mut log, &mut saver]);
    match outcome {
        Ok(RunOutcome::Completed) | Ok(RunOutcome::Paused) => {
            checkpoint::save(&state, &ckpt)?;
            println!("{}", ckpt.display());
            Ok(ExitCode::SUCCESS)
        }
        Ok(RunOutcome::Diverged) => {
            eprintln!(
                "error: training diverged at {} samples (|KL gap| above {} for {} windows); last checkpoint kept",
                state.progress.samples_seen, state.config.train.divergence_threshold, state.config.train.divergence_windows
            );
            Ok(ExitCode::from(1))
        }
        Err(e) => Err(anyhow::Error::from(e).context("training aborted; last checkpoint kept")),
    }
}

#[allow(clippy::too_many_arguments)]
fn eval(
    mut cfg: Config,
    checkpoint: &Path,
    want_fid: bool,
    want_ppl: bool,
    n: Option<usize>,
    pairs: Option<usize>,
    epsilon: Option<f64>,
    extractor: Option<&Path>,
) -> Result<()> {
    let (model, stored) = load_model(checkpoint)?;
    let seed = cfg.seed;
    cfg = Config {
        seed,
        metrics: cfg.metrics,
        ..stored
    };
    if let Some(n) = n {
        cfg.metrics.fid_samples = n;
    }
    if let Some(p) = pairs {
        cfg.metrics.ppl.pairs = p;
    }
    if let Some(e) = epsilon {
        cfg.metrics.ppl.epsilon = e;
    }
    cfg.metrics.ppl.seed = seed;
    let extractor = load_extractor(extractor)?;
    let hash = cfg.hash();
    if !want_fid && !want_ppl {
        bail!(UsageError("choose at least one of --fid and --ppl".into()));
    }
    if want_fid {
        let ext: &dyn FeatureExtractor = extractor
            .as_ref()
            .map(|e| e as &dyn FeatureExtractor)
            .ok_or_else(|| Error::Capability("FID needs a feature extractor (--extractor)".into()))?;
        let dataset = dataset_for(&cfg)?;
        let level = dataset.max_level().min(model.phase.level);
        let n = cfg.metrics.fid_samples;
        let real = fit_feature_stats(&dataset_features(&dataset, Partition::Train, level, ext, n)?)?;
        let value = fid(&model, ext, &real, n, seed)?;
        println!("{}", serde_json::to_string(&MetricReport::new("fid", value, n, seed, &hash))?);
    }
    if want_ppl {
        let feature_metric;
        let metric: &dyn PerceptualMetric = match &extractor {
            Some(e) => {
                feature_metric = FeatureDistance { extractor: e };
                &feature_metric
            }
            None => &SquaredL2,
        };
        let value = perceptual_path_length(&model, metric, &cfg.metrics.ppl)?;
        let name = if extractor.is_some() { "ppl-features" } else { "ppl-pixels" };
        println!(
            "{}",
            serde_json::to_string(&MetricReport::new(name, value, cfg.metrics.ppl.pairs, seed, &hash))?
        );
    }
    Ok(())
}

fn reconstruct(checkpoint: &Path, seed: u64, out: &Path, inputs: &[PathBuf]) -> Result<()> {
    let (model, _) = load_model(checkpoint)?;
    let tag = tag(checkpoint, seed)?;
    fs::create_dir_all(out)?;
    let res = model.resolution();
    for input in inputs {
        let x = read_image(input, res)?;
        let rec = model.reconstruct(&x)?;
        write(
            out.join(format!("{}-rec-{tag}.png", stem(input))),
            &encode_png(rec.image(0), res)?,
        )?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn interpolate(
    checkpoint: &Path,
    seed: u64,
    corners: &[PathBuf],
    cells: usize,
    rows: Option<usize>,
    cols: Option<usize>,
    how: &str,
    out: &Path,
) -> Result<()> {
    let how = match how {
        "slerp" => Interpolation::Slerp,
        "lerp" => Interpolation::Lerp,
        other => bail!(UsageError(format!("unknown interpolation `{other}` (slerp or lerp)"))),
    };
    let spec = match (corners.len(), rows, cols) {
        (2, None, None) => GridSpec::strip(cells),
        (4, r, c) => GridSpec {
            rows: r.unwrap_or(cells),
            cols: c.unwrap_or(cells),
        },
        (6, r, c) => GridSpec {
            rows: r.unwrap_or(2),
            cols: c.unwrap_or(2 * (cells / 2) + 1),
        },
        (2, r, c) => GridSpec {
            rows: r.unwrap_or(1),
            cols: c.unwrap_or(cells),
        },
        (k, _, _) => bail!(UsageError(format!("{k} corners given; use 2, 4 or 6"))),
    };
    let (model, _) = load_model(checkpoint)?;
    let res = model.resolution();
    let mut codes = Vec::new();
    for c in corners {
        codes.extend(model.encode(&read_image(c, res)?)?);
    }
    let grid = code_grid(&codes, spec, how).map_err(|e| UsageError(e.to_string()))?;
    let images = model.decode(&grid)?;
    let tag = tag(checkpoint, seed)?;
    fs::create_dir_all(out)?;
    write(
        out.join(format!("interp-{}x{}-{tag}.png", spec.rows, spec.cols)),
        &encode_grid_png(&images, spec.rows, spec.cols)?,
    )?;
    for i in 0..images.len() {
        write(out.join(format!("interp-{tag}-cell{i}.png")), &encode_png(images.image(i), res)?)?;
    }
    Ok(())
}

fn manipulate(
    checkpoint: &Path,
    seed: u64,
    attribute: &Path,
    lambdas: &[f64],
    out: &Path,
    inputs: &[PathBuf],
) -> Result<()> {
    let attr: AttributeVector = serde_json::from_slice(&fs::read(attribute)?)
        .with_context(|| format!("parsing attribute {}", attribute.display()))?;
    let (model, _) = load_model(checkpoint)?;
    let res = model.resolution();
    let tag = tag(checkpoint, seed)?;
    fs::create_dir_all(out)?;
    for input in inputs {
        let code = model.encode(&read_image(input, res)?)?.remove(0);
        let codes = lambdas
            .iter()
            .map(|&l| edit_code(&code, &attr.direction, l))
            .collect::<progae_core::Result<Vec<_>>>()?;
        let frames = model.decode(&codes)?;
        for (i, l) in lambdas.iter().enumerate() {
            write(
                out.join(format!("{}-{}{l:+}-{tag}.png", stem(input), attr.name)),
                &encode_png(frames.image(i), res)?,
            )?;
        }
        write(
            out.join(format!("{}-{}-sweep-{tag}.png", stem(input), attr.name)),
            &encode_grid_png(&frames, 1, lambdas.len())?,
        )?;
    }
    Ok(())
}

fn extract_attr(checkpoint: &Path, set_a: &Path, set_b: &Path, name: &str, out: &Path) -> Result<()> {
    let (model, cfg) = load_model(checkpoint)?;
    let res = model.resolution();
    let a = read_dir_images(set_a, res)?;
    let b = read_dir_images(set_b, res)?;
    let mut attr = extract_attribute(&model, name, &a, &b)?;
    attr.config_hash = cfg.hash();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write(out.to_path_buf(), &serde_json::to_vec_pretty(&attr)?)
}

fn export_data(cfg: &Config, out: &Path, split_factor: Option<&str>) -> Result<()> {
    let dataset = dataset_for(cfg)?;
    dataset.export(out)?;
    if let Some(factor) = split_factor {
        let (upper, lower) = dataset.split_at_median(Partition::Train, factor)?;
        let top = dataset.max_level();
        for (sub, idx) in [("a", upper), ("b", lower)] {
            let dir = out.join(factor).join(sub);
            fs::create_dir_all(&dir)?;
            for i in idx {
                fs::write(dir.join(format!("{i}.png")), encode_png(dataset.image(i, top)?, dataset.resolution(top))?)?;
            }
        }
    }
    println!("{}", out.display());
    Ok(())
}

fn ablate(cfg: Config, spec: Option<&Path>, out: &Path, extractor: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let spec = match spec {
        Some(p) => toml::from_str::<AblationSpec>(&fs::read_to_string(p)?)
            .map_err(|e| UsageError(format!("ablation spec {}: {e}", p.display())))?,
        None => AblationSpec::standard(),
    };
    let dataset = dataset_for(&cfg)?;
    let extractor = match load_extractor(extractor)? {
        Some(e) => e,
        None => DeskExtractor::train(&dataset, &cfg.metrics.extractor)?,
    };
    let top = dataset.max_level();
    let reference = fit_feature_stats(&dataset_features(
        &dataset,
        Partition::Train,
        top,
        &extractor,
        spec.fid_samples,
    )?)?;
    let report = run_ablation(&spec, &cfg, &dataset, &extractor, &reference, |cell| {
        eprintln!(
            "cell {:<16} diverged={} final_fid={:?}",
            cell.name, cell.diverged, cell.final_fid
        );
    })?;
    fs::create_dir_all(out)?;
    write(out.join("summary.tsv"), report.table().as_bytes())?;
    write(out.join("kl_traces.tsv"), report.kl_traces().as_bytes())?;
    write(out.join("report.json"), &serde_json::to_vec_pretty(&report)?)?;
    print!("{}", report.table());
    Ok(())
}

fn serve(mut cfg: Config, checkpoint: Option<String>, bind: Option<String>, attributes: Option<String>) -> Result<()> {
    if let Some(c) = checkpoint {
        cfg.serve.checkpoint = c;
    }
    if let Some(b) = bind {
        cfg.serve.bind = b;
    }
    if let Some(a) = attributes {
        cfg.serve.attributes_dir = a;
    }
    if cfg.serve.checkpoint.is_empty() {
        bail!(UsageError("invalid configuration at `serve.checkpoint`: a checkpoint is required".into()));
    }
    let state = progae_serve::AppState::load(cfg.serve)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(progae_serve::run(state))?;
    Ok(())
}

fn run(cli: Cli, overrides: Vec<String>) -> Result<ExitCode> {
    let cfg = resolve_config(&cli.config, &overrides)?;
    let seed = cfg.seed;
    match cli.command {
        Command::Train { out, resume } => return train(cfg, &out, resume.as_deref()),
        Command::Eval {
            checkpoint,
            fid,
            ppl,
            n,
            pairs,
            epsilon,
            extractor,
        } => eval(cfg, &checkpoint, fid, ppl, n, pairs, epsilon, extractor.as_deref())?,
        Command::FitExtractor { out } => {
            let dataset = dataset_for(&cfg)?;
            let ext = DeskExtractor::train(&dataset, &cfg.metrics.extractor)?;
            ext.save(&out)?;
            println!("{}", out.display());
        }
        Command::Reconstruct { checkpoint, out, inputs } => reconstruct(&checkpoint, seed, &out, &inputs)?,
        Command::Interpolate {
            checkpoint,
            corners,
            cells,
            rows,
            cols,
            interpolation,
            out,
        } => interpolate(&checkpoint, seed, &corners, cells, rows, cols, &interpolation, &out)?,
        Command::Manipulate {
            checkpoint,
            attribute,
            lambdas,
            out,
            inputs,
        } => manipulate(&checkpoint, seed, &attribute, &lambdas, &out, &inputs)?,
        Command::ExtractAttr {
            checkpoint,
            set_a,
            set_b,
            name,
            out,
        } => extract_attr(&checkpoint, &set_a, &set_b, &name, &out)?,
        Command::ExportData { out, split_factor } => export_data(&cfg, &out, split_factor.as_deref())?,
        Command::Ablate { spec, out, extractor } => ablate(cfg, spec.as_deref(), &out, extractor.as_deref())?,
        Command::Serve {
            checkpoint,
            bind,
            attributes_dir,
        } => serve(cfg, checkpoint, bind, attributes_dir)?,
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let usage = e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some()
            || matches!(c.downcast_ref::<Error>(), Some(Error::Config { .. }))
    });
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let command = Cli::command().after_long_help(keys_help());
    let matches = match command.try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match run(cli, overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
