//! `voloc`: generate worlds, train embedders, build maps, evaluate and audit.
//!
//! Exit codes: 0 on success, 1 on invalid input (bad flags, configs, data or
//! an audit that finds violations), 2 when a run fails.

mod manifest;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use voloc_core::embedder::Embedder;
use voloc_core::evaluate::{outcomes_from_features, plot_svg, sweep, Axis, EvalReport, SweepAxes, ALL_CONDITIONS};
use voloc_core::geodata::{
    check_disjoint, generate_passes, generate_world, load_dataset, with_split, Dataset, Split,
    SyntheticWorldConfig,
};
use voloc_core::losses::LossKind;
use voloc_core::mining::{AuditRecord, Auditor};
use voloc_core::parallel::resolve_threads;
use voloc_core::retrieval::{embed_all, ReferenceMap};
use voloc_core::trainer::{train, write_metrics_csv, TrainConfig, TrainObserver};

use manifest::{manifest_path, ManifestBuilder};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<voloc_core::Error> for CliError {
    fn from(e: voloc_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "voloc", version, about = "Condition-invariant localization features: train, index, evaluate")]
struct Cli {
    /// Worker threads for embedding, mining and evaluation; 0 uses every core.
    #[arg(long, global = true, env = "VOLOC_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic geo-tagged dataset as JSONL.
    Generate(GenerateArgs),
    /// Train an embedder on a JSONL training split.
    Train(TrainArgs),
    /// Embed a reference split into a map file.
    Index(IndexArgs),
    /// Localize queries and write accuracy per condition and threshold.
    Evaluate(EvaluateArgs),
    /// Evaluate over thresholds x PCA dims x reference spacings, with plots.
    Sweep(SweepArgs),
    /// Replay a mining audit log against the tuple constraints.
    Audit(AuditArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// World TOML: optional `split`, `passes`, `rare` keys and a `[world]` table.
    #[arg(long)]
    config: PathBuf,
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
    /// Override the world seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the split label: train, reference or query.
    #[arg(long)]
    split: Option<Split>,
    /// Override the number of route locations.
    #[arg(long)]
    n_locations: Option<usize>,
    /// Override the number of passes over the route.
    #[arg(long)]
    passes: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateConfig {
    #[serde(default = "default_split")]
    split: Split,
    /// Drives over the route; more than one merges fresh-noise passes.
    #[serde(default = "one")]
    passes: usize,
    /// Conditions kept in the first pass only.
    #[serde(default)]
    rare: Vec<String>,
    world: SyntheticWorldConfig,
}

fn default_split() -> Split {
    Split::Train
}

fn one() -> usize {
    1
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training TOML with [train], [ablations], [loss], [mining], [embedder].
    #[arg(long)]
    config: PathBuf,
    /// Training split, JSONL.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Override the training, mining and initialization seeds together.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the loss kind.
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    /// Metrics CSV; defaults to the checkpoint path with `.metrics.csv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Write every mined tuple to this JSONL audit log.
    #[arg(long)]
    audit_log: Option<PathBuf>,
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, String> {
    LossKind::ALL
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| {
            let names: Vec<&str> = LossKind::ALL.iter().map(|k| k.name()).collect();
            format!("unknown loss {s}; expected one of {}", names.join(", "))
        })
}

/// Optional check that evaluation data lies away from the training region.
#[derive(Debug, Args)]
struct DisjointArgs {
    /// Training split to check geographic disjointness against.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Minimum distance between training and evaluation samples, meters.
    #[arg(long, default_value_t = 50.0)]
    separation: f64,
}

#[derive(Debug, Args, Serialize)]
struct MapArgs {
    /// PCA output dimension, capped at what the references allow.
    #[arg(long, default_value_t = 256)]
    dim: usize,
    /// Skip PCA whitening and index raw features.
    #[arg(long)]
    no_pca: bool,
    /// Minimum distance between consecutive kept references, meters.
    #[arg(long, default_value_t = 0.0)]
    spacing: f64,
}

impl MapArgs {
    fn dim(&self) -> Option<usize> {
        (!self.no_pca).then_some(self.dim)
    }
}

#[derive(Debug, Args)]
struct IndexArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reference split, JSONL, ordered along the drive.
    #[arg(long)]
    refs: PathBuf,
    #[command(flatten)]
    map: MapArgs,
    /// Output map path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    disjoint: DisjointArgs,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reference split; the map is built on the fly.
    #[arg(long, required_unless_present = "map_file", conflicts_with = "map_file")]
    refs: Option<PathBuf>,
    /// Prebuilt map from `voloc index`.
    #[arg(long = "map")]
    map_file: Option<PathBuf>,
    /// Query split, JSONL.
    #[arg(long)]
    queries: PathBuf,
    /// Distance thresholds in meters, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "10")]
    thresholds: Vec<f64>,
    #[command(flatten)]
    map: MapArgs,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    disjoint: DisjointArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Axes TOML with optional `thresholds`, `dims`, `spacings` arrays.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    spacings: Option<Vec<f64>>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Directory for sweep.csv and one SVG plot per axis.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    disjoint: DisjointArgs,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    thresholds: Option<Vec<f64>>,
    dims: Option<Vec<usize>>,
    spacings: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
struct AuditArgs {
    /// Audit log written by `voloc train --audit-log`.
    #[arg(long)]
    log: PathBuf,
    /// The training split the log was mined from.
    #[arg(long)]
    data: PathBuf,
    /// Training TOML whose mining section the log is checked against.
    #[arg(long)]
    config: PathBuf,
    /// Write violations as JSONL here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn load(path: &Path, split: Split) -> Result<Dataset> {
    load_dataset(path, split).map_err(|e| match e {
        voloc_core::Error::Io(io) => CliError::io(path, io),
        other => {
            let err = CliError::from(other);
            match err {
                CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
                CliError::Runtime(m) => CliError::Runtime(format!("{}: {m}", path.display())),
            }
        }
    })
}

fn load_checkpoint(path: &Path) -> Result<Embedder> {
    Embedder::load(path).map_err(|e| match e {
        voloc_core::Error::Io(io) => CliError::io(path, io),
        voloc_core::Error::Json(j) => CliError::Validation(format!("{}: {j}", path.display())),
        other => other.into(),
    })
}

fn check_region(args: &DisjointArgs, others: &[&Dataset], manifest: &mut ManifestBuilder) -> Result<()> {
    if let Some(path) = &args.train {
        let train = load(path, Split::Train)?;
        manifest.input(path)?;
        for other in others {
            check_disjoint(&train, other, args.separation)?;
        }
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut cfg: GenerateConfig = read_toml(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.world.seed = seed;
    }
    if let Some(split) = args.split {
        cfg.split = split;
    }
    if let Some(n) = args.n_locations {
        cfg.world.n_locations = n;
    }
    if let Some(p) = args.passes {
        cfg.passes = p;
    }
    let mut manifest = ManifestBuilder::new("generate", &cfg, Some(cfg.world.seed))?;
    manifest.input(&args.config)?;
    let world = if cfg.passes == 1 && cfg.rare.is_empty() {
        generate_world(&cfg.world)?
    } else {
        generate_passes(&cfg.world, cfg.passes, &cfg.rare)?
    };
    let world = with_split(world, cfg.split);
    world.save_jsonl(&args.out)?;
    manifest.output(&args.out);
    manifest.write(&manifest_path(&args.out))?;
    eprintln!("wrote {} samples to {}", world.len(), args.out.display());
    Ok(())
}

struct CliObserver {
    audit: Option<BufWriter<File>>,
    checkpoint_base: PathBuf,
    checkpoints: Vec<PathBuf>,
}

impl TrainObserver for CliObserver {
    fn on_tuple(&mut self, record: &AuditRecord) -> voloc_core::Result<()> {
        if let Some(out) = &mut self.audit {
            serde_json::to_writer(&mut *out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, epoch: usize, embedder: &Embedder) -> voloc_core::Result<()> {
        let path = self.checkpoint_base.with_extension(format!("epoch{epoch}.json"));
        embedder.save(&path)?;
        self.checkpoints.push(path);
        Ok(())
    }
}

fn train_cmd(args: TrainArgs, threads: usize) -> Result<()> {
    let mut cfg: TrainConfig = read_toml(&args.config)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
        cfg.mining.seed = seed;
        cfg.embedder.seed = seed;
    }
    if let Some(kind) = args.loss {
        cfg.loss.kind = kind;
    }
    cfg.validate()?;
    let data = load(&args.data, Split::Train)?;
    let mut manifest = ManifestBuilder::new("train", &cfg, Some(cfg.train.seed))?;
    manifest.input(&args.config)?;
    manifest.input(&args.data)?;

    let audit = args.audit_log.as_deref().map(create).transpose()?;
    let mut observer = CliObserver {
        audit,
        checkpoint_base: args.out.clone(),
        checkpoints: Vec::new(),
    };
    let outcome = train(&data, &cfg, threads, &mut observer)?;
    if let Some(mut out) = observer.audit.take() {
        out.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    outcome.embedder.save(&args.out)?;
    let metrics = args.metrics.unwrap_or_else(|| args.out.with_extension("metrics.csv"));
    let mut out = create(&metrics)?;
    write_metrics_csv(&outcome.metrics, &mut out)?;
    out.flush().map_err(|e| CliError::io(&metrics, e))?;

    manifest.output(&args.out);
    manifest.output(&metrics);
    if let Some(p) = &args.audit_log {
        manifest.output(p);
    }
    for p in &observer.checkpoints {
        manifest.output(p);
    }
    manifest.write(&manifest_path(&args.out))?;
    for e in &outcome.epochs {
        eprintln!(
            "epoch {}: {} tuples, {} skipped, mean loss {:e}",
            e.epoch, e.tuples, e.skips, e.mean_loss
        );
    }
    Ok(())
}

fn index(args: IndexArgs, threads: usize) -> Result<()> {
    let embedder = load_checkpoint(&args.checkpoint)?;
    let refs = load(&args.refs, Split::Reference)?;
    let mut manifest = ManifestBuilder::new("index", &args.map, None)?;
    manifest.input(&args.checkpoint)?;
    manifest.input(&args.refs)?;
    check_region(&args.disjoint, &[&refs], &mut manifest)?;
    let map = ReferenceMap::build(&refs, &embedder, args.map.dim(), args.map.spacing, threads)?;
    map.save(&args.out)?;
    manifest.output(&args.out);
    manifest.write(&manifest_path(&args.out))?;
    eprintln!("indexed {} references at dimension {}", map.len(), map.dim());
    Ok(())
}

#[derive(Serialize)]
struct EvaluateConfig<'a> {
    thresholds: &'a [f64],
    map: Option<&'a MapArgs>,
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    SweepAxes {
        thresholds: thresholds.to_vec(),
        ..SweepAxes::default()
    }
    .validate()
    .map_err(Into::into)
}

fn evaluate_cmd(args: EvaluateArgs, threads: usize) -> Result<()> {
    check_thresholds(&args.thresholds)?;
    let embedder = load_checkpoint(&args.checkpoint)?;
    let queries = load(&args.queries, Split::Query)?;
    let config = EvaluateConfig {
        thresholds: &args.thresholds,
        map: args.refs.as_ref().map(|_| &args.map),
    };
    let mut manifest = ManifestBuilder::new("evaluate", &config, None)?;
    manifest.input(&args.checkpoint)?;
    manifest.input(&args.queries)?;
    let map = match (&args.refs, &args.map_file) {
        (Some(path), _) => {
            let refs = load(path, Split::Reference)?;
            manifest.input(path)?;
            check_region(&args.disjoint, &[&refs, &queries], &mut manifest)?;
            ReferenceMap::build(&refs, &embedder, args.map.dim(), args.map.spacing, threads)?
        }
        (None, Some(path)) => {
            manifest.input(path)?;
            check_region(&args.disjoint, &[&queries], &mut manifest)?;
            ReferenceMap::load(path).map_err(|e| match e {
                voloc_core::Error::Io(io) => CliError::io(path, io),
                voloc_core::Error::Json(j) => CliError::Validation(format!("{}: {j}", path.display())),
                other => other.into(),
            })?
        }
        (None, None) => unreachable!("clap requires --refs or --map"),
    };
    let features = embed_all(&queries, &embedder, threads)?;
    let outcomes = outcomes_from_features(&map, &queries, &features, threads)?;
    let report = EvalReport::from_outcomes(&outcomes, map.dim(), map.spacing, &args.thresholds)?;
    let mut out = create(&args.out)?;
    report.write_csv(&mut out)?;
    out.flush().map_err(|e| CliError::io(&args.out, e))?;
    manifest.output(&args.out);
    manifest.write(&manifest_path(&args.out))?;
    for r in report.rows.iter().filter(|r| r.condition == ALL_CONDITIONS) {
        eprintln!(
            "d = {} m: accuracy {:.4}, upper bound {:.4}",
            r.threshold, r.accuracy, r.upper_bound
        );
    }
    Ok(())
}

fn sweep_cmd(args: SweepArgs, threads: usize) -> Result<()> {
    let file: SweepFile = match &args.config {
        Some(p) => read_toml(p)?,
        None => SweepFile::default(),
    };
    let defaults = SweepAxes::default();
    let axes = SweepAxes {
        thresholds: args.thresholds.or(file.thresholds).unwrap_or(defaults.thresholds),
        dims: args.dims.or(file.dims).unwrap_or(defaults.dims),
        spacings: args.spacings.or(file.spacings).unwrap_or(defaults.spacings),
    };
    axes.validate()?;
    let embedder = load_checkpoint(&args.checkpoint)?;
    let refs = load(&args.refs, Split::Reference)?;
    let queries = load(&args.queries, Split::Query)?;
    let mut manifest = ManifestBuilder::new("sweep", &axes, None)?;
    if let Some(p) = &args.config {
        manifest.input(p)?;
    }
    manifest.input(&args.checkpoint)?;
    manifest.input(&args.refs)?;
    manifest.input(&args.queries)?;
    check_region(&args.disjoint, &[&refs, &queries], &mut manifest)?;
    let report = sweep(&refs, &queries, &embedder, &axes, threads)?;

    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::io(&args.out_dir, e))?;
    let csv = args.out_dir.join("sweep.csv");
    std::fs::write(&csv, report.to_csv()).map_err(|e| CliError::io(&csv, e))?;
    manifest.output(&csv);
    for axis in [Axis::Threshold, Axis::Dim, Axis::Spacing] {
        let path = args.out_dir.join(format!("{}.svg", axis.name()));
        std::fs::write(&path, plot_svg(&report, axis)).map_err(|e| CliError::io(&path, e))?;
        manifest.output(&path);
    }
    manifest.write(&manifest_path(&csv))?;
    eprintln!("{} rows written to {}", report.rows.len(), csv.display());
    Ok(())
}

fn audit(args: AuditArgs) -> Result<()> {
    let cfg: TrainConfig = read_toml(&args.config)?;
    cfg.validate()?;
    let mining = cfg.effective_mining();
    let data = load(&args.data, Split::Train)?;
    let auditor = Auditor::new(&data, &mining);
    let file = File::open(&args.log).map_err(|e| CliError::io(&args.log, e))?;
    let mut violations = Vec::new();
    let mut records = 0;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(&args.log, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AuditRecord = serde_json::from_str(&line).map_err(|e| {
            CliError::Validation(format!("{} line {}: {e}", args.log.display(), n + 1))
        })?;
        records += 1;
        violations.extend(auditor.check(&record));
    }
    if let Some(out_path) = &args.out {
        let mut manifest = ManifestBuilder::new("audit", &mining, Some(mining.seed))?;
        manifest.input(&args.config)?;
        manifest.input(&args.data)?;
        manifest.input(&args.log)?;
        let mut out = create(out_path)?;
        for v in &violations {
            serde_json::to_writer(&mut out, v).map_err(|e| CliError::Runtime(e.to_string()))?;
            out.write_all(b"\n").map_err(|e| CliError::io(out_path, e))?;
        }
        out.flush().map_err(|e| CliError::io(out_path, e))?;
        manifest.output(out_path);
        manifest.write(&manifest_path(out_path))?;
    }
    println!("{records} tuples audited, {} violations", violations.len());
    for v in violations.iter().take(20) {
        println!("anchor {}: {:?} {}", v.anchor, v.kind, v.detail);
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "{} constraint violations in {}",
            violations.len(),
            args.log.display()
        )))
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = resolve_threads(cli.threads);
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a, threads),
        Command::Index(a) => index(a, threads),
        Command::Evaluate(a) => evaluate_cmd(a, threads),
        Command::Sweep(a) => sweep_cmd(a, threads),
        Command::Audit(a) => audit(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
