//! `robust-mvc`: synthetic data generation, training, evaluation and noise
//! sweeps from the command line.
//!
//! Failures print one line `error[<kind>]: <message>` on stderr and exit
//! with 2 for usage errors and 1 otherwise.

use std::collections::hash_map::DefaultHasher;
use std::fs::{self, File};
use std::hash::{Hash, Hasher};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use robust_mvc::autodiff::Matrix;
use robust_mvc::data::{
    inject_noise, load_dataset, save_dataset, write_csv_matrix, MatrixFormat, MultiViewDataset, NoiseSpec,
    SyntheticSpec, DEFAULT_OBSERVATION_STD,
};
use robust_mvc::graph::ReliabilityGraph;
use robust_mvc::nn::{load_checkpoint, save_checkpoint};
use robust_mvc::train::{
    complete_latents, equal_ratio_grid, evaluate, sweep, train_with, EvalOptions, TrainConfig, PRESET_RATIOS,
};

const OUT_ROOT_ENV: &str = "ROBUST_MVC_OUT";

#[derive(Parser)]
#[command(name = "robust-mvc", version, about = "Noise-robust deep multi-view clustering")]
struct Cli {
    /// Parent directory for outputs when `--out` is not given.
    #[arg(long, global = true, env = OUT_ROOT_ENV, default_value = "runs")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic multi-view dataset.
    Synth(SynthArgs),
    /// Corrupt a dataset, train a model and evaluate it.
    Train(TrainArgs),
    /// Re-evaluate a checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate methods over a grid of noise ratios and seeds.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the output directory if it is not empty.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 600)]
    n: usize,
    /// Number of clusters.
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    views: usize,
    /// Per-view feature dimensions, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<usize>,
    /// Distance between cluster means in the shared latent space.
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// View file format: csv or f64le.
    #[arg(long, default_value = "csv", value_parser = ["csv", "f64le"])]
    format: String,
    #[command(flatten)]
    out: OutArgs,
}

/// Training hyperparameters. Unset flags fall back to the config file, then
/// to built-in defaults.
#[derive(Args)]
struct ModelArgs {
    /// TOML file with training keys (see README).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of clusters; defaults to the number of label classes.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    tau_c: Option<f64>,
    #[arg(long)]
    tau_d: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Encoder hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    kmeans_restarts: Option<usize>,
    /// Drop a loss term; repeatable.
    #[arg(long, value_parser = ["no-crec", "no-ncon", "no-dist"])]
    ablate: Vec<String>,
    #[arg(long, value_parser = ["con", "fncon", "ours"])]
    contrastive: Option<String>,
    #[arg(long, value_parser = ["dual-attention", "direct", "prototype", "knn"])]
    imputation: Option<String>,
}

#[derive(Args)]
struct NoiseArgs {
    /// Fraction of samples made incomplete.
    #[arg(long, default_value_t = 0.5)]
    noise_missing: f64,
    /// Fraction of samples with perturbed features.
    #[arg(long, default_value_t = 0.5)]
    noise_obs: f64,
    /// Perturbation scale relative to each feature's standard deviation.
    #[arg(long, default_value_t = DEFAULT_OBSERVATION_STD)]
    noise_std: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    noise: NoiseArgs,
    /// Write the view 0/1 reliability graph of the first batch after training.
    #[arg(long)]
    dump_graph: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Skip the noise recorded in the checkpoint.
    #[arg(long)]
    clean: bool,
    /// Write the fused latents as `embeddings.csv`.
    #[arg(long)]
    dump_embeddings: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Named ratio grid; `table1` is 0, 0.2, 0.5, 0.8.
    #[arg(long, value_parser = ["table1"], conflicts_with = "ratios")]
    preset: Option<String>,
    /// Equal missing/observation ratios, comma separated.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    seeds: Vec<u64>,
    /// Method names such as `full`, `no-ncon`, `fncon`, `knn`, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "full")]
    methods: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_OBSERVATION_STD)]
    noise_std: f64,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Output(String),
    Lib(robust_mvc::Error),
}

impl From<robust_mvc::Error> for CliError {
    fn from(e: robust_mvc::Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Output(_) => "output",
            CliError::Lib(e) => e.kind(),
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::Output(m) => m.clone(),
            CliError::Lib(e) => e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let summary: Vec<&str> = text
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .filter(|l| !l.is_empty())
                .collect();
            report(&CliError::Usage(
                summary.join(" ").trim_start_matches("error: ").to_string(),
            ));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(if matches!(e, CliError::Usage(_)) { 2 } else { 1 })
        }
    }
}

fn report(e: &CliError) {
    let message = e.message().replace(['\n', '\r'], " ");
    eprintln!("error[{}]: {message}", e.kind());
}

fn run(cli: Cli) -> CliResult<()> {
    let argv: Vec<String> = std::env::args().collect();
    let run_id = run_id(&argv);
    let ctx = RunContext {
        argv,
        run_id,
        started: unix_now(),
        out_root: cli.out_root,
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
    }
}

struct RunContext {
    argv: Vec<String>,
    run_id: String,
    started: f64,
    out_root: PathBuf,
}

/// Written as `run.json` in every output directory.
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    args: &'a [String],
    config_path: Option<&'a Path>,
    out_dir: &'a Path,
    run_id: &'a str,
    started_unix: f64,
    finished_unix: f64,
    version: &'static str,
}

impl RunContext {
    fn out_dir(&self, command: &str, out: &OutArgs) -> CliResult<PathBuf> {
        let dir = out
            .out
            .clone()
            .unwrap_or_else(|| self.out_root.join(format!("{command}-{}", self.run_id)));
        if dir.exists() {
            let occupied = fs::read_dir(&dir).map_err(|e| io_err(&dir, e))?.next().is_some();
            if occupied {
                if !out.overwrite {
                    return Err(CliError::Usage(format!(
                        "output directory {} is not empty; pass --overwrite to replace it",
                        dir.display()
                    )));
                }
                fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            }
        }
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(dir)
    }

    fn write_manifest(&self, command: &str, dir: &Path, config_path: Option<&Path>) -> CliResult<()> {
        let manifest = RunManifest {
            command,
            args: &self.argv,
            config_path,
            out_dir: dir,
            run_id: &self.run_id,
            started_unix: self.started,
            finished_unix: unix_now(),
            version: env!("CARGO_PKG_VERSION"),
        };
        write_json(&dir.join("run.json"), &manifest)
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Twelve hex digits from the command line, clock and process id.
fn run_id(argv: &[String]) -> String {
    let mut h = DefaultHasher::new();
    argv.hash(&mut h);
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0)
        .hash(&mut h);
    std::process::id().hash(&mut h);
    format!("{:012x}", h.finish() & 0xffff_ffff_ffff)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn write_config_echo(dir: &Path, cfg: &TrainConfig) -> CliResult<()> {
    let path = dir.join("config.toml");
    let text = toml::to_string(cfg).map_err(|e| io_err(&path, e))?;
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn cmd_synth(ctx: &RunContext, a: SynthArgs) -> CliResult<()> {
    if a.dims.len() != a.views {
        return Err(CliError::Usage(format!(
            "{} dims given for {} views",
            a.dims.len(),
            a.views
        )));
    }
    let format = match a.format.as_str() {
        "f64le" => MatrixFormat::F64le,
        _ => MatrixFormat::Csv,
    };
    let ds = SyntheticSpec::new(a.n, a.k, a.dims.clone(), a.separation, a.seed).generate()?;
    let dir = ctx.out_dir("synth", &a.out)?;
    save_dataset(&ds, &dir, format)?;
    println!("{}", dir.display());
    Ok(())
}

/// Defaults, then the config file, then explicit flags.
fn resolve_config(m: &ModelArgs, ds: &MultiViewDataset) -> CliResult<TrainConfig> {
    let mut cfg = match &m.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            toml::from_str::<TrainConfig>(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {}", path.display(), e.message())))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(x) = m.$field.clone() {
                cfg.$field = x;
            }
        )*};
    }
    set!(
        seed,
        epochs,
        batch_size,
        learning_rate,
        tau_c,
        tau_d,
        sigma,
        alpha,
        latent_dim,
        hidden
    );
    set!(warmup_epochs, eval_every, kmeans_restarts);
    if let Some(k) = m.k {
        cfg.n_clusters = k;
    }
    for part in m.ablate.iter().chain(&m.contrastive).chain(&m.imputation) {
        cfg.apply_variant(part)?;
    }
    if cfg.n_clusters == 0 {
        cfg.n_clusters = ds
            .n_classes()
            .ok_or_else(|| CliError::Usage("dataset has no labels; pass --k".into()))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(ctx: &RunContext, a: TrainArgs) -> CliResult<()> {
    let ds = load_dataset(&a.data)?;
    let cfg = resolve_config(&a.model, &ds)?;
    let noise = NoiseSpec {
        missing_ratio: a.noise.noise_missing,
        observation_ratio: a.noise.noise_obs,
        observation_std: a.noise.noise_std,
        seed: cfg.seed,
    };
    let noisy = inject_noise(&ds, &noise)?;
    let dir = ctx.out_dir("train", &a.out)?;
    write_config_echo(&dir, &cfg)?;
    ctx.write_manifest("train", &dir, a.model.config.as_deref())?;

    let log_path = dir.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    let outcome = train_with(&noisy, &cfg, |rec| {
        let line = serde_json::to_string(rec).expect("epoch records serialize");
        writeln!(log, "{line}").map_err(|e| robust_mvc::Error::InvalidArgument(format!("metrics log: {e}")))?;
        match rec.metrics {
            Some(m) => log::info!(
                "epoch {:>4} loss {:.4} acc {:.4} nmi {:.4} ari {:.4}",
                rec.epoch,
                rec.loss.total,
                m.acc,
                m.nmi,
                m.ari
            ),
            None => log::info!("epoch {:>4} loss {:.4}", rec.epoch, rec.loss.total),
        }
        Ok(())
    })?;
    log.flush().map_err(|e| io_err(&log_path, e))?;

    let data = fs::canonicalize(&a.data).unwrap_or(a.data.clone());
    let meta = json!({ "config": cfg, "noise": noise, "data": data, "run_id": ctx.run_id });
    save_checkpoint(dir.join("model.ckpt"), &outcome.model, &meta)?;

    let record = &outcome.record;
    let summary = json!({
        "method": cfg.variant_label(),
        "metrics": record.final_metrics(),
        "final_loss": record.epochs.last().map(|e| e.loss),
        "epochs": record.epochs.len(),
        "n_params": record.n_params,
        "wall_clock_secs": record.wall_clock_secs,
    });
    write_json(&dir.join("metrics.json"), &summary)?;

    if a.dump_graph {
        let completed = complete_latents(
            &outcome.model,
            &noisy,
            &cfg.imputation_config(),
            cfg.seed,
            cfg.kmeans_restarts,
        )?;
        let rows: Vec<usize> = (0..noisy.n_samples().min(cfg.batch_size)).collect();
        let pick = |z: &Matrix| z.select(ndarray::Axis(0), &rows);
        let graph = ReliabilityGraph::build(
            &pick(&completed[0]),
            &pick(&completed[1]),
            cfg.sigma,
            (0, 1),
            cfg.graph_normalization,
        )?;
        write_csv_matrix(&dir.join("graph.csv"), &graph.weights)?;
    }
    ctx.write_manifest("train", &dir, a.model.config.as_deref())?;
    if let Some(m) = record.final_metrics() {
        println!("acc={:.6} nmi={:.6} ari={:.6}", m.acc, m.nmi, m.ari);
    }
    println!("{}", dir.display());
    Ok(())
}

fn cmd_eval(ctx: &RunContext, a: EvalArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let field = |name: &str| {
        ckpt.meta
            .get(name)
            .cloned()
            .ok_or_else(|| CliError::Lib(robust_mvc::Error::Checkpoint(format!("metadata has no `{name}` entry"))))
    };
    let cfg: TrainConfig = serde_json::from_value(field("config")?)
        .map_err(|e| robust_mvc::Error::Checkpoint(format!("config entry: {e}")))?;
    let data = match a.data.clone() {
        Some(p) => p,
        None => serde_json::from_value(field("data")?)
            .map_err(|e| robust_mvc::Error::Checkpoint(format!("data entry: {e}")))?,
    };
    let ds = load_dataset(&data)?;
    let ds = if a.clean {
        ds
    } else {
        let noise: NoiseSpec = serde_json::from_value(field("noise")?)
            .map_err(|e| robust_mvc::Error::Checkpoint(format!("noise entry: {e}")))?;
        inject_noise(&ds, &noise)?
    };
    let result = evaluate(&ckpt.model, &ds, &EvalOptions::from(&cfg))?;

    let dir = ctx.out_dir("eval", &a.out)?;
    write_json(
        &dir.join("metrics.json"),
        &json!({ "metrics": result.metrics, "checkpoint": a.checkpoint }),
    )?;
    let pred_path = dir.join("predictions.txt");
    let text: String = result.predicted.iter().map(|l| format!("{l}\n")).collect();
    fs::write(&pred_path, text).map_err(|e| io_err(&pred_path, e))?;
    if a.dump_embeddings {
        write_csv_matrix(&dir.join("embeddings.csv"), &result.fused)?;
    }
    ctx.write_manifest("eval", &dir, None)?;
    if let Some(m) = result.metrics {
        println!("acc={:.6} nmi={:.6} ari={:.6}", m.acc, m.nmi, m.ari);
    }
    println!("{}", dir.display());
    Ok(())
}

fn cmd_sweep(ctx: &RunContext, a: SweepArgs) -> CliResult<()> {
    let ratios: Vec<f64> = match (&a.preset, &a.ratios) {
        (Some(_), _) => PRESET_RATIOS.to_vec(),
        (None, Some(r)) if !r.is_empty() => r.clone(),
        _ => return Err(CliError::Usage("pass --preset table1 or --ratios".into())),
    };
    if a.seeds.is_empty() {
        return Err(CliError::Usage("--seeds needs at least one seed".into()));
    }
    let ds = load_dataset(&a.data)?;
    let base = resolve_config(&a.model, &ds)?;
    let methods = a
        .methods
        .iter()
        .map(|name| {
            let mut cfg = base.clone();
            cfg.apply_variant(name)?;
            Ok((name.clone(), cfg))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let dir = ctx.out_dir("sweep", &a.out)?;
    write_config_echo(&dir, &base)?;
    ctx.write_manifest("sweep", &dir, a.model.config.as_deref())?;

    let table = sweep(
        &ds,
        &methods,
        &equal_ratio_grid(&ratios),
        &a.seeds,
        a.noise_std,
        |cell| match (&cell.metrics, &cell.error) {
            (Some(m), _) => log::info!(
                "{} ratio {} seed {}: acc {:.4} nmi {:.4} ari {:.4}",
                cell.method,
                cell.missing_ratio,
                cell.seed,
                m.acc,
                m.nmi,
                m.ari
            ),
            (None, e) => log::warn!(
                "{} ratio {} seed {} failed: {}",
                cell.method,
                cell.missing_ratio,
                cell.seed,
                e.as_deref().unwrap_or("?")
            ),
        },
    )?;
    table.write_summary_csv(dir.join("summary.csv"))?;
    table.write_cells_csv(dir.join("cells.csv"))?;
    ctx.write_manifest("sweep", &dir, a.model.config.as_deref())?;
    for s in table.summary() {
        println!(
            "{:<16} ratio={:.2} acc={:.4}±{:.4} nmi={:.4}±{:.4} ari={:.4}±{:.4} runs={} failed={}",
            s.method,
            s.missing_ratio,
            s.acc_mean,
            s.acc_std,
            s.nmi_mean,
            s.nmi_std,
            s.ari_mean,
            s.ari_std,
            s.runs,
            s.failed
        );
    }
    println!("{}", dir.display());
    Ok(())
}
