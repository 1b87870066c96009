//! Stage-per-subcommand command line.
//!
//! Every stage reads its inputs from the working directory given with
//! `--out` (or explicit flags), writes one artifact there atomically, logs a
//! one-line summary and exits 0. Failures exit 1 (usage), 2 (data) or 3
//! (numerical).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::bd2a::{compute_scatter, criterion_curve, curve_csv, solve_directions, DirectionBundle, Polarity};
use crate::biasgen::{generate, GenConfig};
use crate::config::{PipelineConfig, SplitPolarity};
use crate::dataset::{load_manifest, probe_shape, Manifest};
use crate::error::{Error, Result};
use crate::eval::{
    attribute_sweep, compute_metrics, drop_from_predictions, predict_mil, sweep_csv, train_mil, Metrics, MetricsReport,
};
use crate::io::write_atomic;
use crate::klotski::{prepare, train_klotski, EmbeddingTable, TiledSample};
use crate::scorer::ScorerModel;
use crate::selector::{
    color_attributes, color_split, coordinate_directions, debias_manifest, pca_directions, select_biased, BiasedSplit,
    CenterMode,
};

#[derive(Debug, Parser)]
#[command(name = "biaslens", version, about = "Find label-correlated background attributes in image datasets")]
pub struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Working directory for artifacts (dataset directory for `generate`).
    #[arg(long, global = true, value_name = "PATH", default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (images, manifests, echoed config).
    Generate(GenerateArgs),
    /// Train the background-only key-tile network.
    TrainKlotski(DataArgs),
    /// Extract key-tile embeddings for one split.
    Embed(EmbedArgs),
    /// Solve discriminant directions from embeddings.
    Bd2a(Bd2aArgs),
    /// Mark biased samples from directions or a baseline.
    Select(SelectArgs),
    /// Train the downstream max-pooling MIL model.
    TrainMil(TrainMilArgs),
    /// Metrics and performance drop of a MIL model on a split.
    Eval(EvalArgs),
    /// Per-direction drops for BD²A, PCA and raw-coordinate directions.
    Sweep(SweepArgs),
    /// Criterion value per number of directions.
    Curve(CurveArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Generator config (TOML); desk-scale defaults when omitted.
    #[arg(long, value_name = "PATH")]
    pub gen_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory with train/val/test.jsonl.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Which manifest to embed: train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Scorer model (default: the config's model path under --out).
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct Bd2aArgs {
    /// Embedding table (default: the train embeddings under --out).
    #[arg(long, value_name = "PATH")]
    pub embeddings: Option<PathBuf>,
    /// positive, negative or both.
    #[arg(long)]
    pub polarity: Option<String>,
    /// Overrides k_directions.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Embedding table to select from (default: test embeddings under --out).
    #[arg(long, value_name = "PATH")]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub k_used: Option<usize>,
    #[arg(long)]
    pub polarity: Option<String>,
    /// median, mean or none.
    #[arg(long)]
    pub center: Option<String>,
    /// bd2a (default), pca, coordinate or color.
    #[arg(long, default_value = "bd2a")]
    pub method: String,
    /// Dataset directory; needed for the color baseline.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Manifest split the color baseline reads.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Output file (default: the config's split path under --out).
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainMilArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Drop the biased ids of this split (computed on the training set)
    /// before training.
    #[arg(long, value_name = "PATH")]
    pub debias_split: Option<PathBuf>,
    /// Output file (default: the config's MIL model path under --out).
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub split: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub theta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[arg(long, value_name = "PATH")]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub polarity: Option<String>,
    /// Largest k (default: k_directions).
    #[arg(long)]
    pub k_max: Option<usize>,
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = init_logging() {
        eprintln!("error: {e}");
        return e.kind().exit_code();
    }
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.kind().exit_code()
        }
    }
}

fn init_logging() -> Result<()> {
    let level = std::env::var("BIASLENS_LOG").unwrap_or_else(|_| "info".into());
    let filter = match level.as_str() {
        "error" => log::LevelFilter::Error,
        "info" => log::LevelFilter::Info,
        "debug" => log::LevelFilter::Debug,
        other => {
            return Err(Error::InvalidArgument(format!(
                "BIASLENS_LOG must be error, info or debug, got {other:?}"
            )))
        }
    };
    // a second initialization (tests calling in-process) is harmless
    let _ = env_logger::Builder::new()
        .filter_level(filter)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
    Ok(())
}

/// Config after applying `--config` and `--seed`, validated.
pub fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be at least 1".into()));
        }
        // fails only when a pool already exists (repeated in-process runs)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = &cli.out;
    match &cli.command {
        Command::Generate(a) => cmd_generate(cli, a),
        Command::TrainKlotski(a) => cmd_train_klotski(&resolve_config(cli)?, out, a),
        Command::Embed(a) => cmd_embed(&resolve_config(cli)?, out, a),
        Command::Bd2a(a) => cmd_bd2a(&resolve_config(cli)?, out, a),
        Command::Select(a) => cmd_select(&resolve_config(cli)?, out, a),
        Command::TrainMil(a) => cmd_train_mil(&resolve_config(cli)?, out, a),
        Command::Eval(a) => cmd_eval(&resolve_config(cli)?, out, a),
        Command::Sweep(a) => cmd_sweep(&resolve_config(cli)?, out, a),
        Command::Curve(a) => cmd_curve(&resolve_config(cli)?, out, a),
    }
}

fn split_manifest(data: &Path, split: &str) -> Result<Manifest> {
    if !matches!(split, "train" | "val" | "test") {
        return Err(Error::InvalidArgument(format!(
            "split must be train, val or test, got {split:?}"
        )));
    }
    load_manifest(&data.join(format!("{split}.jsonl")))
}

fn tiled(cfg: &PipelineConfig, manifest: &Manifest) -> Result<Vec<TiledSample>> {
    prepare(manifest, probe_shape(manifest)?, cfg.grid())
}

fn embeddings_path(cfg: &PipelineConfig, out: &Path, split: &str) -> PathBuf {
    out.join(format!("{}_{split}.blem", cfg.paths.embeddings))
}

fn directions_path(cfg: &PipelineConfig, out: &Path, p: Polarity) -> PathBuf {
    out.join(match p {
        Polarity::Positive => &cfg.paths.directions_positive,
        Polarity::Negative => &cfg.paths.directions_negative,
    })
}

fn polarity_arg(cfg: &PipelineConfig, arg: &Option<String>) -> Result<SplitPolarity> {
    match arg {
        Some(s) => s.parse(),
        None => Ok(cfg.polarity),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidData(e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn cmd_generate(cli: &Cli, a: &GenerateArgs) -> Result<()> {
    let mut g = match &a.gen_config {
        Some(p) => GenConfig::load(p)?,
        None => GenConfig::default(),
    };
    if let Some(s) = cli.seed {
        g.seed = s;
    }
    let set = generate(&g, &cli.out)?;
    info!(
        "generate: {} train, {} val, {} test samples in {}",
        set.train.len(),
        set.val.len(),
        set.test.len(),
        cli.out.display()
    );
    Ok(())
}

fn cmd_train_klotski(cfg: &PipelineConfig, out: &Path, a: &DataArgs) -> Result<()> {
    let train = tiled(cfg, &split_manifest(&a.data, "train")?)?;
    let val = tiled(cfg, &split_manifest(&a.data, "val")?)?;
    let (model, log) = train_klotski(&train, Some(&val), &cfg.klotski_train())?;
    let path = out.join(&cfg.paths.model);
    model.save(&path)?;
    let epochs: Vec<_> = log
        .epochs
        .iter()
        .map(|e| {
            serde_json::json!({
                "epoch": e.epoch,
                "mean_loss": e.mean_loss,
                "trained": e.trained,
                "skipped": e.skipped,
                "val_accuracy": e.val_accuracy,
                "selection_histogram": e.selection_histogram,
            })
        })
        .collect();
    write_json(
        &out.join("klotski_log.json"),
        &serde_json::json!({"epochs": epochs, "stopped_early": log.stopped_early, "best_epoch": log.best_epoch}),
    )?;
    let last = log.epochs.last();
    info!(
        "train-klotski: {} epochs, val accuracy {}, model {}",
        log.epochs.len(),
        last.and_then(|e| e.val_accuracy).map_or("n/a".into(), |v| format!("{v:.3}")),
        path.display()
    );
    Ok(())
}

fn cmd_embed(cfg: &PipelineConfig, out: &Path, a: &EmbedArgs) -> Result<()> {
    let model_path = a.model.clone().unwrap_or_else(|| out.join(&cfg.paths.model));
    let model = ScorerModel::load(&model_path)?;
    let samples = tiled(cfg, &split_manifest(&a.data, &a.split)?)?;
    let table = EmbeddingTable::extract(&model, &samples)?;
    let path = embeddings_path(cfg, out, &a.split);
    table.save(&path)?;
    if a.csv {
        write_atomic(&path.with_extension("csv"), table.to_csv().as_bytes())?;
    }
    info!(
        "embed: {} of {} {} samples embedded (K = {}) to {}",
        table.len(),
        samples.len(),
        a.split,
        table.k,
        path.display()
    );
    Ok(())
}

fn cmd_bd2a(cfg: &PipelineConfig, out: &Path, a: &Bd2aArgs) -> Result<()> {
    let path = a.embeddings.clone().unwrap_or_else(|| embeddings_path(cfg, out, "train"));
    let table = EmbeddingTable::load(&path)?;
    let k = a.k.unwrap_or(cfg.k_directions);
    if k == 0 || k > table.k {
        return Err(Error::InvalidArgument(format!(
            "k_directions = {k} must be between 1 and K = {} (embedding dimension)",
            table.k
        )));
    }
    for &p in polarity_arg(cfg, &a.polarity)?.polarities() {
        let bundle = solve_directions(&compute_scatter(&table, p)?, k)?;
        let dest = directions_path(cfg, out, p);
        bundle.save(&dest)?;
        info!(
            "bd2a: {p} polarity, {k} directions, lambda_1 {:.4}, ridge {:.3e}, to {}",
            bundle.lambdas[0],
            bundle.ridge,
            dest.display()
        );
    }
    Ok(())
}

fn cmd_select(cfg: &PipelineConfig, out: &Path, a: &SelectArgs) -> Result<()> {
    let theta = a.theta.unwrap_or(cfg.theta);
    let k_used = a.k_used.unwrap_or(cfg.k_used);
    PipelineConfig { theta, k_used, ..cfg.clone() }.validate()?;
    let center: CenterMode = match &a.center {
        Some(c) => c.parse()?,
        None => cfg.center,
    };
    let polarity = polarity_arg(cfg, &a.polarity)?;
    let table_for = || {
        let path = a.embeddings.clone().unwrap_or_else(|| embeddings_path(cfg, out, "test"));
        EmbeddingTable::load(&path)
    };
    let split = match a.method.as_str() {
        "bd2a" => {
            let table = table_for()?;
            let bundles = polarity
                .polarities()
                .iter()
                .map(|p| DirectionBundle::load(&directions_path(cfg, out, *p)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&DirectionBundle> = bundles.iter().collect();
            select_biased(&table, &refs, theta, k_used, center)?
        }
        "pca" | "coordinate" => {
            let table = table_for()?;
            let p = polarity.polarities()[0];
            let bundle = if a.method == "pca" {
                pca_directions(&table, p, k_used)?
            } else {
                coordinate_directions(&table, p, k_used)?
            };
            let mut s = select_biased(&table, &[&bundle], theta, k_used, center)?;
            s.polarity = format!("{}_{}", a.method, p);
            s
        }
        "color" => {
            let data = a
                .data
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("--data is required for the color baseline".into()))?;
            let m = split_manifest(data, &a.split)?;
            color_split(&color_attributes(&m, probe_shape(&m)?)?, theta, center)?
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "method must be bd2a, pca, coordinate or color, got {other:?}"
            )))
        }
    };
    let dest = a.output.clone().unwrap_or_else(|| out.join(&cfg.paths.split));
    split.save(&dest)?;
    info!(
        "select: {} biased of {} (theta {theta}, k_used {}, {}) to {}",
        split.biased_ids.len(),
        split.biased_ids.len() + split.rest_ids.len(),
        split.k_used,
        split.polarity,
        dest.display()
    );
    Ok(())
}

fn cmd_train_mil(cfg: &PipelineConfig, out: &Path, a: &TrainMilArgs) -> Result<()> {
    let mut manifest = split_manifest(&a.data, "train")?;
    if let Some(p) = &a.debias_split {
        let split = BiasedSplit::load(p)?;
        let before = manifest.len();
        manifest = debias_manifest(&manifest, &split)?;
        info!("train-mil: removed {} biased samples", before - manifest.len());
    }
    let train = tiled(cfg, &manifest)?;
    let val = tiled(cfg, &split_manifest(&a.data, "val")?)?;
    let (model, log) = train_mil(&train, Some(&val), &cfg.mil_train())?;
    let dest = a.output.clone().unwrap_or_else(|| out.join(&cfg.paths.mil_model));
    model.save(&dest)?;
    info!(
        "train-mil: {} samples, {} epochs, final loss {:.4}, model {}",
        train.len(),
        log.epochs.len(),
        log.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
        dest.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct SplitSummary<'a> {
    theta: f64,
    k_used: usize,
    polarity: &'a str,
    n_biased: usize,
    n_rest: usize,
}

#[derive(Debug, Serialize)]
struct EvalReport<'a> {
    config: &'a PipelineConfig,
    model: String,
    split: SplitSummary<'a>,
    overall: Metrics,
    #[serde(flatten)]
    report: MetricsReport,
}

fn cmd_eval(cfg: &PipelineConfig, out: &Path, a: &EvalArgs) -> Result<()> {
    let model_path = a.model.clone().unwrap_or_else(|| out.join(&cfg.paths.mil_model));
    let model = ScorerModel::load(&model_path)?;
    let split_path = a.split.clone().unwrap_or_else(|| out.join(&cfg.paths.split));
    let split = BiasedSplit::load(&split_path)?;
    let test = tiled(cfg, &split_manifest(&a.data, "test")?)?;
    let preds = predict_mil(&model, &test)?;
    let report = drop_from_predictions(&preds, &split)?;
    let dest = out.join(&cfg.paths.report);
    write_json(
        &dest,
        &EvalReport {
            config: cfg,
            model: model_path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
            split: SplitSummary {
                theta: split.theta,
                k_used: split.k_used,
                polarity: &split.polarity,
                n_biased: report.biased.n,
                n_rest: report.rest.n,
            },
            overall: compute_metrics(&preds),
            report: report.clone(),
        },
    )?;
    let fmt = |v: Option<f64>| v.map_or("null".into(), |x| format!("{x:.3}"));
    info!(
        "eval: accuracy drop {}, auc drop {} ({} biased / {} rest), report {}",
        fmt(report.drop.accuracy),
        fmt(report.drop.roc_auc),
        report.biased.n,
        report.rest.n,
        dest.display()
    );
    Ok(())
}

fn cmd_sweep(cfg: &PipelineConfig, out: &Path, a: &SweepArgs) -> Result<()> {
    let theta = a.theta.unwrap_or(cfg.theta);
    PipelineConfig { theta, ..cfg.clone() }.validate()?;
    let model_path = a.model.clone().unwrap_or_else(|| out.join(&cfg.paths.mil_model));
    let model = ScorerModel::load(&model_path)?;
    let test = tiled(cfg, &split_manifest(&a.data, "test")?)?;
    let preds = predict_mil(&model, &test)?;
    let test_table = EmbeddingTable::load(&embeddings_path(cfg, out, "test"))?;
    let train_table = EmbeddingTable::load(&embeddings_path(cfg, out, "train"))?;
    let mut named: Vec<(String, DirectionBundle)> = Vec::new();
    for p in [Polarity::Positive, Polarity::Negative] {
        let path = directions_path(cfg, out, p);
        if path.exists() {
            named.push((p.name().to_string(), DirectionBundle::load(&path)?));
        }
        let k = cfg.k_used.min(train_table.k);
        named.push((format!("pca_{p}"), pca_directions(&train_table, p, k)?));
        named.push((format!("coordinate_{p}"), coordinate_directions(&train_table, p, train_table.k)?));
    }
    let refs: Vec<(String, &DirectionBundle)> = named.iter().map(|(n, b)| (n.clone(), b)).collect();
    let rows = attribute_sweep(&preds, &test_table, &refs, theta, cfg.center)?;
    let dest = out.join(&cfg.paths.sweep);
    write_atomic(&dest, sweep_csv(&rows).as_bytes())?;
    info!("sweep: {} rows to {}", rows.len(), dest.display());
    Ok(())
}

fn cmd_curve(cfg: &PipelineConfig, out: &Path, a: &CurveArgs) -> Result<()> {
    let path = a.embeddings.clone().unwrap_or_else(|| embeddings_path(cfg, out, "train"));
    let table = EmbeddingTable::load(&path)?;
    let k_max = a.k_max.unwrap_or(cfg.k_directions);
    if k_max == 0 || k_max > table.k {
        return Err(Error::InvalidArgument(format!(
            "k_max = {k_max} must be between 1 and K = {} (embedding dimension)",
            table.k
        )));
    }
    let p = polarity_arg(cfg, &a.polarity)?.polarities()[0];
    let curve = criterion_curve(&compute_scatter(&table, p)?, k_max)?;
    let dest = out.join(&cfg.paths.curve);
    write_atomic(&dest, curve_csv(&curve).as_bytes())?;
    info!(
        "curve: {p} polarity, lambda from {:.4} down to {:.4} over {k_max} directions, to {}",
        curve[0].1,
        curve[curve.len() - 1].1,
        dest.display()
    );
    Ok(())
}
