use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use grpp_core::eventstore::{self, load_sequences, split, write_matrix_csv, write_sequences, write_vector_csv};
use grpp_core::hawkes::{scale_rates, simulate_many, synth_infectivity};
use grpp_core::inference::{evaluate, predictions_csv, GrppPredictor};
use grpp_core::training::{initial_model, train, TrainConfig, TrainError};
use grpp_core::{Checkpoint, Dataset, GrppModel};
use serde::{Deserialize, Serialize};

use crate::manifest::ManifestBuilder;
use crate::{Ablate, Cli, Command};

/// Error carrying the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable config or missing inputs: exit 2.
    Usage(anyhow::Error),
    /// Everything else: exit 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Usage(e.into())
}

pub const EVENTS_FILE: &str = "events.jsonl";
pub const METADATA_FILE: &str = "metadata.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Contents of `metadata.json` next to simulated events.
#[derive(Debug, Serialize, Deserialize)]
pub struct SimMetadata {
    #[serde(rename = "K")]
    pub k: usize,
    pub omega: f64,
    pub seed: u64,
    pub rescale_factor: f64,
    #[serde(default = "one")]
    pub rate_scale: f64,
}

fn one() -> f64 {
    1.0
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate {
            dim,
            sequences,
            horizon,
            seed,
            out,
            omega,
            rate_scale,
        } => cmd_simulate(cli, dim, *sequences, *horizon, *seed, out, *omega, *rate_scale),
        Command::Train {
            data,
            config,
            out,
            ablate,
            overrides,
        } => cmd_train(cli, data, config.as_deref(), out, *ablate, overrides),
        Command::Eval {
            checkpoint,
            data,
            out,
            split_seed,
        } => cmd_eval(cli, checkpoint, data, out, *split_seed),
        Command::Recover { checkpoint, out } => cmd_recover(checkpoint, out),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
        .map_err(CliError::Runtime)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::Runtime)
}

#[derive(Serialize)]
struct SimulateConfig {
    dim: usize,
    sequences: usize,
    horizon: f64,
    omega: f64,
    rate_scale: f64,
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    cli: &Cli,
    dim: &str,
    sequences: usize,
    horizon: f64,
    seed: u64,
    out: &Path,
    omega: f64,
    rate_scale: f64,
) -> Result<(), CliError> {
    let k: usize = dim.parse().map_err(|_| usage(anyhow!("--dim must be 10 or 100")))?;
    if sequences == 0 {
        return Err(usage(anyhow!("--sequences must be >= 1")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(usage(anyhow!("--horizon must be positive")));
    }
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(usage(anyhow!("--omega must be positive")));
    }
    let mut manifest = ManifestBuilder::new("simulate", seed, cli.deterministic);
    manifest
        .config(&SimulateConfig {
            dim: k,
            sequences,
            horizon,
            omega,
            rate_scale,
        })
        .map_err(CliError::Runtime)?;
    let synth = synth_infectivity(k, omega, seed).map_err(usage)?;
    let mut params = synth.params;
    let extra = scale_rates(&mut params, rate_scale).map_err(usage)?;
    params.check_stable().map_err(usage)?;
    let seqs = simulate_many(&params, horizon, sequences, seed).map_err(|e| CliError::Runtime(e.into()))?;
    create_dir(out)?;

    let events = out.join(EVENTS_FILE);
    let f = fs::File::create(&events).with_context(|| format!("creating {}", events.display()))?;
    write_sequences(BufWriter::new(f), &seqs).with_context(|| format!("writing {}", events.display()))?;
    manifest.output(&events);

    let a_path = out.join("ground_truth_A.csv");
    let mut buf = Vec::new();
    write_matrix_csv(&mut buf, k, &params.a).map_err(|e| CliError::Runtime(e.into()))?;
    write_file(&a_path, &buf)?;
    manifest.output(&a_path);

    let mu_path = out.join("mu.csv");
    let mut buf = Vec::new();
    write_vector_csv(&mut buf, &params.mu).map_err(|e| CliError::Runtime(e.into()))?;
    write_file(&mu_path, &buf)?;
    manifest.output(&mu_path);

    let meta = SimMetadata {
        k,
        omega,
        seed,
        rescale_factor: synth.rescale_factor * extra,
        rate_scale,
    };
    let meta_path = out.join(METADATA_FILE);
    write_file(&meta_path, serde_json::to_string_pretty(&meta).map_err(anyhow::Error::from)? + "\n")?;
    manifest.output(&meta_path);
    manifest.finish(out)?;
    eprintln!(
        "simulated {} sequences, {} events, K={k} -> {}",
        seqs.len(),
        seqs.iter().map(|s| s.len()).sum::<usize>(),
        out.display()
    );
    Ok(())
}

/// Loads `events.jsonl` from a data directory. The node count comes from
/// `metadata.json` when present.
fn load_data(dir: &Path) -> Result<(Dataset, PathBuf), CliError> {
    if !dir.is_dir() {
        return Err(usage(anyhow!("data directory {} does not exist", dir.display())));
    }
    let events = dir.join(EVENTS_FILE);
    if !events.is_file() {
        return Err(usage(anyhow!("{} not found", events.display())));
    }
    let meta = dir.join(METADATA_FILE);
    let k = if meta.is_file() {
        let text = fs::read_to_string(&meta).with_context(|| format!("reading {}", meta.display()))?;
        let m: SimMetadata = serde_json::from_str(&text).with_context(|| format!("parsing {}", meta.display()))?;
        m.k
    } else {
        eventstore::infer_node_count(&events).map_err(usage)?
    };
    let data = load_sequences(&events, k).map_err(usage)?;
    Ok((data, events))
}

fn config_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config { .. } | TrainError::Io(_) => usage(e),
        other => CliError::Runtime(other.into()),
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    ablation: &'a str,
    epochs_run: usize,
    best_epoch: usize,
    best_valid_nll: f64,
    stopped_early: bool,
    train_sequences: usize,
    valid_sequences: usize,
    test_sequences: usize,
}

fn cmd_train(
    cli: &Cli,
    data_dir: &Path,
    config: Option<&Path>,
    out: &Path,
    ablate: Option<Ablate>,
    overrides: &[String],
) -> Result<(), CliError> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(CliError::Usage)?;
        cfg.apply_text(&text).map_err(config_error)?;
    }
    for o in overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| usage(anyhow!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(key.trim(), value).map_err(config_error)?;
    }
    match ablate {
        Some(Ablate::Wogp) => cfg.disable_graph_propagation = true,
        Some(Ablate::Woat) => cfg.disable_history_attention = true,
        None => {}
    }
    cfg.validate().map_err(config_error)?;
    let (data, events) = load_data(data_dir)?;

    let mut manifest = ManifestBuilder::new("train", cfg.seed, cli.deterministic);
    manifest.config(&cfg).map_err(CliError::Runtime)?;
    manifest.input(&events)?;
    if let Some(path) = config {
        manifest.input(path)?;
    }

    let (train_set, valid, test) = split(&data, cfg.seed).map_err(usage)?;
    let train_set = train_set.scorable();
    let model = initial_model(&train_set, &cfg).map_err(config_error)?;
    let outcome = train(model, &train_set, &valid, &cfg).map_err(|e| CliError::Runtime(e.into()))?;

    create_dir(out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let json = serde_json::to_string(&outcome.model.to_checkpoint()).map_err(anyhow::Error::from)?;
    write_file(&ckpt, json + "\n")?;
    manifest.output(&ckpt);

    let report = out.join("report.csv");
    write_file(&report, outcome.report.to_csv(!cli.deterministic))?;
    manifest.output(&report);

    let resolved = out.join("config.txt");
    write_file(&resolved, cfg.to_text())?;
    manifest.output(&resolved);

    let summary = TrainSummary {
        ablation: &outcome.report.ablation,
        epochs_run: outcome.report.epochs.len() - 1,
        best_epoch: outcome.report.best_epoch,
        best_valid_nll: outcome.report.best_valid_nll,
        stopped_early: outcome.report.stopped_early,
        train_sequences: train_set.len(),
        valid_sequences: valid.len(),
        test_sequences: test.len(),
    };
    let summary_path = out.join("summary.json");
    write_file(&summary_path, serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)? + "\n")?;
    manifest.output(&summary_path);
    manifest.finish(out)?;
    eprintln!(
        "ablation={} best epoch {} valid NLL {:.6} -> {}",
        summary.ablation,
        summary.best_epoch,
        summary.best_valid_nll,
        out.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<GrppModel, CliError> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))
        .map_err(CliError::Usage)?;
    let c: Checkpoint = serde_json::from_str(&text)
        .with_context(|| format!("parsing checkpoint {}", path.display()))
        .map_err(CliError::Runtime)?;
    GrppModel::from_checkpoint(c)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(CliError::Runtime)
}

fn cmd_eval(
    cli: &Cli,
    checkpoint: &Path,
    data_dir: &Path,
    out: &Path,
    split_seed: Option<u64>,
) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint)?;
    let (data, events) = load_data(data_dir)?;
    if data.k != model.k() {
        return Err(CliError::Runtime(anyhow!(
            "checkpoint has K={} but the data has K={}",
            model.k(),
            data.k
        )));
    }
    let seed = split_seed.unwrap_or(model.seed);
    let mut manifest = ManifestBuilder::new("eval", seed, cli.deterministic);
    manifest
        .config(&serde_json::json!({ "split_seed": seed, "time_scale": model.time_scale }))
        .map_err(CliError::Runtime)?;
    manifest.input(checkpoint)?;
    manifest.input(&events)?;
    let (_, _, test) = split(&data, seed).map_err(usage)?;
    let test = test.scorable();
    let predictor = GrppPredictor::new(&model);
    let (metrics, rows) = evaluate(&predictor, &test).map_err(|e| CliError::Runtime(e.into()))?;

    create_dir(out)?;
    let metrics_path = out.join("metrics.json");
    write_file(&metrics_path, serde_json::to_string_pretty(&metrics).map_err(anyhow::Error::from)? + "\n")?;
    manifest.output(&metrics_path);
    let pred_path = out.join("predictions.csv");
    write_file(&pred_path, predictions_csv(&rows))?;
    manifest.output(&pred_path);
    manifest.finish(out)?;
    eprintln!(
        "rmse {:.6} accuracy {:.4} over {} events",
        metrics.rmse, metrics.accuracy, metrics.n_events
    );
    Ok(())
}

fn cmd_recover(checkpoint: &Path, out: &Path) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint)?;
    let a = model.infectivity();
    let mut buf = Vec::new();
    write_matrix_csv(&mut buf, model.k(), &a).map_err(|e| CliError::Runtime(e.into()))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(out, buf)?;
    eprintln!("wrote {}x{} infectivity matrix -> {}", model.k(), model.k(), out.display());
    Ok(())
}
