//! `enfnet` command line: train, predict, eval and gradcheck.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use enfnet::checkpoint::{load_checkpoint, save_checkpoint};
use enfnet::data::{list_pngs, load_dataset, prepare_input, prepare_sample, read_mask, write_saliency};
use enfnet::metrics::aggregate;
use enfnet::train::{loss_csv, train, StepLog, TrainConfig, TrainEvent};
use enfnet::{checks, ops, Enfnet, Error, NetworkConfig, Tensor};

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_NUMERICAL: u8 = 2;

/// Name of the effective configuration written next to training outputs.
pub const CONFIG_FILE: &str = "config.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// A failed command: exit status plus a one-line cause.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NUMERICAL,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } => EXIT_NUMERICAL,
            _ => EXIT_VALIDATION,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Contents of a `--config` JSON file. Every section is optional and falls
/// back to the desk preset; unknown keys anywhere are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Dataset root used when `--data` is not given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Output directory used when `--out` is not given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl CliConfig {
    pub fn from_json(text: &str, origin: &Path) -> CliResult<Self> {
        let cfg: CliConfig =
            serde_json::from_str(text).map_err(|e| CliError::validation(format!("{}: {e}", origin.display())))?;
        cfg.validate()
            .map_err(|e| CliError::validation(format!("{}: {}", origin.display(), e.message)))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.network.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "enfnet",
    version,
    about = "Edge-guided non-local FCN for salient object detection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a dataset with `images/` and `masks/` subdirectories.
    Train(TrainArgs),
    /// Write a full-resolution saliency PNG for every image in a directory.
    Predict(PredictArgs),
    /// Score prediction PNGs against ground-truth masks.
    Eval(EvalArgs),
    /// Compare reverse-mode gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of edge guidance blocks (overrides the config).
    #[arg(long, value_parser = ["0", "3", "5"])]
    pub egb: Option<String>,
    /// Seed for initialisation and shuffling (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Network configuration; defaults to `config.json` beside the
    /// checkpoint, then to the desk preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Destination of the metrics CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Comma-separated subset of checks (default: all).
    #[arg(long, value_delimiter = ',')]
    pub ops: Option<Vec<String>>,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Predict(a) => cmd_predict(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Gradcheck(a) => cmd_gradcheck(&a).map(|_| ()),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::validation(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

pub struct TrainSummary {
    pub log: Vec<StepLog>,
    pub out: PathBuf,
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainSummary> {
    let mut cfg = CliConfig::load(&args.config)?;
    if let Some(egb) = &args.egb {
        cfg.network.egb_blocks = egb.parse().expect("restricted by clap");
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let data = args
        .data
        .clone()
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| CliError::validation("no dataset: pass --data or set \"data\" in the config"))?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::validation("no output directory: pass --out or set \"out\" in the config"))?;
    cfg.data = Some(data.clone());
    cfg.out = Some(out.clone());

    let manifest = load_dataset(&data)?;
    if manifest.is_empty() {
        return Err(CliError::validation(format!(
            "no images under {}",
            data.join("images").display()
        )));
    }
    let samples = manifest
        .entries
        .iter()
        .map(|e| prepare_sample(e, &cfg.network))
        .collect::<enfnet::Result<Vec<_>>>()?;
    let net = Enfnet::new(cfg.network.clone())?;
    let mut params = net.init(cfg.train.seed);

    create_dir(&out)?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_json())?;

    let every = cfg.train.checkpoint_every;
    let started = Instant::now();
    let mut partial = Vec::new();
    let result = train(&net, &mut params, &samples, &cfg.train, |ev| {
        match ev {
            TrainEvent::Step(s) => partial.push(*s),
            TrainEvent::EpochEnd { epoch, params } => {
                if every > 0 && epoch % every == 0 {
                    save_checkpoint(params, &out.join(format!("epoch_{epoch:04}.ckpt")))?;
                }
            }
        }
        Ok(())
    });
    // the loss log is kept even when training stops on a non-finite value
    write_file(&out.join(LOSS_FILE), &loss_csv(&partial))?;
    let log = result?;
    save_checkpoint(&params, &out.join(FINAL_CHECKPOINT))?;

    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "trained {} steps in {:.1}s: total loss {:.6} -> {:.6}",
            log.len(),
            started.elapsed().as_secs_f64(),
            first.total_loss,
            last.total_loss
        );
    }
    Ok(TrainSummary { log, out })
}

fn predict_config(args: &PredictArgs) -> CliResult<NetworkConfig> {
    if let Some(path) = &args.config {
        return Ok(CliConfig::load(path)?.network);
    }
    let beside = args.checkpoint.with_file_name(CONFIG_FILE);
    if beside.is_file() {
        return Ok(CliConfig::load(&beside)?.network);
    }
    Ok(NetworkConfig::desk())
}

/// Returns the written PNG paths.
pub fn cmd_predict(args: &PredictArgs) -> CliResult<Vec<PathBuf>> {
    let cfg = predict_config(args)?;
    let net = Enfnet::new(cfg.clone())?;
    let params = load_checkpoint(&args.checkpoint)?;
    net.check_params(&params)
        .map_err(|e| CliError::validation(format!("{}: {e}", args.checkpoint.display())))?;
    if !args.images.is_dir() {
        return Err(CliError::validation(format!(
            "missing directory {}",
            args.images.display()
        )));
    }
    let (images, edges) = list_pngs(&args.images)?;
    create_dir(&args.out)?;
    let mut written = Vec::with_capacity(images.len());
    for (stem, path) in &images {
        let edge = edges
            .binary_search_by(|(e, _)| e.cmp(stem))
            .ok()
            .map(|i| edges[i].1.as_path());
        let (image, edge) = prepare_input(path, edge, &cfg)?;
        let map = net.predict(&params, &image, &edge)?;
        let dest = args.out.join(format!("{stem}.png"));
        write_saliency(&map, &dest)?;
        written.push(dest);
    }
    println!("wrote {} saliency maps to {}", written.len(), args.out.display());
    Ok(written)
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<enfnet::metrics::MetricsRecord> {
    for dir in [&args.pred, &args.gt] {
        if !dir.is_dir() {
            return Err(CliError::validation(format!("missing directory {}", dir.display())));
        }
    }
    let (preds, _) = list_pngs(&args.pred)?;
    let (gts, _) = list_pngs(&args.gt)?;
    let has = |list: &[(String, PathBuf)], stem: &str| list.binary_search_by(|(s, _)| s.as_str().cmp(stem)).is_ok();
    let mut unpaired: Vec<String> = preds
        .iter()
        .filter(|(s, _)| !has(&gts, s))
        .map(|(s, _)| format!("{s} (no ground truth)"))
        .collect();
    unpaired.extend(
        gts.iter()
            .filter(|(s, _)| !has(&preds, s))
            .map(|(s, _)| format!("{s} (no prediction)")),
    );
    if !unpaired.is_empty() {
        return Err(CliError::validation(format!("unpaired files: {}", unpaired.join(", "))));
    }
    if preds.is_empty() {
        return Err(CliError::validation(format!(
            "no PNG files under {}",
            args.pred.display()
        )));
    }

    let mut pairs: Vec<(Tensor, Tensor)> = Vec::with_capacity(preds.len());
    for ((_, p), (_, g)) in preds.iter().zip(&gts) {
        let gt = read_mask(g)?;
        let mut pred = read_mask(p)?;
        let (h, w) = (gt.shape().h(), gt.shape().w());
        if pred.shape() != gt.shape() {
            pred = ops::bilinear_resize(&pred, h, w)?;
        }
        pairs.push((pred, gt));
    }
    let record = aggregate(pairs.iter().map(|(p, g)| (p, g)))?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&args.out, &record.to_csv())?;
    println!("max_f {:.6}", record.max_f);
    println!("mae {:.6}", record.mae);
    Ok(record)
}

pub struct GradcheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    pub skipped: usize,
    pub passed: bool,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<Vec<GradcheckRow>> {
    if !(args.tol > 0.0 && args.tol.is_finite()) {
        return Err(CliError::validation(format!("--tol {} must be positive", args.tol)));
    }
    let known: Vec<&str> = checks::names().collect();
    let selected: Vec<String> = match &args.ops {
        None => known.iter().map(|s| s.to_string()).collect(),
        Some(list) => {
            let unknown: Vec<&String> = list.iter().filter(|o| !known.contains(&o.as_str())).collect();
            if !unknown.is_empty() {
                return Err(CliError::validation(format!(
                    "unknown check(s) {unknown:?}; available: {}",
                    known.join(", ")
                )));
            }
            list.clone()
        }
    };

    println!(
        "{:<20} {:>14} {:>7} {:>7}  status",
        "check", "max_rel_error", "coords", "kinks"
    );
    let mut rows = Vec::new();
    for name in &selected {
        let rep = checks::run(name)?;
        let passed = rep.max_rel_error < args.tol;
        println!(
            "{:<20} {:>14.3e} {:>7} {:>7}  {}",
            name,
            rep.max_rel_error,
            rep.coords_checked,
            rep.kinks_skipped,
            if passed { "ok" } else { "FAIL" }
        );
        rows.push(GradcheckRow {
            name: name.clone(),
            max_rel_error: rep.max_rel_error,
            coords: rep.coords_checked,
            skipped: rep.kinks_skipped,
            passed,
        });
    }
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} ({:.3e})", r.name, r.max_rel_error))
        .collect();
    if failed.is_empty() {
        Ok(rows)
    } else {
        Err(CliError::numerical(format!(
            "gradient check exceeded tolerance {:e}: {}",
            args.tol,
            failed.join(", ")
        )))
    }
}
