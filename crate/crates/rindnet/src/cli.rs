//! Command-line surface: `train`, `predict`, `eval`, `plot`.
//!
//! Every command resolves its configuration as: built-in defaults, then the
//! `--config` file, then dedicated flags, then repeated `--set key=value`
//! overrides; the effective configuration is echoed at startup so any run
//! can be reproduced from its log. Exit codes: 0 success, 2 config error,
//! 3 data error, 4 numeric failure.

use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone;
use crate::config::Config;
use crate::dataio::{
    encode_prediction, load_split, pad_reflect, DatasetSplit, SplitRole, EDGE_TYPES,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, plot::render_pr_plot, prediction_path, EvalReport, REPORT_TYPES};
use crate::model::{preprocess, RindNet};
use crate::nn::ParamStore;
use crate::trainer::{self, config_from_meta, load_checkpoint_meta};

#[derive(Parser)]
#[command(
    name = "rindnet",
    about = "Four-type edge detection (reflectance / illumination / normal / depth): training, prediction and ODS/OIS/AP benchmarking"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train a model on a dataset split.
    Train(TrainArgs),
    /// Write per-type probability maps for a split using a checkpoint.
    Predict(PredictArgs),
    /// Evaluate predictions against ground truth (ODS / OIS / AP).
    Eval(EvalArgs),
    /// Render PR-curve plots from a report directory.
    Plot(PlotArgs),
}

#[derive(Args)]
pub struct CommonArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Random seed (overrides the config value).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Accepted for interface stability; runs are deterministic for a fixed
    /// seed either way.
    #[arg(long)]
    pub deterministic: bool,
}

impl CommonArgs {
    fn build_config(&self) -> Result<Config> {
        let mut cfg = Config::default();
        if let Some(path) = &self.config {
            cfg.load_file(path)?;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        cfg.apply_overrides(&self.set)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset root (images/, labels/, train.lst).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and the loss curve.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of epochs (overrides the config value).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Restrict the split to its first N ids.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Resume from a checkpoint (.safetensors path).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Initialize the backbone from a weight archive before training.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint weights (.safetensors) with its sibling meta file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Which split to predict.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of 16-bit PNG predictions named `<id>_<type>.png`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Report output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Edge types to evaluate (default: the four specific types).
    #[arg(long, value_delimiter = ',')]
    pub types: Vec<String>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args)]
pub struct PlotArgs {
    /// Directory containing `pr_<type>.csv` files.
    #[arg(long)]
    pub report: PathBuf,
    /// Output directory for the plot images.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_split(name: &str) -> Result<SplitRole> {
    match name {
        "train" => Ok(SplitRole::Train),
        "test" => Ok(SplitRole::Test),
        other => Err(Error::Config(format!(
            "unknown split `{other}` (expected train|test)"
        ))),
    }
}

fn echo_config(cfg: &Config) {
    println!("effective configuration:");
    print!("{}", cfg.echo());
    println!("config hash: {}", cfg.hash());
}

fn load_samples(split: &DatasetSplit) -> Result<Vec<crate::dataio::ImageSample>> {
    split.ids.iter().map(|id| split.load_sample(id)).collect()
}

impl Cli {
    pub fn run(self) -> Result<()> {
        match self.command {
            Command::Train(args) => cmd_train(args),
            Command::Predict(args) => cmd_predict(args),
            Command::Eval(args) => cmd_eval(args),
            Command::Plot(args) => cmd_plot(args),
        }
    }
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.common.build_config()?;
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    cfg.apply_overrides(&args.common.set)?;
    cfg.validate()?;
    echo_config(&cfg);

    let mut split = load_split(&args.data, SplitRole::Train)?;
    if let Some(n) = args.limit {
        split.limit(n);
    }
    if split.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    println!("training on {} samples from {}", split.len(), args.data.display());
    let samples = load_samples(&split)?;

    let store = ParamStore::new(Device::Cpu);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = RindNet::new(&cfg.model, &store, &mut rng)?;
    println!("model has {} parameters", store.parameter_count());
    if let Some(archive) = &args.pretrained {
        let report = backbone::load_pretrained(&store, archive, true)?;
        println!(
            "loaded pretrained backbone: {} tensors matched, {} unused in archive",
            report.matched.len(),
            report.unused.len()
        );
    }

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let cfg_snapshot = args.out.join("config.txt");
    std::fs::write(&cfg_snapshot, cfg.echo()).map_err(|e| Error::io(&cfg_snapshot, e))?;

    let outcome = trainer::fit(
        &model,
        &store,
        &samples,
        &cfg,
        &args.out,
        args.resume.as_deref(),
    )?;
    for (epoch, stats) in outcome.stats.iter().enumerate() {
        println!(
            "epoch {epoch}: total {:.5} edge {:.5} attention {:.5}",
            stats.total, stats.edge, stats.attention
        );
    }
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    Ok(())
}

fn tensor_plane_to_map(
    t: &candle_core::Tensor,
    plane: usize,
    h: usize,
    w: usize,
) -> Result<ndarray::Array2<f32>> {
    let data: Vec<f32> = t
        .narrow(1, plane, 1)?
        .flatten_all()?
        .to_vec1()?;
    Ok(ndarray::Array2::from_shape_vec((h, w), data)
        .expect("plane data matches padded dimensions"))
}

pub fn cmd_predict(args: PredictArgs) -> Result<()> {
    let meta = load_checkpoint_meta(&args.checkpoint)?;
    let mut cfg = config_from_meta(&meta)?;
    if let Some(path) = &args.common.config {
        cfg.load_file(path)?;
    }
    cfg.apply_overrides(&args.common.set)?;
    cfg.validate()?;
    echo_config(&cfg);

    let mut split = load_split(&args.data, parse_split(&args.split)?)?;
    if let Some(n) = args.limit {
        split.limit(n);
    }
    let store = ParamStore::new(Device::Cpu);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = RindNet::new(&cfg.model, &store, &mut rng)?;
    store.load(&args.checkpoint, None, true)?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for id in &split.ids {
        let sample = split.load_sample(id)?;
        let (h, w) = (sample.height(), sample.width());
        // pad to a stride multiple, predict, then un-pad to the original size
        let ph = h.div_ceil(16) * 16;
        let pw = w.div_ceil(16) * 16;
        let padded = pad_reflect(&sample.image, ph, pw);
        let x = preprocess(&padded, store.device())?;
        if cfg.model.generic_mode {
            let (p, _) = model.forward_generic(&x)?;
            let map = tensor_plane_to_map(&p, 0, ph, pw)?;
            let cropped = map.slice(s![..h, ..w]).to_owned();
            encode_prediction(&cropped, &prediction_path(&args.out, id, "generic"))?;
        } else {
            let set = model.forward_full(&x)?;
            for (k, ty) in EDGE_TYPES.iter().enumerate() {
                let map = tensor_plane_to_map(&set.y, k, ph, pw)?;
                let cropped = map.slice(s![..h, ..w]).to_owned();
                encode_prediction(&cropped, &prediction_path(&args.out, id, ty))?;
            }
        }
        println!("predicted {id} ({h}x{w})");
    }
    Ok(())
}

fn print_summary_table(report: &EvalReport) {
    println!("{:<14} {:>7} {:>7} {:>7}", "type", "ODS", "OIS", "AP");
    for ty in REPORT_TYPES {
        if let Some(s) = report.types.get(ty) {
            println!(
                "{:<14} {:>7.3} {:>7.3} {:>7.3}",
                ty, s.ods, s.ois, s.ap
            );
        }
    }
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = args.common.build_config()?;
    echo_config(&cfg);
    let mut split = load_split(&args.data, parse_split(&args.split)?)?;
    if let Some(n) = args.limit {
        split.limit(n);
    }
    let types: Vec<String> = if args.types.is_empty() {
        EDGE_TYPES.iter().map(|s| s.to_string()).collect()
    } else {
        args.types.clone()
    };
    let report = evaluate_dataset(&args.pred, &split, &types, &cfg.eval, Some(&args.out))?;
    print_summary_table(&report);
    println!("report written to {}", args.out.display());
    Ok(())
}

fn read_pr_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pts = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Data(format!(
                "{}:{}: expected threshold,precision,recall,f",
                path.display(),
                lineno + 1
            )));
        }
        let p: f64 = fields[1]
            .parse()
            .map_err(|_| Error::Data(format!("{}:{}: bad precision", path.display(), lineno + 1)))?;
        let r: f64 = fields[2]
            .parse()
            .map_err(|_| Error::Data(format!("{}:{}: bad recall", path.display(), lineno + 1)))?;
        pts.push((r, p));
    }
    if pts.is_empty() {
        return Err(Error::Data(format!(
            "{}: no data rows to plot",
            path.display()
        )));
    }
    Ok(pts)
}

pub fn cmd_plot(args: PlotArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut combined = Vec::new();
    for ty in REPORT_TYPES {
        let csv = args.report.join(format!("pr_{ty}.csv"));
        if !csv.exists() {
            continue;
        }
        let pts = read_pr_csv(&csv)?;
        render_pr_plot(
            &[(ty.to_string(), pts.clone())],
            &args.out.join(format!("pr_{ty}.png")),
        )?;
        combined.push((ty.to_string(), pts));
        println!("plotted {ty}");
    }
    if combined.is_empty() {
        return Err(Error::Data(format!(
            "no pr_<type>.csv files found in {}",
            args.report.display()
        )));
    }
    render_pr_plot(&combined, &args.out.join("pr_combined.png"))?;
    Ok(())
}
