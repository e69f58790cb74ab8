//! Command-line surface. Every flag in [`ConfigArgs`] mirrors a field of the
//! JSON config; flags are applied on top of the file.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmnet_core::ablation::Study;
use mmnet_core::{DType, IouAgg, Split, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::ConfigError;

#[derive(Parser, Debug)]
#[command(name = "mmnet", version, about = "Multi-query, multi-mask referring segmentation on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset to disk.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus logs.
    Train(TrainArgs),
    /// Score a checkpoint on a split.
    Eval(EvalArgs),
    /// Run an ablation study and write its table.
    Ablate(AblateArgs),
    /// Write per-query masks, scores and the aggregated prediction as PNGs.
    ExportMasks(ExportArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 96 px desk-scale defaults.
    Desk,
    /// Full-size widths at 480 px.
    PaperDims,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct ConfigArgs {
    /// JSON config mirroring the training config; unknown keys are errors.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base values used before the config file is applied.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub poly_power: Option<f64>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub val_size: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long, value_parser = parse_agg)]
    pub iou_agg: Option<IouAgg>,
    #[arg(long, value_parser = parse_dtype)]
    pub dtype: Option<DType>,
    /// Seed of the synthetic scenes (`data.seed`).
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub raster_cell: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub num_queries: Option<usize>,
    #[arg(long)]
    pub decoder_layers: Option<usize>,
    /// Sets `model.use_fvg` to false.
    #[arg(long)]
    pub no_fvg: bool,
    /// Sets `model.use_mmp` to false.
    #[arg(long)]
    pub no_mmp: bool,
    /// Sets `model.use_mqe` to false.
    #[arg(long)]
    pub no_mqe: bool,
}

fn parse_agg(s: &str) -> Result<IouAgg, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("expected mean or overall, got {s}"))
}

fn parse_dtype(s: &str) -> Result<DType, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("expected f32 or f64, got {s}"))
}

impl ConfigArgs {
    /// Preset, then file, then flags; the result is validated.
    pub fn resolve(&self) -> Result<TrainConfig, ConfigError> {
        let mut cfg = match self.preset.unwrap_or(Preset::Desk) {
            Preset::Desk => TrainConfig::default(),
            Preset::PaperDims => TrainConfig::paper_dims(),
        };
        if let Some(path) = &self.config {
            cfg = read_config(path)?;
        }
        self.apply(&mut cfg);
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    fn apply(&self, c: &mut TrainConfig) {
        fn set<T: Copy>(dst: &mut T, v: Option<T>) {
            if let Some(v) = v {
                *dst = v;
            }
        }
        set(&mut c.seed, self.seed);
        set(&mut c.epochs, self.epochs);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.lr, self.lr);
        set(&mut c.poly_power, self.poly_power);
        set(&mut c.train_size, self.train_size);
        set(&mut c.val_size, self.val_size);
        set(&mut c.eval_every, self.eval_every);
        set(&mut c.iou_agg, self.iou_agg);
        set(&mut c.dtype, self.dtype);
        set(&mut c.data.seed, self.data_seed);
        set(&mut c.data.raster_cell, self.raster_cell);
        set(&mut c.model.image_size, self.image_size);
        set(&mut c.model.hidden, self.hidden);
        set(&mut c.model.num_queries, self.num_queries);
        set(&mut c.model.decoder_layers, self.decoder_layers);
        if self.no_fvg {
            c.model.use_fvg = false;
        }
        if self.no_mmp {
            c.model.use_mmp = false;
        }
        if self.no_mqe {
            c.model.use_mqe = false;
        }
    }
}

pub fn read_config(path: &Path) -> Result<TrainConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    TrainConfig::from_json(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory for the checkpoint, logs and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Read splits from a dataset directory instead of generating them.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "val", value_parser = parse_split)]
    pub split: Split,
    /// Read the split from a dataset directory instead of regenerating it
    /// from the checkpoint's config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Where to write the report and manifest; defaults to the checkpoint's
    /// directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_agg)]
    pub iou_agg: Option<IouAgg>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_parser = parse_study)]
    pub study: Study,
    /// Comma-separated training seeds; each cell reports the median.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "val", value_parser = parse_split)]
    pub split: Split,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of samples to export, from the start of the split.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Run the checkpoint with score-weighted queries producing one mask.
    #[arg(long)]
    pub no_mmp: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Write into this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: mmnet_core::Error| e.to_string())
}

fn parse_study(s: &str) -> Result<Study, String> {
    s.parse().map_err(|e: mmnet_core::Error| e.to_string())
}
