//! Flag definitions and the key=value config overlay.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "attcdc", version, about = "Train, evaluate and explain attention-augmented DenseNet-121 classifiers")]
pub struct Cli {
    /// key=value file of flag defaults; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on an image folder or a synthetic preset.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Evaluate(EvaluateArgs),
    /// Export a Grad-CAM overlay for one image.
    Gradcam(GradcamArgs),
    /// Print parameter and MAC counts for a configuration.
    Params(ParamsArgs),
    /// Write a synthetic quadrant-blob dataset.
    Synth(SynthArgs),
}

pub const SUBCOMMANDS: [&str; 5] = ["train", "evaluate", "gradcam", "params", "synth"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Enhanced,
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossArg {
    Focal,
    Ce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaArg {
    /// Weight 1 for every class.
    Uniform,
    /// Inverse training-split class frequency, scaled to average 1.
    InverseFrequency,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvModeArg {
    Standard,
    Separable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetArg {
    Easy,
    Imbalanced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

/// Architecture flags shared by `train` and `params`.
#[derive(Clone, Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = ModelKind::Enhanced)]
    pub model: ModelKind,

    /// Reduction ratio of the attention bottleneck (enhanced only).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention_reduction: Option<usize>,

    /// Dense-layer 3x3 convolution; defaults to separable for enhanced.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conv_mode: Option<ConvModeArg>,

    /// Layers per dense block, comma separated.
    #[arg(long, default_value = "6,12,24,16")]
    pub block_layout: String,

    #[arg(long, default_value_t = 32)]
    pub growth_rate: usize,

    #[arg(long, default_value_t = 64)]
    pub stem_channels: usize,
}

#[derive(Clone, Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(group(clap::ArgGroup::new("source").required(true).args(["data", "synth"])))]
pub struct TrainArgs {
    /// Image folder: one subdirectory per class.
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,

    /// Generate a synthetic preset into OUT/data and train on it.
    #[arg(long, value_enum, value_name = "PRESET")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<PresetArg>,

    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,

    #[arg(long, value_enum, default_value_t = LossArg::Focal)]
    pub loss: LossArg,

    #[arg(long, default_value_t = 2.0)]
    pub focal_gamma: f64,

    #[arg(long, value_enum, default_value_t = AlphaArg::Uniform)]
    pub focal_alpha: AlphaArg,

    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,

    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,

    #[arg(long, default_value_t = 20)]
    pub epochs: usize,

    /// Seeds weights, split, batch order, augmentation and synthetic data.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,

    /// Input side in pixels; defaults to the preset size or 224.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,

    /// Train,val,test fractions.
    #[arg(long, default_value = "0.7,0.1,0.2")]
    pub split: String,

    /// Random flips and small rotations on training batches.
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub augment: bool,

    /// Record per-epoch seconds; false makes metrics.csv reproducible byte for byte.
    #[arg(long, num_args = 0..=1, default_value_t = true, default_missing_value = "true")]
    pub log_wall_time: bool,

    /// Continue from OUT/last.ckpt up to --epochs.
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub resume: bool,

    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvaluateArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,

    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,

    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,

    /// Split CSV written by `train`; otherwise the split is recomputed from
    /// the seed and fractions.
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_file: Option<PathBuf>,

    /// Split seed; defaults to the training seed stored in the checkpoint.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,

    #[arg(long, default_value = "0.7,0.1,0.2")]
    pub fractions: String,

    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,

    /// MetricsReport JSON destination.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GradcamArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,

    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,

    /// Target class index, or `predicted`.
    #[arg(long, default_value = "predicted")]
    pub class: String,

    /// Feature map to explain; defaults to the last block's output.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<String>,

    /// Overlay PNG destination.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,

    /// Also write the upsampled heatmap as a CSV grid.
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ParamsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,

    #[arg(long, default_value_t = 4)]
    pub classes: usize,

    /// Input side used for output shapes and MAC counts.
    #[arg(long, default_value_t = 224)]
    pub image_size: usize,

    /// Emit the summary as JSON instead of a table.
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub json: bool,
}

#[derive(Clone, Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = PresetArg::Easy)]
    pub preset: PresetArg,

    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,

    #[arg(long, default_value_t = 42)]
    pub seed: u64,

    /// Write into a non-empty destination.
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub force: bool,
}

/// Reads a config file into `--key=value` arguments. Blank lines and lines
/// starting with `#` are ignored.
pub fn read_config(path: &Path) -> Result<Vec<String>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("{}:{}: expected key=value, got {line:?}", path.display(), n + 1));
        };
        let key = key.trim();
        if key == "config" {
            return Err(format!("{}:{}: config files cannot include other config files", path.display(), n + 1));
        }
        out.push(format!("--{key}={}", value.trim()));
    }
    Ok(out)
}

/// Finds `--config FILE` in raw arguments.
fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            return None;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Splices config-file entries in right after the subcommand name so that
/// flags given on the command line override them.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let extra = read_config(&path)?;
    let Some(pos) = args.iter().position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref())) else {
        return Ok(args);
    };
    let mut out = args[..=pos].to_vec();
    out.extend(extra.into_iter().map(OsString::from));
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

/// Flag values as `key=value` lines, loadable again with `--config`.
pub fn effective_config<A: Serialize>(args: &A) -> String {
    let value = serde_json::to_value(args).expect("flag structs serialize");
    let mut out = String::new();
    if let serde_json::Value::Object(map) = value {
        for (k, v) in map {
            let v = match v {
                serde_json::Value::Null => continue,
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            out.push_str(&format!("{k}={v}\n"));
        }
    }
    out
}

pub fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("invalid {what} entry {p:?} in {s:?}")))
        .collect()
}
