//! Command-line workflows: synthetic data, label descriptions, training,
//! evaluation, the ablation grid and per-patch match reports.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flexmatch::losses::{QNormalization, TemperatureMode};
use flexmatch::simkernel::Scorer;
use flexmatch::textaug::CaptionMode;
use flexmatch::trainpipe::{Positives, TrainConfig};
use flexmatch::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "flexmatch", version, about = "Flexible patch-token matching for food image classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic food dataset.
    GenData(GenDataArgs),
    /// Fetch one appearance description per class.
    AugmentLabels(AugmentArgs),
    /// Train a dual encoder and write its ledger and checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train the matching × categorical × caption grid.
    Ablate(AblateArgs),
    /// Explain how each image patch matches a caption.
    MatchViz(MatchVizArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Directory that receives every machine-readable output.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root (`train/` and `test/` class folders, or one folder per class).
    #[arg(long)]
    pub data: PathBuf,
    /// Seed for an 80:20 split when the root has no `test/` folder.
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    /// Ingredient glyphs per class.
    #[arg(long)]
    pub ingredients: Option<usize>,
    /// Fraction of ingredients shared with the sibling class.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Position, size and colour jitter.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct ProviderArgs {
    /// JSON file mapping class names to descriptions.
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    /// Use the ingredient lists stored in a synthetic dataset's manifest.
    #[arg(long)]
    pub synthetic: bool,
    /// Chat-completions endpoint URL.
    #[arg(long)]
    pub endpoint: Option<String>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub provider: ProviderArgs,
    /// Model name sent to the endpoint.
    #[arg(long, default_value = "gpt-4")]
    pub model: String,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    pub token_env: Option<String>,
    /// Directory caching remote answers.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Fixture used for classes the endpoint fails on.
    #[arg(long)]
    pub fallback: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Training settings: a TOML file, then individual flags on top.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// flexible, filip or clip.
    #[arg(long)]
    pub scorer: Option<Scorer>,
    /// Enable the categorical branch.
    #[arg(long)]
    pub ic: Option<bool>,
    /// standard or augmented.
    #[arg(long)]
    pub caption_mode: Option<CaptionMode>,
    #[arg(long)]
    pub lower: Option<f64>,
    #[arg(long)]
    pub upper: Option<f64>,
    /// Weight of the contrastive term.
    #[arg(long)]
    pub m: Option<f64>,
    /// Weight of the categorical term.
    #[arg(long)]
    pub n: Option<f64>,
    /// learnable, learnable:<x> or fixed:<x>.
    #[arg(long)]
    pub temperature: Option<TemperatureMode>,
    /// same_label or diagonal.
    #[arg(long)]
    pub positives: Option<Positives>,
    /// literal or row_normalized.
    #[arg(long)]
    pub q_normalization: Option<QNormalization>,
    #[arg(long)]
    pub eval_every_epoch: Option<bool>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:ident),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { cfg.$target = v; })*
            };
        }
        set!(
            epochs => epochs,
            seed => seed,
            batch_size => batch_size,
            lr => lr,
            weight_decay => weight_decay,
            scorer => scorer,
            ic => use_ic,
            caption_mode => caption_mode,
            lower => lower_threshold,
            upper => upper_threshold,
            m => m,
            n => n,
            temperature => temperature,
            positives => positives,
            q_normalization => q_normalization,
            eval_every_epoch => eval_every_epoch,
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Description fixture for augmented captions.
    #[arg(long)]
    pub descriptions: Option<PathBuf>,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub descriptions: Option<PathBuf>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct MatchVizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file; resized to the checkpoint's input size.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub caption: String,
    /// Lower threshold; defaults to the checkpoint's.
    #[arg(long)]
    pub lower: Option<f64>,
    /// Upper threshold; defaults to the checkpoint's.
    #[arg(long)]
    pub upper: Option<f64>,
    /// Also write the report files here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

/// 1 for bad input, 2 for provider and filesystem failures.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_user_error() {
        1
    } else {
        2
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match commands::execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
