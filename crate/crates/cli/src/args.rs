use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "lqae", version, about = "Train and evaluate language-quantized image autoencoders")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Config file (`key = value` lines) or a run's manifest.json. Defaults to the desk preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory. Defaults to `runs/<command>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Recompute outputs even if a completed run is present.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train an autoencoder against the frozen codebook and denoiser.
    Train(TrainArgs),
    /// Print the code text (or ids) of images.
    Encode(EncodeArgs),
    /// Write reconstructions of images.
    Reconstruct(ReconstructArgs),
    /// Linear probes on denoiser features, the tiled-encoder baseline and a shuffled-label control.
    Probe(ProbeArgs),
    /// Few-shot classification over the table settings grid.
    Fewshot(FewshotArgs),
    /// Train and evaluate one variant per switch value.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many total steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// `KEY=VALUE` config overrides, applied after the config file.
    pub overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct EncodeArgs {
    /// Checkpoint directory, or a training output directory containing one.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Emit integer code ids instead of token text.
    #[arg(long)]
    pub ids: bool,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Denoiser layers to pool, `0` being the embedding output. Defaults to all.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Images per class drawn for synthetic probe data.
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0.5)]
    pub test_fraction: f64,
    /// Also write the feature matrices.
    #[arg(long)]
    pub save_features: bool,
    /// `KEY=VALUE` overrides of the data settings (`dataset`, `n_classes`).
    pub overrides: Vec<String>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// Answers with the label of the support image whose codes are closest in Hamming distance.
    Nearest,
    /// Answers with a uniformly drawn support label.
    Random,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    /// The seven table columns.
    Columns,
    /// Every induction, shots and repeats combination.
    Full,
}

#[derive(Args, Debug, Clone)]
pub struct FewshotArgs {
    /// Checkpoint whose codes render the images. Without it, use `--ascii`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Render images as ASCII art instead of codes.
    #[arg(long)]
    pub ascii: bool,
    #[arg(long, default_value_t = 2)]
    pub ways: usize,
    #[arg(long, default_value_t = 100.0)]
    pub keep_pct: f64,
    /// Episodes per setting.
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, value_enum, default_value_t = Backend::Nearest)]
    pub backend: Backend,
    #[arg(long, value_enum, default_value_t = Grid::Columns)]
    pub grid: Grid,
    /// Images per class drawn for synthetic episode data.
    #[arg(long, default_value_t = 10)]
    pub per_class: usize,
    /// Id-to-id table (one target id per line) applied to the codes before rendering.
    #[arg(long, requires = "target_codebook")]
    pub code_mapping: Option<PathBuf>,
    /// Codebook directory whose vocabulary renders mapped codes.
    #[arg(long, requires = "code_mapping")]
    pub target_codebook: Option<PathBuf>,
    #[arg(long, default_value = "Please answer the question")]
    pub induction_text: String,
    /// `{class}` is replaced by the class name.
    #[arg(long, default_value = "this is a {class}")]
    pub label_template: String,
    #[arg(long, default_value = "this is a")]
    pub answer_stem: String,
    /// Largest prompt accepted, in units of 4 bytes.
    #[arg(long, default_value_t = 4096)]
    pub token_budget: usize,
    /// `KEY=VALUE` overrides of the data settings.
    pub overrides: Vec<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct AblateArgs {
    /// `switch=v1,v2,...`; repeatable. Each value yields one variant that differs from the base in that switch only.
    #[arg(long = "sweep")]
    pub sweeps: Vec<String>,
    /// File of `switch = v1, v2, ...` lines, read before `--sweep`.
    #[arg(long)]
    pub sweep_file: Option<PathBuf>,
    /// Add the standard table variants (L2 off, untrained denoiser, entropy on, BERT weight 0 and 1, decoder requantization, keep 25/50/75/100%).
    #[arg(long)]
    pub table: bool,
    /// Training steps per variant. Defaults to the full schedule.
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub probe_per_class: usize,
    /// Few-shot episodes per column.
    #[arg(long, default_value_t = 20)]
    pub episodes: usize,
    /// `KEY=VALUE` overrides of the base config.
    pub overrides: Vec<String>,
}
