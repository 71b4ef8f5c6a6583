use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dfsp_core::data::SyntheticSpec;
use dfsp_core::dfm::Variant;
use dfsp_core::space::World;

use crate::config::{parse_synthetic, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "dfsp",
    version,
    about = "Decomposed fusion with soft prompts: train, evaluate, sweep, check gradients"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, log, resolved config and test metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write the metrics report and curve.
    Eval(EvalArgs),
    /// Train and evaluate once per value of one parameter.
    Sweep(SweepArgs),
    /// Finite-difference check of the full training loss.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset as a manifest directory.
    GenSynthetic(GenArgs),
}

fn variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: dfsp_core::Error| e.to_string())
}

fn world(s: &str) -> Result<World, String> {
    s.parse().map_err(|e: dfsp_core::Error| e.to_string())
}

/// Data source, model, optimizer and evaluation settings shared by the
/// training commands. Every flag overrides the config file.
#[derive(Debug, Args, Default)]
pub struct RunFlags {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Synthetic data, e.g. `n=5,m=5,sigma=0.05,spp=20,unseen=0.2,seed=0`.
    #[arg(long, value_parser = parse_synthetic)]
    pub synthetic: Option<SyntheticSpec>,
    /// Output directory [default: $DFSP_OUTPUT_ROOT/<command>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, alias = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub adam_epsilon: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight of the state/object loss.
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: Option<f64>,
    /// Weight of the soft-prompt loss.
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<f64>,
    /// Fusion blocks K.
    #[arg(long, alias = "K")]
    pub blocks: Option<usize>,
    /// t2i, i2t or BiF.
    #[arg(long, value_parser = variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub prompt_dim: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub prefix_len: Option<usize>,
    #[arg(long)]
    pub image_tokens: Option<usize>,
    /// `false` trains the soft-prompt branch alone.
    #[arg(long)]
    pub use_dfm: Option<bool>,
    /// closed or open.
    #[arg(long, value_parser = world)]
    pub world: Option<World>,
    /// Open-world feasibility threshold T.
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
    /// Word vectors for open-world feasibility.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

impl RunFlags {
    /// Config file (if any) with every given flag applied on top. A data
    /// source flag replaces both sources from the file.
    pub fn resolve(&self) -> dfsp_core::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if self.data.is_some() || self.synthetic.is_some() {
            c.data = self.data.clone();
            c.synthetic = self.synthetic.clone();
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set!(
            epochs => train.epochs,
            batch_size => train.batch_size,
            learning_rate => train.learning_rate,
            adam_beta1 => train.adam_beta1,
            adam_beta2 => train.adam_beta2,
            adam_epsilon => train.adam_epsilon,
            seed => train.seed,
            alpha => train.alpha,
            beta => train.beta,
            blocks => train.blocks,
            variant => train.variant,
            temperature => train.temperature,
            prompt_dim => train.prompt_dim,
            feature_dim => train.feature_dim,
            prefix_len => train.prefix_len,
            image_tokens => train.image_tokens,
            use_dfm => train.use_dfm,
            world => world,
            threshold => threshold,
        );
        if self.embeddings.is_some() {
            c.embeddings = self.embeddings.clone();
        }
        if self.out.is_some() {
            c.output = self.out.clone();
        }
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split to evaluate.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Alpha,
    Beta,
    #[value(name = "K", alias = "k", alias = "blocks")]
    K,
    #[value(name = "T", alias = "t", alias = "threshold")]
    T,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Parameter to vary: alpha, beta, K or T.
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values.
    #[arg(
        long,
        value_delimiter = ',',
        required = true,
        num_args = 1,
        allow_hyphen_values = true
    )]
    pub values: Vec<f64>,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of states in the check space.
    #[arg(long, default_value_t = 3)]
    pub states: usize,
    /// Number of objects in the check space.
    #[arg(long, default_value_t = 3)]
    pub objects: usize,
    /// Sets d, d_f and the input dimension together.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Labelled samples in the check batch.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Standard deviation of the noise added to the initial parameters so
    /// the check does not sit on the identity initialization.
    #[arg(long, default_value_t = 0.05)]
    pub perturb: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<f64>,
    #[arg(long, alias = "K")]
    pub blocks: Option<usize>,
    #[arg(long, value_parser = variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub image_tokens: Option<usize>,
    #[arg(long)]
    pub prefix_len: Option<usize>,
    #[arg(long)]
    pub use_dfm: Option<bool>,
    /// Scales one group's analytic gradient by 1.5 (test fixture).
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Synthetic spec, e.g. `n=5,m=5,sigma=0.05`.
    #[arg(long, value_parser = parse_synthetic, default_value = "default")]
    pub synthetic: SyntheticSpec,
    /// Manifest directory to write [default: $DFSP_OUTPUT_ROOT/gen-synthetic].
    #[arg(long)]
    pub out: Option<PathBuf>,
}
