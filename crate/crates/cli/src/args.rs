use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use spotlighter::activation::SelectionVariant;
use spotlighter::features::SynthSpec;
use spotlighter::memory_bank::InitMode;
use spotlighter::pipeline::RunConfig;
use spotlighter::representative::TierMode;
use spotlighter::{Error, Result};

pub const SEED_ENV: &str = "SPOTLIGHTER_SEED";

pub const BASE_TRAIN_FILE: &str = "base_train.spot";
pub const BASE_TEST_FILE: &str = "base_test.spot";
pub const NOVEL_TEST_FILE: &str = "novel_test.spot";

/// Representative-token mining on synthetic or pre-extracted features.
///
/// Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
/// failure. SPOTLIGHTER_SEED sets the default seed; a config file or
/// --seed overrides it.
#[derive(Debug, Parser)]
#[command(name = "spotlighter", version, about, long_about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic base/novel episode as three feature files.
    Gen(GenArgs),
    /// Train the fusion modules and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on base and novel test sets.
    Eval(EvalArgs),
    /// Run the 72-cell ablation grid and write one CSV row per cell.
    Ablate(AblateArgs),
    /// Finite-difference check of every trainable gradient.
    Gradcheck(GradcheckArgs),
    /// Measure inference throughput over a k sweep.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Classes per split (the episode has twice as many) [default: 10]
    #[arg(long)]
    pub n_classes: Option<usize>,
    /// Tokens per item [default: 32]
    #[arg(long)]
    pub n_tok: Option<usize>,
    /// Embedding width [default: 64]
    #[arg(long)]
    pub d: Option<usize>,
    /// Class-informative tokens per item [default: 4]
    #[arg(long)]
    pub signal_tokens: Option<usize>,
    /// Noise scale of tokens and text embeddings [default: 0.3]
    #[arg(long, allow_hyphen_values = true)]
    pub noise_sigma: Option<f64>,
    /// Shared background directions for distractor tokens [default: 256]
    #[arg(long)]
    pub distractor_pool: Option<usize>,
    /// Generator seed [default: $SPOTLIGHTER_SEED, else 7]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training items per base class [default: 16]
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    /// Test items per class [default: 50]
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
}

impl SynthArgs {
    pub fn spec(&self) -> Result<SynthSpec> {
        let d = SynthSpec::default();
        let spec = SynthSpec {
            n_classes: self.n_classes.unwrap_or(d.n_classes),
            n_tok: self.n_tok.unwrap_or(d.n_tok),
            d: self.d.unwrap_or(d.d),
            signal_tokens: self.signal_tokens.unwrap_or(d.signal_tokens),
            noise_sigma: self.noise_sigma.unwrap_or(d.noise_sigma),
            distractor_pool: self.distractor_pool.unwrap_or(d.distractor_pool),
            seed: match self.seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(d.seed),
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory for base_train.spot, base_test.spot, novel_test.spot
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub synth: SynthArgs,
}

/// Run-config overrides. Every flag defaults to the config file value, which
/// defaults to the built-in constant shown.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file; `#` starts a comment
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Activated tokens per item [default: 16]
    #[arg(long)]
    pub k_act: Option<usize>,
    /// Prototypes per class [default: 5]
    #[arg(long)]
    pub n_proto: Option<usize>,
    /// Embedding width [default: 64]
    #[arg(long)]
    pub width: Option<usize>,
    /// Attention heads [default: 4]
    #[arg(long)]
    pub heads: Option<usize>,
    /// Text fusion coefficient [default: 0.2]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Prototype momentum [default: 0.8]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Softmax temperature [default: 0.01]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Graded tier loss weight [default: 0.02]
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Text regularizer weight [default: 20]
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Visual KL and local loss weight [default: 0.1]
    #[arg(long)]
    pub lambda3: Option<f64>,
    /// Training epochs [default: 30]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// SGD learning rate [default: 0.01]
    #[arg(long)]
    pub lr: Option<f64>,
    /// SGD momentum, 0 for plain SGD [default: 0]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Items per optimizer step [default: 8]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed for initialization and data order [default: $SPOTLIGHTER_SEED, else 7]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Add prototype similarity to activation scores [default: true]
    #[arg(long)]
    pub semantic_on: Option<bool>,
    /// Re-score activated tokens against updated prototypes [default: true]
    #[arg(long)]
    pub recalc_on: Option<bool>,
    /// Prototype initialization [default: text-seeded]
    #[arg(long, value_parser = ["text-seeded", "random"])]
    pub init_mode: Option<String>,
    /// Token selection [default: top-k]
    #[arg(long, value_parser = ["top-k", "bottom-k", "remove-top-k"])]
    pub selection: Option<String>,
    /// Tiers used at inference [default: both]
    #[arg(long, value_parser = ["both", "lev1", "lev2"])]
    pub tier: Option<String>,
    /// Any other config key, as key=value (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    /// Defaults, then `SPOTLIGHTER_SEED`, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(seed) = env_seed()? {
            cfg.seed = seed;
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
            cfg = RunConfig::parse_kv(&text, cfg)?;
        }
        macro_rules! over {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field { cfg.$field = v; }
            )*};
        }
        over!(k_act, n_proto, width, heads, alpha, beta, tau, lambda1, lambda2, lambda3, epochs, lr, momentum,
              batch_size, seed, semantic_on, recalc_on);
        if let Some(v) = &self.init_mode {
            cfg.init_mode = v.parse::<InitMode>()?;
        }
        if let Some(v) = &self.selection {
            cfg.selection_variant = v.parse::<SelectionVariant>()?;
        }
        if let Some(v) = &self.tier {
            cfg.tier_mode = v.parse::<TierMode>()?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("--set expects key=value, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding base_train.spot (alternative to --train)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Training feature file
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Checkpoint to write
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the JSON report here (it always goes to stdout)
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory holding base_test.spot and novel_test.spot
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub novel: Option<PathBuf>,
    /// Override the checkpoint's inference tier mode
    #[arg(long, value_parser = ["both", "lev1", "lev2"])]
    pub tier: Option<String>,
    /// Override the number of activated tokens at inference
    #[arg(long)]
    pub k: Option<usize>,
    /// Write the metrics as JSON here
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Directory holding the three episode files
    #[arg(long)]
    pub data: PathBuf,
    /// CSV to write
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Width of the checked model, at most 16 [default: 8]
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    /// Attention heads [default: 2]
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Number of random parameter points [default: 100]
    #[arg(long, default_value_t = 100)]
    pub seeds: usize,
    /// First seed [default: $SPOTLIGHTER_SEED, else 0]
    #[arg(long)]
    pub first_seed: Option<u64>,
    /// Central-difference step [default: 1e-6]
    #[arg(long, default_value_t = spotlighter::pipeline::DEFAULT_GRADCHECK_EPS)]
    pub eps: f64,
    /// Perturb the analytic gradient to confirm the check fails
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
    /// Flat `key = value` config file applied before the width flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Feature file to time; generated from the synthetic flags otherwise
    #[arg(long)]
    pub workload: Option<PathBuf>,
    /// Minimum number of generated items [default: 1000]
    #[arg(long, default_value_t = 1000)]
    pub items: usize,
    /// Comma-separated activated-token counts
    #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 16, 32])]
    pub k: Vec<usize>,
    /// Timed repetitions per configuration, at least 5
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Untimed warmup passes per configuration
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Write the report as JSON here (it always goes to stdout)
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Write the k sweep as CSV here
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub synth: SynthArgs,
}

pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        _ => Ok(None),
    }
}

/// An explicit path, or `name` inside `dir`.
pub fn resolve_path(explicit: &Option<PathBuf>, dir: &Option<PathBuf>, name: &str, flag: &str) -> Result<PathBuf> {
    match (explicit, dir) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(d)) => Ok(Path::new(d).join(name)),
        (None, None) => Err(Error::InvalidConfig(format!("pass --{flag} or --data"))),
    }
}
