use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "multitok", version, about = "Multi-token prediction: train, mask, decode, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model, or extend a single-head base model with new heads.
    Train(TrainArgs),
    /// Count n-grams on the training split and write a co-occurrence mask.
    BuildMask(BuildMaskArgs),
    /// Generate text from a prompt.
    Generate(GenerateArgs),
    /// Per-head and joint perplexities on the validation split.
    Ppl(PplArgs),
    /// Dynamic perplexity, speed-up and mix over a grid of epsilon_b.
    Sweep(SweepArgs),
    /// Compare the closed-form transport solution with a numeric minimizer.
    OtCheck(OtCheckArgs),
}

/// Corpus flags. Unset values fall back to a config file, then defaults.
#[derive(Debug, Clone, Args, Default)]
pub struct CorpusArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// byte or char
    #[arg(long)]
    pub token_mode: Option<String>,
    /// Fraction of lines used for training.
    #[arg(long)]
    pub split: Option<f64>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key=value file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub stem_layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub context_len: Option<usize>,
    #[arg(long)]
    pub attn_heads: Option<usize>,
    #[arg(long)]
    pub lr_b: Option<f64>,
    #[arg(long)]
    pub lr_m: Option<f64>,
    #[arg(long)]
    pub lr_mb: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// adamw or sgd
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Warmup fraction of the steps; 0 with a constant rate when "off".
    #[arg(long)]
    pub warmup: Option<String>,
    /// Global gradient-norm clip, or "off".
    #[arg(long)]
    pub grad_clip: Option<String>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Single-head checkpoint whose layers seed the new model.
    #[arg(long)]
    pub from_base: Option<PathBuf>,
    /// Initialize new heads as copies of the first head.
    #[arg(long)]
    pub copy_init: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildMaskArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Take the vocabulary from this checkpoint instead of the corpus.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub order: usize,
    /// Additive smoothing per cell.
    #[arg(long, default_value_t = 0.5)]
    pub floor: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    /// Highest joint order; defaults to min(3, heads).
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub epsilon_b: f64,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    #[arg(long, default_value_t = 0.7)]
    pub temperature: f64,
    #[arg(long, default_value_t = 1.1)]
    pub rep_penalty: f64,
    #[arg(long, default_value_t = 64)]
    pub rep_window: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha_c: f64,
    /// on or off
    #[arg(long, default_value = "on")]
    pub adaptive: String,
    /// Odd kernel size, or "off".
    #[arg(long, default_value = "3")]
    pub blur: String,
    /// Mask files, one per order 2..=n_max. Without any, masking is skipped.
    #[arg(long = "mask")]
    pub masks: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub max_tokens: usize,
    /// Stop after emitting this symbol.
    #[arg(long)]
    pub stop: Option<char>,
    /// Per-step CSV: step, n_emitted, backoffs, max_joint_value.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Also time a one-token-per-step run of the same length.
    #[arg(long)]
    pub wall_clock: bool,
}

#[derive(Debug, Args)]
pub struct PplArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub order: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// start:stop:step (inclusive) or a comma list.
    #[arg(long = "epsilon-b", default_value = "0:1:0.1")]
    pub grid: String,
    #[command(flatten)]
    pub decode: SweepDecodeArgs,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Decoder flags for the sweep, without epsilon_b.
#[derive(Debug, Clone, Args)]
pub struct SweepDecodeArgs {
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    #[arg(long, default_value_t = 0.7)]
    pub temperature: f64,
    #[arg(long, default_value_t = 1.1)]
    pub rep_penalty: f64,
    #[arg(long, default_value_t = 64)]
    pub rep_window: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha_c: f64,
    #[arg(long, default_value = "on")]
    pub adaptive: String,
    #[arg(long, default_value = "3")]
    pub blur: String,
    #[arg(long = "mask")]
    pub masks: Vec<PathBuf>,
}

impl SweepDecodeArgs {
    pub fn with_epsilon(&self, epsilon_b: f64) -> DecodeArgs {
        DecodeArgs {
            n_max: self.n_max,
            epsilon_b,
            k: self.k,
            temperature: self.temperature,
            rep_penalty: self.rep_penalty,
            rep_window: self.rep_window,
            alpha_c: self.alpha_c,
            adaptive: self.adaptive.clone(),
            blur: self.blur.clone(),
            masks: self.masks.clone(),
        }
    }
}

#[derive(Debug, Args)]
pub struct OtCheckArgs {
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    /// Fixed vocabulary size; drawn from 2..=5 per trial when absent.
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
}
