use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use expliciter::{Result, TrainConfig};

pub const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal error
  2  usage error
  3  config error
  4  corpus error
  5  checkpoint error
  6  training error
  7  I/O error";

#[derive(Debug, Parser)]
#[command(name = "expliciter", version, about = "Implicit discourse relation classification", after_help = EXIT_CODES)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a corpus and write checkpoint, history, manifest and test metrics.
    Train(TrainArgs),
    /// Score a checkpoint on one role of a split.
    Eval(EvalArgs),
    /// Classify instances from a JSON-lines file.
    Predict(PredictArgs),
    /// Write the test-mode attention matrix of one instance as TSV.
    DumpAttention(DumpAttentionArgs),
    /// List the memory columns one instance attends to most.
    DumpMemoryNeighbors(DumpNeighborsArgs),
    /// Generate a synthetic corpus with planted relation markers.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// JSON-lines corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// pdtb-lin, pdtb-ji, cv, cv-instance or ratio[:TRAIN,DEV,TEST].
    #[arg(long, default_value = "pdtb-lin")]
    pub scheme: String,
    /// Number of cross-validation folds.
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    /// Drop senses outside the label set instead of failing.
    #[arg(long)]
    pub drop_unknown_labels: bool,
    /// Label file overriding the bundled set for the task.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: CorpusArgs,
    /// second-level-11, top-4 or binary:<Class>.
    #[arg(long, default_value = "second-level-11")]
    pub task: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pretrained vectors in word2vec text format.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Cross-validation folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Suppress per-epoch progress.
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub hyper: ConfigFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: CorpusArgs,
    /// Checkpoint file, or the training output directory for cross-validation.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Task to score; defaults to the checkpoint's own task.
    #[arg(long)]
    pub task: Option<String>,
    /// test, dev, train or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Metrics JSON path; standard output if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON-lines instances (`-` for standard input).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpAttentionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One JSON instance: inline, a file path, or `-`.
    #[arg(long)]
    pub instance: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpNeighborsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One JSON instance: inline, a file path, or `-`.
    #[arg(long)]
    pub instance: String,
    #[arg(long, default_value_t = 2)]
    pub top_n: usize,
    /// Mask the memory columns of this training id.
    #[arg(long)]
    pub exclude: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output path (`-` for standard output).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// second-level-11 or top-4.
    #[arg(long, default_value = "top-4")]
    pub task: String,
    /// Class counts in reference training proportions (top-4 only).
    #[arg(long, conflicts_with = "label_counts")]
    pub reference_proportions: bool,
    /// Exact comma-separated count per class.
    #[arg(long, value_delimiter = ',')]
    pub label_counts: Option<Vec<usize>>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub markers_per_label: Option<usize>,
    #[arg(long)]
    pub min_arg_len: Option<usize>,
    #[arg(long)]
    pub max_arg_len: Option<usize>,
    #[arg(long)]
    pub multi_label_rate: Option<f64>,
}

macro_rules! config_flags {
    ($($field:ident => $help:literal,)*) => {
        #[derive(Debug, Clone, Default, Args)]
        #[command(next_help_heading = "Hyperparameters")]
        pub struct ConfigFlags {
            $(
                #[doc = $help]
                #[arg(long, value_name = "VALUE")]
                pub $field: Option<String>,
            )*
        }

        impl ConfigFlags {
            #[cfg(test)]
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn apply(&self, config: &mut TrainConfig) -> Result<()> {
                $(
                    if let Some(v) = &self.$field {
                        config.set(stringify!($field), v)?;
                    }
                )*
                Ok(())
            }
        }
    };
}

config_flags! {
    d => "Word embedding size",
    q1 => "Embedding dropout rate",
    q2 => "Classifier input dropout rate",
    lr1 => "Encoder-decoder learning rate",
    lr2 => "Classifier learning rate",
    k => "k of k-max average pooling",
    w => "Decoder loss weight in the joint objective",
    lambda => "L2 coefficient",
    hidden => "LSTM hidden size",
    init_range => "Half-width of the uniform initialiser",
    forget_bias_one => "Start forget-gate biases at 1",
    fusion => "sum or concat",
    decoder_init => "encoder or zero",
    train_embeddings => "Update the embedding table",
    l2_embeddings => "Include the embedding table in the L2 term",
    grad_clip => "Global gradient-norm clip (0 disables)",
    phase1_max_epochs => "Epoch budget of encoder-decoder pretraining",
    phase1_patience => "Early-stopping patience of pretraining",
    phase2_max_epochs => "Epoch budget of joint training",
    phase2_patience => "Early-stopping patience of joint training (0 disables)",
    phase2_target_train_accuracy => "Stop joint training at this training accuracy (0 disables)",
    skip_phase1 => "Skip pretraining",
    teacher_prob_start => "Teacher-forcing probability in the first pretraining epoch",
    teacher_prob_end => "Teacher-forcing probability from the last pretraining epoch on",
    batch_size => "Instances per update",
    seed => "Seed for every random stream",
    min_count => "Minimum training frequency for a vocabulary entry",
    exclude_self => "Mask an instance's own memory columns during training",
    track_train_accuracy => "Measure training accuracy every joint epoch",
}
