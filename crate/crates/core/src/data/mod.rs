//! Corpus ingestion, label sets, splits, metrics and synthetic data.

pub mod corpus;
pub mod labels;
pub mod metrics;
pub mod splits;
pub mod synth;

pub use corpus::{duplicate_multilabel, load_corpus, Instance, UnknownLabels};
pub use labels::{LabelSet, Task};
pub use metrics::{aggregate_cv, evaluate, CvMetrics, Metrics};
pub use splits::{make_splits, ratio_split, Split, SplitScheme};
pub use synth::{synth_corpus, SynthSpec};
