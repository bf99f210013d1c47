use expliciter::data::corpus::write_corpus;
use expliciter::data::synth::reference_counts;
use expliciter::data::{synth_corpus, SynthSpec};
use expliciter::Result;

use crate::args::SynthArgs;
use crate::common::{io_error, label_set, write_output};

pub fn run(args: &SynthArgs) -> Result<()> {
    let labels = label_set(&args.task, None)?;
    let defaults = SynthSpec::default();
    let label_counts = if args.reference_proportions {
        Some(reference_counts(args.n, &labels)?)
    } else {
        args.label_counts.clone()
    };
    let spec = SynthSpec {
        n: args.n,
        label_counts,
        vocab_size: args.vocab_size.unwrap_or(defaults.vocab_size),
        markers_per_label: args.markers_per_label.unwrap_or(defaults.markers_per_label),
        min_arg_len: args.min_arg_len.unwrap_or(defaults.min_arg_len),
        max_arg_len: args.max_arg_len.unwrap_or(defaults.max_arg_len),
        multi_label_rate: args.multi_label_rate.unwrap_or(defaults.multi_label_rate),
        seed: args.seed,
    };
    let corpus = synth_corpus(&spec, &labels)?;
    let mut bytes = Vec::new();
    write_corpus(&mut bytes, &corpus).map_err(|e| io_error(&args.out, e))?;
    eprintln!("{} instances over {} classes", corpus.len(), labels.len());
    write_output(Some(&args.out), &bytes)
}
