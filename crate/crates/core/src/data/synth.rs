//! Synthetic corpora with planted, recoverable relation labels.
//!
//! Filler text follows a fixed random successor table over `w{n}` tokens,
//! so it is predictable for the decoder. Each instance carries one marker
//! word `m{label}x{j}` in Arg1 or Arg2, and its connective is a fixed
//! function of the label.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::Instance;
use super::labels::{LabelSet, Task};
use crate::error::{Error, Result};
use crate::{rng_stream, streams, ModelRng};

/// Training counts per top-level class in the reference corpus.
pub const REFERENCE_TRAIN_COUNTS: [(&str, usize); 4] = [
    ("Comparison", 1855),
    ("Contingency", 3235),
    ("Expansion", 6673),
    ("Temporal", 582),
];

const CONNECTIVES: [&str; 11] = [
    "however",
    "but",
    "because",
    "so",
    "or",
    "and",
    "for example",
    "first",
    "in fact",
    "then",
    "meanwhile",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    /// Exact instances per class; `None` means as even as possible.
    pub label_counts: Option<Vec<usize>>,
    /// Filler vocabulary size.
    pub vocab_size: usize,
    pub markers_per_label: usize,
    pub min_arg_len: usize,
    pub max_arg_len: usize,
    /// Fraction of instances given a second relation.
    pub multi_label_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n: 100,
            label_counts: None,
            vocab_size: 50,
            markers_per_label: 3,
            min_arg_len: 3,
            max_arg_len: 6,
            multi_label_rate: 0.0,
            seed: 1,
        }
    }
}

/// Split `n` over `weights` by largest remainder; ties go to the lower index.
pub fn apportion(n: usize, weights: &[usize]) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    if total == 0 {
        return vec![0; weights.len()];
    }
    let mut counts: Vec<usize> = weights.iter().map(|&w| n * w / total).collect();
    let mut rest: Vec<(usize, usize)> = weights.iter().enumerate().map(|(i, &w)| ((n * w) % total, i)).collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = n - counts.iter().sum::<usize>();
    for &(_, i) in rest.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Per-class counts for `n` instances in reference proportions, in the
/// order of `labels` (top-level set).
pub fn reference_counts(n: usize, labels: &LabelSet) -> Result<Vec<usize>> {
    let weights = labels
        .names
        .iter()
        .map(|name| {
            REFERENCE_TRAIN_COUNTS
                .iter()
                .find(|(c, _)| c == name)
                .map(|&(_, w)| w)
                .ok_or_else(|| Error::Config(format!("no reference count for class {name:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(apportion(n, &weights))
}

pub fn connective_for(label: usize) -> &'static str {
    CONNECTIVES[label % CONNECTIVES.len()]
}

pub fn marker(label: usize, j: usize) -> String {
    format!("m{label}x{j}")
}

/// The label encoded by the first marker token in `text`, if any.
pub fn marker_label(text: &str) -> Option<usize> {
    text.split_whitespace().find_map(|w| {
        let rest = w.strip_prefix('m')?;
        let (label, j) = rest.split_once('x')?;
        j.parse::<usize>().ok()?;
        label.parse().ok()
    })
}

struct Filler {
    successors: Vec<[usize; 2]>,
}

impl Filler {
    fn new(v: usize, rng: &mut ModelRng) -> Self {
        Filler {
            successors: (0..v).map(|_| [rng.gen_range(0..v), rng.gen_range(0..v)]).collect(),
        }
    }

    fn sentence(&self, len: usize, rng: &mut ModelRng) -> Vec<String> {
        let mut w = rng.gen_range(0..self.successors.len());
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(format!("w{w}"));
            w = self.successors[w][rng.gen_range(0..2)];
        }
        out
    }
}

/// Generate a corpus for a second-level or top-level label set.
pub fn synth_corpus(spec: &SynthSpec, labels: &LabelSet) -> Result<Vec<Instance>> {
    if matches!(labels.task, Task::OneVsAll { .. }) {
        return Err(Error::Config("generate with a multi-class label set; binary tasks map from it".into()));
    }
    if spec.n == 0 || spec.vocab_size == 0 || spec.markers_per_label == 0 {
        return Err(Error::Config("n, vocab_size and markers_per_label must be positive".into()));
    }
    if spec.min_arg_len == 0 || spec.min_arg_len > spec.max_arg_len {
        return Err(Error::Config("argument lengths must satisfy 1 <= min <= max".into()));
    }
    if !(0.0..=1.0).contains(&spec.multi_label_rate) || (spec.multi_label_rate > 0.0 && labels.len() < 2) {
        return Err(Error::Config("multi_label_rate must lie in [0, 1] with at least 2 labels".into()));
    }
    let c = labels.len();
    let counts = match &spec.label_counts {
        Some(counts) => {
            if counts.len() != c || counts.iter().sum::<usize>() != spec.n {
                return Err(Error::Config(format!(
                    "label_counts must have {c} entries summing to n = {}",
                    spec.n
                )));
            }
            counts.clone()
        }
        None => apportion(spec.n, &vec![1; c]),
    };
    let mut rng = rng_stream(spec.seed, streams::SYNTH);
    let filler = Filler::new(spec.vocab_size, &mut rng);
    let mut assigned: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &n)| std::iter::repeat_n(k, n)).collect();
    assigned.shuffle(&mut rng);

    let mut out = Vec::with_capacity(spec.n);
    for (i, &label) in assigned.iter().enumerate() {
        let mut arg1 = filler.sentence(rng.gen_range(spec.min_arg_len..=spec.max_arg_len), &mut rng);
        let mut arg2 = filler.sentence(rng.gen_range(spec.min_arg_len..=spec.max_arg_len), &mut rng);
        let m = marker(label, rng.gen_range(0..spec.markers_per_label));
        let target = if rng.gen_bool(0.5) { &mut arg1 } else { &mut arg2 };
        let pos = rng.gen_range(0..target.len());
        target[pos] = m;
        let mut relations = vec![labels.name(label).to_string()];
        let mut label_ids = vec![label];
        if spec.multi_label_rate > 0.0 && rng.gen_bool(spec.multi_label_rate) {
            let other = (label + rng.gen_range(1..c)) % c;
            relations.push(labels.name(other).to_string());
            label_ids.push(other);
        }
        out.push(Instance {
            id: format!("syn-{i:05}"),
            section: (i % 24) as u8,
            arg1: arg1.join(" "),
            arg2: arg2.join(" "),
            conn: Some(connective_for(label).to_string()),
            relations,
            label_ids,
        });
    }
    Ok(out)
}
