//! Train/dev/test split protocols.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::corpus::Instance;
use crate::error::{Error, Result};
use crate::{rng_stream, streams};

/// Unit dealt into cross-validation folds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldGranularity {
    /// Whole sections, so no section straddles two folds.
    Section,
    /// Individual instances; fold sizes differ by at most one.
    Instance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SplitScheme {
    /// Train 2–21, dev 22, test 23.
    PdtbLin,
    /// Train 2–20, dev 0–1, test 21–22.
    PdtbJi,
    CrossValidation { folds: usize, granularity: FoldGranularity },
}

impl SplitScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pdtb-lin" | "lin" => Ok(SplitScheme::PdtbLin),
            "pdtb-ji" | "ji" => Ok(SplitScheme::PdtbJi),
            "cv" => Ok(SplitScheme::CrossValidation {
                folds: 10,
                granularity: FoldGranularity::Section,
            }),
            "cv-instance" => Ok(SplitScheme::CrossValidation {
                folds: 10,
                granularity: FoldGranularity::Instance,
            }),
            other => Err(Error::Config(format!(
                "unknown split scheme {other:?}; expected pdtb-lin, pdtb-ji, cv or cv-instance"
            ))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            SplitScheme::PdtbLin => "pdtb-lin".into(),
            SplitScheme::PdtbJi => "pdtb-ji".into(),
            SplitScheme::CrossValidation {
                granularity: FoldGranularity::Section,
                ..
            } => "cv".into(),
            SplitScheme::CrossValidation {
                granularity: FoldGranularity::Instance,
                ..
            } => "cv-instance".into(),
        }
    }

    /// (train, dev, test) sections of a fixed scheme.
    pub fn sections(&self) -> Option<(Vec<u8>, Vec<u8>, Vec<u8>)> {
        match self {
            SplitScheme::PdtbLin => Some(((2..=21).collect(), vec![22], vec![23])),
            SplitScheme::PdtbJi => Some(((2..=20).collect(), vec![0, 1], vec![21, 22])),
            SplitScheme::CrossValidation { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// `main` for fixed schemes, `fold-N` for cross-validation.
    pub name: String,
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl Split {
    fn check(self) -> Result<Self> {
        for (role, part) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            if part.is_empty() {
                return Err(Error::Corpus(format!("{}: empty {role} split", self.name)));
            }
        }
        Ok(self)
    }
}

fn by_sections(instances: &[Instance], sections: &[u8]) -> Vec<Instance> {
    instances
        .iter()
        .filter(|i| sections.contains(&i.section))
        .cloned()
        .collect()
}

/// Assign instances to roles. Fixed schemes give one split; cross-validation
/// gives one per fold where fold `i` tests, fold `i+1` is dev and the rest
/// train. Multi-label duplication is left to the caller.
pub fn make_splits(instances: &[Instance], scheme: &SplitScheme, seed: u64) -> Result<Vec<Split>> {
    if let Some((train, dev, test)) = scheme.sections() {
        let split = Split {
            name: "main".into(),
            train: by_sections(instances, &train),
            dev: by_sections(instances, &dev),
            test: by_sections(instances, &test),
        };
        return Ok(vec![split.check()?]);
    }
    let SplitScheme::CrossValidation { folds, granularity } = *scheme else {
        unreachable!()
    };
    if folds < 3 {
        return Err(Error::Config(format!("cross-validation needs at least 3 folds, got {folds}")));
    }
    let mut rng = rng_stream(seed, streams::SPLIT);
    let fold_of: Vec<usize> = match granularity {
        FoldGranularity::Section => {
            let mut sections: Vec<u8> = (0..=super::corpus::MAX_SECTION).collect();
            sections.shuffle(&mut rng);
            let mut fold_of_section = [0usize; 24];
            for (i, &s) in sections.iter().enumerate() {
                fold_of_section[s as usize] = i % folds;
            }
            instances.iter().map(|i| fold_of_section[i.section as usize]).collect()
        }
        FoldGranularity::Instance => {
            let mut order: Vec<usize> = (0..instances.len()).collect();
            order.shuffle(&mut rng);
            let mut f = vec![0; instances.len()];
            for (pos, &idx) in order.iter().enumerate() {
                f[idx] = pos % folds;
            }
            f
        }
    };
    (0..folds)
        .map(|k| {
            let dev_fold = (k + 1) % folds;
            let mut split = Split {
                name: format!("fold-{k}"),
                train: Vec::new(),
                dev: Vec::new(),
                test: Vec::new(),
            };
            for (inst, &f) in instances.iter().zip(&fold_of) {
                let part = if f == k {
                    &mut split.test
                } else if f == dev_fold {
                    &mut split.dev
                } else {
                    &mut split.train
                };
                part.push(inst.clone());
            }
            split.check()
        })
        .collect()
}

/// Seeded shuffle into train/dev/test by fractions that sum to 1.
pub fn ratio_split(instances: &[Instance], fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (a, b, c) = fractions;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be positive and sum to 1")));
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(&mut rng_stream(seed, streams::SPLIT));
    let n = instances.len();
    let n_train = (a * n as f64).round() as usize;
    let n_dev = (b * n as f64).round() as usize;
    let take = |r: std::ops::Range<usize>| -> Vec<Instance> {
        order[r].iter().map(|&i| instances[i].clone()).collect()
    };
    Split {
        name: "main".into(),
        train: take(0..n_train),
        dev: take(n_train..(n_train + n_dev).min(n)),
        test: take((n_train + n_dev).min(n)..n),
    }
    .check()
}
