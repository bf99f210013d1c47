use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use expliciter::data::corpus::{assign_labels, parse_corpus};
use expliciter::data::{make_splits, ratio_split, Instance, LabelSet, Split, SplitScheme, Task, UnknownLabels};
use expliciter::{Error, Model, Result, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Provenance embedded in every checkpoint, metrics report and dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub config: TrainConfig,
    /// SHA-256 of the corpus (or instance) bytes the command read.
    pub corpus_sha256: String,
    pub seed: u64,
    pub checkpoint: Option<String>,
    pub scheme: Option<String>,
    pub task: String,
    /// Manifest stored in the checkpoint that was read, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trained_with: Option<serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str, config: &TrainConfig, corpus_sha256: String, task: &Task) -> Self {
        RunManifest {
            version: format!("v{}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            config: config.clone(),
            corpus_sha256,
            seed: config.seed,
            checkpoint: None,
            scheme: None,
            task: task.name(),
            trained_with: None,
        }
    }
}

pub fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn is_stdio(path: &Path) -> bool {
    path.as_os_str() == "-"
}

pub fn read_input(path: &Path) -> Result<Vec<u8>> {
    if is_stdio(path) {
        let mut buf = Vec::new();
        std::io::stdin().read_to_end(&mut buf).map_err(|e| io_error(path, e))?;
        return Ok(buf);
    }
    fs::read(path).map_err(|e| io_error(path, e))
}

/// Write to `path`, or standard output for `None` and `-`.
pub fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) if !is_stdio(p) => fs::write(p, bytes).map_err(|e| io_error(p, e)),
        _ => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)
                .and_then(|_| out.flush())
                .map_err(|e| io_error(Path::new("<stdout>"), e))
        }
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("reports serialise");
    bytes.push(b'\n');
    bytes
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn label_set(task: &str, file: Option<&Path>) -> Result<LabelSet> {
    let task = Task::parse(task)?;
    match file {
        Some(p) => LabelSet::from_file(task, p),
        None => LabelSet::for_task(&task),
    }
}

pub struct Corpus {
    pub instances: Vec<Instance>,
    pub sha256: String,
}

pub fn load_corpus(path: &Path, labels: &LabelSet, drop_unknown: bool) -> Result<Corpus> {
    let bytes = read_input(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| Error::Corpus(format!("{}: not UTF-8: {e}", path.display())))?;
    let policy = if drop_unknown {
        UnknownLabels::Drop
    } else {
        UnknownLabels::Error
    };
    let (instances, report) = assign_labels(parse_corpus(text)?, labels, policy)?;
    eprintln!(
        "corpus {}: {} read, {} kept, {} AltLex/EntRel/NoRel removed, {} without a known label dropped",
        path.display(),
        report.read,
        instances.len(),
        report.filtered_ignored,
        report.dropped_unknown
    );
    Ok(Corpus {
        instances,
        sha256: sha256_hex(&bytes),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scheme {
    Fixed(SplitScheme),
    Ratio(f64, f64, f64),
}

impl Scheme {
    pub fn parse(s: &str, folds: usize) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("ratio") {
            let parts: Vec<&str> = rest.strip_prefix(':').map(|r| r.split(',').collect()).unwrap_or_default();
            return match parts.as_slice() {
                [] if rest.is_empty() => Ok(Scheme::Ratio(0.8, 0.1, 0.1)),
                [a, b, c] => {
                    let f = |x: &str| {
                        x.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Config(format!("bad split fraction {x:?}")))
                    };
                    Ok(Scheme::Ratio(f(a)?, f(b)?, f(c)?))
                }
                _ => Err(Error::Config(format!("expected ratio:TRAIN,DEV,TEST, got {s:?}"))),
            };
        }
        match SplitScheme::parse(s)? {
            SplitScheme::CrossValidation { granularity, .. } => {
                Ok(Scheme::Fixed(SplitScheme::CrossValidation { folds, granularity }))
            }
            other => Ok(Scheme::Fixed(other)),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Scheme::Fixed(s) => s.name(),
            Scheme::Ratio(a, b, c) => format!("ratio:{a},{b},{c}"),
        }
    }

    pub fn is_cv(&self) -> bool {
        matches!(self, Scheme::Fixed(SplitScheme::CrossValidation { .. }))
    }

    pub fn splits(&self, instances: &[Instance], seed: u64) -> Result<Vec<Split>> {
        match self {
            Scheme::Fixed(s) => make_splits(instances, s, seed),
            Scheme::Ratio(a, b, c) => Ok(vec![ratio_split(instances, (*a, *b, *c), seed)?]),
        }
    }
}

pub fn fold_checkpoint(dir: &Path, split: &Split) -> PathBuf {
    dir.join(&split.name).join("checkpoint.bin")
}

pub fn load_model(path: &Path) -> Result<(Model, serde_json::Value)> {
    if path.is_dir() {
        return Err(Error::Usage(format!(
            "{} is a directory; pass a checkpoint file (directories are for cross-validation)",
            path.display()
        )));
    }
    Model::load(path)
}

/// Instance as accepted by `predict` and the dump commands: only the two
/// arguments are required.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LooseInstance {
    #[serde(default)]
    pub id: String,
    #[serde(default)]
    pub section: u8,
    pub arg1: String,
    pub arg2: String,
    #[serde(default)]
    pub conn: Option<String>,
    #[serde(default)]
    pub relations: Vec<String>,
}

impl LooseInstance {
    pub fn into_instance(self) -> Instance {
        Instance {
            id: self.id,
            section: self.section,
            arg1: self.arg1,
            arg2: self.arg2,
            conn: self.conn,
            relations: self.relations,
            label_ids: Vec::new(),
        }
    }
}

/// One instance given inline as JSON, as a file path, or `-` for stdin.
/// Returns the instance and the bytes it was read from.
pub fn read_instance(arg: &str) -> Result<(Instance, Vec<u8>)> {
    let bytes = if arg.trim_start().starts_with('{') {
        arg.as_bytes().to_vec()
    } else {
        read_input(Path::new(arg))?
    };
    let inst: LooseInstance = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Corpus(format!("instance is not a JSON object with arg1 and arg2: {e}")))?;
    Ok((inst.into_instance(), bytes))
}
