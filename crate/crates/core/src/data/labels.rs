//! Relation label sets and the mapping from raw PDTB sense strings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECOND_LEVEL_11: &str = include_str!("../../labels/second_level_11.txt");
pub const TOP_LEVEL_4: &str = include_str!("../../labels/top_level_4.txt");

/// Senses that are never part of implicit relation classification.
const IGNORED_TAGS: [&str; 3] = ["altlex", "entrel", "norel"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Task {
    SecondLevel,
    TopLevel,
    /// One class against everything else; index 0 is the positive class.
    OneVsAll { positive: String },
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "second-level-11" | "11-way" => Ok(Task::SecondLevel),
            "top-4" | "4-way" => Ok(Task::TopLevel),
            other => match other.strip_prefix("binary:") {
                Some(class) if !class.is_empty() => Ok(Task::OneVsAll {
                    positive: class.to_string(),
                }),
                _ => Err(Error::Config(format!(
                    "unknown task {other:?}; expected second-level-11, top-4 or binary:<Class>"
                ))),
            },
        }
    }

    pub fn name(&self) -> String {
        match self {
            Task::SecondLevel => "second-level-11".into(),
            Task::TopLevel => "top-4".into(),
            Task::OneVsAll { positive } => format!("binary:{positive}"),
        }
    }
}

/// Outcome of mapping one raw sense string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    Label(usize),
    /// AltLex / EntRel / NoRel: dropped silently.
    Ignored,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub task: Task,
    pub names: Vec<String>,
}

/// Parse a labels file: one label per line, `#` comments and blank lines skipped.
pub fn parse_label_lines(text: &str) -> Result<Vec<String>> {
    let mut names: Vec<String> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if names.iter().any(|n| n == line) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("duplicate label {line:?}"),
            });
        }
        names.push(line.to_string());
    }
    if names.is_empty() {
        return Err(Error::Config("labels file contains no labels".into()));
    }
    Ok(names)
}

fn top_of(sense: &str) -> &str {
    sense.split('.').next().unwrap_or(sense).trim()
}

fn second_of(sense: &str) -> String {
    let mut parts = sense.split('.').map(str::trim);
    match (parts.next(), parts.next()) {
        (Some(a), Some(b)) => format!("{a}.{b}"),
        (Some(a), None) => a.to_string(),
        _ => String::new(),
    }
}

impl LabelSet {
    pub fn second_level() -> Self {
        LabelSet {
            task: Task::SecondLevel,
            names: parse_label_lines(SECOND_LEVEL_11).expect("bundled labels parse"),
        }
    }

    pub fn top_level() -> Self {
        LabelSet {
            task: Task::TopLevel,
            names: parse_label_lines(TOP_LEVEL_4).expect("bundled labels parse"),
        }
    }

    pub fn one_vs_all(positive: &str) -> Result<Self> {
        let tops = Self::top_level();
        if !tops.names.iter().any(|n| n == positive) {
            return Err(Error::Config(format!(
                "binary class {positive:?} is not a top-level relation"
            )));
        }
        Ok(LabelSet {
            task: Task::OneVsAll {
                positive: positive.to_string(),
            },
            names: vec![positive.to_string(), "Other".to_string()],
        })
    }

    /// The bundled label list for a task.
    pub fn for_task(task: &Task) -> Result<Self> {
        match task {
            Task::SecondLevel => Ok(Self::second_level()),
            Task::TopLevel => Ok(Self::top_level()),
            Task::OneVsAll { positive } => Self::one_vs_all(positive),
        }
    }

    /// Label list loaded from a file, validated against the task's shape.
    pub fn from_file(task: Task, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let names = parse_label_lines(&text)?;
        if task == Task::SecondLevel {
            if let Some(bad) = names.iter().find(|n| n.split('.').count() != 2) {
                return Err(Error::Config(format!(
                    "second-level label {bad:?} is not of the form Class.Type"
                )));
            }
        }
        Ok(LabelSet { task, names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Map a raw sense such as `Expansion.Restatement.Specification`.
    pub fn lookup(&self, sense: &str) -> Lookup {
        let lowered = sense.trim().to_ascii_lowercase();
        if IGNORED_TAGS.iter().any(|t| lowered.starts_with(t)) {
            return Lookup::Ignored;
        }
        let found = match &self.task {
            Task::SecondLevel => self.index_of(&second_of(sense)),
            Task::TopLevel => self.index_of(top_of(sense)),
            Task::OneVsAll { positive } => {
                let top = top_of(sense);
                if top == positive {
                    Some(0)
                } else if Self::top_level().index_of(top).is_some() {
                    Some(1)
                } else {
                    None
                }
            }
        };
        found.map_or(Lookup::Unknown, Lookup::Label)
    }

    /// Map a label of this set into `coarser`, e.g. a second-level sense
    /// into the top-level set. Returns `None` if there is no image.
    pub fn project(&self, id: usize, coarser: &LabelSet) -> Option<usize> {
        match coarser.lookup(self.name(id)) {
            Lookup::Label(i) => Some(i),
            _ => None,
        }
    }
}
