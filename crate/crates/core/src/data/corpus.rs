//! Discourse instances and the JSON-lines corpus format.
//!
//! One object per line:
//!
//! ```json
//! {"id": "wsj_0004-3", "section": 0, "arg1": "...", "arg2": "...",
//!  "conn": "in fact", "relations": ["Expansion.Restatement"]}
//! ```
//!
//! `conn` may be `null` or absent (test-time data without an annotated
//! connective). `relations` holds one or two raw sense strings.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::labels::{LabelSet, Lookup};
use crate::error::{Error, Result};

pub const MAX_SECTION: u8 = 23;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub id: String,
    pub section: u8,
    pub arg1: String,
    pub arg2: String,
    #[serde(default)]
    pub conn: Option<String>,
    pub relations: Vec<String>,
    /// Class indices under the active label set; filled by [`assign_labels`].
    #[serde(skip)]
    pub label_ids: Vec<usize>,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        if self.relations.is_empty() || self.relations.len() > 2 {
            return Err(Error::Corpus(format!(
                "instance {} has {} relations (expected 1 or 2)",
                self.id,
                self.relations.len()
            )));
        }
        if self.section > MAX_SECTION {
            return Err(Error::Corpus(format!(
                "instance {} has section {} outside 0..=23",
                self.id, self.section
            )));
        }
        Ok(())
    }
}

/// How to treat senses that are neither in the label set nor ignored tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnknownLabels {
    Error,
    /// Drop the offending sense; drop the instance if nothing remains.
    Drop,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub read: usize,
    pub filtered_ignored: usize,
    pub dropped_unknown: usize,
}

/// Parse a JSON-lines corpus without label mapping.
pub fn parse_corpus(text: &str) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        inst.validate().map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(inst);
    }
    Ok(out)
}

/// Resolve every instance's relations against `labels`.
///
/// Instances whose senses are all AltLex/EntRel/NoRel are removed. Unknown
/// senses are reported (all offenders listed) or dropped per `policy`.
pub fn assign_labels(
    instances: Vec<Instance>,
    labels: &LabelSet,
    policy: UnknownLabels,
) -> Result<(Vec<Instance>, LoadReport)> {
    let mut report = LoadReport {
        read: instances.len(),
        ..LoadReport::default()
    };
    let mut offenders: Vec<String> = Vec::new();
    let mut out = Vec::with_capacity(instances.len());
    for mut inst in instances {
        let mut ids = Vec::new();
        let mut kept = Vec::new();
        let mut ignored = 0;
        for rel in &inst.relations {
            match labels.lookup(rel) {
                Lookup::Label(id) => {
                    if !ids.contains(&id) {
                        ids.push(id);
                        kept.push(rel.clone());
                    }
                }
                Lookup::Ignored => ignored += 1,
                Lookup::Unknown => {
                    if policy == UnknownLabels::Error {
                        offenders.push(format!("{} ({rel})", inst.id));
                    }
                }
            }
        }
        if ids.is_empty() {
            if ignored == inst.relations.len() {
                report.filtered_ignored += 1;
            } else {
                report.dropped_unknown += 1;
            }
            continue;
        }
        inst.relations = kept;
        inst.label_ids = ids;
        out.push(inst);
    }
    if !offenders.is_empty() {
        let more = offenders.len().saturating_sub(10);
        let mut listed = offenders[..offenders.len().min(10)].join(", ");
        if more > 0 {
            listed.push_str(&format!(" and {more} more"));
        }
        return Err(Error::Label(format!(
            "{} instances have labels not in the {} set: {listed}",
            offenders.len(),
            labels.task.name()
        )));
    }
    Ok((out, report))
}

pub fn load_corpus(
    path: &Path,
    labels: &LabelSet,
    policy: UnknownLabels,
) -> Result<(Vec<Instance>, LoadReport)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    assign_labels(parse_corpus(&text)?, labels, policy)
}

pub fn write_corpus<W: Write>(mut out: W, instances: &[Instance]) -> std::io::Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Split every two-label instance into two single-label instances sharing
/// the text and id. Only ever applied to training data.
pub fn duplicate_multilabel(instances: Vec<Instance>) -> Vec<Instance> {
    let mut out = Vec::with_capacity(instances.len() + instances.len() / 32);
    for inst in instances {
        if inst.label_ids.len() < 2 {
            out.push(inst);
            continue;
        }
        for (rel, &id) in inst.relations.iter().zip(&inst.label_ids) {
            let mut single = inst.clone();
            single.relations = vec![rel.clone()];
            single.label_ids = vec![id];
            out.push(single);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, rels: &[&str]) -> String {
        serde_json::json!({
            "id": id, "section": 3, "arg1": "a b", "arg2": "c d",
            "conn": "because", "relations": rels
        })
        .to_string()
    }

    #[test]
    fn three_well_formed_lines() {
        let text = [
            line("x1", &["Comparison.Contrast"]),
            line("x2", &["Expansion.Conjunction", "Comparison.Contrast"]),
            line("x3", &["Temporal.Synchrony"]),
        ]
        .join("\n");
        let parsed = parse_corpus(&text).unwrap();
        assert_eq!(parsed.len(), 3);
        let (labeled, _) =
            assign_labels(parsed, &LabelSet::second_level(), UnknownLabels::Error).unwrap();
        assert_eq!(labeled.len(), 3);
        assert_eq!(labeled[1].label_ids.len(), 2);
    }

    #[test]
    fn missing_arg2_is_a_parse_error_at_its_line() {
        let text = format!(
            "{}\n{}\n",
            line("ok", &["Comparison.Contrast"]),
            r#"{"id":"bad","section":1,"arg1":"x","relations":["Comparison.Contrast"]}"#
        );
        match parse_corpus(&text) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("arg2"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_labels_are_listed() {
        let text = [line("a", &["Expansion.Exception"]), line("b", &["Bogus"])].join("\n");
        let err = assign_labels(
            parse_corpus(&text).unwrap(),
            &LabelSet::second_level(),
            UnknownLabels::Error,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("Expansion.Exception") && err.contains("Bogus"), "{err}");

        let (kept, report) = assign_labels(
            parse_corpus(&text).unwrap(),
            &LabelSet::second_level(),
            UnknownLabels::Drop,
        )
        .unwrap();
        assert!(kept.is_empty());
        assert_eq!(report.dropped_unknown, 2);
    }

    #[test]
    fn ignored_tags_are_filtered() {
        let text = [line("a", &["EntRel"]), line("b", &["Comparison.Contrast"])].join("\n");
        let (kept, report) = assign_labels(
            parse_corpus(&text).unwrap(),
            &LabelSet::second_level(),
            UnknownLabels::Error,
        )
        .unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(report.filtered_ignored, 1);
    }

    #[test]
    fn section_out_of_range_rejected() {
        let text = r#"{"id":"s","section":24,"arg1":"x","arg2":"y","relations":["Comparison"]}"#;
        assert!(matches!(parse_corpus(text), Err(Error::Parse { line: 1, .. })));
    }

    fn labeled(n_single: usize, n_double: usize) -> Vec<Instance> {
        let mut text = Vec::new();
        for i in 0..n_single {
            text.push(line(&format!("s{i}"), &["Comparison.Contrast"]));
        }
        for i in 0..n_double {
            text.push(line(
                &format!("d{i}"),
                &["Expansion.Conjunction", "Comparison.Contrast"],
            ));
        }
        assign_labels(
            parse_corpus(&text.join("\n")).unwrap(),
            &LabelSet::second_level(),
            UnknownLabels::Error,
        )
        .unwrap()
        .0
    }

    #[test]
    fn duplication_counts() {
        assert_eq!(duplicate_multilabel(labeled(10, 0)), labeled(10, 0));
        let dup = duplicate_multilabel(labeled(9, 1));
        assert_eq!(dup.len(), 11);
        assert!(dup.iter().all(|i| i.label_ids.len() == 1));
        let d: Vec<_> = dup.iter().filter(|i| i.id == "d0").collect();
        assert_eq!(d.len(), 2);
        assert_ne!(d[0].label_ids, d[1].label_ids);
    }
}
