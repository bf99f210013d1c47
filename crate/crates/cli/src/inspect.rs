use std::fmt::Write as _;

use expliciter::vocab::{encode_instance, normalize_text, RESERVED};
use expliciter::{Error, Model, Result};
use serde::Serialize;

use crate::args::{DumpAttentionArgs, DumpNeighborsArgs, PredictArgs};
use crate::common::{load_model, read_input, read_instance, sha256_hex, to_json, write_output, LooseInstance, RunManifest};

#[derive(Serialize)]
struct PredictionLine<'a> {
    id: &'a str,
    label: &'a str,
    label_id: usize,
    dist: &'a [f64],
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    let (model, _) = load_model(&args.checkpoint)?;
    let bytes = read_input(&args.input)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Corpus(format!("input is not UTF-8: {e}")))?;
    let mut instances = Vec::new();
    let mut encoded = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let inst = serde_json::from_str::<LooseInstance>(line)
            .map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?
            .into_instance();
        encoded.push(encode_instance(&inst, &model.vocab)?);
        instances.push(inst);
    }
    let preds = model.predict(&encoded)?;
    let mut out = Vec::new();
    for (inst, p) in instances.iter().zip(&preds) {
        let line = PredictionLine {
            id: &inst.id,
            label: model.labels.name(p.label),
            label_id: p.label,
            dist: &p.dist,
        };
        serde_json::to_writer(&mut out, &line).expect("predictions serialise");
        out.push(b'\n');
    }
    eprintln!("{} instances classified", preds.len());
    write_output(args.out.as_deref(), &out)
}

fn dump_manifest(command: &str, model: &Model, checkpoint: &std::path::Path, input: &[u8], trained_with: serde_json::Value) -> RunManifest {
    let mut m = RunManifest::new(command, &model.config, sha256_hex(input), &model.labels.task);
    m.checkpoint = Some(checkpoint.display().to_string());
    m.trained_with = Some(trained_with);
    m
}

/// TSV with source tokens across and target tokens down, preceded by a
/// `#` line carrying the manifest.
pub fn attention_tsv(manifest: &RunManifest, source: &[String], target: &[String], rows: &[Vec<f64>]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# manifest\t{}", serde_json::to_string(manifest).expect("manifest serialises"));
    s.push_str("target\\source");
    for tok in source {
        s.push('\t');
        s.push_str(tok);
    }
    s.push('\n');
    for (tok, row) in target.iter().zip(rows) {
        s.push_str(tok);
        for v in row {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    s
}

pub fn dump_attention(args: &DumpAttentionArgs) -> Result<()> {
    let (model, trained_with) = load_model(&args.checkpoint)?;
    let (inst, bytes) = read_instance(&args.instance)?;
    let enc = encode_instance(&inst, &model.vocab)?;
    let rows = model.attention(&enc)?;
    let a1 = normalize_text(&inst.arg1);
    let a2 = normalize_text(&inst.arg2);
    let source: Vec<String> = a1.iter().chain(&a2).cloned().collect();
    let target: Vec<String> = a1
        .iter()
        .cloned()
        .chain([RESERVED[2], RESERVED[4], RESERVED[3]].map(String::from))
        .chain(a2.iter().cloned())
        .collect();
    debug_assert_eq!(rows.len(), target.len());
    let manifest = dump_manifest("dump-attention", &model, &args.checkpoint, &bytes, trained_with);
    eprintln!("{} target rows x {} source columns", target.len(), source.len());
    write_output(args.out.as_deref(), attention_tsv(&manifest, &source, &target, &rows).as_bytes())
}

#[derive(Serialize)]
struct Neighbor<'a> {
    id: &'a str,
    label: &'a str,
    weight: f64,
    column: usize,
}

#[derive(Serialize)]
struct NeighborReport<'a> {
    manifest: &'a RunManifest,
    query: &'a str,
    top_n: usize,
    neighbors: Vec<Neighbor<'a>>,
}

pub fn dump_memory_neighbors(args: &DumpNeighborsArgs) -> Result<()> {
    let (model, trained_with) = load_model(&args.checkpoint)?;
    let memory = model
        .memory
        .as_ref()
        .ok_or_else(|| Error::Checkpoint(format!("{} holds no memory matrix", args.checkpoint.display())))?;
    let (inst, bytes) = read_instance(&args.instance)?;
    let enc = encode_instance(&inst, &model.vocab)?;
    let h = model.h_star(&enc)?;
    let found = memory.neighbors(&h, args.top_n, args.exclude.as_deref())?;
    let manifest = dump_manifest("dump-memory-neighbors", &model, &args.checkpoint, &bytes, trained_with);
    let neighbors: Vec<Neighbor<'_>> = found
        .iter()
        .map(|&(col, weight)| Neighbor {
            id: &memory.column_ids[col],
            label: model.labels.name(memory.column_labels[col]),
            weight,
            column: col,
        })
        .collect();
    for n in &neighbors {
        eprintln!("{:>10.6}  {}  {}", n.weight, n.label, n.id);
    }
    let report = NeighborReport {
        manifest: &manifest,
        query: &inst.id,
        top_n: args.top_n,
        neighbors,
    };
    write_output(args.out.as_deref(), &to_json(&report))
}
