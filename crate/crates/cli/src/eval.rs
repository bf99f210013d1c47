use expliciter::data::metrics::evaluate_distributions;
use expliciter::data::{aggregate_cv, CvMetrics, Instance, LabelSet, Metrics, Split};
use expliciter::training::trainer::prepare;
use expliciter::vocab::{normalize_text, RESERVED};
use expliciter::{Error, Model, Result};
use serde::Serialize;

use crate::args::EvalArgs;
use crate::common::{fold_checkpoint, label_set, load_corpus, load_model, to_json, write_output, RunManifest, Scheme};

/// How checkpoint classes were folded onto the evaluated task's classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelMapping {
    pub from: String,
    pub to: String,
    pub pairs: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct Scored {
    pub metrics: Metrics,
    pub skipped: usize,
    pub mapping: Option<LabelMapping>,
}

#[derive(Serialize)]
struct Report<'a> {
    manifest: &'a RunManifest,
    split: &'a str,
    skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    label_mapping: Option<&'a LabelMapping>,
    metrics: &'a Metrics,
}

#[derive(Serialize)]
struct CvReport<'a> {
    manifest: &'a RunManifest,
    split: &'a str,
    skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    label_mapping: Option<&'a LabelMapping>,
    cv: &'a CvMetrics,
}

pub fn report_json(manifest: &RunManifest, split: &str, scored: &Scored) -> Vec<u8> {
    to_json(&Report {
        manifest,
        split,
        skipped: scored.skipped,
        label_mapping: scored.mapping.as_ref(),
        metrics: &scored.metrics,
    })
}

/// Index in `target` of every class of `model`, or an error naming the
/// first class without an image.
fn label_map(model: &LabelSet, target: &LabelSet) -> Result<Option<(Vec<usize>, LabelMapping)>> {
    if model == target {
        return Ok(None);
    }
    let mut map = Vec::with_capacity(model.len());
    let mut pairs = Vec::with_capacity(model.len());
    for id in 0..model.len() {
        let to = model.project(id, target).ok_or_else(|| {
            Error::Config(format!(
                "checkpoint class {:?} has no counterpart in task {}",
                model.name(id),
                target.task.name()
            ))
        })?;
        map.push(to);
        pairs.push((model.name(id).to_string(), target.name(to).to_string()));
    }
    Ok(Some((
        map,
        LabelMapping {
            from: model.task.name(),
            to: target.task.name(),
            pairs,
        },
    )))
}

fn check_vocab_overlap(model: &Model, instances: &[Instance]) -> Result<()> {
    let mut tokens = 0;
    for inst in instances {
        for tok in normalize_text(&inst.arg1).iter().chain(&normalize_text(&inst.arg2)) {
            tokens += 1;
            if model.vocab.contains(tok) && !RESERVED.contains(&tok.as_str()) {
                return Ok(());
            }
        }
    }
    Err(Error::Checkpoint(format!(
        "none of the {tokens} corpus tokens is in the checkpoint vocabulary; wrong checkpoint for this corpus?"
    )))
}

/// Classify `instances` (labelled under `target`) and score them.
pub fn score(model: &Model, instances: &[Instance], target: &LabelSet) -> Result<Scored> {
    if instances.is_empty() {
        return Err(Error::Corpus("nothing to evaluate: empty split".into()));
    }
    check_vocab_overlap(model, instances)?;
    let mapping = label_map(&model.labels, target)?;
    let (prepared, skipped) = prepare(instances, model);
    if prepared.is_empty() {
        return Err(Error::Corpus("no encodable instances to evaluate".into()));
    }
    let encoded: Vec<_> = prepared.into_iter().map(|p| p.enc).collect();
    let preds = model.predict(&encoded)?;
    let dists: Vec<Vec<f64>> = preds
        .into_iter()
        .map(|p| match &mapping {
            None => p.dist,
            Some((map, _)) => {
                let mut d = vec![0.0; target.len()];
                for (i, &to) in map.iter().enumerate() {
                    d[to] += p.dist[i];
                }
                d
            }
        })
        .collect();
    let gold: Vec<Vec<usize>> = encoded.iter().map(|e| e.label_ids.clone()).collect();
    let metrics = evaluate_distributions(&dists, &gold, target)?;
    Ok(Scored {
        metrics,
        skipped,
        mapping: mapping.map(|(_, m)| m),
    })
}

fn role<'s>(split: &'s Split, name: &str) -> Result<&'s [Instance]> {
    match name {
        "test" => Ok(&split.test),
        "dev" => Ok(&split.dev),
        "train" => Ok(&split.train),
        other => Err(Error::Usage(format!("unknown split role {other:?}; expected test, dev, train or all"))),
    }
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let scheme = Scheme::parse(&args.data.scheme, args.data.folds)?;
    if scheme.is_cv() {
        return run_cv(args, &scheme);
    }
    let (model, trained_with) = load_model(&args.checkpoint)?;
    let target = match &args.task {
        Some(t) => label_set(t, args.data.labels.as_deref())?,
        None => model.labels.clone(),
    };
    let corpus = load_corpus(&args.data.corpus, &target, args.data.drop_unknown_labels)?;
    let instances: Vec<Instance> = if args.split == "all" {
        corpus.instances
    } else {
        let splits = scheme.splits(&corpus.instances, model.config.seed)?;
        role(&splits[0], &args.split)?.to_vec()
    };
    let scored = score(&model, &instances, &target)?;
    let mut manifest = RunManifest::new("eval", &model.config, corpus.sha256, &target.task);
    manifest.checkpoint = Some(args.checkpoint.display().to_string());
    manifest.scheme = Some(scheme.name());
    manifest.trained_with = Some(trained_with);
    if let Some(m) = &scored.mapping {
        eprintln!("mapped {} checkpoint classes onto {}", m.from, m.to);
    }
    eprintln!(
        "{} instances scored ({} skipped)\n{}",
        scored.metrics.total,
        scored.skipped,
        scored.metrics.table()
    );
    write_output(args.out.as_deref(), &report_json(&manifest, &args.split, &scored))
}

fn run_cv(args: &EvalArgs, scheme: &Scheme) -> Result<()> {
    if args.split == "all" {
        return Err(Error::Usage("--split all has no meaning for cross-validation".into()));
    }
    let dir = &args.checkpoint;
    if !dir.is_dir() {
        return Err(Error::Usage(format!(
            "cross-validation evaluation expects the training output directory, got {}",
            dir.display()
        )));
    }
    let probe = dir.join("fold-0").join("checkpoint.bin");
    let (first, trained_with) = Model::load(&probe)?;
    let target = match &args.task {
        Some(t) => label_set(t, args.data.labels.as_deref())?,
        None => first.labels.clone(),
    };
    let corpus = load_corpus(&args.data.corpus, &target, args.data.drop_unknown_labels)?;
    let splits = scheme.splits(&corpus.instances, first.config.seed)?;
    let mut folds = Vec::with_capacity(splits.len());
    let mut skipped = 0;
    let mut mapping = None;
    for split in &splits {
        let path = fold_checkpoint(dir, split);
        let (model, _) = Model::load(&path)?;
        let scored = score(&model, role(split, &args.split)?, &target)?;
        eprintln!("{}: accuracy {:.4}", split.name, scored.metrics.accuracy);
        skipped += scored.skipped;
        mapping = scored.mapping;
        folds.push(scored.metrics);
    }
    let cv = aggregate_cv(folds, &target)?;
    let mut manifest = RunManifest::new("eval", &first.config, corpus.sha256, &target.task);
    manifest.checkpoint = Some(dir.display().to_string());
    manifest.scheme = Some(scheme.name());
    manifest.trained_with = Some(trained_with);
    eprintln!(
        "accuracy {:.4} ± {:.4}, macro-F1 {:.4} ± {:.4}\n{}",
        cv.accuracy_mean,
        cv.accuracy_std,
        cv.macro_f1_mean,
        cv.macro_f1_std,
        cv.pooled.table()
    );
    let bytes = to_json(&CvReport {
        manifest: &manifest,
        split: &args.split,
        skipped,
        label_mapping: mapping.as_ref(),
        cv: &cv,
    });
    write_output(args.out.as_deref(), &bytes)
}

pub fn cv_report_json(
    manifest: &RunManifest,
    skipped: usize,
    cv: &CvMetrics,
) -> Vec<u8> {
    to_json(&CvReport {
        manifest,
        split: "test",
        skipped,
        label_mapping: None,
        cv,
    })
}
