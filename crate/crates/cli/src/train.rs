use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use expliciter::data::{aggregate_cv, LabelSet, Split};
use expliciter::model::names;
use expliciter::training::trainer::write_history;
use expliciter::training::{train_model, EpochRecord};
use expliciter::vocab::{build_vocab, load_embeddings};
use expliciter::{Error, Model, Result, TrainConfig};
use rayon::prelude::*;

use crate::args::TrainArgs;
use crate::common::{create_dir, io_error, label_set, load_corpus, to_json, write_output, RunManifest, Scheme};
use crate::eval::{cv_report_json, report_json, score, Scored};

fn progress(tag: &str, r: &EpochRecord) {
    let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    eprintln!(
        "{tag} phase {} epoch {:>3}  tp {:.2}  train {}  dev-nll {:.4}  dev-acc {}  train-acc {}{}",
        r.phase,
        r.epoch,
        r.teacher_prob,
        opt(r.train_loss),
        r.dev_loss_de,
        opt(r.dev_accuracy),
        opt(r.train_accuracy),
        if r.best { "  *" } else { "" }
    );
}

struct Job<'a> {
    config: &'a TrainConfig,
    labels: &'a LabelSet,
    embeddings: Option<&'a Path>,
    manifest: &'a RunManifest,
    quiet: bool,
}

fn train_split(job: &Job<'_>, split: &Split, dir: &Path) -> Result<Scored> {
    create_dir(dir)?;
    let vocab = build_vocab(&split.train, job.config.min_count)?;
    let mut model = Model::new(job.config.clone(), vocab, job.labels.clone())?;
    if let Some(path) = job.embeddings {
        let r = load_embeddings(path, &model.vocab, model.params.get_mut(names::EMBEDDING)?)?;
        eprintln!("{}: {} vectors loaded, {} words random", split.name, r.from_file, r.random);
    }
    eprintln!(
        "{}: {} train, {} dev, {} test, vocabulary {}",
        split.name,
        split.train.len(),
        split.dev.len(),
        split.test.len(),
        model.vocab.len()
    );
    let quiet = job.quiet;
    let tag = split.name.clone();
    let mut observer = |r: &EpochRecord| {
        if !quiet {
            progress(&tag, r);
        }
    };
    let outcome = train_model(model, &split.train, &split.dev, &mut observer)?;
    if outcome.skipped_train + outcome.skipped_dev > 0 {
        eprintln!(
            "{}: skipped {} train and {} dev instances with an empty argument",
            split.name, outcome.skipped_train, outcome.skipped_dev
        );
    }

    let checkpoint = dir.join("checkpoint.bin");
    let mut manifest = job.manifest.clone();
    manifest.checkpoint = Some(checkpoint.display().to_string());
    let manifest_value = serde_json::to_value(&manifest).expect("manifest serialises");
    outcome.model.save(&checkpoint, manifest_value)?;

    let history_path = dir.join("history.jsonl");
    let file = File::create(&history_path).map_err(|e| io_error(&history_path, e))?;
    write_history(BufWriter::new(file), &outcome.history).map_err(|e| io_error(&history_path, e))?;

    let scored = score(&outcome.model, &split.test, job.labels)?;
    write_output(Some(&dir.join("metrics.json")), &report_json(&manifest, "test", &scored))?;
    eprintln!("{}: test accuracy {:.4}", split.name, scored.metrics.accuracy);
    Ok(scored)
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    args.hyper.apply(&mut config)?;
    config.validate()?;
    if args.jobs == 0 {
        return Err(Error::Usage("--jobs must be at least 1".into()));
    }
    let labels = label_set(&args.task, args.data.labels.as_deref())?;
    let corpus = load_corpus(&args.data.corpus, &labels, args.data.drop_unknown_labels)?;
    let scheme = Scheme::parse(&args.data.scheme, args.data.folds)?;
    let splits = scheme.splits(&corpus.instances, config.seed)?;

    create_dir(&args.out)?;
    let mut manifest = RunManifest::new("train", &config, corpus.sha256, &labels.task);
    manifest.scheme = Some(scheme.name());
    write_output(Some(&args.out.join("config.txt")), config.to_text().as_bytes())?;
    write_output(Some(&args.out.join("manifest.json")), &to_json(&manifest))?;

    let job = Job {
        config: &config,
        labels: &labels,
        embeddings: args.embeddings.as_deref(),
        manifest: &manifest,
        quiet: args.quiet,
    };
    if !scheme.is_cv() {
        let scored = train_split(&job, &splits[0], &args.out)?;
        eprintln!("{}", scored.metrics.table());
        return Ok(());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| Error::Usage(format!("cannot start {} workers: {e}", args.jobs)))?;
    let results: Vec<Result<Scored>> = pool.install(|| {
        splits
            .par_iter()
            .map(|s| train_split(&job, s, &args.out.join(&s.name)))
            .collect()
    });
    let scored = results.into_iter().collect::<Result<Vec<_>>>()?;
    let skipped = scored.iter().map(|s| s.skipped).sum();
    let cv = aggregate_cv(scored.into_iter().map(|s| s.metrics).collect(), &labels)?;
    eprintln!(
        "{} folds: accuracy {:.4} ± {:.4}, macro-F1 {:.4} ± {:.4}\n{}",
        cv.folds.len(),
        cv.accuracy_mean,
        cv.accuracy_std,
        cv.macro_f1_mean,
        cv.macro_f1_std,
        cv.pooled.table()
    );
    write_output(Some(&args.out.join("metrics.json")), &cv_report_json(&manifest, skipped, &cv))
}
