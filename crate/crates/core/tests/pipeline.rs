//! End-to-end use of the public API: generate, split, train, persist, reload.

use expliciter::data::corpus::{parse_corpus, write_corpus};
use expliciter::data::splits::FoldGranularity;
use expliciter::data::{make_splits, ratio_split, synth_corpus, LabelSet, SplitScheme, SynthSpec};
use expliciter::training::fit;
use expliciter::training::trainer::prepare;
use expliciter::{Model, TrainConfig};
use proptest::prelude::*;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        d: 8,
        hidden: 8,
        phase1_max_epochs: 2,
        phase2_max_epochs: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn trained_model_survives_a_checkpoint_round_trip() {
    let labels = LabelSet::top_level();
    let corpus = synth_corpus(&SynthSpec { n: 120, seed: 4, ..SynthSpec::default() }, &labels).unwrap();
    let split = ratio_split(&corpus, (0.8, 0.1, 0.1), 4).unwrap();
    let out = fit(tiny_config(), labels, &split.train, &split.dev, &mut |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    out.model.save(&path, serde_json::json!({"run": "pipeline"})).unwrap();
    let (loaded, manifest) = Model::load(&path).unwrap();
    assert_eq!(manifest["run"], "pipeline");
    assert_eq!(loaded.memory.as_ref().unwrap().m, out.model.memory.as_ref().unwrap().m);

    let (prepared, skipped) = prepare(&split.test, &loaded);
    assert_eq!(skipped, 0);
    let encoded: Vec<_> = prepared.into_iter().map(|p| p.enc).collect();
    let before = out.model.predict(&encoded).unwrap();
    let after = loaded.predict(&encoded).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.dist, b.dist);
    }
}

#[test]
fn same_seed_gives_the_same_history() {
    let labels = LabelSet::top_level();
    let corpus = synth_corpus(&SynthSpec { n: 60, seed: 9, ..SynthSpec::default() }, &labels).unwrap();
    let (train, dev) = corpus.split_at(48);
    let run = || fit(tiny_config(), labels.clone(), train, dev, &mut |_| {}).unwrap().history;
    let (a, b) = (run(), run());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.train_loss.map(f64::to_bits), y.train_loss.map(f64::to_bits));
        assert_eq!(x.dev_loss_de.to_bits(), y.dev_loss_de.to_bits());
        assert_eq!(x.dev_accuracy, y.dev_accuracy);
    }
}

#[test]
fn corpus_text_round_trips() {
    let labels = LabelSet::second_level();
    let corpus = synth_corpus(&SynthSpec { n: 40, multi_label_rate: 0.3, ..SynthSpec::default() }, &labels).unwrap();
    let mut buf = Vec::new();
    write_corpus(&mut buf, &corpus).unwrap();
    let parsed = parse_corpus(std::str::from_utf8(&buf).unwrap()).unwrap();
    assert_eq!(parsed.len(), corpus.len());
    for (a, b) in parsed.iter().zip(&corpus) {
        assert_eq!((&a.id, &a.arg1, &a.arg2, &a.conn, &a.relations), (&b.id, &b.arg1, &b.arg2, &b.conn, &b.relations));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cross_validation_tests_every_instance_once(n in 30usize..200, seed in 0u64..1000, folds in 3usize..12) {
        let labels = LabelSet::top_level();
        let corpus = synth_corpus(&SynthSpec { n, seed, ..SynthSpec::default() }, &labels).unwrap();
        for granularity in [FoldGranularity::Section, FoldGranularity::Instance] {
            let scheme = SplitScheme::CrossValidation { folds, granularity };
            let splits = make_splits(&corpus, &scheme, seed).unwrap();
            prop_assert_eq!(splits.len(), folds);
            let mut tested: Vec<&str> = splits.iter().flat_map(|s| s.test.iter().map(|i| i.id.as_str())).collect();
            tested.sort_unstable();
            tested.dedup();
            prop_assert_eq!(tested.len(), n);
            for s in &splits {
                prop_assert_eq!(s.train.len() + s.dev.len() + s.test.len(), n);
            }
        }
    }
}
