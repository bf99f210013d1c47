use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use expliciter::data::{synth_corpus, LabelSet, SynthSpec};
use expliciter::model::ForwardSpec;
use expliciter::vocab::{build_vocab, encode_instance, EncodedInstance};
use expliciter::{rng_stream, streams, Model, Tape, TrainConfig};

fn setup() -> (Model, Vec<EncodedInstance>) {
    let labels = LabelSet::top_level();
    let corpus = synth_corpus(&SynthSpec { n: 200, seed: 1, ..SynthSpec::default() }, &labels).unwrap();
    let vocab = build_vocab(&corpus, 1).unwrap();
    let mut model = Model::new(TrainConfig::default(), vocab, labels).unwrap();
    model
        .init_memory(corpus.iter().map(|i| i.id.clone()).collect(), corpus.iter().map(|i| i.label_ids[0]).collect())
        .unwrap();
    let encoded = corpus.iter().map(|i| encode_instance(i, &model.vocab).unwrap()).collect();
    (model, encoded)
}

fn training_step(c: &mut Criterion) {
    let (model, encoded) = setup();
    let inst = &encoded[0];
    let spec = ForwardSpec {
        training: true,
        decoder_loss: true,
        classify: true,
        teacher_prob: 0.75,
        exclude: Some("syn-00000"),
    };
    c.bench_function("joint_forward_backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true).unwrap();
            let mut dropout = rng_stream(1, streams::DROPOUT);
            let mut sample = rng_stream(1, streams::SAMPLE);
            let f = model.forward(&mut tape, &bound, inst, &spec, &mut dropout, &mut sample).unwrap();
            let loss = tape.add(f.loss_de.unwrap(), f.loss_cl.unwrap()).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn predict(c: &mut Criterion) {
    let (model, encoded) = setup();
    let mut group = c.benchmark_group("predict");
    group.sample_size(10);
    group.bench_function("one", |bench| bench.iter(|| black_box(model.predict_one(&encoded[0]).unwrap())));
    group.bench_function("200_parallel", |bench| bench.iter(|| black_box(model.predict(&encoded).unwrap())));
    group.finish();
}

criterion_group!(benches, training_step, predict);
criterion_main!(benches);
