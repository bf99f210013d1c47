//! Two-phase training: decoder pre-training, then the joint objective with
//! memory writes.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::loss;
use crate::data::corpus::{duplicate_multilabel, Instance};
use crate::data::labels::LabelSet;
use crate::error::{Error, Result};
use crate::model::{ForwardSpec, Group, Model, ParamStore};
use crate::memory::MemoryMatrix;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::training::config::TrainConfig;
use crate::vocab::{build_vocab, encode_instance, EncodedInstance};
use crate::{rng_stream, streams, ModelRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: u8,
    /// 0 is the untrained starting point.
    pub epoch: usize,
    pub teacher_prob: f64,
    pub train_loss_de: Option<f64>,
    pub train_loss_cl: Option<f64>,
    pub train_loss: Option<f64>,
    pub dev_loss_de: f64,
    pub dev_accuracy: Option<f64>,
    pub train_accuracy: Option<f64>,
    /// This epoch produced the retained checkpoint so far.
    pub best: bool,
}

pub fn write_history<W: Write>(mut out: W, history: &[EpochRecord]) -> std::io::Result<()> {
    for r in history {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// Training instances (after duplication) that failed to encode.
    pub skipped_train: usize,
    pub skipped_dev: usize,
}

/// An encoded instance with the id used for memory columns.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub enc: EncodedInstance,
}

pub fn prepare(instances: &[Instance], model: &Model) -> (Vec<Prepared>, usize) {
    let mut out = Vec::with_capacity(instances.len());
    let mut skipped = 0;
    for inst in instances {
        match encode_instance(inst, &model.vocab) {
            Ok(enc) => out.push(Prepared {
                id: inst.id.clone(),
                enc,
            }),
            Err(_) => skipped += 1,
        }
    }
    (out, skipped)
}

/// Build the vocabulary from `train`, initialise a model and train it.
pub fn fit(
    config: TrainConfig,
    labels: LabelSet,
    train: &[Instance],
    dev: &[Instance],
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let vocab = build_vocab(train, config.min_count)?;
    let model = Model::new(config, vocab, labels)?;
    train_model(model, train, dev, observer)
}

struct Accumulator {
    sums: BTreeMap<usize, Vec<f64>>,
    count: usize,
}

impl Accumulator {
    fn new() -> Self {
        Accumulator {
            sums: BTreeMap::new(),
            count: 0,
        }
    }

    fn add(&mut self, grads: BTreeMap<usize, Vec<f64>>) {
        for (id, g) in grads {
            match self.sums.get_mut(&id) {
                Some(s) => s.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    self.sums.insert(id, g);
                }
            }
        }
        self.count += 1;
    }

    fn take_mean(&mut self) -> BTreeMap<usize, Vec<f64>> {
        let n = self.count as f64;
        let mut out = std::mem::take(&mut self.sums);
        if self.count > 1 {
            for g in out.values_mut() {
                g.iter_mut().for_each(|x| *x /= n);
            }
        }
        self.count = 0;
        out
    }
}

struct Trainer<'o> {
    model: Model,
    adam: Adam,
    shuffle_rng: ModelRng,
    dropout_rng: ModelRng,
    sample_rng: ModelRng,
    history: Vec<EpochRecord>,
    observer: &'o mut dyn FnMut(&EpochRecord),
}

struct StepResult {
    loss_de: Option<f64>,
    loss_cl: Option<f64>,
    loss: f64,
    h_star: Option<Vec<f64>>,
}

impl Trainer<'_> {
    fn record(&mut self, r: EpochRecord) {
        (self.observer)(&r);
        self.history.push(r);
    }

    fn step_instance(&mut self, p: &Prepared, phase: u8, teacher_prob: f64, acc: &mut Accumulator) -> Result<StepResult> {
        let cfg = &self.model.config;
        let w = cfg.w;
        let spec = ForwardSpec {
            training: true,
            decoder_loss: phase == 1 || w > 0.0,
            classify: phase == 2,
            teacher_prob,
            exclude: if cfg.exclude_self { Some(p.id.as_str()) } else { None },
        };
        let model = &self.model;
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, true)?;
        let f = model.forward(&mut tape, &b, &p.enc, &spec, &mut self.dropout_rng, &mut self.sample_rng)?;
        let (total, de, cl) = if phase == 1 {
            let l = f.loss_de.expect("decoder loss requested");
            (l, Some(l), None)
        } else {
            let l_cl = f
                .loss_cl
                .ok_or_else(|| Error::Corpus(format!("training instance {} has no label", p.id)))?;
            match f.loss_de {
                Some(l_de) => (loss::joint_loss(&mut tape, l_de, l_cl, w)?, Some(l_de), Some(l_cl)),
                None => (l_cl, None, Some(l_cl)),
            }
        };
        let loss = tape.value(total).item();
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "loss became {loss} in phase {phase} on instance {}",
                p.id
            )));
        }
        let grads = tape.backward(total)?;
        acc.add(grads.by_param());
        Ok(StepResult {
            loss_de: de.map(|v| tape.value(v).item()),
            loss_cl: cl.map(|v| tape.value(v).item()),
            loss,
            h_star: f.h_star.map(|h| tape.value(h).data().to_vec()),
        })
    }

    /// One pass over `train`; returns mean (loss_de, loss_cl, loss).
    fn epoch(&mut self, train: &[Prepared], phase: u8, teacher_prob: f64) -> Result<(Option<f64>, Option<f64>, f64)> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let groups: &[Group] = if phase == 1 {
            &[Group::EncoderDecoder]
        } else {
            &[Group::EncoderDecoder, Group::Classifier]
        };
        let batch = self.model.config.batch_size;
        let mut acc = Accumulator::new();
        let (mut sum_de, mut sum_cl, mut sum) = (0.0, 0.0, 0.0);
        let (mut n_de, mut n_cl) = (0usize, 0usize);
        for (i, &idx) in order.iter().enumerate() {
            let p = &train[idx];
            let r = self.step_instance(p, phase, teacher_prob, &mut acc)?;
            if let Some(v) = r.loss_de {
                sum_de += v;
                n_de += 1;
            }
            if let Some(v) = r.loss_cl {
                sum_cl += v;
                n_cl += 1;
            }
            sum += r.loss;
            if let Some(h) = r.h_star {
                self.model
                    .memory
                    .as_mut()
                    .expect("phase 2 has memory")
                    .write(&p.id, &h)?;
            }
            if acc.count == batch || i + 1 == order.len() {
                let grads = acc.take_mean();
                self.adam.step(&mut self.model.params, &grads, groups)?;
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { None } else { Some(s / n as f64) };
        Ok((mean(sum_de, n_de), mean(sum_cl, n_cl), sum / train.len() as f64))
    }

    fn accuracy(&self, data: &[Prepared], exclude_self: bool) -> Result<f64> {
        let model = &self.model;
        let hits: Vec<bool> = data
            .par_iter()
            .map(|p| {
                let ex = if exclude_self { Some(p.id.as_str()) } else { None };
                let pred = model.predict_with(&p.enc, ex)?;
                Ok(p.enc.label_ids.contains(&pred.label))
            })
            .collect::<Result<_>>()?;
        Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
    }

    fn dev_loss(&self, dev: &[Prepared]) -> Result<f64> {
        let encs: Vec<EncodedInstance> = dev.iter().map(|p| p.enc.clone()).collect();
        self.model.mean_decoder_nll(&encs)
    }

    fn phase1(&mut self, train: &[Prepared], dev: &[Prepared]) -> Result<()> {
        let cfg = self.model.config.clone();
        let mut best = self.dev_loss(dev)?;
        self.record(EpochRecord {
            phase: 1,
            epoch: 0,
            teacher_prob: cfg.teacher_prob(1),
            train_loss_de: None,
            train_loss_cl: None,
            train_loss: None,
            dev_loss_de: best,
            dev_accuracy: None,
            train_accuracy: None,
            best: true,
        });
        let mut best_params: ParamStore = self.model.params.clone();
        let mut bad = 0;
        for epoch in 1..=cfg.phase1_max_epochs {
            let tp = cfg.teacher_prob(epoch);
            let (de, _, total) = self.epoch(train, 1, tp)?;
            let dev_loss = self.dev_loss(dev)?;
            let improved = dev_loss < best;
            if improved {
                best = dev_loss;
                best_params = self.model.params.clone();
                bad = 0;
            } else {
                bad += 1;
            }
            self.record(EpochRecord {
                phase: 1,
                epoch,
                teacher_prob: tp,
                train_loss_de: de,
                train_loss_cl: None,
                train_loss: Some(total),
                dev_loss_de: dev_loss,
                dev_accuracy: None,
                train_accuracy: None,
                best: improved,
            });
            if cfg.phase1_patience > 0 && bad >= cfg.phase1_patience {
                break;
            }
        }
        self.model.params = best_params;
        Ok(())
    }

    fn phase2(&mut self, train: &[Prepared], dev: &[Prepared]) -> Result<()> {
        let cfg = self.model.config.clone();
        let tp = cfg.teacher_prob_end;
        let mut best_acc = f64::NEG_INFINITY;
        let mut best: Option<(ParamStore, MemoryMatrix)> = None;
        let mut bad = 0;
        for epoch in 1..=cfg.phase2_max_epochs {
            let (de, cl, total) = self.epoch(train, 2, tp)?;
            let dev_acc = self.accuracy(dev, false)?;
            let dev_loss = self.dev_loss(dev)?;
            let train_acc = if cfg.track_train_accuracy || cfg.phase2_target_train_accuracy > 0.0 {
                Some(self.accuracy(train, cfg.exclude_self)?)
            } else {
                None
            };
            let improved = dev_acc > best_acc;
            if improved {
                best_acc = dev_acc;
                best = Some((self.model.params.clone(), self.model.memory.clone().expect("memory")));
                bad = 0;
            } else {
                bad += 1;
            }
            self.record(EpochRecord {
                phase: 2,
                epoch,
                teacher_prob: tp,
                train_loss_de: de,
                train_loss_cl: cl,
                train_loss: Some(total),
                dev_loss_de: dev_loss,
                dev_accuracy: Some(dev_acc),
                train_accuracy: train_acc,
                best: improved,
            });
            if cfg.phase2_patience > 0 && bad >= cfg.phase2_patience {
                break;
            }
            if cfg.phase2_target_train_accuracy > 0.0
                && train_acc.is_some_and(|a| a >= cfg.phase2_target_train_accuracy)
            {
                break;
            }
        }
        let (params, memory) = best.expect("at least one phase-2 epoch");
        self.model.params = params;
        self.model.memory = Some(memory);
        Ok(())
    }
}

/// Train an initialised model. Multi-label training instances are split
/// into one instance per label first.
pub fn train_model(
    model: Model,
    train: &[Instance],
    dev: &[Instance],
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Corpus("empty training split".into()));
    }
    if dev.is_empty() {
        return Err(Error::Corpus("empty dev split".into()));
    }
    if let Some(bad) = train.iter().chain(dev).find(|i| i.label_ids.is_empty()) {
        return Err(Error::Corpus(format!("instance {} has no label under the active task", bad.id)));
    }
    let train = duplicate_multilabel(train.to_vec());
    let (train_p, skipped_train) = prepare(&train, &model);
    let (dev_p, skipped_dev) = prepare(dev, &model);
    if train_p.is_empty() || dev_p.is_empty() {
        return Err(Error::Corpus("no encodable instances in the training or dev split".into()));
    }

    let cfg = model.config.clone();
    let mut adam = Adam::new(cfg.lr1, cfg.lr2);
    adam.clip = cfg.grad_clip;
    let mut t = Trainer {
        model,
        adam,
        shuffle_rng: rng_stream(cfg.seed, streams::SHUFFLE),
        dropout_rng: rng_stream(cfg.seed, streams::DROPOUT),
        sample_rng: rng_stream(cfg.seed, streams::SAMPLE),
        history: Vec::new(),
        observer,
    };
    if !cfg.skip_phase1 {
        t.phase1(&train_p, &dev_p)?;
    }
    t.model.init_memory(
        train_p.iter().map(|p| p.id.clone()).collect(),
        train_p.iter().map(|p| p.enc.label_ids[0]).collect(),
    )?;
    t.phase2(&train_p, &dev_p)?;
    Ok(TrainOutcome {
        model: t.model,
        history: t.history,
        skipped_train,
        skipped_dev,
    })
}

/// Snapshot of a parameter's values, for before/after comparisons.
pub fn param_snapshot(model: &Model, name: &str) -> Result<Tensor> {
    model.params.get(name).cloned()
}
