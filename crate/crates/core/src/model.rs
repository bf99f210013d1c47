//! Parameter storage, the full forward pass and checkpoints.

use std::path::Path;

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::data::labels::LabelSet;
use crate::decoder::{self, AttentionWeights, DecoderOutput, DecoderState, DecoderWeights};
use crate::encoder::{self, EncoderOutput, LstmWeights};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionWeights};
use crate::memory::{self, ClassifierOutput, ClassifierWeights, MemoryMatrix, MemoryRead};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::training::config::{DecoderInit, TrainConfig};
use crate::training::loss;
use crate::vocab::{EncodedInstance, Embedder, Vocab};
use crate::ModelRng;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    EncoderDecoder,
    Classifier,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: Group,
    pub trainable: bool,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    group: Group,
    trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn push(&mut self, name: &str, group: Group, trainable: bool, tensor: Tensor) -> usize {
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group,
            trainable,
            tensor,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry_mut(&mut self, id: usize) -> &mut ParamEntry {
        &mut self.entries[id]
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entries[self.id(name)?].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(&mut self.entries[id].tensor)
    }

    /// Ids of trainable parameters in `group`.
    pub fn trainable_in(&self, group: Group) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable && self.entries[i].group == group)
            .collect()
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }
}

/// Parameter names, in storage order.
pub mod names {
    pub const EMBEDDING: &str = "embedding";
    pub const ENC_FWD_W: &str = "encoder.fwd.w";
    pub const ENC_FWD_B: &str = "encoder.fwd.b";
    pub const ENC_BWD_W: &str = "encoder.bwd.w";
    pub const ENC_BWD_B: &str = "encoder.bwd.b";
    pub const DEC_W: &str = "decoder.lstm.w";
    pub const DEC_B: &str = "decoder.lstm.b";
    pub const W_ALPHA: &str = "attention.w_alpha";
    pub const W_C: &str = "attention.w_c";
    pub const W_S: &str = "output.w_s";
    pub const B_S: &str = "output.b_s";
    pub const W_I: &str = "fusion.w_i";
    pub const B_I: &str = "fusion.b_i";
    pub const W_R: &str = "classifier.w_r";
    pub const B_R: &str = "classifier.b_r";
    pub const MEMORY: &str = "memory.M";
}

/// Parameters bound on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    pub embedding: Var,
    pub enc_fwd: LstmWeights,
    pub enc_bwd: LstmWeights,
    pub dec: DecoderWeights,
    pub fusion: FusionWeights,
    pub cls: ClassifierWeights,
    pub memory: Option<Var>,
    /// Trainable encoder-decoder vars covered by the decoder L2 term.
    pub theta_de: Vec<Var>,
    /// Trainable classifier vars covered by the classifier L2 term.
    pub theta_cl: Vec<Var>,
}

/// What a forward pass should compute.
#[derive(Debug, Clone)]
pub struct ForwardSpec<'s> {
    pub training: bool,
    /// Run the gold-target decoder pass and its loss.
    pub decoder_loss: bool,
    /// Run the placeholder pass, fusion, memory and classifier.
    pub classify: bool,
    /// Scheduled-sampling probability for the gold pass.
    pub teacher_prob: f64,
    /// Instance whose memory columns are masked.
    pub exclude: Option<&'s str>,
}

impl ForwardSpec<'_> {
    pub fn eval() -> Self {
        ForwardSpec {
            training: false,
            decoder_loss: false,
            classify: true,
            teacher_prob: 1.0,
            exclude: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub encoder: EncoderOutput,
    pub gold: Option<DecoderOutput>,
    /// Masked NLL plus L2 over θ_de.
    pub loss_de: Option<Var>,
    pub placeholder: Option<DecoderOutput>,
    pub h_star: Option<Var>,
    pub read: Option<MemoryRead>,
    pub classifier: Option<ClassifierOutput>,
    /// `-log p[gold] + L2` when the instance carries a label.
    pub loss_cl: Option<Var>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub label: usize,
    pub dist: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    config: TrainConfig,
    vocab: Vec<String>,
    labels: LabelSet,
    params: Vec<ParamMeta>,
    memory_ids: Option<Vec<String>>,
    memory_labels: Option<Vec<usize>>,
    #[serde(default)]
    manifest: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub labels: LabelSet,
    pub params: ParamStore,
    pub memory: Option<MemoryMatrix>,
}

impl Model {
    /// Fresh model with uniform `[-init_range, init_range]` parameters.
    pub fn new(config: TrainConfig, vocab: Vocab, labels: LabelSet) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng_stream(config.seed, crate::streams::INIT);
        let (h, d, v, c) = (config.hidden, config.d, vocab.len(), labels.len());
        let kw = config.fusion.width(h);
        let r = config.init_range;
        let mut p = ParamStore::default();
        let ed = Group::EncoderDecoder;
        let cl = Group::Classifier;
        p.push(names::EMBEDDING, ed, config.train_embeddings, Tensor::uniform(&[v, d], r, &mut rng));
        let lstm_b = |rng: &mut ModelRng| {
            let mut b = Tensor::uniform(&[4 * h], r, rng);
            if config.forget_bias_one {
                b.data_mut()[h..2 * h].fill(1.0);
            }
            b
        };
        for (wn, bn) in [
            (names::ENC_FWD_W, names::ENC_FWD_B),
            (names::ENC_BWD_W, names::ENC_BWD_B),
            (names::DEC_W, names::DEC_B),
        ] {
            p.push(wn, ed, true, Tensor::uniform(&[4 * h, h + d], r, &mut rng));
            p.push(bn, ed, true, lstm_b(&mut rng));
        }
        p.push(names::W_ALPHA, ed, true, Tensor::uniform(&[h, h], r, &mut rng));
        p.push(names::W_C, ed, true, Tensor::uniform(&[h, 2 * h], r, &mut rng));
        p.push(names::W_S, ed, true, Tensor::uniform(&[v, h], r, &mut rng));
        p.push(names::B_S, ed, true, Tensor::uniform(&[v], r, &mut rng));
        p.push(names::W_I, cl, true, Tensor::uniform(&[h, h], r, &mut rng));
        p.push(names::B_I, cl, true, Tensor::uniform(&[h], r, &mut rng));
        p.push(names::W_R, cl, true, Tensor::uniform(&[c, 2 * kw], r, &mut rng));
        p.push(names::B_R, cl, true, Tensor::uniform(&[c], r, &mut rng));
        Ok(Model {
            config,
            vocab,
            labels,
            params: p,
            memory: None,
        })
    }

    /// Width of `h*` and of memory columns.
    pub fn fused_width(&self) -> usize {
        self.config.fusion.width(self.config.hidden)
    }

    /// Fresh memory with one column per `(id, label)` pair.
    pub fn init_memory(&mut self, ids: Vec<String>, labels: Vec<usize>) -> Result<()> {
        let mut rng = crate::rng_stream(self.config.seed, crate::streams::MEMORY);
        let mem = MemoryMatrix::new(self.fused_width(), ids, labels, self.config.init_range, &mut rng)?;
        self.memory = Some(mem);
        Ok(())
    }

    /// Bind every parameter on `tape`. With `trainable` false everything is
    /// a constant and no gradients are produced.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Result<Bound> {
        let mut theta_de = Vec::new();
        let mut theta_cl = Vec::new();
        let mut vars = Vec::with_capacity(self.params.len());
        for (id, e) in self.params.entries().iter().enumerate() {
            let v = if trainable && e.trainable {
                let v = tape.param(&e.tensor, id);
                let covered = e.name != names::EMBEDDING || self.config.l2_embeddings;
                match e.group {
                    Group::EncoderDecoder if covered => theta_de.push(v),
                    Group::Classifier => theta_cl.push(v),
                    _ => {}
                }
                v
            } else {
                tape.constant(&e.tensor)
            };
            vars.push(v);
        }
        let get = |name: &str| -> Result<Var> { Ok(vars[self.params.id(name)?]) };
        let memory = self.memory.as_ref().map(|m| tape.constant(&m.m));
        Ok(Bound {
            embedding: get(names::EMBEDDING)?,
            enc_fwd: LstmWeights {
                w: get(names::ENC_FWD_W)?,
                b: get(names::ENC_FWD_B)?,
            },
            enc_bwd: LstmWeights {
                w: get(names::ENC_BWD_W)?,
                b: get(names::ENC_BWD_B)?,
            },
            dec: DecoderWeights {
                lstm: LstmWeights {
                    w: get(names::DEC_W)?,
                    b: get(names::DEC_B)?,
                },
                attn: AttentionWeights {
                    w_alpha: get(names::W_ALPHA)?,
                    w_c: get(names::W_C)?,
                    w_s: get(names::W_S)?,
                    b_s: get(names::B_S)?,
                },
            },
            fusion: FusionWeights {
                w_i: get(names::W_I)?,
                b_i: get(names::B_I)?,
                k: self.config.k,
                mode: self.config.fusion,
            },
            cls: ClassifierWeights {
                w_r: get(names::W_R)?,
                b_r: get(names::B_R)?,
            },
            memory,
            theta_de,
            theta_cl,
        })
    }

    fn decoder_init(&self, tape: &mut Tape<'_>, enc: &EncoderOutput) -> DecoderState {
        match self.config.decoder_init {
            DecoderInit::Encoder => DecoderState {
                h: enc.forward_final.0,
                c: enc.forward_final.1,
            },
            DecoderInit::Zero => {
                let z = tape.leaf(Tensor::zeros(&[self.config.hidden]), false);
                DecoderState { h: z, c: z }
            }
        }
    }

    /// Forward pass over one encoded instance.
    ///
    /// The gold pass decodes `target_ids` with scheduled sampling and feeds
    /// the decoder loss. The classifier always reads the teacher-forced
    /// placeholder pass, so the annotated connective never reaches it.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        b: &Bound,
        inst: &EncodedInstance,
        spec: &ForwardSpec<'_>,
        dropout_rng: &mut ModelRng,
        sample_rng: &mut ModelRng,
    ) -> Result<Forward> {
        let q1 = self.config.q1;
        let mut embedder = Embedder {
            table: b.embedding,
            dropout: q1,
            training: spec.training,
            rng: dropout_rng,
        };
        let src = embedder.embed_all(tape, &inst.source_ids)?;
        let enc = encoder::encode(tape, &src, &b.enc_fwd, &b.enc_bwd)?;
        let init = self.decoder_init(tape, &enc);

        let (gold, loss_de) = if spec.decoder_loss {
            let out = if spec.training {
                decoder::decode_train(
                    tape,
                    &inst.target_ids,
                    enc.states,
                    init,
                    &b.dec,
                    &mut embedder,
                    spec.teacher_prob,
                    sample_rng,
                )?
            } else {
                decoder::decode_forced(tape, &inst.target_ids, enc.states, init, &b.dec, &mut embedder)?
            };
            let lp = out.log_probs(tape)?;
            let mask = vec![true; inst.target_ids.len()];
            let l = loss::decoder_loss(tape, lp, &inst.target_ids, &mask, self.config.lambda, &b.theta_de)?;
            (Some(out), Some(l))
        } else {
            (None, None)
        };

        let mut fwd = Forward {
            encoder: enc,
            gold,
            loss_de,
            placeholder: None,
            h_star: None,
            read: None,
            classifier: None,
            loss_cl: None,
        };
        if !spec.classify {
            return Ok(fwd);
        }
        let mem_var = b
            .memory
            .ok_or_else(|| Error::Checkpoint("model has no memory; train phase 2 first".into()))?;
        let mem = self.memory.as_ref().expect("memory var bound without memory");
        let ph = if inst.has_placeholder() {
            inst.clone()
        } else {
            inst.with_placeholder()
        };
        let out = decoder::decode_forced(tape, &ph.target_ids, fwd.encoder.states, init, &b.dec, &mut embedder)?;
        let h_star = fusion::fuse(tape, fwd.encoder.states, out.hd_hat, &b.fusion)?;
        let read = memory::memory_read(tape, mem, mem_var, h_star, spec.exclude)?;
        let cls = memory::classify(tape, read.k_vec, h_star, &b.cls, self.config.q2, spec.training, &mut *embedder.rng)?;
        if let Some(&gold) = inst.label_ids.first() {
            fwd.loss_cl = Some(loss::classifier_loss(tape, cls.log_probs, gold, self.config.lambda, &b.theta_cl)?);
        }
        fwd.placeholder = Some(out);
        fwd.h_star = Some(h_star);
        fwd.read = Some(read);
        fwd.classifier = Some(cls);
        Ok(fwd)
    }

    /// Eval-mode classification of one instance.
    pub fn predict_one(&self, inst: &EncodedInstance) -> Result<Prediction> {
        self.predict_with(inst, None)
    }

    /// Eval-mode classification with the memory columns of `exclude` masked.
    pub fn predict_with(&self, inst: &EncodedInstance, exclude: Option<&str>) -> Result<Prediction> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false)?;
        let mut r1 = ModelRng::seed_from_u64(0);
        let mut r2 = ModelRng::seed_from_u64(0);
        let spec = ForwardSpec {
            exclude,
            ..ForwardSpec::eval()
        };
        let f = self.forward(&mut tape, &b, inst, &spec, &mut r1, &mut r2)?;
        let dist = tape.value(f.classifier.expect("classify requested").dist);
        Ok(Prediction {
            label: dist.argmax(),
            dist: dist.data().to_vec(),
        })
    }

    /// Eval-mode classification, parallel over instances, in input order.
    pub fn predict(&self, instances: &[EncodedInstance]) -> Result<Vec<Prediction>> {
        instances.par_iter().map(|i| self.predict_one(i)).collect()
    }

    /// Eval-mode teacher-forced decoder NLL (no L2) of one instance.
    pub fn decoder_nll(&self, inst: &EncodedInstance) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false)?;
        let mut r1 = ModelRng::seed_from_u64(0);
        let mut r2 = ModelRng::seed_from_u64(0);
        let spec = ForwardSpec {
            decoder_loss: true,
            classify: false,
            ..ForwardSpec::eval()
        };
        let f = self.forward(&mut tape, &b, inst, &spec, &mut r1, &mut r2)?;
        Ok(tape.value(f.loss_de.expect("decoder loss requested")).item())
    }

    /// Mean eval-mode decoder NLL over instances.
    pub fn mean_decoder_nll(&self, instances: &[EncodedInstance]) -> Result<f64> {
        if instances.is_empty() {
            return Err(Error::Corpus("no instances to score".into()));
        }
        let losses: Vec<f64> = instances
            .par_iter()
            .map(|i| self.decoder_nll(i))
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Eval-mode `h*` of one instance (placeholder form).
    pub fn h_star(&self, inst: &EncodedInstance) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false)?;
        let mut r1 = ModelRng::seed_from_u64(0);
        let mut r2 = ModelRng::seed_from_u64(0);
        let f = self.forward(&mut tape, &b, inst, &ForwardSpec::eval(), &mut r1, &mut r2)?;
        Ok(tape.value(f.h_star.expect("classify requested")).data().to_vec())
    }

    /// Test-mode attention matrix over the placeholder target sequence:
    /// one row per target token, one column per source token.
    pub fn attention(&self, inst: &EncodedInstance) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false)?;
        let mut r = ModelRng::seed_from_u64(0);
        let mut embedder = Embedder {
            table: b.embedding,
            dropout: 0.0,
            training: false,
            rng: &mut r,
        };
        let src = embedder.embed_all(&mut tape, &inst.source_ids)?;
        let enc = encoder::encode(&mut tape, &src, &b.enc_fwd, &b.enc_bwd)?;
        let init = self.decoder_init(&mut tape, &enc);
        let ph = inst.with_placeholder();
        let out = decoder::decode_test(&mut tape, &ph, enc.states, init, &b.dec, &mut embedder)?;
        Ok(out.attention_matrix(&tape))
    }

    pub fn save(&self, path: &Path, manifest: serde_json::Value) -> Result<()> {
        let mut arrays: Vec<(&str, &Tensor)> = self
            .params
            .entries()
            .iter()
            .map(|e| (e.name.as_str(), &e.tensor))
            .collect();
        if let Some(m) = &self.memory {
            arrays.push((names::MEMORY, &m.m));
        }
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            labels: self.labels.clone(),
            params: self
                .params
                .entries()
                .iter()
                .map(|e| ParamMeta {
                    name: e.name.clone(),
                    group: e.group,
                    trainable: e.trainable,
                })
                .collect(),
            memory_ids: self.memory.as_ref().map(|m| m.column_ids.clone()),
            memory_labels: self.memory.as_ref().map(|m| m.column_labels.clone()),
            manifest,
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        container::write(path, &arrays, &meta)
    }

    /// Load a checkpoint; returns the model and its embedded manifest.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let mut c = container::read(path)?;
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: checkpoint version {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                meta.version
            )));
        }
        let vocab = Vocab::from_tokens(meta.vocab)?;
        let mut params = ParamStore::default();
        for e in meta.params {
            let t = take(&mut c, &e.name)?;
            params.push(&e.name, e.group, e.trainable, t);
        }
        let memory = match (meta.memory_ids, meta.memory_labels) {
            (Some(ids), Some(labels)) => Some(MemoryMatrix::from_parts(take(&mut c, names::MEMORY)?, ids, labels)?),
            _ => None,
        };
        let model = Model {
            config: meta.config,
            vocab,
            labels: meta.labels,
            params,
            memory,
        };
        model.check_shapes()?;
        Ok((model, meta.manifest))
    }

    /// Verify every parameter has the shape implied by config, vocab and labels.
    pub fn check_shapes(&self) -> Result<()> {
        let fresh = Model::new(self.config.clone(), self.vocab.clone(), self.labels.clone())?;
        for e in fresh.params.entries() {
            let have = self.params.get(&e.name)?;
            if have.shape() != e.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name,
                    have.shape(),
                    e.tensor.shape()
                )));
            }
        }
        if let Some(m) = &self.memory {
            if m.width() != self.fused_width() {
                return Err(Error::Checkpoint(format!(
                    "memory width {} does not match fused width {}",
                    m.width(),
                    self.fused_width()
                )));
            }
        }
        Ok(())
    }
}

fn take(c: &mut container::Container, name: &str) -> Result<Tensor> {
    c.take(name)
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no array {name:?}")))
}
