//! LSTM decoder with global attention over the encoder states.
//!
//! Step `t` feeds the embedding of the previous target token (step 0 feeds
//! the PAD id, which doubles as begin-of-sequence), runs the decoder cell,
//! attends over `h_e`, and produces the predictive vector
//! `ĥ_t = tanh(W_c [c_t; h_t])` and word logits `W_s ĥ_t + b_s`.

use rand::Rng;

use crate::encoder::{lstm_cell, LstmWeights};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::vocab::{EncodedInstance, Embedder, PAD};
use crate::ModelRng;

#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    /// `[H×H]` bilinear score matrix.
    pub w_alpha: Var,
    /// `[H×2H]` combination of context and decoder state.
    pub w_c: Var,
    /// `[|V|×H]` word projection.
    pub w_s: Var,
    /// `[|V|]`.
    pub b_s: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderWeights {
    pub lstm: LstmWeights,
    pub attn: AttentionWeights,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
}

/// Global attention: `α = softmax_j(h_dᵀ W_α h_e[j])`, `c = Σ_j α_j h_e[j]`.
/// Returns `(c, α)`.
pub fn attention(tape: &mut Tape<'_>, h_d: Var, h_e: Var, w_alpha: Var) -> Result<(Var, Var)> {
    let n = tape.value(h_e).rows();
    if tape.value(h_e).rank() != 2 || n == 0 {
        return Err(Error::Dimension(format!(
            "attention needs a non-empty [n×H] encoder matrix, got {:?}",
            tape.value(h_e).shape()
        )));
    }
    let query = tape.vecmat(h_d, w_alpha)?;
    let scores = tape.matvec(h_e, query)?;
    let alpha = tape.softmax(scores)?;
    let context = tape.vecmat(alpha, h_e)?;
    Ok((context, alpha))
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub hd_hat: Var,
    pub logits: Var,
    pub alpha: Var,
    pub state: DecoderState,
}

/// One decoder step from an already embedded input token.
pub fn decode_step(
    tape: &mut Tape<'_>,
    y_emb: Var,
    state: DecoderState,
    h_e: Var,
    w: &DecoderWeights,
) -> Result<StepOutput> {
    let (h, c) = lstm_cell(tape, y_emb, state.h, state.c, &w.lstm)?;
    let (context, alpha) = attention(tape, h, h_e, w.attn.w_alpha)?;
    let joined = tape.concat(context, h, 0)?;
    let mixed = tape.matvec(w.attn.w_c, joined)?;
    let hd_hat = tape.tanh(mixed)?;
    let proj = tape.matvec(w.attn.w_s, hd_hat)?;
    let logits = tape.add(proj, w.attn.b_s)?;
    Ok(StepOutput {
        hd_hat,
        logits,
        alpha,
        state: DecoderState { h, c },
    })
}

/// Word distribution for one step's logits.
pub fn word_distribution(tape: &mut Tape<'_>, logits: Var) -> Result<Var> {
    tape.softmax(logits)
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// Predictive vectors `ĥ_d` as an `[m×H]` matrix.
    pub hd_hat: Var,
    /// Per-step logits over the vocabulary.
    pub logits: Vec<Var>,
    /// Per-step attention weights over source positions.
    pub alphas: Vec<Var>,
    /// Token id fed at each step.
    pub inputs: Vec<usize>,
}

impl DecoderOutput {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Row-wise log-softmax of the logits, stacked to `[m×|V|]`.
    pub fn log_probs(&self, tape: &mut Tape<'_>) -> Result<Var> {
        let rows = self
            .logits
            .iter()
            .map(|&l| tape.log_softmax(l))
            .collect::<Result<Vec<_>>>()?;
        tape.stack_rows(&rows)
    }

    /// Attention matrix (targets × sources) as plain values.
    pub fn attention_matrix(&self, tape: &Tape<'_>) -> Vec<Vec<f64>> {
        self.alphas.iter().map(|&a| tape.value(a).data().to_vec()).collect()
    }
}

/// Where each step's input token comes from.
enum Feed<'x> {
    /// Fixed input ids, one per step.
    Forced(&'x [usize]),
    /// Gold previous token with probability `teacher_prob`, otherwise the
    /// previous step's argmax.
    Sampled { targets: &'x [usize], teacher_prob: f64 },
}

fn run(
    tape: &mut Tape<'_>,
    feed: Feed<'_>,
    h_e: Var,
    init: DecoderState,
    w: &DecoderWeights,
    embedder: &mut Embedder<'_>,
    sampler: Option<&mut ModelRng>,
) -> Result<DecoderOutput> {
    let steps = match &feed {
        Feed::Forced(ids) => ids.len(),
        Feed::Sampled { targets, .. } => targets.len(),
    };
    if steps == 0 {
        return Err(Error::Instance("empty decoder sequence".into()));
    }
    let mut sampler = sampler;
    let mut state = init;
    let mut rows = Vec::with_capacity(steps);
    let mut logits = Vec::with_capacity(steps);
    let mut alphas = Vec::with_capacity(steps);
    let mut inputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let input = match &feed {
            Feed::Forced(ids) => ids[t],
            Feed::Sampled { .. } if t == 0 => PAD,
            Feed::Sampled { targets, teacher_prob } => {
                let gold = targets[t - 1];
                let use_gold = if *teacher_prob >= 1.0 {
                    true
                } else if *teacher_prob <= 0.0 {
                    false
                } else {
                    let rng = sampler.as_deref_mut().expect("sampling needs an rng");
                    rng.gen::<f64>() < *teacher_prob
                };
                if use_gold {
                    gold
                } else {
                    tape.value(logits[t - 1]).argmax()
                }
            }
        };
        inputs.push(input);
        let x = embedder.embed(tape, input)?;
        let out = decode_step(tape, x, state, h_e, w)?;
        state = out.state;
        rows.push(out.hd_hat);
        logits.push(out.logits);
        alphas.push(out.alpha);
    }
    let hd_hat = tape.stack_rows(&rows)?;
    Ok(DecoderOutput {
        hd_hat,
        logits,
        alphas,
        inputs,
    })
}

/// Inputs for teacher forcing: BOS (PAD) followed by all but the last target.
pub fn shifted_inputs(target_ids: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(target_ids.len());
    v.push(PAD);
    if let Some((_, init)) = target_ids.split_last() {
        v.extend_from_slice(init);
    }
    v
}

/// Training-mode decoding with scheduled sampling.
#[allow(clippy::too_many_arguments)]
pub fn decode_train(
    tape: &mut Tape<'_>,
    target_ids: &[usize],
    h_e: Var,
    init: DecoderState,
    w: &DecoderWeights,
    embedder: &mut Embedder<'_>,
    teacher_prob: f64,
    sampler: &mut ModelRng,
) -> Result<DecoderOutput> {
    if !(0.0..=1.0).contains(&teacher_prob) {
        return Err(Error::Config(format!("teacher_prob {teacher_prob} outside [0, 1]")));
    }
    run(
        tape,
        Feed::Sampled {
            targets: target_ids,
            teacher_prob,
        },
        h_e,
        init,
        w,
        embedder,
        Some(sampler),
    )
}

/// Teacher-forced decoding of a fixed target sequence (no sampling).
pub fn decode_forced(
    tape: &mut Tape<'_>,
    target_ids: &[usize],
    h_e: Var,
    init: DecoderState,
    w: &DecoderWeights,
    embedder: &mut Embedder<'_>,
) -> Result<DecoderOutput> {
    let inputs = shifted_inputs(target_ids);
    run(tape, Feed::Forced(&inputs), h_e, init, w, embedder, None)
}

/// Test-time decoding: the placeholder sequence
/// `[Arg1 ; <conn> impl_conn </conn> ; Arg2]` is both input and target.
pub fn decode_test(
    tape: &mut Tape<'_>,
    encoded: &EncodedInstance,
    h_e: Var,
    init: DecoderState,
    w: &DecoderWeights,
    embedder: &mut Embedder<'_>,
) -> Result<DecoderOutput> {
    if !encoded.has_placeholder() {
        return Err(Error::Usage(
            "test-time decoding needs the impl_conn placeholder form".into(),
        ));
    }
    decode_forced(tape, &encoded.target_ids, h_e, init, w, embedder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::vocab::{CONN_CLOSE, CONN_OPEN, IMPL_CONN, UNK};
    use rand::SeedableRng;

    struct Fixture {
        emb: Tensor,
        lstm_w: Tensor,
        lstm_b: Tensor,
        w_alpha: Tensor,
        w_c: Tensor,
        w_s: Tensor,
        b_s: Tensor,
        h_e: Tensor,
    }

    const H: usize = 4;
    const D: usize = 3;
    const V: usize = 9;

    fn fixture(seed: u64) -> Fixture {
        let mut rng = ModelRng::seed_from_u64(seed);
        Fixture {
            emb: Tensor::uniform(&[V, D], 1.0, &mut rng),
            lstm_w: Tensor::uniform(&[4 * H, H + D], 0.5, &mut rng),
            lstm_b: Tensor::uniform(&[4 * H], 0.5, &mut rng),
            w_alpha: Tensor::uniform(&[H, H], 1.0, &mut rng),
            w_c: Tensor::uniform(&[H, 2 * H], 1.0, &mut rng),
            w_s: Tensor::uniform(&[V, H], 1.0, &mut rng),
            b_s: Tensor::uniform(&[V], 1.0, &mut rng),
            h_e: Tensor::uniform(&[5, H], 1.0, &mut rng),
        }
    }

    fn bind<'a>(tape: &mut Tape<'a>, f: &'a Fixture) -> (Var, DecoderWeights, Var, DecoderState) {
        let emb = tape.constant(&f.emb);
        let w = DecoderWeights {
            lstm: LstmWeights {
                w: tape.param(&f.lstm_w, 0),
                b: tape.param(&f.lstm_b, 1),
            },
            attn: AttentionWeights {
                w_alpha: tape.param(&f.w_alpha, 2),
                w_c: tape.param(&f.w_c, 3),
                w_s: tape.param(&f.w_s, 4),
                b_s: tape.param(&f.b_s, 5),
            },
        };
        let h_e = tape.constant(&f.h_e);
        let z = tape.leaf(Tensor::zeros(&[H]), false);
        (emb, w, h_e, DecoderState { h: z, c: z })
    }

    #[test]
    fn single_source_position_gets_all_attention() {
        let mut rng = ModelRng::seed_from_u64(0);
        let mut tape = Tape::new();
        let hd = tape.leaf(Tensor::uniform(&[H], 1.0, &mut rng), false);
        let he = tape.leaf(Tensor::uniform(&[1, H], 1.0, &mut rng), false);
        let wa = tape.leaf(Tensor::uniform(&[H, H], 1.0, &mut rng), false);
        let (c, a) = attention(&mut tape, hd, he, wa).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0]);
        assert_eq!(tape.value(c).data(), tape.value(he).data());
    }

    #[test]
    fn zero_score_matrix_gives_uniform_attention() {
        let mut rng = ModelRng::seed_from_u64(1);
        let mut tape = Tape::new();
        let hd = tape.leaf(Tensor::uniform(&[H], 1.0, &mut rng), false);
        let he = tape.leaf(Tensor::uniform(&[6, H], 1.0, &mut rng), false);
        let wa = tape.leaf(Tensor::zeros(&[H, H]), false);
        let (_, a) = attention(&mut tape, hd, he, wa).unwrap();
        for &p in tape.value(a).data() {
            assert!((p - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn context_matches_weighted_sum_loop() {
        let mut rng = ModelRng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.gen_range(1..10);
            let hd_t = Tensor::uniform(&[H], 1.0, &mut rng);
            let he_t = Tensor::uniform(&[n, H], 1.0, &mut rng);
            let wa_t = Tensor::uniform(&[H, H], 1.0, &mut rng);
            // Oracle: explicit scores, softmax, then accumulate rows.
            let mut scores = vec![0.0; n];
            for (j, s) in scores.iter_mut().enumerate() {
                for a in 0..H {
                    for b in 0..H {
                        *s += hd_t.data()[a] * wa_t.get2(a, b) * he_t.get2(j, b);
                    }
                }
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            let alpha: Vec<f64> = scores.iter().map(|s| (s - m).exp() / z).collect();
            let mut want = vec![0.0; H];
            for j in 0..n {
                for (b, w) in want.iter_mut().enumerate() {
                    *w += alpha[j] * he_t.get2(j, b);
                }
            }
            let mut tape = Tape::new();
            let hd = tape.leaf(hd_t, false);
            let he = tape.leaf(he_t, false);
            let wa = tape.leaf(wa_t, false);
            let (c, a) = attention(&mut tape, hd, he, wa).unwrap();
            for (x, y) in tape.value(c).data().iter().zip(&want) {
                assert!((x - y).abs() <= 1e-12);
            }
            for (x, y) in tape.value(a).data().iter().zip(&alpha) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn step_distribution_properties() {
        let f = fixture(3);
        let mut rng = ModelRng::seed_from_u64(3);
        let mut tape = Tape::new();
        let (emb, w, h_e, init) = bind(&mut tape, &f);
        let x = tape.row(emb, 5).unwrap();
        let out = decode_step(&mut tape, x, init, h_e, &w).unwrap();
        let dist = word_distribution(&mut tape, out.logits).unwrap();
        assert!((tape.value(dist).data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let shifted = {
            let l = tape.value(out.logits).data().iter().map(|v| v + 3.7).collect();
            Tensor::vector(l)
        };
        assert_eq!(shifted.argmax(), tape.value(out.logits).argmax());
        let _ = &mut rng;
    }

    #[test]
    fn zero_combination_gives_bias_distribution() {
        let mut f = fixture(4);
        f.w_c = Tensor::zeros(&[H, 2 * H]);
        let mut tape = Tape::new();
        let (emb, w, h_e, init) = bind(&mut tape, &f);
        let x = tape.row(emb, 2).unwrap();
        let out = decode_step(&mut tape, x, init, h_e, &w).unwrap();
        assert!(tape.value(out.hd_hat).data().iter().all(|&v| v == 0.0));
        let dist = word_distribution(&mut tape, out.logits).unwrap();
        let b = tape.leaf(f.b_s.clone(), false);
        let want = tape.softmax(b).unwrap();
        assert_eq!(tape.value(dist).data(), tape.value(want).data());
    }

    fn run_train(f: &Fixture, targets: &[usize], tp: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ModelRng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let (emb, w, h_e, init) = bind(&mut tape, f);
        let mut drop_rng = ModelRng::seed_from_u64(seed + 100);
        let mut embedder = Embedder {
            table: emb,
            dropout: 0.0,
            training: true,
            rng: &mut drop_rng,
        };
        let out = decode_train(&mut tape, targets, h_e, init, &w, &mut embedder, tp, &mut rng).unwrap();
        let logits = out.logits.iter().map(|&l| tape.value(l).data().to_vec()).collect();
        (logits, out.inputs)
    }

    #[test]
    fn full_teacher_forcing_equals_forced_decoding() {
        let f = fixture(5);
        let targets = [5, 6, CONN_OPEN, 7, CONN_CLOSE, 8];
        let (logits, inputs) = run_train(&f, &targets, 1.0, 1);
        assert_eq!(inputs, shifted_inputs(&targets));
        let mut tape = Tape::new();
        let (emb, w, h_e, init) = bind(&mut tape, &f);
        let mut r = ModelRng::seed_from_u64(0);
        let mut embedder = Embedder {
            table: emb,
            dropout: 0.0,
            training: false,
            rng: &mut r,
        };
        let out = decode_forced(&mut tape, &targets, h_e, init, &w, &mut embedder).unwrap();
        for (a, &b) in logits.iter().zip(&out.logits) {
            assert_eq!(a.as_slice(), tape.value(b).data());
        }
    }

    #[test]
    fn zero_teacher_prob_feeds_previous_argmax() {
        let f = fixture(6);
        let targets = [5, 6, 7, 8, 5, 6];
        let (logits, inputs) = run_train(&f, &targets, 0.0, 2);
        assert_eq!(inputs[0], PAD);
        for t in 1..targets.len() {
            assert_eq!(inputs[t], crate::tensor::argmax(&logits[t - 1]));
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let f = fixture(7);
        let targets = [5, 6, 7, 8, 5, 6, 7];
        assert_eq!(run_train(&f, &targets, 0.5, 9), run_train(&f, &targets, 0.5, 9));
    }

    fn run_test_mode(f: &Fixture, target: &[usize]) -> Vec<Vec<f64>> {
        let enc = EncodedInstance {
            source_ids: vec![5, 6, 7],
            target_ids: target.to_vec(),
            conn_span: (2, 4),
            label_ids: vec![0],
        };
        let mut tape = Tape::new();
        let (emb, w, h_e, init) = bind(&mut tape, f);
        let mut r = ModelRng::seed_from_u64(0);
        let mut embedder = Embedder {
            table: emb,
            dropout: 0.0,
            training: false,
            rng: &mut r,
        };
        let inputs = shifted_inputs(target);
        let out = if target[3] == IMPL_CONN {
            decode_test(&mut tape, &enc, h_e, init, &w, &mut embedder).unwrap()
        } else {
            run(&mut tape, Feed::Forced(&inputs), h_e, init, &w, &mut embedder, None).unwrap()
        };
        assert_eq!(tape.value(out.hd_hat).rows(), target.len());
        (0..target.len()).map(|r| tape.value(out.hd_hat).row(r).to_vec()).collect()
    }

    #[test]
    fn test_mode_is_deterministic_and_causal() {
        let f = fixture(8);
        let placeholder = [5, 6, CONN_OPEN, IMPL_CONN, CONN_CLOSE, 7];
        let a = run_test_mode(&f, &placeholder);
        assert_eq!(a, run_test_mode(&f, &placeholder));

        let mut swapped = placeholder;
        swapped[3] = UNK;
        let b = run_test_mode(&f, &swapped);
        // impl_conn at target position 3 is the input of step 4.
        for r in 0..=3 {
            assert_eq!(a[r], b[r], "row {r} must not see later inputs");
        }
        assert!((4..placeholder.len()).all(|r| a[r] != b[r]));
    }

    #[test]
    fn test_mode_requires_placeholder() {
        let f = fixture(9);
        let enc = EncodedInstance {
            source_ids: vec![5, 6, 7],
            target_ids: vec![5, 6, CONN_OPEN, 8, CONN_CLOSE, 7],
            conn_span: (2, 4),
            label_ids: vec![0],
        };
        let mut tape = Tape::new();
        let (emb, w, h_e, init) = bind(&mut tape, &f);
        let mut r = ModelRng::seed_from_u64(0);
        let mut embedder = Embedder {
            table: emb,
            dropout: 0.0,
            training: false,
            rng: &mut r,
        };
        assert!(matches!(
            decode_test(&mut tape, &enc, h_e, init, &w, &mut embedder),
            Err(Error::Usage(_))
        ));
    }
}
