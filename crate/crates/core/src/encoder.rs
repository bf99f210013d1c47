//! LSTM cell and the bidirectional encoder.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gate blocks of the stacked LSTM weight, in row order.
pub const GATE_ORDER: [&str; 4] = ["input", "forget", "output", "candidate"];

/// Stacked gate weights `W: [4H × (H + d)]` (columns: previous hidden
/// state first, then input) and bias `b: [4H]`, rows in [`GATE_ORDER`].
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub w: Var,
    pub b: Var,
}

impl LstmWeights {
    pub fn hidden(&self, tape: &Tape<'_>) -> usize {
        tape.value(self.b).len() / 4
    }
}

/// One LSTM step:
/// `[i f o ĉ] = [σ σ σ tanh](W·[h_prev, x] + b)`,
/// `c = f⊙c_prev + i⊙ĉ`, `h = o⊙tanh(c)`.
pub fn lstm_cell(tape: &mut Tape<'_>, x: Var, h_prev: Var, c_prev: Var, p: &LstmWeights) -> Result<(Var, Var)> {
    let h = p.hidden(tape);
    let wshape = tape.value(p.w).shape().to_vec();
    let d = tape.value(x).len();
    if wshape != [4 * h, h + d] || tape.value(h_prev).len() != h || tape.value(c_prev).len() != h {
        return Err(Error::Dimension(format!(
            "lstm_cell: W {wshape:?}, b [{}], x [{d}], h [{}], c [{}]",
            4 * h,
            tape.value(h_prev).len(),
            tape.value(c_prev).len()
        )));
    }
    let hx = tape.concat(h_prev, x, 0)?;
    let z = tape.matvec(p.w, hx)?;
    let z = tape.add(z, p.b)?;
    let zi = tape.slice(z, 0, h)?;
    let zf = tape.slice(z, h, h)?;
    let zo = tape.slice(z, 2 * h, h)?;
    let zc = tape.slice(z, 3 * h, h)?;
    let i = tape.sigmoid(zi)?;
    let f = tape.sigmoid(zf)?;
    let o = tape.sigmoid(zo)?;
    let cand = tape.tanh(zc)?;
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, cand)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c)?;
    let h_t = tape.mul(o, tc)?;
    Ok((h_t, c))
}

/// Run a unidirectional LSTM from `(h0, c0)`; returns per-step hidden
/// states and the final `(h, c)`.
pub fn run_lstm(
    tape: &mut Tape<'_>,
    inputs: &[Var],
    p: &LstmWeights,
    h0: Var,
    c0: Var,
) -> Result<(Vec<Var>, (Var, Var))> {
    let mut h = h0;
    let mut c = c0;
    let mut out = Vec::with_capacity(inputs.len());
    for &x in inputs {
        (h, c) = lstm_cell(tape, x, h, c, p)?;
        out.push(h);
    }
    Ok((out, (h, c)))
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `h_e` as an `[n × H]` matrix.
    pub states: Var,
    /// Row vectors of `states`.
    pub rows: Vec<Var>,
    pub forward_final: (Var, Var),
    pub backward_final: (Var, Var),
}

/// Bidirectional encoder over embedded inputs. Each output row is the
/// element-wise sum of the forward and backward hidden states at that
/// position; both directions start from zero states.
pub fn encode(tape: &mut Tape<'_>, inputs: &[Var], fwd: &LstmWeights, bwd: &LstmWeights) -> Result<EncoderOutput> {
    if inputs.is_empty() {
        return Err(Error::Instance("cannot encode an empty source sequence".into()));
    }
    let h = fwd.hidden(tape);
    let zero = tape.leaf(Tensor::zeros(&[h]), false);
    let (f_states, forward_final) = run_lstm(tape, inputs, fwd, zero, zero)?;
    let reversed: Vec<Var> = inputs.iter().rev().copied().collect();
    let (mut b_states, backward_final) = run_lstm(tape, &reversed, bwd, zero, zero)?;
    b_states.reverse();
    let rows = f_states
        .iter()
        .zip(&b_states)
        .map(|(&f, &b)| tape.add(f, b))
        .collect::<Result<Vec<_>>>()?;
    let states = tape.stack_rows(&rows)?;
    Ok(EncoderOutput {
        states,
        rows,
        forward_final,
        backward_final,
    })
}
