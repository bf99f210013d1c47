//! Decoder, classifier and joint losses with their L2 terms.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

fn with_l2(tape: &mut Tape<'_>, base: Var, lambda: f64, theta: &[Var]) -> Result<Var> {
    if lambda == 0.0 || theta.is_empty() {
        return Ok(base);
    }
    let sq = tape.sum_squares(theta)?;
    let reg = tape.scale(sq, lambda / 2.0)?;
    tape.add(base, reg)
}

/// Masked mean negative log-likelihood of `targets` under `[m×|V|]`
/// log-probabilities, plus `(λ/2)‖θ_de‖²`.
pub fn decoder_loss(
    tape: &mut Tape<'_>,
    log_probs: Var,
    targets: &[usize],
    mask: &[bool],
    lambda: f64,
    theta: &[Var],
) -> Result<Var> {
    let nll = tape.masked_nll(log_probs, targets, mask)?;
    with_l2(tape, nll, lambda, theta)
}

/// `-log p[gold] + (λ/2)‖θ_cl‖²` from a vector of log-probabilities.
pub fn classifier_loss(tape: &mut Tape<'_>, log_probs: Var, gold: usize, lambda: f64, theta: &[Var]) -> Result<Var> {
    let c = tape.value(log_probs).len();
    if gold >= c {
        return Err(Error::Label(format!("gold label {gold} outside {c} classes")));
    }
    let lp = tape.pick(log_probs, gold)?;
    let nll = tape.scale(lp, -1.0)?;
    with_l2(tape, nll, lambda, theta)
}

/// `w·l_de + (1−w)·l_cl`.
pub fn joint_loss(tape: &mut Tape<'_>, l_de: Var, l_cl: Var, w: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Config(format!("joint loss weight {w} outside [0, 1]")));
    }
    let a = tape.scale(l_de, w)?;
    let b = tape.scale(l_cl, 1.0 - w)?;
    tape.add(a, b)
}
