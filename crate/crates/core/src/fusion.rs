//! Pooling of the encoder and decoder sequences and their gated combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// `h* = h̄_e + σ(W_i h̄_d + b_i)`, width H.
    #[default]
    Sum,
    /// `h* = [h̄_e; σ(W_i h̄_d + b_i)]`, width 2H.
    Concat,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(FusionMode::Sum),
            "concat" => Ok(FusionMode::Concat),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Sum => "sum",
            FusionMode::Concat => "concat",
        }
    }

    /// Width of `h*` for hidden size `h`.
    pub fn width(self, h: usize) -> usize {
        match self {
            FusionMode::Sum => h,
            FusionMode::Concat => 2 * h,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionWeights {
    pub w_i: Var,
    pub b_i: Var,
    pub k: usize,
    pub mode: FusionMode,
}

/// Mean of the `min(k, T)` largest values in each column of `h` (`[T×H]`).
pub fn kmax_avg_pool(tape: &mut Tape<'_>, h: Var, k: usize) -> Result<Var> {
    tape.kmax_avg_pool(h, k)
}

pub fn gated_interaction(tape: &mut Tape<'_>, he_bar: Var, hd_bar: Var, p: &FusionWeights) -> Result<Var> {
    let (ne, nd) = (tape.value(he_bar).len(), tape.value(hd_bar).len());
    if ne != nd {
        return Err(Error::Dimension(format!(
            "gated interaction: encoder summary has {ne} entries, decoder summary {nd}"
        )));
    }
    let pre = tape.matvec(p.w_i, hd_bar)?;
    let pre = tape.add(pre, p.b_i)?;
    let gate = tape.sigmoid(pre)?;
    match p.mode {
        FusionMode::Sum => tape.add(he_bar, gate),
        FusionMode::Concat => tape.concat(he_bar, gate, 0),
    }
}

/// Pool both sequences and fuse them into `h*`.
pub fn fuse(tape: &mut Tape<'_>, h_e: Var, hd_hat: Var, p: &FusionWeights) -> Result<Var> {
    let he_bar = kmax_avg_pool(tape, h_e, p.k)?;
    let hd_bar = kmax_avg_pool(tape, hd_hat, p.k)?;
    gated_interaction(tape, he_bar, hd_bar, p)
}
