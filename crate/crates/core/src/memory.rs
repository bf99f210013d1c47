//! Memory of training-instance representations and the relation classifier.
//!
//! `M` is a `[K×N]` buffer with one column per training instance (after
//! multi-label duplication, so an id may own two columns). It enters the
//! tape as a constant: gradients reach the model only through `h*`.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::ModelRng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryMatrix {
    pub m: Tensor,
    pub column_ids: Vec<String>,
    /// Gold label of the instance behind each column.
    pub column_labels: Vec<usize>,
    #[serde(skip)]
    index: HashMap<String, Vec<usize>>,
}

impl MemoryMatrix {
    /// Columns initialised uniformly in `[-range, range]`.
    pub fn new<R: Rng + ?Sized>(
        k: usize,
        column_ids: Vec<String>,
        column_labels: Vec<usize>,
        range: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n = column_ids.len();
        Self::from_parts(Tensor::uniform(&[k, n], range, rng), column_ids, column_labels)
    }

    pub fn from_parts(m: Tensor, column_ids: Vec<String>, column_labels: Vec<usize>) -> Result<Self> {
        if m.rank() != 2 || m.cols() != column_ids.len() || column_ids.len() != column_labels.len() {
            return Err(Error::Memory(format!(
                "memory of shape {:?} with {} ids and {} labels",
                m.shape(),
                column_ids.len(),
                column_labels.len()
            )));
        }
        let mut mem = MemoryMatrix {
            m,
            column_ids,
            column_labels,
            index: HashMap::new(),
        };
        mem.reindex();
        Ok(mem)
    }

    /// Rebuild the id lookup after deserialisation.
    pub fn reindex(&mut self) {
        self.index.clear();
        for (j, id) in self.column_ids.iter().enumerate() {
            self.index.entry(id.clone()).or_default().push(j);
        }
    }

    pub fn width(&self) -> usize {
        self.m.rows()
    }

    pub fn columns(&self) -> usize {
        self.m.cols()
    }

    pub fn columns_for(&self, id: &str) -> Result<&[usize]> {
        self.index
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Memory(format!("no memory column for instance {id:?}")))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.width()).map(|r| self.m.get2(r, j)).collect()
    }

    pub fn write_column(&mut self, j: usize, values: &[f64]) -> Result<()> {
        if values.len() != self.width() || j >= self.columns() {
            return Err(Error::Memory(format!(
                "write of {} values to column {j} of a {:?} memory",
                values.len(),
                self.m.shape()
            )));
        }
        for (r, &v) in values.iter().enumerate() {
            self.m.set2(r, j, v);
        }
        Ok(())
    }

    /// Overwrite every column owned by `id`.
    pub fn write(&mut self, id: &str, values: &[f64]) -> Result<()> {
        let cols = self.columns_for(id)?.to_vec();
        for j in cols {
            self.write_column(j, values)?;
        }
        Ok(())
    }

    /// Read weights computed outside the tape.
    pub fn weights(&self, h_star: &[f64], exclude: Option<&str>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let m = tape.constant(&self.m);
        let h = tape.leaf(Tensor::vector(h_star.to_vec()), false);
        let read = memory_read(&mut tape, self, m, h, exclude)?;
        Ok(tape.value(read.weights).data().to_vec())
    }

    /// The `n` highest-weight columns as `(column, weight)`, best first.
    pub fn neighbors(&self, h_star: &[f64], n: usize, exclude: Option<&str>) -> Result<Vec<(usize, f64)>> {
        let w = self.weights(h_star, exclude)?;
        let mut order: Vec<usize> = (0..w.len()).collect();
        order.sort_by(|&a, &b| w[b].total_cmp(&w[a]));
        Ok(order.into_iter().take(n).map(|j| (j, w[j])).collect())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MemoryRead {
    pub k_vec: Var,
    pub weights: Var,
}

/// `weights = softmax(Mᵀ h*)` with the columns of `exclude` masked out,
/// `k_vec = M · weights`. `m` must be `mem.m` bound on the tape.
pub fn memory_read(
    tape: &mut Tape<'_>,
    mem: &MemoryMatrix,
    m: Var,
    h_star: Var,
    exclude: Option<&str>,
) -> Result<MemoryRead> {
    if mem.columns() == 0 {
        return Err(Error::Memory("memory has no columns".into()));
    }
    if tape.value(h_star).len() != mem.width() {
        return Err(Error::Dimension(format!(
            "memory read: query of {} entries against width {}",
            tape.value(h_star).len(),
            mem.width()
        )));
    }
    let excluded: &[usize] = match exclude {
        Some(id) => mem.index.get(id).map_or(&[], Vec::as_slice),
        None => &[],
    };
    let scores = tape.vecmat(h_star, m)?;
    let weights = tape.masked_softmax(scores, excluded)?;
    let k_vec = tape.matvec(m, weights)?;
    Ok(MemoryRead { k_vec, weights })
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierWeights {
    /// `[C×2K]`.
    pub w_r: Var,
    /// `[C]`.
    pub b_r: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierOutput {
    pub logits: Var,
    pub log_probs: Var,
    pub dist: Var,
}

/// `softmax(W_r [k; h*] + b_r)`, with dropout `q2` on the concatenated
/// input in training mode.
pub fn classify(
    tape: &mut Tape<'_>,
    k_vec: Var,
    h_star: Var,
    p: &ClassifierWeights,
    q2: f64,
    training: bool,
    rng: &mut ModelRng,
) -> Result<ClassifierOutput> {
    let joined = tape.concat(k_vec, h_star, 0)?;
    let joined = tape.dropout(joined, q2, training, rng)?;
    let pre = tape.matvec(p.w_r, joined)?;
    let logits = tape.add(pre, p.b_r)?;
    let log_probs = tape.log_softmax(logits)?;
    let dist = tape.softmax(logits)?;
    Ok(ClassifierOutput {
        logits,
        log_probs,
        dist,
    })
}
