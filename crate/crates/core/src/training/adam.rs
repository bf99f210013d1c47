//! Adam with one learning rate per parameter group.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::model::{Group, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one tensor and its own step count, so a
/// group that starts late still gets correct bias correction.
#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Moments {
    pub fn new(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `x` in place.
    pub fn update(&mut self, x: &mut [f64], g: &[f64], lr: f64, cfg: &AdamConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..x.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            x[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    lrs: HashMap<Group, f64>,
    state: BTreeMap<usize, Moments>,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
}

impl Adam {
    pub fn new(lr_encoder_decoder: f64, lr_classifier: f64) -> Self {
        let mut lrs = HashMap::new();
        lrs.insert(Group::EncoderDecoder, lr_encoder_decoder);
        lrs.insert(Group::Classifier, lr_classifier);
        Adam {
            cfg: AdamConfig::default(),
            lrs,
            state: BTreeMap::new(),
            clip: 0.0,
        }
    }

    pub fn lr(&self, group: Group) -> f64 {
        self.lrs[&group]
    }

    pub fn steps(&self, param: usize) -> u64 {
        self.state.get(&param).map_or(0, |m| m.t)
    }

    /// Update every trainable parameter of the `active` groups. Each must
    /// have a gradient in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<usize, Vec<f64>>, active: &[Group]) -> Result<()> {
        let ids: Vec<usize> = active.iter().flat_map(|&g| params.trainable_in(g)).collect();
        for &id in &ids {
            match grads.get(&id) {
                None => {
                    return Err(Error::Training(format!(
                        "no gradient for trainable parameter {}",
                        params.entries()[id].name
                    )))
                }
                Some(g) if g.len() != params.entries()[id].tensor.len() => {
                    return Err(Error::Training(format!(
                        "gradient of {} has {} entries, parameter has {}",
                        params.entries()[id].name,
                        g.len(),
                        params.entries()[id].tensor.len()
                    )))
                }
                Some(_) => {}
            }
        }
        let scale = if self.clip > 0.0 {
            let norm = ids
                .iter()
                .map(|id| grads[id].iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > self.clip {
                self.clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        for id in ids {
            let entry = params.entry_mut(id);
            let lr = self.lrs[&entry.group];
            let n = entry.tensor.len();
            let g: Vec<f64>;
            let grad: &[f64] = if scale == 1.0 {
                &grads[&id]
            } else {
                g = grads[&id].iter().map(|x| x * scale).collect();
                &g
            };
            self.state
                .entry(id)
                .or_insert_with(|| Moments::new(n))
                .update(entry.tensor.data_mut(), grad, lr, &self.cfg);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Straight transcription of the Adam recurrences for one scalar.
    struct ReferenceAdam {
        m: f64,
        v: f64,
        t: i32,
    }

    impl ReferenceAdam {
        fn step(&mut self, x: f64, g: f64, lr: f64) -> f64 {
            self.t += 1;
            self.m = 0.9 * self.m + 0.1 * g;
            self.v = 0.999 * self.v + 0.001 * g * g;
            let mh = self.m / (1.0 - 0.9f64.powi(self.t));
            let vh = self.v / (1.0 - 0.999f64.powi(self.t));
            x - lr * mh / (vh.sqrt() + 1e-8)
        }
    }

    fn store(values: &[f64]) -> ParamStore {
        let mut p = ParamStore::default();
        p.push("x", Group::EncoderDecoder, true, Tensor::vector(values.to_vec()));
        p.push("y", Group::Classifier, true, Tensor::vector(values.to_vec()));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = store(&[0.5, -2.0]);
        let mut adam = Adam::new(0.1, 0.1);
        let grads = BTreeMap::from([(0, vec![0.0, 0.0]), (1, vec![0.0, 0.0])]);
        for _ in 0..5 {
            adam.step(&mut p, &grads, &[Group::EncoderDecoder, Group::Classifier]).unwrap();
        }
        assert_eq!(p.get("x").unwrap().data(), &[0.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [1e-3, 0.7, -42.0] {
            let mut p = store(&[1.0]);
            let mut adam = Adam::new(0.01, 0.02);
            let grads = BTreeMap::from([(0, vec![g]), (1, vec![g])]);
            adam.step(&mut p, &grads, &[Group::EncoderDecoder, Group::Classifier]).unwrap();
            let mut r = ReferenceAdam { m: 0.0, v: 0.0, t: 0 };
            let want = r.step(1.0, g, 0.01);
            assert_eq!(p.get("x").unwrap().data()[0], want);
            assert!(((1.0 - want).abs() - 0.01).abs() < 1e-6);
            assert!(((1.0 - p.get("y").unwrap().data()[0]).abs() - 0.02).abs() < 1e-6);
        }
    }

    #[test]
    fn minimises_a_parabola_like_the_reference() {
        let mut p = store(&[1.0]);
        let mut adam = Adam::new(0.1, 0.1);
        let mut r = ReferenceAdam { m: 0.0, v: 0.0, t: 0 };
        let mut x_ref = 1.0;
        for _ in 0..200 {
            let x = p.get("x").unwrap().data()[0];
            let grads = BTreeMap::from([(0, vec![2.0 * x])]);
            adam.step(&mut p, &grads, &[Group::EncoderDecoder]).unwrap();
            x_ref = r.step(x_ref, 2.0 * x_ref, 0.1);
        }
        let x = p.get("x").unwrap().data()[0];
        assert!(x.abs() < 0.05, "{x}");
        assert!((x - x_ref).abs() < 1e-12);
    }

    #[test]
    fn late_group_gets_fresh_bias_correction() {
        let mut p = store(&[1.0]);
        let mut adam = Adam::new(0.01, 0.01);
        let g = BTreeMap::from([(0, vec![0.3]), (1, vec![0.3])]);
        for _ in 0..10 {
            adam.step(&mut p, &g, &[Group::EncoderDecoder]).unwrap();
        }
        assert_eq!(adam.steps(1), 0);
        adam.step(&mut p, &g, &[Group::Classifier]).unwrap();
        assert!(((1.0 - p.get("y").unwrap().data()[0]) - 0.01).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_is_a_training_error() {
        let mut p = store(&[1.0]);
        let mut adam = Adam::new(0.01, 0.01);
        let g = BTreeMap::from([(0, vec![0.3])]);
        assert!(matches!(
            adam.step(&mut p, &g, &[Group::EncoderDecoder, Group::Classifier]),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn clipping_bounds_the_update_direction() {
        let mut a = store(&[0.0]);
        let mut b = store(&[0.0]);
        let mut plain = Adam::new(0.1, 0.1);
        let mut clipped = Adam::new(0.1, 0.1);
        clipped.clip = 1e-3;
        let g = BTreeMap::from([(0, vec![5.0])]);
        plain.step(&mut a, &g, &[Group::EncoderDecoder]).unwrap();
        clipped.step(&mut b, &g, &[Group::EncoderDecoder]).unwrap();
        // Adam is scale-invariant on the first step up to epsilon.
        assert!((a.get("x").unwrap().data()[0] - b.get("x").unwrap().data()[0]).abs() < 1e-4);
    }
}
