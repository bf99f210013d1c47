//! Accuracy, F1 and confusion matrices, per run and across folds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::labels::{LabelSet, Task};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold instances attributed to this class.
    pub support: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub task: String,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Mean F1 over classes that occur in gold or predictions.
    pub macro_f1: f64,
    /// F1 of class 0 for one-vs-all tasks.
    pub positive_f1: Option<f64>,
    /// Mean `-ln p(gold)` when distributions were supplied.
    pub cross_entropy: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    /// Rows are gold classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Metrics {
    /// Derive every score from a confusion matrix. The diagonal counts
    /// correct predictions.
    pub fn from_confusion(labels: &LabelSet, confusion: Vec<Vec<usize>>) -> Self {
        let c = labels.len();
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
        let mut per_class = Vec::with_capacity(c);
        let mut f1_sum = 0.0;
        let mut present = 0;
        for k in 0..c {
            let tp = confusion[k][k];
            let support: usize = confusion[k].iter().sum();
            let predicted: usize = (0..c).map(|r| confusion[r][k]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            if support > 0 || predicted > 0 {
                f1_sum += f1;
                present += 1;
            }
            per_class.push(ClassMetrics {
                label: labels.name(k).to_string(),
                precision,
                recall,
                f1,
                support,
                predicted,
            });
        }
        let positive_f1 = match labels.task {
            Task::OneVsAll { .. } => Some(per_class[0].f1),
            _ => None,
        };
        Metrics {
            task: labels.task.name(),
            total,
            correct,
            accuracy: ratio(correct, total),
            macro_f1: if present == 0 { 0.0 } else { f1_sum / present as f64 },
            positive_f1,
            cross_entropy: None,
            per_class,
            confusion,
        }
    }

    /// Plain-text report.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task       {}", self.task);
        let _ = writeln!(s, "instances  {}", self.total);
        let _ = writeln!(s, "accuracy   {:.4}", self.accuracy);
        let _ = writeln!(s, "macro-F1   {:.4}", self.macro_f1);
        if let Some(f) = self.positive_f1 {
            let _ = writeln!(s, "pos-F1     {f:.4}");
        }
        if let Some(ce) = self.cross_entropy {
            let _ = writeln!(s, "x-entropy  {ce:.4}");
        }
        let width = self.per_class.iter().map(|c| c.label.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(s, "\n{:width$}  {:>6} {:>6} {:>6} {:>7}", "class", "P", "R", "F1", "support");
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:width$}  {:>6.4} {:>6.4} {:>6.4} {:>7}",
                c.label, c.precision, c.recall, c.f1, c.support
            );
        }
        s
    }
}

/// Score predictions against gold label sets. A prediction is correct if it
/// matches any gold label; the confusion row is the matched label, or the
/// first gold label on a miss.
pub fn evaluate(predictions: &[usize], gold: &[Vec<usize>], labels: &LabelSet) -> Result<Metrics> {
    if predictions.len() != gold.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} gold instances",
            predictions.len(),
            gold.len()
        )));
    }
    let c = labels.len();
    let mut confusion = vec![vec![0usize; c]; c];
    for (i, (&p, g)) in predictions.iter().zip(gold).enumerate() {
        if p >= c || g.is_empty() || g.iter().any(|&x| x >= c) {
            return Err(Error::Label(format!("instance {i}: label out of range or missing")));
        }
        let row = if g.contains(&p) { p } else { g[0] };
        confusion[row][p] += 1;
    }
    Ok(Metrics::from_confusion(labels, confusion))
}

/// [`evaluate`] plus mean cross-entropy of the best-scoring gold label.
pub fn evaluate_distributions(dists: &[Vec<f64>], gold: &[Vec<usize>], labels: &LabelSet) -> Result<Metrics> {
    let preds: Vec<usize> = dists.iter().map(|d| crate::tensor::argmax(d)).collect();
    let mut m = evaluate(&preds, gold, labels)?;
    if !dists.is_empty() {
        let ce: f64 = dists
            .iter()
            .zip(gold)
            .map(|(d, g)| -g.iter().map(|&k| d[k]).fold(0.0, f64::max).ln())
            .sum();
        m.cross_entropy = Some(ce / dists.len() as f64);
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvMetrics {
    pub folds: Vec<Metrics>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub pooled: Metrics,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation over folds plus the pooled confusion.
pub fn aggregate_cv(folds: Vec<Metrics>, labels: &LabelSet) -> Result<CvMetrics> {
    if folds.len() < 2 {
        return Err(Error::Usage(format!("aggregation needs at least 2 folds, got {}", folds.len())));
    }
    let c = labels.len();
    let mut pooled = vec![vec![0usize; c]; c];
    for f in &folds {
        if f.confusion.len() != c {
            return Err(Error::Usage("fold metrics use a different label set".into()));
        }
        for (r, row) in f.confusion.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                pooled[r][k] += v;
            }
        }
    }
    let acc: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
    let f1: Vec<f64> = folds.iter().map(|f| f.macro_f1).collect();
    let (accuracy_mean, accuracy_std) = mean_std(&acc);
    let (macro_f1_mean, macro_f1_std) = mean_std(&f1);
    Ok(CvMetrics {
        folds,
        accuracy_mean,
        accuracy_std,
        macro_f1_mean,
        macro_f1_std,
        pooled: Metrics::from_confusion(labels, pooled),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ModelRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn all_correct() {
        let l = LabelSet::top_level();
        let gold: Vec<Vec<usize>> = (0..12).map(|i| vec![i % 4]).collect();
        let pred: Vec<usize> = (0..12).map(|i| i % 4).collect();
        let m = evaluate(&pred, &gold, &l).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn two_by_two_confusion_gives_two_thirds() {
        let l = LabelSet::one_vs_all("Temporal").unwrap();
        let m = Metrics::from_confusion(&l, vec![vec![2, 1], vec![1, 2]]);
        for c in &m.per_class {
            assert!((c.f1 - 2.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(m.positive_f1, Some(m.per_class[0].f1));
    }

    #[test]
    fn majority_predictor() {
        let l = LabelSet::second_level();
        let mut gold = vec![vec![5usize]; 2611];
        gold.extend((0..10000 - 2611).map(|i| vec![[0, 1, 2, 3, 4, 6, 7, 8, 9, 10][i % 10]]));
        let m = evaluate(&vec![5; gold.len()], &gold, &l).unwrap();
        assert_eq!(m.accuracy, 0.2611);
    }

    #[test]
    fn multi_label_gold_accepts_either() {
        let l = LabelSet::top_level();
        let m = evaluate(&[1, 2, 3], &[vec![0, 1], vec![1, 2], vec![0, 1]], &l).unwrap();
        assert_eq!(m.correct, 2);
        assert_eq!(m.confusion[1][1], 1);
        assert_eq!(m.confusion[2][2], 1);
        assert_eq!(m.confusion[0][3], 1);
    }

    #[test]
    fn length_mismatch_is_usage_error() {
        let l = LabelSet::top_level();
        assert!(matches!(evaluate(&[0], &[], &l), Err(Error::Usage(_))));
    }

    #[test]
    fn matches_brute_force_loop() {
        let l = LabelSet::second_level();
        let mut rng = ModelRng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.gen_range(1..60);
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..11)).collect();
            let gold: Vec<Vec<usize>> = (0..n).map(|_| vec![rng.gen_range(0..11)]).collect();
            let m = evaluate(&pred, &gold, &l).unwrap();
            let hits = pred.iter().zip(&gold).filter(|(p, g)| g[0] == **p).count();
            assert_eq!(m.correct, hits);
            assert_eq!(m.accuracy, hits as f64 / n as f64);
            for k in 0..11 {
                let tp = (0..n).filter(|&i| pred[i] == k && gold[i][0] == k).count();
                let pp = pred.iter().filter(|&&p| p == k).count();
                let gp = gold.iter().filter(|g| g[0] == k).count();
                let p = if pp == 0 { 0.0 } else { tp as f64 / pp as f64 };
                let r = if gp == 0 { 0.0 } else { tp as f64 / gp as f64 };
                let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
                assert_eq!(m.per_class[k].f1, f);
            }
        }
    }

    #[test]
    fn uniform_distributions_give_ln_c() {
        let l = LabelSet::second_level();
        let d = vec![vec![1.0 / 11.0; 11]; 5];
        let g: Vec<Vec<usize>> = (0..5).map(|i| vec![i]).collect();
        let m = evaluate_distributions(&d, &g, &l).unwrap();
        assert!((m.cross_entropy.unwrap() - 11f64.ln()).abs() < 1e-9);
    }

    fn with_accuracy(l: &LabelSet, hits: usize, n: usize) -> Metrics {
        let gold: Vec<Vec<usize>> = vec![vec![0]; n];
        let pred: Vec<usize> = (0..n).map(|i| if i < hits { 0 } else { 1 }).collect();
        evaluate(&pred, &gold, l).unwrap()
    }

    #[test]
    fn cv_aggregation() {
        let l = LabelSet::top_level();
        let same = aggregate_cv(vec![with_accuracy(&l, 3, 10); 4], &l).unwrap();
        assert_eq!(same.accuracy_std, 0.0);
        let two = aggregate_cv(vec![with_accuracy(&l, 4, 10), with_accuracy(&l, 6, 10)], &l).unwrap();
        assert!((two.accuracy_mean - 0.5).abs() < 1e-15);
        assert!((two.accuracy_std - 0.1414).abs() < 1e-4);
        assert_eq!(two.pooled.total, 20);
        assert!(aggregate_cv(vec![with_accuracy(&l, 1, 2)], &l).is_err());
    }
}
