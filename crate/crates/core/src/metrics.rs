//! Accuracy, macro F1 and adjusted Rand index over per-timestep labelings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::GranularitySpec;
use crate::error::{Error, Result};

fn check_lengths(pred: &[usize], truth: &[usize], min: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.len() < min {
        return Err(Error::Empty);
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth, 1)?;
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / pred.len() as f64)
}

/// Unweighted mean of per-class F1 over classes occurring in `truth` or
/// `pred`; classes seen in neither are left out.
pub fn macro_f1(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    check_lengths(pred, truth, 1)?;
    if let Some(&bad) = pred.iter().chain(truth).find(|&&s| s >= k) {
        return Err(Error::StateOutOfRange { state: bad, k_total: k });
    }
    let mut tp = vec![0usize; k];
    let mut pred_n = vec![0usize; k];
    let mut true_n = vec![0usize; k];
    for (&p, &t) in pred.iter().zip(truth) {
        pred_n[p] += 1;
        true_n[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let mut sum = 0.0;
    let mut classes = 0;
    for c in 0..k {
        if pred_n[c] == 0 && true_n[c] == 0 {
            continue;
        }
        classes += 1;
        // 2PR/(P+R) simplifies to 2tp/(|pred|+|truth|); zero when tp is zero.
        sum += 2.0 * tp[c] as f64 / (pred_n[c] + true_n[c]) as f64;
    }
    Ok(sum / classes as f64)
}

fn pairs(n: u64) -> i128 {
    let n = n as i128;
    n * (n - 1).max(0) / 2
}

/// Exact integer pair counts; the only rounding is the final division.
pub fn adjusted_rand_index(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth, 2)?;
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *table.entry((t, p)).or_default() += 1;
        *rows.entry(t).or_default() += 1;
        *cols.entry(p).or_default() += 1;
    }
    let index: i128 = table.values().map(|&n| pairs(n)).sum();
    let a: i128 = rows.values().map(|&n| pairs(n)).sum();
    let b: i128 = cols.values().map(|&n| pairs(n)).sum();
    let total = pairs(pred.len() as u64);
    let num = 2 * (index * total - a * b);
    let denom = (a + b) * total - 2 * a * b;
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / denom as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub acc: f64,
    pub mf1: f64,
    pub ari: f64,
    pub support: usize,
}

impl EvalScores {
    pub fn compute(pred: &[usize], truth: &[usize], k: usize) -> Result<Self> {
        Ok(Self {
            acc: accuracy(pred, truth)?,
            mf1: macro_f1(pred, truth, k)?,
            ari: if pred.len() < 2 { 1.0 } else { adjusted_rand_index(pred, truth)? },
            support: pred.len(),
        })
    }
}

/// One output row: a level, or `"overall"` for the macro average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub level: String,
    #[serde(flatten)]
    pub scores: EvalScores,
}

/// Accumulates predictions per granularity level (global ids), then scores
/// each level and their unweighted mean.
#[derive(Debug, Clone)]
pub struct LevelAccumulator {
    spec: GranularitySpec,
    pred: Vec<Vec<usize>>,
    truth: Vec<Vec<usize>>,
}

impl LevelAccumulator {
    pub fn new(spec: &GranularitySpec) -> Self {
        let g = spec.levels.len();
        Self {
            spec: spec.clone(),
            pred: vec![Vec::new(); g],
            truth: vec![Vec::new(); g],
        }
    }

    pub fn push(&mut self, level: usize, pred: &[usize], truth: &[usize]) -> Result<()> {
        check_lengths(pred, truth, 0)?;
        if level >= self.pred.len() {
            return Err(Error::InvalidWindow(format!("no level {level}")));
        }
        self.pred[level].extend_from_slice(pred);
        self.truth[level].extend_from_slice(truth);
        Ok(())
    }

    /// Rows for every level with data, then `"overall"`.
    pub fn rows(&self) -> Result<Vec<EvalRow>> {
        let k = self.spec.k_total();
        let mut rows = Vec::new();
        for (i, level) in self.spec.levels.iter().enumerate() {
            if self.pred[i].is_empty() {
                continue;
            }
            rows.push(EvalRow {
                level: level.name.clone(),
                scores: EvalScores::compute(&self.pred[i], &self.truth[i], k)?,
            });
        }
        if rows.is_empty() {
            return Err(Error::Empty);
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&EvalScores) -> f64| rows.iter().map(|r| f(&r.scores)).sum::<f64>() / n;
        let overall = EvalScores {
            acc: mean(|s| s.acc),
            mf1: mean(|s| s.mf1),
            ari: mean(|s| s.ari),
            support: rows.iter().map(|r| r.scores.support).sum(),
        };
        rows.push(EvalRow {
            level: "overall".into(),
            scores: overall,
        });
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Level;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0, 1, 1], &[0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert!(matches!(accuracy(&[0], &[0, 1]), Err(Error::LengthMismatch(1, 2))));
        assert!(matches!(accuracy(&[], &[]), Err(Error::Empty)));
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 1], &[0, 1, 1], 2).unwrap(), 1.0);
        assert!((macro_f1(&[0, 0, 0], &[0, 0, 1], 2).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(macro_f1(&[2, 2], &[2, 2], 5).unwrap(), 1.0);
        assert!(macro_f1(&[3], &[0], 2).is_err());
    }

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[5, 5, 2, 2, 7], &[0, 0, 1, 1, 2]).unwrap(), 1.0);
        assert!((adjusted_rand_index(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap() + 0.5).abs() < 1e-15);
        assert_eq!(adjusted_rand_index(&[1, 1, 1], &[0, 0, 0]).unwrap(), 1.0);
        assert!(matches!(adjusted_rand_index(&[0], &[0]), Err(Error::Empty)));
    }

    #[test]
    fn level_rows() {
        let spec = GranularitySpec::new(vec![Level { name: "fine".into(), k: 2 }, Level { name: "coarse".into(), k: 2 }]).unwrap();
        let mut acc = LevelAccumulator::new(&spec);
        acc.push(0, &[0, 1, 1, 0], &[0, 1, 1, 1]).unwrap();
        acc.push(1, &[2, 3], &[2, 3]).unwrap();
        let rows = acc.rows().unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].scores.acc, 0.75);
        assert_eq!(rows[1].scores.acc, 1.0);
        assert_eq!(rows[2].level, "overall");
        assert_eq!(rows[2].scores.acc, 0.875);
        assert_eq!(rows[2].scores.support, 6);
        let json = serde_json::to_value(&rows[2]).unwrap();
        assert_eq!(json["level"], "overall");
        assert_eq!(json["support"], 6);
    }
}
