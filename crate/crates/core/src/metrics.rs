//! Classification metrics and multi-seed aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLASS_COUNT: usize = 3;

fn check(pred: &[usize], gold: &[usize]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::argument(format!(
            "prediction/gold length mismatch: {} vs {}",
            pred.len(),
            gold.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::argument("empty label lists"));
    }
    if let Some(l) = pred.iter().chain(gold).find(|&&l| l >= CLASS_COUNT) {
        return Err(Error::Label(format!("label {l} out of range")));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check(pred, gold)?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// `confusion[gold][pred]` counts.
pub fn confusion(pred: &[usize], gold: &[usize]) -> Result<[[usize; CLASS_COUNT]; CLASS_COUNT]> {
    check(pred, gold)?;
    let mut m = [[0; CLASS_COUNT]; CLASS_COUNT];
    for (&p, &g) in pred.iter().zip(gold) {
        m[g][p] += 1;
    }
    Ok(m)
}

/// Unweighted mean of per-class F1; a class with no gold and no predicted
/// instances scores 0.
pub fn macro_f1(pred: &[usize], gold: &[usize]) -> Result<f64> {
    let m = confusion(pred, gold)?;
    let f1 = (0..CLASS_COUNT).map(|c| {
        let tp = m[c][c] as f64;
        let fp = (0..CLASS_COUNT).filter(|&g| g != c).map(|g| m[g][c]).sum::<usize>() as f64;
        let fn_ = (0..CLASS_COUNT).filter(|&p| p != c).map(|p| m[c][p]).sum::<usize>() as f64;
        let denom = 2.0 * tp + fp + fn_;
        if denom == 0.0 {
            0.0
        } else {
            2.0 * tp / denom
        }
    });
    Ok(f1.sum::<f64>() / CLASS_COUNT as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedMetrics>,
    pub mean_accuracy: f64,
    pub mean_macro_f1: f64,
}

impl SeedReport {
    pub fn from_runs(per_seed: Vec<SeedMetrics>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::argument("no seed runs to aggregate"));
        }
        let n = per_seed.len() as f64;
        Ok(Self {
            seeds: per_seed.iter().map(|m| m.seed).collect(),
            mean_accuracy: per_seed.iter().map(|m| m.accuracy).sum::<f64>() / n,
            mean_macro_f1: per_seed.iter().map(|m| m.macro_f1).sum::<f64>() / n,
            per_seed,
        })
    }
}
