//! Regression and ranking metrics for node importance estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub nrmse: f64,
    pub spearman: f64,
    pub precision_at_k: f64,
    pub ndcg_at_k: f64,
    pub k: usize,
}

impl MetricsReport {
    /// All metrics at `min(k, len)`.
    pub fn compute(pred: &[f64], truth: &[f64], k: usize) -> Result<Self> {
        let (mae, rmse, nrmse) = regression_metrics(pred, truth)?;
        let k = k.min(pred.len());
        Ok(MetricsReport {
            mae,
            rmse,
            nrmse,
            spearman: spearman(pred, truth)?,
            precision_at_k: precision_at_k(pred, truth, k)?,
            ndcg_at_k: ndcg_at_k(pred, truth, k)?,
            k,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidArgument(format!("metrics json: {e}")))
    }
}

fn check_aligned(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "prediction/truth lengths {} and {} must be equal and non-zero",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// `(MAE, RMSE, NRMSE)` with NRMSE normalized by the range of `truth`.
pub fn regression_metrics(pred: &[f64], truth: &[f64]) -> Result<(f64, f64, f64)> {
    check_aligned(pred, truth)?;
    let n = pred.len() as f64;
    let mae = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let rmse = (pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n).sqrt();
    let lo = truth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range <= 0.0 {
        return Err(Error::InvalidArgument(
            "NRMSE undefined for a constant truth vector".into(),
        ));
    }
    Ok((mae, rmse, rmse / range))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn spearman(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_aligned(pred, truth)?;
    if pred.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs at least 2 points".into()));
    }
    pearson(&average_ranks(pred), &average_ranks(truth))
        .ok_or_else(|| Error::InvalidArgument("spearman undefined: zero rank variance".into()))
}

/// Indices of the `k` largest values; ties broken by ascending index.
pub fn top_k(v: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

fn check_k(len: usize, k: usize) -> Result<()> {
    if k == 0 || k > len {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={len}"
        )));
    }
    Ok(())
}

pub fn precision_at_k(pred: &[f64], truth: &[f64], k: usize) -> Result<f64> {
    check_aligned(pred, truth)?;
    check_k(pred.len(), k)?;
    let tp = top_k(truth, k);
    let hits = top_k(pred, k).iter().filter(|i| tp.contains(i)).count();
    Ok(hits as f64 / k as f64)
}

/// NDCG with raw truth values as gains and `1/log2(rank + 1)` discounts.
/// Returns 0 when the ideal DCG is 0.
pub fn ndcg_at_k(pred: &[f64], truth: &[f64], k: usize) -> Result<f64> {
    check_aligned(pred, truth)?;
    check_k(pred.len(), k)?;
    let dcg = |order: &[usize]| -> f64 {
        order
            .iter()
            .enumerate()
            .map(|(r, &i)| truth[i] / ((r + 2) as f64).log2())
            .sum()
    };
    let ideal = dcg(&top_k(truth, k));
    if ideal == 0.0 {
        return Ok(0.0);
    }
    Ok(dcg(&top_k(pred, k)) / ideal)
}
