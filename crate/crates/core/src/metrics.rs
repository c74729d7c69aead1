//! Classification metrics, predictive entropy, OOD AUC and the
//! aleatoric/epistemic split of a Bernoulli predictive variance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const ECE_BINS: usize = 10;
const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nll: f64,
    pub accuracy: f64,
    pub ece: f64,
    pub count: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub entropies: Vec<f64>,
}

/// Metrics for an N × C probability matrix against integer labels. Accuracy
/// takes the first maximal class; ECE uses 10 equal-width confidence bins,
/// right-open except the last.
pub fn evaluate(probs: &DMatrix<f64>, labels: &[usize]) -> Result<EvalReport> {
    let n = probs.nrows();
    if n == 0 || n != labels.len() {
        return invalid(format!("{n} probability rows for {} labels", labels.len()));
    }
    let mut bins = [(0usize, 0.0f64, 0.0f64); ECE_BINS];
    let (mut nll, mut correct) = (0.0, 0usize);
    let mut entropies = Vec::with_capacity(n);
    for (i, row) in probs.row_iter().enumerate() {
        let p: Vec<f64> = row.iter().copied().collect();
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL || p.iter().any(|v| !(*v >= 0.0)) {
            return invalid(format!("probability row {i} is not normalized (sum {sum})"));
        }
        let y = labels[i];
        if y >= p.len() {
            return invalid(format!("label {y} out of range for {} classes", p.len()));
        }
        nll -= p[y].ln();
        let (arg, conf) = p.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
        let hit = arg == y;
        correct += usize::from(hit);
        let b = ((conf * ECE_BINS as f64) as usize).min(ECE_BINS - 1);
        bins[b].0 += 1;
        bins[b].1 += f64::from(u8::from(hit));
        bins[b].2 += conf;
        entropies.push(entropy(&p));
    }
    let ece = bins
        .iter()
        .filter(|b| b.0 > 0)
        .map(|&(count, hits, conf)| (count as f64 / n as f64) * (hits / count as f64 - conf / count as f64).abs())
        .sum();
    Ok(EvalReport { nll: nll / n as f64, accuracy: correct as f64 / n as f64, ece, count: n, entropies })
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// P(OOD entropy > ID entropy) with ties counted one half.
pub fn ood_auc(id: &[f64], ood: &[f64]) -> Result<f64> {
    if id.is_empty() || ood.is_empty() {
        return invalid("AUC needs both in- and out-of-distribution scores");
    }
    let mut all: Vec<(f64, bool)> = id.iter().map(|&v| (v, false)).chain(ood.iter().map(|&v| (v, true))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // midranks over tied groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|e| e.1).count() as f64 * mid;
        i = j + 1;
    }
    let (n1, n0) = (ood.len() as f64, id.len() as f64);
    Ok((rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceSplit {
    pub aleatoric: f64,
    pub epistemic: f64,
    pub total: f64,
}

/// Splits p̄(1−p̄) into mean_s p_s(1−p_s) and the spread of the p_s.
pub fn variance_decomposition(p: &[f64]) -> Result<VarianceSplit> {
    if p.len() < 2 {
        return invalid("variance decomposition needs at least two samples");
    }
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return invalid("probabilities must lie in [0, 1]");
    }
    let s = p.len() as f64;
    let mean = p.iter().sum::<f64>() / s;
    let aleatoric = p.iter().map(|v| v * (1.0 - v)).sum::<f64>() / s;
    let epistemic = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s;
    Ok(VarianceSplit { aleatoric, epistemic, total: mean * (1.0 - mean) })
}

/// Counts of values in `bins` equal-width bins over [lo, hi]; values outside
/// are clamped to the edge bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for v in values {
        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
        counts[((t * bins as f64).max(0.0) as usize).min(bins - 1)] += 1;
    }
    counts
}
