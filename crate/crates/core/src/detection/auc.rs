use crate::error::{Error, Result};

/// Probability that a random positive outscores a random negative, ties
/// counting one half, computed from midranks of the pooled scores.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Empty("auc needs positive and negative scores".into()));
    }
    if pos.iter().chain(neg).any(|v| v.is_nan()) {
        return Err(Error::invalid("auc scores must not be NaN"));
    }
    let mut pooled: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum keeps midranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        let npos = pooled[i..=j].iter().filter(|p| p.1).count() as u128;
        twice_rank_sum += twice_mid * npos;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as u128, neg.len() as u128);
    // U = R − np(np+1)/2, so 2U = 2R − np(np+1).
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / (2 * np * nn) as f64)
}
