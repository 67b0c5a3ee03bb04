//! Convergence and confidence diagnostics over α matrices.

use serde::{Deserialize, Serialize};

use crate::error::{DplError, Result};
use crate::supprompt::{argmax_first, beta_from_alpha, AlphaMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceConfig {
    /// Minimum softmax gap between a row's maximum and another entry for
    /// the pair to count as dominant.
    pub delta: f64,
    /// Relative margin under which the top two raw logits count as tied.
    pub epsilon: f64,
}

impl Default for DominanceConfig {
    fn default() -> Self {
        DominanceConfig {
            delta: 0.3,
            epsilon: 0.05,
        }
    }
}

impl DominanceConfig {
    pub fn new(delta: f64, epsilon: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(DplError::contract(format!("delta must lie in (0, 1), got {delta}")));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(DplError::contract(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(DominanceConfig { delta, epsilon })
    }
}

/// Sum over rows of `|beta_ij - beta_ik|` with `k` the row argmax.
pub fn alpha_difference(alpha: &AlphaMatrix) -> f64 {
    let beta = beta_from_alpha(alpha);
    let mut total = 0.0;
    for l in 0..beta.rows() {
        let row = beta.row(l);
        let top = row[argmax_first(row)];
        total += row.iter().map(|b| (b - top).abs()).sum::<f64>();
    }
    total
}

/// Number of `(max, other)` pairs whose softmax gap is at least `delta`.
pub fn num_dominants(alpha: &AlphaMatrix, cfg: &DominanceConfig) -> usize {
    let beta = beta_from_alpha(alpha);
    (0..beta.rows())
        .map(|l| {
            let row = beta.row(l);
            let k = argmax_first(row);
            row.iter()
                .enumerate()
                .filter(|&(j, &b)| j != k && row[k] - b >= cfg.delta)
                .count()
        })
        .sum()
}

/// Every row contributes all of its `t - 1` dominant pairs.
pub fn is_single_dominant(alpha: &AlphaMatrix, cfg: &DominanceConfig) -> bool {
    num_dominants(alpha, cfg) == alpha.depth() * alpha.options().saturating_sub(1)
}

/// Rows whose two largest raw logits are closer than
/// `epsilon * max(|top1|, |top2|, 1)`.
pub fn fragile_rows(alpha: &AlphaMatrix, epsilon: f64) -> Vec<usize> {
    (0..alpha.depth())
        .filter(|&l| {
            let row = alpha.row(l);
            if row.len() < 2 {
                return false;
            }
            let mut sorted = row.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let (a, b) = (sorted[0], sorted[1]);
            a - b < epsilon * a.abs().max(b.abs()).max(1.0)
        })
        .collect()
}
