//! Pairing of recovered points with ground-truth samples.

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::network::LabeledDataset;
use crate::numkernels::Vector;
use crate::objective::CandidateSet;
use crate::tensor::Component;

/// Largest side for which the assignment is solved exactly.
pub const EXACT_LIMIT: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub recovered: usize,
    pub truth: usize,
    /// `min(||x_hat - x||, ||x_hat + x||)`.
    pub l2: f64,
    /// `|cos(x_hat, x)|`.
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    /// Sorted by truth index.
    pub pairs: Vec<MatchPair>,
    /// False when the greedy fallback was used.
    pub exact: bool,
    pub mean_l2: f64,
    pub median_l2: f64,
    pub mean_cosine: f64,
    pub threshold: f64,
    /// Fraction of truth samples whose match has cosine at least `threshold`.
    pub frac_above: f64,
    pub unmatched_truth: Vec<usize>,
}

pub fn sign_invariant_l2(a: &Vector, b: &Vector) -> f64 {
    (a - b).norm().min((a + b).norm())
}

pub fn abs_cosine(a: &Vector, b: &Vector) -> f64 {
    let den = a.norm() * b.norm();
    if den == 0.0 {
        0.0
    } else {
        (a.dot(b) / den).abs()
    }
}

pub fn component_points(components: &[Component]) -> Vec<Vector> {
    components.iter().map(|c| c.direction.clone()).collect()
}

pub fn candidate_points(set: &CandidateSet) -> Vec<Vector> {
    set.candidates.iter().map(|c| c.x.clone()).collect()
}

/// Minimum-cost matching of every item on the smaller side; `cost[i][j]` pairs
/// row item `i` with column item `j`. Returns `(i, j)` pairs.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows < cols {
        let t: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| cost[i][j]).collect()).collect();
        return min_cost_assignment(&t).into_iter().map(|(j, i)| (i, j)).collect();
    }
    // rows >= cols: every column is matched; DP over subsets of columns while
    // scanning rows, each row either skipped or taking a free column.
    let full = (1usize << cols) - 1;
    let width = 1usize << cols;
    let mut dp = vec![f64::INFINITY; width];
    dp[0] = 0.0;
    // choice[i * width + mask] = column taken by row i to reach mask, or u8::MAX
    let mut choice = vec![u8::MAX; rows * width];
    for i in 0..rows {
        let mut next = dp.clone();
        for mask in 0..width {
            if !dp[mask].is_finite() {
                continue;
            }
            for (j, &c) in cost[i].iter().enumerate() {
                if mask & (1 << j) != 0 {
                    continue;
                }
                let to = mask | (1 << j);
                let v = dp[mask] + c;
                if v < next[to] {
                    next[to] = v;
                    choice[i * width + to] = j as u8;
                }
            }
        }
        dp = next;
    }
    let mut pairs = Vec::with_capacity(cols);
    let mut mask = full;
    for i in (0..rows).rev() {
        let j = choice[i * width + mask];
        if j != u8::MAX {
            pairs.push((i, j as usize));
            mask &= !(1 << j);
        }
    }
    pairs.reverse();
    pairs
}

fn greedy_assignment(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let mut all: Vec<(f64, usize, usize)> = cost
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, &c)| (c, i, j)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    let (mut used_r, mut used_c) = (vec![false; rows], vec![false; cols]);
    let mut pairs = Vec::new();
    for (_, i, j) in all {
        if !used_r[i] && !used_c[j] {
            used_r[i] = true;
            used_c[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

/// Assignment minimizing the total sign-invariant distance; exact when
/// `min(k, n) <= 12`, greedy otherwise.
pub fn match_components(recovered: &[Vector], truth: &LabeledDataset, threshold: f64) -> Result<MatchReport, HarnessError> {
    if let Some(bad) = recovered.iter().find(|x| x.len() != truth.dim()) {
        return Err(HarnessError::config("recovered", format!("dimension {} != {}", bad.len(), truth.dim())));
    }
    let xs: Vec<Vector> = (0..truth.len()).map(|i| truth.sample(i)).collect();
    let cost: Vec<Vec<f64>> = recovered.iter().map(|r| xs.iter().map(|x| sign_invariant_l2(r, x)).collect()).collect();
    let exact = recovered.len().min(xs.len()) <= EXACT_LIMIT;
    let assignment = if exact { min_cost_assignment(&cost) } else { greedy_assignment(&cost) };
    let mut pairs: Vec<MatchPair> = assignment
        .into_iter()
        .map(|(i, j)| MatchPair {
            recovered: i,
            truth: j,
            l2: cost[i][j],
            cosine: abs_cosine(&recovered[i], &xs[j]),
        })
        .collect();
    pairs.sort_by_key(|p| p.truth);
    let unmatched_truth = (0..xs.len()).filter(|j| !pairs.iter().any(|p| p.truth == *j)).collect();
    let k = pairs.len().max(1) as f64;
    let mut l2s: Vec<f64> = pairs.iter().map(|p| p.l2).collect();
    l2s.sort_by(f64::total_cmp);
    let median_l2 = match l2s.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => l2s[n / 2],
        n => 0.5 * (l2s[n / 2 - 1] + l2s[n / 2]),
    };
    Ok(MatchReport {
        mean_l2: if pairs.is_empty() { f64::NAN } else { l2s.iter().sum::<f64>() / k },
        median_l2,
        mean_cosine: if pairs.is_empty() { f64::NAN } else { pairs.iter().map(|p| p.cosine).sum::<f64>() / k },
        threshold,
        frac_above: pairs.iter().filter(|p| p.cosine >= threshold).count() as f64 / xs.len() as f64,
        pairs,
        exact,
        unmatched_truth,
    })
}
