//! Two-sided Mann–Whitney U test.
//!
//! Ties receive midranks. When both samples have more than
//! [`EXACT_MAX_PER_SIDE`] values the p-value uses the normal approximation
//! with tie-corrected variance and a 0.5 continuity correction; otherwise the
//! null distribution of U is enumerated exactly over all rank assignments.
//! Very unbalanced designs beyond [`EXACT_MAX_TOTAL`] pooled values also fall
//! back to the normal approximation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub const EXACT_MAX_PER_SIDE: usize = 8;
pub const EXACT_MAX_TOTAL: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MannWhitneyResult {
    /// U statistic of the first sample.
    pub u: f64,
    pub p_value: f64,
    pub label: String,
    pub method: PValueMethod,
}

/// Significance stars: `***` p <= 0.001, `**` p <= 0.01, `*` p <= 0.05, else `ns`.
pub fn significance_label(p: f64) -> &'static str {
    if p <= 0.001 {
        "***"
    } else if p <= 0.01 {
        "**"
    } else if p <= 0.05 {
        "*"
    } else {
        "ns"
    }
}

/// 1-based midranks of `values`, plus the sizes of every tie group.
pub fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

/// Counts, for every achievable doubled rank sum, the subsets of size `k`
/// of `doubled_ranks` attaining it.
fn subset_sum_counts(doubled_ranks: &[usize], k: usize) -> Vec<f64> {
    let max_sum: usize = doubled_ranks.iter().sum();
    // table[j][s]: subsets of size j with sum s
    let mut table = vec![vec![0.0f64; max_sum + 1]; k + 1];
    table[0][0] = 1.0;
    for (seen, &r) in doubled_ranks.iter().enumerate() {
        for j in (1..=k.min(seen + 1)).rev() {
            let (lower, upper) = table.split_at_mut(j);
            let (prev, cur) = (&lower[j - 1], &mut upper[0]);
            for s in (r..=max_sum).rev() {
                if prev[s - r] != 0.0 {
                    cur[s] += prev[s - r];
                }
            }
        }
    }
    table.swap_remove(k)
}

fn exact_p(ranks: &[f64], n_a: usize, u_a: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let counts = subset_sum_counts(&doubled, n_a);
    let total: f64 = counts.iter().sum();
    // doubled U = doubled rank sum - n_a (n_a + 1)
    let offset = n_a * (n_a + 1);
    let observed = (2.0 * u_a).round() as usize;
    let (mut le, mut ge) = (0.0, 0.0);
    for (s, &c) in counts.iter().enumerate() {
        if c == 0.0 || s < offset {
            continue;
        }
        let u2 = s - offset;
        if u2 <= observed {
            le += c;
        }
        if u2 >= observed {
            ge += c;
        }
    }
    (2.0 * le.min(ge) / total).min(1.0)
}

fn normal_p(n_a: usize, n_b: usize, ties: &[usize], u_a: f64) -> f64 {
    let (na, nb) = (n_a as f64, n_b as f64);
    let n = na + nb;
    let mean = na * nb / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term);
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((u_a - mean).abs() - 0.5) / var.sqrt();
    let normal = Normal::standard();
    (2.0 * normal.sf(z)).min(1.0)
}

pub fn mann_whitney_u(sample_a: &[f64], sample_b: &[f64]) -> Result<MannWhitneyResult> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::Statistics("Mann-Whitney U needs two non-empty samples".into()));
    }
    if sample_a.iter().chain(sample_b).any(|v| v.is_nan()) {
        return Err(Error::Statistics("samples contain NaN".into()));
    }
    let (n_a, n_b) = (sample_a.len(), sample_b.len());
    let pooled: Vec<f64> = sample_a.iter().chain(sample_b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..n_a].iter().sum();
    let u_a = rank_sum_a - (n_a * (n_a + 1)) as f64 / 2.0;
    let use_normal = (n_a > EXACT_MAX_PER_SIDE && n_b > EXACT_MAX_PER_SIDE) || n_a + n_b > EXACT_MAX_TOTAL;
    let (p_value, method) = if use_normal {
        (normal_p(n_a, n_b, &ties, u_a), PValueMethod::NormalApprox)
    } else if n_a <= n_b {
        (exact_p(&ranks, n_a, u_a), PValueMethod::Exact)
    } else {
        // enumerate over the smaller sample; the two-sided p is symmetric
        let mut swapped = ranks[n_a..].to_vec();
        swapped.extend_from_slice(&ranks[..n_a]);
        let u_b = (n_a * n_b) as f64 - u_a;
        (exact_p(&swapped, n_b, u_b), PValueMethod::Exact)
    };
    Ok(MannWhitneyResult {
        u: u_a,
        p_value,
        label: significance_label(p_value).to_string(),
        method,
    })
}
