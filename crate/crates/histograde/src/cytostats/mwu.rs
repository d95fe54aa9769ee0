//! One-sided Mann-Whitney U with exact small-sample p-values.
//!
//! U counts pairs where the "greater" sample exceeds the other, ties counted
//! half. For tie-free samples with n1*n2 <= 10,000 the p-value is exact: the
//! number of rank arrangements with U' >= U over C(n1+n2, n1), computed by
//! the standard counting recursion (integer arithmetic while the totals fit
//! in u128, probability-space otherwise). Larger or tied samples use the
//! normal approximation with tie-corrected variance and no continuity
//! correction.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::CytostatsError;
use crate::metrics::average_ranks;

pub const EXACT_PAIR_LIMIT: u64 = 10_000;
/// C(60, 30) still fits u128 with room; beyond that the exact branch counts
/// in probability space.
const INTEGER_DP_TOTAL_LIMIT: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MannWhitneyResult {
    pub u: f64,
    pub z: f64,
    pub p_one_sided: f64,
    pub r_rank_biserial: f64,
    pub ps: f64,
    pub n1: usize,
    pub n2: usize,
    pub method: Method,
}

/// PS = U / (n1 * n2): the chance a random draw from the higher-activity
/// group exceeds one from the lower group (ties counted half).
pub fn probability_of_superiority(u: f64, n1: usize, n2: usize) -> Result<f64, CytostatsError> {
    let max_u = (n1 * n2) as f64;
    if n1 == 0 || n2 == 0 {
        return Err(CytostatsError::Contract("empty sample".into()));
    }
    if !(0.0..=max_u).contains(&u) {
        return Err(CytostatsError::Contract(format!(
            "U = {u} outside [0, {max_u}]"
        )));
    }
    Ok(u / max_u)
}

/// Rank-biserial effect size r = 2 * PS - 1.
pub fn rank_biserial(u: f64, n1: usize, n2: usize) -> Result<f64, CytostatsError> {
    Ok(2.0 * probability_of_superiority(u, n1, n2)? - 1.0)
}

/// One-sided test of whether `x` (the hypothesized greater group) is
/// stochastically larger than `y`.
pub fn mann_whitney_one_sided(x: &[f64], y: &[f64]) -> Result<MannWhitneyResult, CytostatsError> {
    let n1 = x.len();
    let n2 = y.len();
    if n1 == 0 || n2 == 0 {
        return Err(CytostatsError::Contract(
            "both samples must be nonempty".into(),
        ));
    }

    // U from average ranks; identical to pair counting with half ties.
    let mut merged = Vec::with_capacity(n1 + n2);
    merged.extend_from_slice(x);
    merged.extend_from_slice(y);
    let ranks = average_ranks(&merged);
    let rank_sum_x: f64 = ranks[..n1].iter().sum();
    let u = rank_sum_x - (n1 * (n1 + 1)) as f64 / 2.0;

    // Tie structure for the variance correction and the exact-branch gate.
    let mut sorted = merged.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite counts"));
    let mut tie_term = 0.0;
    let mut has_ties = false;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        if t > 1.0 {
            has_ties = true;
            tie_term += t * t * t - t;
        }
        i = j + 1;
    }

    let n = (n1 + n2) as f64;
    let mean_u = (n1 * n2) as f64 / 2.0;
    let variance = (n1 * n2) as f64 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let sigma = variance.max(0.0).sqrt();
    let z = if sigma > 0.0 { (u - mean_u) / sigma } else { 0.0 };
    let normal_p = if sigma > 0.0 {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        1.0 - normal.cdf(z)
    } else {
        0.5
    };

    let exact_applicable = !has_ties && (n1 * n2) as u64 <= EXACT_PAIR_LIMIT;
    let (p_one_sided, method) = if exact_applicable {
        (exact_upper_tail_p(n1, n2, u.round() as u64), Method::Exact)
    } else {
        (normal_p, Method::NormalApprox)
    };

    let ps = probability_of_superiority(u, n1, n2)?;
    Ok(MannWhitneyResult {
        u,
        z,
        p_one_sided,
        r_rank_biserial: 2.0 * ps - 1.0,
        ps,
        n1,
        n2,
        method,
    })
}

/// Exact P(U' >= u) for tie-free samples: counting recursion
/// f(i, j, u) = f(i-1, j, u-j) + f(i, j-1, u) over arrangements of i x's and
/// j y's.
pub(crate) fn exact_upper_tail_p(n1: usize, n2: usize, u_obs: u64) -> f64 {
    if n1 + n2 <= INTEGER_DP_TOTAL_LIMIT {
        let counts = u_distribution_counts(n1, n2);
        let total: u128 = counts.iter().sum();
        let tail: u128 = counts[u_obs as usize..].iter().sum();
        tail as f64 / total as f64
    } else {
        let probs = u_distribution_probs(n1, n2);
        probs[u_obs as usize..].iter().sum()
    }
}

/// Number of arrangements with each U value, as exact integers.
fn u_distribution_counts(n1: usize, n2: usize) -> Vec<u128> {
    let max_u = n1 * n2;
    // table[j][u] = f(i, j, u), rolled over i.
    let mut table = vec![vec![0u128; max_u + 1]; n2 + 1];
    for row in table.iter_mut() {
        row[0] = 1; // f(0, j, 0) = 1
    }
    for _i in 1..=n1 {
        let prev = table.clone();
        for j in 0..=n2 {
            for u in 0..=max_u {
                // f(i, j, u) = f(i-1, j, u - j) + f(i, j - 1, u)
                let a = if u >= j { prev[j][u - j] } else { 0 };
                let b = if j > 0 { table[j - 1][u] } else { 0 };
                table[j][u] = a + b;
            }
        }
    }
    table[n2].clone()
}

/// Same recursion in probability space for large samples.
fn u_distribution_probs(n1: usize, n2: usize) -> Vec<f64> {
    let max_u = n1 * n2;
    let mut table = vec![vec![0.0f64; max_u + 1]; n2 + 1];
    for row in table.iter_mut() {
        row[0] = 1.0;
    }
    for i in 1..=n1 {
        let prev = table.clone();
        for j in 0..=n2 {
            // P(i, j, u) = i/(i+j) P(i-1, j, u-j) + j/(i+j) P(i, j-1, u)
            let pi = i as f64 / (i + j) as f64;
            let pj = j as f64 / (i + j) as f64;
            for u in 0..=max_u {
                let a = if u >= j { prev[j][u - j] } else { 0.0 };
                let b = if j > 0 { table[j - 1][u] } else { 0.0 };
                table[j][u] = pi * a + pj * b;
            }
        }
    }
    table[n2].clone()
}
