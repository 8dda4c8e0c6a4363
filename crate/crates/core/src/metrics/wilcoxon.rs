use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::{Error, Result};

/// Largest number of non-zero differences for which the null distribution
/// is enumerated exactly.
pub const EXACT_MAX_N: usize = 20;
pub const MIN_N: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
    /// Every difference was zero.
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Sum of the ranks of positive differences `a − b`.
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub method: WilcoxonMethod,
}

/// Paired two-sided Wilcoxon signed-rank test on `a − b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "wilcoxon input".into(),
        });
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&d| d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(Wilcoxon {
            statistic: 0.0,
            p_value: 1.0,
            n: 0,
            method: WilcoxonMethod::Degenerate,
        });
    }
    if n < MIN_N {
        return Err(Error::Invalid(format!(
            "{n} non-zero differences; at least {MIN_N} are needed"
        )));
    }
    let (ranks2, ties) = doubled_ranks(&diffs);
    let w2: usize = diffs
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r)| r)
        .sum();
    let statistic = w2 as f64 / 2.0;
    if n <= EXACT_MAX_N {
        return Ok(Wilcoxon {
            statistic,
            p_value: exact_p(&ranks2, w2),
            n,
            method: WilcoxonMethod::Exact,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let dev = ((statistic - mean).abs() - 0.5).max(0.0);
    let z = dev / var.sqrt();
    let p_value = erfc(z / std::f64::consts::SQRT_2).min(1.0);
    Ok(Wilcoxon {
        statistic,
        p_value,
        n,
        method: WilcoxonMethod::Normal,
    })
}

/// Twice the average ranks of `|d|` (so ties stay integral), and the size
/// of every tie group.
fn doubled_ranks(diffs: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks = vec![0; diffs.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && diffs[order[end]].abs() == diffs[order[start]].abs() {
            end += 1;
        }
        // ranks start+1..=end average to (start + 1 + end)/2
        for &i in &order[start..end] {
            ranks[i] = start + 1 + end;
        }
        ties.push(end - start);
        start = end;
    }
    (ranks, ties)
}

/// Two-sided exact p-value: the null puts each sign at ½ independently.
fn exact_p(ranks2: &[usize], w2: usize) -> f64 {
    let total: usize = ranks2.iter().sum();
    // counts[s] = number of sign assignments whose positive ranks sum to s
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in ranks2 {
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let lower: u64 = counts[..=w2].iter().sum();
    let upper: u64 = counts[w2..].iter().sum();
    two_sided(lower, upper, ranks2.len())
}

/// `min(1, 2·min(P(W ≤ w), P(W ≥ w)))` from tail counts out of `2^n`.
pub(crate) fn two_sided(lower: u64, upper: u64, n: usize) -> f64 {
    let tail = lower.min(upper) as f64 / (1u64 << n) as f64;
    (2.0 * tail).min(1.0)
}
