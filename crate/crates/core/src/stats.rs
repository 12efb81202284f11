//! Paired two-sided tests on per-seed metric values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, FossilError, Result};
use crate::metrics::average_ranks;
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub p: f64,
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    /// Every difference was zero; `p` is reported as 1.
    pub all_zero: bool,
}

fn differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    ensure_len("paired sample", a.len(), b.len())?;
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(FossilError::NonFinite("paired sample"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// Exact signed-rank test on `a - b`. Zero differences are dropped and tied
/// magnitudes share average ranks; the null distribution of the positive rank
/// sum is counted over doubled (integer) ranks.
pub fn wilcoxon_exact(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    let d: Vec<f64> = differences(a, b)?.into_iter().filter(|&x| x != 0.0).collect();
    if d.is_empty() {
        return Ok(WilcoxonResult { p: 1.0, w_plus: 0.0, n: 0, all_zero: true });
    }
    let magnitudes: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let doubled: Vec<usize> = average_ranks(&magnitudes).iter().map(|r| (2.0 * r).round() as usize).collect();
    let observed: usize = doubled.iter().zip(&d).filter(|(_, &x)| x > 0.0).map(|(r, _)| r).sum();

    let total: usize = doubled.iter().sum();
    // counts[s] = number of sign patterns with doubled positive rank sum s
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let patterns = 2f64.powi(d.len() as i32);
    let lower: f64 = counts[..=observed].iter().sum::<f64>() / patterns;
    let upper: f64 = counts[observed..].iter().sum::<f64>() / patterns;
    Ok(WilcoxonResult {
        p: (2.0 * lower.min(upper)).min(1.0),
        w_plus: observed as f64 / 2.0,
        n: d.len(),
        all_zero: false,
    })
}

fn at_least(stat: f64, observed: f64) -> bool {
    stat.abs() >= observed.abs() * (1.0 - 1e-12)
}

/// Sign-flip Monte-Carlo test on the mean difference with add-one smoothing.
/// Shuffle `s` draws from a generator seeded by `(seed, s)`, so the result
/// does not depend on evaluation order.
pub fn permutation_test(a: &[f64], b: &[f64], n_shuffles: usize, seed: u64) -> Result<f64> {
    let d = differences(a, b)?;
    if d.is_empty() {
        return Err(FossilError::InvalidInput("permutation test needs at least one pair".into()));
    }
    if d.iter().all(|&x| x == 0.0) {
        return Ok(1.0);
    }
    let n = d.len() as f64;
    let observed = d.iter().sum::<f64>() / n;
    let hits: usize = (0..n_shuffles)
        .into_par_iter()
        .filter(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[s as u64]));
            let stat = d.iter().map(|&x| if rng.gen::<bool>() { x } else { -x }).sum::<f64>() / n;
            at_least(stat, observed)
        })
        .count();
    Ok((1 + hits) as f64 / (1 + n_shuffles) as f64)
}

/// Exact sign-flip p-value over all `2^n` patterns (`n <= 25`).
pub fn permutation_exact(a: &[f64], b: &[f64]) -> Result<f64> {
    let d = differences(a, b)?;
    if d.is_empty() || d.len() > 25 {
        return Err(FossilError::InvalidInput("exact enumeration needs 1 to 25 pairs".into()));
    }
    if d.iter().all(|&x| x == 0.0) {
        return Ok(1.0);
    }
    let n = d.len() as f64;
    let observed = d.iter().sum::<f64>() / n;
    let patterns = 1usize << d.len();
    let hits = (0..patterns)
        .filter(|&mask| {
            let stat = d
                .iter()
                .enumerate()
                .map(|(i, &x)| if mask >> i & 1 == 1 { x } else { -x })
                .sum::<f64>()
                / n;
            at_least(stat, observed)
        })
        .count();
    Ok(hits as f64 / patterns as f64)
}
