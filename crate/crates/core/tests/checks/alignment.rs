//! Dynamic-programming alignment against exhaustive enumeration.

use cpcseg::objective::{acpc_align, is_valid_alignment, CostMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MATRICES: usize = 1000;

/// Every monotonic surjective assignment of `m` targets to `k` predictions:
/// choose which `k − 1` of the `m − 1` steps advance.
fn all_alignments(k: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for mask in 0u32..1 << (m - 1) {
        if mask.count_ones() as usize != k - 1 {
            continue;
        }
        let mut a = vec![0; m];
        for j in 1..m {
            a[j] = a[j - 1] + (mask >> (j - 1) & 1) as usize;
        }
        out.push(a);
    }
    out
}

fn binomial(n: usize, r: usize) -> usize {
    (0..r).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Summed in target order, the same order the program accumulates in.
fn cost_of(c: &CostMatrix, a: &[usize]) -> f64 {
    a.iter().enumerate().fold(0.0, |s, (j, &k)| s + c.at(k, j))
}

/// Number of matrices checked, or the first disagreement.
pub fn run() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    for k in 1..=3 {
        for m in k..=7 {
            let paths = all_alignments(k, m);
            if paths.len() != binomial(m - 1, k - 1) || !paths.iter().all(|a| is_valid_alignment(a, k)) {
                return Err(format!("K={k} M={m}: enumeration is wrong"));
            }
            for i in 0..MATRICES {
                // a quarter of the matrices use small integers so ties occur
                let entries: Vec<f64> = if i % 4 == 0 {
                    (0..k * m).map(|_| rng.random_range(0..4) as f64).collect()
                } else {
                    (0..k * m).map(|_| rng.random_range(0.0..10.0)).collect()
                };
                let c = CostMatrix::new(k, m, entries).unwrap();
                let best = paths.iter().map(|a| cost_of(&c, a)).fold(f64::INFINITY, f64::min);
                let dp = acpc_align(&c);
                if !is_valid_alignment(&dp.assign, k)
                    || dp.total.to_bits() != best.to_bits()
                    || cost_of(&c, &dp.assign).to_bits() != dp.total.to_bits()
                {
                    return Err(format!("K={k} M={m} matrix {i}: program {} vs search {best}", dp.total));
                }
                checked += 1;
            }
        }
    }
    Ok(checked)
}
