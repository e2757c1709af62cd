use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Float, Tensor};
use crate::error::{Error, Result};

/// Dynamic time warping cost between two frame sequences, averaged over the
/// warping path.
///
/// Frames are compared by angular distance `arccos(cos) / π`; a zero vector
/// has cosine 0 with anything. Among equal-cost paths the shortest is kept,
/// which makes the distance exactly symmetric.
pub fn dtw_distance<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<f64> {
    let (n, m) = (a.rows(), b.rows());
    if a.rank() != 2 || b.rank() != 2 || n == 0 || m == 0 {
        return Err(Error::SequenceTooShort("dtw needs two nonempty sequences".into()));
    }
    if a.cols() != b.cols() {
        return Err(Error::shape("dtw", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let unit = |x: &Tensor<F>| -> Vec<Vec<f64>> {
        (0..x.rows())
            .map(|i| {
                let r: Vec<f64> = x.row(i).iter().map(|v| v.f64()).collect();
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    r
                } else {
                    r.iter().map(|v| v / norm).collect()
                }
            })
            .collect()
    };
    let (ua, ub) = (unit(a), unit(b));
    let dist = |i: usize, j: usize| {
        let cos: f64 = ua[i].iter().zip(&ub[j]).map(|(x, y)| x * y).sum();
        cos.clamp(-1.0, 1.0).acos() / std::f64::consts::PI
    };
    // (accumulated cost, path length)
    let mut acc = vec![(f64::INFINITY, 0usize); n * m];
    for i in 0..n {
        for j in 0..m {
            let here = dist(i, j);
            let prev = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut best = (f64::INFINITY, usize::MAX);
                for (pi, pj) in [(i.wrapping_sub(1), j.wrapping_sub(1)), (i.wrapping_sub(1), j), (i, j.wrapping_sub(1))] {
                    if pi < n && pj < m {
                        let c = acc[pi * m + pj];
                        if c.0 < best.0 || (c.0 == best.0 && c.1 < best.1) {
                            best = c;
                        }
                    }
                }
                best
            };
            acc[i * m + j] = (prev.0 + here, prev.1 + 1);
        }
    }
    let (cost, len) = acc[n * m - 1];
    Ok(cost / len as f64)
}

/// One discrimination token: a frame sequence with its category and speaker.
#[derive(Clone, Debug)]
pub struct AbxItem<F> {
    pub vectors: Tensor<F>,
    pub category: usize,
    pub speaker: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AbxMode {
    /// A, B and X share one speaker.
    Within,
    /// A and B share a speaker, X comes from another.
    Across,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbxResult {
    /// Mean over category pairs of the mean error within each pair.
    pub error: f64,
    pub triples: usize,
    pub category_pairs: usize,
}

/// Up to `count` random `(A, B, X)` index triples valid for `mode`.
pub fn abx_triples<F>(
    items: &[AbxItem<F>],
    mode: AbxMode,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize, usize)> {
    let mut by_key: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        by_key.entry((it.category, it.speaker)).or_default().push(i);
    }
    let mut out = Vec::with_capacity(count);
    let attempts = count.saturating_mul(20);
    for _ in 0..attempts {
        if out.len() == count || items.is_empty() {
            break;
        }
        let x = rng.random_range(0..items.len());
        let (cx, sx) = (items[x].category, items[x].speaker);
        let speakers: Vec<usize> = by_key
            .keys()
            .filter(|&&(c, s)| c == cx && (s == sx) == (mode == AbxMode::Within))
            .map(|&(_, s)| s)
            .collect();
        if speakers.is_empty() {
            continue;
        }
        let s = speakers[rng.random_range(0..speakers.len())];
        let pool: Vec<usize> = by_key[&(cx, s)].iter().copied().filter(|&a| a != x).collect();
        let others: Vec<&Vec<usize>> = by_key
            .iter()
            .filter(|(&(c, sp), _)| c != cx && sp == s)
            .map(|(_, v)| v)
            .collect();
        if pool.is_empty() || others.is_empty() {
            continue;
        }
        let a = pool[rng.random_range(0..pool.len())];
        let group = others[rng.random_range(0..others.len())];
        let b = group[rng.random_range(0..group.len())];
        out.push((a, b, x));
    }
    out
}

/// Fraction of triples where X is closer to B than to A (ties count half),
/// balanced over `(category A, category B)` pairs.
pub fn abx_error<F: Float>(
    items: &[AbxItem<F>],
    triples: &[(usize, usize, usize)],
    mode: AbxMode,
) -> Result<AbxResult> {
    if triples.is_empty() {
        return Err(Error::InvalidArgument("no ABX triples".into()));
    }
    let mut pairs: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for (n, &(a, b, x)) in triples.iter().enumerate() {
        let get = |i: usize| {
            items.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("triple {n} indexes item {i} of {}", items.len()))
            })
        };
        let (ia, ib, ix) = (get(a)?, get(b)?, get(x)?);
        if ia.category == ib.category || ia.category != ix.category {
            return Err(Error::InvalidArgument(format!(
                "triple {n} needs category(A) = category(X) != category(B)"
            )));
        }
        let same_speaker = ia.speaker == ix.speaker;
        if ia.speaker != ib.speaker || same_speaker != (mode == AbxMode::Within) {
            return Err(Error::InvalidArgument(format!(
                "triple {n} does not fit {mode:?} speaker constraints"
            )));
        }
        let (dax, dbx) = (dtw_distance(&ia.vectors, &ix.vectors)?, dtw_distance(&ib.vectors, &ix.vectors)?);
        let e = if dax > dbx {
            1.0
        } else if dax == dbx {
            0.5
        } else {
            0.0
        };
        let slot = pairs.entry((ia.category, ib.category)).or_insert((0.0, 0));
        slot.0 += e;
        slot.1 += 1;
    }
    let error = pairs.values().map(|&(s, c)| s / c as f64).sum::<f64>() / pairs.len() as f64;
    Ok(AbxResult {
        error,
        triples: triples.len(),
        category_pairs: pairs.len(),
    })
}
