//! Boundary scoring, offset sweeps, linear probing and ABX discrimination.

mod abx;
mod probe;

pub use abx::{abx_error, abx_triples, dtw_distance, AbxItem, AbxMode, AbxResult};
pub use probe::{linear_probe, ProbeConfig, ProbeResult};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boundary::{apply_offset, Segmentation};
use crate::error::{Error, Result};

/// Evaluation tolerance in milliseconds.
pub const TOLERANCE_MS: i64 = 20;

/// Largest one-to-one matching with `|ref − pred| ≤ tolerance`.
///
/// A greedy sweep over both sorted lists is optimal here: every interval
/// has the same width, so matching the earliest unmatched pair never blocks
/// a better assignment.
pub fn match_boundaries(reference: &[i64], predicted: &[i64], tolerance: i64) -> Result<usize> {
    Ok(match_pairs(reference, predicted, tolerance)?.len())
}

/// The matched `(reference, predicted)` index pairs behind
/// [`match_boundaries`].
pub fn match_pairs(
    reference: &[i64],
    predicted: &[i64],
    tolerance: i64,
) -> Result<Vec<(usize, usize)>> {
    for (name, v) in [("reference", reference), ("predicted", predicted)] {
        if v.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument(format!("{name} boundaries are not sorted")));
        }
    }
    let (mut i, mut j, mut hits) = (0, 0, Vec::new());
    while i < reference.len() && j < predicted.len() {
        let (r, p) = (reference[i], predicted[j]);
        if (r - p).abs() <= tolerance {
            hits.push((i, j));
            i += 1;
            j += 1;
        } else if p < r {
            j += 1;
        } else {
            i += 1;
        }
    }
    Ok(hits)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n_ref: usize,
    pub n_pred: usize,
    pub n_hit: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.n_ref += o.n_ref;
        self.n_pred += o.n_pred;
        self.n_hit += o.n_hit;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub r_value: f64,
}

/// Precision, recall, F1 and the over-segmentation robust R-value.
pub fn boundary_scores(c: Counts) -> Scores {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(c.n_hit, c.n_pred);
    let recall = ratio(c.n_hit, c.n_ref);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let os = if precision == 0.0 { 0.0 } else { recall / precision - 1.0 };
    let r1 = ((1.0 - recall).powi(2) + os * os).sqrt();
    let r2 = (-os + recall - 1.0) / std::f64::consts::SQRT_2;
    Scores {
        precision,
        recall,
        f1,
        r_value: 1.0 - (r1.abs() + r2.abs()) / 2.0,
    }
}

/// Reference boundaries and predictions for one utterance, both in
/// utterance time.
#[derive(Clone, Debug)]
pub struct UtteranceBoundaries {
    pub reference_ms: Vec<i64>,
    pub predicted: Segmentation,
}

impl UtteranceBoundaries {
    /// References inside the evaluated span `(0, duration)`.
    fn scored_reference(&self) -> impl Iterator<Item = i64> + '_ {
        let end = self.predicted.duration_ms();
        self.reference_ms.iter().copied().filter(move |&r| r > 0 && r < end)
    }

    pub fn excluded_reference(&self) -> usize {
        self.reference_ms.len() - self.scored_reference().count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetScores {
    pub offset_ms: i64,
    /// Scores computed per utterance, then averaged.
    pub mean: Scores,
    /// Scores from corpus-wide summed counts.
    pub pooled: Scores,
    pub counts: Counts,
    /// Mean `|ref − pred|` over matched pairs, in ms.
    pub mean_abs_error_ms: f64,
}

/// Scores of all utterances with predictions shifted by `offset_ms`.
pub fn evaluate(
    utterances: &[UtteranceBoundaries],
    offset_ms: i64,
    tolerance_ms: i64,
) -> Result<OffsetScores> {
    if utterances.is_empty() {
        return Err(Error::Data("no utterances to evaluate".into()));
    }
    let mut total = Counts::default();
    let mut sum = Scores::default();
    let mut abs_error = 0;
    for u in utterances {
        let pred = apply_offset(&u.predicted, offset_ms, false)?.ms();
        let reference: Vec<i64> = u.scored_reference().collect();
        let pairs = match_pairs(&reference, &pred, tolerance_ms)?;
        abs_error += pairs.iter().map(|&(i, j)| (reference[i] - pred[j]).abs()).sum::<i64>();
        let c = Counts {
            n_ref: reference.len(),
            n_pred: pred.len(),
            n_hit: pairs.len(),
        };
        let s = boundary_scores(c);
        sum.precision += s.precision;
        sum.recall += s.recall;
        sum.f1 += s.f1;
        sum.r_value += s.r_value;
        total += c;
    }
    let n = utterances.len() as f64;
    Ok(OffsetScores {
        offset_ms,
        mean: Scores {
            precision: sum.precision / n,
            recall: sum.recall / n,
            f1: sum.f1 / n,
            r_value: sum.r_value / n,
        },
        pooled: boundary_scores(total),
        counts: total,
        mean_abs_error_ms: if total.n_hit == 0 {
            0.0
        } else {
            abs_error as f64 / total.n_hit as f64
        },
    })
}

/// Offsets `−50..=50` ms in 10 ms steps.
pub fn default_offsets() -> Vec<i64> {
    (-5..=5).map(|k| k * 10).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub rows: Vec<OffsetScores>,
    /// Offset with the highest mean R-value. Within the tolerance several
    /// offsets can score alike; ties go to the smaller matching error, then
    /// to the earlier offset.
    pub best_offset_ms: i64,
}

pub fn offset_sweep(
    utterances: &[UtteranceBoundaries],
    offsets: &[i64],
    tolerance_ms: i64,
) -> Result<Sweep> {
    if offsets.is_empty() {
        return Err(Error::InvalidArgument("no offsets to sweep".into()));
    }
    let rows = offsets
        .iter()
        .map(|&o| evaluate(utterances, o, tolerance_ms))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        let b = &rows[best];
        let better = r.mean.r_value > b.mean.r_value
            || (r.mean.r_value == b.mean.r_value && r.mean_abs_error_ms < b.mean_abs_error_ms);
        if better {
            best = i;
        }
    }
    Ok(Sweep {
        best_offset_ms: rows[best].offset_ms,
        rows,
    })
}

/// Per-offset curve as CSV with a header row.
pub fn sweep_csv(rows: &[OffsetScores]) -> String {
    let mut out = String::from("offset_ms,precision,recall,f1,r_value\n");
    for r in rows {
        let s = r.mean;
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.offset_ms, s.precision, s.recall, s.f1, s.r_value
        );
    }
    out
}

/// Everything an evaluation run reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub offsets: Vec<OffsetScores>,
    pub best_offset_ms: Option<i64>,
    pub probe_accuracy: Option<f64>,
    pub abx_within: Option<f64>,
    pub abx_across: Option<f64>,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Diagnostics such as reference boundaries excluded by chunking.
    pub notes: std::collections::BTreeMap<String, serde_json::Value>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}
