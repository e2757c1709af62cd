//! Cosine-dissimilarity boundary detection, segment pooling and offsets.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::{Float, Tensor};
use crate::error::{Error, Result};
use crate::model::{SegmentSequence, HOP_MS};

/// Prominence thresholds searched on the validation split.
pub const THRESHOLD_GRID: [f64; 6] = [0.02, 0.05, 0.1, 0.2, 0.3, 0.5];

/// Boundary scores between consecutive vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DissimilarityCurve {
    /// `scores[i] = −cos(v_i, v_{i+1})`, the evidence for a boundary before
    /// element `i + 1`.
    pub scores: Vec<f64>,
    /// Pairs involving a zero vector, scored 0.
    pub zero_vectors: usize,
}

pub fn dissimilarity_curve<F: Float>(vectors: &Tensor<F>) -> Result<DissimilarityCurve> {
    let t = vectors.rows();
    if vectors.rank() != 2 || t < 2 {
        return Err(Error::SequenceTooShort(format!(
            "dissimilarity needs at least 2 vectors, got shape {:?}",
            vectors.shape()
        )));
    }
    let norms: Vec<f64> = (0..t)
        .map(|i| vectors.row(i).iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt())
        .collect();
    let mut zero_vectors = 0;
    let scores = (1..t)
        .map(|i| {
            let (na, nb) = (norms[i - 1], norms[i]);
            if na == 0.0 || nb == 0.0 {
                zero_vectors += 1;
                return 0.0;
            }
            let dot: f64 = vectors
                .row(i - 1)
                .iter()
                .zip(vectors.row(i))
                .map(|(a, b)| a.f64() * b.f64())
                .sum();
            -(dot / (na * nb)).clamp(-1.0, 1.0)
        })
        .collect();
    Ok(DissimilarityCurve {
        scores,
        zero_vectors,
    })
}

/// Indices of peaks of `x` with prominence at least `prominence`, no two
/// closer than `min_separation`.
///
/// Candidates are strict local maxima; a plateau counts once, at its left
/// end, and the first and last samples are never peaks. Prominence is the
/// height above the higher of the lowest points on each side before a
/// strictly higher sample or the end of the curve. Among surviving
/// candidates closer than `min_separation`, the higher one wins, ties going
/// to the left.
pub fn find_peaks(x: &[f64], prominence: f64, min_separation: usize) -> Vec<usize> {
    let n = x.len();
    let mut candidates = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if x[i - 1] < x[i] {
            let mut j = i;
            while j + 1 < n && x[j + 1] == x[i] {
                j += 1;
            }
            if j + 1 < n && x[j + 1] < x[i] {
                candidates.push(i);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    candidates.retain(|&p| {
        let h = x[p];
        let left = x[..p].iter().rev().take_while(|&&v| v <= h).fold(h, |m, &v| m.min(v));
        let right = x[p + 1..].iter().take_while(|&&v| v <= h).fold(h, |m, &v| m.min(v));
        h - left.max(right) >= prominence
    });
    let mut order = candidates.clone();
    order.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::with_capacity(order.len());
    for p in order {
        if kept.iter().all(|&q| p.abs_diff(q) >= min_separation) {
            kept.push(p);
        }
    }
    kept.sort_unstable();
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Detected,
    Oracle,
}

/// Boundary positions over a sequence of `n_frames` frames. Frame `b` is the
/// boundary between frames `b − 1` and `b`, at `10·b` ms.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    frames: Vec<usize>,
    n_frames: usize,
    origin: Origin,
    /// Total shift applied since detection.
    offset_ms: i64,
}

impl fmt::Display for Segmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.origin, self.offset_ms) {
            (Origin::Detected, 0) => write!(f, "detected"),
            (Origin::Oracle, 0) => write!(f, "oracle"),
            (_, d) => write!(f, "offset({d})"),
        }
    }
}

impl Segmentation {
    /// Boundaries must be strictly increasing and within `0..=n_frames`.
    pub fn new(frames: Vec<usize>, n_frames: usize, origin: Origin) -> Result<Self> {
        if frames.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("boundaries must strictly increase".into()));
        }
        if frames.last().is_some_and(|&b| b > n_frames) {
            return Err(Error::InvalidArgument(format!(
                "boundary beyond the {n_frames}-frame sequence"
            )));
        }
        Ok(Segmentation {
            frames,
            n_frames,
            origin,
            offset_ms: 0,
        })
    }

    pub fn frames(&self) -> &[usize] {
        &self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn offset_ms(&self) -> i64 {
        self.offset_ms
    }

    pub fn ms(&self) -> Vec<i64> {
        self.frames.iter().map(|&b| (b * HOP_MS) as i64).collect()
    }

    pub fn duration_ms(&self) -> i64 {
        (self.n_frames * HOP_MS) as i64
    }

    /// Half-open spans between the interior boundaries.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        let mut spans = Vec::with_capacity(self.frames.len() + 1);
        let mut start = 0;
        for &b in self.frames.iter().filter(|&&b| b > 0 && b < self.n_frames) {
            spans.push((start, b));
            start = b;
        }
        if self.n_frames > 0 {
            spans.push((start, self.n_frames));
        }
        spans
    }

    /// Concatenates segmentations of consecutive chunks into one sequence.
    pub fn concat(parts: &[Segmentation]) -> Result<Segmentation> {
        let origin = parts.first().map_or(Origin::Detected, |s| s.origin);
        let mut frames = Vec::new();
        let mut base = 0;
        for s in parts {
            if s.origin != origin || s.offset_ms != 0 {
                return Err(Error::InvalidArgument(
                    "only unshifted segmentations of one origin concatenate".into(),
                ));
            }
            frames.extend(s.frames.iter().map(|&b| b + base));
            base += s.n_frames;
        }
        frames.dedup();
        Segmentation::new(frames, base, origin)
    }
}

/// Peaks of a frame-level curve as boundary frames.
pub fn detect_peaks(
    curve: &DissimilarityCurve,
    prominence: f64,
    min_separation: usize,
) -> Segmentation {
    let frames = find_peaks(&curve.scores, prominence, min_separation)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    Segmentation {
        frames,
        n_frames: curve.scores.len() + 1,
        origin: Origin::Detected,
        offset_ms: 0,
    }
}

/// Span means of `latents: [T × d]` for the given segmentation.
pub fn pool_segments<F: Float>(
    latents: &Tensor<F>,
    seg: &Segmentation,
) -> Result<(Tensor<F>, Vec<(usize, usize)>)> {
    if seg.n_frames != latents.rows() {
        return Err(Error::shape(
            "pool_segments",
            format!("{} frames segmented, {} latents", seg.n_frames, latents.rows()),
        ));
    }
    let spans = seg.spans();
    let d = latents.cols();
    let mut out = vec![F::zero(); spans.len() * d];
    for (j, &(s, e)) in spans.iter().enumerate() {
        let dst = &mut out[j * d..(j + 1) * d];
        for r in s..e {
            for (o, &v) in dst.iter_mut().zip(latents.row(r)) {
                *o += v;
            }
        }
        let inv = F::one() / F::of((e - s) as f64);
        dst.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((Tensor::new(vec![spans.len(), d], out)?, spans))
}

/// Shifts every boundary by `offset_ms`, a multiple of the 10 ms hop.
/// Boundaries leaving `[0, duration]` are dropped, or clamped with `clamp`.
pub fn apply_offset(seg: &Segmentation, offset_ms: i64, clamp: bool) -> Result<Segmentation> {
    if offset_ms % HOP_MS as i64 != 0 {
        return Err(Error::InvalidArgument(format!(
            "offset {offset_ms} ms is not a multiple of the {HOP_MS} ms hop"
        )));
    }
    let delta = offset_ms / HOP_MS as i64;
    let n = seg.n_frames as i64;
    let mut frames: Vec<usize> = seg
        .frames
        .iter()
        .filter_map(|&b| {
            let v = b as i64 + delta;
            match (0..=n).contains(&v) {
                true => Some(v as usize),
                false if clamp => Some(v.clamp(0, n) as usize),
                false => None,
            }
        })
        .collect();
    frames.dedup();
    Ok(Segmentation {
        frames,
        n_frames: seg.n_frames,
        origin: seg.origin,
        offset_ms: seg.offset_ms + offset_ms,
    })
}

/// Word boundaries from peaks between consecutive segment vectors, mapped
/// back to the frame junction between the two spans. Fewer than two
/// segments give an empty segmentation.
pub fn word_boundaries<F: Float>(
    segments: &SegmentSequence<F>,
    prominence: f64,
    min_separation: usize,
) -> Result<Segmentation> {
    let n_frames = segments.spans.last().map_or(0, |s| s.1);
    if segments.spans.len() < 2 {
        return Segmentation::new(Vec::new(), n_frames, Origin::Detected);
    }
    let curve = dissimilarity_curve(&segments.vectors)?;
    let frames = find_peaks(&curve.scores, prominence, min_separation)
        .into_iter()
        .map(|j| segments.spans[j + 1].0)
        .collect();
    Segmentation::new(frames, n_frames, Origin::Detected)
}

/// The grid value maximising `score`; ties keep the earlier value.
pub fn select_threshold(
    grid: &[f64],
    mut score: impl FnMut(f64) -> Result<f64>,
) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for &th in grid {
        let s = score(th)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((th, s));
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("empty threshold grid".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryKind {
    Phone,
    Word,
}

impl BoundaryKind {
    fn as_str(self) -> &'static str {
        match self {
            BoundaryKind::Phone => "phone",
            BoundaryKind::Word => "word",
        }
    }
}

/// Serialises boundaries as `time_ms<TAB>kind` lines in ascending order.
pub fn format_boundaries(entries: &[(i64, BoundaryKind)]) -> String {
    let mut sorted = entries.to_vec();
    sorted.sort();
    sorted
        .iter()
        .map(|(t, k)| format!("{t}\t{}\n", k.as_str()))
        .collect()
}

pub fn parse_boundaries(text: &str, path: &Path) -> Result<Vec<(i64, BoundaryKind)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (t, k) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `time_ms<TAB>kind`".into()))?;
        let t: i64 = t.trim().parse().map_err(|e| err(format!("bad time `{t}`: {e}")))?;
        let k = match k.trim() {
            "phone" => BoundaryKind::Phone,
            "word" => BoundaryKind::Word,
            other => return Err(err(format!("unknown boundary kind `{other}`"))),
        };
        if out.last().is_some_and(|&last| last > (t, k)) {
            return Err(err("boundaries not sorted".into()));
        }
        out.push((t, k));
    }
    Ok(out)
}

pub fn read_boundaries(path: &Path) -> Result<Vec<(i64, BoundaryKind)>> {
    parse_boundaries(&std::fs::read_to_string(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_signs() {
        let v = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![2.0, 0.0],
            vec![0.0, 3.0],
            vec![0.0, -1.0],
            vec![0.0, 0.0],
        ])
        .unwrap();
        let c = dissimilarity_curve(&v).unwrap();
        assert_eq!(c.scores, vec![-1.0, 0.0, 1.0, 0.0]);
        assert_eq!(c.zero_vectors, 1);
        assert!(dissimilarity_curve(&v.slice_rows(0, 1)).is_err());
    }

    #[test]
    fn isolated_peak() {
        assert_eq!(find_peaks(&[-1.0, -1.0, 0.5, -1.0, -1.0], 0.3, 2), vec![2]);
    }

    #[test]
    fn constant_curve_has_no_peaks() {
        assert!(find_peaks(&[0.2; 9], 0.0, 1).is_empty());
    }

    #[test]
    fn prominence_from_the_separating_valley() {
        let x = [0.0, 0.9, 0.1, 0.8, 0.0];
        assert_eq!(find_peaks(&x, 0.5, 1), vec![1, 3]);
        assert_eq!(find_peaks(&x, 0.75, 1), vec![1]);
        assert_eq!(find_peaks(&x, 0.9, 1), vec![1]);
        assert!(find_peaks(&x, 0.91, 1).is_empty());
        assert_eq!(find_peaks(&x, 0.5, 3), vec![1]);
    }

    #[test]
    fn plateaus_resolve_left_and_separation_ties_go_left() {
        assert_eq!(find_peaks(&[0.0, 1.0, 1.0, 1.0, 0.0], 0.1, 1), vec![1]);
        assert!(find_peaks(&[0.0, 1.0, 1.0], 0.1, 1).is_empty());
        assert_eq!(find_peaks(&[0.0, 1.0, 0.0, 1.0, 0.0], 0.1, 3), vec![1]);
    }

    #[test]
    fn pooling() {
        let z = Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap();
        let seg = Segmentation::new(vec![], 2, Origin::Oracle).unwrap();
        let (p, spans) = pool_segments(&z, &seg).unwrap();
        assert_eq!(p.data(), &[2.0, 2.0]);
        assert_eq!(spans, vec![(0, 2)]);
        let every = Segmentation::new(vec![1], 2, Origin::Oracle).unwrap();
        assert_eq!(pool_segments(&z, &every).unwrap().0, z);
    }

    #[test]
    fn offsets() {
        let s = Segmentation::new(vec![5, 12], 20, Origin::Detected).unwrap();
        let o = apply_offset(&s, -10, false).unwrap();
        assert_eq!(o.ms(), vec![40, 110]);
        assert_eq!(o.to_string(), "offset(-10)");
        assert_eq!(apply_offset(&s, 0, false).unwrap(), s);
        assert_eq!(apply_offset(&o, 10, false).unwrap(), s);
        let edge = Segmentation::new(vec![0, 3], 20, Origin::Detected).unwrap();
        assert_eq!(apply_offset(&edge, -10, false).unwrap().frames(), &[2]);
        assert_eq!(apply_offset(&edge, -10, true).unwrap().frames(), &[0, 2]);
        assert!(apply_offset(&s, 15, false).is_err());
    }

    #[test]
    fn word_junction_between_orthogonal_runs() {
        let seg = SegmentSequence {
            vectors: Tensor::from_rows(&[
                vec![1.0, 0.0],
                vec![1.0, 0.01],
                vec![0.0, 1.0],
                vec![0.01, 1.0],
            ])
            .unwrap(),
            spans: vec![(0, 3), (3, 7), (7, 9), (9, 14)],
        };
        let w = word_boundaries(&seg, 0.3, 1).unwrap();
        assert_eq!(w.frames(), &[7]);
        assert_eq!(w.n_frames(), 14);
        let single = SegmentSequence {
            vectors: Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            spans: vec![(0, 5)],
        };
        assert!(word_boundaries(&single, 0.0, 1).unwrap().frames().is_empty());
    }

    #[test]
    fn threshold_selection_prefers_first_maximum() {
        let (th, s) = select_threshold(&THRESHOLD_GRID, |t| Ok(f64::from(u8::from((0.05..=0.1).contains(&t))))).unwrap();
        assert_eq!((th, s), (0.05, 1.0));
    }

    #[test]
    fn boundary_file_round_trip() {
        let entries = vec![(120, BoundaryKind::Word), (50, BoundaryKind::Phone), (120, BoundaryKind::Phone)];
        let text = format_boundaries(&entries);
        assert_eq!(text, "50\tphone\n120\tphone\n120\tword\n");
        let back = parse_boundaries(&text, Path::new("x")).unwrap();
        assert_eq!(back.len(), 3);
        let err = parse_boundaries("10\tphone\n5\tphone\n", Path::new("b.txt")).unwrap_err();
        assert!(err.to_string().contains("b.txt:2"));
    }
}
