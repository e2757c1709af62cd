//! Noise-contrastive training losses.
//!
//! Prediction losses read one score matrix `S = P·Zᵀ` per chunk, where row
//! `t·K + k` of `P` is prediction `k` made at position `t`. Per-pair costs
//! are evaluated numerically to pick the alignment, and only the selected
//! pairs enter the differentiable loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{Float, Graph, NceTerms, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// `−log(exp(p·z⁺) / (exp(p·z⁺) + Σ exp(p·z⁻)))` for plain vectors.
pub fn nce_term(prediction: &[f64], positive: &[f64], negatives: &[&[f64]]) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("nce term needs at least one negative".into()));
    }
    let d = prediction.len();
    if positive.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(Error::shape("nce_term", "vector dimensions differ"));
    }
    let all = prediction.iter().chain(positive).chain(negatives.iter().copied().flatten());
    if all.clone().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("nce_term input".into()));
    }
    let dot = |z: &[f64]| prediction.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
    let negs: Vec<f64> = negatives.iter().map(|z| dot(z)).collect();
    Ok(crate::diff::term_loss(dot(positive), negs.iter().copied()))
}

/// Per-pair costs of `K` predictions against `M` upcoming targets.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    k: usize,
    m: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(k: usize, m: usize, entries: Vec<f64>) -> Result<Self> {
        if k == 0 || k > m {
            return Err(Error::InvalidArgument(format!(
                "cost matrix needs 1 <= K <= M, got K = {k}, M = {m}"
            )));
        }
        if entries.len() != k * m {
            return Err(Error::shape(
                "cost_matrix",
                format!("{} entries for {k} x {m}", entries.len()),
            ));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix".into()));
        }
        Ok(CostMatrix { k, m, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::shape("cost_matrix", "ragged rows"));
        }
        Self::new(rows.len(), m, rows.concat())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn at(&self, k: usize, m: usize) -> f64 {
        self.entries[k * self.m + m]
    }
}

/// A monotonic surjective assignment of targets to predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignPath {
    /// `assign[m]` is the (zero-based) prediction matched to target `m`.
    pub assign: Vec<usize>,
    pub total: f64,
}

/// Minimum-cost alignment where prediction indices start at 0, end at
/// `K − 1`, and advance by at most one per target.
pub fn acpc_align(costs: &CostMatrix) -> AlignPath {
    acpc_table(costs).path
}

/// The alignment program's filled table.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignTable {
    /// Row-major `K × M` cost of the best partial path ending at `(k, m)`;
    /// infinite where unreachable.
    pub cumulative: Vec<f64>,
    pub path: AlignPath,
}

pub fn acpc_table(costs: &CostMatrix) -> AlignTable {
    let (kk, mm) = (costs.k, costs.m);
    let mut a = vec![f64::INFINITY; kk * mm];
    // true when the best predecessor of (k, m) is (k − 1, m − 1)
    let mut diag = vec![false; kk * mm];
    a[0] = costs.at(0, 0);
    for m in 1..mm {
        for k in 0..kk.min(m + 1) {
            let stay = a[k * mm + m - 1];
            let step = if k > 0 { a[(k - 1) * mm + m - 1] } else { f64::INFINITY };
            let (best, from_diag) = if step < stay { (step, true) } else { (stay, false) };
            a[k * mm + m] = costs.at(k, m) + best;
            diag[k * mm + m] = from_diag;
        }
    }
    let mut assign = vec![0; mm];
    let mut k = kk - 1;
    for m in (0..mm).rev() {
        assign[m] = k;
        if m > 0 && diag[k * mm + m] {
            k -= 1;
        }
    }
    debug_assert!(is_valid_alignment(&assign, kk));
    let total = a[(kk - 1) * mm + mm - 1];
    AlignTable {
        cumulative: a,
        path: AlignPath { assign, total },
    }
}

/// `a(0) = 0`, `a(M−1) = K−1` and every step advances by 0 or 1.
pub fn is_valid_alignment(assign: &[usize], k: usize) -> bool {
    assign.first() == Some(&0)
        && assign.last() == Some(&(k - 1))
        && assign.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1)
}

/// `n` indices drawn uniformly with replacement from `0..len` minus
/// `exclude`.
pub fn sample_negatives(rng: &mut ChaCha8Rng, len: usize, exclude: usize, n: usize) -> Vec<usize> {
    debug_assert!(len >= 2 && exclude < len);
    (0..n)
        .map(|_| {
            let j = rng.random_range(0..len - 1);
            if j >= exclude {
                j + 1
            } else {
                j
            }
        })
        .collect()
}

/// A prediction loss with its bookkeeping.
#[derive(Clone, Copy, Debug)]
pub struct PredictionLoss {
    /// `None` when every position was skipped.
    pub loss: Option<Var>,
    pub positions: usize,
    /// Positions dropped for lack of `M` future elements.
    pub skipped: usize,
    /// Number of alignment programs solved.
    pub dp_calls: usize,
}

/// Aligned prediction loss: per position, `K` predictions are matched to
/// the `M` next targets by [`acpc_align`] and the selected NCE terms are
/// summed, divided by `M`, and averaged over positions.
///
/// `preds` is `[T·K × d]` and `targets` `[T × d]`. With `K = M` the forced
/// diagonal gives the plain CPC loss and no program is solved. With
/// `allow_skip` a sequence of at most `M` targets yields no loss instead of
/// an error.
#[allow(clippy::too_many_arguments)]
pub fn acpc_loss<F: Float>(
    g: &mut Graph<F>,
    preds: Var,
    targets: Var,
    k: usize,
    m: usize,
    negatives: usize,
    rng: &mut ChaCha8Rng,
    allow_skip: bool,
) -> Result<PredictionLoss> {
    if k == 0 || k > m {
        return Err(Error::InvalidArgument(format!("need 1 <= K <= M, got {k}, {m}")));
    }
    if negatives == 0 {
        return Err(Error::InvalidArgument("at least one negative per term".into()));
    }
    let t_len = g.shape(targets)[0];
    if g.shape(preds)[0] != t_len * k {
        return Err(Error::shape(
            "acpc_loss",
            format!("{} prediction rows for {t_len} positions x K = {k}", g.shape(preds)[0]),
        ));
    }
    if t_len <= m {
        if allow_skip {
            return Ok(PredictionLoss {
                loss: None,
                positions: 0,
                skipped: t_len,
                dp_calls: 0,
            });
        }
        return Err(Error::SequenceTooShort(format!(
            "{t_len} elements cannot supply a horizon of {m}"
        )));
    }
    let valid = t_len - m;
    let s = g.matmul_t(preds, targets, false, true)?;
    let sv = g.value(s).data();
    let weight = 1.0 / (m * valid) as f64;
    let mut terms = NceTerms::new();
    let mut dp_calls = 0;
    let mut costs = vec![0.0; k * m];
    for t in 0..valid {
        let negs: Vec<Vec<usize>> = (1..=m)
            .map(|off| sample_negatives(rng, t_len, t + off, negatives))
            .collect();
        let assign = if k == m {
            (0..m).collect()
        } else {
            for kk in 0..k {
                let row = &sv[(t * k + kk) * t_len..(t * k + kk + 1) * t_len];
                for (j, nj) in negs.iter().enumerate() {
                    let pos = row[t + j + 1].f64();
                    costs[kk * m + j] =
                        crate::diff::term_loss(pos, nj.iter().map(|&n| row[n].f64()));
                }
            }
            dp_calls += 1;
            acpc_align(&CostMatrix::new(k, m, costs.clone())?).assign
        };
        for (j, &kk) in assign.iter().enumerate() {
            terms.push(t * k + kk, t + j + 1, &negs[j], weight);
        }
    }
    let loss = g.nce_loss(s, terms)?;
    Ok(PredictionLoss {
        loss: Some(loss),
        positions: valid,
        skipped: t_len - valid,
        dp_calls,
    })
}

/// Plain CPC: one prediction per offset `1..=M`.
pub fn cpc_loss<F: Float>(
    g: &mut Graph<F>,
    preds: Var,
    targets: Var,
    m: usize,
    negatives: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PredictionLoss> {
    acpc_loss(g, preds, targets, m, m, negatives, rng, false)
}

/// Contrast each latent's successor against frames more than two steps
/// away, scoring by cosine similarity over `temperature`.
pub fn adjacent_contrastive_loss<F: Float>(
    g: &mut Graph<F>,
    z: Var,
    negatives: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let t_len = g.shape(z)[0];
    if negatives == 0 {
        return Err(Error::InvalidArgument("at least one negative per term".into()));
    }
    let anchors: Vec<usize> = (0..t_len.saturating_sub(1)).filter(|&t| t + 3 < t_len || t >= 3).collect();
    if anchors.is_empty() {
        return Err(Error::SequenceTooShort(format!(
            "{t_len} frames cannot supply negatives more than 2 frames away"
        )));
    }
    let zn = g.l2_normalize_rows(z)?;
    let sim = g.matmul_t(zn, zn, false, true)?;
    let scores = g.scale(sim, F::of(1.0 / temperature));
    let weight = 1.0 / anchors.len() as f64;
    let mut terms = NceTerms::new();
    for &t in &anchors {
        let far: Vec<usize> = (0..t_len).filter(|&j| j.abs_diff(t) > 2).collect();
        let negs: Vec<usize> = (0..negatives).map(|_| far[rng.random_range(0..far.len())]).collect();
        terms.push(t, t + 1, &negs, weight);
    }
    g.nce_loss(scores, terms)
}

/// Loss components of one chunk; absent components are disabled or skipped.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub frame: Option<Var>,
    pub segment: Option<Var>,
    pub adjacent: Option<Var>,
}

/// `frame + segment + w · adjacent` over the components the configuration
/// enables.
pub fn total_loss<F: Float>(g: &mut Graph<F>, config: &ModelConfig, parts: LossParts) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut add = |g: &mut Graph<F>, v: Var| -> Result<()> {
        total = Some(match total {
            Some(t) => g.add(t, v)?,
            None => v,
        });
        Ok(())
    };
    if let (true, Some(f)) = (config.prediction_enabled, parts.frame) {
        add(g, f)?;
    }
    if let (true, Some(s)) = (config.segment_level_enabled, parts.segment) {
        add(g, s)?;
    }
    if let (true, Some(a)) = (config.adjacent_loss_enabled, parts.adjacent) {
        let w = g.scale(a, F::of(config.adjacent_loss_weight));
        add(g, w)?;
    }
    total.ok_or_else(|| Error::InvalidArgument("no loss component available".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;
    use rand::SeedableRng;

    #[test]
    fn uniform_scores_give_log_n_plus_one() {
        let p = [0.5, -1.0];
        let z = [2.0, 1.0];
        let negs: Vec<&[f64]> = vec![&z; 7];
        assert!((nce_term(&p, &z, &negs).unwrap() - 8f64.ln()).abs() < 1e-15);
        let zero = [0.0, 0.0];
        let others = [[3.0, -2.0], [0.1, 9.0]];
        let negs: Vec<&[f64]> = others.iter().map(|v| v.as_slice()).collect();
        assert_eq!(nce_term(&zero, &z, &negs).unwrap(), 3f64.ln());
    }

    #[test]
    fn dominant_positive_drives_the_term_to_zero() {
        let p = [100.0];
        let negs: Vec<&[f64]> = vec![&[-1.0], &[0.0]];
        let v = nce_term(&p, &[5.0], &negs).unwrap();
        assert!((0.0..1e-200).contains(&v));
    }

    #[test]
    fn nce_term_rejects_bad_input() {
        assert!(nce_term(&[1.0], &[1.0], &[]).is_err());
        assert!(matches!(
            nce_term(&[f64::NAN], &[1.0], &[&[0.0]]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn hand_worked_alignment() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 1.0, 1.0]]).unwrap();
        let a = acpc_align(&c);
        assert_eq!(a.assign, vec![0, 1, 1]);
        assert_eq!(a.total, 3.0);
    }

    #[test]
    fn square_costs_force_the_diagonal() {
        let c = CostMatrix::from_rows(&[
            vec![9.0, 0.0, 0.0],
            vec![0.0, 9.0, 0.0],
            vec![0.0, 0.0, 9.0],
        ])
        .unwrap();
        let a = acpc_align(&c);
        assert_eq!(a.assign, vec![0, 1, 2]);
        assert_eq!(a.total, 27.0);
    }

    #[test]
    fn single_prediction_takes_every_target() {
        let c = CostMatrix::from_rows(&[vec![0.5, 1.5, 2.0, 0.25]]).unwrap();
        let a = acpc_align(&c);
        assert_eq!(a.assign, vec![0; 4]);
        assert_eq!(a.total, 4.25);
    }

    #[test]
    fn more_predictions_than_targets_is_rejected() {
        assert!(CostMatrix::new(3, 2, vec![0.0; 6]).is_err());
    }

    #[test]
    fn negatives_never_hit_the_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for exclude in 0..5 {
            let n = sample_negatives(&mut rng, 5, exclude, 200);
            assert!(n.iter().all(|&j| j != exclude && j < 5));
            for j in (0..5).filter(|&j| j != exclude) {
                assert!(n.contains(&j));
            }
        }
    }

    fn graph_with(t: usize, k: usize, d: usize) -> (Graph<f64>, Var, Var) {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::from_fn(&[t * k, d], |i| (i as f64 * 0.37).sin()), true);
        let z = g.leaf(Tensor::from_fn(&[t, d], |i| (i as f64 * 0.91).cos()), true);
        (g, p, z)
    }

    #[test]
    fn horizon_m_plus_one_has_one_position() {
        let (mut g, p, z) = graph_with(4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = cpc_loss(&mut g, p, z, 3, 2, &mut rng).unwrap();
        assert_eq!((l.positions, l.skipped, l.dp_calls), (1, 3, 0));
        let (mut g, p, z) = graph_with(3, 3, 2);
        assert!(matches!(
            cpc_loss(&mut g, p, z, 3, 2, &mut rng),
            Err(Error::SequenceTooShort(_))
        ));
    }

    #[test]
    fn short_segment_sequences_are_skipped() {
        let (mut g, p, z) = graph_with(4, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = acpc_loss(&mut g, p, z, 2, 4, 5, &mut rng, true).unwrap();
        assert!(l.loss.is_none());
        assert_eq!(l.skipped, 4);
    }

    #[test]
    fn aligned_loss_is_bounded_by_the_diagonal_cost() {
        // zero predictions: every cost is ln(N + 1), whatever the alignment
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::zeros(&[20 * 2, 3]), true);
        let z = g.leaf(Tensor::from_fn(&[20, 3], |i| i as f64), true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = acpc_loss(&mut g, p, z, 2, 5, 9, &mut rng, false).unwrap();
        let v = g.value(l.loss.unwrap()).item();
        assert!((v - 10f64.ln()).abs() < 1e-12);
        assert_eq!(l.dp_calls, 15);
    }

    #[test]
    fn adjacent_loss_on_constant_latents_is_uniform() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::full(&[10, 4], 0.3), true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = adjacent_contrastive_loss(&mut g, z, 16, 0.1, &mut rng).unwrap();
        assert!((g.value(l).item() - 17f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn adjacent_loss_needs_distant_frames() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::full(&[3, 4], 0.3), true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            adjacent_contrastive_loss(&mut g, z, 4, 0.1, &mut rng),
            Err(Error::SequenceTooShort(_))
        ));
    }

    #[test]
    fn zero_adjacent_weight_matches_disabled_flag() {
        let mut c = ModelConfig::default();
        c.segment_level_enabled = false;
        let mut g = Graph::<f64>::new();
        let f = g.leaf(Tensor::scalar(1.25), true);
        let a = g.leaf(Tensor::scalar(3.5), true);
        let parts = LossParts {
            frame: Some(f),
            segment: None,
            adjacent: Some(a),
        };
        let off = total_loss(&mut g, &c, parts).unwrap();
        c.adjacent_loss_enabled = true;
        c.adjacent_loss_weight = 0.0;
        let zero = total_loss(&mut g, &c, parts).unwrap();
        assert_eq!(g.value(off).item(), g.value(zero).item());
        c.adjacent_loss_weight = 2.0;
        let on = total_loss(&mut g, &c, parts).unwrap();
        assert_eq!(g.value(on).item(), 8.25);
    }
}
