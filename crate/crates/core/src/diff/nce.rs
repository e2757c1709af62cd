use super::graph::{Grads, Op};
use super::{Float, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// A batch of noise-contrastive terms read from one score matrix.
///
/// Term `i` contributes `weight_i · −log softmax(s[row, pos], s[row, neg_1..])`
/// evaluated at the positive. Repeated negatives count once per occurrence.
#[derive(Clone, Debug, Default)]
pub struct NceTerms {
    rows: Vec<usize>,
    positives: Vec<usize>,
    offsets: Vec<usize>,
    negatives: Vec<usize>,
    weights: Vec<f64>,
}

impl NceTerms {
    pub fn new() -> Self {
        NceTerms {
            offsets: vec![0],
            ..Default::default()
        }
    }

    pub fn push(&mut self, row: usize, positive: usize, negatives: &[usize], weight: f64) {
        if self.offsets.is_empty() {
            self.offsets.push(0);
        }
        self.rows.push(row);
        self.positives.push(positive);
        self.negatives.extend_from_slice(negatives);
        self.offsets.push(self.negatives.len());
        self.weights.push(weight);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn term(&self, i: usize) -> (usize, usize, &[usize], f64) {
        (
            self.rows[i],
            self.positives[i],
            &self.negatives[self.offsets[i]..self.offsets[i + 1]],
            self.weights[i],
        )
    }
}

/// `−log(exp(s⁺) / (exp(s⁺) + Σ exp(s⁻)))` computed with max subtraction.
pub(crate) fn term_loss<F: Float>(pos: F, negs: impl Iterator<Item = F> + Clone) -> F {
    let max = negs.clone().fold(pos, F::max);
    let total = (pos - max).exp() + negs.map(|s| (s - max).exp()).sum::<F>();
    max + total.ln() - pos
}

pub(crate) struct NceSaved<F> {
    scores: Var,
    terms: NceTerms,
    /// Softmax over `[pos, negs...]` per term, laid out like `negatives` with
    /// the positive first.
    probs: Vec<F>,
}

impl<F: Float> Graph<F> {
    /// Weighted sum of noise-contrastive terms over `scores: [R × C]`.
    pub fn nce_loss(&mut self, scores: Var, terms: NceTerms) -> Result<Var> {
        let s = self.shape(scores).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("nce", format!("scores {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let sv = self.value(scores).data();
        let mut probs = Vec::with_capacity(terms.negatives.len() + terms.len());
        let mut total = F::zero();
        for i in 0..terms.len() {
            let (row, pos, negs, w) = terms.term(i);
            if row >= r || pos >= c || negs.iter().any(|&n| n >= c) {
                return Err(Error::shape("nce", format!("term {i} indexes outside {s:?}")));
            }
            if negs.is_empty() {
                return Err(Error::InvalidArgument(format!("term {i} has no negatives")));
            }
            let srow = &sv[row * c..(row + 1) * c];
            let ps = srow[pos];
            let max = negs.iter().map(|&n| srow[n]).fold(ps, F::max);
            let start = probs.len();
            probs.push((ps - max).exp());
            probs.extend(negs.iter().map(|&n| (srow[n] - max).exp()));
            let z: F = probs[start..].iter().copied().sum();
            probs[start..].iter_mut().for_each(|p| *p = *p / z);
            total += F::of(w) * (max + z.ln() - ps);
        }
        let rg = self.requires_grad(scores);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Nce(NceSaved {
                scores,
                terms,
                probs,
            }),
            rg,
        ))
    }
}

pub(crate) fn backward<F: Float>(s: &NceSaved<F>, gout: &[F], g: &mut Grads<'_, F>) {
    let c = g.value(s.scores).cols();
    let go = gout[0];
    let Some(ds) = g.get(s.scores) else {
        return;
    };
    let mut off = 0;
    for i in 0..s.terms.len() {
        let (row, pos, negs, w) = s.terms.term(i);
        let scale = go * F::of(w);
        let p = &s.probs[off..off + 1 + negs.len()];
        let drow = &mut ds[row * c..(row + 1) * c];
        drow[pos] += scale * (p[0] - F::one());
        for (&n, &pn) in negs.iter().zip(&p[1..]) {
            drow[n] += scale * pn;
        }
        off += 1 + negs.len();
    }
}
