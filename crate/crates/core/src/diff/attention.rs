use super::graph::{softmax_in_place, Grads, Op};
use super::{Float, Graph, Tensor, Var};
use crate::error::{Error, Result};

pub(crate) struct AttentionSaved<F> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    causal: bool,
    /// Attention weights per head, `[heads × Tq × Tk]`.
    probs: Vec<F>,
}

/// Projection and feed-forward parameters of one attention layer over model
/// dimension `d` with feed-forward width `ff`.
///
/// The key projection has no bias: softmax is invariant to the constant score
/// shift it would add.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl<F: Float> Graph<F> {
    /// Multi-head scaled dot-product attention without projections.
    ///
    /// With `causal`, query `i` only sees keys `j <= i`.
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        if qs.len() != 2 || ks.len() != 2 || self.shape(v) != ks.as_slice() || qs[1] != ks[1] {
            return Err(Error::shape(
                "attention",
                format!("q {qs:?}, k {ks:?}, v {:?}", self.shape(v)),
            ));
        }
        let (tq, d, tk) = (qs[0], qs[1], ks[0]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model dimension {d} not divisible by {heads} heads"
            )));
        }
        if tk == 0 {
            return Err(Error::SequenceTooShort("attention over no keys".into()));
        }
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![F::zero(); heads * tq * tk];
        let mut out = vec![F::zero(); tq * d];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..tq {
                let visible = if causal { (i + 1).min(tk) } else { tk };
                let row = &mut probs[(hd * tq + i) * tk..(hd * tq + i + 1) * tk];
                for j in 0..visible {
                    let mut s = F::zero();
                    for c in 0..dh {
                        s += qv[i * d + off + c] * kv[j * d + off + c];
                    }
                    row[j] = s * scale;
                }
                softmax_in_place(&mut row[..visible]);
                let dst = &mut out[i * d + off..i * d + off + dh];
                for j in 0..visible {
                    let p = row[j];
                    for (o, &x) in dst.iter_mut().zip(&vv[j * d + off..j * d + off + dh]) {
                        *o += p * x;
                    }
                }
            }
        }
        let rg = self.any_requires_grad(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![tq, d], out)?,
            Op::Attention(AttentionSaved {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            }),
            rg,
        ))
    }

    /// Attention weights of the most recent [`multi_head_attention`] node.
    ///
    /// [`multi_head_attention`]: Self::multi_head_attention
    pub fn attention_weights(&self, node: Var) -> Option<&[F]> {
        match &self.node_op(node) {
            Op::Attention(s) => Some(&s.probs),
            _ => None,
        }
    }
}

/// Projected multi-head attention followed by a position-wise feed-forward
/// block, each wrapped in a residual connection.
///
/// Queries and keys/values share dimension `d`. Dropout is applied to both
/// residual branches when the graph is in training mode.
pub fn attention_layer<F: Float>(
    g: &mut Graph<F>,
    p: &AttentionParams,
    queries: Var,
    keys_values: Var,
    heads: usize,
    causal: bool,
    dropout_p: f64,
) -> Result<Var> {
    let q = g.linear(queries, p.wq, Some(p.bq))?;
    let k = g.linear(keys_values, p.wk, None)?;
    let v = g.linear(keys_values, p.wv, Some(p.bv))?;
    let a = g.multi_head_attention(q, k, v, heads, causal)?;
    let o = g.linear(a, p.wo, Some(p.bo))?;
    let o = g.dropout(o, dropout_p)?;
    let h = g.add(queries, o)?;
    let f = g.linear(h, p.w1, Some(p.b1))?;
    let f = g.relu(f);
    let f = g.linear(f, p.w2, Some(p.b2))?;
    let f = g.dropout(f, dropout_p)?;
    g.add(h, f)
}

pub(crate) fn backward<F: Float>(s: &AttentionSaved<F>, gout: &[F], g: &mut Grads<'_, F>) {
    let qs = g.value(s.q).shape();
    let (tq, d) = (qs[0], qs[1]);
    let tk = g.value(s.k).shape()[0];
    let dh = d / s.heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let (qv, kv, vv) = (g.value(s.q).data(), g.value(s.k).data(), g.value(s.v).data());
    let mut dq = vec![F::zero(); tq * d];
    let mut dk = vec![F::zero(); tk * d];
    let mut dv = vec![F::zero(); tk * d];
    let mut dp = vec![F::zero(); tk];
    for hd in 0..s.heads {
        let off = hd * dh;
        for i in 0..tq {
            let visible = if s.causal { (i + 1).min(tk) } else { tk };
            let p = &s.probs[(hd * tq + i) * tk..(hd * tq + i) * tk + visible];
            let go = &gout[i * d + off..i * d + off + dh];
            let mut dot = F::zero();
            for j in 0..visible {
                let vj = &vv[j * d + off..j * d + off + dh];
                let mut acc = F::zero();
                for c in 0..dh {
                    acc += go[c] * vj[c];
                    dv[j * d + off + c] += p[j] * go[c];
                }
                dp[j] = acc;
                dot += acc * p[j];
            }
            for j in 0..visible {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == F::zero() {
                    continue;
                }
                for c in 0..dh {
                    dq[i * d + off + c] += ds * kv[j * d + off + c];
                    dk[j * d + off + c] += ds * qv[i * d + off + c];
                }
            }
        }
    }
    for (var, buf) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
        if let Some(dst) = g.get(var) {
            for (a, b) in dst.iter_mut().zip(buf) {
                *a += b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key_gets_full_weight() {
        let mut g = Graph::<f64>::new();
        let q = g.leaf(Tensor::from_fn(&[1, 4], |i| i as f64 * 3.0 - 5.0), false);
        let k = g.leaf(Tensor::from_fn(&[1, 4], |i| i as f64 + 0.5), false);
        let v = g.leaf(Tensor::from_fn(&[1, 4], |i| i as f64 * 0.25), false);
        let a = g.multi_head_attention(q, k, v, 2, false).unwrap();
        assert!(g.attention_weights(a).unwrap().iter().all(|&w| w == 1.0));
        assert_eq!(g.value(a), g.value(v));
    }

    #[test]
    fn uniform_keys_average_the_values() {
        let mut g = Graph::<f64>::new();
        let q = g.leaf(Tensor::full(&[3, 4], 0.7), false);
        let k = g.leaf(Tensor::full(&[5, 4], -0.2), false);
        let v = g.leaf(Tensor::from_fn(&[5, 4], |i| (i as f64).sqrt()), false);
        let a = g.multi_head_attention(q, k, v, 2, false).unwrap();
        let vt = g.value(v).clone();
        for i in 0..3 {
            for c in 0..4 {
                let mean: f64 = (0..5).map(|j| vt.at(j, c)).sum::<f64>() / 5.0;
                assert!((g.value(a).at(i, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_must_divide_dimension() {
        let mut g = Graph::<f64>::new();
        let q = g.leaf(Tensor::zeros(&[2, 6]), false);
        assert!(matches!(
            g.multi_head_attention(q, q, q, 4, true),
            Err(Error::InvalidArgument(_))
        ));
    }
}
