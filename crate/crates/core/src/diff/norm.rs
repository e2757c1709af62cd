use super::graph::{Grads, Op};
use super::{Float, Graph, Tensor, Var};
use crate::error::{Error, Result};

const CHANNEL_NORM_EPS: f64 = 1e-5;
const ROW_NORM_FLOOR: f64 = 1e-12;

pub(crate) struct ChannelNormSaved<F> {
    x: Var,
    gain: Var,
    bias: Var,
    xhat: Vec<F>,
    inv_std: Vec<F>,
}

pub(crate) struct RowNormSaved<F> {
    x: Var,
    norms: Vec<F>,
}

impl<F: Float> Graph<F> {
    /// Normalises every column of `x: [channels × len]` across channels to
    /// zero mean and unit variance, then applies a per-channel gain and bias.
    pub fn channel_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::shape("channel_norm", format!("input {s:?}")));
        }
        let (c, len) = (s[0], s[1]);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("channel_norm", "gain/bias length differs from channels"));
        }
        let xv = self.value(x).data();
        let inv_c = F::one() / F::of(c as f64);
        let eps = F::of(CHANNEL_NORM_EPS);
        let mut mean = vec![F::zero(); len];
        for row in xv.chunks(len) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        let mut var = vec![F::zero(); len];
        for row in xv.chunks(len) {
            for ((acc, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *acc += d * d;
            }
        }
        let inv_std: Vec<F> = var
            .iter()
            .map(|&v| F::one() / (v * inv_c + eps).sqrt())
            .collect();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut xhat = vec![F::zero(); c * len];
        let mut out = vec![F::zero(); c * len];
        for ch in 0..c {
            for t in 0..len {
                let i = ch * len + t;
                let h = (xv[i] - mean[t]) * inv_std[t];
                xhat[i] = h;
                out[i] = h * gv[ch] + bv[ch];
            }
        }
        let rg = self.any_requires_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![c, len], out)?,
            Op::ChannelNorm(ChannelNormSaved {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            }),
            rg,
        ))
    }

    /// Scales every row of a matrix to unit Euclidean norm; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("l2_normalize_rows", format!("input {s:?}")));
        }
        let d = s[1];
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(s[0]);
        let mut out = vec![F::zero(); xv.len()];
        for (row, dst) in xv.chunks(d.max(1)).zip(out.chunks_mut(d.max(1))) {
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            norms.push(n);
            if n > F::of(ROW_NORM_FLOOR) {
                for (o, &v) in dst.iter_mut().zip(row) {
                    *o = v / n;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::L2NormalizeRows(RowNormSaved { x, norms }),
            rg,
        ))
    }

    /// Cosine similarity matrix `[rows(a) × rows(b)]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.l2_normalize_rows(a)?;
        let bn = if a == b { an } else { self.l2_normalize_rows(b)? };
        self.matmul_t(an, bn, false, true)
    }
}

pub(crate) fn channel_norm_backward<F: Float>(
    s: &ChannelNormSaved<F>,
    gout: &[F],
    g: &mut Grads<'_, F>,
) {
    let shape = g.value(s.x).shape();
    let (c, len) = (shape[0], shape[1]);
    let gain = g.value(s.gain).data();
    if let Some(db) = g.get(s.bias) {
        for (d, row) in db.iter_mut().zip(gout.chunks(len)) {
            *d += row.iter().copied().sum::<F>();
        }
    }
    if let Some(dg) = g.get(s.gain) {
        for (ch, d) in dg.iter_mut().enumerate() {
            let r = ch * len..(ch + 1) * len;
            *d += gout[r.clone()]
                .iter()
                .zip(&s.xhat[r])
                .map(|(&a, &b)| a * b)
                .sum::<F>();
        }
    }
    if let Some(dx) = g.get(s.x) {
        let inv_c = F::one() / F::of(c as f64);
        let mut mean_d = vec![F::zero(); len];
        let mut mean_dx = vec![F::zero(); len];
        for ch in 0..c {
            for t in 0..len {
                let i = ch * len + t;
                let dh = gout[i] * gain[ch];
                mean_d[t] += dh;
                mean_dx[t] += dh * s.xhat[i];
            }
        }
        for ch in 0..c {
            for t in 0..len {
                let i = ch * len + t;
                let dh = gout[i] * gain[ch];
                dx[i] += s.inv_std[t] * (dh - mean_d[t] * inv_c - s.xhat[i] * mean_dx[t] * inv_c);
            }
        }
    }
}

pub(crate) fn row_norm_backward<F: Float>(
    s: &RowNormSaved<F>,
    out: &Tensor<F>,
    gout: &[F],
    g: &mut Grads<'_, F>,
) {
    let d = out.cols().max(1);
    let y = out.data();
    if let Some(dx) = g.get(s.x) {
        for (r, &n) in s.norms.iter().enumerate() {
            if n <= F::of(ROW_NORM_FLOOR) {
                continue;
            }
            let yr = &y[r * d..(r + 1) * d];
            let gr = &gout[r * d..(r + 1) * d];
            let proj: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for ((dv, &yv), &gv) in dx[r * d..(r + 1) * d].iter_mut().zip(yr).zip(gr) {
                *dv += (gv - yv * proj) / n;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column_stats(t: &Tensor<f64>, col: usize) -> (f64, f64) {
        let (c, len) = (t.rows(), t.cols());
        let vals: Vec<f64> = (0..c).map(|ch| t.data()[ch * len + col]).collect();
        let mean = vals.iter().sum::<f64>() / c as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        (mean, var)
    }

    fn affine(g: &mut Graph<f64>, c: usize, gain: f64, bias: f64) -> (Var, Var) {
        (
            g.leaf(Tensor::full(&[c], gain), false),
            g.leaf(Tensor::full(&[c], bias), false),
        )
    }

    #[test]
    fn constant_column_normalises_to_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[5, 3], 2.5), false);
        let (gain, bias) = affine(&mut g, 5, 1.0, 0.0);
        let y = g.channel_norm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_columns_have_zero_mean_unit_variance() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(
            Tensor::from_fn(&[64, 4], |i| ((i * 7919) % 101) as f64 / 10.0 - 5.0),
            false,
        );
        let (gain, bias) = affine(&mut g, 64, 1.0, 0.0);
        let y = g.channel_norm(x, gain, bias).unwrap();
        for col in 0..4 {
            let (m, v) = column_stats(g.value(y), col);
            assert!(m.abs() < 1e-3);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn gain_and_bias_apply_after_normalisation() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(
            Tensor::from_fn(&[32, 2], |i| (i as f64 * 1.3).sin() * 4.0),
            false,
        );
        let (gain, bias) = affine(&mut g, 32, 2.0, 1.0);
        let y = g.channel_norm(x, gain, bias).unwrap();
        for col in 0..2 {
            let (m, v) = column_stats(g.value(y), col);
            assert!((m - 1.0).abs() < 1e-3);
            assert!((v.sqrt() - 2.0).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_rows_stay_zero_under_normalisation() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap(), false);
        let y = g.l2_normalize_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.6, 0.8]);
    }
}
