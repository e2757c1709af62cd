use super::graph::{Grads, Op};
use super::{gemm, Float, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Parameters of one LSTM layer: `w_ih: [4H × in]`, `w_hh: [4H × H]`,
/// `bias: [4H]`, gates ordered input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

pub(crate) struct LstmSaved<F> {
    x: Var,
    p: LstmParams,
    /// Post-activation gates, `[T × 4H]`.
    gates: Vec<F>,
    /// Cell states, `[T × H]`.
    cells: Vec<F>,
}

fn sigmoid<F: Float>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

impl<F: Float> Graph<F> {
    /// One LSTM layer over `x: [T × in]` from zero initial state, giving `[T × H]`.
    pub fn lstm(&mut self, x: Var, p: LstmParams) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("lstm", format!("input {xs:?}")));
        }
        let (t_len, d_in) = (xs[0], xs[1]);
        if t_len == 0 {
            return Err(Error::SequenceTooShort("empty recurrent input".into()));
        }
        let wih = self.shape(p.w_ih).to_vec();
        let whh = self.shape(p.w_hh).to_vec();
        if wih.len() != 2 || !wih[0].is_multiple_of(4) || wih[1] != d_in {
            return Err(Error::shape("lstm", format!("w_ih {wih:?} for input dim {d_in}")));
        }
        let h = wih[0] / 4;
        if whh != [4 * h, h] || self.value(p.bias).len() != 4 * h {
            return Err(Error::shape("lstm", format!("w_hh {whh:?} for hidden {h}")));
        }
        let mut pre = vec![F::zero(); t_len * 4 * h];
        gemm(
            false,
            true,
            t_len,
            d_in,
            4 * h,
            F::one(),
            self.value(x).data(),
            self.value(p.w_ih).data(),
            F::zero(),
            &mut pre,
        );
        let bias = self.value(p.bias).data();
        let w_hh = self.value(p.w_hh).data();
        let mut gates = vec![F::zero(); t_len * 4 * h];
        let mut cells = vec![F::zero(); t_len * h];
        let mut out = vec![F::zero(); t_len * h];
        let mut a = vec![F::zero(); 4 * h];
        for t in 0..t_len {
            a.copy_from_slice(&pre[t * 4 * h..(t + 1) * 4 * h]);
            for (av, &b) in a.iter_mut().zip(bias) {
                *av += b;
            }
            if t > 0 {
                gemm(
                    false,
                    true,
                    1,
                    h,
                    4 * h,
                    F::one(),
                    &out[(t - 1) * h..t * h],
                    w_hh,
                    F::one(),
                    &mut a,
                );
            }
            let gt = &mut gates[t * 4 * h..(t + 1) * 4 * h];
            for j in 0..h {
                let i = sigmoid(a[j]);
                let f = sigmoid(a[h + j]);
                let c_hat = a[2 * h + j].tanh();
                let o = sigmoid(a[3 * h + j]);
                gt[j] = i;
                gt[h + j] = f;
                gt[2 * h + j] = c_hat;
                gt[3 * h + j] = o;
                let prev = if t > 0 { cells[(t - 1) * h + j] } else { F::zero() };
                let c = f * prev + i * c_hat;
                cells[t * h + j] = c;
                out[t * h + j] = o * c.tanh();
            }
        }
        let rg = self.any_requires_grad(&[x, p.w_ih, p.w_hh, p.bias]);
        Ok(self.push(
            Tensor::new(vec![t_len, h], out)?,
            Op::Lstm(LstmSaved { x, p, gates, cells }),
            rg,
        ))
    }

    /// Stacked LSTM layers.
    pub fn recurrent_sequence(&mut self, x: Var, layers: &[LstmParams]) -> Result<Var> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("at least one recurrent layer".into()));
        }
        layers.iter().try_fold(x, |h, &p| self.lstm(h, p))
    }
}

pub(crate) fn backward<F: Float>(s: &LstmSaved<F>, gout: &[F], g: &mut Grads<'_, F>) {
    let xs = g.value(s.x).shape();
    let (t_len, d_in) = (xs[0], xs[1]);
    let h = g.value(s.p.w_hh).shape()[1];
    let w_hh = g.value(s.p.w_hh).data();
    // output h_t is recomputed from saved gates and cells
    let hidden = |t: usize, j: usize| s.gates[t * 4 * h + 3 * h + j] * s.cells[t * h + j].tanh();

    let mut dpre = vec![F::zero(); t_len * 4 * h];
    let mut dh_next = vec![F::zero(); h];
    let mut dc_next = vec![F::zero(); h];
    let mut dw_hh = vec![F::zero(); 4 * h * h];
    let mut h_prev = vec![F::zero(); h];
    for t in (0..t_len).rev() {
        let gt = &s.gates[t * 4 * h..(t + 1) * 4 * h];
        let da = &mut dpre[t * 4 * h..(t + 1) * 4 * h];
        for j in 0..h {
            let (i, f, c_hat, o) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
            let c = s.cells[t * h + j];
            let tc = c.tanh();
            let prev = if t > 0 { s.cells[(t - 1) * h + j] } else { F::zero() };
            let dh = gout[t * h + j] + dh_next[j];
            let dc = dh * o * (F::one() - tc * tc) + dc_next[j];
            da[j] = dc * c_hat * i * (F::one() - i);
            da[h + j] = dc * prev * f * (F::one() - f);
            da[2 * h + j] = dc * i * (F::one() - c_hat * c_hat);
            da[3 * h + j] = dh * tc * o * (F::one() - o);
            dc_next[j] = dc * f;
        }
        if t > 0 {
            for (j, hp) in h_prev.iter_mut().enumerate() {
                *hp = hidden(t - 1, j);
            }
            // dW_hh += da ⊗ h_{t-1}
            gemm(false, false, 4 * h, 1, h, F::one(), da, &h_prev, F::one(), &mut dw_hh);
            // dh_{t-1} = W_hhᵀ da
            gemm(false, false, 1, 4 * h, h, F::one(), da, w_hh, F::zero(), &mut dh_next);
        } else {
            dh_next.iter_mut().for_each(|v| *v = F::zero());
        }
    }
    if let Some(d) = g.get(s.p.w_hh) {
        for (a, &b) in d.iter_mut().zip(&dw_hh) {
            *a += b;
        }
    }
    if let Some(db) = g.get(s.p.bias) {
        for row in dpre.chunks(4 * h) {
            for (a, &b) in db.iter_mut().zip(row) {
                *a += b;
            }
        }
    }
    if g.needs(s.p.w_ih) {
        let xv = g.value(s.x).data();
        let dw = g.get(s.p.w_ih).expect("needs grad");
        gemm(true, false, 4 * h, t_len, d_in, F::one(), &dpre, xv, F::one(), dw);
    }
    if g.needs(s.x) {
        let w_ih = g.value(s.p.w_ih).data();
        let dx = g.get(s.x).expect("needs grad");
        gemm(false, false, t_len, 4 * h, d_in, F::one(), &dpre, w_ih, F::one(), dx);
    }
}
