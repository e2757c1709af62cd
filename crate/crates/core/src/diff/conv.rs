use serde::{Deserialize, Serialize};

use super::graph::{Grads, Op};
use super::{gemm, Float, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Padding scheme for [`Graph::conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    /// Zero padding sized so the output has `ceil(len / stride)` frames; when
    /// the total padding is odd the extra sample goes on the left.
    SameStrided,
    /// No padding: `floor((len - width) / stride) + 1` frames.
    Valid,
}

/// Output length and left padding of a strided convolution.
pub fn conv_output_len(
    len: usize,
    width: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    if width < stride {
        return Err(Error::InvalidArgument(format!(
            "width {width} smaller than stride {stride}"
        )));
    }
    match padding {
        Padding::SameStrided => {
            let out = len.div_ceil(stride);
            let total = ((out.max(1) - 1) * stride + width).saturating_sub(len);
            Ok((out, total - total / 2))
        }
        Padding::Valid => {
            if len < width {
                return Err(Error::shape(
                    "conv1d",
                    format!("input length {len} shorter than width {width}"),
                ));
            }
            Ok(((len - width) / stride + 1, 0))
        }
    }
}

pub(crate) struct ConvSaved<F> {
    x: Var,
    w: Var,
    b: Option<Var>,
    cols: Vec<F>,
    stride: usize,
    pad_left: usize,
}

impl<F: Float> Graph<F> {
    /// Strided 1-D convolution of `x: [c_in × len]` with
    /// `w: [c_out × c_in × width]` plus an optional per-channel bias.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 3 {
            return Err(Error::shape(
                "conv1d",
                format!("input {xs:?}, weights {ws:?}"),
            ));
        }
        let (c_in, len) = (xs[0], xs[1]);
        let (c_out, w_in, width) = (ws[0], ws[1], ws[2]);
        if w_in != c_in {
            return Err(Error::shape(
                "conv1d",
                format!("weights expect {w_in} input channels, got {c_in}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != c_out {
                return Err(Error::shape("conv1d", "bias length differs from c_out"));
            }
        }
        let (out_len, pad_left) = conv_output_len(len, width, stride, padding)?;
        let cols = im2col(self.value(x).data(), c_in, len, width, stride, pad_left, out_len);
        let mut out = vec![F::zero(); c_out * out_len];
        gemm(
            false,
            false,
            c_out,
            c_in * width,
            out_len,
            F::one(),
            self.value(w).data(),
            &cols,
            F::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (row, &bias) in out.chunks_mut(out_len).zip(bv) {
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        let mut vars = vec![x, w];
        vars.extend(b);
        let rg = self.any_requires_grad(&vars);
        let saved = ConvSaved {
            x,
            w,
            b,
            cols,
            stride,
            pad_left,
        };
        Ok(self.push(
            Tensor::new(vec![c_out, out_len], out)?,
            Op::Conv1d(saved),
            rg,
        ))
    }
}

fn im2col<F: Float>(
    x: &[F],
    c_in: usize,
    len: usize,
    width: usize,
    stride: usize,
    pad_left: usize,
    out_len: usize,
) -> Vec<F> {
    let mut cols = vec![F::zero(); c_in * width * out_len];
    for c in 0..c_in {
        let xrow = &x[c * len..(c + 1) * len];
        for k in 0..width {
            let dst = &mut cols[(c * width + k) * out_len..(c * width + k + 1) * out_len];
            for (o, d) in dst.iter_mut().enumerate() {
                let pos = (o * stride + k) as isize - pad_left as isize;
                if pos >= 0 && (pos as usize) < len {
                    *d = xrow[pos as usize];
                }
            }
        }
    }
    cols
}

pub(crate) fn backward<F: Float>(s: &ConvSaved<F>, gout: &[F], g: &mut Grads<'_, F>) {
    let xs = g.value(s.x).shape();
    let (c_in, len) = (xs[0], xs[1]);
    let ws = g.value(s.w).shape();
    let (c_out, width) = (ws[0], ws[2]);
    let out_len = gout.len() / c_out;
    let k = c_in * width;
    if let Some(dw) = g.get(s.w) {
        gemm(false, true, c_out, out_len, k, F::one(), gout, &s.cols, F::one(), dw);
    }
    if let Some(b) = s.b {
        if let Some(db) = g.get(b) {
            for (d, row) in db.iter_mut().zip(gout.chunks(out_len)) {
                *d += row.iter().copied().sum::<F>();
            }
        }
    }
    if g.needs(s.x) {
        let wv = g.value(s.w).data();
        let mut dcols = vec![F::zero(); k * out_len];
        gemm(true, false, k, c_out, out_len, F::one(), wv, gout, F::zero(), &mut dcols);
        let dx = g.get(s.x).expect("needs grad");
        for c in 0..c_in {
            for kk in 0..width {
                let src = &dcols[(c * width + kk) * out_len..(c * width + kk + 1) * out_len];
                for (o, &v) in src.iter().enumerate() {
                    let pos = (o * s.stride + kk) as isize - s.pad_left as isize;
                    if pos >= 0 && (pos as usize) < len {
                        dx[c * len + pos as usize] += v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_strided_stack_reduces_20480_to_128() {
        let mut len = 20480;
        let mut lens = Vec::new();
        for (w, s) in [(10, 5), (8, 4), (4, 2), (4, 2), (4, 2)] {
            len = conv_output_len(len, w, s, Padding::SameStrided).unwrap().0;
            lens.push(len);
        }
        assert_eq!(lens, vec![4096, 1024, 512, 256, 128]);
    }

    #[test]
    fn valid_padding_length() {
        assert_eq!(conv_output_len(10, 10, 5, Padding::Valid).unwrap(), (1, 0));
        assert!(conv_output_len(9, 10, 5, Padding::Valid).is_err());
    }

    #[test]
    fn rejects_bad_stride() {
        assert!(conv_output_len(10, 4, 0, Padding::Valid).is_err());
        assert!(conv_output_len(10, 2, 4, Padding::Valid).is_err());
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut g = Graph::<f64>::new();
        let c = 3;
        let x = g.leaf(Tensor::from_fn(&[c, 7], |i| i as f64 * 0.5 - 2.0), false);
        let w = g.leaf(
            Tensor::from_fn(&[c, c, 1], |i| if i / c == i % c { 1.0 } else { 0.0 }),
            false,
        );
        let y = g.conv1d(x, w, None, 1, Padding::SameStrided).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let y = g.conv1d(x, w, None, 1, Padding::Valid).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 8]), false);
        let w = g.leaf(Tensor::zeros(&[4, 3, 2]), false);
        assert!(matches!(
            g.conv1d(x, w, None, 2, Padding::Valid),
            Err(Error::Shape { .. })
        ));
    }
}
