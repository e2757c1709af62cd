use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{attention, conv, gemm, nce, norm, recurrent, Float, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    AddCol { x: Var, bias: Var },
    Scale(Var, F),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    Dropout { x: Var, mask: Vec<F> },
    Conv1d(conv::ConvSaved<F>),
    ChannelNorm(norm::ChannelNormSaved<F>),
    L2NormalizeRows(norm::RowNormSaved<F>),
    Lstm(recurrent::LstmSaved<F>),
    Attention(attention::AttentionSaved<F>),
    SegmentMean { x: Var, spans: Vec<(usize, usize)> },
    Nce(nce::NceSaved<F>),
}

pub(crate) struct Node<F> {
    pub(crate) value: Tensor<F>,
    pub(crate) op: Op<F>,
    pub(crate) requires_grad: bool,
}

/// Gradient buffers handed to per-op backward rules.
pub(crate) struct Grads<'a, F> {
    nodes: &'a [Node<F>],
    bufs: &'a mut [Option<Tensor<F>>],
}

impl<'a, F: Float> Grads<'a, F> {
    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulation buffer for `v`, or `None` when `v` needs no gradient.
    pub(crate) fn get(&mut self, v: Var) -> Option<&mut [F]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut self.bufs[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        slot.as_mut().map(Tensor::data_mut)
    }

    pub(crate) fn value(&self, v: Var) -> &'a Tensor<F> {
        &self.nodes[v.0].value
    }
}

/// Operation tape for one forward/backward pass.
pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
    leaf_grads: HashMap<usize, Tensor<F>>,
    bindings: Vec<(Var, ParamId)>,
    bound: HashMap<ParamId, Var>,
    training: bool,
    dropout_rng: Option<ChaCha8Rng>,
    freed: bool,
    first_non_finite: Option<String>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    /// A graph in evaluation mode (dropout disabled).
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            bindings: Vec::new(),
            bound: HashMap::new(),
            training: false,
            dropout_rng: None,
            freed: false,
            first_non_finite: None,
        }
    }

    /// A graph in training mode whose dropout masks come from a stream keyed
    /// by `(seed, step)`.
    pub fn training(seed: u64, step: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        Graph {
            training: true,
            dropout_rng: Some(rng),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.leaf_grads.get(&v.0)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), true);
        self.bindings.push((v, id));
        self.bound.insert(id, v);
        v
    }

    /// Adds the gradients of bound parameter leaves into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<F>) {
        for &(v, id) in &self.bindings {
            if let Some(g) = self.leaf_grads.get(&v.0) {
                for (dst, &src) in store.grad_mut(id).data_mut().iter_mut().zip(g.data()) {
                    *dst += src;
                }
            }
        }
    }

    /// Drops recorded activations; subsequent `backward` calls fail.
    pub fn release(&mut self) {
        for node in &mut self.nodes {
            node.op = Op::Leaf;
        }
        self.freed = true;
    }

    /// Fails if any recorded value was non-finite.
    pub fn check_finite(&self) -> Result<()> {
        match &self.first_non_finite {
            Some(op) => Err(Error::NonFinite(op.clone())),
            None => Ok(()),
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(op_name(&op).to_string());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn node_op(&self, v: Var) -> &Op<F> {
        &self.nodes[v.0].op
    }

    pub(crate) fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(
            ta,
            tb,
            m,
            k,
            n,
            F::one(),
            self.value(a).data(),
            self.value(b).data(),
            F::zero(),
            &mut out,
        );
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x · wᵀ + bias` for `x: [n × in]`, `w: [out × in]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, w, false, true)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    /// Adds `bias[c]` to every row of `x: [r × c]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "add_row")?;
        if self.value(bias).len() != c {
            return Err(Error::shape(
                "add_row",
                format!("bias of {} for {c} columns", self.value(bias).len()),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            for (v, &bv) in data[i * c..(i + 1) * c].iter_mut().zip(b) {
                *v += bv;
            }
        }
        let rg = self.any_requires_grad(&[x, bias]);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::AddRow { x, bias }, rg))
    }

    /// Adds `bias[r]` to every column of `x: [r × c]`.
    pub fn add_col(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "add_col")?;
        if self.value(bias).len() != r {
            return Err(Error::shape(
                "add_col",
                format!("bias of {} for {r} rows", self.value(bias).len()),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            let bv = b[i];
            data[i * c..(i + 1) * c].iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.any_requires_grad(&[x, bias]);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::AddCol { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.requires_grad(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        let rg = self.requires_grad(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s: F = self.value(x).data().iter().copied().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s / F::of(n as f64)), Op::Mean(x), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.matrix_dims(x, "transpose")?;
        let t = self.value(x).transpose();
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "softmax")?;
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut data[i * c..(i + 1) * c]);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::Softmax(x), rg))
    }

    /// Inverted dropout; the identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let keep = F::of(1.0 / (1.0 - p));
        let rng = self
            .dropout_rng
            .as_mut()
            .expect("training graphs carry a dropout stream");
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let t = Tensor::new(
            self.shape(x).to_vec(),
            zip_map(self.value(x).data(), &mask, |a, m| a * m),
        )?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// Means of row ranges `[start, end)` of `x: [T × d]`, giving `[J × d]`.
    pub fn segment_mean(&mut self, x: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let (t, d) = self.matrix_dims(x, "segment_mean")?;
        if spans.iter().any(|&(s, e)| s >= e || e > t) {
            return Err(Error::shape("segment_mean", "span outside sequence or empty"));
        }
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); spans.len() * d];
        for (j, &(s, e)) in spans.iter().enumerate() {
            let inv = F::one() / F::of((e - s) as f64);
            let dst = &mut out[j * d..(j + 1) * d];
            for r in s..e {
                for (o, &v) in dst.iter_mut().zip(&xv[r * d..(r + 1) * d]) {
                    *o += v;
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::new(vec![spans.len(), d], out)?,
            Op::SegmentMean {
                x,
                spans: spans.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse-mode propagation from a scalar. Leaf gradients accumulate
    /// across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.freed {
            return Err(Error::GraphFreed);
        }
        self.check_finite()?;
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut bufs: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        bufs[loss.0] = Some(Tensor::full(loss_value.shape(), F::one()));
        for idx in (0..=loss.0).rev() {
            let Some(gout) = bufs[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    if !gout.is_finite() {
                        return Err(Error::NonFinite("backward".into()));
                    }
                    match self.leaf_grads.get_mut(&idx) {
                        Some(acc) => {
                            for (a, &g) in acc.data_mut().iter_mut().zip(gout.data()) {
                                *a += g;
                            }
                        }
                        None => {
                            self.leaf_grads.insert(idx, gout);
                        }
                    }
                }
                continue;
            }
            let mut grads = Grads {
                nodes: &self.nodes[..idx],
                bufs: &mut bufs[..idx],
            };
            backward_op(node, gout.data(), &mut grads)?;
        }
        Ok(())
    }
}

fn backward_op<F: Float>(node: &Node<F>, gout: &[F], g: &mut Grads<'_, F>) -> Result<()> {
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb } => {
            let (ar, ac) = (g.value(a).rows(), g.value(a).cols());
            let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
            let n = node.value.cols();
            if g.needs(a) {
                let bv = g.value(b).data();
                let da = g.get(a).expect("needs grad");
                if ta {
                    gemm(tb, true, k, n, m, F::one(), bv, gout, F::one(), da);
                } else {
                    gemm(false, !tb, m, n, k, F::one(), gout, bv, F::one(), da);
                }
            }
            if g.needs(b) {
                let av = g.value(a).data();
                let db = g.get(b).expect("needs grad");
                if tb {
                    gemm(true, ta, n, m, k, F::one(), gout, av, F::one(), db);
                } else {
                    gemm(!ta, false, k, m, n, F::one(), av, gout, F::one(), db);
                }
            }
        }
        &Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(d) = g.get(v) {
                    add_into(d, gout);
                }
            }
        }
        &Op::Mul(a, b) => {
            let av = g.value(a).data();
            let bv = g.value(b).data();
            if let Some(d) = g.get(a) {
                for ((d, &go), &o) in d.iter_mut().zip(gout).zip(bv) {
                    *d += go * o;
                }
            }
            if let Some(d) = g.get(b) {
                for ((d, &go), &o) in d.iter_mut().zip(gout).zip(av) {
                    *d += go * o;
                }
            }
        }
        &Op::AddRow { x, bias } => {
            if let Some(d) = g.get(x) {
                add_into(d, gout);
            }
            let c = node.value.cols();
            if let Some(d) = g.get(bias) {
                for row in gout.chunks(c) {
                    add_into(d, row);
                }
            }
        }
        &Op::AddCol { x, bias } => {
            if let Some(d) = g.get(x) {
                add_into(d, gout);
            }
            let c = node.value.cols();
            if let Some(d) = g.get(bias) {
                for (db, row) in d.iter_mut().zip(gout.chunks(c)) {
                    *db += row.iter().copied().sum::<F>();
                }
            }
        }
        &Op::Scale(x, s) => {
            if let Some(d) = g.get(x) {
                for (d, &go) in d.iter_mut().zip(gout) {
                    *d += go * s;
                }
            }
        }
        &Op::Relu(x) => {
            let xv = g.value(x).data();
            if let Some(d) = g.get(x) {
                for ((d, &go), &v) in d.iter_mut().zip(gout).zip(xv) {
                    if v > F::zero() {
                        *d += go;
                    }
                }
            }
        }
        &Op::Sum(x) => {
            if let Some(d) = g.get(x) {
                let go = gout[0];
                d.iter_mut().for_each(|v| *v += go);
            }
        }
        &Op::Mean(x) => {
            let n = g.value(x).len().max(1);
            if let Some(d) = g.get(x) {
                let go = gout[0] / F::of(n as f64);
                d.iter_mut().for_each(|v| *v += go);
            }
        }
        &Op::Transpose(x) => {
            let (r, c) = (node.value.rows(), node.value.cols());
            if let Some(d) = g.get(x) {
                // node is [r × c]; x is [c × r]
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] += gout[i * c + j];
                    }
                }
            }
        }
        &Op::Reshape(x) => {
            if let Some(d) = g.get(x) {
                add_into(d, gout);
            }
        }
        &Op::Softmax(x) => {
            let c = node.value.cols();
            let y = node.value.data();
            if let Some(d) = g.get(x) {
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.chunks(c)).zip(gout.chunks(c)) {
                    let dotp: F = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv += yv * (gv - dotp);
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(d) = g.get(*x) {
                for ((d, &go), &m) in d.iter_mut().zip(gout).zip(mask) {
                    *d += go * m;
                }
            }
        }
        Op::SegmentMean { x, spans } => {
            let dcols = node.value.cols();
            if let Some(d) = g.get(*x) {
                for (j, &(s, e)) in spans.iter().enumerate() {
                    let inv = F::one() / F::of((e - s) as f64);
                    let grow = &gout[j * dcols..(j + 1) * dcols];
                    for r in s..e {
                        for (dv, &gv) in d[r * dcols..(r + 1) * dcols].iter_mut().zip(grow) {
                            *dv += gv * inv;
                        }
                    }
                }
            }
        }
        Op::Conv1d(saved) => conv::backward(saved, gout, g),
        Op::ChannelNorm(saved) => norm::channel_norm_backward(saved, gout, g),
        Op::L2NormalizeRows(saved) => norm::row_norm_backward(saved, &node.value, gout, g),
        Op::Lstm(saved) => recurrent::backward(saved, gout, g),
        Op::Attention(saved) => attention::backward(saved, gout, g),
        Op::Nce(saved) => nce::backward(saved, gout, g),
    }
    Ok(())
}

fn op_name<F>(op: &Op<F>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::AddRow { .. } => "add_row",
        Op::AddCol { .. } => "add_col",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::Transpose(_) => "transpose",
        Op::Reshape(_) => "reshape",
        Op::Softmax(_) => "softmax",
        Op::Dropout { .. } => "dropout",
        Op::Conv1d(_) => "conv1d",
        Op::ChannelNorm(_) => "channel_norm",
        Op::L2NormalizeRows(_) => "l2_normalize_rows",
        Op::Lstm(_) => "lstm",
        Op::Attention(_) => "attention",
        Op::SegmentMean { .. } => "segment_mean",
        Op::Nce(_) => "nce",
    }
}

pub(crate) fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map<F: Float>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn softmax_in_place<F: Float>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}
