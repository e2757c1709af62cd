//! Reverse-mode gradients of every primitive against central differences,
//! over randomised shapes.

use cpcseg::diff::{
    attention_layer, check_params, AttentionParams, Graph, LstmParams, NceTerms, Padding,
    ParamStore, Tensor, Var,
};
use cpcseg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CONFIGS: u64 = 50;
pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
}

/// Reduces an arbitrary output to a scalar with fixed random weights so every
/// output coordinate matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = randn(&mut rng, g.shape(y), 1.0);
    let w = g.constant(w);
    g.dot(y, w)
}

pub type Check = fn(&mut ChaCha8Rng, u64) -> f64;

pub const PRIMITIVES: &[(&str, Check)] = &[
    ("matmul", matmul),
    ("elementwise", elementwise),
    ("conv1d", conv1d),
    ("channel_norm", channel_norm),
    ("relu", relu),
    ("dropout", dropout),
    ("lstm", lstm),
    ("attention", attention),
    ("attention_layer", attention_block),
    ("nce", nce),
];

/// Worst relative error over `CONFIGS` configurations and the configurations
/// at or above `TOL`.
pub fn run_configs(name: &str, check: Check) -> (f64, Vec<u64>) {
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for cfg in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg * 7919 + name.len() as u64);
        let err = check(&mut rng, cfg);
        worst = worst.max(err);
        if !(err < TOL) {
            failed.push(cfg);
        }
    }
    (worst, failed)
}

pub fn matmul(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let (m, k, n) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
    let (ta, tb) = (rng.random::<bool>(), rng.random::<bool>());
    let mut s = ParamStore::new();
    let a = s.add("a", randn(rng, &if ta { [k, m] } else { [m, k] }, 1.0));
    let b = s.add("b", randn(rng, &if tb { [n, k] } else { [k, n] }, 1.0));
    check_params(&s, EPS, None, |g, s| {
        let (a, b) = (g.param(s, a), g.param(s, b));
        let y = g.matmul_t(a, b, ta, tb)?;
        project(g, y, seed)
    })
    .unwrap()
    .max_rel_error
}

pub fn elementwise(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let (r, c) = (rng.random_range(1..5), rng.random_range(1..6));
    let mut s = ParamStore::new();
    let a = s.add("a", randn(rng, &[r, c], 1.0));
    let b = s.add("b", randn(rng, &[r, c], 1.0));
    let row_bias = s.add("rb", randn(rng, &[c], 1.0));
    let col_bias = s.add("cb", randn(rng, &[r], 1.0));
    check_params(&s, EPS, None, |g, s| {
        let (a, b) = (g.param(s, a), g.param(s, b));
        let x = g.mul(a, b)?;
        let x = g.add(x, a)?;
        let rb = g.param(s, row_bias);
        let x = g.add_row(x, rb)?;
        let cb = g.param(s, col_bias);
        let x = g.add_col(x, cb)?;
        let x = g.scale(x, 0.7);
        let sm = g.softmax(x)?;
        let t = g.transpose(x)?;
        let t = g.reshape(t, &[r * c])?;
        let p1 = project(g, sm, seed)?;
        let p2 = project(g, t, seed + 1)?;
        let m = g.mean(x);
        let s1 = g.add(p1, p2)?;
        g.add(s1, m)
    })
    .unwrap()
    .max_rel_error
}

pub fn conv1d(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let c_in = rng.random_range(1..4);
    let c_out = rng.random_range(1..4);
    let stride = rng.random_range(1..4);
    let width = stride + rng.random_range(0..3);
    let len = width + rng.random_range(0..12);
    let padding = if rng.random::<bool>() { Padding::SameStrided } else { Padding::Valid };
    let mut s = ParamStore::new();
    let x = s.add("x", randn(rng, &[c_in, len], 1.0));
    let w = s.add("w", randn(rng, &[c_out, c_in, width], 1.0));
    let b = s.add("b", randn(rng, &[c_out], 1.0));
    check_params(&s, EPS, None, |g, s| {
        let (x, w, b) = (g.param(s, x), g.param(s, w), g.param(s, b));
        let y = g.conv1d(x, w, Some(b), stride, padding)?;
        project(g, y, seed)
    })
    .unwrap()
    .max_rel_error
}

pub fn channel_norm(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let (c, len) = (rng.random_range(2..7), rng.random_range(1..6));
    let mut s = ParamStore::new();
    let x = s.add("x", randn(rng, &[c, len], 2.0));
    let gain = s.add("g", randn(rng, &[c], 1.5));
    let bias = s.add("b", randn(rng, &[c], 1.0));
    check_params(&s, EPS, None, |g, s| {
        let (x, gn, b) = (g.param(s, x), g.param(s, gain), g.param(s, bias));
        let y = g.channel_norm(x, gn, b)?;
        project(g, y, seed)
    })
    .unwrap()
    .max_rel_error
}

pub fn relu(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let n = rng.random_range(1..12);
    let mut s = ParamStore::new();
    // keep inputs away from the kink at zero
    let x = s.add(
        "x",
        Tensor::from_fn(&[1, n], |_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random::<bool>() { v } else { -v }
        }),
    );
    check_params(&s, EPS, None, |g, s| {
        let x = g.param(s, x);
        let y = g.relu(x);
        project(g, y, seed)
    })
    .unwrap()
    .max_rel_error
}

/// A training-mode graph reproduces its mask for a fixed (seed, step).
pub fn dropout(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let n = rng.random_range(1..12);
    let mut s = ParamStore::new();
    let x = s.add("x", randn(rng, &[1, n], 1.0));
    let mut store = s.clone();
    let mut g = Graph::training(seed, 3);
    let xv = g.param(&store, x);
    let y = g.dropout(xv, 0.3).unwrap();
    let l = project(&mut g, y, seed).unwrap();
    g.backward(l).unwrap();
    g.accumulate_into(&mut store);
    let analytic = store.grad(x).clone();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let eval = |delta: f64| {
            let mut p = s.clone();
            p.value_mut(x).data_mut()[i] += delta;
            let mut g = Graph::training(seed, 3);
            let xv = g.param(&p, x);
            let y = g.dropout(xv, 0.3).unwrap();
            let l = project(&mut g, y, seed).unwrap();
            g.value(l).item()
        };
        let num = (eval(EPS) - eval(-EPS)) / (2.0 * EPS);
        let a = analytic.data()[i];
        worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-8));
    }
    worst
}

pub fn lstm(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let t = rng.random_range(1..6);
    let d_in = rng.random_range(1..4);
    let h = rng.random_range(1..4);
    let layers = rng.random_range(1..3);
    let mut s = ParamStore::new();
    let x = s.add("x", randn(rng, &[t, d_in], 1.0));
    let mut ids = Vec::new();
    let mut d = d_in;
    for l in 0..layers {
        ids.push((
            s.add(format!("wih{l}"), randn(rng, &[4 * h, d], 0.8)),
            s.add(format!("whh{l}"), randn(rng, &[4 * h, h], 0.8)),
            s.add(format!("b{l}"), randn(rng, &[4 * h], 0.5)),
        ));
        d = h;
    }
    check_params(&s, EPS, None, |g, s| {
        let x = g.param(s, x);
        let ps: Vec<LstmParams> = ids
            .iter()
            .map(|&(a, b, c)| LstmParams {
                w_ih: g.param(s, a),
                w_hh: g.param(s, b),
                bias: g.param(s, c),
            })
            .collect();
        let y = g.recurrent_sequence(x, &ps)?;
        project(g, y, seed)
    })
    .unwrap()
    .max_rel_error
}

pub fn attention(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let heads = rng.random_range(1..3);
    let d = heads * rng.random_range(1..4);
    let tq = rng.random_range(1..5);
    let tk = if rng.random::<bool>() { tq } else { rng.random_range(1..5) };
    let causal = tk == tq && rng.random::<bool>();
    let mut s = ParamStore::new();
    let q = s.add("q", randn(rng, &[tq, d], 1.0));
    let k = s.add("k", randn(rng, &[tk, d], 1.0));
    let v = s.add("v", randn(rng, &[tk, d], 1.0));
    check_params(&s, EPS, None, |g, s| {
        let (q, k, v) = (g.param(s, q), g.param(s, k), g.param(s, v));
        let y = g.multi_head_attention(q, k, v, heads, causal)?;
        project(g, y, seed)
    })
    .unwrap()
    .max_rel_error
}

pub fn attention_block(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let heads = rng.random_range(1..3);
    let d = heads * rng.random_range(1..3);
    let ff = rng.random_range(1..5);
    let t = rng.random_range(1..5);
    let mut s = ParamStore::new();
    let x = s.add("x", randn(rng, &[t, d], 1.0));
    let lin = |s: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, name: &str, o: usize, i: usize| {
        (
            s.add(format!("{name}.w"), randn(rng, &[o, i], 0.7)),
            s.add(format!("{name}.b"), randn(rng, &[o], 0.3)),
        )
    };
    let q = lin(&mut s, rng, "q", d, d);
    let wk = s.add("k.w", randn(rng, &[d, d], 0.7));
    let v = lin(&mut s, rng, "v", d, d);
    let o = lin(&mut s, rng, "o", d, d);
    let f1 = lin(&mut s, rng, "f1", ff, d);
    let f2 = lin(&mut s, rng, "f2", d, ff);
    check_params(&s, EPS, None, |g, s| {
        let x = g.param(s, x);
        let mut p = |id| g.param(s, id);
        let params = AttentionParams {
            wq: p(q.0),
            bq: p(q.1),
            wk: p(wk),
            wv: p(v.0),
            bv: p(v.1),
            wo: p(o.0),
            bo: p(o.1),
            w1: p(f1.0),
            b1: p(f1.1),
            w2: p(f2.0),
            b2: p(f2.1),
        };
        let y = attention_layer(g, &params, x, x, heads, true, 0.0)?;
        project(g, y, seed)
    })
    .unwrap()
    .max_rel_error
}

pub fn nce(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let (t, d) = (rng.random_range(3..8), rng.random_range(2..5));
    let mut s = ParamStore::new();
    let z = s.add("z", randn(rng, &[t, d], 1.0));
    let mut cuts: Vec<usize> = (1..t).filter(|_| rng.random::<bool>()).collect();
    cuts.insert(0, 0);
    cuts.push(t);
    let spans: Vec<(usize, usize)> = cuts.windows(2).map(|w| (w[0], w[1])).collect();
    let mut terms = NceTerms::new();
    for row in 0..t {
        let pos = rng.random_range(0..t);
        let negs: Vec<usize> = (0..3).map(|_| rng.random_range(0..t)).collect();
        terms.push(row, pos, &negs, rng.random_range(0.1..1.0));
    }
    let _ = seed;
    check_params(&s, EPS, None, |g, s| {
        let z = g.param(s, z);
        let cos = g.cosine_similarity(z, z)?;
        let cos = g.scale(cos, 3.0);
        let l1 = g.nce_loss(cos, terms.clone())?;
        let seg = g.segment_mean(z, &spans)?;
        let seg_scores = g.matmul_t(z, seg, false, true)?;
        let mut seg_terms = NceTerms::new();
        for row in 0..t {
            seg_terms.push(row, row % spans.len(), &[(row + 1) % spans.len()], 1.0);
        }
        let l2 = g.nce_loss(seg_scores, seg_terms)?;
        g.add(l1, l2)
    })
    .unwrap()
    .max_rel_error
}
