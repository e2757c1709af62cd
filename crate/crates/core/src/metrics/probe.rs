use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 10,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
}

/// Fits a softmax-regression classifier on frozen `[n × d]` features and
/// reports held-out accuracy.
///
/// Features are standardised with training-split statistics (dimensions
/// with no spread are centred only), then the affine map is trained by
/// minibatch gradient descent with momentum.
pub fn linear_probe<F: Float>(
    train: (&Tensor<F>, &[usize]),
    test: (&Tensor<F>, &[usize]),
    n_classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    let (xtr, ytr) = train;
    let (xte, yte) = test;
    for (x, y) in [train, test] {
        if x.rank() != 2 || x.rows() != y.len() {
            return Err(Error::shape(
                "linear_probe",
                format!("{} labels for features {:?}", y.len(), x.shape()),
            ));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside {n_classes} classes"
            )));
        }
    }
    if xtr.rows() == 0 || xte.rows() == 0 || xtr.cols() != xte.cols() {
        return Err(Error::InvalidArgument("probe needs nonempty splits of equal width".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("probe batch size must be positive".into()));
    }
    let d = xtr.cols();
    let n = xtr.rows();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(xtr.row(i)) {
            *m += v.f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut inv_std = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in inv_std.iter_mut().zip(xtr.row(i)).zip(&mean) {
            *s += (v.f64() - m).powi(2);
        }
    }
    for s in inv_std.iter_mut() {
        let sd = (*s / n as f64).sqrt();
        *s = if sd > 1e-8 { 1.0 / sd } else { 1.0 };
    }
    let standardise = |x: &Tensor<F>| -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.rows() {
            out.extend(
                x.row(i)
                    .iter()
                    .zip(&mean)
                    .zip(&inv_std)
                    .map(|((v, m), s)| (v.f64() - m) * s),
            );
        }
        out
    };
    let (ftr, fte) = (standardise(xtr), standardise(xte));

    let c = n_classes;
    let mut w = vec![0.0; c * d];
    let mut b = vec![0.0; c];
    let mut vw = vec![0.0; c * d];
    let mut vb = vec![0.0; c];
    let mut gw = vec![0.0; c * d];
    let mut gb = vec![0.0; c];
    let mut logits = vec![0.0; c];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            gw.iter_mut().for_each(|g| *g = 0.0);
            gb.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let x = &ftr[i * d..(i + 1) * d];
                scores(&w, &b, x, &mut logits);
                crate::diff::softmax_in_place(&mut logits);
                logits[ytr[i]] -= 1.0;
                for (k, &dl) in logits.iter().enumerate() {
                    gb[k] += dl;
                    for (g, &xv) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *g += dl * xv;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for (p, (v, g)) in w.iter_mut().zip(vw.iter_mut().zip(&gw)) {
                *v = config.momentum * *v - config.learning_rate * g * scale;
                *p += *v;
            }
            for (p, (v, g)) in b.iter_mut().zip(vb.iter_mut().zip(&gb)) {
                *v = config.momentum * *v - config.learning_rate * g * scale;
                *p += *v;
            }
        }
    }
    let accuracy = |f: &[f64], y: &[usize]| {
        let mut logits = vec![0.0; c];
        let correct = y
            .iter()
            .enumerate()
            .filter(|&(i, &label)| {
                scores(&w, &b, &f[i * d..(i + 1) * d], &mut logits);
                argmax(&logits) == label
            })
            .count();
        correct as f64 / y.len() as f64
    };
    Ok(ProbeResult {
        accuracy: accuracy(&fte, yte),
        train_accuracy: accuracy(&ftr, ytr),
    })
}

fn scores(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (k, o) in out.iter_mut().enumerate() {
        *o = b[k] + w[k * d..(k + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

/// Index of the largest value; the first one on ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn labels(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..c)).collect()
    }

    #[test]
    fn one_hot_features_are_learned_in_three_epochs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ytr, yte) = (labels(600, 8, &mut rng), labels(200, 8, &mut rng));
        let onehot = |y: &[usize]| Tensor::<f64>::from_fn(&[y.len(), 8], |i| (i % 8 == y[i / 8]) as u8 as f64);
        let cfg = ProbeConfig {
            epochs: 3,
            ..ProbeConfig::default()
        };
        let r = linear_probe((&onehot(&ytr), &ytr), (&onehot(&yte), &yte), 8, &cfg).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn constant_features_predict_the_majority_class() {
        let y: Vec<usize> = (0..500).map(|i| if i % 5 == 0 { 1 } else { 2 }).collect();
        let x = Tensor::<f64>::full(&[500, 4], 0.7);
        let r = linear_probe((&x, &y), (&x, &y), 3, &ProbeConfig::default()).unwrap();
        assert_eq!(r.accuracy, 0.8);
    }

    #[test]
    fn mismatched_labels_are_rejected() {
        let x = Tensor::<f64>::zeros(&[3, 2]);
        assert!(linear_probe((&x, &[0, 1]), (&x, &[0, 1, 1]), 2, &ProbeConfig::default()).is_err());
    }
}
