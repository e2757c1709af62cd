use crate::diff::{Float, ParamStore};

/// Adam with global-norm gradient clipping. Moments are kept in f64.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled to this global L2 norm when larger.
    pub clip_norm: Option<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, eps: f64, clip_norm: Option<f64>) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            eps,
            clip_norm,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Applies the accumulated gradients and returns their pre-clip norm.
    /// Gradients are left untouched; callers zero them.
    pub fn step<F: Float>(&mut self, params: &mut ParamStore<F>) -> f64 {
        if self.m.is_empty() {
            for id in params.ids() {
                let n = params.value(id).len();
                self.m.push(vec![0.0; n]);
                self.v.push(vec![0.0; n]);
            }
        }
        let norm = params
            .ids()
            .flat_map(|id| params.grad(id).data().iter().map(|g| g.f64() * g.f64()))
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let grad: Vec<f64> = params.grad(id).data().iter().map(|g| g.f64() * scale).collect();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((p, g), (mj, vj)) in params
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * g;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * g * g;
                let update = self.learning_rate * (*mj / bc1) / ((*vj / bc2).sqrt() + self.eps);
                *p = F::of(p.f64() - update);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;

    #[test]
    fn first_step_moves_each_weight_by_the_learning_rate() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        s.grad_mut(id).data_mut().copy_from_slice(&[0.3, -4.0, 0.0]);
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8, None);
        adam.step(&mut s);
        let w = s.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6 && w[2] == 0.5);
    }

    #[test]
    fn clipping_reports_the_raw_norm() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::zeros(&[2]));
        s.grad_mut(id).data_mut().copy_from_slice(&[3.0, 4.0]);
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8, Some(1.0));
        assert_eq!(adam.step(&mut s), 5.0);
    }
}
