//! The full multi-level loss of a miniature model against central
//! differences, with boundaries frozen to fixed spans.

use cpcseg::diff::{check_params_extended, Float, Graph, ParamStore, ScalarFn, Var};
use cpcseg::model::{DetectorConfig, EncoderConfig, HeadKind, Model, ModelConfig};
use cpcseg::trainer::{chunk_loss, Instrumentation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CONFIGS: u64 = 50;
pub const EPSILON: f64 = 1e-7;
pub const TOL: f64 = 1e-4;

fn miniature(rng: &mut ChaCha8Rng) -> ModelConfig {
    let k = rng.random_range(1..=3);
    ModelConfig {
        encoder: EncoderConfig {
            channels: 3,
            widths: vec![4, 4],
            strides: vec![4, 2],
            chunk_samples: 256,
            ..EncoderConfig::default()
        },
        context_layers: 1,
        context_units: 2,
        segment_hidden: 3,
        segment_context_layers: 1,
        k,
        m: k + rng.random_range(0..3),
        k_s: 1,
        m_s: 2,
        head_kind: HeadKind::Linear,
        head_init_scale: 1.0,
        negatives: 4,
        segment_negatives: 3,
        adjacent_loss_enabled: true,
        adjacent_negatives: 3,
        adjacent_temperature: 0.5,
        oracle_boundaries: true,
        detector: DetectorConfig::default(),
        dropout_p: 0.0,
        ..ModelConfig::default()
    }
}

struct MultiLevel {
    config: ModelConfig,
    samples: Vec<f64>,
    cuts: Vec<usize>,
    neg_seed: u64,
}

impl ScalarFn for MultiLevel {
    fn eval<F: Float>(&self, g: &mut Graph<F>, params: &ParamStore<F>) -> cpcseg::Result<Var> {
        let model = Model::from_params(self.config.clone(), params.clone())?;
        let samples: Vec<F> = self.samples.iter().map(|&v| F::of(v)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.neg_seed);
        let mut inst = Instrumentation::default();
        Ok(chunk_loss(g, &model, &samples, Some(&self.cuts), &mut rng, &mut inst)?.total)
    }
}

/// Relative error of one random miniature configuration, with its
/// parameter count.
pub fn run(cfg: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + cfg);
    let config = miniature(&mut rng);
    let model = Model::<f64>::new(config.clone(), cfg).unwrap();
    let f = MultiLevel {
        config,
        samples: (0..256).map(|_| rng.random_range(-1.0..1.0)).collect(),
        cuts: (2..30).filter(|_| rng.random_bool(0.3)).collect(),
        neg_seed: rng.random(),
    };
    let r = check_params_extended(&model.params, EPSILON, None, &f).unwrap();
    (r.max_rel_error, model.params.num_elements())
}
