//! Frame encoder, context builders, segment encoder and prediction heads.

mod config;

pub use config::{DetectorConfig, EncoderConfig, HeadKind, ModelConfig, Variant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diff::{
    attention_layer, AttentionParams, Float, Graph, LstmParams, ParamId, ParamStore, Tensor, Var,
};
use crate::error::{Error, Result};

/// Milliseconds per latent frame at 16 kHz with a 160-sample hop.
pub const HOP_MS: usize = 10;

/// Encoded frames of one chunk, one row per frame.
#[derive(Clone, Debug)]
pub struct LatentSequence<F> {
    pub vectors: Tensor<F>,
    pub hop_ms: usize,
    /// First input sample of the chunk within its utterance.
    pub origin_sample: usize,
}

/// Causal summaries aligned one-to-one with a [`LatentSequence`].
#[derive(Clone, Debug)]
pub struct ContextSequence<F> {
    pub vectors: Tensor<F>,
}

/// Re-encoded segment vectors with their half-open frame spans.
#[derive(Clone, Debug)]
pub struct SegmentSequence<F> {
    pub vectors: Tensor<F>,
    pub spans: Vec<(usize, usize)>,
}

/// Which submodules a configuration instantiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Modules {
    pub frame_context: bool,
    pub frame_heads: bool,
    pub segment_encoder: bool,
    pub segment_context: bool,
    pub segment_heads: bool,
    pub adjacent_loss: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Frame,
    Segment,
}

#[derive(Clone, Debug)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct LstmIds {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct AttnIds([ParamId; 11]);

#[derive(Clone, Debug)]
struct HeadIds {
    attn: Option<AttnIds>,
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct SegEncIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, Default)]
struct Ids {
    encoder: Vec<ConvIds>,
    context: Vec<LstmIds>,
    head: Option<HeadIds>,
    seg_enc: Option<SegEncIds>,
    seg_context: Vec<LstmIds>,
    seg_head: Option<HeadIds>,
}

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Uniform on `±scale / sqrt(fan_in)`.
    Uniform { fan_in: usize, scale: f64 },
    Const(f64),
}

/// Parameter shapes in registration order; a pure function of the config.
fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    let u = |fan_in: usize| Init::Uniform { fan_in, scale: 1.0 };
    let d = c.dim();
    let mut c_in = 1;
    for (i, &w) in c.encoder.widths.iter().enumerate() {
        push(format!("enc.{i}.w"), vec![d, c_in, w], u(c_in * w));
        push(format!("enc.{i}.b"), vec![d], u(c_in * w));
        push(format!("enc.{i}.gain"), vec![d], Init::Const(1.0));
        push(format!("enc.{i}.bias"), vec![d], Init::Const(0.0));
        c_in = d;
    }
    let lstm = |push: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str, layers: usize, d_in: usize, h: usize| {
        let mut d_in = d_in;
        for l in 0..layers {
            push(format!("{prefix}.{l}.w_ih"), vec![4 * h, d_in], u(h));
            push(format!("{prefix}.{l}.w_hh"), vec![4 * h, h], u(h));
            push(format!("{prefix}.{l}.bias"), vec![4 * h], u(h));
            d_in = h;
        }
    };
    let head = |push: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str, units: usize, k: usize| {
        if c.head_kind == HeadKind::Attention {
            let ff = c.attention_ff;
            for (name, o, i) in [("q", units, units), ("k", units, units), ("v", units, units), ("o", units, units)] {
                push(format!("{prefix}.attn.{name}.w"), vec![o, i], u(i));
                if name != "k" {
                    push(format!("{prefix}.attn.{name}.b"), vec![o], u(i));
                }
            }
            push(format!("{prefix}.attn.ff1.w"), vec![ff, units], u(units));
            push(format!("{prefix}.attn.ff1.b"), vec![ff], u(units));
            push(format!("{prefix}.attn.ff2.w"), vec![units, ff], u(ff));
            push(format!("{prefix}.attn.ff2.b"), vec![units], u(ff));
        }
        let scale = c.head_init_scale;
        push(format!("{prefix}.w"), vec![k * d, units], Init::Uniform { fan_in: units, scale });
        push(format!("{prefix}.b"), vec![k * d], Init::Uniform { fan_in: units, scale });
    };
    if c.context_enabled {
        lstm(&mut push, "ctx", c.context_layers, d, c.context_units);
    }
    if c.prediction_enabled {
        head(&mut push, "head", c.predictor_dim(), c.k);
    }
    if c.segment_level_enabled {
        let h = c.segment_hidden;
        push("seg.enc.w1".into(), vec![h, d], u(d));
        push("seg.enc.b1".into(), vec![h], u(d));
        push("seg.enc.w2".into(), vec![d, h], u(h));
        push("seg.enc.b2".into(), vec![d], u(h));
        lstm(&mut push, "seg.ctx", c.segment_context_layers, d, c.context_units);
        head(&mut push, "seg.head", c.context_units, c.k_s);
    }
    out
}

/// Trainable network realising every configured submodule.
#[derive(Clone, Debug)]
pub struct Model<F: Float> {
    config: ModelConfig,
    pub params: ParamStore<F>,
    ids: Ids,
}

impl ModelConfig {
    /// Total trainable scalars.
    pub fn param_count(&self) -> usize {
        layout(self).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }

    pub fn modules(&self) -> Modules {
        Modules {
            frame_context: self.context_enabled,
            frame_heads: self.prediction_enabled,
            segment_encoder: self.segment_level_enabled,
            segment_context: self.segment_level_enabled,
            segment_heads: self.segment_level_enabled,
            adjacent_loss: self.adjacent_loss_enabled,
        }
    }
}

impl<F: Float> Model<F> {
    /// Randomly initialised model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in layout(&config) {
            let t = match init {
                Init::Const(v) => Tensor::full(&shape, F::of(v)),
                Init::Uniform { fan_in, scale } => {
                    let bound = scale / (fan_in as f64).sqrt();
                    Tensor::from_fn(&shape, |_| F::of(rng.random_range(-1.0..=1.0) * bound))
                }
            };
            params.add(name, t);
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter store, checking it against the config.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "config expects {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &expected {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if params.value(id).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config expects {shape:?}",
                    params.value(id).shape()
                )));
            }
        }
        let id = |n: String| params.id(&n).expect("checked above");
        let lstm_ids = |prefix: &str, layers: usize| -> Vec<LstmIds> {
            (0..layers)
                .map(|l| LstmIds {
                    w_ih: id(format!("{prefix}.{l}.w_ih")),
                    w_hh: id(format!("{prefix}.{l}.w_hh")),
                    bias: id(format!("{prefix}.{l}.bias")),
                })
                .collect()
        };
        let head_ids = |prefix: &str| HeadIds {
            attn: (config.head_kind == HeadKind::Attention).then(|| {
                let a = |s: &str| id(format!("{prefix}.attn.{s}"));
                AttnIds([
                    a("q.w"),
                    a("q.b"),
                    a("k.w"),
                    a("v.w"),
                    a("v.b"),
                    a("o.w"),
                    a("o.b"),
                    a("ff1.w"),
                    a("ff1.b"),
                    a("ff2.w"),
                    a("ff2.b"),
                ])
            }),
            w: id(format!("{prefix}.w")),
            b: id(format!("{prefix}.b")),
        };
        let mut ids = Ids {
            encoder: (0..config.encoder.widths.len())
                .map(|i| ConvIds {
                    w: id(format!("enc.{i}.w")),
                    b: id(format!("enc.{i}.b")),
                    gain: id(format!("enc.{i}.gain")),
                    bias: id(format!("enc.{i}.bias")),
                })
                .collect(),
            ..Ids::default()
        };
        if config.context_enabled {
            ids.context = lstm_ids("ctx", config.context_layers);
        }
        if config.prediction_enabled {
            ids.head = Some(head_ids("head"));
        }
        if config.segment_level_enabled {
            ids.seg_enc = Some(SegEncIds {
                w1: id("seg.enc.w1".into()),
                b1: id("seg.enc.b1".into()),
                w2: id("seg.enc.w2".into()),
                b2: id("seg.enc.b2".into()),
            });
            ids.seg_context = lstm_ids("seg.ctx", config.segment_context_layers);
            ids.seg_head = Some(head_ids("seg.head"));
        }
        Ok(Model { config, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    /// Encoder output `[T′ × d]` for one chunk of samples.
    pub fn encode(&self, g: &mut Graph<F>, chunk: &[F]) -> Result<Var> {
        let e = &self.config.encoder;
        if chunk.len() != e.chunk_samples {
            return Err(Error::InvalidArgument(format!(
                "chunk has {} samples, encoder expects {}",
                chunk.len(),
                e.chunk_samples
            )));
        }
        let mut x = g.constant(Tensor::new(vec![1, chunk.len()], chunk.to_vec())?);
        let last = self.ids.encoder.len() - 1;
        for (i, l) in self.ids.encoder.iter().enumerate() {
            let w = g.param(&self.params, l.w);
            let b = g.param(&self.params, l.b);
            x = g.conv1d(x, w, Some(b), e.strides[i], e.padding)?;
            let gain = g.param(&self.params, l.gain);
            let bias = g.param(&self.params, l.bias);
            x = g.channel_norm(x, gain, bias)?;
            if i != last {
                x = g.relu(x);
            }
        }
        g.transpose(x)
    }

    /// Frame-level predictors: context vectors, or the latents themselves
    /// when the context builder is disabled.
    pub fn context(&self, g: &mut Graph<F>, z: Var) -> Result<Var> {
        if !self.config.context_enabled {
            if g.shape(z).first() == Some(&0) {
                return Err(Error::SequenceTooShort("context over no frames".into()));
            }
            return Ok(z);
        }
        let layers = self.lstm_params(g, &self.ids.context);
        g.recurrent_sequence(z, &layers)
    }

    /// Segment encoder: two affine maps with a relu between, per row.
    pub fn encode_segments(&self, g: &mut Graph<F>, pooled: Var) -> Result<Var> {
        let ids = self.ids.seg_enc.as_ref().ok_or_else(|| {
            Error::InvalidArgument("segment level is disabled in this configuration".into())
        })?;
        if g.shape(pooled).first() == Some(&0) {
            return Err(Error::SequenceTooShort("no segments to encode".into()));
        }
        let p = |g: &mut Graph<F>, id| g.param(&self.params, id);
        let (w1, b1, w2, b2) = (p(g, ids.w1), p(g, ids.b1), p(g, ids.w2), p(g, ids.b2));
        let h = g.linear(pooled, w1, Some(b1))?;
        let h = g.relu(h);
        g.linear(h, w2, Some(b2))
    }

    pub fn segment_context(&self, g: &mut Graph<F>, s: Var) -> Result<Var> {
        if self.ids.seg_context.is_empty() {
            return Err(Error::InvalidArgument(
                "segment level is disabled in this configuration".into(),
            ));
        }
        let layers = self.lstm_params(g, &self.ids.seg_context);
        g.recurrent_sequence(s, &layers)
    }

    /// Predictions for every position: `[T·K × d]`, row `t·K + k` holding
    /// prediction `k` made from position `t`.
    pub fn predict(&self, g: &mut Graph<F>, level: Level, predictors: Var) -> Result<Var> {
        let (ids, k) = match level {
            Level::Frame => (self.ids.head.as_ref(), self.config.k),
            Level::Segment => (self.ids.seg_head.as_ref(), self.config.k_s),
        };
        let ids = ids.ok_or_else(|| {
            Error::InvalidArgument(format!("{level:?}-level heads are disabled"))
        })?;
        let t = g.shape(predictors)[0];
        let mut h = predictors;
        if let Some(AttnIds(a)) = &ids.attn {
            let v: Vec<Var> = a.iter().map(|&id| g.param(&self.params, id)).collect();
            let p = AttentionParams {
                wq: v[0],
                bq: v[1],
                wk: v[2],
                wv: v[3],
                bv: v[4],
                wo: v[5],
                bo: v[6],
                w1: v[7],
                b1: v[8],
                w2: v[9],
                b2: v[10],
            };
            h = attention_layer(
                g,
                &p,
                h,
                h,
                self.config.attention_heads,
                true,
                self.config.dropout_p,
            )?;
        }
        let w = g.param(&self.params, ids.w);
        let b = g.param(&self.params, ids.b);
        let out = g.linear(h, w, Some(b))?;
        g.reshape(out, &[t * k, self.config.dim()])
    }

    fn lstm_params(&self, g: &mut Graph<F>, ids: &[LstmIds]) -> Vec<LstmParams> {
        ids.iter()
            .map(|l| LstmParams {
                w_ih: g.param(&self.params, l.w_ih),
                w_hh: g.param(&self.params, l.w_hh),
                bias: g.param(&self.params, l.bias),
            })
            .collect()
    }

    /// Latents and frame-level predictors of one chunk in evaluation mode.
    pub fn infer(
        &self,
        chunk: &[F],
        origin_sample: usize,
    ) -> Result<(LatentSequence<F>, ContextSequence<F>)> {
        let mut g = Graph::new();
        let z = self.encode(&mut g, chunk)?;
        let c = self.context(&mut g, z)?;
        g.check_finite()?;
        Ok((
            LatentSequence {
                vectors: g.value(z).clone(),
                hop_ms: HOP_MS,
                origin_sample,
            },
            ContextSequence {
                vectors: g.value(c).clone(),
            },
        ))
    }

    /// Causal summary of an arbitrary latent sequence in evaluation mode.
    pub fn build_context(&self, latents: &Tensor<F>) -> Result<ContextSequence<F>> {
        let mut g = Graph::new();
        let z = g.constant(latents.clone());
        let c = self.context(&mut g, z)?;
        Ok(ContextSequence {
            vectors: g.value(c).clone(),
        })
    }

    /// The `K` frame-level predictions made from position `t`, `[K × d]`.
    pub fn predict_future(&self, context: &ContextSequence<F>, t: usize) -> Result<Tensor<F>> {
        let n = context.vectors.rows();
        if t >= n {
            return Err(Error::InvalidArgument(format!(
                "position {t} outside a sequence of {n}"
            )));
        }
        let mut g = Graph::new();
        let c = g.constant(context.vectors.slice_rows(0, t + 1));
        let p = self.predict(&mut g, Level::Frame, c)?;
        let k = self.config.k;
        Ok(g.value(p).slice_rows(t * k, (t + 1) * k))
    }

    /// Segment encoder applied to pooled means in evaluation mode.
    pub fn segments(
        &self,
        pooled: &Tensor<F>,
        spans: Vec<(usize, usize)>,
    ) -> Result<SegmentSequence<F>> {
        if pooled.rows() != spans.len() {
            return Err(Error::shape(
                "encode_segments",
                format!("{} pooled rows for {} spans", pooled.rows(), spans.len()),
            ));
        }
        let mut g = Graph::new();
        let x = g.constant(pooled.clone());
        let s = self.encode_segments(&mut g, x)?;
        Ok(SegmentSequence {
            vectors: g.value(s).clone(),
            spans,
        })
    }
}
