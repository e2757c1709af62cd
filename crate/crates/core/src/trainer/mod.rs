//! Training loop: per-chunk loss assembly, Adam updates, run logs and
//! checkpoints.

mod adam;
mod checkpoint;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boundary::{detect_peaks, dissimilarity_curve, Origin, Segmentation};
use crate::data::{chunk_stream, write_atomic, Utterance, HOP_SAMPLES};
use crate::diff::{Float, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Level, Model, ModelConfig};
use crate::objective::{acpc_loss, adjacent_contrastive_loss, total_loss, LossParts};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
    /// Stop after this many steps; 0 means no limit.
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            seed: 0,
            checkpoint_every: 0,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        for (k, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(k, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be positive"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::config("train.clip_norm", "must be non-negative"));
        }
        Ok(())
    }
}

/// One fixed-length training window.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainChunk {
    pub samples: Vec<f32>,
    pub utterance: usize,
    pub origin_sample: usize,
    /// True phone boundaries as chunk-local frame indices, when aligned.
    pub oracle_frames: Option<Vec<usize>>,
}

/// Chunks every utterance; partial tails are dropped.
pub fn prepare_chunks(utterances: &[Utterance], chunk_samples: usize) -> Vec<TrainChunk> {
    let mut out = Vec::new();
    for (u, utt) in utterances.iter().enumerate() {
        let chunks = chunk_stream(utt.wave.samples.len(), chunk_samples);
        for (i, &o) in chunks.offsets.iter().enumerate() {
            let n_frames = chunk_samples / HOP_SAMPLES;
            out.push(TrainChunk {
                samples: chunks.slice(&utt.wave.samples, i).to_vec(),
                utterance: u,
                origin_sample: o,
                oracle_frames: utt
                    .phones
                    .as_ref()
                    .map(|a| oracle_frames(&a.boundaries_samples(), o, n_frames)),
            });
        }
    }
    out
}

/// Boundary samples inside a chunk rounded to the nearest frame junction;
/// junctions at either end are dropped.
pub fn oracle_frames(boundaries: &[usize], origin_sample: usize, n_frames: usize) -> Vec<usize> {
    let mut frames: Vec<usize> = boundaries
        .iter()
        .filter(|&&s| s > origin_sample)
        .map(|&s| (s - origin_sample + HOP_SAMPLES / 2) / HOP_SAMPLES)
        .filter(|&b| b > 0 && b < n_frames)
        .collect();
    frames.dedup();
    frames
}

/// Loss graph of one chunk with scalar summaries of its components.
#[derive(Clone, Debug)]
pub struct ChunkLoss {
    pub total: Var,
    pub frame: Option<f64>,
    pub segment: Option<f64>,
    pub adjacent: Option<f64>,
    pub frame_skipped: usize,
    pub segment_skipped: usize,
    pub segments: usize,
    pub dp_calls: usize,
    /// Spans used for segment pooling, if the segment level ran.
    pub spans: Option<Vec<(usize, usize)>>,
}

/// Counts detector invocations made while building losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instrumentation {
    pub detect_calls: usize,
}

/// Builds every enabled loss for one chunk on `g`.
///
/// Segment boundaries come from `oracle` in oracle mode and from peak
/// detection on the current latents otherwise; either way they carry no
/// gradient.
pub fn chunk_loss<F: Float>(
    g: &mut Graph<F>,
    model: &Model<F>,
    samples: &[F],
    oracle: Option<&[usize]>,
    rng: &mut ChaCha8Rng,
    inst: &mut Instrumentation,
) -> Result<ChunkLoss> {
    let c = model.config();
    let z = model.encode(g, samples)?;
    let mut parts = LossParts::default();
    let mut out = ChunkLoss {
        total: z,
        frame: None,
        segment: None,
        adjacent: None,
        frame_skipped: 0,
        segment_skipped: 0,
        segments: 0,
        dp_calls: 0,
        spans: None,
    };
    if c.prediction_enabled {
        let ctx = model.context(g, z)?;
        let preds = model.predict(g, Level::Frame, ctx)?;
        let l = acpc_loss(g, preds, z, c.k, c.m, c.negatives, rng, false)?;
        parts.frame = l.loss;
        out.frame_skipped = l.skipped;
        out.dp_calls += l.dp_calls;
    }
    if c.segment_level_enabled {
        let n_frames = g.shape(z)[0];
        let seg = if c.oracle_boundaries {
            let frames = oracle.ok_or_else(|| {
                Error::Data("oracle boundaries requested for a chunk without alignment".into())
            })?;
            Segmentation::new(frames.to_vec(), n_frames, Origin::Oracle)?
        } else {
            inst.detect_calls += 1;
            let curve = dissimilarity_curve(g.value(z))?;
            detect_peaks(&curve, c.detector.prominence, c.detector.min_separation)
        };
        let spans = seg.spans();
        out.segments = spans.len();
        if spans.len() > c.m_s {
            let pooled = g.segment_mean(z, &spans)?;
            let s = model.encode_segments(g, pooled)?;
            let sc = model.segment_context(g, s)?;
            let preds = model.predict(g, Level::Segment, sc)?;
            let l = acpc_loss(g, preds, s, c.k_s, c.m_s, c.segment_negatives, rng, true)?;
            parts.segment = l.loss;
            out.segment_skipped = l.skipped;
            out.dp_calls += l.dp_calls;
        } else {
            out.segment_skipped = spans.len();
        }
        out.spans = Some(spans);
    }
    if c.adjacent_loss_enabled {
        parts.adjacent = Some(adjacent_contrastive_loss(
            g,
            z,
            c.adjacent_negatives,
            c.adjacent_temperature,
            rng,
        )?);
    }
    let scalar = |g: &Graph<F>, v: Option<Var>| v.map(|v| g.value(v).item().f64());
    out.frame = scalar(g, parts.frame);
    out.segment = scalar(g, parts.segment);
    out.adjacent = scalar(g, parts.adjacent);
    out.total = total_loss(g, c, parts)?;
    Ok(out)
}

/// Per-step summary; components are batch means over the chunks that
/// produced them and are omitted when none did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacent: Option<f64>,
    pub total: f64,
    pub chunks: usize,
    pub frame_skipped: usize,
    pub segment_skipped: usize,
    pub segments: usize,
    /// Chunks that produced a segment-level loss.
    #[serde(default)]
    pub segment_chunks: usize,
    pub dp_calls: usize,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum LogLine {
    Header { seed: u64, config_hash: String },
    Step(StepRecord),
    Summary { steps: usize, detect_calls: usize },
}

/// Deterministic training record. Wall-clock times are kept apart in
/// `step_seconds` so two identical runs log identical bytes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub seed: u64,
    pub config_hash: String,
    pub steps: Vec<StepRecord>,
    pub detect_calls: usize,
    pub step_seconds: Vec<f64>,
}

impl RunLog {
    /// One JSON object per line: a header, one line per step, a summary.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let header = LogLine::Header {
            seed: self.seed,
            config_hash: self.config_hash.clone(),
        };
        let summary = LogLine::Summary {
            steps: self.steps.len(),
            detect_calls: self.detect_calls,
        };
        let lines = std::iter::once(header)
            .chain(self.steps.iter().cloned().map(LogLine::Step))
            .chain(std::iter::once(summary));
        for l in lines {
            out.push_str(&serde_json::to_string(&l)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut log = RunLog::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                LogLine::Header { seed, config_hash } => {
                    log.seed = seed;
                    log.config_hash = config_hash;
                }
                LogLine::Step(s) => log.steps.push(s),
                LogLine::Summary { detect_calls, .. } => log.detect_calls = detect_calls,
            }
        }
        Ok(log)
    }

    /// Per-step wall-clock seconds, one number per line.
    pub fn timings_text(&self) -> String {
        self.step_seconds.iter().map(|s| format!("{s:.6}\n")).collect()
    }
}

/// Hex SHA-256 of the canonical JSON of both configurations.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> Result<String> {
    let json = serde_json::to_string(&(model, train))?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Stateful optimisation over a fixed set of chunks.
pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub log: RunLog,
    pub inst: Instrumentation,
    adam: Adam,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(
            config.learning_rate,
            config.beta1,
            config.beta2,
            config.eps,
            (config.clip_norm > 0.0).then_some(config.clip_norm),
        );
        let log = RunLog {
            seed: config.seed,
            config_hash: config_hash(model.config(), &config)?,
            ..RunLog::default()
        };
        Ok(Trainer {
            model,
            config,
            log,
            inst: Instrumentation::default(),
            adam,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One optimisation step on the mean loss of `batch`.
    pub fn step(&mut self, batch: &[&TrainChunk], epoch: usize) -> Result<&StepRecord> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let started = Instant::now();
        let step = self.step;
        let seed = self.config.seed;
        let scale = 1.0 / batch.len() as f32;
        let mut rec = StepRecord {
            step,
            epoch,
            frame: None,
            segment: None,
            adjacent: None,
            total: 0.0,
            chunks: batch.len(),
            frame_skipped: 0,
            segment_skipped: 0,
            segments: 0,
            segment_chunks: 0,
            dp_calls: 0,
            grad_norm: 0.0,
        };
        let mut sums = [(0.0, 0usize); 3];
        self.model.params.zero_grad();
        for (i, chunk) in batch.iter().enumerate() {
            let stream = (step * self.config.batch_size + i) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0001);
            rng.set_stream(stream);
            let mut g = Graph::training(seed, stream);
            let l = chunk_loss(
                &mut g,
                &self.model,
                &chunk.samples,
                chunk.oracle_frames.as_deref(),
                &mut rng,
                &mut self.inst,
            )?;
            let total = g.value(l.total).item().f64();
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {step} (chunk {i}) is {total}")));
            }
            rec.total += total / batch.len() as f64;
            for (slot, v) in sums.iter_mut().zip([l.frame, l.segment, l.adjacent]) {
                if let Some(v) = v {
                    slot.0 += v;
                    slot.1 += 1;
                }
            }
            rec.frame_skipped += l.frame_skipped;
            rec.segment_skipped += l.segment_skipped;
            rec.segments += l.segments;
            rec.dp_calls += l.dp_calls;
            let scaled = g.scale(l.total, scale);
            g.backward(scaled)?;
            g.accumulate_into(&mut self.model.params);
        }
        let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        rec.frame = mean(sums[0]);
        rec.segment = mean(sums[1]);
        rec.segment_chunks = sums[1].1;
        rec.adjacent = mean(sums[2]);
        rec.grad_norm = self.adam.step(&mut self.model.params);
        if !rec.grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient at step {step}")));
        }
        self.step += 1;
        self.log.detect_calls = self.inst.detect_calls;
        self.log.steps.push(rec);
        self.log.step_seconds.push(started.elapsed().as_secs_f64());
        Ok(self.log.steps.last().expect("just pushed"))
    }
}

/// Trains for the configured epochs, shuffling chunk order per epoch.
///
/// With `out` set, intermediate checkpoints go to `out/step-N`, the final
/// one to `out/checkpoint`, the log to `out/runlog.jsonl` and timings to
/// `out/timings.txt`. On a non-finite loss the log so far is still written.
pub fn fit(model: Model<f32>, chunks: &[TrainChunk], config: &TrainConfig, out: Option<&Path>) -> Result<Trainer> {
    if chunks.is_empty() {
        return Err(Error::Data("no training chunks".into()));
    }
    if model.config().oracle_boundaries && chunks.iter().any(|c| c.oracle_frames.is_none()) {
        return Err(Error::Data("oracle boundaries need phone alignments for every utterance".into()));
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let res = (|| -> Result<()> {
        'epochs: for epoch in 0..config.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(1 << 32 | epoch as u64);
            order.sort_unstable();
            order.shuffle(&mut rng);
            for idx in order.chunks(config.batch_size) {
                if config.max_steps > 0 && trainer.steps_done() >= config.max_steps {
                    break 'epochs;
                }
                let batch: Vec<&TrainChunk> = idx.iter().map(|&i| &chunks[i]).collect();
                trainer.step(&batch, epoch)?;
                let n = trainer.steps_done();
                if let (Some(dir), true) = (out, config.checkpoint_every > 0 && n % config.checkpoint_every == 0) {
                    save_checkpoint(&trainer.model, &dir.join(format!("step-{n}")))?;
                }
            }
        }
        Ok(())
    })();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("runlog.jsonl"), trainer.log.to_jsonl()?.as_bytes())?;
        write_atomic(&dir.join("timings.txt"), trainer.log.timings_text().as_bytes())?;
        if res.is_ok() {
            save_checkpoint(&trainer.model, &dir.join("checkpoint"))?;
        }
    }
    res.map(|_| trainer)
}
