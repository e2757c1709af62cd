//! Whole-utterance inference and the glue between a trained model and the
//! evaluation metrics.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boundary::{
    detect_peaks, dissimilarity_curve, pool_segments, select_threshold, word_boundaries, Origin,
    Segmentation,
};
use crate::config::Representation;
use crate::data::{chunk_stream, frame_labels, Utterance, Vocab, HOP_SAMPLES};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::metrics::{
    abx_error, abx_triples, evaluate, linear_probe, AbxItem, AbxMode, AbxResult, ProbeConfig,
    ProbeResult, UtteranceBoundaries,
};
use crate::model::Model;
use crate::trainer::oracle_frames;

/// Model outputs for one chunk.
#[derive(Clone, Debug)]
pub struct ChunkRepr {
    pub origin_sample: usize,
    pub latents: Tensor<f32>,
    pub context: Tensor<f32>,
}

/// Model outputs for every complete chunk of an utterance.
#[derive(Clone, Debug)]
pub struct UtteranceRepr {
    pub id: String,
    pub speaker: String,
    pub chunks: Vec<ChunkRepr>,
    /// Utterance samples not covered by any chunk.
    pub dropped_samples: usize,
}

pub fn represent(model: &Model<f32>, utt: &Utterance) -> Result<UtteranceRepr> {
    let len = model.config().encoder.chunk_samples;
    let chunks = chunk_stream(utt.wave.samples.len(), len);
    let mut out = Vec::with_capacity(chunks.offsets.len());
    for (i, &o) in chunks.offsets.iter().enumerate() {
        let (z, c) = model.infer(chunks.slice(&utt.wave.samples, i), o)?;
        out.push(ChunkRepr {
            origin_sample: o,
            latents: z.vectors,
            context: c.vectors,
        });
    }
    Ok(UtteranceRepr {
        id: utt.wave.utterance_id.clone(),
        speaker: utt.wave.speaker_id.clone(),
        chunks: out,
        dropped_samples: chunks.dropped,
    })
}

pub fn represent_all(model: &Model<f32>, utts: &[Utterance]) -> Result<Vec<UtteranceRepr>> {
    utts.iter().map(|u| represent(model, u)).collect()
}

impl UtteranceRepr {
    pub fn n_frames(&self) -> usize {
        self.chunks.iter().map(|c| c.latents.rows()).sum()
    }

    /// Detected phone boundaries over the whole chunked span.
    pub fn phone_segmentation(&self, prominence: f64, min_separation: usize) -> Result<Segmentation> {
        let parts = self
            .chunks
            .iter()
            .map(|c| Ok(detect_peaks(&dissimilarity_curve(&c.latents)?, prominence, min_separation)))
            .collect::<Result<Vec<_>>>()?;
        concat(parts, Origin::Detected)
    }

    /// Reference phone boundaries snapped to frame junctions.
    pub fn oracle_segmentation(&self, utt: &Utterance) -> Result<Segmentation> {
        let phones = utt
            .phones
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{} has no phone alignment", self.id)))?;
        let b = phones.boundaries_samples();
        let parts = self
            .chunks
            .iter()
            .map(|c| {
                let n = c.latents.rows();
                Segmentation::new(oracle_frames(&b, c.origin_sample, n), n, Origin::Oracle)
            })
            .collect::<Result<Vec<_>>>()?;
        concat(parts, Origin::Oracle)
    }

    /// Word boundaries from the segment level, pooling over the given
    /// phone segmentation chunk by chunk.
    pub fn word_segmentation(
        &self,
        model: &Model<f32>,
        phones: &Segmentation,
        prominence: f64,
        min_separation: usize,
    ) -> Result<Segmentation> {
        if phones.n_frames() != self.n_frames() {
            return Err(Error::shape(
                "word_segmentation",
                format!("{} segmented frames for {}", phones.n_frames(), self.n_frames()),
            ));
        }
        let mut base = 0;
        let mut parts = Vec::with_capacity(self.chunks.len());
        for c in &self.chunks {
            let n = c.latents.rows();
            let local: Vec<usize> = phones
                .frames()
                .iter()
                .filter(|&&b| b > base && b < base + n)
                .map(|&b| b - base)
                .collect();
            let seg = Segmentation::new(local, n, phones.origin())?;
            let (pooled, spans) = pool_segments(&c.latents, &seg)?;
            let segs = model.segments(&pooled, spans)?;
            parts.push(word_boundaries(&segs, prominence, min_separation)?);
            base += n;
        }
        concat(parts, Origin::Detected)
    }

    /// Frame features stacked over all chunks.
    pub fn features(&self, repr: Representation) -> Tensor<f32> {
        fn pick(c: &ChunkRepr, repr: Representation) -> &Tensor<f32> {
            match repr {
                Representation::Latent => &c.latents,
                Representation::Context => &c.context,
            }
        }
        let d = self.chunks.first().map_or(0, |c| pick(c, repr).cols());
        let mut data = Vec::with_capacity(self.n_frames() * d);
        for c in &self.chunks {
            data.extend_from_slice(pick(c, repr).data());
        }
        Tensor::new(vec![self.n_frames(), d], data).expect("rows share one width")
    }
}

fn concat(parts: Vec<Segmentation>, origin: Origin) -> Result<Segmentation> {
    if parts.is_empty() {
        return Segmentation::new(Vec::new(), 0, origin);
    }
    let s = Segmentation::concat(&parts)?;
    Segmentation::new(s.frames().to_vec(), s.n_frames(), origin)
}

/// Pairs reference phone boundaries with predictions; utterances without
/// complete chunks are skipped.
pub fn phone_eval_set(
    utts: &[Utterance],
    reprs: &[UtteranceRepr],
    mut predict: impl FnMut(&Utterance, &UtteranceRepr) -> Result<Segmentation>,
) -> Result<Vec<UtteranceBoundaries>> {
    let mut out = Vec::new();
    for (u, r) in utts.iter().zip(reprs) {
        if r.chunks.is_empty() {
            continue;
        }
        let phones = u
            .phones
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{} has no phone alignment", r.id)))?;
        out.push(UtteranceBoundaries {
            reference_ms: phones.boundaries_ms(),
            predicted: predict(u, r)?,
        });
    }
    Ok(out)
}

/// Word-level counterpart of [`phone_eval_set`].
pub fn word_eval_set(
    utts: &[Utterance],
    reprs: &[UtteranceRepr],
    mut predict: impl FnMut(&Utterance, &UtteranceRepr) -> Result<Segmentation>,
) -> Result<Vec<UtteranceBoundaries>> {
    let mut out = Vec::new();
    for (u, r) in utts.iter().zip(reprs) {
        if r.chunks.is_empty() {
            continue;
        }
        let words = u
            .words
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{} has no word alignment", r.id)))?;
        out.push(UtteranceBoundaries {
            reference_ms: words.boundaries_ms(),
            predicted: predict(u, r)?,
        });
    }
    Ok(out)
}

/// Prominence from `grid` maximising mean phone R-value at offset 0.
pub fn select_prominence(
    utts: &[Utterance],
    reprs: &[UtteranceRepr],
    grid: &[f64],
    min_separation: usize,
    tolerance_ms: i64,
) -> Result<(f64, f64)> {
    select_threshold(grid, |th| {
        let set = phone_eval_set(utts, reprs, |_, r| r.phone_segmentation(th, min_separation))?;
        Ok(evaluate(&set, 0, tolerance_ms)?.mean.r_value)
    })
}

/// The same number of boundaries per utterance as `like`, placed uniformly
/// at random on distinct interior frame junctions.
pub fn random_boundaries(like: &[UtteranceBoundaries], rng: &mut ChaCha8Rng) -> Result<Vec<UtteranceBoundaries>> {
    like.iter()
        .map(|u| {
            let n = u.predicted.n_frames();
            let k = u.predicted.frames().len().min(n.saturating_sub(1));
            let mut frames: Vec<usize> = sample(rng, n.saturating_sub(1), k).into_iter().map(|i| i + 1).collect();
            frames.sort_unstable();
            Ok(UtteranceBoundaries {
                reference_ms: u.reference_ms.clone(),
                predicted: Segmentation::new(frames, n, Origin::Detected)?,
            })
        })
        .collect()
}

/// Phone vocabulary over all alignments.
pub fn phone_vocab(utts: &[Utterance]) -> Vocab {
    Vocab::new(
        utts.iter()
            .filter_map(|u| u.phones.as_ref())
            .flat_map(|a| a.entries.iter().map(|e| e.label.as_str())),
    )
}

/// Features and frame labels over every chunk of `utts`.
pub fn labelled_frames(
    utts: &[Utterance],
    reprs: &[UtteranceRepr],
    repr: Representation,
    vocab: &Vocab,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut d = 0;
    for (u, r) in utts.iter().zip(reprs) {
        if r.chunks.is_empty() {
            continue;
        }
        let f = r.features(repr);
        d = f.cols();
        data.extend_from_slice(f.data());
        for c in &r.chunks {
            labels.extend(frame_labels(u.phones.as_ref(), c.origin_sample, c.latents.rows(), vocab)?.ids);
        }
    }
    Ok((Tensor::new(vec![labels.len(), d], data)?, labels))
}

/// One ABX item per phone lying wholly inside the chunked span, holding the
/// frames whose centres fall inside it.
pub fn abx_items(
    utts: &[Utterance],
    reprs: &[UtteranceRepr],
    repr: Representation,
    vocab: &Vocab,
) -> Result<Vec<AbxItem<f32>>> {
    let mut speakers: BTreeMap<&str, usize> = BTreeMap::new();
    for r in reprs {
        let n = speakers.len();
        speakers.entry(r.speaker.as_str()).or_insert(n);
    }
    let mut items = Vec::new();
    for (u, r) in utts.iter().zip(reprs) {
        let Some(phones) = u.phones.as_ref() else { continue };
        let f = r.features(repr);
        let span_end = r.n_frames() * HOP_SAMPLES;
        for e in &phones.entries {
            if e.end > span_end {
                break;
            }
            let first = (e.start + HOP_SAMPLES / 2).div_ceil(HOP_SAMPLES);
            let last = (e.end + HOP_SAMPLES / 2) / HOP_SAMPLES;
            if first >= last {
                continue;
            }
            let category = vocab
                .id(&e.label)
                .ok_or_else(|| Error::Data(format!("label `{}` missing from the vocabulary", e.label)))?;
            items.push(AbxItem {
                vectors: f.slice_rows(first, last),
                category,
                speaker: speakers[r.speaker.as_str()],
            });
        }
    }
    Ok(items)
}

/// How a model's representations are turned into boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSettings {
    pub prominence: f64,
    pub min_separation: usize,
    /// Prominence for peaks in the segment-level curve.
    pub word_prominence: f64,
    /// Feed reference phone boundaries to the segment level, as in training.
    pub oracle_phones: bool,
    pub words: bool,
}

impl SegmentSettings {
    pub fn of_model(model: &Model<f32>) -> Self {
        let c = model.config();
        SegmentSettings {
            prominence: c.detector.prominence,
            min_separation: c.detector.min_separation,
            word_prominence: c.detector.prominence,
            oracle_phones: c.oracle_boundaries,
            words: c.segment_level_enabled,
        }
    }

    pub fn phones(&self, repr: &UtteranceRepr) -> Result<Segmentation> {
        repr.phone_segmentation(self.prominence, self.min_separation)
    }

    /// Word boundaries, or `None` when the model has no segment level.
    pub fn words(&self, model: &Model<f32>, utt: &Utterance, repr: &UtteranceRepr) -> Result<Option<Segmentation>> {
        if !self.words {
            return Ok(None);
        }
        let phones = if self.oracle_phones {
            repr.oracle_segmentation(utt)?
        } else {
            self.phones(repr)?
        };
        repr.word_segmentation(model, &phones, self.word_prominence, 1).map(Some)
    }
}

/// Model settings with the phone prominence picked from `grid` on a
/// validation set; also returns the validation R-value. An empty grid keeps
/// the model's own setting.
pub fn tune_segmenter(
    model: &Model<f32>,
    valid: &[Utterance],
    reprs: &[UtteranceRepr],
    grid: &[f64],
    tolerance_ms: i64,
) -> Result<(SegmentSettings, Option<f64>)> {
    let mut s = SegmentSettings::of_model(model);
    if grid.is_empty() {
        return Ok((s, None));
    }
    let (p, r) = select_prominence(valid, reprs, grid, s.min_separation, tolerance_ms)?;
    s.prominence = p;
    Ok((s, Some(r)))
}

/// Linear phone probe fitted on one set of utterances and scored on another.
pub fn probe_phones(
    train: (&[Utterance], &[UtteranceRepr]),
    test: (&[Utterance], &[UtteranceRepr]),
    repr: Representation,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    let vocab = phone_vocab(&[train.0, test.0].concat());
    let (xtr, ytr) = labelled_frames(train.0, train.1, repr, &vocab)?;
    let (xte, yte) = labelled_frames(test.0, test.1, repr, &vocab)?;
    linear_probe((&xtr, &ytr), (&xte, &yte), vocab.len(), config)
}

/// Within- and across-speaker ABX errors over phone items.
pub fn abx_scores(
    utts: &[Utterance],
    reprs: &[UtteranceRepr],
    repr: Representation,
    triples: usize,
    seed: u64,
) -> Result<(AbxResult, AbxResult)> {
    let items = abx_items(utts, reprs, repr, &phone_vocab(utts))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = |mode| {
        let t = abx_triples(&items, mode, triples, &mut rng);
        abx_error(&items, &t, mode)
    };
    let within = run(AbxMode::Within)?;
    let across = run(AbxMode::Across)?;
    Ok((within, across))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, SynthSpec};
    use crate::model::{EncoderConfig, HeadKind, ModelConfig};
    use rand::SeedableRng;

    fn small_model() -> Model<f32> {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                channels: 8,
                ..EncoderConfig::default()
            },
            context_layers: 1,
            context_units: 8,
            segment_hidden: 8,
            segment_context_layers: 1,
            head_kind: HeadKind::Linear,
            ..ModelConfig::default()
        };
        Model::new(cfg, 0).unwrap()
    }

    #[test]
    fn oracle_segmentation_tracks_reference_boundaries() {
        let utts = synth_corpus(&SynthSpec::default(), 2).unwrap();
        let model = small_model();
        let reprs = represent_all(&model, &utts).unwrap();
        let set = phone_eval_set(&utts, &reprs, |u, r| r.oracle_segmentation(u)).unwrap();
        for u in &set {
            let s = evaluate(std::slice::from_ref(u), 0, 5).unwrap();
            assert_eq!(s.mean.r_value, 1.0);
        }
        let words = word_eval_set(&utts, &reprs, |u, r| {
            let p = r.oracle_segmentation(u)?;
            r.word_segmentation(&model, &p, 0.0, 1)
        })
        .unwrap();
        assert_eq!(words.len(), 2);
    }

    #[test]
    fn labelled_frames_cover_every_chunk() {
        let utts = synth_corpus(&SynthSpec::default(), 2).unwrap();
        let model = small_model();
        let reprs = represent_all(&model, &utts).unwrap();
        let vocab = phone_vocab(&utts);
        assert_eq!(vocab.len(), 9);
        let (x, y) = labelled_frames(&utts, &reprs, Representation::Context, &vocab).unwrap();
        assert_eq!(x.rows(), reprs.iter().map(|r| r.n_frames()).sum::<usize>());
        assert_eq!(y.len(), x.rows());
        assert!(y.iter().all(|&l| l != Vocab::SILENCE));
        let items = abx_items(&utts, &reprs, Representation::Latent, &vocab).unwrap();
        assert!(items.iter().all(|i| i.vectors.rows() >= 5));
    }

    #[test]
    fn random_baseline_matches_counts() {
        let pred = Segmentation::new(vec![3, 9, 20], 30, Origin::Detected).unwrap();
        let like = vec![UtteranceBoundaries {
            reference_ms: vec![100],
            predicted: pred,
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = random_boundaries(&like, &mut rng).unwrap();
        assert_eq!(r[0].predicted.frames().len(), 3);
        assert!(r[0].predicted.frames().iter().all(|&f| (1..30).contains(&f)));
    }
}
