use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Alignment, Level, Segment, Utterance, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

const SAMPLES_PER_MS: usize = (SAMPLE_RATE / 1000) as usize;

/// Spectral recipe of one phone class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhoneClass {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    /// Harmonics of the speaker's pitch shaped by the band, or band-passed
    /// noise when false.
    pub harmonic: bool,
}

/// Multiplicative voice perturbations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Speaker {
    pub pitch_hz: f64,
    /// Scales every class centre and bandwidth.
    pub filter_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: Vec<PhoneClass>,
    pub min_phone_ms: usize,
    pub max_phone_ms: usize,
    /// Words as phone-class sequences.
    pub lexicon: Vec<Vec<usize>>,
    pub speakers: Vec<Speaker>,
    /// Words are appended until the utterance reaches a length drawn
    /// uniformly from this range; at least one word is always drawn.
    pub min_utterance_ms: usize,
    pub max_utterance_ms: usize,
    pub crossfade_ms: usize,
    /// Per-phone gain drawn from `[1 − jitter, 1 + jitter]`.
    pub gain_jitter: f64,
    pub phone_rms: f64,
    pub noise_floor: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let n = 8;
        let classes = (0..n)
            .map(|i| {
                let center_hz = 350.0 * 16f64.powf(i as f64 / (n - 1) as f64);
                PhoneClass {
                    center_hz,
                    bandwidth_hz: 0.2 * center_hz,
                    harmonic: i % 2 == 0,
                }
            })
            .collect();
        let speakers = [(110.0, 0.96), (135.0, 1.03), (160.0, 0.98), (185.0, 1.05)]
            .into_iter()
            .map(|(pitch_hz, filter_scale)| Speaker { pitch_hz, filter_scale })
            .collect();
        SynthSpec {
            classes,
            min_phone_ms: 60,
            max_phone_ms: 200,
            lexicon: generate_lexicon(n, 12, 2, 4, 0x1e81c0),
            speakers,
            min_utterance_ms: 2560,
            max_utterance_ms: 3840,
            crossfade_ms: 5,
            gain_jitter: 0.3,
            phone_rms: 0.1,
            noise_floor: 0.002,
            seed: 0,
        }
    }
}

/// `n_words` distinct words of `min_len..=max_len` phones with no class
/// repeated back to back.
pub fn generate_lexicon(
    n_classes: usize,
    n_words: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words: Vec<Vec<usize>> = Vec::with_capacity(n_words);
    if n_classes < 2 || min_len == 0 || max_len < min_len {
        return words;
    }
    let mut attempts = 0;
    while words.len() < n_words && attempts < 100 * n_words {
        attempts += 1;
        let len = rng.random_range(min_len..=max_len);
        let mut w: Vec<usize> = Vec::with_capacity(len);
        while w.len() < len {
            let c = rng.random_range(0..n_classes);
            if w.last() != Some(&c) {
                w.push(c);
            }
        }
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

impl SynthSpec {
    pub fn n_phone_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: String| Err(Error::config(format!("data.synth.{k}"), m));
        if self.lexicon.is_empty() {
            return err("lexicon", "lexicon is empty".into());
        }
        if self.classes.is_empty() {
            return err("classes", "no phone classes".into());
        }
        if self.speakers.is_empty() {
            return err("speakers", "no speakers".into());
        }
        if self.min_phone_ms < 60 {
            return err("min_phone_ms", format!("{} ms is below 60 ms", self.min_phone_ms));
        }
        if self.max_phone_ms < self.min_phone_ms {
            return err("max_phone_ms", "shorter than min_phone_ms".into());
        }
        if self.max_utterance_ms < self.min_utterance_ms {
            return err("max_utterance_ms", "shorter than min_utterance_ms".into());
        }
        if 2 * self.crossfade_ms > self.min_phone_ms {
            return err("crossfade_ms", "cross-fades would overlap inside a phone".into());
        }
        for (i, w) in self.lexicon.iter().enumerate() {
            if w.is_empty() {
                return err("lexicon", format!("word {i} is empty"));
            }
            if let Some(&c) = w.iter().find(|&&c| c >= self.classes.len()) {
                return err("lexicon", format!("word {i} uses unknown class {c}"));
            }
        }
        // Bands stay disjoint under every speaker's filter scaling.
        let (lo_s, hi_s) = self
            .speakers
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(l, h), s| (l.min(s.filter_scale), h.max(s.filter_scale)));
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        let mut bands: Vec<(f64, f64, usize)> = self
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let half = c.bandwidth_hz / 2.0;
                ((c.center_hz - half) * lo_s, (c.center_hz + half) * hi_s, i)
            })
            .collect();
        bands.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (lo, hi, i) in &bands {
            if *lo <= 0.0 || *hi >= nyquist || !(lo < hi) {
                return err("classes", format!("class {i} band {lo:.0}..{hi:.0} Hz is out of range"));
            }
        }
        for w in bands.windows(2) {
            if w[1].0 <= w[0].1 {
                return err(
                    "classes",
                    format!("bands of classes {} and {} overlap", w[0].2, w[1].2),
                );
            }
        }
        Ok(())
    }
}

/// Renders `n_utterances` utterances. Utterance `i` depends only on the spec
/// and `i`, and is spoken by speaker `i mod n_speakers`.
pub fn synth_corpus(spec: &SynthSpec, n_utterances: usize) -> Result<Vec<Utterance>> {
    spec.validate()?;
    (0..n_utterances).map(|i| synth_utterance(spec, i)).collect()
}

fn synth_utterance(spec: &SynthSpec, index: usize) -> Result<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let speaker_idx = index % spec.speakers.len();
    let speaker = &spec.speakers[speaker_idx];
    let target = SAMPLES_PER_MS * rng.random_range(spec.min_utterance_ms..=spec.max_utterance_ms);

    let mut phones: Vec<(usize, usize)> = Vec::new(); // (class, length)
    let mut words: Vec<(usize, usize, usize)> = Vec::new(); // (word, first phone, end phone)
    let mut total = 0;
    while words.is_empty() || total < target {
        // Avoid a repeated class across the word junction when possible.
        let mut w = rng.random_range(0..spec.lexicon.len());
        for _ in 0..16 {
            if phones.last().map(|p| p.0) != Some(spec.lexicon[w][0]) {
                break;
            }
            w = rng.random_range(0..spec.lexicon.len());
        }
        let first = phones.len();
        for &c in &spec.lexicon[w] {
            let len = rng.random_range(spec.min_phone_ms * SAMPLES_PER_MS..=spec.max_phone_ms * SAMPLES_PER_MS);
            phones.push((c, len));
            total += len;
        }
        words.push((w, first, phones.len()));
    }

    let mut samples = vec![0.0f64; total];
    let half = spec.crossfade_ms * SAMPLES_PER_MS / 2;
    let mut starts = Vec::with_capacity(phones.len() + 1);
    let mut pos = 0;
    for &(_, len) in &phones {
        starts.push(pos);
        pos += len;
    }
    starts.push(total);
    for (i, &(class, _)) in phones.iter().enumerate() {
        let (a, b) = (starts[i], starts[i + 1]);
        let lo = if i == 0 { 0 } else { a - half };
        let hi = if i + 1 == phones.len() { total } else { b + half };
        let gain = spec.phone_rms * rng.random_range(1.0 - spec.gain_jitter..=1.0 + spec.gain_jitter);
        let sig = render_phone(&spec.classes[class], speaker, hi - lo, &mut rng);
        let ramp = 2 * half.max(1);
        for (k, v) in sig.into_iter().enumerate() {
            let n = lo + k;
            let mut w = 1.0;
            if i > 0 {
                w *= ((n + half - a) as f64 / ramp as f64).clamp(0.0, 1.0);
            }
            if i + 1 < phones.len() {
                w *= ((b + half - n) as f64 / ramp as f64).clamp(0.0, 1.0);
            }
            samples[n] += gain * w * v;
        }
    }
    for s in samples.iter_mut() {
        let noise: f64 = rng.sample(StandardNormal);
        *s += spec.noise_floor * noise;
    }

    let speaker_id = format!("spk{speaker_idx}");
    let wave = Waveform {
        // Stored on the PCM16 grid so a written and re-read file is identical.
        samples: samples
            .iter()
            .map(|&s| f32::from(super::quantize(s as f32)) / 32768.0)
            .collect(),
        sample_rate: SAMPLE_RATE,
        utterance_id: format!("{speaker_id}_u{index:05}"),
        speaker_id,
    };
    let phone_alignment = Alignment {
        entries: phones
            .iter()
            .enumerate()
            .map(|(i, &(c, _))| Segment {
                start: starts[i],
                end: starts[i + 1],
                label: format!("p{c}"),
            })
            .collect(),
        level: Level::Phone,
    };
    let word_alignment = Alignment {
        entries: words
            .iter()
            .map(|&(w, first, end)| Segment {
                start: starts[first],
                end: starts[end],
                label: format!("w{w}"),
            })
            .collect(),
        level: Level::Word,
    };
    Ok(Utterance {
        wave,
        phones: Some(phone_alignment),
        words: Some(word_alignment),
    })
}

/// Unit-RMS realisation of one phone.
fn render_phone(class: &PhoneClass, speaker: &Speaker, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let fc = class.center_hz * speaker.filter_scale;
    let bw = class.bandwidth_hz * speaker.filter_scale;
    let mut out = vec![0.0; n];
    if class.harmonic {
        let f0 = speaker.pitch_hz * rng.random_range(0.97..1.03);
        let sigma = bw / 2.0;
        let mut partials: Vec<(f64, f64)> = (1..)
            .map(|k| k as f64 * f0)
            .take_while(|&f| f < sr / 2.0)
            .map(|f| (f, (-0.5 * ((f - fc) / sigma).powi(2)).exp()))
            .filter(|&(_, a)| a > 1e-3)
            .collect();
        if partials.is_empty() {
            let k = (fc / f0).round().max(1.0);
            partials.push((k * f0, 1.0));
        }
        for (f, amp) in partials {
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let step = std::f64::consts::TAU * f / sr;
            for (t, o) in out.iter_mut().enumerate() {
                *o += amp * (phase + step * t as f64).sin();
            }
        }
    } else {
        // Constant-peak-gain band-pass biquad over white noise.
        let w0 = std::f64::consts::TAU * fc / sr;
        let q = fc / bw;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        let (b0, b2) = (alpha / a0, -alpha / a0);
        let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        // Warm the filter up so the phone starts at steady state.
        let warm = (4.0 * sr / bw) as usize;
        for t in 0..warm + n {
            let x: f64 = rng.sample(StandardNormal);
            let y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
            (x2, x1, y2, y1) = (x1, x, y1, y);
            if t >= warm {
                out[t - warm] = y;
            }
        }
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_word_of_three_phones() {
        let spec = SynthSpec {
            min_phone_ms: 100,
            max_phone_ms: 100,
            lexicon: vec![vec![0, 3, 5]],
            min_utterance_ms: 0,
            max_utterance_ms: 0,
            ..SynthSpec::default()
        };
        let u = synth_corpus(&spec, 1).unwrap().remove(0);
        assert_eq!(u.wave.samples.len(), 4800);
        assert_eq!(u.phones.as_ref().unwrap().boundaries_ms(), vec![100, 200]);
        assert!(u.words.as_ref().unwrap().boundaries_ms().is_empty());
        assert!(u.wave.samples.iter().all(|s| s.abs() <= 1.0));
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = SynthSpec::default();
        let a = synth_corpus(&spec, 3).unwrap();
        assert_eq!(a, synth_corpus(&spec, 3).unwrap());
        let b = synth_corpus(&SynthSpec { seed: 1, ..spec.clone() }, 3).unwrap();
        assert_ne!(a[0].wave.samples, b[0].wave.samples);
        // Prefix stability: utterance i does not depend on the corpus size.
        assert_eq!(a[1], synth_corpus(&spec, 2).unwrap()[1]);
    }

    #[test]
    fn default_corpus_shape() {
        let spec = SynthSpec::default();
        assert_eq!(spec.n_phone_classes(), 8);
        assert_eq!(spec.lexicon.len(), 12);
        let corpus = synth_corpus(&spec, 8).unwrap();
        for (i, u) in corpus.iter().enumerate() {
            let phones = u.phones.as_ref().unwrap();
            assert_eq!(u.wave.speaker_id, format!("spk{}", i % 4));
            assert_eq!(phones.entries.last().unwrap().end, u.wave.samples.len());
            for p in &phones.entries {
                let len = p.end - p.start;
                assert!((960..=3200).contains(&len), "{len}");
            }
            for w in phones.entries.windows(2) {
                assert_eq!(w[0].end, w[1].start);
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let empty = SynthSpec { lexicon: vec![], ..SynthSpec::default() };
        assert!(synth_corpus(&empty, 1).unwrap_err().to_string().contains("lexicon"));
        let short = SynthSpec { min_phone_ms: 40, ..SynthSpec::default() };
        assert!(short.validate().is_err());
        let mut overlapping = SynthSpec::default();
        overlapping.classes[1].center_hz = overlapping.classes[0].center_hz * 1.05;
        assert!(overlapping.validate().is_err());
    }

    #[test]
    fn classes_differ_in_spectral_centroid() {
        let spk = Speaker { pitch_hz: 140.0, filter_scale: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = SynthSpec::default();
        let centroid = |x: &[f64]| {
            // Zero-crossing rate as a cheap monotone proxy for the centroid.
            x.windows(2).filter(|w| (w[0] < 0.0) != (w[1] < 0.0)).count() as f64 / x.len() as f64
        };
        let rates: Vec<f64> = spec
            .classes
            .iter()
            .map(|c| centroid(&render_phone(c, &spk, 3200, &mut rng)))
            .collect();
        assert!(rates.windows(2).all(|w| w[0] < w[1]), "{rates:?}");
    }
}
