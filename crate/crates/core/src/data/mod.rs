//! Audio and alignment ingestion, chunking, frame labels and the synthetic
//! corpus.

mod synth;

pub use synth::{generate_lexicon, synth_corpus, PhoneClass, Speaker, SynthSpec};

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
/// Samples per 10 ms latent frame.
pub const HOP_SAMPLES: usize = 160;
pub const CHUNK_SAMPLES: usize = 20_480;

/// Mono 16 kHz audio scaled to `[−1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub utterance_id: String,
    pub speaker_id: String,
}

/// Reads a PCM16 mono 16 kHz WAV file. A file stem `speaker_rest` names the
/// speaker; otherwise the stem is used for both ids.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let bad = |what: String| Error::Data(format!("{}: {what}", path.display()));
    if spec.channels != 1 {
        return Err(bad(format!("expected 1 channel, found {}", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(bad(format!(
            "expected {SAMPLE_RATE} Hz, found {} Hz (no resampling)",
            spec.sample_rate
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(bad(format!(
            "expected 16-bit PCM, found {:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f32::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    let speaker_id = stem.split_once('_').map_or(stem.as_str(), |(s, _)| s).to_string();
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
        utterance_id: stem,
        speaker_id,
    })
}

/// Writes PCM16 mono, rounding to the nearest code and clipping.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut buf, spec)?;
        for &s in &wave.samples {
            w.write_sample(quantize(s))?;
        }
        w.finalize()?;
    }
    write_atomic(path, buf.get_ref())
}

fn quantize(s: f32) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes through a sibling temporary file renamed into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(res?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    Phone,
    Word,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// Sorted, non-overlapping labelled sample intervals.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub entries: Vec<Segment>,
    pub level: Level,
}

impl Alignment {
    /// Internal boundaries in ms: every start that is not the first, rounded
    /// down to whole milliseconds.
    pub fn boundaries_ms(&self) -> Vec<i64> {
        self.entries
            .iter()
            .skip(1)
            .map(|e| (e.start * 1000 / SAMPLE_RATE as usize) as i64)
            .collect()
    }

    /// Starts of every entry but the first, in samples.
    pub fn boundaries_samples(&self) -> Vec<usize> {
        self.entries.iter().skip(1).map(|e| e.start).collect()
    }

    /// Text in the `start end label` format read by [`parse_alignment`].
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{} {} {}\n", e.start, e.end, e.label))
            .collect()
    }
}

pub fn parse_alignment(text: &str, path: &Path, level: Level) -> Result<Alignment> {
    let mut rows: Vec<(usize, Segment)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [start, end, label] = fields[..] else {
            return Err(err(format!("expected `start end label`, got {} fields", fields.len())));
        };
        let num = |s: &str| s.parse::<usize>().map_err(|e| err(format!("bad sample index `{s}`: {e}")));
        let (start, end) = (num(start)?, num(end)?);
        if start >= end {
            return Err(err(format!("interval {start}..{end} is empty or inverted")));
        }
        rows.push((
            line_no,
            Segment {
                start,
                end,
                label: label.to_string(),
            },
        ));
    }
    rows.sort_by_key(|(_, s)| (s.start, s.end));
    for w in rows.windows(2) {
        if w[1].1.start < w[0].1.end {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: w[1].0.max(w[0].0),
                message: format!(
                    "interval {}..{} overlaps {}..{}",
                    w[1].1.start, w[1].1.end, w[0].1.start, w[0].1.end
                ),
            });
        }
    }
    Ok(Alignment {
        entries: rows.into_iter().map(|(_, s)| s).collect(),
        level,
    })
}

pub fn load_alignment(path: &Path, level: Level) -> Result<Alignment> {
    parse_alignment(&fs::read_to_string(path)?, path, level)
}

/// Non-overlapping fixed-length windows of an utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Chunks {
    /// First sample of each chunk.
    pub offsets: Vec<usize>,
    pub chunk_len: usize,
    /// Trailing samples that did not fill a chunk.
    pub dropped: usize,
}

impl Chunks {
    pub fn slice<'a>(&self, samples: &'a [f32], i: usize) -> &'a [f32] {
        &samples[self.offsets[i]..self.offsets[i] + self.chunk_len]
    }
}

pub fn chunk_stream(n_samples: usize, chunk_len: usize) -> Chunks {
    let n = n_samples.checked_div(chunk_len).unwrap_or(0);
    Chunks {
        offsets: (0..n).map(|i| i * chunk_len).collect(),
        chunk_len,
        dropped: n_samples - n * chunk_len,
    }
}

/// Label ids with 0 reserved for frames no entry covers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    labels: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub const SILENCE: usize = 0;

    pub fn new<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocab {
            labels: vec!["<sil>".into()],
            index: BTreeMap::new(),
        };
        let mut sorted: Vec<&str> = labels.into_iter().collect();
        sorted.sort_unstable();
        sorted.dedup();
        for l in sorted {
            v.index.insert(l.to_string(), v.labels.len());
            v.labels.push(l.to_string());
        }
        v
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameLabels {
    pub ids: Vec<usize>,
    /// Frames labelled [`Vocab::SILENCE`] because nothing covered them.
    pub uncovered: usize,
}

/// Labels each 160-sample frame starting at `origin_sample` by the entry
/// overlapping it most; ties go to the earlier entry. Labels missing from
/// `vocab` are an error.
pub fn frame_labels(
    alignment: Option<&Alignment>,
    origin_sample: usize,
    n_frames: usize,
    vocab: &Vocab,
) -> Result<FrameLabels> {
    let mut ids = vec![Vocab::SILENCE; n_frames];
    let mut uncovered = 0;
    let entries = alignment.map_or(&[][..], |a| &a.entries[..]);
    let mut first = 0;
    for (t, id) in ids.iter_mut().enumerate() {
        let lo = origin_sample + t * HOP_SAMPLES;
        let hi = lo + HOP_SAMPLES;
        while first < entries.len() && entries[first].end <= lo {
            first += 1;
        }
        let mut best: Option<(usize, &Segment)> = None;
        for e in entries[first..].iter().take_while(|e| e.start < hi) {
            let overlap = e.end.min(hi) - e.start.max(lo);
            if best.is_none_or(|(b, _)| overlap > b) {
                best = Some((overlap, e));
            }
        }
        match best {
            Some((_, e)) => {
                *id = vocab.id(&e.label).ok_or_else(|| {
                    Error::Data(format!("label `{}` missing from the vocabulary", e.label))
                })?;
            }
            None => uncovered += 1,
        }
    }
    Ok(FrameLabels { ids, uncovered })
}

/// An utterance with optional phone and word alignments.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub wave: Waveform,
    pub phones: Option<Alignment>,
    pub words: Option<Alignment>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub speaker: String,
    pub split: Split,
    /// Paths relative to the manifest's directory.
    pub wav: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phones: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<PathBuf>,
}

/// Corpus index listing utterances, speakers and files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub sample_rate: u32,
    pub utterances: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if m.sample_rate != SAMPLE_RATE {
            return Err(Error::Data(format!(
                "{}: sample rate {} unsupported",
                path.display(),
                m.sample_rate
            )));
        }
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        write_atomic(path, s.as_bytes())
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.utterances.iter().filter(move |e| e.split == split)
    }

    /// Loads one utterance with whatever alignments it lists.
    pub fn load_utterance(&self, e: &ManifestEntry) -> Result<Utterance> {
        let mut wave = load_wav(&self.root.join(&e.wav))?;
        wave.utterance_id = e.id.clone();
        wave.speaker_id = e.speaker.clone();
        let align = |p: &Option<PathBuf>, level| {
            p.as_ref()
                .map(|p| load_alignment(&self.root.join(p), level))
                .transpose()
        };
        Ok(Utterance {
            phones: align(&e.phones, Level::Phone)?,
            words: align(&e.words, Level::Word)?,
            wave,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Utterance>> {
        self.entries(split).map(|e| self.load_utterance(e)).collect()
    }
}

/// Writes a corpus as WAV plus `.phn`/`.wrd` alignment files and a manifest
/// under `dir`.
pub fn write_corpus(dir: &Path, corpus: &[(Utterance, Split)]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut utterances = Vec::with_capacity(corpus.len());
    for (u, split) in corpus {
        let id = &u.wave.utterance_id;
        let wav = PathBuf::from(format!("{id}.wav"));
        write_wav(&dir.join(&wav), &u.wave)?;
        let mut entry = ManifestEntry {
            id: id.clone(),
            speaker: u.wave.speaker_id.clone(),
            split: *split,
            wav,
            phones: None,
            words: None,
        };
        for (a, ext, slot) in [(&u.phones, "phn", &mut entry.phones), (&u.words, "wrd", &mut entry.words)] {
            if let Some(a) = a {
                let p = PathBuf::from(format!("{id}.{ext}"));
                write_atomic(&dir.join(&p), a.to_text().as_bytes())?;
                *slot = Some(p);
            }
        }
        utterances.push(entry);
    }
    let m = Manifest {
        sample_rate: SAMPLE_RATE,
        utterances,
        root: dir.to_path_buf(),
    };
    m.save(&dir.join("manifest.json"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunking() {
        let c = chunk_stream(50_000, CHUNK_SAMPLES);
        assert_eq!((c.offsets.len(), c.dropped), (2, 9040));
        let c = chunk_stream(20_480, CHUNK_SAMPLES);
        assert_eq!((c.offsets, c.dropped), (vec![0], 0));
        assert!(chunk_stream(20_479, CHUNK_SAMPLES).offsets.is_empty());
    }

    #[test]
    fn alignment_parsing() {
        let p = Path::new("a.phn");
        let a = parse_alignment("0 1600 aa\n", p, Level::Phone).unwrap();
        assert_eq!(a.entries.len(), 1);
        assert!(parse_alignment("", p, Level::Phone).unwrap().entries.is_empty());
        let e = parse_alignment("100 50 x\n", p, Level::Phone).unwrap_err();
        assert!(e.to_string().starts_with("a.phn:1:"), "{e}");
        let e = parse_alignment("0 10 a\n5 20 b\n", p, Level::Phone).unwrap_err();
        assert!(e.to_string().starts_with("a.phn:2:"), "{e}");
        let a = parse_alignment("10 20 b\n0 10 a\n", p, Level::Phone).unwrap();
        assert_eq!(a.entries[0].label, "a");
    }

    #[test]
    fn frame_label_rules() {
        let vocab = Vocab::new(["aa", "bb"]);
        let a = parse_alignment("0 1600 aa\n", Path::new("x"), Level::Phone).unwrap();
        let l = frame_labels(Some(&a), 0, 10, &vocab).unwrap();
        assert_eq!(l.ids, vec![vocab.id("aa").unwrap(); 10]);
        let a = parse_alignment("0 80 aa\n80 320 bb\n", Path::new("x"), Level::Phone).unwrap();
        let l = frame_labels(Some(&a), 0, 2, &vocab).unwrap();
        assert_eq!(l.ids[0], vocab.id("aa").unwrap());
        let a = parse_alignment("0 79 aa\n79 320 bb\n", Path::new("x"), Level::Phone).unwrap();
        assert_eq!(frame_labels(Some(&a), 0, 1, &vocab).unwrap().ids[0], vocab.id("bb").unwrap());
        let none = frame_labels(None, 0, 4, &vocab).unwrap();
        assert_eq!((none.ids, none.uncovered), (vec![Vocab::SILENCE; 4], 4));
    }

    #[test]
    fn wav_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let wave = Waveform {
            samples: (0..16_000).map(|i| ((i % 64) as f32 - 32.0) / 64.0).collect(),
            sample_rate: SAMPLE_RATE,
            utterance_id: "s1_u1".into(),
            speaker_id: "s1".into(),
        };
        let p = dir.path().join("s1_u1.wav");
        write_wav(&p, &wave).unwrap();
        let back = load_wav(&p).unwrap();
        assert_eq!(back, wave);

        let stereo = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(load_wav(&stereo).unwrap_err().to_string().contains("channel"));
    }
}
