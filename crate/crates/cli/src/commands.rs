use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cpcseg::boundary::{format_boundaries, read_boundaries, BoundaryKind, Origin, Segmentation};
use cpcseg::config::{Config, Representation};
use cpcseg::data::{load_alignment, synth_corpus, write_corpus, Level, Manifest, Split, Utterance};
use cpcseg::metrics::{evaluate, offset_sweep, sweep_csv, EvalReport, UtteranceBoundaries};
use cpcseg::model::{Model, HOP_MS};
use cpcseg::pipeline::{abx_scores, probe_phones, represent, represent_all, tune_segmenter, SegmentSettings};
use cpcseg::trainer::{fit, load_checkpoint, prepare_chunks};
use cpcseg::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::outputs::Outputs;
use crate::{reprs, EvalArgs, LevelArg};

/// Index written next to the boundary files by `segment`.
#[derive(Debug, Serialize, Deserialize)]
struct SegmentIndex {
    settings: SegmentSettings,
    valid_r_value: Option<f64>,
    split: Split,
    utterances: Vec<IndexEntry>,
    /// Utterances shorter than one chunk.
    skipped: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    /// End of the segmented span.
    span_ms: i64,
}

fn manifest(config: &Config) -> Result<Manifest> {
    let path = config.data.manifest.as_ref().ok_or_else(|| Error::Config {
        key: "data.manifest".into(),
        message: "this command needs a corpus manifest".into(),
    })?;
    Manifest::load(path)
}

fn report(config: &Config) -> Result<EvalReport> {
    Ok(EvalReport {
        seed: config.eval.seed,
        config: serde_json::to_value(config)?,
        ..EvalReport::default()
    })
}

fn write_report(out: &mut Outputs, name: &str, r: &EvalReport) -> Result<()> {
    out.write(name, r.to_json()?.as_bytes())
}

pub fn synth(config: &Config, out: &mut Outputs) -> Result<()> {
    let d = &config.data;
    let n = d.n_train + d.n_valid + d.n_test;
    let corpus: Vec<(Utterance, Split)> = synth_corpus(&d.synth, n)?
        .into_iter()
        .enumerate()
        .map(|(i, u)| {
            let split = if i < d.n_train {
                Split::Train
            } else if i < d.n_train + d.n_valid {
                Split::Valid
            } else {
                Split::Test
            };
            (u, split)
        })
        .collect();
    write_corpus(out.dir(), &corpus)?;
    Ok(())
}

pub fn train(config: &Config, out: &mut Outputs) -> Result<()> {
    let utts = manifest(config)?.load_split(Split::Train)?;
    let chunks = prepare_chunks(&utts, config.model.encoder.chunk_samples);
    let model = Model::new(config.model.clone(), config.train.seed)?;
    out.write_json("config.json", config)?;
    fit(model, &chunks, &config.train, Some(out.dir()))?;
    Ok(())
}

pub fn segment(config: &Config, checkpoint: &Path, split: Split, out: &mut Outputs) -> Result<()> {
    let model = load_checkpoint(checkpoint, None)?;
    let m = manifest(config)?;
    let grid = &config.eval.threshold_grid;
    let (settings, valid_r_value) = if grid.is_empty() {
        (SegmentSettings::of_model(&model), None)
    } else {
        let valid = m.load_split(Split::Valid)?;
        if valid.is_empty() {
            return Err(Error::Data(
                "threshold selection needs a valid split; set eval.threshold_grid=[] to keep the model's prominence".into(),
            ));
        }
        let reprs = represent_all(&model, &valid)?;
        tune_segmenter(&model, &valid, &reprs, grid, config.eval.tolerance_ms)?
    };
    let mut index = SegmentIndex {
        settings,
        valid_r_value,
        split,
        utterances: Vec::new(),
        skipped: Vec::new(),
    };
    for u in m.load_split(split)? {
        let r = represent(&model, &u)?;
        if r.chunks.is_empty() {
            index.skipped.push(r.id);
            continue;
        }
        let phones = settings.phones(&r)?;
        let mut entries: Vec<(i64, BoundaryKind)> =
            phones.ms().into_iter().map(|t| (t, BoundaryKind::Phone)).collect();
        if let Some(words) = settings.words(&model, &u, &r)? {
            entries.extend(words.ms().into_iter().map(|t| (t, BoundaryKind::Word)));
        }
        out.write(&format!("{}.bnd", r.id), format_boundaries(&entries).as_bytes())?;
        index.utterances.push(IndexEntry {
            id: r.id,
            span_ms: phones.duration_ms(),
        });
    }
    out.write_json("segments.json", &index)
}

fn bnd_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut files = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    for e in entries {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "bnd") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                files.insert(stem.to_string(), p);
            }
        }
    }
    if files.is_empty() {
        return Err(Error::Data(format!("no .bnd files in {}", dir.display())));
    }
    Ok(files)
}

fn times_of(path: &Path, kind: BoundaryKind) -> Result<Vec<i64>> {
    Ok(read_boundaries(path)?.into_iter().filter(|&(_, k)| k == kind).map(|(t, _)| t).collect())
}

/// Predictions paired with references, plus diagnostics for the report.
fn eval_set(config: &Config, args: &EvalArgs) -> Result<(Vec<UtteranceBoundaries>, BTreeMap<String, Value>)> {
    let (kind, level) = match args.level {
        LevelArg::Phone => (BoundaryKind::Phone, Level::Phone),
        LevelArg::Word => (BoundaryKind::Word, Level::Word),
    };
    let preds = bnd_files(&args.predictions)?;
    let index_path = args.predictions.join("segments.json");
    let spans: BTreeMap<String, i64> = if index_path.exists() {
        let text = fs::read_to_string(&index_path)?;
        let index: SegmentIndex = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", index_path.display())))?;
        index.utterances.into_iter().map(|e| (e.id, e.span_ms)).collect()
    } else {
        BTreeMap::new()
    };
    let reference: Box<dyn Fn(&str) -> Result<Vec<i64>>> = match &args.reference {
        Some(dir) => {
            let files = bnd_files(dir)?;
            Box::new(move |id| {
                let p = files
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("no reference file for `{id}`")))?;
                times_of(p, kind)
            })
        }
        None => {
            let m = manifest(config)?;
            let split = args.split.into();
            let paths: BTreeMap<String, Option<PathBuf>> = m
                .entries(split)
                .map(|e| {
                    let p = if level == Level::Phone { &e.phones } else { &e.words };
                    (e.id.clone(), p.as_ref().map(|p| m.root.join(p)))
                })
                .collect();
            Box::new(move |id| match paths.get(id) {
                Some(Some(p)) => Ok(load_alignment(p, level)?.boundaries_ms()),
                Some(None) => Err(Error::Data(format!("`{id}` has no {kind:?} alignment"))),
                None => Err(Error::Data(format!("`{id}` is not in the {split:?} split"))),
            })
        }
    };
    let hop = HOP_MS as i64;
    let mut set = Vec::with_capacity(preds.len());
    for (id, path) in &preds {
        let times = times_of(path, kind)?;
        let reference_ms = reference(id)?;
        if let Some(t) = times.iter().find(|&&t| t <= 0 || t % hop != 0) {
            return Err(Error::Data(format!(
                "{}: predicted boundary {t} ms is not a positive multiple of {hop} ms",
                path.display()
            )));
        }
        let last = times.iter().chain(&reference_ms).copied().max().unwrap_or(0);
        let span = spans.get(id).copied().unwrap_or(last - last.rem_euclid(hop) + hop);
        if times.last().is_some_and(|&t| t >= span) {
            return Err(Error::Data(format!("{}: boundary beyond the {span} ms span", path.display())));
        }
        let frames = times.iter().map(|&t| (t / hop) as usize).collect();
        set.push(UtteranceBoundaries {
            reference_ms,
            predicted: Segmentation::new(frames, (span / hop) as usize, Origin::Detected)?,
        });
    }
    let excluded: usize = set.iter().map(UtteranceBoundaries::excluded_reference).sum();
    let notes = BTreeMap::from([
        ("level".to_string(), json!(format!("{:?}", args.level).to_lowercase())),
        ("utterances".to_string(), json!(set.len())),
        ("excluded_reference".to_string(), json!(excluded)),
        ("tolerance_ms".to_string(), json!(config.eval.tolerance_ms)),
    ]);
    Ok((set, notes))
}

pub fn eval_seg(config: &Config, args: &EvalArgs, out: &mut Outputs) -> Result<()> {
    let (set, notes) = eval_set(config, args)?;
    let scores = evaluate(&set, config.eval.offset_ms, config.eval.tolerance_ms)?;
    let csv = sweep_csv(std::slice::from_ref(&scores));
    let mut r = report(config)?;
    r.offsets = vec![scores];
    r.notes = notes;
    write_report(out, "eval.json", &r)?;
    out.write("eval.csv", csv.as_bytes())
}

pub fn sweep_offset(config: &Config, args: &EvalArgs, out: &mut Outputs) -> Result<()> {
    let (set, notes) = eval_set(config, args)?;
    let sweep = offset_sweep(&set, &config.eval.offsets, config.eval.tolerance_ms)?;
    let csv = sweep_csv(&sweep.rows);
    let mut r = report(config)?;
    r.best_offset_ms = Some(sweep.best_offset_ms);
    r.offsets = sweep.rows;
    r.notes = notes;
    write_report(out, "sweep.json", &r)?;
    out.write("sweep.csv", csv.as_bytes())
}

fn repr_name(r: Representation) -> &'static str {
    match r {
        Representation::Latent => "latent",
        Representation::Context => "context",
    }
}

pub fn probe(config: &Config, checkpoint: &Path, out: &mut Outputs) -> Result<()> {
    let model = load_checkpoint(checkpoint, None)?;
    let m = manifest(config)?;
    let train = m.load_split(Split::Train)?;
    let test = m.load_split(Split::Test)?;
    let rtr = represent_all(&model, &train)?;
    let rte = represent_all(&model, &test)?;
    let repr = config.eval.representation;
    let p = probe_phones((&train, &rtr), (&test, &rte), repr, &config.eval.probe)?;
    let mut r = report(config)?;
    r.probe_accuracy = Some(p.accuracy);
    r.notes.insert("probe_train_accuracy".into(), json!(p.train_accuracy));
    r.notes.insert("representation".into(), json!(repr_name(repr)));
    write_report(out, "probe.json", &r)
}

pub fn abx(config: &Config, checkpoint: &Path, split: Split, out: &mut Outputs) -> Result<()> {
    let model = load_checkpoint(checkpoint, None)?;
    let utts = manifest(config)?.load_split(split)?;
    let reprs = represent_all(&model, &utts)?;
    let repr = config.eval.representation;
    let (within, across) = abx_scores(&utts, &reprs, repr, config.eval.abx_triples, config.eval.seed)?;
    let mut r = report(config)?;
    r.abx_within = Some(within.error);
    r.abx_across = Some(across.error);
    r.notes.insert("abx_within_triples".into(), json!(within.triples));
    r.notes.insert("abx_across_triples".into(), json!(across.triples));
    r.notes.insert("representation".into(), json!(repr_name(repr)));
    write_report(out, "abx.json", &r)
}

pub fn export_reprs(config: &Config, checkpoint: &Path, split: Split, out: &mut Outputs) -> Result<()> {
    let model = load_checkpoint(checkpoint, None)?;
    let utts = manifest(config)?.load_split(split)?;
    let mut index = Vec::new();
    for u in &utts {
        let r = represent(&model, u)?;
        if r.chunks.is_empty() {
            continue;
        }
        let z = r.features(Representation::Latent);
        let c = r.features(Representation::Context);
        out.write(&format!("{}.z.bin", r.id), &reprs::encode(&z))?;
        out.write(&format!("{}.c.bin", r.id), &reprs::encode(&c))?;
        index.push(json!({
            "id": r.id,
            "speaker": r.speaker,
            "frames": z.rows(),
            "z_dims": z.cols(),
            "c_dims": c.cols(),
            "chunk_origins": r.chunks.iter().map(|c| c.origin_sample).collect::<Vec<_>>(),
        }));
    }
    out.write_json("reprs.json", &json!({ "hop_ms": HOP_MS, "utterances": index }))
}
