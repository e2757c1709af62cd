//! Trains a reduced model on a fresh synthetic corpus and prints the
//! segmentation, probe and ABX scores.
//!
//! `cargo run --release --example synth_run -- [epochs] [variant] [seed] [oracle]`

use std::time::Instant;

use cpcseg::boundary::THRESHOLD_GRID;
use cpcseg::config::Representation;
use cpcseg::data::{synth_corpus, SynthSpec};
use cpcseg::metrics::{evaluate, ProbeConfig, TOLERANCE_MS};
use cpcseg::model::{Model, ModelConfig, Variant};
use cpcseg::pipeline::*;
use cpcseg::trainer::{fit, prepare_chunks, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cpcseg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().map_or(5, |a| a.parse().unwrap());
    let variant: Variant = args.get(1).map_or("macpc-adj", String::as_str).parse()?;
    let seed: u64 = args.get(2).map_or(0, |a| a.parse().unwrap());
    let mut cfg = variant.apply(&ModelConfig::reduced());
    cfg.oracle_boundaries = args.get(3).is_some_and(|a| a == "oracle");

    let all = synth_corpus(&SynthSpec { seed, ..SynthSpec::default() }, 275)?;
    let (train, rest) = all.split_at(200);
    let (valid, test) = rest.split_at(25);
    let chunks = prepare_chunks(train, cfg.encoder.chunk_samples);
    println!("{} train chunks, {} params", chunks.len(), cfg.param_count());

    let t0 = Instant::now();
    let tc = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let trainer = fit(Model::new(cfg, seed)?, &chunks, &tc, None)?;
    println!("trained {} steps in {:.1}s", trainer.log.steps.len(), t0.elapsed().as_secs_f64());
    for s in trainer.log.steps.iter().step_by(7) {
        println!("  step {:3} total {:.3} frame {:?} seg {:?} adj {:?}", s.step, s.total, s.frame, s.segment, s.adjacent);
    }
    let model = trainer.model;

    let rv = represent_all(&model, valid)?;
    let rt = represent_all(&model, test)?;
    let (settings, vr) = tune_segmenter(&model, valid, &rv, &THRESHOLD_GRID, TOLERANCE_MS)?;
    println!("selected prominence {} (valid R {:.3})", settings.prominence, vr.unwrap_or(f64::NAN));
    let set = phone_eval_set(test, &rt, |_, r| settings.phones(r))?;
    for off in [-20, -10, 0, 10] {
        let s = evaluate(&set, off, TOLERANCE_MS)?.mean;
        println!("  offset {off:3}: P {:.3} R {:.3} F1 {:.3} Rv {:.3}", s.precision, s.recall, s.f1, s.r_value);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = evaluate(&random_boundaries(&set, &mut rng)?, 0, TOLERANCE_MS)?.mean;
    println!("random baseline: F1 {:.3} Rv {:.3}", s.f1, s.r_value);

    if settings.words {
        let words = word_eval_set(test, &rt, |u, r| Ok(settings.words(&model, u, r)?.expect("segment level")))?;
        let s = evaluate(&words, 0, TOLERANCE_MS)?.mean;
        println!("words: P {:.3} R {:.3} F1 {:.3} Rv {:.3}", s.precision, s.recall, s.f1, s.r_value);
    }

    let rtr = represent_all(&model, &train[..100])?;
    for repr in [Representation::Context, Representation::Latent] {
        let p = probe_phones((&train[..100], &rtr), (test, &rt), repr, &ProbeConfig::default())?;
        let (within, across) = abx_scores(test, &rt, repr, 2000, seed)?;
        println!(
            "{repr:?}: probe {:.3} (train {:.3}) abx within {:.3} across {:.3}",
            p.accuracy, p.train_accuracy, within.error, across.error
        );
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
