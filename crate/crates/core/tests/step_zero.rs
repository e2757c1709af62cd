//! Step-0 losses of a freshly initialised model sit near the value every
//! component takes under uniform scores.

use cpcseg::data::{synth_corpus, SynthSpec};
use cpcseg::model::{Model, ModelConfig, Variant};
use cpcseg::trainer::{prepare_chunks, TrainConfig, Trainer};

#[test]
fn step_zero_total_matches_uniform_scores() {
    let cfg = Variant::MacpcAdj.apply(&ModelConfig::reduced());
    let ln1 = |n: usize| ((n + 1) as f64).ln();
    let (mut got, mut want) = (0.0, 0.0);
    for seed in 0..5 {
        let utts = synth_corpus(&SynthSpec { seed, ..SynthSpec::default() }, 20).unwrap();
        let chunks = prepare_chunks(&utts, cfg.encoder.chunk_samples);
        let batch: Vec<_> = chunks.iter().take(32).collect();
        assert_eq!(batch.len(), 32);
        let tc = TrainConfig { seed, ..TrainConfig::default() };
        let mut trainer = Trainer::new(Model::new(cfg.clone(), seed).unwrap(), tc).unwrap();
        let rec = trainer.step(&batch, 0).unwrap().clone();
        let seg_share = rec.segment_chunks as f64 / rec.chunks as f64;
        let expect = ln1(cfg.negatives)
            + seg_share * ln1(cfg.segment_negatives)
            + cfg.adjacent_loss_weight * ln1(cfg.adjacent_negatives);
        eprintln!(
            "seed {seed}: total {:.3} (frame {:?} segment {:?} on {} chunks, adjacent {:?}), uniform {expect:.3}",
            rec.total, rec.frame, rec.segment, rec.segment_chunks, rec.adjacent
        );
        got += rec.total / 5.0;
        want += expect / 5.0;
    }
    assert!((got - want).abs() <= 0.3, "step-0 total {got:.3} vs uniform-score expectation {want:.3}");
}
