//! The full multi-level loss of a miniature model against central
//! differences, with boundaries frozen to fixed spans.

mod checks;

use checks::composed::{run, CONFIGS, TOL};

#[test]
fn multi_level_loss_matches_central_differences() {
    let mut worst: f64 = 0.0;
    for cfg in 0..CONFIGS {
        let (err, params) = run(cfg);
        assert!((200..=230).contains(&params));
        assert!(err < TOL, "config {cfg}: relative error {err:e}");
        worst = worst.max(err);
    }
    eprintln!("multi-level loss: worst relative error over {CONFIGS} configs {worst:e}");
}
