//! Browser demo over the core crate: peak picking on a noisy segmented
//! sequence, an offset sweep of shifted boundaries, and the alignment
//! program behind the aligned prediction loss.
//!
//! Build with `cargo build -p cpcseg-web --target wasm32-unknown-unknown
//! --release`, run `wasm-bindgen --target web` on the output into `www/pkg`
//! and serve `www/`.

use cpcseg::boundary::{detect_peaks, dissimilarity_curve, Origin, Segmentation};
use cpcseg::diff::Tensor;
use cpcseg::metrics::{default_offsets, evaluate, offset_sweep, UtteranceBoundaries, TOLERANCE_MS};
use cpcseg::model::HOP_MS;
use cpcseg::objective::{acpc_table, CostMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use wasm_bindgen::prelude::*;

const HOP: i64 = HOP_MS as i64;

fn js(e: cpcseg::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Boundary frames of a random segmentation of `frames` frames into
/// segments of 3 to 12 frames.
fn random_boundaries(rng: &mut ChaCha8Rng, frames: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut t = rng.random_range(3..=12);
    while t < frames {
        out.push(t);
        t += rng.random_range(3..=12);
    }
    out
}

fn ms(frames: &[usize]) -> Vec<i64> {
    frames.iter().map(|&f| f as i64 * HOP).collect()
}

#[wasm_bindgen]
pub struct Peaks {
    curve: Vec<f64>,
    truth: Vec<u32>,
    detected: Vec<u32>,
    precision: f64,
    recall: f64,
    f1: f64,
    r_value: f64,
}

#[wasm_bindgen]
impl Peaks {
    /// `curve[i]` scores a boundary before frame `i + 1`.
    #[wasm_bindgen(getter)]
    pub fn curve(&self) -> Vec<f64> {
        self.curve.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn truth(&self) -> Vec<u32> {
        self.truth.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn detected(&self) -> Vec<u32> {
        self.detected.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn precision(&self) -> f64 {
        self.precision
    }
    #[wasm_bindgen(getter)]
    pub fn recall(&self) -> f64 {
        self.recall
    }
    #[wasm_bindgen(getter)]
    pub fn f1(&self) -> f64 {
        self.f1
    }
    #[wasm_bindgen(getter)]
    pub fn r_value(&self) -> f64 {
        self.r_value
    }
}

pub fn run_peaks(
    seed: u64,
    frames: usize,
    dims: usize,
    noise: f64,
    prominence: f64,
    min_separation: usize,
) -> cpcseg::Result<Peaks> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = random_boundaries(&mut rng, frames);
    let mut data = Vec::with_capacity(frames * dims);
    let mut edges = truth.iter().chain([&frames]);
    let mut next = *edges.next().unwrap();
    let mut center = unit(&mut rng, dims);
    for t in 0..frames {
        if t == next {
            center = unit(&mut rng, dims);
            next = *edges.next().unwrap();
        }
        data.extend(center.iter().map(|c| c + noise * rng.sample::<f64, _>(StandardNormal)));
    }
    let curve = dissimilarity_curve(&Tensor::new(vec![frames, dims], data)?)?;
    let seg = detect_peaks(&curve, prominence, min_separation.max(1));
    let scores = evaluate(
        &[UtteranceBoundaries {
            reference_ms: ms(&truth),
            predicted: seg.clone(),
        }],
        0,
        TOLERANCE_MS,
    )?
    .mean;
    Ok(Peaks {
        curve: curve.scores,
        truth: truth.iter().map(|&f| f as u32).collect(),
        detected: seg.frames().iter().map(|&f| f as u32).collect(),
        precision: scores.precision,
        recall: scores.recall,
        f1: scores.f1,
        r_value: scores.r_value,
    })
}

fn unit(rng: &mut ChaCha8Rng, dims: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

/// Peak picking on `frames` noisy frames drawn around one random unit
/// vector per true segment.
#[wasm_bindgen]
pub fn peaks(
    seed: u32,
    frames: u32,
    dims: u32,
    noise: f64,
    prominence: f64,
    min_separation: u32,
) -> Result<Peaks, JsError> {
    run_peaks(
        seed.into(),
        frames as usize,
        dims as usize,
        noise,
        prominence,
        min_separation as usize,
    )
    .map_err(js)
}

#[wasm_bindgen]
pub struct Curve {
    offsets: Vec<i32>,
    r_values: Vec<f64>,
    f1s: Vec<f64>,
    best: i32,
}

#[wasm_bindgen]
impl Curve {
    #[wasm_bindgen(getter)]
    pub fn offsets(&self) -> Vec<i32> {
        self.offsets.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn r_values(&self) -> Vec<f64> {
        self.r_values.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn f1s(&self) -> Vec<f64> {
        self.f1s.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn best(&self) -> i32 {
        self.best
    }
}

pub fn run_sweep(seed: u64, shift_ms: i64, jitter_frames: i64, tolerance_ms: i64) -> cpcseg::Result<Curve> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = 300;
    let set = (0..8)
        .map(|_| {
            let truth = random_boundaries(&mut rng, frames);
            let mut pred: Vec<usize> = truth
                .iter()
                .map(|&f| f as i64 + shift_ms / HOP + rng.random_range(-jitter_frames..=jitter_frames))
                .filter(|&f| f > 0 && f < frames as i64)
                .map(|f| f as usize)
                .collect();
            pred.sort_unstable();
            pred.dedup();
            Ok(UtteranceBoundaries {
                reference_ms: ms(&truth),
                predicted: Segmentation::new(pred, frames, Origin::Detected)?,
            })
        })
        .collect::<cpcseg::Result<Vec<_>>>()?;
    let sweep = offset_sweep(&set, &default_offsets(), tolerance_ms)?;
    Ok(Curve {
        offsets: sweep.rows.iter().map(|r| r.offset_ms as i32).collect(),
        r_values: sweep.rows.iter().map(|r| r.mean.r_value).collect(),
        f1s: sweep.rows.iter().map(|r| r.mean.f1).collect(),
        best: sweep.best_offset_ms as i32,
    })
}

/// R-value and F1 against offsets of −50..50 ms for eight utterances
/// whose predictions are the references moved by `shift_ms` plus up to
/// `jitter_frames` of per-boundary jitter.
#[wasm_bindgen]
pub fn sweep(seed: u32, shift_ms: i32, jitter_frames: u32, tolerance_ms: u32) -> Result<Curve, JsError> {
    run_sweep(seed.into(), shift_ms.into(), jitter_frames.into(), tolerance_ms.into()).map_err(js)
}

#[wasm_bindgen]
pub struct Alignment {
    costs: Vec<f64>,
    cumulative: Vec<f64>,
    assign: Vec<u32>,
    total: f64,
}

#[wasm_bindgen]
impl Alignment {
    /// Row-major `K × M`.
    #[wasm_bindgen(getter)]
    pub fn costs(&self) -> Vec<f64> {
        self.costs.clone()
    }
    /// Row-major `K × M`, infinite where unreachable.
    #[wasm_bindgen(getter)]
    pub fn cumulative(&self) -> Vec<f64> {
        self.cumulative.clone()
    }
    /// Prediction chosen for each target.
    #[wasm_bindgen(getter)]
    pub fn assign(&self) -> Vec<u32> {
        self.assign.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn total(&self) -> f64 {
        self.total
    }
}

pub fn run_align(k: usize, m: usize, costs: Vec<f64>) -> cpcseg::Result<Alignment> {
    let table = acpc_table(&CostMatrix::new(k, m, costs.clone())?);
    Ok(Alignment {
        costs,
        cumulative: table.cumulative,
        assign: table.path.assign.iter().map(|&a| a as u32).collect(),
        total: table.path.total,
    })
}

/// Random costs in `[0, 1)` for a `K × M` alignment.
#[wasm_bindgen]
pub fn random_costs(seed: u32, k: u32, m: u32) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.into());
    (0..k * m).map(|_| rng.random::<f64>()).collect()
}

/// Solves the alignment of `K` predictions to `M` targets for row-major
/// costs.
#[wasm_bindgen]
pub fn align(k: u32, m: u32, costs: Vec<f64>) -> Result<Alignment, JsError> {
    run_align(k as usize, m as usize, costs).map_err(js)
}
