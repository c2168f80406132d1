use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::anchors::{generate_anchors, AnchorConfig, AnchorSet};
use crate::error::{Error, Result};
use crate::matching::NmsParams;
use crate::model::{LaneAtt, ModelConfig};
use crate::numerics::{mac_total, reset_mac_counter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub warmup: usize,
    pub repetitions: usize,
    pub nms: NmsParams,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 3,
            repetitions: 10,
            nms: NmsParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    /// Repetitions over total timed wall time.
    pub fps: f64,
    /// Standard deviation of the per-repetition frame rates.
    pub fps_spread: f64,
    /// Counted multiply-accumulates of one forward pass.
    pub macs: u64,
    pub n_anchors: usize,
    pub height: usize,
    pub width: usize,
}

/// `n` anchors spread evenly over the default generated set, for timing
/// runs that have no training data to filter with.
pub fn evenly_spaced_anchors(config: &ModelConfig, n: usize) -> Result<AnchorSet> {
    let full = generate_anchors(&AnchorConfig::default(), config.lane_grid())?;
    if n == 0 || n > full.len() {
        return Err(Error::config(
            "anchors.n_anchors",
            format!("{n} is outside 1..={}", full.len()),
        ));
    }
    let picks: Vec<usize> = (0..n).map(|i| i * full.len() / n).collect();
    Ok(full.select(&picks))
}

/// Times single-image forward passes plus NMS on a constant mid-grey input.
pub fn benchmark(model: &LaneAtt, config: &BenchConfig) -> Result<BenchResult> {
    if config.repetitions < 10 {
        return Err(Error::config("bench.repetitions", "need at least 10"));
    }
    if config.warmup < 3 {
        return Err(Error::config("bench.warmup", "need at least 3"));
    }
    let bb = &model.config.backbone;
    let image = Tensor::full(&[3, bb.input_height, bb.input_width], 0.5);

    reset_mac_counter();
    model.detect(image.clone(), &config.nms)?;
    let macs = mac_total();
    for _ in 1..config.warmup {
        model.detect(image.clone(), &config.nms)?;
    }

    let mut per_rep = Vec::with_capacity(config.repetitions);
    let started = Instant::now();
    for _ in 0..config.repetitions {
        let t = Instant::now();
        std::hint::black_box(model.detect(image.clone(), &config.nms)?);
        per_rep.push(t.elapsed().as_secs_f64());
    }
    let total = started.elapsed().as_secs_f64();
    let rates: Vec<f64> = per_rep.iter().map(|t| 1.0 / t.max(1e-12)).collect();
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rates.len() as f64;
    Ok(BenchResult {
        fps: config.repetitions as f64 / total.max(1e-12),
        fps_spread: var.sqrt(),
        macs,
        n_anchors: model.n_anchors(),
        height: bb.input_height,
        width: bb.input_width,
    })
}
