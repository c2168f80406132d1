//! Benchmark metrics and the efficiency benchmark.

mod bench;
mod culane;
mod report;
mod tusimple;

pub use bench::{benchmark, evenly_spaced_anchors, BenchConfig, BenchResult};
pub use culane::{culane_score, lane_iou, rasterize_lane, CulaneParams, ImageMatches, LaneMask};
pub use report::MetricsReport;
pub use tusimple::{tusimple_score, AccuracyMode, TuSimpleParams};

use crate::data::LabeledImage;
use crate::error::{Error, Result};

/// Checks that predictions and ground truth list the same images in order.
fn check_alignment(predictions: &[LabeledImage], ground_truth: &[LabeledImage]) -> Result<()> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::ImageMismatch(format!(
            "{} prediction images vs {} ground-truth images",
            predictions.len(),
            ground_truth.len()
        )));
    }
    for (p, g) in predictions.iter().zip(ground_truth) {
        if p.raw_file != g.raw_file {
            return Err(Error::ImageMismatch(format!("`{}` paired with `{}`", p.raw_file, g.raw_file)));
        }
    }
    Ok(())
}
