use serde::{Deserialize, Serialize};

use super::{check_alignment, MetricsReport};
use crate::anchors::Lane;
use crate::data::LabeledImage;
use crate::error::{Error, Result};

/// How point accuracy is aggregated over images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccuracyMode {
    /// Correct points over ground-truth points, summed over every image.
    Pooled,
    /// Mean of the per-image ratios.
    PerClip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuSimpleParams {
    pub point_tolerance: f64,
    pub lane_accuracy_threshold: f64,
    pub mode: AccuracyMode,
}

impl Default for TuSimpleParams {
    fn default() -> Self {
        Self {
            point_tolerance: 20.0,
            lane_accuracy_threshold: 0.85,
            mode: AccuracyMode::Pooled,
        }
    }
}

/// Ground-truth points of `gt` that `pred` hits within `tol` at the same row.
fn correct_points(pred: &Lane, gt: &Lane, tol: f64) -> usize {
    let (s, e) = (pred.start.max(gt.start), pred.end.min(gt.end));
    if e < s {
        return 0;
    }
    (s..=e).filter(|&i| (pred.xs[i] - gt.xs[i]).abs() < tol).count()
}

pub fn tusimple_score(
    predictions: &[LabeledImage],
    ground_truth: &[LabeledImage],
    params: &TuSimpleParams,
) -> Result<MetricsReport> {
    check_alignment(predictions, ground_truth)?;
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    let (mut correct_total, mut points_total) = (0usize, 0usize);
    let mut clip_ratios = Vec::new();
    for (p_img, g_img) in predictions.iter().zip(ground_truth) {
        let (preds, gts) = (&p_img.lanes, &g_img.lanes);
        for lane in preds.iter().chain(gts) {
            if gts.first().is_some_and(|g| g.n_pts() != lane.n_pts()) {
                return Err(Error::dim("tusimple_score", "lanes of one image use different grids"));
            }
        }
        let mut pairs = Vec::with_capacity(preds.len() * gts.len());
        for (pi, p) in preds.iter().enumerate() {
            for (gi, g) in gts.iter().enumerate() {
                let c = correct_points(p, g, params.point_tolerance);
                pairs.push((c as f64 / g.len() as f64, c, pi, gi));
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
        let mut pred_used = vec![false; preds.len()];
        let mut gt_used = vec![false; gts.len()];
        let mut correct = 0;
        let mut hits = 0;
        for (acc, c, pi, gi) in pairs {
            if pred_used[pi] || gt_used[gi] {
                continue;
            }
            pred_used[pi] = true;
            gt_used[gi] = true;
            correct += c;
            if acc > params.lane_accuracy_threshold {
                hits += 1;
            }
        }
        let points: usize = gts.iter().map(Lane::len).sum();
        tp += hits;
        fp += preds.len() as u64 - hits;
        fn_ += gts.len() as u64 - hits;
        correct_total += correct;
        points_total += points;
        if points > 0 {
            clip_ratios.push(correct as f64 / points as f64);
        }
    }
    let mut report = MetricsReport::from_counts(tp, fp, fn_);
    report.accuracy = Some(match params.mode {
        AccuracyMode::Pooled if points_total > 0 => correct_total as f64 / points_total as f64,
        AccuracyMode::PerClip if !clip_ratios.is_empty() => {
            clip_ratios.iter().sum::<f64>() / clip_ratios.len() as f64
        }
        _ => 1.0,
    });
    Ok(report)
}
