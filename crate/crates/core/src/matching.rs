//! Lane distance, non-maximum suppression and training target assignment.

use serde::{Deserialize, Serialize};

use crate::anchors::Lane;
use crate::error::{Error, Result};

/// Mean absolute x difference over the indices both lanes cover, or `+∞`
/// when their valid ranges do not overlap.
pub fn lane_distance(a: &Lane, b: &Lane) -> f64 {
    let s = a.start.max(b.start);
    let e = a.end.min(b.end);
    if e < s {
        return f64::INFINITY;
    }
    let total: f64 = (s..=e).map(|i| (a.xs[i] - b.xs[i]).abs()).sum();
    total / (e - s + 1) as f64
}

/// A scored lane proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub lane: Lane,
    pub score: f64,
    pub anchor_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsParams {
    /// Proposals closer than this (lane distance, px) to a kept one are dropped.
    pub distance_threshold: f64,
    /// Proposals scoring below this are discarded first. `None` disables the
    /// filter (training-time behaviour).
    pub confidence_threshold: Option<f64>,
    pub max_keep: Option<usize>,
}

impl Default for NmsParams {
    fn default() -> Self {
        Self {
            distance_threshold: 50.0,
            confidence_threshold: Some(0.5),
            max_keep: None,
        }
    }
}

/// Greedy suppression. Returns indices into `detections` in the order they
/// were kept (descending score; equal scores by ascending anchor id).
pub fn nms(detections: &[Detection], params: &NmsParams) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len())
        .filter(|&i| params.confidence_threshold.is_none_or(|c| detections[i].score >= c))
        .collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then(detections[a].anchor_id.cmp(&detections[b].anchor_id))
    });
    let limit = params.max_keep.unwrap_or(usize::MAX);
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= limit {
            break;
        }
        let lane = &detections[i].lane;
        if kept
            .iter()
            .all(|&k| lane_distance(&detections[k].lane, lane) >= params.distance_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    /// Paired with the ground truth at this index.
    Positive(usize),
    Negative,
    Ignored,
}

/// Regression target of one positive anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTarget {
    pub gt_index: usize,
    /// First supervised index: `max(anchor start, gt start)`.
    pub start: usize,
    /// Last supervised index: the ground truth's end.
    pub end: usize,
    /// Ground-truth x over `start..=end`.
    pub xs: Vec<f64>,
    /// Length target, counted from the anchor's start index so that decoding
    /// `e = s + floor(l) − 1` lands on the ground-truth end.
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub labels: Vec<Label>,
    pub targets: Vec<Option<RegressionTarget>>,
}

impl AssignmentResult {
    pub fn count(&self, f: impl Fn(&Label) -> bool) -> usize {
        self.labels.iter().filter(|l| f(l)).count()
    }

    pub fn positives(&self) -> usize {
        self.count(|l| matches!(l, Label::Positive(_)))
    }

    pub fn negatives(&self) -> usize {
        self.count(|l| matches!(l, Label::Negative))
    }
}

/// Labels every anchor by its distance to the nearest ground truth:
/// positive below `pos_threshold`, negative above `neg_threshold`, ignored in
/// between. Nearest-ground-truth ties go to the lower index.
pub fn assign_targets(
    anchors: &[Lane],
    ground_truths: &[Lane],
    pos_threshold: f64,
    neg_threshold: f64,
) -> Result<AssignmentResult> {
    if pos_threshold > neg_threshold {
        return Err(Error::config(
            "train.pos_threshold",
            format!("{pos_threshold} exceeds train.neg_threshold {neg_threshold}"),
        ));
    }
    let mut labels = Vec::with_capacity(anchors.len());
    let mut targets = Vec::with_capacity(anchors.len());
    for anchor in anchors {
        let mut best = (f64::INFINITY, usize::MAX);
        for (g, gt) in ground_truths.iter().enumerate() {
            let d = lane_distance(anchor, gt);
            if d < best.0 {
                best = (d, g);
            }
        }
        let (dist, g) = best;
        if dist < pos_threshold {
            let gt = &ground_truths[g];
            let start = anchor.start.max(gt.start);
            let end = gt.end;
            labels.push(Label::Positive(g));
            targets.push(Some(RegressionTarget {
                gt_index: g,
                start,
                end,
                xs: gt.xs[start..=end].to_vec(),
                length: (end + 1 - anchor.start) as f64,
            }));
        } else {
            labels.push(if dist > neg_threshold { Label::Negative } else { Label::Ignored });
            targets.push(None);
        }
    }
    Ok(AssignmentResult { labels, targets })
}
