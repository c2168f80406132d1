use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{check_alignment, MetricsReport};
use crate::anchors::{Lane, LaneGrid};
use crate::data::LabeledImage;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CulaneParams {
    pub line_width: f64,
    pub iou_threshold: f64,
    pub height: usize,
    pub width: usize,
}

impl CulaneParams {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            line_width: 30.0,
            iou_threshold: 0.5,
            height,
            width,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("eval.image_size", "image size must be positive"));
        }
        if !(self.line_width > 0.0) {
            return Err(Error::config("eval.line_width", "must be > 0"));
        }
        Ok(())
    }
}

/// Binary lane mask at image resolution, one bit per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaneMask {
    pub height: usize,
    pub width: usize,
    bits: Vec<u64>,
}

impl LaneMask {
    fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; (height * width).div_ceil(64)],
        }
    }

    fn set(&mut self, r: usize, c: usize) {
        let i = r * self.width + c;
        self.bits[i / 64] |= 1 << (i % 64);
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        let i = r * self.width + c;
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn intersection(&self, other: &LaneMask) -> u64 {
        self.bits.iter().zip(&other.bits).map(|(a, b)| (a & b).count_ones() as u64).sum()
    }
}

/// Thick polyline mask. A pixel centre `(c, r)` belongs to a segment `a→b`
/// when its projection falls within the segment and its signed offset along
/// the left normal lies in `[−w/2, w/2)`; interior vertices add a disc of
/// radius `w/2` (open), cut to the rows the lane spans. A single point
/// yields just that disc.
pub fn rasterize_lane(lane: &Lane, grid: &LaneGrid, line_width: f64, height: usize, width: usize) -> LaneMask {
    let pts: Vec<(f64, f64)> = lane.image_points(grid).collect();
    let mut mask = LaneMask::new(height, width);
    let half = line_width / 2.0;
    let mut bbox_each = |x0: f64, x1: f64, y0: f64, y1: f64, inside: &dyn Fn(f64, f64) -> bool| {
        let r0 = (y0 - half - 1.0).floor().max(0.0);
        let r1 = (y1 + half + 1.0).ceil().min(height as f64 - 1.0);
        let c0 = (x0 - half - 1.0).floor().max(0.0);
        let c1 = (x1 + half + 1.0).ceil().min(width as f64 - 1.0);
        if r1 < r0 || c1 < c0 {
            return;
        }
        for r in r0 as usize..=r1 as usize {
            for c in c0 as usize..=c1 as usize {
                if inside(c as f64, r as f64) {
                    mask.set(r, c);
                }
            }
        }
    };
    if pts.len() == 1 {
        let v = pts[0];
        let dot = move |x: f64, y: f64| (x - v.0).powi(2) + (y - v.1).powi(2) < half * half;
        bbox_each(v.0, v.0, v.1, v.1, &dot);
        return mask;
    }
    let y_lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let y_hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let disc = |v: (f64, f64)| {
        move |x: f64, y: f64| (y_lo..=y_hi).contains(&y) && (x - v.0).powi(2) + (y - v.1).powi(2) < half * half
    };
    for (k, seg) in pts.windows(2).enumerate() {
        let (a, b) = (seg[0], seg[1]);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len = (dx * dx + dy * dy).sqrt();
        if len > 0.0 {
            let (ux, uy) = (dx / len, dy / len);
            let band = move |x: f64, y: f64| {
                let (px, py) = (x - a.0, y - a.1);
                let t = px * ux + py * uy;
                let d = px * -uy + py * ux;
                (0.0..=len).contains(&t) && d >= -half && d < half
            };
            bbox_each(a.0.min(b.0), a.0.max(b.0), a.1.min(b.1), a.1.max(b.1), &band);
        }
        if k > 0 {
            bbox_each(a.0, a.0, a.1, a.1, &disc(a));
        }
    }
    mask
}

/// Exact IoU from integer pixel counts; 0 when both masks are empty.
pub fn lane_iou(a: &LaneMask, b: &LaneMask) -> f64 {
    let inter = a.intersection(b);
    let union = a.count() + b.count() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Matched `(prediction, ground truth, IoU)` triples of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageMatches {
    pub pairs: Vec<(usize, usize, f64)>,
}

/// Maximum-cardinality bipartite matching by augmenting paths.
fn max_matching(edges: &[Vec<usize>], n_right: usize) -> Vec<Option<usize>> {
    fn augment(u: usize, edges: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &v in &edges[u] {
            if !seen[v] {
                seen[v] = true;
                if owner[v].is_none_or(|w| augment(w, edges, seen, owner)) {
                    owner[v] = Some(u);
                    return true;
                }
            }
        }
        false
    }
    let mut owner = vec![None; n_right];
    for u in 0..edges.len() {
        let mut seen = vec![false; n_right];
        augment(u, edges, &mut seen, &mut owner);
    }
    owner
}

/// Scores rasterised lanes. `categories`, when given, tags each
/// ground-truth image for the per-category breakdown.
pub fn culane_score(
    predictions: &[LabeledImage],
    ground_truth: &[LabeledImage],
    params: &CulaneParams,
    categories: Option<&[String]>,
) -> Result<(MetricsReport, Vec<ImageMatches>)> {
    params.validate()?;
    check_alignment(predictions, ground_truth)?;
    if let Some(c) = categories {
        if c.len() != ground_truth.len() {
            return Err(Error::ImageMismatch(format!(
                "{} category tags for {} images",
                c.len(),
                ground_truth.len()
            )));
        }
    }
    let mut totals = (0u64, 0u64, 0u64);
    let mut per_category: BTreeMap<String, (u64, u64, u64)> = BTreeMap::new();
    let mut all_matches = Vec::with_capacity(ground_truth.len());
    for (k, (p_img, g_img)) in predictions.iter().zip(ground_truth).enumerate() {
        let masks = |lanes: &[Lane]| -> Vec<LaneMask> {
            lanes
                .iter()
                .map(|l| {
                    let grid = LaneGrid {
                        n_pts: l.n_pts(),
                        height: params.height,
                        width: params.width,
                    };
                    rasterize_lane(l, &grid, params.line_width, params.height, params.width)
                })
                .collect()
        };
        let pm = masks(&p_img.lanes);
        let gm = masks(&g_img.lanes);
        let iou: Vec<Vec<f64>> = pm.iter().map(|p| gm.iter().map(|g| lane_iou(p, g)).collect()).collect();
        let edges: Vec<Vec<usize>> = iou
            .iter()
            .map(|row| (0..gm.len()).filter(|&j| row[j] > params.iou_threshold).collect())
            .collect();
        let owner = max_matching(&edges, gm.len());
        let mut pairs: Vec<(usize, usize, f64)> = owner
            .iter()
            .enumerate()
            .filter_map(|(g, p)| p.map(|p| (p, g, iou[p][g])))
            .collect();
        pairs.sort_by_key(|&(p, g, _)| (p, g));
        let tp = pairs.len() as u64;
        let counts = (tp, pm.len() as u64 - tp, gm.len() as u64 - tp);
        totals = (totals.0 + counts.0, totals.1 + counts.1, totals.2 + counts.2);
        if let Some(c) = categories {
            let e = per_category.entry(c[k].clone()).or_default();
            *e = (e.0 + counts.0, e.1 + counts.1, e.2 + counts.2);
        }
        all_matches.push(ImageMatches { pairs });
    }
    let mut report = MetricsReport::from_counts(totals.0, totals.1, totals.2);
    report.categories = per_category
        .into_iter()
        .map(|(name, (tp, fp, fn_))| (name, MetricsReport::from_counts(tp, fp, fn_)))
        .collect();
    Ok((report, all_matches))
}
