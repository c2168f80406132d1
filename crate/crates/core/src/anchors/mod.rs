//! Line anchors: generation, projection onto the feature map and
//! frequency-based filtering.
//!
//! Coordinates follow one fixed frame throughout the crate. Image x grows to
//! the right from the left edge. Heights `y` grow upward from the bottom edge
//! (so a lane's index 0 is the bottom of the image). An anchor direction
//! `theta` is measured in degrees from the +x axis turning upward, so 90° is
//! a vertical line and angles below 90° lean right.

mod lane;

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::lane_distance;

pub use lane::{Lane, LaneGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Border {
    Left,
    Bottom,
    Right,
}

impl Border {
    pub const ALL: [Border; 3] = [Border::Left, Border::Bottom, Border::Right];

    pub fn name(&self) -> &'static str {
        match self {
            Border::Left => "left",
            Border::Bottom => "bottom",
            Border::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Option<Border> {
        match s {
            "left" => Some(Border::Left),
            "bottom" => Some(Border::Bottom),
            "right" => Some(Border::Right),
            _ => None,
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

/// `(cos θ, sin θ)` for an angle in degrees, exact at multiples of 45°.
pub fn direction(theta_deg: f64) -> (f64, f64) {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    match theta_deg {
        t if t == 45.0 => (h, h),
        t if t == 90.0 => (0.0, 1.0),
        t if t == 135.0 => (-h, h),
        t => {
            let r = t.to_radians();
            (r.cos(), r.sin())
        }
    }
}

/// `1/tan θ` for an angle in degrees; exact at 45°, 90° and 135°.
pub fn cot_deg(theta_deg: f64) -> f64 {
    match theta_deg {
        t if t == 45.0 => 1.0,
        t if t == 90.0 => 0.0,
        t if t == 135.0 => -1.0,
        t => {
            let (c, s) = direction(t);
            c / s
        }
    }
}

/// Feature-map geometry the anchors are projected onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

/// One projected feature-map row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectedRow {
    /// Height index `j` (0 = bottom row of the feature map).
    pub row: usize,
    pub col: i64,
    pub in_bounds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub id: usize,
    pub border: Border,
    pub x_orig: f64,
    /// Upward height of the origin; always a grid height.
    pub y_orig: f64,
    pub theta: f64,
    /// Grid index of `y_orig`.
    pub start_index: usize,
    /// Cached projection column per feature row `j` (bottom first), filled by
    /// [`AnchorSet::project`].
    pub feature_cols: Vec<i64>,
}

impl Anchor {
    /// x of the anchor line at upward height `y`, in image pixels.
    pub fn x_at(&self, y: f64) -> f64 {
        self.x_orig + cot_deg(self.theta) * (y - self.y_orig)
    }

    /// The anchor line sampled on the grid over `start_index..=n_pts−1`.
    pub fn to_lane(&self, grid: &LaneGrid) -> Lane {
        let xs = (0..grid.n_pts).map(|i| self.x_at(grid.y(i))).collect();
        Lane::new(xs, self.start_index, grid.n_pts - 1).expect("start index lies on the grid")
    }
}

/// Integer feature column hit by the anchor line at every feature row:
/// `x_j = floor(cot θ · (j − y_orig/stride) + x_orig/stride)`.
///
/// `j` counts feature rows upward from the bottom, matching the height frame
/// of the anchor origin. Columns outside `[0, width−1]` are kept and flagged.
pub fn project_anchor(anchor: &Anchor, feature: (usize, usize), stride: usize) -> Vec<ProjectedRow> {
    assert!(stride >= 1, "stride must be positive");
    let (h, w) = feature;
    let cot = cot_deg(anchor.theta);
    let s = stride as f64;
    (0..h)
        .map(|j| {
            let x = (cot * (j as f64 - anchor.y_orig / s) + anchor.x_orig / s).floor();
            let col = x.clamp(i64::MIN as f64, i64::MAX as f64) as i64;
            ProjectedRow {
                row: j,
                col,
                in_bounds: col >= 0 && col < w as i64,
            }
        })
        .collect()
}

/// Origin counts and angle lists per border.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub left_origins: usize,
    pub bottom_origins: usize,
    pub right_origins: usize,
    pub left_angles: Vec<f64>,
    pub bottom_angles: Vec<f64>,
    pub right_angles: Vec<f64>,
}

impl Default for AnchorConfig {
    /// 72 origins on each side border (one per grid row when `n_pts = 72`),
    /// 128 on the bottom border. The two bottom corners are shared with the
    /// side borders; the 22°/158° anchors at those corners are generated once,
    /// which gives 2,782 anchors in total.
    fn default() -> Self {
        Self {
            left_origins: 72,
            bottom_origins: 128,
            right_origins: 72,
            left_angles: vec![72.0, 60.0, 49.0, 39.0, 30.0, 22.0],
            bottom_angles: vec![
                165.0, 158.0, 146.0, 135.0, 124.0, 113.0, 102.0, 90.0, 78.0, 67.0, 56.0, 45.0, 34.0,
                22.0, 15.0,
            ],
            right_angles: vec![108.0, 120.0, 131.0, 141.0, 150.0, 158.0],
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        let borders = [
            ("left", self.left_origins, &self.left_angles),
            ("bottom", self.bottom_origins, &self.bottom_angles),
            ("right", self.right_origins, &self.right_angles),
        ];
        for (name, count, angles) in borders {
            if count > 0 && angles.is_empty() {
                return Err(Error::config(
                    format!("anchors.{name}_angles"),
                    "must not be empty when the border has origins",
                ));
            }
            if let Some(a) = angles.iter().find(|a| !(a.is_finite() && **a > 0.0 && **a < 180.0)) {
                return Err(Error::config(
                    format!("anchors.{name}_angles"),
                    format!("angle {a} must lie strictly between 0 and 180 degrees"),
                ));
            }
        }
        if borders.iter().all(|(_, c, a)| *c == 0 || a.is_empty()) {
            return Err(Error::config("anchors", "configuration generates no anchors"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
    pub config: AnchorConfig,
    pub grid: LaneGrid,
    pub feature: Option<FeatureGrid>,
}

fn spread(count: usize) -> impl Iterator<Item = f64> {
    (0..count).map(move |k| {
        if count == 1 {
            0.5
        } else {
            k as f64 / (count - 1) as f64
        }
    })
}

/// Generates anchors in a fixed order: left border top to bottom, bottom
/// border left to right, right border top to bottom; angles in config order
/// at each origin. Side-border origins sit on grid heights. An anchor equal to
/// one already generated (same origin and angle) is skipped.
pub fn generate_anchors(config: &AnchorConfig, grid: LaneGrid) -> Result<AnchorSet> {
    config.validate()?;
    let top = (grid.n_pts - 1) as f64;
    let w = grid.width as f64;
    let mut candidates: Vec<(Border, f64, usize, f64)> = Vec::new();
    for f in spread(config.left_origins) {
        let i = ((1.0 - f) * top).round() as usize;
        for &t in &config.left_angles {
            candidates.push((Border::Left, 0.0, i, t));
        }
    }
    for f in spread(config.bottom_origins) {
        for &t in &config.bottom_angles {
            candidates.push((Border::Bottom, f * w, 0, t));
        }
    }
    for f in spread(config.right_origins) {
        let i = ((1.0 - f) * top).round() as usize;
        for &t in &config.right_angles {
            candidates.push((Border::Right, w, i, t));
        }
    }

    let mut seen = HashSet::new();
    let mut anchors = Vec::with_capacity(candidates.len());
    for (border, x, i, theta) in candidates {
        let y = grid.y(i);
        if !seen.insert((x.to_bits(), y.to_bits(), theta.to_bits())) {
            continue;
        }
        anchors.push(Anchor {
            id: anchors.len(),
            border,
            x_orig: x,
            y_orig: y,
            theta,
            start_index: i,
            feature_cols: Vec::new(),
        });
    }
    Ok(AnchorSet {
        anchors,
        config: config.clone(),
        grid,
        feature: None,
    })
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Caches the projection of every anchor onto `feature`.
    pub fn project(&mut self, feature: FeatureGrid) {
        for a in &mut self.anchors {
            a.feature_cols = project_anchor(a, (feature.height, feature.width), feature.stride)
                .into_iter()
                .map(|r| r.col)
                .collect();
        }
        self.feature = Some(feature);
    }

    pub fn with_projection(mut self, feature: FeatureGrid) -> Self {
        self.project(feature);
        self
    }

    /// Anchor lines as lanes over `start_index..=n_pts−1`.
    pub fn as_lanes(&self) -> Vec<Lane> {
        self.anchors.iter().map(|a| a.to_lane(&self.grid)).collect()
    }

    /// The anchors at `indices` in ascending original order, re-numbered
    /// `0..len`.
    pub fn select(&self, indices: &[usize]) -> AnchorSet {
        let mut idx = indices.to_vec();
        idx.sort_unstable();
        idx.dedup();
        let anchors = idx
            .iter()
            .enumerate()
            .map(|(new_id, &i)| Anchor {
                id: new_id,
                ..self.anchors[i].clone()
            })
            .collect();
        AnchorSet {
            anchors,
            config: self.config.clone(),
            grid: self.grid,
            feature: self.feature,
        }
    }

    /// `id,border,x_orig,y_orig,theta` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,border,x_orig,y_orig,theta\n");
        for a in &self.anchors {
            let _ = writeln!(s, "{},{},{},{},{}", a.id, a.border.name(), a.x_orig, a.y_orig, a.theta);
        }
        s
    }

    /// Reads the CSV written by [`AnchorSet::to_csv`]. Every origin height
    /// must be a grid height of `grid`.
    pub fn from_csv(text: &str, grid: LaneGrid, config: AnchorConfig) -> Result<AnchorSet> {
        let mut anchors = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (n == 0 && line.starts_with("id")) {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let bad = |r: &str| Error::parse(Some(n + 1), r.to_string());
            if fields.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("invalid number"));
            let border = Border::parse(fields[1].trim()).ok_or_else(|| bad("unknown border"))?;
            let (x, y, theta) = (num(fields[2])?, num(fields[3])?, num(fields[4])?);
            if !(theta > 0.0 && theta < 180.0) {
                return Err(bad("angle must lie strictly between 0 and 180"));
            }
            let start_index = grid.index_of(y).ok_or_else(|| bad("origin height is not on the grid"))?;
            anchors.push(Anchor {
                id: anchors.len(),
                border,
                x_orig: x,
                y_orig: y,
                theta,
                start_index,
                feature_cols: Vec::new(),
            });
        }
        if anchors.is_empty() {
            return Err(Error::parse(None, "anchor file lists no anchors"));
        }
        Ok(AnchorSet {
            anchors,
            config,
            grid,
            feature: None,
        })
    }
}

/// Per anchor, the number of training images in which it would be labelled
/// positive (lane distance below `pos_threshold` to some ground truth).
pub fn positive_counts(anchor_set: &AnchorSet, samples: &[Vec<Lane>], pos_threshold: f64) -> Result<Vec<u64>> {
    if samples.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let lanes = anchor_set.as_lanes();
    let mut counts = vec![0u64; lanes.len()];
    for gts in samples {
        for (c, a) in counts.iter_mut().zip(&lanes) {
            if gts.iter().any(|g| lane_distance(a, g) < pos_threshold) {
                *c += 1;
            }
        }
    }
    Ok(counts)
}

/// Indices of the `n` largest counts; ties go to the lower index. Returned
/// in ascending index order.
pub fn top_indices(counts: &[u64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(n).collect();
    kept.sort_unstable();
    kept
}

/// Keeps the `n_anchors` anchors marked positive most often over the training
/// ground truth, preserving their original order.
pub fn filter_anchors(
    anchor_set: &AnchorSet,
    samples: &[Vec<Lane>],
    n_anchors: usize,
    pos_threshold: f64,
) -> Result<AnchorSet> {
    if n_anchors == 0 || n_anchors > anchor_set.len() {
        return Err(Error::config(
            "model.n_anchors",
            format!("must be in 1..={}, got {n_anchors}", anchor_set.len()),
        ));
    }
    let counts = positive_counts(anchor_set, samples, pos_threshold)?;
    Ok(anchor_set.select(&top_indices(&counts, n_anchors)))
}
