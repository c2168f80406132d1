use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed vertical sampling grid shared by lanes and anchors.
///
/// Index `i` sits at height `y_i = i·H/(n_pts−1)` measured upward from the
/// bottom edge of the image, so index 0 is the bottom and `n_pts−1` the top.
/// Image rows (top-down) are `H − y_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneGrid {
    pub n_pts: usize,
    pub height: usize,
    pub width: usize,
}

impl LaneGrid {
    pub fn new(n_pts: usize, height: usize, width: usize) -> Result<Self> {
        if n_pts < 2 {
            return Err(Error::config("model.n_pts", "need at least 2 points"));
        }
        if height == 0 || width == 0 {
            return Err(Error::config("model.input_size", "image size must be positive"));
        }
        Ok(Self {
            n_pts,
            height,
            width,
        })
    }

    /// Upward height of grid index `i`.
    pub fn y(&self, i: usize) -> f64 {
        i as f64 * self.height as f64 / (self.n_pts - 1) as f64
    }

    /// Top-down image row of grid index `i`.
    pub fn image_y(&self, i: usize) -> f64 {
        self.height as f64 - self.y(i)
    }

    /// Grid index whose height equals `y` (within 1e-9 px).
    pub fn index_of(&self, y: f64) -> Option<usize> {
        let f = y * (self.n_pts - 1) as f64 / self.height as f64;
        let i = f.round();
        if i < 0.0 || i > (self.n_pts - 1) as f64 {
            return None;
        }
        ((self.y(i as usize) - y).abs() < 1e-9).then_some(i as usize)
    }
}

/// A lane as x-coordinates on a [`LaneGrid`] with a contiguous valid range
/// `start..=end`. Entries outside that range carry no meaning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub xs: Vec<f64>,
    pub start: usize,
    pub end: usize,
    pub score: Option<f64>,
    pub category: Option<u32>,
}

impl Lane {
    pub fn new(xs: Vec<f64>, start: usize, end: usize) -> Result<Self> {
        if xs.is_empty() || start > end || end >= xs.len() {
            return Err(Error::dim(
                "lane",
                format!("invalid range {start}..={end} for {} points", xs.len()),
            ));
        }
        Ok(Self {
            xs,
            start,
            end,
            score: None,
            category: None,
        })
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn n_pts(&self) -> usize {
        self.xs.len()
    }

    /// Number of valid points.
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn valid_xs(&self) -> &[f64] {
        &self.xs[self.start..=self.end]
    }

    /// `(x, image_y)` pairs over the valid range, bottom first.
    pub fn image_points<'a>(&'a self, grid: &'a LaneGrid) -> impl Iterator<Item = (f64, f64)> + 'a {
        (self.start..=self.end).map(move |i| (self.xs[i], grid.image_y(i)))
    }

    /// Restricts the valid range to the bottom-most contiguous run of points
    /// with `0 ≤ x < width`. `None` if no point is inside.
    pub fn clip_to_width(&self, width: f64) -> Option<Lane> {
        let inside = |x: f64| x.is_finite() && (0.0..width).contains(&x);
        let first = (self.start..=self.end).find(|&i| inside(self.xs[i]))?;
        let mut last = first;
        while last < self.end && inside(self.xs[last + 1]) {
            last += 1;
        }
        let mut lane = self.clone();
        lane.start = first;
        lane.end = last;
        Some(lane)
    }

    /// Builds a lane from `(x, image_y)` labels by linear interpolation at the
    /// grid heights inside the labelled extent. Nothing is extrapolated.
    /// Returns `None` when no grid height falls inside the labels.
    pub fn from_points(points: &[(f64, f64)], grid: &LaneGrid) -> Option<Lane> {
        let mut pts: Vec<(f64, f64)> = points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| (x, grid.height as f64 - y))
            .collect();
        if pts.is_empty() {
            return None;
        }
        pts.sort_by(|a, b| a.1.total_cmp(&b.1));
        pts.dedup_by(|a, b| a.1 == b.1);
        let (lo, hi) = (pts[0].1, pts[pts.len() - 1].1);
        let eps = 1e-9;
        let mut xs = vec![0.0; grid.n_pts];
        let mut range: Option<(usize, usize)> = None;
        let mut seg = 0;
        for (i, x) in xs.iter_mut().enumerate() {
            let y = grid.y(i);
            if y < lo - eps || y > hi + eps {
                continue;
            }
            while seg + 1 < pts.len() - 1 && pts[seg + 1].1 < y {
                seg += 1;
            }
            *x = if pts.len() == 1 {
                pts[0].0
            } else {
                let (a, b) = (pts[seg], pts[seg + 1]);
                let t = ((y - a.1) / (b.1 - a.1)).clamp(0.0, 1.0);
                a.0 + t * (b.0 - a.0)
            };
            range = Some(match range {
                None => (i, i),
                Some((s, _)) => (s, i),
            });
        }
        let (s, e) = range?;
        Lane::new(xs, s, e).ok()
    }
}
