//! Procedural road scenes: quadratic lanes converging toward a vanishing
//! point, drawn as anti-aliased strokes over a noisy road texture.
//!
//! Image coordinates put pixel `(r, c)` at `(x, y) = (c, r)` with `y` growing
//! downward. Every random draw comes from [`XorShift64Star::for_item`] keyed by
//! `(seed, index)`, so a sample depends on nothing else.

use serde::{Deserialize, Serialize};

use crate::anchors::{Lane, LaneGrid};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::XorShift64Star;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub n_pts: usize,
    pub min_lanes: usize,
    pub max_lanes: usize,
    /// Largest lateral bend at the horizon, px.
    pub max_curvature: f64,
    pub line_width: f64,
    /// Amplitude of the per-pixel uniform noise.
    pub noise: f64,
    pub occlusion_prob: f64,
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    /// Largest shift along each axis, px.
    pub max_translation: f64,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self::for_size(160, 320)
    }
}

impl SyntheticConfig {
    /// Defaults with pixel quantities scaled to the image width.
    pub fn for_size(height: usize, width: usize) -> Self {
        let k = width as f64 / 320.0;
        Self {
            seed: 0,
            height,
            width,
            n_pts: 72,
            min_lanes: 2,
            max_lanes: 5,
            max_curvature: 40.0 * k,
            line_width: 3.0 * k,
            noise: 0.08,
            occlusion_prob: 0.3,
            flip_prob: 0.5,
            max_rotation_deg: 4.0,
            max_translation: 8.0 * k,
            min_scale: 0.95,
            max_scale: 1.05,
        }
    }

    pub fn grid(&self) -> LaneGrid {
        LaneGrid {
            n_pts: self.n_pts,
            height: self.height,
            width: self.width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        LaneGrid::new(self.n_pts, self.height, self.width)?;
        if self.min_lanes == 0 || self.min_lanes > self.max_lanes {
            return Err(Error::config(
                "data.min_lanes",
                format!("need 1 <= min_lanes <= max_lanes, got {}..{}", self.min_lanes, self.max_lanes),
            ));
        }
        for (field, p) in [("data.occlusion_prob", self.occlusion_prob), ("data.flip_prob", self.flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, format!("{p} is not a probability")));
            }
        }
        if !(self.line_width > 0.0) {
            return Err(Error::config("data.line_width", "must be > 0"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("data.noise", "must be >= 0"));
        }
        if !(self.max_curvature >= 0.0 && self.max_rotation_deg >= 0.0 && self.max_translation >= 0.0) {
            return Err(Error::config("data.max_curvature", "jitter ranges must be >= 0"));
        }
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale) {
            return Err(Error::config("data.min_scale", "need 0 < min_scale <= max_scale"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub lanes: Vec<Lane>,
    pub source_id: String,
    /// Scene tag: `normal`, `occluded` or `curve`.
    pub category: String,
}

/// Flip and affine jitter drawn for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub flip: bool,
    pub rotation_deg: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        flip: false,
        rotation_deg: 0.0,
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    /// Mirror (optional), then rotate and scale about the image centre, then shift.
    pub fn apply(&self, (x, y): (f64, f64), width: usize, height: usize) -> (f64, f64) {
        let (cx, cy) = ((width - 1) as f64 / 2.0, (height - 1) as f64 / 2.0);
        let x = if self.flip { (width - 1) as f64 - x } else { x };
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        (
            cx + self.scale * (c * dx - s * dy) + self.tx,
            cy + self.scale * (s * dx + c * dy) + self.ty,
        )
    }
}

/// Scene geometry before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Lane centre polylines in image coordinates, bottom first.
    pub polylines: Vec<Vec<(f64, f64)>>,
    pub augmentation: Augmentation,
    /// `(row0, row1, col0, col1)` of the occluding box, half-open.
    pub occluder: Option<(usize, usize, usize, usize)>,
    pub curvature: f64,
}

fn draw_scene(config: &SyntheticConfig, rng: &mut XorShift64Star) -> Scene {
    let (w, h) = (config.width as f64, config.height as f64);
    let horizon = h * rng.uniform(0.32, 0.42);
    let vx = w * (0.5 + rng.uniform(-0.12, 0.12));
    let curvature = if config.max_curvature > 0.0 {
        rng.uniform(-config.max_curvature, config.max_curvature)
    } else {
        0.0
    };
    let k = rng.range_inclusive(config.min_lanes as u64, config.max_lanes as u64) as usize;
    let spacing = w * rng.uniform(0.28, 0.42);

    // Polylines start below the image so shifts never lift them off the bottom.
    let y_bottom = h * 1.2;
    let mut polylines = Vec::with_capacity(k);
    for i in 0..k {
        let xb = vx + (i as f64 - (k - 1) as f64 / 2.0 + rng.uniform(-0.12, 0.12)) * spacing;
        let y_top = horizon + h * rng.uniform(0.03, 0.08);
        let steps = ((y_bottom - y_top) / 2.0).ceil().max(2.0) as usize;
        let line: Vec<(f64, f64)> = (0..=steps)
            .map(|q| {
                let y = y_bottom + (y_top - y_bottom) * q as f64 / steps as f64;
                // t = 0 at the bottom edge, 1 at the vanishing point.
                let t = (h - y) / (h - horizon);
                (xb + (vx - xb) * t + curvature * t * t, y)
            })
            .collect();
        polylines.push(line);
    }

    let augmentation = Augmentation {
        flip: rng.bernoulli(config.flip_prob),
        rotation_deg: rng.uniform(-1.0, 1.0) * config.max_rotation_deg,
        scale: rng.uniform(config.min_scale, config.max_scale.max(config.min_scale)),
        tx: rng.uniform(-1.0, 1.0) * config.max_translation,
        ty: rng.uniform(-1.0, 1.0) * config.max_translation,
    };
    for line in &mut polylines {
        for p in line.iter_mut() {
            *p = augmentation.apply(*p, config.width, config.height);
        }
    }

    let occluder = rng.bernoulli(config.occlusion_prob).then(|| {
        let bh = (h * rng.uniform(0.12, 0.25)) as usize;
        let bw = (w * rng.uniform(0.12, 0.25)) as usize;
        let r0 = (h * rng.uniform(0.45, 0.8)) as usize;
        let c0 = (w * rng.uniform(0.1, 0.8)) as usize;
        (
            r0.min(config.height - 1),
            (r0 + bh.max(1)).min(config.height),
            c0.min(config.width - 1),
            (c0 + bw.max(1)).min(config.width),
        )
    });

    Scene {
        polylines,
        augmentation,
        occluder,
        curvature,
    }
}

/// Distance from `p` to segment `ab`.
fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (p.0 - a.0 - t * vx, p.1 - a.1 - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Per-pixel stroke coverage in `[0, 1]` of a polyline of the given width:
/// `clamp(width/2 + 1/2 − distance, 0, 1)`.
pub fn stroke_coverage(polyline: &[(f64, f64)], line_width: f64, height: usize, width: usize) -> Vec<f64> {
    let mut cov = vec![0.0; height * width];
    let reach = line_width / 2.0 + 0.5;
    for seg in polyline.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let r0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
        let r1 = (a.1.max(b.1) + reach).ceil().min(height as f64 - 1.0);
        let c0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
        let c1 = (a.0.max(b.0) + reach).ceil().min(width as f64 - 1.0);
        if r1 < 0.0 || c1 < 0.0 {
            continue;
        }
        for r in r0..=r1 as usize {
            for c in c0..=c1 as usize {
                let d = segment_distance((c as f64, r as f64), a, b);
                let v = (reach - d).clamp(0.0, 1.0);
                let slot = &mut cov[r * width + c];
                if v > *slot {
                    *slot = v;
                }
            }
        }
    }
    cov
}

fn render(config: &SyntheticConfig, scene: &Scene, rng: &mut XorShift64Star) -> Tensor {
    let (h, w) = (config.height, config.width);
    let plane = h * w;
    let road = rng.uniform(0.2, 0.35);
    let tint = [rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03)];
    let (fx, fy, phase) = (rng.uniform(0.02, 0.08), rng.uniform(0.02, 0.08), rng.uniform(0.0, 6.28));
    let mut data = vec![0.0; 3 * plane];
    for r in 0..h {
        for c in 0..w {
            let texture = 0.5 * config.noise * (fx * c as f64 + fy * r as f64 + phase).sin();
            for (ch, t) in tint.iter().enumerate() {
                let n = if config.noise > 0.0 { rng.uniform(-config.noise, config.noise) } else { 0.0 };
                data[ch * plane + r * w + c] = road + t + texture + n;
            }
        }
    }

    for line in &scene.polylines {
        let color = if rng.bernoulli(0.3) { [0.95, 0.85, 0.3] } else { [0.95, 0.95, 0.95] };
        let cov = stroke_coverage(line, config.line_width, h, w);
        for (i, &a) in cov.iter().enumerate() {
            if a > 0.0 {
                for (ch, col) in color.iter().enumerate() {
                    let v = &mut data[ch * plane + i];
                    *v = *v * (1.0 - a) + col * a;
                }
            }
        }
    }

    if let Some((r0, r1, c0, c1)) = scene.occluder {
        let shade = rng.uniform(0.03, 0.12);
        for ch in 0..3 {
            for r in r0..r1 {
                for c in c0..c1 {
                    data[ch * plane + r * w + c] = shade;
                }
            }
        }
    }

    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(&[3, h, w], data).expect("positive image size")
}

/// Paints a lane polyline onto a `[3, H, W]` image in `color`.
pub fn draw_lane(image: &mut Tensor, lane: &Lane, grid: &LaneGrid, color: [f64; 3], line_width: f64) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let points: Vec<(f64, f64)> = lane.image_points(grid).collect();
    let cov = if points.len() == 1 {
        stroke_coverage(&[points[0], points[0]], line_width, h, w)
    } else {
        stroke_coverage(&points, line_width, h, w)
    };
    let plane = h * w;
    let data = image.data_mut();
    for (i, &a) in cov.iter().enumerate() {
        if a > 0.0 {
            for (ch, col) in color.iter().enumerate() {
                let v = &mut data[ch * plane + i];
                *v = *v * (1.0 - a) + col * a;
            }
        }
    }
}

/// Ground-truth lanes from scene polylines: sampled on the grid, then trimmed
/// to the in-image part. Lanes with fewer than two points are dropped.
pub fn scene_lanes(scene: &Scene, grid: &LaneGrid) -> Vec<Lane> {
    scene
        .polylines
        .iter()
        .filter_map(|line| Lane::from_points(line, grid))
        .filter_map(|lane| lane.clip_to_width(grid.width as f64))
        .filter(|lane| lane.len() >= 2)
        .collect()
}

/// The scene geometry of sample `index`, without rendering.
pub fn generate_scene(config: &SyntheticConfig, index: u64) -> Scene {
    draw_scene(config, &mut XorShift64Star::for_item(config.seed, index))
}

pub fn generate_sample(config: &SyntheticConfig, index: u64) -> Sample {
    let mut rng = XorShift64Star::for_item(config.seed, index);
    let scene = draw_scene(config, &mut rng);
    let image = render(config, &scene, &mut rng);
    let lanes = scene_lanes(&scene, &config.grid());
    let category = if scene.occluder.is_some() {
        "occluded"
    } else if scene.curvature.abs() > 0.6 * config.max_curvature && config.max_curvature > 0.0 {
        "curve"
    } else {
        "normal"
    };
    Sample {
        image,
        lanes,
        source_id: format!("synth_{}_{index:06}", config.seed),
        category: category.into(),
    }
}

/// Samples `first..first+count`.
pub fn generate_dataset(config: &SyntheticConfig, first: u64, count: usize) -> Result<Vec<Sample>> {
    config.validate()?;
    Ok((first..first + count as u64).map(|i| generate_sample(config, i)).collect())
}
