//! Flat `key = value` run configuration.
//!
//! One setting per line; `#` starts a comment. Lists are comma separated and
//! booleans are `true`/`false`. Every key has a default, so a file only needs
//! the settings it changes. [`RunConfig::to_text`] writes the complete list.

use std::fmt::Display;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::anchors::{generate_anchors, AnchorConfig};
use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::eval::{AccuracyMode, CulaneParams, TuSimpleParams};
use crate::matching::NmsParams;
use crate::model::ModelConfig;
use crate::train::{Optimizer, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub line_width: f64,
    pub iou_threshold: f64,
    pub point_tolerance: f64,
    pub lane_accuracy_threshold: f64,
    pub accuracy_mode: AccuracyMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let t = TuSimpleParams::default();
        Self {
            line_width: 30.0,
            iou_threshold: 0.5,
            point_tolerance: t.point_tolerance,
            lane_accuracy_threshold: t.lane_accuracy_threshold,
            accuracy_mode: t.mode,
        }
    }
}

impl EvalConfig {
    pub fn culane(&self, height: usize, width: usize) -> CulaneParams {
        CulaneParams {
            line_width: self.line_width,
            iou_threshold: self.iou_threshold,
            height,
            width,
        }
    }

    pub fn tusimple(&self) -> TuSimpleParams {
        TuSimpleParams {
            point_tolerance: self.point_tolerance,
            lane_accuracy_threshold: self.lane_accuracy_threshold,
            mode: self.accuracy_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Seeds weight initialisation and the training shuffle.
    pub seed: u64,
    pub model: ModelConfig,
    /// Anchors kept by filtering; `None` keeps the whole generated set.
    pub n_anchors: Option<usize>,
    pub anchors: AnchorConfig,
    pub train: TrainConfig,
    pub nms: NmsParams,
    pub data: SyntheticConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            n_anchors: Some(1000),
            anchors: AnchorConfig::default(),
            train: TrainConfig::default(),
            nms: NmsParams::default(),
            data: SyntheticConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn list<T: Display>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn optional<T: Display>(value: Option<T>) -> String {
    value.map_or_else(|| "none".to_string(), |v| v.to_string())
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies the settings in `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(Some(i + 1), format!("expected `key = value`, got `{line}`")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let a = &mut self.anchors;
        let t = &mut self.train;
        let d = &mut self.data;
        let e = &mut self.eval;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "model.input_height" => m.backbone.input_height = parse(key, value)?,
            "model.input_width" => m.backbone.input_width = parse(key, value)?,
            "model.stage_channels" => m.backbone.stage_channels = parse_list(key, value)?,
            "model.stage_strides" => m.backbone.stage_strides = parse_list(key, value)?,
            "model.reduced_channels" => m.backbone.reduced_channels = parse(key, value)?,
            "model.n_pts" => m.n_pts = parse(key, value)?,
            "model.num_classes" => m.num_classes = parse(key, value)?,
            "model.use_attention" => m.use_attention = parse(key, value)?,
            "model.per_boundary_heads" => m.per_boundary_heads = parse(key, value)?,
            "model.n_anchors" => self.n_anchors = parse_optional(key, value)?,
            "anchors.left_origins" => a.left_origins = parse(key, value)?,
            "anchors.bottom_origins" => a.bottom_origins = parse(key, value)?,
            "anchors.right_origins" => a.right_origins = parse(key, value)?,
            "anchors.left_angles" => a.left_angles = parse_list(key, value)?,
            "anchors.bottom_angles" => a.bottom_angles = parse_list(key, value)?,
            "anchors.right_angles" => a.right_angles = parse_list(key, value)?,
            "loss.lambda" => t.loss.lambda = parse(key, value)?,
            "loss.gamma" => t.loss.gamma = parse(key, value)?,
            "loss.alpha" => t.loss.alpha = parse(key, value)?,
            "loss.use_cross_entropy" => t.loss.use_cross_entropy = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.learning_rate" => t.learning_rate = parse(key, value)?,
            "train.optimizer" => {
                t.optimizer = match value {
                    "adam" => Optimizer::default(),
                    "sgd" => Optimizer::Sgd { momentum: 0.0 },
                    _ => return Err(Error::config(key, format!("expected `adam` or `sgd`, got `{value}`"))),
                }
            }
            "train.momentum" => match &mut t.optimizer {
                Optimizer::Sgd { momentum } => *momentum = parse(key, value)?,
                Optimizer::Adam { .. } => {
                    let v: f64 = parse(key, value)?;
                    if v != 0.0 {
                        return Err(Error::config(key, "momentum applies to `train.optimizer = sgd` only"));
                    }
                }
            },
            "train.adam_beta1" | "train.adam_beta2" | "train.adam_epsilon" => match &mut t.optimizer {
                Optimizer::Adam { beta1, beta2, epsilon } => {
                    let slot = match key {
                        "train.adam_beta1" => beta1,
                        "train.adam_beta2" => beta2,
                        _ => epsilon,
                    };
                    *slot = parse(key, value)?;
                }
                Optimizer::Sgd { .. } => return Err(Error::config(key, "applies to `train.optimizer = adam` only")),
            },
            "train.pos_threshold" => t.pos_threshold = parse(key, value)?,
            "train.neg_threshold" => t.neg_threshold = parse(key, value)?,
            "train.nms_targets" => t.nms_targets = parse(key, value)?,
            "train.shuffle_seed" => t.seed = parse(key, value)?,
            "train.nms_distance" => t.nms_distance = parse(key, value)?,
            "nms.distance_threshold" => self.nms.distance_threshold = parse(key, value)?,
            "nms.confidence_threshold" => self.nms.confidence_threshold = parse_optional(key, value)?,
            "nms.max_keep" => self.nms.max_keep = parse_optional(key, value)?,
            "data.seed" => d.seed = parse(key, value)?,
            "data.height" => d.height = parse(key, value)?,
            "data.width" => d.width = parse(key, value)?,
            "data.n_pts" => d.n_pts = parse(key, value)?,
            "data.min_lanes" => d.min_lanes = parse(key, value)?,
            "data.max_lanes" => d.max_lanes = parse(key, value)?,
            "data.max_curvature" => d.max_curvature = parse(key, value)?,
            "data.line_width" => d.line_width = parse(key, value)?,
            "data.noise" => d.noise = parse(key, value)?,
            "data.occlusion_prob" => d.occlusion_prob = parse(key, value)?,
            "data.flip_prob" => d.flip_prob = parse(key, value)?,
            "data.max_rotation_deg" => d.max_rotation_deg = parse(key, value)?,
            "data.max_translation" => d.max_translation = parse(key, value)?,
            "data.min_scale" => d.min_scale = parse(key, value)?,
            "data.max_scale" => d.max_scale = parse(key, value)?,
            "eval.line_width" => e.line_width = parse(key, value)?,
            "eval.iou_threshold" => e.iou_threshold = parse(key, value)?,
            "eval.point_tolerance" => e.point_tolerance = parse(key, value)?,
            "eval.lane_accuracy_threshold" => e.lane_accuracy_threshold = parse(key, value)?,
            "eval.accuracy_mode" => {
                e.accuracy_mode = match value {
                    "pooled" => AccuracyMode::Pooled,
                    "per_clip" => AccuracyMode::PerClip,
                    _ => return Err(Error::config(key, format!("expected `pooled` or `per_clip`, got `{value}`"))),
                }
            }
            _ => return Err(Error::config(key, "unknown setting")),
        }
        Ok(())
    }

    /// Every setting with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let b = &m.backbone;
        let a = &self.anchors;
        let t = &self.train;
        let d = &self.data;
        let e = &self.eval;
        let mut out = vec![
            ("seed", self.seed.to_string()),
            ("model.input_height", b.input_height.to_string()),
            ("model.input_width", b.input_width.to_string()),
            ("model.stage_channels", list(&b.stage_channels)),
            ("model.stage_strides", list(&b.stage_strides)),
            ("model.reduced_channels", b.reduced_channels.to_string()),
            ("model.n_pts", m.n_pts.to_string()),
            ("model.num_classes", m.num_classes.to_string()),
            ("model.use_attention", m.use_attention.to_string()),
            ("model.per_boundary_heads", m.per_boundary_heads.to_string()),
            ("model.n_anchors", optional(self.n_anchors)),
            ("anchors.left_origins", a.left_origins.to_string()),
            ("anchors.bottom_origins", a.bottom_origins.to_string()),
            ("anchors.right_origins", a.right_origins.to_string()),
            ("anchors.left_angles", list(&a.left_angles)),
            ("anchors.bottom_angles", list(&a.bottom_angles)),
            ("anchors.right_angles", list(&a.right_angles)),
            ("loss.lambda", t.loss.lambda.to_string()),
            ("loss.gamma", t.loss.gamma.to_string()),
            ("loss.alpha", t.loss.alpha.to_string()),
            ("loss.use_cross_entropy", t.loss.use_cross_entropy.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
        ];
        match t.optimizer {
            Optimizer::Adam { beta1, beta2, epsilon } => {
                out.push(("train.optimizer", "adam".into()));
                out.push(("train.adam_beta1", beta1.to_string()));
                out.push(("train.adam_beta2", beta2.to_string()));
                out.push(("train.adam_epsilon", epsilon.to_string()));
            }
            Optimizer::Sgd { momentum } => {
                out.push(("train.optimizer", "sgd".into()));
                out.push(("train.momentum", momentum.to_string()));
            }
        }
        out.extend([
            ("train.pos_threshold", t.pos_threshold.to_string()),
            ("train.neg_threshold", t.neg_threshold.to_string()),
            ("train.nms_targets", t.nms_targets.to_string()),
            ("train.shuffle_seed", t.seed.to_string()),
            ("train.nms_distance", t.nms_distance.to_string()),
            ("nms.distance_threshold", self.nms.distance_threshold.to_string()),
            ("nms.confidence_threshold", optional(self.nms.confidence_threshold)),
            ("nms.max_keep", optional(self.nms.max_keep)),
            ("data.seed", d.seed.to_string()),
            ("data.height", d.height.to_string()),
            ("data.width", d.width.to_string()),
            ("data.n_pts", d.n_pts.to_string()),
            ("data.min_lanes", d.min_lanes.to_string()),
            ("data.max_lanes", d.max_lanes.to_string()),
            ("data.max_curvature", d.max_curvature.to_string()),
            ("data.line_width", d.line_width.to_string()),
            ("data.noise", d.noise.to_string()),
            ("data.occlusion_prob", d.occlusion_prob.to_string()),
            ("data.flip_prob", d.flip_prob.to_string()),
            ("data.max_rotation_deg", d.max_rotation_deg.to_string()),
            ("data.max_translation", d.max_translation.to_string()),
            ("data.min_scale", d.min_scale.to_string()),
            ("data.max_scale", d.max_scale.to_string()),
            ("eval.line_width", e.line_width.to_string()),
            ("eval.iou_threshold", e.iou_threshold.to_string()),
            ("eval.point_tolerance", e.point_tolerance.to_string()),
            ("eval.lane_accuracy_threshold", e.lane_accuracy_threshold.to_string()),
            (
                "eval.accuracy_mode",
                match e.accuracy_mode {
                    AccuracyMode::Pooled => "pooled",
                    AccuracyMode::PerClip => "per_clip",
                }
                .into(),
            ),
        ]);
        out
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Per-section checks plus the cross-field rules.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.anchors.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.data.height != self.model.backbone.input_height || self.data.width != self.model.backbone.input_width {
            return Err(Error::config(
                "data.height",
                format!(
                    "data size {}x{} differs from model input {}x{}",
                    self.data.height, self.data.width, self.model.backbone.input_height, self.model.backbone.input_width
                ),
            ));
        }
        if self.data.n_pts != self.model.n_pts {
            return Err(Error::config("data.n_pts", "must equal model.n_pts"));
        }
        if !(self.nms.distance_threshold >= 0.0) {
            return Err(Error::config("nms.distance_threshold", "must be >= 0"));
        }
        if let Some(c) = self.nms.confidence_threshold {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::config("nms.confidence_threshold", "must lie in [0, 1]"));
            }
        }
        if let Some(n) = self.n_anchors {
            let total = generate_anchors(&self.anchors, self.model.lane_grid())?.len();
            if n == 0 || n > total {
                return Err(Error::config(
                    "model.n_anchors",
                    format!("must be in 1..={total} (generated set size), got {n}"),
                ));
            }
            if self.model.use_attention && n < 2 {
                return Err(Error::config("model.n_anchors", "attention needs at least two anchors"));
            }
        }
        if !(self.eval.line_width > 0.0) {
            return Err(Error::config("eval.line_width", "must be > 0"));
        }
        Ok(())
    }
}
