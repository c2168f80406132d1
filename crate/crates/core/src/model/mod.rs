//! The detector: backbone, anchor feature pooling, attention over anchors,
//! and the classification/regression heads.
//!
//! Pooled anchor vectors have a fixed layout: feature row `j` (bottom row
//! first, the same height frame as the anchors) is the outer index and the
//! channel the inner one, so element `j·C_F + c` holds channel `c` at row `j`.
//!
//! Regression outputs are laid out as `[length, offset_0, …, offset_{n_pts−1}]`.

mod config;
mod proposal;

use crate::anchors::{Anchor, AnchorConfig, AnchorSet, Border, FeatureGrid};
use crate::error::{Error, Result};
use crate::matching::{nms, Detection, NmsParams};
use crate::numerics::ops::softmax_in_place;
use crate::numerics::{checkpoint, uniform_init, Tape, Tensor, Var};
use crate::rng::XorShift64Star;
use crate::anchors::Lane;

pub use config::{BackboneConfig, ModelConfig, STAGE_KERNEL};
pub use proposal::{decode_proposal, predict_proposals, proposals_from_outputs, Proposal};

/// Flat gather indices that pool every anchor from a `[C,H,W]` feature map
/// into an `[N, H·C]` matrix. Out-of-bounds rows map to `None` (zeros).
pub fn pool_index(anchors: &[Anchor], channels: usize, feature: FeatureGrid) -> Vec<Option<usize>> {
    let (h, w) = (feature.height, feature.width);
    let mut index = Vec::with_capacity(anchors.len() * h * channels);
    for a in anchors {
        assert_eq!(a.feature_cols.len(), h, "anchor projection does not match the feature grid");
        for (j, &x) in a.feature_cols.iter().enumerate() {
            let r = h - 1 - j;
            for c in 0..channels {
                index.push((x >= 0 && (x as usize) < w).then(|| (c * h + r) * w + x as usize));
            }
        }
    }
    index
}

/// Local feature vector of one anchor from a `[C_F, H_F, W_F]` feature map.
pub fn pool_features(feature_map: &Tensor, anchor: &Anchor) -> Result<Tensor> {
    feature_map.expect_rank("pool_features", 3)?;
    let (c, h, w) = (feature_map.shape()[0], feature_map.shape()[1], feature_map.shape()[2]);
    if anchor.feature_cols.len() != h {
        return Err(Error::dim(
            "pool_features",
            format!("anchor projected for {} rows, feature map has {h}", anchor.feature_cols.len()),
        ));
    }
    let index = pool_index(std::slice::from_ref(anchor), c, FeatureGrid { height: h, width: w, stride: 1 });
    let data = index.iter().map(|i| i.map_or(0.0, |i| feature_map.data()[i])).collect();
    Tensor::new(&[h * c], data)
}

/// Gather indices expanding `[N, N−1]` softmax rows into the `[N, N]`
/// attention matrix with a zero diagonal.
pub fn attention_expand_index(n: usize) -> Vec<Option<usize>> {
    let mut index = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            index.push(match j.cmp(&i) {
                std::cmp::Ordering::Less => Some(i * (n - 1) + j),
                std::cmp::Ordering::Equal => None,
                std::cmp::Ordering::Greater => Some(i * (n - 1) + j - 1),
            });
        }
    }
    index
}

/// Attention matrix for local features `a_loc: [N, D]` and an attention layer
/// `weight: [N−1, D]`, `bias: [N−1]`. Row `i` is the softmax of anchor `i`'s
/// logits spread over every other anchor; the diagonal is zero.
pub fn attention_weights(a_loc: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    a_loc.expect_rank("attention_weights", 2)?;
    let n = a_loc.shape()[0];
    if n < 2 {
        return Err(Error::dim("attention_weights", "need at least two anchors"));
    }
    if weight.shape().first() != Some(&(n - 1)) {
        return Err(Error::dim(
            "attention_weights",
            format!("attention layer emits {:?} logits, need {}", weight.shape().first(), n - 1),
        ));
    }
    let mut tape = Tape::no_grad();
    let x = tape.constant(a_loc.clone());
    let w = tape.constant(weight.clone());
    let b = tape.constant(bias.clone());
    let logits = tape.linear(x, w, b)?;
    let probs = tape.softmax_rows(logits)?;
    let full = tape.gather(probs, &[n, n], attention_expand_index(n))?;
    Ok(tape.value(full).clone())
}

/// `A_glob = W · A_loc`.
pub fn global_features(weights: &Tensor, a_loc: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let w = tape.constant(weights.clone());
    let a = tape.constant(a_loc.clone());
    let g = tape.matmul(w, a)?;
    Ok(tape.value(g).clone())
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    stages: Vec<Affine>,
    reduce: Affine,
    attention: Option<Affine>,
    /// `(classifier, regressor)` per border when heads are per-boundary,
    /// otherwise a single shared pair.
    heads: Vec<(Affine, Affine)>,
}

/// Outputs of one forward pass, as nodes on the caller's tape.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub image: Var,
    pub params: Vec<Var>,
    pub features: Var,
    pub a_loc: Var,
    pub attention: Option<Var>,
    pub a_glob: Var,
    /// `[N, K+1]`
    pub class_logits: Var,
    /// `[N, 1 + n_pts]`
    pub regression: Var,
}

#[derive(Debug, Clone)]
pub struct LaneAtt {
    pub config: ModelConfig,
    pub anchors: AnchorSet,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
    pool: Vec<Option<usize>>,
    border_groups: Vec<Vec<usize>>,
}

impl LaneAtt {
    /// Builds a model over `anchors` with weights drawn uniformly in
    /// `±sqrt(1/fan_in)` from `seed`.
    pub fn new(config: ModelConfig, anchors: AnchorSet, seed: u64) -> Result<Self> {
        config.validate()?;
        let grid = config.lane_grid();
        if anchors.grid != grid {
            return Err(Error::config(
                "anchors",
                format!("anchor grid {:?} does not match model grid {:?}", anchors.grid, grid),
            ));
        }
        let n = anchors.len();
        if n == 0 || (config.use_attention && n < 2) {
            return Err(Error::config("model.n_anchors", "attention needs at least two anchors"));
        }
        let feature = config.backbone.feature_grid();
        let mut anchors = anchors;
        if anchors.feature != Some(feature) {
            anchors.project(feature);
        }

        let mut rng = XorShift64Star::new(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut affine = |name: &str, w_shape: &[usize], fan_in: usize, rng: &mut XorShift64Star| {
            names.push(format!("{name}.weight"));
            params.push(uniform_init(w_shape, fan_in, rng));
            names.push(format!("{name}.bias"));
            params.push(uniform_init(&[w_shape[0]], fan_in, rng));
            Affine {
                weight: params.len() - 2,
                bias: params.len() - 1,
            }
        };

        let bb = &config.backbone;
        let mut c_in = 3;
        let mut stages = Vec::new();
        for (i, &c) in bb.stage_channels.iter().enumerate() {
            let k = STAGE_KERNEL;
            stages.push(affine(&format!("backbone.{i}"), &[c, c_in, k, k], c_in * k * k, &mut rng));
            c_in = c;
        }
        let reduce = affine("reduce", &[bb.reduced_channels, c_in, 1, 1], c_in, &mut rng);
        let d = config.pooled_len();
        let attention = (n >= 2).then(|| affine("attention", &[n - 1, d], d, &mut rng));
        let head_names: Vec<String> = if config.per_boundary_heads {
            Border::ALL.iter().map(|b| format!(".{}", b.name())).collect()
        } else {
            vec![String::new()]
        };
        let heads = head_names
            .iter()
            .map(|suffix| {
                let cls = affine(&format!("cls{suffix}"), &[config.num_classes + 1, 2 * d], 2 * d, &mut rng);
                let reg = affine(&format!("reg{suffix}"), &[config.n_pts + 1, 2 * d], 2 * d, &mut rng);
                (cls, reg)
            })
            .collect();

        let pool = pool_index(&anchors.anchors, bb.reduced_channels, feature);
        let mut border_groups = vec![Vec::new(); 3];
        for (i, a) in anchors.anchors.iter().enumerate() {
            border_groups[a.border.index()].push(i);
        }
        Ok(Self {
            config,
            anchors,
            names,
            params,
            layout: Layout {
                stages,
                reduce,
                attention,
                heads,
            },
            pool,
            border_groups,
        })
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Runs the network on a `[3, H, W]` image, recording onto `tape`.
    pub fn forward(&self, tape: &mut Tape, image: Tensor) -> Result<ForwardOutput> {
        let bb = &self.config.backbone;
        if image.shape() != [3, bb.input_height, bb.input_width] {
            return Err(Error::dim(
                "forward",
                format!("image {:?}, model expects [3, {}, {}]", image.shape(), bb.input_height, bb.input_width),
            ));
        }
        let image = tape.leaf(image);
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let p = |a: Affine| (params[a.weight], params[a.bias]);

        let mut x = image;
        for (stage, &stride) in self.layout.stages.iter().zip(&bb.stage_strides) {
            let (w, b) = p(*stage);
            x = tape.conv2d(x, w, stride, STAGE_KERNEL / 2)?;
            x = tape.add_channel_bias(x, b)?;
            x = tape.relu(x)?;
        }
        let (w, b) = p(self.layout.reduce);
        let features = tape.conv2d(x, w, 1, 0)?;
        let features = tape.add_channel_bias(features, b)?;

        let n = self.n_anchors();
        let d = self.config.pooled_len();
        let a_loc = tape.gather(features, &[n, d], self.pool.clone())?;

        let (attention, a_glob) = match (self.config.use_attention, self.layout.attention) {
            (true, Some(att)) => {
                let (w, b) = p(att);
                let logits = tape.linear(a_loc, w, b)?;
                let probs = tape.softmax_rows(logits)?;
                let weights = tape.gather(probs, &[n, n], attention_expand_index(n))?;
                let glob = tape.matmul(weights, a_loc)?;
                (Some(weights), glob)
            }
            _ => (None, tape.constant(Tensor::zeros(&[n, d]))),
        };
        let aug = tape.concat(&[a_loc, a_glob], 1)?;

        let (class_logits, regression) = if self.config.per_boundary_heads {
            self.per_border_heads(tape, aug, &params)?
        } else {
            let (cls, reg) = self.layout.heads[0];
            let (cw, cb) = p(cls);
            let (rw, rb) = p(reg);
            (tape.linear(aug, cw, cb)?, tape.linear(aug, rw, rb)?)
        };

        Ok(ForwardOutput {
            image,
            params,
            features,
            a_loc,
            attention,
            a_glob,
            class_logits,
            regression,
        })
    }

    fn per_border_heads(&self, tape: &mut Tape, aug: Var, params: &[Var]) -> Result<(Var, Var)> {
        let width = tape.value(aug).shape()[1];
        let mut cls_parts = Vec::new();
        let mut reg_parts = Vec::new();
        let mut order = Vec::with_capacity(self.n_anchors());
        for (group, (cls, reg)) in self.border_groups.iter().zip(&self.layout.heads) {
            if group.is_empty() {
                continue;
            }
            let index = group
                .iter()
                .flat_map(|&r| (0..width).map(move |c| Some(r * width + c)))
                .collect();
            let rows = tape.gather(aug, &[group.len(), width], index)?;
            cls_parts.push(tape.linear(rows, params[cls.weight], params[cls.bias])?);
            reg_parts.push(tape.linear(rows, params[reg.weight], params[reg.bias])?);
            order.extend_from_slice(group);
        }
        // Row k of the stacked outputs belongs to anchor order[k].
        let mut position = vec![0; order.len()];
        for (k, &a) in order.iter().enumerate() {
            position[a] = k;
        }
        let unstack = |parts: Vec<Var>, tape: &mut Tape| -> Result<Var> {
            let stacked = tape.concat(&parts, 0)?;
            let cols = tape.value(stacked).shape()[1];
            let index = position
                .iter()
                .flat_map(|&k| (0..cols).map(move |c| Some(k * cols + c)))
                .collect();
            tape.gather(stacked, &[position.len(), cols], index)
        };
        let cls = unstack(cls_parts, tape)?;
        let reg = unstack(reg_parts, tape)?;
        Ok((cls, reg))
    }

    /// Proposals for every anchor, without NMS.
    pub fn propose(&self, image: Tensor) -> Result<Vec<Proposal>> {
        let mut tape = Tape::no_grad();
        let out = self.forward(&mut tape, image)?;
        Ok(proposals_from_outputs(
            tape.value(out.class_logits),
            tape.value(out.regression),
        ))
    }

    /// Decoded, scored lanes for every anchor.
    pub fn decode_all(&self, proposals: &[Proposal]) -> Vec<Detection> {
        let grid = self.config.lane_grid();
        proposals
            .iter()
            .map(|p| {
                let lane = decode_proposal(p, &self.anchors.anchors[p.anchor_id], &grid);
                Detection {
                    score: lane.score.unwrap_or(0.0),
                    lane,
                    anchor_id: p.anchor_id,
                }
            })
            .collect()
    }

    /// Full inference: forward pass, decoding, confidence filter and NMS.
    /// Returned lanes are trimmed to the image width.
    pub fn detect(&self, image: Tensor, nms_params: &NmsParams) -> Result<Vec<Lane>> {
        let proposals = self.propose(image)?;
        let detections = self.decode_all(&proposals);
        let width = self.config.backbone.input_width as f64;
        Ok(nms(&detections, nms_params)
            .into_iter()
            .filter_map(|i| detections[i].lane.clip_to_width(width))
            .collect())
    }

    /// Named tensors for the checkpoint file, with the anchor set appended as
    /// an `anchors` entry of rows `[border, x_orig, y_orig, theta]`.
    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let mut entries: Vec<(String, Tensor)> = self.names.iter().cloned().zip(self.params.iter().cloned()).collect();
        let rows: Vec<f64> = self
            .anchors
            .anchors
            .iter()
            .flat_map(|a| [a.border.index() as f64, a.x_orig, a.y_orig, a.theta])
            .collect();
        entries.push((
            "anchors".into(),
            Tensor::new(&[self.n_anchors(), 4], rows).expect("non-empty anchor set"),
        ));
        entries
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        checkpoint::save(path, &self.to_entries())
    }

    /// Rebuilds a model from checkpoint entries written by [`LaneAtt::to_entries`].
    pub fn from_entries(config: ModelConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let grid = config.lane_grid();
        let anchor_rows = entries
            .iter()
            .find(|(n, _)| n == "anchors")
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Checkpoint("missing `anchors` entry".into()))?;
        if anchor_rows.rank() != 2 || anchor_rows.shape()[1] != 4 {
            return Err(Error::Checkpoint("`anchors` entry must be [N, 4]".into()));
        }
        let mut anchors = Vec::new();
        for i in 0..anchor_rows.shape()[0] {
            let r = anchor_rows.row(i);
            let border = *Border::ALL
                .get(r[0] as usize)
                .ok_or_else(|| Error::Checkpoint(format!("anchor {i}: bad border code {}", r[0])))?;
            let start_index = grid
                .index_of(r[2])
                .ok_or_else(|| Error::Checkpoint(format!("anchor {i}: origin not on the grid")))?;
            anchors.push(Anchor {
                id: i,
                border,
                x_orig: r[1],
                y_orig: r[2],
                theta: r[3],
                start_index,
                feature_cols: Vec::new(),
            });
        }
        let set = AnchorSet {
            anchors,
            config: AnchorConfig::default(),
            grid,
            feature: None,
        };
        let mut model = LaneAtt::new(config, set, 0)?;
        for (name, slot) in model.names.iter().zip(model.params.iter_mut()) {
            let t = entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(model)
    }

    pub fn load(config: ModelConfig, path: impl AsRef<std::path::Path>) -> Result<Self> {
        LaneAtt::from_entries(config, checkpoint::load(path)?)
    }

    /// Analytic multiply-accumulates of one forward pass.
    pub fn analytic_macs(&self) -> u64 {
        self.config.macs(self.n_anchors())
    }
}

/// `1 − P(background)` for a logit row.
pub fn lane_score(class_logits: &[f64]) -> f64 {
    let mut p = class_logits.to_vec();
    softmax_in_place(&mut p);
    1.0 - p[0]
}

#[cfg(test)]
mod tests;
