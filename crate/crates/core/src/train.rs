//! Single-threaded training loop: target assignment, loss, backward pass and
//! an optimizer step per batch.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::anchors::Lane;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig};
use crate::matching::{assign_targets, nms, AssignmentResult, Label, NmsParams};
use crate::model::{proposals_from_outputs, LaneAtt};
use crate::numerics::{Tape, Tensor};
use crate::rng::XorShift64Star;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Sgd { momentum: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub pos_threshold: f64,
    pub neg_threshold: f64,
    pub loss: LossConfig,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// Restrict assignment to proposals surviving a score-free NMS pass.
    pub nms_targets: bool,
    pub nms_distance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 1,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            pos_threshold: 15.0,
            neg_threshold: 20.0,
            loss: LossConfig::default(),
            seed: 0,
            nms_targets: false,
            nms_distance: 50.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be > 0"));
        }
        if !(self.pos_threshold > 0.0) {
            return Err(Error::config("train.pos_threshold", "must be > 0"));
        }
        if self.pos_threshold > self.neg_threshold {
            return Err(Error::config(
                "train.pos_threshold",
                format!("{} exceeds train.neg_threshold {}", self.pos_threshold, self.neg_threshold),
            ));
        }
        match self.optimizer {
            Optimizer::Adam { beta1, beta2, epsilon } => {
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0) {
                    return Err(Error::config("train.optimizer", "Adam needs betas in [0, 1) and epsilon > 0"));
                }
            }
            Optimizer::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::config("train.momentum", "must lie in [0, 1)"));
                }
            }
        }
        self.loss.validate()
    }
}

/// Optimizer state over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    learning_rate: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, learning_rate: f64, params: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            kind,
            learning_rate,
            step: 0,
            second: if matches!(kind, Optimizer::Adam { .. }) { zeros.clone() } else { Vec::new() },
            first: zeros,
        }
    }

    pub fn apply(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) {
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            Optimizer::Adam { beta1, beta2, epsilon } => {
                let c1 = 1.0 - beta1.powi(self.step as i32);
                let c2 = 1.0 - beta2.powi(self.step as i32);
                for (k, p) in params.iter_mut().enumerate() {
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    for (i, w) in p.data_mut().iter_mut().enumerate() {
                        let g = grads[k][i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + epsilon);
                    }
                }
            }
            Optimizer::Sgd { momentum } => {
                for (k, p) in params.iter_mut().enumerate() {
                    let vel = &mut self.first[k];
                    for (i, w) in p.data_mut().iter_mut().enumerate() {
                        vel[i] = momentum * vel[i] + grads[k][i];
                        *w -= lr * vel[i];
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean total loss per sample.
    pub loss: f64,
    pub classification: f64,
    pub regression: f64,
    pub samples: usize,
    pub seconds: f64,
}

/// One forward/backward pass; returns the loss terms and the gradient of
/// every model parameter.
pub fn loss_and_gradients(
    model: &LaneAtt,
    image: &Tensor,
    anchor_lanes: &[Lane],
    ground_truths: &[Lane],
    assignment: &AssignmentResult,
    config: &TrainConfig,
) -> Result<(f64, f64, f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, image.clone())?;
    let restricted;
    let assignment = if config.nms_targets {
        restricted = restrict_to_survivors(model, &tape, &out, assignment, config.nms_distance);
        &restricted
    } else {
        assignment
    };
    let terms = total_loss(
        &mut tape,
        out.class_logits,
        out.regression,
        anchor_lanes,
        ground_truths,
        assignment,
        &config.loss,
    )?;
    let total = tape.value(terms.total).item();
    tape.backward(terms.total)?;
    let grads = out
        .params
        .iter()
        .map(|&p| tape.grad(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(p).len()]))
        .collect();
    Ok((total, terms.classification, terms.regression, grads))
}

/// Marks every anchor whose proposal does not survive NMS as ignored.
fn restrict_to_survivors(
    model: &LaneAtt,
    tape: &Tape,
    out: &crate::model::ForwardOutput,
    assignment: &AssignmentResult,
    distance: f64,
) -> AssignmentResult {
    let proposals = proposals_from_outputs(tape.value(out.class_logits), tape.value(out.regression));
    let detections = model.decode_all(&proposals);
    let params = NmsParams {
        distance_threshold: distance,
        confidence_threshold: None,
        max_keep: None,
    };
    let mut keep = vec![false; detections.len()];
    for i in nms(&detections, &params) {
        keep[i] = true;
    }
    let mut restricted = assignment.clone();
    for (i, kept) in keep.into_iter().enumerate() {
        if !kept {
            restricted.labels[i] = Label::Ignored;
            restricted.targets[i] = None;
        }
    }
    restricted
}

/// Labels every sample against the model's anchors. Independent of the
/// weights, so computed once per run.
pub fn precompute_assignments(model: &LaneAtt, samples: &[Sample], config: &TrainConfig) -> Result<Vec<AssignmentResult>> {
    let anchor_lanes = model.anchors.as_lanes();
    samples
        .iter()
        .map(|s| assign_targets(&anchor_lanes, &s.lanes, config.pos_threshold, config.neg_threshold))
        .collect()
}

/// Trains `model` in place. `on_epoch` runs after every epoch and may stop
/// training early by returning `false`.
pub fn train(
    model: &mut LaneAtt,
    samples: &[Sample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&LaneAtt, &EpochStats) -> bool,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let anchor_lanes = model.anchors.as_lanes();
    let assignments = precompute_assignments(model, samples, config)?;
    let mut optimizer = OptimizerState::new(config.optimizer, config.learning_rate, model.params());
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut rng = XorShift64Star::for_item(config.seed, epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.range_inclusive(0, i as u64) as usize);
        }
        let (mut loss, mut cls, mut reg, mut used) = (0.0, 0.0, 0.0, 0);
        let mut acc: Option<Vec<Vec<f64>>> = None;
        let mut in_batch = 0;
        for &idx in &order {
            let s = &samples[idx];
            let step = loss_and_gradients(model, &s.image, &anchor_lanes, &s.lanes, &assignments[idx], config);
            let (l, c, r, grads) = match step {
                Ok(v) => v,
                Err(Error::EmptyAssignment) => continue,
                Err(e) => return Err(e),
            };
            loss += l;
            cls += c;
            reg += r;
            used += 1;
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(sum) => {
                    for (a, g) in sum.iter_mut().zip(&grads) {
                        a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            in_batch += 1;
            if in_batch == config.batch_size {
                step_batch(model, &mut optimizer, acc.take().expect("batch has gradients"), in_batch);
                in_batch = 0;
            }
        }
        if let Some(sum) = acc.take() {
            step_batch(model, &mut optimizer, sum, in_batch);
        }
        let n = used.max(1) as f64;
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: loss / n,
            classification: cls / n,
            regression: reg / n,
            samples: used,
            seconds: started.elapsed().as_secs_f64(),
        };
        let go_on = on_epoch(model, &stats);
        history.push(stats);
        if !go_on {
            break;
        }
    }
    Ok(history)
}

fn step_batch(model: &mut LaneAtt, optimizer: &mut OptimizerState, mut grads: Vec<Vec<f64>>, n: usize) {
    if n > 1 {
        let k = 1.0 / n as f64;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    optimizer.apply(model.params_mut(), &grads);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut params = vec![Tensor::from_vec(vec![1.0, -2.0, 0.5])];
        let mut opt = OptimizerState::new(Optimizer::default(), 0.1, &params);
        opt.apply(&mut params, &[vec![3.0, -0.2, 0.0]]);
        // Bias-corrected m/sqrt(v) is sign(g) on the first step.
        let expected = [1.0 - 0.1 * 3.0 / (3.0 + 1e-8), -2.0 + 0.1 * 0.2 / (0.2 + 1e-8), 0.5];
        for (a, b) in params[0].data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut params = vec![Tensor::from_vec(vec![0.0])];
        let mut opt = OptimizerState::new(Optimizer::Sgd { momentum: 0.5 }, 1.0, &params);
        opt.apply(&mut params, &[vec![1.0]]);
        opt.apply(&mut params, &[vec![1.0]]);
        assert_eq!(params[0].data(), &[-2.5]);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut params = vec![Tensor::from_vec(vec![5.0, -3.0])];
        let mut opt = OptimizerState::new(Optimizer::default(), 0.05, &params);
        for _ in 0..2000 {
            let g: Vec<f64> = params[0].data().iter().map(|x| 2.0 * x).collect();
            opt.apply(&mut params, &[g]);
        }
        assert!(params[0].data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = TrainConfig { pos_threshold: 30.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "train.pos_threshold"));
        let bad = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "train.batch_size"));
    }
}
