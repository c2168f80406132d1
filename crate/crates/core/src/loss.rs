//! Focal classification loss, smooth-L1 regression loss and the balanced
//! multi-task objective.

use serde::{Deserialize, Serialize};

use crate::anchors::Lane;
use crate::error::{Error, Result};
use crate::matching::{AssignmentResult, Label};
use crate::numerics::ops::log_sum_exp;
use crate::numerics::{Tape, Var};

/// Probabilities are clamped to this before taking the log.
pub const PROB_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the classification sum.
    pub lambda: f64,
    pub gamma: f64,
    pub alpha: f64,
    /// Plain cross-entropy instead of the focal loss.
    pub use_cross_entropy: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            gamma: 2.0,
            alpha: 0.25,
            use_cross_entropy: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::config("loss.lambda", "must be > 0"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("loss.gamma", "must be >= 0"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("loss.alpha", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// `(gamma, alpha)` actually applied, honouring the cross-entropy switch.
    fn effective(&self) -> (f64, f64) {
        if self.use_cross_entropy {
            (0.0, 1.0)
        } else {
            (self.gamma, self.alpha)
        }
    }
}

/// Focal loss value and its gradient with respect to the logits.
fn focal_with_grad(logits: &[f64], target: usize, gamma: f64, alpha: f64) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let log_p = logits[target] - lse;
    let p = log_p.exp();
    let clamped = p < PROB_EPSILON;
    let log_pc = if clamped { PROB_EPSILON.ln() } else { log_p };
    let q = 1.0 - p;
    let weight = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let loss = -alpha * weight * log_pc;

    // dL/dp · p, kept in product form to avoid dividing by p.
    let d_weight = if gamma == 0.0 || q == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0)
    };
    let mut dldp_p = alpha * d_weight * log_pc * p;
    if !clamped {
        dldp_p -= alpha * weight;
    }
    let grad = logits
        .iter()
        .enumerate()
        .map(|(k, &z)| {
            let pk = (z - lse).exp();
            let delta = if k == target { 1.0 } else { 0.0 };
            dldp_p * (delta - pk)
        })
        .collect();
    (loss, grad)
}

/// `−α (1−p_t)^γ ln p_t` with `p_t = softmax(logits)[target]`.
pub fn focal_loss(logits: &[f64], target: usize, gamma: f64, alpha: f64) -> f64 {
    assert!(target < logits.len(), "target class out of range");
    focal_with_grad(logits, target, gamma, alpha).0
}

/// `0.5 d²` for `|d| < 1`, else `|d| − 0.5`, with `d = prediction − target`.
pub fn smooth_l1(prediction: f64, target: f64) -> f64 {
    let d = prediction - target;
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(prediction: f64, target: f64) -> f64 {
    let d = prediction - target;
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Mean smooth-L1 over paired slices.
pub fn smooth_l1_mean(prediction: &[f64], target: &[f64]) -> f64 {
    assert_eq!(prediction.len(), target.len());
    let n = prediction.len().max(1) as f64;
    prediction.iter().zip(target).map(|(p, t)| smooth_l1(*p, *t)).sum::<f64>() / n
}

/// Loss nodes produced by [`total_loss`].
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    /// Unweighted classification sum.
    pub classification: f64,
    pub regression: f64,
}

/// `λ Σ L_cls + Σ L_reg` over the assigned anchors.
///
/// `class_logits` is `[N, K+1]` and `regression` is `[N, 1 + n_pts]` with the
/// length in column 0 followed by the per-row x offsets from the anchor line.
/// Positives and negatives enter the classification sum (positives as class
/// 1, or their ground truth's category when it has one); ignored anchors enter
/// neither sum. Each positive contributes the mean smooth-L1 over its length
/// and its offsets at the supervised indices.
pub fn total_loss(
    tape: &mut Tape,
    class_logits: Var,
    regression: Var,
    anchor_lanes: &[Lane],
    ground_truths: &[Lane],
    assignment: &AssignmentResult,
    config: &LossConfig,
) -> Result<LossTerms> {
    let logits = tape.value(class_logits).clone();
    let reg = tape.value(regression).clone();
    let n = assignment.labels.len();
    if logits.rank() != 2 || logits.shape()[0] != n || reg.rank() != 2 || reg.shape()[0] != n || anchor_lanes.len() != n {
        return Err(Error::dim(
            "total_loss",
            format!(
                "logits {:?}, regression {:?}, {} anchor lanes, {n} labels",
                logits.shape(),
                reg.shape(),
                anchor_lanes.len()
            ),
        ));
    }
    if assignment.positives() + assignment.negatives() == 0 {
        return Err(Error::EmptyAssignment);
    }
    let n_classes = logits.shape()[1];
    let (gamma, alpha) = config.effective();

    let mut cls_value = 0.0;
    let mut cls_grad = vec![0.0; logits.len()];
    for (i, label) in assignment.labels.iter().enumerate() {
        let target = match label {
            Label::Ignored => continue,
            Label::Negative => 0,
            Label::Positive(g) => ground_truths
                .get(*g)
                .and_then(|gt| gt.category)
                .map_or(1, |c| c as usize),
        };
        if target >= n_classes {
            return Err(Error::dim("total_loss", format!("class {target} with {n_classes} logits")));
        }
        let (l, g) = focal_with_grad(logits.row(i), target, gamma, alpha);
        cls_value += l;
        cls_grad[i * n_classes..(i + 1) * n_classes].copy_from_slice(&g);
    }

    let width = reg.shape()[1];
    let mut reg_value = 0.0;
    let mut reg_grad = vec![0.0; reg.len()];
    for (i, target) in assignment.targets.iter().enumerate() {
        let Some(t) = target else { continue };
        if t.end + 1 >= width {
            return Err(Error::dim("total_loss", format!("regression width {width} too small for index {}", t.end)));
        }
        let row = reg.row(i);
        let count = (t.end - t.start + 2) as f64;
        let mut pairs = vec![(0usize, t.length)];
        for (k, x) in (t.start..=t.end).zip(&t.xs) {
            pairs.push((1 + k, x - anchor_lanes[i].xs[k]));
        }
        for (col, target) in pairs {
            reg_value += smooth_l1(row[col], target) / count;
            reg_grad[i * width + col] = smooth_l1_grad(row[col], target) / count;
        }
    }

    let cls = tape.scalar_fn(class_logits, cls_value, cls_grad)?;
    let reg_node = tape.scalar_fn(regression, reg_value, reg_grad)?;
    let weighted = tape.scale(cls, config.lambda)?;
    let total = tape.add(weighted, reg_node)?;
    Ok(LossTerms {
        total,
        classification: cls_value,
        regression: reg_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::RegressionTarget;
    use crate::numerics::Tensor;
    use crate::rng::XorShift64Star;

    fn cross_entropy(logits: &[f64], t: usize) -> f64 {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = logits.iter().map(|z| (z - m).exp()).sum();
        -(logits[t] - m - s.ln())
    }

    #[test]
    fn focal_examples() {
        assert!((focal_loss(&[0.3, -1.1], 0, 0.0, 1.0) - cross_entropy(&[0.3, -1.1], 0)).abs() < 1e-15);
        assert!(focal_loss(&[-30.0, 30.0], 1, 2.0, 0.25) < 1e-20);
        // p_t = 0.8 via logits [0, ln 4].
        let v = focal_loss(&[0.0, 4f64.ln()], 1, 2.0, 1.0);
        assert!((v - 0.04 * -(0.8f64.ln())).abs() < 1e-15);
        assert!((v - 0.008926).abs() < 5e-7);
    }

    #[test]
    fn focal_clamps_tiny_probabilities() {
        let v = focal_loss(&[0.0, -1000.0], 1, 0.0, 1.0);
        assert!((v - (-PROB_EPSILON.ln())).abs() < 1e-12);
        let (_, g) = focal_with_grad(&[0.0, -1000.0], 1, 2.0, 0.25);
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let mut rng = XorShift64Star::new(11);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..3).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let t = rng.range_inclusive(0, 2) as usize;
            let gamma = rng.uniform(0.0, 3.0);
            let (_, g) = focal_with_grad(&logits, t, gamma, 0.25);
            for k in 0..3 {
                let h = 1e-6;
                let mut p = logits.clone();
                p[k] += h;
                let mut m = logits.clone();
                m[k] -= h;
                let num = (focal_loss(&p, t, gamma, 0.25) - focal_loss(&m, t, gamma, 0.25)) / (2.0 * h);
                assert!((num - g[k]).abs() < 1e-7, "{num} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(3.0, 3.0), 0.0);
        assert_eq!(smooth_l1(0.5, 0.0), 0.125);
        assert_eq!(smooth_l1(2.0, 0.0), 1.5);
        assert_eq!(smooth_l1(-2.0, 0.0), 1.5);
        assert_eq!(smooth_l1_mean(&[0.5, 2.0], &[0.0, 0.0]), 0.8125);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        for (field, cfg) in [
            ("loss.lambda", LossConfig { lambda: 0.0, ..Default::default() }),
            ("loss.gamma", LossConfig { gamma: -1.0, ..Default::default() }),
            ("loss.alpha", LossConfig { alpha: 1.5, ..Default::default() }),
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config { field: f, .. }) if f == field));
        }
    }

    fn setup(labels: Vec<Label>, targets: Vec<Option<RegressionTarget>>) -> (AssignmentResult, Vec<Lane>) {
        let n = labels.len();
        let lanes = (0..n).map(|i| Lane::new(vec![10.0 * i as f64; 4], 0, 3).unwrap()).collect();
        (AssignmentResult { labels, targets }, lanes)
    }

    #[test]
    fn empty_assignment_is_an_error() {
        let (a, lanes) = setup(vec![Label::Ignored], vec![None]);
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::zeros(&[1, 2]));
        let r = tape.leaf(Tensor::zeros(&[1, 5]));
        let err = total_loss(&mut tape, c, r, &lanes, &[], &a, &LossConfig::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyAssignment));
    }

    #[test]
    fn perfect_positive_has_zero_regression() {
        let t = RegressionTarget {
            gt_index: 0,
            start: 1,
            end: 3,
            xs: vec![11.0, 12.0, 13.0],
            length: 3.0,
        };
        let (a, lanes) = setup(vec![Label::Positive(0), Label::Ignored], vec![Some(t), None]);
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::zeros(&[2, 2]));
        // lane 0 sits at x = 0, so offsets equal the target x.
        let r = tape.leaf(Tensor::new(&[2, 5], vec![3.0, 99.0, 11.0, 12.0, 13.0, 7.0, 7.0, 7.0, 7.0, 7.0]).unwrap());
        let terms = total_loss(&mut tape, c, r, &lanes, &[], &a, &LossConfig::default()).unwrap();
        assert_eq!(terms.regression, 0.0);
        assert!((terms.classification - focal_loss(&[0.0, 0.0], 1, 2.0, 0.25)).abs() < 1e-15);
    }

    #[test]
    fn three_anchor_hand_sum() {
        let t = RegressionTarget {
            gt_index: 0,
            start: 2,
            end: 3,
            xs: vec![1.5, -1.0],
            length: 4.0,
        };
        let (a, lanes) = setup(vec![Label::Positive(0), Label::Negative, Label::Ignored], vec![Some(t), None, None]);
        let logits = [0.2, -0.4, 1.0, 0.5, 3.0, -3.0];
        let reg = [
            5.0, 0.0, 0.0, 1.0, 2.0, //
            9.0, 9.0, 9.0, 9.0, 9.0, //
            1.0, 1.0, 1.0, 1.0, 1.0,
        ];
        let cfg = LossConfig::default();
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::new(&[3, 2], logits.to_vec()).unwrap());
        let r = tape.leaf(Tensor::new(&[3, 5], reg.to_vec()).unwrap());
        let terms = total_loss(&mut tape, c, r, &lanes, &[], &a, &cfg).unwrap();

        // Hand evaluation, term by term.
        let cls = focal_loss(&[0.2, -0.4], 1, 2.0, 0.25) + focal_loss(&[1.0, 0.5], 0, 2.0, 0.25);
        // length: |5−4| = 1 → 0.5; offsets: (1 − 1.5) → 0.125, (2 − (−1)) → 2.5
        let reg_sum = (0.5 + 0.125 + 2.5) / 3.0;
        assert!((terms.classification - cls).abs() < 1e-15);
        assert!((terms.regression - reg_sum).abs() < 1e-15);
        assert!((tape.value(terms.total).item() - (10.0 * cls + reg_sum)).abs() < 1e-12);
    }

    #[test]
    fn lambda_scales_classification_linearly() {
        let (a, lanes) = setup(vec![Label::Negative, Label::Negative], vec![None, None]);
        let eval = |lambda: f64| {
            let mut tape = Tape::new();
            let c = tape.leaf(Tensor::new(&[2, 2], vec![0.3, 0.1, -0.5, 0.9]).unwrap());
            let r = tape.leaf(Tensor::zeros(&[2, 5]));
            let cfg = LossConfig { lambda, ..Default::default() };
            let t = total_loss(&mut tape, c, r, &lanes, &[], &a, &cfg).unwrap();
            tape.value(t.total).item()
        };
        assert_eq!(eval(2.0) * 2.0, eval(4.0));
    }
}
