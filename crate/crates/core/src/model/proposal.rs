use crate::anchors::{Anchor, Lane, LaneGrid};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};

/// Raw head outputs for one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub anchor_id: usize,
    /// `K + 1` logits, background first.
    pub class_logits: Vec<f64>,
    /// Horizontal offsets in pixels, one per grid row.
    pub offsets: Vec<f64>,
    pub length: f64,
}

impl Proposal {
    pub fn score(&self) -> f64 {
        super::lane_score(&self.class_logits)
    }

    /// End index `s + floor(l) − 1`, clamped into `[s, n_pts − 1]`.
    pub fn end_index(&self, start: usize, n_pts: usize) -> usize {
        let span = self.length.floor();
        if !(span >= 1.0) {
            return start;
        }
        (start as f64 + span - 1.0).min((n_pts - 1) as f64) as usize
    }
}

/// Splits `[N, K+1]` logits and `[N, 1+n_pts]` regressions into proposals.
pub fn proposals_from_outputs(class_logits: &Tensor, regression: &Tensor) -> Vec<Proposal> {
    let n = class_logits.shape()[0];
    (0..n)
        .map(|i| {
            let reg = regression.row(i);
            Proposal {
                anchor_id: i,
                class_logits: class_logits.row(i).to_vec(),
                offsets: reg[1..].to_vec(),
                length: reg[0],
            }
        })
        .collect()
}

/// Lane on the anchor line shifted by the proposal offsets, valid from the
/// anchor's start index to the decoded end, scored `1 − P(background)`.
pub fn decode_proposal(proposal: &Proposal, anchor: &Anchor, grid: &LaneGrid) -> Lane {
    let n = grid.n_pts;
    let xs = (0..n)
        .map(|i| anchor.x_at(grid.y(i)) + proposal.offsets.get(i).copied().unwrap_or(0.0))
        .collect();
    let s = anchor.start_index.min(n - 1);
    let e = proposal.end_index(s, n);
    let mut lane = Lane::new(xs, s, e).expect("decoded range lies on the grid");
    lane.score = Some(proposal.score());
    lane
}

/// Shared-head prediction from pooled features: both layers read the
/// concatenation `[a_loc | a_glob]`.
pub fn predict_proposals(
    a_loc: &Tensor,
    a_glob: &Tensor,
    cls: (&Tensor, &Tensor),
    reg: (&Tensor, &Tensor),
) -> Result<Vec<Proposal>> {
    if a_loc.shape() != a_glob.shape() {
        return Err(Error::dim(
            "predict_proposals",
            format!("local {:?} vs global {:?}", a_loc.shape(), a_glob.shape()),
        ));
    }
    let mut tape = Tape::no_grad();
    let l = tape.constant(a_loc.clone());
    let g = tape.constant(a_glob.clone());
    let aug = tape.concat(&[l, g], 1)?;
    let (cw, cb) = (tape.constant(cls.0.clone()), tape.constant(cls.1.clone()));
    let (rw, rb) = (tape.constant(reg.0.clone()), tape.constant(reg.1.clone()));
    let logits = tape.linear(aug, cw, cb)?;
    let regression = tape.linear(aug, rw, rb)?;
    Ok(proposals_from_outputs(tape.value(logits), tape.value(regression)))
}
