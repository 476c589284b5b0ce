//! Hungarian-matched detection loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{hungarian_assign, Matrix};
use crate::tape::{softmax_rows, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_l1: f64,
    /// Cross-entropy weight of queries pushed to background.
    pub bg_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cls: 1.0,
            w_l1: 5.0,
            bg_weight: 1.0,
        }
    }
}

/// Supervised object: target column among the active known classes and box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub column: usize,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(query, target)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Matching cost `w_cls·(1 − p_gt) + w_l1·‖box − gt‖₁`, `Q × G`.
pub fn match_cost(probs: &Matrix, boxes: &Matrix, targets: &[Target], weights: &LossWeights) -> Matrix {
    let q = probs.rows();
    let mut c = Matrix::zeros(q, targets.len());
    for i in 0..q {
        for (j, t) in targets.iter().enumerate() {
            let l1: f64 = boxes.row(i).iter().zip(&t.bbox).map(|(a, b)| (a - b).abs()).sum();
            c[(i, j)] = weights.w_cls * (1.0 - probs[(i, t.column)]) + weights.w_l1 * l1;
        }
    }
    c
}

/// Optimal query-to-target assignment; every target gets a query when
/// `G ≤ Q`.
pub fn match_queries(logits: &Matrix, boxes: &Matrix, targets: &[Target], weights: &LossWeights) -> Result<MatchResult> {
    if targets.is_empty() {
        return Ok(MatchResult {
            pairs: Vec::new(),
            cost: 0.0,
        });
    }
    let probs = softmax_rows(logits);
    let cost = match_cost(&probs, boxes, targets, weights);
    let a = hungarian_assign(&cost)?;
    Ok(MatchResult {
        pairs: a.pairs,
        cost: a.total_cost,
    })
}

/// Builds the loss on `tape` from the `Q × (K + 2)` logits (knowns,
/// unknown, background) and `Q × 4` boxes. The unknown column is never a
/// target.
pub fn match_and_loss(tape: &mut Tape, logits: Var, boxes: Var, targets: &[Target], weights: &LossWeights) -> Result<(Var, MatchResult)> {
    let (q, cols) = tape.shape(logits);
    if q == 0 {
        return Err(Error::Dimension("loss needs at least one query".into()));
    }
    if cols < 3 {
        return Err(Error::Dimension(format!("logits need K + 2 >= 3 columns, got {cols}")));
    }
    if let Some(t) = targets.iter().find(|t| t.column >= cols - 2) {
        return Err(Error::Dimension(format!("target column {} is not a known class", t.column)));
    }
    let m = match_queries(tape.value(logits), tape.value(boxes), targets, weights)?;
    let loss = matched_loss(tape, logits, boxes, targets, &m.pairs, weights)?;
    Ok((loss, m))
}

/// Loss for a given `(query, target)` matching.
pub fn matched_loss(tape: &mut Tape, logits: Var, boxes: Var, targets: &[Target], pairs: &[(usize, usize)], weights: &LossWeights) -> Result<Var> {
    let (q, cols) = tape.shape(logits);
    let bg = cols - 1;
    if pairs.iter().any(|&(i, j)| i >= q || j >= targets.len()) {
        return Err(Error::Dimension("matching refers to a missing query or target".into()));
    }
    let mut fg = Vec::new();
    let mut matched = vec![false; q];
    for &(i, j) in pairs {
        fg.push((i, targets[j].column));
        matched[i] = true;
    }
    let bgs: Vec<(usize, usize)> = (0..q).filter(|&i| !matched[i]).map(|i| (i, bg)).collect();

    let logp = tape.log_softmax_rows(logits);
    let mut terms = Vec::new();
    if !fg.is_empty() {
        let p = tape.pick(logp, &fg);
        let s = tape.sum(p);
        terms.push(tape.scale(s, -weights.w_cls / q as f64));
    }
    if !bgs.is_empty() {
        let p = tape.pick(logp, &bgs);
        let s = tape.sum(p);
        terms.push(tape.scale(s, -weights.w_cls * weights.bg_weight / q as f64));
    }
    if !pairs.is_empty() {
        let rows: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
        let gt: Vec<f64> = pairs.iter().flat_map(|&(_, j)| targets[j].bbox).collect();
        let sel = tape.select_rows(boxes, &rows);
        let gt = tape.constant(Matrix::from_vec(rows.len(), 4, gt));
        let diff = tape.sub(sel, gt);
        let a = tape.abs(diff);
        let s = tape.sum(a);
        terms.push(tape.scale(s, weights.w_l1 / pairs.len() as f64));
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t);
    }
    Ok(loss)
}
