//! Training losses: focal score-map loss, generalized-overlap and L1
//! box losses, word-role cross entropy, and their weighted combination.
//!
//! The total objective is
//!
//! ```text
//! L = w_cls * L_cls + w_iou * L_iou + w_l1 * L_1 + w_bce * L_bce
//! ```
//!
//! with default weights `(1, 2, 5, 0.2)`. `L_cls` is a cornernet-style
//! focal loss (`alpha = 2`, `beta = 4`) against a one-hot target at the
//! ground-truth center cell; `L_iou = 1 - GIoU` and `L_1` compare the
//! box read at that same cell (teacher forcing — the box branches learn
//! regardless of where the score argmax currently sits); `L_bce` is
//! mean binary cross entropy between the word probabilities and the
//! target/context labels.

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::head::BoxVars;
use crate::tensor::{Graph, Tensor, Var};

/// Probability clamp for logarithms.
const CLAMP_EPS: f64 = 1e-6;
/// Focal exponent on the predicted probability.
const FOCAL_ALPHA: f64 = 2.0;
/// Focal exponent on the soft negative weight (one-hot targets make
/// this weight exactly 1, but the exponent is kept for documentation).
#[allow(dead_code)]
const FOCAL_BETA: f64 = 4.0;

/// Loss-term weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Focal score-map term.
    pub cls: f64,
    /// Generalized-overlap term.
    pub iou: f64,
    /// Coordinate L1 term.
    pub l1: f64,
    /// Word-role cross-entropy term.
    pub bce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cls: 1.0, iou: 2.0, l1: 5.0, bce: 0.2 }
    }
}

/// Focal loss over a `[1, H, W]` score map with a one-hot target at
/// `(row, col)`. With a single positive cell the normalizer is 1:
///
/// ```text
/// L = -( (1 - p_c)^2 ln p_c  +  sum_{i != c} p_i^2 ln(1 - p_i) )
/// ```
pub fn focal_score_loss(g: &mut Graph, score: Var, row: usize, col: usize) -> Result<Var> {
    let shape = g.shape(score).to_vec();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::Contract(format!("focal loss needs a [1, H, W] map, got {shape:?}")));
    }
    let (grid_h, grid_w) = (shape[1], shape[2]);
    if row >= grid_h || col >= grid_w {
        return Err(Error::Contract(format!(
            "target cell ({row}, {col}) outside {grid_h}x{grid_w} map"
        )));
    }
    let mut pos_data = vec![0.0; grid_h * grid_w];
    pos_data[row * grid_w + col] = 1.0;
    let pos = g.constant(Tensor::new(vec![1, grid_h, grid_w], pos_data)?);
    let neg_mask = g.neg(pos);
    let neg = g.scalar_add(neg_mask, 1.0);

    let p = g.clamp(score, CLAMP_EPS, 1.0 - CLAMP_EPS);
    let minus_p = g.neg(p);
    let one_minus_p = g.scalar_add(minus_p, 1.0);

    let ln_p = g.ln(p);
    let focus_pos = g.pow_const(one_minus_p, FOCAL_ALPHA);
    let pos_term = g.mul(focus_pos, ln_p)?;
    let pos_term = g.mul(pos, pos_term)?;

    let ln_q = g.ln(one_minus_p);
    let focus_neg = g.pow_const(p, FOCAL_ALPHA);
    let neg_term = g.mul(focus_neg, ln_q)?;
    let neg_term = g.mul(neg, neg_term)?;

    let both = g.add(pos_term, neg_term)?;
    let total = g.sum(both);
    Ok(g.neg(total))
}

/// `1 - GIoU` between a predicted box (graph values) and a fixed
/// ground-truth box, both center-based in the same coordinates.
pub fn giou_loss(g: &mut Graph, pred: &BoxVars, gt: &BBox) -> Result<Var> {
    if gt.w <= 0.0 || gt.h <= 0.0 {
        return Err(Error::Input(format!(
            "ground-truth box must have positive size, got w={} h={}",
            gt.w, gt.h
        )));
    }
    let half_w = g.scalar_mul(pred.w, 0.5);
    let half_h = g.scalar_mul(pred.h, 0.5);
    let px0 = g.sub(pred.x, half_w)?;
    let px1 = g.add(pred.x, half_w)?;
    let py0 = g.sub(pred.y, half_h)?;
    let py1 = g.add(pred.y, half_h)?;
    let (gx0, gy0, gx1, gy1) = gt.corners();
    let gx0 = g.scalar(gx0);
    let gy0 = g.scalar(gy0);
    let gx1 = g.scalar(gx1);
    let gy1 = g.scalar(gy1);

    let ix0 = g.max_elem(px0, gx0)?;
    let ix1 = g.min_elem(px1, gx1)?;
    let iy0 = g.max_elem(py0, gy0)?;
    let iy1 = g.min_elem(py1, gy1)?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;

    let area_p = g.mul(pred.w, pred.h)?;
    let area_g = g.scalar(gt.area());
    let areas = g.add(area_p, area_g)?;
    let union = g.sub(areas, inter)?;

    let ex0 = g.min_elem(px0, gx0)?;
    let ex1 = g.max_elem(px1, gx1)?;
    let ey0 = g.min_elem(py0, gy0)?;
    let ey1 = g.max_elem(py1, gy1)?;
    let ew = g.sub(ex1, ex0)?;
    let eh = g.sub(ey1, ey0)?;
    let enclosing = g.mul(ew, eh)?;

    let iou = g.div(inter, union)?;
    let gap = g.sub(enclosing, union)?;
    let penalty = g.div(gap, enclosing)?;
    let giou = g.sub(iou, penalty)?;
    let neg_giou = g.neg(giou);
    Ok(g.scalar_add(neg_giou, 1.0))
}

/// Sum of absolute coordinate errors `|dx| + |dy| + |dw| + |dh|`.
pub fn l1_box_loss(g: &mut Graph, pred: &BoxVars, gt: &BBox) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (var, target) in [(pred.x, gt.x), (pred.y, gt.y), (pred.w, gt.w), (pred.h, gt.h)] {
        let t = g.scalar(target);
        let d = g.sub(var, t)?;
        let a = g.abs(d);
        total = Some(match total {
            Some(acc) => g.add(acc, a)?,
            None => a,
        });
    }
    Ok(total.expect("four coordinates"))
}

/// Mean binary cross entropy between word probabilities `[N_l, 1]` and
/// 0/1 labels. A length mismatch is an input error.
pub fn bce_word_loss(g: &mut Graph, p_t: Var, labels: &[f64]) -> Result<Var> {
    let shape = g.shape(p_t).to_vec();
    if shape.len() != 2 || shape[1] != 1 {
        return Err(Error::Contract(format!(
            "word loss needs [N_l, 1] probabilities, got {shape:?}"
        )));
    }
    if shape[0] != labels.len() {
        return Err(Error::Input(format!(
            "{} word probabilities but {} labels",
            shape[0],
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::Input("word labels must be 0 or 1".into()));
    }
    let y = g.constant(Tensor::new(vec![labels.len(), 1], labels.to_vec())?);
    let minus_y = g.neg(y);
    let not_y = g.scalar_add(minus_y, 1.0);
    let p = g.clamp(p_t, CLAMP_EPS, 1.0 - CLAMP_EPS);
    let minus_p = g.neg(p);
    let not_p = g.scalar_add(minus_p, 1.0);
    let ln_p = g.ln(p);
    let ln_q = g.ln(not_p);
    let pos = g.mul(y, ln_p)?;
    let neg = g.mul(not_y, ln_q)?;
    let both = g.add(pos, neg)?;
    let m = g.mean(both);
    Ok(g.neg(m))
}

/// Weighted combination on the graph.
pub fn total_loss(
    g: &mut Graph,
    l_cls: Var,
    l_iou: Var,
    l_1: Var,
    l_bce: Var,
    w: &LossWeights,
) -> Result<Var> {
    let a = g.scalar_mul(l_cls, w.cls);
    let b = g.scalar_mul(l_iou, w.iou);
    let c = g.scalar_mul(l_1, w.l1);
    let d = g.scalar_mul(l_bce, w.bce);
    let ab = g.add(a, b)?;
    let abc = g.add(ab, c)?;
    g.add(abc, d)
}

/// Weighted combination over plain values (for logging and tests).
pub fn combine_values(l_cls: f64, l_iou: f64, l_1: f64, l_bce: f64, w: &LossWeights) -> f64 {
    w.cls * l_cls + w.iou * l_iou + w.l1 * l_1 + w.bce * l_bce
}
