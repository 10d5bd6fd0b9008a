//! Evaluation: word-role accuracy, the attention-similarity probe and
//! its top-k mapping, and standard tracking metrics.
//!
//! Everything here is pure `f64` arithmetic over plain tensors and
//! boxes — deliberately independent of the autodiff stack, so these
//! functions double as oracles for the differentiable paths.

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Success-plot threshold grid: 0 to 1 inclusive, step 0.05.
pub const IOU_THRESHOLDS: usize = 21;
/// Center-error bound for precision, in pixels.
pub const PRECISION_PX: f64 = 20.0;
/// Bound for size-normalized precision.
pub const PRECISION_NORM: f64 = 0.2;

/// Aggregate tracking scores, all in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackingMetrics {
    /// Mean success rate over the 21-point overlap-threshold grid
    /// (success at threshold `t` means IoU >= `t`).
    pub auc: f64,
    /// Fraction of frames with center error under 20 px.
    pub precision: f64,
    /// Fraction of frames whose center error, divided per-axis by the
    /// ground-truth box size, has norm under 0.2.
    pub precision_norm: f64,
}

/// Scores a tracked sequence against ground truth. Boxes are in frame
/// pixels; `frame_sizes` gives each frame's `(width, height)` and is
/// used to reject corrupt ground truth (centers outside the frame).
pub fn tracking_metrics(
    pred: &[BBox],
    gt: &[BBox],
    frame_sizes: &[(f64, f64)],
) -> Result<TrackingMetrics> {
    if pred.len() != gt.len() || pred.len() != frame_sizes.len() {
        return Err(Error::Input(format!(
            "{} predictions, {} ground-truth boxes, {} frame sizes",
            pred.len(),
            gt.len(),
            frame_sizes.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Input("cannot score an empty sequence".into()));
    }
    let n = pred.len() as f64;
    let mut success = [0usize; IOU_THRESHOLDS];
    let mut hits_px = 0usize;
    let mut hits_norm = 0usize;
    for ((p, g), &(fw, fh)) in pred.iter().zip(gt).zip(frame_sizes) {
        if g.w <= 0.0 || g.h <= 0.0 {
            return Err(Error::Input(format!("ground-truth box has size {}x{}", g.w, g.h)));
        }
        if fw <= 0.0 || fh <= 0.0 {
            return Err(Error::Input(format!("frame size {fw}x{fh} is not positive")));
        }
        if g.x < 0.0 || g.x > fw || g.y < 0.0 || g.y > fh {
            return Err(Error::Input(format!(
                "ground-truth center ({}, {}) outside {fw}x{fh} frame",
                g.x, g.y
            )));
        }
        let iou = p.iou(g);
        for (i, slot) in success.iter_mut().enumerate() {
            if iou >= i as f64 * 0.05 {
                *slot += 1;
            }
        }
        if p.center_distance(g) < PRECISION_PX {
            hits_px += 1;
        }
        let dx = (p.x - g.x) / g.w;
        let dy = (p.y - g.y) / g.h;
        if (dx * dx + dy * dy).sqrt() < PRECISION_NORM {
            hits_norm += 1;
        }
    }
    let auc = success.iter().map(|&s| s as f64 / n).sum::<f64>() / IOU_THRESHOLDS as f64;
    Ok(TrackingMetrics {
        auc,
        precision: hits_px as f64 / n,
        precision_norm: hits_norm as f64 / n,
    })
}

/// Marks the `k` largest scores with 1 (ties broken toward the
/// smallest index), the rest with 0.
pub fn topk_map(scores: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Input(format!(
            "k = {k} outside 1..={} for the top-k map",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Descending by score; equal scores keep ascending index order.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut p = vec![0.0; scores.len()];
    for &i in &order[..k] {
        p[i] = 1.0;
    }
    Ok(p)
}

/// Maps scores to binary labels by a threshold: 1 where the score is
/// at least `tau`.
pub fn threshold_map(scores: &[f64], tau: f64) -> Vec<f64> {
    scores.iter().map(|&s| if s >= tau { 1.0 } else { 0.0 }).collect()
}

/// Overall and target-word accuracy of predicted roles `p` against
/// ground truth `g` (both binary).
pub fn accuracy(p: &[f64], g: &[f64]) -> Result<(f64, f64)> {
    if p.len() != g.len() {
        return Err(Error::Input(format!(
            "{} predictions vs {} labels in accuracy",
            p.len(),
            g.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::Input("accuracy over zero words".into()));
    }
    for v in p.iter().chain(g) {
        if *v != 0.0 && *v != 1.0 {
            return Err(Error::Input(format!("accuracy labels must be 0 or 1, got {v}")));
        }
    }
    let targets = g.iter().filter(|&&v| v == 1.0).count();
    if targets == 0 {
        return Err(Error::Input("accuracy needs at least one target word".into()));
    }
    let all = p.iter().zip(g).filter(|(a, b)| a == b).count() as f64 / p.len() as f64;
    let target_hits =
        p.iter().zip(g).filter(|(a, b)| **a == 1.0 && **b == 1.0).count() as f64;
    Ok((all, target_hits / targets as f64))
}

/// Output of [`similarity_probe`]: per-word attention traces.
#[derive(Clone, Debug)]
pub struct SimilarityTrace {
    /// `att[word][frame]`: mean visual-token similarity of each word.
    pub att: Vec<Vec<f64>>,
    /// Time-averaged similarity per word.
    pub res: Vec<f64>,
}

/// The attention-similarity baseline: per frame, each word's mean dot
/// product with the visual tokens; then averaged over time. `frames`
/// pairs the text features `[L, D]` with the visual features `[Nv, D]`
/// of each frame.
pub fn similarity_probe(frames: &[(Tensor, Tensor)]) -> Result<SimilarityTrace> {
    let (first_l, _) = frames
        .first()
        .ok_or_else(|| Error::Input("similarity probe needs at least one frame".into()))?;
    let l = first_l.shape()[0];
    let mut att = vec![vec![0.0; frames.len()]; l];
    for (t, (f_l, f_v)) in frames.iter().enumerate() {
        let (ls, vs) = (f_l.shape(), f_v.shape());
        if ls.len() != 2 || vs.len() != 2 || ls[1] != vs[1] || ls[0] != l || vs[0] == 0 {
            return Err(Error::Input(format!(
                "frame {t}: text {ls:?} and visual {vs:?} features are inconsistent"
            )));
        }
        let d = ls[1];
        let nv = vs[0];
        for (w, row) in att.iter_mut().enumerate() {
            let mut total = 0.0;
            for v in 0..nv {
                let mut dot = 0.0;
                for j in 0..d {
                    dot += f_l.data()[w * d + j] * f_v.data()[v * d + j];
                }
                total += dot;
            }
            row[t] = total / nv as f64;
        }
    }
    let res = att.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect();
    Ok(SimilarityTrace { att, res })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn topk_hand_cases_and_bounds() {
        assert_eq!(topk_map(&[0.1, 0.9, 0.5], 1).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(topk_map(&[0.3, 0.3, 0.3], 2).unwrap(), vec![1.0, 1.0, 0.0]);
        assert!(topk_map(&[0.1, 0.2], 0).is_err());
        assert!(topk_map(&[0.1, 0.2], 3).is_err());
    }

    #[test]
    fn topk_agrees_with_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.gen_range(1..12);
            let k = rng.gen_range(1..=n);
            // Coarse grid so ties actually occur.
            let scores: Vec<f64> =
                (0..n).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
            let p = topk_map(&scores, k).unwrap();
            assert_eq!(p.iter().filter(|&&v| v == 1.0).count(), k);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
            });
            let mut oracle = vec![0.0; n];
            for &i in &order[..k] {
                oracle[i] = 1.0;
            }
            assert_eq!(p, oracle, "scores {scores:?} k {k}");
            let min_in = scores
                .iter()
                .zip(&p)
                .filter(|(_, &m)| m == 1.0)
                .map(|(s, _)| *s)
                .fold(f64::INFINITY, f64::min);
            let max_out = scores
                .iter()
                .zip(&p)
                .filter(|(_, &m)| m == 0.0)
                .map(|(s, _)| *s)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(min_in >= max_out || k == n);
        }
    }

    #[test]
    fn threshold_map_uses_inclusive_bound() {
        assert_eq!(threshold_map(&[0.4, 0.5, 0.6], 0.5), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn accuracy_hand_cases() {
        assert_eq!(accuracy(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), (1.0, 1.0));
        assert_eq!(accuracy(&[0.0, 1.0, 1.0], &[1.0, 0.0, 0.0]).unwrap(), (0.0, 0.0));
        assert_eq!(
            accuracy(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0]).unwrap(),
            (0.5, 0.5)
        );
    }

    #[test]
    fn accuracy_rejects_bad_inputs() {
        assert!(accuracy(&[1.0], &[1.0, 0.0]).is_err());
        assert!(accuracy(&[0.0, 1.0], &[0.0, 0.0]).is_err());
        assert!(accuracy(&[0.5, 1.0], &[1.0, 0.0]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn accuracy_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(2..10);
            let mut g: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2))).collect();
            g[rng.gen_range(0..n)] = 1.0;
            let p: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2))).collect();
            let base = accuracy(&p, &g).unwrap();
            let mut idx: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                idx.swap(i, rng.gen_range(0..=i));
            }
            let pp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            let gp: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
            assert_eq!(accuracy(&pp, &gp).unwrap(), base);
        }
    }

    #[test]
    fn probe_zero_visual_features_give_zero_column() {
        let f_l = tensor(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let f_v = tensor(2, 3, vec![0.0; 6]);
        let trace = similarity_probe(&[(f_l, f_v)]).unwrap();
        assert_eq!(trace.att, vec![vec![0.0], vec![0.0]]);
        assert_eq!(trace.res, vec![0.0, 0.0]);
    }

    #[test]
    fn probe_matching_word_wins() {
        // Word 1 equals both visual rows; words 0 and 2 are orthogonal
        // to them.
        let f_l = tensor(3, 2, vec![0.0, 1.0, 1.0, 0.0, 0.0, -1.0]);
        let f_v = tensor(2, 2, vec![1.0, 0.0, 1.0, 0.0]);
        let trace = similarity_probe(&[(f_l, f_v)]).unwrap();
        let argmax = trace
            .res
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 1);
    }

    #[test]
    fn probe_matches_hand_computation_over_two_frames() {
        // Frame 0: f_L = [[1,2],[3,4]], f_V = [[1,0],[0,1],[1,1]].
        // Dots per word: w0 -> 1, 2, 3 (mean 2); w1 -> 3, 4, 7 (mean 14/3).
        let f_l0 = tensor(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let f_v0 = tensor(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        // Frame 1: f_V = [[2,2]]. Dots: w0 -> 6, w1 -> 14.
        let f_l1 = tensor(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let f_v1 = tensor(1, 2, vec![2.0, 2.0]);
        let trace = similarity_probe(&[(f_l0, f_v0), (f_l1, f_v1)]).unwrap();
        assert!((trace.att[0][0] - 2.0).abs() < 1e-12);
        assert!((trace.att[1][0] - 14.0 / 3.0).abs() < 1e-12);
        assert!((trace.att[0][1] - 6.0).abs() < 1e-12);
        assert!((trace.att[1][1] - 14.0).abs() < 1e-12);
        assert!((trace.res[0] - 4.0).abs() < 1e-12);
        assert!((trace.res[1] - (14.0 / 3.0 + 14.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn probe_rejects_inconsistent_frames() {
        let f_l = tensor(2, 2, vec![0.0; 4]);
        let bad_l = tensor(3, 2, vec![0.0; 6]);
        let f_v = tensor(2, 2, vec![0.0; 4]);
        assert!(similarity_probe(&[]).is_err());
        assert!(
            similarity_probe(&[(f_l.clone(), f_v.clone()), (bad_l, f_v.clone())]).is_err()
        );
        let bad_v = tensor(2, 3, vec![0.0; 6]);
        assert!(similarity_probe(&[(f_l, bad_v)]).is_err());
    }

    #[test]
    fn perfect_tracking_scores_ones() {
        let boxes: Vec<BBox> =
            (0..5).map(|i| BBox::new(30.0 + i as f64, 40.0, 10.0, 12.0)).collect();
        let sizes = vec![(96.0, 96.0); 5];
        let m = tracking_metrics(&boxes, &boxes, &sizes).unwrap();
        assert_eq!(m.auc, 1.0);
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.precision_norm, 1.0);
    }

    #[test]
    fn lost_tracking_scores_near_zero() {
        let pred = vec![BBox::new(5.0, 5.0, 4.0, 4.0); 4];
        let gt = vec![BBox::new(80.0, 80.0, 4.0, 4.0); 4];
        let sizes = vec![(96.0, 96.0); 4];
        let m = tracking_metrics(&pred, &gt, &sizes).unwrap();
        // Only the IoU >= 0 threshold succeeds.
        assert!((m.auc - 1.0 / 21.0).abs() < 1e-12);
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.precision_norm, 0.0);
    }

    #[test]
    fn auc_matches_threshold_grid_enumeration() {
        // Three frames: IoUs 1.0, 7/13, and 0.0. The middle value sits
        // strictly inside a grid cell (an exact 0.5 would land on the
        // tau = 0.5 knot, where >= is numerically ill-conditioned) and
        // passes the same 11 thresholds as an ideal 0.5 would.
        let gt = vec![
            BBox::new(20.0, 20.0, 10.0, 10.0),
            BBox::new(50.0, 50.0, 10.0, 10.0),
            BBox::new(80.0, 80.0, 10.0, 10.0),
        ];
        let pred = vec![
            BBox::new(20.0, 20.0, 10.0, 10.0),
            // Shifted 3 px: intersection 10*7 = 70, union 200 - 70 =
            // 130, IoU = 7/13.
            BBox::new(53.0, 50.0, 10.0, 10.0),
            BBox::new(10.0, 10.0, 10.0, 10.0),
        ];
        let sizes = vec![(96.0, 96.0); 3];
        let ious: Vec<f64> = pred.iter().zip(&gt).map(|(p, g)| p.iou(g)).collect();
        assert!((ious[1] - 7.0 / 13.0).abs() < 1e-12, "engineered IoU was {}", ious[1]);
        let mut expected = 0.0;
        for i in 0..IOU_THRESHOLDS {
            let tau = i as f64 * 0.05;
            expected +=
                ious.iter().filter(|&&v| v >= tau).count() as f64 / ious.len() as f64;
        }
        expected /= IOU_THRESHOLDS as f64;
        let m = tracking_metrics(&pred, &gt, &sizes).unwrap();
        assert!((m.auc - expected).abs() < 1e-12);
        assert!((m.auc - 33.0 / 63.0).abs() < 1e-12);
    }

    #[test]
    fn tracking_metrics_reject_bad_inputs() {
        let b = BBox::new(10.0, 10.0, 5.0, 5.0);
        assert!(tracking_metrics(&[b], &[b, b], &[(96.0, 96.0); 2]).is_err());
        assert!(tracking_metrics(&[], &[], &[]).is_err());
        assert!(tracking_metrics(&[b], &[BBox::new(10.0, 10.0, 0.0, 5.0)], &[(96.0, 96.0)])
            .is_err());
        assert!(tracking_metrics(&[b], &[BBox::new(200.0, 10.0, 5.0, 5.0)], &[(96.0, 96.0)])
            .is_err());
    }
}
