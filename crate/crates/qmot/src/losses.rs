//! Training objective: bipartite matching loss over the latest tracking
//! predictions plus detection queries, and a consistency loss over the
//! remaining historical predictions, aggregated over frames and decoder
//! layers with clip-global normalization of the consistency term.

use crate::assignment::Assignment;
use crate::autodiff::{Tape, Var};
use crate::config::LossWeights;
use crate::geom::BoundingBox;
use crate::types::{FrameAnnotations, Prediction};
use ndarray::Array2;
use std::rc::Rc;

/// Per-frame, per-layer loss components. `total` is the weighted sum of
/// the bipartite parts plus the frame-locally normalized consistency term;
/// clip aggregation renormalizes from `toc_numerator` / `n_his` instead.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub bip_class: f64,
    pub bip_l1: f64,
    pub bip_giou: f64,
    pub toc_numerator: f64,
    /// Historical queries whose track is matched to a ground-truth object.
    pub n_his: usize,
    pub toc: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(
        bip_class: f64,
        bip_l1: f64,
        bip_giou: f64,
        toc_numerator: f64,
        n_his: usize,
        w: &LossWeights,
    ) -> Self {
        let toc = toc_numerator / 1.0f64.max(n_his as f64);
        LossBreakdown {
            bip_class,
            bip_l1,
            bip_giou,
            toc_numerator,
            n_his,
            toc,
            total: w.lambda_cls * bip_class
                + w.lambda_l1 * bip_l1
                + w.lambda_giou * bip_giou
                + toc,
        }
    }
}

/// Supervision target of one prediction row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowTarget {
    Matched { class_id: usize, box_: BoundingBox },
    Background,
}

/// Expand an assignment over `n_preds` rows into per-row targets.
pub fn row_targets(asg: &Assignment, gt: &FrameAnnotations, n_preds: usize) -> Vec<RowTarget> {
    let mut targets = vec![RowTarget::Background; n_preds];
    for (p, g) in &asg.pairs {
        let e = &gt.entries[*g];
        targets[*p] = RowTarget::Matched {
            class_id: e.class_id,
            box_: e.box_,
        };
    }
    targets
}

/// GIoU for row-aligned box matrices (`m x 4`, center format) as an
/// `m x 1` column on the tape.
pub fn giou_graph(tape: &mut Tape, a: Var, b: Var) -> Var {
    assert_eq!(a.cols, 4);
    assert_eq!(b.cols, 4);
    let corners = |tape: &mut Tape, v: Var| {
        let cx = tape.slice_cols(v, 0, 1);
        let cy = tape.slice_cols(v, 1, 1);
        let w = tape.slice_cols(v, 2, 1);
        let h = tape.slice_cols(v, 3, 1);
        let hw = tape.scale(w, 0.5);
        let hh = tape.scale(h, 0.5);
        let x1 = tape.sub(cx, hw);
        let x2 = tape.add(cx, hw);
        let y1 = tape.sub(cy, hh);
        let y2 = tape.add(cy, hh);
        (x1, y1, x2, y2, w, h)
    };
    let (ax1, ay1, ax2, ay2, aw, ah) = corners(tape, a);
    let (bx1, by1, bx2, by2, bw, bh) = corners(tape, b);

    let ix1 = tape.maximum(ax1, bx1);
    let ix2 = tape.minimum(ax2, bx2);
    let iy1 = tape.maximum(ay1, by1);
    let iy2 = tape.minimum(ay2, by2);
    let iw_raw = tape.sub(ix2, ix1);
    let iw = tape.relu(iw_raw);
    let ih_raw = tape.sub(iy2, iy1);
    let ih = tape.relu(ih_raw);
    let inter = tape.mul(iw, ih);

    let area_a = tape.mul(aw, ah);
    let area_b = tape.mul(bw, bh);
    let sum_areas = tape.add(area_a, area_b);
    let union = tape.sub(sum_areas, inter);
    let iou = tape.div(inter, union);

    let hx1 = tape.minimum(ax1, bx1);
    let hx2 = tape.maximum(ax2, bx2);
    let hy1 = tape.minimum(ay1, by1);
    let hy2 = tape.maximum(ay2, by2);
    let hw_ = tape.sub(hx2, hx1);
    let hh_ = tape.sub(hy2, hy1);
    let hull = tape.mul(hw_, hh_);
    let slack = tape.sub(hull, union);
    let penalty = tape.div(slack, hull);
    tape.sub(iou, penalty)
}

fn boxes_const(tape: &mut Tape, boxes: &[BoundingBox]) -> Var {
    let mut m = Array2::zeros((boxes.len(), 4));
    for (i, b) in boxes.iter().enumerate() {
        m[[i, 0]] = b.cx;
        m[[i, 1]] = b.cy;
        m[[i, 2]] = b.w;
        m[[i, 3]] = b.h;
    }
    tape.leaf(m)
}

/// Cross-entropy over all rows toward their target class (background for
/// unmatched rows), as a weighted mean with background rows downweighted
/// by `background_weight`. Optional focal-style weighting.
fn class_term_graph(tape: &mut Tape, probs: Var, targets: &[RowTarget], w: &LossWeights) -> Var {
    let idx: Vec<usize> = targets
        .iter()
        .map(|t| match t {
            RowTarget::Matched { class_id, .. } => *class_id,
            RowTarget::Background => 0,
        })
        .collect();
    let picked = tape.select_per_row(probs, Rc::new(idx));
    let logp = tape.ln(picked);
    let nll = tape.scale(logp, -1.0);
    let nll = if w.focal {
        let neg = tape.scale(picked, -1.0);
        let one_minus = tape.add_scalar(neg, 1.0);
        let sq = tape.mul(one_minus, one_minus);
        tape.mul(sq, nll)
    } else {
        nll
    };
    let row_w: Vec<f64> = targets
        .iter()
        .map(|t| match t {
            RowTarget::Matched { .. } => 1.0,
            RowTarget::Background => w.background_weight,
        })
        .collect();
    let total_w: f64 = row_w.iter().sum();
    let weights = tape.leaf(Array2::from_shape_vec((targets.len(), 1), row_w).unwrap());
    let weighted = tape.mul(nll, weights);
    let sum = tape.sum_all(weighted);
    tape.scale(sum, 1.0 / total_w)
}

/// Box terms over matched rows: `(sum L1 / m, sum (1 - giou) / m)`.
fn box_terms_graph(
    tape: &mut Tape,
    boxes: Var,
    targets: &[RowTarget],
) -> (Var, Var) {
    let matched: Vec<(usize, BoundingBox)> = targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| match t {
            RowTarget::Matched { box_, .. } => Some((i, *box_)),
            RowTarget::Background => None,
        })
        .collect();
    if matched.is_empty() {
        return (tape.scalar(0.0), tape.scalar(0.0));
    }
    let m = matched.len() as f64;
    let rows: Vec<usize> = matched.iter().map(|(i, _)| *i).collect();
    let gt_boxes: Vec<BoundingBox> = matched.iter().map(|(_, b)| *b).collect();
    let pred = tape.gather_rows(boxes, Rc::new(rows));
    let gt = boxes_const(tape, &gt_boxes);

    let diff = tape.sub(pred, gt);
    let l1 = tape.abs(diff);
    let l1_sum = tape.sum_all(l1);
    let l1_term = tape.scale(l1_sum, 1.0 / m);

    let giou = giou_graph(tape, pred, gt);
    let neg = tape.scale(giou, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let g_sum = tape.sum_all(one_minus);
    let giou_term = tape.scale(g_sum, 1.0 / m);
    (l1_term, giou_term)
}

/// Unweighted bipartite loss components on the tape.
pub struct BipartiteLossVars {
    pub class_term: Var,
    pub l1_term: Var,
    pub giou_term: Var,
}

impl BipartiteLossVars {
    pub fn weighted_total(&self, tape: &mut Tape, w: &LossWeights) -> Var {
        let c = tape.scale(self.class_term, w.lambda_cls);
        let l = tape.scale(self.l1_term, w.lambda_l1);
        let g = tape.scale(self.giou_term, w.lambda_giou);
        let cl = tape.add(c, l);
        tape.add(cl, g)
    }
}

pub fn bipartite_loss_graph(
    tape: &mut Tape,
    probs: Var,
    boxes: Var,
    targets: &[RowTarget],
    w: &LossWeights,
) -> BipartiteLossVars {
    assert_eq!(probs.rows, targets.len());
    if targets.is_empty() {
        return BipartiteLossVars {
            class_term: tape.scalar(0.0),
            l1_term: tape.scalar(0.0),
            giou_term: tape.scalar(0.0),
        };
    }
    let class_term = class_term_graph(tape, probs, targets, w);
    let (l1_term, giou_term) = box_terms_graph(tape, boxes, targets);
    BipartiteLossVars {
        class_term,
        l1_term,
        giou_term,
    }
}

/// Consistency-loss numerator over historical rows, plus the count of rows
/// belonging to matched tracks. Matched rows pay class + box loss toward
/// the track's assigned object; rows of unmatched tracks pay background
/// cross-entropy and are excluded from the count.
pub fn toc_loss_graph(
    tape: &mut Tape,
    probs: Var,
    boxes: Var,
    targets: &[RowTarget],
    w: &LossWeights,
) -> (Var, usize) {
    assert_eq!(probs.rows, targets.len());
    if targets.is_empty() {
        return (tape.scalar(0.0), 0);
    }
    let class_idx: Vec<usize> = targets
        .iter()
        .map(|t| match t {
            RowTarget::Matched { class_id, .. } => *class_id,
            RowTarget::Background => 0,
        })
        .collect();
    let picked = tape.select_per_row(probs, Rc::new(class_idx));
    let logp = tape.ln(picked);
    let nll = tape.scale(logp, -1.0);
    let mut numerator = tape.sum_all(nll);

    let matched: Vec<(usize, BoundingBox)> = targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| match t {
            RowTarget::Matched { box_, .. } => Some((i, *box_)),
            RowTarget::Background => None,
        })
        .collect();
    let count = matched.len();
    if count > 0 {
        let rows: Vec<usize> = matched.iter().map(|(i, _)| *i).collect();
        let gt_boxes: Vec<BoundingBox> = matched.iter().map(|(_, b)| *b).collect();
        let pred = tape.gather_rows(boxes, Rc::new(rows));
        let gt = boxes_const(tape, &gt_boxes);
        let diff = tape.sub(pred, gt);
        let l1 = tape.abs(diff);
        let l1_sum = tape.sum_all(l1);
        let l1_w = tape.scale(l1_sum, w.lambda_l1);
        let giou = giou_graph(tape, pred, gt);
        let neg = tape.scale(giou, -1.0);
        let one_minus = tape.add_scalar(neg, 1.0);
        let g_sum = tape.sum_all(one_minus);
        let g_w = tape.scale(g_sum, w.lambda_giou);
        let box_part = tape.add(l1_w, g_w);
        numerator = tape.add(numerator, box_part);
    }
    (numerator, count)
}

fn predictions_to_vars(tape: &mut Tape, preds: &[Prediction]) -> (Var, Var) {
    let n_classes = preds.first().map(|p| p.class_probs.len()).unwrap_or(2);
    let mut probs = Array2::zeros((preds.len(), n_classes));
    let mut boxes = Array2::zeros((preds.len(), 4));
    for (i, p) in preds.iter().enumerate() {
        for (j, v) in p.class_probs.iter().enumerate() {
            probs[[i, j]] = *v;
        }
        boxes[[i, 0]] = p.box_.cx;
        boxes[[i, 1]] = p.box_.cy;
        boxes[[i, 2]] = p.box_.w;
        boxes[[i, 3]] = p.box_.h;
    }
    (tape.leaf(probs), tape.leaf(boxes))
}

/// Plain-value bipartite loss over latest + detection predictions.
pub fn bipartite_loss(
    preds: &[Prediction],
    gt: &FrameAnnotations,
    asg: &Assignment,
    w: &LossWeights,
) -> (f64, f64, f64) {
    let mut tape = Tape::new();
    let (probs, boxes) = predictions_to_vars(&mut tape, preds);
    let targets = row_targets(asg, gt, preds.len());
    let parts = bipartite_loss_graph(&mut tape, probs, boxes, &targets, w);
    (
        tape.scalar_value(parts.class_term),
        tape.scalar_value(parts.l1_term),
        tape.scalar_value(parts.giou_term),
    )
}

/// Supervision status of one track for the consistency loss.
#[derive(Debug, Clone, Copy)]
pub enum TrackTarget {
    Matched { class_id: usize, box_: BoundingBox },
    Unmatched,
}

/// Plain-value consistency loss. Each entry pairs a track's assignment
/// status with that track's historical predictions (the latest row
/// excluded by the caller). Returns `(numerator, count)`.
pub fn toc_loss(per_track: &[(TrackTarget, Vec<Prediction>)], w: &LossWeights) -> (f64, usize) {
    let mut flat_preds = Vec::new();
    let mut targets = Vec::new();
    for (status, preds) in per_track {
        for p in preds {
            flat_preds.push(p.clone());
            targets.push(match status {
                TrackTarget::Matched { class_id, box_ } => RowTarget::Matched {
                    class_id: *class_id,
                    box_: *box_,
                },
                TrackTarget::Unmatched => RowTarget::Background,
            });
        }
    }
    if flat_preds.is_empty() {
        return (0.0, 0);
    }
    let mut tape = Tape::new();
    let (probs, boxes) = predictions_to_vars(&mut tape, &flat_preds);
    let (num, count) = toc_loss_graph(&mut tape, probs, boxes, &targets, w);
    (tape.scalar_value(num), count)
}

/// Clip-level aggregation: weighted bipartite parts summed over frames and
/// layers, plus the consistency term normalized by the clip-global
/// historical count (shared across frames, applied per layer).
pub fn clip_loss(per_frame_per_layer: &[Vec<LossBreakdown>], w: &LossWeights) -> f64 {
    assert!(!per_frame_per_layer.is_empty());
    let n_layers = per_frame_per_layer[0].len();
    assert!(per_frame_per_layer.iter().all(|f| f.len() == n_layers));

    let mut total = 0.0;
    for frame in per_frame_per_layer {
        for lb in frame {
            total += w.lambda_cls * lb.bip_class
                + w.lambda_l1 * lb.bip_l1
                + w.lambda_giou * lb.bip_giou;
        }
    }
    let total_his: usize = per_frame_per_layer.iter().map(|f| f[0].n_his).sum();
    let denom = 1.0f64.max(total_his as f64);
    for layer in 0..n_layers {
        let num: f64 = per_frame_per_layer
            .iter()
            .map(|f| f[layer].toc_numerator)
            .sum();
        total += num / denom;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::generalized_iou;

    fn w() -> LossWeights {
        LossWeights::default()
    }

    fn bx(cx: f64) -> BoundingBox {
        BoundingBox::new(cx, 0.5, 0.2, 0.2).unwrap()
    }

    fn pred(probs: Vec<f64>, cx: f64) -> Prediction {
        Prediction::new(probs, bx(cx)).unwrap()
    }

    fn matched_asg(pairs: Vec<(usize, usize)>, n_preds: usize, n_gt: usize) -> Assignment {
        let matched_p: Vec<usize> = pairs.iter().map(|(p, _)| *p).collect();
        let matched_g: Vec<usize> = pairs.iter().map(|(_, g)| *g).collect();
        Assignment {
            pairs,
            unmatched_predictions: (0..n_preds).filter(|p| !matched_p.contains(p)).collect(),
            unmatched_gt: (0..n_gt).filter(|g| !matched_g.contains(g)).collect(),
        }
    }

    fn gt_one(cx: f64) -> FrameAnnotations {
        FrameAnnotations {
            frame_index: 0,
            entries: vec![crate::types::GtEntry {
                track_id: 1,
                class_id: 1,
                box_: bx(cx),
                visible: true,
            }],
        }
    }

    #[test]
    fn perfect_predictions_zero_loss() {
        let preds = vec![pred(vec![0.0, 1.0], 0.3), pred(vec![1.0, 0.0], 0.7)];
        let gt = gt_one(0.3);
        let asg = matched_asg(vec![(0, 0)], 2, 1);
        let (c, l1, giou) = bipartite_loss(&preds, &gt, &asg, &w());
        assert!(c.abs() < 1e-12);
        assert!(l1.abs() < 1e-12);
        assert!(giou.abs() < 1e-12);
    }

    #[test]
    fn unmatched_half_background_gives_ln2() {
        let preds = vec![pred(vec![0.5, 0.5], 0.3)];
        let gt = FrameAnnotations::default();
        let asg = matched_asg(vec![], 1, 0);
        let (c, l1, giou) = bipartite_loss(&preds, &gt, &asg, &w());
        assert!((c - 0.5f64.ln().abs()).abs() < 1e-9, "got {c}");
        assert!((c - 0.6931471805599453).abs() < 1e-9);
        assert_eq!(l1, 0.0);
        assert_eq!(giou, 0.0);
    }

    #[test]
    fn matched_box_offset_l1() {
        let preds = vec![pred(vec![0.0, 1.0], 0.4)];
        let gt = gt_one(0.5);
        let asg = matched_asg(vec![(0, 0)], 1, 1);
        let (c, l1, giou) = bipartite_loss(&preds, &gt, &asg, &w());
        assert!(c.abs() < 1e-12);
        assert!((l1 - 0.1).abs() < 1e-9);
        // Weighted contribution is lambda_l1 * 0.1 / 1.
        assert!((w().lambda_l1 * l1 - 0.5).abs() < 1e-9);
        let expect_giou = 1.0 - generalized_iou(&bx(0.4), &bx(0.5));
        assert!((giou - expect_giou).abs() < 1e-9);
    }

    #[test]
    fn giou_graph_matches_plain_giou() {
        let cases = [
            (bx(0.3), bx(0.35)),
            (bx(0.2), bx(0.8)),
            (
                BoundingBox::new(0.5, 0.5, 0.4, 0.4).unwrap(),
                BoundingBox::new(0.6, 0.5, 0.4, 0.4).unwrap(),
            ),
        ];
        for (a, b) in cases {
            let mut tape = Tape::new();
            let av = boxes_const(&mut tape, &[a]);
            let bv = boxes_const(&mut tape, &[b]);
            let g = giou_graph(&mut tape, av, bv);
            let got = tape.value(g)[[0, 0]];
            let want = generalized_iou(&a, &b);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn toc_empty_banks_is_zero_zero() {
        let per_track = vec![
            (
                TrackTarget::Matched {
                    class_id: 1,
                    box_: bx(0.5),
                },
                vec![],
            ),
            (TrackTarget::Unmatched, vec![]),
        ];
        assert_eq!(toc_loss(&per_track, &w()), (0.0, 0));
    }

    #[test]
    fn toc_perfect_matched_row_contributes_zero() {
        let per_track = vec![(
            TrackTarget::Matched {
                class_id: 1,
                box_: bx(0.5),
            },
            vec![pred(vec![0.0, 1.0], 0.5)],
        )];
        let (num, count) = toc_loss(&per_track, &w());
        assert!(num.abs() < 1e-12);
        assert_eq!(count, 1);
    }

    #[test]
    fn toc_unmatched_rows_excluded_from_count() {
        let e = (-1.0f64).exp();
        let per_track = vec![(
            TrackTarget::Unmatched,
            vec![
                pred(vec![e, 1.0 - e], 0.5),
                pred(vec![e, 1.0 - e], 0.5),
            ],
        )];
        let (num, count) = toc_loss(&per_track, &w());
        assert!((num - 2.0).abs() < 1e-9, "got {num}");
        assert_eq!(count, 0);
    }

    #[test]
    fn clip_single_frame_single_layer() {
        let lb = LossBreakdown::new(0.2, 0.1, 0.3, 1.5, 3, &w());
        let total = clip_loss(&[vec![lb]], &w());
        let expect = 2.0 * 0.2 + 5.0 * 0.1 + 2.0 * 0.3 + 1.5 / 3.0;
        assert!((total - expect).abs() < 1e-12);
        assert!((lb.total - expect).abs() < 1e-12);
    }

    #[test]
    fn clip_no_history_reduces_to_bipartite_sum() {
        let frames: Vec<Vec<LossBreakdown>> = (0..3)
            .map(|_| vec![LossBreakdown::new(0.5, 0.0, 0.0, 0.0, 0, &w())])
            .collect();
        let total = clip_loss(&frames, &w());
        assert!((total - 3.0 * 2.0 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn clip_toc_normalization_is_global() {
        // Numerators (1.0, 3.0) with counts (2, 1): global (1+3)/3 = 4/3,
        // not the per-frame mean 0.5/2-ish alternatives.
        let f1 = vec![LossBreakdown::new(0.0, 0.0, 0.0, 1.0, 2, &w())];
        let f2 = vec![LossBreakdown::new(0.0, 0.0, 0.0, 3.0, 1, &w())];
        let total = clip_loss(&[f1, f2], &w());
        assert!((total - 4.0 / 3.0).abs() < 1e-12, "got {total}");
    }

    #[test]
    fn clip_degenerate_all_unmatched_uses_max_one() {
        let f = vec![LossBreakdown::new(0.0, 0.0, 0.0, 2.0, 0, &w())];
        let total = clip_loss(&[f], &w());
        assert!((total - 2.0).abs() < 1e-12);
    }

    /// Removing a track from ground truth flips its rows to background
    /// supervision: the gradient w.r.t. the background probability changes
    /// sign from zero/positive to negative.
    #[test]
    fn background_flip_changes_gradient_sign() {
        let run = |target: RowTarget| {
            let mut tape = Tape::new();
            let probs = tape.leaf(ndarray::array![[0.3, 0.7]]);
            let boxes = boxes_const(&mut tape, &[bx(0.5)]);
            let (num, _) = toc_loss_graph(&mut tape, probs, boxes, &[target], &w());
            let grads = tape.backward(num);
            grads.of(probs)[[0, 0]]
        };
        let matched = run(RowTarget::Matched {
            class_id: 1,
            box_: bx(0.5),
        });
        let unmatched = run(RowTarget::Background);
        assert_eq!(matched, 0.0);
        assert!(unmatched < 0.0, "more background probability must lower the loss");
    }
}
