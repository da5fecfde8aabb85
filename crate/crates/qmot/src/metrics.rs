//! Tracking evaluation: CLEAR (MOTA, FP, FN, ID switches), IDF1, HOTA with
//! its per-threshold curve, and the equivalent-FPS utility.

use crate::assignment::solve_min_cost;
use crate::geom::{box_iou, BoundingBox};
use crate::tracker::TrackFile;
use crate::types::FrameAnnotations;
use ndarray::Array2;
use serde::Serialize;
use std::collections::HashMap;

const BIG_COST: f64 = 1e9;

/// Detections per frame: `(identity, box)` lists indexed by frame.
pub type FrameDets = Vec<Vec<(u64, BoundingBox)>>;

pub fn frames_from_trackfile(tf: &TrackFile, n_frames: usize) -> FrameDets {
    let mut out = vec![Vec::new(); n_frames];
    for r in &tf.rows {
        if r.frame_index < n_frames {
            out[r.frame_index].push((r.track_id, r.box_));
        }
    }
    out
}

/// Ground truth as per-frame detections; only visible entries count.
pub fn frames_from_annotations(anns: &[FrameAnnotations]) -> FrameDets {
    let n = anns
        .iter()
        .map(|a| a.frame_index + 1)
        .max()
        .unwrap_or(0);
    let mut out = vec![Vec::new(); n];
    for a in anns {
        out[a.frame_index] = a.visible().map(|e| (e.track_id, e.box_)).collect();
    }
    out
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricReport {
    pub mota: f64,
    pub idf1: f64,
    pub hota: f64,
    pub det_a: f64,
    pub ass_a: f64,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub idsw: usize,
    /// `(alpha, hota_alpha)` for the 19 thresholds 0.05..=0.95.
    pub hota_curve: Vec<(f64, f64)>,
}

impl MetricReport {
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("mota = {:.6}\n", self.mota));
        s.push_str(&format!("idf1 = {:.6}\n", self.idf1));
        s.push_str(&format!("hota = {:.6}\n", self.hota));
        s.push_str(&format!("det_a = {:.6}\n", self.det_a));
        s.push_str(&format!("ass_a = {:.6}\n", self.ass_a));
        s.push_str(&format!("fp = {}\n", self.fp));
        s.push_str(&format!("fn = {}\n", self.fn_));
        s.push_str(&format!("idsw = {}\n", self.idsw));
        s
    }
}

/// Min-cost matching between one frame's ground truth and predictions
/// where only pairs with `iou >= thresh` are eligible. Returns index pairs.
fn frame_matching(
    gts: &[(u64, BoundingBox)],
    preds: &[(u64, BoundingBox)],
    cost_of: impl Fn(usize, usize) -> Option<f64>,
) -> Vec<(usize, usize)> {
    if gts.is_empty() || preds.is_empty() {
        return vec![];
    }
    let cost = Array2::from_shape_fn((gts.len(), preds.len()), |(g, p)| {
        cost_of(g, p).unwrap_or(BIG_COST)
    });
    solve_min_cost(&cost)
        .expect("finite costs")
        .pairs
        .into_iter()
        .filter(|&(g, p)| cost[[g, p]] < BIG_COST / 2.0)
        .collect()
}

/// CLEAR metrics with the standard carry-over rule: a ground-truth object
/// keeps its previous frame's pairing whenever that pair still overlaps at
/// the threshold; remaining detections are matched by maximum IoU.
pub fn clear_metrics(
    pred: &FrameDets,
    gt: &FrameDets,
    iou_thresh: f64,
) -> (f64, usize, usize, usize) {
    let n_frames = pred.len().max(gt.len());
    let empty: Vec<(u64, BoundingBox)> = vec![];
    let mut last_match: HashMap<u64, u64> = HashMap::new();
    let (mut fp, mut fn_, mut idsw, mut gt_total) = (0usize, 0usize, 0usize, 0usize);

    for t in 0..n_frames {
        let gts = gt.get(t).unwrap_or(&empty);
        let preds = pred.get(t).unwrap_or(&empty);
        gt_total += gts.len();

        let mut gt_used = vec![false; gts.len()];
        let mut pred_used = vec![false; preds.len()];
        let mut matches: Vec<(usize, usize)> = Vec::new();

        // Carry-over pass, in gt-id order for deterministic ties.
        let mut order: Vec<usize> = (0..gts.len()).collect();
        order.sort_by_key(|&g| gts[g].0);
        for g in order {
            let (gid, gbox) = gts[g];
            if let Some(&pid) = last_match.get(&gid) {
                if let Some(p) = preds.iter().position(|&(id, _)| id == pid) {
                    if !pred_used[p] && box_iou(&gbox, &preds[p].1) >= iou_thresh {
                        matches.push((g, p));
                        gt_used[g] = true;
                        pred_used[p] = true;
                    }
                }
            }
        }

        // Hungarian over the rest, maximizing IoU.
        let free_g: Vec<usize> = (0..gts.len()).filter(|&g| !gt_used[g]).collect();
        let free_p: Vec<usize> = (0..preds.len()).filter(|&p| !pred_used[p]).collect();
        if !free_g.is_empty() && !free_p.is_empty() {
            let sub = frame_matching(
                &free_g.iter().map(|&g| gts[g]).collect::<Vec<_>>(),
                &free_p.iter().map(|&p| preds[p]).collect::<Vec<_>>(),
                |gi, pi| {
                    let iou = box_iou(&gts[free_g[gi]].1, &preds[free_p[pi]].1);
                    (iou >= iou_thresh).then_some(1.0 - iou)
                },
            );
            for (gi, pi) in sub {
                matches.push((free_g[gi], free_p[pi]));
                gt_used[free_g[gi]] = true;
                pred_used[free_p[pi]] = true;
            }
        }

        for &(g, p) in &matches {
            let gid = gts[g].0;
            let pid = preds[p].0;
            if let Some(&prev) = last_match.get(&gid) {
                if prev != pid {
                    idsw += 1;
                }
            }
            last_match.insert(gid, pid);
        }
        fp += pred_used.iter().filter(|&&u| !u).count();
        fn_ += gt_used.iter().filter(|&&u| !u).count();
    }

    let mota = if gt_total > 0 {
        1.0 - (fp + fn_ + idsw) as f64 / gt_total as f64
    } else if fp + idsw == 0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    (mota, fp, fn_, idsw)
}

/// Per-trajectory-pair overlap counts: frames where both identities are
/// present with IoU at least `thresh`.
fn overlap_counts(
    pred: &FrameDets,
    gt: &FrameDets,
    thresh: f64,
) -> (Vec<u64>, Vec<u64>, HashMap<(u64, u64), usize>) {
    let mut gt_ids: Vec<u64> = gt.iter().flatten().map(|&(id, _)| id).collect();
    gt_ids.sort_unstable();
    gt_ids.dedup();
    let mut pred_ids: Vec<u64> = pred.iter().flatten().map(|&(id, _)| id).collect();
    pred_ids.sort_unstable();
    pred_ids.dedup();

    let mut counts: HashMap<(u64, u64), usize> = HashMap::new();
    let n_frames = pred.len().max(gt.len());
    let empty: Vec<(u64, BoundingBox)> = vec![];
    for t in 0..n_frames {
        for &(gid, gbox) in gt.get(t).unwrap_or(&empty) {
            for &(pid, pbox) in pred.get(t).unwrap_or(&empty) {
                if box_iou(&gbox, &pbox) >= thresh {
                    *counts.entry((gid, pid)).or_insert(0) += 1;
                }
            }
        }
    }
    (gt_ids, pred_ids, counts)
}

/// IDF1: global bijection between trajectories maximizing
/// identity-consistent detections; `2*IDTP / (gt_dets + pred_dets)`.
pub fn idf1(pred: &FrameDets, gt: &FrameDets, iou_thresh: f64) -> f64 {
    let gt_dets: usize = gt.iter().map(|f| f.len()).sum();
    let pred_dets: usize = pred.iter().map(|f| f.len()).sum();
    if gt_dets + pred_dets == 0 {
        return 1.0;
    }
    let (gt_ids, pred_ids, counts) = overlap_counts(pred, gt, iou_thresh);
    if gt_ids.is_empty() || pred_ids.is_empty() {
        return 0.0;
    }
    // Maximize total overlap; unmatched trajectories contribute zero, so a
    // square matrix padded with zero gain works.
    let n = gt_ids.len().max(pred_ids.len());
    let cost = Array2::from_shape_fn((n, n), |(g, p)| {
        if g < gt_ids.len() && p < pred_ids.len() {
            -(*counts.get(&(gt_ids[g], pred_ids[p])).unwrap_or(&0) as f64)
        } else {
            0.0
        }
    });
    let asg = solve_min_cost(&cost).expect("finite costs");
    let idtp: usize = asg
        .pairs
        .iter()
        .filter(|&&(g, p)| g < gt_ids.len() && p < pred_ids.len())
        .map(|&(g, p)| *counts.get(&(gt_ids[g], pred_ids[p])).unwrap_or(&0))
        .sum();
    2.0 * idtp as f64 / (gt_dets + pred_dets) as f64
}

/// HOTA at one threshold. Per-frame matching maximizes the global
/// trajectory-alignment (Jaccard) score with IoU as tie-break, restricted
/// to pairs overlapping at the threshold.
fn hota_at(pred: &FrameDets, gt: &FrameDets, alpha: f64) -> (f64, f64, f64) {
    let gt_dets: usize = gt.iter().map(|f| f.len()).sum();
    let pred_dets: usize = pred.iter().map(|f| f.len()).sum();
    if gt_dets == 0 && pred_dets == 0 {
        return (1.0, 1.0, 1.0);
    }
    let (_, _, potential) = overlap_counts(pred, gt, alpha);
    let mut gt_count: HashMap<u64, usize> = HashMap::new();
    for f in gt {
        for &(id, _) in f {
            *gt_count.entry(id).or_insert(0) += 1;
        }
    }
    let mut pred_count: HashMap<u64, usize> = HashMap::new();
    for f in pred {
        for &(id, _) in f {
            *pred_count.entry(id).or_insert(0) += 1;
        }
    }
    let global_alignment = |gid: u64, pid: u64| -> f64 {
        let pm = *potential.get(&(gid, pid)).unwrap_or(&0) as f64;
        let denom = gt_count[&gid] as f64 + pred_count[&pid] as f64 - pm;
        pm / denom
    };

    let n_frames = pred.len().max(gt.len());
    let empty: Vec<(u64, BoundingBox)> = vec![];
    let mut final_matches: HashMap<(u64, u64), usize> = HashMap::new();
    let mut tp = 0usize;
    for t in 0..n_frames {
        let gts = gt.get(t).unwrap_or(&empty);
        let preds = pred.get(t).unwrap_or(&empty);
        let pairs = frame_matching(gts, preds, |g, p| {
            let iou = box_iou(&gts[g].1, &preds[p].1);
            (iou >= alpha).then(|| -(global_alignment(gts[g].0, preds[p].0) * 1000.0 + iou))
        });
        for (g, p) in pairs {
            *final_matches.entry((gts[g].0, preds[p].0)).or_insert(0) += 1;
            tp += 1;
        }
    }

    let fn_ = gt_dets - tp;
    let fp = pred_dets - tp;
    let det_a = tp as f64 / (tp + fn_ + fp) as f64;
    if tp == 0 {
        return (0.0, det_a, 0.0);
    }
    let mut ass_sum = 0.0;
    for (&(gid, pid), &tpa) in &final_matches {
        let fna = gt_count[&gid] - tpa;
        let fpa = pred_count[&pid] - tpa;
        let a = tpa as f64 / (tpa + fna + fpa) as f64;
        ass_sum += a * tpa as f64;
    }
    let ass_a = ass_sum / tp as f64;
    ((det_a * ass_a).sqrt(), det_a, ass_a)
}

/// The 19 localization thresholds 0.05, 0.10, ..., 0.95.
pub fn hota_alphas() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

/// HOTA averaged over the threshold curve; also returns mean DetA, mean
/// AssA and the per-alpha curve.
pub fn hota(pred: &FrameDets, gt: &FrameDets) -> (f64, f64, f64, Vec<(f64, f64)>) {
    let alphas = hota_alphas();
    let mut curve = Vec::with_capacity(alphas.len());
    let (mut h_sum, mut d_sum, mut a_sum) = (0.0, 0.0, 0.0);
    for &alpha in &alphas {
        let (h, d, a) = hota_at(pred, gt, alpha);
        curve.push((alpha, h));
        h_sum += h;
        d_sum += d;
        a_sum += a;
    }
    let n = alphas.len() as f64;
    (h_sum / n, d_sum / n, a_sum / n, curve)
}

/// Full report over one `(prediction, ground truth)` pair.
pub fn evaluate(pred: &TrackFile, gt: &[FrameAnnotations], iou_thresh: f64) -> MetricReport {
    let gt_frames = frames_from_annotations(gt);
    let n_frames = gt_frames
        .len()
        .max(pred.rows.iter().map(|r| r.frame_index + 1).max().unwrap_or(0));
    let pred_frames = frames_from_trackfile(pred, n_frames);
    let (mota, fp, fn_, idsw) = clear_metrics(&pred_frames, &gt_frames, iou_thresh);
    let idf1_v = idf1(&pred_frames, &gt_frames, iou_thresh);
    let (hota_v, det_a, ass_a, curve) = hota(&pred_frames, &gt_frames);
    MetricReport {
        mota,
        idf1: idf1_v,
        hota: hota_v,
        det_a,
        ass_a,
        fp,
        fn_,
        idsw,
        hota_curve: curve,
    }
}

/// Throughput at a downsampling interval: measured FPS times the interval.
pub fn equivalent_fps(fps: f64, n: usize) -> f64 {
    fps * n as f64
}
