//! Bipartite assignment between predictions and ground truth.
//!
//! Two layers: a generic min-cost solver (Hungarian with potentials), and
//! the identity-first matching rule — live tracks bind to the ground-truth
//! object carrying their identity, remaining objects are cost-matched
//! against detection queries.

use crate::config::LossWeights;
use crate::geom::{generalized_iou, BoundingBox};
use crate::memory::TrackId;
use crate::types::{FrameAnnotations, Prediction};
use crate::{Error, Result};
use ndarray::Array2;
use std::collections::BTreeMap;

/// A partition of prediction rows and ground-truth indices into matched
/// pairs and unmatched leftovers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    /// `(prediction row, ground-truth index)`.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

impl Assignment {
    /// Ground-truth index matched to a prediction row, if any.
    pub fn gt_of(&self, pred_row: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|(p, _)| *p == pred_row)
            .map(|(_, g)| *g)
    }

    /// Check the partition invariants against the given sizes.
    pub fn is_valid_partition(&self, n_preds: usize, n_gt: usize) -> bool {
        let mut pred_seen = vec![false; n_preds];
        let mut gt_seen = vec![false; n_gt];
        for (p, g) in &self.pairs {
            if *p >= n_preds || *g >= n_gt || pred_seen[*p] || gt_seen[*g] {
                return false;
            }
            pred_seen[*p] = true;
            gt_seen[*g] = true;
        }
        for p in &self.unmatched_predictions {
            if *p >= n_preds || pred_seen[*p] {
                return false;
            }
            pred_seen[*p] = true;
        }
        for g in &self.unmatched_gt {
            if *g >= n_gt || gt_seen[*g] {
                return false;
            }
            gt_seen[*g] = true;
        }
        pred_seen.iter().all(|&b| b) && gt_seen.iter().all(|&b| b)
    }
}

/// Hungarian algorithm with row/column potentials; requires `rows <= cols`.
/// Columns are scanned in increasing order with strict improvement, so ties
/// resolve toward the lowest column index.
fn hungarian_rows_le_cols(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let m = cost.ncols();
    debug_assert!(n <= m);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    // p[j] = row matched to column j, 1-based; 0 = free.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut ans = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] > 0 {
            ans[p[j] - 1] = j - 1;
        }
    }
    ans
}

/// Globally optimal min-cost assignment of size `min(R, C)`.
pub fn solve_min_cost(cost: &Array2<f64>) -> Result<Assignment> {
    if cost.iter().any(|c| c.is_nan()) {
        return Err(Error::Invalid("NaN in assignment cost matrix".into()));
    }
    let (r, c) = cost.dim();
    if r == 0 || c == 0 {
        return Ok(Assignment {
            pairs: vec![],
            unmatched_predictions: (0..r).collect(),
            unmatched_gt: (0..c).collect(),
        });
    }

    let pairs: Vec<(usize, usize)> = if r <= c {
        hungarian_rows_le_cols(cost)
            .into_iter()
            .enumerate()
            .map(|(i, j)| (i, j))
            .collect()
    } else {
        let t = cost.t().to_owned();
        hungarian_rows_le_cols(&t)
            .into_iter()
            .enumerate()
            .map(|(j, i)| (i, j))
            .collect()
    };

    let mut pairs = pairs;
    pairs.sort_unstable();
    let matched_r: std::collections::HashSet<usize> = pairs.iter().map(|(i, _)| *i).collect();
    let matched_c: std::collections::HashSet<usize> = pairs.iter().map(|(_, j)| *j).collect();
    Ok(Assignment {
        pairs,
        unmatched_predictions: (0..r).filter(|i| !matched_r.contains(i)).collect(),
        unmatched_gt: (0..c).filter(|j| !matched_c.contains(j)).collect(),
    })
}

fn l1_distance(a: &BoundingBox, b: &BoundingBox) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// Matching cost of a detection query against a ground-truth object.
pub fn det_match_cost(pred: &Prediction, gt_class: usize, gt_box: &BoundingBox, w: &LossWeights) -> f64 {
    let p_class = pred.class_probs.get(gt_class).copied().unwrap_or(0.0);
    w.lambda_cls * (-p_class)
        + w.lambda_l1 * l1_distance(&pred.box_, gt_box)
        + w.lambda_giou * (-generalized_iou(&pred.box_, gt_box))
}

/// Identity-first matching: tracks bind to the ground-truth object with
/// their id; remaining visible objects are Hungarian-matched against
/// detection queries. Prediction rows are the tracks in ascending id order
/// followed by the detection queries.
pub fn build_matching(
    track_latest: &BTreeMap<TrackId, Prediction>,
    det_preds: &[Prediction],
    gt: &FrameAnnotations,
    weights: &LossWeights,
) -> Assignment {
    let n_tracks = track_latest.len();
    let n_preds = n_tracks + det_preds.len();
    let mut pairs = Vec::new();
    let mut unmatched_predictions = Vec::new();
    let mut gt_taken = vec![false; gt.entries.len()];

    // Invisible objects are not matchable; their rows train as background.
    let visible_idx: Vec<usize> = gt
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.visible)
        .map(|(i, _)| i)
        .collect();

    for (row, (id, _)) in track_latest.iter().enumerate() {
        match visible_idx
            .iter()
            .find(|&&g| gt.entries[g].track_id == *id)
        {
            Some(&g) => {
                pairs.push((row, g));
                gt_taken[g] = true;
            }
            None => unmatched_predictions.push(row),
        }
    }

    let free_gt: Vec<usize> = visible_idx
        .iter()
        .copied()
        .filter(|&g| !gt_taken[g])
        .collect();

    if !det_preds.is_empty() && !free_gt.is_empty() {
        let cost = Array2::from_shape_fn((det_preds.len(), free_gt.len()), |(i, j)| {
            let e = &gt.entries[free_gt[j]];
            det_match_cost(&det_preds[i], e.class_id, &e.box_, weights)
        });
        let sub = solve_min_cost(&cost).expect("finite matching costs");
        for (i, j) in sub.pairs {
            pairs.push((n_tracks + i, free_gt[j]));
            gt_taken[free_gt[j]] = true;
        }
        for i in sub.unmatched_predictions {
            unmatched_predictions.push(n_tracks + i);
        }
    } else {
        unmatched_predictions.extend((0..det_preds.len()).map(|i| n_tracks + i));
    }

    let unmatched_gt = (0..gt.entries.len()).filter(|&g| !gt_taken[g]).collect();
    let mut asg = Assignment {
        pairs,
        unmatched_predictions,
        unmatched_gt,
    };
    asg.pairs.sort_unstable();
    asg.unmatched_predictions.sort_unstable();
    debug_assert!(asg.is_valid_partition(n_preds, gt.entries.len()));
    asg
}
