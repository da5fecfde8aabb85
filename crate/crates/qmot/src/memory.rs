//! Per-track historical feature banks and per-frame query construction.
//!
//! Each live track keeps up to `n_max` content features from past frames.
//! Every frame, each feature is paired with the track's latest predicted
//! anchor to form that track's collaborative queries; detection queries are
//! appended after all tracking rows.

use crate::geom::BoundingBox;
use crate::types::Prediction;
use crate::{Error, Result};
use ndarray::{Array1, Array2};

pub type TrackId = u64;

/// Row owner inside a [`QueryBatch`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupId {
    Track(TrackId),
    Detection(u32),
}

impl GroupId {
    pub fn is_track(&self) -> bool {
        matches!(self, GroupId::Track(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackState {
    Active,
    Lost,
}

/// Anything that can sit in a feature bank. Inference stores plain vectors;
/// training stores tape handles so gradients flow across frames.
pub trait Feature: Clone {
    fn dim(&self) -> usize;
}

impl Feature for Array1<f64> {
    fn dim(&self) -> usize {
        self.len()
    }
}

impl Feature for crate::autodiff::Var {
    fn dim(&self) -> usize {
        self.cols
    }
}

/// One tracked object: identity, bounded feature history (newest first),
/// latest anchor and lifecycle state.
#[derive(Debug, Clone)]
pub struct TrackRecord<F: Feature = Array1<f64>> {
    pub track_id: TrackId,
    /// `(frame_index, feature)`, newest first, length in `1..=n_max`.
    pub feature_bank: Vec<(usize, F)>,
    pub latest_anchor: BoundingBox,
    pub state: TrackState,
    /// Frames since last confirmation; zero iff active.
    pub lost_age: usize,
    /// Class frozen at birth.
    pub class_id: usize,
}

impl<F: Feature> TrackRecord<F> {
    pub fn new(
        track_id: TrackId,
        feature: F,
        frame_index: usize,
        anchor: BoundingBox,
        class_id: usize,
    ) -> Self {
        TrackRecord {
            track_id,
            feature_bank: vec![(frame_index, feature)],
            latest_anchor: anchor,
            state: TrackState::Active,
            lost_age: 0,
            class_id,
        }
    }

    pub fn bank_len(&self) -> usize {
        self.feature_bank.len()
    }

    /// Push the newest feature, evicting the oldest beyond `n_max`.
    pub fn append_feature(&mut self, feature: F, frame_index: usize, n_max: usize) -> Result<()> {
        if let Some((_, first)) = self.feature_bank.first() {
            if first.dim() != feature.dim() {
                return Err(Error::Shape(format!(
                    "feature dim {} does not match bank dim {}",
                    feature.dim(),
                    first.dim()
                )));
            }
        }
        self.feature_bank.insert(0, (frame_index, feature));
        self.feature_bank.truncate(n_max);
        Ok(())
    }
}

/// Per-row metadata of a query batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowMeta {
    pub group: GroupId,
    /// True for the newest feature of each track and for detection rows.
    pub is_latest: bool,
    /// Frames since the feature's source frame.
    pub age: usize,
}

/// Combined tracking + detection queries for one frame.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    /// `n_total x d` content features; tracking rows first.
    pub content: Array2<f64>,
    pub anchors: Vec<BoundingBox>,
    pub rows: Vec<RowMeta>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_tracking_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.group.is_track()).count()
    }
}

/// Row layout shared by inference and training: each track contributes its
/// whole bank (newest first) under the track's latest anchor, then the
/// detection queries follow.
pub fn batch_rows<F: Feature>(
    tracks: &[TrackRecord<F>],
    n_det: usize,
    frame_index: usize,
) -> Vec<RowMeta> {
    let mut rows = Vec::new();
    for track in tracks {
        assert!(!track.feature_bank.is_empty(), "track bank must be non-empty");
        for (pos, (src_frame, _)) in track.feature_bank.iter().enumerate() {
            rows.push(RowMeta {
                group: GroupId::Track(track.track_id),
                is_latest: pos == 0,
                age: frame_index.saturating_sub(*src_frame),
            });
        }
    }
    for i in 0..n_det {
        rows.push(RowMeta {
            group: GroupId::Detection(i as u32),
            is_latest: true,
            age: 0,
        });
    }
    rows
}

/// Assemble the combined query batch for one frame.
pub fn build_query_batch(
    tracks: &[TrackRecord],
    det_content: &Array2<f64>,
    det_anchors: &[BoundingBox],
    frame_index: usize,
) -> QueryBatch {
    assert_eq!(det_content.nrows(), det_anchors.len());
    let d = det_content.ncols();
    let rows = batch_rows(tracks, det_anchors.len(), frame_index);
    let n_track: usize = tracks.iter().map(|t| t.bank_len()).sum();

    let mut content = Array2::zeros((n_track + det_anchors.len(), d));
    let mut anchors = Vec::with_capacity(rows.len());
    let mut r = 0;
    for track in tracks {
        for (_, feat) in &track.feature_bank {
            assert_eq!(feat.len(), d, "track feature dim mismatch");
            content.row_mut(r).assign(feat);
            anchors.push(track.latest_anchor);
            r += 1;
        }
    }
    for i in 0..det_anchors.len() {
        content.row_mut(r).assign(&det_content.row(i));
        anchors.push(det_anchors[i]);
        r += 1;
    }
    QueryBatch {
        content,
        anchors,
        rows,
    }
}

/// Outcome of a lifecycle update.
#[derive(Debug, Default)]
pub struct UpdateOutcome {
    pub born: Vec<TrackId>,
    pub died: Vec<TrackId>,
}

/// Per-frame lifecycle update driven by scores (the inference protocol).
///
/// A live track whose latest-row prediction scores at least `sigma` is
/// confirmed: its predicted box becomes the new anchor and its feature is
/// appended. Below the threshold the track goes lost with a frozen bank and
/// anchor; past `n_keep` lost frames it is removed. Each new detection at
/// or above `sigma` spawns a fresh track.
#[allow(clippy::too_many_arguments)]
pub fn update_tracks(
    tracks: &mut Vec<TrackRecord>,
    frame_outputs: &[(TrackId, Prediction, Array1<f64>)],
    new_detections: &[(Prediction, Array1<f64>)],
    frame_index: usize,
    sigma: f64,
    n_keep: usize,
    n_max: usize,
    next_id: &mut TrackId,
) -> Result<UpdateOutcome> {
    let mut outcome = UpdateOutcome::default();
    {
        let mut seen = std::collections::HashSet::new();
        for (id, _, _) in frame_outputs {
            if !seen.insert(*id) {
                return Err(Error::Invalid(format!("duplicate track id {id} in update")));
            }
        }
    }
    assert_eq!(
        frame_outputs.len(),
        tracks.len(),
        "one output per live track expected"
    );

    for (id, pred, feature) in frame_outputs {
        let track = tracks
            .iter_mut()
            .find(|t| t.track_id == *id)
            .ok_or_else(|| Error::Invalid(format!("unknown track id {id}")))?;
        if pred.score() >= sigma {
            track.state = TrackState::Active;
            track.lost_age = 0;
            track.latest_anchor = pred.box_;
            track.append_feature(feature.clone(), frame_index, n_max)?;
        } else {
            track.state = TrackState::Lost;
            track.lost_age += 1;
        }
    }

    tracks.retain(|t| {
        let keep = t.lost_age <= n_keep;
        if !keep {
            outcome.died.push(t.track_id);
        }
        keep
    });

    for (pred, feature) in new_detections {
        if pred.score() >= sigma {
            let id = *next_id;
            *next_id += 1;
            tracks.push(TrackRecord::new(
                id,
                feature.clone(),
                frame_index,
                pred.box_,
                pred.best_class(),
            ));
            outcome.born.push(id);
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn anchor() -> BoundingBox {
        BoundingBox::new(0.5, 0.5, 0.2, 0.2).unwrap()
    }

    fn feat(v: f64) -> Array1<f64> {
        array![v, v + 1.0]
    }

    fn pred(score: f64) -> Prediction {
        Prediction::new(vec![1.0 - score, score], anchor()).unwrap()
    }

    #[test]
    fn append_to_empty_bank() {
        let mut rec = TrackRecord::new(1, feat(0.0), 7, anchor(), 1);
        rec.feature_bank.clear();
        rec.append_feature(feat(1.0), 7, 3).unwrap();
        assert_eq!(rec.feature_bank.len(), 1);
        assert_eq!(rec.feature_bank[0].0, 7);
    }

    #[test]
    fn bank_evicts_oldest_at_n_max() {
        let mut rec = TrackRecord::new(1, feat(0.0), 0, anchor(), 1);
        for f in 1..=2 {
            rec.append_feature(feat(f as f64), f, 3).unwrap();
        }
        assert_eq!(rec.bank_len(), 3);
        rec.append_feature(feat(3.0), 3, 3).unwrap();
        assert_eq!(rec.bank_len(), 3);
        let frames: Vec<usize> = rec.feature_bank.iter().map(|(f, _)| *f).collect();
        assert_eq!(frames, vec![3, 2, 1]);
    }

    #[test]
    fn bank_holds_newest_two_with_n_max_two() {
        let mut rec = TrackRecord::new(1, feat(1.0), 1, anchor(), 1);
        for f in 2..=4 {
            rec.append_feature(feat(f as f64), f, 2).unwrap();
        }
        let frames: Vec<usize> = rec.feature_bank.iter().map(|(f, _)| *f).collect();
        assert_eq!(frames, vec![4, 3]);
    }

    #[test]
    fn append_rejects_dim_mismatch() {
        let mut rec = TrackRecord::new(1, feat(0.0), 0, anchor(), 1);
        assert!(rec.append_feature(array![1.0, 2.0, 3.0], 1, 3).is_err());
    }

    #[test]
    fn batch_one_track_two_detections() {
        let mut rec = TrackRecord::new(9, feat(0.0), 0, anchor(), 1);
        rec.append_feature(feat(1.0), 1, 3).unwrap();
        rec.append_feature(feat(2.0), 2, 3).unwrap();
        let det = Array2::zeros((2, 2));
        let det_anchors = vec![anchor(), anchor()];
        let batch = build_query_batch(&[rec], &det, &det_anchors, 3);
        assert_eq!(batch.len(), 5);
        assert!(batch.rows[0].is_latest);
        assert!(!batch.rows[1].is_latest && !batch.rows[2].is_latest);
        assert_eq!(batch.anchors[0], batch.anchors[1]);
        assert_eq!(batch.anchors[1], batch.anchors[2]);
        assert_eq!(batch.rows[0].age, 1);
        assert_eq!(batch.rows[2].age, 3);
    }

    #[test]
    fn batch_no_tracks_detection_only() {
        let det = Array2::zeros((4, 2));
        let det_anchors = vec![anchor(); 4];
        let batch = build_query_batch(&[], &det, &det_anchors, 0);
        assert_eq!(batch.len(), 4);
        assert!(batch.rows.iter().all(|r| !r.group.is_track()));
    }

    #[test]
    fn batch_group_layout_two_tracks() {
        let mut a = TrackRecord::new(1, feat(0.0), 0, anchor(), 1);
        a.append_feature(feat(1.0), 1, 3).unwrap();
        let b = TrackRecord::new(2, feat(5.0), 1, anchor(), 1);
        let det = Array2::zeros((1, 2));
        let batch = build_query_batch(&[a, b], &det, &[anchor()], 2);
        let groups: Vec<GroupId> = batch.rows.iter().map(|r| r.group).collect();
        assert_eq!(
            groups,
            vec![
                GroupId::Track(1),
                GroupId::Track(1),
                GroupId::Track(2),
                GroupId::Detection(0)
            ]
        );
        let latest_count = batch
            .rows
            .iter()
            .filter(|r| r.group.is_track() && r.is_latest)
            .count();
        assert_eq!(latest_count, 2);
    }

    #[test]
    fn batch_permutation_equivariant_in_track_order() {
        let mut a = TrackRecord::new(1, feat(0.0), 0, anchor(), 1);
        a.append_feature(feat(1.0), 1, 3).unwrap();
        let b = TrackRecord::new(2, feat(5.0), 1, anchor(), 1);
        let det = Array2::zeros((1, 2));
        let fwd = build_query_batch(&[a.clone(), b.clone()], &det, &[anchor()], 2);
        let rev = build_query_batch(&[b, a], &det, &[anchor()], 2);
        // Track b's single row leads in rev; track a's block follows.
        assert_eq!(rev.rows[0].group, GroupId::Track(2));
        assert_eq!(rev.rows[1].group, GroupId::Track(1));
        assert_eq!(rev.content.row(0), fwd.content.row(2));
        assert_eq!(rev.content.row(1), fwd.content.row(0));
        assert_eq!(rev.content.row(2), fwd.content.row(1));
    }

    #[test]
    fn confirmed_track_grows_bank() {
        let mut tracks = vec![TrackRecord::new(1, feat(0.0), 0, anchor(), 1)];
        let mut next = 2;
        let out = update_tracks(
            &mut tracks,
            &[(1, pred(0.7), feat(1.0))],
            &[],
            1,
            0.6,
            5,
            3,
            &mut next,
        )
        .unwrap();
        assert!(out.born.is_empty() && out.died.is_empty());
        assert_eq!(tracks[0].state, TrackState::Active);
        assert_eq!(tracks[0].bank_len(), 2);
    }

    #[test]
    fn lost_past_patience_removed() {
        let mut tracks = vec![TrackRecord::new(1, feat(0.0), 0, anchor(), 1)];
        tracks[0].state = TrackState::Lost;
        tracks[0].lost_age = 5;
        let mut next = 2;
        let out = update_tracks(
            &mut tracks,
            &[(1, pred(0.1), feat(1.0))],
            &[],
            6,
            0.6,
            5,
            3,
            &mut next,
        )
        .unwrap();
        assert_eq!(out.died, vec![1]);
        assert!(tracks.is_empty());
    }

    #[test]
    fn track_survives_gap_and_reactivates() {
        let mut tracks = vec![TrackRecord::new(1, feat(0.0), 0, anchor(), 1)];
        let mut next = 2;
        let scores = [0.7, 0.3, 0.3, 0.7];
        for (i, s) in scores.iter().enumerate() {
            update_tracks(
                &mut tracks,
                &[(1, pred(*s), feat(i as f64))],
                &[],
                i + 1,
                0.6,
                5,
                3,
                &mut next,
            )
            .unwrap();
        }
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].state, TrackState::Active);
        // Bank: birth + frames 1 and 4 confirmed, capped at n_max=3; lost
        // frames contributed nothing.
        let frames: Vec<usize> = tracks[0].feature_bank.iter().map(|(f, _)| *f).collect();
        assert_eq!(frames, vec![4, 1, 0]);
    }

    #[test]
    fn births_use_sigma_and_fresh_ids() {
        let mut tracks = Vec::new();
        let mut next = 10;
        let out = update_tracks(
            &mut tracks,
            &[],
            &[(pred(0.9), feat(0.0)), (pred(0.2), feat(1.0))],
            0,
            0.6,
            5,
            3,
            &mut next,
        )
        .unwrap();
        assert_eq!(out.born, vec![10]);
        assert_eq!(tracks.len(), 1);
        assert_eq!(next, 11);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut tracks = vec![
            TrackRecord::new(1, feat(0.0), 0, anchor(), 1),
            TrackRecord::new(2, feat(0.0), 0, anchor(), 1),
        ];
        let mut next = 3;
        let res = update_tracks(
            &mut tracks,
            &[(1, pred(0.7), feat(1.0)), (1, pred(0.7), feat(1.0))],
            &[],
            1,
            0.6,
            5,
            3,
            &mut next,
        );
        assert!(res.is_err());
    }
}
