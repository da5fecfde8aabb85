//! Attention masks: temporal blocking for decoder self-attention and
//! intra-track-only attention for the refinement module.
//!
//! `allow[i][j] = true` means row-query `i` may attend to column-query `j`.
//! The two masks are exact complements on pairs of distinct tracking rows:
//! same-track pairs are blocked in the decoder and allowed in the
//! refinement module, cross-track pairs the other way around.

use crate::memory::{GroupId, QueryBatch};
use ndarray::Array2;

/// Boolean pairwise allow/block matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub allow: Array2<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.allow.nrows()
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.size();
        (0..n).all(|i| (0..n).all(|j| self.allow[[i, j]] == self.allow[[j, i]]))
    }

    pub fn is_reflexive(&self) -> bool {
        (0..self.size()).all(|i| self.allow[[i, i]])
    }
}

/// Self-attention mask for the decoder: block attention between distinct
/// queries of the same track; everything else (tracking-detection,
/// cross-track, detection-detection, self) stays allowed.
pub fn decoder_mask(batch: &QueryBatch) -> AttentionMask {
    let groups: Vec<GroupId> = batch.rows.iter().map(|r| r.group).collect();
    decoder_mask_from_groups(&groups)
}

pub fn decoder_mask_from_groups(groups: &[GroupId]) -> AttentionMask {
    let n = groups.len();
    let allow = Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            return true;
        }
        match (groups[i], groups[j]) {
            (GroupId::Track(a), GroupId::Track(b)) => a != b,
            _ => true,
        }
    });
    AttentionMask { allow }
}

/// Refinement-module mask over tracking rows only: attention is allowed
/// exactly within a track.
pub fn irm_mask(track_groups: &[GroupId]) -> AttentionMask {
    debug_assert!(
        track_groups.iter().all(|g| matches!(g, GroupId::Track(_))),
        "irm_mask applies to tracking rows only"
    );
    let n = track_groups.len();
    let allow = Array2::from_shape_fn((n, n), |(i, j)| track_groups[i] == track_groups[j]);
    AttentionMask { allow }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(id: u64) -> GroupId {
        GroupId::Track(id)
    }

    fn d(i: u32) -> GroupId {
        GroupId::Detection(i)
    }

    #[test]
    fn one_track_three_rows_two_detections() {
        let groups = vec![t(7), t(7), t(7), d(0), d(1)];
        let m = decoder_mask_from_groups(&groups);
        let mut blocked = 0;
        for i in 0..5 {
            for j in 0..5 {
                if !m.allow[[i, j]] {
                    blocked += 1;
                    assert!(i < 3 && j < 3 && i != j);
                }
            }
        }
        // Exactly the six off-diagonal pairs among rows 0..3.
        assert_eq!(blocked, 6);
    }

    #[test]
    fn detection_only_batch_is_all_true() {
        let groups = vec![d(0), d(1), d(2)];
        let m = decoder_mask_from_groups(&groups);
        assert!(m.allow.iter().all(|&b| b));
    }

    #[test]
    fn two_tracks_two_rows_each() {
        let groups = vec![t(1), t(1), t(2), t(2)];
        let m = decoder_mask_from_groups(&groups);
        let expected_false = [(0, 1), (1, 0), (2, 3), (3, 2)];
        for i in 0..4 {
            for j in 0..4 {
                let expect = !expected_false.contains(&(i, j));
                assert_eq!(m.allow[[i, j]], expect, "({i},{j})");
            }
        }
    }

    #[test]
    fn irm_single_track_all_true() {
        let m = irm_mask(&[t(3), t(3), t(3)]);
        assert!(m.allow.iter().all(|&b| b));
    }

    #[test]
    fn irm_two_tracks_block_diagonal() {
        let m = irm_mask(&[t(1), t(1), t(2)]);
        let expect = [
            [true, true, false],
            [true, true, false],
            [false, false, true],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.allow[[i, j]], expect[i][j]);
            }
        }
    }

    #[test]
    fn irm_singletons_identity() {
        let m = irm_mask(&[t(1), t(2), t(3), t(4)]);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.allow[[i, j]], i == j);
            }
        }
    }

    /// Random batches as group-id lists: a few tracks with bank sizes
    /// 1..=3 followed by detection rows.
    fn arb_groups() -> impl Strategy<Value = (Vec<GroupId>, usize)> {
        (
            proptest::collection::vec(1usize..=3, 0..5),
            0usize..6,
        )
            .prop_map(|(banks, dets)| {
                let mut groups = Vec::new();
                for (tid, bank) in banks.iter().enumerate() {
                    for _ in 0..*bank {
                        groups.push(t(tid as u64));
                    }
                }
                let n_track = groups.len();
                for i in 0..dets {
                    groups.push(d(i as u32));
                }
                (groups, n_track)
            })
    }

    proptest! {
        #[test]
        fn complementarity_symmetry_reflexivity((groups, n_track) in arb_groups()) {
            let dec = decoder_mask_from_groups(&groups);
            let irm = irm_mask(&groups[..n_track]);
            prop_assert!(dec.is_symmetric() && dec.is_reflexive());
            prop_assert!(irm.is_symmetric() && irm.is_reflexive());
            for i in 0..n_track {
                for j in 0..n_track {
                    if i != j {
                        prop_assert_eq!(dec.allow[[i, j]], !irm.allow[[i, j]]);
                    }
                }
            }
        }

        #[test]
        fn permutation_conjugates_mask((groups, _n) in arb_groups(), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..groups.len()).collect();
            perm.shuffle(&mut rng);
            let permuted: Vec<GroupId> = perm.iter().map(|&i| groups[i]).collect();
            let m = decoder_mask_from_groups(&groups);
            let mp = decoder_mask_from_groups(&permuted);
            for i in 0..groups.len() {
                for j in 0..groups.len() {
                    prop_assert_eq!(mp.allow[[i, j]], m.allow[[perm[i], perm[j]]]);
                }
            }
        }
    }
}
