//! Clip training: the supervised per-frame loop with identity-driven track
//! propagation, the clip loss graph (gradients flow through historical
//! features across frames), AdamW with global gradient clipping, and the
//! epoch loop with deterministic clip sampling.

use crate::assignment::build_matching;
use crate::autodiff::{Tape, Var};
use crate::config::RunConfig;
use crate::decoder::{forward_frame, row_prediction};
use crate::encoder::encode_frame;
use crate::irm::IrmHooks;
use crate::losses::{
    bipartite_loss_graph, row_targets, toc_loss_graph, LossBreakdown, RowTarget,
};
use crate::memory::{batch_rows, TrackRecord};
use crate::nn::{ParamBinding, ParamStore};
use crate::types::{Dataset, Frame, FrameAnnotations, Prediction};
use crate::Result;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::rc::Rc;

/// Binary cross-entropy pushing the proposal scorer toward cells that
/// contain a visible object center; positives are upweighted against the
/// empty majority.
fn proposal_score_loss(
    tape: &mut Tape,
    ff: &crate::encoder::FrameFeatures,
    gt: &FrameAnnotations,
) -> Var {
    let (gw, gh) = ff.grid;
    let mut target = Array2::zeros((gw * gh, 1));
    for e in gt.visible() {
        let gx = ((e.box_.cx * gw as f64) as usize).min(gw - 1);
        let gy = ((e.box_.cy * gh as f64) as usize).min(gh - 1);
        target[[gy * gw + gx, 0]] = 1.0;
    }
    let pos_weight = 8.0;
    let weights = target.mapv(|y| if y > 0.5 { pos_weight } else { 1.0 });
    let n = (gw * gh) as f64;

    let p = tape.sigmoid(ff.token_scores);
    let ln_p = tape.ln(p);
    let neg_p = tape.scale(p, -1.0);
    let one_minus_p = tape.add_scalar(neg_p, 1.0);
    let ln_q = tape.ln(one_minus_p);
    let y = tape.leaf(target);
    let neg_y = tape.scale(y, -1.0);
    let one_minus_y = tape.add_scalar(neg_y, 1.0);
    let pos_term = tape.mul(y, ln_p);
    let neg_term = tape.mul(one_minus_y, ln_q);
    let sum_terms = tape.add(pos_term, neg_term);
    let w = tape.leaf(weights);
    let weighted = tape.mul(sum_terms, w);
    let total = tape.sum_all(weighted);
    tape.scale(total, -1.0 / n)
}

/// Clip loss graph outputs: the scalar loss node, per-frame per-layer
/// breakdowns, and the summed proposal-scorer term (also inside `loss`).
pub struct ClipLoss {
    pub loss: Var,
    pub breakdowns: Vec<Vec<LossBreakdown>>,
    pub encoder_loss: f64,
}

/// Loss graph over one clip.
pub fn clip_loss_graph(
    tape: &mut Tape,
    pb: &ParamBinding,
    frames: &[&Frame],
    annotations: &[&FrameAnnotations],
    rc: &RunConfig,
    hooks: &IrmHooks,
) -> Result<ClipLoss> {
    assert_eq!(frames.len(), annotations.len());
    assert!(!frames.is_empty());
    let cfg = &rc.model;
    let w = &rc.loss;

    // Training memory: banks hold tape handles so gradients reach the
    // frames that produced each feature.
    let mut memory: Vec<TrackRecord<Var>> = Vec::new();

    let mut bip_totals: Vec<Var> = Vec::new();
    let mut enc_losses: Vec<Var> = Vec::new();
    let mut toc_nums: Vec<Vec<Var>> = vec![Vec::new(); cfg.num_decoders];
    let mut frame_his: Vec<usize> = Vec::new();
    let mut breakdowns: Vec<Vec<LossBreakdown>> = Vec::new();

    for (t, (frame, gt)) in frames.iter().zip(annotations).enumerate() {
        let ff = encode_frame(tape, pb, frame, cfg)?;
        enc_losses.push(proposal_score_loss(tape, &ff, gt));

        let rows = batch_rows(&memory, cfg.n_det, t);
        let mut parts: Vec<Var> = Vec::new();
        let mut anchors = Vec::with_capacity(rows.len());
        for track in &memory {
            for (_, feat) in &track.feature_bank {
                parts.push(*feat);
                anchors.push(track.latest_anchor);
            }
        }
        parts.push(ff.proposal_content);
        anchors.extend_from_slice(&ff.proposal_anchors);
        let content = tape.concat_rows(&parts);

        let outputs = forward_frame(tape, pb, content, &rows, &anchors, &ff, cfg, hooks);
        let last = outputs.last().expect("decoder stack is non-empty");

        // Batch row bookkeeping.
        let mut latest_row_of: Vec<usize> = Vec::with_capacity(memory.len());
        let mut r = 0usize;
        for track in &memory {
            latest_row_of.push(r);
            r += track.bank_len();
        }
        let n_track_rows = r;
        let historical_rows: Vec<usize> = rows
            .iter()
            .enumerate()
            .filter(|(_, m)| m.group.is_track() && !m.is_latest)
            .map(|(i, _)| i)
            .collect();

        // Matching rows: tracks in ascending-id order, then detections.
        let mut sorted_tracks: Vec<(u64, usize)> = memory
            .iter()
            .enumerate()
            .map(|(k, t)| (t.track_id, k))
            .collect();
        sorted_tracks.sort_unstable();
        let mut track_latest: BTreeMap<u64, Prediction> = BTreeMap::new();
        for &(id, k) in &sorted_tracks {
            track_latest.insert(id, row_prediction(tape, last, latest_row_of[k]));
        }
        let det_preds: Vec<Prediction> = (0..cfg.n_det)
            .map(|j| row_prediction(tape, last, n_track_rows + j))
            .collect();
        let asg = build_matching(&track_latest, &det_preds, gt, w);
        let n_matching_rows = sorted_tracks.len() + cfg.n_det;
        let targets = row_targets(&asg, gt, n_matching_rows);

        // Matching-row order -> batch-row order.
        let matching_to_batch: Vec<usize> = sorted_tracks
            .iter()
            .map(|&(_, k)| latest_row_of[k])
            .chain((0..cfg.n_det).map(|j| n_track_rows + j))
            .collect();
        let matched_track_ids: std::collections::HashSet<u64> = asg
            .pairs
            .iter()
            .filter(|(p, _)| *p < sorted_tracks.len())
            .map(|(p, _)| sorted_tracks[*p].0)
            .collect();
        let historical_targets: Vec<RowTarget> = historical_rows
            .iter()
            .map(|&row| {
                let id = match rows[row].group {
                    crate::memory::GroupId::Track(id) => id,
                    _ => unreachable!(),
                };
                if matched_track_ids.contains(&id) {
                    let g = asg
                        .pairs
                        .iter()
                        .find(|(p, _)| *p < sorted_tracks.len() && sorted_tracks[*p].0 == id)
                        .map(|(_, g)| *g)
                        .expect("matched id has a pair");
                    let e = &gt.entries[g];
                    RowTarget::Matched {
                        class_id: e.class_id,
                        box_: e.box_,
                    }
                } else {
                    RowTarget::Background
                }
            })
            .collect();
        let n_his = historical_targets
            .iter()
            .filter(|t| matches!(t, RowTarget::Matched { .. }))
            .count();
        frame_his.push(n_his);

        // Per-layer supervision with the final layer's assignment.
        let mut frame_breakdowns = Vec::with_capacity(outputs.len());
        for (l, out) in outputs.iter().enumerate() {
            let sel = Rc::new(matching_to_batch.clone());
            let probs = tape.gather_rows(out.probs, sel.clone());
            let boxes = tape.gather_rows(out.boxes, sel);
            let bip = bipartite_loss_graph(tape, probs, boxes, &targets, w);
            let total = bip.weighted_total(tape, w);
            bip_totals.push(total);

            let (toc_num, toc_count) = if historical_rows.is_empty() {
                (tape.scalar(0.0), 0)
            } else {
                let sel = Rc::new(historical_rows.clone());
                let hprobs = tape.gather_rows(out.probs, sel.clone());
                let hboxes = tape.gather_rows(out.boxes, sel);
                toc_loss_graph(tape, hprobs, hboxes, &historical_targets, w)
            };
            debug_assert!(toc_count == n_his || historical_rows.is_empty());
            toc_nums[l].push(toc_num);

            frame_breakdowns.push(LossBreakdown::new(
                tape.scalar_value(bip.class_term),
                tape.scalar_value(bip.l1_term),
                tape.scalar_value(bip.giou_term),
                tape.scalar_value(toc_num),
                n_his,
                w,
            ));
        }
        breakdowns.push(frame_breakdowns);

        // Identity-driven memory update from the final layer: matched
        // tracks append their latest-row feature and adopt the predicted
        // box as anchor; unmatched tracks age out after n_keep frames;
        // matched detection queries spawn tracks under the object's id.
        let mut to_remove: Vec<u64> = Vec::new();
        for (k, track) in memory.iter_mut().enumerate() {
            if matched_track_ids.contains(&track.track_id) {
                let row = latest_row_of[k];
                let feat = tape.slice_rows(last.content, row, 1);
                track.append_feature(feat, t, cfg.n_max)?;
                track.latest_anchor = last.anchors_out[row];
                track.lost_age = 0;
                track.state = crate::memory::TrackState::Active;
            } else {
                track.lost_age += 1;
                track.state = crate::memory::TrackState::Lost;
                if track.lost_age > cfg.n_keep {
                    to_remove.push(track.track_id);
                }
            }
        }
        memory.retain(|t| !to_remove.contains(&t.track_id));

        for &(p, g) in &asg.pairs {
            if p >= sorted_tracks.len() {
                let det_j = p - sorted_tracks.len();
                let row = n_track_rows + det_j;
                let e = &gt.entries[g];
                let feat = tape.slice_rows(last.content, row, 1);
                memory.push(TrackRecord::new(
                    e.track_id,
                    feat,
                    t,
                    last.anchors_out[row],
                    e.class_id,
                ));
            }
        }
    }

    // Clip objective: bipartite parts summed over frames and layers, the
    // consistency term normalized by the clip-global historical count.
    let total_his: usize = frame_his.iter().sum();
    let denom = 1.0f64.max(total_his as f64);
    let mut loss = tape.scalar(0.0);
    for part in bip_totals {
        loss = tape.add(loss, part);
    }
    let mut encoder_loss = 0.0;
    for part in enc_losses {
        encoder_loss += tape.scalar_value(part);
        loss = tape.add(loss, part);
    }
    for layer_nums in toc_nums {
        for num in layer_nums {
            let scaled = tape.scale(num, 1.0 / denom);
            loss = tape.add(loss, scaled);
        }
    }
    Ok(ClipLoss {
        loss,
        breakdowns,
        encoder_loss,
    })
}

/// Forward-only clip loss for finite-difference checks.
pub fn clip_loss_value(
    store: &ParamStore,
    frames: &[&Frame],
    annotations: &[&FrameAnnotations],
    rc: &RunConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pb = ParamBinding::bind(&mut tape, store);
    let out = clip_loss_graph(&mut tape, &pb, frames, annotations, rc, &IrmHooks::default())?;
    Ok(tape.scalar_value(out.loss))
}

/// Clip loss plus analytic parameter gradients.
pub fn clip_loss_grads(
    store: &ParamStore,
    frames: &[&Frame],
    annotations: &[&FrameAnnotations],
    rc: &RunConfig,
) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
    let mut tape = Tape::new();
    let pb = ParamBinding::bind(&mut tape, store);
    let out = clip_loss_graph(&mut tape, &pb, frames, annotations, rc, &IrmHooks::default())?;
    let grads = tape.backward(out.loss);
    Ok((tape.scalar_value(out.loss), pb.gradients(&grads)))
}

/// AdamW with decoupled weight decay.
pub struct AdamW {
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
    step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// Apply one step. Gradients are clipped to a global norm first.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Array2<f64>>,
        lr: f64,
        grad_clip: f64,
    ) {
        self.step += 1;
        let norm: f64 = grads
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = if norm > grad_clip && norm > 0.0 {
            grad_clip / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, value) in store.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let g = g * scale;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(value.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(value.dim()));
            *m = &*m * self.beta1 + &g * (1.0 - self.beta1);
            *v = &*v * self.beta2 + &(&g * &g) * (1.0 - self.beta2);
            let m_hat = &*m / bc1;
            let v_hat = &*v / bc2;
            let denom = v_hat.mapv(|x| x.sqrt() + self.eps);
            *value = &*value - &(m_hat / denom * lr) - &(&*value * (self.weight_decay * lr));
        }
    }
}

/// One sampled training clip.
struct ClipPlan {
    video: usize,
    start: usize,
    stride: usize,
    len: usize,
}

fn plan_clip(rng: &mut ChaCha8Rng, video_len: usize, video: usize, rc: &RunConfig) -> ClipPlan {
    let t = rc.model.clip_length.min(video_len);
    let max_stride_fit = if t > 1 {
        ((video_len - 1) / (t - 1)).max(1)
    } else {
        1
    };
    let stride = rng.gen_range(1..=rc.train.max_stride.min(max_stride_fit).max(1));
    let span = (t - 1) * stride;
    let start = rng.gen_range(0..=video_len - 1 - span);
    ClipPlan {
        video,
        start,
        stride,
        len: t,
    }
}

fn clip_seed(seed: u64, epoch: usize, video: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (video as u64).wrapping_mul(0xd1b5_4a32_d192_ed03)
}

/// Train in place; returns the mean clip loss per epoch. Deterministic
/// given the seed: clip sampling, batching and gradient accumulation order
/// are all fixed.
pub fn train(
    store: &mut ParamStore,
    dataset: &Dataset,
    rc: &RunConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    assert!(!dataset.items.is_empty(), "training set is empty");
    let mut opt = AdamW::new(rc.train.weight_decay);
    let mut curve = Vec::with_capacity(rc.train.epochs);

    for epoch in 0..rc.train.epochs {
        let lr = rc.train.lr_at(epoch);
        let mut order: Vec<usize> = (0..dataset.items.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(seed, epoch, usize::MAX));
            order.shuffle(&mut rng);
        }

        let mut epoch_loss = 0.0;
        let mut n_clips = 0usize;
        for batch in order.chunks(rc.train.batch_clips) {
            let results: Vec<Result<(f64, BTreeMap<String, Array2<f64>>)>> = batch
                .par_iter()
                .map(|&vid| {
                    let item = &dataset.items[vid];
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(clip_seed(seed, epoch, vid));
                    let plan = plan_clip(&mut rng, item.frames.len(), vid, rc);
                    let frames: Vec<&Frame> = (0..plan.len)
                        .map(|i| &dataset.items[plan.video].frames[plan.start + i * plan.stride])
                        .collect();
                    let anns: Vec<&FrameAnnotations> = (0..plan.len)
                        .map(|i| {
                            &dataset.items[plan.video].annotations[plan.start + i * plan.stride]
                        })
                        .collect();
                    clip_loss_grads(store, &frames, &anns, rc)
                })
                .collect();

            let mut grad_sum: BTreeMap<String, Array2<f64>> = BTreeMap::new();
            let mut batch_count = 0usize;
            for res in results {
                let (loss, grads) = res?;
                epoch_loss += loss;
                n_clips += 1;
                batch_count += 1;
                for (name, g) in grads {
                    grad_sum
                        .entry(name)
                        .and_modify(|acc| *acc += &g)
                        .or_insert(g);
                }
            }
            for g in grad_sum.values_mut() {
                *g /= batch_count as f64;
            }
            opt.update(store, &grad_sum, lr, rc.train.grad_clip);
        }
        let mean = epoch_loss / n_clips.max(1) as f64;
        curve.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(curve)
}
