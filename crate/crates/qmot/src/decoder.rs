//! Decoder stack: attention-masked self-attention over the combined query
//! batch, cross-attention to image tokens, feed-forward, and shared
//! class / box-delta heads with iterative anchor refinement.
//!
//! Refinement modules sit between adjacent decoder layers (none before the
//! first) and touch only the tracking rows; detection rows bypass them.

use crate::autodiff::{Tape, Var};
use crate::config::Config;
use crate::encoder::FrameFeatures;
use crate::geom::BoundingBox;
use crate::irm::{irm_forward, IrmHooks};
use crate::masks::decoder_mask_from_groups;
use crate::memory::{GroupId, RowMeta};
use crate::nn::{anchor_pos_embed, ffn, layer_norm, multi_head_attention, AttnVars, ParamBinding};
use crate::types::Prediction;
use ndarray::Array2;
use std::rc::Rc;

/// Output of one decoder layer.
pub struct DecoderOutput {
    /// Updated content features, `n x d`.
    pub content: Var,
    /// Class probabilities, `n x (C+1)`; background at index 0.
    pub probs: Var,
    /// Refined boxes as `n x 4` center-format coordinates.
    pub boxes: Var,
    /// Refined anchors (detached) feeding the next layer.
    pub anchors_out: Vec<BoundingBox>,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-4, 1.0 - 1e-4);
    (p / (1.0 - p)).ln()
}

/// One temporal-blocking decoder layer.
pub fn decoder_layer_forward(
    tape: &mut Tape,
    pb: &ParamBinding,
    layer: usize,
    content: Var,
    anchors: &[BoundingBox],
    allow: Rc<Array2<bool>>,
    frame: &FrameFeatures,
    cfg: &Config,
) -> DecoderOutput {
    let n = content.rows;
    assert_eq!(anchors.len(), n);
    assert_eq!(allow.dim(), (n, n), "mask shape must match content rows");
    let heads = cfg.d_head;
    let p = |s: &str| format!("dec{layer}.{s}");

    let q_pos = tape.leaf(anchor_pos_embed(anchors, cfg.feature_dim));

    let sa = AttnVars::bind(pb, &p("sa"));
    let self_out = multi_head_attention(
        tape,
        &sa,
        content,
        content,
        content,
        heads,
        Some(allow),
        Some(q_pos),
        Some(q_pos),
    );
    let x = tape.add(content, self_out);
    let x = layer_norm(tape, x, pb.var(&p("ln1.g")), pb.var(&p("ln1.b")));

    let ca = AttnVars::bind(pb, &p("ca"));
    let cross_out = multi_head_attention(
        tape,
        &ca,
        x,
        frame.tokens,
        frame.tokens,
        heads,
        None,
        Some(q_pos),
        None,
    );
    let x = tape.add(x, cross_out);
    let x = layer_norm(tape, x, pb.var(&p("ln2.g")), pb.var(&p("ln2.b")));

    let ff = ffn(
        tape,
        x,
        pb.var(&p("ffn.w1")),
        pb.var(&p("ffn.b1")),
        pb.var(&p("ffn.w2")),
        pb.var(&p("ffn.b2")),
    );
    let x = tape.add(x, ff);
    let x = layer_norm(tape, x, pb.var(&p("ln3.g")), pb.var(&p("ln3.b")));

    let logits = tape.matmul(x, pb.var("head.cls.w"));
    let logits = tape.add_row(logits, pb.var("head.cls.b"));
    let probs = tape.softmax_rows(logits);

    let delta = tape.matmul(x, pb.var("head.box.w"));
    let delta = tape.add_row(delta, pb.var("head.box.b"));
    // b = sigmoid(logit(anchor) + delta); anchors enter as constants, so
    // the refinement chain is detached between layers.
    let mut anchor_logits = Array2::zeros((n, 4));
    for (i, a) in anchors.iter().enumerate() {
        anchor_logits[[i, 0]] = logit(a.cx);
        anchor_logits[[i, 1]] = logit(a.cy);
        anchor_logits[[i, 2]] = logit(a.w);
        anchor_logits[[i, 3]] = logit(a.h);
    }
    let anchor_logits = tape.leaf(anchor_logits);
    let shifted = tape.add(delta, anchor_logits);
    let boxes = tape.sigmoid(shifted);

    let bv = tape.value(boxes);
    let anchors_out = (0..n)
        .map(|i| {
            BoundingBox::new(bv[[i, 0]], bv[[i, 1]], bv[[i, 2]], bv[[i, 3]])
                .expect("sigmoid keeps boxes inside the unit square")
        })
        .collect();

    DecoderOutput {
        content: x,
        probs,
        boxes,
        anchors_out,
    }
}

/// Run the full decoder stack over one frame's query batch, applying
/// refinement modules to the tracking rows between layers. Returns one
/// output per decoder layer (all retained for auxiliary supervision).
#[allow(clippy::too_many_arguments)]
pub fn forward_frame(
    tape: &mut Tape,
    pb: &ParamBinding,
    content: Var,
    rows: &[RowMeta],
    anchors: &[BoundingBox],
    frame: &FrameFeatures,
    cfg: &Config,
    hooks: &IrmHooks,
) -> Vec<DecoderOutput> {
    assert!(!rows.is_empty(), "detection queries are always present");
    assert_eq!(content.rows, rows.len());
    let groups: Vec<GroupId> = rows.iter().map(|r| r.group).collect();
    let n_track = rows.iter().filter(|r| r.group.is_track()).count();
    debug_assert!(
        rows[..n_track].iter().all(|r| r.group.is_track()),
        "tracking rows must precede detection rows"
    );
    let allow = Rc::new(decoder_mask_from_groups(&groups).allow);

    let mut outputs: Vec<DecoderOutput> = Vec::with_capacity(cfg.num_decoders);
    let mut x = content;
    let mut cur_anchors: Vec<BoundingBox> = anchors.to_vec();
    let mut irm_index = 0usize;

    for layer in 0..cfg.num_decoders {
        if cfg.irm_before_layer(layer) {
            if n_track > 0 {
                let track_part = tape.slice_rows(x, 0, n_track);
                let refined = irm_forward(
                    tape,
                    pb,
                    irm_index,
                    track_part,
                    &groups[..n_track],
                    cfg,
                    hooks,
                );
                x = if n_track == rows.len() {
                    refined
                } else {
                    let det_part = tape.slice_rows(x, n_track, rows.len() - n_track);
                    tape.concat_rows(&[refined, det_part])
                };
            }
            irm_index += 1;
        }
        let out = decoder_layer_forward(tape, pb, layer, x, &cur_anchors, allow.clone(), frame, cfg);
        x = out.content;
        cur_anchors = out.anchors_out.clone();
        outputs.push(out);
    }
    outputs
}

/// Extract a plain [`Prediction`] from a layer output row.
pub fn row_prediction(tape: &Tape, out: &DecoderOutput, row: usize) -> Prediction {
    let probs = tape.value(out.probs);
    let class_probs: Vec<f64> = probs.row(row).to_vec();
    Prediction::new(class_probs, out.anchors_out[row]).expect("softmax rows are normalized")
}
