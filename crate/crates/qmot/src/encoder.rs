//! Toy image encoder: three stride-2 convolutions (as im2col matmuls on
//! the tape), layer norm, sinusoidal grid position embedding, and top-k
//! token scoring for detection-query proposal anchors.

use crate::autodiff::{Tape, Var};
use crate::config::Config;
use crate::geom::BoundingBox;
use crate::nn::{layer_norm, sine_embed_xy, ParamBinding};
use crate::types::Frame;
use crate::{Error, Result};
use ndarray::Array2;
use std::rc::Rc;

/// Encoded frame: image tokens (with positional information baked in),
/// proposal anchors for the detection queries, and the learnable detection
/// query content.
pub struct FrameFeatures {
    /// `(grid_w * grid_h) x d` image tokens.
    pub tokens: Var,
    pub proposal_anchors: Vec<BoundingBox>,
    /// `n_det x d` learnable content features.
    pub proposal_content: Var,
    /// Raw proposal scores per token cell, `(grid_w * grid_h) x 1`;
    /// trained with a center-presence objective so top-k is informative.
    pub token_scores: Var,
    /// `(grid_w, grid_h)`.
    pub grid: (usize, usize),
}

/// Column-block gather indices for a 3x3 stride-2 pad-1 convolution.
/// Out-of-bounds taps map to the zero row appended at index `h * w`.
fn im2col_indices(h: usize, w: usize) -> (usize, usize, Vec<Rc<Vec<usize>>>) {
    let oh = (h + 2 - 3) / 2 + 1;
    let ow = (w + 2 - 3) / 2 + 1;
    let zero_row = h * w;
    let mut offsets = Vec::with_capacity(9);
    for ky in 0..3usize {
        for kx in 0..3usize {
            let mut idx = Vec::with_capacity(oh * ow);
            for oy in 0..oh {
                for ox in 0..ow {
                    let iy = (oy * 2 + ky) as isize - 1;
                    let ix = (ox * 2 + kx) as isize - 1;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        idx.push(zero_row);
                    } else {
                        idx.push(iy as usize * w + ix as usize);
                    }
                }
            }
            offsets.push(Rc::new(idx));
        }
    }
    (oh, ow, offsets)
}

/// One conv layer: gather the nine taps, concatenate, project.
fn conv3x3_s2(
    tape: &mut Tape,
    input: Var,
    h: usize,
    w: usize,
    weight: Var,
    bias: Var,
) -> (Var, usize, usize) {
    let zero = tape.zeros(1, input.cols);
    let padded = tape.concat_rows(&[input, zero]);
    let (oh, ow, offsets) = im2col_indices(h, w);
    let blocks: Vec<Var> = offsets
        .into_iter()
        .map(|idx| tape.gather_rows(padded, idx))
        .collect();
    let cols = tape.concat_cols(&blocks);
    let out = tape.matmul(cols, weight);
    let out = tape.add_row(out, bias);
    (out, oh, ow)
}

/// Encode one frame. Deterministic given parameters and input; the
/// proposal anchors are the `n_det` best-scored token positions converted
/// to grid-cell boxes.
pub fn encode_frame(
    tape: &mut Tape,
    pb: &ParamBinding,
    frame: &Frame,
    cfg: &Config,
) -> Result<FrameFeatures> {
    if frame.width != cfg.image_width || frame.height != cfg.image_height {
        return Err(Error::Shape(format!(
            "frame is {}x{}, config expects {}x{}",
            frame.width, frame.height, cfg.image_width, cfg.image_height
        )));
    }
    let (h, w) = (frame.height, frame.width);
    let mut img = Array2::zeros((h * w, 3));
    for y in 0..h {
        for x in 0..w {
            let px = frame.get(x, y);
            for c in 0..3 {
                img[[y * w + x, c]] = px[c] as f64 / 255.0 - 0.5;
            }
        }
    }
    let img = tape.leaf(img);

    let (x1, h1, w1) = conv3x3_s2(tape, img, h, w, pb.var("enc.conv1.w"), pb.var("enc.conv1.b"));
    let x1 = tape.relu(x1);
    let (x2, h2, w2) = conv3x3_s2(tape, x1, h1, w1, pb.var("enc.conv2.w"), pb.var("enc.conv2.b"));
    let x2 = tape.relu(x2);
    let (x3, h3, w3) = conv3x3_s2(tape, x2, h2, w2, pb.var("enc.conv3.w"), pb.var("enc.conv3.b"));
    debug_assert_eq!((w3, h3), cfg.token_grid());

    let normed = layer_norm(tape, x3, pb.var("enc.ln.g"), pb.var("enc.ln.b"));
    let d = cfg.feature_dim;
    let mut pe = Array2::zeros((h3 * w3, d));
    for gy in 0..h3 {
        for gx in 0..w3 {
            let cx = (gx as f64 + 0.5) / w3 as f64;
            let cy = (gy as f64 + 0.5) / h3 as f64;
            for (j, v) in sine_embed_xy(cx, cy, d).into_iter().enumerate() {
                pe[[gy * w3 + gx, j]] = v;
            }
        }
    }
    let pe = tape.leaf(pe);
    let tokens = tape.add(normed, pe);

    if cfg.n_det > h3 * w3 {
        return Err(Error::Config(format!(
            "n_det {} exceeds token count {}",
            cfg.n_det,
            h3 * w3
        )));
    }

    // Token scoring; selection is discrete, so gradients reach the scorer
    // only through near-ties (none, in practice).
    let score_lin = tape.matmul(tokens, pb.var("enc.score.w"));
    let scores = tape.add_row(score_lin, pb.var("enc.score.b"));
    let score_vals = tape.value(scores);
    let mut order: Vec<usize> = (0..h3 * w3).collect();
    order.sort_by(|&a, &b| {
        score_vals[[b, 0]]
            .partial_cmp(&score_vals[[a, 0]])
            .unwrap()
            .then(a.cmp(&b))
    });

    let box_extent = 1.6 / w3 as f64;
    let proposal_anchors: Vec<BoundingBox> = order[..cfg.n_det]
        .iter()
        .map(|&i| {
            let gy = i / w3;
            let gx = i % w3;
            BoundingBox::new(
                (gx as f64 + 0.5) / w3 as f64,
                (gy as f64 + 0.5) / h3 as f64,
                box_extent,
                box_extent * w3 as f64 / h3 as f64,
            )
            .expect("grid anchors are valid")
        })
        .collect();

    Ok(FrameFeatures {
        tokens,
        proposal_anchors,
        proposal_content: pb.var("det.content"),
        token_scores: scores,
        grid: (w3, h3),
    })
}
