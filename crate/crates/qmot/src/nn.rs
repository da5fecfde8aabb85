//! Network building blocks on the autodiff tape: parameter storage and
//! initialization, multi-head attention, layer norm, feed-forward blocks,
//! sinusoidal position embeddings, and checkpoint serialization.

use crate::autodiff::{Tape, Var};
use crate::config::{Config, RunConfig};
use crate::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

pub const LN_EPS: f64 = 1e-5;

/// Named parameter tensors, ordered by name for deterministic traversal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

fn attn_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(&format!("{prefix}.{w}"), xavier(rng, d, d));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        store.insert(&format!("{prefix}.{b}"), Array2::zeros((1, d)));
    }
}

fn ln_params(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(&format!("{prefix}.g"), Array2::ones((1, d)));
    store.insert(&format!("{prefix}.b"), Array2::zeros((1, d)));
}

/// Encoder channel widths for a given feature dimension.
pub fn conv_channels(d: usize) -> (usize, usize) {
    (4.max(d / 4), 8.max(d / 2))
}

/// Create all model parameters for `cfg`, deterministically from `seed`.
pub fn init_model_params(cfg: &Config, seed: u64) -> ParamStore {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::default();
    let d = cfg.feature_dim;
    let (c1, c2) = conv_channels(d);

    store.insert("enc.conv1.w", xavier(&mut rng, 9 * 3, c1));
    store.insert("enc.conv1.b", Array2::zeros((1, c1)));
    store.insert("enc.conv2.w", xavier(&mut rng, 9 * c1, c2));
    store.insert("enc.conv2.b", Array2::zeros((1, c2)));
    store.insert("enc.conv3.w", xavier(&mut rng, 9 * c2, d));
    store.insert("enc.conv3.b", Array2::zeros((1, d)));
    ln_params(&mut store, "enc.ln", d);
    store.insert("enc.score.w", xavier(&mut rng, d, 1));
    store.insert("enc.score.b", Array2::zeros((1, 1)));

    store.insert(
        "det.content",
        Array2::from_shape_fn((cfg.n_det, d), |_| rng.gen_range(-0.5..0.5)),
    );

    for l in 0..cfg.num_decoders {
        attn_params(&mut store, &mut rng, &format!("dec{l}.sa"), d);
        attn_params(&mut store, &mut rng, &format!("dec{l}.ca"), d);
        ln_params(&mut store, &format!("dec{l}.ln1"), d);
        ln_params(&mut store, &format!("dec{l}.ln2"), d);
        ln_params(&mut store, &format!("dec{l}.ln3"), d);
        store.insert(&format!("dec{l}.ffn.w1"), xavier(&mut rng, d, 4 * d));
        store.insert(&format!("dec{l}.ffn.b1"), Array2::zeros((1, 4 * d)));
        store.insert(&format!("dec{l}.ffn.w2"), xavier(&mut rng, 4 * d, d));
        store.insert(&format!("dec{l}.ffn.b2"), Array2::zeros((1, d)));
    }

    // Shared prediction heads. The box-delta head starts at zero so the
    // first refinement leaves anchors unchanged.
    store.insert("head.cls.w", xavier(&mut rng, d, cfg.num_classes + 1));
    store.insert("head.cls.b", Array2::zeros((1, cfg.num_classes + 1)));
    store.insert("head.box.w", Array2::zeros((d, 4)));
    store.insert("head.box.b", Array2::zeros((1, 4)));

    for k in 0..cfg.irm_count() {
        for branch in ["add", "rem"] {
            attn_params(&mut store, &mut rng, &format!("irm{k}.{branch}.clue"), d);
            attn_params(&mut store, &mut rng, &format!("irm{k}.{branch}.act"), d);
        }
        store.insert(&format!("irm{k}.gate.w"), xavier(&mut rng, d, cfg.d_head));
        store.insert(&format!("irm{k}.gate.b"), Array2::zeros((1, cfg.d_head)));
        ln_params(&mut store, &format!("irm{k}.ln"), d);
    }

    store
}

/// Per-tape binding of every parameter to a leaf node.
pub struct ParamBinding {
    vars: BTreeMap<String, Var>,
}

impl ParamBinding {
    pub fn bind(tape: &mut Tape, store: &ParamStore) -> Self {
        let vars = store
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone())))
            .collect();
        ParamBinding { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Collect parameter gradients by name after a backward pass.
    pub fn gradients(&self, grads: &crate::autodiff::Gradients) -> BTreeMap<String, Array2<f64>> {
        self.vars
            .iter()
            .map(|(name, var)| (name.clone(), grads.of(*var)))
            .collect()
    }
}

/// Attention parameter handles for one attention block.
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bq: Var,
    pub bk: Var,
    pub bv: Var,
    pub bo: Var,
}

impl AttnVars {
    pub fn bind(pb: &ParamBinding, prefix: &str) -> Self {
        AttnVars {
            wq: pb.var(&format!("{prefix}.wq")),
            wk: pb.var(&format!("{prefix}.wk")),
            wv: pb.var(&format!("{prefix}.wv")),
            wo: pb.var(&format!("{prefix}.wo")),
            bq: pb.var(&format!("{prefix}.bq")),
            bk: pb.var(&format!("{prefix}.bk")),
            bv: pb.var(&format!("{prefix}.bv")),
            bo: pb.var(&format!("{prefix}.bo")),
        }
    }
}

/// Multi-head dot-product attention with an optional row-level allow mask
/// (`n_q x n_k`) and optional additive position embeddings on the query and
/// key inputs. Values carry no position term.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    tape: &mut Tape,
    p: &AttnVars,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    n_heads: usize,
    allow: Option<Rc<Array2<bool>>>,
    q_pos: Option<Var>,
    k_pos: Option<Var>,
) -> Var {
    let d = q_in.cols;
    assert_eq!(d % n_heads, 0, "head count must divide feature dim");
    let dh = d / n_heads;

    let q_src = match q_pos {
        Some(p) => tape.add(q_in, p),
        None => q_in,
    };
    let k_src = match k_pos {
        Some(p) => tape.add(k_in, p),
        None => k_in,
    };

    let q = tape.matmul(q_src, p.wq);
    let q = tape.add_row(q, p.bq);
    let k = tape.matmul(k_src, p.wk);
    let k = tape.add_row(k, p.bk);
    let v = tape.matmul(v_in, p.wv);
    let v = tape.add_row(v, p.bv);

    let scale = 1.0 / (dh as f64).sqrt();
    let allow = allow
        .unwrap_or_else(|| Rc::new(Array2::from_elem((q_in.rows, k_in.rows), true)));

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_transb(qh, kh);
        let scores = tape.scale(scores, scale);
        let attn = tape.masked_softmax_rows(scores, allow.clone());
        heads.push(tape.matmul(attn, vh));
    }
    let merged = tape.concat_cols(&heads);
    let out = tape.matmul(merged, p.wo);
    tape.add_row(out, p.bo)
}

/// Layer norm with learnable affine.
pub fn layer_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Var {
    let n = tape.normalize_rows(x, LN_EPS);
    let scaled = tape.mul_row(n, gamma);
    tape.add_row(scaled, beta)
}

/// Two-layer feed-forward with ReLU.
pub fn ffn(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.relu(h);
    let out = tape.matmul(h, w2);
    tape.add_row(out, b2)
}

/// Sinusoidal embedding of a 2-D position, DETR-style: half the channels
/// encode x, half encode y, alternating sin/cos over geometric frequencies.
pub fn sine_embed_xy(x: f64, y: f64, d: usize) -> Vec<f64> {
    assert_eq!(d % 4, 0, "position embedding needs d divisible by 4");
    let half = d / 2;
    let mut out = Vec::with_capacity(d);
    let two_pi = std::f64::consts::TAU;
    for (pos, _) in [(x, 0), (y, 1)] {
        for i in 0..half / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / half as f64);
            out.push((pos * two_pi / freq).sin());
            out.push((pos * two_pi / freq).cos());
        }
    }
    out
}

/// Position embedding matrix for a list of box centers.
pub fn anchor_pos_embed(anchors: &[crate::geom::BoundingBox], d: usize) -> Array2<f64> {
    let mut m = Array2::zeros((anchors.len(), d));
    for (i, a) in anchors.iter().enumerate() {
        for (j, v) in sine_embed_xy(a.cx, a.cy, d).into_iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    m
}

const CKPT_MAGIC: &[u8; 8] = b"QMOTCK01";

/// Write a checkpoint: the config document plus a flat name -> array map,
/// with `f64` payloads stored as raw little-endian bits so the round trip
/// is bit-exact.
pub fn save_checkpoint(path: &Path, cfg: &RunConfig, store: &ParamStore) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    let cfg_json = serde_json::to_vec(cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, value) in store.iter() {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(value.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(value.ncols() as u32).to_le_bytes());
        for v in value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, ParamStore)> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > data.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &data[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };

    if take(&mut pos, 8)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let cfg_len = read_u32(&mut pos)? as usize;
    let cfg: RunConfig = serde_json::from_slice(take(&mut pos, cfg_len)?)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let n_entries = read_u32(&mut pos)? as usize;
    let mut store = ParamStore::default();
    for _ in 0..n_entries {
        let name_len = read_u32(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rows = read_u32(&mut pos)? as usize;
        let cols = read_u32(&mut pos)? as usize;
        let raw = take(&mut pos, rows * cols * 8)?;
        let mut value = Array2::zeros((rows, cols));
        for (i, v) in value.iter_mut().enumerate() {
            *v = f64::from_le_bytes(raw[i * 8..i * 8 + 8].try_into().unwrap());
        }
        store.insert(&name, value);
    }
    if pos != data.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((cfg, store))
}
