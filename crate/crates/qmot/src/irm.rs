//! Information refinement module: the inter-decoder block where the
//! queries of one track exchange temporal clues.
//!
//! Two branches operate on the tracking rows under an intra-track-only
//! attention mask. Each branch collects global temporal clues with masked
//! self-attention and acts on them with a second attention block that uses
//! the clues as queries and the original content as keys/values. The
//! removal branch additionally projects to a per-head gate `z` through a
//! sigmoid; the refined content is
//!
//! `LN(2 * F * (1 - z_expanded) + F_add)`
//!
//! where `z_expanded` repeats each of the `d_head` gate scalars over its
//! contiguous channel group.

use crate::autodiff::{Tape, Var};
use crate::config::Config;
use crate::masks::irm_mask;
use crate::memory::GroupId;
use crate::nn::{layer_norm, multi_head_attention, AttnVars, ParamBinding};
use ndarray::Array2;
use std::rc::Rc;

/// Test hooks making the refinement algebra externally checkable.
#[derive(Debug, Clone, Copy, Default)]
pub struct IrmHooks {
    /// Force every gate entry to a constant.
    pub gate_override: Option<f64>,
    /// Replace the addition branch output with zeros.
    pub zero_add: bool,
}

/// Refine the tracking-row content features. `groups` names the owning
/// track of each row; rows of different tracks never influence each other.
pub fn irm_forward(
    tape: &mut Tape,
    pb: &ParamBinding,
    irm_index: usize,
    content: Var,
    groups: &[GroupId],
    cfg: &Config,
    hooks: &IrmHooks,
) -> Var {
    assert_eq!(content.rows, groups.len());
    if content.rows == 0 {
        return content;
    }
    let allow = Rc::new(irm_mask(groups).allow);
    let heads = cfg.d_head;
    let prefix = format!("irm{irm_index}");

    let add_clue = AttnVars::bind(pb, &format!("{prefix}.add.clue"));
    let clues_add = multi_head_attention(
        tape,
        &add_clue,
        content,
        content,
        content,
        heads,
        Some(allow.clone()),
        None,
        None,
    );
    let add_act = AttnVars::bind(pb, &format!("{prefix}.add.act"));
    let mut f_add = multi_head_attention(
        tape,
        &add_act,
        clues_add,
        content,
        content,
        heads,
        Some(allow.clone()),
        None,
        None,
    );
    if hooks.zero_add {
        f_add = tape.zeros(content.rows, content.cols);
    }

    let z = match hooks.gate_override {
        Some(g) => tape.leaf(Array2::from_elem((content.rows, heads), g)),
        None => {
            let rem_clue = AttnVars::bind(pb, &format!("{prefix}.rem.clue"));
            let clues_rem = multi_head_attention(
                tape,
                &rem_clue,
                content,
                content,
                content,
                heads,
                Some(allow.clone()),
                None,
                None,
            );
            let rem_act = AttnVars::bind(pb, &format!("{prefix}.rem.act"));
            let act_rem = multi_head_attention(
                tape,
                &rem_act,
                clues_rem,
                content,
                content,
                heads,
                Some(allow),
                None,
                None,
            );
            let gate_lin = tape.matmul(act_rem, pb.var(&format!("{prefix}.gate.w")));
            let gate_lin = tape.add_row(gate_lin, pb.var(&format!("{prefix}.gate.b")));
            tape.sigmoid(gate_lin)
        }
    };

    let group_size = cfg.feature_dim / cfg.d_head;
    let z_expanded = tape.repeat_cols_grouped(z, group_size);
    let neg_z = tape.scale(z_expanded, -1.0);
    let one_minus_z = tape.add_scalar(neg_z, 1.0);
    let reserved = tape.mul(content, one_minus_z);
    let reserved2 = tape.scale(reserved, 2.0);
    let combined = tape.add(reserved2, f_add);
    layer_norm(
        tape,
        combined,
        pb.var(&format!("{prefix}.ln.g")),
        pb.var(&format!("{prefix}.ln.b")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model_params, LN_EPS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> Config {
        Config {
            feature_dim: 16,
            d_head: 4,
            num_decoders: 2,
            ..Config::default()
        }
    }

    fn random_content(rows: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, d), |_| rng.gen_range(-1.0..1.0))
    }

    fn plain_layer_norm(x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let denom = (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) / denom);
        }
        out
    }

    #[test]
    fn empty_input_is_noop() {
        let cfg = cfg();
        let store = init_model_params(&cfg, 0);
        let mut tape = Tape::new();
        let pb = ParamBinding::bind(&mut tape, &store);
        let content = tape.zeros(0, 16);
        let out = irm_forward(
            &mut tape,
            &pb,
            0,
            content,
            &[],
            &cfg,
            &IrmHooks::default(),
        );
        assert_eq!(out.rows, 0);
    }

    #[test]
    fn cross_track_isolation_is_bit_exact() {
        let cfg = cfg();
        let store = init_model_params(&cfg, 0);
        let groups = vec![
            GroupId::Track(1),
            GroupId::Track(1),
            GroupId::Track(2),
            GroupId::Track(2),
        ];
        let base = random_content(4, 16, 5);
        let mut perturbed = base.clone();
        perturbed[[0, 3]] += 0.5;
        perturbed[[1, 7]] -= 0.25;

        let run = |input: &Array2<f64>| {
            let mut tape = Tape::new();
            let pb = ParamBinding::bind(&mut tape, &store);
            let content = tape.leaf(input.clone());
            let out = irm_forward(
                &mut tape,
                &pb,
                0,
                content,
                &groups,
                &cfg,
                &IrmHooks::default(),
            );
            tape.value(out).clone()
        };
        let a = run(&base);
        let b = run(&perturbed);
        // Track 2's rows are untouched, bit for bit.
        for i in 2..4 {
            for j in 0..16 {
                assert_eq!(a[[i, j]].to_bits(), b[[i, j]].to_bits());
            }
        }
        // Track 1's rows did change.
        assert_ne!(a.row(0), b.row(0));
    }

    /// With the gate forced and the addition branch zeroed, the module
    /// must reproduce the refinement formula evaluated by hand.
    #[test]
    fn gate_override_matches_algebra() {
        let cfg = cfg();
        let store = init_model_params(&cfg, 0);
        let groups = vec![GroupId::Track(1), GroupId::Track(1), GroupId::Track(2)];
        let input = random_content(3, 16, 9);

        let run = |hooks: IrmHooks| {
            let mut tape = Tape::new();
            let pb = ParamBinding::bind(&mut tape, &store);
            let content = tape.leaf(input.clone());
            let out = irm_forward(&mut tape, &pb, 0, content, &groups, &cfg, &hooks);
            tape.value(out).clone()
        };

        // z = 1, F_add = 0: output = LN(0) = 0 (gamma starts at 1, beta 0).
        let out = run(IrmHooks {
            gate_override: Some(1.0),
            zero_add: true,
        });
        assert!(out.iter().all(|v| v.abs() < 1e-9));

        // z = 0, F_add = 0: output = LN(2F).
        let out = run(IrmHooks {
            gate_override: Some(0.0),
            zero_add: true,
        });
        let expect = plain_layer_norm(&input.mapv(|v| 2.0 * v));
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-6);
        }

        // z = 0.5, F_add = 0: layer-norm fixed point, output = LN(F).
        let out = run(IrmHooks {
            gate_override: Some(0.5),
            zero_add: true,
        });
        let expect = plain_layer_norm(&input);
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn permuting_track_blocks_permutes_outputs() {
        let cfg = cfg();
        let store = init_model_params(&cfg, 0);
        let input = random_content(5, 16, 13);
        let groups = vec![
            GroupId::Track(1),
            GroupId::Track(1),
            GroupId::Track(1),
            GroupId::Track(2),
            GroupId::Track(2),
        ];
        // Swap the two track blocks wholesale.
        let perm = [3usize, 4, 0, 1, 2];
        let permuted_groups: Vec<GroupId> = perm.iter().map(|&i| groups[i]).collect();
        let mut permuted = Array2::zeros((5, 16));
        for (dst, &src) in perm.iter().enumerate() {
            permuted.row_mut(dst).assign(&input.row(src));
        }

        let run = |input: &Array2<f64>, groups: &[GroupId]| {
            let mut tape = Tape::new();
            let pb = ParamBinding::bind(&mut tape, &store);
            let content = tape.leaf(input.clone());
            let out = irm_forward(
                &mut tape,
                &pb,
                0,
                content,
                groups,
                &cfg,
                &IrmHooks::default(),
            );
            tape.value(out).clone()
        };
        let base = run(&input, &groups);
        let swapped = run(&permuted, &permuted_groups);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..16 {
                assert!((swapped[[dst, j]] - base[[src, j]]).abs() < 1e-12);
            }
        }
    }
}
