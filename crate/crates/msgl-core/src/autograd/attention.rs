//! Masked multi-head attention assembled from tape primitives.

use super::tape::{Tape, Var};
use super::tensor::{AttentionMask, TensorError};

/// Projection weights for one attention block: query/key/value projections
/// plus the output projection, each `[d, d]` with a `[d]` bias.
#[derive(Clone, Copy, Debug)]
pub struct MhaWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Scaled dot-product attention over `heads` subspaces with positions
/// restricted by `mask`; head outputs are concatenated and output-projected.
/// Scores are scaled by `1/sqrt(d/heads)`.
pub fn masked_multihead_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: AttentionMask,
    w: &MhaWeights,
) -> Result<Var, TensorError> {
    let d = tape.value(q).cols();
    let len = tape.value(q).rows();
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Config(format!(
            "model dimension {d} is not divisible by {heads} heads"
        )));
    }
    for (name, var) in [("q", q), ("k", k), ("v", v)] {
        let t = tape.value(var);
        if t.shape() != [len, d] {
            return Err(TensorError::BadShape {
                op: "masked_multihead_attention",
                expected: "q, k, v of identical [L, d] shape",
                got: t.shape().to_vec(),
            })
            .map_err(|e| {
                log::debug!("attention input {name} has wrong shape");
                e
            });
        }
    }
    if mask.length != len {
        return Err(TensorError::Config(format!(
            "mask length {} does not match token count {len}",
            mask.length
        )));
    }

    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let qp = {
        let t = tape.matmul(q, w.wq)?;
        tape.add_bias(t, w.bq)?
    };
    let kp = {
        let t = tape.matmul(k, w.wk)?;
        tape.add_bias(t, w.bk)?
    };
    let vp = {
        let t = tape.matmul(v, w.wv)?;
        tape.add_bias(t, w.bv)?
    };

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(qp, h * dh, dh)?;
        let kh = tape.slice_cols(kp, h * dh, dh)?;
        let vh = tape.slice_cols(vp, h * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, scale)?;
        let attn = tape.masked_softmax(scaled, mask)?;
        let ctx = tape.attn_apply(attn, vh, mask)?;
        head_outputs.push(ctx);
    }
    let ctx = tape.concat_cols(&head_outputs)?;
    let out = tape.matmul(ctx, w.wo)?;
    tape.add_bias(out, w.bo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use crate::rng::RngStream;

    fn identity_weights(tape: &mut Tape, d: usize) -> MhaWeights {
        let eye = |tape: &mut Tape| {
            let mut data = vec![0.0; d * d];
            for i in 0..d {
                data[i * d + i] = 1.0;
            }
            tape.constant(Tensor::matrix(d, d, data).unwrap())
        };
        let zero = |tape: &mut Tape| tape.constant(Tensor::vector(vec![0.0; d]));
        MhaWeights {
            wq: eye(tape),
            bq: zero(tape),
            wk: eye(tape),
            bk: zero(tape),
            wv: eye(tape),
            bv: zero(tape),
            wo: eye(tape),
            bo: zero(tape),
        }
    }

    fn random_weights(tape: &mut Tape, d: usize, rng: &mut RngStream) -> MhaWeights {
        let mut mat = |tape: &mut Tape| {
            tape.constant(Tensor::uniform(vec![d, d], -0.5, 0.5, rng))
        };
        let wq = mat(tape);
        let wk = mat(tape);
        let wv = mat(tape);
        let wo = mat(tape);
        let mut vec_ = |tape: &mut Tape| {
            tape.constant(Tensor::uniform(vec![d], -0.5, 0.5, rng))
        };
        let bq = vec_(tape);
        let bk = vec_(tape);
        let bv = vec_(tape);
        let bo = vec_(tape);
        MhaWeights { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    /// Per-position explicit softmax-weighted-sum reference, head by head.
    fn brute_force_mha(
        x: &Tensor,
        heads: usize,
        mask: AttentionMask,
        wq: &Tensor,
        bq: &Tensor,
        wk: &Tensor,
        bk: &Tensor,
        wv: &Tensor,
        bv: &Tensor,
        wo: &Tensor,
        bo: &Tensor,
    ) -> Vec<f64> {
        let l = x.rows();
        let d = x.cols();
        let dh = d / heads;
        let project = |w: &Tensor, b: &Tensor| -> Vec<f64> {
            let mut out = vec![0.0; l * d];
            for i in 0..l {
                for j in 0..d {
                    let mut s = b.data()[j];
                    for t in 0..d {
                        s += x.data()[i * d + t] * w.data()[t * d + j];
                    }
                    out[i * d + j] = s;
                }
            }
            out
        };
        let q = project(wq, bq);
        let k = project(wk, bk);
        let v = project(wv, bv);
        let mut ctx = vec![0.0; l * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let mut weights = Vec::new();
                for j in 0..l {
                    if !mask.permits(i, j) {
                        continue;
                    }
                    let mut s = 0.0;
                    for t in 0..dh {
                        s += q[i * d + off + t] * k[j * d + off + t];
                    }
                    weights.push((j, s / (dh as f64).sqrt()));
                }
                let max = weights.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = weights.iter().map(|(_, s)| (s - max).exp()).sum();
                for (j, s) in weights {
                    let w = ((s - max).exp()) / z;
                    for t in 0..dh {
                        ctx[i * d + off + t] += w * v[j * d + off + t];
                    }
                }
            }
        }
        let mut out = vec![0.0; l * d];
        for i in 0..l {
            for j in 0..d {
                let mut s = bo.data()[j];
                for t in 0..d {
                    s += ctx[i * d + t] * wo.data()[t * d + j];
                }
                out[i * d + j] = s;
            }
        }
        out
    }

    #[test]
    fn causal_first_position_passes_value_row_through_identity_projections() {
        let mut tape = Tape::new();
        let d = 4;
        let mut rng = RngStream::new(1);
        let x = Tensor::uniform(vec![3, d], -1.0, 1.0, &mut rng);
        let xv = tape.leaf(x.clone());
        let w = identity_weights(&mut tape, d);
        let out = masked_multihead_attention(
            &mut tape,
            xv,
            xv,
            xv,
            2,
            AttentionMask::causal(3),
            &w,
        )
        .unwrap();
        assert_eq!(tape.value(out).row(0), x.row(0));
    }

    #[test]
    fn zero_scores_give_uniform_weights_over_permitted_positions() {
        // q = k = 0 (zero input with identity V path would also zero v, so
        // zero the q/k projections instead and keep v identity).
        let mut tape = Tape::new();
        let d = 2;
        let l = 4;
        let x = Tensor::matrix(l, d, vec![1.0, 0.0, 3.0, 0.0, 5.0, 0.0, 7.0, 0.0]).unwrap();
        let xv = tape.leaf(x);
        let mut w = identity_weights(&mut tape, d);
        let zero_mat = tape.constant(Tensor::zeros(vec![d, d]));
        w.wq = zero_mat;
        w.wk = zero_mat;
        let out = masked_multihead_attention(
            &mut tape,
            xv,
            xv,
            xv,
            1,
            AttentionMask::causal(l),
            &w,
        )
        .unwrap();
        // Row 3 attends uniformly over rows 0..=3: mean of 1,3,5,7 = 4.
        let row = tape.value(out).row(3);
        assert!((row[0] - 4.0).abs() < 1e-12);
        // Row 1 attends uniformly over rows 0..=1: mean of 1,3 = 2.
        assert!((tape.value(out).row(1)[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_oracle_on_random_inputs() {
        let mut rng = RngStream::new(42);
        for (mask_kind, seed) in [(0u8, 5u64), (1, 6)] {
            let l = 6;
            let d = 8;
            let heads = 2;
            let mask = if mask_kind == 0 {
                AttentionMask::causal(l)
            } else {
                AttentionMask::none(l)
            };
            let mut wrng = RngStream::new(seed);
            let x = Tensor::uniform(vec![l, d], -1.0, 1.0, &mut rng);
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let w = random_weights(&mut tape, d, &mut wrng);
            let out =
                masked_multihead_attention(&mut tape, xv, xv, xv, heads, mask, &w).unwrap();
            let expect = brute_force_mha(
                &x,
                heads,
                mask,
                tape.value(w.wq),
                tape.value(w.bq),
                tape.value(w.wk),
                tape.value(w.bk),
                tape.value(w.wv),
                tape.value(w.bv),
                tape.value(w.wo),
                tape.value(w.bo),
            );
            for (got, want) in tape.value(out).data().iter().zip(&expect) {
                assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
            }
        }
    }

    #[test]
    fn causal_output_ignores_future_rows_bit_exactly() {
        let l = 7;
        let d = 8;
        let heads = 4;
        let mut rng = RngStream::new(9);
        let x = Tensor::uniform(vec![l, d], -2.0, 2.0, &mut rng);

        let run = |input: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let xv = tape.leaf(input.clone());
            let mut wrng = RngStream::new(77);
            let w = random_weights(&mut tape, d, &mut wrng);
            let out = masked_multihead_attention(
                &mut tape,
                xv,
                xv,
                xv,
                heads,
                AttentionMask::causal(l),
                &w,
            )
            .unwrap();
            tape.detach(out)
        };

        let base = run(&x);
        for t in 0..l - 1 {
            let mut perturbed = x.clone();
            for i in t + 1..l {
                for j in 0..d {
                    let idx = i * d + j;
                    perturbed.data_mut()[idx] += 10.0 + (i * d + j) as f64;
                }
            }
            let changed = run(&perturbed);
            for i in 0..=t {
                assert_eq!(
                    base.row(i),
                    changed.row(i),
                    "row {i} changed after perturbing rows > {t}"
                );
            }
        }
    }

    #[test]
    fn indivisible_heads_is_a_configuration_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![3, 5]));
        let w = identity_weights(&mut tape, 5);
        let err = masked_multihead_attention(
            &mut tape,
            x,
            x,
            x,
            2,
            AttentionMask::none(3),
            &w,
        );
        assert!(matches!(err, Err(TensorError::Config(_))));
    }
}
