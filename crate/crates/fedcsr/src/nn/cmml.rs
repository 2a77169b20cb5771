//! Visual recognizer: per-stream front-ends, fusion, a self-attention stack,
//! and codebook cross-attention.
//!
//! The linguistic branch is tied to the codebook twice over: cross-attention
//! mixes projected codebook rows, and the linguistic logits are dot products
//! against those same rows (phoneme class c scores against codebook row c,
//! with one extra learned direction for the blank class). Permuting codebook
//! rows therefore permutes the phoneme logits and nothing else.

use super::embedding::{codebook_projection, embed_text, EmbeddingHandles};
use super::{ParamId, Session};
use crate::tensor::{Tensor, TensorError};

/// Dense stream encoder with its affine normalization (the normalization
/// parameters are the ones federated-with-local-norm training keeps local).
#[derive(Debug, Clone)]
pub struct FrontEndHandles {
    pub w: ParamId, // [stream_dim x d]
    pub b: ParamId, // [d]
    pub norm_scale: ParamId,
    pub norm_shift: ParamId,
}

/// Pre-norm-free transformer block: self-attention, residual, affine norm,
/// then a tanh feed-forward with residual.
#[derive(Debug, Clone)]
pub struct AttnBlockHandles {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub norm_scale: ParamId,
    pub norm_shift: ParamId,
}

#[derive(Debug, Clone)]
pub struct CmmlHandles {
    pub lip: FrontEndHandles,
    pub shape: FrontEndHandles,
    pub pos: FrontEndHandles,
    pub fusion_w: ParamId, // [3d x d]
    pub fusion_b: ParamId, // [d]
    pub blocks: Vec<AttnBlockHandles>,
    pub cross_wq: ParamId,   // [d x d]
    pub cross_wk: ParamId,   // [d x d]
    pub vis_head_w: ParamId, // [d x (V+1)]
    pub vis_head_b: ParamId, // [V+1]
    pub lin_blank: ParamId,  // [d x 1], blank-class direction
    /// Equal to the server embedding handles when the embedding is shared,
    /// a private copy otherwise.
    pub codebook: EmbeddingHandles,
}

/// Both feature streams and both framewise logit sets, all with T rows.
#[derive(Debug, Clone)]
pub struct VisualOut {
    pub v_vis: Tensor,
    pub v_lin: Tensor,
    pub vis_logits: Tensor,
    pub lin_logits: Tensor,
}

/// Text routed through the visual model's attention stack, for distillation
/// targets on the text-only side.
#[derive(Debug, Clone)]
pub struct TeacherOut {
    pub v_lin: Tensor,
    pub logits: Tensor,
}

/// Per-frame attention over the projected codebook.
#[derive(Debug, Clone)]
pub struct CrossAttnOut {
    pub weights: Tensor,  // [n x V], rows on the simplex
    pub v_lin: Tensor,    // [n x d], weights @ codebook
    pub codebook: Tensor, // [V x d]
}

fn affine_norm(
    sess: &Session,
    x: &Tensor,
    scale: ParamId,
    shift: ParamId,
) -> Result<Tensor, TensorError> {
    let tape = sess.tape();
    let s = sess.param(scale);
    let t = sess.param(shift);
    tape.add(&tape.mul(x, &s)?, &t)
}

fn front_end(sess: &Session, fe: &FrontEndHandles, x: &Tensor) -> Result<Tensor, TensorError> {
    let tape = sess.tape();
    let w = sess.param(fe.w);
    let b = sess.param(fe.b);
    let pre = tape.add(&tape.matmul(x, &w)?, &b)?;
    tape.tanh(&affine_norm(sess, &pre, fe.norm_scale, fe.norm_shift)?)
}

/// Row-wise softmax, built from the stable log-softmax.
fn softmax(sess: &Session, scores: &Tensor) -> Result<Tensor, TensorError> {
    let tape = sess.tape();
    tape.exp(&tape.log_softmax(scores)?)
}

fn attn_block(sess: &Session, blk: &AttnBlockHandles, x: &Tensor) -> Result<Tensor, TensorError> {
    let tape = sess.tape();
    let d = x.cols() as f64;
    let q = tape.matmul(x, &sess.param(blk.wq))?;
    let k = tape.matmul(x, &sess.param(blk.wk))?;
    let v = tape.matmul(x, &sess.param(blk.wv))?;
    let scores = tape.scale(&tape.matmul(&q, &tape.transpose(&k)?)?, 1.0 / d.sqrt())?;
    let ctx = tape.matmul(&softmax(sess, &scores)?, &v)?;
    let attended = tape.add(x, &tape.matmul(&ctx, &sess.param(blk.wo))?)?;
    let normed = affine_norm(sess, &attended, blk.norm_scale, blk.norm_shift)?;
    let h = tape.tanh(&tape.add(
        &tape.matmul(&normed, &sess.param(blk.ffn_w1))?,
        &sess.param(blk.ffn_b1),
    )?)?;
    let ffn = tape.add(
        &tape.matmul(&h, &sess.param(blk.ffn_w2))?,
        &sess.param(blk.ffn_b2),
    )?;
    tape.add(&normed, &ffn)
}

fn attn_stack(sess: &Session, cmml: &CmmlHandles, x: &Tensor) -> Result<Tensor, TensorError> {
    let mut h = x.clone();
    for blk in &cmml.blocks {
        h = attn_block(sess, blk, &h)?;
    }
    Ok(h)
}

/// Attends each query row over the projected codebook; the mixture it
/// returns is convex, so every output row lies in the codebook's span.
pub fn cross_attention(
    sess: &Session,
    cmml: &CmmlHandles,
    queries: &Tensor,
) -> Result<CrossAttnOut, TensorError> {
    let tape = sess.tape();
    let d = queries.cols() as f64;
    let codebook = codebook_projection(sess, &cmml.codebook)?;
    let q = tape.matmul(queries, &sess.param(cmml.cross_wq))?;
    let k = tape.matmul(&codebook, &sess.param(cmml.cross_wk))?;
    let scores = tape.scale(&tape.matmul(&q, &tape.transpose(&k)?)?, 1.0 / d.sqrt())?;
    let weights = softmax(sess, &scores)?;
    let v_lin = tape.matmul(&weights, &codebook)?;
    Ok(CrossAttnOut {
        weights,
        v_lin,
        codebook,
    })
}

/// Phoneme class c scores `v_lin . codebook[c]`; the blank class scores
/// against its own learned direction and stays in the last column.
fn lin_logits(
    sess: &Session,
    cmml: &CmmlHandles,
    v_lin: &Tensor,
    codebook: &Tensor,
) -> Result<Tensor, TensorError> {
    let tape = sess.tape();
    let phoneme = tape.matmul(v_lin, &tape.transpose(codebook)?)?;
    let blank = tape.matmul(v_lin, &sess.param(cmml.lin_blank))?;
    tape.concat_cols(&phoneme, &blank)
}

/// Full visual pass over three equal-length streams.
pub fn visual_forward(
    sess: &Session,
    cmml: &CmmlHandles,
    lip: &Tensor,
    hand_shape: &Tensor,
    hand_pos: &Tensor,
) -> Result<VisualOut, TensorError> {
    if lip.rank() != 2 || lip.rows() != hand_shape.rows() || lip.rows() != hand_pos.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "visual_forward",
            lhs: lip.shape().to_vec(),
            rhs: vec![hand_shape.rows(), hand_pos.rows()],
        });
    }
    let tape = sess.tape();
    let l = front_end(sess, &cmml.lip, lip)?;
    let g = front_end(sess, &cmml.shape, hand_shape)?;
    let p = front_end(sess, &cmml.pos, hand_pos)?;
    let joined = tape.concat_cols(&tape.concat_cols(&l, &g)?, &p)?;
    let fused = tape.tanh(&tape.add(
        &tape.matmul(&joined, &sess.param(cmml.fusion_w))?,
        &sess.param(cmml.fusion_b),
    )?)?;
    let v_vis = attn_stack(sess, cmml, &fused)?;
    let cross = cross_attention(sess, cmml, &v_vis)?;
    let vis_logits = tape.add(
        &tape.matmul(&v_vis, &sess.param(cmml.vis_head_w))?,
        &sess.param(cmml.vis_head_b),
    )?;
    let lin = lin_logits(sess, cmml, &cross.v_lin, &cross.codebook)?;
    Ok(VisualOut {
        v_vis,
        v_lin: cross.v_lin,
        vis_logits,
        lin_logits: lin,
    })
}

/// Embeds a label sequence with the visual model's own codebook view and
/// runs it through the attention stack in place of the fused video stream.
/// Callers wanting a frozen teacher run this in a frozen session.
pub fn teacher_text_forward(
    sess: &Session,
    cmml: &CmmlHandles,
    labels: &[usize],
) -> Result<TeacherOut, TensorError> {
    let z_txt = embed_text(sess, &cmml.codebook, labels)?;
    let h = attn_stack(sess, cmml, &z_txt)?;
    let cross = cross_attention(sess, cmml, &h)?;
    let logits = lin_logits(sess, cmml, &cross.v_lin, &cross.codebook)?;
    Ok(TeacherOut {
        v_lin: cross.v_lin,
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{xavier, ParamStore};
    use crate::rng::SeedStream;
    use crate::tensor::Tape;

    /// Tiny model: V = 3, d = 2, streams of width 3 / 2 / 2, one block.
    fn fixture(seed: u64) -> (ParamStore, CmmlHandles) {
        let (v, d) = (3, 2);
        let mut store = ParamStore::default();
        let mut rng = SeedStream::new(seed);
        let fe =
            |store: &mut ParamStore, rng: &mut SeedStream, tag: &str, dim: usize| FrontEndHandles {
                w: store.add(format!("{tag}.w"), xavier(rng, dim, d)),
                b: store.add(format!("{tag}.b"), Tensor::zeros(vec![d])),
                norm_scale: store.add(
                    format!("{tag}.ns"),
                    Tensor::new(vec![d], vec![1.0; d]).unwrap(),
                ),
                norm_shift: store.add(format!("{tag}.nh"), Tensor::zeros(vec![d])),
            };
        let lip = fe(&mut store, &mut rng, "lip", 3);
        let shape = fe(&mut store, &mut rng, "shape", 2);
        let pos = fe(&mut store, &mut rng, "pos", 2);
        let block = AttnBlockHandles {
            wq: store.add("b0.wq", xavier(&mut rng, d, d)),
            wk: store.add("b0.wk", xavier(&mut rng, d, d)),
            wv: store.add("b0.wv", xavier(&mut rng, d, d)),
            wo: store.add("b0.wo", xavier(&mut rng, d, d)),
            ffn_w1: store.add("b0.f1", xavier(&mut rng, d, d)),
            ffn_b1: store.add("b0.f1b", Tensor::zeros(vec![d])),
            ffn_w2: store.add("b0.f2", xavier(&mut rng, d, d)),
            ffn_b2: store.add("b0.f2b", Tensor::zeros(vec![d])),
            norm_scale: store.add("b0.ns", Tensor::new(vec![d], vec![1.0; d]).unwrap()),
            norm_shift: store.add("b0.nh", Tensor::zeros(vec![d])),
        };
        let codebook = EmbeddingHandles {
            table: store.add("cb.table", xavier(&mut rng, v, d)),
            proj_w: store.add("cb.proj_w", xavier(&mut rng, d, d)),
            proj_b: store.add("cb.proj_b", Tensor::zeros(vec![d])),
        };
        let cmml = CmmlHandles {
            lip,
            shape,
            pos,
            fusion_w: store.add("fusion.w", xavier(&mut rng, 3 * d, d)),
            fusion_b: store.add("fusion.b", Tensor::zeros(vec![d])),
            blocks: vec![block],
            cross_wq: store.add("cross.wq", xavier(&mut rng, d, d)),
            cross_wk: store.add("cross.wk", xavier(&mut rng, d, d)),
            vis_head_w: store.add("vh.w", xavier(&mut rng, d, v + 1)),
            vis_head_b: store.add("vh.b", Tensor::zeros(vec![v + 1])),
            lin_blank: store.add("lh.blank", xavier(&mut rng, d, 1)),
            codebook,
        };
        (store, cmml)
    }

    fn streams(rng: &mut SeedStream, t: usize) -> (Tensor, Tensor, Tensor) {
        (xavier(rng, t, 3), xavier(rng, t, 2), xavier(rng, t, 2))
    }

    #[test]
    fn every_output_has_one_row_per_frame() {
        let (store, cmml) = fixture(5);
        let mut rng = SeedStream::new(40);
        for t in [1, 4] {
            let (lip, hs, hp) = streams(&mut rng, t);
            let tape = Tape::new();
            let sess = Session::inference(&tape, &store);
            let out = visual_forward(&sess, &cmml, &lip, &hs, &hp).unwrap();
            assert_eq!(out.v_vis.shape(), &[t, 2]);
            assert_eq!(out.v_lin.shape(), &[t, 2]);
            assert_eq!(out.vis_logits.shape(), &[t, 4]);
            assert_eq!(out.lin_logits.shape(), &[t, 4]);
        }
    }

    #[test]
    fn mismatched_stream_lengths_are_rejected() {
        let (store, cmml) = fixture(5);
        let mut rng = SeedStream::new(41);
        let (lip, hs, _) = streams(&mut rng, 3);
        let (_, _, hp) = streams(&mut rng, 4);
        let tape = Tape::new();
        let sess = Session::inference(&tape, &store);
        assert!(visual_forward(&sess, &cmml, &lip, &hs, &hp).is_err());
    }

    #[test]
    fn cross_attention_rows_are_convex_mixtures_of_the_codebook() {
        let (store, cmml) = fixture(9);
        let mut rng = SeedStream::new(42);
        let queries = xavier(&mut rng, 4, 2);
        let tape = Tape::new();
        let sess = Session::inference(&tape, &store);
        let out = cross_attention(&sess, &cmml, &queries).unwrap();
        assert_eq!(out.weights.shape(), &[4, 3]);
        for r in 0..4 {
            let row = &out.weights.values()[r * 3..(r + 1) * 3];
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() <= 1e-12, "row {r} sums to {total}");
            assert!(row.iter().all(|w| *w >= 0.0));
            // Recompute the mixture by hand.
            for c in 0..2 {
                let mix: f64 = (0..3).map(|j| row[j] * out.codebook.at2(j, c)).sum();
                assert!((mix - out.v_lin.at2(r, c)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn permuting_codebook_rows_permutes_phoneme_logits_only() {
        let (store, cmml) = fixture(13);
        let mut rng = SeedStream::new(43);
        let (lip, hs, hp) = streams(&mut rng, 3);

        let run = |store: &ParamStore| {
            let tape = Tape::new();
            let sess = Session::inference(&tape, &store);
            visual_forward(&sess, &cmml, &lip, &hs, &hp).unwrap()
        };
        let base = run(&store);

        // New class c takes the old class perm[c]'s codebook row.
        let perm = [1usize, 2, 0];
        let mut permuted = store.clone();
        let old = store.get(cmml.codebook.table).values().to_vec();
        let mut rows = vec![0.0; old.len()];
        for (c, p) in perm.iter().enumerate() {
            rows[c * 2..(c + 1) * 2].copy_from_slice(&old[p * 2..(p + 1) * 2]);
        }
        permuted.set_values(cmml.codebook.table, &rows);
        let moved = run(&permuted);

        // The visual branch never touches the codebook: bitwise identical.
        assert_eq!(base.vis_logits.values(), moved.vis_logits.values());
        // The mixture is permutation-invariant up to summation order.
        for (a, b) in base.v_lin.values().iter().zip(moved.v_lin.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
        for t in 0..3 {
            for (c, p) in perm.iter().enumerate() {
                assert!((moved.lin_logits.at2(t, c) - base.lin_logits.at2(t, *p)).abs() <= 1e-12);
            }
            assert_eq!(moved.lin_logits.at2(t, 3), base.lin_logits.at2(t, 3));
        }
    }

    #[test]
    fn teacher_output_length_matches_the_text() {
        let (store, cmml) = fixture(17);
        let tape = Tape::new();
        let sess = Session::inference(&tape, &store);
        let out = teacher_text_forward(&sess, &cmml, &[2, 0, 1, 1]).unwrap();
        assert_eq!(out.v_lin.shape(), &[4, 2]);
        assert_eq!(out.logits.shape(), &[4, 4]);
        assert!(tape.is_empty(), "frozen teacher must not grow the tape");
    }

    #[test]
    fn one_phoneme_teacher_row_stays_on_the_codebook_simplex() {
        let (store, cmml) = fixture(19);
        let tape = Tape::new();
        let sess = Session::inference(&tape, &store);
        let out = teacher_text_forward(&sess, &cmml, &[1]).unwrap();
        // One row, d = 2: solve the mixture against the projected codebook
        // directly by checking it lies within the rows' bounding box.
        let cb = {
            let s2 = Session::inference(&tape, &store);
            codebook_projection(&s2, &cmml.codebook).unwrap()
        };
        for c in 0..2 {
            let coords: Vec<f64> = (0..3).map(|j| cb.at2(j, c)).collect();
            let lo = coords.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = coords.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let got = out.v_lin.at2(0, c);
            assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
        }
    }

    #[test]
    fn fusion_weight_gradient_passes_finite_differences() {
        use crate::tensor::finite_difference_check;
        let (store, cmml) = fixture(23);
        let mut rng = SeedStream::new(44);
        let (lip, hs, hp) = streams(&mut rng, 3);
        let x = store.get(cmml.fusion_w).clone();
        let report = finite_difference_check(
            |tape, t| {
                let sess = Session::new(tape, &store);
                sess.pin(cmml.fusion_w, t.clone());
                let out = visual_forward(&sess, &cmml, &lip, &hs, &hp)?;
                let a = tape.sum(&tape.mul(&out.lin_logits, &out.lin_logits)?, None)?;
                let b = tape.sum(&tape.mul(&out.vis_logits, &out.vis_logits)?, None)?;
                tape.add(&a, &b)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "err {}", report.max_rel_err);
    }

    #[test]
    fn codebook_gradient_flows_through_attention_and_tied_head() {
        use crate::tensor::finite_difference_check;
        let (store, cmml) = fixture(29);
        let mut rng = SeedStream::new(45);
        let (lip, hs, hp) = streams(&mut rng, 2);
        let x = store.get(cmml.codebook.table).clone();
        let report = finite_difference_check(
            |tape, t| {
                let sess = Session::new(tape, &store);
                sess.pin(cmml.codebook.table, t.clone());
                let out = visual_forward(&sess, &cmml, &lip, &hs, &hp)?;
                tape.sum(&tape.mul(&out.lin_logits, &out.lin_logits)?, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "err {}", report.max_rel_err);
    }
}
