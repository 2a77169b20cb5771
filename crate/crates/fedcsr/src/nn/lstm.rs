//! Bidirectional LSTM encoder/decoder for the server-side linguistic model.
//!
//! The encoder reads an embedded label sequence; the decoder re-reads a
//! length-adapted copy of the encoder output so the stack can emit a row per
//! output position, however many the caller asks for.

use super::embedding::{embed_text, EmbeddingHandles};
use super::{ParamId, Session};
use crate::tensor::{Tensor, TensorError};

/// One direction of one layer. Gate order inside the fused matrices is
/// input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmLayerHandles {
    pub w_ih: ParamId, // [in x 4h]
    pub w_hh: ParamId, // [h x 4h]
    pub b: ParamId,    // [4h]
}

/// Encoder and decoder stacks plus the two output projections.
/// Layer counts are the vector lengths; each entry is [forward, backward].
#[derive(Debug, Clone)]
pub struct BiLstmHandles {
    pub hidden: usize,
    pub encoder: Vec<[LstmLayerHandles; 2]>,
    pub decoder: Vec<[LstmLayerHandles; 2]>,
    pub out_w: ParamId,  // [2h x d]
    pub out_b: ParamId,  // [d]
    pub head_w: ParamId, // [d x (V+1)]
    pub head_b: ParamId, // [V+1]
}

/// Distillation-facing features and classifier logits, one row per position.
#[derive(Debug, Clone)]
pub struct LinguisticOut {
    pub z_lin: Tensor,  // [out_len x d]
    pub logits: Tensor, // [out_len x (V+1)]
}

/// Runs one LSTM direction over `input` [T x in], returning [T x h] in
/// original time order. `h0` is [1 x h]; the cell state always starts at 0.
fn run_direction(
    sess: &Session,
    layer: &LstmLayerHandles,
    input: &Tensor,
    h0: &Tensor,
    reverse: bool,
    hidden: usize,
) -> Result<Tensor, TensorError> {
    let tape = sess.tape();
    let steps = input.rows();
    let w_ih = sess.param(layer.w_ih);
    let w_hh = sess.param(layer.w_hh);
    let b = sess.param(layer.b);

    // One big input projection up front; per step we only slice a row of it.
    let pre_all = tape.add(&tape.matmul(input, &w_ih)?, &b)?;

    let mut h = h0.clone();
    let mut c = Tensor::zeros(vec![1, hidden]);
    let mut outputs: Vec<Tensor> = Vec::with_capacity(steps);
    for step in 0..steps {
        let t = if reverse { steps - 1 - step } else { step };
        let pre_x = tape.slice_rows(&pre_all, t, t + 1)?;
        let pre = tape.add(&pre_x, &tape.matmul(&h, &w_hh)?)?;
        let i = tape.sigmoid(&tape.slice_cols(&pre, 0, hidden)?)?;
        let f = tape.sigmoid(&tape.slice_cols(&pre, hidden, 2 * hidden)?)?;
        let g = tape.tanh(&tape.slice_cols(&pre, 2 * hidden, 3 * hidden)?)?;
        let o = tape.sigmoid(&tape.slice_cols(&pre, 3 * hidden, 4 * hidden)?)?;
        c = tape.add(&tape.mul(&f, &c)?, &tape.mul(&i, &g)?)?;
        h = tape.mul(&o, &tape.tanh(&c)?)?;
        outputs.push(h.clone());
    }
    if reverse {
        outputs.reverse();
    }
    let refs: Vec<&Tensor> = outputs.iter().collect();
    tape.concat_rows(&refs)
}

/// One bidirectional layer: both directions over the same input, outputs
/// concatenated per step to [T x 2h].
fn bilstm_layer(
    sess: &Session,
    pair: &[LstmLayerHandles; 2],
    input: &Tensor,
    h0_fwd: &Tensor,
    h0_bwd: &Tensor,
    hidden: usize,
) -> Result<Tensor, TensorError> {
    let fwd = run_direction(sess, &pair[0], input, h0_fwd, false, hidden)?;
    let bwd = run_direction(sess, &pair[1], input, h0_bwd, true, hidden)?;
    sess.tape().concat_cols(&fwd, &bwd)
}

/// Full linguistic pass: embed the labels, encode, then decode `out_len`
/// rows. Decoder inputs are the encoder output resampled by
/// `floor(i * L / out_len)`, and every decoder layer starts from the
/// per-direction time-mean of the final encoder layer.
pub fn linguistic_forward(
    sess: &Session,
    emb: &EmbeddingHandles,
    lstm: &BiLstmHandles,
    labels: &[usize],
    out_len: usize,
) -> Result<LinguisticOut, TensorError> {
    assert!(!labels.is_empty(), "linguistic_forward on empty labels");
    let z_txt = embed_text(sess, emb, labels)?;
    linguistic_from_embedded(sess, lstm, &z_txt, out_len)
}

/// Same pass over an already-embedded sequence; callers that must stop
/// gradients at the embedding hand in a detached tensor.
pub fn linguistic_from_embedded(
    sess: &Session,
    lstm: &BiLstmHandles,
    z_txt: &Tensor,
    out_len: usize,
) -> Result<LinguisticOut, TensorError> {
    assert!(z_txt.rows() > 0, "linguistic pass on an empty sequence");
    assert!(out_len > 0, "linguistic pass with out_len = 0");
    let tape = sess.tape();
    let hidden = lstm.hidden;
    let zero = Tensor::zeros(vec![1, hidden]);

    let mut enc = z_txt.clone();
    for pair in &lstm.encoder {
        enc = bilstm_layer(sess, pair, &enc, &zero, &zero, hidden)?;
    }

    let summary = tape.reshape(&tape.mean(&enc, Some(0))?, vec![1, 2 * hidden])?;
    let h0_fwd = tape.slice_cols(&summary, 0, hidden)?;
    let h0_bwd = tape.slice_cols(&summary, hidden, 2 * hidden)?;

    let src = z_txt.rows();
    let idx: Vec<usize> = (0..out_len).map(|i| i * src / out_len).collect();
    let mut dec = tape.gather_rows(&enc, &idx)?;
    for pair in &lstm.decoder {
        dec = bilstm_layer(sess, pair, &dec, &h0_fwd, &h0_bwd, hidden)?;
    }

    let out_w = sess.param(lstm.out_w);
    let out_b = sess.param(lstm.out_b);
    let z_lin = tape.add(&tape.matmul(&dec, &out_w)?, &out_b)?;
    let head_w = sess.param(lstm.head_w);
    let head_b = sess.param(lstm.head_b);
    let logits = tape.add(&tape.matmul(&z_lin, &head_w)?, &head_b)?;
    Ok(LinguisticOut { z_lin, logits })
}
