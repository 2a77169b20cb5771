//! Shared phoneme embedding: lookup table plus a projection layer.
//!
//! The linguistic path embeds label sequences through it; the visual path
//! projects the whole table as its codebook. Both read the same handles.

use super::{ParamId, Session};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct EmbeddingHandles {
    pub table: ParamId,  // [V x d]
    pub proj_w: ParamId, // [d x d]
    pub proj_b: ParamId, // [d]
}

/// `projection(relu(table[y]))` for a label sequence; rows with identical
/// phonemes come out identical. Out-of-range ids are rejected.
pub fn embed_text(
    sess: &Session,
    emb: &EmbeddingHandles,
    labels: &[usize],
) -> Result<Tensor, TensorError> {
    let tape = sess.tape();
    let table = sess.param(emb.table);
    let rows = tape.gather_rows(&table, labels)?;
    project(sess, emb, &rows)
}

/// Projects every table row; the visual codebook keys/values come from here.
pub fn codebook_projection(sess: &Session, emb: &EmbeddingHandles) -> Result<Tensor, TensorError> {
    let table = sess.param(emb.table);
    project(sess, emb, &table)
}

fn project(sess: &Session, emb: &EmbeddingHandles, rows: &Tensor) -> Result<Tensor, TensorError> {
    let tape = sess.tape();
    let act = tape.relu(rows)?;
    let w = sess.param(emb.proj_w);
    let b = sess.param(emb.proj_b);
    tape.add(&tape.matmul(&act, &w)?, &b)
}
