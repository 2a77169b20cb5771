//! Training losses: CTC, distillation, frame cross-entropy, proximal term.

mod ctc;
pub mod objectives;

pub use ctc::{collapse_path, ctc_loss, ctc_oracle, required_frames};
pub use objectives::{
    client_batch_objective, client_loss_graph, client_objective, server_batch_objective,
    server_loss_graph, server_objective, ClientLossCfg, LossBreakdown, SampleView,
};

use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("ctc: label needs {need} frames, input has {got}")]
    Infeasible { need: usize, got: usize },
    #[error("label id {id} out of range for {classes} classes (blank is last)")]
    LabelRange { id: usize, classes: usize },
    #[error("{term}: {source}")]
    Numeric {
        term: String,
        #[source]
        source: TensorError,
    },
    #[error("{0}")]
    Tensor(#[from] TensorError),
}

/// Wraps tensor failures with the loss term they came from, so a NaN abort
/// can name the offending term.
pub(crate) fn term<T>(name: &str, r: Result<T, TensorError>) -> Result<T, LossError> {
    r.map_err(|source| LossError::Numeric {
        term: name.to_string(),
        source,
    })
}

/// Mean squared feature distance `sum_t ||z_t - v_t||^2 / (2 T)` between two
/// `[T x d]` feature matrices. The caller detaches whichever side plays the
/// teacher.
pub fn kd_loss(tape: &Tape, z: &Tensor, v: &Tensor) -> Result<Tensor, TensorError> {
    if z.rank() != 2 || z.shape() != v.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "kd_loss",
            lhs: z.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let t = z.rows();
    let diff = tape.sub(z, v)?;
    let sq = tape.mul(&diff, &diff)?;
    let total = tape.sum(&sq, None)?;
    tape.scale(&total, 1.0 / (2.0 * t as f64))
}

/// Mean over positions of `-log softmax(logits)[target]`.
pub fn frame_ce(tape: &Tape, logits: &Tensor, targets: &[usize]) -> Result<Tensor, TensorError> {
    if logits.rank() != 2 || logits.rows() != targets.len() {
        return Err(TensorError::ShapeMismatch {
            op: "frame_ce",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let (n, c) = (logits.rows(), logits.cols());
    if let Some(bad) = targets.iter().find(|t| **t >= c) {
        return Err(TensorError::InvalidAxis {
            op: "frame_ce",
            axis: *bad,
            shape: logits.shape().to_vec(),
        });
    }
    let lp = tape.log_softmax(logits)?;
    let mut mask = vec![0.0; n * c];
    for (i, t) in targets.iter().enumerate() {
        mask[i * c + t] = 1.0;
    }
    let mask = Tensor::new(vec![n, c], mask)?;
    let picked = tape.mul(&lp, &mask)?;
    let total = tape.sum(&picked, None)?;
    tape.scale(&total, -1.0 / n as f64)
}

/// Proximal anchor `mu/2 * ||w - w_ref||^2` over a flattened parameter view.
pub fn fedprox_penalty(
    tape: &Tape,
    w: &Tensor,
    w_ref: &Tensor,
    mu: f64,
) -> Result<Tensor, TensorError> {
    if w.shape() != w_ref.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "fedprox_penalty",
            lhs: w.shape().to_vec(),
            rhs: w_ref.shape().to_vec(),
        });
    }
    let diff = tape.sub(w, w_ref)?;
    let sq = tape.mul(&diff, &diff)?;
    let total = tape.sum(&sq, None)?;
    tape.scale(&total, mu / 2.0)
}
