//! CTC loss over phoneme classes with the blank as the last class.
//!
//! Forward/backward run in log space over the blank-interleaved extended
//! label. The gradient is the negative posterior state occupancy, exposed to
//! the tape as a custom op. `ctc_oracle` recomputes the same quantity by
//! enumerating every alignment path, which is tractable only for tiny `T`
//! and exists to cross-check the recursion.

use super::LossError;
use crate::tensor::{CustomOp, Tape, Tensor};

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Minimum number of frames a label needs: one per phoneme plus one
/// separating blank per adjacent repeated pair.
pub fn required_frames(label: &[usize]) -> usize {
    let repeats = label.windows(2).filter(|w| w[0] == w[1]).count();
    label.len() + repeats
}

/// Blank-interleaved extended label `[blank, y1, blank, ..., yL, blank]`.
fn extended(label: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * label.len() + 1);
    ext.push(blank);
    for y in label {
        ext.push(*y);
        ext.push(blank);
    }
    ext
}

fn validate(t: usize, classes: usize, label: &[usize]) -> Result<(), LossError> {
    let blank = classes - 1;
    if let Some(bad) = label.iter().find(|y| **y >= blank) {
        return Err(LossError::LabelRange { id: *bad, classes });
    }
    let need = required_frames(label);
    if t < need {
        return Err(LossError::Infeasible { need, got: t });
    }
    Ok(())
}

/// Alpha recursion; returns (alpha, log p). `lp` is row-major `[t x classes]`.
fn forward_pass(lp: &[f64], t: usize, classes: usize, ext: &[usize]) -> (Vec<f64>, f64) {
    let s = ext.len();
    let blank = classes - 1;
    let mut alpha = vec![f64::NEG_INFINITY; t * s];
    alpha[0] = lp[ext[0]];
    if s > 1 {
        alpha[1] = lp[ext[1]];
    }
    for ti in 1..t {
        for si in 0..s {
            let stay = alpha[(ti - 1) * s + si];
            let step = if si >= 1 {
                alpha[(ti - 1) * s + si - 1]
            } else {
                f64::NEG_INFINITY
            };
            let skip = if si >= 2 && ext[si] != blank && ext[si] != ext[si - 2] {
                alpha[(ti - 1) * s + si - 2]
            } else {
                f64::NEG_INFINITY
            };
            let acc = lse3(stay, step, skip);
            if acc != f64::NEG_INFINITY {
                alpha[ti * s + si] = acc + lp[ti * classes + ext[si]];
            }
        }
    }
    let last = alpha[(t - 1) * s + s - 1];
    let prev = if s > 1 {
        alpha[(t - 1) * s + s - 2]
    } else {
        f64::NEG_INFINITY
    };
    (alpha, lse2(last, prev))
}

fn backward_pass(lp: &[f64], t: usize, classes: usize, ext: &[usize]) -> Vec<f64> {
    let s = ext.len();
    let blank = classes - 1;
    let mut beta = vec![f64::NEG_INFINITY; t * s];
    beta[(t - 1) * s + s - 1] = lp[(t - 1) * classes + ext[s - 1]];
    if s > 1 {
        beta[(t - 1) * s + s - 2] = lp[(t - 1) * classes + ext[s - 2]];
    }
    for ti in (0..t - 1).rev() {
        for si in 0..s {
            let stay = beta[(ti + 1) * s + si];
            let step = if si + 1 < s {
                beta[(ti + 1) * s + si + 1]
            } else {
                f64::NEG_INFINITY
            };
            let skip = if si + 2 < s && ext[si + 2] != blank && ext[si + 2] != ext[si] {
                beta[(ti + 1) * s + si + 2]
            } else {
                f64::NEG_INFINITY
            };
            let acc = lse3(stay, step, skip);
            if acc != f64::NEG_INFINITY {
                beta[ti * s + si] = acc + lp[ti * classes + ext[si]];
            }
        }
    }
    beta
}

struct CtcOp {
    label: Vec<usize>,
    t: usize,
    classes: usize,
}

impl CustomOp for CtcOp {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    /// d loss / d lp[t][c] = -(posterior occupancy of class c at frame t),
    /// scaled by the upstream gradient.
    fn backward(&self, upstream: &[f64], input: &[f64]) -> Vec<f64> {
        let (t, classes) = (self.t, self.classes);
        let ext = extended(&self.label, classes - 1);
        let s = ext.len();
        let (alpha, log_p) = forward_pass(input, t, classes, &ext);
        let beta = backward_pass(input, t, classes, &ext);
        let mut grad = vec![0.0; input.len()];
        for ti in 0..t {
            for (si, cls) in ext.iter().enumerate() {
                let ab = alpha[ti * s + si] + beta[ti * s + si];
                if ab == f64::NEG_INFINITY {
                    continue;
                }
                // alpha and beta both include the frame emission; divide it
                // back out once, then normalize by the sequence likelihood.
                let occupancy = ab - input[ti * classes + cls] - log_p;
                grad[ti * classes + cls] -= occupancy.exp();
            }
        }
        for g in &mut grad {
            *g *= upstream[0];
        }
        grad
    }
}

/// Negative log likelihood of `label` under per-frame log distributions
/// `log_probs` (`[T x classes]`, blank = last class). Labels that cannot fit
/// in `T` frames are rejected rather than returned as infinite loss.
pub fn ctc_loss(tape: &Tape, log_probs: &Tensor, label: &[usize]) -> Result<Tensor, LossError> {
    if log_probs.rank() != 2 {
        return Err(LossError::Tensor(
            crate::tensor::TensorError::ShapeMismatch {
                op: "ctc_loss",
                lhs: log_probs.shape().to_vec(),
                rhs: vec![label.len()],
            },
        ));
    }
    let (t, classes) = (log_probs.rows(), log_probs.cols());
    validate(t, classes, label)?;
    let ext = extended(label, classes - 1);
    let (_, log_p) = forward_pass(log_probs.values(), t, classes, &ext);
    let op = CtcOp {
        label: label.to_vec(),
        t,
        classes,
    };
    let out = super::term("ctc_loss", tape.custom(Box::new(op), log_probs, -log_p))?;
    Ok(out)
}

/// Collapses an alignment path: merge adjacent repeats, then drop blanks.
pub fn collapse_path(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Exact CTC by enumerating all `classes^T` alignment paths of the
/// probability table `probs` (not log). Only usable for tiny instances.
pub fn ctc_oracle(probs: &Tensor, label: &[usize]) -> Result<f64, LossError> {
    assert_eq!(probs.rank(), 2, "ctc_oracle wants [T x classes]");
    let (t, classes) = (probs.rows(), probs.cols());
    assert!(
        (classes as f64).powi(t as i32) <= 2e7,
        "ctc_oracle path count explodes"
    );
    validate(t, classes, label)?;
    let blank = classes - 1;
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    loop {
        if collapse_path(&path, blank) == label {
            let mut p = 1.0;
            for (ti, &c) in path.iter().enumerate() {
                p *= probs.at2(ti, c);
            }
            total += p;
        }
        // Odometer over paths.
        let mut pos = 0;
        loop {
            if pos == t {
                return Ok(-total.ln());
            }
            path[pos] += 1;
            if path[pos] < classes {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use crate::tensor::finite_difference_check;

    fn uniform_lp(t: usize, classes: usize) -> Tensor {
        let v = (1.0 / classes as f64).ln();
        Tensor::new(vec![t, classes], vec![v; t * classes]).unwrap()
    }

    /// Random log-distributions via log_softmax of random logits.
    fn random_lp(rng: &mut SeedStream, t: usize, classes: usize) -> Tensor {
        let tape = Tape::new();
        let logits = Tensor::new(
            vec![t, classes],
            (0..t * classes).map(|_| rng.uniform(-2.0, 2.0)).collect(),
        )
        .unwrap();
        tape.log_softmax(&logits).unwrap()
    }

    #[test]
    fn single_frame_uniform_two_classes() {
        // p(label) = 0.5, loss = ln 2.
        let tape = Tape::new();
        let lp = uniform_lp(1, 2);
        let loss = ctc_loss(&tape, &lp, &[0]).unwrap().item();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn two_frame_uniform_three_matching_paths() {
        // Paths aa, a-, -a out of four: p = 0.75, loss = -ln 0.75.
        let tape = Tape::new();
        let lp = uniform_lp(2, 2);
        let loss = ctc_loss(&tape, &lp, &[0]).unwrap().item();
        assert!((loss + 0.75f64.ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn repeated_label_needs_a_separating_frame() {
        let tape = Tape::new();
        let lp = uniform_lp(2, 2);
        let err = ctc_loss(&tape, &lp, &[0, 0]).unwrap_err();
        assert!(matches!(err, LossError::Infeasible { need: 3, got: 2 }));
    }

    #[test]
    fn blank_is_not_a_legal_label_symbol() {
        let tape = Tape::new();
        let lp = uniform_lp(3, 4);
        assert!(matches!(
            ctc_loss(&tape, &lp, &[3]),
            Err(LossError::LabelRange { id: 3, classes: 4 })
        ));
    }

    #[test]
    fn oracle_one_hot_valid_path_is_zero_loss() {
        // Frames deterministically emit a, a, blank, b: collapses to [a, b].
        let mut v = vec![0.0; 4 * 3];
        for (ti, c) in [0usize, 0, 2, 1].iter().enumerate() {
            v[ti * 3 + c] = 1.0;
        }
        let probs = Tensor::new(vec![4, 3], v).unwrap();
        let loss = ctc_oracle(&probs, &[0, 1]).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn oracle_mass_on_wrong_path_blows_up_loss() {
        let eps = 1e-9;
        let big = 1.0 - 2.0 * eps;
        // Both frames overwhelmingly emit class b, label is [a].
        let probs = Tensor::new(vec![2, 3], vec![eps, big, eps, eps, big, eps]).unwrap();
        let loss = ctc_oracle(&probs, &[0]).unwrap();
        assert!(loss > 15.0, "loss {loss}");
    }

    #[test]
    fn oracle_matches_uniform_hand_value() {
        let probs = Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap();
        let loss = ctc_oracle(&probs, &[0]).unwrap();
        assert!((loss + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn recursion_matches_oracle_on_random_instances() {
        let mut rng = SeedStream::new(2024);
        let mut checked = 0;
        while checked < 60 {
            let t = rng.range(1, 5);
            let classes = rng.range(3, 5); // V in [2, 4]
            let l = rng.range(1, 3);
            let label: Vec<usize> = (0..l).map(|_| rng.below(classes - 1)).collect();
            if required_frames(&label) > t {
                continue;
            }
            let lp = random_lp(&mut rng, t, classes);
            let tape = Tape::new();
            let fast = ctc_loss(&tape, &lp, &label).unwrap().item();
            let probs = Tensor::new(
                lp.shape().to_vec(),
                lp.values().iter().map(|v| v.exp()).collect(),
            )
            .unwrap();
            let slow = ctc_oracle(&probs, &label).unwrap();
            assert!(
                (fast - slow).abs() <= 1e-10,
                "t={t} classes={classes} label={label:?}: {fast} vs {slow}"
            );
            checked += 1;
        }
    }

    #[test]
    fn loss_is_invariant_under_class_relabeling() {
        let mut rng = SeedStream::new(5);
        let lp = random_lp(&mut rng, 4, 4);
        // Swap classes 0 and 2 in both the table and the label.
        let perm = [2usize, 1, 0, 3];
        let mut swapped = vec![0.0; lp.len()];
        for ti in 0..4 {
            for c in 0..4 {
                swapped[ti * 4 + perm[c]] = lp.at2(ti, c);
            }
        }
        let lp_swapped = Tensor::new(vec![4, 4], swapped).unwrap();
        let tape = Tape::new();
        let a = ctc_loss(&tape, &lp, &[0, 1]).unwrap().item();
        let b = ctc_loss(&tape, &lp_swapped, &[2, 1]).unwrap().item();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = SeedStream::new(99);
        for _ in 0..5 {
            let lp = random_lp(&mut rng, 5, 4);
            let report = finite_difference_check(
                |tape, x| {
                    ctc_loss(tape, x, &[1, 0, 1]).map_err(|e| match e {
                        LossError::Tensor(t) => t,
                        LossError::Numeric { source, .. } => source,
                        other => panic!("unexpected ctc failure: {other}"),
                    })
                },
                &lp,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_err <= 1e-6, "err {}", report.max_rel_err);
        }
    }

    #[test]
    fn collapse_merges_then_strips() {
        // [a, a, blank, a] -> [a, a]
        assert_eq!(collapse_path(&[0, 0, 2, 0], 2), vec![0, 0]);
        assert_eq!(collapse_path(&[2, 2, 2], 2), Vec::<usize>::new());
        assert_eq!(collapse_path(&[0, 2, 1, 1], 2), vec![0, 1]);
    }

    #[test]
    fn empty_label_scores_all_blank_mass() {
        let tape = Tape::new();
        let lp = uniform_lp(2, 2);
        // Only the all-blank path matches: p = 0.25.
        let loss = ctc_loss(&tape, &lp, &[]).unwrap().item();
        assert!((loss + 0.25f64.ln()).abs() < 1e-12);
    }
}
