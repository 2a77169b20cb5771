//! Greedy decoding, edit-distance metrics, and feature export.
//!
//! CER counts phoneme edits against total reference length. WER charges
//! whole reference words: a word is wrong if the minimal-edit alignment
//! substitutes or deletes any of its phonemes, or inserts strictly inside
//! it. The same alignment feeds the confusion matrix, with insertions and
//! deletions booked against the blank row and column.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data::CuedSample;
use crate::nn::{visual_forward, ModelBundle, Session};
use crate::tensor::{Tape, Tensor, TensorError};

/// One step of a minimal-edit alignment; indices point into the reference
/// (`r`) and prediction (`h`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignOp {
    Match { r: usize, h: usize },
    Substitute { r: usize, h: usize },
    Delete { r: usize },
    Insert { h: usize },
}

/// Frame-wise argmax (ties break toward the lowest class), collapse
/// adjacent repeats, then drop blanks. Blank is the last column.
pub fn greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    assert_eq!(log_probs.rank(), 2, "greedy_decode wants [T x classes]");
    let classes = log_probs.shape()[1];
    let blank = classes - 1;
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for t in 0..log_probs.rows() {
        let row = &log_probs.values()[t * classes..(t + 1) * classes];
        let mut best = 0;
        for (c, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = c;
            }
        }
        if best != prev && best != blank {
            out.push(best);
        }
        prev = best;
    }
    out
}

fn distance_table(pred: &[usize], reference: &[usize]) -> Vec<Vec<usize>> {
    let (r, h) = (reference.len(), pred.len());
    let mut d = vec![vec![0usize; h + 1]; r + 1];
    for i in 0..=r {
        d[i][0] = i;
    }
    for j in 0..=h {
        d[0][j] = j;
    }
    for i in 1..=r {
        for j in 1..=h {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != pred[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d
}

/// Minimal insert + delete + substitute count between two sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    distance_table(b, a)[a.len()][b.len()]
}

/// One minimal-edit alignment, deterministic under ties: match, then
/// substitution, then deletion, then insertion.
pub fn align(pred: &[usize], reference: &[usize]) -> Vec<AlignOp> {
    let d = distance_table(pred, reference);
    let (mut i, mut j) = (reference.len(), pred.len());
    let mut ops = Vec::with_capacity(i.max(j));
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && reference[i - 1] == pred[j - 1] && d[i][j] == d[i - 1][j - 1] {
            ops.push(AlignOp::Match { r: i - 1, h: j - 1 });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + 1 {
            ops.push(AlignOp::Substitute { r: i - 1, h: j - 1 });
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            ops.push(AlignOp::Delete { r: i - 1 });
            i -= 1;
        } else {
            ops.push(AlignOp::Insert { h: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Corpus CER: total edits over total reference phonemes.
pub fn cer(preds: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    assert_eq!(preds.len(), refs.len(), "cer wants paired corpora");
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    assert!(ref_len > 0, "cer over an empty reference corpus");
    let edits: usize = preds
        .iter()
        .zip(refs)
        .map(|(p, r)| edit_distance(p, r))
        .sum();
    edits as f64 / ref_len as f64
}

fn wrong_words(pred: &[usize], reference: &[usize], word_lengths: &[usize]) -> (usize, usize) {
    assert_eq!(
        word_lengths.iter().sum::<usize>(),
        reference.len(),
        "word lengths must cover the reference"
    );
    let mut word_of = Vec::with_capacity(reference.len());
    let mut starts = Vec::with_capacity(word_lengths.len());
    let mut pos = 0;
    for (w, len) in word_lengths.iter().enumerate() {
        starts.push(pos);
        for _ in 0..*len {
            word_of.push(w);
            pos += 1;
        }
    }
    let mut wrong = vec![false; word_lengths.len()];
    let mut consumed = 0;
    for op in align(pred, reference) {
        match op {
            AlignOp::Match { r, .. } => consumed = r + 1,
            AlignOp::Substitute { r, .. } | AlignOp::Delete { r } => {
                wrong[word_of[r]] = true;
                consumed = r + 1;
            }
            AlignOp::Insert { .. } => {
                // Charged only when the boundary sits strictly inside a word.
                if consumed < reference.len() {
                    let w = word_of[consumed];
                    if consumed > starts[w] {
                        wrong[w] = true;
                    }
                }
            }
        }
    }
    (wrong.iter().filter(|w| **w).count(), word_lengths.len())
}

/// Corpus WER: wrong reference words over total reference words.
pub fn wer(preds: &[Vec<usize>], refs: &[Vec<usize>], word_lengths: &[Vec<usize>]) -> f64 {
    assert_eq!(preds.len(), refs.len(), "wer wants paired corpora");
    assert_eq!(
        preds.len(),
        word_lengths.len(),
        "wer wants word lengths per reference"
    );
    let mut wrong = 0;
    let mut total = 0;
    for ((p, r), w) in preds.iter().zip(refs).zip(word_lengths) {
        let (bad, words) = wrong_words(p, r, w);
        wrong += bad;
        total += words;
    }
    assert!(total > 0, "wer over an empty reference corpus");
    wrong as f64 / total as f64
}

/// (V+1) x (V+1) alignment counts: matches on the diagonal, substitutions
/// off it, deletions in the blank column, insertions in the blank row.
pub fn confusion_matrix(
    preds: &[Vec<usize>],
    refs: &[Vec<usize>],
    classes: usize,
) -> Vec<Vec<usize>> {
    let blank = classes;
    let mut m = vec![vec![0usize; classes + 1]; classes + 1];
    for (pred, reference) in preds.iter().zip(refs) {
        for op in align(pred, reference) {
            match op {
                AlignOp::Match { r, h } | AlignOp::Substitute { r, h } => {
                    m[reference[r]][pred[h]] += 1
                }
                AlignOp::Delete { r } => m[reference[r]][blank] += 1,
                AlignOp::Insert { h } => m[blank][pred[h]] += 1,
            }
        }
    }
    m
}

/// Writes a confusion matrix as row-major comma-separated integers.
pub fn write_confusion(path: &Path, matrix: &[Vec<usize>]) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    for row in matrix {
        let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}

/// Which logits drive decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DecodeHead {
    #[serde(rename = "vis")]
    Visual,
    #[serde(rename = "lin")]
    Linguistic,
    #[serde(rename = "mean")]
    Mean,
}

/// Decodes one sample with the bundle's visual model, no gradients.
pub fn decode_sample(
    bundle: &ModelBundle,
    sample: &CuedSample,
    head: DecodeHead,
) -> Result<Vec<usize>, TensorError> {
    let tape = Tape::new();
    let sess = Session::inference(&tape, &bundle.store);
    let out = visual_forward(
        &sess,
        &bundle.cmml,
        &sample.lip,
        &sample.hand_shape,
        &sample.hand_pos,
    )?;
    let logits = match head {
        DecodeHead::Visual => out.vis_logits,
        DecodeHead::Linguistic => out.lin_logits,
        DecodeHead::Mean => {
            let mixed: Vec<f64> = out
                .vis_logits
                .values()
                .iter()
                .zip(out.lin_logits.values())
                .map(|(a, b)| 0.5 * (a + b))
                .collect();
            Tensor::new(out.vis_logits.shape().to_vec(), mixed)?
        }
    };
    Ok(greedy_decode(&logits))
}

/// Corpus-level scores for one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusScore {
    pub cer: f64,
    pub wer: f64,
}

/// Decodes every sample and scores the corpus.
pub fn evaluate(
    bundle: &ModelBundle,
    samples: &[CuedSample],
    head: DecodeHead,
) -> Result<CorpusScore, TensorError> {
    let preds: Vec<Vec<usize>> = samples
        .par_iter()
        .map(|s| decode_sample(bundle, s, head))
        .collect::<Result<_, _>>()?;
    let refs: Vec<Vec<usize>> = samples.iter().map(|s| s.label.clone()).collect();
    let words: Vec<Vec<usize>> = samples.iter().map(|s| s.word_lengths.clone()).collect();
    Ok(CorpusScore {
        cer: cer(&preds, &refs),
        wer: wer(&preds, &refs, &words),
    })
}

/// Dumps one row per frame: `cuer,phoneme,f0..f{d-1}` comma-separated,
/// where `phoneme` is the id the lips render at that frame.
pub fn export_features(
    bundle: &ModelBundle,
    samples: &[CuedSample],
    path: &Path,
) -> Result<(), ExportError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "# cuer,phoneme,features")?;
    for sample in samples {
        let tape = Tape::new();
        let sess = Session::inference(&tape, &bundle.store);
        let out = visual_forward(
            &sess,
            &bundle.cmml,
            &sample.lip,
            &sample.hand_shape,
            &sample.hand_pos,
        )?;
        let d = out.v_lin.shape()[1];
        for t in 0..out.v_lin.rows() {
            let feats: Vec<String> = (0..d)
                .map(|j| format!("{:?}", out.v_lin.at2(t, j)))
                .collect();
            writeln!(
                f,
                "{},{},{}",
                sample.cuer,
                sample.frame_phonemes[t],
                feats.join(",")
            )?;
        }
    }
    Ok(())
}

/// Feature export can fail in the forward pass or on disk.
#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One row of the experiment log; loss fields are round means, absent
/// terms report zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub method: String,
    pub local_epochs: usize,
    pub seed: u64,
    pub cer: f64,
    pub wer: f64,
    pub loss_ctc_vis: f64,
    pub loss_ctc_lin: f64,
    pub loss_gamma: f64,
    pub loss_kd: f64,
    pub loss_ce_server: f64,
    pub wall_s: f64,
}

impl RoundMetrics {
    pub fn csv_header() -> &'static str {
        "round,method,local_epochs,seed,cer,wer,loss_ctc_vis,loss_ctc_lin,loss_gamma,loss_kd,loss_ce_server,wall_s"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.round,
            self.method,
            self.local_epochs,
            self.seed,
            self.cer,
            self.wer,
            self.loss_ctc_vis,
            self.loss_ctc_lin,
            self.loss_gamma,
            self.loss_kd,
            self.loss_ce_server,
            self.wall_s,
        )
    }
}
