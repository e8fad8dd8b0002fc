//! Class scores from features: cosine classifiers and prototypes.

use crate::error::{Error, Result};
use crate::tensor::{Real, Similarity, Tape, Tensor, Var};

/// `exp(log_gamma) · cos(f, w_j)` for every row of `f` and `w`.
pub fn cosine_logits<T: Real>(
    tape: &mut Tape<'_, T>,
    f: Var,
    w: Var,
    log_gamma: Var,
) -> Result<Var> {
    let cos = tape.cosine_similarity(f, w)?;
    let gamma = tape.exp(log_gamma);
    tape.mul_scalar(cos, gamma)
}

/// Softmax over `γ · cos(f, w_j)`; rows of `f` are queries, rows of `w` classes.
pub fn cosine_scores<T: Real>(f: &Tensor<T>, w: &Tensor<T>, gamma: T) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (fv, wv) = (tape.constant(f.clone()), tape.constant(w.clone()));
    let cos = tape.cosine_similarity(fv, wv)?;
    let logits = tape.scale(cos, gamma);
    let p = tape.softmax(logits)?;
    Ok(tape.value(p).clone())
}

/// Per-class mean of `features` (`[n, d]`) grouped by `labels` in `0..num_classes`.
pub fn compute_prototypes<T: Real>(
    features: &Tensor<T>,
    labels: &[usize],
    num_classes: usize,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let p = tape.group_mean(f, labels, num_classes)?;
    Ok(tape.value(p).clone())
}

/// Softmax over `sim(f_q, p_j)`.
pub fn pn_scores<T: Real>(
    queries: &Tensor<T>,
    prototypes: &Tensor<T>,
    sim: Similarity,
) -> Result<Tensor<T>> {
    if queries.shape().len() != 2
        || prototypes.shape().len() != 2
        || queries.shape()[1] != prototypes.shape()[1]
    {
        return Err(Error::mismatch(
            "pn_scores",
            queries.shape(),
            prototypes.shape(),
        ));
    }
    let mut tape = Tape::new();
    let (q, p) = (
        tape.constant(queries.clone()),
        tape.constant(prototypes.clone()),
    );
    let s = tape.similarity(q, p, sim)?;
    let probs = tape.softmax(s)?;
    Ok(tape.value(probs).clone())
}

/// Row-wise argmax of a `[B, N]` tensor; ties go to the lowest index.
pub fn argmax_rows<T: Real>(scores: &Tensor<T>) -> Vec<usize> {
    let n = scores.row_len();
    scores
        .data()
        .chunks(n)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
