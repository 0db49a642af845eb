//! Shared contrastive loss: symmetric two-term InfoNCE over paired batches,
//! used to align quantizer latents, propagated user embeddings, and
//! history/code means. One tape builder for training plus a plain scalar
//! oracle that tests compare against.

use crate::tape::{Mat, Tape, Var};

pub const COSINE_EPS: f64 = 1e-8;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

/// Symmetric InfoNCE between row-paired batches `a` and `b` (B×d each).
/// Similarity is ε-guarded cosine; the softmax denominator runs over the
/// whole batch including the positive, so the loss is nonnegative and is
/// exactly zero at B=1. `tau` is a 1×1 learnable temperature, clamped to
/// [0.01, 1.0] inside the graph.
pub fn info_nce(tape: &mut Tape, a: Var, b: Var, tau: Var) -> Var {
    let (ba, _) = tape.shape(a);
    let (bb, _) = tape.shape(b);
    assert_eq!(ba, bb, "paired batches must match");
    let sim = tape.cosine_matrix(a, b, COSINE_EPS);
    let tau_c = tape.clamp(tau, TAU_MIN, TAU_MAX);
    let inv = tape.recip(tau_c);
    let scaled = tape.scale_by_var(sim, inv);
    let lse_rows = tape.row_lse(scaled);
    let scaled_t = tape.transpose(scaled);
    let lse_cols = tape.row_lse(scaled_t);
    let diag = tape.diag(scaled);
    let both = tape.add(lse_rows, lse_cols);
    let twice = tape.scale(diag, 2.0);
    let per_row = tape.sub(both, twice);
    let total = tape.sum_all(per_row);
    tape.scale(total, 1.0 / ba as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = 1.0 / (a.iter().map(|x| x * x).sum::<f64>() + COSINE_EPS).sqrt();
    let nb = 1.0 / (b.iter().map(|x| x * x).sum::<f64>() + COSINE_EPS).sqrt();
    a.iter().zip(b).map(|(x, y)| x * na * y * nb).sum()
}

fn lse(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Plain-scalar reference implementation of [`info_nce`].
pub fn info_nce_oracle(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let t = tau.clamp(TAU_MIN, TAU_MAX);
    let mut total = 0.0;
    for u in 0..n {
        let row: Vec<f64> = (0..n).map(|j| cosine(&a[u], &b[j]) / t).collect();
        let col: Vec<f64> = (0..n).map(|i| cosine(&a[i], &b[u]) / t).collect();
        let pos = cosine(&a[u], &b[u]) / t;
        total += (lse(&row) - pos) + (lse(&col) - pos);
    }
    total / n as f64
}

/// Convenience wrapper when the batches live outside a tape.
pub fn info_nce_value(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let d = a[0].len();
    let flat = |rows: &[Vec<f64>]| {
        Mat::from_vec(rows.len(), d, rows.iter().flatten().copied().collect())
    };
    let mut tape = Tape::new();
    let av = tape.constant(flat(a));
    let bv = tape.constant(flat(b));
    let tv = tape.constant(Mat::scalar(tau));
    let l = info_nce(&mut tape, av, bv, tv);
    tape.value(l).item()
}
