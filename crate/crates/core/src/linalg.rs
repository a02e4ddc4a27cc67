//! Dense helpers with a fixed summation order.
//!
//! Every matrix product in the crate goes through [`matmul`] so that the
//! batched training path and the per-instance inference path accumulate in
//! the same order and agree bit for bit.

use ndarray::{Array2, ArrayView1, ArrayView2};

/// `a·b`. Each output entry accumulates `a[i,p]·b[p,j]` in ascending `p`.
pub fn matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    assert_eq!(a.ncols(), b.nrows(), "matmul inner dimension");
    let (n, k, m) = (a.nrows(), a.ncols(), b.ncols());
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let (a, b) = (a.as_slice().expect("standard"), b.as_slice().expect("standard"));
    let mut out = vec![0.0; n * m];
    for (a_row, out_row) in a.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(m.max(1))) {
        for (p, &x) in a_row.iter().enumerate() {
            for (o, &y) in out_row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += x * y;
            }
        }
    }
    Array2::from_shape_vec((n, m), out).expect("shape")
}

pub fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    assert_eq!(a.len(), b.len(), "dot length");
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax with max subtraction.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn all_finite(m: &Array2<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// `−log softmax(logits)[label]` with max subtraction.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits {
        sum += (z - max).exp();
    }
    sum.ln() - (logits[label] - max)
}

/// `−Σ p ln p` with `0·ln 0 = 0`, using a clamped logarithm.
pub fn entropy(p: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &x in p {
        acc -= x * x.max(crate::autodiff::LOG_CLAMP).ln();
    }
    acc
}
