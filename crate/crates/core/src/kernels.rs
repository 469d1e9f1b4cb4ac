//! Forward kernels shared by the differentiable tape and the plain (tape-free) API.

use crate::scalar::Scalar;
use crate::tensor::{dot, log_sum_exp, softmax, Matrix};

/// `out[k] = Σ_i a[i] · b[(i + k) mod d]`
pub fn circular_correlation<T: Scalar>(a: &[T], b: &[T], out: &mut [T]) {
    let d = a.len();
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for i in 0..d {
            acc += a[i] * b[(i + k) % d];
        }
        *o = acc;
    }
}

/// Output of the multi-head attentive pooling kernel.
pub struct PoolOutput<T> {
    pub pooled: Matrix<T>,
    /// `weights[row][head][j]`, one softmax over the history per head.
    pub weights: Vec<Vec<Vec<T>>>,
}

/// Row-wise multi-head attention of one query against `keys.len()` history entries.
///
/// Head `h` owns the column block `[h·w, (h+1)·w)` of the projected query, keys and values,
/// with `w = cols / heads`.
pub fn attention_pool<T: Scalar>(
    query: &Matrix<T>,
    keys: &[&Matrix<T>],
    values: &[&Matrix<T>],
    heads: usize,
    scale: T,
) -> PoolOutput<T> {
    let (rows, cols) = query.shape();
    let width = cols / heads;
    let mut pooled = Matrix::zeros(rows, cols);
    let mut weights = Vec::with_capacity(rows);
    for r in 0..rows {
        let q = query.row(r);
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let span = h * width..(h + 1) * width;
            let scores: Vec<T> = keys
                .iter()
                .map(|k| dot(&q[span.clone()], &k.row(r)[span.clone()]) * scale)
                .collect();
            let w = softmax(&scores);
            let out = &mut pooled.row_mut(r)[span.clone()];
            for (wj, v) in w.iter().zip(values) {
                for (o, &vv) in out.iter_mut().zip(&v.row(r)[span.clone()]) {
                    *o += *wj * vv;
                }
            }
            per_head.push(w);
        }
        weights.push(per_head);
    }
    PoolOutput { pooled, weights }
}

/// Supervised contrastive loss summed over anchors that have at least one positive.
///
/// For anchor `i` the positives are the other batch members with the same label and the
/// normaliser runs over every other batch member.
pub fn supervised_contrastive<T: Scalar>(v: &Matrix<T>, labels: &[bool], temperature: T) -> T {
    let n = v.rows();
    let sims = v.matmul_bt(v);
    let mut total = T::zero();
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        let lse = log_sum_exp(
            (0..n)
                .filter(|&k| k != i)
                .map(|k| sims.get(i, k) / temperature),
        );
        let mean_pos = positives
            .iter()
            .map(|&j| sims.get(i, j) / temperature)
            .sum::<T>()
            / T::of(positives.len() as f64);
        total += lse - mean_pos;
    }
    total
}

/// Gradient of [`supervised_contrastive`] with respect to the representations.
pub fn supervised_contrastive_grad<T: Scalar>(
    v: &Matrix<T>,
    labels: &[bool],
    temperature: T,
) -> Matrix<T> {
    let (n, d) = v.shape();
    let sims = v.matmul_bt(v);
    let mut coef = Matrix::zeros(n, n);
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        let others: Vec<usize> = (0..n).filter(|&k| k != i).collect();
        let scores: Vec<T> = others
            .iter()
            .map(|&k| sims.get(i, k) / temperature)
            .collect();
        let p = softmax(&scores);
        for (&k, &pk) in others.iter().zip(&p) {
            coef.set(i, k, pk);
        }
        let share = T::one() / T::of(positives.len() as f64);
        for &j in &positives {
            coef.set(i, j, coef.get(i, j) - share);
        }
    }
    // L depends on s_ik = v_i·v_k / μ, so both endpoints receive c_ik / μ.
    let mut grad = Matrix::zeros(n, d);
    for i in 0..n {
        for k in 0..n {
            let c = coef.get(i, k) / temperature;
            if c == T::zero() {
                continue;
            }
            for col in 0..d {
                let gi = grad.get(i, col) + c * v.get(k, col);
                grad.set(i, col, gi);
                let gk = grad.get(k, col) + c * v.get(i, col);
                grad.set(k, col, gk);
            }
        }
    }
    grad
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Mean binary cross-entropy from logits, stable for large |z|.
pub fn bce_with_logits<T: Scalar>(logits: &[T], targets: &[T]) -> T {
    let n = T::of(logits.len().max(1) as f64);
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
        .sum::<T>()
        / n
}
