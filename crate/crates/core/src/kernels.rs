//! Attention masks and the raw (tape-free) numerical kernels shared by the
//! autograd ops and by inference code.

use crate::tensor::Scalar;

/// Boolean attention mask over `(query, key)` pairs; `true` means forbidden.
///
/// A mask may describe a batch of independent `[rows × cols]` blocks laid
/// out back to back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    batch: usize,
    rows: usize,
    cols: usize,
    forbidden: Vec<bool>,
}

impl AttnMask {
    /// A single `[rows × cols]` block with no forbidden pair.
    pub fn open(rows: usize, cols: usize) -> Self {
        AttnMask {
            batch: 1,
            rows,
            cols,
            forbidden: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self::batched_from_fn(1, rows, cols, |_, q, k| f(q, k))
    }

    pub fn batched_from_fn(
        batch: usize,
        rows: usize,
        cols: usize,
        f: impl Fn(usize, usize, usize) -> bool,
    ) -> Self {
        let mut forbidden = Vec::with_capacity(batch * rows * cols);
        for b in 0..batch {
            for q in 0..rows {
                for k in 0..cols {
                    forbidden.push(f(b, q, k));
                }
            }
        }
        AttnMask {
            batch,
            rows,
            cols,
            forbidden,
        }
    }

    /// Causal mask: query `q` may see keys `k <= q`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |q, k| k > q)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_forbidden(&self, b: usize, q: usize, k: usize) -> bool {
        self.forbidden[(b * self.rows + q) * self.cols + k]
    }

    /// The forbidden flags of one query row.
    pub fn row(&self, b: usize, q: usize) -> &[bool] {
        let start = (b * self.rows + q) * self.cols;
        &self.forbidden[start..start + self.cols]
    }

    /// Key indices a query row may attend to.
    pub fn permitted(&self, b: usize, q: usize) -> Vec<usize> {
        self.row(b, q)
            .iter()
            .enumerate()
            .filter(|(_, &f)| !f)
            .map(|(k, _)| k)
            .collect()
    }
}

/// In-place softmax over one row, skipping forbidden entries.
///
/// Forbidden entries get exactly zero; a row with no permitted entry becomes
/// all zeros.
pub fn masked_softmax_row<T: Scalar>(row: &mut [T], forbidden: Option<&[bool]>) {
    let allowed = |j: usize| forbidden.is_none_or(|f| !f[j]);
    let mut max = T::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if allowed(j) && x > max {
            max = x;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (j, x) in row.iter_mut().enumerate() {
        if allowed(j) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = T::zero();
        }
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|x| *x *= inv);
}

/// Row-wise log-softmax into `out`.
pub fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

/// Per-row normalization; returns `(xhat, inv_std)` for reuse in backward.
pub(crate) fn layer_norm_rows<T: Scalar>(
    x: &[T],
    d: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
    out: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    let dn = T::lit(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (xhat, inv_std)
}

pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    let na: f64 = a.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Sinusoidal position encoding with interleaved sin/cos columns.
pub fn position_encoding<T: Scalar>(pos: usize, d: usize) -> Vec<T> {
    (0..d)
        .map(|j| {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_pair() {
        let mut r = [0.0f64, 0.0];
        masked_softmax_row(&mut r, None);
        assert_eq!(r, [0.5, 0.5]);
    }

    #[test]
    fn softmax_single_survivor() {
        let mut r = [9.0f64, -3.0];
        masked_softmax_row(&mut r, Some(&[true, false]));
        assert_eq!(r, [0.0, 1.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_zero() {
        let mut r = [1.0f32, 2.0];
        masked_softmax_row(&mut r, Some(&[true, true]));
        assert_eq!(r, [0.0, 0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut out = [0.0f64; 3];
        layer_norm_rows(&[5.0, 5.0, 5.0], 3, &[1.0; 3], &[0.0; 3], 1e-5, &mut out);
        assert_eq!(out, [0.0, 0.0, 0.0]);
        let mut out = [0.0f64; 2];
        layer_norm_rows(&[1.0, -1.0], 2, &[1.0; 2], &[0.0; 2], 1e-14, &mut out);
        assert!((out[0] - 1.0).abs() < 1e-12 && (out[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_matches_two_pass_formula() {
        let x = [0.3f64, -1.2, 2.5, 0.7, -0.1];
        let g = [1.5, 0.5, -1.0, 2.0, 1.0];
        let b = [0.1, 0.2, 0.3, 0.4, 0.5];
        let mut out = [0.0; 5];
        layer_norm_rows(&x, 5, &g, &b, 1e-5, &mut out);
        let mean = x.iter().sum::<f64>() / 5.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        for j in 0..5 {
            let expect = (x[j] - mean) / (var + 1e-5).sqrt() * g[j] + b[j];
            assert!((out[j] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn position_zero_alternates() {
        let pe: Vec<f64> = position_encoding(0, 6);
        assert_eq!(pe, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine(&[1.0f64, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0f64, 0.0], &[0.0, 3.0]), 0.0);
    }
}
