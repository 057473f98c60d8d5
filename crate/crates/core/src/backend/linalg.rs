//! Dense kernels with a fixed summation order, so results do not depend on
//! the host's SIMD width.

use ndarray::{Array2, ArrayView2};

/// `a · b`
pub(crate) fn matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "matmul inner dimensions differ");
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let a = a.as_slice().expect("standard layout");
    let b = b.as_slice().expect("standard layout");
    let mut out = vec![0.0; m * n];
    for (i, row) in out.chunks_exact_mut(n.max(1)).enumerate().take(m) {
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Array2::from_shape_vec((m, n), out).expect("shape matches buffer")
}

/// `a · bᵀ`, summed in the same order as [`matmul`].
pub(crate) fn matmul_t(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    matmul(a, b.t())
}

/// Row-wise layer normalization without affine parameters.
pub(crate) fn layer_norm(x: &Array2<f64>) -> Array2<f64> {
    const EPS: f64 = 1e-5;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

/// In-place numerically stable softmax over each row.
pub(crate) fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// GELU, tanh approximation.
pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
