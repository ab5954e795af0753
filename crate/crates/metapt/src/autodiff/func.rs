use super::tensor::Tensor;

/// Row-wise softmax. Shift-stabilized; shift invariance keeps the
/// detached row max exact for gradients of any order.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let shifted = x.sub(&x.row_max_detached().broadcast_cols(c));
    let e = shifted.exp();
    // Row sums are >= 1 because the max term contributes exactly 1.
    e.mul(&e.sum_cols().powf(-1.0).broadcast_cols(c))
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let shifted = x.sub(&x.row_max_detached().broadcast_cols(c));
    let log_z = shifted.exp().sum_cols().ln();
    shifted.sub(&log_z.broadcast_cols(c))
}

/// Row-wise layer norm with learned gain and bias (both [1,c]).
pub fn layer_norm_rows(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let (r, c) = x.shape();
    assert_eq!(gamma.shape(), (1, c), "layer_norm_rows: gamma shape");
    assert_eq!(beta.shape(), (1, c), "layer_norm_rows: beta shape");
    let inv_c = 1.0 / c as f64;
    let mean = x.sum_cols().scale(inv_c);
    let centered = x.sub(&mean.broadcast_cols(c));
    let var = centered.mul(&centered).sum_cols().scale(inv_c);
    let inv_std = var.add_scalar(eps).powf(-0.5);
    let normed = centered.mul(&inv_std.broadcast_cols(c));
    normed.mul(&gamma.broadcast_rows(r)).add(&beta.broadcast_rows(r))
}

/// Tanh-form GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    let x3 = x.mul(x).mul(x);
    let inner = x.add(&x3.scale(0.044715)).scale(SQRT_2_OVER_PI);
    x.scale(0.5).mul(&inner.tanh().add_scalar(1.0))
}

pub fn mean_all(x: &Tensor) -> Tensor {
    assert!(x.len() > 0, "mean_all: empty tensor");
    x.sum_all().scale(1.0 / x.len() as f64)
}

/// Negative log-likelihood of `target` under a [1,v] logits row,
/// normalized over the full width.
pub fn cross_entropy_row(logits: &Tensor, target: usize) -> Tensor {
    assert_eq!(logits.rows(), 1, "cross_entropy_row: expected a [1,v] row");
    assert!(target < logits.cols(), "cross_entropy_row: target out of range");
    let lp = log_softmax_rows(logits);
    lp.transpose().gather_rows(&[target]).scale(-1.0)
}
