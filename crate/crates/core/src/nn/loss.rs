use super::tensor::{Scalar, Tensor};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Mean squared error over all elements and its gradient w.r.t. `pred`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> (f64, Tensor<T>) {
    assert_eq!(pred.shape(), target.shape(), "mse shape mismatch");
    let n = pred.data().len() as f64;
    let scale = T::from_f(2.0 / n);
    let mut grad = Tensor::zeros(pred.shape());
    let mut sum = 0.0;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        sum += d.as_f64() * d.as_f64();
        *g = scale * d;
    }
    (sum / n, grad)
}

/// Binary cross-entropy of probabilities against a constant label, averaged
/// over the batch, with its gradient w.r.t. the probabilities. Clamped
/// entries receive zero gradient.
pub fn bce_loss<T: Scalar>(prob: &Tensor<T>, label: f64) -> (f64, Tensor<T>) {
    let n = prob.data().len() as f64;
    let mut grad = Tensor::zeros(prob.shape());
    let mut sum = 0.0;
    for (g, &p) in grad.data_mut().iter_mut().zip(prob.data()) {
        let raw = p.as_f64();
        let q = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        sum -= label * q.ln() + (1.0 - label) * (1.0 - q).ln();
        let clamped = raw != q;
        *g = if clamped {
            T::zero()
        } else {
            T::from_f((-label / q + (1.0 - label) / (1.0 - q)) / n)
        };
    }
    (sum / n, grad)
}
