use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Gradient of ReLU given its output.
pub fn relu_backward<F: Real>(y: &Tensor<F>, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
    if y.shape() != grad_out.shape() {
        return shape_err("relu gradient shape mismatch");
    }
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > F::zero() { g } else { F::zero() })
        .collect();
    Tensor::from_vec(y.shape(), data)
}

/// Gradient of tanh given its output.
pub fn tanh_backward<F: Real>(y: &[F], grad_out: &[F]) -> Vec<F> {
    y.iter()
        .zip(grad_out)
        .map(|(&v, &g)| g * (F::one() - v * v))
        .collect()
}
