use crate::tensor::{Elem, Tensor};

/// Elementwise `max(0, x)`.
pub fn relu<T: Elem>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Masks the incoming gradient where the forward output was zero. The
/// subgradient at exactly zero is taken as zero.
pub fn relu_backward<T: Elem>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Tensor<T> {
    assert_eq!(grad_out.shape(), output.shape(), "relu backward shape mismatch");
    let mut grad = grad_out.clone();
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
    grad
}
