use super::Tensor;

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_difference_gradient(mut f: impl FnMut(&Tensor) -> f64, w: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut probe = w.clone();
    let mut grad = Tensor::zeros(w.shape());
    for i in 0..w.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}
