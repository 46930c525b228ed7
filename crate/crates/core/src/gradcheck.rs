//! Central finite-difference verification of analytic gradients.
//!
//! Lives in the library so both unit tests and the acceptance suite can use
//! it; the numeric side never touches the tape, it only re-evaluates a
//! scalar closure under coordinate perturbations.

use crate::tensor::Tensor;

/// Numeric gradient of `f` with respect to every coordinate of every input,
/// via central differences with step `h`.
pub fn numeric_gradients<F>(mut f: F, inputs: &[Tensor], h: f64) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            grad.data_mut()[j] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grads.push(grad);
    }
    grads
}

/// Worst per-coordinate relative error between analytic and numeric
/// gradients. The denominator is floored at 1e-3 so near-zero coordinates
/// compare absolutely, where the finite-difference noise floor dominates.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape(), "gradient shape mismatch");
        for (av, nv) in a.data().iter().zip(n.data()) {
            let denom = av.abs().max(nv.abs()).max(1e-3);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum(x^2) -> df/dx = 2x
        let x = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let grads = numeric_gradients(
            |inputs| inputs[0].data().iter().map(|v| v * v).sum(),
            &[x.clone()],
            1e-5,
        );
        let expect = Tensor::from_vec(vec![3], vec![2.0, -4.0, 1.0]).unwrap();
        assert!(max_relative_error(&[expect], &grads) < 1e-8);
    }
}
