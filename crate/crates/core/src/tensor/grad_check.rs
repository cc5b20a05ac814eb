//! Central finite differences, used as the independent gradient oracle.

use super::Tensor;

/// Estimates `d f / d theta` by `(f(theta + h e_i) - f(theta - h e_i)) / 2h`
/// for every coordinate of the tensor selected out of `state`.
///
/// The selected tensor is restored bitwise after each probe.
pub fn finite_difference_grad<S>(
    state: &mut S,
    mut select: impl FnMut(&mut S) -> &mut Tensor,
    h: f64,
    mut f: impl FnMut(&S) -> f64,
) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let shape = select(state).shape().to_vec();
    let n = select(state).len();
    let mut grad = Tensor::zeros(&shape);
    for i in 0..n {
        let orig = select(state).data()[i];
        select(state).data_mut()[i] = orig + h;
        let plus = f(state);
        select(state).data_mut()[i] = orig - h;
        let minus = f(state);
        select(state).data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut theta = Tensor::scalar(3.0);
        let g = finite_difference_grad(&mut theta, |t| t, 1e-5, |t| t.item() * t.item());
        assert!((g.item() - 6.0).abs() < 1e-8);
        assert_eq!(theta.item(), 3.0);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut theta = Tensor::filled(&[4], 1.5);
        let g = finite_difference_grad(&mut theta, |t| t, 1e-5, |_| 42.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}
