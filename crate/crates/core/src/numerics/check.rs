use super::{Scalar, Tensor};

/// Compares an analytic gradient against central finite differences.
///
/// `f` returns the function value together with its analytic gradient at the
/// given point. The result is the largest per-coordinate
/// `|analytic - numeric| / max(1, |analytic|)`; an empty parameter tensor
/// yields zero.
pub fn finite_diff_check<T, F>(f: F, params: &Tensor<T>, h: T) -> T
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> (T, Tensor<T>),
{
    assert!(h > T::zero(), "finite difference step must be positive");
    if params.is_empty() {
        return T::zero();
    }
    let (_, analytic) = f(params);
    let two_h = h + h;
    let mut worst = T::zero();
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus.values_mut()[i] = plus.values()[i] + h;
        let mut minus = params.clone();
        minus.values_mut()[i] = minus.values()[i] - h;
        let numeric = (f(&plus).0 - f(&minus).0) / two_h;
        let a = analytic.values()[i];
        let err = (a - numeric).abs() / a.abs().max(T::one());
        if err > worst {
            worst = err;
        }
    }
    worst
}
