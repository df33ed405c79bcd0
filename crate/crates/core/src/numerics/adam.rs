use serde::{Deserialize, Serialize};

use super::{NumericsError, Scalar, Tensor};

/// Per-parameter Adam moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T = f64> {
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
    pub step_count: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state with the usual defaults (0.9, 0.999, 1e-8).
    pub fn new(shape: &[usize]) -> Self {
        Self::with_betas(shape, T::lit(0.9), T::lit(0.999), T::lit(1e-8))
    }

    pub fn with_betas(shape: &[usize], beta1: T, beta2: T, eps: T) -> Self {
        Self {
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
            step_count: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update.
///
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)`
pub fn adam_step<T: Scalar>(
    params: &Tensor<T>,
    grads: &Tensor<T>,
    state: &AdamState<T>,
    lr: T,
) -> Result<(Tensor<T>, AdamState<T>), NumericsError> {
    if params.shape() != grads.shape() || state.first_moment.shape() != params.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "params {:?}, grads {:?}, state {:?}",
                params.shape(),
                grads.shape(),
                state.first_moment.shape()
            ),
        });
    }
    if !(lr > T::zero()) {
        return Err(NumericsError::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
    }
    if !grads.is_finite() {
        return Err(NumericsError::NonFinite("adam_step gradients"));
    }

    let step = state.step_count + 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = T::one() - b1.powi(step as i32);
    let bc2 = T::one() - b2.powi(step as i32);

    let m = state.first_moment.zip_map(grads, |m, g| b1 * m + (T::one() - b1) * g);
    let v = state.second_moment.zip_map(grads, |v, g| b2 * v + (T::one() - b2) * g * g);
    let mut updated = params.clone();
    for ((p, &mi), &vi) in updated.values_mut().iter_mut().zip(m.values()).zip(v.values()) {
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    let next = AdamState { first_moment: m, second_moment: v, step_count: step, ..state.clone() };
    Ok((updated, next))
}
