use super::{AutodiffError, Real, Tensor};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Adam moments for a fixed, ordered list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self::with_hyperparams(params, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS)
    }

    pub fn with_hyperparams(params: &[Tensor<T>], beta1: f64, beta2: f64, eps: f64) -> Self {
        assert!(0.0 < beta1 && beta1 < 1.0 && 0.0 < beta2 && beta2 < 1.0, "Adam betas must lie in (0, 1)");
        AdamState {
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update.
///
/// A `None` gradient leaves that parameter and its moments untouched (frozen or
/// unused parameters); the step counter still advances once per call.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Option<&[T]>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), AutodiffError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "adam_step",
            detail: format!("{} params, {} grads, {} moment slots", params.len(), grads.len(), state.m.len()),
        });
    }
    if !(lr > 0.0) {
        return Err(AutodiffError::InvalidArgument(format!("learning rate {lr} must be positive")));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.len() != p.numel() || state.m[i].len() != p.numel() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("parameter {i} has {} values, gradient {}", p.numel(), g.len()),
                });
            }
        }
    }

    state.t += 1;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let one = T::one();
    let correction1 = T::of(1.0 - state.beta1.powi(state.t as i32));
    let correction2 = T::of(1.0 - state.beta2.powi(state.t as i32));
    let (lr, eps) = (T::of(lr), T::of(state.eps));

    for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
        let Some(grad) = grad else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((theta, &g), m), v) in param.data_mut().iter_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = vec![Tensor::<f64>::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap()];
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let zeros = vec![0.0; 3];
        adam_step(&mut params, &[Some(&zeros)], &mut state, 1e-4).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        let mut params = vec![Tensor::<f64>::zeros(vec![1])];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[Some(&[1.0])], &mut state, 1e-4).unwrap();
        // m̂ = v̂ = 1 at t = 1, so Δθ = -lr / (1 + ε).
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((params[0].item() - expected).abs() < 1e-18, "{}", params[0].item());
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        let mut params = vec![Tensor::<f32>::full(vec![2], 1.0)];
        let mut state = AdamState::new(&params);
        let g = [0.3f32, 0.3];
        let mut last = 1.0f32;
        for _ in 0..2 {
            adam_step(&mut params, &[Some(&g)], &mut state, 1e-2).unwrap();
            assert!(params[0].data()[0] < last);
            last = params[0].data()[0];
        }
    }

    #[test]
    fn frozen_slot_untouched_and_shapes_checked() {
        let mut params = vec![Tensor::<f32>::full(vec![2], 1.0), Tensor::<f32>::full(vec![1], 2.0)];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[None, Some(&[1.0])], &mut state, 0.1).unwrap();
        assert_eq!(params[0].data(), &[1.0, 1.0]);
        assert!(params[1].item() < 2.0);
        assert!(adam_step(&mut params, &[None, Some(&[1.0, 2.0])], &mut state, 0.1).is_err());
        assert!(adam_step(&mut params, &[None], &mut state, 0.1).is_err());
        assert!(adam_step(&mut params, &[None, None], &mut state, 0.0).is_err());
    }
}
