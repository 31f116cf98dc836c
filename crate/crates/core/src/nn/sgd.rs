//! Stochastic gradient descent with momentum and coupled L2 weight decay.

use super::network::{Grads, Network};
use super::Scalar;
use crate::error::{CoreError, Result};

/// One SGD update:
/// `v <- momentum*v + grad + weight_decay*param; param <- param - lr*v`.
pub fn sgd_step<E: Scalar>(
    params: &mut [E],
    grads: &[E],
    velocity: &mut [E],
    lr: E,
    weight_decay: E,
    momentum: E,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(CoreError::ShapeError(format!(
            "sgd buffers disagree: {} params, {} grads, {} velocity",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if !g.is_finite() {
            return Err(CoreError::TrainingDiverged {
                epoch: 0,
                message: "non-finite gradient".into(),
            });
        }
        *v = momentum * *v + *g + weight_decay * *p;
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Momentum state for a whole network; lives outside the model.
pub struct SgdState<E: Scalar> {
    velocity: Vec<Vec<E>>,
}

impl<E: Scalar> SgdState<E> {
    pub fn new(net: &Network<E>) -> Self {
        Self {
            velocity: net.params().iter().map(|p| vec![E::zero(); p.len()]).collect(),
        }
    }

    pub fn buffers(&self) -> &[Vec<E>] {
        &self.velocity
    }

    /// Restore persisted momentum buffers; shapes must match the network.
    pub fn restore(net: &Network<E>, buffers: Vec<Vec<E>>) -> Result<Self> {
        let expected: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
        let got: Vec<usize> = buffers.iter().map(|b| b.len()).collect();
        if expected != got {
            return Err(CoreError::ShapeError("velocity buffers disagree with network".into()));
        }
        Ok(Self { velocity: buffers })
    }

    pub fn step(
        &mut self,
        net: &mut Network<E>,
        grads: &Grads<E>,
        lr: f64,
        weight_decay: f64,
        momentum: f64,
    ) -> Result<()> {
        let mut params = net.params_mut();
        if params.len() != grads.buffers.len() {
            return Err(CoreError::ShapeError("gradient buffers disagree with network".into()));
        }
        for ((p, g), v) in params.iter_mut().zip(&grads.buffers).zip(self.velocity.iter_mut()) {
            sgd_step(
                &mut p.data,
                g,
                v,
                E::cast_from(lr),
                E::cast_from(weight_decay),
                E::cast_from(momentum),
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_momentum_no_decay_is_plain_descent() {
        let mut p = vec![1.0f64, -2.0];
        let g = vec![0.5, 0.25];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-12);
        assert!((p[1] + 2.025).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let mut p = vec![1.0f64, -2.0];
        let g = vec![0.0, 0.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.9).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn quadratic_bowl_contracts() {
        // f(w) = w^2, grad = 2w, 100 steps at lr 0.1 from w = 1.
        let mut w = vec![1.0f64];
        let mut v = vec![0.0f64];
        for _ in 0..100 {
            let g = vec![2.0 * w[0]];
            sgd_step(&mut w, &g, &mut v, 0.1, 0.0, 0.0).unwrap();
        }
        assert!(w[0].abs() < 1e-3, "w = {}", w[0]);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = vec![1.0f64];
        let g = vec![0.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &g, &mut v, 0.1, 0.5, 0.0).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn non_finite_grad_is_divergence() {
        let mut p = vec![1.0f64];
        let g = vec![f64::NAN];
        let mut v = vec![0.0];
        assert!(matches!(
            sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0),
            Err(CoreError::TrainingDiverged { .. })
        ));
    }
}
