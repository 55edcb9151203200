//! Adam with coupled L2 regularization.

use ndarray::ArrayD;

use crate::error::{Error, Result};

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &[ArrayD<f64>]) -> Self {
        AdamState {
            m: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. The regularization strength enters
/// as an additive gradient term `weight_decay * theta` (coupled L2, the
/// gradient of `weight_decay/2 * ||theta||^2`).
pub fn adam_step(
    params: &mut [ArrayD<f64>],
    grads: &[ArrayD<f64>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::domain(format!(
            "adam_step arity mismatch: {} params, {} grads, {} states",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.raw_dim() != g.raw_dim() {
            return Err(Error::domain(format!(
                "adam_step shape mismatch: {:?} vs {:?}",
                p.shape(),
                g.shape()
            )));
        }
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                let g = g + weight_decay * *p;
                *m = state.beta1 * *m + (1.0 - state.beta1) * g;
                *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
            });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = vec![arr1(&[1.0, -2.0, 3.0]).into_dyn()];
        let grads = vec![arr1(&[0.5, -0.25, 4.0]).into_dyn()];
        let before = params[0].clone();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 1e-2, 0.0).unwrap();
        for ((p, b), g) in params[0].iter().zip(before.iter()).zip(grads[0].iter()) {
            let expected = b - 1e-2 * g / (g.abs() + state.epsilon);
            assert!((p - expected).abs() < 1e-12, "{p} vs {expected}");
        }
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut params = vec![arr1(&[1.0, -2.0]).into_dyn()];
        let grads = vec![arr1(&[0.0, 0.0]).into_dyn()];
        let before = params[0].clone();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 1e-3, 0.0).unwrap();
        assert_eq!(params[0], before);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut params = vec![arr1(&[1.5, -0.5]).into_dyn()];
        let grads = vec![arr1(&[0.3, -0.7]).into_dyn()];
        let before = params[0].clone();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 0.0, 1e-5).unwrap();
        assert_eq!(params[0], before);
    }

    #[test]
    fn pure_decay_shrinks_parameters() {
        let mut params = vec![arr1(&[2.0, -3.0]).into_dyn()];
        let grads = vec![arr1(&[0.0, 0.0]).into_dyn()];
        let mut state = AdamState::new(&params);
        for _ in 0..10 {
            adam_step(&mut params, &grads, &mut state, 1e-2, 1e-3).unwrap();
        }
        assert!(params[0][0] > 0.0 && params[0][0] < 2.0);
        assert!(params[0][1] < 0.0 && params[0][1] > -3.0);
    }
}
