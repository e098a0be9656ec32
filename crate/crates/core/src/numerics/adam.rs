use crate::error::{Error, Result};

use super::Matrix;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step: 0,
        }
    }

    pub fn for_param(param: &Matrix, config: AdamConfig) -> Self {
        Self::new(param.rows(), param.cols(), config)
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut Matrix, grad: &Matrix, state: &mut AdamState) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::Dimension(format!(
            "adam: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for (((p, &g), m), v) in param
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut p = Matrix::from_rows(&[vec![1.0, -2.0, 3.5]]).unwrap();
        let before = p.clone();
        let g = Matrix::zeros(1, 3);
        let mut s = AdamState::for_param(&p, AdamConfig::default());
        for _ in 0..50 {
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.step, 50);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let lr = 0.01;
        let cfg = AdamConfig {
            lr,
            ..AdamConfig::default()
        };
        let mut p = Matrix::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        let g = Matrix::from_rows(&[vec![3.0, -0.2, 1e-3]]).unwrap();
        let mut s = AdamState::for_param(&p, cfg);
        adam_step(&mut p, &g, &mut s).unwrap();
        for (after, grad) in p.as_slice().iter().zip(g.as_slice()) {
            let moved = 1.0 - after;
            assert!((moved - lr * grad.signum()).abs() < 1e-4 * lr);
        }
    }

    #[test]
    fn minimizes_quadratic_bowl() {
        let cfg = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        let mut w = Matrix::from_rows(&[vec![1.0, -0.5, 0.25, 2.0]]).unwrap();
        let mut s = AdamState::for_param(&w, cfg);
        let mut steps = 0;
        while w.norm_sq().sqrt() >= 1e-3 && steps < 2000 {
            let g = w.map(|x| 2.0 * x);
            adam_step(&mut w, &g, &mut s).unwrap();
            steps += 1;
        }
        assert!(w.norm_sq().sqrt() < 1e-3, "norm {} after {steps}", w.norm_sq().sqrt());
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Matrix::zeros(2, 2);
        let g = Matrix::zeros(1, 4);
        let mut s = AdamState::for_param(&p, AdamConfig::default());
        assert!(adam_step(&mut p, &g, &mut s).is_err());
    }
}
