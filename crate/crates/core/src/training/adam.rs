use crate::error::{ensure_dim, Result};
use crate::numerics::Scalar;

use super::model::HashModel;
use super::TrainConfig;

/// Bias-corrected Adam moments, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(model: &HashModel<T>) -> Self {
        Self::for_shapes(model.tensors().iter().map(|t| t.len()))
    }

    pub fn for_shapes(lens: impl IntoIterator<Item = usize>) -> Self {
        let first: Vec<Vec<T>> = lens.into_iter().map(|n| vec![T::zero(); n]).collect();
        Self {
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over matching parameter and gradient tensors.
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[&[T]], cfg: &TrainConfig) -> Result<()> {
        ensure_dim("adam tensor count", self.first.len(), params.len())?;
        ensure_dim("adam gradient count", self.first.len(), grads.len())?;
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            ensure_dim("adam parameter shape", m.len(), p.len())?;
            ensure_dim("adam gradient shape", m.len(), g.len())?;
        }
        self.step += 1;
        let (b1, b2) = (T::of(cfg.adam_beta1), T::of(cfg.adam_beta2));
        let lr = T::of(cfg.learning_rate);
        let eps = T::of(cfg.adam_eps);
        let t = self.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Applies one Adam step of `grads` to `params`.
pub fn adam_step<T: Scalar>(
    state: &mut AdamState<T>,
    params: &mut HashModel<T>,
    grads: &HashModel<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    let g = grads.tensors();
    let mut p = params.tensors_mut();
    state.update(&mut p, &g, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let cfg = TrainConfig::default();
        let mut state = AdamState::<f64>::for_shapes([3]);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..5 {
            state.update(&mut [&mut p], &[&[0.0, 0.0, 0.0]], &cfg).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_hand_value() {
        // m_hat = v_hat = 1 at t = 1, so the step is lr / (1 + eps)
        let cfg = TrainConfig::default();
        let mut state = AdamState::<f64>::for_shapes([1]);
        let mut p = vec![0.0];
        state.update(&mut [&mut p], &[&[1.0]], &cfg).unwrap();
        assert!((p[0] + 0.001).abs() < 1e-6);
        assert!((p[0] + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let cfg = TrainConfig::default();
        let mut state = AdamState::<f64>::for_shapes([2]);
        let mut p = vec![0.0; 3];
        assert!(state.update(&mut [&mut p], &[&[0.0; 3]], &cfg).is_err());
        let mut p2 = vec![0.0; 2];
        assert!(state.update(&mut [&mut p2], &[&[0.0; 1]], &cfg).is_err());
    }

    #[test]
    fn model_step_is_deterministic() {
        let cfg = TrainConfig {
            hidden: vec![4],
            bits: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = HashModel::<f64>::init(2, &cfg).unwrap();
            let mut state = AdamState::new(&model);
            for i in 0..10 {
                let mut grads = model.zeros_like();
                for t in grads.tensors_mut() {
                    for (j, x) in t.iter_mut().enumerate() {
                        *x = ((i * 7 + j) % 5) as f64 - 2.0;
                    }
                }
                adam_step(&mut state, &mut model, &grads, &cfg).unwrap();
            }
            model
        };
        let (a, b) = (run(), run());
        let bits = |m: &HashModel<f64>| -> Vec<u64> {
            m.tensors().iter().flat_map(|t| t.iter().map(|x| x.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }
}
