use crate::error::{ensure_dim, Result};
use crate::numerics::{dot, Matrix, Rng, Scalar, Vector};
use crate::signatures::MappingNetwork;

use super::TrainConfig;

/// Query and key mapping networks plus the scalar predictor head.
///
/// During training a token's logit is
/// `logit_scale * <tanh(F_q(q)), tanh(F_kv(k))> + logit_bias`; at inference
/// only the sign patterns of `F_q` and `F_kv` are used.
#[derive(Debug, Clone, PartialEq)]
pub struct HashModel<T> {
    pub query: MappingNetwork<T>,
    pub key: MappingNetwork<T>,
    pub logit_scale: T,
    pub logit_bias: T,
}

impl<T: Scalar> HashModel<T> {
    /// Both networks are He-initialised from one stream seeded with `cfg.seed`
    /// (query network first).
    pub fn init(input_dim: usize, cfg: &TrainConfig) -> Result<Self> {
        let dims = cfg.layer_dims(input_dim);
        let mut rng = Rng::new(cfg.seed);
        Ok(Self {
            query: MappingNetwork::random(&dims, &mut rng)?,
            key: MappingNetwork::random(&dims, &mut rng)?,
            logit_scale: T::of(cfg.logit_scale),
            logit_bias: T::of(cfg.logit_bias),
        })
    }

    /// Same shapes, every parameter zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            query: MappingNetwork::zeros(&self.query.layer_dims()).expect("valid dims"),
            key: MappingNetwork::zeros(&self.key.layer_dims()).expect("valid dims"),
            logit_scale: T::zero(),
            logit_bias: T::zero(),
        }
    }

    pub fn bits(&self) -> usize {
        self.query.out_bits()
    }

    pub fn cast<U: Scalar>(&self) -> HashModel<U> {
        HashModel {
            query: self.query.cast(),
            key: self.key.cast(),
            logit_scale: U::of(self.logit_scale.as_f64()),
            logit_bias: U::of(self.logit_bias.as_f64()),
        }
    }

    /// Parameter tensors in a fixed order: query layers (weights, bias), key
    /// layers (weights, bias), logit scale, logit bias.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for net in [&self.query, &self.key] {
            for l in net.layers() {
                out.push(l.weights.as_slice());
                out.push(l.bias.as_slice());
            }
        }
        out.push(std::slice::from_ref(&self.logit_scale));
        out.push(std::slice::from_ref(&self.logit_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for net in [&mut self.query, &mut self.key] {
            for l in net.layers_mut() {
                out.push(l.weights.as_mut_slice());
                out.push(l.bias.as_mut_slice());
            }
        }
        out.push(std::slice::from_mut(&mut self.logit_scale));
        out.push(std::slice::from_mut(&mut self.logit_bias));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Soft-partitioned embedding `tanh(F(x))`.
pub fn forward_tanh<T: Scalar>(net: &MappingNetwork<T>, x: &[T]) -> Result<Vector<T>> {
    let mut f = net.forward_real(x)?;
    for v in f.iter_mut() {
        *v = v.tanh();
    }
    Ok(f)
}

/// Predictor logits of one query against every key row.
pub fn logits<T: Scalar>(model: &HashModel<T>, q: &[T], keys: &Matrix<T>) -> Result<Vector<T>> {
    ensure_dim("logits key width", model.key.input_dim(), keys.cols())?;
    let eq = forward_tanh(&model.query, q)?;
    keys.iter_rows()
        .map(|k| {
            let ek = forward_tanh(&model.key, k)?;
            Ok(model.logit_scale * T::of(dot(&eq, &ek)) + model.logit_bias)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian;
    use crate::signatures::{Dense, MappingNetwork};

    #[test]
    fn zero_network_tanh_is_zero() {
        let net = MappingNetwork::<f64>::zeros(&[3, 4, 2]).unwrap();
        assert!(forward_tanh(&net, &[1.0, 2.0, 3.0]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturation_matches_sign() {
        let layer = Dense::new(Matrix::identity(4).scale(100.0), vec![0.0; 4]).unwrap();
        let net = MappingNetwork::new(vec![layer]).unwrap();
        let x = [0.5f64, -0.3, 0.2, -1.0];
        let t = forward_tanh(&net, &x).unwrap();
        let bits = net.phi_bits(&x).unwrap();
        for (j, v) in t.iter().enumerate() {
            assert!((v.abs() - 1.0).abs() < 1e-6);
            assert_eq!(bits.get(j), *v > 0.0);
        }
    }

    #[test]
    fn tanh_matches_elementwise_oracle() {
        let mut rng = Rng::new(3);
        let net = MappingNetwork::<f64>::random(&[5, 9, 6], &mut rng).unwrap();
        let x = gaussian::<f64>(&mut rng, 1, 5, 0.0, 1.0).unwrap();
        let raw = net.forward_real(x.as_slice()).unwrap();
        let t = forward_tanh(&net, x.as_slice()).unwrap();
        for (a, b) in t.iter().zip(raw.iter()) {
            assert!((a - b.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_cases() {
        let cfg = TrainConfig {
            hidden: vec![7],
            bits: 5,
            ..TrainConfig::default()
        };
        let mut model = HashModel::<f64>::init(4, &cfg).unwrap();
        model.key = model.query.clone();
        let q = [0.3, -0.2, 1.1, 0.0];
        let keys = Matrix::from_rows(&[q]).unwrap();
        let l = logits(&model, &q, &keys).unwrap();
        let e = forward_tanh(&model.query, &q).unwrap();
        assert!((l[0] - dot(&e, &e)).abs() < 1e-15);
        assert!(l[0] >= 0.0);

        // zero key network: orthogonal embeddings, logit equals bias
        let mut m2 = model.clone();
        m2.key = MappingNetwork::zeros(&m2.key.layer_dims()).unwrap();
        m2.logit_bias = -0.75;
        assert_eq!(logits(&m2, &q, &keys).unwrap()[0], -0.75);
    }

    #[test]
    fn logits_match_composition() {
        let mut rng = Rng::new(4);
        let cfg = TrainConfig {
            hidden: vec![8, 8],
            bits: 6,
            logit_scale: 1.7,
            logit_bias: 0.2,
            ..TrainConfig::default()
        };
        let model = HashModel::<f64>::init(3, &cfg).unwrap();
        let keys = gaussian::<f64>(&mut rng, 9, 3, 0.0, 1.0).unwrap();
        let q = [1.0, -1.0, 0.5];
        let l = logits(&model, &q, &keys).unwrap();
        for (i, k) in keys.iter_rows().enumerate() {
            let a: Vec<f64> = model.query.forward_real(&q).unwrap().iter().map(|v| v.tanh()).collect();
            let b: Vec<f64> = model.key.forward_real(k).unwrap().iter().map(|v| v.tanh()).collect();
            let mut s = 0.0;
            for j in 0..6 {
                s += a[j] * b[j];
            }
            assert!((l[i] - (1.7 * s + 0.2)).abs() < 1e-12);
        }
    }
}
