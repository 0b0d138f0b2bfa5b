use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{Matrix, Rng, Scalar, Vector};

use super::bits::Signature;

/// Fully connected layer `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(weights: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        ensure_dim("layer bias length", weights.rows(), bias.len())?;
        Ok(Self { weights, bias })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weights: Matrix::zeros(output, input),
            bias: vec![T::zero(); output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn apply_into(&self, x: &[T], out: &mut [T]) {
        for ((o, w), &b) in out.iter_mut().zip(self.weights.iter_rows()).zip(&self.bias) {
            let mut s = b;
            for (&wi, &xi) in w.iter().zip(x) {
                s += wi * xi;
            }
            *o = s;
        }
    }
}

/// Feed-forward map `F` with ReLU hidden layers and a linear output of width `b`.
///
/// Inference signatures are `relu(sign(F(x)))`: bit `j` is set iff `F(x)_j > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingNetwork<T> {
    layers: Vec<Dense<T>>,
}

impl<T: Scalar> MappingNetwork<T> {
    pub fn new(layers: Vec<Dense<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("mapping network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            ensure_dim("layer chaining", pair[0].output_dim(), pair[1].input_dim())?;
        }
        for layer in &layers {
            if !layer.weights.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::Contract("mapping network parameters must be finite".into()));
            }
        }
        if layers.last().map_or(0, Dense::output_dim) == 0 {
            return Err(Error::Contract("mapping network must emit at least one bit".into()));
        }
        Ok(Self { layers })
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Contract(format!(
                "layer dims need >= 2 positive entries, got {dims:?}"
            )));
        }
        Ok(())
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::check_dims(dims)?;
        Self::new(dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect())
    }

    /// He initialisation: weights `N(0, 2/fan_in)`, zero biases.
    pub fn random(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        Self::check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| {
                let std = (2.0 / w[0] as f64).sqrt();
                let weights = crate::numerics::gaussian(rng, w[1], w[0], 0.0, std)?;
                Dense::new(weights, vec![T::zero(); w[1]])
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    /// `[input, hidden..., bits]`
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::output_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn out_bits(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn cast<U: Scalar>(&self) -> MappingNetwork<U> {
        MappingNetwork {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weights: l.weights.cast(),
                    bias: l.bias.iter().map(|&b| U::of(b.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Raw pre-sign outputs `F(x)`.
    pub fn forward_real(&self, x: &[T]) -> Result<Vector<T>> {
        ensure_dim("mapping network input", self.input_dim(), x.len())?;
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = vec![T::zero(); layer.output_dim()];
            layer.apply_into(&h, &mut z);
            if l < last {
                for v in z.iter_mut() {
                    *v = v.max(T::zero());
                }
            }
            h = z;
        }
        Ok(h.into())
    }

    pub fn phi_bits(&self, x: &[T]) -> Result<Signature> {
        let f = self.forward_real(x)?;
        Ok(sign_bits(&f))
    }
}

/// Bit `j` set iff `x_j > 0`; zero maps to an unset bit.
pub fn sign_bits<T: Scalar>(x: &[T]) -> Signature {
    let mut sig = Signature::zeros(x.len());
    for (j, &v) in x.iter().enumerate() {
        if v > T::zero() {
            sig.set(j);
        }
    }
    sig
}
