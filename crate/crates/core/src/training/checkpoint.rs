use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};
use crate::signatures::{Dense, MappingNetwork};

use super::model::HashModel;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetPair<X> {
    pub query: X,
    pub key: X,
}

/// JSON checkpoint of a trained model.
///
/// `weights.query[l][o][i]` is the weight from input `i` to output `o` of
/// layer `l` (row-major, `out x in`). Floats are written in shortest
/// round-trip form, so loading restores every parameter bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub arch: Vec<usize>,
    pub activation: String,
    pub bits: usize,
    pub logit_scale: f64,
    pub logit_bias: f64,
    pub seed: u64,
    pub weights: NetPair<Vec<Vec<Vec<f64>>>>,
    pub biases: NetPair<Vec<Vec<f64>>>,
}

fn net_weights<T: Scalar>(net: &MappingNetwork<T>) -> Vec<Vec<Vec<f64>>> {
    net.layers()
        .iter()
        .map(|l| {
            l.weights
                .iter_rows()
                .map(|r| r.iter().map(|x| x.as_f64()).collect())
                .collect()
        })
        .collect()
}

fn net_biases<T: Scalar>(net: &MappingNetwork<T>) -> Vec<Vec<f64>> {
    net.layers()
        .iter()
        .map(|l| l.bias.iter().map(|x| x.as_f64()).collect())
        .collect()
}

fn rebuild<T: Scalar>(arch: &[usize], weights: &[Vec<Vec<f64>>], biases: &[Vec<f64>]) -> Result<MappingNetwork<T>> {
    if arch.len() < 2 || weights.len() != arch.len() - 1 || biases.len() != arch.len() - 1 {
        return Err(Error::Format(format!(
            "checkpoint layer count does not match arch {arch:?}"
        )));
    }
    let layers = weights
        .iter()
        .zip(biases)
        .zip(arch.windows(2))
        .map(|((w, b), dims)| {
            if w.len() != dims[1] || w.iter().any(|r| r.len() != dims[0]) {
                return Err(Error::Format(format!(
                    "checkpoint weight block is not {} x {}",
                    dims[1], dims[0]
                )));
            }
            let m = Matrix::from_rows(w)?.cast::<T>();
            Dense::new(m, b.iter().map(|&x| T::of(x)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    MappingNetwork::new(layers)
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &HashModel<T>, seed: u64) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            arch: model.query.layer_dims(),
            activation: "relu".into(),
            bits: model.bits(),
            logit_scale: model.logit_scale.as_f64(),
            logit_bias: model.logit_bias.as_f64(),
            seed,
            weights: NetPair {
                query: net_weights(&model.query),
                key: net_weights(&model.key),
            },
            biases: NetPair {
                query: net_biases(&model.query),
                key: net_biases(&model.key),
            },
        }
    }

    pub fn to_model<T: Scalar>(&self) -> Result<HashModel<T>> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                self.format_version
            )));
        }
        if self.activation != "relu" {
            return Err(Error::Format(format!("unsupported activation {:?}", self.activation)));
        }
        if self.arch.last() != Some(&self.bits) {
            return Err(Error::Format("checkpoint bits disagree with arch".into()));
        }
        Ok(HashModel {
            query: rebuild(&self.arch, &self.weights.query, &self.biases.query)?,
            key: rebuild(&self.arch, &self.weights.key, &self.biases.key)?,
            logit_scale: T::of(self.logit_scale),
            logit_bias: T::of(self.logit_bias),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
