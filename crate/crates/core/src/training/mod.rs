//! Training the query and key mapping networks as a top-k classifier.
//!
//! Labels come from the isolated-token oracle; the sign is relaxed to `tanh`
//! during training; positives are up-weighted by `alpha + beta * L` for a
//! context of length `L`; one Adam step is taken per chunk of queries against
//! the KV prefix visible at that point.

mod adam;
mod backprop;
mod checkpoint;
mod loss;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamState};
pub use backprop::{batch_loss, loss_and_grad, make_labels, TrainBatch};
pub use checkpoint::{Checkpoint, NetPair, CHECKPOINT_FORMAT_VERSION};
pub use loss::{bce_loss, class1_weight, sigmoid, softplus};
pub use model::{forward_tanh, logits, HashModel};
pub use train::{
    chunk_schedule, eval_cosine_shift, KvSchedule, train_chunked, train_stream, CosineShift, TraceChunk,
    TrainOutcome, Trainer,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Number of oracle top tokens labelled positive per query.
    pub label_k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Queries per optimizer step.
    pub chunk_size: usize,
    /// KV prefix each chunk is trained against.
    pub kv_schedule: KvSchedule,
    /// Total optimizer steps; the chunk stream is replayed until reached.
    pub steps: usize,
    pub seed: u64,
    /// Initial predictor scale.
    pub logit_scale: f64,
    /// Initial predictor bias.
    pub logit_bias: f64,
    pub hidden: Vec<usize>,
    pub bits: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            label_k: 64,
            alpha: 1.0,
            beta: 1.0 / 64.0,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            chunk_size: 32,
            kv_schedule: KvSchedule::Full,
            steps: 2000,
            seed: 42,
            logit_scale: 1.0,
            logit_bias: 0.0,
            hidden: vec![128, 128],
            bits: 32,
        }
    }
}

impl TrainConfig {
    /// `[input_dim, hidden..., bits]`
    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        std::iter::once(input_dim)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.bits))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(msg));
        if self.label_k == 0 {
            return bad("label_k must be at least 1".into());
        }
        if self.bits == 0 {
            return bad("bits must be at least 1".into());
        }
        if self.chunk_size == 0 {
            return bad("chunk_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }
}
