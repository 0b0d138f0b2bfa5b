use std::ops::Range;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::attention::{topk, AttentionInstance};
use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{cosine, Matrix, Scalar};

use super::adam::{adam_step, AdamState};
use super::backprop::{loss_and_grad, make_labels, TrainBatch};
use super::loss::class1_weight;
use super::model::{forward_tanh, HashModel};
use super::TrainConfig;

/// Queries arriving together, and how much of the KV cache exists when they do.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceChunk<T> {
    pub queries: Matrix<T>,
    pub kv_len: usize,
}

/// How much of the KV cache a training chunk sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KvSchedule {
    /// Every chunk sees all keys: the queries follow a fully cached prompt.
    #[default]
    Full,
    /// The visible prefix grows linearly with the chunk index, see [`chunk_schedule`].
    Growing,
}

impl std::str::FromStr for KvSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "growing" => Ok(Self::Growing),
            other => Err(Error::Contract(format!("unknown kv schedule {other:?}"))),
        }
    }
}

/// Splits `n_queries` into consecutive chunks and assigns each a KV prefix
/// that grows linearly to `n_keys` by the last chunk, never below `min_kv`.
pub fn chunk_schedule(
    n_keys: usize,
    n_queries: usize,
    chunk_size: usize,
    min_kv: usize,
) -> Vec<(Range<usize>, usize)> {
    if n_queries == 0 || chunk_size == 0 {
        return Vec::new();
    }
    let floor = min_kv.min(n_keys);
    (0..n_queries)
        .step_by(chunk_size)
        .map(|start| {
            let end = (start + chunk_size).min(n_queries);
            let kv = (n_keys * end).div_ceil(n_queries).clamp(floor, n_keys);
            (start..end, kv)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Trainer<T> {
    model: HashModel<T>,
    adam: AdamState<T>,
    cfg: TrainConfig,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: HashModel<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            adam: AdamState::new(&model),
            model,
            cfg,
        })
    }

    pub fn model(&self) -> &HashModel<T> {
        &self.model
    }

    pub fn into_model(self) -> HashModel<T> {
        self.model
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.step_count()
    }

    /// One optimizer step on a labelled batch; returns the pre-step loss.
    pub fn step(&mut self, batch: &TrainBatch<T>) -> Result<f64> {
        let w1 = class1_weight(&self.cfg, batch.context_length())?;
        let (loss, grads) = loss_and_grad(&self.model, batch, w1)?;
        adam_step(&mut self.adam, &mut self.model, &grads, &self.cfg)?;
        Ok(loss.as_f64())
    }

    /// Labels the chunk against its KV prefix and steps once. Empty chunks are
    /// skipped and return `None`.
    pub fn step_chunk(&mut self, inst: &AttentionInstance<T>, chunk: &TraceChunk<T>) -> Result<Option<f64>> {
        if chunk.queries.rows() == 0 {
            warn!("skipping empty training chunk (kv_len {})", chunk.kv_len);
            return Ok(None);
        }
        let prefix = inst.prefix(chunk.kv_len)?;
        let label_k = self.cfg.label_k.min(chunk.kv_len);
        let batch = make_labels(&prefix, &chunk.queries, label_k)?;
        self.step(&batch).map(Some)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: HashModel<T>,
    /// Loss of each optimizer step, measured before the update.
    pub losses: Vec<f64>,
    pub skipped_chunks: usize,
}

/// Trains `model` on an explicit chunk stream, one step per non-empty chunk.
pub fn train_stream<T: Scalar>(
    model: HashModel<T>,
    inst: &AttentionInstance<T>,
    chunks: impl IntoIterator<Item = TraceChunk<T>>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut losses = Vec::new();
    let mut skipped_chunks = 0;
    for chunk in chunks {
        match trainer.step_chunk(inst, &chunk)? {
            Some(l) => losses.push(l),
            None => skipped_chunks += 1,
        }
    }
    Ok(TrainOutcome {
        model: trainer.into_model(),
        losses,
        skipped_chunks,
    })
}

/// Initialises a model from `cfg` and trains it for `cfg.steps` steps,
/// replaying the chunk schedule over `queries` in context order as needed.
pub fn train_chunked<T: Scalar>(
    inst: &AttentionInstance<T>,
    queries: &Matrix<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    ensure_dim("training query width", inst.dim(), queries.cols())?;
    if queries.rows() == 0 {
        return Err(Error::Contract("no training queries".into()));
    }
    let model = HashModel::init(inst.dim(), cfg)?;
    let mut schedule = chunk_schedule(inst.n(), queries.rows(), cfg.chunk_size, cfg.label_k);
    if cfg.kv_schedule == KvSchedule::Full {
        for (_, kv) in schedule.iter_mut() {
            *kv = inst.n();
        }
    }
    let chunks = schedule
        .into_iter()
        .cycle()
        .take(cfg.steps)
        .map(|(range, kv_len)| {
            Ok(TraceChunk {
                queries: queries.slice_rows(range.start, range.end)?,
                kv_len,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    train_stream(model, inst, chunks, cfg)
}

/// Mean cosine similarity between each query and its oracle top-k keys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineShift {
    /// Raw query and key vectors.
    pub raw: f64,
    /// `tanh(F_q(q))` against `tanh(F_kv(k))`.
    pub tanh: f64,
    /// `+-1` sign embeddings (unset bits map to -1).
    pub sign: f64,
}

pub fn eval_cosine_shift<T: Scalar>(
    model: &HashModel<T>,
    inst: &AttentionInstance<T>,
    queries: &Matrix<T>,
    k: usize,
) -> Result<CosineShift> {
    ensure_dim("cosine query width", inst.dim(), queries.cols())?;
    if queries.rows() == 0 {
        return Err(Error::Contract("cosine shift over zero queries".into()));
    }
    let to_sign = |t: &[T]| -> Vec<f64> { t.iter().map(|&v| if v > T::zero() { 1.0 } else { -1.0 }).collect() };
    let key_tanh = inst
        .keys()
        .iter_rows()
        .map(|k| forward_tanh(&model.key, k))
        .collect::<Result<Vec<_>>>()?;
    let key_sign: Vec<Vec<f64>> = key_tanh.iter().map(|t| to_sign(t)).collect();

    let (mut raw, mut tanh, mut sign, mut count) = (0.0, 0.0, 0.0, 0usize);
    for q in queries.iter_rows() {
        let top = topk(&inst.oracle_score(q)?, k)?;
        let q_tanh = forward_tanh(&model.query, q)?;
        let q_sign = to_sign(&q_tanh);
        for i in top.iter() {
            raw += cosine(q, inst.keys().row(i));
            tanh += cosine(&q_tanh, &key_tanh[i]);
            sign += cosine(&q_sign, &key_sign[i]);
            count += 1;
        }
    }
    let c = count as f64;
    Ok(CosineShift {
        raw: raw / c,
        tanh: tanh / c,
        sign: sign / c,
    })
}
