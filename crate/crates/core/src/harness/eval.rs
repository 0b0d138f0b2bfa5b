use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{forced_union, recall, topk, AttentionInstance, IndexSet};
use crate::error::{ensure_dim, Error, Result};
use crate::mips::LshIndex;
use crate::numerics::{l2_norm, Matrix, Rng};
use crate::signatures::{MappingNetwork, SignatureCache};

use super::REPORT_SCHEMA_VERSION;

/// How heavy tokens are chosen for each query.
#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a> {
    /// Exact `a_i * ||v_i||`; the reference every other scorer is judged by.
    Oracle,
    /// Hamming closeness between the query signature and cached key signatures.
    Learned {
        query: &'a MappingNetwork<f64>,
        cache: &'a SignatureCache,
    },
    /// Random-projection signatures of the transformed keys and query.
    Lsh(&'a LshIndex<'a, f64>),
    /// Uniformly random scores, one stream per evaluation.
    Random { seed: u64 },
}

impl Scorer<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Scorer::Oracle => "oracle",
            Scorer::Learned { .. } => "learned",
            Scorer::Lsh(_) => "lsh",
            Scorer::Random { .. } => "random",
        }
    }

    pub fn bits(&self) -> Option<usize> {
        match self {
            Scorer::Learned { cache, .. } => Some(cache.bits()),
            Scorer::Lsh(index) => Some(index.bits()),
            Scorer::Oracle | Scorer::Random { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Heavy tokens chosen by the scorer, before the forced windows.
    pub budget: usize,
    pub sink: usize,
    pub recent: usize,
    /// Size of the oracle top-k that recall is measured against.
    pub true_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            budget: 64,
            sink: 8,
            recent: 8,
            true_k: 32,
        }
    }
}

/// Outcome for a single query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryEval {
    pub recall: f64,
    /// `||sdpa - sparse_att|| / ||sdpa||`
    pub rel_error: f64,
    pub n_selected: usize,
}

/// Aggregate over an evaluation set. One CSV row per report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub method: String,
    pub bits: Option<usize>,
    pub budget: usize,
    pub sink: usize,
    pub recent: usize,
    pub true_k: usize,
    pub n_queries: usize,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub rel_error_mean: f64,
    /// Wall time of scoring and selection, microseconds per query.
    pub time_per_query_us: f64,
    #[serde(skip)]
    pub per_query: Vec<QueryEval>,
}

/// Relative L2 error of sparse attention over `sel` against full attention.
pub fn relative_error(inst: &AttentionInstance<f64>, q: &[f64], sel: &IndexSet) -> Result<f64> {
    let full = inst.sdpa(q)?;
    let sparse = inst.sparse_att(q, sel)?;
    let diff: Vec<f64> = full.iter().zip(sparse.iter()).map(|(a, b)| a - b).collect();
    let num = l2_norm(&diff);
    let den = l2_norm(&full);
    Ok(if num == 0.0 { 0.0 } else { num / den.max(f64::MIN_POSITIVE) })
}

/// Scores every query, selects `budget` heavy tokens plus the forced
/// windows, and compares against the oracle top-`true_k` and full attention.
pub fn run_eval(
    inst: &AttentionInstance<f64>,
    queries: &Matrix<f64>,
    scorer: Scorer<'_>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let n = inst.n();
    ensure_dim("evaluation query width", inst.dim(), queries.cols())?;
    if queries.rows() == 0 {
        return Err(Error::Contract("evaluation over zero queries".into()));
    }
    for (context, value) in [("budget", cfg.budget), ("true_k", cfg.true_k)] {
        if value == 0 || value > n {
            return Err(Error::OutOfRange {
                context,
                value,
                min: 1,
                max: n,
            });
        }
    }
    if cfg.sink + cfg.recent > n {
        return Err(Error::Contract(format!(
            "sink ({}) + recent ({}) exceeds context length {n}",
            cfg.sink, cfg.recent
        )));
    }
    match scorer {
        Scorer::Learned { query, cache } => {
            ensure_dim("signature cache length", n, cache.len())?;
            ensure_dim("query network input", inst.dim(), query.input_dim())?;
            ensure_dim("query signature bits", cache.bits(), query.out_bits())?;
        }
        Scorer::Lsh(index) => ensure_dim("LSH cache length", n, index.cache().len())?,
        Scorer::Oracle | Scorer::Random { .. } => {}
    }

    let mut rng = match scorer {
        Scorer::Random { seed } => Some(Rng::new(seed)),
        _ => None,
    };
    let mut per_query = Vec::with_capacity(queries.rows());
    let mut elapsed = 0.0;
    let mut hash_scores = Vec::with_capacity(n);
    for q in queries.iter_rows() {
        let oracle = inst.oracle_score(q)?;
        let start = Instant::now();
        let heavy = match scorer {
            Scorer::Oracle => topk(&oracle, cfg.budget)?,
            Scorer::Learned { query, cache } => {
                cache.hash_score_into(&query.phi_bits(q)?, &mut hash_scores);
                topk(&hash_scores, cfg.budget)?
            }
            Scorer::Lsh(index) => index.select(q, cfg.budget, 0, 0)?,
            Scorer::Random { .. } => {
                let rng = rng.as_mut().expect("random scorer has a stream");
                let scores: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
                topk(&scores, cfg.budget)?
            }
        };
        let sel = forced_union(&heavy, n, cfg.sink, cfg.recent)?;
        elapsed += start.elapsed().as_secs_f64();

        let truth = topk(&oracle, cfg.true_k)?;
        per_query.push(QueryEval {
            recall: recall(&sel, &truth)?,
            rel_error: relative_error(inst, q, &sel)?,
            n_selected: sel.len(),
        });
    }

    let m = per_query.len() as f64;
    let recall_mean = per_query.iter().map(|r| r.recall).sum::<f64>() / m;
    let recall_var = per_query.iter().map(|r| (r.recall - recall_mean).powi(2)).sum::<f64>() / m;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method: scorer.name().into(),
        bits: scorer.bits(),
        budget: cfg.budget,
        sink: cfg.sink,
        recent: cfg.recent,
        true_k: cfg.true_k,
        n_queries: per_query.len(),
        recall_mean,
        recall_std: recall_var.sqrt(),
        rel_error_mean: per_query.iter().map(|r| r.rel_error).sum::<f64>() / m,
        time_per_query_us: elapsed / m * 1e6,
        per_query,
    })
}
