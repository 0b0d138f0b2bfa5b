//! Reduction of isolated-token importance to maximum inner product search,
//! the asymmetric transforms that turn it into cosine search, and random
//! signed-projection (LSH) signatures over the transformed vectors.
//!
//! `a_i * ||v_i||` is proportional to `exp(scale * <q, k_i> + ln ||v_i||)`, so
//! the oracle ordering is the ordering of `<[scale * q, 1], [k_i, ln ||v_i||]>`.
//! Appending `sqrt(M^2 - ||[k_i, ln ||v_i||]||^2)` to every key gives all keys
//! the norm `M`, after which cosine similarity ranks them the same way.

use serde::{Deserialize, Serialize};

use crate::attention::{forced_union, topk, AttentionInstance, IndexSet};
use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{dot, gaussian, l2_norm, Matrix, Rng, Scalar, Vector};
use crate::signatures::{sign_bits, Signature, SignatureCache};

/// Floor applied to `||v||` before taking its logarithm.
pub const VALUE_NORM_FLOOR: f64 = 1e-12;

/// Radicands down to this value are treated as rounding noise and clamped to zero.
const RADICAND_TOLERANCE: f64 = -1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair<T> {
    /// `[scale * q, 1]`
    pub aug_query: Vector<T>,
    /// `[k, ln max(||v||, floor)]`
    pub aug_key: Vector<T>,
}

impl<T: Scalar> AugmentedPair<T> {
    pub fn inner(&self) -> f64 {
        dot(&self.aug_query, &self.aug_key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsiMode {
    /// Query padded with `[1, 0]`: cosine ordering equals the MIPS ordering.
    #[default]
    Exact,
    /// Query padded with `[1, 1]`, as the transform is usually written.
    Paper,
}

impl std::str::FromStr for PsiMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Contract(format!("unknown psi mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsiPair<T> {
    pub psi_query: Vector<T>,
    pub psi_key: Vector<T>,
    /// Largest augmented-key norm over the key set.
    pub max_norm: T,
}

impl<T: Scalar> PsiPair<T> {
    pub fn cosine(&self) -> f64 {
        crate::numerics::cosine(&self.psi_query, &self.psi_key)
    }
}

fn log_value_norm<T: Scalar>(v: &[T]) -> T {
    T::of(l2_norm(v).as_f64().max(VALUE_NORM_FLOOR).ln())
}

fn augmented_query<T: Scalar>(inst: &AttentionInstance<T>, q: &[T]) -> Vec<T> {
    q.iter()
        .map(|&x| x * inst.scale())
        .chain(std::iter::once(T::one()))
        .collect()
}

/// Augmented keys `[k_i, ln ||v_i||]` as an `n x (d+1)` matrix.
pub fn augmented_keys<T: Scalar>(inst: &AttentionInstance<T>) -> Matrix<T> {
    let d = inst.dim();
    let mut out = Matrix::zeros(inst.n(), d + 1);
    for i in 0..inst.n() {
        let row = out.row_mut(i);
        row[..d].copy_from_slice(inst.keys().row(i));
        row[d] = log_value_norm(inst.values().row(i));
    }
    out
}

/// Per-token augmented pairs for one query.
///
/// The `1/sqrt(d)` logit scale is folded into the query half so that the
/// inner product reproduces the attention logit exactly.
pub fn augment<T: Scalar>(inst: &AttentionInstance<T>, q: &[T]) -> Result<Vec<AugmentedPair<T>>> {
    ensure_dim("augment query dim", inst.dim(), q.len())?;
    let aq: Vector<T> = augmented_query(inst, q).into();
    let keys = augmented_keys(inst);
    Ok(keys
        .iter_rows()
        .map(|k| AugmentedPair {
            aug_query: aq.clone(),
            aug_key: k.to_vec().into(),
        })
        .collect())
}

fn psi_pad<T: Scalar>(norm: f64, max_norm: f64) -> Result<T> {
    let radicand = max_norm * max_norm - norm * norm;
    if radicand < RADICAND_TOLERANCE * max_norm.max(1.0).powi(2) {
        return Err(Error::Contract(format!(
            "psi radicand {radicand} is negative: max norm {max_norm} below key norm {norm}"
        )));
    }
    Ok(T::of(radicand.max(0.0).sqrt()))
}

fn psi_query_pad<T: Scalar>(mode: PsiMode) -> T {
    match mode {
        PsiMode::Exact => T::zero(),
        PsiMode::Paper => T::one(),
    }
}

/// Cosine-search transforms of augmented pairs; every `psi_key` has norm `M`.
pub fn psi_transform<T: Scalar>(pairs: &[AugmentedPair<T>], mode: PsiMode) -> Result<Vec<PsiPair<T>>> {
    if pairs.is_empty() {
        return Err(Error::Contract("psi transform of an empty key set".into()));
    }
    let max_norm = pairs
        .iter()
        .map(|p| l2_norm(&p.aug_key).as_f64())
        .fold(0.0f64, f64::max);
    pairs
        .iter()
        .map(|p| {
            let pad = psi_pad::<T>(l2_norm(&p.aug_key).as_f64(), max_norm)?;
            let psi_key = p.aug_key.iter().copied().chain(std::iter::once(pad)).collect();
            let psi_query = p
                .aug_query
                .iter()
                .copied()
                .chain(std::iter::once(psi_query_pad(mode)))
                .collect();
            Ok(PsiPair {
                psi_query,
                psi_key,
                max_norm: T::of(max_norm),
            })
        })
        .collect()
}

/// `[k_i, ln ||v_i||, pad_i]` for all tokens, plus the shared norm `M`.
pub fn psi_keys<T: Scalar>(inst: &AttentionInstance<T>) -> Result<(Matrix<T>, T)> {
    let aug = augmented_keys(inst);
    let norms: Vec<f64> = aug.iter_rows().map(|r| l2_norm(r).as_f64()).collect();
    let max_norm = norms.iter().copied().fold(0.0f64, f64::max);
    let w = aug.cols();
    let mut out = Matrix::zeros(inst.n(), w + 1);
    for (i, &norm) in norms.iter().enumerate() {
        let row = out.row_mut(i);
        row[..w].copy_from_slice(aug.row(i));
        row[w] = psi_pad(norm, max_norm)?;
    }
    Ok((out, T::of(max_norm)))
}

pub fn psi_query<T: Scalar>(inst: &AttentionInstance<T>, q: &[T], mode: PsiMode) -> Result<Vector<T>> {
    ensure_dim("psi query dim", inst.dim(), q.len())?;
    let mut v = augmented_query(inst, q);
    v.push(psi_query_pad(mode));
    Ok(v.into())
}

/// Data-independent signed random projections; row `j` is the hyperplane for bit `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LshProjector<T> {
    projections: Matrix<T>,
    seed: u64,
}

impl<T: Scalar> LshProjector<T> {
    pub fn new(bits: usize, dim: usize, seed: u64) -> Result<Self> {
        if bits == 0 || dim == 0 {
            return Err(Error::Contract("LSH projector needs bits >= 1 and dim >= 1".into()));
        }
        let mut rng = Rng::new(seed);
        Ok(Self {
            projections: gaussian(&mut rng, bits, dim, 0.0, 1.0)?,
            seed,
        })
    }

    pub fn bits(&self) -> usize {
        self.projections.rows()
    }

    pub fn dim(&self) -> usize {
        self.projections.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projections(&self) -> &Matrix<T> {
        &self.projections
    }

    pub fn signature(&self, x: &[T]) -> Result<Signature> {
        lsh_signature(self, x)
    }
}

/// Bit `j` set iff `<projections[j], x> > 0`.
pub fn lsh_signature<T: Scalar>(proj: &LshProjector<T>, x: &[T]) -> Result<Signature> {
    ensure_dim("LSH input dim", proj.dim(), x.len())?;
    let proj_values: Vec<f64> = proj.projections.iter_rows().map(|p| dot(p, x)).collect();
    Ok(sign_bits(&proj_values))
}

/// LSH signatures of every `psi_key` of one instance, reusable across queries.
#[derive(Debug, Clone)]
pub struct LshIndex<'a, T> {
    inst: &'a AttentionInstance<T>,
    projector: LshProjector<T>,
    cache: SignatureCache,
    mode: PsiMode,
}

impl<'a, T: Scalar> LshIndex<'a, T> {
    /// `projector.dim()` must be `d + 2`. Query and key sides share the projector.
    pub fn build(projector: LshProjector<T>, inst: &'a AttentionInstance<T>, mode: PsiMode) -> Result<Self> {
        ensure_dim("LSH projector dim", inst.dim() + 2, projector.dim())?;
        let (keys, _) = psi_keys(inst)?;
        let mut cache = SignatureCache::new(projector.bits());
        for row in keys.iter_rows() {
            cache.push(&lsh_signature(&projector, row)?)?;
        }
        Ok(Self {
            inst,
            projector,
            cache,
            mode,
        })
    }

    pub fn cache(&self) -> &SignatureCache {
        &self.cache
    }

    pub fn bits(&self) -> usize {
        self.projector.bits()
    }

    pub fn select(&self, q: &[T], budget: usize, sink: usize, recent: usize) -> Result<IndexSet> {
        let psi_q = psi_query(self.inst, q, self.mode)?;
        let q_sig = lsh_signature(&self.projector, &psi_q)?;
        let scores = self.cache.hash_score(&q_sig)?;
        forced_union(&topk(&scores, budget)?, self.inst.n(), sink, recent)
    }
}

/// One-shot LSH selection; build an [`LshIndex`] to amortise key hashing.
pub fn lsh_select<T: Scalar>(
    projector: &LshProjector<T>,
    inst: &AttentionInstance<T>,
    q: &[T],
    budget: usize,
    sink: usize,
    recent: usize,
    mode: PsiMode,
) -> Result<IndexSet> {
    LshIndex::build(projector.clone(), inst, mode)?.select(q, budget, sink, recent)
}
