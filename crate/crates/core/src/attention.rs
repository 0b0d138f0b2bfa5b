//! Reference attention: full SDPA, sparse attention over an index set, the
//! isolated-token oracle score `a_i * ||v_i||`, top-k selection and recall.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{dot, l2_norm, softmax, Matrix, Scalar, Vector};

/// One single-query attention problem over `n` cached tokens of width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInstance<T> {
    keys: Matrix<T>,
    values: Matrix<T>,
    scale: T,
}

impl<T: Scalar> AttentionInstance<T> {
    /// The logit scale is `1/sqrt(d)`.
    pub fn new(keys: Matrix<T>, values: Matrix<T>) -> Result<Self> {
        if keys.rows() == 0 || keys.cols() == 0 {
            return Err(Error::Contract(
                "attention instance needs n >= 1 and d >= 1".into(),
            ));
        }
        ensure_dim("value rows", keys.rows(), values.rows())?;
        ensure_dim("value cols", keys.cols(), values.cols())?;
        let scale = T::one() / T::of(keys.cols() as f64).sqrt();
        Ok(Self {
            keys,
            values,
            scale,
        })
    }

    pub fn n(&self) -> usize {
        self.keys.rows()
    }

    pub fn dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn keys(&self) -> &Matrix<T> {
        &self.keys
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    /// The first `len` tokens, as seen by a query at that context position.
    pub fn prefix(&self, len: usize) -> Result<Self> {
        Self::new(self.keys.slice_rows(0, len)?, self.values.slice_rows(0, len)?)
    }

    /// Scaled logits `scale * <K[i], q>`.
    pub fn logits(&self, q: &[T]) -> Result<Vec<T>> {
        ensure_dim("query dim", self.dim(), q.len())?;
        Ok(self
            .keys
            .iter_rows()
            .map(|k| self.scale * T::of(dot(k, q)))
            .collect())
    }

    pub fn attention_scores(&self, q: &[T]) -> Result<Vector<T>> {
        softmax(&self.logits(q)?)
    }

    pub fn sdpa(&self, q: &[T]) -> Result<Vector<T>> {
        let a = self.attention_scores(q)?;
        Ok(self.weighted_values(a.iter().copied().enumerate()))
    }

    /// Attention restricted to `sel`, with the softmax renormalised over the selection.
    pub fn sparse_att(&self, q: &[T], sel: &IndexSet) -> Result<Vector<T>> {
        if sel.is_empty() {
            return Err(Error::Contract("sparse attention over an empty selection".into()));
        }
        if let Some(&last) = sel.as_slice().last() {
            if last >= self.n() {
                return Err(Error::OutOfRange {
                    context: "sparse_att index",
                    value: last,
                    min: 0,
                    max: self.n() - 1,
                });
            }
        }
        ensure_dim("query dim", self.dim(), q.len())?;
        let logits: Vec<T> = sel
            .iter()
            .map(|i| self.scale * T::of(dot(self.keys.row(i), q)))
            .collect();
        let weights = softmax(&logits)?;
        Ok(self.weighted_values(sel.iter().zip(weights.iter().copied())))
    }

    /// Isolated-token importance `a_i * ||V[i]||_2`.
    pub fn oracle_score(&self, q: &[T]) -> Result<Vector<T>> {
        let a = self.attention_scores(q)?;
        Ok(a.iter()
            .zip(self.values.iter_rows())
            .map(|(&ai, v)| ai * l2_norm(v))
            .collect())
    }

    fn weighted_values(&self, weights: impl Iterator<Item = (usize, T)>) -> Vector<T> {
        let d = self.dim();
        let mut acc = vec![0.0f64; d];
        for (i, w) in weights {
            let w = w.as_f64();
            for (o, &v) in acc.iter_mut().zip(self.values.row(i)) {
                *o += w * v.as_f64();
            }
        }
        acc.into_iter().map(T::of).collect()
    }
}

/// Sorted, duplicate-free token positions.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    /// `{0, 1, ..., n-1}`
    pub fn full(n: usize) -> Self {
        Self((0..n).collect())
    }

    /// Sorts and deduplicates arbitrary indices.
    pub fn from_unsorted(indices: impl IntoIterator<Item = usize>) -> Self {
        let mut v: Vec<usize> = indices.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        Self(v)
    }

    /// Validates an already-sorted list against a context length `n`.
    pub fn from_sorted(indices: Vec<usize>, n: usize) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract("index set not strictly ascending".into()));
        }
        if let Some(&last) = indices.last() {
            if last >= n {
                return Err(Error::OutOfRange {
                    context: "index set entry",
                    value: last,
                    min: 0,
                    max: n.saturating_sub(1),
                });
            }
        }
        Ok(Self(indices))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn intersection_len(&self, other: &IndexSet) -> usize {
        let (mut i, mut j, mut count) = (0, 0, 0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].cmp(&other.0[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    count += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        count
    }
}

/// Descending by score, ascending by index on ties. NaN sorts last.
fn rank_order<S: PartialOrd>(scores: &[S], a: usize, b: usize) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    let (x, y) = (&scores[a], &scores[b]);
    #[allow(clippy::eq_op)]
    let (x_nan, y_nan) = (x != x, y != y);
    let by_score = match (x_nan, y_nan) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        (false, false) => y.partial_cmp(x).unwrap_or(Ordering::Equal),
    };
    by_score.then(a.cmp(&b))
}

/// All indices ranked best-first under the top-k tie rule.
pub fn rank<S: PartialOrd>(scores: &[S]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    idx
}

/// Indices of the `k` largest scores; ties go to the smaller index.
pub fn topk<S: PartialOrd>(scores: &[S], k: usize) -> Result<IndexSet> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::OutOfRange {
            context: "topk k",
            value: k,
            min: 1,
            max: n,
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if k < n {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(IndexSet(idx))
}

/// `|selected ∩ true_topk| / |true_topk|`
pub fn recall(selected: &IndexSet, true_topk: &IndexSet) -> Result<f64> {
    if true_topk.is_empty() {
        return Err(Error::Contract("recall against an empty true top-k".into()));
    }
    Ok(selected.intersection_len(true_topk) as f64 / true_topk.len() as f64)
}

/// Adds the `sink` first and `recent` last positions on top of `sel`.
pub fn forced_union(sel: &IndexSet, n: usize, sink: usize, recent: usize) -> Result<IndexSet> {
    if sink + recent > n {
        return Err(Error::Contract(format!(
            "sink ({sink}) + recent ({recent}) exceeds context length {n}"
        )));
    }
    if let Some(&last) = sel.as_slice().last() {
        if last >= n {
            return Err(Error::OutOfRange {
                context: "forced_union selection",
                value: last,
                min: 0,
                max: n - 1,
            });
        }
    }
    Ok(IndexSet::from_unsorted(
        sel.iter().chain(0..sink).chain(n - recent..n),
    ))
}

/// Per-query recall aggregated over an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub n_selected: usize,
    pub k_true: usize,
    pub recall: f64,
    pub per_query: Vec<f64>,
}

impl RecallReport {
    pub fn from_per_query(n_selected: usize, k_true: usize, per_query: Vec<f64>) -> Result<Self> {
        if per_query.is_empty() {
            return Err(Error::Contract("recall report without queries".into()));
        }
        let recall = per_query.iter().sum::<f64>() / per_query.len() as f64;
        Ok(Self {
            n_selected,
            k_true,
            recall,
            per_query,
        })
    }

    pub fn stddev(&self) -> f64 {
        let n = self.per_query.len() as f64;
        let var = self
            .per_query
            .iter()
            .map(|r| (r - self.recall).powi(2))
            .sum::<f64>()
            / n;
        var.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian, Rng};

    fn random_instance(rng: &mut Rng, n: usize, d: usize) -> AttentionInstance<f64> {
        let k = gaussian(rng, n, d, 0.0, 1.0).unwrap();
        let v = gaussian(rng, n, d, 0.0, 1.0).unwrap();
        AttentionInstance::new(k, v).unwrap()
    }

    fn random_query(rng: &mut Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.standard_normal() * 2.0).collect()
    }

    /// Per-token loop with no vector helpers.
    fn loop_scores(inst: &AttentionInstance<f64>, q: &[f64]) -> Vec<f64> {
        let d = inst.dim();
        let mut logits = Vec::new();
        for i in 0..inst.n() {
            let mut s = 0.0;
            for c in 0..d {
                s += inst.keys().get(i, c) * q[c];
            }
            logits.push(s / (d as f64).sqrt());
        }
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        logits.iter().map(|l| (l - m).exp() / z).collect()
    }

    fn masked_loop(inst: &AttentionInstance<f64>, q: &[f64], mask: &[bool]) -> Vec<f64> {
        let d = inst.dim();
        let mut logits = vec![f64::NEG_INFINITY; inst.n()];
        for i in 0..inst.n() {
            if mask[i] {
                let mut s = 0.0;
                for c in 0..d {
                    s += inst.keys().get(i, c) * q[c];
                }
                logits[i] = s / (d as f64).sqrt();
            }
        }
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        let mut out = vec![0.0; d];
        for i in 0..inst.n() {
            for c in 0..d {
                out[c] += w[i] / z * inst.values().get(i, c);
            }
        }
        out
    }

    #[test]
    fn zero_query_is_uniform() {
        let mut rng = Rng::new(1);
        let inst = random_instance(&mut rng, 7, 4);
        let a = inst.attention_scores(&[0.0; 4]).unwrap();
        for x in a.iter() {
            assert!((x - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_token_closed_form() {
        // d = 1, scale = 1: logits ln 2 and 0
        let k = Matrix::from_rows(&[[2f64.ln()], [0.0]]).unwrap();
        let v = Matrix::from_rows(&[[1.0], [0.0]]).unwrap();
        let inst = AttentionInstance::new(k, v).unwrap();
        let a = inst.attention_scores(&[1.0]).unwrap();
        assert!((a[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((a[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn scores_match_loop_oracle() {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let inst = random_instance(&mut rng, 33, 8);
            let q = random_query(&mut rng, 8);
            let a = inst.attention_scores(&q).unwrap();
            for (x, y) in a.iter().zip(loop_scores(&inst, &q)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sdpa_symmetry_and_single_token() {
        let k = Matrix::<f64>::from_rows(&[[1.0, 2.0], [1.0, 2.0]]).unwrap();
        let v = Matrix::from_rows(&[[1.0, 0.0], [3.0, 4.0]]).unwrap();
        let inst = AttentionInstance::new(k, v).unwrap();
        let out = inst.sdpa(&[0.3, -0.7]).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-15 && (out[1] - 2.0).abs() < 1e-15);

        let one = AttentionInstance::new(
            Matrix::from_rows(&[[0.5, 0.5]]).unwrap(),
            Matrix::from_rows(&[[9.0, -1.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(one.sdpa(&[4.0, 4.0]).unwrap().as_ref(), &[9.0, -1.0]);
    }

    #[test]
    fn sparse_att_cases() {
        let mut rng = Rng::new(3);
        let inst = random_instance(&mut rng, 40, 6);
        let q = random_query(&mut rng, 6);
        let full = inst.sparse_att(&q, &IndexSet::full(40)).unwrap();
        let dense = inst.sdpa(&q).unwrap();
        for (a, b) in full.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let single = inst.sparse_att(&q, &IndexSet::from_unsorted([17])).unwrap();
        assert_eq!(single.as_ref(), inst.values().row(17));

        let mut idx: Vec<usize> = (0..40).collect();
        rng.shuffle(&mut idx);
        let sel = IndexSet::from_unsorted(idx[..20].iter().copied());
        let mask: Vec<bool> = (0..40).map(|i| sel.contains(i)).collect();
        let got = inst.sparse_att(&q, &sel).unwrap();
        for (a, b) in got.iter().zip(masked_loop(&inst, &q, &mask)) {
            assert!((a - b).abs() < 1e-12);
        }

        assert!(inst.sparse_att(&q, &IndexSet::empty()).is_err());
        assert!(inst.sparse_att(&q, &IndexSet::from_unsorted([40])).is_err());
    }

    #[test]
    fn oracle_score_cases() {
        let k = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let v = Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0], [3.0, 0.0]]).unwrap();
        let inst = AttentionInstance::new(k.clone(), v).unwrap();
        let s = inst.oracle_score(&[0.0, 0.0]).unwrap();
        for (i, x) in s.iter().enumerate() {
            assert!((x - (i + 1) as f64 / 3.0).abs() < 1e-15);
        }
        let zero = AttentionInstance::new(k, Matrix::zeros(3, 2)).unwrap();
        assert!(zero.oracle_score(&[1.0, -2.0]).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn topk_cases() {
        assert_eq!(topk(&[5.0, 1.0, 5.0], 2).unwrap().as_slice(), &[0, 2]);
        assert_eq!(topk(&[1, 2, 3, 4], 4).unwrap(), IndexSet::full(4));
        assert_eq!(topk(&[0.0; 6], 3).unwrap().as_slice(), &[0, 1, 2]);
        assert!(topk(&[1.0], 0).is_err());
        assert!(topk(&[1.0], 2).is_err());

        let mut rng = Rng::new(4);
        for _ in 0..50 {
            // coarse values so ties actually occur
            let s: Vec<f64> = (0..30).map(|_| (rng.next_below(8)) as f64).collect();
            let mut order: Vec<(f64, usize)> = s.iter().copied().zip(0..).collect();
            order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let expect = IndexSet::from_unsorted(order[..7].iter().map(|p| p.1));
            assert_eq!(topk(&s, 7).unwrap(), expect);
        }
    }

    #[test]
    fn recall_cases() {
        let a = IndexSet::from_unsorted([1, 2, 3, 4]);
        let t = IndexSet::from_unsorted([2, 4, 8]);
        assert!((recall(&a, &t).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall(&t, &t).unwrap(), 1.0);
        assert_eq!(
            recall(&IndexSet::from_unsorted([0, 1]), &IndexSet::from_unsorted([5])).unwrap(),
            0.0
        );
        assert!(recall(&a, &IndexSet::empty()).is_err());
    }

    #[test]
    fn forced_union_cases() {
        assert_eq!(
            forced_union(&IndexSet::empty(), 10, 2, 2).unwrap().as_slice(),
            &[0, 1, 8, 9]
        );
        let s = IndexSet::from_unsorted([0, 9]);
        assert_eq!(forced_union(&s, 10, 1, 1).unwrap(), s);
        assert!(forced_union(&s, 10, 6, 5).is_err());

        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let sel = IndexSet::from_unsorted((0..10).map(|_| rng.next_below(64)));
            let mut expect = std::collections::BTreeSet::new();
            expect.extend(sel.iter());
            expect.extend(0..4);
            expect.extend(60..64);
            let got = forced_union(&sel, 64, 4, 4).unwrap();
            assert_eq!(got.as_slice(), expect.into_iter().collect::<Vec<_>>().as_slice());
        }
    }

    #[test]
    fn index_set_validation() {
        assert!(IndexSet::from_sorted(vec![0, 2, 2], 5).is_err());
        assert!(IndexSet::from_sorted(vec![3, 1], 5).is_err());
        assert!(IndexSet::from_sorted(vec![1, 5], 5).is_err());
        assert!(IndexSet::from_sorted(vec![1, 4], 5).is_ok());
    }

    #[test]
    fn instance_rejects_bad_shapes() {
        assert!(AttentionInstance::new(Matrix::<f64>::zeros(0, 3), Matrix::zeros(0, 3)).is_err());
        assert!(AttentionInstance::new(Matrix::<f64>::zeros(2, 3), Matrix::zeros(3, 3)).is_err());
        let inst = AttentionInstance::new(Matrix::<f64>::zeros(2, 3), Matrix::zeros(2, 3)).unwrap();
        assert!(inst.sdpa(&[1.0, 2.0]).is_err());
    }
}
