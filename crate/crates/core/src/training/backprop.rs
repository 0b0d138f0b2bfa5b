//! Batched forward pass and exact reverse-mode gradients of the weighted
//! BCE objective for both mapping networks and the predictor head.

use crate::attention::{topk, AttentionInstance};
use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{Matrix, Scalar};
use crate::signatures::MappingNetwork;

use super::loss::{bce_grad, bce_term};
use super::model::HashModel;

/// Queries against a KV prefix, with top-k labels from the isolated-token oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch<T> {
    pub queries: Matrix<T>,
    pub keys: Matrix<T>,
    pub values: Matrix<T>,
    /// Row-major `m x n`; row `i` has exactly `label_k` entries set.
    pub labels: Vec<bool>,
    pub label_k: usize,
}

impl<T: Scalar> TrainBatch<T> {
    pub fn context_length(&self) -> usize {
        self.keys.rows()
    }

    pub fn label_row(&self, i: usize) -> &[bool] {
        let n = self.context_length();
        &self.labels[i * n..(i + 1) * n]
    }

    pub fn positive_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&y| y).count() as f64 / self.labels.len() as f64
    }
}

/// Labels each query row with `topk(oracle_score, label_k)`.
pub fn make_labels<T: Scalar>(
    inst: &AttentionInstance<T>,
    queries: &Matrix<T>,
    label_k: usize,
) -> Result<TrainBatch<T>> {
    let n = inst.n();
    if label_k == 0 || label_k > n {
        return Err(Error::OutOfRange {
            context: "label_k",
            value: label_k,
            min: 1,
            max: n,
        });
    }
    ensure_dim("training query width", inst.dim(), queries.cols())?;
    let mut labels = vec![false; queries.rows() * n];
    for (i, q) in queries.iter_rows().enumerate() {
        let top = topk(&inst.oracle_score(q)?, label_k)?;
        let row = &mut labels[i * n..(i + 1) * n];
        for j in top.iter() {
            row[j] = true;
        }
    }
    Ok(TrainBatch {
        queries: queries.clone(),
        keys: inst.keys().clone(),
        values: inst.values().clone(),
        labels,
        label_k,
    })
}

/// Layer inputs and pre-activations of a batched forward pass.
struct ForwardTrace<T> {
    inputs: Vec<Matrix<T>>,
    pre: Vec<Matrix<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    fn output(&self) -> &Matrix<T> {
        self.pre.last().expect("at least one layer")
    }
}

fn forward_batch<T: Scalar>(net: &MappingNetwork<T>, x: &Matrix<T>) -> ForwardTrace<T> {
    let n_layers = net.layers().len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers);
    let mut h = x.clone();
    for (l, layer) in net.layers().iter().enumerate() {
        let mut z = Matrix::zeros(h.rows(), layer.output_dim());
        for r in 0..h.rows() {
            layer.apply_into(h.row(r), z.row_mut(r));
        }
        let next = if l + 1 < n_layers {
            z.map(|v| v.max(T::zero()))
        } else {
            Matrix::zeros(0, 0)
        };
        inputs.push(std::mem::replace(&mut h, next));
        pre.push(z);
    }
    ForwardTrace { inputs, pre }
}

/// Accumulates parameter gradients into `grads` given `d loss / d output`.
fn backward_batch<T: Scalar>(
    net: &MappingNetwork<T>,
    trace: &ForwardTrace<T>,
    mut delta: Matrix<T>,
    grads: &mut MappingNetwork<T>,
) {
    for l in (0..net.layers().len()).rev() {
        let layer = &net.layers()[l];
        let input = &trace.inputs[l];
        let g = &mut grads.layers_mut()[l];
        for r in 0..delta.rows() {
            let dz = delta.row(r);
            let x = input.row(r);
            for (o, &d) in dz.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                g.bias[o] += d;
                for (gw, &xi) in g.weights.row_mut(o).iter_mut().zip(x) {
                    *gw += d * xi;
                }
            }
        }
        if l == 0 {
            break;
        }
        // d/d(input) then through the ReLU of the previous layer
        let prev_pre = &trace.pre[l - 1];
        let mut next = Matrix::zeros(delta.rows(), layer.input_dim());
        for r in 0..delta.rows() {
            let out = next.row_mut(r);
            for (o, &d) in delta.row(r).iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                for (acc, &w) in out.iter_mut().zip(layer.weights.row(o)) {
                    *acc += d * w;
                }
            }
            for (acc, &z) in out.iter_mut().zip(prev_pre.row(r)) {
                if z <= T::zero() {
                    *acc = T::zero();
                }
            }
        }
        delta = next;
    }
}

struct Embeddings<T> {
    query_trace: ForwardTrace<T>,
    key_trace: ForwardTrace<T>,
    eq: Matrix<T>,
    ek: Matrix<T>,
    /// `<eq_i, ek_j>`, `m x n`
    sim: Matrix<T>,
}

fn embed<T: Scalar>(model: &HashModel<T>, batch: &TrainBatch<T>) -> Result<Embeddings<T>> {
    ensure_dim("query width", model.query.input_dim(), batch.queries.cols())?;
    ensure_dim("key width", model.key.input_dim(), batch.keys.cols())?;
    ensure_dim("embedding width", model.query.out_bits(), model.key.out_bits())?;
    ensure_dim(
        "label count",
        batch.queries.rows() * batch.keys.rows(),
        batch.labels.len(),
    )?;
    let query_trace = forward_batch(&model.query, &batch.queries);
    let key_trace = forward_batch(&model.key, &batch.keys);
    let eq = query_trace.output().map(|v| v.tanh());
    let ek = key_trace.output().map(|v| v.tanh());
    let mut sim = Matrix::zeros(eq.rows(), ek.rows());
    for i in 0..eq.rows() {
        let a = eq.row(i);
        for (j, s) in sim.row_mut(i).iter_mut().enumerate() {
            let mut acc = T::zero();
            for (&x, &y) in a.iter().zip(ek.row(j)) {
                acc += x * y;
            }
            *s = acc;
        }
    }
    Ok(Embeddings {
        query_trace,
        key_trace,
        eq,
        ek,
        sim,
    })
}

/// Mean weighted BCE of the batch.
pub fn batch_loss<T: Scalar>(model: &HashModel<T>, batch: &TrainBatch<T>, w1: f64) -> Result<T> {
    let emb = embed(model, batch)?;
    let w1 = T::of(w1);
    let total: T = emb
        .sim
        .as_slice()
        .iter()
        .zip(&batch.labels)
        .map(|(&s, &y)| bce_term(model.logit_scale * s + model.logit_bias, y, w1))
        .sum();
    Ok(total / T::of(batch.labels.len() as f64))
}

/// Loss and exact gradient with respect to every model parameter.
pub fn loss_and_grad<T: Scalar>(
    model: &HashModel<T>,
    batch: &TrainBatch<T>,
    w1: f64,
) -> Result<(T, HashModel<T>)> {
    if batch.labels.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let emb = embed(model, batch)?;
    let w1 = T::of(w1);
    let inv_count = T::one() / T::of(batch.labels.len() as f64);
    let (m, n) = (emb.sim.rows(), emb.sim.cols());
    let b = emb.eq.cols();

    let mut grads = model.zeros_like();
    let mut loss = T::zero();
    let mut dsim = Matrix::zeros(m, n);
    for ((ds, &s), &y) in dsim
        .as_mut_slice()
        .iter_mut()
        .zip(emb.sim.as_slice())
        .zip(&batch.labels)
    {
        let z = model.logit_scale * s + model.logit_bias;
        loss += bce_term(z, y, w1);
        let g = bce_grad(z, y, w1) * inv_count;
        grads.logit_scale += g * s;
        grads.logit_bias += g;
        *ds = g * model.logit_scale;
    }
    loss *= inv_count;

    // d/d eq = dsim . ek, d/d ek = dsim^T . eq, then through tanh
    let mut dq = Matrix::zeros(m, b);
    let mut dk = Matrix::zeros(n, b);
    for i in 0..m {
        let eq_i = emb.eq.row(i);
        for (j, &g) in dsim.row(i).iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            for (acc, &e) in dq.row_mut(i).iter_mut().zip(emb.ek.row(j)) {
                *acc += g * e;
            }
            for (acc, &e) in dk.row_mut(j).iter_mut().zip(eq_i) {
                *acc += g * e;
            }
        }
    }
    for (d, &e) in dq.as_mut_slice().iter_mut().zip(emb.eq.as_slice()) {
        *d *= T::one() - e * e;
    }
    for (d, &e) in dk.as_mut_slice().iter_mut().zip(emb.ek.as_slice()) {
        *d *= T::one() - e * e;
    }

    backward_batch(&model.query, &emb.query_trace, dq, &mut grads.query);
    backward_batch(&model.key, &emb.key_trace, dk, &mut grads.key);
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian, Rng};
    use crate::signatures::Dense;
    use crate::training::TrainConfig;

    fn small_setup(seed: u64) -> (HashModel<f64>, TrainBatch<f64>) {
        let mut rng = Rng::new(seed);
        let cfg = TrainConfig {
            hidden: vec![16],
            bits: 8,
            seed,
            logit_scale: 1.3,
            logit_bias: -0.4,
            ..TrainConfig::default()
        };
        let model = HashModel::init(8, &cfg).unwrap();
        let inst = AttentionInstance::new(
            gaussian(&mut rng, 12, 8, 0.0, 1.0).unwrap(),
            gaussian(&mut rng, 12, 8, 0.0, 1.0).unwrap(),
        )
        .unwrap();
        let queries = gaussian(&mut rng, 3, 8, 0.5, 1.0).unwrap();
        (model, make_labels(&inst, &queries, 3).unwrap())
    }

    #[test]
    fn labels_exactly_label_k_per_row() {
        let (_, batch) = small_setup(1);
        for i in 0..3 {
            assert_eq!(batch.label_row(i).iter().filter(|&&y| y).count(), 3);
        }
    }

    #[test]
    fn labels_all_ones_when_k_is_n() {
        let mut rng = Rng::new(2);
        let inst = AttentionInstance::new(
            gaussian::<f64>(&mut rng, 5, 2, 0.0, 1.0).unwrap(),
            gaussian(&mut rng, 5, 2, 0.0, 1.0).unwrap(),
        )
        .unwrap();
        let q = gaussian(&mut rng, 2, 2, 0.0, 1.0).unwrap();
        assert!(make_labels(&inst, &q, 5).unwrap().labels.iter().all(|&y| y));
        assert!(make_labels(&inst, &q, 6).is_err());
        assert!(make_labels(&inst, &q, 0).is_err());
    }

    #[test]
    fn loss_agrees_with_batch_loss_and_bce() {
        let (model, batch) = small_setup(3);
        let (l, _) = loss_and_grad(&model, &batch, 2.5).unwrap();
        assert!((l - batch_loss(&model, &batch, 2.5).unwrap()).abs() < 1e-14);
        let mut all_logits = Vec::new();
        for q in batch.queries.iter_rows() {
            all_logits.extend(crate::training::logits(&model, q, &batch.keys).unwrap().iter());
        }
        let direct = crate::training::bce_loss(&all_logits, &batch.labels, 2.5).unwrap();
        assert!((l - direct).abs() < 1e-12);
    }

    #[test]
    fn finite_difference_spot_check() {
        let (model, batch) = small_setup(4);
        let (_, grads) = loss_and_grad(&model, &batch, 3.0).unwrap();
        let h = 1e-6;
        let flat_grads: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();
        let count = model.parameter_count();
        for p in (0..count).step_by(37) {
            let bump = |delta: f64| {
                let mut m = model.clone();
                let mut seen = 0;
                for t in m.tensors_mut() {
                    if p < seen + t.len() {
                        t[p - seen] += delta;
                        break;
                    }
                    seen += t.len();
                }
                batch_loss(&m, &batch, 3.0).unwrap()
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let a = flat_grads[p];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-5, "param {p}: analytic {a} fd {fd}");
        }
    }

    #[test]
    fn scalar_chain_rule() {
        // 1 -> 1 linear networks: logit = s * tanh(wq x) * tanh(wk y) + c
        let net = |w: f64| {
            MappingNetwork::new(vec![Dense::new(Matrix::new(1, 1, vec![w]).unwrap(), vec![0.0]).unwrap()])
                .unwrap()
        };
        let (wq, wk, s, c, x, y, w1) = (0.7, -1.2, 1.5, 0.1, 0.9, 0.4, 2.0);
        let model = HashModel {
            query: net(wq),
            key: net(wk),
            logit_scale: s,
            logit_bias: c,
        };
        let batch = TrainBatch {
            queries: Matrix::new(1, 1, vec![x]).unwrap(),
            keys: Matrix::new(1, 1, vec![y]).unwrap(),
            values: Matrix::new(1, 1, vec![1.0]).unwrap(),
            labels: vec![true],
            label_k: 1,
        };
        let (a, b) = ((wq * x).tanh(), (wk * y).tanh());
        let z = s * a * b + c;
        let dz = w1 * (1.0 / (1.0 + (-z).exp()) - 1.0);
        let (_, g) = loss_and_grad(&model, &batch, w1).unwrap();
        assert!((g.logit_bias - dz).abs() < 1e-15);
        assert!((g.logit_scale - dz * a * b).abs() < 1e-15);
        assert!((g.query.layers()[0].weights.get(0, 0) - dz * s * b * (1.0 - a * a) * x).abs() < 1e-15);
        assert!((g.key.layers()[0].weights.get(0, 0) - dz * s * a * (1.0 - b * b) * y).abs() < 1e-15);
    }

    #[test]
    fn saturated_optimum_has_vanishing_gradient() {
        // embeddings saturate at +-1; positives agree, negatives disagree, large scale
        let net = |w: f64| {
            MappingNetwork::new(vec![Dense::new(Matrix::new(1, 1, vec![w]).unwrap(), vec![0.0]).unwrap()])
                .unwrap()
        };
        let model = HashModel {
            query: net(50.0),
            key: net(50.0),
            logit_scale: 40.0,
            logit_bias: 0.0,
        };
        let batch = TrainBatch {
            queries: Matrix::new(1, 1, vec![1.0]).unwrap(),
            keys: Matrix::new(2, 1, vec![1.0, -1.0]).unwrap(),
            values: Matrix::new(2, 1, vec![1.0, 1.0]).unwrap(),
            labels: vec![true, false],
            label_k: 1,
        };
        let (loss, g) = loss_and_grad(&model, &batch, 1.0).unwrap();
        let norm: f64 = g.tensors().iter().flat_map(|t| t.iter()).map(|x| x * x).sum::<f64>().sqrt();
        assert!(loss < 1e-15);
        assert!(norm < 1e-6, "gradient norm {norm}");
    }
}
