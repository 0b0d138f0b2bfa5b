use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, gaussian, Matrix, Rng};
use crate::signatures::{words_for, Signature, SignatureCache};

use super::REPORT_SCHEMA_VERSION;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_tokens: Vec<usize>,
    pub bits: Vec<usize>,
    /// Width of the inner-product baseline.
    pub d: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_tokens: vec![1 << 14, 1 << 16, 1 << 18],
            bits: vec![64, 128, 256, 512],
            d: 128,
            reps: 9,
            warmup: 2,
            seed: 0,
        }
    }
}

/// One timed kernel. `bits` is empty for the inner-product baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub schema_version: u32,
    pub n_tokens: usize,
    pub d: usize,
    pub method: String,
    pub bits: Option<usize>,
    pub reps: usize,
    /// Median wall time of one full scoring pass, seconds.
    pub median_s: f64,
    pub ns_per_token: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn find(&self, n_tokens: usize, method: &str, bits: Option<usize>) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.n_tokens == n_tokens && r.method == method && r.bits == bits)
    }
}

fn median_time(reps: usize, warmup: usize, mut f: impl FnMut()) -> f64 {
    for _ in 0..warmup {
        f();
    }
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[reps / 2]
}

fn random_signature(rng: &mut Rng, bits: usize) -> Signature {
    let mut words: Vec<u64> = (0..words_for(bits)).map(|_| rng.next_u64()).collect();
    if !bits.is_multiple_of(64) {
        *words.last_mut().expect("bits >= 1") &= (1u64 << (bits % 64)) - 1;
    }
    Signature::from_words(bits, words).expect("tail bits masked")
}

/// Median time of scoring every token by a `d`-wide `f64` inner product,
/// and by packed Hamming distance at each bit width. Runs on the calling
/// thread only.
pub fn bench_latency(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.d == 0 || cfg.reps == 0 || cfg.n_tokens.iter().chain(&cfg.bits).any(|&x| x == 0) {
        return Err(Error::Contract("benchmark sizes and repetitions must be at least 1".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut rows = Vec::new();
    let mut row = |n: usize, method: &str, bits: Option<usize>, median_s: f64| {
        rows.push(BenchRow {
            schema_version: REPORT_SCHEMA_VERSION,
            n_tokens: n,
            d: cfg.d,
            method: method.into(),
            bits,
            reps: cfg.reps,
            median_s,
            ns_per_token: median_s * 1e9 / n as f64,
        })
    };
    for &n in &cfg.n_tokens {
        let keys: Matrix<f64> = gaussian(&mut rng, n, cfg.d, 0.0, 1.0)?;
        let q: Vec<f64> = (0..cfg.d).map(|_| rng.standard_normal()).collect();
        let mut out = vec![0.0f64; n];
        let t = median_time(cfg.reps, cfg.warmup, || {
            for (o, k) in out.iter_mut().zip(keys.iter_rows()) {
                *o = dot(black_box(k), &q);
            }
            black_box(&out);
        });
        row(n, "inner_product", None, t);
        drop(keys);

        for &bits in &cfg.bits {
            let sigs: Vec<Signature> = (0..n).map(|_| random_signature(&mut rng, bits)).collect();
            let cache = SignatureCache::from_signatures(bits, &sigs)?;
            drop(sigs);
            let q_sig = random_signature(&mut rng, bits);
            let mut scores = Vec::with_capacity(n);
            let t = median_time(cfg.reps, cfg.warmup, || {
                cache.hash_score_into(black_box(&q_sig), &mut scores);
                black_box(&scores);
            });
            row(n, "hamming", Some(bits), t);
        }
    }
    Ok(BenchReport { rows })
}
