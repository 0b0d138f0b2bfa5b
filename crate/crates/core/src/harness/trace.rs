use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionInstance;
use crate::error::{Error, Result};
use crate::numerics::{gaussian, Matrix, Rng};

pub const TRACE_MAGIC: &[u8; 5] = b"HATR1";
pub const TRACE_VERSION: u8 = 0x01;

/// Synthetic trace recipe: keys and values `N(mean, std^2)` per entry,
/// queries likewise but centred away from the keys by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceParams {
    pub n_keys: usize,
    pub n_queries: usize,
    pub d: usize,
    pub seed: u64,
    pub key_mean: f64,
    pub key_std: f64,
    pub value_mean: f64,
    pub value_std: f64,
    pub query_mean: f64,
    pub query_std: f64,
}

impl Default for TraceParams {
    fn default() -> Self {
        Self {
            n_keys: 1024,
            n_queries: 2500,
            d: 32,
            seed: 42,
            key_mean: 0.0,
            key_std: 1.0,
            value_mean: 0.0,
            value_std: 1.0,
            query_mean: 0.5,
            query_std: 1.0,
        }
    }
}

/// Recorded keys, values and queries of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub keys: Matrix<f64>,
    pub values: Matrix<f64>,
    pub queries: Matrix<f64>,
    /// Generator parameters when the trace was synthesised in this process.
    /// Not stored in the file.
    pub meta: Option<TraceParams>,
}

impl Trace {
    pub fn new(keys: Matrix<f64>, values: Matrix<f64>, queries: Matrix<f64>) -> Result<Self> {
        let d = keys.cols();
        if keys.rows() == 0 || d == 0 {
            return Err(Error::Contract("trace needs at least one key of width >= 1".into()));
        }
        if values.rows() != keys.rows() || values.cols() != d || queries.cols() != d {
            return Err(Error::Contract(format!(
                "trace shapes disagree: keys {}x{}, values {}x{}, queries {}x{}",
                keys.rows(),
                d,
                values.rows(),
                values.cols(),
                queries.rows(),
                queries.cols()
            )));
        }
        if !(keys.is_finite() && values.is_finite() && queries.is_finite()) {
            return Err(Error::Contract("trace contains non-finite entries".into()));
        }
        Ok(Self {
            keys,
            values,
            queries,
            meta: None,
        })
    }

    pub fn n_keys(&self) -> usize {
        self.keys.rows()
    }

    pub fn n_queries(&self) -> usize {
        self.queries.rows()
    }

    pub fn dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn instance(&self) -> Result<AttentionInstance<f64>> {
        AttentionInstance::new(self.keys.clone(), self.values.clone())
    }

    /// Splits the queries into `(train, eval)` with the last `n_eval` rows
    /// held out.
    pub fn split_queries(&self, n_eval: usize) -> Result<(Matrix<f64>, Matrix<f64>)> {
        let m = self.n_queries();
        if n_eval > m {
            return Err(Error::OutOfRange {
                context: "evaluation query count",
                value: n_eval,
                min: 0,
                max: m,
            });
        }
        Ok((self.queries.slice_rows(0, m - n_eval)?, self.queries.slice_rows(m - n_eval, m)?))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TRACE_MAGIC)?;
        w.write_all(&[TRACE_VERSION])?;
        for v in [self.n_keys(), self.n_queries(), self.dim()] {
            let v = u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")))?;
            w.write_all(&v.to_le_bytes())?;
        }
        for m in [&self.keys, &self.values, &self.queries] {
            for x in m.as_slice() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 6];
        r.read_exact(&mut head)?;
        if &head[..5] != TRACE_MAGIC {
            return Err(Error::Format("not a trace file (bad magic)".into()));
        }
        if head[5] != TRACE_VERSION {
            return Err(Error::Format(format!("unsupported trace version {}", head[5])));
        }
        let mut dims = [0usize; 3];
        for v in dims.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = u32::from_le_bytes(b) as usize;
        }
        let [n_keys, n_queries, d] = dims;
        let mut read_matrix = |rows: usize| -> Result<Matrix<f64>> {
            let mut data = Vec::with_capacity(rows * d);
            let mut b = [0u8; 8];
            for _ in 0..rows * d {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            Matrix::new(rows, d, data)
        };
        let keys = read_matrix(n_keys)?;
        let values = read_matrix(n_keys)?;
        let queries = read_matrix(n_queries)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after trace payload".into()));
        }
        Self::new(keys, values, queries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Draws keys, then values, then queries from one stream seeded by `params.seed`.
pub fn gen_data(params: &TraceParams) -> Result<Trace> {
    if params.n_keys == 0 || params.d == 0 {
        return Err(Error::Contract(format!(
            "trace needs n_keys >= 1 and d >= 1, got n_keys={} d={}",
            params.n_keys, params.d
        )));
    }
    let mut rng = Rng::new(params.seed);
    let keys = gaussian(&mut rng, params.n_keys, params.d, params.key_mean, params.key_std)?;
    let values = gaussian(&mut rng, params.n_keys, params.d, params.value_mean, params.value_std)?;
    let queries = gaussian(&mut rng, params.n_queries, params.d, params.query_mean, params.query_std)?;
    let mut trace = Trace::new(keys, values, queries)?;
    trace.meta = Some(params.clone());
    Ok(trace)
}
