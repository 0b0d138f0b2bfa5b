//! Trace files, evaluation drivers, the scoring microbenchmark and report I/O.
//!
//! Every CSV report starts with a `schema_version` column. Current headers:
//!
//! | report | columns |
//! |---|---|
//! | [`EvalReport`] | `schema_version,method,bits,budget,sink,recent,true_k,n_queries,recall_mean,recall_std,rel_error_mean,time_per_query_us` |
//! | [`AttnErrorRow`] | `schema_version,query,method,budget,n_selected,recall,rel_error` |
//! | [`CosineRow`] | `schema_version,k,raw,tanh,sign` |
//! | [`LossRow`] | `schema_version,step,loss` |
//! | [`BenchRow`] | `schema_version,n_tokens,d,method,bits,reps,median_s,ns_per_token` |
//!
//! `bits` is empty for scorers without signatures. Timing columns
//! (`time_per_query_us`, `median_s`, `ns_per_token`) are the only ones that
//! vary between identical runs.

mod bench;
mod eval;
mod report;
mod trace;

pub use bench::{bench_latency, BenchConfig, BenchReport, BenchRow};
pub use eval::{relative_error, run_eval, EvalConfig, EvalReport, QueryEval, Scorer};
pub use report::{read_csv, write_csv, write_report, AttnErrorRow, CosineRow, LossRow};
pub use trace::{gen_data, Trace, TraceParams, TRACE_MAGIC, TRACE_VERSION};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
