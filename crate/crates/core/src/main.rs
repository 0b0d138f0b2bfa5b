use std::fs::File;
use std::io::{self, BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use hashattn::harness::{
    bench_latency, gen_data, run_eval, write_csv, write_report, AttnErrorRow, BenchConfig,
    CosineRow, EvalConfig, LossRow, Scorer, Trace, TraceParams, REPORT_SCHEMA_VERSION,
};
use hashattn::mips::{LshIndex, LshProjector, PsiMode};
use hashattn::signatures::build_cache;
use hashattn::training::{eval_cosine_shift, train_chunked, Checkpoint, KvSchedule, TrainConfig};
use hashattn::{Error, HashModel, Result, SignatureCache};

#[derive(Parser)]
#[command(name = "hashattn", version, about = "Learned bit signatures for sparse attention")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic key/value/query trace.
    GenData(GenDataArgs),
    /// Train query and key mapping networks on a trace.
    Train(TrainArgs),
    /// Hash every key of a trace with a trained key network.
    BuildCache(BuildCacheArgs),
    /// Recall of a scorer against the oracle top-k.
    EvalRecall(EvalArgs),
    /// Per-query relative error of sparse attention.
    EvalAttnError(EvalArgs),
    /// Query/key cosine similarity under raw, tanh and sign embeddings.
    EvalCosine(CosineArgs),
    /// Recall of random-projection signatures at one or more widths.
    LshBaseline(LshArgs),
    /// Hamming versus inner-product scoring latency.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1024)]
    n_keys: usize,
    #[arg(long, default_value_t = 2500)]
    n_queries: usize,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    query_mean: f64,
    #[arg(long, default_value_t = 1.0)]
    query_std: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    key_mean: f64,
    #[arg(long, default_value_t = 1.0)]
    key_std: f64,
    #[arg(long, default_value_t = 1.0)]
    value_std: f64,
}

#[derive(Args)]
struct Split {
    /// The last N queries of the trace are held out for evaluation.
    #[arg(long, default_value_t = 500)]
    eval_queries: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Checkpoint JSON to write.
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV of per-step losses.
    #[arg(long)]
    losses: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    bits: usize,
    #[arg(long, value_delimiter = ',', default_value = "128,128")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    label_k: usize,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    alpha: f64,
    /// Defaults to 1 / label_k.
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    /// Total optimizer steps; the chunk sequence is replayed as needed.
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    chunk_size: usize,
    /// `full`: every chunk sees all keys. `growing`: the visible prefix grows with the chunk index.
    #[arg(long, default_value = "full")]
    kv_schedule: KvSchedule,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[command(flatten)]
    split: Split,
}

#[derive(Args)]
struct BuildCacheArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ScorerKind {
    Learned,
    Oracle,
    Lsh,
    Random,
}

#[derive(Args)]
struct Selection {
    #[arg(long, default_value_t = 64)]
    budget: usize,
    #[arg(long, default_value_t = 8)]
    sink: usize,
    #[arg(long, default_value_t = 8)]
    recent: usize,
    #[arg(long, default_value_t = 32)]
    true_k: usize,
}

impl Selection {
    fn config(&self) -> EvalConfig {
        EvalConfig {
            budget: self.budget,
            sink: self.sink,
            recent: self.recent,
            true_k: self.true_k,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_enum, default_value = "learned")]
    scorer: ScorerKind,
    /// Required by the learned scorer.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Precomputed key signatures; rebuilt from the checkpoint when absent.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Signature width of the LSH scorer.
    #[arg(long, default_value_t = 32)]
    bits: usize,
    #[arg(long, default_value = "exact")]
    psi_mode: PsiMode,
    /// Seed of the LSH projection or random scorer.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    selection: Selection,
    #[command(flatten)]
    split: Split,
    /// CSV, or JSON for a `.json` path. Stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CosineArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 32)]
    true_k: usize,
    #[command(flatten)]
    split: Split,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LshArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "32,256,1024")]
    bits: Vec<usize>,
    #[arg(long, default_value = "exact")]
    psi_mode: PsiMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    selection: Selection,
    #[command(flatten)]
    split: Split,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "16384,65536,262144")]
    n_tokens: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
    bits: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    d: usize,
    #[arg(long, default_value_t = 9)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit<S: Serialize>(out: Option<&Path>, rows: &[S]) -> Result<()> {
    match out {
        Some(p) => write_report(p, rows),
        None => write_csv(io::stdout().lock(), rows),
    }
}

fn load_model(path: &Path) -> Result<HashModel> {
    Checkpoint::load(path)?.to_model()
}

fn load_cache(path: &Path) -> Result<SignatureCache> {
    SignatureCache::read_from(BufReader::new(File::open(path)?))
}

fn gen_data_cmd(a: GenDataArgs) -> Result<()> {
    let params = TraceParams {
        n_keys: a.n_keys,
        n_queries: a.n_queries,
        d: a.d,
        seed: a.seed,
        key_mean: a.key_mean,
        key_std: a.key_std,
        value_std: a.value_std,
        query_mean: a.query_mean,
        query_std: a.query_std,
        ..TraceParams::default()
    };
    gen_data(&params)?.save(&a.out)?;
    info!("wrote {} keys, {} queries, d={} to {}", a.n_keys, a.n_queries, a.d, a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let trace = Trace::load(&a.trace)?;
    let (train_q, _) = trace.split_queries(a.split.eval_queries)?;
    let cfg = TrainConfig {
        label_k: a.label_k,
        alpha: a.alpha,
        beta: a.beta.unwrap_or(1.0 / a.label_k.max(1) as f64),
        learning_rate: a.lr,
        chunk_size: a.chunk_size,
        kv_schedule: a.kv_schedule,
        steps: a.steps,
        seed: a.seed,
        hidden: a.hidden,
        bits: a.bits,
        ..TrainConfig::default()
    };
    let outcome = train_chunked(&trace.instance()?, &train_q, &cfg)?;
    Checkpoint::from_model(&outcome.model, cfg.seed).save(&a.out)?;
    if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.losses.last()) {
        info!("{} steps, loss {first:.5} -> {last:.5}", outcome.losses.len());
    }
    if let Some(p) = a.losses {
        let rows: Vec<LossRow> = outcome
            .losses
            .iter()
            .enumerate()
            .map(|(step, &loss)| LossRow {
                schema_version: REPORT_SCHEMA_VERSION,
                step,
                loss,
            })
            .collect();
        write_report(p, &rows)?;
    }
    Ok(())
}

fn build_cache_cmd(a: BuildCacheArgs) -> Result<()> {
    let trace = Trace::load(&a.trace)?;
    let model = load_model(&a.checkpoint)?;
    let cache = build_cache(&model.key, &trace.keys)?;
    cache.write_to(BufWriter::new(File::create(&a.out)?))?;
    info!("cached {} signatures of {} bits", cache.len(), cache.bits());
    Ok(())
}

/// Runs `f` with the scorer the arguments describe.
fn with_scorer<R>(
    a: &EvalArgs,
    trace: &Trace,
    inst: &hashattn::AttentionInstance,
    f: impl FnOnce(Scorer<'_>) -> Result<R>,
) -> Result<R> {
    match a.scorer {
        ScorerKind::Oracle => f(Scorer::Oracle),
        ScorerKind::Random => f(Scorer::Random { seed: a.seed }),
        ScorerKind::Lsh => {
            let proj = LshProjector::new(a.bits, trace.dim() + 2, a.seed)?;
            let index = LshIndex::build(proj, inst, a.psi_mode)?;
            f(Scorer::Lsh(&index))
        }
        ScorerKind::Learned => {
            let path = a
                .checkpoint
                .as_deref()
                .ok_or_else(|| Error::Contract("the learned scorer needs --checkpoint".into()))?;
            let model = load_model(path)?;
            let cache = match &a.cache {
                Some(p) => load_cache(p)?,
                None => build_cache(&model.key, &trace.keys)?,
            };
            f(Scorer::Learned {
                query: &model.query,
                cache: &cache,
            })
        }
    }
}

fn eval_recall_cmd(a: EvalArgs) -> Result<()> {
    let trace = Trace::load(&a.trace)?;
    let (_, eval_q) = trace.split_queries(a.split.eval_queries)?;
    let inst = trace.instance()?;
    let cfg = a.selection.config();
    let report = with_scorer(&a, &trace, &inst, |s| run_eval(&inst, &eval_q, s, &cfg))?;
    info!("{} recall {:.4} +- {:.4}", report.method, report.recall_mean, report.recall_std);
    emit(a.out.as_deref(), &[report])
}

fn eval_attn_error_cmd(a: EvalArgs) -> Result<()> {
    let trace = Trace::load(&a.trace)?;
    let (_, eval_q) = trace.split_queries(a.split.eval_queries)?;
    let inst = trace.instance()?;
    let cfg = a.selection.config();
    let report = with_scorer(&a, &trace, &inst, |s| run_eval(&inst, &eval_q, s, &cfg))?;
    info!("{} mean relative error {:.5}", report.method, report.rel_error_mean);
    let rows: Vec<AttnErrorRow> = report
        .per_query
        .iter()
        .enumerate()
        .map(|(query, p)| AttnErrorRow {
            schema_version: REPORT_SCHEMA_VERSION,
            query,
            method: report.method.clone(),
            budget: report.budget,
            n_selected: p.n_selected,
            recall: p.recall,
            rel_error: p.rel_error,
        })
        .collect();
    emit(a.out.as_deref(), &rows)
}

fn eval_cosine_cmd(a: CosineArgs) -> Result<()> {
    let trace = Trace::load(&a.trace)?;
    let (_, eval_q) = trace.split_queries(a.split.eval_queries)?;
    let model = load_model(&a.checkpoint)?;
    let shift = eval_cosine_shift(&model, &trace.instance()?, &eval_q, a.true_k)?;
    let row = CosineRow {
        schema_version: REPORT_SCHEMA_VERSION,
        k: a.true_k,
        raw: shift.raw,
        tanh: shift.tanh,
        sign: shift.sign,
    };
    emit(a.out.as_deref(), &[row])
}

fn lsh_baseline_cmd(a: LshArgs) -> Result<()> {
    let trace = Trace::load(&a.trace)?;
    let (_, eval_q) = trace.split_queries(a.split.eval_queries)?;
    let inst = trace.instance()?;
    let cfg = a.selection.config();
    let reports = a
        .bits
        .iter()
        .map(|&bits| {
            let proj = LshProjector::new(bits, trace.dim() + 2, a.seed)?;
            let index = LshIndex::build(proj, &inst, a.psi_mode)?;
            let r = run_eval(&inst, &eval_q, Scorer::Lsh(&index), &cfg)?;
            info!("lsh b={bits}: recall {:.4}", r.recall_mean);
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    emit(a.out.as_deref(), &reports)
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        n_tokens: a.n_tokens,
        bits: a.bits,
        d: a.d,
        reps: a.reps,
        seed: a.seed,
        ..BenchConfig::default()
    };
    emit(a.out.as_deref(), &bench_latency(&cfg)?.rows)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::BuildCache(a) => build_cache_cmd(a),
        Command::EvalRecall(a) => eval_recall_cmd(a),
        Command::EvalAttnError(a) => eval_attn_error_cmd(a),
        Command::EvalCosine(a) => eval_cosine_cmd(a),
        Command::LshBaseline(a) => lsh_baseline_cmd(a),
        Command::Bench(a) => bench_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
