//! Test-set evaluation and the multi-seed synthetic benchmark.

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{input_terms, report_from_terms, EvalReport};
use crate::rng::indexed_stream;
use crate::stripe::{
    train_predictor, train_stripe_shape, train_stripe_time, subsample, SamplingConfig, SamplingMode, StripeModel,
    TrainReport,
};
use rand::Rng;

pub const THREADS_ENV: &str = "STRIPE_THREADS";

/// Worker count for evaluation: `STRIPE_THREADS` if set to a positive integer,
/// otherwise the available parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// How many predictions are drawn per input before subsampling.
pub fn pool_size(mode: SamplingMode, scfg: &SamplingConfig) -> usize {
    match mode {
        SamplingMode::Baseline | SamplingMode::ShapeTime => scfg.n_s * scfg.n_t,
        SamplingMode::ShapeOnly => scfg.n_s,
        SamplingMode::TimeOnly => scfg.n_t,
    }
}

/// Samples and subsamples the predictions for input `index` of a split.
pub fn predictions_for(model: &StripeModel, x: &crate::Trajectory, mode: SamplingMode, scfg: &SamplingConfig, index: usize) -> Result<Vec<crate::Trajectory>> {
    let pool = model.sample(x, mode, scfg, index as u64)?;
    let seed: u64 = indexed_stream(scfg.seed, "subsample-seed", index as u64).gen();
    subsample(&pool, scfg.n, seed)
}

/// Evaluates one sampling mode over a split with `threads` workers. Per-input
/// terms are computed independently and reduced in input order, so the report
/// does not depend on the thread count.
pub fn evaluate_split(
    model: &StripeModel,
    ds: &Dataset,
    split: Split,
    mode: SamplingMode,
    scfg: &SamplingConfig,
    cfg: &RunConfig,
    threads: usize,
) -> Result<EvalReport> {
    let examples = ds.split(split);
    if examples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    if scfg.n > pool_size(mode, scfg) {
        return Err(Error::Config(format!(
            "subsample size {} exceeds the {} predictions drawn in mode '{}'",
            scfg.n,
            pool_size(mode, scfg),
            mode.as_str()
        )));
    }
    let loss_cfg = cfg.loss_config();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let terms: Vec<[f64; 7]> = pool.install(|| {
        examples
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let preds = predictions_for(model, &ex.input, mode, scfg, i)?;
                input_terms(&preds, &ex.futures, &loss_cfg)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let n_futures = examples.iter().map(|e| e.futures.len()).max().unwrap_or(0);
    report_from_terms(&terms, scfg.n, n_futures)
}

/// Trains all three stages on the training split.
pub fn train_all(ds: &Dataset, cfg: &RunConfig) -> Result<(StripeModel, [TrainReport; 3])> {
    let (forecaster, rp) = train_predictor(ds, cfg)?;
    let (shape, rs) = train_stripe_shape(ds, &forecaster, cfg)?;
    let (time, rt) = train_stripe_time(ds, &forecaster, Some(&shape), cfg)?;
    Ok((
        StripeModel {
            forecaster,
            shape: Some(shape),
            time: Some(time),
        },
        [rp, rs, rt],
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRow {
    pub seed: u64,
    pub mode: SamplingMode,
    pub report: EvalReport,
}

/// For each seed: train every stage with `cfg.seed = seed`, then evaluate each
/// mode on the test split. Rows are seed-major in `modes` order.
pub fn run_benchmark(ds: &Dataset, cfg: &RunConfig, seeds: &[u64], modes: &[SamplingMode], threads: usize) -> Result<Vec<BenchmarkRow>> {
    let mut rows = Vec::with_capacity(seeds.len() * modes.len());
    for &seed in seeds {
        let cfg = RunConfig { seed, ..cfg.clone() };
        let (model, _) = train_all(ds, &cfg)?;
        let scfg = SamplingConfig::from_run(&cfg);
        for &mode in modes {
            let report = evaluate_split(&model, ds, Split::Test, mode, &scfg, &cfg, threads)?;
            rows.push(BenchmarkRow { seed, mode, report });
        }
    }
    Ok(rows)
}

/// Per-mode mean of the unscaled metric values across seeds.
pub fn mean_by_mode(rows: &[BenchmarkRow], mode: SamplingMode) -> Option<[f64; 7]> {
    let sel: Vec<&BenchmarkRow> = rows.iter().filter(|r| r.mode == mode).collect();
    if sel.is_empty() {
        return None;
    }
    let mut out = [0.0; 7];
    for r in &sel {
        for (o, v) in out.iter_mut().zip(r.report.values) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= sel.len() as f64);
    Some(out)
}

pub fn benchmark_csv(rows: &[BenchmarkRow], scaled: bool) -> String {
    let mut out = format!("seed,mode,{}\n", EvalReport::csv_header());
    for r in rows {
        let rep = if scaled { r.report.scaled() } else { r.report.clone() };
        let body = rep.to_csv();
        let line = body.lines().nth(1).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", r.seed, r.mode.as_str(), line));
    }
    out
}
