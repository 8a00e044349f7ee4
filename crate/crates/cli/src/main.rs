use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use stripe_core::config::RunConfig;
use stripe_core::data::{
    generate_synthetic, load_dataset, load_series_csv, parse_series, save_dataset, write_atomic, Dataset, Split,
    SyntheticConfig,
};
use stripe_core::experiment::{evaluate_split, pool_size, thread_count};
use stripe_core::metrics::{EvalReport, METRIC_NAMES};
use stripe_core::stripe::{
    load_bundle, save_store, train_predictor, train_stripe_shape, train_stripe_time, write_manifest, DataMeta,
    Manifest, SamplingConfig, SamplingMode, TrainReport, FORECASTER_FILE, SHAPE_FILE, TIME_FILE,
};
use stripe_core::verify::{run_suite, Suite, SuiteSizes};
use stripe_core::Trajectory;

/// File the effective configuration is echoed to in every output directory.
const CONFIG_ECHO: &str = "effective_config.txt";

#[derive(Parser)]
#[command(name = "stripe", version, about = "Diverse multi-future time-series forecasting with shape and time proposals")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a dataset CSV: the synthetic step benchmark, or windows of a real series.
    GenData(GenDataArgs),
    /// Train the predictor and/or the proposal networks into a model directory.
    Train(TrainArgs),
    /// Sample, subsample and score a split; writes a one-row report plus a long CSV.
    Evaluate(EvaluateArgs),
    /// Run the oracle and property suites.
    Verify(VerifyArgs),
    /// Emit every trajectory sampled for one input series as long-format CSV.
    Sample(SampleArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    n_inputs: usize,
    #[arg(long, default_value_t = 10)]
    n_futures: usize,
    /// Variance of the additive Gaussian noise; 0 disables it.
    #[arg(long, default_value_t = 0.01)]
    noise_var: f64,
    /// Window a real series (one value per row) instead of generating data.
    #[arg(long)]
    series: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    input_len: usize,
    #[arg(long, default_value_t = 20)]
    horizon: usize,
    /// Window stride for --series.
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Predictor,
    Shape,
    Time,
    All,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    stage: Stage,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    None,
    Shape,
    Time,
    #[value(name = "shape+time")]
    ShapeTime,
}

impl From<ModeArg> for SamplingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::None => SamplingMode::Baseline,
            ModeArg::Shape => SamplingMode::ShapeOnly,
            ModeArg::Time => SamplingMode::TimeOnly,
            ModeArg::ShapeTime => SamplingMode::ShapeTime,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// One-row report CSV; the long `metric,value` table goes next to it.
    #[arg(long)]
    out: PathBuf,
    /// Evaluate the predictor with standard-normal codes and no proposals.
    #[arg(long, conflicts_with = "mode")]
    baseline: bool,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Predictions drawn per input; must equal the pool size of the mode.
    #[arg(long)]
    samples: Option<usize>,
    /// Predictions kept per input after uniform subsampling.
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Sampling seed; defaults to the seed the model was trained with.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value = "all", value_parser = Suite::NAMES)]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    /// Input series CSV; the last `input_len` values are used.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "shape+time")]
    mode: ModeArg,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<stripe_core::Error>())
                .map_or("cli", |c| c.kind());
            eprintln!("stripe-error kind={kind} message={:?}", format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::Verify(a) => verify(a),
        Cmd::Sample(a) => sample(a),
    }
}

fn effective_config(a: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    for kv in &a.set {
        let Some((k, v)) = kv.split_once('=') else {
            bail!(stripe_core::Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")));
        };
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join(CONFIG_ECHO), cfg.to_text().as_bytes())?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let ds = match &a.series {
        Some(path) => load_series_csv(path, a.input_len, a.horizon, a.stride)?,
        None => generate_synthetic(
            &SyntheticConfig {
                n_inputs: a.n_inputs,
                n_futures: a.n_futures,
                noise_var: a.noise_var,
                input_len: a.input_len,
                horizon: a.horizon,
            },
            a.seed,
        )?,
    };
    std::fs::create_dir_all(parent_dir(&a.out))?;
    save_dataset(&ds, &a.out)?;
    let counts: Vec<String> = Split::ALL
        .iter()
        .map(|s| format!("{}={}", s.as_str(), ds.split(*s).len()))
        .collect();
    println!("wrote {} ({})", a.out.display(), counts.join(" "));
    Ok(())
}

fn trace_csv(r: &TrainReport) -> String {
    let mut out = String::from("step,loss,diversity\n");
    for (i, l) in r.losses.iter().enumerate() {
        let d = r.diversity.get(i).map_or(String::new(), |d| format!("{d:?}"));
        out.push_str(&format!("{i},{l:?},{d}\n"));
    }
    out
}

fn report_stage(dir: &Path, r: &TrainReport) -> anyhow::Result<()> {
    write_atomic(&dir.join(format!("{}_trace.csv", r.stage)), trace_csv(r).as_bytes())?;
    let first = r.first_loss().unwrap_or(f64::NAN);
    let last = r.last_loss().unwrap_or(f64::NAN);
    print!("stage {}: steps={} loss {first:.6} -> {last:.6}", r.stage, r.losses.len());
    if let (Some(d0), Some(d1)) = (r.diversity.first(), r.diversity.last()) {
        print!(" diversity {d0:.6} -> {d1:.6} psd_failures={}", r.psd_failures);
    }
    println!();
    Ok(())
}

fn check_meta(manifest: &Manifest, ds: &Dataset) -> anyhow::Result<()> {
    let m = &manifest.meta;
    if (m.channels, m.input_len, m.horizon) != (ds.channels, ds.input_len, ds.horizon) {
        bail!(stripe_core::Error::Config(format!(
            "model expects (channels, input_len, horizon) = ({}, {}, {}), data has ({}, {}, {})",
            m.channels, m.input_len, m.horizon, ds.channels, ds.input_len, ds.horizon
        )));
    }
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = effective_config(&a.cfg)?;
    let ds = load_dataset(&a.data)?;
    let dir = &a.out_model;
    std::fs::create_dir_all(dir)?;
    echo_config(dir, &cfg)?;
    let manifest = Manifest {
        meta: DataMeta::of(&ds),
        config: cfg.clone(),
    };
    let (run_pred, run_shape, run_time) = match a.stage {
        Stage::Predictor => (true, false, false),
        Stage::Shape => (false, true, false),
        Stage::Time => (false, false, true),
        Stage::All => (true, true, true),
    };
    if run_pred {
        let (f, r) = train_predictor(&ds, &cfg)?;
        save_store(dir, FORECASTER_FILE, f.store())?;
        // A new forecaster invalidates proposals trained against the old one.
        for stale in [SHAPE_FILE, TIME_FILE] {
            let p = dir.join(stale);
            if p.exists() {
                std::fs::remove_file(p)?;
            }
        }
        write_manifest(dir, &manifest)?;
        report_stage(dir, &r)?;
    }
    if run_shape || run_time {
        let (model, old) = load_bundle(dir)?;
        check_meta(&old, &ds)?;
        let mut shape = model.shape;
        if run_shape {
            let (s, r) = train_stripe_shape(&ds, &model.forecaster, &cfg)?;
            save_store(dir, SHAPE_FILE, s.store())?;
            report_stage(dir, &r)?;
            shape = Some(s);
        }
        if run_time {
            let (t, r) = train_stripe_time(&ds, &model.forecaster, shape.as_ref(), &cfg)?;
            save_store(dir, TIME_FILE, t.store())?;
            report_stage(dir, &r)?;
        }
        write_manifest(dir, &manifest)?;
    }
    println!("model written to {}", dir.display());
    Ok(())
}

fn print_report(r: &EvalReport) {
    let s = r.scaled();
    println!(
        "{:<20} {:>12}   (MSE and CRPS x1000, DILATE/DTW/TDI x100)",
        "metric", "value"
    );
    for (name, v) in METRIC_NAMES.iter().zip(s.values) {
        println!("{name:<20} {v:>12.4}");
    }
}

fn long_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    parent_dir(out).join(format!("{stem}_long.csv"))
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let (model, manifest) = load_bundle(&a.model)?;
    let ds = load_dataset(&a.data)?;
    check_meta(&manifest, &ds)?;
    let mut cfg = manifest.config.clone();
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let mode: SamplingMode = if a.baseline {
        SamplingMode::Baseline
    } else {
        a.mode.unwrap_or(ModeArg::ShapeTime).into()
    };
    let mut scfg = SamplingConfig::from_run(&cfg);
    if let Some(n) = a.subsample {
        scfg.n = n;
    }
    let pool = pool_size(mode, &scfg);
    if let Some(s) = a.samples {
        if s != pool {
            bail!(stripe_core::Error::Config(format!(
                "--samples {s} does not match the {pool} predictions mode '{}' draws (n_s = {}, n_t = {})",
                mode.as_str(),
                scfg.n_s,
                scfg.n_t
            )));
        }
    }
    cfg.n_eval = scfg.n;
    let threads = thread_count();
    let report = evaluate_split(&model, &ds, a.split.into(), mode, &scfg, &cfg, threads)?;
    let dir = parent_dir(&a.out);
    std::fs::create_dir_all(dir)?;
    write_atomic(&a.out, report.to_csv().as_bytes())?;
    write_atomic(&long_path(&a.out), report.to_long_csv().as_bytes())?;
    echo_config(dir, &cfg)?;
    println!(
        "mode {} on {} inputs: {} of {} predictions per input, {} threads",
        mode.as_str(),
        report.n_inputs,
        scfg.n,
        pool,
        threads
    );
    print_report(&report);
    Ok(())
}

fn verify(a: VerifyArgs) -> anyhow::Result<()> {
    let suite: Suite = a.suite.parse()?;
    let checks = run_suite(suite, a.seed, &SuiteSizes::default())?;
    for c in &checks {
        println!("{c}");
    }
    let passed = checks.iter().filter(|c| c.pass()).count();
    println!("verify {}: {passed}/{} checks passed", a.suite, checks.len());
    if passed != checks.len() {
        bail!("{} verification check(s) failed", checks.len() - passed);
    }
    Ok(())
}

fn sample(a: SampleArgs) -> anyhow::Result<()> {
    let (model, manifest) = load_bundle(&a.model)?;
    let mut cfg = manifest.config.clone();
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let values = parse_series(&text)?;
    let t = manifest.meta.input_len;
    if values.len() < t {
        bail!(stripe_core::Error::Size(format!(
            "input series has {} values, the model needs {t}",
            values.len()
        )));
    }
    let norm = &manifest.meta.norm;
    let x = norm.normalize(&Trajectory::from_series(values[values.len() - t..].to_vec())?)?;
    let trajs = model.sample(&x, a.mode.into(), &SamplingConfig::from_run(&cfg), 0)?;
    let mut out = String::from("trajectory_id,t,value\n");
    for (id, y) in trajs.iter().enumerate() {
        let y = norm.denormalize(y)?;
        for (step, v) in y.values().iter().enumerate() {
            out.push_str(&format!("{id},{step},{v:?}\n"));
        }
    }
    let dir = parent_dir(&a.out);
    std::fs::create_dir_all(dir)?;
    write_atomic(&a.out, out.as_bytes())?;
    echo_config(dir, &cfg)?;
    println!("wrote {} trajectories of length {} to {}", trajs.len(), manifest.meta.horizon, a.out.display());
    Ok(())
}
