//! Model lifecycle: predictor training, shape and time proposal training, the
//! sequential shape-then-time sampler, and the on-disk model bundle.
//!
//! The latent code is `z = (z_s, z_t)` with both halves of width `k / 2`. The
//! predictor is trained on `z = 0`. Proposal networks are trained afterwards with
//! the forecaster frozen; only the diversity term of the objective depends on
//! their parameters, so the quality term is tracked for monitoring only.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::RunConfig;
use crate::data::{write_atomic, Dataset, Example, Normalization, Split};
use crate::dpp::{diversity_loss_grad, psd_check, KernelKind, KernelSpec, PSD_TOL};
use crate::error::{parse_err, Error, Result};
use crate::losses::{base_loss, base_loss_grad};
use crate::nn::models::{time_major_to_trajectory, to_time_major};
use crate::nn::{Adam, AdamConfig, Forecaster, ForecasterSpec, ParameterStore, ProposalNet, ProposalSpec, Tape, Var};
use crate::rng::{indexed_stream, stream};
use crate::trajectory::Trajectory;

/// Loss trace and health counters of one training stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub stage: String,
    /// Reported objective per step (quality + lambda * diversity for proposals).
    pub losses: Vec<f64>,
    /// Mean diversity loss per step (proposal stages only).
    pub diversity: Vec<f64>,
    /// Steps whose kernel matrix failed the PSD check.
    pub psd_failures: usize,
}

impl TrainReport {
    fn new(stage: &str) -> Self {
        Self {
            stage: stage.to_string(),
            ..Default::default()
        }
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Shapes shared by the datasets a model is trained and evaluated on.
#[derive(Clone, Debug, PartialEq)]
pub struct DataMeta {
    pub channels: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub norm: Normalization,
}

impl DataMeta {
    pub fn of(ds: &Dataset) -> Self {
        Self {
            channels: ds.channels,
            input_len: ds.input_len,
            horizon: ds.horizon,
            norm: ds.norm.clone(),
        }
    }
}

pub fn forecaster_spec(cfg: &RunConfig, meta: &DataMeta) -> ForecasterSpec {
    ForecasterSpec {
        channels: meta.channels,
        hidden: cfg.hidden,
        k: cfg.k,
        horizon: meta.horizon,
    }
}

pub fn proposal_spec(cfg: &RunConfig, meta: &DataMeta, time: bool) -> ProposalSpec {
    ProposalSpec {
        channels: meta.channels,
        hidden: cfg.hidden,
        mlp_hidden: cfg.mlp_hidden,
        code_dim: cfg.k / 2,
        count: if time { cfg.n_t } else { cfg.n_s },
        condition_dim: if time { cfg.k / 2 } else { 0 },
    }
}

fn init_seed(root: u64, what: &str) -> u64 {
    stream(root, &format!("init-seed/{what}")).gen()
}

pub fn new_forecaster(cfg: &RunConfig, meta: &DataMeta) -> Forecaster {
    Forecaster::new(forecaster_spec(cfg, meta), init_seed(cfg.seed, "forecaster"))
}

pub fn new_proposal(cfg: &RunConfig, meta: &DataMeta, time: bool) -> ProposalNet {
    let what = if time { "time" } else { "shape" };
    ProposalNet::new(proposal_spec(cfg, meta, time), init_seed(cfg.seed, what))
}

fn train_examples(ds: &Dataset) -> Result<&[Example]> {
    let train = ds.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    Ok(train)
}

fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn optimizer_step(store: &mut ParameterStore, adam: &mut Adam, clip: f64) {
    if clip > 0.0 {
        store.clip_grad_norm(clip);
    }
    adam.step(store);
}

/// Trains the forecaster on the deterministic path `decode(encode(x), 0_k)`.
pub fn train_predictor(ds: &Dataset, cfg: &RunConfig) -> Result<(Forecaster, TrainReport)> {
    cfg.validate()?;
    let train = train_examples(ds)?;
    let meta = DataMeta::of(ds);
    let mut f = new_forecaster(cfg, &meta);
    let mut adam = Adam::new(f.store(), AdamConfig::with_lr(cfg.lr));
    let mut rng = stream(cfg.seed, "train/predictor");
    let loss_cfg = cfg.loss_config();
    let mut report = TrainReport::new("predictor");
    let scale = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.predictor_steps {
        let mut tape = Tape::new();
        let p = f.store().bind(&mut tape, true);
        let z0 = tape.constant(vec![0.0; cfg.k]);
        let mut seeds: Vec<(Var, Vec<f64>)> = Vec::with_capacity(cfg.batch_size);
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let ex = &train[rng.gen_range(0..train.len())];
            let y = &ex.futures[rng.gen_range(0..ex.futures.len())];
            let out = f.forward(&mut tape, &p, &ex.input, z0)?;
            let yhat = time_major_to_trajectory(tape.value(out), meta.channels)?;
            let lg = base_loss_grad(cfg.quality_loss, &yhat, y, &loss_cfg)?;
            total += lg.value;
            let g: Vec<f64> = to_time_major(&lg.grad, meta.channels).iter().map(|v| v * scale).collect();
            seeds.push((out, g));
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                stage: "predictor",
                step,
                loss,
            });
        }
        report.losses.push(loss);
        let seed_refs: Vec<(Var, &[f64])> = seeds.iter().map(|(v, g)| (*v, g.as_slice())).collect();
        let grads = tape.backward(&seed_refs);
        f.store_mut().accumulate(&p, &grads);
        optimizer_step(f.store_mut(), &mut adam, cfg.grad_clip);
    }
    Ok((f, report))
}

/// Which half of the latent code a proposal network emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Half {
    Shape,
    Time,
}

fn kernel_spec(cfg: &RunConfig, kind: KernelKind) -> KernelSpec {
    KernelSpec {
        kind,
        bandwidth: cfg.rbf_bandwidth,
        normalize: cfg.normalize_kernels,
    }
}

fn train_proposal(
    ds: &Dataset,
    forecaster: &Forecaster,
    shape_codes: Option<&ProposalNet>,
    cfg: &RunConfig,
    half: Half,
) -> Result<(ProposalNet, TrainReport)> {
    cfg.validate()?;
    let train = train_examples(ds)?;
    let meta = DataMeta::of(ds);
    if forecaster.spec() != forecaster_spec(cfg, &meta) {
        return Err(Error::Config("forecaster architecture does not match the run config".into()));
    }
    let (stage, kind) = match half {
        Half::Shape => ("shape", cfg.shape_kernel),
        Half::Time => ("time", cfg.time_kernel),
    };
    let mut net = new_proposal(cfg, &meta, half == Half::Time);
    let mut adam = Adam::new(net.store(), AdamConfig::with_lr(cfg.lr));
    let mut rng = stream(cfg.seed, &format!("train/{stage}/batch"));
    let mut zrng = stream(cfg.seed, &format!("train/{stage}/z"));
    let loss_cfg = cfg.loss_config();
    let spec = kernel_spec(cfg, kind);
    let kd = cfg.k / 2;
    let count = net.spec().count;
    let scale = 1.0 / cfg.proposal_batch as f64;
    let mut report = TrainReport::new(stage);
    for step in 0..cfg.proposal_steps {
        let mut tape = Tape::new();
        let p_net = net.store().bind(&mut tape, true);
        let p_f = forecaster.store().bind(&mut tape, false);
        let mut seeds: Vec<(Var, Vec<f64>)> = Vec::new();
        let (mut div_total, mut qual_total) = (0.0, 0.0);
        for _ in 0..cfg.proposal_batch {
            let ex = &train[rng.gen_range(0..train.len())];
            let y0 = &ex.futures[rng.gen_range(0..ex.futures.len())];
            // The other half of the code is redrawn for every example and step.
            let other = match shape_codes {
                Some(s) => {
                    let mut zs = s.codes(&ex.input, None)?;
                    zs.swap_remove(zrng.gen_range(0..zs.len()))
                }
                None => standard_normal(&mut zrng, kd),
            };
            let fixed = tape.constant(other);
            let codes = match half {
                Half::Shape => net.forward(&mut tape, &p_net, &ex.input, None)?,
                Half::Time => net.forward(&mut tape, &p_net, &ex.input, Some(fixed))?,
            };
            let h = forecaster.encode(&mut tape, &p_f, &ex.input)?;
            let last = forecaster.last_point(&mut tape, &ex.input);
            let mut outs = Vec::with_capacity(count);
            let mut set = Vec::with_capacity(count);
            for i in 0..count {
                let zi = tape.slice(codes, i * kd, kd);
                let z = match half {
                    Half::Shape => tape.concat(&[zi, fixed]),
                    Half::Time => tape.concat(&[fixed, zi]),
                };
                let out = forecaster.decode(&mut tape, &p_f, h, z, last)?;
                set.push(time_major_to_trajectory(tape.value(out), meta.channels)?);
                outs.push(out);
            }
            let dg = diversity_loss_grad(&set, &spec, &loss_cfg)?;
            if !psd_check(&dg.kernel, PSD_TOL).pass {
                report.psd_failures += 1;
            }
            div_total += dg.loss;
            for (out, g) in outs.into_iter().zip(&dg.grads) {
                let g: Vec<f64> = to_time_major(g, meta.channels)
                    .iter()
                    .map(|v| v * cfg.lambda * scale)
                    .collect();
                seeds.push((out, g));
            }
            let yhat0 = forecaster.predict_deterministic(&ex.input)?;
            qual_total += base_loss(cfg.quality_loss, &yhat0, y0, &loss_cfg)?;
        }
        let div = div_total * scale;
        let loss = qual_total * scale + cfg.lambda * div;
        if !loss.is_finite() {
            return Err(Error::Divergence { stage: if half == Half::Shape { "shape" } else { "time" }, step, loss });
        }
        report.losses.push(loss);
        report.diversity.push(div);
        let seed_refs: Vec<(Var, &[f64])> = seeds.iter().map(|(v, g)| (*v, g.as_slice())).collect();
        let grads = tape.backward(&seed_refs);
        net.store_mut().accumulate(&p_net, &grads);
        optimizer_step(net.store_mut(), &mut adam, cfg.grad_clip);
    }
    Ok((net, report))
}

/// Trains the shape proposal network against a frozen forecaster: the `n_s` codes
/// are decoded with one standard-normal `z_t` per example and diversified under
/// the shape kernel.
pub fn train_stripe_shape(ds: &Dataset, forecaster: &Forecaster, cfg: &RunConfig) -> Result<(ProposalNet, TrainReport)> {
    train_proposal(ds, forecaster, None, cfg, Half::Shape)
}

/// Trains the time proposal network against a frozen forecaster; its `n_t` codes
/// are diversified under the time kernel. The conditioning shape code is drawn
/// per example: uniformly among the proposals of `shape` when given, otherwise
/// from a standard normal.
pub fn train_stripe_time(
    ds: &Dataset,
    forecaster: &Forecaster,
    shape: Option<&ProposalNet>,
    cfg: &RunConfig,
) -> Result<(ProposalNet, TrainReport)> {
    if let Some(s) = shape {
        if s.spec().code_dim != cfg.k / 2 || s.spec().condition_dim != 0 {
            return Err(Error::Config("shape network does not match the run config".into()));
        }
    }
    train_proposal(ds, forecaster, shape, cfg, Half::Time)
}

/// A forecaster with optional trained proposal networks.
#[derive(Clone, Debug)]
pub struct StripeModel {
    pub forecaster: Forecaster,
    pub shape: Option<ProposalNet>,
    pub time: Option<ProposalNet>,
}

/// How latent codes are produced at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    /// `z ~ N(0, I_k)` without proposals.
    Baseline,
    /// Shape proposals with one shared standard-normal `z_t`.
    ShapeOnly,
    /// Time proposals conditioned on one standard-normal `z_s`.
    TimeOnly,
    /// Shape proposals, then time proposals conditioned on each shape code.
    ShapeTime,
}

impl SamplingMode {
    pub const ALL: [SamplingMode; 4] = [
        SamplingMode::Baseline,
        SamplingMode::ShapeOnly,
        SamplingMode::TimeOnly,
        SamplingMode::ShapeTime,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SamplingMode::Baseline => "none",
            SamplingMode::ShapeOnly => "shape",
            SamplingMode::TimeOnly => "time",
            SamplingMode::ShapeTime => "shape+time",
        }
    }
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SamplingMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown sampling mode '{s}' (none|shape|time|shape+time)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplingConfig {
    pub n_s: usize,
    pub n_t: usize,
    /// Subsample size used for evaluation.
    pub n: usize,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            n_s: cfg.n_s,
            n_t: cfg.n_t,
            n: cfg.n_eval,
            seed: cfg.seed,
        }
    }
}

impl StripeModel {
    fn shape_net(&self) -> Result<&ProposalNet> {
        self.shape
            .as_ref()
            .ok_or_else(|| Error::Dependency("shape proposal network is not trained".into()))
    }

    fn time_net(&self) -> Result<&ProposalNet> {
        self.time
            .as_ref()
            .ok_or_else(|| Error::Dependency("time proposal network is not trained".into()))
    }

    fn half(&self) -> usize {
        self.forecaster.spec().k / 2
    }

    fn check_counts(&self, scfg: &SamplingConfig, need_shape: bool, need_time: bool) -> Result<()> {
        if need_shape && self.shape_net()?.spec().count != scfg.n_s {
            return Err(Error::Config(format!(
                "shape network emits {} codes, sampling asks for n_s = {}",
                self.shape_net()?.spec().count,
                scfg.n_s
            )));
        }
        if need_time && self.time_net()?.spec().count != scfg.n_t {
            return Err(Error::Config(format!(
                "time network emits {} codes, sampling asks for n_t = {}",
                self.time_net()?.spec().count,
                scfg.n_t
            )));
        }
        Ok(())
    }

    /// Latent codes for one input; `index` selects the per-input random stream.
    pub fn latent_codes(&self, x: &Trajectory, mode: SamplingMode, scfg: &SamplingConfig, index: u64) -> Result<Vec<Vec<f64>>> {
        let kd = self.half();
        let mut rng = indexed_stream(scfg.seed, &format!("sample/{}", mode.as_str()), index);
        let join = |a: &[f64], b: &[f64]| [a, b].concat();
        Ok(match mode {
            SamplingMode::Baseline => (0..scfg.n_s * scfg.n_t)
                .map(|_| standard_normal(&mut rng, 2 * kd))
                .collect(),
            SamplingMode::ShapeOnly => {
                self.check_counts(scfg, true, false)?;
                let zt0 = standard_normal(&mut rng, kd);
                self.shape_net()?.codes(x, None)?.iter().map(|zs| join(zs, &zt0)).collect()
            }
            SamplingMode::TimeOnly => {
                self.check_counts(scfg, false, true)?;
                let zs0 = standard_normal(&mut rng, kd);
                self.time_net()?.codes(x, Some(&zs0))?.iter().map(|zt| join(&zs0, zt)).collect()
            }
            SamplingMode::ShapeTime => {
                self.check_counts(scfg, true, true)?;
                let shapes = self.shape_net()?.codes(x, None)?;
                let mut out = Vec::with_capacity(scfg.n_s * scfg.n_t);
                for zs in &shapes {
                    for zt in self.time_net()?.codes(x, Some(zs))? {
                        out.push(join(zs, &zt));
                    }
                }
                out
            }
        })
    }

    /// Decoded trajectories for one input, ordered as the codes are.
    pub fn sample(&self, x: &Trajectory, mode: SamplingMode, scfg: &SamplingConfig, index: u64) -> Result<Vec<Trajectory>> {
        let codes = self.latent_codes(x, mode, scfg, index)?;
        self.forecaster.predict_many(x, &codes)
    }

    /// Shape-then-time sequential sampling: `n_s * n_t` trajectories, shape-major.
    pub fn sample_sequential(&self, x: &Trajectory, scfg: &SamplingConfig, index: u64) -> Result<Vec<Trajectory>> {
        self.sample(x, SamplingMode::ShapeTime, scfg, index)
    }
}

/// Uniform subsample of `n` items without replacement, keeping input order.
pub fn subsample<T: Clone>(items: &[T], n: usize, seed: u64) -> Result<Vec<T>> {
    if n > items.len() {
        return Err(Error::Size(format!("cannot subsample {n} of {} items", items.len())));
    }
    let mut idx = sample_indices(&mut stream(seed, "subsample"), items.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| items[i].clone()).collect())
}

pub const MANIFEST_MAGIC: &str = "stripe-manifest 1";
pub const FORECASTER_FILE: &str = "forecaster.ckpt";
pub const SHAPE_FILE: &str = "shape.ckpt";
pub const TIME_FILE: &str = "time.ckpt";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Manifest: data shapes, normalization and the full run config.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub meta: DataMeta,
    pub config: RunConfig,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        format!(
            "{MANIFEST_MAGIC}\nchannels = {}\ninput_len = {}\nhorizon = {}\nnorm_mean = {:?}\nnorm_std = {:?}\n[config]\n{}",
            self.meta.channels,
            self.meta.input_len,
            self.meta.horizon,
            self.meta.norm.mean[0],
            self.meta.norm.std[0],
            self.config.to_text()
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MANIFEST_MAGIC => {}
            _ => return Err(parse_err(1, format!("expected '{MANIFEST_MAGIC}'"))),
        }
        let mut vals: [Option<String>; 5] = Default::default();
        let names = ["channels", "input_len", "horizon", "norm_mean", "norm_std"];
        let mut config_start = None;
        for (i, raw) in lines.by_ref() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if line == "[config]" {
                config_start = Some(i + 1);
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(i + 1, format!("expected 'key = value', got '{line}'")))?;
            let slot = names
                .iter()
                .position(|n| *n == k.trim())
                .ok_or_else(|| parse_err(i + 1, format!("unknown manifest key '{}'", k.trim())))?;
            if vals[slot].replace(v.trim().to_string()).is_some() {
                return Err(parse_err(i + 1, format!("duplicate key '{}'", k.trim())));
            }
        }
        let start = config_start.ok_or_else(|| parse_err(0, "missing [config] section"))?;
        let get = |i: usize| vals[i].clone().ok_or_else(|| parse_err(0, format!("missing '{}'", names[i])));
        let num = |i: usize| -> Result<usize> {
            get(i)?
                .parse()
                .map_err(|_| parse_err(0, format!("bad value for '{}'", names[i])))
        };
        let real = |i: usize| -> Result<f64> {
            match get(i)?.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(0, format!("bad value for '{}'", names[i]))),
            }
        };
        let (channels, input_len, horizon) = (num(0)?, num(1)?, num(2)?);
        let (mean, std) = (real(3)?, real(4)?);
        if channels != 1 || input_len == 0 || horizon == 0 || std <= 0.0 {
            return Err(parse_err(0, "manifest shapes or normalization out of range"));
        }
        let body: String = text.lines().skip(start).map(|l| format!("{l}\n")).collect();
        let config = RunConfig::parse(&body).map_err(|e| match e {
            Error::Parse { line, msg } => parse_err(line + start, msg),
            other => other,
        })?;
        Ok(Self {
            meta: DataMeta {
                channels,
                input_len,
                horizon,
                norm: Normalization {
                    mean: vec![mean],
                    std: vec![std],
                },
            },
            config,
        })
    }
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join(MANIFEST_FILE), manifest.to_text().as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::Dependency(format!("no manifest at {}", path.display())));
    }
    Manifest::parse(&std::fs::read_to_string(path)?)
}

pub fn save_store(dir: &Path, file: &str, store: &ParameterStore) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join(file), store.to_checkpoint().as_bytes())
}

fn load_into(dir: &Path, file: &str, store: &mut ParameterStore) -> Result<bool> {
    let path = dir.join(file);
    if !path.exists() {
        return Ok(false);
    }
    let loaded = ParameterStore::from_checkpoint(&std::fs::read_to_string(&path)?)?;
    store.load_values(&loaded)?;
    Ok(true)
}

/// Loads the forecaster (required) and whichever proposal networks exist.
pub fn load_bundle(dir: &Path) -> Result<(StripeModel, Manifest)> {
    let manifest = read_manifest(dir)?;
    let (cfg, meta) = (&manifest.config, &manifest.meta);
    let mut forecaster = new_forecaster(cfg, meta);
    if !load_into(dir, FORECASTER_FILE, forecaster.store_mut())? {
        return Err(Error::Dependency(format!(
            "no forecaster checkpoint in {}; run the predictor stage first",
            dir.display()
        )));
    }
    let mut shape = new_proposal(cfg, meta, false);
    let shape = load_into(dir, SHAPE_FILE, shape.store_mut())?.then_some(shape);
    let mut time = new_proposal(cfg, meta, true);
    let time = load_into(dir, TIME_FILE, time.store_mut())?.then_some(time);
    Ok((
        StripeModel {
            forecaster,
            shape,
            time,
        },
        manifest,
    ))
}

/// Writes every present network plus the manifest.
pub fn save_bundle(dir: &Path, model: &StripeModel, manifest: &Manifest) -> Result<()> {
    save_store(dir, FORECASTER_FILE, model.forecaster.store())?;
    if let Some(s) = &model.shape {
        save_store(dir, SHAPE_FILE, s.store())?;
    }
    if let Some(t) = &model.time {
        save_store(dir, TIME_FILE, t.store())?;
    }
    write_manifest(dir, manifest)
}
