//! Datasets: the two-peak synthetic benchmark, real-series windowing, and the
//! on-disk CSV format.
//!
//! Dataset CSV layout:
//!
//! ```text
//! split,series_id,future_id,role,v0,...,v{L-1}
//! train,0,,input,0.01,...
//! train,0,0,future,0.0,...
//! ```
//!
//! One row per segment; `role` is `input` or `future`; input rows leave
//! `future_id` empty; rows shorter than `L` leave trailing cells empty. Rows are
//! grouped by split (train, valid, test) and series, each input row followed by
//! its futures. Non-identity normalization constants go to a `<path>.norm` sidecar.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{parse_err, Error, Result};
use crate::rng::stream;
use crate::trajectory::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// An input window with every known future continuation.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Trajectory,
    pub futures: Vec<Trajectory>,
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.mean.iter().all(|m| *m == 0.0) && self.std.iter().all(|s| *s == 1.0)
    }

    fn apply(&self, y: &Trajectory, f: impl Fn(f64, f64, f64) -> f64) -> Result<Trajectory> {
        if y.channels() != self.mean.len() {
            return Err(Error::Config(format!(
                "normalization has {} channels, trajectory has {}",
                self.mean.len(),
                y.channels()
            )));
        }
        let len = y.len();
        let vals = y
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| f(*v, self.mean[i / len], self.std[i / len]))
            .collect();
        Trajectory::new(y.channels(), vals)
    }

    pub fn normalize(&self, y: &Trajectory) -> Result<Trajectory> {
        self.apply(y, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, y: &Trajectory) -> Result<Trajectory> {
        self.apply(y, |v, m, s| v * s + m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub splits: [Vec<Example>; 3],
    pub norm: Normalization,
}

impl Dataset {
    pub fn empty(channels: usize, input_len: usize, horizon: usize) -> Self {
        Self {
            channels,
            input_len,
            horizon,
            splits: [Vec::new(), Vec::new(), Vec::new()],
            norm: Normalization::identity(channels),
        }
    }

    pub fn split(&self, s: Split) -> &[Example] {
        &self.splits[s.index()]
    }

    pub fn split_mut(&mut self, s: Split) -> &mut Vec<Example> {
        &mut self.splits[s.index()]
    }

    pub fn is_empty(&self) -> bool {
        self.splits.iter().all(Vec::is_empty)
    }

    /// Checks the shape invariants: every example has at least one future and all
    /// segments share channel count and lengths.
    pub fn validate(&self) -> Result<()> {
        for s in Split::ALL {
            for (i, ex) in self.split(s).iter().enumerate() {
                let at = || format!("{} series {i}", s.as_str());
                if ex.futures.is_empty() {
                    return Err(Error::Config(format!("{} has no future", at())));
                }
                if ex.input.channels() != self.channels || ex.input.len() != self.input_len {
                    return Err(Error::Config(format!("{} input has the wrong shape", at())));
                }
                if ex
                    .futures
                    .iter()
                    .any(|f| f.channels() != self.channels || f.len() != self.horizon)
                {
                    return Err(Error::Config(format!("{} has a future of the wrong shape", at())));
                }
            }
        }
        Ok(())
    }
}

/// Parameters of the two-peak synthetic benchmark.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// Inputs per split.
    pub n_inputs: usize,
    /// Futures per input.
    pub n_futures: usize,
    /// Variance of the additive Gaussian noise; 0 disables noise.
    pub noise_var: f64,
    pub input_len: usize,
    pub horizon: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_inputs: 100,
            n_futures: 10,
            noise_var: 0.01,
            input_len: 20,
            horizon: 20,
        }
    }
}

const PEAK1: (i64, i64) = (2, 8);
const PEAK2: (i64, i64) = (11, 17);
const JITTER: i64 = 3;

fn synthetic_example(cfg: &SyntheticConfig, rng: &mut impl Rng) -> Result<Example> {
    let (t_in, tau) = (cfg.input_len as i64, cfg.horizon as i64);
    // Resample peak positions until every jittered step lands inside the window.
    let mut tries = 0;
    let (i1, i2, base) = loop {
        let i1 = rng.gen_range(PEAK1.0..=PEAK1.1);
        let i2 = rng.gen_range(PEAK2.0..=PEAK2.1);
        let base = i2 + (i2 - i1) - t_in;
        if base - JITTER >= 0 && base + JITTER < tau && i2 < t_in {
            break (i1, i2, base);
        }
        tries += 1;
        if tries > 10_000 {
            return Err(Error::Config(format!(
                "no peak layout fits input length {t_in} and horizon {tau}"
            )));
        }
    };
    let j1: f64 = rng.gen();
    let j2: f64 = rng.gen();
    let noise = Normal::new(0.0, cfg.noise_var.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let draw = |rng: &mut dyn rand::RngCore| if cfg.noise_var > 0.0 { noise.sample(rng) } else { 0.0 };
    let input: Vec<f64> = (0..t_in)
        .map(|t| {
            let peak = if t == i1 {
                j1
            } else if t == i2 {
                j2
            } else {
                0.0
            };
            peak + draw(rng)
        })
        .collect();
    let futures = (0..cfg.n_futures)
        .map(|_| {
            let pos = base + rng.gen_range(-JITTER..=JITTER);
            let y: Vec<f64> = (0..tau)
                .map(|t| (if t >= pos { j2 - j1 } else { 0.0 }) + draw(rng))
                .collect();
            Trajectory::from_series(y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Example {
        input: Trajectory::from_series(input)?,
        futures,
    })
}

/// Two peaks at random positions `i1 < i2` with amplitudes `j1, j2 ~ U[0, 1]` in the
/// input; each future is a step of height `j2 - j1` starting at window offset
/// `i2 + (i2 - i1) - T + U{-3..3}`.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    if cfg.n_inputs == 0 || cfg.n_futures == 0 {
        return Err(Error::Config("n_inputs and n_futures must be at least 1".into()));
    }
    if !(cfg.noise_var >= 0.0 && cfg.noise_var.is_finite()) {
        return Err(Error::Config(format!("noise variance must be >= 0, got {}", cfg.noise_var)));
    }
    let mut ds = Dataset::empty(1, cfg.input_len, cfg.horizon);
    for s in Split::ALL {
        let mut rng = stream(seed, &format!("data/synthetic/{}", s.as_str()));
        let examples = (0..cfg.n_inputs)
            .map(|_| synthetic_example(cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        *ds.split_mut(s) = examples;
    }
    Ok(ds)
}

/// Parses a one-column series: one decimal value per line, optional non-numeric
/// header on the first non-empty line, blank lines ignored.
pub fn parse_series(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let mut first = true;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let is_first = std::mem::replace(&mut first, false);
        if line.contains(',') {
            return Err(parse_err(idx + 1, format!("expected one value column, got '{line}'")));
        }
        match line.parse::<f64>() {
            Ok(v) if v.is_finite() => out.push(v),
            Ok(_) => return Err(parse_err(idx + 1, format!("non-finite value '{line}'"))),
            Err(_) if is_first => {}
            Err(_) => return Err(parse_err(idx + 1, format!("not a number: '{line}'"))),
        }
    }
    Ok(out)
}

const TRAIN_FRAC: f64 = 0.70;
const VALID_FRAC: f64 = 0.85;

/// Sliding windows of length `input_len + horizon` over a univariate series, split
/// chronologically 70/15/15 by window start. Validation and test windows that
/// overlap an earlier split's time range are dropped, so no timestep is shared
/// across splits. Normalization constants come from the rows covered by training
/// windows.
pub fn windows_from_series(values: &[f64], input_len: usize, horizon: usize, stride: usize) -> Result<Dataset> {
    if input_len == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config("input length, horizon and stride must be positive".into()));
    }
    let w = input_len + horizon;
    if values.len() < w {
        return Err(Error::Size(format!(
            "series has {} rows, one window needs {w}",
            values.len()
        )));
    }
    let starts: Vec<usize> = (0..=values.len() - w).step_by(stride).collect();
    let n_w = starts.len();
    let n_train = ((TRAIN_FRAC * n_w as f64).floor() as usize).max(1);
    let n_valid_end = ((VALID_FRAC * n_w as f64).floor() as usize).max(n_train);
    let train: Vec<usize> = starts[..n_train].to_vec();
    let train_end = train[train.len() - 1] + w;
    let valid: Vec<usize> = starts[n_train..n_valid_end]
        .iter()
        .copied()
        .filter(|s| *s >= train_end)
        .collect();
    let valid_end = valid.last().map_or(train_end, |s| s + w);
    let test: Vec<usize> = starts[n_valid_end..]
        .iter()
        .copied()
        .filter(|s| *s >= valid_end)
        .collect();

    let fit = &values[..train_end];
    let mean = fit.iter().sum::<f64>() / fit.len() as f64;
    let var = fit.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / fit.len() as f64;
    let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    let norm = Normalization {
        mean: vec![mean],
        std: vec![std],
    };

    let mut ds = Dataset::empty(1, input_len, horizon);
    for (split, group) in [(Split::Train, train), (Split::Valid, valid), (Split::Test, test)] {
        for s in group {
            let seg = |a: usize, b: usize| -> Result<Trajectory> {
                Trajectory::from_series(values[a..b].iter().map(|v| (v - mean) / std).collect())
            };
            ds.split_mut(split).push(Example {
                input: seg(s, s + input_len)?,
                futures: vec![seg(s + input_len, s + w)?],
            });
        }
    }
    ds.norm = norm;
    Ok(ds)
}

pub fn load_series_csv(path: &Path, input_len: usize, horizon: usize, stride: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    windows_from_series(&parse_series(&text)?, input_len, horizon, stride)
}

/// Renders the dataset CSV. Only univariate datasets are representable.
pub fn dataset_to_csv(ds: &Dataset) -> Result<String> {
    if ds.channels != 1 {
        return Err(Error::Config(format!(
            "dataset CSV stores univariate series, dataset has {} channels",
            ds.channels
        )));
    }
    ds.validate()?;
    let width = if ds.is_empty() { 0 } else { ds.input_len.max(ds.horizon) };
    let mut out = String::from("split,series_id,future_id,role");
    for i in 0..width {
        let _ = write!(out, ",v{i}");
    }
    out.push('\n');
    let row = |out: &mut String, split: &str, sid: usize, fid: Option<usize>, role: &str, v: &[f64]| {
        let _ = write!(out, "{split},{sid},{},{role}", fid.map(|f| f.to_string()).unwrap_or_default());
        for i in 0..width {
            out.push(',');
            if let Some(x) = v.get(i) {
                let _ = write!(out, "{x:?}");
            }
        }
        out.push('\n');
    };
    for s in Split::ALL {
        for (sid, ex) in ds.split(s).iter().enumerate() {
            row(&mut out, s.as_str(), sid, None, "input", ex.input.values());
            for (fid, f) in ex.futures.iter().enumerate() {
                row(&mut out, s.as_str(), sid, Some(fid), "future", f.values());
            }
        }
    }
    Ok(out)
}

/// Parses the dataset CSV written by [`dataset_to_csv`]. Errors carry 1-based lines.
pub fn dataset_from_csv(text: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let fixed = ["split", "series_id", "future_id", "role"];
    if header.len() < 4 || fixed.iter().zip(header.iter()).any(|(a, b)| *a != b.trim()) {
        return Err(parse_err(1, "header must start with split,series_id,future_id,role"));
    }
    for (i, h) in header.iter().skip(4).enumerate() {
        if h.trim() != format!("v{i}") {
            return Err(parse_err(1, format!("expected column v{i}, got '{h}'")));
        }
    }
    let width = header.len() - 4;

    let mut ds = Dataset::empty(1, 0, 0);
    let mut lens: Option<(usize, usize)> = None;
    let mut split_pos = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let err = |msg: String| parse_err(line, msg);
        if rec.len() != width + 4 {
            return Err(err(format!("expected {} fields, got {}", width + 4, rec.len())));
        }
        let split: Split = rec[0].trim().parse().map_err(|e: Error| err(e.to_string()))?;
        if split.index() < split_pos {
            return Err(err(format!("split '{}' appears after a later split", split.as_str())));
        }
        split_pos = split.index();
        let sid: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad series_id '{}'", &rec[1])))?;
        let cells: Vec<&str> = rec.iter().skip(4).map(str::trim).collect();
        let n_vals = cells.iter().position(|c| c.is_empty()).unwrap_or(cells.len());
        if cells[n_vals..].iter().any(|c| !c.is_empty()) {
            return Err(err("values must be contiguous from v0".into()));
        }
        if n_vals == 0 {
            return Err(err("row has no values".into()));
        }
        let vals = cells[..n_vals]
            .iter()
            .map(|c| match c.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(format!("bad value '{c}'"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        let examples = ds.split_mut(split);
        match rec[3].trim() {
            "input" => {
                if !rec[2].trim().is_empty() {
                    return Err(err("input rows must leave future_id empty".into()));
                }
                if sid != examples.len() {
                    return Err(err(format!("expected series_id {}, got {sid}", examples.len())));
                }
                if let Some(prev) = examples.last() {
                    if prev.futures.is_empty() {
                        return Err(err("previous series has no future rows".into()));
                    }
                }
                examples.push(Example {
                    input: Trajectory::from_series(vals).map_err(|e| err(e.to_string()))?,
                    futures: Vec::new(),
                });
            }
            "future" => {
                let fid: usize = rec[2]
                    .trim()
                    .parse()
                    .map_err(|_| err(format!("bad future_id '{}'", &rec[2])))?;
                let n_series = examples.len();
                let ex = match examples.last_mut() {
                    Some(ex) if sid + 1 == n_series => ex,
                    _ => return Err(err(format!("future row for series {sid} without its input row"))),
                };
                if fid != ex.futures.len() {
                    return Err(err(format!("expected future_id {}, got {fid}", ex.futures.len())));
                }
                ex.futures.push(Trajectory::from_series(vals).map_err(|e| err(e.to_string()))?);
            }
            other => return Err(err(format!("unknown role '{other}'"))),
        }
        let ex = ds.split(split).last().expect("row just pushed");
        let (li, lf) = (ex.input.len(), ex.futures.last().map_or(0, Trajectory::len));
        match lens {
            None if lf > 0 => lens = Some((li, lf)),
            Some((a, b)) if li != a || (lf > 0 && lf != b) => {
                return Err(err(format!("segment lengths differ from the first series ({a}, {b})")))
            }
            _ => {}
        }
    }
    for s in Split::ALL {
        if ds.split(s).last().is_some_and(|ex| ex.futures.is_empty()) {
            return Err(parse_err(0, format!("last {} series has no future rows", s.as_str())));
        }
    }
    if let Some((a, b)) = lens {
        ds.input_len = a;
        ds.horizon = b;
    }
    ds.validate()?;
    Ok(ds)
}

/// Writes `data` to `path` through a temporary file in the same directory and a rename,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, data)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn norm_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".norm");
    PathBuf::from(s)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, dataset_to_csv(ds)?.as_bytes())?;
    let side = norm_path(path);
    if ds.norm.is_identity() {
        if side.exists() {
            std::fs::remove_file(side)?;
        }
    } else {
        let text = format!("mean,std\n{:?},{:?}\n", ds.norm.mean[0], ds.norm.std[0]);
        write_atomic(&side, text.as_bytes())?;
    }
    Ok(())
}

pub fn parse_norm(text: &str) -> Result<Normalization> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some("mean,std") {
        return Err(parse_err(1, "expected header 'mean,std'"));
    }
    let row = lines.next().ok_or_else(|| parse_err(2, "missing values"))?;
    let vals: Vec<f64> = row
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| parse_err(2, format!("bad value '{v}'"))))
        .collect::<Result<_>>()?;
    if lines.next().is_some() {
        return Err(parse_err(3, "unexpected trailing line"));
    }
    match vals.as_slice() {
        [m, s] if m.is_finite() && s.is_finite() && *s > 0.0 => Ok(Normalization {
            mean: vec![*m],
            std: vec![*s],
        }),
        _ => Err(parse_err(2, "expected finite mean and positive std")),
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut ds = dataset_from_csv(&std::fs::read_to_string(path)?)?;
    let side = norm_path(path);
    if side.exists() {
        ds.norm = parse_norm(&std::fs::read_to_string(side)?)?;
    }
    Ok(ds)
}
