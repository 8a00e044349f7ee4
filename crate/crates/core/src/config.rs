//! Run configuration: every hyperparameter of a training/evaluation run, loaded from
//! line-oriented `key = value` text.

use std::collections::HashSet;
use std::str::FromStr;

use crate::dpp::KernelKind;
use crate::error::{parse_err, Error, Result};
use crate::losses::{BaseLoss, LossConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub gamma: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub lambda: f64,
    /// Latent code width; split evenly between shape and time halves.
    pub k: usize,
    /// GRU width of every recurrent layer.
    pub hidden: usize,
    /// Width of the proposal perceptron layers.
    pub mlp_hidden: usize,
    pub n_s: usize,
    pub n_t: usize,
    /// Evaluation subsample size.
    pub n_eval: usize,
    pub predictor_steps: usize,
    pub proposal_steps: usize,
    pub batch_size: usize,
    pub proposal_batch: usize,
    pub lr: f64,
    pub quality_loss: BaseLoss,
    pub shape_kernel: KernelKind,
    pub time_kernel: KernelKind,
    pub normalize_kernels: bool,
    /// Bandwidth used when a kernel selector is `mse`.
    pub rbf_bandwidth: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub data: String,
    pub model: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gamma: 0.01,
            sigma: 1.0,
            alpha: 0.5,
            lambda: 1.0,
            k: 16,
            hidden: 32,
            mlp_hidden: 64,
            n_s: 10,
            n_t: 10,
            n_eval: 10,
            predictor_steps: 3000,
            proposal_steps: 500,
            batch_size: 32,
            proposal_batch: 4,
            lr: 2e-3,
            quality_loss: BaseLoss::Dilate,
            shape_kernel: KernelKind::Shape,
            time_kernel: KernelKind::Time,
            normalize_kernels: true,
            rbf_bandwidth: 1.0,
            grad_clip: 1.0,
            data: String::new(),
            model: String::new(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "gamma",
    "sigma",
    "alpha",
    "lambda",
    "k",
    "hidden",
    "mlp_hidden",
    "n_s",
    "n_t",
    "n_eval",
    "predictor_steps",
    "proposal_steps",
    "batch_size",
    "proposal_batch",
    "lr",
    "quality_loss",
    "shape_kernel",
    "time_kernel",
    "normalize_kernels",
    "rbf_bandwidth",
    "grad_clip",
    "data",
    "model",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value for '{key}': '{value}' ({e})")))
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "sigma" => self.sigma = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "hidden" => self.hidden = parse_value(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse_value(key, value)?,
            "n_s" => self.n_s = parse_value(key, value)?,
            "n_t" => self.n_t = parse_value(key, value)?,
            "n_eval" => self.n_eval = parse_value(key, value)?,
            "predictor_steps" => self.predictor_steps = parse_value(key, value)?,
            "proposal_steps" => self.proposal_steps = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "proposal_batch" => self.proposal_batch = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "quality_loss" => self.quality_loss = value.parse()?,
            "shape_kernel" => self.shape_kernel = value.parse()?,
            "time_kernel" => self.time_kernel = value.parse()?,
            "normalize_kernels" => self.normalize_kernels = parse_value(key, value)?,
            "rbf_bandwidth" => self.rbf_bandwidth = parse_value(key, value)?,
            "grad_clip" => self.grad_clip = parse_value(key, value)?,
            "data" => self.data = value.to_string(),
            "model" => self.model = value.to_string(),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    /// Unknown or repeated keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines without validating the result.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(line_no, format!("expected 'key = value', got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(parse_err(line_no, format!("duplicate key '{key}'")));
            }
            self.set(key, value).map_err(|e| match e {
                Error::Config(msg) => parse_err(line_no, msg),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "gamma" => format!("{:?}", self.gamma),
            "sigma" => format!("{:?}", self.sigma),
            "alpha" => format!("{:?}", self.alpha),
            "lambda" => format!("{:?}", self.lambda),
            "k" => self.k.to_string(),
            "hidden" => self.hidden.to_string(),
            "mlp_hidden" => self.mlp_hidden.to_string(),
            "n_s" => self.n_s.to_string(),
            "n_t" => self.n_t.to_string(),
            "n_eval" => self.n_eval.to_string(),
            "predictor_steps" => self.predictor_steps.to_string(),
            "proposal_steps" => self.proposal_steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "proposal_batch" => self.proposal_batch.to_string(),
            "lr" => format!("{:?}", self.lr),
            "quality_loss" => self.quality_loss.to_string(),
            "shape_kernel" => self.shape_kernel.to_string(),
            "time_kernel" => self.time_kernel.to_string(),
            "normalize_kernels" => self.normalize_kernels.to_string(),
            "rbf_bandwidth" => format!("{:?}", self.rbf_bandwidth),
            "grad_clip" => format!("{:?}", self.grad_clip),
            "data" => self.data.clone(),
            "model" => self.model.clone(),
            _ => return None,
        })
    }

    /// Renders every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let v = self.get(key).expect("every listed key renders");
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            gamma: self.gamma,
            lambda: self.lambda,
            sigma: self.sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        if self.k == 0 || !self.k.is_multiple_of(2) {
            return Err(Error::Config(format!("k must be even and positive, got {}", self.k)));
        }
        for (name, v) in [
            ("hidden", self.hidden),
            ("mlp_hidden", self.mlp_hidden),
            ("n_s", self.n_s),
            ("n_t", self.n_t),
            ("n_eval", self.n_eval),
            ("batch_size", self.batch_size),
            ("proposal_batch", self.proposal_batch),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_eval > self.n_s * self.n_t {
            return Err(Error::Config(format!(
                "n_eval = {} exceeds n_s * n_t = {}",
                self.n_eval,
                self.n_s * self.n_t
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.rbf_bandwidth > 0.0 && self.rbf_bandwidth.is_finite()) {
            return Err(Error::Config("rbf_bandwidth must be positive".into()));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.gamma, c.alpha, c.lambda, c.k, c.n_eval), (0.01, 0.5, 1.0, 16, 10));
        assert_eq!((c.n_s, c.n_t), (10, 10));
        c.validate().unwrap();
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.seed = 42;
        c.gamma = 0.1 + 0.2;
        c.shape_kernel = KernelKind::MseRbf;
        c.data = "a/b.csv".into();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = RunConfig::parse("# header\n\nseed = 3  # trailing\n lambda=0.5\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.lambda, 0.5);
    }

    #[test]
    fn rejects_unknown_duplicate_and_invalid() {
        let e = RunConfig::parse("seed = 1\nbogus = 2\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        assert!(matches!(RunConfig::parse("k = 4\nk = 4").unwrap_err(), Error::Parse { line: 2, .. }));
        assert!(matches!(RunConfig::parse("k = 3").unwrap_err(), Error::Config(_)));
        assert!(matches!(RunConfig::parse("gamma = x").unwrap_err(), Error::Parse { line: 1, .. }));
        assert!(matches!(RunConfig::parse("n_eval = 200").unwrap_err(), Error::Config(_)));
        assert!(RunConfig::parse("no equals sign").is_err());
    }
}
