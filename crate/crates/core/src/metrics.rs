//! Set-to-set forecast metrics: H_quality and H_diversity under a base loss, the
//! sample CRPS, and the hard DTW/TDI breakdown.
//!
//! Stored values are unscaled; [`EvalReport::scaled`] applies the presentation
//! factors (MSE and CRPS x1000, DILATE/DTW/TDI x100) for printing only.

use std::fmt::Write as _;

use crate::alignment::{cost_matrix_sqeuclid, hard_dtw, hard_tdi, omega_dissimilarity};
use crate::error::{Error, Result};
use crate::losses::{dilate_loss, mse_loss, LossConfig};
use crate::trajectory::Trajectory;

/// Per-pair discrepancy used inside the set reductions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MetricLoss {
    Mse,
    /// Soft DILATE; can be slightly negative through the soft-DTW term.
    Dilate(LossConfig),
    /// Hard DTW on squared Euclidean costs.
    Dtw,
    /// Timing distortion of the hard DTW path against the dissimilarity matrix.
    Tdi,
}

pub fn pair_loss(loss: MetricLoss, yhat: &Trajectory, y: &Trajectory) -> Result<f64> {
    match loss {
        MetricLoss::Mse => mse_loss(yhat, y),
        MetricLoss::Dilate(cfg) => dilate_loss(yhat, y, &cfg),
        MetricLoss::Dtw => Ok(hard_dtw(&cost_matrix_sqeuclid(yhat, y)?)),
        MetricLoss::Tdi => hard_tdi(&cost_matrix_sqeuclid(yhat, y)?, &omega_dissimilarity(y.len())),
    }
}

fn check_sets(preds: &[Vec<Trajectory>], futures: &[Vec<Trajectory>]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Empty("inputs"));
    }
    if preds.len() != futures.len() {
        return Err(Error::Config(format!(
            "{} prediction sets for {} future sets",
            preds.len(),
            futures.len()
        )));
    }
    if preds.iter().any(Vec::is_empty) {
        return Err(Error::Empty("predictions for an input"));
    }
    if futures.iter().any(Vec::is_empty) {
        return Err(Error::Empty("true futures for an input"));
    }
    Ok(())
}

/// All pairwise losses for one input: `m[i][j] = loss(preds[i], futures[j])`.
fn loss_table(loss: MetricLoss, preds: &[Trajectory], futures: &[Trajectory]) -> Result<Vec<Vec<f64>>> {
    preds
        .iter()
        .map(|p| futures.iter().map(|f| pair_loss(loss, p, f)).collect())
        .collect()
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn quality_term(table: &[Vec<f64>]) -> f64 {
    mean(table.iter().map(|row| row.iter().copied().fold(f64::INFINITY, f64::min)))
}

fn diversity_term(table: &[Vec<f64>]) -> f64 {
    let nf = table[0].len();
    mean((0..nf).map(|j| table.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min)))
}

/// Mean over inputs of the mean over predictions of the closest true future.
pub fn h_quality(preds: &[Vec<Trajectory>], futures: &[Vec<Trajectory>], loss: MetricLoss) -> Result<f64> {
    check_sets(preds, futures)?;
    let terms = preds
        .iter()
        .zip(futures)
        .map(|(p, f)| Ok(quality_term(&loss_table(loss, p, f)?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean(terms))
}

/// Mean over inputs of the mean over true futures of the closest prediction.
pub fn h_diversity(preds: &[Vec<Trajectory>], futures: &[Vec<Trajectory>], loss: MetricLoss) -> Result<f64> {
    check_sets(preds, futures)?;
    let terms = preds
        .iter()
        .zip(futures)
        .map(|(p, f)| Ok(diversity_term(&loss_table(loss, p, f)?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean(terms))
}

/// Energy-form CRPS estimate of one scalar truth from `samples`:
/// `mean |s_i - y| - mean_{i,j} |s_i - s_j| / 2`.
pub fn crps_samples(samples: &[f64], truth: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Size(format!(
            "CRPS needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let a: f64 = samples.iter().map(|s| (s - truth).abs()).sum::<f64>() / n;
    let mut b = 0.0;
    for x in samples {
        for y in samples {
            b += (x - y).abs();
        }
    }
    Ok(a - b / (2.0 * n * n))
}

fn crps_term(preds: &[Trajectory], futures: &[Trajectory]) -> Result<f64> {
    let width = futures[0].values().len();
    let mut samples = vec![0.0; preds.len()];
    let mut total = 0.0;
    for f in futures {
        for idx in 0..width {
            for (s, p) in samples.iter_mut().zip(preds) {
                *s = p.values()[idx];
            }
            total += crps_samples(&samples, f.values()[idx])?;
        }
    }
    Ok(total / (width * futures.len()) as f64)
}

/// CRPS averaged over timesteps, channels, true futures and inputs.
pub fn crps(preds: &[Vec<Trajectory>], futures: &[Vec<Trajectory>]) -> Result<f64> {
    check_sets(preds, futures)?;
    for (p, f) in preds.iter().zip(futures) {
        for y in p.iter().chain(f) {
            y.same_shape(&f[0])?;
        }
    }
    let terms = preds
        .iter()
        .zip(futures)
        .map(|(p, f)| crps_term(p, f))
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean(terms))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComponentReport {
    pub dtw: f64,
    pub tdi: f64,
}

/// H_diversity under hard DTW and hard TDI.
pub fn component_report(preds: &[Vec<Trajectory>], futures: &[Vec<Trajectory>]) -> Result<ComponentReport> {
    Ok(ComponentReport {
        dtw: h_diversity(preds, futures, MetricLoss::Dtw)?,
        tdi: h_diversity(preds, futures, MetricLoss::Tdi)?,
    })
}

pub const METRIC_NAMES: [&str; 7] = [
    "h_quality_mse",
    "h_quality_dilate",
    "h_diversity_mse",
    "h_diversity_dtw",
    "h_diversity_tdi",
    "h_diversity_dilate",
    "crps",
];

const SCALES: [f64; 7] = [1000.0, 100.0, 1000.0, 100.0, 100.0, 100.0, 1000.0];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Metric values in [`METRIC_NAMES`] order.
    pub values: [f64; 7],
    pub n_inputs: usize,
    pub n_predictions: usize,
    pub n_futures: usize,
    pub scaled: bool,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        METRIC_NAMES.iter().position(|n| *n == name).map(|i| self.values[i])
    }

    pub fn h_quality_mse(&self) -> f64 {
        self.values[0]
    }
    pub fn h_quality_dilate(&self) -> f64 {
        self.values[1]
    }
    pub fn h_diversity_mse(&self) -> f64 {
        self.values[2]
    }
    pub fn h_diversity_dtw(&self) -> f64 {
        self.values[3]
    }
    pub fn h_diversity_tdi(&self) -> f64 {
        self.values[4]
    }
    pub fn h_diversity_dilate(&self) -> f64 {
        self.values[5]
    }
    pub fn crps(&self) -> f64 {
        self.values[6]
    }

    /// Copy with presentation scaling applied.
    pub fn scaled(&self) -> Self {
        let mut out = self.clone();
        if !self.scaled {
            for (v, s) in out.values.iter_mut().zip(SCALES) {
                *v *= s;
            }
            out.scaled = true;
        }
        out
    }

    pub fn csv_header() -> String {
        format!("{},n_inputs,n_predictions,n_futures,scaled", METRIC_NAMES.join(","))
    }

    /// Header plus one row.
    pub fn to_csv(&self) -> String {
        let vals: Vec<String> = self.values.iter().map(|v| format!("{v:?}")).collect();
        format!(
            "{}\n{},{},{},{},{}\n",
            Self::csv_header(),
            vals.join(","),
            self.n_inputs,
            self.n_predictions,
            self.n_futures,
            self.scaled
        )
    }

    /// `metric,value` rows for plotting tools.
    pub fn to_long_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (n, v) in METRIC_NAMES.iter().zip(self.values) {
            let _ = writeln!(out, "{n},{v:?}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(Self::csv_header().as_str()) {
            return Err(crate::error::parse_err(1, "unexpected report header"));
        }
        let row = lines.next().ok_or_else(|| crate::error::parse_err(2, "missing report row"))?;
        let cells: Vec<&str> = row.split(',').map(str::trim).collect();
        let bad = |what: &str| crate::error::parse_err(2, format!("bad {what}"));
        if cells.len() != 11 {
            return Err(bad("field count"));
        }
        let mut values = [0.0; 7];
        for (v, c) in values.iter_mut().zip(&cells) {
            *v = c.parse().map_err(|_| bad("metric value"))?;
        }
        Ok(Self {
            values,
            n_inputs: cells[7].parse().map_err(|_| bad("n_inputs"))?,
            n_predictions: cells[8].parse().map_err(|_| bad("n_predictions"))?,
            n_futures: cells[9].parse().map_err(|_| bad("n_futures"))?,
            scaled: cells[10].parse().map_err(|_| bad("scaled flag"))?,
        })
    }
}

/// The seven metric terms of one input, in [`METRIC_NAMES`] order.
pub fn input_terms(preds: &[Trajectory], futures: &[Trajectory], cfg: &LossConfig) -> Result<[f64; 7]> {
    if preds.is_empty() || futures.is_empty() {
        return Err(Error::Empty("predictions or futures for an input"));
    }
    let mse = loss_table(MetricLoss::Mse, preds, futures)?;
    let dil = loss_table(MetricLoss::Dilate(*cfg), preds, futures)?;
    let dtw = loss_table(MetricLoss::Dtw, preds, futures)?;
    let tdi = loss_table(MetricLoss::Tdi, preds, futures)?;
    Ok([
        quality_term(&mse),
        quality_term(&dil),
        diversity_term(&mse),
        diversity_term(&dtw),
        diversity_term(&tdi),
        diversity_term(&dil),
        crps_term(preds, futures)?,
    ])
}

/// Averages per-input terms in index order.
pub fn report_from_terms(terms: &[[f64; 7]], n_predictions: usize, n_futures: usize) -> Result<EvalReport> {
    if terms.is_empty() {
        return Err(Error::Empty("inputs"));
    }
    let mut values = [0.0; 7];
    for t in terms {
        for (v, x) in values.iter_mut().zip(t) {
            *v += x;
        }
    }
    values.iter_mut().for_each(|v| *v /= terms.len() as f64);
    Ok(EvalReport {
        values,
        n_inputs: terms.len(),
        n_predictions,
        n_futures,
        scaled: false,
    })
}

pub fn evaluate(preds: &[Vec<Trajectory>], futures: &[Vec<Trajectory>], cfg: &LossConfig) -> Result<EvalReport> {
    check_sets(preds, futures)?;
    let terms = preds
        .iter()
        .zip(futures)
        .map(|(p, f)| input_terms(p, f, cfg))
        .collect::<Result<Vec<_>>>()?;
    report_from_terms(&terms, preds[0].len(), futures[0].len())
}
