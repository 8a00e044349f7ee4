//! Oracle and property suites run by `stripe verify`.
//!
//! Every check reports the worst error seen over its random instances next to
//! the tolerance it is held to.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::alignment::{
    brute_force_alignment, cost_matrix_sqeuclid, enumerate_paths, hard_dtw, omega_dissimilarity, soft_dtw, soft_tdi,
    CostMatrix,
};
use crate::dpp::{
    diversity_loss, diversity_loss_grad, eigenvalues, kernel_matrix, log_kernel, log_kernel_grad, KernelKind,
    KernelMatrix, KernelSpec,
};
use crate::error::{Error, Result};
use crate::losses::{dilate_loss, dilate_loss_grad, LossConfig};
use crate::nn::models::{time_major_to_trajectory, to_time_major};
use crate::nn::{Forecaster, ForecasterSpec, Tape};
use crate::rng::stream;
use crate::trajectory::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Alignment,
    Dpp,
    Grad,
    Psd,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 5] = ["alignment", "dpp", "grad", "psd", "all"];
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "alignment" => Suite::Alignment,
            "dpp" => Suite::Dpp,
            "grad" => Suite::Grad,
            "psd" => Suite::Psd,
            "all" => Suite::All,
            _ => return Err(Error::Config(format!("unknown suite '{s}' (alignment|dpp|grad|psd|all)"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub instances: usize,
    pub max_err: f64,
    pub tol: f64,
    /// Extra summary printed after the verdict.
    pub detail: String,
}

impl Check {
    fn new(name: &str, instances: usize, max_err: f64, tol: f64) -> Self {
        Self {
            name: name.to_string(),
            instances,
            max_err,
            tol,
            detail: String::new(),
        }
    }

    pub fn pass(&self) -> bool {
        self.max_err <= self.tol
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} n={} max_err={:.3e} tol={:.1e}",
            if self.pass() { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.max_err,
            self.tol
        )?;
        if !self.detail.is_empty() {
            write!(f, " {}", self.detail)?;
        }
        Ok(())
    }
}

/// Instance counts per suite; the defaults are the full-size runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuiteSizes {
    pub alignment: usize,
    pub gamma_limit: usize,
    pub grad: usize,
    pub psd: usize,
    pub eig: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        Self {
            alignment: 500,
            gamma_limit: 100,
            grad: 50,
            psd: 200,
            eig: 100,
        }
    }
}

pub fn run_suite(suite: Suite, seed: u64, sizes: &SuiteSizes) -> Result<Vec<Check>> {
    Ok(match suite {
        Suite::Alignment => alignment_suite(seed, sizes)?,
        Suite::Dpp => dpp_suite(seed, sizes)?,
        Suite::Grad => grad_suite(seed, sizes)?,
        Suite::Psd => psd_suite(seed, sizes)?,
        Suite::All => {
            let mut all = alignment_suite(seed, sizes)?;
            all.extend(dpp_suite(seed, sizes)?);
            all.extend(grad_suite(seed, sizes)?);
            all.extend(psd_suite(seed, sizes)?);
            all
        }
    })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Infinity-norm relative error of `got` against `want`.
fn vec_rel(got: &[f64], want: &[f64]) -> f64 {
    let diff = got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = want.iter().map(|v| v.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-12)
}

fn random_series(rng: &mut impl Rng, len: usize) -> Trajectory {
    Trajectory::from_series((0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .expect("nonempty finite series")
}

fn random_cost(rng: &mut impl Rng, n: usize) -> Result<CostMatrix> {
    cost_matrix_sqeuclid(&random_series(rng, n), &random_series(rng, n))
}

fn alignment_suite(seed: u64, sizes: &SuiteSizes) -> Result<Vec<Check>> {
    let mut rng = stream(seed, "verify/alignment");
    let (mut e_dtw, mut e_tdi, mut e_align) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..sizes.alignment {
        let tau = 2 + i % 5;
        let gamma = if i % 2 == 0 { 0.1 } else { 1.0 };
        let delta = random_cost(&mut rng, tau)?;
        let omega = omega_dissimilarity(tau);
        let bf = brute_force_alignment(&delta, &omega, gamma)?;
        let dp = soft_dtw(&delta, gamma)?;
        e_dtw = e_dtw.max(rel(dp.dtw_gamma, bf.dtw_gamma));
        e_tdi = e_tdi.max(rel(soft_tdi(&delta, &omega, gamma)?, bf.tdi_gamma));
        e_align = e_align.max(vec_rel(dp.expected_alignment.as_slice(), bf.expected_alignment.as_slice()));
    }
    let n = sizes.alignment;
    let mut out = vec![
        Check::new("soft_dtw vs brute force", n, e_dtw, 1e-9),
        Check::new("soft_tdi vs brute force", n, e_tdi, 1e-9),
        Check::new("expected_alignment vs brute force", n, e_align, 1e-9),
    ];

    // Smoothed DTW rises monotonically to the hard value as gamma shrinks, and
    // sits within gamma * log(#paths) of it.
    let gammas = [1.0, 0.1, 0.01, 0.001];
    let (mut drop, mut gap) = (0.0f64, 0.0f64);
    for i in 0..sizes.gamma_limit {
        let tau = 2 + i % 9;
        let delta = random_cost(&mut rng, tau)?;
        let hard = hard_dtw(&delta);
        let vals = gammas
            .iter()
            .map(|&g| soft_dtw(&delta, g).map(|r| r.dtw_gamma))
            .collect::<Result<Vec<_>>>()?;
        let scale = hard.abs().max(1.0);
        for w in vals.windows(2) {
            drop = drop.max((w[0] - w[1]) / scale);
        }
        drop = drop.max((vals[3] - hard) / scale);
        let bound = 0.001 * log_path_count(tau);
        gap = gap.max((hard - vals[3]) / bound);
    }
    out.push(Check::new("soft_dtw monotone in gamma (worst drop)", sizes.gamma_limit, drop.max(0.0), 1e-12));
    out.push(Check::new(
        "hard_dtw - soft_dtw(0.001) over gamma*log|paths|",
        sizes.gamma_limit,
        gap,
        1.0,
    ));
    Ok(out)
}

/// `log` of the number of monotone alignment paths on a square grid (Delannoy numbers).
fn log_path_count(n: usize) -> f64 {
    if n <= crate::alignment::BRUTE_FORCE_MAX_LEN {
        return (enumerate_paths(n, n).len() as f64).ln();
    }
    let mut d = vec![vec![1.0f64; n]; n];
    for i in 1..n {
        for j in 1..n {
            d[i][j] = d[i - 1][j] + d[i][j - 1] + d[i - 1][j - 1];
        }
    }
    d[n - 1][n - 1].ln()
}

fn random_psd(rng: &mut impl Rng, n: usize) -> Result<KernelMatrix> {
    let rank = rng.gen_range(1..=n);
    let b = DMatrix::from_fn(n, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
    KernelMatrix::from_matrix(&b * b.transpose())
}

fn dpp_suite(seed: u64, sizes: &SuiteSizes) -> Result<Vec<Check>> {
    let mut worst_id = 0.0f64;
    for n in 1..=20 {
        let l = diversity_loss(&KernelMatrix::from_matrix(DMatrix::identity(n, n))?)?;
        worst_id = worst_id.max((l + n as f64 / 2.0).abs());
    }
    let ones = diversity_loss(&KernelMatrix::from_matrix(DMatrix::from_element(2, 2, 1.0))?)?;
    let mut rng = stream(seed, "verify/dpp");
    let mut worst_eig = 0.0f64;
    for i in 0..sizes.eig {
        let k = random_psd(&mut rng, 1 + i % 20)?;
        let via_eig: f64 = -eigenvalues(&k).iter().map(|l| l / (1.0 + l)).sum::<f64>();
        worst_eig = worst_eig.max((diversity_loss(&k)? - via_eig).abs());
    }
    Ok(vec![
        Check::new("diversity_loss(I_N) = -N/2, N=1..20", 20, worst_id, 0.0),
        Check::new("diversity_loss(all-ones 2x2) = -2/3", 1, (ones + 2.0 / 3.0).abs(), 1e-12),
        Check::new("eigenvalue identity", sizes.eig, worst_eig, 1e-10),
    ])
}

/// Central difference of `f` at `x` along every coordinate.
pub fn central_diff(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + eps;
            let up = f(&p)?;
            p[i] = x[i] - eps;
            let down = f(&p)?;
            p[i] = x[i];
            Ok((up - down) / (2.0 * eps))
        })
        .collect()
}

const FD_EPS: f64 = 1e-5;

fn series_of(v: &[f64]) -> Trajectory {
    Trajectory::from_series(v.to_vec()).expect("finite series")
}

fn grad_suite(seed: u64, sizes: &SuiteSizes) -> Result<Vec<Check>> {
    let mut rng = stream(seed, "verify/grad");
    let n = sizes.grad;
    let (mut e_dilate, mut e_shape, mut e_time, mut e_div, mut e_chain) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        let tau = 3 + i % 4;
        let cfg = LossConfig {
            gamma: if i % 2 == 0 { 0.1 } else { 1.0 },
            ..Default::default()
        };
        let y = random_series(&mut rng, tau);
        let yhat = random_series(&mut rng, tau);

        let an = dilate_loss_grad(&yhat, &y, &cfg)?.grad;
        let fd = central_diff(yhat.values(), FD_EPS, |v| dilate_loss(&series_of(v), &y, &cfg))?;
        e_dilate = e_dilate.max(vec_rel(&an, &fd));

        for (kind, worst) in [(KernelKind::Shape, &mut e_shape), (KernelKind::Time, &mut e_time)] {
            let spec = KernelSpec::raw(kind);
            let g = log_kernel_grad(&spec, &yhat, &y, &cfg)?;
            let fd = central_diff(yhat.values(), FD_EPS, |v| log_kernel(&spec, &series_of(v), &y, &cfg))?;
            *worst = worst.max(vec_rel(&g.d_y1, &fd));
        }

        // Perturbations of one base keep kernel entries away from zero, where
        // the gradient would drown in finite-difference roundoff.
        let base = random_series(&mut rng, tau);
        let set: Vec<Trajectory> = (0..3)
            .map(|_| {
                let v = base.values().iter().map(|b| b + 0.3 * rng.sample::<f64, _>(StandardNormal));
                series_of(&v.collect::<Vec<_>>())
            })
            .collect();
        let kind = if i % 2 == 0 { KernelKind::Shape } else { KernelKind::Time };
        let spec = KernelSpec::new(kind);
        let dg = diversity_loss_grad(&set, &spec, &cfg)?;
        let flat: Vec<f64> = set.iter().flat_map(|t| t.values().to_vec()).collect();
        let fd = central_diff(&flat, FD_EPS, |v| {
            let s: Vec<Trajectory> = v.chunks(tau).map(series_of).collect();
            diversity_loss(&kernel_matrix(&s, &spec, &cfg)?)
        })?;
        let an: Vec<f64> = dg.grads.concat();
        e_div = e_div.max(vec_rel(&an, &fd));

        e_chain = e_chain.max(chain_error(&mut rng, seed.wrapping_add(i as u64), &cfg)?);
    }
    Ok(vec![
        Check::new("dilate_loss gradient", n, e_dilate, 1e-4),
        Check::new("kernel_shape log-gradient", n, e_shape, 1e-4),
        Check::new("kernel_time log-gradient", n, e_time, 1e-4),
        Check::new("diversity_loss_grad (nested DP)", n, e_div, 1e-3),
        Check::new("encode-decode-dilate chain (nested DP)", n, e_chain, 1e-3),
    ])
}

/// Worst relative error of the parameter gradient of a width-4 forecaster under
/// DILATE, over every parameter entry.
fn chain_error(rng: &mut impl Rng, seed: u64, cfg: &LossConfig) -> Result<f64> {
    let spec = ForecasterSpec {
        channels: 1,
        hidden: 4,
        k: 2,
        horizon: 4,
    };
    let f0 = Forecaster::new(spec, seed);
    let x = random_series(rng, 5);
    let y = random_series(rng, 4);
    let z: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();

    let mut tape = Tape::new();
    let p = f0.store().bind(&mut tape, true);
    let zv = tape.constant(z.clone());
    let out = f0.forward(&mut tape, &p, &x, zv)?;
    let yhat = time_major_to_trajectory(tape.value(out), 1)?;
    let lg = dilate_loss_grad(&yhat, &y, cfg)?;
    let g = tape.backward(&[(out, &to_time_major(&lg.grad, 1))]);
    let mut grads = f0.store().clone();
    grads.zero_grad();
    grads.accumulate(&p, &g);

    let an: Vec<f64> = grads.params().iter().flat_map(|p| p.grad.clone()).collect();
    let flat: Vec<f64> = f0.store().params().iter().flat_map(|p| p.value.clone()).collect();
    let mut f = f0.clone();
    let fd = central_diff(&flat, FD_EPS, |v| {
        let mut off = 0;
        for prm in f.store_mut().params_mut() {
            let len = prm.value.len();
            prm.value.copy_from_slice(&v[off..off + len]);
            off += len;
        }
        dilate_loss(&f.predict(&x, &z)?, &y, cfg)
    })?;
    Ok(vec_rel(&an, &fd))
}

/// Per-kernel PSD summary over random sets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsdSummary {
    pub sets: usize,
    /// Smallest eigenvalue seen.
    pub min_eig: f64,
    /// Worst `-min_eig / max(1, max_eig)`; nonpositive when every matrix is PSD.
    pub worst_ratio: f64,
}

/// Gram matrices of `sets` random sets of `size` trajectories of length `tau`
/// under a raw (unnormalized) kernel.
pub fn psd_summary(kind: KernelKind, sets: usize, size: usize, tau: usize, seed: u64, cfg: &LossConfig) -> Result<PsdSummary> {
    let mut rng = stream(seed, &format!("verify/psd/{kind}"));
    let spec = KernelSpec::raw(kind);
    let mut out = PsdSummary {
        sets,
        min_eig: f64::INFINITY,
        worst_ratio: f64::NEG_INFINITY,
    };
    for i in 0..sets {
        // Perturbations of a shared base at mixed scales give near-singular
        // Gram matrices as well as near-diagonal ones.
        let spread = [0.05, 0.3, 1.0][i % 3];
        let base = random_series(&mut rng, tau);
        let set: Vec<Trajectory> = (0..size)
            .map(|_| {
                let v = base.values().iter().map(|b| b + spread * rng.sample::<f64, _>(StandardNormal));
                series_of(&v.collect::<Vec<_>>())
            })
            .collect();
        let eig = eigenvalues(&kernel_matrix(&set, &spec, cfg)?);
        let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.min_eig = out.min_eig.min(lo);
        out.worst_ratio = out.worst_ratio.max(-lo / hi.max(1.0));
    }
    Ok(out)
}

fn psd_suite(seed: u64, sizes: &SuiteSizes) -> Result<Vec<Check>> {
    let cfg = LossConfig::default();
    [KernelKind::Shape, KernelKind::Time]
        .into_iter()
        .map(|kind| {
            let s = psd_summary(kind, sizes.psd, 10, 10, seed, &cfg)?;
            let mut c = Check::new(&format!("kernel_{kind} Gram matrices PSD"), s.sets, s.worst_ratio.max(0.0), 1e-8);
            c.detail = format!("min_eig={:.3e}", s.min_eig);
            Ok(c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SuiteSizes {
        SuiteSizes {
            alignment: 20,
            gamma_limit: 10,
            grad: 4,
            psd: 5,
            eig: 10,
        }
    }

    #[test]
    fn every_suite_passes_at_small_size() {
        for s in ["alignment", "dpp", "grad", "psd"] {
            let checks = run_suite(s.parse().unwrap(), 3, &small()).unwrap();
            assert!(!checks.is_empty());
            for c in &checks {
                assert!(c.pass(), "{c}");
            }
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn all_is_the_union() {
        let all = run_suite(Suite::All, 1, &small()).unwrap();
        let parts: usize = [Suite::Alignment, Suite::Dpp, Suite::Grad, Suite::Psd]
            .into_iter()
            .map(|s| run_suite(s, 1, &small()).unwrap().len())
            .sum();
        assert_eq!(all.len(), parts);
    }

    #[test]
    fn delannoy_counts() {
        assert!((log_path_count(3) - 13f64.ln()).abs() < 1e-12);
        assert!((log_path_count(9) - 265729f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn check_display_has_verdict() {
        let c = Check::new("x", 1, 2.0, 1.0);
        assert!(c.to_string().starts_with("FAIL x"));
    }
}
