//! Determinantal point process kernels over trajectory sets and the
//! expected-cardinality diversity loss.
//!
//! The shape and time kernels are path sums over the Gibbs alignment distribution
//! built on the cost `-gamma * log k(u, v)`:
//!
//! * shape: `exp(-dtw_gamma / gamma) = sum_A exp(-<A, Delta> / gamma)`
//! * time: `exp(-dtw_gamma / gamma) * tdi_gamma = sum_A <A, Omega_sim> exp(-<A, Delta> / gamma)`
//!
//! Both are positive semi-definite whenever `k` and `k / (1 + k)` are. Their raw
//! values span many orders of magnitude (the number of alignment paths grows like
//! `5.8^tau`), so kernel matrices used for training are cosine-normalized by
//! default: `K_ij / sqrt(K_ii K_jj)`, which keeps the matrix PSD with unit diagonal.
//! Every kernel is evaluated in log space to avoid overflow.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::alignment::{
    cost_matrix_psd_log, omega_similarity, psd_log_chain, soft_dtw, soft_tdi_grad,
};
use crate::error::{Error, Result};
use crate::losses::{dilate_full, LossConfig};
use crate::trajectory::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    Shape,
    Time,
    /// RBF over flattened trajectories (ablation arm).
    MseRbf,
    /// `exp(-gamma * dilate)` (ablation arm, not guaranteed PSD).
    Dilate,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shape" => Ok(KernelKind::Shape),
            "time" => Ok(KernelKind::Time),
            "mse" => Ok(KernelKind::MseRbf),
            "dilate" => Ok(KernelKind::Dilate),
            other => Err(Error::Config(format!(
                "unknown kernel '{other}' (shape|time|mse|dilate)"
            ))),
        }
    }
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelKind::Shape => "shape",
            KernelKind::Time => "time",
            KernelKind::MseRbf => "mse",
            KernelKind::Dilate => "dilate",
        })
    }
}

/// Kernel selection plus assembly options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Bandwidth of [`KernelKind::MseRbf`].
    pub bandwidth: f64,
    /// Cosine-normalize the Gram matrix.
    pub normalize: bool,
}

impl KernelSpec {
    pub fn new(kind: KernelKind) -> Self {
        Self {
            kind,
            bandwidth: 1.0,
            normalize: true,
        }
    }

    pub fn raw(kind: KernelKind) -> Self {
        Self {
            normalize: false,
            ..Self::new(kind)
        }
    }
}

/// Symmetric Gram matrix over a set of trajectories.
#[derive(Clone, Debug)]
pub struct KernelMatrix {
    k: DMatrix<f64>,
    kind: Option<KernelKind>,
}

impl KernelMatrix {
    /// Wraps an arbitrary matrix, symmetrizing it as `(K + K^T) / 2`.
    pub fn from_matrix(k: DMatrix<f64>) -> Result<Self> {
        if !k.is_square() || k.nrows() == 0 {
            return Err(Error::Config(format!("kernel matrix must be square and nonempty, got {:?}", k.shape())));
        }
        let k = (&k + k.transpose()) * 0.5;
        Ok(Self { k, kind: None })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn kind(&self) -> Option<KernelKind> {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.k.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.k.nrows() == 0
    }
}

/// Log kernel value and its gradient with respect to both arguments.
#[derive(Clone, Debug)]
pub struct LogKernelGrad {
    pub log_value: f64,
    pub d_y1: Vec<f64>,
    pub d_y2: Vec<f64>,
}

fn log_shape(y1: &Trajectory, y2: &Trajectory, cfg: &LossConfig) -> Result<f64> {
    let delta = cost_matrix_psd_log(y1, y2, cfg.gamma, cfg.sigma)?;
    Ok(-soft_dtw(&delta, cfg.gamma)?.dtw_gamma / cfg.gamma)
}

fn log_time(y1: &Trajectory, y2: &Trajectory, cfg: &LossConfig) -> Result<f64> {
    let delta = cost_matrix_psd_log(y1, y2, cfg.gamma, cfg.sigma)?;
    let res = soft_dtw(&delta, cfg.gamma)?;
    let tdi = omega_similarity(y1.len()).matrix().dot(&res.expected_alignment);
    Ok(res.log_partition + tdi.ln())
}

fn log_mse_rbf(y1: &Trajectory, y2: &Trajectory, bandwidth: f64) -> Result<f64> {
    y1.same_shape(y2)?;
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Config(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let sq: f64 = y1.values().iter().zip(y2.values()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-sq / (bandwidth * bandwidth * y1.values().len() as f64))
}

/// Shape kernel: sum over alignment paths of `exp(-<A, Delta> / gamma)`.
pub fn kernel_shape(y1: &Trajectory, y2: &Trajectory, cfg: &LossConfig) -> Result<f64> {
    y1.same_shape(y2)?;
    Ok(log_shape(y1, y2, cfg)?.exp())
}

/// Time kernel: sum over alignment paths of `<A, Omega_sim> exp(-<A, Delta> / gamma)`.
pub fn kernel_time(y1: &Trajectory, y2: &Trajectory, cfg: &LossConfig) -> Result<f64> {
    y1.same_shape(y2)?;
    Ok(log_time(y1, y2, cfg)?.exp())
}

/// `exp(-||y1 - y2||^2 / (bandwidth^2 d tau))`.
pub fn kernel_mse_rbf(y1: &Trajectory, y2: &Trajectory, bandwidth: f64) -> Result<f64> {
    Ok(log_mse_rbf(y1, y2, bandwidth)?.exp())
}

/// `exp(-gamma * dilate(y1, y2))`.
pub fn kernel_dilate(y1: &Trajectory, y2: &Trajectory, cfg: &LossConfig) -> Result<f64> {
    Ok((-cfg.gamma * dilate_full(y1, y2, cfg)?.parts.total).exp())
}

/// Log kernel value for any kernel kind.
pub fn log_kernel(spec: &KernelSpec, y1: &Trajectory, y2: &Trajectory, cfg: &LossConfig) -> Result<f64> {
    y1.same_shape(y2)?;
    match spec.kind {
        KernelKind::Shape => log_shape(y1, y2, cfg),
        KernelKind::Time => log_time(y1, y2, cfg),
        KernelKind::MseRbf => log_mse_rbf(y1, y2, spec.bandwidth),
        KernelKind::Dilate => Ok(-cfg.gamma * dilate_full(y1, y2, cfg)?.parts.total),
    }
}

/// Log kernel value with gradients.
pub fn log_kernel_grad(
    spec: &KernelSpec,
    y1: &Trajectory,
    y2: &Trajectory,
    cfg: &LossConfig,
) -> Result<LogKernelGrad> {
    y1.same_shape(y2)?;
    match spec.kind {
        KernelKind::Shape => {
            let delta = cost_matrix_psd_log(y1, y2, cfg.gamma, cfg.sigma)?;
            let res = soft_dtw(&delta, cfg.gamma)?;
            let g = &res.expected_alignment * (-1.0 / cfg.gamma);
            let (d_y1, d_y2) = psd_log_chain(y1, y2, &g, cfg.gamma, cfg.sigma);
            Ok(LogKernelGrad {
                log_value: res.log_partition,
                d_y1,
                d_y2,
            })
        }
        KernelKind::Time => {
            let delta = cost_matrix_psd_log(y1, y2, cfg.gamma, cfg.sigma)?;
            let t = soft_tdi_grad(&delta, &omega_similarity(y1.len()), cfg.gamma)?;
            let g = &t.alignment.expected_alignment * (-1.0 / cfg.gamma) + &t.grad_delta / t.tdi;
            let (d_y1, d_y2) = psd_log_chain(y1, y2, &g, cfg.gamma, cfg.sigma);
            Ok(LogKernelGrad {
                log_value: t.alignment.log_partition + t.tdi.ln(),
                d_y1,
                d_y2,
            })
        }
        KernelKind::MseRbf => {
            let log_value = log_mse_rbf(y1, y2, spec.bandwidth)?;
            let scale = -2.0 / (spec.bandwidth * spec.bandwidth * y1.values().len() as f64);
            let d_y1: Vec<f64> = y1
                .values()
                .iter()
                .zip(y2.values())
                .map(|(a, b)| scale * (a - b))
                .collect();
            let d_y2 = d_y1.iter().map(|v| -v).collect();
            Ok(LogKernelGrad { log_value, d_y1, d_y2 })
        }
        KernelKind::Dilate => {
            let full = dilate_full(y1, y2, cfg)?;
            Ok(LogKernelGrad {
                log_value: -cfg.gamma * full.parts.total,
                d_y1: full.grad_yhat.iter().map(|v| -cfg.gamma * v).collect(),
                d_y2: full.grad_y.iter().map(|v| -cfg.gamma * v).collect(),
            })
        }
    }
}

fn check_set(set: &[Trajectory]) -> Result<()> {
    let first = set.first().ok_or(Error::Empty("trajectory set"))?;
    for y in &set[1..] {
        first.same_shape(y)?;
    }
    Ok(())
}

fn assemble(logs: &DMatrix<f64>, normalize: bool) -> DMatrix<f64> {
    let n = logs.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        if normalize {
            (logs[(i, j)] - 0.5 * logs[(i, i)] - 0.5 * logs[(j, j)]).exp()
        } else {
            logs[(i, j)].exp()
        }
    })
}

/// Gram matrix `K[i][j] = kernel(set[i], set[j])`, evaluated on the upper triangle
/// and mirrored.
pub fn kernel_matrix(set: &[Trajectory], spec: &KernelSpec, cfg: &LossConfig) -> Result<KernelMatrix> {
    check_set(set)?;
    let n = set.len();
    let mut logs = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = log_kernel(spec, &set[i], &set[j], cfg)?;
            logs[(i, j)] = v;
            logs[(j, i)] = v;
        }
    }
    Ok(KernelMatrix {
        k: assemble(&logs, spec.normalize),
        kind: Some(spec.kind),
    })
}

/// `(K + I)^{-1}` through an LDL^T factorization of `K + I`.
fn shifted_inverse(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    let a = k + DMatrix::identity(n, n);
    let mut l = DMatrix::<f64>::identity(n, n);
    let mut d = vec![0.0; n];
    for j in 0..n {
        let mut dj = a[(j, j)];
        for p in 0..j {
            dj -= l[(j, p)] * l[(j, p)] * d[p];
        }
        if !(dj > 0.0) || !dj.is_finite() {
            return Err(Error::Numeric(format!(
                "K + I is not positive definite (pivot {j} = {dj}); kernel has an eigenvalue <= -1"
            )));
        }
        d[j] = dj;
        for i in (j + 1)..n {
            let mut v = a[(i, j)];
            for p in 0..j {
                v -= l[(i, p)] * l[(j, p)] * d[p];
            }
            l[(i, j)] = v / dj;
        }
    }
    // Solve L D L^T X = I column by column.
    let mut x = DMatrix::<f64>::identity(n, n);
    for c in 0..n {
        let mut col: Vec<f64> = (0..n).map(|i| if i == c { 1.0 } else { 0.0 }).collect();
        for i in 0..n {
            for p in 0..i {
                col[i] -= l[(i, p)] * col[p];
            }
        }
        for i in 0..n {
            col[i] /= d[i];
        }
        for i in (0..n).rev() {
            for p in (i + 1)..n {
                col[i] -= l[(p, i)] * col[p];
            }
        }
        for i in 0..n {
            x[(i, c)] = col[i];
        }
    }
    Ok(x)
}

/// Negative expected cardinality `-Trace(I - (K + I)^{-1})`.
pub fn diversity_loss(k: &KernelMatrix) -> Result<f64> {
    let inv = shifted_inverse(&k.k)?;
    Ok(inv.trace() - k.len() as f64)
}

/// Eigenvalues of a symmetric kernel matrix in ascending order.
pub fn eigenvalues(k: &KernelMatrix) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(k.k.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Default PSD tolerance relative to `max(1, max eigenvalue)`.
pub const PSD_TOL: f64 = 1e-8;

/// `sum_i lambda_i / (1 + lambda_i)` from the eigendecomposition of `K`.
pub fn expected_cardinality(k: &KernelMatrix) -> Result<f64> {
    let report = psd_check(k, PSD_TOL);
    if !report.pass {
        return Err(Error::Numeric(format!(
            "kernel is not PSD: min eigenvalue {}",
            report.min_eig
        )));
    }
    Ok(eigenvalues(k).iter().map(|l| l / (1.0 + l)).sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsdReport {
    pub min_eig: f64,
    pub max_eig: f64,
    pub pass: bool,
}

/// Passes iff the smallest eigenvalue is at least `-tol * max(1, max eigenvalue)`.
pub fn psd_check(k: &KernelMatrix, tol: f64) -> PsdReport {
    let ev = eigenvalues(k);
    let (min_eig, max_eig) = (ev[0], ev[ev.len() - 1]);
    PsdReport {
        min_eig,
        max_eig,
        pass: min_eig >= -tol * max_eig.max(1.0),
    }
}

/// Diversity loss over a set with its gradient with respect to every trajectory.
#[derive(Clone, Debug)]
pub struct DiversityGrad {
    pub loss: f64,
    pub kernel: KernelMatrix,
    /// One gradient per trajectory, in trajectory layout.
    pub grads: Vec<Vec<f64>>,
}

pub fn diversity_loss_grad(set: &[Trajectory], spec: &KernelSpec, cfg: &LossConfig) -> Result<DiversityGrad> {
    check_set(set)?;
    let n = set.len();
    let width = set[0].values().len();
    let mut logs = DMatrix::zeros(n, n);
    let mut pair_grads: Vec<Vec<Option<LogKernelGrad>>> = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let g = log_kernel_grad(spec, &set[i], &set[j], cfg)?;
            logs[(i, j)] = g.log_value;
            logs[(j, i)] = g.log_value;
            pair_grads[i][j] = Some(g);
        }
    }
    let k = assemble(&logs, spec.normalize);
    let inv = shifted_inverse(&k)?;
    let loss = inv.trace() - n as f64;
    // dL/dK = -(K + I)^{-2}
    let dk = -(&inv * &inv);

    let mut grads = vec![vec![0.0; width]; n];
    let mut self_weight = vec![0.0; n];
    for i in 0..n {
        for j in i..n {
            let g = pair_grads[i][j].as_ref().expect("upper triangle filled");
            let w = if i == j {
                if spec.normalize {
                    continue;
                }
                dk[(i, i)] * k[(i, i)]
            } else {
                (dk[(i, j)] + dk[(j, i)]) * k[(i, j)]
            };
            for (acc, v) in grads[i].iter_mut().zip(&g.d_y1) {
                *acc += w * v;
            }
            for (acc, v) in grads[j].iter_mut().zip(&g.d_y2) {
                *acc += w * v;
            }
            if spec.normalize {
                self_weight[i] += w;
                self_weight[j] += w;
            }
        }
    }
    if spec.normalize {
        // log K~_ij = l_ij - l_ii / 2 - l_jj / 2
        for i in 0..n {
            let g = pair_grads[i][i].as_ref().expect("diagonal filled");
            let w = -0.5 * self_weight[i];
            for ((acc, a), b) in grads[i].iter_mut().zip(&g.d_y1).zip(&g.d_y2) {
                *acc += w * (a + b);
            }
        }
    }
    Ok(DiversityGrad {
        loss,
        kernel: KernelMatrix {
            k,
            kind: Some(spec.kind),
        },
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{brute_force_alignment, enumerate_paths, omega_similarity};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn s(v: &[f64]) -> Trajectory {
        Trajectory::from_series(v.to_vec()).unwrap()
    }

    fn rand_set(n: usize, tau: usize, seed: u64) -> Vec<Trajectory> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| s(&(0..tau).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect()
    }

    #[test]
    fn shape_kernel_single_step() {
        let cfg = LossConfig::default();
        assert!((kernel_shape(&s(&[0.4]), &s(&[0.4]), &cfg).unwrap() - 1.0).abs() < 1e-14);
        for &(u, v) in &[(0.0f64, 1.0f64), (0.3, -0.5), (1.0, 3.0)] {
            let g = 0.5 * (-(u - v) * (u - v)).exp();
            let want = g / (1.0 - g);
            let got = kernel_shape(&s(&[u]), &s(&[v]), &cfg).unwrap();
            assert!((got - want).abs() < 1e-12 * want.max(1e-300), "{got} vs {want}");
        }
    }

    #[test]
    fn shape_kernel_matches_enumeration() {
        let cfg = LossConfig { gamma: 0.1, ..Default::default() };
        let set = rand_set(2, 2, 3);
        let delta = cost_matrix_psd_log(&set[0], &set[1], 0.1, 1.0).unwrap();
        let bf = brute_force_alignment(&delta, &omega_similarity(2), 0.1).unwrap();
        let got = kernel_shape(&set[0], &set[1], &cfg).unwrap();
        let want = (-bf.dtw_gamma / 0.1).exp();
        assert!((got - want).abs() < 1e-12 * want);
    }

    #[test]
    fn time_kernel_examples() {
        let cfg = LossConfig { gamma: 1.0, sigma: 1.0, ..Default::default() };
        assert!((kernel_time(&s(&[0.2]), &s(&[0.2]), &cfg).unwrap() - 1.0).abs() < 1e-14);
        let z = s(&[0.0, 0.0]);
        assert!((kernel_time(&z, &z, &cfg).unwrap() - 7.0).abs() < 1e-12);
    }

    #[test]
    fn time_kernel_matches_path_sum() {
        for tau in 2..=4 {
            for seed in 0..5 {
                let cfg = LossConfig { gamma: 0.5, sigma: 0.8, ..Default::default() };
                let set = rand_set(2, tau, 100 + seed);
                let delta = cost_matrix_psd_log(&set[0], &set[1], 0.5, 0.8).unwrap();
                let om = omega_similarity(tau);
                let want: f64 = enumerate_paths(tau, tau)
                    .iter()
                    .map(|p| {
                        let w: f64 = p.iter().map(|&c| om.matrix()[c]).sum();
                        let c: f64 = p.iter().map(|&c| delta.delta()[c]).sum();
                        w * (-c / 0.5).exp()
                    })
                    .sum();
                let got = kernel_time(&set[0], &set[1], &cfg).unwrap();
                assert!((got - want).abs() <= 1e-9 * want, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn rbf_examples() {
        let y = s(&[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(kernel_mse_rbf(&y, &y, 0.7).unwrap(), 1.0);
        // ||y1 - y2||^2 = b^2 d tau
        let b: f64 = 0.5;
        let off = (b * b).sqrt();
        let got = kernel_mse_rbf(&y, &y.shifted(off), b).unwrap();
        assert!((got - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn dilate_kernel_reuses_loss() {
        let cfg = LossConfig::default();
        let y = s(&[0.3, 0.8]);
        let want = (-cfg.gamma * crate::losses::dilate_loss(&y, &y, &cfg).unwrap()).exp();
        assert_eq!(kernel_dilate(&y, &y, &cfg).unwrap(), want);
    }

    #[test]
    fn kernel_matrix_shapes() {
        let cfg = LossConfig::default();
        let y = s(&[0.0, 0.5, 0.2]);
        let one = kernel_matrix(std::slice::from_ref(&y), &KernelSpec::raw(KernelKind::Shape), &cfg).unwrap();
        assert_eq!(one.len(), 1);
        let c = kernel_shape(&y, &y, &cfg).unwrap();
        assert!((one.matrix()[(0, 0)] - c).abs() < 1e-12 * c);
        let many = kernel_matrix(&vec![y.clone(); 3], &KernelSpec::raw(KernelKind::Shape), &cfg).unwrap();
        assert!(many.matrix().iter().all(|v| (v - c).abs() < 1e-12 * c));
        assert!(kernel_matrix(&[], &KernelSpec::new(KernelKind::Shape), &cfg).is_err());
    }

    #[test]
    fn diversity_loss_closed_forms() {
        let zero = KernelMatrix::from_matrix(DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(diversity_loss(&zero).unwrap(), 0.0);
        for n in 1..=6 {
            let id = KernelMatrix::from_matrix(DMatrix::identity(n, n)).unwrap();
            assert_eq!(diversity_loss(&id).unwrap(), -(n as f64) / 2.0);
        }
        let ones = KernelMatrix::from_matrix(DMatrix::from_element(2, 2, 1.0)).unwrap();
        assert!((diversity_loss(&ones).unwrap() + 2.0 / 3.0).abs() < 1e-12);
        assert!((expected_cardinality(&ones).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let id4 = KernelMatrix::from_matrix(DMatrix::identity(4, 4)).unwrap();
        assert!((expected_cardinality(&id4).unwrap() - 2.0).abs() < 1e-12);
        let id2 = KernelMatrix::from_matrix(DMatrix::identity(2, 2)).unwrap();
        assert!(expected_cardinality(&id2).unwrap() > expected_cardinality(&ones).unwrap());
    }

    #[test]
    fn strongly_negative_kernel_is_a_numeric_error() {
        let k = KernelMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0])).unwrap();
        assert!(matches!(diversity_loss(&k), Err(Error::Numeric(_))));
        assert!(matches!(expected_cardinality(&k), Err(Error::Numeric(_))));
    }

    #[test]
    fn psd_check_examples() {
        let id = KernelMatrix::from_matrix(DMatrix::identity(3, 3)).unwrap();
        let r = psd_check(&id, 1e-8);
        assert!(r.pass && (r.min_eig - 1.0).abs() < 1e-12);
        let bad = KernelMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).unwrap();
        let r = psd_check(&bad, 1e-8);
        assert!(!r.pass && (r.min_eig + 1.0).abs() < 1e-12);
    }

    fn fd_diversity(set: &[Trajectory], spec: &KernelSpec, cfg: &LossConfig, tol: f64) {
        let an = diversity_loss_grad(set, spec, cfg).unwrap();
        let eps = 1e-5;
        for (t, g) in an.grads.iter().enumerate() {
            for k in 0..g.len() {
                let mut p = set.to_vec();
                p[t].values_mut()[k] += eps;
                let mut m = set.to_vec();
                m[t].values_mut()[k] -= eps;
                let fp = diversity_loss(&kernel_matrix(&p, spec, cfg).unwrap()).unwrap();
                let fm = diversity_loss(&kernel_matrix(&m, spec, cfg).unwrap()).unwrap();
                let fd = (fp - fm) / (2.0 * eps);
                let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-4);
                assert!(err <= tol, "{:?} traj {t} entry {k}: fd {fd} vs {}", spec.kind, g[k]);
            }
        }
    }

    #[test]
    fn single_item_shape_gradient_vanishes_at_one_step() {
        let cfg = LossConfig::default();
        let g = diversity_loss_grad(&[s(&[0.7])], &KernelSpec::raw(KernelKind::Shape), &cfg).unwrap();
        assert_eq!(g.grads[0], vec![0.0]);
        assert!((g.loss + 0.5).abs() < 1e-15);
    }

    #[test]
    fn diversity_gradients_match_finite_differences() {
        let cfg = LossConfig { gamma: 0.1, sigma: 1.0, ..Default::default() };
        fd_diversity(&rand_set(2, 4, 1), &KernelSpec::raw(KernelKind::MseRbf), &cfg, 1e-4);
        fd_diversity(&rand_set(3, 3, 2), &KernelSpec::raw(KernelKind::Shape), &cfg, 1e-3);
        fd_diversity(&rand_set(3, 3, 3), &KernelSpec::new(KernelKind::Shape), &cfg, 1e-3);
        fd_diversity(&rand_set(3, 3, 4), &KernelSpec::raw(KernelKind::Time), &cfg, 1e-3);
        fd_diversity(&rand_set(3, 4, 5), &KernelSpec::new(KernelKind::Time), &cfg, 1e-3);
        fd_diversity(&rand_set(3, 3, 6), &KernelSpec::new(KernelKind::Dilate), &cfg, 1e-3);
    }

    #[test]
    fn duplicate_item_reduces_cardinality() {
        let cfg = LossConfig::default();
        for kind in [KernelKind::Shape, KernelKind::Time] {
            let set = rand_set(2, 6, 9);
            let dup = vec![set[0].clone(), set[0].clone()];
            for spec in [KernelSpec::new(kind), KernelSpec::raw(kind)] {
                let a = diversity_loss(&kernel_matrix(&set, &spec, &cfg).unwrap()).unwrap();
                let b = diversity_loss(&kernel_matrix(&dup, &spec, &cfg).unwrap()).unwrap();
                assert!(b > a, "{kind:?}: {b} <= {a}");
            }
        }
    }

    proptest! {
        #[test]
        fn eigenvalue_identity(n in 1usize..=20, seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let k = KernelMatrix::from_matrix(&b * b.transpose()).unwrap();
            let via_solve = diversity_loss(&k).unwrap();
            let via_eig = -expected_cardinality(&k).unwrap();
            prop_assert!((via_solve - via_eig).abs() <= 1e-10);
            prop_assert!(via_solve <= 0.0 && via_solve > -(n as f64));
        }

        #[test]
        fn gram_matrices_are_psd(seed in any::<u64>(), n in 2usize..8, tau in 2usize..8) {
            let cfg = LossConfig::default();
            let set = rand_set(n, tau, seed);
            for kind in [KernelKind::Shape, KernelKind::Time] {
                for spec in [KernelSpec::new(kind), KernelSpec::raw(kind)] {
                    let k = kernel_matrix(&set, &spec, &cfg).unwrap();
                    prop_assert!(psd_check(&k, PSD_TOL).pass);
                    prop_assert!(k.matrix().iter().all(|v| *v > 0.0));
                }
                let k = kernel_matrix(&set, &KernelSpec::new(kind), &cfg).unwrap();
                prop_assert!(k.matrix().iter().all(|v| *v <= 1.0 + 1e-12));
            }
        }
    }
}
