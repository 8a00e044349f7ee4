//! Dynamic programs over monotone alignment paths.
//!
//! An alignment path between two series of lengths `n` and `m` connects cell
//! `(0, 0)` to `(n - 1, m - 1)` with unit moves down, right or diagonal. Soft-DTW
//! replaces the minimum path cost with a `gamma`-smoothed log-sum-exp over all such
//! paths; the resulting Gibbs distribution over paths has mean alignment equal to
//! the gradient of soft-DTW with respect to the cost matrix.
//!
//! Besides the value and its gradient, this module provides the Hessian-vector
//! product of soft-DTW (forward-mode over the backward recursion). The smooth TDI
//! is `<Omega, E[A]>`, so its gradient with respect to the costs is exactly
//! `Hessian(soft_dtw) * Omega`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

/// Largest series length accepted by [`brute_force_alignment`].
pub const BRUTE_FORCE_MAX_LEN: usize = 7;

/// Pairwise timestep costs between two series.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    delta: DMatrix<f64>,
    gamma: Option<f64>,
}

impl CostMatrix {
    pub fn new(delta: DMatrix<f64>) -> Result<Self> {
        if delta.nrows() == 0 || delta.ncols() == 0 {
            return Err(Error::Empty("cost matrix"));
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("cost matrix has non-finite entries".into()));
        }
        Ok(Self { delta, gamma: None })
    }

    pub fn delta(&self) -> &DMatrix<f64> {
        &self.delta
    }

    /// Smoothing coefficient used to build the matrix, when the construction has one.
    pub fn gamma(&self) -> Option<f64> {
        self.gamma
    }

    pub fn nrows(&self) -> usize {
        self.delta.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.delta.ncols()
    }

    pub fn transpose(&self) -> CostMatrix {
        CostMatrix {
            delta: self.delta.transpose(),
            gamma: self.gamma,
        }
    }
}

/// Timestep weighting matrix used by the temporal distortion index.
#[derive(Clone, Debug, PartialEq)]
pub struct OmegaMatrix(DMatrix<f64>);

impl OmegaMatrix {
    pub fn from_matrix(m: DMatrix<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Soft-DTW value together with the expected alignment under the Gibbs path distribution.
#[derive(Clone, Debug)]
pub struct AlignmentResult {
    pub dtw_gamma: f64,
    /// `E[A]`, equal to the gradient of `dtw_gamma` with respect to the costs.
    pub expected_alignment: DMatrix<f64>,
    /// `log Z = -dtw_gamma / gamma`.
    pub log_partition: f64,
}

/// Smooth TDI with its gradient with respect to the cost matrix.
#[derive(Clone, Debug)]
pub struct TdiGradient {
    pub tdi: f64,
    pub grad_delta: DMatrix<f64>,
    pub alignment: AlignmentResult,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("gamma must be positive and finite, got {gamma}")))
    }
}

fn check_pair(y1: &Trajectory, y2: &Trajectory) -> Result<()> {
    if y1.channels() != y2.channels() {
        return Err(Error::Config(format!(
            "channel mismatch: {} vs {}",
            y1.channels(),
            y2.channels()
        )));
    }
    Ok(())
}

/// `delta[i][j] = ||y1_i - y2_j||^2`.
pub fn cost_matrix_sqeuclid(y1: &Trajectory, y2: &Trajectory) -> Result<CostMatrix> {
    check_pair(y1, y2)?;
    let delta = DMatrix::from_fn(y1.len(), y2.len(), |i, j| y1.sq_dist(i, y2, j));
    Ok(CostMatrix { delta, gamma: None })
}

/// `-gamma * log k(u, v)` for `k = g / (1 - g)`, `g = exp(-sq / sigma^2) / 2`,
/// written in terms of the squared distance `sq = ||u - v||^2`.
pub fn psd_log_cost(sq: f64, gamma: f64, sigma: f64) -> f64 {
    let x = sq / (sigma * sigma);
    gamma * (x + (2.0 - (-x).exp()).ln())
}

/// Derivative of [`psd_log_cost`] with respect to the squared distance.
pub fn psd_log_cost_deriv(sq: f64, gamma: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let e = (-sq / s2).exp();
    gamma * (1.0 + e / (2.0 - e)) / s2
}

/// Cost matrix whose Gibbs path sums are PSD kernels: `delta = -gamma log k(y1_i, y2_j)`.
pub fn cost_matrix_psd_log(
    y1: &Trajectory,
    y2: &Trajectory,
    gamma: f64,
    sigma: f64,
) -> Result<CostMatrix> {
    check_pair(y1, y2)?;
    check_gamma(gamma)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let delta = DMatrix::from_fn(y1.len(), y2.len(), |i, j| {
        psd_log_cost(y1.sq_dist(i, y2, j), gamma, sigma)
    });
    Ok(CostMatrix {
        delta,
        gamma: Some(gamma),
    })
}

/// Pulls a cost-matrix gradient back to the two series for the squared-Euclidean cost.
pub fn sqeuclid_chain(
    y1: &Trajectory,
    y2: &Trajectory,
    grad_delta: &DMatrix<f64>,
) -> (Vec<f64>, Vec<f64>) {
    pair_chain(y1, y2, grad_delta, |_| 1.0)
}

/// Pulls a cost-matrix gradient back to the two series for [`cost_matrix_psd_log`].
pub fn psd_log_chain(
    y1: &Trajectory,
    y2: &Trajectory,
    grad_delta: &DMatrix<f64>,
    gamma: f64,
    sigma: f64,
) -> (Vec<f64>, Vec<f64>) {
    pair_chain(y1, y2, grad_delta, |sq| psd_log_cost_deriv(sq, gamma, sigma))
}

/// Chain rule for costs of the form `f(||y1_i - y2_j||^2)`; `outer` is `f'`.
fn pair_chain(
    y1: &Trajectory,
    y2: &Trajectory,
    grad_delta: &DMatrix<f64>,
    outer: impl Fn(f64) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    let (n, m, d) = (y1.len(), y2.len(), y1.channels());
    let mut g1 = vec![0.0; d * n];
    let mut g2 = vec![0.0; d * m];
    let (a, b) = (y1.values(), y2.values());
    for i in 0..n {
        for j in 0..m {
            let g = grad_delta[(i, j)];
            if g == 0.0 {
                continue;
            }
            let w = 2.0 * g * outer(y1.sq_dist(i, y2, j));
            for c in 0..d {
                let diff = a[c * n + i] - b[c * m + j];
                g1[c * n + i] += w * diff;
                g2[c * m + j] -= w * diff;
            }
        }
    }
    (g1, g2)
}

/// `omega[i][j] = 1 / ((i - j)^2 + 1)`.
pub fn omega_similarity(tau: usize) -> OmegaMatrix {
    OmegaMatrix(DMatrix::from_fn(tau, tau, |i, j| {
        let d = i as f64 - j as f64;
        1.0 / (d * d + 1.0)
    }))
}

/// `omega[i][j] = (i - j)^2 / tau^2`; penalizes off-diagonal alignment.
pub fn omega_dissimilarity(tau: usize) -> OmegaMatrix {
    let t2 = (tau * tau) as f64;
    OmegaMatrix(DMatrix::from_fn(tau, tau, |i, j| {
        let d = i as f64 - j as f64;
        d * d / t2
    }))
}

fn softmin3(gamma: f64, a: f64, b: f64, c: f64) -> f64 {
    let xa = -a / gamma;
    let xb = -b / gamma;
    let xc = -c / gamma;
    let m = xa.max(xb).max(xc);
    if m == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    let s = (xa - m).exp() + (xb - m).exp() + (xc - m).exp();
    -gamma * (m + s.ln())
}

/// Forward and backward soft-DTW tables on a grid padded by one cell on each side.
struct Tables {
    n: usize,
    m: usize,
    gamma: f64,
    /// Padded costs, `(n + 2) x (m + 2)`, zero outside the interior.
    d: Vec<f64>,
    /// Accumulated soft costs with backward-pass padding applied.
    r: Vec<f64>,
    /// Expected alignment (interior only is meaningful).
    e: Vec<f64>,
}

impl Tables {
    fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.m + 2) + j
    }

    fn run(delta: &CostMatrix, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        let (n, m) = (delta.nrows(), delta.ncols());
        let w = m + 2;
        let mut t = Tables {
            n,
            m,
            gamma,
            d: vec![0.0; (n + 2) * w],
            r: vec![f64::INFINITY; (n + 2) * w],
            e: vec![0.0; (n + 2) * w],
        };
        for i in 0..n {
            for j in 0..m {
                t.d[(i + 1) * w + j + 1] = delta.delta[(i, j)];
            }
        }
        t.r[0] = 0.0;
        for i in 1..=n {
            for j in 1..=m {
                let best = softmin3(
                    gamma,
                    t.r[(i - 1) * w + j - 1],
                    t.r[(i - 1) * w + j],
                    t.r[i * w + j - 1],
                );
                t.r[i * w + j] = t.d[i * w + j] + best;
            }
        }

        // Backward pass: successors outside the grid never contribute, except the
        // virtual corner which passes the full mass to (n, m).
        for i in 1..=n {
            t.r[i * w + m + 1] = f64::NEG_INFINITY;
        }
        for j in 1..=m {
            t.r[(n + 1) * w + j] = f64::NEG_INFINITY;
        }
        t.r[(n + 1) * w + m + 1] = t.r[n * w + m];
        t.e[(n + 1) * w + m + 1] = 1.0;
        for i in (1..=n).rev() {
            for j in (1..=m).rev() {
                let rij = t.r[i * w + j];
                let a = ((t.r[(i + 1) * w + j] - rij - t.d[(i + 1) * w + j]) / gamma).exp();
                let b = ((t.r[i * w + j + 1] - rij - t.d[i * w + j + 1]) / gamma).exp();
                let c = ((t.r[(i + 1) * w + j + 1] - rij - t.d[(i + 1) * w + j + 1]) / gamma)
                    .exp();
                t.e[i * w + j] =
                    t.e[(i + 1) * w + j] * a + t.e[i * w + j + 1] * b + t.e[(i + 1) * w + j + 1] * c;
            }
        }
        Ok(t)
    }

    fn value(&self) -> f64 {
        self.r[self.idx(self.n, self.m)]
    }

    fn expected_alignment(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.m, |i, j| self.e[self.idx(i + 1, j + 1)])
    }

    /// Transition weight from interior cell `p` to its interior successor `s`.
    fn weight(&self, s: usize, p: usize) -> f64 {
        ((self.r[s] - self.d[s] - self.r[p]) / self.gamma).exp()
    }

    /// Directional derivative of the expected alignment along `dir`.
    fn hvp(&self, dir: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, m, w) = (self.n, self.m, self.m + 2);
        let g = self.gamma;
        let mut z = vec![0.0; (n + 2) * w];
        for i in 0..n {
            for j in 0..m {
                z[(i + 1) * w + j + 1] = dir[(i, j)];
            }
        }
        // Forward tangent of r; the border is constant.
        let mut rdot = vec![0.0; (n + 2) * w];
        for i in 1..=n {
            for j in 1..=m {
                let c = i * w + j;
                let base = self.r[c] - self.d[c];
                let mut acc = z[c];
                for p in [(i - 1) * w + j - 1, (i - 1) * w + j, i * w + j - 1] {
                    let rp = self.r[p];
                    if rp.is_finite() {
                        acc += ((base - rp) / g).exp() * rdot[p];
                    }
                }
                rdot[c] = acc;
            }
        }
        // Tangent of the backward recursion; e(n, m) = 1 is constant.
        let mut edot = vec![0.0; (n + 2) * w];
        for i in (1..=n).rev() {
            for j in (1..=m).rev() {
                if i == n && j == m {
                    continue;
                }
                let c = i * w + j;
                let mut acc = 0.0;
                for (si, sj) in [(i + 1, j), (i, j + 1), (i + 1, j + 1)] {
                    if si > n || sj > m {
                        continue;
                    }
                    let s = si * w + sj;
                    let p = self.weight(s, c);
                    acc += edot[s] * p + self.e[s] * p * (rdot[s] - z[s] - rdot[c]) / g;
                }
                edot[c] = acc;
            }
        }
        DMatrix::from_fn(n, m, |i, j| edot[(i + 1) * w + j + 1])
    }
}

/// Soft-DTW value and expected alignment.
pub fn soft_dtw(delta: &CostMatrix, gamma: f64) -> Result<AlignmentResult> {
    let t = Tables::run(delta, gamma)?;
    let dtw_gamma = t.value();
    Ok(AlignmentResult {
        dtw_gamma,
        expected_alignment: t.expected_alignment(),
        log_partition: -dtw_gamma / gamma,
    })
}

fn check_omega(delta: &CostMatrix, omega: &OmegaMatrix) -> Result<()> {
    if omega.0.shape() != delta.delta.shape() {
        return Err(Error::Config(format!(
            "omega shape {:?} does not match cost shape {:?}",
            omega.0.shape(),
            delta.delta.shape()
        )));
    }
    Ok(())
}

/// Smooth temporal distortion index `<Omega, E[A]>`.
pub fn soft_tdi(delta: &CostMatrix, omega: &OmegaMatrix, gamma: f64) -> Result<f64> {
    check_omega(delta, omega)?;
    let res = soft_dtw(delta, gamma)?;
    Ok(omega.0.dot(&res.expected_alignment))
}

/// Hessian of soft-DTW applied to `direction`; equivalently the gradient of
/// `<direction, E[A]>` with respect to the costs.
pub fn soft_dtw_hvp(delta: &CostMatrix, gamma: f64, direction: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if direction.shape() != delta.delta.shape() {
        return Err(Error::Config("direction shape does not match cost shape".into()));
    }
    let t = Tables::run(delta, gamma)?;
    Ok(t.hvp(direction))
}

/// Smooth TDI together with its cost gradient, sharing one pair of DP sweeps.
pub fn soft_tdi_grad(delta: &CostMatrix, omega: &OmegaMatrix, gamma: f64) -> Result<TdiGradient> {
    check_omega(delta, omega)?;
    let t = Tables::run(delta, gamma)?;
    let expected_alignment = t.expected_alignment();
    let tdi = omega.0.dot(&expected_alignment);
    let grad_delta = t.hvp(&omega.0);
    let dtw_gamma = t.value();
    Ok(TdiGradient {
        tdi,
        grad_delta,
        alignment: AlignmentResult {
            dtw_gamma,
            expected_alignment,
            log_partition: -dtw_gamma / gamma,
        },
    })
}

/// Classic DTW: minimum cost over alignment paths.
pub fn hard_dtw(delta: &CostMatrix) -> f64 {
    let acc = hard_table(delta);
    acc[(delta.nrows() - 1, delta.ncols() - 1)]
}

fn hard_table(delta: &CostMatrix) -> DMatrix<f64> {
    let (n, m) = (delta.nrows(), delta.ncols());
    let mut acc = DMatrix::from_element(n, m, f64::INFINITY);
    for i in 0..n {
        for j in 0..m {
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let mut best = f64::INFINITY;
                if i > 0 && j > 0 {
                    best = best.min(acc[(i - 1, j - 1)]);
                }
                if i > 0 {
                    best = best.min(acc[(i - 1, j)]);
                }
                if j > 0 {
                    best = best.min(acc[(i, j - 1)]);
                }
                best
            };
            acc[(i, j)] = delta.delta[(i, j)] + prev;
        }
    }
    acc
}

/// Optimal path from `(0, 0)` to the far corner. On ties the backtrack prefers the
/// diagonal predecessor, then the vertical one `(i - 1, j)`, then the horizontal one.
pub fn hard_path(delta: &CostMatrix) -> Vec<(usize, usize)> {
    let acc = hard_table(delta);
    let (mut i, mut j) = (delta.nrows() - 1, delta.ncols() - 1);
    let mut path = vec![(i, j)];
    while i > 0 || j > 0 {
        let mut best: Option<((usize, usize), f64)> = None;
        let candidates = [
            (i > 0 && j > 0).then(|| (i - 1, j - 1)),
            (i > 0).then(|| (i - 1, j)),
            (j > 0).then(|| (i, j - 1)),
        ];
        for cell in candidates.into_iter().flatten() {
            let v = acc[cell];
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((cell, v));
            }
        }
        let (cell, _) = best.expect("non-origin cell has a predecessor");
        (i, j) = cell;
        path.push(cell);
    }
    path.reverse();
    path
}

/// `<Omega, A*>` for the hard-DTW optimal path `A*`.
pub fn hard_tdi(delta: &CostMatrix, omega: &OmegaMatrix) -> Result<f64> {
    check_omega(delta, omega)?;
    Ok(hard_path(delta).into_iter().map(|c| omega.0[c]).sum())
}

/// Every alignment path on an `n x m` grid.
pub fn enumerate_paths(n: usize, m: usize) -> Vec<Vec<(usize, usize)>> {
    fn walk(
        i: usize,
        j: usize,
        n: usize,
        m: usize,
        cur: &mut Vec<(usize, usize)>,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        cur.push((i, j));
        if i + 1 == n && j + 1 == m {
            out.push(cur.clone());
        } else {
            if i + 1 < n && j + 1 < m {
                walk(i + 1, j + 1, n, m, cur, out);
            }
            if i + 1 < n {
                walk(i + 1, j, n, m, cur, out);
            }
            if j + 1 < m {
                walk(i, j + 1, n, m, cur, out);
            }
        }
        cur.pop();
    }
    let mut out = Vec::new();
    if n > 0 && m > 0 {
        walk(0, 0, n, m, &mut Vec::new(), &mut out);
    }
    out
}

/// Explicit path enumeration result.
#[derive(Clone, Debug)]
pub struct BruteForceAlignment {
    pub dtw_gamma: f64,
    pub tdi_gamma: f64,
    pub expected_alignment: DMatrix<f64>,
    pub path_count: usize,
}

/// Soft-DTW, smooth TDI and expected alignment by summing over every path.
///
/// Refuses grids longer than [`BRUTE_FORCE_MAX_LEN`] on either side.
pub fn brute_force_alignment(
    delta: &CostMatrix,
    omega: &OmegaMatrix,
    gamma: f64,
) -> Result<BruteForceAlignment> {
    check_gamma(gamma)?;
    check_omega(delta, omega)?;
    let (n, m) = (delta.nrows(), delta.ncols());
    if n > BRUTE_FORCE_MAX_LEN || m > BRUTE_FORCE_MAX_LEN {
        return Err(Error::Size(format!(
            "brute-force enumeration limited to {BRUTE_FORCE_MAX_LEN} steps, got {n}x{m}"
        )));
    }
    let paths = enumerate_paths(n, m);
    let logits: Vec<f64> = paths
        .iter()
        .map(|p| -p.iter().map(|&c| delta.delta[c]).sum::<f64>() / gamma)
        .collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = weights.iter().sum();

    let mut expected = DMatrix::zeros(n, m);
    let mut tdi = 0.0;
    for (p, w) in paths.iter().zip(&weights) {
        let w = w / z;
        for &c in p {
            expected[c] += w;
            tdi += w * omega.0[c];
        }
    }
    Ok(BruteForceAlignment {
        dtw_gamma: -gamma * (top + z.ln()),
        tdi_gamma: tdi,
        expected_alignment: expected,
        path_count: paths.len(),
    })
}
