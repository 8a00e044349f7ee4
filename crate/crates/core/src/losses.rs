//! Training losses over trajectories.

use crate::alignment::{
    cost_matrix_sqeuclid, omega_dissimilarity, soft_tdi_grad, sqeuclid_chain,
};
use crate::dpp::{diversity_loss, kernel_matrix, KernelSpec};
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

/// Hyperparameters shared by the alignment losses and the diversity kernels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the shape term in DILATE; `1 - alpha` weights the temporal term.
    pub alpha: f64,
    /// Soft-min smoothing.
    pub gamma: f64,
    /// Quality/diversity tradeoff.
    pub lambda: f64,
    /// Bandwidth of the PSD timestep kernel.
    pub sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 0.01,
            lambda: 1.0,
            sigma: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Selects the per-pair loss used for training and evaluation reductions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseLoss {
    Mse,
    Dilate,
}

impl std::str::FromStr for BaseLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(BaseLoss::Mse),
            "dilate" => Ok(BaseLoss::Dilate),
            other => Err(Error::Config(format!("unknown loss '{other}' (mse|dilate)"))),
        }
    }
}

impl std::fmt::Display for BaseLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaseLoss::Mse => "mse",
            BaseLoss::Dilate => "dilate",
        })
    }
}

/// A loss value with its gradient with respect to the prediction (trajectory layout).
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

pub fn mse_loss(yhat: &Trajectory, y: &Trajectory) -> Result<f64> {
    Ok(mse_loss_grad(yhat, y)?.value)
}

pub fn mse_loss_grad(yhat: &Trajectory, y: &Trajectory) -> Result<LossGrad> {
    yhat.same_shape(y)?;
    let n = yhat.values().len() as f64;
    let diff: Vec<f64> = yhat.values().iter().zip(y.values()).map(|(a, b)| a - b).collect();
    Ok(LossGrad {
        value: diff.iter().map(|d| d * d).sum::<f64>() / n,
        grad: diff.iter().map(|d| 2.0 * d / n).collect(),
    })
}

/// DILATE value split into its shape (soft-DTW) and temporal (smooth TDI) parts.
#[derive(Clone, Copy, Debug)]
pub struct DilateParts {
    pub shape: f64,
    pub temporal: f64,
    pub total: f64,
}

pub(crate) struct DilateFull {
    pub parts: DilateParts,
    pub grad_yhat: Vec<f64>,
    pub grad_y: Vec<f64>,
}

pub(crate) fn dilate_full(yhat: &Trajectory, y: &Trajectory, cfg: &LossConfig) -> Result<DilateFull> {
    yhat.same_shape(y)?;
    let delta = cost_matrix_sqeuclid(yhat, y)?;
    let omega = omega_dissimilarity(yhat.len());
    let t = soft_tdi_grad(&delta, &omega, cfg.gamma)?;
    let shape = t.alignment.dtw_gamma;
    let grad_delta = &t.alignment.expected_alignment * cfg.alpha + &t.grad_delta * (1.0 - cfg.alpha);
    let (grad_yhat, grad_y) = sqeuclid_chain(yhat, y, &grad_delta);
    Ok(DilateFull {
        parts: DilateParts {
            shape,
            temporal: t.tdi,
            total: cfg.alpha * shape + (1.0 - cfg.alpha) * t.tdi,
        },
        grad_yhat,
        grad_y,
    })
}

/// `alpha * soft-DTW + (1 - alpha) * smooth TDI` with the squared-Euclidean cost and
/// the off-diagonal penalty matrix.
pub fn dilate_loss(yhat: &Trajectory, y: &Trajectory, cfg: &LossConfig) -> Result<f64> {
    Ok(dilate_full(yhat, y, cfg)?.parts.total)
}

pub fn dilate_parts(yhat: &Trajectory, y: &Trajectory, cfg: &LossConfig) -> Result<DilateParts> {
    Ok(dilate_full(yhat, y, cfg)?.parts)
}

pub fn dilate_loss_grad(yhat: &Trajectory, y: &Trajectory, cfg: &LossConfig) -> Result<LossGrad> {
    let full = dilate_full(yhat, y, cfg)?;
    Ok(LossGrad {
        value: full.parts.total,
        grad: full.grad_yhat,
    })
}

pub fn base_loss(base: BaseLoss, yhat: &Trajectory, y: &Trajectory, cfg: &LossConfig) -> Result<f64> {
    match base {
        BaseLoss::Mse => mse_loss(yhat, y),
        BaseLoss::Dilate => dilate_loss(yhat, y, cfg),
    }
}

pub fn base_loss_grad(
    base: BaseLoss,
    yhat: &Trajectory,
    y: &Trajectory,
    cfg: &LossConfig,
) -> Result<LossGrad> {
    match base {
        BaseLoss::Mse => mse_loss_grad(yhat, y),
        BaseLoss::Dilate => dilate_loss_grad(yhat, y, cfg),
    }
}

/// Best-sample loss: the minimum base loss over `samples`.
#[derive(Clone, Debug)]
pub struct VarietyLoss {
    pub value: f64,
    pub argmin: usize,
    /// Gradient for the argmin sample; every other sample receives zero.
    pub grad: Vec<f64>,
}

pub fn variety_loss(
    samples: &[Trajectory],
    y: &Trajectory,
    base: BaseLoss,
    cfg: &LossConfig,
) -> Result<VarietyLoss> {
    if samples.is_empty() {
        return Err(Error::Empty("variety loss samples"));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in samples.iter().enumerate() {
        let v = base_loss(base, s, y, cfg)?;
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    let (argmin, _) = best.expect("nonempty");
    let lg = base_loss_grad(base, &samples[argmin], y, cfg)?;
    Ok(VarietyLoss {
        value: lg.value,
        argmin,
        grad: lg.grad,
    })
}

/// Components of the combined quality + diversity objective.
#[derive(Clone, Copy, Debug)]
pub struct StripeObjective {
    pub quality: f64,
    pub diversity: f64,
    pub total: f64,
}

/// DILATE quality of the deterministic prediction plus `lambda` times the DPP
/// diversity loss over the diversified samples.
pub fn stripe_objective(
    yhat0: &Trajectory,
    y0: &Trajectory,
    samples: &[Trajectory],
    kernel: &KernelSpec,
    cfg: &LossConfig,
) -> Result<StripeObjective> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("diversity samples"));
    }
    let quality = dilate_loss(yhat0, y0, cfg)?;
    let diversity = diversity_loss(&kernel_matrix(samples, kernel, cfg)?)?;
    Ok(StripeObjective {
        quality,
        diversity,
        total: quality + cfg.lambda * diversity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{brute_force_alignment, soft_dtw};
    use crate::dpp::KernelKind;
    use proptest::prelude::*;

    fn s(v: &[f64]) -> Trajectory {
        Trajectory::from_series(v.to_vec()).unwrap()
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&s(&[1.0, 2.0]), &s(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(mse_loss(&s(&[1.0, 1.0]), &s(&[0.0, 0.0])).unwrap(), 1.0);
        assert_eq!(mse_loss(&s(&[0.0, 2.0]), &s(&[0.0, 0.0])).unwrap(), 2.0);
        assert!(mse_loss(&s(&[0.0]), &s(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn dilate_single_step() {
        let cfg = LossConfig { alpha: 0.3, ..Default::default() };
        let v = dilate_loss(&s(&[1.5]), &s(&[0.5]), &cfg).unwrap();
        assert!((v - 0.3).abs() < 1e-15);
    }

    #[test]
    fn dilate_on_identical_pair_matches_enumeration() {
        let y = s(&[0.2, 0.9]);
        let cfg = LossConfig { alpha: 0.5, gamma: 1.0, ..Default::default() };
        let delta = cost_matrix_sqeuclid(&y, &y).unwrap();
        let bf = brute_force_alignment(&delta, &omega_dissimilarity(2), 1.0).unwrap();
        let want = 0.5 * bf.dtw_gamma + 0.5 * bf.tdi_gamma;
        assert!((dilate_loss(&y, &y, &cfg).unwrap() - want).abs() < 1e-12);
        // Three paths with costs {0, 0.49, 0.49}.
        let e = (-0.49f64).exp();
        let dtw = -(1.0 + 2.0 * e).ln();
        let tdi = 2.0 * e * 0.25 / (1.0 + 2.0 * e);
        assert!((want - (0.5 * dtw + 0.5 * tdi)).abs() < 1e-12);
    }

    #[test]
    fn dilate_alpha_one_is_soft_dtw_of_self_cost() {
        let y = s(&[0.1, -0.4, 0.7, 0.3]);
        let cfg = LossConfig { alpha: 1.0, gamma: 0.1, ..Default::default() };
        let want = soft_dtw(&cost_matrix_sqeuclid(&y, &y).unwrap(), 0.1).unwrap().dtw_gamma;
        assert!((dilate_loss(&y, &y, &cfg).unwrap() - want).abs() < 1e-14);
    }

    fn fd_check(f: impl Fn(&Trajectory) -> f64, y: &Trajectory, grad: &[f64], tol: f64) {
        let eps = 1e-5;
        for k in 0..y.values().len() {
            let mut p = y.clone();
            p.values_mut()[k] += eps;
            let mut m = y.clone();
            m.values_mut()[k] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            let err = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-3);
            assert!(err <= tol, "entry {k}: fd {fd} vs analytic {}", grad[k]);
        }
    }

    #[test]
    fn dilate_gradient_matches_finite_differences() {
        let yhat = s(&[0.1, 0.5, 0.2, 0.9, 0.4]);
        let y = s(&[0.0, 0.3, 0.8, 0.7, 0.1]);
        for gamma in [0.01, 0.1, 1.0] {
            let cfg = LossConfig { gamma, ..Default::default() };
            let g = dilate_loss_grad(&yhat, &y, &cfg).unwrap();
            fd_check(|t| dilate_loss(t, &y, &cfg).unwrap(), &yhat, &g.grad, 1e-4);
        }
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let yhat = s(&[0.1, 0.5, 0.2]);
        let y = s(&[0.0, 0.3, 0.8]);
        let g = mse_loss_grad(&yhat, &y).unwrap();
        fd_check(|t| mse_loss(t, &y).unwrap(), &yhat, &g.grad, 1e-6);
    }

    #[test]
    fn variety_examples() {
        let cfg = LossConfig::default();
        let y = s(&[0.0, 0.0, 0.0]);
        let one = variety_loss(std::slice::from_ref(&y), &y, BaseLoss::Mse, &cfg).unwrap();
        assert_eq!(one.value, 0.0);
        let two = variety_loss(&[y.shifted(1.0), y.clone()], &y, BaseLoss::Mse, &cfg).unwrap();
        assert_eq!((two.value, two.argmin), (0.0, 1));
        let far = variety_loss(&[y.shifted(1.0), y.shifted(2.0)], &y, BaseLoss::Mse, &cfg).unwrap();
        assert_eq!(far.value, 1.0);
        assert!(variety_loss(&[], &y, BaseLoss::Mse, &cfg).is_err());
    }

    #[test]
    fn stripe_objective_structure() {
        let y0 = s(&[0.0, 0.5, 1.0]);
        let yhat0 = s(&[0.1, 0.4, 0.8]);
        let samples = vec![y0.clone(); 4];
        let kernel = KernelSpec::new(KernelKind::Shape);
        let mut cfg = LossConfig { lambda: 0.0, ..Default::default() };
        let q = stripe_objective(&yhat0, &y0, &samples, &kernel, &cfg).unwrap();
        assert_eq!(q.total, dilate_loss(&yhat0, &y0, &cfg).unwrap());
        // Identical normalized items: rank-1 all-ones kernel, eigenvalue N.
        assert!((q.diversity + 4.0 / 5.0).abs() < 1e-12);
        cfg.lambda = 2.5;
        let r = stripe_objective(&yhat0, &y0, &samples, &kernel, &cfg).unwrap();
        assert!((r.total - (r.quality + 2.5 * r.diversity)).abs() < 1e-15);
        assert_eq!(r.diversity, q.diversity);
    }

    proptest! {
        #[test]
        fn variety_is_at_most_each_member(
            base in prop::collection::vec(-1.0f64..1.0, 6),
            offsets in prop::collection::vec(-1.0f64..1.0, 1..5),
        ) {
            let y = s(&base);
            let samples: Vec<_> = offsets.iter().map(|o| y.shifted(*o)).collect();
            let cfg = LossConfig { gamma: 0.1, ..Default::default() };
            for b in [BaseLoss::Mse, BaseLoss::Dilate] {
                let v = variety_loss(&samples, &y, b, &cfg).unwrap().value;
                for smp in &samples {
                    prop_assert!(v <= base_loss(b, smp, &y, &cfg).unwrap() + 1e-15);
                }
            }
        }

        #[test]
        fn losses_finite(
            a in prop::collection::vec(-5.0f64..5.0, 8),
            b in prop::collection::vec(-5.0f64..5.0, 8),
        ) {
            let cfg = LossConfig::default();
            let g = dilate_loss_grad(&s(&a), &s(&b), &cfg).unwrap();
            prop_assert!(g.value.is_finite());
            prop_assert!(g.grad.iter().all(|v| v.is_finite()));
        }
    }
}
