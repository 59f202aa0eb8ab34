//! Forward corruption processes, the log-normal noise-level sampler,
//! prediction-target conversions and the three losses.
//!
//! The primary process is variance-exploding: `x_t = x0 + sigma_t * eps`
//! with `ln(sigma_t) ~ N(p_mean, p_std^2)`. Under it the velocity target
//! equals the injected noise, so the V-loss and eps-loss coincide exactly
//! and differ from the x-loss by a `sigma_t^2` reweighting. A
//! variance-preserving process is kept for ablations.

use crate::error::{TensorError, TensorResult};
use crate::rng::randn;
use crate::tensor::Tensor;
use crate::transforms::CsiImage;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Log-normal noise schedule parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

/// Sampling-time clamp on sigma_t. The log-normal tail can produce levels
/// far outside any operating SNR; the clip probability at the default
/// schedule is below 1e-4.
pub const SIGMA_CLAMP: (f64, f64) = (1e-4, 200.0);

/// Network output parameterization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionObjective {
    XPred,
    EpsPred,
    VPred,
}

/// Training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    XLoss,
    EpsLoss,
    VLoss,
}

/// Noise level attached to a corrupted sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CorruptionKind {
    Ve { sigma_t: f64 },
    Vp { alpha_bar: f64 },
}

/// A corrupted image tied to its clean source and noise draw.
#[derive(Clone, Debug)]
pub struct CorruptionSample {
    pub x0: CsiImage,
    pub x_t: CsiImage,
    pub eps: Tensor,
    pub kind: CorruptionKind,
}

/// Draw `sigma_t = exp(z)`, `z ~ N(p_mean, p_std^2)`, clamped to
/// [`SIGMA_CLAMP`].
pub fn sample_sigma(params: &ScheduleParams, rng: &mut ChaCha8Rng) -> f64 {
    let z = params.p_mean + params.p_std * randn(rng);
    z.exp().clamp(SIGMA_CLAMP.0, SIGMA_CLAMP.1)
}

/// Unit-variance Gaussian noise tensor.
pub fn sample_eps(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| randn(rng))
}

/// Variance-exploding corruption: `x_t = x0 + sigma_t * eps`.
pub fn ve_corrupt(x0: &CsiImage, sigma_t: f64, eps: &Tensor) -> TensorResult<CorruptionSample> {
    if sigma_t < 0.0 {
        return Err(TensorError::Domain {
            op: "ve_corrupt",
            reason: format!("sigma_t must be >= 0, got {sigma_t}"),
        });
    }
    let x_t = x0.data.add(&eps.scale(sigma_t))?;
    Ok(CorruptionSample {
        x0: x0.clone(),
        x_t: CsiImage::from_tensor(x_t)?,
        eps: eps.clone(),
        kind: CorruptionKind::Ve { sigma_t },
    })
}

/// Variance-preserving corruption:
/// `x_t = sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps`.
pub fn vp_corrupt(x0: &CsiImage, alpha_bar: f64, eps: &Tensor) -> TensorResult<CorruptionSample> {
    if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
        return Err(TensorError::Domain {
            op: "vp_corrupt",
            reason: format!("alpha_bar must lie in (0, 1], got {alpha_bar}"),
        });
    }
    let x_t = x0
        .data
        .scale(alpha_bar.sqrt())
        .add(&eps.scale((1.0 - alpha_bar).sqrt()))?;
    Ok(CorruptionSample {
        x0: x0.clone(),
        x_t: CsiImage::from_tensor(x_t)?,
        eps: eps.clone(),
        kind: CorruptionKind::Vp { alpha_bar },
    })
}

/// Cosine alpha-bar schedule used by the VP ablation, `alpha(s) = cos^2(pi*s/2)`
/// for `s` in (0, 1).
pub fn vp_alpha_bar(s: f64) -> f64 {
    let c = (std::f64::consts::FRAC_PI_2 * s).cos();
    (c * c).clamp(f64::MIN_POSITIVE, 1.0)
}

/// VP conditioning level for a known noise variance at inference:
/// the variance-matching choice `alpha_bar = 1 / (1 + sigma^2)`.
pub fn vp_alpha_for_noise_var(noise_var: f64) -> f64 {
    1.0 / (1.0 + noise_var)
}

/// Derived targets of an x-prediction under VE corruption.
#[derive(Clone, Debug)]
pub struct DerivedTargets {
    pub v_hat: Tensor,
    pub eps_hat: Tensor,
    pub score_hat: Tensor,
}

/// Convert a clean-image prediction into velocity, noise and score targets:
/// `v = (x_t - x0_hat)/sigma_t`, `eps = v` (VE identity), `score = -eps/sigma_t`.
pub fn targets_from_xpred(
    x_t: &CsiImage,
    x0_hat: &CsiImage,
    sigma_t: f64,
) -> TensorResult<DerivedTargets> {
    if sigma_t == 0.0 {
        return Err(TensorError::Domain {
            op: "targets_from_xpred",
            reason: "sigma_t == 0 makes the velocity target singular".into(),
        });
    }
    let v_hat = x_t.data.sub(&x0_hat.data)?.scale(1.0 / sigma_t);
    let eps_hat = v_hat.clone();
    let score_hat = eps_hat.scale(-1.0 / sigma_t);
    Ok(DerivedTargets {
        v_hat,
        eps_hat,
        score_hat,
    })
}

/// Mean-squared loss (over all elements) of a clean-image prediction on a
/// corruption sample. V- and eps-losses require a VE sample with
/// `sigma_t > 0`; the x-loss works for either process.
pub fn compute_loss(
    kind: LossKind,
    sample: &CorruptionSample,
    x0_hat: &CsiImage,
) -> TensorResult<f64> {
    match kind {
        LossKind::XLoss => {
            let d = x0_hat.data.sub(&sample.x0.data)?;
            Ok(d.sq_norm() / d.len() as f64)
        }
        LossKind::VLoss | LossKind::EpsLoss => {
            let CorruptionKind::Ve { sigma_t } = sample.kind else {
                return Err(TensorError::Domain {
                    op: "compute_loss",
                    reason: "v/eps losses are defined on VE samples".into(),
                });
            };
            if sigma_t == 0.0 {
                return Err(TensorError::Domain {
                    op: "compute_loss",
                    reason: "sigma_t == 0 makes the v/eps losses singular".into(),
                });
            }
            // v_hat = eps_hat = (x_t - x0_hat)/sigma_t, so the two losses
            // are the same expression.
            let targets = targets_from_xpred(&sample.x_t, x0_hat, sigma_t)?;
            let pred = match kind {
                LossKind::VLoss => &targets.v_hat,
                _ => &targets.eps_hat,
            };
            let d = pred.sub(&sample.eps)?;
            Ok(d.sq_norm() / d.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn image(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> CsiImage {
        CsiImage::from_tensor(sample_eps(&[2, rows, cols], rng)).unwrap()
    }

    #[test]
    fn sigma_degenerate_schedule() {
        let params = ScheduleParams {
            p_mean: -0.9,
            p_std: 1e-300,
        };
        let mut rng = stream_rng(0, 0);
        for _ in 0..32 {
            let s = sample_sigma(&params, &mut rng);
            assert!((s - (-0.9f64).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_lognormal_moments_and_median() {
        let params = ScheduleParams::default();
        let mut rng = stream_rng(1, 0);
        let n = 100_000;
        let mut logs: Vec<f64> = (0..n)
            .map(|_| sample_sigma(&params, &mut rng).ln())
            .collect();
        let mean = logs.iter().sum::<f64>() / n as f64;
        let std =
            (logs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
        assert!((mean + 1.2).abs() < 0.02, "ln-mean {mean}");
        assert!((std - 1.2).abs() < 0.02, "ln-std {std}");
        logs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = logs[n / 2].exp();
        let expect = (-1.2f64).exp();
        assert!(
            (median - expect).abs() < 0.02 * expect,
            "median {median} vs {expect}"
        );
    }

    #[test]
    fn ve_corrupt_edge_cases() {
        let mut rng = stream_rng(2, 0);
        let x0 = image(4, 4, &mut rng);
        let eps = sample_eps(&[2, 4, 4], &mut rng);
        let s = ve_corrupt(&x0, 0.0, &eps).unwrap();
        assert_eq!(s.x_t.data, x0.data);
        let zero_eps = Tensor::zeros(&[2, 4, 4]);
        let s = ve_corrupt(&x0, 1.7, &zero_eps).unwrap();
        assert_eq!(s.x_t.data, x0.data);
        let zero_x0 = CsiImage::zeros(4, 4);
        let s = ve_corrupt(&zero_x0, 2.0, &eps).unwrap();
        assert_eq!(s.x_t.data, eps.scale(2.0));
    }

    #[test]
    fn ve_composition_noise_adds_in_quadrature() {
        // corrupting twice with levels a then b behaves like one level
        // sqrt(a^2 + b^2): Monte Carlo check within 3%
        let (a, b) = (0.6, 1.1);
        let mut rng = stream_rng(3, 0);
        let x0 = CsiImage::zeros(4, 4);
        let n = 30_000;
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..n / 32 {
            let e1 = sample_eps(&[2, 4, 4], &mut rng);
            let e2 = sample_eps(&[2, 4, 4], &mut rng);
            let s1 = ve_corrupt(&x0, a, &e1).unwrap();
            let s2 = ve_corrupt(&CsiImage::from_tensor(s1.x_t.data.clone()).unwrap(), b, &e2)
                .unwrap();
            total += s2.x_t.data.sq_norm();
            count += s2.x_t.data.len();
        }
        let std = (total / count as f64).sqrt();
        let expect = (a * a + b * b as f64).sqrt();
        assert!((std - expect).abs() < 0.03 * expect, "std {std} vs {expect}");
    }

    #[test]
    fn vp_corrupt_limits_and_domain() {
        let mut rng = stream_rng(4, 0);
        let x0 = image(4, 4, &mut rng);
        let eps = sample_eps(&[2, 4, 4], &mut rng);
        let s = vp_corrupt(&x0, 1.0, &eps).unwrap();
        assert_eq!(s.x_t.data, x0.data);
        let s = vp_corrupt(&x0, 1e-12, &eps).unwrap();
        let diff: f64 = s
            .x_t
            .data
            .data()
            .iter()
            .zip(eps.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-5);
        assert!(vp_corrupt(&x0, 0.0, &eps).is_err());
        assert!(vp_corrupt(&x0, 1.5, &eps).is_err());
    }

    #[test]
    fn vp_variance_preservation_monte_carlo() {
        let mut rng = stream_rng(5, 0);
        let x0 = image(4, 4, &mut rng);
        let alpha = 0.37;
        let dim = x0.data.len() as f64;
        let n = 20_000;
        let mut total = 0.0;
        for _ in 0..n {
            let eps = sample_eps(&[2, 4, 4], &mut rng);
            total += vp_corrupt(&x0, alpha, &eps).unwrap().x_t.data.sq_norm();
        }
        let mean = total / n as f64;
        let expect = alpha * x0.data.sq_norm() + (1.0 - alpha) * dim;
        assert!((mean - expect).abs() < 0.03 * expect, "{mean} vs {expect}");
    }

    #[test]
    fn vp_alpha_schedule_range() {
        for s in [1e-6, 0.25, 0.5, 0.9, 1.0 - 1e-9] {
            let a = vp_alpha_bar(s);
            assert!(a > 0.0 && a <= 1.0, "alpha({s}) = {a}");
        }
        assert!((vp_alpha_for_noise_var(1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn derived_targets_identities() {
        let mut rng = stream_rng(6, 0);
        let x0 = image(4, 4, &mut rng);
        let eps = sample_eps(&[2, 4, 4], &mut rng);
        let sigma = 0.8;
        let s = ve_corrupt(&x0, sigma, &eps).unwrap();

        // perfect prediction recovers eps exactly
        let t = targets_from_xpred(&s.x_t, &x0, sigma).unwrap();
        let max_diff: f64 = t
            .eps_hat
            .data()
            .iter()
            .zip(eps.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-12);

        // x0_hat == x_t makes every target zero
        let t0 = targets_from_xpred(&s.x_t, &s.x_t, sigma).unwrap();
        assert!(t0.v_hat.sq_norm() == 0.0 && t0.score_hat.sq_norm() == 0.0);

        // sigma*score + eps_hat == 0 elementwise (to roundoff)
        let resid = t.score_hat.scale(sigma).add(&t.eps_hat).unwrap();
        let scale_ref = t.eps_hat.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let max_resid = resid.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_resid <= 1e-14 * scale_ref.max(1.0), "resid {max_resid}");

        // x0 reconstruction: x_t - sigma*eps_hat returns x0_hat
        let recon = s.x_t.data.sub(&t.eps_hat.scale(sigma)).unwrap();
        let max_diff: f64 = recon
            .data()
            .iter()
            .zip(x0.data.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-12);

        assert!(targets_from_xpred(&s.x_t, &x0, 0.0).is_err());
    }

    #[test]
    fn loss_equivalence_ledger() {
        // For any VE sample and any prediction: v-loss == eps-loss exactly
        // and sigma^2 * v-loss == x-loss to 1e-10.
        let mut rng = stream_rng(7, 0);
        for trial in 0..16 {
            let x0 = image(4, 2, &mut rng);
            let eps = sample_eps(&[2, 4, 2], &mut rng);
            let sigma = sample_sigma(&ScheduleParams::default(), &mut rng);
            let s = ve_corrupt(&x0, sigma, &eps).unwrap();
            let x0_hat = image(4, 2, &mut rng);
            let v = compute_loss(LossKind::VLoss, &s, &x0_hat).unwrap();
            let e = compute_loss(LossKind::EpsLoss, &s, &x0_hat).unwrap();
            let x = compute_loss(LossKind::XLoss, &s, &x0_hat).unwrap();
            assert_eq!(v, e, "trial {trial}");
            assert!(
                (sigma * sigma * v - x).abs() <= 1e-10 * x.max(1.0),
                "trial {trial}: s^2 v = {} vs x = {x}",
                sigma * sigma * v
            );
        }
    }

    #[test]
    fn loss_zero_for_perfect_prediction_and_hand_case() {
        // eps = 1, sigma = 1, x0 = 0: x_t = 1; predicting x0_hat = x_t
        // gives V-loss ||0 - 1||^2 = 1 (mean over elements)
        let x0 = CsiImage::zeros(1, 1);
        let eps = Tensor::full(&[2, 1, 1], 1.0);
        let s = ve_corrupt(&x0, 1.0, &eps).unwrap();
        for kind in [LossKind::VLoss, LossKind::EpsLoss, LossKind::XLoss] {
            assert_eq!(compute_loss(kind, &s, &x0).unwrap(), 0.0);
        }
        let v = compute_loss(LossKind::VLoss, &s, &s.x_t.clone()).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn vp_sample_rejects_v_loss() {
        let mut rng = stream_rng(8, 0);
        let x0 = image(2, 2, &mut rng);
        let eps = sample_eps(&[2, 2, 2], &mut rng);
        let s = vp_corrupt(&x0, 0.5, &eps).unwrap();
        assert!(compute_loss(LossKind::VLoss, &s, &x0).is_err());
        assert!(compute_loss(LossKind::XLoss, &s, &x0).is_ok());
    }
}
