//! Proper scoring rules for hold-out validation: RMSPE, the closed-form
//! Gaussian CRPS, and the 95% central interval score.

use crate::error::{Error, Result};

/// 97.5% standard normal quantile used for the 95% central interval.
pub const Z_CRIT_95: f64 = 1.959964;

/// Interval score coverage level.
pub const ALPHA_95: f64 = 0.05;

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

/// Root mean squared prediction error.
pub fn rmspe(pred_means: &[f64], truth: &[f64]) -> Result<f64> {
    if pred_means.len() != truth.len() || pred_means.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "rmspe needs equal nonempty lengths, got {} and {}",
            pred_means.len(),
            truth.len()
        )));
    }
    let mse = pred_means
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred_means.len() as f64;
    Ok(mse.sqrt())
}

/// Continuous ranked probability score of the Gaussian predictive
/// `N(mu, sd^2)` against the realized value `z`:
/// `sd * [ zt (2 Phi(zt) - 1) + 2 phi(zt) - 1/sqrt(pi) ]` with `zt = (z - mu)/sd`.
pub fn crps_gaussian(mu: f64, sd: f64, z: f64) -> Result<f64> {
    if !(sd > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "crps requires sd > 0, got {sd}"
        )));
    }
    let zt = (z - mu) / sd;
    Ok(sd * (zt * (2.0 * normal_cdf(zt) - 1.0) + 2.0 * normal_pdf(zt) - 1.0 / std::f64::consts::PI.sqrt()))
}

/// 95% central interval score: `(u - l) + (2/alpha) (l - z)_+ + (2/alpha) (z - u)_+`
/// with `(l, u) = mu -/+ 1.959964 sd` and `alpha = 0.05`.
pub fn interval_score_95(mu: f64, sd: f64, z: f64) -> Result<f64> {
    if !(sd > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "interval score requires sd > 0, got {sd}"
        )));
    }
    let l = mu - Z_CRIT_95 * sd;
    let u = mu + Z_CRIT_95 * sd;
    let below = (l - z).max(0.0);
    let above = (z - u).max(0.0);
    Ok((u - l) + (2.0 / ALPHA_95) * (below + above))
}

/// Unweighted mean of a per-observation score over a validation set.
pub fn mean_score<F>(mus: &[f64], sds: &[f64], zs: &[f64], score: F) -> Result<f64>
where
    F: Fn(f64, f64, f64) -> Result<f64>,
{
    if mus.len() != sds.len() || mus.len() != zs.len() || mus.is_empty() {
        return Err(Error::InvalidArgument(
            "mean_score needs equal nonempty lengths".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..mus.len() {
        total += score(mus[i], sds[i], zs[i])?;
    }
    Ok(total / mus.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, stream_rng};
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn rmspe_cases() {
        assert_eq!(rmspe(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_relative_eq!(
            rmspe(&[0.0, 0.0], &[3.0, 4.0]).unwrap(),
            (25.0f64 / 2.0).sqrt(),
            max_relative = 1e-12
        );
        // invariant under joint permutation
        let a = rmspe(&[1.0, -2.0, 0.5], &[0.0, 1.0, 2.0]).unwrap();
        let b = rmspe(&[0.5, 1.0, -2.0], &[2.0, 0.0, 1.0]).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-15);
        assert!(rmspe(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn crps_at_center_matches_closed_form() {
        // mu = z, sd = 1: 2 phi(0) - 1/sqrt(pi) = (sqrt(2) - 1)/sqrt(pi)
        let expect = (std::f64::consts::SQRT_2 - 1.0) / std::f64::consts::PI.sqrt();
        assert_relative_eq!(crps_gaussian(0.0, 1.0, 0.0).unwrap(), expect, epsilon = 1e-12);
        assert_relative_eq!(expect, 0.23370055, epsilon = 1e-8);
    }

    #[test]
    fn crps_point_mass_limit() {
        for &z in &[0.7, -1.3, 2.0] {
            let c = crps_gaussian(0.0, 1e-8, z).unwrap();
            assert!((c - z.abs()).abs() < 1e-6, "crps {c} vs |z| {}", z.abs());
        }
    }

    #[test]
    fn crps_scale_equivariance() {
        let mut rng = stream_rng(5, 0);
        for _ in 0..50 {
            let mu: f64 = rng.gen_range(-2.0..2.0);
            let sd: f64 = rng.gen_range(0.1..3.0);
            let z: f64 = rng.gen_range(-4.0..4.0);
            let a: f64 = rng.gen_range(0.1..10.0);
            let lhs = crps_gaussian(a * mu, a * sd, a * z).unwrap();
            let rhs = a * crps_gaussian(mu, sd, z).unwrap();
            assert_relative_eq!(lhs, rhs, max_relative = 1e-10);
        }
    }

    #[test]
    fn crps_matches_monte_carlo() {
        // CRPS(F, z) = E|X - z| - 0.5 E|X - X'|, antithetic sampling.
        let mut rng = stream_rng(11, 3);
        for _ in 0..5 {
            let mu: f64 = rng.gen_range(-1.0..1.0);
            let sd: f64 = rng.gen_range(0.2..1.0);
            let z: f64 = mu + sd * rng.gen_range(-2.0..2.0);
            let n = 200_000;
            let mut e_abs = 0.0;
            let mut e_pair = 0.0;
            for _ in 0..n {
                let u = standard_normal(&mut rng);
                let v = standard_normal(&mut rng);
                let x1 = mu + sd * u;
                let x2 = mu - sd * u;
                let x3 = mu + sd * v;
                e_abs += 0.5 * ((x1 - z).abs() + (x2 - z).abs());
                e_pair += 0.5 * ((x1 - x3).abs() + (x2 - x3).abs());
            }
            let mc = e_abs / n as f64 - 0.5 * e_pair / n as f64;
            let exact = crps_gaussian(mu, sd, z).unwrap();
            assert!(
                (mc - exact).abs() < 3e-3,
                "mc {mc} vs exact {exact} (mu={mu}, sd={sd}, z={z})"
            );
        }
    }

    #[test]
    fn interval_score_inside_is_width() {
        let sd = 0.7;
        let s = interval_score_95(1.0, sd, 1.2).unwrap();
        assert_relative_eq!(s, 2.0 * Z_CRIT_95 * sd, epsilon = 1e-12);
    }

    #[test]
    fn interval_score_hand_computed_penalty() {
        // mu = 0, sd = 1, z = 3: width 3.919928 plus 40 * (3 - 1.959964)
        let s = interval_score_95(0.0, 1.0, 3.0).unwrap();
        assert_relative_eq!(s, 3.919928 + 40.0 * (3.0 - 1.959964), epsilon = 1e-9);
        assert_relative_eq!(s, 45.521368, epsilon = 1e-6);
    }

    #[test]
    fn interval_score_propriety_spot_check() {
        // The true predictive should beat a perturbed sd in expectation.
        let mut rng = stream_rng(17, 0);
        let (mu, sd) = (0.3, 1.1);
        let n = 100_000;
        let (mut true_total, mut narrow_total, mut wide_total) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let z = mu + sd * standard_normal(&mut rng);
            true_total += interval_score_95(mu, sd, z).unwrap();
            narrow_total += interval_score_95(mu, 0.6 * sd, z).unwrap();
            wide_total += interval_score_95(mu, 1.7 * sd, z).unwrap();
        }
        assert!(true_total < narrow_total);
        assert!(true_total < wide_total);
    }

    #[test]
    fn scores_reject_bad_sd() {
        assert!(crps_gaussian(0.0, 0.0, 1.0).is_err());
        assert!(interval_score_95(0.0, -1.0, 1.0).is_err());
    }
}
