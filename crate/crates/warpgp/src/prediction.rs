//! Kriging at unobserved space-time points: neighbor-based prediction with
//! mean and variance of the noiseless process, plus the dense exact oracle.
//!
//! The conditional moments are
//! `E(Y* | Z) = x*' beta + S_{*,N} S_{N,N}^-1 (Z_N - X_N beta)` and
//! `Var(Y* | Z) = sigma2 - S_{*,N} S_{N,N}^-1 S_{N,*}`, where `S_{N,N}`
//! includes the nugget (observations are noisy) and the cross-covariances do
//! not (the target is the noiseless `Y`).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::NonstationaryCovariance;
use crate::data::{Dataset, SpaceTimePoint};
use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::vecchia::NeighborDomain;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub point: SpaceTimePoint,
    pub mean: f64,
    /// Predictive variance of the noiseless process; in `[0, sigma2]`.
    pub variance: f64,
    /// Original dataset row indices of the conditioning set, nearest first.
    pub neighbor_indices: Vec<usize>,
}

/// Covariate rows for targets; empty (q = 0) when the model has no trend.
#[derive(Debug, Clone)]
pub struct TargetSet {
    pub points: Vec<SpaceTimePoint>,
    pub x: DMatrix<f64>,
}

impl TargetSet {
    pub fn new(points: Vec<SpaceTimePoint>, x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != points.len() {
            return Err(Error::InvalidArgument(
                "target covariate rows must match target count".into(),
            ));
        }
        Ok(Self { points, x })
    }

    pub fn without_covariates(points: Vec<SpaceTimePoint>) -> Self {
        let n = points.len();
        Self {
            points,
            x: DMatrix::zeros(n, 0),
        }
    }
}

/// Neighbor-based kriging: each target conditions on its `m` nearest
/// observations in the chosen domain's scaled metric. Targets are
/// independent; output order matches input order.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    cov: &NonstationaryCovariance,
    beta: &[f64],
    data: &Dataset,
    targets: &TargetSet,
    domain: NeighborDomain,
    m: usize,
    time_scale: f64,
    predict_noisy: bool,
) -> Result<Vec<Prediction>> {
    let n = data.n();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!(
            "m must lie in 1..=n = {n}, got {m}"
        )));
    }
    if data.q() != targets.x.ncols() {
        return Err(Error::Incompatible(format!(
            "model was fitted with q = {} covariates but targets carry {}",
            data.q(),
            targets.x.ncols()
        )));
    }
    if beta.len() != data.q() {
        return Err(Error::Incompatible(format!(
            "beta has length {} but q = {}",
            beta.len(),
            data.q()
        )));
    }

    let warped_obs = cov.warp.warp_points(&data.points);
    let warped_targets = cov.warp.warp_points(&targets.points);

    let obs_coords: Vec<[f64; 3]> = match domain {
        NeighborDomain::G => data.points.iter().map(|p| p.scaled(time_scale)).collect(),
        NeighborDomain::D => warped_obs.iter().map(|p| p.scaled(time_scale)).collect(),
    };
    let target_coords: Vec<[f64; 3]> = match domain {
        NeighborDomain::G => targets.points.iter().map(|p| p.scaled(time_scale)).collect(),
        NeighborDomain::D => warped_targets.iter().map(|p| p.scaled(time_scale)).collect(),
    };
    let tree = KdTree::bulk(&obs_coords);

    let beta_v = DVector::from_column_slice(beta);
    let sigma2 = cov.kernel.sigma2();
    let marginal = sigma2 + cov.tau2;

    (0..targets.points.len())
        .into_par_iter()
        .map(|ti| {
            let neighbors = tree.knn(target_coords[ti], m);
            let msize = neighbors.len();
            let mut kmat = DMatrix::zeros(msize, msize);
            for (i, &pi) in neighbors.iter().enumerate() {
                kmat[(i, i)] = marginal;
                for (j, &pj) in neighbors.iter().enumerate().take(i) {
                    let v = cov.kernel.eval_warped(&warped_obs[pi], &warped_obs[pj]);
                    kmat[(i, j)] = v;
                    kmat[(j, i)] = v;
                }
            }
            let cvec = DVector::from_iterator(
                msize,
                neighbors
                    .iter()
                    .map(|&pj| cov.kernel.eval_warped(&warped_targets[ti], &warped_obs[pj])),
            );
            let chol = kmat
                .cholesky()
                .ok_or(Error::SingularNeighborCovariance { index: ti })?;
            let weights = chol.solve(&cvec);

            let mut resid = DVector::zeros(msize);
            for (i, &pi) in neighbors.iter().enumerate() {
                let trend = if beta.is_empty() {
                    0.0
                } else {
                    data.x.row(pi).dot(&beta_v.transpose())
                };
                resid[i] = data.z[pi] - trend;
            }
            let target_trend = if beta.is_empty() {
                0.0
            } else {
                targets.x.row(ti).dot(&beta_v.transpose())
            };
            let mean = target_trend + weights.dot(&resid);
            let mut variance = sigma2 - weights.dot(&cvec);
            // Schur complements are nonnegative; clear roundoff residue.
            if variance < 0.0 {
                variance = 0.0;
            }
            if predict_noisy {
                variance += cov.tau2;
            }
            Ok(Prediction {
                point: targets.points[ti],
                mean,
                variance,
                neighbor_indices: neighbors,
            })
        })
        .collect()
}

/// Dense exact kriging using the full covariance; the oracle for
/// [`predict`], feasible at desk scale only.
pub fn kriging_exact(
    cov: &NonstationaryCovariance,
    beta: &[f64],
    data: &Dataset,
    targets: &TargetSet,
    predict_noisy: bool,
) -> Result<Vec<Prediction>> {
    let n = data.n();
    if data.q() != targets.x.ncols() || beta.len() != data.q() {
        return Err(Error::Incompatible(
            "covariate layout mismatch between data, targets, and beta".into(),
        ));
    }
    let warped_obs = cov.warp.warp_points(&data.points);
    let warped_targets = cov.warp.warp_points(&targets.points);
    let sigma = cov.cov_matrix_warped(&warped_obs, true);
    let chol = sigma
        .cholesky()
        .ok_or(Error::SingularNeighborCovariance { index: 0 })?;

    let beta_v = DVector::from_column_slice(beta);
    let resid = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let trend = if beta.is_empty() {
                0.0
            } else {
                data.x.row(i).dot(&beta_v.transpose())
            };
            data.z[i] - trend
        }),
    );
    let alpha = chol.solve(&resid);
    let sigma2 = cov.kernel.sigma2();

    Ok((0..targets.points.len())
        .map(|ti| {
            let cvec = DVector::from_iterator(
                n,
                warped_obs
                    .iter()
                    .map(|wo| cov.kernel.eval_warped(&warped_targets[ti], wo)),
            );
            let target_trend = if beta.is_empty() {
                0.0
            } else {
                targets.x.row(ti).dot(&beta_v.transpose())
            };
            let mean = target_trend + cvec.dot(&alpha);
            let solved = chol.solve(&cvec);
            let mut variance = sigma2 - cvec.dot(&solved);
            if variance < 0.0 {
                variance = 0.0;
            }
            if predict_noisy {
                variance += cov.tau2;
            }
            Prediction {
                point: targets.points[ti],
                mean,
                variance,
                neighbor_indices: (0..n).collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{Kernel, SeparableExpKernel};
    use crate::rng::{standard_normal, stream_rng};
    use crate::warp::{RbfWarpUnit, SpatialWarpUnit, TemporalWarp, WarpingMap};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn sep_cov(sigma2: f64, a_s: f64, a_t: f64, tau2: f64) -> NonstationaryCovariance {
        NonstationaryCovariance::stationary(
            Kernel::Separable(SeparableExpKernel { sigma2, a_s, a_t }),
            tau2,
        )
    }

    fn random_data(n: usize, seed: u64) -> Dataset {
        let mut rng = stream_rng(seed, 0);
        let points: Vec<SpaceTimePoint> = (0..n)
            .map(|_| {
                SpaceTimePoint::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                )
            })
            .collect();
        let z: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        Dataset::without_covariates(points, z).unwrap()
    }

    #[test]
    fn noiseless_kriging_interpolates() {
        let cov = sep_cov(1.0, 3.0, 2.0, 0.0);
        let data = random_data(40, 71);
        let targets = TargetSet::without_covariates(vec![data.points[7]]);
        for m in [1, 5, 40] {
            let preds = predict(
                &cov,
                &[],
                &data,
                &targets,
                NeighborDomain::G,
                m,
                1.0,
                false,
            )
            .unwrap();
            assert_relative_eq!(preds[0].mean, data.z[7], epsilon = 1e-8);
            assert!(preds[0].variance.abs() < 1e-10, "var {}", preds[0].variance);
        }
    }

    #[test]
    fn far_target_reverts_to_trend_and_prior_variance() {
        let cov = sep_cov(1.7, 3.0, 2.0, 0.2);
        let data = random_data(30, 72);
        let far = SpaceTimePoint::new(500.0, 500.0, 500.0);
        let targets = TargetSet::without_covariates(vec![far]);
        let preds = predict(
            &cov,
            &[],
            &data,
            &targets,
            NeighborDomain::G,
            30,
            1.0,
            false,
        )
        .unwrap();
        assert!(preds[0].mean.abs() < 1e-10);
        assert_relative_eq!(preds[0].variance, 1.7, epsilon = 1e-10);
    }

    #[test]
    fn m_equal_n_matches_dense_oracle() {
        let cov = sep_cov(1.3, 4.0, 3.0, 0.15);
        let data = random_data(50, 73);
        let mut rng = stream_rng(74, 0);
        let targets = TargetSet::without_covariates(
            (0..20)
                .map(|_| {
                    SpaceTimePoint::new(
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                    )
                })
                .collect(),
        );
        let vecchia = predict(
            &cov,
            &[],
            &data,
            &targets,
            NeighborDomain::G,
            50,
            1.0,
            false,
        )
        .unwrap();
        let exact = kriging_exact(&cov, &[], &data, &targets, false).unwrap();
        for (a, b) in vecchia.iter().zip(&exact) {
            assert_relative_eq!(a.mean, b.mean, max_relative = 1e-9, epsilon = 1e-12);
            assert_relative_eq!(a.variance, b.variance, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn exact_kriging_with_single_observation() {
        let cov = sep_cov(1.0, 2.0, 2.0, 0.0);
        let p = SpaceTimePoint::new(0.1, 0.2, 0.0);
        let data = Dataset::without_covariates(vec![p], vec![3.25]).unwrap();
        let targets = TargetSet::without_covariates(vec![p]);
        let preds = kriging_exact(&cov, &[], &data, &targets, false).unwrap();
        assert_relative_eq!(preds[0].mean, 3.25, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_observations_get_equal_weight() {
        // Swapping two symmetric observations' values leaves the prediction
        // unchanged only if their kriging weights are equal.
        let cov = sep_cov(1.0, 2.0, 2.0, 0.1);
        let a = SpaceTimePoint::new(-0.3, 0.0, 0.0);
        let b = SpaceTimePoint::new(0.3, 0.0, 0.0);
        let target = TargetSet::without_covariates(vec![SpaceTimePoint::new(0.0, 0.0, 0.0)]);
        let d1 = Dataset::without_covariates(vec![a, b], vec![2.0, -1.0]).unwrap();
        let d2 = Dataset::without_covariates(vec![a, b], vec![-1.0, 2.0]).unwrap();
        let p1 = kriging_exact(&cov, &[], &d1, &target, false).unwrap();
        let p2 = kriging_exact(&cov, &[], &d2, &target, false).unwrap();
        assert_relative_eq!(p1[0].mean, p2[0].mean, epsilon = 1e-12);
    }

    #[test]
    fn variance_shrinks_with_more_neighbors() {
        let cov = sep_cov(2.0, 3.0, 3.0, 0.3);
        let data = random_data(60, 75);
        let target =
            TargetSet::without_covariates(vec![SpaceTimePoint::new(0.05, -0.03, 0.2)]);
        let mut prev = f64::INFINITY;
        for m in [1, 2, 5, 10, 20, 40, 60] {
            let preds = predict(
                &cov,
                &[],
                &data,
                &target,
                NeighborDomain::G,
                m,
                1.0,
                false,
            )
            .unwrap();
            // Nested neighbor sets: variance cannot increase.
            assert!(
                preds[0].variance <= prev + 1e-12,
                "m = {m}: {} > {prev}",
                preds[0].variance
            );
            prev = preds[0].variance;
            assert!(preds[0].variance >= 0.0 && preds[0].variance <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn identity_warp_makes_domains_agree() {
        let cov = sep_cov(1.0, 4.0, 2.0, 0.05);
        let data = random_data(80, 76);
        let mut rng = stream_rng(77, 0);
        let targets = TargetSet::without_covariates(
            (0..15)
                .map(|_| {
                    SpaceTimePoint::new(
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                    )
                })
                .collect(),
        );
        let g = predict(&cov, &[], &data, &targets, NeighborDomain::G, 10, 1.3, false).unwrap();
        let d = predict(&cov, &[], &data, &targets, NeighborDomain::D, 10, 1.3, false).unwrap();
        for (a, b) in g.iter().zip(&d) {
            assert_eq!(a.neighbor_indices, b.neighbor_indices);
            assert_relative_eq!(a.mean, b.mean, epsilon = 1e-12);
        }
    }

    #[test]
    fn warped_neighbor_sets_differ_from_original_domain() {
        let mut rng = stream_rng(78, 0);
        let mut unit = RbfWarpUnit::default_grid(vec![0.0; 16]);
        let bound = unit.weight_bound();
        unit.weights = (0..16).map(|_| rng.gen_range(-bound..bound)).collect();
        let warp = WarpingMap {
            scaling: crate::warp::DomainScaling::identity(),
            spatial_units: vec![SpatialWarpUnit::Rbf(unit)],
            temporal_unit: TemporalWarp::Identity,
            normalize: true,
        };
        let cov = NonstationaryCovariance::new(
            warp,
            Kernel::Separable(SeparableExpKernel {
                sigma2: 1.0,
                a_s: 6.0,
                a_t: 3.0,
            }),
            0.1,
        );
        let data = random_data(200, 79);
        let targets = TargetSet::without_covariates(
            (0..40)
                .map(|_| {
                    SpaceTimePoint::new(
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                    )
                })
                .collect(),
        );
        let g = predict(&cov, &[], &data, &targets, NeighborDomain::G, 8, 1.0, false).unwrap();
        let d = predict(&cov, &[], &data, &targets, NeighborDomain::D, 8, 1.0, false).unwrap();
        let differing = g
            .iter()
            .zip(&d)
            .filter(|(a, b)| a.neighbor_indices != b.neighbor_indices)
            .count();
        assert!(differing > 0, "warp should change some neighbor sets");
    }

    #[test]
    fn rejects_m_larger_than_n() {
        let cov = sep_cov(1.0, 1.0, 1.0, 0.0);
        let data = random_data(5, 80);
        let targets = TargetSet::without_covariates(vec![SpaceTimePoint::new(0.0, 0.0, 0.0)]);
        assert!(predict(&cov, &[], &data, &targets, NeighborDomain::G, 6, 1.0, false).is_err());
    }
}
