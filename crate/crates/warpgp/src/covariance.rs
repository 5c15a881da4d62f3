//! Stationary exponential kernels on the warped domain and the induced
//! nonstationary covariance on the original domain.
//!
//! The nugget `tau2` belongs to the observation equation: it is added only to
//! diagonals of observed-data covariance matrices, never to cross-covariances
//! with prediction targets.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::SpaceTimePoint;
use crate::warp::WarpingMap;

/// `sigma2 * exp(-a_s |h|) * exp(-a_t |w|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparableExpKernel {
    pub sigma2: f64,
    pub a_s: f64,
    pub a_t: f64,
}

/// `sigma2 * exp(-a |h - v w|)`: spatial fields advected by the velocity `v`
/// (warped-space units per warped-time unit). Asymmetric in time reflection,
/// hence nonseparable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsymmetricExpKernel {
    pub sigma2: f64,
    pub a: f64,
    pub velocity: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    Separable(SeparableExpKernel),
    Asymmetric(AsymmetricExpKernel),
}

/// Kernel value with its derivatives in the warped displacement and in the
/// kernel parameters (layout per [`Kernel::param_names`]).
#[derive(Debug, Clone, Copy)]
pub struct KernelGrad {
    pub value: f64,
    pub d_h: [f64; 2],
    pub d_w: f64,
    pub d_params: [f64; 4],
}

impl Kernel {
    pub fn sigma2(&self) -> f64 {
        match self {
            Kernel::Separable(k) => k.sigma2,
            Kernel::Asymmetric(k) => k.sigma2,
        }
    }

    pub fn is_valid(&self) -> bool {
        match self {
            Kernel::Separable(k) => k.sigma2 > 0.0 && k.a_s > 0.0 && k.a_t > 0.0,
            Kernel::Asymmetric(k) => {
                k.sigma2 > 0.0
                    && k.a > 0.0
                    && k.velocity[0].is_finite()
                    && k.velocity[1].is_finite()
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Kernel::Separable(_) => 3,
            Kernel::Asymmetric(_) => 4,
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Kernel::Separable(_) => &["sigma2", "a_s", "a_t"],
            Kernel::Asymmetric(_) => &["sigma2", "a", "v1", "v2"],
        }
    }

    /// Natural parameter values in [`Kernel::param_names`] order.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Kernel::Separable(k) => vec![k.sigma2, k.a_s, k.a_t],
            Kernel::Asymmetric(k) => vec![k.sigma2, k.a, k.velocity[0], k.velocity[1]],
        }
    }

    pub fn with_params(&self, p: &[f64]) -> Kernel {
        match self {
            Kernel::Separable(_) => Kernel::Separable(SeparableExpKernel {
                sigma2: p[0],
                a_s: p[1],
                a_t: p[2],
            }),
            Kernel::Asymmetric(_) => Kernel::Asymmetric(AsymmetricExpKernel {
                sigma2: p[0],
                a: p[1],
                velocity: [p[2], p[3]],
            }),
        }
    }

    /// Covariance of a spatial displacement `h` and time displacement `w`
    /// on the warped domain. Lies in `(0, sigma2]`, equal to `sigma2` iff the
    /// exponent argument vanishes.
    pub fn eval(&self, h: [f64; 2], w: f64) -> f64 {
        match self {
            Kernel::Separable(k) => {
                let r = (h[0] * h[0] + h[1] * h[1]).sqrt();
                k.sigma2 * (-k.a_s * r).exp() * (-k.a_t * w.abs()).exp()
            }
            Kernel::Asymmetric(k) => {
                let g0 = h[0] - k.velocity[0] * w;
                let g1 = h[1] - k.velocity[1] * w;
                let rho = (g0 * g0 + g1 * g1).sqrt();
                k.sigma2 * (-k.a * rho).exp()
            }
        }
    }

    /// Value plus derivatives. Direction derivatives are zero at the kink
    /// (`|h| = 0` or `w = 0`), which only matters on measure-zero sets.
    pub fn eval_grad(&self, h: [f64; 2], w: f64) -> KernelGrad {
        match self {
            Kernel::Separable(k) => {
                let r = (h[0] * h[0] + h[1] * h[1]).sqrt();
                let aw = w.abs();
                let value = k.sigma2 * (-k.a_s * r).exp() * (-k.a_t * aw).exp();
                let d_h = if r > 0.0 {
                    let f = -k.a_s * value / r;
                    [f * h[0], f * h[1]]
                } else {
                    [0.0, 0.0]
                };
                let d_w = if w != 0.0 {
                    -k.a_t * value * w.signum()
                } else {
                    0.0
                };
                KernelGrad {
                    value,
                    d_h,
                    d_w,
                    d_params: [value / k.sigma2, -r * value, -aw * value, 0.0],
                }
            }
            Kernel::Asymmetric(k) => {
                let g = [h[0] - k.velocity[0] * w, h[1] - k.velocity[1] * w];
                let rho = (g[0] * g[0] + g[1] * g[1]).sqrt();
                let value = k.sigma2 * (-k.a * rho).exp();
                let (d_h, d_w, d_v) = if rho > 0.0 {
                    let f = -k.a * value / rho;
                    let d_h = [f * g[0], f * g[1]];
                    // d rho / d w = -(g . v)/rho ; d rho / d v_i = -w g_i / rho
                    let d_w = f * (-(g[0] * k.velocity[0] + g[1] * k.velocity[1]));
                    let d_v = [f * (-w * g[0]), f * (-w * g[1])];
                    (d_h, d_w, d_v)
                } else {
                    ([0.0, 0.0], 0.0, [0.0, 0.0])
                };
                KernelGrad {
                    value,
                    d_h,
                    d_w,
                    d_params: [value / k.sigma2, -rho * value, d_v[0], d_v[1]],
                }
            }
        }
    }

    /// Kernel value between two already-warped points.
    pub fn eval_warped(&self, p: &SpaceTimePoint, q: &SpaceTimePoint) -> f64 {
        self.eval([p.s1 - q.s1, p.s2 - q.s2], p.t - q.t)
    }
}

/// Evaluates a kernel at a warped displacement.
pub fn kernel_eval(kernel: &Kernel, h: [f64; 2], w: f64) -> f64 {
    kernel.eval(h, w)
}

/// A stationary kernel on the warped domain plus the warping map and nugget:
/// together they define the nonstationary covariance on the original domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonstationaryCovariance {
    pub warp: WarpingMap,
    pub kernel: Kernel,
    pub tau2: f64,
}

impl NonstationaryCovariance {
    pub fn new(warp: WarpingMap, kernel: Kernel, tau2: f64) -> Self {
        Self { warp, kernel, tau2 }
    }

    pub fn stationary(kernel: Kernel, tau2: f64) -> Self {
        Self {
            warp: WarpingMap::identity(),
            kernel,
            tau2,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.kernel.is_valid() && self.tau2 >= 0.0 && self.tau2.is_finite()
    }

    /// Process covariance between two points (no nugget): the kernel applied
    /// to warped displacements. Symmetric in its arguments.
    pub fn cov_eval(&self, p: &SpaceTimePoint, q: &SpaceTimePoint) -> f64 {
        let warped = self.warp.warp_points(&[*p, *q]);
        self.kernel.eval_warped(&warped[0], &warped[1])
    }

    /// Dense covariance matrix over `pts`; adds `tau2` on the diagonal when
    /// `with_nugget` (observed-data covariance).
    pub fn cov_matrix(&self, pts: &[SpaceTimePoint], with_nugget: bool) -> DMatrix<f64> {
        let warped = self.warp.warp_points(pts);
        self.cov_matrix_warped(&warped, with_nugget)
    }

    /// Same as [`Self::cov_matrix`] but over coordinates already warped.
    pub fn cov_matrix_warped(&self, warped: &[SpaceTimePoint], with_nugget: bool) -> DMatrix<f64> {
        let n = warped.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.kernel.sigma2() + if with_nugget { self.tau2 } else { 0.0 };
            for j in 0..i {
                let v = self.kernel.eval_warped(&warped[i], &warped[j]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    /// Cross-covariances (no nugget) between one target and a set of points.
    pub fn cross_cov_warped(&self, target: &SpaceTimePoint, warped: &[SpaceTimePoint]) -> Vec<f64> {
        warped
            .iter()
            .map(|q| self.kernel.eval_warped(target, q))
            .collect()
    }
}
