//! REML estimation on the Vecchia-approximated precision: parameter
//! transforms between the optimizer's free space and natural parameters, the
//! restricted log-likelihood with an analytic reverse-mode gradient, the GLS
//! trend estimator, and the quasi-Newton fit driver.
//!
//! The restricted log-likelihood is
//! `L = -(n-q)/2 log 2pi + 1/2 log|X'X| + 1/2 log|Q| - 1/2 log|X'QX| - 1/2 Z' Pi Z`
//! with `Pi = Q - Q X (X'QX)^-1 X'Q`, and `Q` replaced by the sparse
//! `(I - A)' D^-1 (I - A)`. Every term reduces to per-observation pieces
//! `u = (I - A) Z`, `V = (I - A) X` and the conditional variances `D`, so one
//! evaluation costs `O(n m^2)` and the gradient roughly twice that.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{Kernel, NonstationaryCovariance};
use crate::data::{Dataset, SpaceTimePoint};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::optim::{self, LbfgsConfig};
use crate::vecchia::{
    build_factors, NeighborDomain, OrderingMethod, SparseFactors, VecchiaPlan, PAR_CHUNK,
};
use crate::warp::{DomainScaling, SpatialWarpUnit, TemporalWarp, WarpingMap};

/// Lower bound keeping strictly-positive parameters away from zero.
const POSITIVE_FLOOR: f64 = 1e-10;

/// Relaxed positivity floor for axial warping weights; keeps the identity
/// warp (sigmoid weights ~ 0) reachable.
pub const AXIAL_WEIGHT_FLOOR: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Transforms
// ---------------------------------------------------------------------------

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softplus_inv(y: f64) -> f64 {
    // ln(e^y - 1), stable for small and large y.
    y + (-(-y).exp()).ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smooth bijection between one free (unconstrained) parameter and its
/// natural range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    /// `natural = floor + softplus(free)`, onto `(floor, inf)`.
    SoftplusFloor { floor: f64 },
    /// `natural = half_width * tanh(free)`, onto `(-half_width, half_width)`.
    TanhScaled { half_width: f64 },
}

impl Transform {
    pub fn to_natural(&self, free: f64) -> f64 {
        match self {
            Transform::Identity => free,
            Transform::SoftplusFloor { floor } => floor + softplus(free),
            Transform::TanhScaled { half_width } => half_width * free.tanh(),
        }
    }

    pub fn to_free(&self, natural: f64) -> f64 {
        match self {
            Transform::Identity => natural,
            Transform::SoftplusFloor { floor } => {
                softplus_inv((natural - floor).max(1e-300))
            }
            Transform::TanhScaled { half_width } => {
                let ratio = (natural / half_width).clamp(-1.0 + 1e-12, 1.0 - 1e-12);
                ratio.atanh()
            }
        }
    }

    pub fn d_natural_d_free(&self, free: f64) -> f64 {
        match self {
            Transform::Identity => 1.0,
            Transform::SoftplusFloor { .. } => sigmoid(free),
            Transform::TanhScaled { half_width } => {
                let t = free.tanh();
                half_width * (1.0 - t * t)
            }
        }
    }
}

/// The full parameter layout of a model: one named, transformed entry per
/// free coordinate, in the fixed order kernel params, nugget, spatial unit
/// weights (by layer), temporal unit weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterVector {
    pub names: Vec<String>,
    pub transforms: Vec<Transform>,
}

impl ParameterVector {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn to_natural(&self, free: &[f64]) -> Vec<f64> {
        free.iter()
            .zip(&self.transforms)
            .map(|(f, t)| t.to_natural(*f))
            .collect()
    }

    pub fn to_free(&self, natural: &[f64]) -> Vec<f64> {
        natural
            .iter()
            .zip(&self.transforms)
            .map(|(n, t)| t.to_free(*n))
            .collect()
    }
}

/// Binds a model template (architecture + current values) to its parameter
/// layout, so free vectors can be materialized into covariance models and
/// natural gradients chained back to free space.
#[derive(Debug, Clone)]
pub struct ModelParameterization {
    pub template: NonstationaryCovariance,
    pub params: ParameterVector,
}

impl ModelParameterization {
    pub fn new(template: NonstationaryCovariance) -> Self {
        let mut names = Vec::new();
        let mut transforms = Vec::new();
        for name in template.kernel.param_names() {
            names.push(format!("kernel.{name}"));
            transforms.push(if name.starts_with('v') {
                Transform::Identity
            } else {
                Transform::SoftplusFloor {
                    floor: POSITIVE_FLOOR,
                }
            });
        }
        names.push("nugget.tau2".into());
        transforms.push(Transform::SoftplusFloor {
            floor: POSITIVE_FLOOR,
        });
        for (li, unit) in template.warp.spatial_units.iter().enumerate() {
            match unit {
                SpatialWarpUnit::Axial { unit, .. } => {
                    for wi in 0..unit.weights.len() {
                        names.push(format!("warp.s{li}.w{wi}"));
                        transforms.push(Transform::SoftplusFloor {
                            floor: AXIAL_WEIGHT_FLOOR,
                        });
                    }
                }
                SpatialWarpUnit::Rbf(unit) => {
                    let half_width = unit.weight_bound();
                    for wi in 0..unit.weights.len() {
                        names.push(format!("warp.s{li}.b{wi}"));
                        transforms.push(Transform::TanhScaled { half_width });
                    }
                }
            }
        }
        if let TemporalWarp::Axial(unit) = &template.warp.temporal_unit {
            for wi in 0..unit.weights.len() {
                names.push(format!("warp.t.w{wi}"));
                transforms.push(Transform::SoftplusFloor {
                    floor: AXIAL_WEIGHT_FLOOR,
                });
            }
        }
        Self {
            template,
            params: ParameterVector { names, transforms },
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Natural parameter values of a covariance, in layout order.
    pub fn natural_of(&self, cov: &NonstationaryCovariance) -> Vec<f64> {
        let mut out = cov.kernel.params();
        out.push(cov.tau2);
        for unit in &cov.warp.spatial_units {
            out.extend_from_slice(unit.weights());
        }
        if let TemporalWarp::Axial(unit) = &cov.warp.temporal_unit {
            out.extend_from_slice(&unit.weights);
        }
        out
    }

    /// Free coordinates of the template's current values.
    pub fn initial_free(&self) -> Vec<f64> {
        self.params.to_free(&self.natural_of(&self.template))
    }

    /// Materializes a covariance model at the given free coordinates.
    pub fn cov_from_free(&self, free: &[f64]) -> NonstationaryCovariance {
        let natural = self.params.to_natural(free);
        self.cov_from_natural(&natural)
    }

    pub fn cov_from_natural(&self, natural: &[f64]) -> NonstationaryCovariance {
        let mut cov = self.template.clone();
        let nk = cov.kernel.param_count();
        cov.kernel = cov.kernel.with_params(&natural[..nk]);
        cov.tau2 = natural[nk];
        let mut off = nk + 1;
        for unit in cov.warp.spatial_units.iter_mut() {
            let k = unit.weight_count();
            unit.weights_mut().copy_from_slice(&natural[off..off + k]);
            off += k;
        }
        if let TemporalWarp::Axial(unit) = &mut cov.warp.temporal_unit {
            let k = unit.weights.len();
            unit.weights.copy_from_slice(&natural[off..off + k]);
            off += k;
        }
        debug_assert_eq!(off, natural.len());
        cov
    }

    /// Chains a gradient in natural coordinates to free coordinates.
    pub fn chain_to_free(&self, free: &[f64], natural_grad: &[f64]) -> Vec<f64> {
        free.iter()
            .zip(natural_grad)
            .zip(&self.params.transforms)
            .map(|((f, g), t)| g * t.d_natural_d_free(*f))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// REML value
// ---------------------------------------------------------------------------

/// Observations re-indexed into a plan's ordering.
#[derive(Debug, Clone)]
pub struct OrderedData {
    pub points: Vec<SpaceTimePoint>,
    pub z: Vec<f64>,
    pub x: DMatrix<f64>,
}

impl OrderedData {
    pub fn new(data: &Dataset, plan: &VecchiaPlan) -> Self {
        let points = plan.permutation.iter().map(|&i| data.points[i]).collect();
        let z = plan.permutation.iter().map(|&i| data.z[i]).collect();
        let x = DMatrix::from_fn(data.n(), data.q(), |r, c| data.x[(plan.permutation[r], c)]);
        Self { points, z, x }
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    pub fn q(&self) -> usize {
        self.x.ncols()
    }
}

fn check_full_rank(x: &DMatrix<f64>) -> Result<()> {
    let q = x.ncols();
    if q == 0 {
        return Ok(());
    }
    let scale = x.abs().max().max(1.0);
    let rank = x.clone().rank(1e-10 * scale);
    if rank < q {
        return Err(Error::RankDeficient { rank, cols: q });
    }
    Ok(())
}

struct RemlParts {
    value: f64,
    /// Innovation residuals after the GLS trend: `r = u - V beta`.
    r: Vec<f64>,
    /// Detrended observations in plan order: `e = z - X beta`.
    e: Vec<f64>,
    /// `V = (I - A) X`, row per ordered observation.
    v: DMatrix<f64>,
    sxx_inv: Option<DMatrix<f64>>,
    beta: DVector<f64>,
}

fn reml_parts(factors: &SparseFactors, data: &OrderedData) -> Result<RemlParts> {
    let n = data.n();
    let q = data.q();
    let u = factors.apply_w(&data.z);
    let mut v = DMatrix::zeros(n, q);
    for c in 0..q {
        let col: Vec<f64> = (0..n).map(|r| data.x[(r, c)]).collect();
        let wc = factors.apply_w(&col);
        for r in 0..n {
            v[(r, c)] = wc[r];
        }
    }

    let log_det_q = factors.log_det_precision();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();

    if q == 0 {
        let s_zz: f64 = u
            .iter()
            .zip(&factors.d)
            .map(|(ui, di)| ui * ui / di)
            .sum();
        let value = -0.5 * n as f64 * ln2pi + 0.5 * log_det_q - 0.5 * s_zz;
        return Ok(RemlParts {
            value,
            r: u,
            e: data.z.clone(),
            v,
            sxx_inv: None,
            beta: DVector::zeros(0),
        });
    }

    let mut s_zz = 0.0;
    let mut s_xz = DVector::zeros(q);
    let mut s_xx = DMatrix::zeros(q, q);
    for k in 0..n {
        let inv_d = 1.0 / factors.d[k];
        let vk = v.row(k);
        s_zz += u[k] * u[k] * inv_d;
        for a in 0..q {
            s_xz[a] += vk[a] * u[k] * inv_d;
            for b in 0..q {
                s_xx[(a, b)] += vk[a] * vk[b] * inv_d;
            }
        }
    }

    let xtx = data.x.transpose() * &data.x;
    let chol_xtx = xtx
        .cholesky()
        .ok_or(Error::RankDeficient { rank: 0, cols: q })?;
    let log_det_xtx = 2.0 * (0..q).map(|i| chol_xtx.l()[(i, i)].ln()).sum::<f64>();

    let chol_sxx: nalgebra::Cholesky<f64, nalgebra::Dyn> =
        s_xx.clone().cholesky().ok_or(Error::RankDeficient {
            rank: 0,
            cols: q,
        })?;
    let log_det_sxx = 2.0 * (0..q).map(|i| chol_sxx.l()[(i, i)].ln()).sum::<f64>();
    let beta = chol_sxx.solve(&s_xz);
    let sxx_inv = chol_sxx.inverse();

    let quad = s_zz - s_xz.dot(&beta);
    let value = -0.5 * (n - q) as f64 * ln2pi + 0.5 * log_det_xtx + 0.5 * log_det_q
        - 0.5 * log_det_sxx
        - 0.5 * quad;

    let r: Vec<f64> = (0..n).map(|k| u[k] - v.row(k).dot(&beta.transpose())).collect();
    let e: Vec<f64> = (0..n)
        .map(|k| data.z[k] - data.x.row(k).dot(&beta.transpose()))
        .collect();

    Ok(RemlParts {
        value,
        r,
        e,
        v,
        sxx_inv: Some(sxx_inv),
        beta,
    })
}

/// Restricted log-likelihood of the model on `data` under a fixed Vecchia
/// plan. For `q = 0` this reduces to the Gaussian log-likelihood
/// `-(n/2) log 2pi + 1/2 log|Q| - 1/2 Z'QZ`.
pub fn reml_loglik(
    cov: &NonstationaryCovariance,
    data: &Dataset,
    plan: &VecchiaPlan,
) -> Result<f64> {
    check_full_rank(&data.x)?;
    let ordered = OrderedData::new(data, plan);
    let factors = build_factors(cov, &ordered.points, plan)?;
    Ok(reml_parts(&factors, &ordered)?.value)
}

/// GLS trend coefficients `(X'QX)^-1 X'QZ` at fixed covariance parameters.
pub fn gls_beta(
    cov: &NonstationaryCovariance,
    data: &Dataset,
    plan: &VecchiaPlan,
) -> Result<Vec<f64>> {
    if data.q() == 0 {
        return Err(Error::InvalidArgument(
            "gls_beta needs at least one covariate".into(),
        ));
    }
    check_full_rank(&data.x)?;
    let ordered = OrderedData::new(data, plan);
    let factors = build_factors(cov, &ordered.points, plan)?;
    let parts = reml_parts(&factors, &ordered)?;
    Ok(parts.beta.iter().copied().collect())
}

// ---------------------------------------------------------------------------
// REML gradient
// ---------------------------------------------------------------------------

struct GradAccum {
    kernel: [f64; 4],
    tau2: f64,
    sbar: Vec<[f64; 2]>,
    tbar: Vec<f64>,
}

impl GradAccum {
    fn zeros(n: usize) -> Self {
        Self {
            kernel: [0.0; 4],
            tau2: 0.0,
            sbar: vec![[0.0; 2]; n],
            tbar: vec![0.0; n],
        }
    }

    fn merge(&mut self, other: &GradAccum) {
        for i in 0..4 {
            self.kernel[i] += other.kernel[i];
        }
        self.tau2 += other.tau2;
        for (a, b) in self.sbar.iter_mut().zip(&other.sbar) {
            a[0] += b[0];
            a[1] += b[1];
        }
        for (a, b) in self.tbar.iter_mut().zip(&other.tbar) {
            *a += *b;
        }
    }
}

/// Restricted log-likelihood and its gradient in natural parameter layout
/// (kernel params, tau2, warp weights). One fused forward/backward pass over
/// the conditioning blocks.
pub fn reml_loglik_grad_natural(
    cov: &NonstationaryCovariance,
    ordered: &OrderedData,
    plan: &VecchiaPlan,
) -> Result<(f64, Vec<f64>)> {
    check_full_rank(&ordered.x)?;
    let n = ordered.n();
    let q = ordered.q();
    let fwd = cov.warp.forward(&ordered.points);
    let warped = fwd.warped();
    let factors = build_factors_from_warped(cov, &warped, plan)?;
    let parts = reml_parts(&factors, ordered)?;

    let sigma2 = cov.kernel.sigma2();
    let marginal = sigma2 + cov.tau2;

    // Per-block reverse pass, chunked so the floating-point reduction order
    // is fixed regardless of thread count.
    let indices: Vec<usize> = (0..n).collect();
    let partials: Vec<GradAccum> = indices
        .par_chunks(PAR_CHUNK)
        .map(|chunk| {
            let mut acc = GradAccum::zeros(n);
            for &k in chunk {
                block_backward(
                    cov, &warped, ordered, plan, &factors, &parts, q, marginal, k, &mut acc,
                );
            }
            acc
        })
        .collect();
    let mut acc = GradAccum::zeros(n);
    for p in &partials {
        acc.merge(p);
    }

    // Pull coordinate cotangents back through the warp.
    let wgrads = cov.warp.backward(&fwd, &acc.sbar, &acc.tbar);

    let mut natural_grad = Vec::with_capacity(cov.kernel.param_count() + 1);
    natural_grad.extend_from_slice(&acc.kernel[..cov.kernel.param_count()]);
    natural_grad.push(acc.tau2);
    for layer in &wgrads.spatial {
        natural_grad.extend_from_slice(layer);
    }
    natural_grad.extend_from_slice(&wgrads.temporal);

    Ok((parts.value, natural_grad))
}

/// `build_factors` against pre-warped coordinates (avoids re-warping when the
/// forward record is already in hand).
fn build_factors_from_warped(
    cov: &NonstationaryCovariance,
    warped: &[SpaceTimePoint],
    plan: &VecchiaPlan,
) -> Result<SparseFactors> {
    // Identity-warp trick: the warped coordinates ARE the points, so reuse
    // the standard builder with an identity-warp clone.
    let mut flat = cov.clone();
    flat.warp = WarpingMap::identity();
    build_factors(&flat, warped, plan)
}

#[allow(clippy::too_many_arguments)]
fn block_backward(
    cov: &NonstationaryCovariance,
    warped: &[SpaceTimePoint],
    ordered: &OrderedData,
    plan: &VecchiaPlan,
    factors: &SparseFactors,
    parts: &RemlParts,
    q: usize,
    marginal: f64,
    k: usize,
    acc: &mut GradAccum,
) {
    let dk = factors.d[k];
    let rk = parts.r[k];
    // w_k = V_k Sxx^-1 (only with covariates).
    let wk: Option<DVector<f64>> = parts.sxx_inv.as_ref().map(|sxx_inv| {
        let vk = parts.v.row(k).transpose();
        sxx_inv * vk
    });
    // dL/dD_k = -1/(2D) + r^2/(2D^2) + V Sxx^-1 V' / (2D^2).
    let vsv = wk
        .as_ref()
        .map(|w| parts.v.row(k).transpose().dot(w))
        .unwrap_or(0.0);
    let dbar = -0.5 / dk + 0.5 * rk * rk / (dk * dk) + 0.5 * vsv / (dk * dk);

    let nb = &plan.neighbors[k];
    if nb.is_empty() {
        // D_0 = sigma2 + tau2 only.
        acc.kernel[0] += dbar;
        acc.tau2 += dbar;
        return;
    }
    let msize = nb.len();

    // Rebuild the block system (deterministically identical to the builder).
    let mut kmat = DMatrix::zeros(msize, msize);
    for (i, &pi) in nb.iter().enumerate() {
        kmat[(i, i)] = marginal;
        for (j, &pj) in nb.iter().enumerate().take(i) {
            let vv = cov.kernel.eval_warped(&warped[pi], &warped[pj]);
            kmat[(i, j)] = vv;
            kmat[(j, i)] = vv;
        }
    }
    let chol = match kmat.clone().cholesky() {
        Some(c) => c,
        None => {
            for i in 0..msize {
                kmat[(i, i)] += 1e-8 * cov.kernel.sigma2();
            }
            kmat.cholesky().expect("jittered block must factor")
        }
    };

    // dL/dA_{k,j} = [r_k e_j + w_k . X_j] / D_k.
    let row = &factors.a[k];
    let mut abar = DVector::zeros(msize);
    for (j, &pj) in nb.iter().enumerate() {
        let mut g = rk * parts.e[pj];
        if let Some(w) = &wk {
            for c in 0..q {
                g += w[c] * ordered.x[(pj, c)];
            }
        }
        abar[j] = g / dk;
    }

    // t = K^-1 abar'.
    let t = chol.solve(&abar);
    let a_vals = &row.vals;

    // cbar_j = t_j - 2 dbar a_j ; contract with the cross column.
    for (j, &pj) in nb.iter().enumerate() {
        let cbar = t[j] - 2.0 * dbar * a_vals[j];
        if cbar == 0.0 {
            continue;
        }
        let h = [
            warped[k].s1 - warped[pj].s1,
            warped[k].s2 - warped[pj].s2,
        ];
        let w = warped[k].t - warped[pj].t;
        let kg = cov.kernel.eval_grad(h, w);
        for p in 0..cov.kernel.param_count() {
            acc.kernel[p] += cbar * kg.d_params[p];
        }
        acc.sbar[k][0] += cbar * kg.d_h[0];
        acc.sbar[k][1] += cbar * kg.d_h[1];
        acc.sbar[pj][0] -= cbar * kg.d_h[0];
        acc.sbar[pj][1] -= cbar * kg.d_h[1];
        acc.tbar[k] += cbar * kg.d_w;
        acc.tbar[pj] -= cbar * kg.d_w;
    }

    // Kbar_ij = -t_i a_j + dbar a_i a_j, contracted for i < j (both
    // orientations folded) and on the diagonal (sigma2 + tau2 only).
    for i in 0..msize {
        let kbar_ii = -t[i] * a_vals[i] + dbar * a_vals[i] * a_vals[i];
        acc.kernel[0] += kbar_ii;
        acc.tau2 += kbar_ii;
        let pi = nb[i];
        for j in 0..i {
            let f = -(t[i] * a_vals[j] + t[j] * a_vals[i])
                + 2.0 * dbar * a_vals[i] * a_vals[j];
            if f == 0.0 {
                continue;
            }
            let pj = nb[j];
            let h = [
                warped[pi].s1 - warped[pj].s1,
                warped[pi].s2 - warped[pj].s2,
            ];
            let w = warped[pi].t - warped[pj].t;
            let kg = cov.kernel.eval_grad(h, w);
            for p in 0..cov.kernel.param_count() {
                acc.kernel[p] += f * kg.d_params[p];
            }
            acc.sbar[pi][0] += f * kg.d_h[0];
            acc.sbar[pi][1] += f * kg.d_h[1];
            acc.sbar[pj][0] -= f * kg.d_h[0];
            acc.sbar[pj][1] -= f * kg.d_h[1];
            acc.tbar[pi] += f * kg.d_w;
            acc.tbar[pj] -= f * kg.d_w;
        }
    }

    // Sigma_kk itself.
    acc.kernel[0] += dbar;
    acc.tau2 += dbar;
}

// ---------------------------------------------------------------------------
// Fit driver
// ---------------------------------------------------------------------------

/// Fit-time configuration: plan construction plus optimizer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Maximum conditioning-set size.
    pub m: usize,
    /// Space-time rescaling for distances; `None` uses the ratio of the
    /// spatial to temporal domain diameters.
    pub time_scale: Option<f64>,
    pub ordering: OrderingMethod,
    pub neighbor_domain: NeighborDomain,
    pub seed: u64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub obj_tol: f64,
    /// Parameter-name prefixes held fixed at their initial values
    /// (e.g. `"warp"` freezes every warping weight).
    pub frozen: Vec<String>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            m: 50,
            time_scale: None,
            ordering: OrderingMethod::Maxmin,
            neighbor_domain: NeighborDomain::G,
            seed: 0,
            max_iters: 500,
            grad_tol: 1e-5,
            obj_tol: 1e-8,
            frozen: Vec::new(),
        }
    }
}

/// Everything a fit produces: the resolved model (spec with fitted weights
/// and values embedded), trend coefficients, and the optimization trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    /// Model spec with every fitted value pinned; `instantiate` rebuilds the
    /// covariance.
    pub model: ModelSpec,
    pub scaling: DomainScaling,
    /// Natural parameters by layout name.
    pub theta: BTreeMap<String, f64>,
    /// GLS trend coefficients (empty when `q = 0`).
    pub beta: Vec<f64>,
    /// Minimized objective (negative restricted log-likelihood) at each
    /// accepted iterate; non-increasing.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub message: String,
    /// Resolved space-time distance scale used by the plan.
    pub time_scale: f64,
    pub config: FitConfig,
}

impl FitResult {
    pub fn covariance(&self) -> Result<NonstationaryCovariance> {
        self.model.instantiate(self.scaling)
    }

    pub fn restricted_loglik(&self) -> f64 {
        -*self.objective_trace.last().expect("trace never empty")
    }

    pub fn save<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing fit result: {e}")))?;
        std::fs::write(path.as_ref(), text).map_err(|source| Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        })
    }

    pub fn load<P: AsRef<std::path::Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|source| Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("parsing fit result: {e}")))
    }
}

/// Default ratio of spatial to temporal domain diameters.
pub fn default_time_scale(points: &[SpaceTimePoint]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for (c, v) in [p.s1, p.s2, p.t].into_iter().enumerate() {
            lo[c] = lo[c].min(v);
            hi[c] = hi[c].max(v);
        }
    }
    let ds = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt();
    let dt = hi[2] - lo[2];
    if ds > 0.0 && dt > 0.0 {
        ds / dt
    } else {
        1.0
    }
}

fn sample_variance(z: &[f64]) -> f64 {
    let n = z.len();
    let mean = z.iter().sum::<f64>() / n as f64;
    z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1).max(1) as f64
}

/// Builds the initial covariance model for a spec on the given data:
/// identity warps, `sigma2 = tau2 = var(Z)/2`, decay set so correlation is
/// about 0.05 at half the (normalized) domain diameter, zero velocity;
/// explicit `values` / unit weights in the spec override these.
pub fn initialize(spec: &ModelSpec, data: &Dataset) -> Result<NonstationaryCovariance> {
    let scaling = DomainScaling::fit(&data.points);
    let warp = spec.build_warp(scaling)?;
    let var = sample_variance(&data.z).max(1e-6);
    let half_diag_s = 0.5 * std::f64::consts::SQRT_2;
    let decay_s = (20.0f64).ln() / half_diag_s;
    let decay_t = (20.0f64).ln() / 0.5;
    let v = &spec.values;
    let kernel = match spec.kernel {
        crate::model::KernelFamily::Separable => {
            Kernel::Separable(crate::covariance::SeparableExpKernel {
                sigma2: v.sigma2.unwrap_or(var / 2.0),
                a_s: v.a_s.unwrap_or(decay_s),
                a_t: v.a_t.unwrap_or(decay_t),
            })
        }
        crate::model::KernelFamily::Asymmetric => {
            Kernel::Asymmetric(crate::covariance::AsymmetricExpKernel {
                sigma2: v.sigma2.unwrap_or(var / 2.0),
                a: v.a.unwrap_or(decay_s),
                velocity: v.velocity.unwrap_or([0.0, 0.0]),
            })
        }
    };
    let tau2 = v.tau2.unwrap_or(var / 2.0);
    Ok(NonstationaryCovariance::new(warp, kernel, tau2))
}

/// Embeds fitted values back into a spec so the result is self-contained.
fn resolve_spec(spec: &ModelSpec, cov: &NonstationaryCovariance) -> ModelSpec {
    use crate::model::{ParamValues, SpatialUnitSpec, TemporalSpec};
    let mut out = spec.clone();
    out.values = match cov.kernel {
        Kernel::Separable(k) => ParamValues {
            sigma2: Some(k.sigma2),
            a_s: Some(k.a_s),
            a_t: Some(k.a_t),
            tau2: Some(cov.tau2),
            ..Default::default()
        },
        Kernel::Asymmetric(k) => ParamValues {
            sigma2: Some(k.sigma2),
            a: Some(k.a),
            velocity: Some(k.velocity),
            tau2: Some(cov.tau2),
            ..Default::default()
        },
    };
    for (unit_spec, unit) in out.warp.spatial.iter_mut().zip(&cov.warp.spatial_units) {
        let w = Some(unit.weights().to_vec());
        match unit_spec {
            SpatialUnitSpec::AxialS1 { weights, .. }
            | SpatialUnitSpec::AxialS2 { weights, .. }
            | SpatialUnitSpec::Rbf { weights, .. } => *weights = w,
        }
    }
    if let (TemporalSpec::Axial { weights, .. }, TemporalWarp::Axial(unit)) =
        (&mut out.warp.temporal, &cov.warp.temporal_unit)
    {
        *weights = Some(unit.weights.clone());
    }
    out
}

/// Fits a model spec to data: builds the plan once, then runs L-BFGS on the
/// free parameters minimizing the negative restricted log-likelihood.
/// Deterministic given the seed and config. On optimizer non-convergence the
/// best iterate is still returned with `converged = false`.
pub fn fit(data: &Dataset, spec: &ModelSpec, config: &FitConfig) -> Result<FitResult> {
    if data.n() < 2 {
        return Err(Error::InvalidArgument("need at least 2 observations".into()));
    }
    check_full_rank(&data.x)?;

    let template = initialize(spec, data)?;
    let time_scale = config
        .time_scale
        .unwrap_or_else(|| default_time_scale(&data.points));
    let plan = VecchiaPlan::build(
        &data.points,
        config.m.min(data.n() - 1).max(1),
        config.ordering,
        config.neighbor_domain,
        &template.warp,
        time_scale,
        config.seed,
    )?;
    let ordered = OrderedData::new(data, &plan);

    let pzn = ModelParameterization::new(template);
    let init_free = pzn.initial_free();
    let frozen: Vec<bool> = pzn
        .params
        .names
        .iter()
        .map(|name| config.frozen.iter().any(|p| name.starts_with(p.as_str())))
        .collect();
    let active: Vec<usize> = (0..pzn.len()).filter(|&i| !frozen[i]).collect();

    let expand = |reduced: &[f64]| -> Vec<f64> {
        let mut full = init_free.clone();
        for (slot, &i) in active.iter().enumerate() {
            full[i] = reduced[slot];
        }
        full
    };

    let init_cov = pzn.cov_from_free(&init_free);
    let init_value = reml_loglik_grad_natural(&init_cov, &ordered, &plan)?.0;
    if !init_value.is_finite() {
        let natural = pzn.natural_of(&init_cov);
        let bad: Vec<String> = pzn
            .params
            .names
            .iter()
            .zip(&natural)
            .filter(|(_, v)| !v.is_finite())
            .map(|(n, v)| format!("{n} = {v}"))
            .collect();
        return Err(Error::NonFiniteObjective(if bad.is_empty() {
            format!("restricted log-likelihood is {init_value} at initialization")
        } else {
            bad.join(", ")
        }));
    }

    let value_only = |reduced: &[f64]| -> f64 {
        let full = expand(reduced);
        let cov = pzn.cov_from_free(&full);
        match reml_loglik_value(&cov, &ordered, &plan) {
            Ok(v) => -v,
            Err(_) => f64::INFINITY,
        }
    };
    let value_grad = |reduced: &[f64], grad: &mut [f64]| -> f64 {
        let full = expand(reduced);
        let cov = pzn.cov_from_free(&full);
        match reml_loglik_grad_natural(&cov, &ordered, &plan) {
            Ok((v, natural_grad)) => {
                let full_grad = pzn.chain_to_free(&full, &natural_grad);
                for (slot, &i) in active.iter().enumerate() {
                    grad[slot] = -full_grad[i];
                }
                -v
            }
            Err(_) => {
                for g in grad.iter_mut() {
                    *g = 0.0;
                }
                f64::INFINITY
            }
        }
    };

    let reduced0: Vec<f64> = active.iter().map(|&i| init_free[i]).collect();
    let lbfgs = LbfgsConfig {
        max_iters: config.max_iters,
        grad_tol: config.grad_tol,
        obj_tol: config.obj_tol,
        history: 10,
    };
    let outcome = optim::minimize(value_only, value_grad, &reduced0, &lbfgs)?;

    let final_free = expand(&outcome.x);
    let final_cov = pzn.cov_from_free(&final_free);
    let natural = pzn.natural_of(&final_cov);
    let theta: BTreeMap<String, f64> = pzn
        .params
        .names
        .iter()
        .cloned()
        .zip(natural.iter().copied())
        .collect();
    let beta = if data.q() > 0 {
        gls_beta(&final_cov, data, &plan)?
    } else {
        Vec::new()
    };

    Ok(FitResult {
        model: resolve_spec(spec, &final_cov),
        scaling: final_cov.warp.scaling,
        theta,
        beta,
        objective_trace: outcome.trace,
        converged: outcome.converged,
        iterations: outcome.iterations,
        message: outcome.message,
        time_scale,
        config: config.clone(),
    })
}

/// Value-only REML against pre-ordered data (the optimizer's cheap path).
fn reml_loglik_value(
    cov: &NonstationaryCovariance,
    ordered: &OrderedData,
    plan: &VecchiaPlan,
) -> Result<f64> {
    let factors = build_factors(cov, &ordered.points, plan)?;
    Ok(reml_parts(&factors, ordered)?.value)
}

/// Maximum relative discrepancy between the analytic gradient of the
/// restricted log-likelihood and central finite differences with step `h`,
/// over free coordinates: `|a - fd| / max(1, |fd|)`.
pub fn gradient_check(
    pzn: &ModelParameterization,
    data: &Dataset,
    plan: &VecchiaPlan,
    free: &[f64],
    h: f64,
) -> Result<f64> {
    assert!(h > 0.0);
    let ordered = OrderedData::new(data, plan);
    let cov = pzn.cov_from_free(free);
    let (_, natural_grad) = reml_loglik_grad_natural(&cov, &ordered, plan)?;
    let analytic = pzn.chain_to_free(free, &natural_grad);

    let mut worst: f64 = 0.0;
    for i in 0..free.len() {
        let mut up = free.to_vec();
        up[i] += h;
        let mut dn = free.to_vec();
        dn[i] -= h;
        let f_up = reml_loglik_value(&pzn.cov_from_free(&up), &ordered, plan)?;
        let f_dn = reml_loglik_value(&pzn.cov_from_free(&dn), &ordered, plan)?;
        let fd = (f_up - f_dn) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
