//! Injective warping units and their composition: an ordered list of spatial
//! units (axial and radial-basis) forming the spatial map, plus a strictly
//! increasing axial unit for time.
//!
//! Every unit is injective by construction, so the composition is injective;
//! [`WarpingMap::check_injectivity`] verifies this numerically rather than
//! trusting the algebra. Units operate on coordinates rescaled to
//! `[-0.5, 0.5]`, and each spatial layer's output is (optionally) rescaled
//! back onto `[-0.5, 0.5]^2` over a fixed reference grid, which removes the
//! confounding between warped-domain extent and the kernel decay parameters.

use serde::{Deserialize, Serialize};

use crate::data::SpaceTimePoint;

/// Reference grid side used for per-layer output normalization.
const REF_GRID_SIDE: usize = 21;

/// Fraction of the analytic injectivity bound that constrained RBF weights
/// may occupy.
pub const RBF_SAFETY: f64 = 0.8;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Axial unit
// ---------------------------------------------------------------------------

/// One sigmoid basis function `phi(x) = 1 / (1 + exp(-steepness (x - center)))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidBasis {
    pub steepness: f64,
    pub center: f64,
}

/// Monotone one-dimensional map `c -> w_1 c + sum_{i>=2} w_i phi_i(c)` with
/// all weights strictly positive and increasing sigmoids, hence strictly
/// increasing in `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxialWarpUnit {
    /// `w_1..w_r`; `w_1` multiplies the linear term.
    pub weights: Vec<f64>,
    /// Fixed `(theta_1i, theta_2i)` pairs for `i = 2..r`; length `r - 1`.
    pub basis: Vec<SigmoidBasis>,
}

impl AxialWarpUnit {
    /// Pure linear pass-through (`r = 1`, `w_1 = 1`).
    pub fn identity() -> Self {
        Self {
            weights: vec![1.0],
            basis: Vec::new(),
        }
    }

    /// `r - 1` sigmoids with centers equally spaced over `[lo, hi]` and
    /// steepness `4 / spacing`, the default placement on the rescaled domain.
    pub fn with_default_basis(r: usize, lo: f64, hi: f64, weights: Vec<f64>) -> Self {
        assert!(r >= 1, "axial unit needs r >= 1");
        assert_eq!(weights.len(), r, "need one weight per basis function");
        let k = r - 1;
        let basis = (0..k)
            .map(|j| {
                let center = if k == 1 {
                    0.5 * (lo + hi)
                } else {
                    lo + (hi - lo) * j as f64 / (k - 1) as f64
                };
                let spacing = if k <= 1 {
                    hi - lo
                } else {
                    (hi - lo) / (k - 1) as f64
                };
                SigmoidBasis {
                    steepness: 4.0 / spacing,
                    center,
                }
            })
            .collect();
        Self { weights, basis }
    }

    pub fn r(&self) -> usize {
        self.weights.len()
    }

    pub fn is_valid(&self) -> bool {
        self.weights.len() == self.basis.len() + 1
            && self.weights.iter().all(|w| *w > 0.0 && w.is_finite())
            && self.basis.iter().all(|b| b.steepness > 0.0)
    }

    /// `sum_i w_i phi_i(c)`.
    pub fn eval(&self, c: f64) -> f64 {
        let mut out = self.weights[0] * c;
        for (w, b) in self.weights[1..].iter().zip(&self.basis) {
            out += w * sigmoid(b.steepness * (c - b.center));
        }
        out
    }

    /// Value and derivative in `c`.
    pub fn eval_with_deriv(&self, c: f64) -> (f64, f64) {
        let mut out = self.weights[0] * c;
        let mut deriv = self.weights[0];
        for (w, b) in self.weights[1..].iter().zip(&self.basis) {
            let s = sigmoid(b.steepness * (c - b.center));
            out += w * s;
            deriv += w * b.steepness * s * (1.0 - s);
        }
        (out, deriv)
    }

    /// Accumulates `d out / d w_i` weighted by `cotangent` into `grad`, and
    /// returns the input cotangent `cotangent * d out / d c`.
    fn backward(&self, c: f64, cotangent: f64, grad: &mut [f64]) -> f64 {
        grad[0] += cotangent * c;
        let mut dc = self.weights[0];
        for (i, b) in self.basis.iter().enumerate() {
            let s = sigmoid(b.steepness * (c - b.center));
            grad[i + 1] += cotangent * s;
            dc += self.weights[i + 1] * b.steepness * s * (1.0 - s);
        }
        cotangent * dc
    }
}

/// Strictly increasing warp of a single coordinate.
pub fn axial_warp(unit: &AxialWarpUnit, c: f64) -> f64 {
    unit.eval(c)
}

// ---------------------------------------------------------------------------
// Radial basis function unit
// ---------------------------------------------------------------------------

/// Identity-plus-radial-displacement map around fixed centers:
/// `s -> s + sum_k b_k exp(-|s - c_k|^2 / (2 radius^2)) (s - c_k)`.
///
/// Constrained weights are kept inside `(-RBF_SAFETY, RBF_SAFETY) * bound`,
/// where `bound` is the reciprocal of the worst-case overlap of the bump
/// Jacobians (see [`RbfWarpUnit::weight_bound`]); validity is always
/// confirmed by [`WarpingMap::check_injectivity`] rather than trusted.
/// Constructors accept arbitrary weights so that folding configurations can
/// be built and detected in tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfWarpUnit {
    pub centers: Vec<[f64; 2]>,
    pub radius: f64,
    pub weights: Vec<f64>,
    bound: f64,
}

impl RbfWarpUnit {
    /// `side x side` centers equally spaced over `[-0.5, 0.5]^2`, radius
    /// `radius_factor` times the center spacing.
    pub fn grid(side: usize, radius_factor: f64, weights: Vec<f64>) -> Self {
        assert!(side >= 2, "rbf grid needs side >= 2");
        assert_eq!(weights.len(), side * side);
        let mut centers = Vec::with_capacity(side * side);
        for iy in 0..side {
            for ix in 0..side {
                centers.push([
                    -0.5 + ix as f64 / (side - 1) as f64,
                    -0.5 + iy as f64 / (side - 1) as f64,
                ]);
            }
        }
        let spacing = 1.0 / (side - 1) as f64;
        let radius = radius_factor * spacing;
        let bound = rbf_weight_bound(&centers, radius);
        Self {
            centers,
            radius,
            weights,
            bound,
        }
    }

    /// Default single-resolution unit: 4 x 4 centers, radius 1.5x spacing.
    pub fn default_grid(weights: Vec<f64>) -> Self {
        Self::grid(4, 1.5, weights)
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    /// Half-width of the injectivity-safe weight interval, already scaled by
    /// [`RBF_SAFETY`]: any weight vector with `|b_k| < weight_bound()` keeps
    /// the unit's Jacobian determinant positive everywhere.
    pub fn weight_bound(&self) -> f64 {
        RBF_SAFETY * self.bound
    }

    pub fn eval(&self, s: [f64; 2]) -> [f64; 2] {
        let inv2r2 = 0.5 / (self.radius * self.radius);
        let mut out = s;
        for (b, c) in self.weights.iter().zip(&self.centers) {
            let dx = s[0] - c[0];
            let dy = s[1] - c[1];
            let e = (-(dx * dx + dy * dy) * inv2r2).exp();
            out[0] += b * e * dx;
            out[1] += b * e * dy;
        }
        out
    }

    /// Accumulates weight gradients and returns the input cotangent
    /// `J(s)' sbar` (the Jacobian here is symmetric).
    fn backward(&self, s: [f64; 2], sbar: [f64; 2], grad: &mut [f64]) -> [f64; 2] {
        let r2 = self.radius * self.radius;
        let inv2r2 = 0.5 / r2;
        let mut out = sbar;
        for (k, (b, c)) in self.weights.iter().zip(&self.centers).enumerate() {
            let v = [s[0] - c[0], s[1] - c[1]];
            let e = (-(v[0] * v[0] + v[1] * v[1]) * inv2r2).exp();
            grad[k] += e * (v[0] * sbar[0] + v[1] * sbar[1]);
            // J = I + sum_k b e (I - v v'/r^2); apply (J - I) to sbar.
            let vs = v[0] * sbar[0] + v[1] * sbar[1];
            out[0] += b * e * (sbar[0] - v[0] * vs / r2);
            out[1] += b * e * (sbar[1] - v[1] * vs / r2);
        }
        out
    }
}

/// Radial displacement of a 2-D point.
pub fn rbf_warp(unit: &RbfWarpUnit, s: [f64; 2]) -> [f64; 2] {
    unit.eval(s)
}

/// Worst-case overlap bound: `1 / max_s sum_k phi(r_k(s))` with
/// `phi(r) = exp(-u/2) max(1, |1 - u|)`, `u = r^2 / radius^2`. Each bump's
/// Jacobian perturbation has spectral norm at most `|b_k| phi(r_k)`, so
/// weights below the bound keep `det J > 0` everywhere.
fn rbf_weight_bound(centers: &[[f64; 2]], radius: f64) -> f64 {
    let res = 160;
    let mut max_overlap: f64 = 0.0;
    for iy in 0..=res {
        for ix in 0..=res {
            let s = [
                -1.0 + 2.0 * ix as f64 / res as f64,
                -1.0 + 2.0 * iy as f64 / res as f64,
            ];
            let mut total = 0.0;
            for c in centers {
                let dx = s[0] - c[0];
                let dy = s[1] - c[1];
                let u = (dx * dx + dy * dy) / (radius * radius);
                total += (-0.5 * u).exp() * (1.0f64).max((1.0 - u).abs());
            }
            max_overlap = max_overlap.max(total);
        }
    }
    1.0 / max_overlap
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

/// Which spatial coordinate an axial unit acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    S1,
    S2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SpatialWarpUnit {
    Axial { axis: Axis, unit: AxialWarpUnit },
    Rbf(RbfWarpUnit),
}

impl SpatialWarpUnit {
    pub fn weight_count(&self) -> usize {
        match self {
            SpatialWarpUnit::Axial { unit, .. } => unit.weights.len(),
            SpatialWarpUnit::Rbf(u) => u.weights.len(),
        }
    }

    pub fn weights(&self) -> &[f64] {
        match self {
            SpatialWarpUnit::Axial { unit, .. } => &unit.weights,
            SpatialWarpUnit::Rbf(u) => &u.weights,
        }
    }

    pub fn weights_mut(&mut self) -> &mut Vec<f64> {
        match self {
            SpatialWarpUnit::Axial { unit, .. } => &mut unit.weights,
            SpatialWarpUnit::Rbf(u) => &mut u.weights,
        }
    }

    fn eval(&self, s: [f64; 2]) -> [f64; 2] {
        match self {
            SpatialWarpUnit::Axial { axis: Axis::S1, unit } => [unit.eval(s[0]), s[1]],
            SpatialWarpUnit::Axial { axis: Axis::S2, unit } => [s[0], unit.eval(s[1])],
            SpatialWarpUnit::Rbf(u) => u.eval(s),
        }
    }

    fn backward(&self, s: [f64; 2], sbar: [f64; 2], grad: &mut [f64]) -> [f64; 2] {
        match self {
            SpatialWarpUnit::Axial { axis: Axis::S1, unit } => {
                [unit.backward(s[0], sbar[0], grad), sbar[1]]
            }
            SpatialWarpUnit::Axial { axis: Axis::S2, unit } => {
                [sbar[0], unit.backward(s[1], sbar[1], grad)]
            }
            SpatialWarpUnit::Rbf(u) => u.backward(s, sbar, grad),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TemporalWarp {
    Identity,
    Axial(AxialWarpUnit),
}

impl TemporalWarp {
    pub fn weight_count(&self) -> usize {
        match self {
            TemporalWarp::Identity => 0,
            TemporalWarp::Axial(u) => u.weights.len(),
        }
    }
}

/// Affine rescaling of raw coordinates onto the unit cube `[-0.5, 0.5]^3`,
/// aspect-preserving in space (one scale for both spatial axes, so the
/// identity-warp model stays isotropic). The inverse is kept for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainScaling {
    pub s_center: [f64; 2],
    pub s_scale: f64,
    pub t_center: f64,
    pub t_scale: f64,
}

impl DomainScaling {
    pub fn identity() -> Self {
        Self {
            s_center: [0.0, 0.0],
            s_scale: 1.0,
            t_center: 0.0,
            t_scale: 1.0,
        }
    }

    /// Fits the bounding box of `points`: the longer spatial axis maps onto
    /// exactly `[-0.5, 0.5]`, time maps onto `[-0.5, 0.5]`.
    pub fn fit(points: &[SpaceTimePoint]) -> Self {
        assert!(!points.is_empty());
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for (c, v) in [p.s1, p.s2, p.t].into_iter().enumerate() {
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
        let s_extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        let s_scale = if s_extent > 0.0 { s_extent } else { 1.0 };
        let t_extent = hi[2] - lo[2];
        let t_scale = if t_extent > 0.0 { t_extent } else { 1.0 };
        Self {
            s_center: [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])],
            s_scale,
            t_center: 0.5 * (lo[2] + hi[2]),
            t_scale,
        }
    }

    pub fn to_unit(&self, p: &SpaceTimePoint) -> SpaceTimePoint {
        SpaceTimePoint::new(
            (p.s1 - self.s_center[0]) / self.s_scale,
            (p.s2 - self.s_center[1]) / self.s_scale,
            (p.t - self.t_center) / self.t_scale,
        )
    }

    pub fn from_unit(&self, p: &SpaceTimePoint) -> SpaceTimePoint {
        SpaceTimePoint::new(
            p.s1 * self.s_scale + self.s_center[0],
            p.s2 * self.s_scale + self.s_center[1],
            p.t * self.t_scale + self.t_center,
        )
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

/// Ordered composition of spatial warping units plus a monotone temporal
/// unit, together with the input rescaling and the per-layer normalization
/// flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpingMap {
    pub scaling: DomainScaling,
    pub spatial_units: Vec<SpatialWarpUnit>,
    pub temporal_unit: TemporalWarp,
    pub normalize: bool,
}

/// Fixed reference point set for per-layer normalization: a
/// `REF_GRID_SIDE^2` grid over the unit square and `REF_GRID_SIDE` times.
fn reference_spatial() -> Vec<[f64; 2]> {
    let side = REF_GRID_SIDE;
    let mut pts = Vec::with_capacity(side * side);
    for iy in 0..side {
        for ix in 0..side {
            pts.push([
                -0.5 + ix as f64 / (side - 1) as f64,
                -0.5 + iy as f64 / (side - 1) as f64,
            ]);
        }
    }
    pts
}

fn reference_times() -> Vec<f64> {
    (0..REF_GRID_SIDE)
        .map(|i| -0.5 + i as f64 / (REF_GRID_SIDE - 1) as f64)
        .collect()
}

struct NormAffine {
    lo: f64,
    hi: f64,
    argmin: usize,
    argmax: usize,
}

fn norm_affine(values: impl Iterator<Item = f64>) -> NormAffine {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut argmin = 0;
    let mut argmax = 0;
    for (i, v) in values.enumerate() {
        if v < lo {
            lo = v;
            argmin = i;
        }
        if v > hi {
            hi = v;
            argmax = i;
        }
    }
    NormAffine {
        lo,
        hi,
        argmin,
        argmax,
    }
}

impl NormAffine {
    fn apply(&self, x: f64) -> f64 {
        if self.hi - self.lo < 1e-300 {
            return x;
        }
        (x - self.lo) / (self.hi - self.lo) - 0.5
    }
}

struct SpatialLayerRecord {
    input: Vec<[f64; 2]>,
    unit_out: Vec<[f64; 2]>,
    norm: Option<[NormAffine; 2]>,
}

struct TemporalLayerRecord {
    input: Vec<f64>,
    unit_out: Vec<f64>,
    norm: Option<NormAffine>,
}

/// Forward warp of a point batch with the intermediates needed for the
/// reverse pass. Reference-grid rows are carried alongside the data rows so
/// normalization constants (and their gradients) are well defined.
pub struct WarpForward {
    n_ref_s: usize,
    n_ref_t: usize,
    spatial_layers: Vec<SpatialLayerRecord>,
    temporal_layer: Option<TemporalLayerRecord>,
    spatial_rows: Vec<[f64; 2]>,
    temporal_rows: Vec<f64>,
}

impl WarpForward {
    /// Warped coordinates of the data rows, in input order.
    pub fn warped(&self) -> Vec<SpaceTimePoint> {
        self.spatial_rows[self.n_ref_s..]
            .iter()
            .zip(&self.temporal_rows[self.n_ref_t..])
            .map(|(s, t)| SpaceTimePoint::new(s[0], s[1], *t))
            .collect()
    }
}

/// Per-unit weight gradients produced by [`WarpingMap::backward`].
pub struct WarpGradients {
    pub spatial: Vec<Vec<f64>>,
    pub temporal: Vec<f64>,
}

/// Numerical injectivity report: the minimum finite-difference Jacobian
/// determinant of the full spatial composition over a scan grid, and where
/// it was attained (original coordinates).
#[derive(Debug, Clone, Copy)]
pub struct InjectivityReport {
    pub min_det: f64,
    pub location: [f64; 2],
}

impl WarpingMap {
    /// Identity configuration: no rescaling, no spatial units, identity time.
    pub fn identity() -> Self {
        Self {
            scaling: DomainScaling::identity(),
            spatial_units: Vec::new(),
            temporal_unit: TemporalWarp::Identity,
            normalize: true,
        }
    }

    pub fn is_identity_architecture(&self) -> bool {
        self.spatial_units.is_empty() && matches!(self.temporal_unit, TemporalWarp::Identity)
    }

    pub fn weight_count(&self) -> usize {
        self.spatial_units
            .iter()
            .map(|u| u.weight_count())
            .sum::<usize>()
            + self.temporal_unit.weight_count()
    }

    /// Warps a batch of points, recording intermediates for [`Self::backward`].
    pub fn forward(&self, pts: &[SpaceTimePoint]) -> WarpForward {
        let ref_s = if self.spatial_units.is_empty() {
            Vec::new()
        } else {
            reference_spatial()
        };
        let ref_t = if matches!(self.temporal_unit, TemporalWarp::Identity) {
            Vec::new()
        } else {
            reference_times()
        };
        let n_ref_s = ref_s.len();
        let n_ref_t = ref_t.len();

        let scaled: Vec<SpaceTimePoint> = pts.iter().map(|p| self.scaling.to_unit(p)).collect();
        let mut spatial_rows: Vec<[f64; 2]> = ref_s
            .into_iter()
            .chain(scaled.iter().map(|p| [p.s1, p.s2]))
            .collect();
        let mut temporal_rows: Vec<f64> =
            ref_t.into_iter().chain(scaled.iter().map(|p| p.t)).collect();

        let mut spatial_layers = Vec::with_capacity(self.spatial_units.len());
        for unit in &self.spatial_units {
            let input = spatial_rows;
            let unit_out: Vec<[f64; 2]> = input.iter().map(|s| unit.eval(*s)).collect();
            let norm = if self.normalize {
                let nx = norm_affine(unit_out[..n_ref_s].iter().map(|s| s[0]));
                let ny = norm_affine(unit_out[..n_ref_s].iter().map(|s| s[1]));
                spatial_rows = unit_out
                    .iter()
                    .map(|s| [nx.apply(s[0]), ny.apply(s[1])])
                    .collect();
                Some([nx, ny])
            } else {
                spatial_rows = unit_out.clone();
                None
            };
            spatial_layers.push(SpatialLayerRecord {
                input,
                unit_out,
                norm,
            });
        }

        let temporal_layer = match &self.temporal_unit {
            TemporalWarp::Identity => None,
            TemporalWarp::Axial(unit) => {
                let input = temporal_rows;
                let unit_out: Vec<f64> = input.iter().map(|t| unit.eval(*t)).collect();
                let norm = if self.normalize {
                    let n = norm_affine(unit_out[..n_ref_t].iter().copied());
                    temporal_rows = unit_out.iter().map(|t| n.apply(*t)).collect();
                    Some(n)
                } else {
                    temporal_rows = unit_out.clone();
                    None
                };
                Some(TemporalLayerRecord {
                    input,
                    unit_out,
                    norm,
                })
            }
        };

        WarpForward {
            n_ref_s,
            n_ref_t,
            spatial_layers,
            temporal_layer,
            spatial_rows,
            temporal_rows,
        }
    }

    /// Warped coordinates of a point batch.
    pub fn warp_points(&self, pts: &[SpaceTimePoint]) -> Vec<SpaceTimePoint> {
        self.forward(pts).warped()
    }

    /// Warped spatial image of a single point (in the map's input coordinates).
    pub fn warp_space(&self, s: [f64; 2]) -> [f64; 2] {
        let p = SpaceTimePoint::new(s[0], s[1], 0.0);
        let w = self.warp_points(std::slice::from_ref(&p));
        [w[0].s1, w[0].s2]
    }

    /// Warped time coordinate of a single point.
    pub fn warp_time(&self, t: f64) -> f64 {
        let p = SpaceTimePoint::new(0.0, 0.0, t);
        self.warp_points(std::slice::from_ref(&p))[0].t
    }

    /// Pulls cotangents on warped data coordinates back to per-unit weight
    /// gradients. `sbar[i]`/`tbar[i]` belong to data row `i` of the forward
    /// batch.
    pub fn backward(&self, fwd: &WarpForward, sbar: &[[f64; 2]], tbar: &[f64]) -> WarpGradients {
        let mut grads = WarpGradients {
            spatial: self
                .spatial_units
                .iter()
                .map(|u| vec![0.0; u.weight_count()])
                .collect(),
            temporal: vec![0.0; self.temporal_unit.weight_count()],
        };

        // Spatial chain.
        if !self.spatial_units.is_empty() {
            let n_rows = fwd.spatial_rows.len();
            let mut bar: Vec<[f64; 2]> = vec![[0.0; 2]; n_rows];
            for (i, sb) in sbar.iter().enumerate() {
                bar[fwd.n_ref_s + i] = *sb;
            }
            for (li, unit) in self.spatial_units.iter().enumerate().rev() {
                let rec = &fwd.spatial_layers[li];
                if let Some(norms) = &rec.norm {
                    for c in 0..2 {
                        let norm = &norms[c];
                        let denom = norm.hi - norm.lo;
                        if denom < 1e-300 {
                            continue;
                        }
                        let inv = 1.0 / denom;
                        let inv2 = inv * inv;
                        let mut s_lo = 0.0;
                        let mut s_hi = 0.0;
                        for (row, b) in bar.iter_mut().enumerate() {
                            let g = b[c];
                            if g == 0.0 {
                                continue;
                            }
                            let x = rec.unit_out[row][c];
                            s_lo += g * (x - norm.hi) * inv2;
                            s_hi += g * (norm.lo - x) * inv2;
                            b[c] = g * inv;
                        }
                        bar[norm.argmin][c] += s_lo;
                        bar[norm.argmax][c] += s_hi;
                    }
                }
                let grad = &mut grads.spatial[li];
                for row in 0..n_rows {
                    bar[row] = unit.backward(rec.input[row], bar[row], grad);
                }
            }
        }

        // Temporal chain.
        if let (TemporalWarp::Axial(unit), Some(rec)) = (&self.temporal_unit, &fwd.temporal_layer) {
            let n_rows = fwd.temporal_rows.len();
            let mut bar = vec![0.0; n_rows];
            for (i, tb) in tbar.iter().enumerate() {
                bar[fwd.n_ref_t + i] = *tb;
            }
            if let Some(norm) = &rec.norm {
                let denom = norm.hi - norm.lo;
                if denom >= 1e-300 {
                    let inv = 1.0 / denom;
                    let inv2 = inv * inv;
                    let mut s_lo = 0.0;
                    let mut s_hi = 0.0;
                    for (row, b) in bar.iter_mut().enumerate() {
                        let g = *b;
                        if g == 0.0 {
                            continue;
                        }
                        let x = rec.unit_out[row];
                        s_lo += g * (x - norm.hi) * inv2;
                        s_hi += g * (norm.lo - x) * inv2;
                        *b = g * inv;
                    }
                    bar[norm.argmin] += s_lo;
                    bar[norm.argmax] += s_hi;
                }
            }
            for row in 0..n_rows {
                bar[row] = unit.backward(rec.input[row], bar[row], &mut grads.temporal);
            }
        }

        grads
    }

    /// Scans a `grid_resolution^2` grid over the (rescaled) spatial domain
    /// with central-difference Jacobians of the full spatial composition and
    /// reports the minimum determinant. The identity map reports 1 everywhere.
    pub fn check_injectivity(&self, grid_resolution: usize) -> InjectivityReport {
        assert!(grid_resolution >= 2);
        let res = grid_resolution;
        let h = 1e-5;
        // Stencil points in unit-square coordinates; warp the spatial chain
        // directly (scaling and time play no role in the spatial Jacobian).
        let mut batch = Vec::with_capacity(res * res * 4);
        for iy in 0..res {
            for ix in 0..res {
                let x = -0.5 + ix as f64 / (res - 1) as f64;
                let y = -0.5 + iy as f64 / (res - 1) as f64;
                batch.push([x + h, y]);
                batch.push([x - h, y]);
                batch.push([x, y + h]);
                batch.push([x, y - h]);
            }
        }
        let warped = self.warp_unit_spatial_batch(&batch);
        let mut min_det = f64::INFINITY;
        let mut at = [0.0, 0.0];
        for i in 0..res * res {
            let px = warped[4 * i];
            let mx = warped[4 * i + 1];
            let py = warped[4 * i + 2];
            let my = warped[4 * i + 3];
            let j00 = (px[0] - mx[0]) / (2.0 * h);
            let j10 = (px[1] - mx[1]) / (2.0 * h);
            let j01 = (py[0] - my[0]) / (2.0 * h);
            let j11 = (py[1] - my[1]) / (2.0 * h);
            let det = j00 * j11 - j01 * j10;
            if det < min_det {
                min_det = det;
                at = batch[4 * i];
                at[0] -= h;
            }
        }
        let loc = self
            .scaling
            .from_unit(&SpaceTimePoint::new(at[0], at[1], 0.0));
        InjectivityReport {
            min_det,
            location: [loc.s1, loc.s2],
        }
    }

    /// Applies the spatial chain (with normalization) to points already in
    /// unit-square coordinates.
    fn warp_unit_spatial_batch(&self, pts: &[[f64; 2]]) -> Vec<[f64; 2]> {
        if self.spatial_units.is_empty() {
            return pts.to_vec();
        }
        let ref_s = reference_spatial();
        let n_ref = ref_s.len();
        let mut rows: Vec<[f64; 2]> = ref_s.into_iter().chain(pts.iter().copied()).collect();
        for unit in &self.spatial_units {
            let out: Vec<[f64; 2]> = rows.iter().map(|s| unit.eval(*s)).collect();
            if self.normalize {
                let nx = norm_affine(out[..n_ref].iter().map(|s| s[0]));
                let ny = norm_affine(out[..n_ref].iter().map(|s| s[1]));
                rows = out.iter().map(|s| [nx.apply(s[0]), ny.apply(s[1])]).collect();
            } else {
                rows = out;
            }
        }
        rows.split_off(n_ref)
    }
}
