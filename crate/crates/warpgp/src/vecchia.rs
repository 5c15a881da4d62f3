//! Vecchia approximation machinery: observation ordering, space-time
//! nearest-neighbor conditioning sets, and the sparse factors `A`, `D` of
//! the approximate precision `Q = (I - A)' D^-1 (I - A)`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::NonstationaryCovariance;
use crate::data::SpaceTimePoint;
use crate::error::{Error, Result};
use crate::kdtree::KdTree;

/// Jitter added (once) to a singular neighbor covariance, relative to the
/// marginal variance.
const NEIGHBOR_JITTER: f64 = 1e-8;

/// Where neighbor distances are measured: the original domain `G` or the
/// warped domain `D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeighborDomain {
    G,
    D,
}

/// How observations are sequenced before conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrderingMethod {
    Maxmin,
    Random,
    Input,
}

/// An ordering permutation plus per-observation conditioning sets.
///
/// `permutation[k]` is the original row index of the k-th ordered
/// observation; `neighbors[k]` lists ordered positions `< k`, of size
/// `min(m, k)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VecchiaPlan {
    pub permutation: Vec<usize>,
    pub neighbors: Vec<Vec<usize>>,
    pub m: usize,
    pub domain: NeighborDomain,
    pub time_scale: f64,
}

impl VecchiaPlan {
    /// Builds a plan: order the points, then attach conditioning sets.
    pub fn build(
        pts: &[SpaceTimePoint],
        m: usize,
        ordering: OrderingMethod,
        domain: NeighborDomain,
        warp: &crate::warp::WarpingMap,
        time_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if pts.is_empty() {
            return Err(Error::InvalidArgument("empty point set".into()));
        }
        if m == 0 {
            return Err(Error::InvalidArgument("m must be at least 1".into()));
        }
        let permutation = match ordering {
            OrderingMethod::Maxmin => maxmin_order(pts, time_scale, seed),
            OrderingMethod::Random => {
                let mut p: Vec<usize> = (0..pts.len()).collect();
                p.shuffle(&mut ChaCha12Rng::seed_from_u64(seed));
                p
            }
            OrderingMethod::Input => (0..pts.len()).collect(),
        };
        let ordered: Vec<SpaceTimePoint> = permutation.iter().map(|&i| pts[i]).collect();
        let neighbors = find_neighbors(&ordered, m, domain, warp, time_scale);
        Ok(Self {
            permutation,
            neighbors,
            m,
            domain,
            time_scale,
        })
    }

    pub fn n(&self) -> usize {
        self.permutation.len()
    }

    /// Checks the structural invariants: a bijective permutation, empty
    /// first conditioning set, and `|N(k)| = min(m, k)` drawn from `0..k`.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let mut seen = vec![false; n];
        for &p in &self.permutation {
            if p >= n || seen[p] {
                return Err(Error::InvalidArgument("permutation is not a bijection".into()));
            }
            seen[p] = true;
        }
        if self.neighbors.len() != n {
            return Err(Error::InvalidArgument("neighbor list length mismatch".into()));
        }
        for (k, set) in self.neighbors.iter().enumerate() {
            if set.len() != self.m.min(k) {
                return Err(Error::InvalidArgument(format!(
                    "|N({k})| = {} but expected {}",
                    set.len(),
                    self.m.min(k)
                )));
            }
            if set.iter().any(|&j| j >= k) {
                return Err(Error::InvalidArgument(format!(
                    "N({k}) refers to a later position"
                )));
            }
        }
        Ok(())
    }
}

/// Maximum minimum distance ordering in the scaled space-time metric
/// `(s1, s2, time_scale * t)`.
///
/// The first point is the one nearest the centroid; each next point
/// maximizes the minimum distance to everything already ordered. Exact ties
/// are broken by the larger total squared distance to the ordered set, and
/// remaining ties by a seeded random rank.
pub fn maxmin_order(pts: &[SpaceTimePoint], time_scale: f64, seed: u64) -> Vec<usize> {
    let n = pts.len();
    if n == 0 {
        return Vec::new();
    }
    let coords: Vec<[f64; 3]> = pts.iter().map(|p| p.scaled(time_scale)).collect();
    let mut rank: Vec<usize> = (0..n).collect();
    rank.shuffle(&mut ChaCha12Rng::seed_from_u64(seed));

    let d2 = |a: [f64; 3], b: [f64; 3]| -> f64 {
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        let dz = a[2] - b[2];
        dx * dx + dy * dy + dz * dz
    };

    let mut centroid = [0.0f64; 3];
    for c in &coords {
        centroid[0] += c[0];
        centroid[1] += c[1];
        centroid[2] += c[2];
    }
    for c in &mut centroid {
        *c /= n as f64;
    }

    let first = (0..n)
        .min_by(|&a, &b| {
            d2(coords[a], centroid)
                .total_cmp(&d2(coords[b], centroid))
                .then(rank[a].cmp(&rank[b]))
        })
        .unwrap();

    let mut order = Vec::with_capacity(n);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut sum_d2 = vec![0.0f64; n];
    let mut placed = vec![false; n];

    let mut current = first;
    for _ in 0..n {
        order.push(current);
        placed[current] = true;
        let cur = coords[current];
        let mut best: Option<usize> = None;
        for i in 0..n {
            if placed[i] {
                continue;
            }
            let d = d2(coords[i], cur);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            sum_d2[i] += d;
            let better = match best {
                None => true,
                Some(b) => min_d2[i]
                    .total_cmp(&min_d2[b])
                    .then(sum_d2[i].total_cmp(&sum_d2[b]))
                    .then(rank[b].cmp(&rank[i]))
                    .is_gt(),
            };
            if better {
                best = Some(i);
            }
        }
        match best {
            Some(next) => current = next,
            None => break,
        }
    }
    order
}

/// Conditioning sets for an already-ordered point sequence: `N(k)` holds the
/// `min(m, k)` nearest earlier positions in the scaled Euclidean metric,
/// measured on raw (`G`) or warped (`D`) coordinates.
pub fn find_neighbors(
    ordered: &[SpaceTimePoint],
    m: usize,
    domain: NeighborDomain,
    warp: &crate::warp::WarpingMap,
    time_scale: f64,
) -> Vec<Vec<usize>> {
    let coords: Vec<[f64; 3]> = match domain {
        NeighborDomain::G => ordered.iter().map(|p| p.scaled(time_scale)).collect(),
        NeighborDomain::D => warp
            .warp_points(ordered)
            .iter()
            .map(|p| p.scaled(time_scale))
            .collect(),
    };
    let mut tree = KdTree::new();
    let mut neighbors = Vec::with_capacity(ordered.len());
    for (k, c) in coords.iter().enumerate() {
        let mut set = tree.knn(*c, m.min(k));
        set.sort_unstable();
        neighbors.push(set);
        tree.insert(*c, k);
    }
    neighbors
}

/// One row of the strictly lower-triangular matrix `A`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseRow {
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

/// The factors of the sparse precision: `A` (row `k` supported on `N(k)`)
/// and the conditional variances `D`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseFactors {
    pub a: Vec<SparseRow>,
    pub d: Vec<f64>,
}

impl SparseFactors {
    pub fn n(&self) -> usize {
        self.d.len()
    }

    /// `log |Q| = -sum_k log D_k`.
    pub fn log_det_precision(&self) -> f64 {
        -self.d.iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `u = (I - A) z` over the ordered layout.
    pub fn apply_w(&self, z: &[f64]) -> Vec<f64> {
        self.a
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let mut u = z[k];
                for (c, v) in row.cols.iter().zip(&row.vals) {
                    u -= v * z[*c];
                }
                u
            })
            .collect()
    }

    /// `z' Q z` in `O(n m)`.
    pub fn quad_form(&self, z: &[f64]) -> f64 {
        self.apply_w(z)
            .iter()
            .zip(&self.d)
            .map(|(u, d)| u * u / d)
            .sum()
    }

    /// `Q x = (I - A)' D^-1 (I - A) x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut u = self.apply_w(x);
        for (uk, d) in u.iter_mut().zip(&self.d) {
            *uk /= d;
        }
        let mut out = u.clone();
        for (k, row) in self.a.iter().enumerate() {
            for (c, v) in row.cols.iter().zip(&row.vals) {
                out[*c] -= v * u[k];
            }
        }
        out
    }

    /// Assembles `Q` as a dense matrix; oracle-sized inputs only.
    pub fn to_dense_precision(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut w = DMatrix::identity(n, n);
        for (k, row) in self.a.iter().enumerate() {
            for (c, v) in row.cols.iter().zip(&row.vals) {
                w[(k, *c)] = -v;
            }
        }
        let dinv = DMatrix::from_diagonal(&DVector::from_iterator(
            n,
            self.d.iter().map(|d| 1.0 / d),
        ));
        w.transpose() * dinv * w
    }

    /// Sorted upper-triangle triplets `(row, col, value)` of `Q`, row-major.
    pub fn precision_triplets(&self) -> Vec<(usize, usize, f64)> {
        use std::collections::HashMap;
        let n = self.n();
        let mut acc: HashMap<(usize, usize), f64> = HashMap::new();
        for (k, row) in self.a.iter().enumerate() {
            // Row k of W = I - A contributes W_k' W_k / D_k.
            let mut entries: Vec<(usize, f64)> = Vec::with_capacity(row.cols.len() + 1);
            entries.push((k, 1.0));
            for (c, v) in row.cols.iter().zip(&row.vals) {
                entries.push((*c, -*v));
            }
            let inv_d = 1.0 / self.d[k];
            for (ci, vi) in &entries {
                for (cj, vj) in &entries {
                    if ci <= cj {
                        *acc.entry((*ci, *cj)).or_insert(0.0) += vi * vj * inv_d;
                    }
                }
            }
        }
        let mut out: Vec<(usize, usize, f64)> =
            acc.into_iter().map(|((i, j), v)| (i, j, v)).collect();
        out.sort_unstable_by_key(|&(i, j, _)| (i, j));
        debug_assert!(out.iter().all(|&(i, j, _)| i < n && j < n));
        out
    }
}

/// Number of parallel work chunks; fixed so floating-point reduction order
/// does not depend on the thread count.
pub(crate) const PAR_CHUNK: usize = 512;

/// Builds `A` and `D` from the observed-data covariance (process + nugget on
/// the diagonal): row `k` of `A` is `Sigma_{k,N(k)} Sigma_{N(k),N(k)}^-1`
/// and `D_k` the corresponding conditional variance, `D_0 = Sigma_{0,0}`.
///
/// A singular neighbor covariance is retried once with a small diagonal
/// jitter and reported as an error if the retry fails.
pub fn build_factors(
    cov: &NonstationaryCovariance,
    ordered: &[SpaceTimePoint],
    plan: &VecchiaPlan,
) -> Result<SparseFactors> {
    if plan.n() != ordered.len() {
        return Err(Error::InvalidArgument(
            "plan size does not match point count".into(),
        ));
    }
    let warped = cov.warp.warp_points(ordered);
    let sigma2 = cov.kernel.sigma2();
    let tau2 = cov.tau2;
    let marginal = sigma2 + tau2;

    let results: Vec<Result<(SparseRow, f64)>> = (0..ordered.len())
        .collect::<Vec<_>>()
        .par_chunks(PAR_CHUNK)
        .flat_map_iter(|chunk| {
            chunk.iter().map(|&k| {
                let nb = &plan.neighbors[k];
                if nb.is_empty() {
                    return Ok((
                        SparseRow {
                            cols: Vec::new(),
                            vals: Vec::new(),
                        },
                        marginal,
                    ));
                }
                let msize = nb.len();
                let mut kmat = DMatrix::zeros(msize, msize);
                for (i, &pi) in nb.iter().enumerate() {
                    kmat[(i, i)] = marginal;
                    for (j, &pj) in nb.iter().enumerate().take(i) {
                        let v = cov.kernel.eval_warped(&warped[pi], &warped[pj]);
                        kmat[(i, j)] = v;
                        kmat[(j, i)] = v;
                    }
                }
                let cvec = DVector::from_iterator(
                    msize,
                    nb.iter()
                        .map(|&pj| cov.kernel.eval_warped(&warped[k], &warped[pj])),
                );
                let chol = match kmat.clone().cholesky() {
                    Some(c) => c,
                    None => {
                        for i in 0..msize {
                            kmat[(i, i)] += NEIGHBOR_JITTER * sigma2;
                        }
                        kmat.cholesky()
                            .ok_or(Error::SingularNeighborCovariance { index: k })?
                    }
                };
                let weights = chol.solve(&cvec);
                let dk = marginal - cvec.dot(&weights);
                Ok((
                    SparseRow {
                        cols: nb.clone(),
                        vals: weights.iter().copied().collect(),
                    },
                    dk,
                ))
            })
        })
        .collect();

    let mut a = Vec::with_capacity(ordered.len());
    let mut d = Vec::with_capacity(ordered.len());
    for r in results {
        let (row, dk) = r?;
        a.push(row);
        d.push(dk);
    }
    Ok(SparseFactors { a, d })
}
