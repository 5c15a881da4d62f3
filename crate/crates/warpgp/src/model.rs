//! Model architecture descriptions: which warping units compose the spatial
//! and temporal maps, which kernel family sits on the warped domain, and
//! (optionally) explicit parameter values. These are the serializable specs
//! that config files carry; [`crate::inference`] turns them into live models.

use serde::{Deserialize, Serialize};

use crate::covariance::{AsymmetricExpKernel, Kernel, NonstationaryCovariance, SeparableExpKernel};
use crate::error::{Error, Result};
use crate::warp::{
    Axis, AxialWarpUnit, DomainScaling, RbfWarpUnit, SpatialWarpUnit, TemporalWarp, WarpingMap,
};

/// Sigmoid weights start just above zero so the identity warp is reachable.
pub const AXIAL_INIT_WEIGHT: f64 = 1e-4;

fn default_axial_r() -> usize {
    10
}

fn default_rbf_grid() -> usize {
    4
}

fn default_rbf_radius_factor() -> f64 {
    1.5
}

fn default_true() -> bool {
    true
}

/// One spatial warping unit. `weights` pins explicit values (truth models,
/// resumed fits); fits otherwise start from the identity configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpatialUnitSpec {
    AxialS1 {
        #[serde(default = "default_axial_r")]
        r: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
    AxialS2 {
        #[serde(default = "default_axial_r")]
        r: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
    Rbf {
        #[serde(default = "default_rbf_grid")]
        grid: usize,
        #[serde(default = "default_rbf_radius_factor")]
        radius_factor: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TemporalSpec {
    Identity,
    Axial {
        #[serde(default = "default_axial_r")]
        r: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
}

/// Warping architecture: ordered spatial units, the temporal unit, and the
/// per-layer normalization flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarpSpec {
    #[serde(default)]
    pub spatial: Vec<SpatialUnitSpec>,
    pub temporal: TemporalSpec,
    #[serde(default = "default_true")]
    pub normalize: bool,
}

impl WarpSpec {
    pub fn identity() -> Self {
        Self {
            spatial: Vec::new(),
            temporal: TemporalSpec::Identity,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Separable,
    Asymmetric,
}

/// Optional explicit parameter values. Truth models in simulation studies
/// must pin everything; fit initializations may pin a subset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamValues {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau2: Option<f64>,
}

/// A complete model description: kernel family + warping architecture +
/// optional explicit values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kernel: KernelFamily,
    pub warp: WarpSpec,
    #[serde(default)]
    pub values: ParamValues,
}

impl ModelSpec {
    pub fn stationary_separable() -> Self {
        Self {
            kernel: KernelFamily::Separable,
            warp: WarpSpec::identity(),
            values: ParamValues::default(),
        }
    }

    /// Materializes the warping map. Units without explicit weights start at
    /// the identity configuration (axial: `w = (1, eps, ...)`; RBF: zeros).
    pub fn build_warp(&self, scaling: DomainScaling) -> Result<WarpingMap> {
        let mut spatial_units = Vec::with_capacity(self.warp.spatial.len());
        for unit in &self.warp.spatial {
            spatial_units.push(build_spatial_unit(unit)?);
        }
        let temporal_unit = match &self.warp.temporal {
            TemporalSpec::Identity => TemporalWarp::Identity,
            TemporalSpec::Axial { r, weights } => {
                TemporalWarp::Axial(build_axial(*r, weights.as_deref())?)
            }
        };
        Ok(WarpingMap {
            scaling,
            spatial_units,
            temporal_unit,
            normalize: self.warp.normalize,
        })
    }

    /// Builds the full covariance from explicit values; errors if anything
    /// the kernel family needs is missing. Used for truth models.
    pub fn instantiate(&self, scaling: DomainScaling) -> Result<NonstationaryCovariance> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| Error::Config(format!("model values must pin `{name}`")))
        };
        let kernel = match self.kernel {
            KernelFamily::Separable => Kernel::Separable(SeparableExpKernel {
                sigma2: need(self.values.sigma2, "sigma2")?,
                a_s: need(self.values.a_s, "a_s")?,
                a_t: need(self.values.a_t, "a_t")?,
            }),
            KernelFamily::Asymmetric => Kernel::Asymmetric(AsymmetricExpKernel {
                sigma2: need(self.values.sigma2, "sigma2")?,
                a: need(self.values.a, "a")?,
                velocity: self
                    .values
                    .velocity
                    .ok_or_else(|| Error::Config("model values must pin `velocity`".into()))?,
            }),
        };
        let tau2 = need(self.values.tau2, "tau2")?;
        if !kernel.is_valid() || tau2 < 0.0 {
            return Err(Error::Config(
                "kernel parameters must be positive (and tau2 >= 0)".into(),
            ));
        }
        let has_explicit_weights = self.warp.spatial.iter().all(|u| match u {
            SpatialUnitSpec::AxialS1 { weights, .. }
            | SpatialUnitSpec::AxialS2 { weights, .. }
            | SpatialUnitSpec::Rbf { weights, .. } => weights.is_some(),
        }) && match &self.warp.temporal {
            TemporalSpec::Identity => true,
            TemporalSpec::Axial { weights, .. } => weights.is_some(),
        };
        if !has_explicit_weights {
            return Err(Error::Config(
                "truth model must pin every warping unit's weights".into(),
            ));
        }
        Ok(NonstationaryCovariance::new(
            self.build_warp(scaling)?,
            kernel,
            tau2,
        ))
    }

    /// A stable string identifying the fit-relevant part of the spec (kernel
    /// family + architecture, ignoring explicit values), used to share fits
    /// between study rows that differ only in prediction settings.
    pub fn fit_key(&self) -> String {
        let arch = serde_json::json!({
            "kernel": match self.kernel {
                KernelFamily::Separable => "separable",
                KernelFamily::Asymmetric => "asymmetric",
            },
            "warp": &self.warp,
        });
        arch.to_string()
    }
}

fn build_axial(r: usize, weights: Option<&[f64]>) -> Result<AxialWarpUnit> {
    if r < 1 {
        return Err(Error::Config("axial unit needs r >= 1".into()));
    }
    let w = match weights {
        Some(w) => {
            if w.len() != r {
                return Err(Error::Config(format!(
                    "axial unit with r = {r} needs {r} weights, got {}",
                    w.len()
                )));
            }
            if w.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config("axial weights must be positive".into()));
            }
            w.to_vec()
        }
        None => {
            let mut w = vec![AXIAL_INIT_WEIGHT; r];
            w[0] = 1.0;
            w
        }
    };
    Ok(AxialWarpUnit::with_default_basis(r, -0.5, 0.5, w))
}

fn build_spatial_unit(spec: &SpatialUnitSpec) -> Result<SpatialWarpUnit> {
    match spec {
        SpatialUnitSpec::AxialS1 { r, weights } => Ok(SpatialWarpUnit::Axial {
            axis: Axis::S1,
            unit: build_axial(*r, weights.as_deref())?,
        }),
        SpatialUnitSpec::AxialS2 { r, weights } => Ok(SpatialWarpUnit::Axial {
            axis: Axis::S2,
            unit: build_axial(*r, weights.as_deref())?,
        }),
        SpatialUnitSpec::Rbf {
            grid,
            radius_factor,
            weights,
        } => {
            if *grid < 2 {
                return Err(Error::Config("rbf unit needs grid >= 2".into()));
            }
            let k = grid * grid;
            let w = match weights {
                Some(w) => {
                    if w.len() != k {
                        return Err(Error::Config(format!(
                            "rbf unit with grid = {grid} needs {k} weights, got {}",
                            w.len()
                        )));
                    }
                    w.to_vec()
                }
                None => vec![0.0; k],
            };
            Ok(SpatialWarpUnit::Rbf(RbfWarpUnit::grid(
                *grid,
                *radius_factor,
                w,
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let text = r#"
kernel = "separable"

[warp]
temporal = { kind = "axial", r = 10 }

[[warp.spatial]]
kind = "rbf"

[[warp.spatial]]
kind = "rbf"
grid = 4
"#;
        let spec: ModelSpec = toml::from_str(text).unwrap();
        assert_eq!(spec.kernel, KernelFamily::Separable);
        assert_eq!(spec.warp.spatial.len(), 2);
        assert!(spec.warp.normalize);
        let back = toml::to_string(&spec).unwrap();
        let again: ModelSpec = toml::from_str(&back).unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"
kernel = "separable"
[warp]
temporal = { kind = "identity" }
bogus = 3
"#;
        let err = toml::from_str::<ModelSpec>(text).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn identity_init_builds_identity_like_warp() {
        let spec = ModelSpec {
            kernel: KernelFamily::Separable,
            warp: WarpSpec {
                spatial: vec![SpatialUnitSpec::Rbf {
                    grid: 4,
                    radius_factor: 1.5,
                    weights: None,
                }],
                temporal: TemporalSpec::Identity,
                normalize: true,
            },
            values: ParamValues::default(),
        };
        let warp = spec.build_warp(DomainScaling::identity()).unwrap();
        // Zero RBF weights + normalization over the full square = identity.
        for s in [[-0.4, 0.2], [0.0, 0.0], [0.5, -0.5]] {
            let w = warp.warp_space(s);
            assert!((w[0] - s[0]).abs() < 1e-12 && (w[1] - s[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn truth_instantiation_requires_values() {
        let spec = ModelSpec::stationary_separable();
        assert!(spec.instantiate(DomainScaling::identity()).is_err());

        let mut full = ModelSpec::stationary_separable();
        full.values = ParamValues {
            sigma2: Some(1.0),
            a_s: Some(8.0),
            a_t: Some(4.0),
            tau2: Some(0.1),
            ..Default::default()
        };
        let cov = full.instantiate(DomainScaling::identity()).unwrap();
        assert!(cov.is_valid());
    }

    #[test]
    fn fit_key_ignores_values_but_not_architecture() {
        let mut a = ModelSpec::stationary_separable();
        let mut b = ModelSpec::stationary_separable();
        b.values.sigma2 = Some(3.0);
        assert_eq!(a.fit_key(), b.fit_key());
        a.warp.spatial.push(SpatialUnitSpec::Rbf {
            grid: 4,
            radius_factor: 1.5,
            weights: None,
        });
        assert_ne!(a.fit_key(), b.fit_key());
    }
}
