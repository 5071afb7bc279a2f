//! Experiment files.
//!
//! Every field is required; there are no hidden defaults. Unknown keys are
//! rejected so that typos surface as validation errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fbmlab::kernels::{KernelSpec, ThetaLaw};
use fbmlab::particles::{PlacementRule, WindowPolicy};
use fbmlab::stable::StableParams;
use fbmlab::step::TestFamily;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// The statement the experiment checks, as listed in the catalog.
    pub statement: String,
    pub description: String,
    pub seed: u64,
    pub replicates: usize,
    pub grid: Vec<f64>,
    pub model: ModelConfig,
    /// Oracle kernel per family name.
    pub oracle: BTreeMap<String, KernelSpec>,
    pub check: CheckConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Density {
        alpha: StableParams,
        scale_t: f64,
        theta: ThetaLaw,
        placement: PlacementRule,
        window: WindowPolicy,
        families: Vec<String>,
    },
    RescaledLattice {
        alpha: StableParams,
        scale_t: f64,
        count: u32,
        placement: PlacementRule,
        window: WindowPolicy,
        families: Vec<String>,
    },
    Occupation {
        alpha: StableParams,
        intensity: f64,
        horizon: f64,
        dt: f64,
        families: Vec<String>,
    },
    OccupationBranching {
        alpha: StableParams,
        intensity: f64,
        rate_v: f64,
        horizon: f64,
        dt: f64,
        radius: f64,
        max_ancestors: f64,
        families: Vec<String>,
    },
    KernelOnly {
        spec: KernelSpec,
    },
    ReferenceGaussian {
        spec: KernelSpec,
    },
}

/// How the gap between a finite system and its limit enters a comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FiniteSize {
    /// Compare with the oracle kernel as is.
    None,
    /// Add `|exact finite-system covariance − fitted oracle|` to each error.
    FoldBias,
    /// Compare with the exact finite-system covariance instead.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedSign {
    Negative,
    Null,
    Positive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckConfig {
    Covariance {
        threshold: f64,
        fit_constant: bool,
        finite_size: FiniteSize,
    },
    IncrementSign {
        family: String,
        quadruple: [f64; 4],
        expect: ExpectedSign,
    },
    /// Normalized Gram matrices of the model kernel and `reference` agree.
    KernelMatch {
        reference: KernelSpec,
        rel_tol: f64,
    },
    Psd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub format: Format,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

impl ModelConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Density { .. } => "density",
            Self::RescaledLattice { .. } => "rescaled_lattice",
            Self::Occupation { .. } => "occupation",
            Self::OccupationBranching { .. } => "occupation_branching",
            Self::KernelOnly { .. } => "kernel_only",
            Self::ReferenceGaussian { .. } => "reference_gaussian",
        }
    }

    pub fn family_names(&self) -> &[String] {
        match self {
            Self::Density { families, .. }
            | Self::RescaledLattice { families, .. }
            | Self::Occupation { families, .. }
            | Self::OccupationBranching { families, .. } => families,
            Self::KernelOnly { .. } | Self::ReferenceGaussian { .. } => &[],
        }
    }

    pub fn families(&self) -> Result<Vec<TestFamily>, CliError> {
        self.family_names()
            .iter()
            .map(|f| TestFamily::parse(f).map_err(|e| invalid(e.to_string())))
            .collect()
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Validation(m) => invalid(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every precondition that can be checked without simulating.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(invalid("name must be a nonempty file-name-safe string"));
        }
        if self.replicates < 2 && !matches!(self.model, ModelConfig::KernelOnly { .. }) {
            return Err(invalid("replicates must be at least 2"));
        }
        if self.grid.is_empty() || self.grid[0] <= 0.0 || self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("grid must be positive and strictly increasing"));
        }
        let families = self.model.families()?;
        let lift = |e: fbmlab::Error| CliError::from(e);
        match &self.model {
            ModelConfig::Density { scale_t, theta, placement, .. } => {
                theta.validate().map_err(lift)?;
                placement.validate().map_err(lift)?;
                positive("scale_t", *scale_t)?;
            }
            ModelConfig::RescaledLattice { alpha, scale_t, count, placement, .. } => {
                if alpha.alpha() >= 1.0 {
                    return Err(invalid(format!(
                        "rescaled_lattice requires alpha < 1 (the rescaled lattice field is only defined there), got alpha = {}",
                        alpha.alpha()
                    )));
                }
                if *count == 0 {
                    return Err(invalid("rescaled_lattice needs at least one particle per cell"));
                }
                placement.validate().map_err(lift)?;
                positive("scale_t", *scale_t)?;
            }
            ModelConfig::Occupation { alpha, intensity, horizon, dt, .. } => {
                positive("intensity", *intensity)?;
                fbmlab::particles::OccupationModel { intensity: *intensity, alpha: *alpha, horizon: *horizon, dt: *dt }
                    .validate()
                    .map_err(lift)?;
                if alpha.alpha() >= 1.0 && families.iter().any(|f| !f.is_odd()) {
                    return Err(invalid(
                        "occupation with alpha >= 1 only has a limit for odd families (use odd_pair)",
                    ));
                }
            }
            ModelConfig::OccupationBranching { alpha, intensity, rate_v, horizon, dt, radius, max_ancestors, .. } => {
                if families.iter().any(|f| !f.is_odd()) {
                    return Err(invalid("occupation_branching is defined for odd families only"));
                }
                fbmlab::particles::BranchingOccupationModel {
                    intensity: *intensity,
                    rate_v: *rate_v,
                    alpha: *alpha,
                    horizon: *horizon,
                    dt: *dt,
                    radius: *radius,
                    max_ancestors: *max_ancestors,
                }
                .validate()
                .map_err(lift)?;
            }
            ModelConfig::KernelOnly { spec } | ModelConfig::ReferenceGaussian { spec } => {
                spec.validate().map_err(lift)?;
            }
        }
        if families.is_empty() && self.model.family_names().is_empty() && !self.oracle.is_empty() {
            return Err(invalid("oracle entries need a model with families"));
        }
        for (name, spec) in &self.oracle {
            if !self.model.family_names().contains(name) {
                return Err(invalid(format!("oracle given for family '{name}' which the model does not simulate")));
            }
            spec.validate().map_err(lift)?;
        }
        match &self.check {
            CheckConfig::Covariance { threshold, finite_size, .. } => {
                positive("threshold", *threshold)?;
                if let ModelConfig::KernelOnly { .. } = self.model {
                    return Err(invalid("kernel_only has nothing to estimate; use a kernel_match or psd check"));
                }
                let simulated = !matches!(self.model, ModelConfig::ReferenceGaussian { .. });
                if simulated {
                    for f in self.model.family_names() {
                        if !self.oracle.contains_key(f) {
                            return Err(invalid(format!("no oracle kernel for family '{f}'")));
                        }
                    }
                } else if *finite_size != FiniteSize::None {
                    return Err(invalid("reference_gaussian has no finite-size correction"));
                }
            }
            CheckConfig::IncrementSign { family, quadruple, .. } => {
                if !self.model.family_names().contains(family) {
                    return Err(invalid(format!("sign test family '{family}' is not simulated")));
                }
                let [s, t, u, v] = *quadruple;
                if !(s < t && t <= u && u < v) {
                    return Err(invalid("sign test needs s < t <= u < v"));
                }
                for x in quadruple {
                    if !self.grid.iter().any(|g| (g - x).abs() <= 1e-12 * x.abs().max(1.0)) {
                        return Err(invalid(format!("sign test time {x} is not on the grid")));
                    }
                }
            }
            CheckConfig::KernelMatch { reference, rel_tol } => {
                if !matches!(self.model, ModelConfig::KernelOnly { .. }) {
                    return Err(invalid("kernel_match applies to kernel_only models"));
                }
                reference.validate().map_err(lift)?;
                positive("rel_tol", *rel_tol)?;
            }
            CheckConfig::Psd => {
                if !matches!(self.model, ModelConfig::KernelOnly { .. }) {
                    return Err(invalid("psd checks apply to kernel_only models"));
                }
            }
        }
        Ok(())
    }
}

fn positive(name: &str, x: f64) -> Result<(), CliError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be positive and finite, got {x}")))
    }
}
