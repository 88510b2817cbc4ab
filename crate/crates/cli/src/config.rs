//! Run configuration: a sectioned key-value file (TOML) describing the field
//! system plus per-subcommand parameters. Expressions are quoted strings in
//! the symbolic grammar (`sin(x1)`, `1/2*x2`, ...).

use serde::Deserialize;
use subelliptic::vecfield::Domain;
use subelliptic::{FieldSystem, VectorField};

/// Raised for any malformed or inconsistent configuration; always maps to
/// exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random choice in a run derives from it.
    #[serde(default)]
    pub seed: u64,
    pub system: SystemSection,
    #[serde(default)]
    pub hormander: HormanderSection,
    #[serde(default)]
    pub bch: BchSection,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub holder: HolderSection,
    #[serde(default)]
    pub subell: SubellSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub dimension: usize,
    /// "torus" (period 2π) or "box" (sampling cube, needs `half_width`).
    #[serde(default = "default_domain")]
    pub domain: String,
    #[serde(default)]
    pub half_width: Option<f64>,
    /// One inner list of coefficient expressions per generating field.
    pub fields: Vec<Vec<String>>,
}

fn default_domain() -> String {
    "torus".to_string()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HormanderSection {
    /// Commutator length for the main criteria run.
    pub order: usize,
    /// Upper bound for the rank search.
    pub r_max: usize,
    /// Torus sampling density (points per axis) or box sample count.
    pub samples: usize,
    pub sigma_tol: f64,
}

impl Default for HormanderSection {
    fn default() -> Self {
        HormanderSection {
            order: 2,
            r_max: 4,
            samples: 32,
            sigma_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BchSection {
    /// Truncation order N of the corrected flow product (capped at 6).
    pub order: usize,
    /// Base point for the defect measurements; padded/truncated to `dimension`.
    pub base_point: Vec<f64>,
    pub tol: f64,
}

impl Default for BchSection {
    fn default() -> Self {
        BchSection {
            order: 2,
            base_point: vec![0.7, 0.3],
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub tol: f64,
    /// The two times used in the group-law check exp(tX)exp(sX) = exp((s+t)X).
    pub s: f64,
    pub t: f64,
    /// Defects above this fail the check (exit 1).
    pub defect_tol: f64,
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection {
            tol: 1e-10,
            s: 0.3,
            t: 0.4,
            defect_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HolderSection {
    pub gamma: f64,
    /// Commutator depth r entering the exponent γ/r of the universal norm.
    pub depth: usize,
    pub grids: Vec<usize>,
    pub test_functions: usize,
    pub max_freq: i64,
    /// Growth ratio between successive grids above which the check fails.
    pub ratio_tol: f64,
}

impl Default for HolderSection {
    fn default() -> Self {
        HolderSection {
            gamma: 1.0,
            depth: 2,
            grids: vec![16, 32],
            test_functions: 8,
            max_freq: 3,
            ratio_tol: 1.25,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubellSection {
    pub gammas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub grids: Vec<usize>,
    /// γ values tried by the order scan when locating γ*.
    pub gamma_scan: Vec<f64>,
    /// Ratio thresholds for the bounded/growing verdicts.
    pub bounded_ratio: f64,
    pub growing_ratio: f64,
}

impl Default for SubellSection {
    fn default() -> Self {
        SubellSection {
            gammas: vec![0.5],
            alphas: vec![1.0],
            grids: vec![8, 16, 32],
            gamma_scan: vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            bounded_ratio: 1.2,
            growing_ratio: 1.5,
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| ConfigError(format!("parse failure: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let d = self.system.dimension;
        if d == 0 {
            return err("dimension must be at least 1");
        }
        if self.system.fields.is_empty() {
            return err("at least one generating field is required");
        }
        for (i, coeffs) in self.system.fields.iter().enumerate() {
            if coeffs.len() != d {
                return err(format!(
                    "field {} has {} coefficients, expected {d}",
                    i + 1,
                    coeffs.len()
                ));
            }
        }
        match self.system.domain.as_str() {
            "torus" => {}
            "box" => {
                let hw = self
                    .system
                    .half_width
                    .ok_or_else(|| ConfigError("box domain needs half_width".into()))?;
                if !hw.is_finite() || hw <= 0.0 {
                    return err("half_width must be positive");
                }
            }
            other => return err(format!("unknown domain {other:?} (torus or box)")),
        }
        for &n in self.holder.grids.iter().chain(self.subell.grids.iter()) {
            if n == 0 || !n.is_power_of_two() {
                return err(format!("grid size {n} is not a power of two"));
            }
        }
        for &g in self
            .subell
            .gammas
            .iter()
            .chain(self.subell.gamma_scan.iter())
            .chain(std::iter::once(&self.holder.gamma))
        {
            if g.is_nan() || g <= 0.0 || g > 1.0 {
                return err(format!("gamma {g} outside (0, 1]"));
            }
        }
        for &a in &self.subell.alphas {
            if !a.is_finite() || a < 0.0 {
                return err(format!("alpha {a} must be nonnegative"));
            }
        }
        if self.subell.bounded_ratio > self.subell.growing_ratio {
            return err(format!(
                "bounded_ratio {} exceeds growing_ratio {}",
                self.subell.bounded_ratio, self.subell.growing_ratio
            ));
        }
        if self.bch.order == 0 || self.bch.order > 6 {
            return err(format!(
                "flow-product truncation order {} outside the supported range 1..=6",
                self.bch.order
            ));
        }
        if self.hormander.order == 0 || self.hormander.r_max == 0 {
            return err("commutator orders must be at least 1");
        }
        if self.hormander.samples == 0 {
            return err("sample count must be positive");
        }
        if self.holder.depth == 0 {
            return err("holder depth must be at least 1");
        }
        Ok(())
    }

    /// Parses the coefficient strings into the symbolic field system.
    pub fn build_system(&self) -> Result<FieldSystem, ConfigError> {
        let d = self.system.dimension;
        let mut fields = Vec::with_capacity(self.system.fields.len());
        for (i, coeffs) in self.system.fields.iter().enumerate() {
            let exprs = coeffs
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    subelliptic::symexpr::parse(s, d).map_err(|e| {
                        ConfigError(format!("field {} coefficient {}: {e}", i + 1, j + 1))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            fields.push(
                VectorField::new(d, exprs)
                    .map_err(|e| ConfigError(format!("field {}: {e}", i + 1)))?,
            );
        }
        let domain = match self.system.domain.as_str() {
            "torus" => Domain::Torus,
            _ => Domain::Box {
                half_width: self.system.half_width.unwrap(),
            },
        };
        FieldSystem::new(fields, domain).map_err(|e| ConfigError(e.to_string()))
    }

    /// Base point for flow experiments, padded with zeros to the dimension.
    pub fn base_point(&self) -> Vec<f64> {
        let mut p = self.bch.base_point.clone();
        p.resize(self.system.dimension, 0.0);
        p
    }
}
