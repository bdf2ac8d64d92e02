//! Coordinator (TOML) and data-holder (key=value) configuration files.

use crate::error::{FederationError, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Centre likelihoods are summed as they are.
    #[default]
    Pooled,
    /// Each centre is rescaled to the size of the largest one before summing.
    EqualCentre,
}

fn default_max_iterations() -> usize {
    50
}

fn default_n_groups() -> usize {
    4
}

/// Coordinator settings. Key names follow the reference implementation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(rename = "FeaturesToOptimizeFrom")]
    pub features: Vec<String>,
    /// Design columns that enter and leave a model together (dummy levels).
    #[serde(rename = "FeaturesLevelSets", default)]
    pub level_sets: Vec<Vec<String>>,
    #[serde(rename = "GlobalSeed")]
    pub global_seed: u64,
    #[serde(rename = "NbootCV")]
    pub n_boot_cv: usize,
    #[serde(rename = "NbootModelInfo")]
    pub n_boot_model_info: usize,
    #[serde(rename = "ConvergTolerance")]
    pub tolerance: f64,
    #[serde(rename = "Alpha")]
    pub alpha: f64,
    /// Absent: split at each centre's 25% and 75% linear-predictor quantiles.
    /// Empty: no split.
    #[serde(rename = "PI_thresholds", default)]
    pub pi_thresholds: Option<Vec<f64>>,
    #[serde(rename = "CalPlotTimePoints", default)]
    pub cal_time_points: Vec<f64>,
    #[serde(rename = "NrCalPlotTimePoints", default = "default_n_groups")]
    pub cal_groups: usize,
    #[serde(rename = "NAllowedMissing")]
    pub n_allowed_missing: usize,
    #[serde(rename = "Weighting", default)]
    pub weighting: Weighting,
    #[serde(rename = "MaxIterations", default = "default_max_iterations")]
    pub max_iterations: usize,
}

impl OptimizerConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| FederationError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| FederationError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FederationError::Config(m));
        if self.features.is_empty() {
            return bad("FeaturesToOptimizeFrom is empty".into());
        }
        if self.n_boot_cv < 2 || self.n_boot_model_info < self.n_boot_cv {
            return bad(format!(
                "need NbootModelInfo >= NbootCV >= 2, got {} and {}",
                self.n_boot_model_info, self.n_boot_cv
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("Alpha {} outside (0, 1)", self.alpha));
        }
        if !(self.tolerance > 0.0) {
            return bad("ConvergTolerance must be positive".into());
        }
        if self.max_iterations == 0 {
            return bad("MaxIterations must be positive".into());
        }
        if self.cal_groups == 0 {
            return bad("NrCalPlotTimePoints must be positive".into());
        }
        if self.cal_time_points.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return bad("CalPlotTimePoints must be nonnegative".into());
        }
        if let Some(t) = &self.pi_thresholds {
            if t.windows(2).any(|w| !(w[0] < w[1])) {
                return bad("PI_thresholds must be strictly ascending".into());
            }
        }
        let mut seen = std::collections::HashSet::new();
        for f in &self.features {
            if !seen.insert(f) {
                return bad(format!("feature {f} listed twice"));
            }
        }
        let mut grouped = std::collections::HashSet::new();
        for set in &self.level_sets {
            if set.is_empty() {
                return bad("empty level set".into());
            }
            for f in set {
                if !self.features.contains(f) {
                    return bad(format!("level set member {f} is not in FeaturesToOptimizeFrom"));
                }
                if !grouped.insert(f) {
                    return bad(format!("{f} appears in two level sets"));
                }
            }
        }
        Ok(())
    }
}

/// Data-holder settings read from a `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalConfig {
    pub data_paths: Vec<PathBuf>,
    pub local_seed: u64,
    pub nr_pt_per_bin: usize,
    /// Overrides the coordinator's value when set.
    pub n_allowed_missing: Option<usize>,
}

impl LocalConfig {
    /// Parses the file body; relative data paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut data_paths = None;
        let mut local_seed = None;
        let mut nr_pt_per_bin = None;
        let mut n_allowed_missing = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| FederationError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| {
                v.parse::<u64>().map_err(|_| {
                    FederationError::Config(format!("line {}: {key} must be a nonnegative integer", lineno + 1))
                })
            };
            match key {
                "DataPaths" => {
                    data_paths = Some(
                        value
                            .split(',')
                            .map(str::trim)
                            .filter(|p| !p.is_empty())
                            .map(|p| base.join(p))
                            .collect::<Vec<_>>(),
                    )
                }
                "LocalSeed" => local_seed = Some(num(value)?),
                "NrPtPerBin" => nr_pt_per_bin = Some(num(value)? as usize),
                "NAllowedMissing" => n_allowed_missing = Some(num(value)? as usize),
                other => return Err(FederationError::Config(format!("unknown local key {other}"))),
            }
        }
        let cfg = Self {
            data_paths: data_paths.ok_or_else(|| FederationError::Config("DataPaths missing".into()))?,
            local_seed: local_seed.ok_or_else(|| FederationError::Config("LocalSeed missing".into()))?,
            nr_pt_per_bin: nr_pt_per_bin.ok_or_else(|| FederationError::Config("NrPtPerBin missing".into()))?,
            n_allowed_missing,
        };
        if cfg.data_paths.is_empty() {
            return Err(FederationError::Config("DataPaths is empty".into()));
        }
        if cfg.nr_pt_per_bin == 0 {
            return Err(FederationError::Config("NrPtPerBin must be at least 1".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| FederationError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_text(&self) -> String {
        let paths: Vec<String> = self.data_paths.iter().map(|p| p.display().to_string()).collect();
        let mut s = format!(
            "DataPaths = {}\nLocalSeed = {}\nNrPtPerBin = {}\n",
            paths.join(", "),
            self.local_seed,
            self.nr_pt_per_bin
        );
        if let Some(n) = self.n_allowed_missing {
            s.push_str(&format!("NAllowedMissing = {n}\n"));
        }
        s
    }
}
