//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use reflmap::bounds::MonteCarloOptions;
use reflmap::envsim::{Activation, EnvironmentSpec, NoiseModel};
use reflmap::localizer::{LocalizeConfig, ScoreOptions};
use reflmap::mapbuilder::{ConvolutionMethod, RecoveryOptions};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub environment: EnvironmentSpec,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub offline: OfflineConfig,
    #[serde(default)]
    pub online: OnlineConfig,
    #[serde(default)]
    pub cdf: CdfConfig,
    #[serde(default)]
    pub bounds: BoundsConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma_theta_deg: f64,
    pub sigma_tau_ns: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { sigma_theta_deg: 0.345, sigma_tau_ns: 3.0 }
    }
}

impl NoiseConfig {
    pub fn model(&self, seed: u64) -> Result<NoiseModel, CliError> {
        Ok(NoiseModel::from_degrees_ns(self.sigma_theta_deg, self.sigma_tau_ns, seed)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SheafKind {
    /// Quantile threshold of the recovered field.
    #[default]
    Quantile,
    /// Union of per-sample confidence ellipses.
    GaussianUnion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convolution {
    #[default]
    Fft,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineConfig {
    /// Test-point spacing along the rol boundary (m).
    pub spacing: f64,
    /// Inward offset of the test points (m).
    pub offset: f64,
    pub n_r: usize,
    pub activation: Activation,
    pub visibility: bool,
    pub alpha: f64,
    pub iterations: usize,
    /// Band limit (cycles/m).
    pub lambda_m: f64,
    pub epsilon: f64,
    /// Map grid pitch (m).
    pub pitch: f64,
    /// Map grid margin around the boundary (m).
    pub pad: f64,
    pub sheaf: SheafKind,
    pub convolution: Convolution,
    /// Frequencies `[λ1, λ2]` of the convergence curve (cycles/m).
    pub convergence_lambdas: Vec<[f64; 2]>,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            spacing: 0.5,
            offset: 0.5,
            n_r: 8,
            activation: Activation::AllVisible,
            visibility: false,
            alpha: 0.2,
            iterations: 10,
            lambda_m: 1.0,
            epsilon: 0.05,
            pitch: 0.25,
            pad: 5.0,
            sheaf: SheafKind::Quantile,
            convolution: Convolution::Fft,
            convergence_lambdas: vec![[0.001, 0.001], [0.002, 0.002], [0.003, 0.003], [0.004, 0.004], [0.005, 0.005]],
        }
    }
}

impl OfflineConfig {
    pub fn recovery(&self) -> RecoveryOptions {
        RecoveryOptions {
            alpha: self.alpha,
            iterations: self.iterations,
            lambda_m: self.lambda_m,
            method: match self.convolution {
                Convolution::Fft => ConvolutionMethod::Fft,
                Convolution::Direct => ConvolutionMethod::Direct,
            },
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineConfig {
    pub n_r: usize,
    pub activation: Activation,
    /// User positions drawn by `simulate`.
    pub positions: usize,
    /// Pitch of the optional score-surface dump written by `localize` (m).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub surface_pitch: Option<f64>,
    pub score: ScoreOptions,
    pub localize: LocalizeConfig,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            n_r: 4,
            activation: Activation::Uniform,
            positions: 20,
            surface_pitch: None,
            score: ScoreOptions::default(),
            localize: LocalizeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CdfConfig {
    pub trials: usize,
    /// `[σ_θ (deg), σ_τ (ns)]` levels swept at `fixed_n_r`.
    pub noise_levels: Vec<[f64; 2]>,
    pub fixed_n_r: usize,
    /// Path counts swept at the base noise of `[noise]`.
    pub n_r_values: Vec<usize>,
    /// Side of the square rol used instead of the full one when `n_r = 2`
    /// (m, centered on the rol centroid).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub two_path_rol_side: Option<f64>,
}

impl Default for CdfConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            noise_levels: vec![[1.38, 12.0], [0.69, 6.0], [0.345, 3.0]],
            fixed_n_r: 4,
            n_r_values: vec![2, 4, 8],
            two_path_rol_side: Some(12.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    /// Localization area of the analytic sweep (m²).
    pub vol_sa: f64,
    pub sweep_ratios: Vec<f64>,
    pub sweep_n_r: Vec<u32>,
    /// Ratios with a Monte Carlo ensemble.
    pub ensemble_ratios: Vec<f64>,
    pub monte_carlo: MonteCarloOptions,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            vol_sa: 40_000.0,
            sweep_ratios: vec![1.0, 2.0, 4.0, 8.0, 15.9, 31.8, 64.0],
            sweep_n_r: vec![1, 2, 3, 4],
            ensemble_ratios: vec![15.9, 31.8],
            monte_carlo: MonteCarloOptions::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be positive, got {v}")))
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults: a 60 m square room with four reflectors per wall.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed,
            output_dir: None,
            environment: EnvironmentSpec::Rectangle { width: 60.0, height: 60.0, per_wall: 4, bs: None },
            noise: NoiseConfig::default(),
            offline: OfflineConfig::default(),
            online: OnlineConfig::default(),
            cdf: CdfConfig::default(),
            bounds: BoundsConfig::default(),
        }
    }

    pub fn from_toml(s: &str) -> Result<Self, CliError> {
        Self::from_value(toml::from_str(s)?)
    }

    pub fn from_value(v: toml::Table) -> Result<Self, CliError> {
        let cfg: Self = toml::Table::try_into(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut table: toml::Table = toml::from_str(&text)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_value(table)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> Result<String, CliError> {
        Ok(hex(&Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.noise.model(0).map_err(|e| CliError::Config(e.to_string()))?;
        let o = &self.offline;
        for (name, v) in [("offline.spacing", o.spacing), ("offline.pitch", o.pitch), ("offline.lambda_m", o.lambda_m)] {
            positive(name, v)?;
        }
        positive("offline.alpha", o.alpha)?;
        if o.offset < 0.0 || o.pad < 0.0 {
            return Err(CliError::Config("offline.offset and offline.pad must be non-negative".into()));
        }
        if !(o.epsilon > 0.0 && o.epsilon < 1.0) {
            return Err(CliError::Config(format!("offline.epsilon {} outside (0, 1)", o.epsilon)));
        }
        if o.lambda_m > 0.5 / o.pitch {
            return Err(CliError::Config(format!(
                "offline.lambda_m {} exceeds the grid Nyquist limit {}",
                o.lambda_m,
                0.5 / o.pitch
            )));
        }
        positive("online.localize.prelocalize.pitch", self.online.localize.prelocalize.pitch)?;
        if let Some(p) = self.online.surface_pitch {
            positive("online.surface_pitch", p)?;
        }
        if self.cdf.trials == 0 {
            return Err(CliError::Config("cdf.trials must be at least 1".into()));
        }
        for [t, u] in &self.cdf.noise_levels {
            if !(*t >= 0.0 && *u >= 0.0) {
                return Err(CliError::Config(format!("cdf noise level ({t}, {u}) must be non-negative")));
            }
        }
        if let Some(s) = self.cdf.two_path_rol_side {
            positive("cdf.two_path_rol_side", s)?;
        }
        positive("bounds.vol_sa", self.bounds.vol_sa)?;
        for r in self.bounds.sweep_ratios.iter().chain(&self.bounds.ensemble_ratios) {
            positive("bounds ratio", *r)?;
        }
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Applies `dotted.key=value`. The value is read as a TOML literal and falls
/// back to a bare string; missing intermediate tables are created.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::desk_default(7);
        let again = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn override_sets_nested_values() {
        let mut t: toml::Table = toml::from_str(&ExperimentConfig::desk_default(1).to_toml().unwrap()).unwrap();
        apply_override(&mut t, "offline.alpha=0.1").unwrap();
        apply_override(&mut t, "online.localize.start_rule=best_of_stratum").unwrap();
        apply_override(&mut t, "cdf.n_r_values=[4, 8]").unwrap();
        let c = ExperimentConfig::from_value(t).unwrap();
        assert_eq!(c.offline.alpha, 0.1);
        assert_eq!(c.online.localize.start_rule, reflmap::localizer::StartRule::BestOfStratum);
        assert_eq!(c.cdf.n_r_values, vec![4, 8]);
    }

    #[test]
    fn bad_inputs_are_config_errors() {
        let mut c = ExperimentConfig::desk_default(1);
        c.schema_version = 99;
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
        let mut c = ExperimentConfig::desk_default(1);
        c.offline.lambda_m = 5.0;
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
        assert_eq!(ExperimentConfig::from_toml("seed = ").unwrap_err().exit_code(), 2);
        let mut t = toml::Table::new();
        assert!(apply_override(&mut t, "novalue").is_err());
    }
}
