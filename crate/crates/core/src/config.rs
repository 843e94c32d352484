//! Experiment configuration, loaded from JSON with snake_case keys.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::MAX_SEPARATION;
use crate::error::{Error, Result};
use crate::features::FeatureFamily;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFamilyName {
    ReluNtk,
    FourierRbf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    Gaussian,
    Leverage,
}

/// How an experiment turns the configured `lambda` into the ridge parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    /// Use `lambda` as given.
    #[default]
    Fixed,
    /// `lambda · ‖K‖₂` for the experiment's exact kernel `K`.
    KernelNormFraction,
    /// `c_lambda / √m` for network width `m`; `lambda` is ignored.
    InverseSqrtWidth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub kappa: f64,
    pub lambda: f64,
    pub eps: f64,
    pub delta: f64,
    pub eta: f64,
    pub steps: usize,
    pub seed: u64,
    pub feature_family: FeatureFamilyName,
    pub init: InitScheme,

    #[serde(default)]
    pub lambda_rule: LambdaRule,
    #[serde(default = "default_delta_sep")]
    pub delta_sep: f64,
    #[serde(default = "default_bandwidth")]
    pub rbf_bandwidth: f64,
    /// Horizon constant in `T = c·ln(·)/rate`.
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_c_kappa")]
    pub c_kappa: f64,
    #[serde(default = "default_c_lambda")]
    pub c_lambda: f64,
    #[serde(default)]
    pub trials: Option<usize>,
    /// Allowed shortfall of an empirical success rate below `1 - delta`.
    #[serde(default = "default_prob_slack")]
    pub prob_slack: f64,
    #[serde(default)]
    pub m_sweep: Option<Vec<usize>>,
    #[serde(default = "default_diag_every")]
    pub diag_every: usize,
    /// Gradient descent uses `η = min(eta, eta_fraction / (κ²‖H(0)‖ + λ))`.
    #[serde(default = "default_eta_fraction")]
    pub eta_fraction: f64,
    /// Training-error floor of the lazy-training envelope; defaults to `eps`.
    #[serde(default)]
    pub eps_train: Option<f64>,
}

fn default_delta_sep() -> f64 {
    0.05
}
fn default_bandwidth() -> f64 {
    1.0
}
fn default_c() -> f64 {
    4.0
}
fn default_c_kappa() -> f64 {
    1.0
}
fn default_c_lambda() -> f64 {
    0.01
}
fn default_prob_slack() -> f64 {
    0.05
}
fn default_diag_every() -> usize {
    10
}
fn default_eta_fraction() -> f64 {
    0.4
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 8,
            d: 4,
            m: 4096,
            kappa: 1.0,
            lambda: 0.05,
            eps: 0.05,
            delta: 0.1,
            eta: 1.0,
            steps: 1000,
            seed: 2020,
            feature_family: FeatureFamilyName::ReluNtk,
            init: InitScheme::Gaussian,
            lambda_rule: LambdaRule::Fixed,
            delta_sep: default_delta_sep(),
            rbf_bandwidth: default_bandwidth(),
            c: default_c(),
            c_kappa: default_c_kappa(),
            c_lambda: default_c_lambda(),
            trials: None,
            prob_slack: default_prob_slack(),
            m_sweep: None,
            diag_every: default_diag_every(),
            eta_fraction: default_eta_fraction(),
            eps_train: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(s).map_err(|e| Error::config("<json>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        fn open_unit(field: &str, v: f64) -> Result<()> {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("{v} is outside (0, 1)")))
            }
        }
        if self.n < 1 {
            return Err(Error::config("n", "must be positive"));
        }
        if self.d < 2 {
            return Err(Error::config("d", "must be at least 2"));
        }
        if self.m < 1 {
            return Err(Error::config("m", "must be positive"));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::config(
                "kappa",
                format!("{} is outside (0, 1]", self.kappa),
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be a nonnegative real"));
        }
        open_unit("eps", self.eps)?;
        open_unit("delta", self.delta)?;
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta", "must be positive"));
        }
        if self.steps < 1 {
            return Err(Error::config("steps", "must be positive"));
        }
        if !(self.delta_sep > 0.0 && self.delta_sep < MAX_SEPARATION) {
            return Err(Error::config("delta_sep", "must lie in (0, 2)"));
        }
        if !(self.rbf_bandwidth > 0.0) {
            return Err(Error::config("rbf_bandwidth", "must be positive"));
        }
        for (field, v) in [
            ("c", self.c),
            ("c_kappa", self.c_kappa),
            ("c_lambda", self.c_lambda),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.trials == Some(0) {
            return Err(Error::config("trials", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.prob_slack) {
            return Err(Error::config("prob_slack", "must lie in [0, 1)"));
        }
        if let Some(sweep) = &self.m_sweep {
            if sweep.is_empty() || sweep.contains(&0) {
                return Err(Error::config(
                    "m_sweep",
                    "must be a nonempty list of positive widths",
                ));
            }
        }
        if self.diag_every < 1 {
            return Err(Error::config("diag_every", "must be positive"));
        }
        if !(self.eta_fraction > 0.0 && self.eta_fraction < 0.5) {
            return Err(Error::config("eta_fraction", "must lie in (0, 0.5)"));
        }
        if let Some(e) = self.eps_train {
            if !(e > 0.0) {
                return Err(Error::config("eps_train", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn family(&self) -> FeatureFamily {
        match self.feature_family {
            FeatureFamilyName::ReluNtk => FeatureFamily::ReluNtk,
            FeatureFamilyName::FourierRbf => FeatureFamily::FourierRbf {
                bandwidth: self.rbf_bandwidth,
            },
        }
    }

    /// Ridge parameter for a given exact-kernel norm and network width.
    pub fn ridge(&self, kernel_norm: f64, width: usize) -> f64 {
        match self.lambda_rule {
            LambdaRule::Fixed => self.lambda,
            LambdaRule::KernelNormFraction => self.lambda * kernel_norm,
            LambdaRule::InverseSqrtWidth => self.c_lambda / (width as f64).sqrt(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "n": 8, "d": 4, "m": 64, "kappa": 1.0, "lambda": 0.1, "eps": 0.2,
        "delta": 0.1, "eta": 0.5, "steps": 10, "seed": 3,
        "feature_family": "relu_ntk", "init": "gaussian"
    }"#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let cfg = ExperimentConfig::from_json_str(MINIMAL).unwrap();
        assert_eq!(cfg.n, 8);
        assert_eq!(cfg.c, 4.0);
        assert_eq!(cfg.c_kappa, 1.0);
        assert_eq!(cfg.c_lambda, 0.01);
        assert_eq!(cfg.lambda_rule, LambdaRule::Fixed);
    }

    #[test]
    fn field_level_errors() {
        let bad = MINIMAL.replace("\"kappa\": 1.0", "\"kappa\": 1.5");
        match ExperimentConfig::from_json_str(&bad).unwrap_err() {
            Error::InvalidConfig { field, .. } => assert_eq!(field, "kappa"),
            e => panic!("unexpected {e}"),
        }
        let missing = MINIMAL.replace("\"n\": 8,", "");
        let msg = ExperimentConfig::from_json_str(&missing)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("`n`"), "{msg}");
        let unknown = MINIMAL.replace("\"n\": 8,", "\"n\": 8, \"bogus\": 1,");
        let msg = ExperimentConfig::from_json_str(&unknown)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_json_str(&cfg.to_json_pretty()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn ridge_rules() {
        let mut cfg = ExperimentConfig {
            lambda: 0.1,
            ..Default::default()
        };
        assert_eq!(cfg.ridge(5.0, 100), 0.1);
        cfg.lambda_rule = LambdaRule::KernelNormFraction;
        assert!((cfg.ridge(5.0, 100) - 0.5).abs() < 1e-15);
        cfg.lambda_rule = LambdaRule::InverseSqrtWidth;
        assert!((cfg.ridge(5.0, 100) - 0.001).abs() < 1e-15);
    }
}
