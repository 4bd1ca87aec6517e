use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::TruncationSchedule;
use crate::error::{Error, Result};

/// Temperature, joint-loss weights and the Matryoshka schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLossConfig", into = "RawLossConfig")]
pub struct LossConfig {
    pub tau: f64,
    /// `w1..w6`: dense/late/KL on the text batch, then the same three on
    /// the multimodal batch.
    pub weights: [f64; 6],
    pub truncation: TruncationSchedule,
    /// One weight per entry of `truncation`.
    pub matryoshka_weights: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawLossConfig {
    #[serde(default = "default_tau")]
    tau: f64,
    #[serde(default = "default_weights")]
    weights: Vec<f64>,
    #[serde(default = "default_dims")]
    truncation_dims: Vec<usize>,
    #[serde(default)]
    matryoshka_weights: Option<Vec<f64>>,
}

fn default_tau() -> f64 {
    0.02
}

fn default_weights() -> Vec<f64> {
    vec![1.0; 6]
}

fn default_dims() -> Vec<usize> {
    vec![16, 8, 4]
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::new(
            0.02,
            [1.0; 6],
            TruncationSchedule::new(default_dims()).unwrap(),
            None,
        )
        .expect("default loss config is valid")
    }
}

impl LossConfig {
    /// `matryoshka_weights = None` means weight 1 for every length.
    pub fn new(
        tau: f64,
        weights: [f64; 6],
        truncation: TruncationSchedule,
        matryoshka_weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {tau}")));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!(
                "weights must be finite and >= 0, got {weights:?}"
            )));
        }
        let mw = matryoshka_weights.unwrap_or_else(|| vec![1.0; truncation.dims().len()]);
        if mw.len() != truncation.dims().len() {
            return Err(Error::Config(format!(
                "{} matryoshka weights for {} truncation lengths",
                mw.len(),
                truncation.dims().len()
            )));
        }
        if mw.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!(
                "matryoshka weights must be finite and >= 0, got {mw:?}"
            )));
        }
        Ok(Self {
            tau,
            weights,
            truncation,
            matryoshka_weights: mw,
        })
    }

    /// Joint training needs at least one active term.
    pub fn check_trainable(&self) -> Result<()> {
        if self.weights.iter().all(|w| *w == 0.0) {
            Err(Error::Config("all joint-loss weights are zero".into()))
        } else {
            Ok(())
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {tau}")));
        }
        self.tau = tau;
        Ok(self)
    }

    pub fn with_weights(self, weights: [f64; 6]) -> Result<Self> {
        Self::new(
            self.tau,
            weights,
            self.truncation,
            Some(self.matryoshka_weights),
        )
    }

    pub fn with_truncation(
        self,
        truncation: TruncationSchedule,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        Self::new(self.tau, self.weights, truncation, weights)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    /// `.json` files parse as JSON, everything else as TOML.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }
}

impl TryFrom<RawLossConfig> for LossConfig {
    type Error = Error;

    fn try_from(raw: RawLossConfig) -> Result<Self> {
        let weights: [f64; 6] = raw.weights.as_slice().try_into().map_err(|_| {
            Error::Config(format!(
                "weights must have 6 entries, got {}",
                raw.weights.len()
            ))
        })?;
        let truncation = TruncationSchedule::new(raw.truncation_dims)
            .map_err(|e| Error::Config(e.to_string()))?;
        Self::new(raw.tau, weights, truncation, raw.matryoshka_weights)
    }
}

impl From<LossConfig> for RawLossConfig {
    fn from(c: LossConfig) -> Self {
        Self {
            tau: c.tau,
            weights: c.weights.to_vec(),
            truncation_dims: c.truncation.dims().to_vec(),
            matryoshka_weights: Some(c.matryoshka_weights),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = LossConfig::default();
        assert_eq!(c.tau, 0.02);
        assert_eq!(c.weights, [1.0; 6]);
        assert_eq!(c.truncation.dims(), &[16, 8, 4]);
        assert_eq!(c.matryoshka_weights, vec![1.0; 3]);
        assert_eq!(LossConfig::from_toml_str("").unwrap(), c);
    }

    #[test]
    fn toml_and_json() {
        let t = LossConfig::from_toml_str(
            "tau = 0.05\nweights = [1, 0, 0.5, 1, 0, 0.5]\ntruncation_dims = [8, 4]\nmatryoshka_weights = [1.0, 0.5]\n",
        )
        .unwrap();
        assert_eq!(t.tau, 0.05);
        assert_eq!(t.weights[2], 0.5);
        let j = LossConfig::from_json_str(
            r#"{"tau": 0.05, "weights": [1,0,0.5,1,0,0.5], "truncation_dims": [8,4], "matryoshka_weights": [1.0, 0.5]}"#,
        )
        .unwrap();
        assert_eq!(t, j);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(LossConfig::from_toml_str("tau = 0.0").is_err());
        assert!(LossConfig::from_toml_str("temperature = 0.1").is_err());
        assert!(LossConfig::from_toml_str("weights = [1, 1]").is_err());
        assert!(LossConfig::from_toml_str("weights = [1, 1, 1, 1, 1, -1]").is_err());
        assert!(LossConfig::from_toml_str("truncation_dims = [4, 8]").is_err());
        assert!(LossConfig::from_toml_str("matryoshka_weights = [1.0]").is_err());
        let zero = LossConfig::from_toml_str("weights = [0, 0, 0, 0, 0, 0]").unwrap();
        assert!(zero.check_trainable().is_err());
    }
}
