//! Pipeline hyper-parameters, read from TOML.
//!
//! ```toml
//! seed = 7
//! embed_dim = 64
//! lr = 0.01
//! theta = 0.12
//! k_directions = 50
//! ```
//!
//! Every field is optional; missing ones take the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bd2a::Polarity;
use crate::error::{Error, Result};
use crate::klotski::TrainConfig;
use crate::selector::CenterMode;
use crate::tiler::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPolarity {
    Positive,
    Negative,
    Both,
}

impl SplitPolarity {
    pub fn polarities(self) -> &'static [Polarity] {
        match self {
            SplitPolarity::Positive => &[Polarity::Positive],
            SplitPolarity::Negative => &[Polarity::Negative],
            SplitPolarity::Both => &[Polarity::Positive, Polarity::Negative],
        }
    }
}

impl std::str::FromStr for SplitPolarity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(SplitPolarity::Positive),
            "negative" => Ok(SplitPolarity::Negative),
            "both" => Ok(SplitPolarity::Both),
            _ => Err(Error::InvalidArgument(format!(
                "polarity must be positive, negative or both, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Embedding width `K`.
    pub embed_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub patience: usize,
    pub plateau_tol: f64,
    /// Epochs and learning rate of the downstream MIL model.
    pub mil_epochs: usize,
    pub mil_lr: f64,
    pub theta: f64,
    pub k_directions: usize,
    pub k_used: usize,
    pub center: CenterMode,
    /// Direction bundles used for biased splits: `positive`, `negative`
    /// or `both`.
    pub polarity: SplitPolarity,
    /// Fraction of training samples dropped before retraining.
    pub debias_theta: f64,
    pub paths: ArtifactPaths,
}

/// Artifact file names, relative to the working directory given with
/// `--out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactPaths {
    pub model: String,
    /// Stem; each split goes to `<stem>_<split>.blem`.
    pub embeddings: String,
    pub directions_positive: String,
    pub directions_negative: String,
    pub split: String,
    pub mil_model: String,
    pub report: String,
    pub sweep: String,
    pub curve: String,
}

impl Default for ArtifactPaths {
    fn default() -> Self {
        ArtifactPaths {
            model: "klotski.blsc".into(),
            embeddings: "embeddings".into(),
            directions_positive: "directions_positive.bldb".into(),
            directions_negative: "directions_negative.bldb".into(),
            split: "split.json".into(),
            mil_model: "mil.blsc".into(),
            report: "report.json".into(),
            sweep: "sweep.csv".into(),
            curve: "curve.csv".into(),
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            grid_rows: 4,
            grid_cols: 4,
            embed_dim: 64,
            epochs: 20,
            lr: 0.02,
            patience: 5,
            plateau_tol: 0.005,
            mil_epochs: 10,
            mil_lr: 0.01,
            theta: 0.12,
            k_directions: 50,
            k_used: 5,
            center: CenterMode::Median,
            polarity: SplitPolarity::Negative,
            debias_theta: 0.05,
            paths: ArtifactPaths::default(),
        }
    }
}

impl PipelineConfig {
    pub fn grid(&self) -> Grid {
        Grid::new(self.grid_rows, self.grid_cols)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, lr) in [("lr", self.lr), ("mil_lr", self.mil_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be > 0, got {lr}"));
            }
        }
        for (name, t) in [("theta", self.theta), ("debias_theta", self.debias_theta)] {
            if !(t > 0.0 && t < 1.0) {
                return bad(format!("{name} must be in (0, 1), got {t}"));
            }
        }
        if self.embed_dim < 2 {
            return bad(format!("embed_dim must be >= 2, got {}", self.embed_dim));
        }
        if self.k_directions == 0 || self.k_directions > self.embed_dim {
            return bad(format!(
                "k_directions = {} must be between 1 and embed_dim = {}",
                self.k_directions, self.embed_dim
            ));
        }
        if self.k_used == 0 || self.k_used > self.k_directions {
            return bad(format!(
                "k_used = {} must be between 1 and k_directions = {}",
                self.k_used, self.k_directions
            ));
        }
        if self.grid_rows * self.grid_cols < 2 {
            return bad(format!("grid {}x{} must have at least 2 tiles", self.grid_rows, self.grid_cols));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("pipeline config: {e}")))?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    pub fn klotski_train(&self) -> TrainConfig {
        TrainConfig {
            grid: self.grid(),
            embed_dim: self.embed_dim,
            epochs: self.epochs,
            lr: self.lr,
            seed: self.seed,
            patience: self.patience,
            plateau_tol: self.plateau_tol,
        }
    }

    pub fn mil_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.mil_epochs,
            lr: self.mil_lr,
            ..self.klotski_train()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = PipelineConfig::from_toml("seed = 3\ntheta = 0.05\n").unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.embed_dim, 64);
    }

    #[test]
    fn invalid_values_name_the_field() {
        let c = PipelineConfig {
            k_directions: 80,
            ..PipelineConfig::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("80") && msg.contains("64"), "{msg}");
        let c = PipelineConfig { lr: 0.0, ..PipelineConfig::default() };
        assert!(c.validate().unwrap_err().to_string().contains("lr"));
        let c = PipelineConfig { theta: 1.0, ..PipelineConfig::default() };
        assert!(c.validate().is_err());
        assert!(PipelineConfig::from_toml("nonsense = 1").is_err());
    }
}
