//! Run configuration: one TOML file with a section per stage.
//!
//! ```toml
//! seed = 7
//!
//! [hfm]
//! tau_p = 1.0
//!
//! [gate]
//! alpha = 0.25
//! rho_0 = 0.1
//!
//! [sap]
//! q = 50
//!
//! [train]
//! gamma_max = 1.0
//! ema_momentum = 0.9
//! ```
//!
//! Missing keys take their defaults; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hfm::HfmConfig;
use crate::hpe::GateConfig;
use crate::sap::SapConfig;
use crate::selftrain::{AdaptConfig, TrainConfig};
use crate::synth::SynthConfig;

pub const DEFAULT_SEED: u64 = 7;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset directory (or manifest file) read by `adapt`.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub hfm: HfmConfig,
    pub gate: GateConfig,
    pub sap: SapConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            hfm: HfmConfig::default(),
            gate: GateConfig::default(),
            sap: SapConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.hfm.validate()?;
        self.gate.validate()?;
        self.sap.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            seed: self.seed,
            hfm: self.hfm.clone(),
            gate: self.gate.clone(),
            sap: self.sap.clone(),
            train: self.train.clone(),
        }
    }

    /// SHA-256 of the JSON serialization, hex encoded. Paths are excluded so
    /// that relocating a run does not change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hfm::LambdaSource;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.hfm.tau_p, 1.0);
        assert_eq!(cfg.gate.alpha, 0.25);
        assert_eq!(cfg.gate.rho_0, 0.1);
        assert_eq!(cfg.sap.q, 50.0);
        assert_eq!(cfg.train.gamma_max, 1.0);
        assert_eq!(cfg.train.ema_momentum, 0.9);
    }

    #[test]
    fn paper_symbol_keys_parse() {
        let cfg = RunConfig::from_toml_str(
            "seed = 3\n[hfm]\ntau_p = 0.75\nlambda = { fixed = 0.5 }\n[gate]\nalpha = 0.5\nrho_0 = 0.2\n\
             [sap]\nq = 40\n[train]\ngamma_max = 0.5\nema_momentum = 0.99\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.hfm.tau_p, 0.75);
        assert_eq!(cfg.hfm.lambda, LambdaSource::Fixed(0.5));
        assert_eq!(cfg.gate.alpha, 0.5);
        assert_eq!(cfg.gate.rho_0, 0.2);
        assert_eq!(cfg.sap.q, 40.0);
        assert_eq!(cfg.train.gamma_max, 0.5);
        assert_eq!(cfg.train.ema_momentum, 0.99);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in ["bogus = 1", "[hfm]\ntau = 1.0", "[nope]\nx = 1", "[train]\nlr = 0.1"] {
            assert!(matches!(RunConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn out_of_range_values_rejected() {
        assert!(RunConfig::from_toml_str("[train]\nema_momentum = 1.0").is_err());
        assert!(RunConfig::from_toml_str("[hfm]\ntau_p = 1.5").is_err());
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let mut cfg = RunConfig::default();
        cfg.train.epochs = 3;
        let back = RunConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(cfg.hash(), RunConfig::default().hash());
        let mut moved = cfg.clone();
        moved.paths.out = Some("elsewhere".into());
        assert_eq!(moved.hash(), cfg.hash());
    }
}
