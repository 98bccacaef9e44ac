//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Preset;
use crate::embedding::EncoderConfig;
use crate::error::{Error, Result};
use crate::federation::TrainSettings;
use crate::objective::{AlignmentConfig, ModelConfig};
use crate::ot::SolverConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: Preset,
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub temperature: f64,
    /// Entropic regularization of the transport problems.
    pub lambda: f64,
    pub dpac_scale: f64,
    pub dpac_weight: f64,
    pub shared_len: usize,
    pub private_len: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub patch_count: usize,
    pub dual_prompt: bool,
    pub dpac: bool,
    pub cmfac: bool,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Noise of the synthetic samples around their class prototype.
    pub sigma: f64,
    pub solver_max_iters: usize,
    pub solver_tol: f64,
    pub alpha_mass: f64,
    pub beta_shared: f64,
    pub probe_class: usize,
    pub patch_spread: f64,
    pub domain_offset: f64,
    /// Divide the weighted aggregate by N once more.
    pub literal_mean: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let enc = EncoderConfig::default();
        let train = TrainSettings::default();
        Self {
            dataset: Preset::Synthetic,
            clients: 5,
            rounds: 30,
            local_epochs: train.local_epochs,
            lr: train.lr,
            batch_size: train.batch_size,
            temperature: model.temperature,
            lambda: model.solver.lambda,
            dpac_scale: model.alignment.scale,
            dpac_weight: model.alignment.dpac_weight,
            shared_len: 4,
            private_len: 4,
            embed_dim: enc.embed_dim,
            feature_dim: enc.feature_dim,
            patch_count: enc.patch_count,
            dual_prompt: true,
            dpac: true,
            cmfac: true,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            sigma: 0.05,
            solver_max_iters: model.solver.max_iters,
            solver_tol: model.solver.tol,
            alpha_mass: model.alpha_mass,
            beta_shared: model.beta_shared,
            probe_class: model.probe_class,
            patch_spread: enc.patch_spread,
            domain_offset: enc.domain_offset,
            literal_mean: false,
        }
    }
}

fn even_positive(field: &'static str, h: usize) -> Result<()> {
    if h == 0 || !h.is_multiple_of(2) {
        return Err(Error::range(field, "must be even and positive"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::range("clients", "must be at least 1"));
        }
        self.train_settings().validate()?;
        even_positive("shared_len", self.shared_len)?;
        even_positive("private_len", self.private_len)?;
        for (field, v) in [
            ("embed_dim", self.embed_dim),
            ("feature_dim", self.feature_dim),
            ("patch_count", self.patch_count),
            ("solver_max_iters", self.solver_max_iters),
        ] {
            if v == 0 {
                return Err(Error::range(field, "must be at least 1"));
            }
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::range("lambda", "must be finite and > 0"));
        }
        if !(self.solver_tol.is_finite() && self.solver_tol > 0.0) {
            return Err(Error::range("solver_tol", "must be finite and > 0"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::range("sigma", "must be finite and >= 0"));
        }
        let (k, _, _) = self.dataset.shape();
        if self.probe_class >= k {
            return Err(Error::range("probe_class", format!("must be below {k}")));
        }
        self.model().validate()?;
        self.encoder().validate()?;
        self.dataset.spec(self.clients, self.seed).validate()?;
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            temperature: self.temperature,
            dual_prompt: self.dual_prompt,
            alignment: AlignmentConfig {
                scale: self.dpac_scale,
                dpac_weight: self.dpac_weight,
                dpac_enabled: self.dpac,
                cmfac_enabled: self.cmfac,
            },
            solver: SolverConfig {
                lambda: self.lambda,
                max_iters: self.solver_max_iters,
                tol: self.solver_tol,
            },
            alpha_mass: self.alpha_mass,
            beta_shared: self.beta_shared,
            probe_class: self.probe_class,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            feature_dim: self.feature_dim,
            patch_count: self.patch_count,
            embed_dim: self.embed_dim,
            seed: crate::rng::derive_seed(self.seed, "encoders"),
            patch_spread: self.patch_spread,
            domain_offset: self.domain_offset,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            lr: self.lr,
            batch_size: self.batch_size,
            local_epochs: self.local_epochs,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(
            self.to_toml_string()?.as_bytes(),
        )))
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::from_toml_str(&text)
}
