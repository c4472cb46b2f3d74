use std::path::{Path, PathBuf};

use neurocam::augment::AugmentConfig;
use neurocam::ggp::EvolutionConfig;
use neurocam::optim::{TrainConfig, DEFAULT_SVM_C};
use neurocam::phantom::PhantomConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_SEED: u64 = 0;

/// Everything a run can be configured with. Every section is optional in
/// the TOML file; missing sections take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every random stream of the run unless `--seed` is given.
    pub seed: u64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training-set augmentation; absent means none.
    pub augment: Option<AugmentConfig>,
    pub phantom: PhantomConfig,
    pub ggp: EvolutionConfig,
    pub svm: SvmConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            split: [0.8, 0.1, 0.1],
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            augment: None,
            phantom: PhantomConfig::default(),
            ggp: EvolutionConfig::default(),
            svm: SvmConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub filters: [usize; 2],
    pub kernel: usize,
    /// Lift the network to 3D convolutions.
    pub three_d: bool,
    /// Architecture file (as written by `search`) used instead of the
    /// LeNet-5 builder; relative to the config file.
    pub spec: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            filters: [6, 14],
            kernel: 5,
            three_d: false,
            spec: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    pub c: Vec<f64>,
    pub epochs: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: DEFAULT_SVM_C.to_vec(),
            epochs: 200,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::usage(
                format!("cannot read config {}: {e}", path.display()),
                "pass an existing TOML file to --config",
            )
        })?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| {
            CliError::usage(
                format!("config {}: {e}", path.display()),
                "see configs/lenet5.toml for the accepted sections and keys",
            )
        })?;
        if let Some(spec) = &cfg.model.spec {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.model.spec = Some(base.join(spec));
        }
        Ok(cfg)
    }

    /// Applies the run seed to every random stream.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.phantom.seed = self.seed;
        self.ggp.seed = self.seed;
        if let Some(a) = &mut self.augment {
            a.seed = self.seed;
        }
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let hint = "fix the value in the config file";
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(CliError::usage(format!("split {:?} must be nonnegative and sum to 1", self.split), hint));
        }
        self.train
            .validate()
            .map_err(|e| CliError::usage(format!("[train]: {e}"), hint))?;
        if let Some(a) = &self.augment {
            a.validate().map_err(|e| CliError::usage(format!("[augment]: {e}"), hint))?;
        }
        self.ggp
            .validate()
            .map_err(|e| CliError::usage(format!("[ggp]: {e}"), hint))?;
        if self.svm.c.is_empty() || self.svm.c.iter().any(|c| !(*c > 0.0)) {
            return Err(CliError::usage(format!("[svm] c {:?} must be positive values", self.svm.c), hint));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checked_in_config_parses() {
        let text = include_str!("../../../configs/lenet5.toml");
        let cfg: RunConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.filters, [6, 14]);
    }

    #[test]
    fn seed_reaches_every_stream() {
        let cfg = RunConfig {
            augment: Some(AugmentConfig::default()),
            ..Default::default()
        }
        .with_seed(Some(9));
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.phantom.seed, 9);
        assert_eq!(cfg.augment.unwrap().seed, 9);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nlearning_rat = 0.1\n").is_err());
    }
}
