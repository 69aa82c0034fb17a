//! The experiment configuration: a single TOML file fully determines a run;
//! CLI flags override individual keys (flag > config file > built-in default).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use distil_core::train::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stochastic stage derives its own seed from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            attack: AttackSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Stratified subset sizes; 0 keeps the full split.
    pub train_count: usize,
    pub test_count: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_images: PathBuf::from("data/mnist/train-images-idx3-ubyte"),
            train_labels: PathBuf::from("data/mnist/train-labels-idx1-ubyte"),
            test_images: PathBuf::from("data/mnist/t10k-images-idx3-ubyte"),
            test_labels: PathBuf::from("data/mnist/t10k-labels-idx1-ubyte"),
            train_count: 5000,
            test_count: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// "mlp-tiny" or "mnist-small".
    pub architecture: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            architecture: "mlp-tiny".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f32,
    pub temperature: f32,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            batch_size: d.batch_size,
            epochs: d.epochs,
            dropout_rate: d.dropout_rate,
            temperature: d.temperature,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            lr_decay: None,
            momentum: self.momentum,
            momentum_decay: None,
            batch_size: self.batch_size,
            epochs: self.epochs,
            dropout_rate: self.dropout_rate,
            temperature: self.temperature,
            rng_seed: seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// Test samples attacked (each toward all other classes).
    pub sample_count: usize,
    /// Per-attack feature budget; 0 selects 14.3% of the input, rounded up.
    pub max_features: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            sample_count: 10,
            max_features: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub temperatures: Vec<f32>,
    /// Test samples used for the gradient-amplitude statistics.
    pub gradient_sample_count: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            temperatures: vec![1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 50.0, 100.0],
            gradient_sample_count: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read --config {}: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// SHA-256 of the effective configuration in canonical TOML form.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Fails with a usage error naming the first missing dataset file.
    pub fn check_dataset_paths(&self, need_train: bool, need_test: bool) -> Result<(), CliError> {
        let mut required: Vec<(&Path, &str)> = Vec::new();
        if need_train {
            required.push((&self.data.train_images, "--train-images / data.train_images"));
            required.push((&self.data.train_labels, "--train-labels / data.train_labels"));
        }
        if need_test {
            required.push((&self.data.test_images, "--test-images / data.test_images"));
            required.push((&self.data.test_labels, "--test-labels / data.test_labels"));
        }
        for (path, flag) in required {
            if !path.exists() {
                return Err(CliError::Usage(format!(
                    "dataset file {} not found (set {flag})",
                    path.display()
                )));
            }
        }
        Ok(())
    }
}

/// Seed for one sweep row: SHA-256 over (master seed, temperature bits),
/// truncated. Rows therefore never share RNG streams, regardless of order.
pub fn row_seed(master_seed: u64, temperature: f32) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(temperature.to_bits().to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<ExperimentConfig>("sede = 3").unwrap_err();
        assert!(err.to_string().contains("sede"));
    }

    #[test]
    fn row_seeds_differ_per_temperature() {
        let a = row_seed(0, 1.0);
        let b = row_seed(0, 20.0);
        assert_ne!(a, b);
        assert_eq!(a, row_seed(0, 1.0));
    }
}
