//! Pipeline configuration: one TOML file plus a few CLI overrides drives
//! every command. Artifacts are content-addressed by a hash of the effective
//! configuration so runs from different configs can never silently mix.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crowdtask::augment::AugmentationSpec;
use crowdtask::ensemble::DeConfig;
use crowdtask::error::{Error, Result};
use crowdtask::model::{EncoderKind, DEFAULT_HIDDEN_UNITS};
use crowdtask::synth::SyntheticSpec;
use crowdtask::training::{derive_seed, ModelDefaults, TrainingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub labels: PathBuf,
    pub annotations: PathBuf,
    pub images: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub folds: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            folds: 5,
            train_fraction: 0.70,
            val_fraction: 0.175,
            test_fraction: 0.125,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub encoder: String,
    pub hidden_units: usize,
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            encoder: "vgg16_pretrained".to_string(),
            hidden_units: DEFAULT_HIDDEN_UNITS,
            pretrained_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub use_class_weights: bool,
    pub global_class_weights: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = TrainingConfig::default();
        TrainingSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            use_class_weights: d.use_class_weights,
            global_class_weights: d.global_class_weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub population_per_dim: usize,
    pub crossover: f64,
    pub mutation: [f64; 2],
    /// "val" (default) or "test". Optimizing on the test subset leaks the
    /// test labels into the weights; it is labeled as such in the weights
    /// files so results cannot be mistaken for leakage-free ones.
    pub optimize_on: String,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        let d = DeConfig::default();
        EnsembleSection {
            tolerance: d.tolerance,
            max_iterations: d.max_iterations,
            population_per_dim: d.population_per_dim,
            crossover: d.crossover,
            mutation: [d.mutation.0, d.mutation.1],
            optimize_on: "val".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub augmentation: AugmentationSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    /// Set by --synthetic: data is generated, not user-supplied.
    #[serde(default)]
    pub synthetic: bool,
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::config(format!("config file {} not found", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("bad config file: {e}")))
    }

    /// Built-in desk-scale configuration backing `--synthetic`: 256 images of
    /// 64x64 pixels, 2 folds, 2 epochs on the tiny_test encoder.
    pub fn synthetic(root: &Path, seed: u64) -> PipelineConfig {
        let data = root.join("data");
        PipelineConfig {
            seed,
            paths: PathsConfig {
                labels: data.join("labels.csv"),
                annotations: data.join("annotations.csv"),
                images: data.join("images"),
                output: root.to_path_buf(),
            },
            dataset: DatasetSection {
                folds: 2,
                ..DatasetSection::default()
            },
            augmentation: AugmentationSpec {
                output_size: (64, 64),
                ..AugmentationSpec::default()
            },
            model: ModelSection {
                encoder: "tiny_test".to_string(),
                ..ModelSection::default()
            },
            training: TrainingSection {
                epochs: 2,
                learning_rate: 1e-3,
                ..TrainingSection::default()
            },
            ensemble: EnsembleSection::default(),
            synthetic: true,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_images: 256,
            image_size: self.augmentation.output_size.0,
            seed: derive_seed(self.seed, &["synthetic-data"]),
            ..SyntheticSpec::default()
        }
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.dataset.folds == 0 {
            return Err(Error::config("dataset.folds must be at least 1"));
        }
        let sum =
            self.dataset.train_fraction + self.dataset.val_fraction + self.dataset.test_fraction;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "dataset fractions must sum to 1, got {sum}"
            )));
        }
        if self.dataset.train_fraction <= 0.0
            || self.dataset.val_fraction <= 0.0
            || self.dataset.test_fraction <= 0.0
        {
            return Err(Error::config("dataset fractions must all be positive"));
        }
        self.encoder_kind()?;
        self.augmentation
            .validate()
            .map_err(|e| Error::config(e.to_string()))?;
        self.training_config()
            .validate()
            .map_err(|e| Error::config(e.to_string()))?;
        if !matches!(self.ensemble.optimize_on.as_str(), "val" | "test") {
            return Err(Error::config(format!(
                "ensemble.optimize_on must be \"val\" or \"test\", got {:?}",
                self.ensemble.optimize_on
            )));
        }
        Ok(())
    }

    /// Input files must exist before any command runs.
    pub fn validate_paths(&self) -> Result<()> {
        for (name, path, dir) in [
            ("labels", &self.paths.labels, false),
            ("annotations", &self.paths.annotations, false),
            ("images", &self.paths.images, true),
        ] {
            let ok = if dir { path.is_dir() } else { path.is_file() };
            if !ok {
                return Err(Error::config(format!(
                    "{name} path {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn encoder_kind(&self) -> Result<EncoderKind> {
        self.model.encoder.parse()
    }

    pub fn fractions(&self) -> (f64, f64, f64) {
        (
            self.dataset.train_fraction,
            self.dataset.val_fraction,
            self.dataset.test_fraction,
        )
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            seed: derive_seed(self.seed, &["training"]),
            use_class_weights: self.training.use_class_weights,
            global_class_weights: self.training.global_class_weights,
            ..TrainingConfig::default()
        }
    }

    pub fn model_defaults(&self) -> Result<ModelDefaults> {
        Ok(ModelDefaults {
            encoder: self.encoder_kind()?,
            hidden_units: self.model.hidden_units,
            pretrained_weights: self.model.pretrained_weights.clone(),
        })
    }

    pub fn de_config(&self, fold: usize) -> DeConfig {
        DeConfig {
            tolerance: self.ensemble.tolerance,
            max_iterations: self.ensemble.max_iterations,
            population_per_dim: self.ensemble.population_per_dim,
            crossover: self.ensemble.crossover,
            mutation: (self.ensemble.mutation[0], self.ensemble.mutation[1]),
            seed: derive_seed(self.seed, &["de", &fold.to_string()]),
        }
    }

    /// Content hash of the effective configuration; artifact paths embed it.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest
            .iter()
            .take(6)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml(dir: &Path) -> String {
        format!(
            r#"
seed = 7

[paths]
labels = "{0}/labels.csv"
annotations = "{0}/annotations.csv"
images = "{0}/images"
output = "{0}/out"
"#,
            dir.display()
        )
    }

    #[test]
    fn defaults_follow_the_recipe() {
        let dir = tempfile::tempdir().unwrap();
        let config: PipelineConfig = toml::from_str(&minimal_toml(dir.path())).unwrap();
        assert_eq!(config.dataset.folds, 5);
        assert_eq!(config.training.epochs, 30);
        assert_eq!(config.training.batch_size, 20);
        assert_eq!(config.training.learning_rate, 2.0e-5);
        assert_eq!(config.ensemble.tolerance, 1.0e-7);
        assert_eq!(config.ensemble.max_iterations, 1000);
        assert_eq!(config.augmentation.output_size, (384, 384));
        assert_eq!(config.model.encoder, "vgg16_pretrained");
        config.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = minimal_toml(dir.path());
        text.push_str("\n[training]\nepocs = 3\n");
        let err = toml::from_str::<PipelineConfig>(&text).unwrap_err();
        assert!(err.to_string().contains("epocs"));
    }

    #[test]
    fn bad_fractions_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = minimal_toml(dir.path());
        text.push_str("\n[dataset]\ntrain_fraction = 0.9\nval_fraction = 0.2\ntest_fraction = 0.1\n");
        let config: PipelineConfig = toml::from_str(&text).unwrap();
        let err = config.validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn zero_folds_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = minimal_toml(dir.path());
        text.push_str("\n[dataset]\nfolds = 0\n");
        let config: PipelineConfig = toml::from_str(&text).unwrap();
        assert!(config.validate().is_err());
    }

    #[test]
    fn hash_changes_with_content() {
        let dir = tempfile::tempdir().unwrap();
        let a: PipelineConfig = toml::from_str(&minimal_toml(dir.path())).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 8;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn synthetic_config_is_valid() {
        let config = PipelineConfig::synthetic(Path::new("/tmp/x"), 1);
        config.validate().unwrap();
        assert!(config.synthetic);
        assert_eq!(config.dataset.folds, 2);
        assert_eq!(config.training.epochs, 2);
        assert_eq!(config.augmentation.output_size, (64, 64));
        assert_eq!(config.model.encoder, "tiny_test");
    }
}
