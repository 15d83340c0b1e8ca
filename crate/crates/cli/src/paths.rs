//! Artifact layout under `<output>/<config-hash>/`, so different configs
//! never share files.

use std::path::{Path, PathBuf};

use crowdtask::evaluation::Variant;
use crowdtask::training::Arm;

/// Environment variable overriding where checkpoints are stored.
pub const CHECKPOINT_ROOT_ENV: &str = "CROWDTASK_CHECKPOINT_ROOT";

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
    hash: String,
}

impl Workspace {
    pub fn new(output: &Path, hash: &str) -> Workspace {
        Workspace {
            root: output.join(hash),
            hash: hash.to_string(),
        }
    }

    pub fn features_dir(&self) -> PathBuf {
        self.root.join("features")
    }

    pub fn feature_table(&self) -> PathBuf {
        self.features_dir().join("feature_table.csv")
    }

    pub fn densities(&self) -> PathBuf {
        self.features_dir().join("densities.json")
    }

    pub fn validation_report(&self) -> PathBuf {
        self.features_dir().join("validation_report.json")
    }

    pub fn splits_dir(&self) -> PathBuf {
        self.root.join("splits")
    }

    pub fn split_file(&self, fold: usize) -> PathBuf {
        self.splits_dir().join(format!("fold_{fold}.json"))
    }

    pub fn run_dir(&self, arm: Arm, variant: Variant, fold: usize) -> PathBuf {
        self.root
            .join("runs")
            .join(format!("{arm}_{variant}_fold{fold}"))
    }

    /// Checkpoints live with the run unless CROWDTASK_CHECKPOINT_ROOT points
    /// elsewhere.
    pub fn checkpoint_dir(&self, arm: Arm, variant: Variant, fold: usize) -> PathBuf {
        match std::env::var_os(CHECKPOINT_ROOT_ENV) {
            Some(root) => PathBuf::from(root)
                .join(&self.hash)
                .join(format!("{arm}_{variant}_fold{fold}")),
            None => self.run_dir(arm, variant, fold).join("checkpoint"),
        }
    }

    pub fn ensemble_dir(&self, strategy: &str, variant: Variant, fold: usize) -> PathBuf {
        self.root
            .join("ensembles")
            .join(format!("{strategy}_{variant}_fold{fold}"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.report_dir().join("plots")
    }
}
