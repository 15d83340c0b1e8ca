//! Lesion manifest, label binarization, stratified cross-validation splits and
//! class weights.
//!
//! Melanoma and seborrheic keratosis count as malignant, nevus as benign.
//! Folds are independent seeded stratified shuffle-splits (seed + fold index),
//! not a partition: 0.70/0.175/0.125 fractions cannot tile a dataset with
//! 5 folds, and independent splits preserve the per-fold subset sizes
//! exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Three-class diagnosis as shipped in the labels CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnosis {
    Melanoma,
    SeborrheicKeratosis,
    Nevus,
}

impl Diagnosis {
    pub fn binary_label(self) -> u8 {
        match self {
            Diagnosis::Melanoma | Diagnosis::SeborrheicKeratosis => 1,
            Diagnosis::Nevus => 0,
        }
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnosis::Melanoma => write!(f, "melanoma"),
            Diagnosis::SeborrheicKeratosis => write!(f, "seborrheic_keratosis"),
            Diagnosis::Nevus => write!(f, "nevus"),
        }
    }
}

impl FromStr for Diagnosis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "melanoma" => Ok(Diagnosis::Melanoma),
            "seborrheic_keratosis" => Ok(Diagnosis::SeborrheicKeratosis),
            "nevus" => Ok(Diagnosis::Nevus),
            other => Err(Error::validation(format!(
                "unknown diagnosis {other:?}, expected melanoma, seborrheic_keratosis or nevus"
            ))),
        }
    }
}

/// One lesion: image reference, diagnosis and derived binary label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub lesion_id: String,
    pub image_path: PathBuf,
    pub diagnosis: Diagnosis,
    /// 1 = malignant (melanoma or seborrheic keratosis), 0 = benign (nevus).
    pub label: u8,
}

/// Ordered lesion records with per-diagnosis counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<LesionRecord>,
    pub class_counts: BTreeMap<Diagnosis, usize>,
}

impl DatasetManifest {
    /// Builds a manifest from records, validating lesion-id uniqueness.
    /// Does not touch the filesystem; `load_manifest` does the image checks.
    pub fn from_records(records: Vec<LesionRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut class_counts: BTreeMap<Diagnosis, usize> = BTreeMap::new();
        for r in &records {
            if !seen.insert(r.lesion_id.clone()) {
                return Err(Error::validation(format!(
                    "duplicate lesion id {:?} in manifest",
                    r.lesion_id
                )));
            }
            if r.label != r.diagnosis.binary_label() {
                return Err(Error::validation(format!(
                    "label {} inconsistent with diagnosis {} for lesion {:?}",
                    r.label, r.diagnosis, r.lesion_id
                )));
            }
            *class_counts.entry(r.diagnosis).or_insert(0) += 1;
        }
        Ok(DatasetManifest {
            records,
            class_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn lesion_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.lesion_id.clone()).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn malignant_count(&self) -> usize {
        self.records.iter().filter(|r| r.label == 1).count()
    }

    pub fn benign_count(&self) -> usize {
        self.len() - self.malignant_count()
    }

    pub fn index_of(&self) -> BTreeMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.lesion_id.as_str(), i))
            .collect()
    }
}

/// Stratified train/validation/test id sets for one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl FoldSplit {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::validation(format!("split serialization failed: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<FoldSplit> {
        let data = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&data)
            .map_err(|e| Error::validation(format!("split deserialization failed: {e}")))
    }
}

/// Per-class loss multipliers: w_c = N / (2 * N_c).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub benign: f64,
    pub malignant: f64,
}

impl ClassWeights {
    pub fn neutral() -> Self {
        ClassWeights {
            benign: 1.0,
            malignant: 1.0,
        }
    }

    pub fn for_label(&self, label: u8) -> f64 {
        if label == 1 {
            self.malignant
        } else {
            self.benign
        }
    }
}

/// Reads the labels CSV (`lesion_id,diagnosis`) and validates that every
/// lesion image resolves under `image_dir` (as `<id>.png`, `<id>.jpg` or
/// `<id>.jpeg`).
pub fn load_manifest(labels_path: &Path, image_dir: &Path) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(labels_path)
        .map_err(|e| Error::io(labels_path, std::io::Error::other(e)))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::io(labels_path, std::io::Error::other(e)))?
        .clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != ["lesion_id", "diagnosis"] {
        return Err(Error::Parse {
            path: labels_path.to_path_buf(),
            line: 1,
            message: format!("expected header [\"lesion_id\", \"diagnosis\"], got {got:?}"),
        });
    }

    let mut records = Vec::new();
    let mut missing_images = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| Error::Parse {
            path: labels_path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        if record.len() != 2 {
            return Err(Error::Parse {
                path: labels_path.to_path_buf(),
                line,
                message: format!("expected 2 fields, got {}", record.len()),
            });
        }
        let lesion_id = record[0].to_string();
        let diagnosis: Diagnosis = record[1].parse()?;
        let image_path = match resolve_image(image_dir, &lesion_id) {
            Some(p) => p,
            None => {
                missing_images.push(lesion_id.clone());
                PathBuf::new()
            }
        };
        records.push(LesionRecord {
            label: diagnosis.binary_label(),
            lesion_id,
            image_path,
            diagnosis,
        });
    }

    if !missing_images.is_empty() {
        return Err(Error::validation(format!(
            "missing image files for {} lesion(s): {}",
            missing_images.len(),
            missing_images.join(", ")
        )));
    }

    DatasetManifest::from_records(records)
}

fn resolve_image(image_dir: &Path, lesion_id: &str) -> Option<PathBuf> {
    for ext in ["png", "jpg", "jpeg"] {
        let p = image_dir.join(format!("{lesion_id}.{ext}"));
        if p.is_file() {
            return Some(p);
        }
    }
    None
}

/// Generates `k` independent stratified shuffle-splits.
///
/// Fold `i` shuffles each binary class with a ChaCha stream seeded by
/// `seed + i`. Per class, the validation and test sizes are
/// `round_ties_even(fraction * class_count)` and the remainder goes to train,
/// which reproduces 1400/350/250 on the 628/1372 class counts with the
/// 0.70/0.175/0.125 fractions.
pub fn stratified_splits(
    manifest: &DatasetManifest,
    k: usize,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<FoldSplit>> {
    let (f_train, f_val, f_test) = fractions;
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    if f_train <= 0.0 || f_val <= 0.0 || f_test <= 0.0 {
        return Err(Error::validation(format!(
            "fractions must all be positive, got ({f_train}, {f_val}, {f_test})"
        )));
    }
    if (f_train + f_val + f_test - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "fractions must sum to 1, got {}",
            f_train + f_val + f_test
        )));
    }

    let mut by_class: BTreeMap<u8, Vec<&str>> = BTreeMap::new();
    for r in &manifest.records {
        by_class.entry(r.label).or_default().push(r.lesion_id.as_str());
    }
    if by_class.len() < 2 {
        return Err(Error::validation(
            "stratified splits require both classes to be present",
        ));
    }

    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(fold as u64));
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut test = Vec::new();
        for (&label, ids) in &by_class {
            let n = ids.len();
            let n_val = (f_val * n as f64).round_ties_even() as usize;
            let n_test = (f_test * n as f64).round_ties_even() as usize;
            if n_val == 0 || n_test == 0 || n_val + n_test >= n {
                return Err(Error::validation(format!(
                    "class {} has too few members ({n}) to fill every subset role",
                    if label == 1 { "malignant" } else { "benign" },
                )));
            }
            let mut shuffled: Vec<&str> = ids.clone();
            shuffled.shuffle(&mut rng);
            test.extend(shuffled[..n_test].iter().map(|s| s.to_string()));
            val.extend(shuffled[n_test..n_test + n_val].iter().map(|s| s.to_string()));
            train.extend(shuffled[n_test + n_val..].iter().map(|s| s.to_string()));
        }
        train.sort();
        val.sort();
        test.sort();
        folds.push(FoldSplit {
            fold,
            seed,
            train,
            val,
            test,
        });
    }
    Ok(folds)
}

/// w_c = N / (2 * N_c), so the weighted counts of the two classes are equal.
pub fn compute_class_weights(n_benign: usize, n_malignant: usize) -> Result<ClassWeights> {
    if n_benign == 0 || n_malignant == 0 {
        return Err(Error::validation(format!(
            "class weights need both classes present, got benign={n_benign}, malignant={n_malignant}"
        )));
    }
    let n = (n_benign + n_malignant) as f64;
    Ok(ClassWeights {
        benign: n / (2.0 * n_benign as f64),
        malignant: n / (2.0 * n_malignant as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, diagnosis: Diagnosis) -> LesionRecord {
        LesionRecord {
            lesion_id: id.to_string(),
            image_path: PathBuf::new(),
            diagnosis,
            label: diagnosis.binary_label(),
        }
    }

    /// 628 malignant / 1372 benign, mirroring the 2000-lesion composition.
    fn reference_scale_manifest() -> DatasetManifest {
        let mut records = Vec::new();
        for i in 0..374 {
            records.push(record(&format!("MEL{i:04}"), Diagnosis::Melanoma));
        }
        for i in 0..254 {
            records.push(record(&format!("SK{i:04}"), Diagnosis::SeborrheicKeratosis));
        }
        for i in 0..1372 {
            records.push(record(&format!("NEV{i:04}"), Diagnosis::Nevus));
        }
        DatasetManifest::from_records(records).unwrap()
    }

    #[test]
    fn melanoma_is_malignant_nevus_benign() {
        assert_eq!(Diagnosis::Melanoma.binary_label(), 1);
        assert_eq!(Diagnosis::SeborrheicKeratosis.binary_label(), 1);
        assert_eq!(Diagnosis::Nevus.binary_label(), 0);
    }

    #[test]
    fn unknown_diagnosis_is_rejected() {
        let err = "basal_cell".parse::<Diagnosis>().unwrap_err();
        assert!(err.to_string().contains("basal_cell"));
    }

    #[test]
    fn manifest_rejects_duplicate_ids() {
        let records = vec![record("L1", Diagnosis::Nevus), record("L1", Diagnosis::Melanoma)];
        let err = DatasetManifest::from_records(records).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn load_manifest_reads_and_binarizes() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::new(4, 4);
        img.save(dir.path().join("L1.png")).unwrap();
        img.save(dir.path().join("L2.png")).unwrap();
        let labels = dir.path().join("labels.csv");
        std::fs::write(&labels, "lesion_id,diagnosis\nL1,melanoma\nL2,nevus\n").unwrap();
        let manifest = load_manifest(&labels, dir.path()).unwrap();
        assert_eq!(manifest.records[0].label, 1);
        assert_eq!(manifest.records[1].label, 0);
        assert_eq!(manifest.class_counts[&Diagnosis::Melanoma], 1);
    }

    #[test]
    fn load_manifest_lists_missing_images() {
        let dir = tempfile::tempdir().unwrap();
        let labels = dir.path().join("labels.csv");
        std::fs::write(&labels, "lesion_id,diagnosis\nL1,melanoma\nL2,nevus\n").unwrap();
        let err = load_manifest(&labels, dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("L1") && msg.contains("L2"), "{msg}");
    }

    #[test]
    fn reference_scale_sizes_are_exact() {
        let manifest = reference_scale_manifest();
        let folds = stratified_splits(&manifest, 5, (0.70, 0.175, 0.125), 7).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            assert_eq!(f.train.len(), 1400, "train size");
            assert_eq!(f.val.len(), 350, "val size");
            assert_eq!(f.test.len(), 250, "test size");
        }
    }

    #[test]
    fn subsets_are_disjoint_and_stratified() {
        let manifest = reference_scale_manifest();
        let malignant: BTreeSet<String> = manifest
            .records
            .iter()
            .filter(|r| r.label == 1)
            .map(|r| r.lesion_id.clone())
            .collect();
        let global_frac = 628.0 / 2000.0;
        let folds = stratified_splits(&manifest, 5, (0.70, 0.175, 0.125), 7).unwrap();
        for f in &folds {
            let train: BTreeSet<_> = f.train.iter().collect();
            let val: BTreeSet<_> = f.val.iter().collect();
            let test: BTreeSet<_> = f.test.iter().collect();
            assert!(train.is_disjoint(&val));
            assert!(train.is_disjoint(&test));
            assert!(val.is_disjoint(&test));
            for subset in [&f.train, &f.val, &f.test] {
                let m = subset.iter().filter(|id| malignant.contains(*id)).count();
                let frac = m as f64 / subset.len() as f64;
                assert!(
                    (frac - global_frac).abs() <= 1.0 / subset.len() as f64,
                    "fraction {frac} too far from {global_frac}"
                );
            }
        }
    }

    #[test]
    fn splits_are_deterministic_and_fold_dependent() {
        let manifest = reference_scale_manifest();
        let a = stratified_splits(&manifest, 3, (0.70, 0.175, 0.125), 42).unwrap();
        let b = stratified_splits(&manifest, 3, (0.70, 0.175, 0.125), 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].test, a[1].test);
        assert_ne!(a[1].test, a[2].test);
    }

    #[test]
    fn degenerate_fractions_are_rejected() {
        let manifest = reference_scale_manifest();
        let err = stratified_splits(&manifest, 1, (1.0, 0.0, 0.0), 7).unwrap_err();
        assert!(err.to_string().contains("positive"), "{err}");
        let err = stratified_splits(&manifest, 1, (0.5, 0.3, 0.3), 7).unwrap_err();
        assert!(err.to_string().contains("sum to 1"), "{err}");
        let err = stratified_splits(&manifest, 0, (0.7, 0.2, 0.1), 7).unwrap_err();
        assert!(err.to_string().contains("at least 1"), "{err}");
    }

    #[test]
    fn tiny_class_is_rejected() {
        let mut records = vec![record("M1", Diagnosis::Melanoma)];
        for i in 0..50 {
            records.push(record(&format!("N{i}"), Diagnosis::Nevus));
        }
        let manifest = DatasetManifest::from_records(records).unwrap();
        let err = stratified_splits(&manifest, 2, (0.70, 0.175, 0.125), 7).unwrap_err();
        assert!(err.to_string().contains("too few members"), "{err}");
    }

    #[test]
    fn class_weights_match_formula() {
        let w = compute_class_weights(1372, 628).unwrap();
        assert!((w.malignant - 1.59236).abs() < 1e-5, "{}", w.malignant);
        assert!((w.benign - 0.72886).abs() < 1e-5, "{}", w.benign);
        // Weighted counts equalize.
        let rel = (w.malignant * 628.0 - w.benign * 1372.0).abs() / (w.benign * 1372.0);
        assert!(rel < 1e-12);
    }

    #[test]
    fn balanced_classes_give_unit_weights() {
        let w = compute_class_weights(50, 50).unwrap();
        assert_eq!(w.benign, 1.0);
        assert_eq!(w.malignant, 1.0);
    }

    #[test]
    fn small_imbalance_example() {
        let w = compute_class_weights(3, 1).unwrap();
        assert_eq!(w.malignant, 2.0);
        assert!((w.benign - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn absent_class_is_rejected() {
        assert!(compute_class_weights(10, 0).is_err());
        assert!(compute_class_weights(0, 10).is_err());
    }

    #[test]
    fn split_json_round_trip() {
        let manifest = reference_scale_manifest();
        let folds = stratified_splits(&manifest, 1, (0.70, 0.175, 0.125), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fold_0.json");
        folds[0].write_json(&path).unwrap();
        let back = FoldSplit::read_json(&path).unwrap();
        assert_eq!(folds[0], back);
    }
}
