//! Training orchestration: one run = (arm, variant, fold), the full grid is
//! the cross product. Runs are independent and may execute in parallel;
//! every source of randomness is derived from the master seed plus the run
//! coordinates, so results do not depend on scheduling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotations::{Feature, FeatureTable};
use crate::augment::{augment, resize_bilinear, AugmentationSpec};
use crate::dataset::{compute_class_weights, ClassWeights, DatasetManifest, FoldSplit, LesionRecord};
use crate::error::{Error, Result};
use crate::evaluation::Variant;
use crate::losses;
use crate::model::{EncoderKind, EncoderSpec, Model, ModelConfig, DEFAULT_HIDDEN_UNITS};
use crate::nn::RmsProp;

/// Optimizer and schedule settings. Defaults follow the training recipe:
/// 30 epochs, batch 20, RMSprop at learning rate 2.0e-5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rmsprop_rho: f64,
    pub rmsprop_epsilon: f64,
    pub seed: u64,
    pub use_class_weights: bool,
    /// Compute class weights from the whole manifest instead of the fold's
    /// train subset.
    pub global_class_weights: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 30,
            batch_size: 20,
            learning_rate: 2.0e-5,
            rmsprop_rho: 0.9,
            rmsprop_epsilon: 1e-7,
            seed: 0,
            use_class_weights: true,
            global_class_weights: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// One trainable experiment arm: the baseline classifier or a multi-task
/// model regressing one crowd feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Baseline,
    Asymmetry,
    Border,
    Color,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::Asymmetry, Arm::Border, Arm::Color];

    pub fn auxiliary_feature(self) -> Option<Feature> {
        match self {
            Arm::Baseline => None,
            Arm::Asymmetry => Some(Feature::A),
            Arm::Border => Some(Feature::B),
            Arm::Color => Some(Feature::C),
        }
    }

    /// Row name in the results table.
    pub fn report_name(self) -> &'static str {
        match self {
            Arm::Baseline => "Baseline",
            Arm::Asymmetry => "Asymmetry",
            Arm::Border => "Border",
            Arm::Color => "Color",
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arm::Baseline => write!(f, "baseline"),
            Arm::Asymmetry => write!(f, "asymmetry"),
            Arm::Border => write!(f, "border"),
            Arm::Color => write!(f, "color"),
        }
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Arm::Baseline),
            "asymmetry" => Ok(Arm::Asymmetry),
            "border" => Ok(Arm::Border),
            "color" => Ok(Arm::Color),
            other => Err(Error::config(format!(
                "unknown arm {other:?}, expected baseline, asymmetry, border or color"
            ))),
        }
    }
}

/// Yields lesion images as (h, w, 3) arrays with intensities in [0, 255].
pub trait ImageSource: Sync {
    fn load(&self, record: &LesionRecord) -> Result<Array3<f64>>;
}

/// Reads each record's `image_path` from disk.
pub struct DirImageSource;

impl ImageSource for DirImageSource {
    fn load(&self, record: &LesionRecord) -> Result<Array3<f64>> {
        let img = image::open(&record.image_path)
            .map_err(|e| Error::Image {
                path: record.image_path.clone(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Array3::from_shape_fn(
            (h as usize, w as usize, 3),
            |(y, x, c)| img.get_pixel(x as u32, y as u32)[c] as f64,
        ))
    }
}

/// In-memory image map, used by tests and the synthetic generator.
pub struct InMemoryImageSource {
    pub images: BTreeMap<String, Array3<f64>>,
}

impl ImageSource for InMemoryImageSource {
    fn load(&self, record: &LesionRecord) -> Result<Array3<f64>> {
        self.images
            .get(&record.lesion_id)
            .cloned()
            .ok_or_else(|| Error::validation(format!("no image for lesion {:?}", record.lesion_id)))
    }
}

/// Everything a training run reads: manifest, aggregated crowd features,
/// images and the augmentation recipe.
pub struct TrainData<'a> {
    pub manifest: &'a DatasetManifest,
    pub features: &'a FeatureTable,
    pub images: &'a dyn ImageSource,
    pub augmentation: &'a AugmentationSpec,
}

/// Architecture choices shared by every run of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDefaults {
    pub encoder: EncoderKind,
    pub hidden_units: usize,
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for ModelDefaults {
    fn default() -> Self {
        ModelDefaults {
            encoder: EncoderKind::TinyTest,
            hidden_units: DEFAULT_HIDDEN_UNITS,
            pretrained_weights: None,
        }
    }
}

/// One prediction: the model's malignancy probability for one lesion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub lesion_id: String,
    pub probability: f64,
    pub label: u8,
}

/// Everything one training run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub arm: Arm,
    pub auxiliary_feature: Option<Feature>,
    pub variant: Variant,
    pub fold: usize,
    pub model_config: ModelConfig,
    pub training: TrainingConfig,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub val_predictions: Vec<Prediction>,
    pub test_predictions: Vec<Prediction>,
}

impl RunRecord {
    pub fn run_name(&self) -> String {
        format!("{}_{}_fold{}", self.arm, self.variant, self.fold)
    }

    /// JSON summary with the config echo and loss curves; predictions go to
    /// the referenced CSV files.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Summary<'a> {
            arm: Arm,
            auxiliary_feature: &'a Option<Feature>,
            variant: Variant,
            fold: usize,
            model_config: &'a ModelConfig,
            training: &'a TrainingConfig,
            train_losses: &'a [f64],
            val_losses: &'a [f64],
            val_predictions_file: String,
            test_predictions_file: String,
        }
        let summary = Summary {
            arm: self.arm,
            auxiliary_feature: &self.auxiliary_feature,
            variant: self.variant,
            fold: self.fold,
            model_config: &self.model_config,
            training: &self.training,
            train_losses: &self.train_losses,
            val_losses: &self.val_losses,
            val_predictions_file: "val_predictions.csv".to_string(),
            test_predictions_file: "test_predictions.csv".to_string(),
        };
        let json = serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::validation(format!("run record serialization failed: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn write_predictions_csv(&self, subset: Subset, path: &Path) -> Result<()> {
        let preds = match subset {
            Subset::Val => &self.val_predictions,
            Subset::Test => &self.test_predictions,
        };
        write_predictions_csv(preds, self.fold, &self.arm.to_string(), self.variant, path)
    }
}

/// Which fold subset a prediction file covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    Val,
    Test,
}

impl std::fmt::Display for Subset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Subset::Val => write!(f, "val"),
            Subset::Test => write!(f, "test"),
        }
    }
}

/// Writes `lesion_id,fold,model,variant,probability,label`.
pub fn write_predictions_csv(
    predictions: &[Prediction],
    fold: usize,
    model: &str,
    variant: Variant,
    path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_record(["lesion_id", "fold", "model", "variant", "probability", "label"])
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for p in predictions {
        w.write_record([
            p.lesion_id.clone(),
            fold.to_string(),
            model.to_string(),
            variant.to_string(),
            format!("{}", p.probability),
            p.label.to_string(),
        ])
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<Prediction>> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if record.len() != 6 {
            return Err(parse_err(format!("expected 6 fields, got {}", record.len())));
        }
        out.push(Prediction {
            lesion_id: record[0].to_string(),
            probability: record[4]
                .parse()
                .map_err(|_| parse_err(format!("bad probability {:?}", &record[4])))?,
            label: record[5]
                .parse()
                .map_err(|_| parse_err(format!("bad label {:?}", &record[5])))?,
        });
    }
    Ok(out)
}

/// Aligned per-model probabilities feeding the ensembles.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    pub lesion_ids: Vec<String>,
    pub labels: Vec<u8>,
    /// Ordered columns, e.g. ("A", probabilities).
    pub columns: Vec<(String, Vec<f64>)>,
}

impl PredictionMatrix {
    pub fn new(
        lesion_ids: Vec<String>,
        labels: Vec<u8>,
        columns: Vec<(String, Vec<f64>)>,
    ) -> Result<Self> {
        let n = lesion_ids.len();
        if labels.len() != n {
            return Err(Error::shape(format!(
                "labels length {} does not match {n} lesions",
                labels.len()
            )));
        }
        for (name, col) in &columns {
            if col.len() != n {
                return Err(Error::shape(format!(
                    "column {name} has length {}, expected {n}",
                    col.len()
                )));
            }
            if let Some(bad) = col.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
                return Err(Error::validation(format!(
                    "column {name} contains probability {bad} outside (0, 1)"
                )));
            }
        }
        Ok(PredictionMatrix {
            lesion_ids,
            labels,
            columns,
        })
    }

    pub fn len(&self) -> usize {
        self.lesion_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lesion_ids.is_empty()
    }
}

/// Builds the 3-column (A, B, C) matrix for one fold and variant from
/// per-feature prediction lists, validating alignment.
pub fn prediction_matrix_from_lists(
    per_feature: [(Feature, Vec<Prediction>); 3],
) -> Result<PredictionMatrix> {
    let base = &per_feature[0].1;
    let lesion_ids: Vec<String> = base.iter().map(|p| p.lesion_id.clone()).collect();
    let labels: Vec<u8> = base.iter().map(|p| p.label).collect();
    let mut columns = Vec::new();
    for (feature, preds) in &per_feature {
        if preds.len() != base.len() {
            return Err(Error::shape(format!(
                "feature {feature} has {} predictions, expected {}",
                preds.len(),
                base.len()
            )));
        }
        for (p, id) in preds.iter().zip(&lesion_ids) {
            if &p.lesion_id != id {
                return Err(Error::validation(format!(
                    "prediction lists are misaligned: {} vs {id}",
                    p.lesion_id
                )));
            }
        }
        columns.push((feature.to_string(), preds.iter().map(|p| p.probability).collect()));
    }
    PredictionMatrix::new(lesion_ids, labels, columns)
}

/// Extracts the (A, B, C) matrix for `fold`/`variant`/`subset` from a set of
/// run records (the three multi-task arms must be present).
pub fn assemble_prediction_matrix(
    records: &[RunRecord],
    fold: usize,
    variant: Variant,
    subset: Subset,
) -> Result<PredictionMatrix> {
    let mut per_feature: Vec<(Feature, Vec<Prediction>)> = Vec::new();
    for arm in [Arm::Asymmetry, Arm::Border, Arm::Color] {
        let record = records
            .iter()
            .find(|r| r.arm == arm && r.variant == variant && r.fold == fold)
            .ok_or_else(|| {
                Error::validation(format!(
                    "missing run {arm} ({variant}) for fold {fold}; train the multi-task arms first"
                ))
            })?;
        let preds = match subset {
            Subset::Val => record.val_predictions.clone(),
            Subset::Test => record.test_predictions.clone(),
        };
        per_feature.push((arm.auxiliary_feature().unwrap(), preds));
    }
    let arr: [(Feature, Vec<Prediction>); 3] = per_feature
        .try_into()
        .map_err(|_| Error::validation("expected exactly 3 multi-task arms"))?;
    prediction_matrix_from_lists(arr)
}

/// Deterministic sub-seed from the master seed and run coordinates.
pub fn derive_seed(master: u64, tags: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for tag in tags {
        hasher.update([0xff]);
        hasher.update(tag.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn build_model_config(
    arm: Arm,
    variant: Variant,
    defaults: &ModelDefaults,
    input_size: (usize, usize),
) -> Result<ModelConfig> {
    let encoder = EncoderSpec::new(defaults.encoder, variant.trainable_encoder(), input_size)?;
    Ok(match arm.auxiliary_feature() {
        None => ModelConfig::baseline(encoder, defaults.hidden_units),
        Some(feature) => ModelConfig::multitask(encoder, defaults.hidden_units, feature),
    })
}

fn build_model(config: &ModelConfig, defaults: &ModelDefaults, init_seed: u64) -> Result<Model> {
    match (defaults.encoder, &defaults.pretrained_weights) {
        (EncoderKind::Vgg16Pretrained, Some(path)) => {
            Model::build_with_pretrained(config, init_seed, path)
        }
        (EncoderKind::Vgg16Pretrained, None) => Err(Error::config(
            "encoder vgg16_pretrained requires model.pretrained_weights to point at a weights file",
        )),
        (EncoderKind::TinyTest, _) => Model::build(config, init_seed),
    }
}

struct FoldIndices {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

fn resolve_fold(manifest: &DatasetManifest, fold: &FoldSplit) -> Result<FoldIndices> {
    let index = manifest.index_of();
    let resolve = |ids: &[String], subset: &str| -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                index.get(id.as_str()).copied().ok_or_else(|| {
                    Error::validation(format!(
                        "{subset} lesion {id:?} is not in the manifest; splits and labels disagree"
                    ))
                })
            })
            .collect()
    };
    Ok(FoldIndices {
        train: resolve(&fold.train, "train")?,
        val: resolve(&fold.val, "val")?,
        test: resolve(&fold.test, "test")?,
    })
}

/// Trains one (arm, variant) model on one fold and returns the run record
/// together with the trained model (for checkpointing).
pub fn train_one(
    arm: Arm,
    variant: Variant,
    fold: &FoldSplit,
    data: &TrainData,
    defaults: &ModelDefaults,
    config: &TrainingConfig,
) -> Result<(RunRecord, Model)> {
    config.validate()?;
    data.augmentation.validate()?;
    if data.features.len() != data.manifest.len() {
        return Err(Error::shape(format!(
            "feature table covers {} lesions, manifest has {}",
            data.features.len(),
            data.manifest.len()
        )));
    }

    let input_size = data.augmentation.output_size;
    let model_config = build_model_config(arm, variant, defaults, input_size)?;
    let run_tag = format!("{arm}_{variant}_fold{}", fold.fold);
    let init_seed = derive_seed(config.seed, &["init", &run_tag]);
    let mut model = build_model(&model_config, defaults, init_seed)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["data", &run_tag]));

    let indices = resolve_fold(data.manifest, fold)?;
    let class_weights = if config.use_class_weights {
        let (benign, malignant) = if config.global_class_weights {
            (data.manifest.benign_count(), data.manifest.malignant_count())
        } else {
            let malignant = indices
                .train
                .iter()
                .filter(|&&i| data.manifest.records[i].label == 1)
                .count();
            (indices.train.len() - malignant, malignant)
        };
        compute_class_weights(benign, malignant)?
    } else {
        ClassWeights::neutral()
    };

    let aux = arm.auxiliary_feature().map(|feature| {
        let values = &data.features.values[&feature];
        let mask = &data.features.mask[&feature];
        (values.clone(), mask.clone())
    });

    let mut opt = RmsProp::new(config.learning_rate, config.rmsprop_rho, config.rmsprop_epsilon);
    let mut train_losses = Vec::with_capacity(config.epochs);
    let mut val_losses = Vec::with_capacity(config.epochs);
    let mut train_order = indices.train.clone();

    for epoch in 0..config.epochs {
        train_order.shuffle(&mut data_rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in train_order.chunks(config.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let raw = data.images.load(&data.manifest.records[i])?;
                images.push(augment(&raw, data.augmentation, &mut data_rng)?);
            }
            let x = model.preprocess(&images)?;
            let fwd = model.forward_train(x)?;
            let p = fwd.classification();
            let y: Vec<u8> = chunk.iter().map(|&i| data.manifest.records[i].label).collect();

            let bce = losses::weighted_bce(&y, &p, &class_weights)?;
            let (loss, grad_reg) = match (&aux, fwd.regression()) {
                (Some((values, mask)), Some(r)) => {
                    let aux_true: Vec<f64> = chunk.iter().map(|&i| values[i]).collect();
                    let aux_mask: Vec<u8> = chunk.iter().map(|&i| mask[i]).collect();
                    let mmse = losses::masked_mse(&aux_true, &r, &aux_mask)?;
                    let grad = losses::masked_mse_grad(&aux_true, &r, &aux_mask)?;
                    (bce + mmse, Some(grad))
                }
                (None, None) => (bce, None),
                _ => unreachable!("model kind and arm agree by construction"),
            };

            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {loss} at epoch {}, step {} of run {run_tag}",
                    epoch + 1,
                    step + 1
                )));
            }

            let grad_logits = losses::weighted_bce_grad_logits(&y, &p, &class_weights);
            model.zero_grads();
            model.backward(&fwd, &grad_logits, grad_reg.as_deref())?;
            model.apply_updates(&mut opt);

            epoch_loss += loss;
            steps += 1;
        }
        train_losses.push(epoch_loss / steps.max(1) as f64);
        val_losses.push(evaluate_loss(&model, &indices.val, data, &class_weights, aux.as_ref(), config.batch_size)?);
    }

    let val_predictions = predict_subset(&model, &indices.val, data, config.batch_size)?;
    let test_predictions = predict_subset(&model, &indices.test, data, config.batch_size)?;

    let record = RunRecord {
        arm,
        auxiliary_feature: arm.auxiliary_feature(),
        variant,
        fold: fold.fold,
        model_config,
        training: config.clone(),
        train_losses,
        val_losses,
        val_predictions,
        test_predictions,
    };
    Ok((record, model))
}

fn load_eval_batch(
    data: &TrainData,
    indices: &[usize],
    input_size: (usize, usize),
) -> Result<Vec<Array3<f64>>> {
    indices
        .iter()
        .map(|&i| {
            let raw = data.images.load(&data.manifest.records[i])?;
            Ok(resize_bilinear(&raw, input_size))
        })
        .collect()
}

fn evaluate_loss(
    model: &Model,
    indices: &[usize],
    data: &TrainData,
    class_weights: &ClassWeights,
    aux: Option<&(Vec<f64>, Vec<u8>)>,
    batch_size: usize,
) -> Result<f64> {
    let input_size = model.config.encoder.input_size;
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in indices.chunks(batch_size) {
        let images = load_eval_batch(data, chunk, input_size)?;
        let out = model.predict_images(&images)?;
        let y: Vec<u8> = chunk.iter().map(|&i| data.manifest.records[i].label).collect();
        let mut loss = losses::weighted_bce(&y, &out.classification, class_weights)?;
        if let (Some((values, mask)), Some(r)) = (aux, &out.regression) {
            let aux_true: Vec<f64> = chunk.iter().map(|&i| values[i]).collect();
            let aux_mask: Vec<u8> = chunk.iter().map(|&i| mask[i]).collect();
            loss += losses::masked_mse(&aux_true, r, &aux_mask)?;
        }
        total += loss;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

fn predict_subset(
    model: &Model,
    indices: &[usize],
    data: &TrainData,
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    let input_size = model.config.encoder.input_size;
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size) {
        let images = load_eval_batch(data, chunk, input_size)?;
        let preds = model.predict_images(&images)?;
        for (&i, &p) in chunk.iter().zip(&preds.classification) {
            let record = &data.manifest.records[i];
            out.push(Prediction {
                lesion_id: record.lesion_id.clone(),
                // Saturated logits can round the sigmoid to exactly 0 or 1
                // in f64; emitted probabilities stay strictly inside (0, 1).
                probability: p.clamp(1e-12, 1.0 - 1e-12),
                label: record.label,
            });
        }
    }
    Ok(out)
}

/// The experiment grid: arms x variants x folds.
pub struct ExperimentPlan {
    pub arms: Vec<Arm>,
    pub variants: Vec<Variant>,
    pub folds: Vec<FoldSplit>,
    pub defaults: ModelDefaults,
    pub training: TrainingConfig,
}

impl ExperimentPlan {
    pub fn runs(&self) -> Vec<(Arm, Variant, &FoldSplit)> {
        let mut out = Vec::new();
        for arm in &self.arms {
            for variant in &self.variants {
                for fold in &self.folds {
                    out.push((*arm, *variant, fold));
                }
            }
        }
        out
    }
}

/// Runs the whole grid, fanning runs out over up to `jobs` worker threads.
/// `on_run` fires in the worker as soon as a run finishes (checkpointing,
/// progress); records are returned in grid order regardless of scheduling.
pub fn run_cross_validation<F>(
    plan: &ExperimentPlan,
    data: &TrainData,
    jobs: usize,
    on_run: F,
) -> Result<Vec<RunRecord>>
where
    F: Fn(&RunRecord, &Model) -> Result<()> + Sync,
{
    let runs = plan.runs();
    let jobs = jobs.max(1).min(runs.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<Mutex<Option<Result<RunRecord>>>> =
        (0..runs.len()).map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= runs.len() {
                    break;
                }
                let (arm, variant, fold) = runs[i];
                let outcome = train_one(arm, variant, fold, data, &plan.defaults, &plan.training)
                    .and_then(|(record, model)| {
                        on_run(&record, &model)?;
                        Ok(record)
                    });
                *results[i].lock().unwrap() = Some(outcome);
            });
        }
    });

    results
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("every run executed"))
        .collect()
}
