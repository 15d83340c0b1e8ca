//! The five pipeline commands: prepare, split, train, ensemble, report.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Serialize;

use crowdtask::annotations::{
    aggregate_per_lesion, feature_density_summary, ingest_annotations, read_density_json,
    standardize_per_annotator, write_density_json, Feature, FeatureTable,
};
use crowdtask::dataset::{load_manifest, stratified_splits, DatasetManifest, FoldSplit};
use crowdtask::ensemble::{
    average_ensemble, optimize_weights_de, weighted_ensemble, WeightsRecord,
};
use crowdtask::error::{Error, Result};
use crowdtask::evaluation::{
    format_results_table, roc_auc, summarize, write_results_csv, Variant, REPORT_MODELS,
};
use crowdtask::plots::emit_plots;
use crowdtask::training::{
    derive_seed, prediction_matrix_from_lists, read_predictions_csv, run_cross_validation,
    write_predictions_csv, Arm, DirImageSource, ExperimentPlan, Prediction, PredictionMatrix,
    Subset, TrainData,
};

use crate::config::PipelineConfig;
use crate::paths::Workspace;

pub struct Context {
    pub config: PipelineConfig,
    pub ws: Workspace,
}

impl Context {
    pub fn new(config: PipelineConfig) -> Result<Context> {
        config.validate()?;
        if config.synthetic {
            // Deterministic generation; skipped when the labels file already
            // exists (the same settings always write byte-identical data).
            if !config.paths.labels.is_file() {
                let parent = config
                    .paths
                    .labels
                    .parent()
                    .ok_or_else(|| Error::config("synthetic data path has no parent"))?;
                let (_, counts) = crowdtask::synth::generate(&config.synthetic_spec(), parent)?;
                println!(
                    "generated synthetic dataset: {} lesions, {} annotated (A={}, B={}, C={})",
                    counts.lesions, counts.annotated, counts.with_a, counts.with_b, counts.with_c
                );
            }
        }
        config.validate_paths()?;
        let ws = Workspace::new(&config.paths.output, &config.hash());
        Ok(Context { config, ws })
    }

    fn manifest(&self) -> Result<DatasetManifest> {
        load_manifest(&self.config.paths.labels, &self.config.paths.images)
    }

    fn feature_table(&self) -> Result<FeatureTable> {
        let path = self.ws.feature_table();
        if !path.is_file() {
            return Err(Error::MissingArtifact(path));
        }
        FeatureTable::read_csv(&path)
    }

    fn splits(&self) -> Result<Vec<FoldSplit>> {
        (0..self.config.dataset.folds)
            .map(|fold| {
                let path = self.ws.split_file(fold);
                if !path.is_file() {
                    return Err(Error::MissingArtifact(path));
                }
                FoldSplit::read_json(&path)
            })
            .collect()
    }
}

#[derive(Serialize)]
struct ValidationReport {
    lesions: usize,
    class_counts: BTreeMap<String, usize>,
    annotations: usize,
    annotators: usize,
    annotated_lesions: usize,
    feature_counts: BTreeMap<String, usize>,
}

/// Ingest, standardize and aggregate the crowd annotations; write the
/// feature table, density summaries and a validation report.
pub fn prepare(ctx: &Context) -> Result<()> {
    let manifest = ctx.manifest()?;
    let raw = ingest_annotations(&ctx.config.paths.annotations)?;
    let standardized = standardize_per_annotator(&raw);
    let table = aggregate_per_lesion(&standardized, &manifest.lesion_ids())?;

    std::fs::create_dir_all(ctx.ws.features_dir())
        .map_err(|e| Error::io(ctx.ws.features_dir(), e))?;
    table.write_csv(&ctx.ws.feature_table())?;

    let annotators: std::collections::BTreeSet<&str> =
        raw.iter().map(|a| a.annotator_id.as_str()).collect();
    let annotated: std::collections::BTreeSet<&str> =
        raw.iter().map(|a| a.lesion_id.as_str()).collect();
    let report = ValidationReport {
        lesions: manifest.len(),
        class_counts: manifest
            .class_counts
            .iter()
            .map(|(d, c)| (d.to_string(), *c))
            .collect(),
        annotations: raw.len(),
        annotators: annotators.len(),
        annotated_lesions: annotated.len(),
        feature_counts: Feature::ALL
            .iter()
            .map(|&f| (f.to_string(), table.annotated_count(f)))
            .collect(),
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::validation(format!("report serialization failed: {e}")))?;
    std::fs::write(ctx.ws.validation_report(), json)
        .map_err(|e| Error::io(ctx.ws.validation_report(), e))?;

    match feature_density_summary(&table, &manifest.labels()) {
        Ok(densities) => {
            write_density_json(&densities, &ctx.ws.densities())?;
            println!("densities: {}", ctx.ws.densities().display());
        }
        Err(e) => eprintln!("warning: skipping density summaries: {e}"),
    }

    println!("feature table: {}", ctx.ws.feature_table().display());
    println!(
        "lesions: {} ({} annotated); annotated per feature: A={}, B={}, C={}",
        report.lesions,
        report.annotated_lesions,
        report.feature_counts["A"],
        report.feature_counts["B"],
        report.feature_counts["C"]
    );
    Ok(())
}

/// Generate and persist the stratified shuffle-split folds.
pub fn split(ctx: &Context) -> Result<()> {
    let manifest = ctx.manifest()?;
    let seed = derive_seed(ctx.config.seed, &["splits"]);
    let folds = stratified_splits(
        &manifest,
        ctx.config.dataset.folds,
        ctx.config.fractions(),
        seed,
    )?;
    std::fs::create_dir_all(ctx.ws.splits_dir()).map_err(|e| Error::io(ctx.ws.splits_dir(), e))?;
    for fold in &folds {
        let path = ctx.ws.split_file(fold.fold);
        fold.write_json(&path)?;
        println!(
            "fold {}: train={} val={} test={} -> {}",
            fold.fold,
            fold.train.len(),
            fold.val.len(),
            fold.test.len(),
            path.display()
        );
    }
    Ok(())
}

pub struct TrainSelection {
    pub arms: Vec<Arm>,
    pub variants: Vec<Variant>,
    pub folds: Option<usize>,
    pub jobs: usize,
}

pub fn parse_arms(s: &str) -> Result<Vec<Arm>> {
    if s == "all" {
        Ok(Arm::ALL.to_vec())
    } else {
        Ok(vec![s.parse()?])
    }
}

pub fn parse_variants(s: &str) -> Result<Vec<Variant>> {
    if s == "all" {
        Ok(Variant::ALL.to_vec())
    } else {
        Ok(vec![s.parse()?])
    }
}

pub fn parse_fold(s: &str, k: usize) -> Result<Option<usize>> {
    if s == "all" {
        return Ok(None);
    }
    let fold: usize = s
        .parse()
        .map_err(|_| Error::config(format!("bad fold {s:?}, expected an index or \"all\"")))?;
    if fold >= k {
        return Err(Error::config(format!(
            "fold {fold} out of range, config has {k} folds"
        )));
    }
    Ok(Some(fold))
}

/// Train the selected (arm, variant, fold) grid and persist run records,
/// predictions and checkpoints.
pub fn train(ctx: &Context, selection: &TrainSelection) -> Result<()> {
    let manifest = ctx.manifest()?;
    let features = ctx.feature_table()?;
    let splits = ctx.splits()?;
    let folds: Vec<FoldSplit> = match selection.folds {
        Some(f) => vec![splits[f].clone()],
        None => splits,
    };

    let plan = ExperimentPlan {
        arms: selection.arms.clone(),
        variants: selection.variants.clone(),
        folds,
        defaults: ctx.config.model_defaults()?,
        training: ctx.config.training_config(),
    };
    let source = DirImageSource;
    let data = TrainData {
        manifest: &manifest,
        features: &features,
        images: &source,
        augmentation: &ctx.config.augmentation,
    };

    let ws = &ctx.ws;
    let records = run_cross_validation(&plan, &data, selection.jobs, |record, model| {
        let dir = ws.run_dir(record.arm, record.variant, record.fold);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        record.write_json(&dir.join("run_record.json"))?;
        record.write_predictions_csv(Subset::Val, &dir.join("val_predictions.csv"))?;
        record.write_predictions_csv(Subset::Test, &dir.join("test_predictions.csv"))?;
        model.save_checkpoint(&ws.checkpoint_dir(record.arm, record.variant, record.fold))?;
        println!(
            "trained {}: final train loss {:.4}, val loss {:.4}",
            record.run_name(),
            record.train_losses.last().unwrap_or(&f64::NAN),
            record.val_losses.last().unwrap_or(&f64::NAN),
        );
        Ok(())
    })?;
    println!("completed {} run(s)", records.len());
    Ok(())
}

pub struct EnsembleSelection {
    pub strategies: Vec<String>,
    pub variants: Vec<Variant>,
    pub folds: Option<usize>,
    pub optimize_on: Option<String>,
}

pub fn parse_strategies(s: &str) -> Result<Vec<String>> {
    match s {
        "all" => Ok(vec!["avg".to_string(), "de".to_string()]),
        "avg" | "de" => Ok(vec![s.to_string()]),
        other => Err(Error::config(format!(
            "unknown strategy {other:?}, expected avg, de or all"
        ))),
    }
}

fn load_matrix(ctx: &Context, variant: Variant, fold: usize, subset: Subset) -> Result<PredictionMatrix> {
    let file = match subset {
        Subset::Val => "val_predictions.csv",
        Subset::Test => "test_predictions.csv",
    };
    let mut lists: Vec<(Feature, Vec<Prediction>)> = Vec::new();
    for arm in [Arm::Asymmetry, Arm::Border, Arm::Color] {
        let path = ctx.ws.run_dir(arm, variant, fold).join(file);
        let preds = read_predictions_csv(&path)?;
        lists.push((arm.auxiliary_feature().unwrap(), preds));
    }
    let arr: [(Feature, Vec<Prediction>); 3] = lists
        .try_into()
        .map_err(|_| Error::validation("expected 3 multi-task prediction lists"))?;
    prediction_matrix_from_lists(arr)
}

fn write_blend(
    ctx: &Context,
    strategy: &str,
    variant: Variant,
    fold: usize,
    subset: Subset,
    pm: &PredictionMatrix,
    blended: Vec<f64>,
) -> Result<()> {
    let dir = ctx.ws.ensemble_dir(strategy, variant, fold);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let preds: Vec<Prediction> = pm
        .lesion_ids
        .iter()
        .zip(&pm.labels)
        .zip(blended)
        .map(|((lesion_id, &label), probability)| Prediction {
            lesion_id: lesion_id.clone(),
            probability,
            label,
        })
        .collect();
    let file = match subset {
        Subset::Val => "val_predictions.csv",
        Subset::Test => "test_predictions.csv",
    };
    write_predictions_csv(&preds, fold, strategy, variant, &dir.join(file))
}

/// Combine the three multi-task models' predictions per fold and variant.
pub fn ensemble(ctx: &Context, selection: &EnsembleSelection) -> Result<()> {
    let folds: Vec<usize> = match selection.folds {
        Some(f) => vec![f],
        None => (0..ctx.config.dataset.folds).collect(),
    };
    let optimize_on = selection
        .optimize_on
        .clone()
        .unwrap_or_else(|| ctx.config.ensemble.optimize_on.clone());
    if !matches!(optimize_on.as_str(), "val" | "test") {
        return Err(Error::config(format!(
            "optimize_on must be \"val\" or \"test\", got {optimize_on:?}"
        )));
    }

    for &variant in &selection.variants {
        for &fold in &folds {
            let val_pm = load_matrix(ctx, variant, fold, Subset::Val)?;
            let test_pm = load_matrix(ctx, variant, fold, Subset::Test)?;

            for strategy in &selection.strategies {
                match strategy.as_str() {
                    "avg" => {
                        write_blend(ctx, "averaging", variant, fold, Subset::Val, &val_pm,
                            average_ensemble(&val_pm)?)?;
                        write_blend(ctx, "averaging", variant, fold, Subset::Test, &test_pm,
                            average_ensemble(&test_pm)?)?;
                        println!("averaging ensemble written for {variant} fold {fold}");
                    }
                    "de" => {
                        let opt_pm = if optimize_on == "val" { &val_pm } else { &test_pm };
                        let (weights, achieved) =
                            optimize_weights_de(opt_pm, &ctx.config.de_config(fold))?;
                        write_blend(ctx, "optimized", variant, fold, Subset::Val, &val_pm,
                            weighted_ensemble(&val_pm, &weights)?)?;
                        write_blend(ctx, "optimized", variant, fold, Subset::Test, &test_pm,
                            weighted_ensemble(&test_pm, &weights)?)?;
                        let record = WeightsRecord {
                            fold,
                            weights: weights.w,
                            optimized_on: optimize_on.clone(),
                            achieved_auc: achieved,
                        };
                        let dir = ctx.ws.ensemble_dir("optimized", variant, fold);
                        record.write_json(&dir.join("weights.json"))?;
                        println!(
                            "optimized ensemble for {variant} fold {fold}: weights [{:.3}, {:.3}, {:.3}], {} AUC {:.4}",
                            weights.w[0], weights.w[1], weights.w[2], optimize_on, achieved
                        );
                    }
                    other => return Err(Error::config(format!("unknown strategy {other:?}"))),
                }
            }
        }
    }
    Ok(())
}

/// Aggregate per-fold test AUCs into the results table and emit plots.
pub fn report(ctx: &Context, formats: &[String]) -> Result<()> {
    let k = ctx.config.dataset.folds;
    let mut fold_aucs: BTreeMap<(String, Variant), Vec<f64>> = BTreeMap::new();
    let mut missing: Vec<String> = Vec::new();

    let mut add_cell = |name: &str, variant: Variant, paths: Vec<PathBuf>| {
        let mut aucs = Vec::new();
        for path in &paths {
            match read_predictions_csv(path) {
                Ok(preds) => {
                    let scores: Vec<f64> = preds.iter().map(|p| p.probability).collect();
                    let labels: Vec<u8> = preds.iter().map(|p| p.label).collect();
                    match roc_auc(&scores, &labels) {
                        Ok(auc) => aucs.push(auc),
                        Err(e) => missing.push(format!("{name} ({variant}): {e}")),
                    }
                }
                Err(_) => missing.push(format!("{name} ({variant}): missing {}", path.display())),
            }
        }
        if aucs.len() == paths.len() {
            fold_aucs.insert((name.to_string(), variant), aucs);
        }
    };

    for variant in Variant::ALL {
        for arm in Arm::ALL {
            let paths = (0..k)
                .map(|f| ctx.ws.run_dir(arm, variant, f).join("test_predictions.csv"))
                .collect();
            add_cell(arm.report_name(), variant, paths);
        }
        for (strategy, name) in [
            ("averaging", "Averaging"),
            ("optimized", "Optimized weighted averaging"),
        ] {
            let paths = (0..k)
                .map(|f| ctx.ws.ensemble_dir(strategy, variant, f).join("test_predictions.csv"))
                .collect();
            add_cell(name, variant, paths);
        }
    }

    for warning in &missing {
        eprintln!("warning: incomplete cell: {warning}");
    }
    if fold_aucs.is_empty() {
        return Err(Error::validation(
            "no results found; run train and ensemble first",
        ));
    }

    let expected: Vec<(String, Variant)> = fold_aucs.keys().cloned().collect();
    let scores = summarize(&fold_aucs, &expected)?;

    let dir = ctx.ws.report_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let table = format_results_table(&scores);
    print!("{table}");
    if formats.iter().any(|f| f == "txt") {
        let path = dir.join("results.txt");
        std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
        println!("table: {}", path.display());
    }
    if formats.iter().any(|f| f == "csv") {
        let path = dir.join("results.csv");
        // Keep the canonical row order in the CSV.
        let mut ordered = scores.clone();
        ordered.sort_by_key(|s| {
            (
                REPORT_MODELS
                    .iter()
                    .position(|m| *m == s.model_name)
                    .unwrap_or(REPORT_MODELS.len()),
                s.variant,
            )
        });
        write_results_csv(&ordered, &path)?;
        println!("table: {}", path.display());
    }

    let densities = if ctx.ws.densities().is_file() {
        read_density_json(&ctx.ws.densities())?
    } else {
        Vec::new()
    };
    let files = emit_plots(&scores, &densities, &ctx.ws.plots_dir())?;
    for f in files {
        println!("plot: {}", f.display());
    }
    Ok(())
}

pub fn parse_formats(s: &str) -> Result<Vec<String>> {
    match s {
        "both" => Ok(vec!["txt".to_string(), "csv".to_string()]),
        "txt" | "csv" => Ok(vec![s.to_string()]),
        other => Err(Error::config(format!(
            "unknown format {other:?}, expected txt, csv or both"
        ))),
    }
}
