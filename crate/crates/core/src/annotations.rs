//! Crowd annotation handling: ingest raw per-annotator ABC scores, standardize
//! them per annotator, aggregate per lesion and summarize their distributions.
//!
//! Scores arrive on whatever personal scale each annotator used. Every
//! (annotator, feature) group is standardized to mean 0 / population std 1,
//! then the standardized scores are averaged per lesion. Lesions without a
//! score for some feature get value 0 and mask 0 so the missing entry can be
//! excluded downstream.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three crowdsourced visual criteria: Asymmetry, Border, Color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Feature {
    A,
    B,
    C,
}

impl Feature {
    pub const ALL: [Feature; 3] = [Feature::A, Feature::B, Feature::C];

    /// Long-form name used in reports ("Asymmetry", "Border", "Color").
    pub fn long_name(self) -> &'static str {
        match self {
            Feature::A => "Asymmetry",
            Feature::B => "Border",
            Feature::C => "Color",
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Feature::A => write!(f, "A"),
            Feature::B => write!(f, "B"),
            Feature::C => write!(f, "C"),
        }
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Feature::A),
            "B" => Ok(Feature::B),
            "C" => Ok(Feature::C),
            other => Err(Error::validation(format!(
                "unknown feature {other:?}, expected one of A, B, C"
            ))),
        }
    }
}

/// One annotator's raw score for one feature of one lesion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAnnotation {
    pub lesion_id: String,
    pub annotator_id: String,
    pub feature: Feature,
    pub score: f64,
}

/// Per-(annotator, feature) moments of the raw scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorStats {
    pub annotator_id: String,
    pub feature: Feature,
    pub mean: f64,
    /// Population standard deviation (divide by n).
    pub std: f64,
    pub count: usize,
}

/// Per-lesion aggregated standardized feature values plus availability masks.
///
/// `values[f][i]` is the mean standardized score of feature `f` for lesion
/// `lesion_ids[i]` over the annotators who scored it; `mask[f][i]` is 1 when
/// at least one score exists and 0 otherwise (in which case the value is 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub lesion_ids: Vec<String>,
    pub values: BTreeMap<Feature, Vec<f64>>,
    pub mask: BTreeMap<Feature, Vec<u8>>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.lesion_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lesion_ids.is_empty()
    }

    pub fn value(&self, feature: Feature, index: usize) -> f64 {
        self.values[&feature][index]
    }

    pub fn available(&self, feature: Feature, index: usize) -> bool {
        self.mask[&feature][index] == 1
    }

    /// Number of lesions with at least one score for `feature`.
    pub fn annotated_count(&self, feature: Feature) -> usize {
        self.mask[&feature].iter().filter(|&&m| m == 1).count()
    }

    /// Writes `lesion_id,A_value,A_mask,B_value,B_mask,C_value,C_mask`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record([
            "lesion_id", "A_value", "A_mask", "B_value", "B_mask", "C_value", "C_mask",
        ])
        .map_err(|e| csv_error(path, e))?;
        for (i, id) in self.lesion_ids.iter().enumerate() {
            let mut record = vec![id.clone()];
            for f in Feature::ALL {
                record.push(format_float(self.values[&f][i]));
                record.push(self.mask[&f][i].to_string());
            }
            w.write_record(&record).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<FeatureTable> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let mut lesion_ids = Vec::new();
        let mut values: BTreeMap<Feature, Vec<f64>> =
            Feature::ALL.iter().map(|&f| (f, Vec::new())).collect();
        let mut mask: BTreeMap<Feature, Vec<u8>> =
            Feature::ALL.iter().map(|&f| (f, Vec::new())).collect();
        for (row, record) in reader.records().enumerate() {
            let line = row + 2; // header is line 1
            let record = record.map_err(|e| csv_error(path, e))?;
            if record.len() != 7 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("expected 7 fields, got {}", record.len()),
                });
            }
            lesion_ids.push(record[0].to_string());
            for (slot, f) in Feature::ALL.iter().enumerate() {
                let value: f64 = record[1 + 2 * slot].parse().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("bad value {:?}", &record[1 + 2 * slot]),
                })?;
                let m: u8 = record[2 + 2 * slot].parse().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("bad mask {:?}", &record[2 + 2 * slot]),
                })?;
                if m > 1 {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line,
                        message: format!("mask must be 0 or 1, got {m}"),
                    });
                }
                values.get_mut(f).unwrap().push(value);
                mask.get_mut(f).unwrap().push(m);
            }
        }
        Ok(FeatureTable {
            lesion_ids,
            values,
            mask,
        })
    }
}

/// Which lesions a density summary covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityClass {
    Benign,
    Malignant,
    All,
}

impl fmt::Display for DensityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DensityClass::Benign => write!(f, "benign"),
            DensityClass::Malignant => write!(f, "malignant"),
            DensityClass::All => write!(f, "all"),
        }
    }
}

/// Gaussian KDE of one feature over one class, on a fixed grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensitySummary {
    pub feature: Feature,
    pub class: DensityClass,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

const DENSITY_GRID_POINTS: usize = 256;

/// Reads the annotations CSV (`lesion_id,annotator_id,feature,score`).
///
/// Rejects duplicate (lesion, annotator, feature) keys and non-finite scores.
pub fn ingest_annotations(path: &Path) -> Result<Vec<RawAnnotation>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let expected = ["lesion_id", "annotator_id", "feature", "score"];
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header {expected:?}, got {got:?}"),
        });
    }

    let mut seen: BTreeSet<(String, String, Feature)> = BTreeSet::new();
    let mut annotations = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected 4 fields, got {}", record.len()),
            });
        }
        let feature: Feature = record[2].parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("unknown feature {:?}", &record[2]),
        })?;
        let score: f64 = record[3].parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("bad score {:?}", &record[3]),
        })?;
        if !score.is_finite() {
            return Err(Error::validation(format!(
                "non-finite score for lesion {:?}, annotator {:?}, feature {}",
                &record[0], &record[1], feature
            )));
        }
        let key = (record[0].to_string(), record[1].to_string(), feature);
        if !seen.insert(key) {
            return Err(Error::validation(format!(
                "duplicate annotation for lesion {:?}, annotator {:?}, feature {}",
                &record[0], &record[1], feature
            )));
        }
        annotations.push(RawAnnotation {
            lesion_id: record[0].to_string(),
            annotator_id: record[1].to_string(),
            feature,
            score,
        });
    }
    Ok(annotations)
}

/// Per-(annotator, feature) mean and population std of the raw scores.
pub fn annotator_stats(annotations: &[RawAnnotation]) -> Vec<AnnotatorStats> {
    let mut groups: BTreeMap<(&str, Feature), Vec<f64>> = BTreeMap::new();
    for a in annotations {
        groups
            .entry((a.annotator_id.as_str(), a.feature))
            .or_default()
            .push(a.score);
    }
    groups
        .into_iter()
        .map(|((annotator_id, feature), scores)| {
            let (mean, std) = mean_and_population_std(&scores);
            AnnotatorStats {
                annotator_id: annotator_id.to_string(),
                feature,
                mean,
                std,
                count: scores.len(),
            }
        })
        .collect()
}

/// Standardizes each (annotator, feature) group to mean 0 / population std 1.
///
/// Groups with zero std (constant or single score) map to 0.
pub fn standardize_per_annotator(annotations: &[RawAnnotation]) -> Vec<RawAnnotation> {
    let stats: BTreeMap<(String, Feature), (f64, f64)> = annotator_stats(annotations)
        .into_iter()
        .map(|s| ((s.annotator_id, s.feature), (s.mean, s.std)))
        .collect();

    annotations
        .iter()
        .map(|a| {
            let (mean, std) = stats[&(a.annotator_id.clone(), a.feature)];
            let score = if std > 0.0 { (a.score - mean) / std } else { 0.0 };
            RawAnnotation {
                lesion_id: a.lesion_id.clone(),
                annotator_id: a.annotator_id.clone(),
                feature: a.feature,
                score,
            }
        })
        .collect()
}

/// Averages standardized scores per lesion and records availability masks.
///
/// Every id in `lesion_ids` gets one row; an annotation whose lesion is not in
/// the manifest is a validation error.
pub fn aggregate_per_lesion(
    standardized: &[RawAnnotation],
    lesion_ids: &[String],
) -> Result<FeatureTable> {
    if lesion_ids.is_empty() {
        return Err(Error::validation("lesion manifest is empty"));
    }
    let index: BTreeMap<&str, usize> = lesion_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    let n = lesion_ids.len();
    let mut sums: BTreeMap<Feature, Vec<f64>> = Feature::ALL
        .iter()
        .map(|&f| (f, vec![0.0; n]))
        .collect();
    let mut counts: BTreeMap<Feature, Vec<usize>> =
        Feature::ALL.iter().map(|&f| (f, vec![0usize; n])).collect();

    for a in standardized {
        let &i = index.get(a.lesion_id.as_str()).ok_or_else(|| {
            Error::validation(format!(
                "annotation references lesion {:?} absent from the manifest",
                a.lesion_id
            ))
        })?;
        sums.get_mut(&a.feature).unwrap()[i] += a.score;
        counts.get_mut(&a.feature).unwrap()[i] += 1;
    }

    let mut values = BTreeMap::new();
    let mut mask = BTreeMap::new();
    for f in Feature::ALL {
        let mut vals = vec![0.0; n];
        let mut m = vec![0u8; n];
        for i in 0..n {
            let c = counts[&f][i];
            if c > 0 {
                vals[i] = sums[&f][i] / c as f64;
                m[i] = 1;
            }
        }
        values.insert(f, vals);
        mask.insert(f, m);
    }

    Ok(FeatureTable {
        lesion_ids: lesion_ids.to_vec(),
        values,
        mask,
    })
}

/// Gaussian KDE summaries per feature and class (benign / malignant / all).
///
/// Only masked-in lesions contribute. Bandwidth is Silverman's rule of thumb;
/// the 256-point grid spans [min - 1, max + 1] and the evaluated density is
/// renormalized to integrate to 1 over the grid (trapezoid rule).
pub fn feature_density_summary(
    table: &FeatureTable,
    labels: &[u8],
) -> Result<Vec<DensitySummary>> {
    if labels.len() != table.len() {
        return Err(Error::shape(format!(
            "labels length {} does not match table length {}",
            labels.len(),
            table.len()
        )));
    }

    let mut summaries = Vec::new();
    for f in Feature::ALL {
        for class in [DensityClass::Benign, DensityClass::Malignant, DensityClass::All] {
            let values: Vec<f64> = (0..table.len())
                .filter(|&i| {
                    table.available(f, i)
                        && match class {
                            DensityClass::Benign => labels[i] == 0,
                            DensityClass::Malignant => labels[i] == 1,
                            DensityClass::All => true,
                        }
                })
                .map(|i| table.value(f, i))
                .collect();
            summaries.push(density_summary(f, class, &values)?);
        }
    }
    Ok(summaries)
}

fn density_summary(feature: Feature, class: DensityClass, values: &[f64]) -> Result<DensitySummary> {
    if values.len() < 2 {
        return Err(Error::validation(format!(
            "insufficient data for density: feature {feature}, class {class} has {} value(s), need at least 2",
            values.len()
        )));
    }
    let (mean, std) = mean_and_population_std(values);
    let bandwidth = silverman_bandwidth(values, std);
    if bandwidth <= 0.0 {
        return Err(Error::Numerical(format!(
            "degenerate bandwidth for density: feature {feature}, class {class} values are constant"
        )));
    }

    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let step = (hi - lo) / (DENSITY_GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..DENSITY_GRID_POINTS)
        .map(|i| lo + step * i as f64)
        .collect();

    let norm = 1.0 / (values.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let mut density: Vec<f64> = grid
        .iter()
        .map(|&x| {
            values
                .iter()
                .map(|&v| {
                    let z = (x - v) / bandwidth;
                    norm * (-0.5 * z * z).exp()
                })
                .sum()
        })
        .collect();

    // Renormalize over the grid so the trapezoid integral is exactly 1.
    let integral = trapezoid(&grid, &density);
    if integral <= 0.0 {
        return Err(Error::Numerical(format!(
            "density integral vanished for feature {feature}, class {class}"
        )));
    }
    for d in &mut density {
        *d /= integral;
    }

    Ok(DensitySummary {
        feature,
        class,
        grid,
        density,
        mean,
        std,
    })
}

/// Trapezoid-rule integral of `y` over `x`.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    (1..x.len())
        .map(|i| 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]))
        .sum()
}

/// Silverman's rule of thumb: 0.9 * min(std, IQR / 1.34) * n^(-1/5),
/// falling back to std alone when the IQR is zero.
fn silverman_bandwidth(values: &[f64], std: f64) -> f64 {
    let n = values.len() as f64;
    let iqr = interquartile_range(values);
    let scale = if iqr > 0.0 { std.min(iqr / 1.34) } else { std };
    0.9 * scale * n.powf(-0.2)
}

fn interquartile_range(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25)
}

/// Linear-interpolation quantile of an already sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub(crate) fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn write_density_json(summaries: &[DensitySummary], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let json = serde_json::to_string_pretty(summaries)
        .map_err(|e| Error::validation(format!("density serialization failed: {e}")))?;
    file.write_all(json.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_density_json(path: &Path) -> Result<Vec<DensitySummary>> {
    let data = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&data)
        .map_err(|e| Error::validation(format!("density deserialization failed: {e}")))
}

fn format_float(v: f64) -> String {
    // Round-trippable representation, stable across runs.
    format!("{v}")
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => {
            if let csv::ErrorKind::Io(io) = e.into_kind() {
                Error::io(path, io)
            } else {
                unreachable!()
            }
        }
        _ => Error::Parse {
            path: path.to_path_buf(),
            line: e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(0),
            message: e.to_string(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(lesion: &str, annotator: &str, feature: Feature, score: f64) -> RawAnnotation {
        RawAnnotation {
            lesion_id: lesion.to_string(),
            annotator_id: annotator.to_string(),
            feature,
            score,
        }
    }

    fn write_temp_csv(content: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ingest_maps_rows_to_annotations() {
        let f = write_temp_csv("lesion_id,annotator_id,feature,score\nL1,S1,A,3.0\n");
        let anns = ingest_annotations(f.path()).unwrap();
        assert_eq!(anns, vec![ann("L1", "S1", Feature::A, 3.0)]);
    }

    #[test]
    fn ingest_rejects_duplicates() {
        let f = write_temp_csv(
            "lesion_id,annotator_id,feature,score\nL1,S1,A,3.0\nL1,S1,A,4.0\n",
        );
        let err = ingest_annotations(f.path()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn ingest_header_only_gives_empty_list() {
        let f = write_temp_csv("lesion_id,annotator_id,feature,score\n");
        assert!(ingest_annotations(f.path()).unwrap().is_empty());
    }

    #[test]
    fn ingest_names_line_of_malformed_row() {
        let f = write_temp_csv("lesion_id,annotator_id,feature,score\nL1,S1,A,3.0\nL2,S1,A,oops\n");
        let err = ingest_annotations(f.path()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn ingest_rejects_non_finite_score() {
        let f = write_temp_csv("lesion_id,annotator_id,feature,score\nL1,S1,A,NaN\n");
        let err = ingest_annotations(f.path()).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }

    #[test]
    fn ingest_rejects_unknown_feature() {
        let f = write_temp_csv("lesion_id,annotator_id,feature,score\nL1,S1,D,3.0\n");
        let err = ingest_annotations(f.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn standardize_hand_computed_group() {
        let anns = vec![
            ann("L1", "S1", Feature::A, 1.0),
            ann("L2", "S1", Feature::A, 2.0),
            ann("L3", "S1", Feature::A, 3.0),
        ];
        let out = standardize_per_annotator(&anns);
        let expected = [-1.224745, 0.0, 1.224745];
        for (o, e) in out.iter().zip(expected) {
            assert!((o.score - e).abs() < 1e-6, "{} vs {}", o.score, e);
        }
    }

    #[test]
    fn standardize_zero_std_group_maps_to_zero() {
        let anns = vec![
            ann("L1", "S1", Feature::B, 5.0),
            ann("L2", "S1", Feature::B, 5.0),
            ann("L3", "S1", Feature::B, 5.0),
        ];
        for a in standardize_per_annotator(&anns) {
            assert_eq!(a.score, 0.0);
        }
    }

    #[test]
    fn standardize_singleton_maps_to_zero() {
        let anns = vec![ann("L1", "S1", Feature::C, 4.0)];
        assert_eq!(standardize_per_annotator(&anns)[0].score, 0.0);
    }

    #[test]
    fn standardize_groups_are_independent_per_feature() {
        // Same annotator, different features: separate groups.
        let anns = vec![
            ann("L1", "S1", Feature::A, 0.0),
            ann("L2", "S1", Feature::A, 10.0),
            ann("L1", "S1", Feature::B, 7.0),
        ];
        let out = standardize_per_annotator(&anns);
        assert!((out[0].score + 1.0).abs() < 1e-12);
        assert!((out[1].score - 1.0).abs() < 1e-12);
        assert_eq!(out[2].score, 0.0);
    }

    #[test]
    fn annotator_stats_reproduce_from_raw_scores() {
        let anns = vec![
            ann("L1", "S1", Feature::A, 1.0),
            ann("L2", "S1", Feature::A, 5.0),
            ann("L3", "S1", Feature::A, 6.0),
        ];
        let stats = annotator_stats(&anns);
        assert_eq!(stats.len(), 1);
        let s = &stats[0];
        let (mean, std) = mean_and_population_std(&[1.0, 5.0, 6.0]);
        assert_eq!(s.mean, mean);
        assert_eq!(s.std, std);
        assert_eq!(s.count, 3);
    }

    #[test]
    fn aggregate_symmetric_mean_is_zero() {
        let ids = vec!["L1".to_string()];
        let anns = vec![
            ann("L1", "S1", Feature::A, 0.5),
            ann("L1", "S2", Feature::A, -0.5),
        ];
        let table = aggregate_per_lesion(&anns, &ids).unwrap();
        assert_eq!(table.value(Feature::A, 0), 0.0);
        assert!(table.available(Feature::A, 0));
    }

    #[test]
    fn aggregate_singleton_mean() {
        let ids = vec!["L1".to_string()];
        let anns = vec![ann("L1", "S1", Feature::B, 0.7)];
        let table = aggregate_per_lesion(&anns, &ids).unwrap();
        assert_eq!(table.value(Feature::B, 0), 0.7);
        assert!(table.available(Feature::B, 0));
    }

    #[test]
    fn aggregate_missing_feature_gets_zero_and_mask_zero() {
        let ids = vec!["L1".to_string()];
        let anns = vec![ann("L1", "S1", Feature::A, 0.3)];
        let table = aggregate_per_lesion(&anns, &ids).unwrap();
        assert_eq!(table.value(Feature::C, 0), 0.0);
        assert!(!table.available(Feature::C, 0));
    }

    #[test]
    fn aggregate_rejects_unknown_lesion() {
        let ids = vec!["L1".to_string()];
        let anns = vec![ann("L9", "S1", Feature::A, 0.3)];
        let err = aggregate_per_lesion(&anns, &ids).unwrap_err();
        assert!(err.to_string().contains("L9"), "{err}");
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let ids: Vec<String> = (0..4).map(|i| format!("L{i}")).collect();
        let mut anns = vec![
            ann("L0", "S1", Feature::A, 0.4),
            ann("L0", "S2", Feature::A, -0.2),
            ann("L1", "S1", Feature::B, 0.9),
            ann("L3", "S3", Feature::C, -1.5),
        ];
        let table1 = aggregate_per_lesion(&anns, &ids).unwrap();
        anns.reverse();
        let table2 = aggregate_per_lesion(&anns, &ids).unwrap();
        assert_eq!(table1, table2);
    }

    #[test]
    fn density_hand_computed_moments() {
        let ids: Vec<String> = (0..3).map(|i| format!("L{i}")).collect();
        let anns = vec![
            ann("L0", "S1", Feature::A, -1.0),
            ann("L1", "S1", Feature::A, 0.0),
            ann("L2", "S1", Feature::A, 1.0),
        ];
        // Scores used directly: aggregation of singleton groups keeps them.
        let table = aggregate_per_lesion(&anns, &ids).unwrap();
        let labels = vec![0, 0, 0];
        let summaries = feature_density_summary_for(&table, &labels, Feature::A);
        let benign = summaries
            .iter()
            .find(|s| s.class == DensityClass::Benign)
            .unwrap();
        assert!((benign.mean - 0.0).abs() < 1e-12);
        assert!((benign.std - 0.816497).abs() < 1e-6);
    }

    // Helper: densities for a single feature, ignoring errors on empty classes.
    fn feature_density_summary_for(
        table: &FeatureTable,
        labels: &[u8],
        feature: Feature,
    ) -> Vec<DensitySummary> {
        let values: Vec<f64> = (0..table.len())
            .filter(|&i| table.available(feature, i))
            .map(|i| table.value(feature, i))
            .collect();
        let mut out = Vec::new();
        for class in [DensityClass::Benign, DensityClass::Malignant, DensityClass::All] {
            let class_values: Vec<f64> = (0..table.len())
                .filter(|&i| {
                    table.available(feature, i)
                        && match class {
                            DensityClass::Benign => labels[i] == 0,
                            DensityClass::Malignant => labels[i] == 1,
                            DensityClass::All => true,
                        }
                })
                .map(|i| table.value(feature, i))
                .collect();
            if let Ok(s) = density_summary(feature, class, &class_values) {
                out.push(s);
            }
        }
        assert!(!values.is_empty());
        out
    }

    #[test]
    fn density_errors_with_fewer_than_two_values() {
        let err = density_summary(Feature::A, DensityClass::Benign, &[0.5]).unwrap_err();
        assert!(err.to_string().contains("insufficient data for density"));
    }

    #[test]
    fn density_errors_on_identical_values() {
        let err = density_summary(Feature::B, DensityClass::All, &[0.5, 0.5]).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    #[test]
    fn density_integrates_to_one() {
        let values = vec![-1.2, -0.4, 0.0, 0.3, 0.9, 1.4, 2.0];
        let s = density_summary(Feature::C, DensityClass::All, &values).unwrap();
        let integral = trapezoid(&s.grid, &s.density);
        assert!((integral - 1.0).abs() < 1e-3, "integral {integral}");
        assert!(s.grid.windows(2).all(|w| w[0] < w[1]));
        assert!(s.density.iter().all(|&d| d >= 0.0));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn group(scores: &[f64]) -> Vec<RawAnnotation> {
            scores
                .iter()
                .enumerate()
                .map(|(i, &s)| ann(&format!("L{i}"), "S1", Feature::A, s))
                .collect()
        }

        proptest! {
            #[test]
            fn standardized_groups_have_zero_mean_unit_std(
                scores in proptest::collection::vec(-50.0f64..50.0, 2..64),
            ) {
                let distinct = scores.iter().any(|&s| s != scores[0]);
                prop_assume!(distinct);
                let out = standardize_per_annotator(&group(&scores));
                let standardized: Vec<f64> = out.iter().map(|a| a.score).collect();
                let (mean, std) = mean_and_population_std(&standardized);
                prop_assert!(mean.abs() < 1e-9, "mean {mean}");
                prop_assert!((std - 1.0).abs() < 1e-9, "std {std}");
            }

            #[test]
            fn standardization_is_shift_and_scale_invariant(
                scores in proptest::collection::vec(-50.0f64..50.0, 2..32),
                shift in -100.0f64..100.0,
                scale in 0.1f64..10.0,
            ) {
                let distinct = scores.iter().any(|&s| s != scores[0]);
                prop_assume!(distinct);
                let base: Vec<f64> = standardize_per_annotator(&group(&scores))
                    .iter()
                    .map(|a| a.score)
                    .collect();
                let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
                let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
                for (name, variant) in [("shift", shifted), ("scale", scaled)] {
                    let out: Vec<f64> = standardize_per_annotator(&group(&variant))
                        .iter()
                        .map(|a| a.score)
                        .collect();
                    for (b, o) in base.iter().zip(&out) {
                        prop_assert!((b - o).abs() < 1e-9, "{name}: {b} vs {o}");
                    }
                }
            }

            #[test]
            fn mask_sum_counts_annotated_lesions(
                annotated in proptest::collection::vec(proptest::bool::ANY, 1..40),
            ) {
                let ids: Vec<String> = (0..annotated.len()).map(|i| format!("L{i}")).collect();
                let mut anns = Vec::new();
                for (i, &has) in annotated.iter().enumerate() {
                    if has {
                        anns.push(ann(&ids[i], "S1", Feature::A, i as f64));
                    }
                }
                let table = aggregate_per_lesion(&anns, &ids).unwrap();
                let expected = annotated.iter().filter(|&&b| b).count();
                prop_assert_eq!(table.annotated_count(Feature::A), expected);
                for m in &table.mask[&Feature::A] {
                    prop_assert!(*m <= 1);
                }
            }
        }
    }

    #[test]
    fn feature_table_csv_round_trip() {
        let ids: Vec<String> = (0..3).map(|i| format!("L{i}")).collect();
        let anns = vec![
            ann("L0", "S1", Feature::A, 0.25),
            ann("L1", "S1", Feature::B, -0.5),
            ann("L2", "S2", Feature::C, 1.0),
        ];
        let table = aggregate_per_lesion(&anns, &ids).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.csv");
        table.write_csv(&path).unwrap();
        let back = FeatureTable::read_csv(&path).unwrap();
        assert_eq!(table, back);
    }
}
