//! ROC-AUC and cross-validated result aggregation.
//!
//! The AUC is the Mann-Whitney statistic: the fraction of
//! (malignant, benign) pairs where the malignant score is higher, ties
//! counted 0.5. It is computed from average ranks in O(n log n) and checked
//! against the O(n^2) pairwise oracle in the tests.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Encoder trainability variant of an experiment arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Frozen,
    Nonfrozen,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Frozen, Variant::Nonfrozen];

    pub fn trainable_encoder(self) -> bool {
        self == Variant::Nonfrozen
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Frozen => write!(f, "frozen"),
            Variant::Nonfrozen => write!(f, "nonfrozen"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Variant::Frozen),
            "nonfrozen" => Ok(Variant::Nonfrozen),
            other => Err(Error::config(format!(
                "unknown variant {other:?}, expected frozen or nonfrozen"
            ))),
        }
    }
}

/// Row order of the results table.
pub const REPORT_MODELS: [&str; 6] = [
    "Baseline",
    "Asymmetry",
    "Border",
    "Color",
    "Averaging",
    "Optimized weighted averaging",
];

/// Per-fold AUCs of one (model, variant) cell plus their mean and
/// population std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScores {
    pub model_name: String,
    pub variant: Variant,
    pub aucs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl FoldScores {
    pub fn new(model_name: impl Into<String>, variant: Variant, aucs: Vec<f64>) -> Self {
        let (mean, std) = crate::annotations::mean_and_population_std(&aucs);
        FoldScores {
            model_name: model_name.into(),
            variant,
            aucs,
            mean,
            std,
        }
    }
}

/// Mann-Whitney ROC-AUC from average ranks. Labels must contain both classes.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "scores length {} does not match labels length {}",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("non-finite score {bad}")));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::validation("labels must be 0 or 1"));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::validation(
            "AUC undefined: both classes must be present",
        ));
    }

    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Average ranks over tie groups, 1-based.
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }

    let rank_sum_pos: f64 = (0..n).filter(|&i| labels[i] == 1).map(|i| ranks[i]).sum();
    let p = positives as f64;
    let q = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

/// Aggregates fold AUCs into FoldScores rows, erroring when any expected
/// (model, variant) cell is absent or fold counts disagree.
pub fn summarize(
    fold_aucs: &BTreeMap<(String, Variant), Vec<f64>>,
    expected: &[(String, Variant)],
) -> Result<Vec<FoldScores>> {
    let missing: Vec<String> = expected
        .iter()
        .filter(|cell| !fold_aucs.contains_key(*cell))
        .map(|(m, v)| format!("{m} ({v})"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::validation(format!(
            "missing results for: {}",
            missing.join(", ")
        )));
    }
    let counts: Vec<usize> = expected.iter().map(|cell| fold_aucs[cell].len()).collect();
    if let Some(&first) = counts.first() {
        if counts.iter().any(|&c| c != first) {
            return Err(Error::validation(format!(
                "unequal fold counts across cells: {counts:?}"
            )));
        }
    }
    Ok(expected
        .iter()
        .map(|cell| FoldScores::new(cell.0.clone(), cell.1, fold_aucs[cell].clone()))
        .collect())
}

/// Renders the 6x2 results table as aligned text, one row per model with
/// "mean ± std" per variant (population std across folds).
pub fn format_results_table(scores: &[FoldScores]) -> String {
    let cell = |model: &str, variant: Variant| -> String {
        scores
            .iter()
            .find(|s| s.model_name == model && s.variant == variant)
            .map(|s| format!("{:.3} \u{b1} {:.3}", s.mean, s.std))
            .unwrap_or_else(|| "-".to_string())
    };
    let mut out = String::new();
    let width = REPORT_MODELS.iter().map(|m| m.len()).max().unwrap();
    out.push_str(&format!(
        "{:<width$} | {:<15} | {:<15}\n",
        "Model", "AUC frozen", "AUC nonfrozen"
    ));
    out.push_str(&format!(
        "{:-<width$}-+-{:-<15}-+-{:-<15}\n",
        "", "", ""
    ));
    for model in REPORT_MODELS {
        out.push_str(&format!(
            "{:<width$} | {:<15} | {:<15}\n",
            model,
            cell(model, Variant::Frozen),
            cell(model, Variant::Nonfrozen)
        ));
    }
    out
}

/// Writes `model,variant,auc_mean,auc_std,fold_aucs` (fold AUCs
/// semicolon-joined).
pub fn write_results_csv(scores: &[FoldScores], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_record(["model", "variant", "auc_mean", "auc_std", "fold_aucs"])
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for s in scores {
        let folds = s
            .aucs
            .iter()
            .map(|a| format!("{a}"))
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            s.model_name.clone(),
            s.variant.to_string(),
            format!("{}", s.mean),
            format!("{}", s.std),
            folds,
        ])
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
