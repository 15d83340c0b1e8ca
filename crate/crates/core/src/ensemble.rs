//! Ensembles of the three multi-task models: equal-weight averaging and
//! weighted averaging with weights found by differential evolution.
//!
//! The DE variant is rand/1/bin with per-generation dithered mutation,
//! raw weights bounded to [0, 1] per dimension and normalized to the simplex
//! inside the objective (uniform fallback for an all-zero candidate). The
//! initial population always contains the equal-weight vector and selection
//! is elitist, so the achieved AUC can never fall below the equal-weight AUC
//! on the optimization subset.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::roc_auc;
use crate::training::PredictionMatrix;

/// Blend weights over the three multi-task models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub w: [f64; 3],
    pub normalized: bool,
}

impl EnsembleWeights {
    pub fn equal() -> Self {
        EnsembleWeights {
            w: [1.0 / 3.0; 3],
            normalized: true,
        }
    }

    /// Projects raw nonnegative weights onto the simplex; an all-zero vector
    /// falls back to equal weights.
    pub fn normalize(raw: [f64; 3]) -> Self {
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Self::equal();
        }
        EnsembleWeights {
            w: [raw[0] / sum, raw[1] / sum, raw[2] / sum],
            normalized: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.normalized {
            return Err(Error::validation("weights are not normalized"));
        }
        if self.w.iter().any(|&w| w < 0.0) {
            return Err(Error::validation(format!(
                "weights must be nonnegative, got {:?}",
                self.w
            )));
        }
        let sum: f64 = self.w.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::validation(format!(
                "weights must sum to 1 within 1e-12, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Differential evolution settings. Defaults follow the optimization recipe:
/// tolerance 1.0e-7, at most 1000 iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub population_per_dim: usize,
    /// Mutation factor is dithered uniformly in this range each generation.
    pub mutation: (f64, f64),
    pub crossover: f64,
    pub seed: u64,
}

impl Default for DeConfig {
    fn default() -> Self {
        DeConfig {
            tolerance: 1.0e-7,
            max_iterations: 1000,
            population_per_dim: 15,
            mutation: (0.5, 1.0),
            crossover: 0.7,
            seed: 0,
        }
    }
}

impl DeConfig {
    fn validate(&self) -> Result<()> {
        if self.population_per_dim * 3 < 4 {
            return Err(Error::config("DE population must be at least 4"));
        }
        if !self.tolerance.is_finite() || self.tolerance <= 0.0 {
            return Err(Error::config("DE tolerance must be positive"));
        }
        if !(0.0..=1.0).contains(&self.crossover) {
            return Err(Error::config("DE crossover must be in [0, 1]"));
        }
        if self.mutation.0 > self.mutation.1 {
            return Err(Error::config("DE mutation range must be ordered"));
        }
        Ok(())
    }
}

fn require_three_columns(pm: &PredictionMatrix) -> Result<()> {
    if pm.columns.len() != 3 {
        return Err(Error::shape(format!(
            "ensembles need exactly 3 prediction columns, got {}",
            pm.columns.len()
        )));
    }
    if pm.is_empty() {
        return Err(Error::shape("empty prediction matrix"));
    }
    Ok(())
}

/// Elementwise mean of the three columns.
pub fn average_ensemble(pm: &PredictionMatrix) -> Result<Vec<f64>> {
    require_three_columns(pm)?;
    Ok((0..pm.len())
        .map(|i| pm.columns.iter().map(|(_, col)| col[i]).sum::<f64>() / 3.0)
        .collect())
}

/// Elementwise weighted mean; weights must be normalized.
pub fn weighted_ensemble(pm: &PredictionMatrix, weights: &EnsembleWeights) -> Result<Vec<f64>> {
    require_three_columns(pm)?;
    weights.validate()?;
    Ok((0..pm.len())
        .map(|i| {
            pm.columns
                .iter()
                .zip(weights.w)
                .map(|((_, col), w)| w * col[i])
                .sum()
        })
        .collect())
}

/// Maximizes the blended AUC over simplex weights with DE/rand/1/bin.
/// Returns the normalized best weights and the AUC they achieve on `pm`.
pub fn optimize_weights_de(
    pm: &PredictionMatrix,
    config: &DeConfig,
) -> Result<(EnsembleWeights, f64)> {
    require_three_columns(pm)?;
    config.validate()?;
    let positives = pm.labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == pm.len() {
        return Err(Error::validation(
            "AUC undefined: both classes must be present in the optimization subset",
        ));
    }

    let objective = |raw: &[f64; 3]| -> f64 {
        let weights = EnsembleWeights::normalize(*raw);
        let blended = weighted_ensemble(pm, &weights).expect("validated matrix");
        -roc_auc(&blended, &pm.labels).expect("validated labels")
    };

    let dim = 3;
    let pop_size = config.population_per_dim * dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut population: Vec<[f64; 3]> = (0..pop_size)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0)))
        .collect();
    population[0] = [1.0 / 3.0; 3]; // equal weights always compete
    let mut fitness: Vec<f64> = population.iter().map(objective).collect();

    for _generation in 0..config.max_iterations {
        let (mean, std) = crate::annotations::mean_and_population_std(&fitness);
        let _ = mean;
        if std < config.tolerance {
            break;
        }
        let factor = rng.random_range(config.mutation.0..config.mutation.1);
        for i in 0..pop_size {
            let mut pick = || loop {
                let r = rng.random_range(0..pop_size);
                if r != i {
                    return r;
                }
            };
            let (r0, r1, r2) = {
                let a = pick();
                let b = loop {
                    let b = pick();
                    if b != a {
                        break b;
                    }
                };
                let c = loop {
                    let c = pick();
                    if c != a && c != b {
                        break c;
                    }
                };
                (a, b, c)
            };
            let j_rand = rng.random_range(0..dim);
            let mut trial = population[i];
            for j in 0..dim {
                if rng.random_range(0.0..1.0) < config.crossover || j == j_rand {
                    let mutant =
                        population[r0][j] + factor * (population[r1][j] - population[r2][j]);
                    trial[j] = mutant.clamp(0.0, 1.0);
                }
            }
            let trial_fitness = objective(&trial);
            if trial_fitness <= fitness[i] {
                population[i] = trial;
                fitness[i] = trial_fitness;
            }
        }
    }

    let best = fitness
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let weights = EnsembleWeights::normalize(population[best]);
    Ok((weights, -fitness[best]))
}

/// On-disk record of one optimized-weights run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsRecord {
    pub fold: usize,
    pub weights: [f64; 3],
    /// "val" or "test": which subset the weights were optimized on.
    pub optimized_on: String,
    pub achieved_auc: f64,
}

impl WeightsRecord {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::validation(format!("weights serialization failed: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<WeightsRecord> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let data = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&data)
            .map_err(|e| Error::validation(format!("weights deserialization failed: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(columns: [Vec<f64>; 3], labels: Vec<u8>) -> PredictionMatrix {
        let n = labels.len();
        let lesion_ids = (0..n).map(|i| format!("L{i}")).collect();
        PredictionMatrix::new(
            lesion_ids,
            labels,
            vec![
                ("A".to_string(), columns[0].clone()),
                ("B".to_string(), columns[1].clone()),
                ("C".to_string(), columns[2].clone()),
            ],
        )
        .unwrap()
    }

    /// Exhaustive simplex grid at the given resolution; the independent
    /// optimality oracle for the DE search.
    fn grid_search_best_auc(pm: &PredictionMatrix, steps: usize) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let k = steps - i - j;
                let w = EnsembleWeights::normalize([
                    i as f64 / steps as f64,
                    j as f64 / steps as f64,
                    k as f64 / steps as f64,
                ]);
                let blended = weighted_ensemble(pm, &w).unwrap();
                best = best.max(roc_auc(&blended, &pm.labels).unwrap());
            }
        }
        best
    }

    #[test]
    fn average_is_symmetric_mean() {
        let pm = matrix(
            [vec![0.2, 0.5], vec![0.5, 0.5], vec![0.8, 0.5]],
            vec![0, 1],
        );
        let avg = average_ensemble(&pm).unwrap();
        assert!((avg[0] - 0.5).abs() < 1e-15);
        assert!((avg[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn average_of_identical_columns_is_identity() {
        let col = vec![0.3, 0.6, 0.9];
        let pm = matrix([col.clone(), col.clone(), col.clone()], vec![0, 1, 1]);
        let avg = average_ensemble(&pm).unwrap();
        for (a, c) in avg.iter().zip(&col) {
            assert!((a - c).abs() < 1e-15);
        }
    }

    #[test]
    fn average_equals_equal_weighted() {
        let pm = matrix(
            [vec![0.1, 0.7, 0.4], vec![0.9, 0.2, 0.5], vec![0.3, 0.8, 0.6]],
            vec![0, 1, 0],
        );
        let avg = average_ensemble(&pm).unwrap();
        let weighted = weighted_ensemble(&pm, &EnsembleWeights::equal()).unwrap();
        for (a, w) in avg.iter().zip(&weighted) {
            assert!((a - w).abs() < 1e-15);
        }
    }

    #[test]
    fn wrong_column_count_is_rejected() {
        let pm = PredictionMatrix::new(
            vec!["L0".into()],
            vec![1],
            vec![("A".to_string(), vec![0.5]), ("B".to_string(), vec![0.6])],
        )
        .unwrap();
        assert!(average_ensemble(&pm).is_err());
        assert!(weighted_ensemble(&pm, &EnsembleWeights::equal()).is_err());
    }

    #[test]
    fn vertex_weights_reproduce_a_column() {
        let pm = matrix(
            [vec![0.1, 0.7], vec![0.9, 0.2], vec![0.3, 0.8]],
            vec![0, 1],
        );
        let w = EnsembleWeights {
            w: [1.0, 0.0, 0.0],
            normalized: true,
        };
        let blended = weighted_ensemble(&pm, &w).unwrap();
        assert_eq!(blended, pm.columns[0].1);
    }

    #[test]
    fn weighted_hand_computed_row() {
        let pm = matrix([vec![0.2], vec![0.4], vec![0.8]], vec![1]);
        let w = EnsembleWeights {
            w: [0.5, 0.25, 0.25],
            normalized: true,
        };
        let blended = weighted_ensemble(&pm, &w).unwrap();
        assert!((blended[0] - 0.40).abs() < 1e-15);
    }

    #[test]
    fn unnormalized_weights_are_rejected() {
        let pm = matrix([vec![0.2], vec![0.4], vec![0.8]], vec![1]);
        let w = EnsembleWeights {
            w: [0.5, 0.5, 0.5],
            normalized: true,
        };
        assert!(weighted_ensemble(&pm, &w).is_err());
        let w = EnsembleWeights {
            w: [0.5, 0.25, 0.25],
            normalized: false,
        };
        assert!(weighted_ensemble(&pm, &w).is_err());
    }

    fn planted_instance(n: usize, seed: u64) -> PredictionMatrix {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
        // Column 1 separates perfectly but with a tiny margin, so blending in
        // much noise destroys it; columns 2 and 3 are label-independent.
        let margin = 0.003;
        let col1: Vec<f64> = labels
            .iter()
            .map(|&l| {
                if l == 1 {
                    0.5 + margin + rng.random_range(0.0..margin)
                } else {
                    0.5 - margin - rng.random_range(0.0..margin)
                }
            })
            .collect();
        let noise = |rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let col2: Vec<f64> = noise(&mut rng);
        let col3: Vec<f64> = noise(&mut rng);
        matrix([col1, col2, col3], labels)
    }

    #[test]
    fn de_recovers_planted_perfect_column() {
        let pm = planted_instance(40, 5);
        let config = DeConfig {
            seed: 17,
            ..DeConfig::default()
        };
        let (weights, auc) = optimize_weights_de(&pm, &config).unwrap();
        weights.validate().unwrap();
        assert!(auc >= 0.99, "achieved AUC {auc}");
        assert!(weights.w[0] >= 0.8, "dominant weight {:?}", weights.w);
        // Within 0.01 of the exhaustive grid optimum.
        let grid_best = grid_search_best_auc(&pm, 100);
        assert!(grid_best - auc <= 0.01, "grid {grid_best} vs de {auc}");
    }

    #[test]
    fn de_on_identical_columns_matches_single_column_auc() {
        let col = vec![0.2, 0.9, 0.4, 0.7, 0.1, 0.6];
        let labels = vec![0, 1, 0, 1, 0, 1];
        let pm = matrix([col.clone(), col.clone(), col.clone()], labels.clone());
        let single = roc_auc(&col, &labels).unwrap();
        let (_, auc) = optimize_weights_de(&pm, &DeConfig::default()).unwrap();
        assert!((auc - single).abs() < 1e-12);
    }

    #[test]
    fn de_dominates_equal_weights() {
        for seed in 0..5 {
            let pm = planted_instance(30, 100 + seed);
            let avg = average_ensemble(&pm).unwrap();
            let equal_auc = roc_auc(&avg, &pm.labels).unwrap();
            let (_, de_auc) = optimize_weights_de(
                &pm,
                &DeConfig {
                    seed,
                    ..DeConfig::default()
                },
            )
            .unwrap();
            assert!(
                de_auc >= equal_auc - 1e-15,
                "seed {seed}: de {de_auc} < equal {equal_auc}"
            );
        }
    }

    #[test]
    fn de_is_deterministic() {
        let pm = planted_instance(40, 9);
        let config = DeConfig {
            seed: 4,
            ..DeConfig::default()
        };
        let (w1, a1) = optimize_weights_de(&pm, &config).unwrap();
        let (w2, a2) = optimize_weights_de(&pm, &config).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(a1, a2);
    }

    #[test]
    fn one_class_matrix_is_rejected() {
        let pm = matrix([vec![0.5, 0.6], vec![0.4, 0.3], vec![0.2, 0.9]], vec![1, 1]);
        let err = optimize_weights_de(&pm, &DeConfig::default()).unwrap_err();
        assert!(err.to_string().contains("AUC undefined"), "{err}");
    }

    #[test]
    fn blended_auc_is_invariant_under_monotone_transforms() {
        let pm = planted_instance(24, 77);
        let weights = EnsembleWeights::normalize([0.5, 0.2, 0.3]);
        let blended = weighted_ensemble(&pm, &weights).unwrap();
        let base = roc_auc(&blended, &pm.labels).unwrap();
        let doubled: Vec<f64> = blended.iter().map(|p| 2.0 * p).collect();
        let squashed: Vec<f64> = blended.iter().map(|p| (3.0 * p).tanh()).collect();
        let shifted: Vec<f64> = blended.iter().map(|p| p + 10.0).collect();
        for transformed in [doubled, squashed, shifted] {
            assert_eq!(roc_auc(&transformed, &pm.labels).unwrap(), base);
        }
    }

    #[test]
    fn weights_json_round_trip() {
        let record = WeightsRecord {
            fold: 2,
            weights: [0.6, 0.3, 0.1],
            optimized_on: "val".to_string(),
            achieved_auc: 0.87,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.json");
        record.write_json(&path).unwrap();
        assert_eq!(WeightsRecord::read_json(&path).unwrap(), record);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"optimized_on\": \"val\""));
    }

    proptest! {
        #[test]
        fn blend_is_convex_combination(
            rows in proptest::collection::vec((0.01f64..0.99, 0.01f64..0.99, 0.01f64..0.99), 1..32),
            raw in (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0),
        ) {
            let labels: Vec<u8> = (0..rows.len()).map(|i| u8::from(i % 2 == 0)).collect();
            let pm = matrix(
                [
                    rows.iter().map(|r| r.0).collect(),
                    rows.iter().map(|r| r.1).collect(),
                    rows.iter().map(|r| r.2).collect(),
                ],
                labels,
            );
            let weights = EnsembleWeights::normalize([raw.0, raw.1, raw.2]);
            let blended = weighted_ensemble(&pm, &weights).unwrap();
            for (i, b) in blended.iter().enumerate() {
                let lo = rows[i].0.min(rows[i].1).min(rows[i].2);
                let hi = rows[i].0.max(rows[i].1).max(rows[i].2);
                prop_assert!(*b >= lo - 1e-12 && *b <= hi + 1e-12);
            }
        }

        #[test]
        fn normalized_weights_satisfy_simplex_closure(
            raw in (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0),
        ) {
            let weights = EnsembleWeights::normalize([raw.0, raw.1, raw.2]);
            prop_assert!(weights.validate().is_ok());
        }
    }
}
