//! Hyperparameter selection on a held-out validation library, and the
//! published per-backbone settings.
//!
//! One configuration is chosen per way count using 1-shot episodes; 5-shot
//! problems reuse the 1-shot configuration. Test libraries are never touched.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmark::run_benchmark;
use crate::classifier::TrainConfig;
use crate::ensembles::MethodSpec;
use crate::episodes::EpisodeSpec;
use crate::feature_store::FeatureLibrary;

#[derive(Debug, Error)]
pub enum TuningError {
    #[error("validation library {0:?} is also a test library")]
    ValidationEqualsTest(String),
    #[error("search grid has an empty axis: {0}")]
    EmptyGrid(&'static str),
    #[error("no published settings for method {0:?}")]
    UnknownMethod(String),
    #[error("profile for {method} has no entry for {ways}-way")]
    MissingWays { method: String, ways: usize },
    #[error("profile file: {0}")]
    Io(#[from] std::io::Error),
    #[error("profile json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub learning_rates: Vec<f64>,
    pub epoch_counts: Vec<usize>,
    /// Zero means no hidden layer.
    pub hidden_sizes: Vec<usize>,
    pub l2_lambdas: Vec<f64>,
}

impl Default for SearchGrid {
    /// Union of every value appearing in the published settings, plus the
    /// option of dropping the hidden layer.
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-3, 5e-4],
            epoch_counts: vec![100, 200, 300],
            hidden_sizes: vec![0, 512, 1024, 2048, 4096],
            l2_lambdas: vec![0.1, 0.2, 0.5, 0.7, 0.9],
        }
    }
}

impl SearchGrid {
    pub fn validate(&self) -> Result<(), TuningError> {
        if self.learning_rates.is_empty() {
            return Err(TuningError::EmptyGrid("learning_rates"));
        }
        if self.epoch_counts.is_empty() {
            return Err(TuningError::EmptyGrid("epoch_counts"));
        }
        if self.hidden_sizes.is_empty() {
            return Err(TuningError::EmptyGrid("hidden_sizes"));
        }
        if self.l2_lambdas.is_empty() {
            return Err(TuningError::EmptyGrid("l2_lambdas"));
        }
        Ok(())
    }

    /// Every combination, seeded with `seed`.
    pub fn points(&self, seed: u64) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &epochs in &self.epoch_counts {
            for &hidden in &self.hidden_sizes {
                for &lambda in &self.l2_lambdas {
                    for &lr in &self.learning_rates {
                        out.push(TrainConfig::new(epochs, hidden, lr, lambda).with_seed(seed));
                    }
                }
            }
        }
        out
    }
}

/// True when `a` is preferred over `b` at equal accuracy: fewer epochs, then
/// smaller hidden layer, then larger penalty, then smaller learning rate.
fn simpler(a: &TrainConfig, b: &TrainConfig) -> std::cmp::Ordering {
    a.epochs
        .cmp(&b.epochs)
        .then(a.hidden_size.cmp(&b.hidden_size))
        .then(b.l2_lambda.total_cmp(&a.l2_lambda))
        .then(a.learning_rate.total_cmp(&b.learning_rate))
}

/// Index of the best-scoring configuration under the tie-break order.
pub fn select_best(scored: &[(TrainConfig, f64)]) -> Option<usize> {
    (0..scored.len()).min_by(|&i, &j| {
        scored[j]
            .1
            .total_cmp(&scored[i].1)
            .then_with(|| simpler(&scored[i].0, &scored[j].0))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: TrainConfig,
    /// Every grid point with its mean validation accuracy, in grid order.
    pub scores: Vec<(TrainConfig, f64)>,
}

#[derive(Debug, Clone)]
pub struct SearchSetup<'a> {
    pub method: &'a MethodSpec,
    pub ways: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
    pub workers: usize,
    /// Names of the datasets reserved for testing.
    pub test_datasets: &'a [String],
}

/// Scores every grid point on 1-shot episodes of the validation library.
pub fn grid_search(
    validation: &FeatureLibrary,
    grid: &SearchGrid,
    setup: &SearchSetup<'_>,
) -> crate::Result<SearchOutcome> {
    grid.validate()?;
    if setup.test_datasets.iter().any(|t| t == validation.dataset()) {
        return Err(TuningError::ValidationEqualsTest(validation.dataset().to_string()).into());
    }
    let spec = EpisodeSpec::new(setup.ways, 1)
        .with_queries(setup.queries)
        .with_episodes(setup.episodes)
        .with_seed(setup.seed);
    let mut scores = Vec::new();
    for config in grid.points(setup.seed) {
        let run = run_benchmark(validation, setup.method, &spec, &config, setup.workers)?;
        scores.push((config, run.summary.mean));
    }
    let best = scores[select_best(&scores).expect("grid is non-empty")].0;
    Ok(SearchOutcome { best, scores })
}

/// Chosen configuration per way count for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedProfile {
    pub method: String,
    pub configs: BTreeMap<usize, TrainConfig>,
}

impl TunedProfile {
    /// Shots do not matter: 5-shot uses the 1-shot configuration.
    pub fn config_for(&self, ways: usize) -> Result<TrainConfig, TuningError> {
        self.configs
            .get(&ways)
            .copied()
            .ok_or_else(|| TuningError::MissingWays {
                method: self.method.clone(),
                ways,
            })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, TuningError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), TuningError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

type Setting = (usize, usize, f64, f64);

/// (method, 5-way, 20-way, 40-way), each as (epochs, hidden, lr, lambda).
const PUBLISHED: [(&str, Setting, Setting, Setting); 13] = [
    ("DenseNet121", (200, 1024, 1e-3, 0.2), (100, 1024, 5e-4, 0.2), (100, 2048, 5e-4, 0.1)),
    ("DenseNet161", (100, 1024, 5e-4, 0.2), (100, 512, 1e-3, 0.1), (100, 512, 5e-4, 0.1)),
    ("DenseNet169", (300, 1024, 5e-4, 0.5), (300, 512, 5e-4, 0.1), (100, 512, 1e-3, 0.2)),
    ("DenseNet201", (100, 512, 5e-4, 0.5), (200, 1024, 5e-4, 0.1), (100, 1024, 5e-4, 0.1)),
    ("ResNet18", (200, 512, 1e-3, 0.2), (200, 2048, 5e-4, 0.1), (100, 512, 1e-3, 0.1)),
    ("ResNet34", (100, 1024, 5e-4, 0.2), (100, 1024, 5e-4, 0.1), (100, 2048, 5e-4, 0.2)),
    ("ResNet50", (300, 2048, 5e-4, 0.1), (100, 1024, 5e-4, 0.1), (100, 512, 5e-4, 0.1)),
    ("ResNet101", (100, 512, 1e-3, 0.1), (200, 2048, 5e-4, 0.2), (100, 512, 5e-4, 0.1)),
    ("ResNet152", (300, 512, 5e-4, 0.1), (100, 512, 5e-4, 0.2), (100, 1024, 5e-4, 0.1)),
    ("full_library", (300, 1024, 5e-4, 0.1), (100, 512, 5e-4, 0.1), (100, 1024, 5e-4, 0.1)),
    ("BiT-ResNet-101-3", (300, 4096, 1e-3, 0.7), (300, 2048, 5e-4, 0.5), (300, 512, 5e-4, 0.7)),
    ("BiT-ResNet-152-4", (300, 2048, 5e-4, 0.7), (300, 1024, 5e-4, 0.5), (200, 1024, 5e-4, 0.5)),
    ("BiT-ResNet-50-1", (200, 2048, 5e-4, 0.5), (100, 2048, 5e-4, 0.9), (300, 1024, 5e-4, 0.5)),
];

/// Published settings for a backbone name (`ResNet18`, `single:ResNet18`,
/// `BiT-ResNet-50-1`, ...) or `full_library`. Matching ignores case.
pub fn default_profile(method: &str) -> Result<TunedProfile, TuningError> {
    let key = method.strip_prefix("single:").unwrap_or(method);
    let key = if key == "full" { "full_library" } else { key };
    let (name, five, twenty, forty) = PUBLISHED
        .iter()
        .find(|(name, ..)| name.eq_ignore_ascii_case(key))
        .ok_or_else(|| TuningError::UnknownMethod(method.to_string()))?;
    let to_config = |&(epochs, hidden, lr, lambda): &Setting| TrainConfig::new(epochs, hidden, lr, lambda);
    Ok(TunedProfile {
        method: name.to_string(),
        configs: [(5, to_config(five)), (20, to_config(twenty)), (40, to_config(forty))]
            .into_iter()
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(method: &str, ways: usize, expected: (usize, usize, f64, f64)) {
        let c = default_profile(method).unwrap().config_for(ways).unwrap();
        assert_eq!((c.epochs, c.hidden_size, c.learning_rate, c.l2_lambda), expected);
    }

    #[test]
    fn published_values() {
        check("full_library", 5, (300, 1024, 5e-4, 0.1));
        check("full_library", 20, (100, 512, 5e-4, 0.1));
        check("full_library", 40, (100, 1024, 5e-4, 0.1));
        check("ResNet18", 5, (200, 512, 1e-3, 0.2));
        check("single:resnet18", 40, (100, 512, 1e-3, 0.1));
        check("BiT-ResNet-101-3", 5, (300, 4096, 1e-3, 0.7));
        check("BiT-ResNet-50-1", 20, (100, 2048, 5e-4, 0.9));
        check("DenseNet169", 40, (100, 512, 1e-3, 0.2));
        assert!(matches!(default_profile("VGG16"), Err(TuningError::UnknownMethod(_))));
        assert!(default_profile("ResNet18").unwrap().config_for(10).is_err());
    }

    #[test]
    fn default_grid_contains_every_published_setting() {
        let grid = SearchGrid::default();
        let points = grid.points(0);
        assert_eq!(points.len(), 2 * 3 * 5 * 5);
        for (name, ..) in PUBLISHED {
            for c in default_profile(name).unwrap().configs.values() {
                assert!(points.contains(c), "{name} {c:?}");
            }
        }
    }

    #[test]
    fn tie_break_order() {
        let a = TrainConfig::new(100, 512, 1e-3, 0.1);
        let b = TrainConfig::new(200, 0, 1e-3, 0.1);
        assert_eq!(select_best(&[(b, 0.5), (a, 0.5)]), Some(1));
        let c = TrainConfig::new(100, 0, 1e-3, 0.1);
        let d = TrainConfig::new(100, 0, 1e-3, 0.5);
        assert_eq!(select_best(&[(c, 0.5), (d, 0.5)]), Some(1));
        let e = TrainConfig::new(100, 0, 5e-4, 0.5);
        assert_eq!(select_best(&[(d, 0.5), (e, 0.5)]), Some(1));
        // accuracy dominates simplicity
        assert_eq!(select_best(&[(c, 0.5), (a, 0.6)]), Some(1));
    }

    #[test]
    fn empty_axes_rejected() {
        let grid = SearchGrid {
            hidden_sizes: vec![],
            ..SearchGrid::default()
        };
        assert!(matches!(grid.validate(), Err(TuningError::EmptyGrid("hidden_sizes"))));
    }

    #[test]
    fn profile_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profile.json");
        let p = default_profile("full_library").unwrap();
        p.write(&path).unwrap();
        assert_eq!(TunedProfile::read(&path).unwrap(), p);
    }
}
