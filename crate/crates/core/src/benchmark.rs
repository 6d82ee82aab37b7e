//! Runs one method over every episode of a spec and summarizes the result.

use crate::classifier::TrainConfig;
use crate::ensembles::{evaluate_method, MethodSpec};
use crate::episodes::{run_episodes, summarize, AccuracySummary, EpisodeSpec};
use crate::feature_store::FeatureLibrary;
use crate::reporting::{config_fingerprint, ReportRow};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRun {
    pub dataset: String,
    pub method: MethodSpec,
    pub spec: EpisodeSpec,
    pub config: TrainConfig,
    pub summary: AccuracySummary,
}

impl BenchmarkRun {
    pub fn report_row(&self) -> ReportRow {
        ReportRow {
            dataset: self.dataset.clone(),
            method: self.method.id(),
            ways: self.spec.ways,
            shots: self.spec.shots,
            mean: self.summary.mean,
            ci95: self.summary.ci95,
            episodes: self.spec.episodes,
            seed: self.spec.base_seed,
            config_fingerprint: config_fingerprint(&self.config, &self.method),
        }
    }
}

/// Evaluates `method` on `spec.episodes` episodes using `workers` threads.
/// Results are identical for any worker count.
pub fn run_benchmark(
    lib: &FeatureLibrary,
    method: &MethodSpec,
    spec: &EpisodeSpec,
    config: &TrainConfig,
    workers: usize,
) -> crate::Result<BenchmarkRun> {
    config.validate()?;
    method.resolve(lib)?;
    spec.check_library(lib)?;
    let accuracies = run_episodes(lib, spec, workers, |episode| {
        evaluate_method(lib, episode, method, config)
    })?;
    Ok(BenchmarkRun {
        dataset: lib.dataset().to_string(),
        method: method.clone(),
        spec: *spec,
        config: *config,
        summary: summarize(&accuracies)?,
    })
}
