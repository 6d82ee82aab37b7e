//! Few-shot classification on top of a library of frozen feature extractors.
//!
//! Each image of a dataset is embedded once by every extractor in the
//! library. A few-shot task (an *episode*) is then solved by training a
//! small MLP head on the support embeddings and scoring it on the queries.
//! Heads can sit on one extractor, on every extractor at once (the
//! concatenated "full library"), or be combined across extractors by hard
//! or soft voting.
//!
//! Modules, bottom up:
//!
//! - [`feature_store`]: the `FSEB` embedding file format, manifests and the
//!   in-memory [`FeatureLibrary`](feature_store::FeatureLibrary).
//! - [`episodes`]: reproducible m-way n-shot sampling and mean ± 95% CI.
//! - [`classifier`]: the MLP head, its exact gradient and Adam training.
//! - [`ensembles`]: method variants and per-episode evaluation.
//! - [`benchmark`]: full runs over many episodes, in parallel.
//! - [`analysis`]: weight-importance correlation and top-feature overlap.
//! - [`tuning`]: validation grid search and the published default settings.
//! - [`reporting`]: CSV and Markdown tables.
//! - [`synthetic`]: Gaussian feature libraries for tests and demos.

pub mod analysis;
pub mod benchmark;
pub mod classifier;
pub mod ensembles;
pub mod episodes;
pub mod feature_store;
pub mod reporting;
pub mod rng;
pub mod synthetic;
pub mod tuning;

use thiserror::Error;

/// Any failure raised by the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Store(#[from] feature_store::StoreError),
    #[error(transparent)]
    Episode(#[from] episodes::EpisodeError),
    #[error(transparent)]
    Classifier(#[from] classifier::ClassifierError),
    #[error(transparent)]
    Ensemble(#[from] ensembles::EnsembleError),
    #[error(transparent)]
    Analysis(#[from] analysis::AnalysisError),
    #[error(transparent)]
    Tuning(#[from] tuning::TuningError),
    #[error(transparent)]
    Report(#[from] reporting::ReportError),
}

pub type Result<T> = std::result::Result<T, Error>;
