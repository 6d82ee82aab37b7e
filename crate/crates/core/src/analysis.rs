//! Which features do heads rely on?
//!
//! A head without a hidden layer has one weight per (class, feature). The
//! importance of feature `j` is the L1 norm of its column of `W2`. Two
//! experiments are built on that profile:
//!
//! - [`correlation_experiment`]: Pearson correlation between the profile of a
//!   one-shot head and the profile of a head trained on every row of the same
//!   classes.
//! - [`cross_dataset_heatmaps`]: overlap (Jaccard) of the top-20% feature sets
//!   across many tasks and datasets, and the share of each extractor's
//!   features that make the cut.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{train_head, HeadModel, TrainConfig};
use crate::feature_store::{ExtractorLayout, FeatureLibrary};
use crate::rng::{mix, SplitMix64};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("importance needs a head without a hidden layer")]
    HasHiddenLayer,
    #[error("vectors have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 values, got {0}")]
    TooShort(usize),
    #[error("correlation undefined: an input is constant")]
    ConstantInput,
    #[error("feature universes differ: {0} vs {1}")]
    UniverseMismatch(usize, usize),
    #[error("library {dataset} has {have} classes, task needs {need}")]
    NotEnoughClasses { dataset: String, have: usize, need: usize },
    #[error("class {class_id} has {have} rows, task needs {need}")]
    ClassTooSmall { class_id: u32, have: usize, need: usize },
    #[error("need at least one library")]
    NoLibraries,
}

/// Per-feature importance, one entry per input column of the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceProfile(pub Vec<f64>);

impl ImportanceProfile {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn importance(model: &HeadModel) -> Result<ImportanceProfile, AnalysisError> {
    if model.has_hidden_layer() {
        return Err(AnalysisError::HasHiddenLayer);
    }
    Ok(ImportanceProfile(
        model
            .w2
            .columns()
            .into_iter()
            .map(|col| col.iter().map(|w| w.abs()).sum())
            .collect(),
    ))
}

/// Sorted indices of the most important features of a `universe`-sized space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopFeatureSet {
    pub universe: usize,
    pub indices: Vec<usize>,
}

impl TopFeatureSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// The `count` largest entries; equal importances favour the smaller index.
pub fn top_features(profile: &ImportanceProfile, count: usize) -> TopFeatureSet {
    let mut order: Vec<usize> = (0..profile.len()).collect();
    order.sort_by(|&a, &b| profile.0[b].total_cmp(&profile.0[a]).then(a.cmp(&b)));
    order.truncate(count.min(profile.len()));
    order.sort_unstable();
    TopFeatureSet {
        universe: profile.len(),
        indices: order,
    }
}

/// Top `floor(0.2 * len)` features.
pub fn top_fifth(profile: &ImportanceProfile) -> TopFeatureSet {
    top_features(profile, profile.len() / 5)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(AnalysisError::TooShort(x.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn jaccard(a: &TopFeatureSet, b: &TopFeatureSet) -> Result<f64, AnalysisError> {
    if a.universe != b.universe {
        return Err(AnalysisError::UniverseMismatch(a.universe, b.universe));
    }
    let (mut i, mut j, mut common) = (0, 0, 0usize);
    while i < a.indices.len() && j < b.indices.len() {
        match a.indices[i].cmp(&b.indices[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - common;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(common as f64 / union as f64)
}

/// Fraction of each extractor's columns that fall in `top`.
pub fn extractor_share(
    top: &TopFeatureSet,
    layout: &ExtractorLayout,
) -> Result<Vec<(String, f64)>, AnalysisError> {
    if layout.total_dim() != top.universe || !layout.is_contiguous() {
        return Err(AnalysisError::UniverseMismatch(layout.total_dim(), top.universe));
    }
    Ok(layout
        .blocks
        .iter()
        .map(|b| {
            let inside = top
                .indices
                .iter()
                .filter(|&&j| j >= b.offset && j < b.offset + b.len)
                .count();
            (b.name.clone(), inside as f64 / b.len as f64)
        })
        .collect())
}

/// Rows of `ways` randomly chosen classes, grouped by class.
struct Task {
    class_ids: Vec<u32>,
    /// Per class, shuffled rows.
    rows: Vec<Vec<usize>>,
}

fn sample_task(
    lib: &FeatureLibrary,
    ways: usize,
    min_rows: usize,
    seed: u64,
) -> Result<Task, AnalysisError> {
    let mut classes: Vec<u32> = lib.class_ids().collect();
    if classes.len() < ways {
        return Err(AnalysisError::NotEnoughClasses {
            dataset: lib.dataset().to_string(),
            have: classes.len(),
            need: ways,
        });
    }
    let mut rng = SplitMix64::new(seed);
    rng.partial_shuffle(&mut classes, ways);
    classes.truncate(ways);
    let mut rows = Vec::with_capacity(ways);
    for &class_id in &classes {
        let mut r = lib.class_rows(class_id).to_vec();
        if r.len() < min_rows {
            return Err(AnalysisError::ClassTooSmall {
                class_id,
                have: r.len(),
                need: min_rows,
            });
        }
        let len = r.len();
        rng.partial_shuffle(&mut r, len);
        rows.push(r);
    }
    Ok(Task {
        class_ids: classes,
        rows,
    })
}

fn fit_profile(
    lib: &FeatureLibrary,
    per_class: &[&[usize]],
    config: &TrainConfig,
) -> crate::Result<ImportanceProfile> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (label, class_rows) in per_class.iter().enumerate() {
        rows.extend_from_slice(class_rows);
        labels.extend(std::iter::repeat(label).take(class_rows.len()));
    }
    let x = lib.gather_rows(&rows, &lib.all_members())?;
    let (head, _) = train_head(x.view(), &labels, per_class.len(), config)?;
    Ok(importance(&head)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSetup {
    pub ways: usize,
    /// Rows per class withheld from the full-data head.
    pub reserve_per_class: usize,
    /// Learning rate and epochs; the hidden layer and penalty are forced off.
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationOutcome {
    pub r: f64,
    pub class_ids: Vec<u32>,
    pub one_shot: ImportanceProfile,
    pub full_data: ImportanceProfile,
}

/// Trains a one-shot head and a head on every non-reserved row of the same
/// classes (both linear, unregularized, independently initialized) and
/// correlates their importance profiles.
pub fn correlation_experiment(
    lib: &FeatureLibrary,
    setup: &CorrelationSetup,
    seed: u64,
) -> crate::Result<CorrelationOutcome> {
    let task = sample_task(lib, setup.ways, 1 + setup.reserve_per_class, mix(seed, 0))?;
    let base = TrainConfig {
        hidden_size: 0,
        l2_lambda: 0.0,
        ..setup.config
    };
    let shot: Vec<&[usize]> = task.rows.iter().map(|r| &r[..1]).collect();
    let full: Vec<&[usize]> = task
        .rows
        .iter()
        .map(|r| {
            // the one-shot row stays in, reserved rows come from the end
            &r[..r.len() - setup.reserve_per_class]
        })
        .collect();
    let one_shot = fit_profile(lib, &shot, &base.with_seed(mix(seed, 1)))?;
    let full_data = fit_profile(lib, &full, &base.with_seed(mix(seed, 2)))?;
    let r = pearson(&one_shot.0, &full_data.0)?;
    Ok(CorrelationOutcome {
        r,
        class_ids: task.class_ids,
        one_shot,
        full_data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSetup {
    pub ways: usize,
    pub tasks: usize,
    /// Training rows per class; `None` uses every row of each chosen class.
    pub rows_per_class: Option<usize>,
    /// Hidden layer is forced off.
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmaps {
    pub datasets: Vec<String>,
    /// `jaccard[a][b]`: mean Jaccard of top-20% sets between tasks of a and b.
    pub jaccard: Vec<Vec<f64>>,
    /// Per dataset, mean share of each extractor's features in the top 20%.
    pub shares: Vec<Vec<(String, f64)>>,
    pub layouts: Vec<ExtractorLayout>,
}

/// Top-20% sets of `setup.tasks` independent tasks on one library.
pub fn task_top_sets(
    lib: &FeatureLibrary,
    setup: &HeatmapSetup,
    seed: u64,
) -> crate::Result<Vec<TopFeatureSet>> {
    let config = TrainConfig {
        hidden_size: 0,
        ..setup.config
    };
    (0..setup.tasks)
        .into_par_iter()
        .map(|t| {
            let task_seed = mix(seed, t as u64);
            let task = sample_task(lib, setup.ways, setup.rows_per_class.unwrap_or(1), task_seed)?;
            let per_class: Vec<&[usize]> = task
                .rows
                .iter()
                .map(|r| &r[..setup.rows_per_class.unwrap_or(r.len())])
                .collect();
            let profile = fit_profile(lib, &per_class, &config.with_seed(mix(task_seed, 1)))?;
            Ok(top_fifth(&profile))
        })
        .collect()
}

fn mean_cross_jaccard(a: &[TopFeatureSet], b: &[TopFeatureSet]) -> Result<f64, AnalysisError> {
    let mut sum = 0.0;
    for x in a {
        for y in b {
            sum += jaccard(x, y)?;
        }
    }
    Ok(sum / (a.len() * b.len()) as f64)
}

fn mean_within_jaccard(sets: &[TopFeatureSet]) -> Result<f64, AnalysisError> {
    if sets.len() < 2 {
        return Ok(1.0);
    }
    let (mut sum, mut pairs) = (0.0, 0usize);
    for i in 0..sets.len() {
        for j in (i + 1)..sets.len() {
            sum += jaccard(&sets[i], &sets[j])?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Jaccard matrix from per-dataset top sets. The diagonal averages distinct
/// task pairs of the same dataset; off-diagonal cells average all pairs.
pub fn jaccard_matrix(sets: &[Vec<TopFeatureSet>]) -> Result<Vec<Vec<f64>>, AnalysisError> {
    let n = sets.len();
    let mut out = vec![vec![0.0; n]; n];
    for a in 0..n {
        out[a][a] = mean_within_jaccard(&sets[a])?;
        for b in (a + 1)..n {
            let v = mean_cross_jaccard(&sets[a], &sets[b])?;
            out[a][b] = v;
            out[b][a] = v;
        }
    }
    Ok(out)
}

pub fn mean_shares(
    sets: &[TopFeatureSet],
    layout: &ExtractorLayout,
) -> Result<Vec<(String, f64)>, AnalysisError> {
    let mut totals: Vec<(String, f64)> = layout.blocks.iter().map(|b| (b.name.clone(), 0.0)).collect();
    for s in sets {
        for (acc, (_, share)) in totals.iter_mut().zip(extractor_share(s, layout)?) {
            acc.1 += share;
        }
    }
    let count = sets.len().max(1) as f64;
    totals.iter_mut().for_each(|t| t.1 /= count);
    Ok(totals)
}

pub fn cross_dataset_heatmaps(
    libraries: &[(&FeatureLibrary, &ExtractorLayout)],
    setup: &HeatmapSetup,
    seed: u64,
) -> crate::Result<Heatmaps> {
    if libraries.is_empty() {
        return Err(AnalysisError::NoLibraries.into());
    }
    let mut sets = Vec::with_capacity(libraries.len());
    let mut shares = Vec::with_capacity(libraries.len());
    for (i, (lib, layout)) in libraries.iter().enumerate() {
        // separate streams, otherwise task t of every dataset shares its init
        let top = task_top_sets(lib, setup, mix(seed, i as u64))?;
        shares.push(mean_shares(&top, layout)?);
        sets.push(top);
    }
    Ok(Heatmaps {
        datasets: libraries.iter().map(|(l, _)| l.dataset().to_string()).collect(),
        jaccard: jaccard_matrix(&sets)?,
        shares,
        layouts: libraries.iter().map(|(_, l)| (*l).clone()).collect(),
    })
}

impl Heatmaps {
    /// `dataset,<dataset 1>,...,<dataset n>` then one row per dataset.
    pub fn jaccard_csv(&self) -> String {
        let mut out = String::from("dataset");
        for d in &self.datasets {
            write!(out, ",{}", csv_field(d)).unwrap();
        }
        out.push('\n');
        for (d, row) in self.datasets.iter().zip(&self.jaccard) {
            out.push_str(&csv_field(d));
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// `dataset,extractor,offset,length,share`, long format.
    pub fn shares_csv(&self) -> String {
        let mut out = String::from("dataset,extractor,offset,length,share\n");
        for ((d, shares), layout) in self.datasets.iter().zip(&self.shares).zip(&self.layouts) {
            for ((name, share), block) in shares.iter().zip(&layout.blocks) {
                writeln!(
                    out,
                    "{},{},{},{},{share}",
                    csv_field(d),
                    csv_field(name),
                    block.offset,
                    block.len
                )
                .unwrap();
            }
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `dataset,trial,pearson_r`.
pub fn correlation_csv(results: &[(String, Vec<f64>)]) -> String {
    let mut out = String::from("dataset,trial,pearson_r\n");
    for (dataset, rs) in results {
        for (trial, r) in rs.iter().enumerate() {
            writeln!(out, "{},{trial},{r}", csv_field(dataset)).unwrap();
        }
    }
    out
}
