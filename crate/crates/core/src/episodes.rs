//! Episode sampling and the accuracy summary used for every reported number.
//!
//! Episode `i` of a run is a pure function of `(base_seed, i)`: a SplitMix64
//! stream seeded with `mix(base_seed, i)` first picks `ways` classes by a
//! partial Fisher-Yates shuffle of the sorted class ids, then for each picked
//! class (in pick order) shuffles that class's sorted row list and takes the
//! first `shots` rows as support and the next `queries` rows as queries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::FeatureLibrary;
use crate::rng::{mix, SplitMix64};

pub const DEFAULT_EPISODES: usize = 600;
pub const DEFAULT_QUERIES: usize = 15;
/// Normal quantile for a two-sided 95% interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Error, PartialEq)]
pub enum EpisodeError {
    #[error("invalid episode spec: {0}")]
    InvalidSpec(String),
    #[error("library has {have} classes, episode needs {need}")]
    NotEnoughClasses { have: usize, need: usize },
    #[error("class {class_id} has {have} rows, episode needs {need}")]
    ClassTooSmall { class_id: u32, have: usize, need: usize },
    #[error("cannot summarize an empty list of accuracies")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub episodes: usize,
    pub base_seed: u64,
}

impl EpisodeSpec {
    pub fn new(ways: usize, shots: usize) -> Self {
        Self {
            ways,
            shots,
            queries: DEFAULT_QUERIES,
            episodes: DEFAULT_EPISODES,
            base_seed: 0,
        }
    }

    pub fn with_queries(mut self, queries: usize) -> Self {
        self.queries = queries;
        self
    }

    pub fn with_episodes(mut self, episodes: usize) -> Self {
        self.episodes = episodes;
        self
    }

    pub fn with_seed(mut self, base_seed: u64) -> Self {
        self.base_seed = base_seed;
        self
    }

    pub fn validate(&self) -> Result<(), EpisodeError> {
        let bad = |what: &str| Err(EpisodeError::InvalidSpec(what.to_string()));
        if self.ways < 2 {
            return bad("ways must be at least 2");
        }
        if self.shots < 1 {
            return bad("shots must be at least 1");
        }
        if self.queries < 1 {
            return bad("queries must be at least 1");
        }
        if self.episodes < 1 {
            return bad("episode count must be at least 1");
        }
        Ok(())
    }

    /// Fails fast if any class of the library could be drawn and be too small.
    pub fn check_library(&self, lib: &FeatureLibrary) -> Result<(), EpisodeError> {
        self.validate()?;
        if lib.num_classes() < self.ways {
            return Err(EpisodeError::NotEnoughClasses {
                have: lib.num_classes(),
                need: self.ways,
            });
        }
        let need = self.shots + self.queries;
        for class_id in lib.class_ids() {
            let have = lib.class_rows(class_id).len();
            if have < need {
                return Err(EpisodeError::ClassTooSmall { class_id, have, need });
            }
        }
        Ok(())
    }

    pub fn episode_seed(&self, episode_index: usize) -> u64 {
        mix(self.base_seed, episode_index as u64)
    }
}

/// A concrete m-way n-shot task. Rows are grouped by class in `class_ids` order;
/// the local label of a row is the position of its class in `class_ids`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_index: usize,
    pub seed: u64,
    pub class_ids: Vec<u32>,
    pub support_rows: Vec<usize>,
    pub query_rows: Vec<usize>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.class_ids.len()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        grouped_labels(self.support_rows.len(), self.ways())
    }

    pub fn query_labels(&self) -> Vec<usize> {
        grouped_labels(self.query_rows.len(), self.ways())
    }
}

fn grouped_labels(len: usize, ways: usize) -> Vec<usize> {
    let per = len / ways;
    (0..len).map(|i| i / per).collect()
}

pub fn sample_episode(
    lib: &FeatureLibrary,
    spec: &EpisodeSpec,
    episode_index: usize,
) -> Result<Episode, EpisodeError> {
    spec.validate()?;
    let mut classes: Vec<u32> = lib.class_ids().collect();
    if classes.len() < spec.ways {
        return Err(EpisodeError::NotEnoughClasses {
            have: classes.len(),
            need: spec.ways,
        });
    }
    let seed = spec.episode_seed(episode_index);
    let mut rng = SplitMix64::new(seed);
    rng.partial_shuffle(&mut classes, spec.ways);
    classes.truncate(spec.ways);

    let need = spec.shots + spec.queries;
    let mut support_rows = Vec::with_capacity(spec.ways * spec.shots);
    let mut query_rows = Vec::with_capacity(spec.ways * spec.queries);
    for &class_id in &classes {
        let mut rows = lib.class_rows(class_id).to_vec();
        if rows.len() < need {
            return Err(EpisodeError::ClassTooSmall {
                class_id,
                have: rows.len(),
                need,
            });
        }
        rng.partial_shuffle(&mut rows, need);
        support_rows.extend_from_slice(&rows[..spec.shots]);
        query_rows.extend_from_slice(&rows[spec.shots..need]);
    }
    Ok(Episode {
        episode_index,
        seed,
        class_ids: classes,
        support_rows,
        query_rows,
    })
}

/// Mean accuracy with the half-width of its 95% confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub mean: f64,
    pub ci95: f64,
    pub per_episode: Vec<f64>,
}

/// `ci95 = 1.96 * s / sqrt(E)` with `s` the n-1 sample standard deviation.
/// A single episode has no spread estimate and gets `ci95 = 0`.
pub fn summarize(per_episode: &[f64]) -> Result<AccuracySummary, EpisodeError> {
    if per_episode.is_empty() {
        return Err(EpisodeError::EmptyInput);
    }
    let count = per_episode.len() as f64;
    if per_episode.iter().all(|&a| a == per_episode[0]) {
        return Ok(AccuracySummary {
            mean: per_episode[0],
            ci95: 0.0,
            per_episode: per_episode.to_vec(),
        });
    }
    let mean = per_episode.iter().sum::<f64>() / count;
    let ci95 = if per_episode.len() < 2 {
        0.0
    } else {
        let ss: f64 = per_episode.iter().map(|a| (a - mean).powi(2)).sum();
        Z_95 * (ss / (count - 1.0)).sqrt() / count.sqrt()
    };
    Ok(AccuracySummary {
        mean,
        ci95,
        per_episode: per_episode.to_vec(),
    })
}

/// Evaluates every episode of `spec` on `workers` threads and returns the
/// results in episode order. The output does not depend on `workers`.
pub fn run_episodes<T, E, F>(
    lib: &FeatureLibrary,
    spec: &EpisodeSpec,
    workers: usize,
    evaluate: F,
) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send + From<EpisodeError>,
    F: Fn(&Episode) -> Result<T, E> + Sync,
{
    spec.validate()?;
    let job = |i: usize| -> Result<T, E> {
        let episode = sample_episode(lib, spec, i)?;
        evaluate(&episode)
    };
    if workers <= 1 {
        return (0..spec.episodes).map(job).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool");
    pool.install(|| (0..spec.episodes).into_par_iter().map(job).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::{assemble_library, EmbeddingSet};

    fn library(class_sizes: &[usize]) -> FeatureLibrary {
        let labels: Vec<u32> = class_sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat(c as u32).take(n))
            .collect();
        let data = (0..labels.len()).map(|i| i as f32).collect();
        let set = EmbeddingSet::new("x", 1, data, labels).unwrap();
        assemble_library("toy", vec![set]).unwrap().0
    }

    #[test]
    fn structure_of_a_small_episode() {
        let lib = library(&[20, 20, 20]);
        let spec = EpisodeSpec::new(2, 1).with_queries(15);
        let ep = sample_episode(&lib, &spec, 0).unwrap();
        assert_eq!(ep.class_ids.len(), 2);
        assert_ne!(ep.class_ids[0], ep.class_ids[1]);
        assert_eq!(ep.support_rows.len(), 2);
        assert_eq!(ep.query_rows.len(), 30);
        for r in &ep.support_rows {
            assert!(!ep.query_rows.contains(r));
        }
        for (row, label) in ep.query_rows.iter().zip(ep.query_labels()) {
            assert_eq!(lib.labels()[*row], ep.class_ids[label]);
        }
        for (row, label) in ep.support_rows.iter().zip(ep.support_labels()) {
            assert_eq!(lib.labels()[*row], ep.class_ids[label]);
        }
    }

    #[test]
    fn small_class_is_reported() {
        let lib = library(&[6, 6]);
        let spec = EpisodeSpec::new(2, 5).with_queries(15);
        assert!(matches!(
            sample_episode(&lib, &spec, 0),
            Err(EpisodeError::ClassTooSmall { have: 6, need: 20, .. })
        ));
        assert!(spec.check_library(&lib).is_err());
    }

    #[test]
    fn not_enough_classes() {
        let lib = library(&[30, 30]);
        let spec = EpisodeSpec::new(5, 1);
        assert_eq!(
            sample_episode(&lib, &spec, 0),
            Err(EpisodeError::NotEnoughClasses { have: 2, need: 5 })
        );
    }

    #[test]
    fn deterministic() {
        let lib = library(&[25; 10]);
        let spec = EpisodeSpec::new(5, 5).with_seed(99);
        let a = sample_episode(&lib, &spec, 17).unwrap();
        let b = sample_episode(&lib, &spec, 17).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_episode(&lib, &spec, 18).unwrap());
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            EpisodeSpec::new(1, 1),
            EpisodeSpec::new(2, 0),
            EpisodeSpec::new(2, 1).with_queries(0),
            EpisodeSpec::new(2, 1).with_episodes(0),
        ] {
            assert!(matches!(spec.validate(), Err(EpisodeError::InvalidSpec(_))));
        }
    }

    #[test]
    fn summary_formulas() {
        let s = summarize(&[0.8, 0.8, 0.8]).unwrap();
        assert!((s.mean - 0.8).abs() < 1e-15);
        assert_eq!(s.ci95, 0.0);
        let s = summarize(&[0.0, 1.0]).unwrap();
        assert_eq!(s.mean, 0.5);
        // s = 1/sqrt(2), E = 2
        let expected = 1.96 * std::f64::consts::FRAC_1_SQRT_2 / 2f64.sqrt();
        assert!((s.ci95 - expected).abs() < 1e-12);
        assert!((s.ci95 - 0.98).abs() < 1e-12);
        assert_eq!(summarize(&[]), Err(EpisodeError::EmptyInput));
        assert_eq!(summarize(&[0.3]).unwrap().ci95, 0.0);
    }

    #[test]
    fn run_order_independent_of_workers() {
        let lib = library(&[20; 8]);
        let spec = EpisodeSpec::new(3, 2).with_queries(3).with_episodes(40).with_seed(5);
        let eval = |e: &Episode| Ok::<_, EpisodeError>(e.clone());
        let one = run_episodes(&lib, &spec, 1, eval).unwrap();
        let many = run_episodes(&lib, &spec, 4, eval).unwrap();
        assert_eq!(one, many);
        assert!(one.iter().enumerate().all(|(i, e)| e.episode_index == i));
    }
}
