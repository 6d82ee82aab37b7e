//! Ways of turning a library into a few-shot learner, and their evaluation on
//! one episode.
//!
//! - `single:<name>`: one head on one extractor.
//! - `hard_ensemble`: one head per extractor, majority vote over labels.
//! - `soft_ensemble`: one head per extractor, argmax of the averaged
//!   probability vectors (or logits, see [`SoftAverage`]).
//! - `full_library`: one head on the concatenation of all extractors.
//!
//! Every vote breaks ties toward the smallest class index.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{argmax, predict_proba, train_head, HeadModel, TrainConfig};
use crate::episodes::Episode;
use crate::feature_store::FeatureLibrary;
use crate::rng::mix;

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("row {row} of model {model} is not a probability vector (sum {sum})")]
    NotAProbability { model: usize, row: usize, sum: f64 },
    #[error("unknown method {0:?}; expected full_library, hard, soft or single:<name>")]
    UnknownMethod(String),
    #[error("{variant} needs {need} members, got {got}")]
    MemberCount {
        variant: &'static str,
        need: &'static str,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Single,
    HardEnsemble,
    SoftEnsemble,
    FullLibrary,
}

/// What the soft ensemble averages before taking the argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftAverage {
    #[default]
    Probabilities,
    Logits,
}

/// How ensemble members get their initialization seeds within an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberSeeds {
    /// Every member uses the episode's training seed.
    #[default]
    Shared,
    /// Member `i` uses `mix(training_seed, i)`.
    PerMember,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub variant: Variant,
    /// Member names. Empty means every member of the library (ensembles and
    /// full library only).
    pub members: Vec<String>,
    #[serde(default)]
    pub soft_average: SoftAverage,
    #[serde(default)]
    pub member_seeds: MemberSeeds,
}

impl MethodSpec {
    pub fn single(name: impl Into<String>) -> Self {
        Self::new(Variant::Single, vec![name.into()])
    }

    pub fn full_library() -> Self {
        Self::new(Variant::FullLibrary, Vec::new())
    }

    pub fn hard_ensemble() -> Self {
        Self::new(Variant::HardEnsemble, Vec::new())
    }

    pub fn soft_ensemble() -> Self {
        Self::new(Variant::SoftEnsemble, Vec::new())
    }

    pub fn new(variant: Variant, members: Vec<String>) -> Self {
        Self {
            variant,
            members,
            soft_average: SoftAverage::Probabilities,
            member_seeds: MemberSeeds::Shared,
        }
    }

    pub fn with_members(mut self, members: Vec<String>) -> Self {
        self.members = members;
        self
    }

    pub fn with_soft_average(mut self, soft_average: SoftAverage) -> Self {
        self.soft_average = soft_average;
        self
    }

    pub fn with_member_seeds(mut self, member_seeds: MemberSeeds) -> Self {
        self.member_seeds = member_seeds;
        self
    }

    /// Short name used in reports and profile lookups.
    pub fn id(&self) -> String {
        match self.variant {
            Variant::Single => format!("single:{}", self.members.first().map_or("", String::as_str)),
            Variant::HardEnsemble => "hard_ensemble".into(),
            Variant::SoftEnsemble => "soft_ensemble".into(),
            Variant::FullLibrary => "full_library".into(),
        }
    }

    /// Member indices this method uses on `lib`, checking the count rules.
    pub fn resolve(&self, lib: &FeatureLibrary) -> crate::Result<Vec<usize>> {
        let indices = if self.members.is_empty() && self.variant != Variant::Single {
            lib.all_members()
        } else {
            lib.select(&self.members)?
        };
        let got = indices.len();
        let ok = match self.variant {
            Variant::Single => got == 1,
            Variant::HardEnsemble | Variant::SoftEnsemble => got >= 2,
            Variant::FullLibrary => got >= 1,
        };
        if !ok {
            let (variant, need) = match self.variant {
                Variant::Single => ("single", "exactly 1"),
                Variant::HardEnsemble => ("hard_ensemble", "at least 2"),
                Variant::SoftEnsemble => ("soft_ensemble", "at least 2"),
                Variant::FullLibrary => ("full_library", "at least 1"),
            };
            return Err(EnsembleError::MemberCount { variant, need, got }.into());
        }
        Ok(indices)
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl FromStr for MethodSpec {
    type Err = EnsembleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full_library" | "full" => Ok(Self::full_library()),
            "hard" | "hard_ensemble" => Ok(Self::hard_ensemble()),
            "soft" | "soft_ensemble" => Ok(Self::soft_ensemble()),
            _ => match s.strip_prefix("single:") {
                Some(name) if !name.is_empty() => Ok(Self::single(name)),
                _ => Err(EnsembleError::UnknownMethod(s.to_string())),
            },
        }
    }
}

/// Majority vote over `[models][queries]` label predictions.
pub fn hard_vote(predictions: &[Vec<usize>]) -> Result<Vec<usize>, EnsembleError> {
    let first = predictions
        .first()
        .ok_or_else(|| EnsembleError::ShapeMismatch("no models".into()))?;
    let queries = first.len();
    if let Some(m) = predictions.iter().position(|p| p.len() != queries) {
        return Err(EnsembleError::ShapeMismatch(format!(
            "model {m} has {} predictions, model 0 has {queries}",
            predictions[m].len()
        )));
    }
    let classes = predictions.iter().flatten().max().map_or(0, |&l| l + 1);
    let mut counts = vec![0usize; classes];
    Ok((0..queries)
        .map(|q| {
            counts.iter_mut().for_each(|c| *c = 0);
            for p in predictions {
                counts[p[q]] += 1;
            }
            // first maximum = smallest label among the tied
            let mut best = 0;
            for (label, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = label;
                }
            }
            best
        })
        .collect())
}

const PROBABILITY_TOLERANCE: f64 = 1e-9;

fn check_same_shape(outputs: &[Array2<f64>]) -> Result<(), EnsembleError> {
    let first = outputs
        .first()
        .ok_or_else(|| EnsembleError::ShapeMismatch("no models".into()))?;
    if let Some(m) = outputs.iter().position(|o| o.dim() != first.dim()) {
        return Err(EnsembleError::ShapeMismatch(format!(
            "model {m} output is {:?}, model 0 output is {:?}",
            outputs[m].dim(),
            first.dim()
        )));
    }
    Ok(())
}

fn mean_argmax(outputs: &[Array2<f64>]) -> Vec<usize> {
    let mut mean = outputs[0].clone();
    for o in &outputs[1..] {
        mean += o;
    }
    mean /= outputs.len() as f64;
    mean.rows()
        .into_iter()
        .map(|r| argmax(&r.to_vec()))
        .collect()
}

/// Argmax of the unweighted mean of `[models]` `queries × ways` probability
/// matrices.
pub fn soft_vote(probabilities: &[Array2<f64>]) -> Result<Vec<usize>, EnsembleError> {
    check_same_shape(probabilities)?;
    for (model, p) in probabilities.iter().enumerate() {
        for (row, r) in p.rows().into_iter().enumerate() {
            let sum = r.sum();
            if (sum - 1.0).abs() > PROBABILITY_TOLERANCE || r.iter().any(|&v| !(v >= 0.0)) {
                return Err(EnsembleError::NotAProbability { model, row, sum });
            }
        }
    }
    Ok(mean_argmax(probabilities))
}

/// Argmax of averaged logits; the ablation alternative to [`soft_vote`].
pub fn logit_vote(logits: &[Array2<f64>]) -> Result<Vec<usize>, EnsembleError> {
    check_same_shape(logits)?;
    Ok(mean_argmax(logits))
}

/// Predicted and true local labels for the queries of one episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeOutcome {
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
}

impl EpisodeOutcome {
    pub fn accuracy(&self) -> f64 {
        crate::classifier::accuracy(&self.predicted, &self.truth)
    }
}

/// Seed for the heads trained in one episode.
pub fn training_seed(config: &TrainConfig, episode: &Episode) -> u64 {
    mix(config.seed, episode.seed)
}

fn fit_on(
    lib: &FeatureLibrary,
    episode: &Episode,
    members: &[usize],
    config: &TrainConfig,
    seed: u64,
) -> crate::Result<(HeadModel, Array2<f64>)> {
    let support = lib.gather_rows(&episode.support_rows, members)?;
    let queries = lib.gather_rows(&episode.query_rows, members)?;
    let config = config.with_seed(seed);
    let (head, _) = train_head(support.view(), &episode.support_labels(), episode.ways(), &config)?;
    Ok((head, queries))
}

/// Trains the method's head(s) on the episode's support set and predicts its
/// queries.
pub fn run_method(
    lib: &FeatureLibrary,
    episode: &Episode,
    method: &MethodSpec,
    config: &TrainConfig,
) -> crate::Result<EpisodeOutcome> {
    let members = method.resolve(lib)?;
    let seed = training_seed(config, episode);
    let predicted = match method.variant {
        Variant::Single | Variant::FullLibrary => {
            let (head, queries) = fit_on(lib, episode, &members, config, seed)?;
            crate::classifier::predict(&head, queries.view())?
        }
        Variant::HardEnsemble | Variant::SoftEnsemble => {
            let mut outputs = Vec::with_capacity(members.len());
            for (i, &m) in members.iter().enumerate() {
                let member_seed = match method.member_seeds {
                    MemberSeeds::Shared => seed,
                    MemberSeeds::PerMember => mix(seed, i as u64),
                };
                let (head, queries) = fit_on(lib, episode, &[m], config, member_seed)?;
                let out = match (method.variant, method.soft_average) {
                    (Variant::SoftEnsemble, SoftAverage::Logits) => head.logits(queries.view())?,
                    _ => predict_proba(&head, queries.view())?,
                };
                outputs.push(out);
            }
            match (method.variant, method.soft_average) {
                (Variant::HardEnsemble, _) => {
                    let labels: Vec<Vec<usize>> = outputs
                        .iter()
                        .map(|p| p.rows().into_iter().map(|r| argmax(&r.to_vec())).collect())
                        .collect();
                    hard_vote(&labels)?
                }
                (_, SoftAverage::Probabilities) => soft_vote(&outputs)?,
                (_, SoftAverage::Logits) => logit_vote(&outputs)?,
            }
        }
    };
    Ok(EpisodeOutcome {
        predicted,
        truth: episode.query_labels(),
    })
}

/// Query accuracy of `method` on one episode.
pub fn evaluate_method(
    lib: &FeatureLibrary,
    episode: &Episode,
    method: &MethodSpec,
    config: &TrainConfig,
) -> crate::Result<f64> {
    Ok(run_method(lib, episode, method, config)?.accuracy())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hard_vote_rules() {
        // A=0, B=1
        assert_eq!(hard_vote(&[vec![0], vec![0], vec![1]]).unwrap(), vec![0]);
        assert_eq!(hard_vote(&[vec![3], vec![1]]).unwrap(), vec![1]);
        assert_eq!(hard_vote(&[vec![2, 0, 1]]).unwrap(), vec![2, 0, 1]);
        assert!(matches!(
            hard_vote(&[vec![0, 1], vec![0]]),
            Err(EnsembleError::ShapeMismatch(_))
        ));
        assert!(hard_vote(&[]).is_err());
    }

    #[test]
    fn soft_vote_arithmetic() {
        let a = array![[0.6, 0.4]];
        let b = array![[0.1, 0.9]];
        assert_eq!(soft_vote(&[a.clone(), b]).unwrap(), vec![1]);
        assert_eq!(soft_vote(&[a.clone(), a.clone()]).unwrap(), vec![0]);
        let tie = array![[0.5, 0.5]];
        assert_eq!(soft_vote(&[tie]).unwrap(), vec![0]);
    }

    #[test]
    fn soft_vote_rejects_non_probabilities() {
        let bad = array![[0.6, 0.6]];
        assert!(matches!(
            soft_vote(&[bad]),
            Err(EnsembleError::NotAProbability { model: 0, row: 0, .. })
        ));
        let a = array![[0.5, 0.5]];
        let b = array![[0.5, 0.5], [0.5, 0.5]];
        assert!(matches!(soft_vote(&[a, b]), Err(EnsembleError::ShapeMismatch(_))));
    }

    #[test]
    fn method_ids_parse() {
        for s in ["full_library", "hard_ensemble", "soft_ensemble", "single:ResNet18"] {
            assert_eq!(s.parse::<MethodSpec>().unwrap().id(), s);
        }
        assert_eq!("hard".parse::<MethodSpec>().unwrap().variant, Variant::HardEnsemble);
        assert!("single:".parse::<MethodSpec>().is_err());
        assert!("vote".parse::<MethodSpec>().is_err());
    }
}
