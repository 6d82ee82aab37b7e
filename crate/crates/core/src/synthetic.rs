//! Gaussian feature libraries with a known class structure.
//!
//! Used by the test suites and by `fsb synth` to exercise the harness without
//! real extractors. Rows of class `c` are `mean_c + sigma * N(0, I)` in the
//! concatenated feature space, which is then split into members.

use rand_distr::{Distribution, StandardNormal};

use crate::feature_store::{assemble_library, EmbeddingSet, ExtractorLayout, FeatureLibrary};
use crate::rng::{mix, SplitMix64};

/// Where the class means live.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassSignal {
    /// Class `c` has mean `separation / sqrt(2) * e_c`, so every pair of class
    /// means is exactly `separation` apart. Needs `classes <= total_dim`.
    Orthogonal { separation: f64 },
    /// A fixed random subset of `fraction` of the features carries class
    /// means drawn from `N(0, scale^2)`; the rest is pure noise.
    Informative { fraction: f64, scale: f64 },
    /// No class structure at all.
    Noise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub dataset: String,
    pub classes: usize,
    pub rows_per_class: usize,
    pub members: Vec<(String, usize)>,
    pub sigma: f64,
    pub signal: ClassSignal,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(classes: usize, rows_per_class: usize, member_dims: &[usize]) -> Self {
        Self {
            dataset: "synthetic".into(),
            classes,
            rows_per_class,
            members: member_dims
                .iter()
                .enumerate()
                .map(|(i, &d)| (format!("member{i}"), d))
                .collect(),
            sigma: 1.0,
            signal: ClassSignal::Noise,
            seed: 0,
        }
    }

    pub fn named(mut self, dataset: impl Into<String>) -> Self {
        self.dataset = dataset.into();
        self
    }

    pub fn with_signal(mut self, signal: ClassSignal) -> Self {
        self.signal = signal;
        self
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn total_dim(&self) -> usize {
        self.members.iter().map(|(_, d)| d).sum()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticLibrary {
    pub library: FeatureLibrary,
    pub layout: ExtractorLayout,
    /// Sorted indices of features that carry class signal.
    pub informative: Vec<usize>,
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticLibrary {
    let dim = spec.total_dim();
    let mut rng = SplitMix64::new(mix(spec.seed, 0));
    let mut means = vec![0.0f64; spec.classes * dim];
    let mut informative = Vec::new();
    match spec.signal {
        ClassSignal::Orthogonal { separation } => {
            assert!(spec.classes <= dim, "orthogonal means need classes <= total_dim");
            let a = separation / std::f64::consts::SQRT_2;
            for c in 0..spec.classes {
                means[c * dim + c] = a;
            }
            informative = (0..spec.classes).collect();
        }
        ClassSignal::Informative { fraction, scale } => {
            let count = ((fraction * dim as f64).floor() as usize).min(dim);
            let mut features: Vec<usize> = (0..dim).collect();
            rng.partial_shuffle(&mut features, count);
            informative = features[..count].to_vec();
            informative.sort_unstable();
            for c in 0..spec.classes {
                for &j in &informative {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    means[c * dim + j] = scale * z;
                }
            }
        }
        ClassSignal::Noise => {}
    }

    let rows = spec.classes * spec.rows_per_class;
    let mut full = vec![0.0f64; rows * dim];
    let mut labels = Vec::with_capacity(rows);
    let mut noise_rng = SplitMix64::new(mix(spec.seed, 1));
    for c in 0..spec.classes {
        for r in 0..spec.rows_per_class {
            let row = c * spec.rows_per_class + r;
            for j in 0..dim {
                let z: f64 = StandardNormal.sample(&mut noise_rng);
                full[row * dim + j] = means[c * dim + j] + spec.sigma * z;
            }
            labels.push(c as u32);
        }
    }

    let mut sets = Vec::with_capacity(spec.members.len());
    let mut offset = 0;
    for (name, d) in &spec.members {
        let mut data = Vec::with_capacity(rows * d);
        for row in 0..rows {
            let start = row * dim + offset;
            data.extend(full[start..start + d].iter().map(|&v| v as f32));
        }
        sets.push(EmbeddingSet::new(name.clone(), *d, data, labels.clone()).expect("valid synthetic set"));
        offset += d;
    }
    let (library, layout) = assemble_library(spec.dataset.clone(), sets).expect("consistent members");
    SyntheticLibrary {
        library,
        layout,
        informative,
    }
}

/// A library whose members are `copies` identical replicas of `set`.
pub fn replicate(dataset: &str, set: &EmbeddingSet, copies: usize) -> (FeatureLibrary, ExtractorLayout) {
    let sets = (0..copies).map(|i| set.renamed(format!("{}#{i}", set.name()))).collect();
    assemble_library(dataset, sets).expect("identical members agree")
}
