//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! The data-dependent tier runs only when `FSB_INTEGRATION_MANIFEST` points at
//! a manifest with `resnet18` and `densenet161` members and
//! `FSB_INTEGRATION_DATASET` names the dataset (e.g. `Aircraft`).

use std::time::{Duration, Instant};

use fsb_core::analysis::{correlation_experiment, jaccard, pearson, CorrelationSetup, TopFeatureSet};
use fsb_core::benchmark::run_benchmark;
use fsb_core::classifier::{loss_and_grad, softmax, HeadModel, TrainConfig};
use fsb_core::ensembles::{run_method, MethodSpec};
use fsb_core::episodes::{sample_episode, summarize, EpisodeSpec};
use fsb_core::reporting::BenchmarkReport;
use fsb_core::rng::{mix, SplitMix64};
use fsb_core::synthetic::{generate, replicate, ClassSignal, SyntheticSpec};
use fsb_core::tuning::default_profile;
use ndarray::Array2;

/// Runs one criterion and prints its line; `None` from `f` means skipped.
fn run(name: &str, f: impl FnOnce() -> Option<(bool, String)>) -> bool {
    let start = Instant::now();
    let result = f();
    let secs = start.elapsed().as_secs_f64();
    match result {
        Some((pass, detail)) => {
            let status = if pass { "PASS" } else { "FAIL" };
            println!("{status} {name}: {detail} [{secs:.1}s]");
            pass
        }
        None => {
            println!("SKIP {name}: FSB_INTEGRATION_MANIFEST not set");
            true
        }
    }
}

fn uniform(rng: &mut SplitMix64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.next_f64()
}

fn gradient_check() -> (bool, String) {
    let start = Instant::now();
    let mut rng = SplitMix64::new(11);
    // Near the cube root of machine epsilon. At 1e-6 the rounding error of the
    // loss alone (~eps * |L| / h) exceeds 1e-5 relative on components ~1e-5.
    let h = 6e-6;
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    while instances < 50 {
        let input_dim = 1 + rng.below(16) as usize;
        let hidden = if rng.below(2) == 0 { 0 } else { 8 };
        let ways = 2 + rng.below(4) as usize;
        let rows = 1 + rng.below(8) as usize;
        let lambda = if rng.below(2) == 0 { 0.0 } else { 0.3 };
        let mut model = HeadModel::glorot(input_dim, hidden, ways, rng.next());
        if let Some(b1) = &mut model.b1 {
            b1.mapv_inplace(|_| uniform(&mut rng, -0.5, 0.5));
        }
        model.b2.mapv_inplace(|_| uniform(&mut rng, -0.5, 0.5));
        let x = Array2::from_shape_fn((rows, input_dim), |_| uniform(&mut rng, -2.0, 2.0));
        let labels: Vec<usize> = (0..rows).map(|_| rng.below(ways as u64) as usize).collect();

        // stay well clear of the ReLU kink so that +-h never crosses it
        if let (Some(w1), Some(b1)) = (&model.w1, &model.b1) {
            let pre = x.dot(&w1.t()) + b1;
            if pre.iter().any(|z| z.abs() < 1e-3) {
                continue;
            }
        }
        instances += 1;

        let (_, grads) = loss_and_grad(&model, x.view(), &labels, lambda).unwrap();
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        for (ti, g) in analytic.iter().enumerate() {
            for (k, &a) in g.iter().enumerate() {
                let mut plus = model.clone();
                plus.tensors_mut()[ti][k] += h;
                let mut minus = model.clone();
                minus.tensors_mut()[ti][k] -= h;
                let lp = loss_and_grad(&plus, x.view(), &labels, lambda).unwrap().0;
                let lm = loss_and_grad(&minus, x.view(), &labels, lambda).unwrap().0;
                let numeric = (lp - lm) / (2.0 * h);
                let scale = a.abs().max(numeric.abs());
                let rel = if scale < 1e-8 { (a - numeric).abs() } else { (a - numeric).abs() / scale };
                worst = worst.max(rel);
            }
        }
    }
    let elapsed = start.elapsed();
    (
        worst < 1e-5 && elapsed < Duration::from_secs(10),
        format!("50 instances, max relative error {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn softmax_contract() -> (bool, String) {
    let mut rng = SplitMix64::new(12);
    let mut worst: f64 = 0.0;
    let mut all_finite = true;
    for i in 0..10_000 {
        let len = 1 + rng.below(64) as usize;
        let magnitude = if i % 2 == 0 { 1e3 } else { 10.0 };
        let logits: Vec<f64> = (0..len).map(|_| uniform(&mut rng, -magnitude, magnitude)).collect();
        let p = softmax(&logits).unwrap();
        all_finite &= p.iter().all(|v| v.is_finite() && *v >= 0.0);
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    (
        all_finite && worst <= 1e-12,
        format!("10000 vectors, max |sum - 1| = {worst:.2e}, finite = {all_finite}"),
    )
}

fn synthetic_separability() -> (bool, String) {
    let s = generate(
        &SyntheticSpec::new(20, 20, &[64, 64, 64])
            .with_signal(ClassSignal::Orthogonal { separation: 10.0 })
            .with_seed(21),
    );
    let spec = EpisodeSpec::new(5, 5).with_queries(15).with_episodes(100).with_seed(22);
    let config = TrainConfig::new(200, 64, 1e-2, 0.1).with_seed(23);
    let start = Instant::now();
    let run = run_benchmark(&s.library, &MethodSpec::full_library(), &spec, &config, 1).unwrap();
    let elapsed = start.elapsed();
    (
        run.summary.mean >= 0.99 && elapsed < Duration::from_secs(60),
        format!(
            "mean accuracy {:.4} +- {:.4}, single-threaded {:.1}s",
            run.summary.mean,
            run.summary.ci95,
            elapsed.as_secs_f64()
        ),
    )
}

fn ensemble_idempotence() -> (bool, String) {
    let base = generate(
        &SyntheticSpec::new(10, 12, &[24])
            .with_signal(ClassSignal::Informative { fraction: 0.5, scale: 1.0 })
            .with_seed(31),
    );
    let set = &base.library.members()[0];
    let spec = EpisodeSpec::new(5, 2).with_queries(8).with_episodes(20).with_seed(32);
    let config = TrainConfig::new(40, 16, 1e-2, 0.1).with_seed(33);
    let mut mismatches = 0;
    let mut queries = 0;
    for k in [2, 5, 9] {
        let (lib, _) = replicate("replicas", set, k);
        let single = MethodSpec::single(lib.members()[0].name());
        for i in 0..spec.episodes {
            let episode = sample_episode(&lib, &spec, i).unwrap();
            let reference = run_method(&lib, &episode, &single, &config).unwrap().predicted;
            for method in [MethodSpec::hard_ensemble(), MethodSpec::soft_ensemble()] {
                let predicted = run_method(&lib, &episode, &method, &config).unwrap().predicted;
                queries += predicted.len();
                mismatches += predicted.iter().zip(&reference).filter(|(a, b)| a != b).count();
            }
        }
    }
    (
        mismatches == 0,
        format!("K in {{2,5,9}}, 20 episodes, {mismatches} of {queries} query labels differ"),
    )
}

fn random_subset(rng: &mut SplitMix64, universe: usize, size: usize) -> TopFeatureSet {
    let mut all: Vec<usize> = (0..universe).collect();
    rng.partial_shuffle(&mut all, size);
    let mut indices = all[..size].to_vec();
    indices.sort_unstable();
    TopFeatureSet { universe, indices }
}

fn random_jaccard() -> (bool, String) {
    let mut rng = SplitMix64::new(41);
    let pairs = 10_000;
    let mut total = 0.0;
    for _ in 0..pairs {
        let a = random_subset(&mut rng, 1000, 200);
        let b = random_subset(&mut rng, 1000, 200);
        total += jaccard(&a, &b).unwrap();
    }
    let mean = total / pairs as f64;
    ((mean - 0.111).abs() <= 0.005, format!("mean Jaccard {mean:.4} (baseline 0.111)"))
}

fn raw_sum_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn pearson_oracle() -> (bool, String) {
    let mut rng = SplitMix64::new(51);
    let mut worst: f64 = 0.0;
    let mut self_exact = true;
    for _ in 0..1000 {
        let len = 2 + rng.below(200) as usize;
        let x: Vec<f64> = (0..len).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        let coupling = uniform(&mut rng, -1.0, 1.0);
        let y: Vec<f64> = x.iter().map(|v| coupling * v + uniform(&mut rng, -1.0, 1.0)).collect();
        worst = worst.max((pearson(&x, &y).unwrap() - raw_sum_pearson(&x, &y)).abs());
        self_exact &= pearson(&x, &x).unwrap() == 1.0;
    }
    (
        worst <= 1e-12 && self_exact,
        format!("1000 pairs, max deviation {worst:.2e}, self-correlation exactly 1: {self_exact}"),
    )
}

fn ci_formula() -> (bool, String) {
    let s = summarize(&[0.0, 1.0]).unwrap();
    let expected = 1.96 * (1.0 / 2f64.sqrt()) / 2f64.sqrt();
    let flat = summarize(&[0.7; 25]).unwrap();
    (
        (s.ci95 - expected).abs() <= 1e-12 && flat.ci95 == 0.0,
        format!("ci95([0,1]) = {:.15}, expected {expected:.15}; zero variance -> {}", s.ci95, flat.ci95),
    )
}

fn determinism() -> (bool, String) {
    let s = generate(
        &SyntheticSpec::new(12, 10, &[16, 8, 12])
            .with_signal(ClassSignal::Informative { fraction: 0.3, scale: 1.5 })
            .with_seed(61),
    );
    let spec = EpisodeSpec::new(5, 1).with_queries(5).with_episodes(600).with_seed(62);
    let config = TrainConfig::new(20, 8, 1e-2, 0.1).with_seed(63);
    let csv = |workers: usize| {
        let mut report = BenchmarkReport::default();
        for method in [MethodSpec::full_library(), MethodSpec::soft_ensemble()] {
            let run = run_benchmark(&s.library, &method, &spec, &config, workers).unwrap();
            report.push(run.report_row());
        }
        report.to_csv().unwrap()
    };
    let one = csv(1);
    let eight = csv(8);
    (
        one.as_bytes() == eight.as_bytes(),
        format!("600 episodes x 2 methods, {} CSV bytes, identical = {}", one.len(), one == eight),
    )
}

fn mean_r(signal: ClassSignal, trials: u64) -> f64 {
    let setup = CorrelationSetup {
        ways: 40,
        reserve_per_class: 0,
        config: TrainConfig::new(100, 0, 1e-3, 0.0),
    };
    let mut total = 0.0;
    for trial in 0..trials {
        let s = generate(
            &SyntheticSpec::new(40, 20, &[100, 100, 100])
                .with_signal(signal)
                .with_seed(mix(71, trial)),
        );
        total += correlation_experiment(&s.library, &setup, mix(72, trial)).unwrap().r;
    }
    total / trials as f64
}

fn correlation_sanity() -> (bool, String) {
    let signal = mean_r(ClassSignal::Informative { fraction: 0.1, scale: 3.0 }, 20);
    let noise = mean_r(ClassSignal::Noise, 20);
    (
        signal >= 0.5 && noise.abs() <= 0.2,
        format!("20 trials: mean r = {signal:.3} with signal in 10% of features (need >= 0.5), {noise:.3} on noise (need |r| <= 0.2)"),
    )
}

// 5-way 5-shot cells: (dataset, ResNet18, DenseNet161, full library)
const PUBLISHED_5_5: [(&str, f64, f64, f64); 8] = [
    ("Aircraft", 61.2, 66.0, 68.9),
    ("FC100", 72.1, 73.7, 79.1),
    ("Omniglot", 95.4, 96.6, 97.5),
    ("Texture", 79.3, 83.4, 85.3),
    ("Traffic", 83.2, 83.9, 85.8),
    ("Fungi", 77.7, 78.4, 81.2),
    ("QuickDraw", 81.7, 81.3, 84.2),
    ("VGGFlower", 95.3, 96.8, 97.4),
];

fn integration() -> Option<(bool, String)> {
    let manifest = std::env::var("FSB_INTEGRATION_MANIFEST").ok()?;
    let dataset = std::env::var("FSB_INTEGRATION_DATASET").unwrap_or_default();
    let key: String = dataset.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase();
    let Some(&(_, resnet, densenet, full)) = PUBLISHED_5_5
        .iter()
        .find(|(name, ..)| name.to_lowercase() == key || name.to_lowercase().starts_with(&key) && !key.is_empty())
    else {
        return Some((false, format!("unknown FSB_INTEGRATION_DATASET {dataset:?}")));
    };
    let (lib, _) = match fsb_core::feature_store::load_library(&manifest) {
        Ok(l) => l,
        Err(e) => return Some((false, format!("cannot load {manifest}: {e}"))),
    };
    let spec = EpisodeSpec::new(5, 5).with_queries(15).with_episodes(600).with_seed(0);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut pass = true;
    let mut parts = Vec::new();
    let mut means = Vec::new();
    for (method, name, published) in [
        (MethodSpec::single("resnet18"), "resnet18", resnet),
        (MethodSpec::single("densenet161"), "densenet161", densenet),
        (MethodSpec::full_library(), "full_library", full),
    ] {
        let config = default_profile(name).and_then(|p| p.config_for(5));
        let result = config
            .map_err(fsb_core::Error::from)
            .and_then(|c| run_benchmark(&lib, &method, &spec, &c, workers));
        match result {
            Ok(run) => {
                let mean = 100.0 * run.summary.mean;
                pass &= (mean - published).abs() <= 3.0;
                means.push(mean);
                parts.push(format!("{name} {mean:.1} (published {published})"));
            }
            Err(e) => return Some((false, format!("{name}: {e}"))),
        }
    }
    pass &= means[2] > means[0] && means[2] > means[1];
    Some((pass, parts.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> (bool, String)); 9] = [
        ("gradient check", gradient_check),
        ("softmax contract", softmax_contract),
        ("synthetic separability", synthetic_separability),
        ("ensemble idempotence", ensemble_idempotence),
        ("random-subset jaccard", random_jaccard),
        ("pearson oracle", pearson_oracle),
        ("ci formula", ci_formula),
        ("determinism under parallelism", determinism),
        ("correlation experiment sanity", correlation_sanity),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !run(name, || Some(f())) {
            failed += 1;
        }
    }
    if !run("real-embedding 5-way 5-shot", integration) {
        failed += 1;
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
