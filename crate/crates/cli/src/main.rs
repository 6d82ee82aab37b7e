//! `fsb`: benchmark harness for few-shot heads on frozen feature libraries.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fsb_core::analysis::{
    correlation_csv, correlation_experiment, cross_dataset_heatmaps, CorrelationSetup, HeatmapSetup,
};
use fsb_core::benchmark::run_benchmark;
use fsb_core::classifier::TrainConfig;
use fsb_core::ensembles::{MemberSeeds, MethodSpec, SoftAverage, Variant};
use fsb_core::episodes::{sample_episode, EpisodeSpec};
use fsb_core::feature_store::{
    load_library, read_embedding_file, save_library, ExtractorLayout, FeatureLibrary, Manifest,
};
use fsb_core::reporting::{BenchmarkReport, Format};
use fsb_core::synthetic::{generate, ClassSignal, SyntheticSpec};
use fsb_core::tuning::{default_profile, grid_search, SearchGrid, SearchSetup, TunedProfile};

#[derive(Parser)]
#[command(
    name = "fsb",
    version,
    about = "Few-shot benchmark over a library of frozen feature extractors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a manifest and its embedding files, then print a summary.
    Validate { manifest: PathBuf },
    /// Dump sampled episodes as JSON lines.
    Sample(SampleArgs),
    /// Evaluate one method over a fixed set of episodes.
    Bench(BenchArgs),
    /// Render a CSV report as markdown.
    Report(ReportArgs),
    /// Feature-importance analyses.
    Analyze(AnalyzeArgs),
    /// Grid search on a validation library.
    Tune(TuneArgs),
    /// Write a synthetic library (manifest + embedding files).
    Synth(SynthArgs),
}

#[derive(Args)]
struct EpisodeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    ways: usize,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, default_value_t = 15)]
    queries: usize,
    #[arg(long, default_value_t = 600)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl EpisodeArgs {
    fn spec(&self) -> EpisodeSpec {
        EpisodeSpec::new(self.ways, self.shots)
            .with_queries(self.queries)
            .with_episodes(self.episodes)
            .with_seed(self.seed)
    }
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    episodes: EpisodeArgs,
    /// Output file; stdout when omitted.
    #[arg(long)]
    dump: Option<PathBuf>,
}

/// Explicit training settings; each one overrides the profile value.
#[derive(Args, Clone, Default)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    /// Hidden layer width, 0 for none.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Seed mixed with each episode seed to initialize heads.
    #[arg(long)]
    train_seed: Option<u64>,
}

impl TrainOverrides {
    fn complete(&self) -> Option<TrainConfig> {
        Some(TrainConfig::new(
            self.epochs?,
            self.hidden?,
            self.lr?,
            self.lambda?,
        ))
    }

    fn apply(&self, mut config: TrainConfig) -> TrainConfig {
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = self.hidden {
            config.hidden_size = v;
        }
        if let Some(v) = self.lr {
            config.learning_rate = v;
        }
        if let Some(v) = self.lambda {
            config.l2_lambda = v;
        }
        if let Some(v) = self.train_seed {
            config.seed = v;
        }
        config
    }
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    episodes: EpisodeArgs,
    /// full_library | hard | soft | single:<member>
    #[arg(long)]
    method: MethodSpec,
    /// Restrict ensembles or the full library to these members (comma separated).
    #[arg(long, value_delimiter = ',')]
    members: Vec<String>,
    /// Average logits instead of probabilities in the soft ensemble.
    #[arg(long)]
    soft_logits: bool,
    /// Give each ensemble member its own initialization seed.
    #[arg(long)]
    per_member_seeds: bool,
    /// Tuned profile JSON written by `fsb tune`.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOverrides,
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
    /// Report file; an existing report is extended.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Markdown,
    Grid,
}

#[derive(Args)]
struct ReportArgs {
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Markdown)]
    format: ReportFormat,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Analysis {
    Correlation,
    Jaccard,
    Shares,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(value_enum)]
    kind: Analysis,
    #[arg(long, num_args = 1.., required = true)]
    manifests: Vec<PathBuf>,
    #[arg(long, default_value_t = 40)]
    ways: usize,
    /// Tasks per dataset (trials for the correlation analysis).
    #[arg(long, default_value_t = 100)]
    tasks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rows per class held out of the full-data head (correlation).
    #[arg(long, default_value_t = 0)]
    reserve: usize,
    /// Training rows per class for jaccard/shares; all rows when omitted.
    #[arg(long)]
    rows_per_class: Option<usize>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    /// Penalty for jaccard/shares; the correlation analysis always uses 0.
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    validation: PathBuf,
    #[arg(long)]
    method: MethodSpec,
    #[arg(long, value_delimiter = ',', default_value = "5,20,40")]
    ways: Vec<usize>,
    #[arg(long, default_value_t = 15)]
    queries: usize,
    #[arg(long, default_value_t = 600)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset names reserved for testing; tuning on them is refused.
    #[arg(long, value_delimiter = ',')]
    test_datasets: Vec<String>,
    /// JSON search grid; the built-in grid when omitted.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 30)]
    rows_per_class: usize,
    /// Member dimensions (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "64,64,64")]
    dims: Vec<usize>,
    /// Fraction of features carrying class signal; 0 for pure noise.
    #[arg(long, default_value_t = 0.1)]
    informative: f64,
    #[arg(long, default_value_t = 3.0)]
    scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn open_library(manifest: &Path) -> Result<(FeatureLibrary, ExtractorLayout)> {
    load_library(manifest).with_context(|| format!("loading {}", manifest.display()))
}

fn validate(manifest: &Path) -> Result<()> {
    let parsed = Manifest::read(manifest)?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    for entry in &parsed.extractors {
        let file = base.join(&entry.file);
        read_embedding_file(&file).with_context(|| format!("checking {}", file.display()))?;
    }
    let (lib, layout) = open_library(manifest)?;
    println!("{}", lib.summary(&layout));
    println!("ok");
    Ok(())
}

fn sample(args: &SampleArgs) -> Result<()> {
    let (lib, _) = open_library(&args.episodes.manifest)?;
    let spec = args.episodes.spec();
    spec.check_library(&lib)?;
    let out: Box<dyn Write> = match &args.dump {
        Some(path) => Box::new(
            fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        ),
        None => Box::new(io::stdout().lock()),
    };
    let mut out = BufWriter::new(out);
    for i in 0..spec.episodes {
        let episode = sample_episode(&lib, &spec, i)?;
        serde_json::to_writer(&mut out, &episode)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Profile file, else the published settings for the method, else the
/// full-library settings (ensembles have no published entry of their own).
fn bench_config(args: &BenchArgs) -> Result<TrainConfig> {
    let ways = args.episodes.ways;
    let profile = match &args.profile {
        Some(path) => {
            TunedProfile::read(path).with_context(|| format!("reading {}", path.display()))?
        }
        None => {
            if let Some(config) = args.train.complete() {
                return Ok(args.train.apply(config));
            }
            let name = match args.method.variant {
                Variant::Single => args.method.members[0].as_str(),
                _ => "full_library",
            };
            default_profile(name).with_context(|| {
                format!("no published settings for {name:?}; pass --profile or all of --epochs --hidden --lr --lambda")
            })?
        }
    };
    let base = match profile.config_for(ways) {
        Ok(c) => c,
        Err(e) if args.profile.is_some() => return Err(e.into()),
        // published settings exist for 5, 20 and 40 ways only
        Err(_) => nearest_ways(&profile, ways),
    };
    Ok(args.train.apply(base))
}

fn nearest_ways(profile: &TunedProfile, ways: usize) -> TrainConfig {
    *profile
        .configs
        .iter()
        .min_by_key(|(w, _)| w.abs_diff(ways))
        .map(|(_, c)| c)
        .expect("published profiles are non-empty")
}

fn bench(args: &BenchArgs) -> Result<()> {
    let (lib, _) = open_library(&args.episodes.manifest)?;
    let mut method = args.method.clone();
    if !args.members.is_empty() {
        method = method.with_members(args.members.clone());
    }
    if args.soft_logits {
        method = method.with_soft_average(SoftAverage::Logits);
    }
    if args.per_member_seeds {
        method = method.with_member_seeds(MemberSeeds::PerMember);
    }
    let config = bench_config(args)?;
    let run = run_benchmark(&lib, &method, &args.episodes.spec(), &config, args.workers)?;
    let mut report = match &args.out {
        Some(path) if path.exists() => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            BenchmarkReport::from_csv(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        _ => BenchmarkReport::default(),
    };
    report.push(run.report_row());
    let single = BenchmarkReport {
        rows: vec![run.report_row()],
    };
    print!("{}", single.emit(Format::Markdown)?);
    if let Some(path) = &args.out {
        fs::write(path, report.to_csv()?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn report(args: &ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let report = BenchmarkReport::from_csv(&text)?;
    let rendered = match args.format {
        ReportFormat::Markdown => report.to_markdown()?,
        ReportFormat::Grid => report.to_markdown_grid()?,
    };
    print!("{rendered}");
    Ok(())
}

fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let libraries = args
        .manifests
        .iter()
        .map(|m| open_library(m))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let config = TrainConfig::new(args.epochs, 0, args.lr, args.lambda).with_seed(args.seed);
    let (file, body) = match args.kind {
        Analysis::Correlation => {
            let setup = CorrelationSetup {
                ways: args.ways,
                reserve_per_class: args.reserve,
                config,
            };
            let mut results = Vec::new();
            for (i, (lib, _)) in libraries.iter().enumerate() {
                let seed = fsb_core::rng::mix(args.seed, i as u64);
                let rs = (0..args.tasks as u64)
                    .map(|t| {
                        correlation_experiment(lib, &setup, fsb_core::rng::mix(seed, t))
                            .map(|o| o.r)
                    })
                    .collect::<fsb_core::Result<Vec<f64>>>()?;
                let mean = rs.iter().sum::<f64>() / rs.len().max(1) as f64;
                println!(
                    "{}: mean r = {mean:.3} over {} trials",
                    lib.dataset(),
                    rs.len()
                );
                results.push((lib.dataset().to_string(), rs));
            }
            ("correlation.csv", correlation_csv(&results))
        }
        Analysis::Jaccard | Analysis::Shares => {
            let setup = HeatmapSetup {
                ways: args.ways,
                tasks: args.tasks,
                rows_per_class: args.rows_per_class,
                config,
            };
            let pairs: Vec<(&FeatureLibrary, &ExtractorLayout)> =
                libraries.iter().map(|(l, y)| (l, y)).collect();
            let maps = cross_dataset_heatmaps(&pairs, &setup, args.seed)?;
            if args.kind == Analysis::Jaccard {
                ("jaccard.csv", maps.jaccard_csv())
            } else {
                ("shares.csv", maps.shares_csv())
            }
        }
    };
    let path = args.out.join(file);
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn tune(args: &TuneArgs) -> Result<()> {
    let (lib, _) = open_library(&args.validation)?;
    let grid = match &args.grid {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SearchGrid::default(),
    };
    if args.ways.is_empty() {
        bail!("--ways needs at least one value");
    }
    let mut configs = BTreeMap::new();
    for &ways in &args.ways {
        let setup = SearchSetup {
            method: &args.method,
            ways,
            queries: args.queries,
            episodes: args.episodes,
            seed: args.seed,
            workers: args.workers,
            test_datasets: &args.test_datasets,
        };
        let outcome = grid_search(&lib, &grid, &setup)?;
        let best = outcome.best;
        let score = outcome
            .scores
            .iter()
            .find(|(c, _)| *c == best)
            .map_or(f64::NAN, |(_, s)| *s);
        println!(
            "{ways}-way: epochs {} hidden {} lr {} lambda {} (validation accuracy {:.1}%)",
            best.epochs,
            best.hidden_size,
            best.learning_rate,
            best.l2_lambda,
            100.0 * score
        );
        configs.insert(ways, best);
    }
    let profile = TunedProfile {
        method: args.method.id(),
        configs,
    };
    profile.write(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let signal = if args.informative > 0.0 {
        ClassSignal::Informative {
            fraction: args.informative,
            scale: args.scale,
        }
    } else {
        ClassSignal::Noise
    };
    let s = generate(
        &SyntheticSpec::new(args.classes, args.rows_per_class, &args.dims)
            .named(args.dataset.clone())
            .with_signal(signal)
            .with_seed(args.seed),
    );
    let names: BTreeMap<u32, String> = (0..args.classes as u32)
        .map(|c| (c, format!("class{c:03}")))
        .collect();
    let manifest = save_library(&s.library, &names, &args.out)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Validate { manifest } => validate(&manifest),
        Command::Sample(args) => sample(&args),
        Command::Bench(args) => bench(&args),
        Command::Report(args) => report(&args),
        Command::Analyze(args) => analyze(&args),
        Command::Tune(args) => tune(&args),
        Command::Synth(args) => synth(&args),
    }
}
