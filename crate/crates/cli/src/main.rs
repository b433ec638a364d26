use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use camloc::direct::{estimate_direct_traced, CostKind};
use camloc::estimate::Method;
use camloc::fusion::FusionStrategy;
use camloc::harness::experiment::build_reference_index;
use camloc::harness::{
    generate_synthetic_scene, read_records_csv, run_experiment, split_queries, summarize, write_records_csv,
    write_summary_json, Dataset, ExperimentConfig, SceneSpec,
};
use camloc::pipelines::Localizer;
use camloc::retrieval::InvertedIndex;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "camloc", version, about = "Camera pose estimation against reference images and point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset.
    Generate(GenerateArgs),
    /// Build the retrieval index over the reference split of a dataset.
    Index(IndexArgs),
    /// Run an experiment and write per-query records and a summary.
    Run(RunArgs),
    /// Summarize an existing records file.
    Report(ReportArgs),
    /// Dump the direct search cost at every evaluated grid node.
    CostSurface(CostSurfaceArgs),
}

/// Flags that override values from the config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Method to run; repeat or comma-separate for several.
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    refs: Option<usize>,
    #[arg(long)]
    fusion: Option<FusionStrategy>,
    #[arg(long)]
    threshold: Option<f64>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if !self.method.is_empty() {
            cfg.methods = self.method.clone();
        }
        if let Some(v) = self.radius {
            cfg.radius = v;
        }
        if let Some(v) = self.refs {
            cfg.refs = v;
        }
        if let Some(v) = self.fusion {
            cfg.fusion = v;
        }
        if let Some(v) = self.threshold {
            cfg.threshold = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trajectory length in meters; one frame per meter.
    #[arg(long, default_value_t = SceneSpec::default().length)]
    length: f64,
    #[arg(long, default_value_t = SceneSpec::default().width)]
    width: usize,
    #[arg(long, default_value_t = SceneSpec::default().height)]
    height: usize,
    #[arg(long, default_value_t = SceneSpec::default().focal)]
    focal: f64,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output index file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Prebuilt retrieval index; implies large-uncertainty mode.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Output directory for records.csv, summary.json and config.toml.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ReportArgs {
    /// Records CSV written by `run`.
    #[arg(long)]
    records: PathBuf,
    #[arg(long, default_value_t = ExperimentConfig::default().threshold)]
    threshold: f64,
    /// Summary JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CostSurfaceArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Frame used as the query image.
    #[arg(long)]
    query: usize,
    /// Frame whose pose and cloud start the search.
    #[arg(long)]
    reference: usize,
    /// pm or mi.
    #[arg(long, default_value = "mi")]
    method: Method,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Index(a) => index(a),
        Command::Run(a) => run(a),
        Command::Report(a) => report(a),
        Command::CostSurface(a) => cost_surface(a),
    }
}

fn load(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let spec = SceneSpec { length: a.length, width: a.width, height: a.height, focal: a.focal, ..Default::default() };
    let scene = generate_synthetic_scene(&spec, a.seed);
    scene.dataset.write(&a.out)?;
    println!("wrote {} frames to {}", scene.dataset.len(), a.out.display());
    Ok(())
}

fn index(a: IndexArgs) -> Result<()> {
    let cfg = a.overrides.resolve()?;
    let dataset = load(&a.dataset)?;
    let split = split_queries(dataset.len(), cfg.query_fraction, cfg.seed);
    let localizer = Localizer::new(&dataset, cfg.pipeline());
    let index = build_reference_index(&localizer, &split.references, &cfg.vocabulary, cfg.seed)?;
    let mut w = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    index.write_to(&mut w)?;
    w.flush()?;
    println!("indexed {} references with {} words", index.len(), index.vocabulary().size());
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = a.overrides.resolve()?;
    let dataset = load(&a.dataset)?;
    let index = match &a.index {
        Some(path) => {
            cfg.large_uncertainty = true;
            let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            Some(InvertedIndex::read_from(BufReader::new(f))?)
        }
        None => None,
    };
    let out = run_experiment(&cfg, &dataset, index.as_ref())?;
    fs::create_dir_all(&a.out)?;
    write_records_csv(BufWriter::new(File::create(a.out.join("records.csv"))?), &out.records)?;
    write_summary_json(BufWriter::new(File::create(a.out.join("summary.json"))?), &out.summary)?;
    fs::write(a.out.join("config.toml"), cfg.to_toml())?;
    for m in &out.summary.methods {
        println!("{:<3} success {:5.1}% ({}/{})", m.method, m.success_rate, m.successes, m.queries);
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let f = File::open(&a.records).with_context(|| format!("opening {}", a.records.display()))?;
    let summary = summarize(&read_records_csv(BufReader::new(f))?, a.threshold)?;
    match &a.out {
        Some(path) => write_summary_json(BufWriter::new(File::create(path)?), &summary)?,
        None => write_summary_json(std::io::stdout().lock(), &summary)?,
    }
    Ok(())
}

fn cost_surface(a: CostSurfaceArgs) -> Result<()> {
    let kind = match a.method {
        Method::Pm => CostKind::Photometric,
        Method::Mi => CostKind::MutualInformation,
        other => bail!("cost surfaces exist for pm and mi only, not {other}"),
    };
    let cfg = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let dataset = load(&a.dataset)?;
    for f in [a.query, a.reference] {
        if f >= dataset.len() {
            bail!("frame {f} out of range (dataset has {} frames)", dataset.len());
        }
    }
    let query = &dataset.frames[a.query].image;
    let (est, trace) = estimate_direct_traced(kind, query, &dataset.frames[a.reference], &dataset.intrinsics, &cfg.grid);
    trace.write_csv(BufWriter::new(File::create(&a.out)?))?;
    println!("{} nodes, final cost {:.6} ({})", trace.entries.len(), est.final_cost, est.status.as_str());
    Ok(())
}
