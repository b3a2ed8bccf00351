use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ctxmat::context::ContextSource;
use ctxmat::experiment::{
    self, derive_seed, object_cooccurrence, place_cooccurrence, BenchmarkConfig, Cell, Dataset, ExperimentKind,
};
use ctxmat::gradcheck::{network_suite, op_suite, GradReport};
use ctxmat::io::container::{write_atomic, TensorContainer};
use ctxmat::io::dataset::{read_dataset, write_dataset};
use ctxmat::io::ppm::{decode_ppm, write_prediction_ppm};
use ctxmat::metrics::MetricsReport;
use ctxmat::net::{InjectionLayer, MaterialNet};
use ctxmat::stats::granularity_study;
use ctxmat::synth::{self, ContextMode};
use ctxmat::context::Hierarchy;
use ctxmat::{Error, Tensor};

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  1  other error
  2  usage error (bad flags or arguments)
  3  malformed or invalid config
  4  missing, unreadable or corrupt input file
  5  unknown injection layer
  6  invariant check failed
  7  training diverged";

#[derive(Parser)]
#[command(name = "ctxmat", version, about = "Context-aware material segmentation on a synthetic benchmark", after_help = EXIT_HELP)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Benchmark config (JSON); missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes and write them as a dataset directory.
    SynthGen {
        /// Number of scenes (defaults to the config).
        #[arg(long)]
        count: Option<usize>,
        /// Image side in pixels (defaults to the config).
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train one model and save its checkpoint.
    Train {
        #[command(flatten)]
        cell: CellArgs,
        /// Dataset directory from synth-gen; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint (or the uniform baseline) on the test split.
    Eval {
        #[command(flatten)]
        cell: CellArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, required_unless_present = "baseline")]
        model: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Write a color-coded prediction map with its legend.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Image as a binary PPM or a container with an `image` entry.
        #[arg(long, required_unless_present = "scene")]
        image: Option<PathBuf>,
        /// Context container; repeat to stack sources in order.
        #[arg(long)]
        context: Vec<PathBuf>,
        /// Predict a scene of a dataset directory instead of `--image`.
        #[arg(long, requires = "data")]
        scene: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        cell: CellArgs,
    },
    /// Co-occurrence table and conditional entropies of materials given context.
    Stats {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Read the table from CSV instead of counting a dataset.
        #[arg(long, conflicts_with = "data")]
        table: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = StatsContext::Place)]
        by: StatsContext,
        /// Additive smoothing for the conditional distributions.
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        /// Hierarchy JSON over the context names; adds a per-level entropy study.
        #[arg(long)]
        hierarchy: Option<PathBuf>,
    },
    /// Finite-difference check of every op and of a micro network.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-4)]
        network_tolerance: f64,
    },
    /// Run every cell of an experiment and write its reports.
    Experiment {
        #[arg(value_parser = parse_kind)]
        kind: ExperimentKind,
    },
}

#[derive(Args)]
struct CellArgs {
    #[arg(long, default_value = "both", value_parser = parse_mode)]
    mode: ContextMode,
    /// One of pool1, pool2, conv3_3, conv4_3, upsampling.
    #[arg(long, default_value = "upsampling")]
    injection: String,
    /// Effective resolution factor of the object context.
    #[arg(long, default_value_t = 1)]
    resolution: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum StatsContext {
    Place,
    Object,
}

fn parse_mode(s: &str) -> Result<ContextMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<ExperimentKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::UnknownLayer { .. } => 5,
            Error::Invariant(_) => 6,
            Error::Diverged { .. } => 7,
            Error::Io { .. } | Error::Format { .. } => 4,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn config_error(e: impl std::fmt::Display) -> Failure {
    Failure::new(3, format!("config: {e}"))
}

fn load_config(path: Option<&Path>) -> CliResult<BenchmarkConfig> {
    let config = match path {
        None => BenchmarkConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::new(4, format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(config_error)?
        }
    };
    config.validate().map_err(config_error)?;
    Ok(config)
}

impl CellArgs {
    fn cell(&self) -> CliResult<Cell> {
        let injection: InjectionLayer = self.injection.parse()?;
        Ok(Cell {
            label: self.mode.name().to_string(),
            mode: self.mode,
            injection,
            resolution: self.resolution,
        })
    }
}

fn dataset(bench: &BenchmarkConfig, data: Option<&Path>, seed: u64) -> CliResult<Dataset> {
    match data {
        Some(dir) => {
            let (manifest, splits) = read_dataset(dir)?;
            Ok(Dataset {
                spec: manifest.world,
                splits,
            })
        }
        None => Ok(experiment::prepare_dataset(
            &bench.world,
            bench.scenes,
            bench.image_size,
            bench.train_fraction,
            seed,
        )?),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::new(4, format!("{}: {e}", dir.display())))
}

fn read_image(path: &Path) -> CliResult<Tensor> {
    let bytes = fs::read(path).map_err(|e| Failure::new(4, format!("{}: {e}", path.display())))?;
    if bytes.starts_with(b"P6") {
        let (w, h, rgb) = decode_ppm(&bytes).map_err(|e| Failure::new(4, format!("{}: {e}", path.display())))?;
        let plane = w * h;
        let mut data = vec![0.0; 3 * plane];
        for (px, chunk) in rgb.chunks_exact(3).enumerate() {
            for (c, &v) in chunk.iter().enumerate() {
                data[c * plane + px] = v as f64 / 255.0;
            }
        }
        return Ok(Tensor::new(vec![3, h, w], data)?);
    }
    let c = TensorContainer::from_bytes(&bytes)?;
    c.get("image")
        .cloned()
        .ok_or_else(|| Failure::new(4, format!("{}: no `image` entry", path.display())))
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    cell: &'a Cell,
    seed: u64,
    initial_loss: f64,
    epoch_losses: &'a [f64],
    config: &'a BenchmarkConfig,
}

#[derive(Serialize)]
struct StatsOutput {
    report: ctxmat::stats::ConditionalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    granularity: Option<Vec<ctxmat::stats::LevelEntropy>>,
}

#[derive(Serialize)]
struct GradcheckOutput {
    epsilon: f64,
    passed: bool,
    reports: Vec<GradReport>,
}

fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(Failure::new(2, "--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::new(1, e.to_string()))?;
    }
    let bench = load_config(g.config.as_deref())?;
    match &cli.command {
        Command::SynthGen { count, size } => {
            let mut spec = bench.world.clone();
            spec.seed = g.seed;
            let size = size.unwrap_or(bench.image_size);
            let scenes = synth::generate(&spec, count.unwrap_or(bench.scenes), size)?;
            let splits = synth::make_splits(scenes, bench.train_fraction, g.seed)?;
            let m = write_dataset(&g.out, &spec, &splits, size, g.seed)?;
            println!("wrote {} scenes to {}", m.scenes.len(), g.out.display());
        }
        Command::Train { cell, data } => {
            let cell = cell.cell()?;
            let data = dataset(&bench, data.as_deref(), g.seed)?;
            let (net, report) = experiment::train_cell(&bench, &data, &cell, derive_seed(g.seed, 0, 0))?;
            ensure_dir(&g.out)?;
            net.save(&g.out.join("model.ctxf"))?;
            write_json(
                &g.out.join("train.json"),
                &TrainOutput {
                    cell: &cell,
                    seed: g.seed,
                    initial_loss: report.initial_loss,
                    epoch_losses: &report.epoch_losses,
                    config: &bench,
                },
            )?;
            println!(
                "loss {:.4} -> {:.4}; checkpoint {}",
                report.initial_loss,
                report.final_loss(),
                g.out.join("model.ctxf").display()
            );
        }
        Command::Eval {
            cell,
            data,
            model,
            baseline,
        } => {
            let cell = cell.cell()?;
            let data = dataset(&bench, data.as_deref(), g.seed)?;
            let classes = data.spec.num_materials();
            let test_labels: Vec<_> = data.splits.test.iter().map(|s| s.labels.clone()).collect();
            let report = match (baseline, model) {
                (Some(Baseline::Uniform), _) => {
                    let train: Vec<_> = data.splits.train.iter().map(|s| s.labels.clone()).collect();
                    let mut r = experiment::uniform_baseline(&train, &test_labels, classes)?;
                    r.seed = g.seed;
                    r
                }
                (None, Some(path)) => {
                    let net = MaterialNet::load(path)?;
                    let preds = experiment::predict_scenes(&net, &data.spec, &data.splits.test, &cell, bench.noisy_context)?;
                    let confusion = experiment::confusion_of(&preds, &data.splits.test, classes)?;
                    let config = serde_json::json!({ "model": path, "cell": cell, "network": net.config() });
                    MetricsReport::from_confusion(confusion, config, g.seed)?
                }
                (None, None) => return Err(Failure::new(2, "eval needs --model or --baseline")),
            };
            report.check_consistency()?;
            ensure_dir(&g.out)?;
            write_json(&g.out.join("metrics.json"), &report)?;
            println!(
                "accuracy {:.2}%  mean class accuracy {:.2}%",
                report.pixel_accuracy * 100.0,
                report.mean_class_accuracy * 100.0
            );
        }
        Command::Predict {
            model,
            image,
            context,
            scene,
            data,
            cell,
        } => {
            let net = MaterialNet::load(model)?;
            let (pred, names) = if let Some(index) = scene {
                let cell = cell.cell()?;
                let data = dataset(&bench, data.as_deref(), g.seed)?;
                let all = data.splits.train.iter().chain(&data.splits.val).chain(&data.splits.test);
                let s = all
                    .clone()
                    .find(|s| s.index == *index)
                    .ok_or_else(|| Failure::new(4, format!("scene {index} is not in the dataset")))?;
                let ctx = experiment::scene_context(&data.spec, s, &cell, bench.noisy_context)?;
                (net.predict_tensor(&s.image, ctx.as_ref())?, data.spec.materials.clone())
            } else {
                let image = read_image(image.as_deref().expect("clap requires --image"))?;
                let sources: Vec<ContextSource> = context
                    .iter()
                    .map(|p| ctxmat::io::read_context(p))
                    .collect::<Result<_, _>>()?;
                let names = (0..net.config().num_materials).map(|i| format!("material{i}")).collect();
                (net.predict(&image, &sources)?, names)
            };
            ensure_dir(&g.out)?;
            let ppm = g.out.join("prediction.ppm");
            write_prediction_ppm(&pred, &names, &ppm)?;
            let mut probs = TensorContainer::new();
            probs.push("probs", pred.probs().clone());
            probs.categories = Some(names);
            probs.write(&g.out.join("prediction.ctxf"))?;
            println!("wrote {}", ppm.display());
        }
        Command::Stats {
            data,
            table,
            by,
            alpha,
            hierarchy,
        } => {
            let table = match table {
                Some(p) => ctxmat::stats::CooccurrenceTable::load_csv(p)?,
                None => {
                    let data = dataset(&bench, data.as_deref(), g.seed)?;
                    match by {
                        StatsContext::Place => place_cooccurrence(&data.spec, &data.splits.train)?,
                        StatsContext::Object => object_cooccurrence(&data.spec, &data.splits.train)?,
                    }
                }
            };
            let granularity = match hierarchy {
                Some(p) => Some(granularity_study(&table, &Hierarchy::load(p)?, None)?),
                None => None,
            };
            let report = table.report(*alpha)?;
            ensure_dir(&g.out)?;
            table.save_csv(&g.out.join("cooccurrence.csv"))?;
            println!(
                "H(M|C) = {:.4}  H(M) = {:.4}  uniform = {:.4}",
                report.expected_entropy, report.marginal_entropy, report.uniform_entropy
            );
            write_json(&g.out.join("stats.json"), &StatsOutput { report, granularity })?;
        }
        Command::Gradcheck {
            epsilon,
            tolerance,
            network_tolerance,
        } => {
            let mut reports = op_suite(g.seed, *epsilon, *tolerance)?;
            for layer in InjectionLayer::ALL {
                reports.extend(network_suite(g.seed, layer, *epsilon, *network_tolerance)?);
            }
            let passed = reports.iter().all(|r| r.passed);
            for r in &reports {
                println!(
                    "{} {:<40} {:.3e} (tol {:.0e})",
                    if r.passed { "ok  " } else { "FAIL" },
                    r.op,
                    r.max_rel_error,
                    r.tolerance
                );
            }
            ensure_dir(&g.out)?;
            write_json(
                &g.out.join("gradcheck.json"),
                &GradcheckOutput {
                    epsilon: *epsilon,
                    passed,
                    reports,
                },
            )?;
            if !passed {
                return Err(Failure::new(6, "gradient check failed"));
            }
        }
        Command::Experiment { kind } => {
            let report = experiment::run_experiment(*kind, &bench, g.seed)?;
            report.write(&g.out)?;
            print!("{}", report.summary_markdown());
            let failed = report.failed_invariants();
            if !failed.is_empty() {
                let names: Vec<&str> = failed.iter().map(|c| c.name.as_str()).collect();
                return Err(Failure::new(6, format!("invariant failed: {}", names.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
