//! Experiment matrices on the synthetic benchmark.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{self, Hierarchy};
use crate::error::{Error, Result};
use crate::io::container::write_atomic;
use crate::io::patches::{canonical_order, extract_patches, PatchRule};
use crate::maps::{LabelMap, PredictionMap};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::net::{build_network, Example, InjectionLayer, MaterialNet, NetworkConfig};
use crate::stats::{granularity_study, CooccurrenceTable, LevelEntropy};
use crate::synth::{self, argmax_first, bayes_oracle, ContextMode, Scene, Splits, Texture, WorldSpec};
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig, TrainReport};

/// Ablation rows in the order they are reported.
pub const ABLATION_ROWS: [(&str, ContextMode); 4] = [
    ("None", ContextMode::None),
    ("Only Places", ContextMode::Place),
    ("Only Objects", ContextMode::Object),
    ("Places + Objects", ContextMode::Both),
];

/// Granularity rows, coarse to fine.
pub const GRANULARITY_ROWS: [(&str, &str); 4] = [
    ("High Level", "high"),
    ("Mid Level", "mid"),
    ("Low Level", "low"),
    ("All Places", "leaf"),
];

/// Minimum ablation gap, in accuracy points.
pub const ABLATION_GAP: f64 = 5.0;
/// Maximum distance of the full-context model below its Bayes oracle.
pub const ORACLE_DISTANCE: f64 = 10.0;
/// Minimum advantage of injecting at `upsampling` over `pool1`.
pub const INJECTION_MARGIN: f64 = 2.0;
/// Maximum accuracy spread over the resolution factors.
pub const RESOLUTION_SPREAD: f64 = 2.0;
/// Confidence above which a wrong no-context prediction counts as confident.
pub const CONFIDENT: f64 = 0.9;
/// The prior product must fix fewer than this fraction of confident errors.
pub const PRIOR_FIX_MAX: f64 = 0.5;
/// The context model must fix at least this fraction of them.
pub const CONTEXT_FIX_MIN: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Ablation,
    Injection,
    Resolution,
    Granularity,
    MultiplyPrior,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::Ablation,
        ExperimentKind::Injection,
        ExperimentKind::Resolution,
        ExperimentKind::Granularity,
        ExperimentKind::MultiplyPrior,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Ablation => "ablation",
            ExperimentKind::Injection => "injection",
            ExperimentKind::Resolution => "resolution",
            ExperimentKind::Granularity => "granularity",
            ExperimentKind::MultiplyPrior => "multiply-prior",
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown experiment `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub world: WorldSpec,
    pub scenes: usize,
    pub image_size: usize,
    pub train_fraction: f64,
    pub patch: PatchRule,
    /// Random subset of the training patches to keep; 0 keeps all.
    pub max_patches: usize,
    /// Base network; context channels and injection layer are set per cell.
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Independently seeded runs per cell.
    pub replicates: usize,
    /// Feed the softened context maps instead of exact one-hots.
    pub noisy_context: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let world = synth::default_world();
        BenchmarkConfig {
            scenes: 1000,
            image_size: 32,
            train_fraction: 0.5,
            patch: PatchRule {
                size: 16,
                stride: 4,
                strict: false,
                mixed: true,
            },
            max_patches: 2000,
            network: NetworkConfig {
                num_materials: world.num_materials(),
                stage_widths: vec![8, 4, 8, 8],
                dilation_rates: vec![1, 1],
                patch_size: 16,
                head_width: 16,
                ..NetworkConfig::default()
            },
            train: TrainConfig {
                epochs: 15,
                batch_size: 8,
                learning_rate: 0.05,
                ..TrainConfig::default()
            },
            world,
            replicates: 3,
            noisy_context: true,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        if self.replicates == 0 {
            return Err(Error::invalid("replicates must be >= 1"));
        }
        if self.network.num_materials != self.world.num_materials() {
            return Err(Error::invalid(format!(
                "network predicts {} materials, world has {}",
                self.network.num_materials,
                self.world.num_materials()
            )));
        }
        if self.patch.size != self.network.patch_size {
            return Err(Error::invalid(format!(
                "patch size {} differs from network patch_size {}",
                self.patch.size, self.network.patch_size
            )));
        }
        self.network.validate()
    }
}

/// SplitMix64 of the inputs; per-job seeds from the experiment seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generated scenes split into train/val/test.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: WorldSpec,
    pub splits: Splits<Scene>,
}

pub fn prepare_dataset(spec: &WorldSpec, scenes: usize, image_size: usize, train_fraction: f64, seed: u64) -> Result<Dataset> {
    let all = synth::generate(spec, scenes, image_size)?;
    Ok(Dataset {
        spec: spec.clone(),
        splits: synth::make_splits(all, train_fraction, seed)?,
    })
}

/// One configuration of the network and its context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub mode: ContextMode,
    pub injection: InjectionLayer,
    /// Effective resolution factor applied to the object context.
    pub resolution: usize,
}

impl Cell {
    pub fn new(label: impl Into<String>, mode: ContextMode) -> Self {
        Cell {
            label: label.into(),
            mode,
            injection: InjectionLayer::Upsampling,
            resolution: 1,
        }
    }

    pub fn context_channels(&self, spec: &WorldSpec) -> usize {
        let mut n = 0;
        if self.mode.uses_place() {
            n += spec.num_places();
        }
        if self.mode.uses_object() {
            n += spec.num_objects();
        }
        n
    }

    pub fn network_config(&self, base: &NetworkConfig, spec: &WorldSpec) -> NetworkConfig {
        NetworkConfig {
            context_channels: self.context_channels(spec),
            injection_layer: self.injection,
            ..base.clone()
        }
    }
}

/// Context tensor fed to the network for a scene, with the object map
/// degraded to the cell's effective resolution.
pub fn scene_context(spec: &WorldSpec, scene: &Scene, cell: &Cell, noisy: bool) -> Result<Option<Tensor>> {
    let mut sources = scene.context(spec, cell.mode, noisy)?;
    if cell.resolution != 1 {
        for s in &mut sources {
            if let context::ContextValues::PerPixel(map) = s.values() {
                let degraded = context::degrade_resolution(map, cell.resolution)?;
                *s = context::ContextSource::per_pixel(s.categories().to_vec(), degraded)?;
            }
        }
    }
    context::assemble(&sources, scene.height(), scene.width())
}

/// Training examples cut from the training scenes.
pub fn training_examples(bench: &BenchmarkConfig, data: &Dataset, cell: &Cell, seed: u64) -> Result<Vec<Example>> {
    let per_scene: Vec<Vec<crate::io::Patch>> = data
        .splits
        .train
        .par_iter()
        .map(|scene| {
            let ctx = scene_context(&data.spec, scene, cell, bench.noisy_context)?;
            extract_patches(&scene.image, ctx.as_ref(), &scene.labels, bench.patch, scene.index)
        })
        .collect::<Result<_>>()?;
    let mut patches: Vec<_> = per_scene.into_iter().flatten().collect();
    canonical_order(&mut patches);
    if bench.max_patches > 0 && patches.len() > bench.max_patches {
        patches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        patches.truncate(bench.max_patches);
        canonical_order(&mut patches);
    }
    if patches.is_empty() {
        return Err(Error::invalid("no training patches could be extracted"));
    }
    Ok(patches
        .into_iter()
        .map(|p| Example {
            image: p.image,
            context: p.context,
            labels: p.labels,
        })
        .collect())
}

pub fn train_cell(bench: &BenchmarkConfig, data: &Dataset, cell: &Cell, seed: u64) -> Result<(MaterialNet, TrainReport)> {
    let examples = training_examples(bench, data, cell, derive_seed(seed, 1, 0))?;
    let mut net = build_network(&cell.network_config(&bench.network, &data.spec), derive_seed(seed, 2, 0))?;
    let config = TrainConfig {
        seed: derive_seed(seed, 3, 0),
        ..bench.train.clone()
    };
    let report = train(&mut net, &examples, &config)?;
    Ok((net, report))
}

/// Predictions on every scene of a split.
pub fn predict_scenes(
    net: &MaterialNet,
    spec: &WorldSpec,
    scenes: &[Scene],
    cell: &Cell,
    noisy: bool,
) -> Result<Vec<PredictionMap>> {
    scenes
        .par_iter()
        .map(|s| {
            let ctx = scene_context(spec, s, cell, noisy)?;
            net.predict_tensor(&s.image, ctx.as_ref())
        })
        .collect()
}

pub fn confusion_of(predictions: &[PredictionMap], scenes: &[Scene], classes: usize) -> Result<ConfusionMatrix> {
    let mut c = ConfusionMatrix::new(classes);
    for (p, s) in predictions.iter().zip(scenes) {
        c.add(p.argmax(), &s.labels)?;
    }
    Ok(c)
}

/// Material × place pixel counts over labeled pixels.
pub fn place_cooccurrence(spec: &WorldSpec, scenes: &[Scene]) -> Result<CooccurrenceTable> {
    let mut table = CooccurrenceTable::new(spec.materials.clone(), spec.places.clone());
    for s in scenes {
        for &l in s.labels.raw() {
            if l != LabelMap::UNLABELED {
                table.add_index(l as usize, s.place, 1)?;
            }
        }
    }
    Ok(table)
}

/// Material × object pixel counts over labeled pixels.
pub fn object_cooccurrence(spec: &WorldSpec, scenes: &[Scene]) -> Result<CooccurrenceTable> {
    let mut table = CooccurrenceTable::new(spec.materials.clone(), spec.objects.clone());
    for s in scenes {
        for (&l, &o) in s.labels.raw().iter().zip(&s.objects) {
            if l != LabelMap::UNLABELED {
                table.add_index(l as usize, o as usize, 1)?;
            }
        }
    }
    Ok(table)
}

/// Scores a predictor that outputs the uniform distribution everywhere,
/// breaking the argmax tie toward the most frequent training class.
pub fn uniform_baseline(train_labels: &[LabelMap], test_labels: &[LabelMap], classes: usize) -> Result<MetricsReport> {
    let mut counts = vec![0u64; classes];
    for l in train_labels {
        for &v in l.raw() {
            if v != LabelMap::UNLABELED {
                *counts
                    .get_mut(v as usize)
                    .ok_or_else(|| Error::invalid(format!("label {v} out of range")))? += 1;
            }
        }
    }
    let majority = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut c = ConfusionMatrix::new(classes);
    for l in test_labels {
        c.add(&vec![majority; l.raw().len()], l)?;
    }
    MetricsReport::from_confusion(
        c,
        serde_json::json!({ "predictor": "uniform", "tie_break": majority }),
        0,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// Internal consistency; a failure makes the command exit nonzero.
    Invariant,
    /// Expected qualitative outcome; reported but not fatal.
    Trend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub kind: CheckKind,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, kind: CheckKind, passed: bool, detail: String) -> Self {
        Check {
            name: name.to_string(),
            kind,
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub label: String,
    pub replicate: usize,
    pub seed: u64,
    pub cell: Cell,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub label: String,
    /// Mean per-pixel accuracy over replicates, in percent.
    pub accuracy: f64,
    pub accuracy_min: f64,
    pub accuracy_max: f64,
    pub mean_class_accuracy: f64,
    pub replicates: usize,
    /// Extra per-row figures, e.g. entropies.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seed: u64,
    pub rows: Vec<RowSummary>,
    pub oracle: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub runs: Vec<CellRun>,
    #[serde(default)]
    pub details: serde_json::Value,
    pub config: BenchmarkConfig,
}

impl ExperimentReport {
    pub fn row(&self, label: &str) -> Option<&RowSummary> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn failed_invariants(&self) -> Vec<&Check> {
        self.checks
            .iter()
            .filter(|c| c.kind == CheckKind::Invariant && !c.passed)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn summary_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {} (seed {})\n", self.experiment, self.seed);
        let extra_keys: Vec<&String> = self.rows.first().map(|r| r.extra.keys().collect()).unwrap_or_default();
        let _ = write!(s, "| Row | Accuracy (%) | Range | Mean class acc. (%) |");
        for k in &extra_keys {
            let _ = write!(s, " {k} |");
        }
        let _ = write!(s, "\n|---|---|---|---|");
        for _ in &extra_keys {
            let _ = write!(s, "---|");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(
                s,
                "| {} | {:.2} | {:.2}–{:.2} | {:.2} |",
                r.label, r.accuracy, r.accuracy_min, r.accuracy_max, r.mean_class_accuracy
            );
            for k in &extra_keys {
                let _ = write!(s, " {:.4} |", r.extra.get(*k).copied().unwrap_or(f64::NAN));
            }
            s.push('\n');
        }
        if !self.oracle.is_empty() {
            let _ = writeln!(s, "\nBayes oracle:\n");
            for (k, v) in &self.oracle {
                let _ = writeln!(s, "- {k}: {:.2}%", v * 100.0);
            }
        }
        let _ = writeln!(s, "\nChecks:\n");
        for c in &self.checks {
            let mark = if c.passed { "pass" } else { "FAIL" };
            let kind = match c.kind {
                CheckKind::Invariant => "invariant",
                CheckKind::Trend => "trend",
            };
            let _ = writeln!(s, "- [{mark}] {} ({kind}): {}", c.name, c.detail);
        }
        s
    }

    /// Writes `summary.json`, `summary.md` and one JSON file per run.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("cells")).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("summary.json"), self.to_json()?.as_bytes())?;
        write_atomic(&dir.join("summary.md"), self.summary_markdown().as_bytes())?;
        for run in &self.runs {
            let name = format!("{}_r{}.json", slug(&run.label), run.replicate);
            write_atomic(&dir.join("cells").join(name), serde_json::to_string_pretty(&run.metrics)?.as_bytes())?;
        }
        Ok(())
    }
}

fn slug(label: &str) -> String {
    let mut s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    while s.contains("__") {
        s = s.replace("__", "_");
    }
    s.trim_matches('_').to_string()
}

fn summarize(label: &str, runs: &[&CellRun]) -> RowSummary {
    let accs: Vec<f64> = runs.iter().map(|r| r.metrics.pixel_accuracy * 100.0).collect();
    let mcas: Vec<f64> = runs.iter().map(|r| r.metrics.mean_class_accuracy * 100.0).collect();
    RowSummary {
        label: label.to_string(),
        accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
        accuracy_min: accs.iter().cloned().fold(f64::INFINITY, f64::min),
        accuracy_max: accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        mean_class_accuracy: mcas.iter().sum::<f64>() / mcas.len() as f64,
        replicates: runs.len(),
        extra: BTreeMap::new(),
    }
}

fn oracle_table(spec: &WorldSpec) -> BTreeMap<String, f64> {
    ContextMode::ALL
        .iter()
        .map(|&m| (m.name().to_string(), bayes_oracle(spec, m)))
        .collect()
}

fn oracle_check(oracle: &BTreeMap<String, f64>) -> Check {
    let (n, p, o, b) = (oracle["none"], oracle["place"], oracle["object"], oracle["both"]);
    Check::new(
        "oracle dominance",
        CheckKind::Invariant,
        b >= p.max(o) && p.min(o) >= n,
        format!("none {n:.4}, place {p:.4}, object {o:.4}, both {b:.4}"),
    )
}

fn consistency_check(runs: &[CellRun]) -> Check {
    let bad: Vec<String> = runs
        .iter()
        .filter(|r| r.metrics.check_consistency().is_err())
        .map(|r| format!("{} r{}", r.label, r.replicate))
        .collect();
    Check::new(
        "metrics consistent with confusion matrices",
        CheckKind::Invariant,
        bad.is_empty(),
        if bad.is_empty() { "all runs".into() } else { bad.join(", ") },
    )
}

struct Job {
    cell_index: usize,
    replicate: usize,
    seed: u64,
}

/// Trains every cell `replicates` times in parallel and scores each run on
/// the test split. Runs come back in (cell, replicate) order.
fn run_matrix(bench: &BenchmarkConfig, data: &Dataset, cells: &[Cell], seed: u64) -> Result<Vec<(CellRun, MaterialNet)>> {
    let jobs: Vec<Job> = (0..cells.len())
        .flat_map(|c| {
            (0..bench.replicates).map(move |r| Job {
                cell_index: c,
                replicate: r,
                seed: derive_seed(seed, c as u64, r as u64),
            })
        })
        .collect();
    jobs.par_iter()
        .map(|job| {
            let cell = &cells[job.cell_index];
            let (net, report) = train_cell(bench, data, cell, job.seed)?;
            let preds = predict_scenes(&net, &data.spec, &data.splits.test, cell, bench.noisy_context)?;
            let confusion = confusion_of(&preds, &data.splits.test, data.spec.num_materials())?;
            let metrics = MetricsReport::from_confusion(confusion, serde_json::to_value(cell)?, job.seed)?;
            Ok((
                CellRun {
                    label: cell.label.clone(),
                    replicate: job.replicate,
                    seed: job.seed,
                    cell: cell.clone(),
                    initial_loss: report.initial_loss,
                    final_loss: report.final_loss(),
                    metrics,
                },
                net,
            ))
        })
        .collect()
}

fn rows_for(cells: &[Cell], runs: &[CellRun]) -> Vec<RowSummary> {
    cells
        .iter()
        .map(|c| {
            let rs: Vec<&CellRun> = runs.iter().filter(|r| r.label == c.label).collect();
            summarize(&c.label, &rs)
        })
        .collect()
}

fn report(kind: ExperimentKind, bench: &BenchmarkConfig, seed: u64, rows: Vec<RowSummary>, runs: Vec<CellRun>) -> ExperimentReport {
    let oracle = oracle_table(&bench.world);
    let checks = vec![oracle_check(&oracle), consistency_check(&runs)];
    ExperimentReport {
        experiment: kind.name().to_string(),
        seed,
        rows,
        oracle,
        checks,
        runs,
        details: serde_json::Value::Null,
        config: bench.clone(),
    }
}

pub fn run_ablation(bench: &BenchmarkConfig, seed: u64) -> Result<ExperimentReport> {
    bench.validate()?;
    let data = prepare_dataset(&bench.world, bench.scenes, bench.image_size, bench.train_fraction, seed)?;
    let cells: Vec<Cell> = ABLATION_ROWS.iter().map(|(l, m)| Cell::new(*l, *m)).collect();
    let runs: Vec<CellRun> = run_matrix(bench, &data, &cells, seed)?.into_iter().map(|(r, _)| r).collect();
    let rows = rows_for(&cells, &runs);
    let mut rep = report(ExperimentKind::Ablation, bench, seed, rows, runs);
    let acc = |l: &str| rep.row(l).map(|r| r.accuracy).unwrap_or(f64::NAN);
    let (none, place, object, both) = (acc("None"), acc("Only Places"), acc("Only Objects"), acc("Places + Objects"));
    let oracle_both = rep.oracle["both"] * 100.0;
    let checks = vec![
        Check::new(
            "both > objects > none, both > places",
            CheckKind::Trend,
            both - object >= ABLATION_GAP && object - none >= ABLATION_GAP && both - place >= ABLATION_GAP,
            format!(
                "gaps: both−objects {:.2}, objects−none {:.2}, both−places {:.2} (need ≥ {ABLATION_GAP})",
                both - object,
                object - none,
                both - place
            ),
        ),
        Check::new(
            "both near its oracle",
            CheckKind::Trend,
            oracle_both - both <= ORACLE_DISTANCE,
            format!("oracle {oracle_both:.2}, model {both:.2} (max distance {ORACLE_DISTANCE})"),
        ),
    ];
    rep.checks.extend(checks);
    Ok(rep)
}

pub fn run_injection(bench: &BenchmarkConfig, seed: u64) -> Result<ExperimentReport> {
    bench.validate()?;
    let data = prepare_dataset(&bench.world, bench.scenes, bench.image_size, bench.train_fraction, seed)?;
    let cells: Vec<Cell> = InjectionLayer::ALL
        .iter()
        .map(|&l| Cell {
            injection: l,
            ..Cell::new(l.name(), ContextMode::Both)
        })
        .collect();
    let runs: Vec<CellRun> = run_matrix(bench, &data, &cells, seed)?.into_iter().map(|(r, _)| r).collect();
    let rows = rows_for(&cells, &runs);
    let mut rep = report(ExperimentKind::Injection, bench, seed, rows, runs);
    let up = rep.row("upsampling").map(|r| r.accuracy).unwrap_or(f64::NAN);
    let p1 = rep.row("pool1").map(|r| r.accuracy).unwrap_or(f64::NAN);
    rep.checks.push(Check::new(
        "upsampling beats pool1",
        CheckKind::Trend,
        up >= p1 + INJECTION_MARGIN,
        format!("upsampling {up:.2}, pool1 {p1:.2} (need margin {INJECTION_MARGIN})"),
    ));
    Ok(rep)
}

pub fn run_resolution(bench: &BenchmarkConfig, seed: u64) -> Result<ExperimentReport> {
    bench.validate()?;
    let data = prepare_dataset(&bench.world, bench.scenes, bench.image_size, bench.train_fraction, seed)?;
    let cells: Vec<Cell> = context::RESOLUTION_FACTORS
        .iter()
        .map(|&d| Cell {
            resolution: d,
            ..Cell::new(format!("d={d}"), ContextMode::Both)
        })
        .collect();
    let runs: Vec<CellRun> = run_matrix(bench, &data, &cells, seed)?.into_iter().map(|(r, _)| r).collect();
    let rows = rows_for(&cells, &runs);
    let mut rep = report(ExperimentKind::Resolution, bench, seed, rows, runs);
    let accs: Vec<f64> = rep.rows.iter().map(|r| r.accuracy).collect();
    let spread = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - accs.iter().cloned().fold(f64::INFINITY, f64::min);
    rep.checks.push(Check::new(
        "resolution spread",
        CheckKind::Trend,
        spread <= RESOLUTION_SPREAD,
        format!("spread {spread:.2} points over d ∈ {:?} (max {RESOLUTION_SPREAD})", context::RESOLUTION_FACTORS),
    ));
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorComparison {
    /// Held-out pixels the no-context model gets wrong with confidence
    /// at least [`CONFIDENT`].
    pub confident_errors: u64,
    pub fixed_by_prior: u64,
    pub fixed_by_context: u64,
    pub prior_fix_rate: f64,
    pub context_fix_rate: f64,
    pub fallback_pixels: u64,
}

/// Compares prior multiplication with trained context injection on the
/// pixels a no-context model confidently gets wrong.
pub fn compare_prior(
    spec: &WorldSpec,
    scenes: &[Scene],
    plain: &[PredictionMap],
    with_context: &[PredictionMap],
) -> Result<PriorComparison> {
    let mut out = PriorComparison {
        confident_errors: 0,
        fixed_by_prior: 0,
        fixed_by_context: 0,
        prior_fix_rate: 0.0,
        context_fix_rate: 0.0,
        fallback_pixels: 0,
    };
    let nm = spec.num_materials();
    for ((scene, p), c) in scenes.iter().zip(plain).zip(with_context) {
        let (h, w) = (scene.height(), scene.width());
        let plane = h * w;
        let mut prior = vec![0.0; nm * plane];
        for (px, &o) in scene.objects.iter().enumerate() {
            for (m, v) in spec.context_prior(ContextMode::Both, scene.place, o as usize).into_iter().enumerate() {
                prior[m * plane + px] = v;
            }
        }
        let product = context::multiply_prior_map(p, &Tensor::new(vec![nm, h, w], prior)?)?;
        out.fallback_pixels += product.fallback_pixels as u64;
        for (px, &label) in scene.labels.raw().iter().enumerate() {
            if label == LabelMap::UNLABELED {
                continue;
            }
            let label = label as usize;
            let guess = p.argmax()[px];
            if guess == label || p.pixel(px)[guess] < CONFIDENT {
                continue;
            }
            out.confident_errors += 1;
            if product.map.argmax()[px] == label {
                out.fixed_by_prior += 1;
            }
            if c.argmax()[px] == label {
                out.fixed_by_context += 1;
            }
        }
    }
    if out.confident_errors > 0 {
        out.prior_fix_rate = out.fixed_by_prior as f64 / out.confident_errors as f64;
        out.context_fix_rate = out.fixed_by_context as f64 / out.confident_errors as f64;
    }
    Ok(out)
}

pub fn run_multiply_prior(bench: &BenchmarkConfig, seed: u64) -> Result<ExperimentReport> {
    bench.validate()?;
    let data = prepare_dataset(&bench.world, bench.scenes, bench.image_size, bench.train_fraction, seed)?;
    let cells = vec![Cell::new("None", ContextMode::None), Cell::new("Places + Objects", ContextMode::Both)];
    let trained = run_matrix(bench, &data, &cells, seed)?;
    let test = &data.splits.test;
    let mut comparisons = Vec::new();
    for r in 0..bench.replicates {
        let plain = &trained[r].1;
        let ctx = &trained[bench.replicates + r].1;
        let p = predict_scenes(plain, &data.spec, test, &cells[0], bench.noisy_context)?;
        let c = predict_scenes(ctx, &data.spec, test, &cells[1], bench.noisy_context)?;
        comparisons.push(compare_prior(&data.spec, test, &p, &c)?);
    }
    let total = |f: fn(&PriorComparison) -> u64| comparisons.iter().map(f).sum::<u64>();
    let errors = total(|c| c.confident_errors);
    let by_prior = total(|c| c.fixed_by_prior);
    let by_context = total(|c| c.fixed_by_context);
    let rate = |n: u64| if errors > 0 { n as f64 / errors as f64 } else { 0.0 };
    let runs: Vec<CellRun> = trained.into_iter().map(|(r, _)| r).collect();
    let rows = rows_for(&cells, &runs);
    let mut rep = report(ExperimentKind::MultiplyPrior, bench, seed, rows, runs);
    rep.checks.push(Check::new(
        "prior multiplication is weak on confident errors",
        CheckKind::Trend,
        errors > 0 && rate(by_prior) < PRIOR_FIX_MAX,
        format!("{by_prior}/{errors} fixed ({:.1}%, must stay below {:.0}%)", rate(by_prior) * 100.0, PRIOR_FIX_MAX * 100.0),
    ));
    rep.checks.push(Check::new(
        "context injection fixes confident errors",
        CheckKind::Trend,
        errors > 0 && rate(by_context) >= CONTEXT_FIX_MIN,
        format!("{by_context}/{errors} fixed ({:.1}%, need ≥ {:.0}%)", rate(by_context) * 100.0, CONTEXT_FIX_MIN * 100.0),
    ));
    rep.details = serde_json::json!({
        "replicates": comparisons,
        "confident_errors": errors,
        "fixed_by_prior": by_prior,
        "fixed_by_context": by_context,
        "prior_fix_rate": rate(by_prior),
        "context_fix_rate": rate(by_context),
    });
    Ok(rep)
}

/// A 16-place world whose material distributions are drawn hierarchically
/// over a 2/4/8/16 place tree, with every material texture shared by a
/// pair so the place is the only disambiguating cue.
pub fn granularity_world(seed: u64) -> Result<(WorldSpec, Hierarchy)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nm = 8;
    let places: Vec<String> = (0..16).map(|i| format!("place{i:02}")).collect();
    let draw = |alpha: &[f64], rng: &mut ChaCha8Rng| -> Result<Vec<f64>> {
        let d = Dirichlet::new(alpha).map_err(|e| Error::invalid(e.to_string()))?;
        let mut p: Vec<f64> = d.sample(rng);
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        Ok(p)
    };
    let concentration = 4.0;
    let scaled = |p: &[f64]| -> Vec<f64> { p.iter().map(|v| (v * concentration * nm as f64).max(1e-3)).collect() };
    let high: Vec<Vec<f64>> = (0..2).map(|_| draw(&[1.0; 8], &mut rng)).collect::<Result<_>>()?;
    let mid: Vec<Vec<f64>> = (0..4).map(|i| draw(&scaled(&high[i / 2]), &mut rng)).collect::<Result<_>>()?;
    let low: Vec<Vec<f64>> = (0..8).map(|i| draw(&scaled(&mid[i / 2]), &mut rng)).collect::<Result<_>>()?;
    let leaf: Vec<Vec<f64>> = (0..16).map(|i| draw(&scaled(&low[i / 2]), &mut rng)).collect::<Result<_>>()?;
    let leaf: Vec<Vec<f64>> = leaf.into_iter().map(|p| exact_simplex(p)).collect();

    let corners = [[0.2, 0.2, 0.2], [0.8, 0.2, 0.2], [0.2, 0.8, 0.2], [0.2, 0.2, 0.8]];
    let textures = (0..nm)
        .map(|m| Texture {
            base: corners[m / 2],
            noise: 0.1,
            stripe_frequency: 0.0,
            stripe_amplitude: 0.0,
        })
        .collect();
    let spec = WorldSpec {
        seed,
        places: places.clone(),
        objects: vec!["surface".into()],
        materials: (0..nm).map(|m| format!("material{m}")).collect(),
        place_prior: vec![1.0 / 16.0; 16],
        object_given_place: vec![vec![1.0]; 16],
        material_given_object: None,
        material_given_object_place: Some(leaf.into_iter().map(|p| vec![p]).collect()),
        textures,
        ambiguous_pairs: (0..nm / 2).map(|i| [2 * i, 2 * i + 1]).collect(),
        ambiguity_rate: 1.0,
        object_cell: 16,
        part_cell: 8,
        context_temperature: 2.0,
        context_sharpness: 4.0,
        context_noise: 0.5,
    };
    spec.validate()?;
    let ancestors = (0..16)
        .map(|i| vec![format!("high{}", i / 8), format!("mid{}", i / 4), format!("low{}", i / 2)])
        .collect();
    let hierarchy = Hierarchy::new(
        ["high", "mid", "low", "leaf"].map(String::from).to_vec(),
        places,
        ancestors,
    )?;
    Ok((spec, hierarchy))
}

/// Adjusts the largest entry so the row sums to exactly 1.0 in f64.
fn exact_simplex(mut p: Vec<f64>) -> Vec<f64> {
    let i = argmax_first(&p);
    let rest: f64 = p.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v).sum();
    p[i] = 1.0 - rest;
    p
}

/// Entropy of materials given the place at each hierarchy level, and the
/// accuracy of the count-based MAP classifier that knows the texture class
/// and the place node at that level.
pub fn run_granularity(bench: &BenchmarkConfig, seed: u64) -> Result<ExperimentReport> {
    bench.validate()?;
    let (spec, hierarchy) = granularity_world(bench.world.seed)?;
    let data = prepare_dataset(&spec, bench.scenes, bench.image_size, bench.train_fraction, seed)?;
    let classes = spec.texture_classes();
    let nm = spec.num_materials();
    let ntex = classes.iter().max().map_or(0, |m| m + 1);

    let mut table = CooccurrenceTable::new(spec.materials.clone(), spec.places.clone());
    // tallies[leaf][texture][material]
    let mut tallies = vec![vec![vec![0u64; nm]; ntex]; spec.num_places()];
    for s in &data.splits.train {
        for &l in s.labels.raw() {
            if l == LabelMap::UNLABELED {
                continue;
            }
            table.add_index(l as usize, s.place, 1)?;
            tallies[s.place][classes[l as usize]][l as usize] += 1;
        }
    }
    let levels = granularity_study(&table, &hierarchy, None)?;

    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for (i, (label, level)) in GRANULARITY_ROWS.iter().enumerate() {
        let (names, group) = hierarchy.grouping(level)?;
        let mut merged = vec![vec![vec![0u64; nm]; ntex]; names.len()];
        for (leaf, t) in tallies.iter().enumerate() {
            for (tex, row) in t.iter().enumerate() {
                for (m, n) in row.iter().enumerate() {
                    merged[group[leaf]][tex][m] += n;
                }
            }
        }
        let decide = |leaf: usize, material: usize| -> usize {
            let counts = &merged[group[leaf]][classes[material]];
            let mut best = 0;
            for (m, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = m;
                }
            }
            best
        };
        let mut confusion = ConfusionMatrix::new(nm);
        for s in &data.splits.test {
            let predicted: Vec<usize> = s
                .labels
                .raw()
                .iter()
                .map(|&l| if l == LabelMap::UNLABELED { 0 } else { decide(s.place, l as usize) })
                .collect();
            confusion.add(&predicted, &s.labels)?;
        }
        let cell_seed = derive_seed(seed, i as u64, 0);
        let metrics = MetricsReport::from_confusion(confusion, serde_json::json!({ "level": level }), cell_seed)?;
        let run = CellRun {
            label: label.to_string(),
            replicate: 0,
            seed: cell_seed,
            cell: Cell::new(*label, ContextMode::Place),
            initial_loss: 0.0,
            final_loss: 0.0,
            metrics,
        };
        let mut row = summarize(label, &[&run]);
        let lv: &LevelEntropy = &levels[i];
        row.extra.insert("entropy".into(), lv.expected_entropy);
        row.extra.insert("unweighted_entropy".into(), lv.unweighted_entropy);
        rows.push(row);
        runs.push(run);
    }

    let entropies: Vec<f64> = levels.iter().map(|l| l.expected_entropy).collect();
    let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let oracle: BTreeMap<String, f64> = ContextMode::ALL
        .iter()
        .map(|&m| (m.name().to_string(), bayes_oracle(&spec, m)))
        .collect();
    let mut checks = vec![oracle_check(&oracle), consistency_check(&runs)];
    checks.push(Check::new(
        "entropy non-increasing coarse to fine",
        CheckKind::Invariant,
        entropies.windows(2).all(|w| w[1] <= w[0]),
        format!("{entropies:.4?}"),
    ));
    checks.push(Check::new(
        "accuracy non-decreasing coarse to fine",
        CheckKind::Trend,
        accs.windows(2).all(|w| w[1] >= w[0]),
        format!("{accs:.2?}"),
    ));
    Ok(ExperimentReport {
        experiment: ExperimentKind::Granularity.name().to_string(),
        seed,
        rows,
        oracle,
        checks,
        runs,
        details: serde_json::json!({
            "levels": levels,
            "uniform_entropy": (nm as f64).ln(),
            "hierarchy": serde_json::from_str::<serde_json::Value>(&hierarchy.to_json()?)?,
        }),
        config: bench.clone(),
    })
}

pub fn run_experiment(kind: ExperimentKind, bench: &BenchmarkConfig, seed: u64) -> Result<ExperimentReport> {
    match kind {
        ExperimentKind::Ablation => run_ablation(bench, seed),
        ExperimentKind::Injection => run_injection(bench, seed),
        ExperimentKind::Resolution => run_resolution(bench, seed),
        ExperimentKind::Granularity => run_granularity(bench, seed),
        ExperimentKind::MultiplyPrior => run_multiply_prior(bench, seed),
    }
}
