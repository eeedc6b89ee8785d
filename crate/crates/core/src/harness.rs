//! Experiment plumbing: declarative configs, per-seed JSONL trajectory logs,
//! cross-seed summaries, ablation grids, report files and the fine-tuning
//! dataset exporter.
//!
//! Output layout of a run:
//!
//! ```text
//! <output_dir>/<task>__<label>/seed_<seed>.jsonl
//! ```
//!
//! The first line of every log is a header carrying the full config; every
//! further line is one generation.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use crate::archive::ArchiveBuffer;
use crate::codec::{Bin, DiscretizationSpec};
use crate::error::{Error, Result};
use crate::llm::{build_backend, BackendConfig, CompletionBackend, EchoBestOracle};
use crate::prompt::{parse_proposal, parse_prompt, render_prompt, DimBlock, ParsedPrompt, PromptConfig};
use crate::search::{EvalBudget, Phase, SearchBounds};
use crate::strategies::{
    stream, EvoLlm, EvoLlmConfig, HillClimb, HillClimbConfig, QueryOutcome, RandomSearch, Representation, Snes,
    SnesConfig, Strategy, TellReport, STREAM_PROMPT,
};
use crate::tasks::{Problem, TaskSpec};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Evollm,
    RandomSearch,
    HillClimb,
    Snes,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Evollm => "evollm",
            Self::RandomSearch => "random_search",
            Self::HillClimb => "hill_climb",
            Self::Snes => "snes",
        }
    }
}

/// The model-driven strategy's settings. Population size comes from the
/// budget and the temperature range from the backend section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvoLlmSection {
    pub prompt: PromptConfig,
    pub codec: DiscretizationSpec,
    pub sigma: f64,
    pub warmup_generations: usize,
    pub block_size: Option<usize>,
    pub representation: Representation,
}

impl Default for EvoLlmSection {
    fn default() -> Self {
        let d = EvoLlmConfig::default();
        Self {
            prompt: d.prompt,
            codec: d.codec,
            sigma: d.sigma,
            warmup_generations: d.warmup_generations,
            block_size: d.block_size,
            representation: d.representation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub evollm: EvoLlmSection,
    pub hill_climb: HillClimbConfig,
    pub snes: SnesConfig,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Evollm,
            evollm: EvoLlmSection::default(),
            hill_climb: HillClimbConfig::default(),
            snes: SnesConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run label; defaults to the strategy name.
    pub name: String,
    pub task: TaskSpec,
    pub strategy: StrategyConfig,
    pub budget: EvalBudget,
    pub seeds: Vec<u64>,
    pub backend: BackendConfig,
    pub output_dir: PathBuf,
    /// Run seeds on a thread pool; each seed still writes its own file.
    pub parallel_seeds: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            task: TaskSpec::default(),
            strategy: StrategyConfig::default(),
            budget: EvalBudget::default(),
            seeds: vec![0, 1, 2, 3, 4],
            backend: BackendConfig::default(),
            output_dir: PathBuf::from("runs"),
            parallel_seeds: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn label(&self) -> String {
        if self.name.is_empty() {
            self.strategy.kind.name().to_string()
        } else {
            self.name.clone()
        }
    }

    /// Directory holding this run's per-seed logs.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(sanitize(&format!("{}__{}", self.task.label(), self.label())))
    }

    pub fn log_path(&self, seed: u64) -> PathBuf {
        self.run_dir().join(format!("seed_{seed}.jsonl"))
    }

    /// Checks everything that can be checked without running: names resolve,
    /// numbers are in range, the strategy can be built.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.budget.validate()?;
        self.backend.validate()?;
        let problem = self.task.build()?;
        let probe: Arc<dyn CompletionBackend> = Arc::new(EchoBestOracle::new(self.strategy.evollm.codec.resolution()));
        build_strategy(self, problem.bounds().clone(), probe, self.seeds[0]).map(drop)
    }
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._=-+".contains(c) { c } else { '_' })
        .collect()
}

pub fn build_strategy(
    config: &ExperimentConfig,
    bounds: SearchBounds,
    backend: Arc<dyn CompletionBackend>,
    seed: u64,
) -> Result<Box<dyn Strategy>> {
    let n = config.budget.population_size;
    let s = &config.strategy;
    Ok(match s.kind {
        StrategyKind::Evollm => {
            let e = &s.evollm;
            let cfg = EvoLlmConfig {
                prompt: e.prompt.clone(),
                codec: e.codec,
                sigma: e.sigma,
                warmup_generations: e.warmup_generations,
                block_size: e.block_size,
                population_size: n,
                representation: e.representation,
                temperature_range: config.backend.temperature_range,
            };
            Box::new(EvoLlm::new(bounds, cfg, backend, seed)?)
        }
        StrategyKind::RandomSearch => Box::new(RandomSearch::new(bounds, n, seed)?),
        StrategyKind::HillClimb => Box::new(HillClimb::new(bounds, &s.hill_climb, n, seed)?),
        StrategyKind::Snes => Box::new(Snes::new(bounds, s.snes.clone(), n, seed)?),
    })
}

/// Splits `a.b.c=value` into path and raw value.
pub fn parse_assignment(text: &str) -> Result<(String, String)> {
    match text.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!("expected path=value, got `{text}`"))),
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies dot-path overrides such as `task.dims=5` or
/// `strategy.evollm.prompt.context_generations=3`. Values are read as TOML
/// and fall back to bare strings. Unknown paths are rejected.
pub fn apply_overrides(config: &ExperimentConfig, sets: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut root = toml::Value::try_from(config).map_err(|e| Error::Config(e.to_string()))?;
    for (path, raw) in sets {
        let parts: Vec<&str> = path.split('.').collect();
        let (leaf, parents) = parts.split_last().expect("split yields at least one part");
        let mut node = &mut root;
        for p in parents {
            let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("`{path}`: `{p}` is not a section")))?;
            node = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("`{path}` is not inside a section")))?;
        table.insert(leaf.to_string(), parse_value(raw));
        let checked: std::result::Result<ExperimentConfig, _> = root.clone().try_into();
        checked.map_err(|e| Error::Config(format!("`{path}={raw}`: {e}")))?;
    }
    let config: ExperimentConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// One ablation axis: a dot path and the values it takes.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub path: String,
    pub values: Vec<String>,
}

impl Axis {
    /// Parses `path=v1,v2,...`.
    pub fn parse(text: &str) -> Result<Self> {
        let (path, values) = parse_assignment(text)?;
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("axis `{path}` has no values")));
        }
        Ok(Self { path, values })
    }
}

/// Cartesian product of the axes over `base`, first axis varying slowest.
/// Each config is labelled `<base label>@<leaf>=<value>+...`.
pub fn ablation_grid(base: &ExperimentConfig, axes: &[Axis]) -> Result<Vec<ExperimentConfig>> {
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                axis.values.iter().map(move |v| {
                    let mut next = c.clone();
                    next.push((axis.path.clone(), v.clone()));
                    next
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .map(|sets| {
            let mut config = apply_overrides(base, &sets)?;
            if !sets.is_empty() {
                let tag: Vec<String> = sets
                    .iter()
                    .map(|(p, v)| format!("{}={}", p.rsplit('.').next().unwrap_or(p), v))
                    .collect();
                config.name = format!("{}@{}", base.label(), tag.join("+"));
            }
            Ok(config)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub version: String,
    pub seed: u64,
    pub task: String,
    pub strategy: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub block: (usize, usize),
    pub prompt_sha256: String,
    pub temperature: f64,
    pub outcome: QueryOutcome,
    pub latency_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub phase: Phase,
    pub population: Vec<Vec<f64>>,
    pub population_bins: Vec<Vec<Bin>>,
    pub fitness: Vec<f64>,
    pub best_fitness: f64,
    pub best_solution: Vec<f64>,
    /// Mean after this generation's tell, i.e. the centre of the next ask.
    pub next_mean: Vec<f64>,
    pub clipped: bool,
    pub queries: Vec<QueryRecord>,
    pub fallback_rate: Option<f64>,
    pub latency_ms: Option<f64>,
}

impl GenerationRecord {
    /// The fields that describe the search itself, for comparing two
    /// strategies that should follow the same path.
    pub fn trajectory_json(&self) -> String {
        serde_json::json!({
            "generation": self.generation,
            "population": self.population,
            "fitness": self.fitness,
            "best_fitness": self.best_fitness,
            "best_solution": self.best_solution,
            "next_mean": self.next_mean,
        })
        .to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogLine {
    Header(RunHeader),
    Generation(GenerationRecord),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn query_records(report: &TellReport) -> Vec<QueryRecord> {
    report
        .queries
        .iter()
        .map(|q| QueryRecord {
            block: (q.block.start, q.block.end),
            prompt_sha256: sha256_hex(q.prompt.as_bytes()),
            temperature: q.temperature,
            outcome: q.outcome.clone(),
            latency_ms: q.latency.map(|d| d.as_secs_f64() * 1e3),
        })
        .collect()
}

/// Runs ask -> evaluate -> tell for `generations` steps and hands each
/// record to `sink`.
pub fn drive(
    problem: &dyn Problem,
    strategy: &mut dyn Strategy,
    generations: usize,
    codec: &DiscretizationSpec,
    mut sink: impl FnMut(&GenerationRecord) -> Result<()>,
) -> Result<()> {
    for g in 0..generations {
        let phase = strategy.phase();
        let population = strategy.ask();
        let clipped = strategy.last_ask_clipped();
        let fitness = problem.evaluate_batch(&population, g)?;
        let report = strategy.tell(&population, &fitness)?;
        let (best_solution, best_fitness) = strategy.best().map(|(x, f)| (x.to_vec(), f)).expect("told at least once");
        let queries = query_records(&report);
        let latencies: Vec<f64> = queries.iter().filter_map(|q| q.latency_ms).collect();
        let record = GenerationRecord {
            generation: g,
            phase,
            population_bins: population.iter().map(|x| codec.encode_vector(x)).collect::<Result<_>>()?,
            population,
            fitness,
            best_fitness,
            best_solution,
            next_mean: strategy.mean().to_vec(),
            clipped,
            queries,
            fallback_rate: strategy.fallback_rate(),
            latency_ms: (!latencies.is_empty()).then(|| latencies.iter().sum()),
        };
        sink(&record)?;
    }
    Ok(())
}

struct LogWriter {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl LogWriter {
    fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    fn line(&mut self, line: &LogLine) -> Result<()> {
        serde_json::to_writer(&mut self.out, line)?;
        self.out.write_all(b"\n").and_then(|_| self.out.flush()).map_err(|e| Error::io(&self.path, e))
    }
}

/// Runs one seed and writes its log; returns the log path.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<PathBuf> {
    let problem = config.task.build()?;
    let codec = config.strategy.evollm.codec;
    let backend = build_backend(&config.backend, &codec)?;
    let mut strategy = build_strategy(config, problem.bounds().clone(), backend, seed)?;
    let path = config.log_path(seed);
    let mut log = LogWriter::create(&path)?;
    log.line(&LogLine::Header(RunHeader {
        version: VERSION.to_string(),
        seed,
        task: config.task.label(),
        strategy: config.label(),
        config: config.clone(),
    }))?;
    drive(problem.as_ref(), strategy.as_mut(), config.budget.max_generations, &codec, |r| {
        log.line(&LogLine::Generation(r.clone()))
    })?;
    info!(task = %config.task.label(), strategy = %config.label(), seed, "run finished");
    Ok(path)
}

/// Runs every seed of `config`. An HTTP backend is probed once before any
/// run starts so a bad endpoint fails fast.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    if !config.backend.is_offline() {
        build_backend(&config.backend, &config.strategy.evollm.codec)?.check_reachable()?;
    }
    if config.parallel_seeds {
        config.seeds.par_iter().map(|&s| run_seed(config, s)).collect()
    } else {
        config.seeds.iter().map(|&s| run_seed(config, s)).collect()
    }
}

pub fn read_log(path: &Path) -> Result<(RunHeader, Vec<GenerationRecord>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = None;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line)? {
            LogLine::Header(h) if header.is_none() => header = Some(h),
            LogLine::Header(_) => return Err(Error::Aggregate(format!("{}: second header", path.display()))),
            LogLine::Generation(_) if header.is_none() => {
                return Err(Error::Aggregate(format!("{}: record before header", path.display())))
            }
            LogLine::Generation(r) => records.push(r),
        }
    }
    let header = header.ok_or_else(|| Error::Aggregate(format!("{}: empty log", path.display())))?;
    Ok((header, records))
}

/// Sorted `*.jsonl` files under `dir`, recursively.
pub fn find_logs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "jsonl") {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: String,
    pub strategy: String,
    pub generation: usize,
    pub mean_best: f64,
    pub stderr: f64,
    pub n_seeds: usize,
}

/// Mean and standard error (sample std / sqrt n) of `values`.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-generation mean +- standard error of best-so-far across the seeds of
/// each (task, strategy) group.
pub fn aggregate_logs(paths: &[PathBuf]) -> Result<Vec<SummaryRow>> {
    let mut groups: BTreeMap<(String, String), Vec<(PathBuf, EvalBudget, Vec<f64>)>> = BTreeMap::new();
    for path in paths {
        let (h, records) = read_log(path)?;
        let curve = records.iter().map(|r| r.best_fitness).collect();
        groups.entry((h.task, h.strategy)).or_default().push((path.clone(), h.config.budget, curve));
    }
    let mut rows = Vec::new();
    for ((task, strategy), runs) in groups {
        let (first_path, budget, first) = &runs[0];
        for (p, b, c) in &runs[1..] {
            if b != budget || c.len() != first.len() {
                return Err(Error::Aggregate(format!(
                    "{} and {} disagree on budget or length ({} vs {} generations)",
                    first_path.display(),
                    p.display(),
                    first.len(),
                    c.len()
                )));
            }
        }
        for g in 0..first.len() {
            let values: Vec<f64> = runs.iter().map(|(_, _, c)| c[g]).collect();
            let (mean_best, stderr) = mean_stderr(&values);
            rows.push(SummaryRow {
                task: task.clone(),
                strategy: strategy.clone(),
                generation: g,
                mean_best,
                stderr,
                n_seeds: values.len(),
            });
        }
    }
    Ok(rows)
}

pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Aggregate(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Report(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Aggregates every log under `dir` into `dir/summary.csv`.
pub fn aggregate_dir(dir: &Path) -> Result<PathBuf> {
    let logs = find_logs(dir)?;
    if logs.is_empty() {
        return Err(Error::Aggregate(format!("no logs under {}", dir.display())));
    }
    let rows = aggregate_logs(&logs)?;
    let out = dir.join("summary.csv");
    write_summary(&rows, &out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub files: Vec<ManifestEntry>,
}

fn write_hashed(out_dir: &Path, rel: &str, bytes: &[u8], manifest: &mut Vec<ManifestEntry>) -> Result<()> {
    let path = out_dir.join(rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    manifest.push(ManifestEntry { path: rel.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
    Ok(())
}

fn curve_csv(rows: &[&SummaryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["generation", "mean_best", "stderr", "n_seeds"])?;
    for r in rows {
        w.serialize((r.generation, r.mean_best, r.stderr, r.n_seeds))?;
    }
    w.into_inner().map_err(|e| Error::Report(e.to_string()))
}

const PALETTE: [&str; 6] = ["#1b6ca8", "#d1495b", "#edae49", "#00798c", "#66a182", "#8d6a9f"];

/// A bare line chart of mean best-so-far per strategy, log-scaled when every
/// value is positive.
fn svg_plot(task: &str, curves: &[(&str, Vec<(usize, f64)>)]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let all: Vec<f64> = curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.1)).collect();
    let log = all.iter().all(|&v| v > 0.0);
    let tf = |v: f64| if log { v.log10() } else { v };
    let lo = all.iter().copied().map(tf).fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().map(tf).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let gmax = curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.0)).max().unwrap_or(1).max(1) as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"20\">{task}: mean best fitness{}</text>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n",
        if log { " (log10)" } else { "" },
        h - pad,
        w - pad,
        h - pad,
        h - pad
    );
    for (i, (name, points)) in curves.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = points
            .iter()
            .map(|&(g, v)| {
                let x = pad + (w - 2.0 * pad) * g as f64 / gmax;
                let y = h - pad - (h - 2.0 * pad) * (tf(v) - lo) / span;
                format!("{x:.1},{y:.1}")
            })
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" fill=\"{colour}\">{name}</text>\n",
            coords.join(" "),
            w - pad - 150.0,
            pad + 16.0 * i as f64
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes one curve CSV per (task, strategy), optional SVG plots per task and
/// a `manifest.json` hashing every emitted file. `input` is a summary CSV, or
/// a directory holding `summary.csv` or raw logs.
pub fn report(input: &Path, out_dir: &Path, plots: bool) -> Result<Manifest> {
    let rows = if input.is_file() {
        read_summary(input)?
    } else if input.join("summary.csv").is_file() {
        read_summary(&input.join("summary.csv"))?
    } else if input.is_dir() {
        let logs = find_logs(input)?;
        if logs.is_empty() {
            return Err(Error::Report(format!("no summary or logs under {}", input.display())));
        }
        aggregate_logs(&logs)?
    } else {
        return Err(Error::Report(format!("{} does not exist", input.display())));
    };
    let mut groups: BTreeMap<(&str, &str), Vec<&SummaryRow>> = BTreeMap::new();
    for r in &rows {
        groups.entry((&r.task, &r.strategy)).or_default().push(r);
    }
    let mut files = Vec::new();
    for ((task, strategy), curve) in &groups {
        let rel = format!("curves/{}.csv", sanitize(&format!("{task}__{strategy}")));
        write_hashed(out_dir, &rel, &curve_csv(curve)?, &mut files)?;
    }
    if plots {
        let mut by_task: BTreeMap<&str, Vec<(&str, Vec<(usize, f64)>)>> = BTreeMap::new();
        for ((task, strategy), curve) in &groups {
            by_task.entry(task).or_default().push((strategy, curve.iter().map(|r| (r.generation, r.mean_best)).collect()));
        }
        for (task, curves) in &by_task {
            let rel = format!("plots/{}.svg", sanitize(task));
            write_hashed(out_dir, &rel, svg_plot(task, curves).as_bytes(), &mut files)?;
        }
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest { version: VERSION.to_string(), files };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Settings for turning hill-climbing runs into prompt/target pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub tasks: Vec<TaskSpec>,
    pub seeds: Vec<u64>,
    pub generations: usize,
    pub population_size: usize,
    pub teacher: HillClimbConfig,
    pub prompt: PromptConfig,
    pub codec: DiscretizationSpec,
    pub block_size: Option<usize>,
    /// Dataset path; teacher logs go next to it in `<stem>_teacher/`.
    pub output: PathBuf,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        let rosenbrock = TaskSpec { name: "rosenbrock".into(), ..TaskSpec::default() };
        Self {
            tasks: vec![TaskSpec::default(), rosenbrock],
            seeds: vec![0, 1, 2, 3, 4],
            generations: 30,
            population_size: 5,
            teacher: HillClimbConfig { sigma: 0.2, warmup_generations: 4 },
            prompt: PromptConfig::default(),
            codec: DiscretizationSpec::default(),
            block_size: None,
            output: PathBuf::from("finetune/dataset.jsonl"),
        }
    }
}

impl FinetuneConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("export needs at least one task and one seed".into()));
        }
        self.prompt.validate()?;
        EvalBudget::new(self.generations, self.population_size)?;
        for t in &self.tasks {
            self.blocks(t.build()?.dims())?;
        }
        Ok(())
    }

    fn blocks(&self, dims: usize) -> Result<Vec<DimBlock>> {
        let size = self.block_size.unwrap_or(dims);
        if size == 0 || size > dims {
            return Err(Error::Config(format!("block_size {size} not in 1..={dims}")));
        }
        Ok(DimBlock::partition(dims, size))
    }

    /// First tell whose resulting mean drives a post-warm-up generation.
    pub fn first_recorded_generation(&self) -> usize {
        self.teacher.warmup_generations.max(1) - 1
    }

    /// `(G - max(W, 1)) * seeds * sum over tasks of blocks`.
    pub fn expected_records(&self) -> Result<usize> {
        let per_run = self.generations.saturating_sub(self.teacher.warmup_generations.max(1));
        let mut blocks = 0;
        for t in &self.tasks {
            blocks += self.blocks(t.build()?.dims())?.len();
        }
        Ok(per_run * self.seeds.len() * blocks)
    }

    pub fn teacher_log_dir(&self) -> PathBuf {
        let stem = self.output.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned());
        self.output.with_file_name(format!("{stem}_teacher"))
    }

    pub fn teacher_log_path(&self, task: &TaskSpec, seed: u64) -> PathBuf {
        self.teacher_log_dir().join(sanitize(&task.label())).join(format!("seed_{seed}.jsonl"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneRecord {
    pub input: String,
    pub target: String,
    pub task: String,
    pub seed: u64,
    /// Last generation included in the prompt; the target is the mean the
    /// teacher moved to after telling it.
    pub generation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub records: usize,
    pub expected_records: usize,
    pub dataset: PathBuf,
    pub teacher_logs: PathBuf,
}

fn render_target(bins: &[Bin]) -> String {
    let parts: Vec<String> = bins.iter().map(Bin::to_string).collect();
    format!("{};", parts.join(" "))
}

fn teacher_records(config: &FinetuneConfig, task: &TaskSpec, seed: u64, out: &mut Vec<FinetuneRecord>) -> Result<()> {
    let problem = task.build()?;
    let bounds = problem.bounds().clone();
    let blocks = config.blocks(bounds.dims())?;
    let mut teacher = HillClimb::new(bounds.clone(), &config.teacher, config.population_size, seed)?;
    let mut buffer = ArchiveBuffer::new(bounds);
    let mut rng = stream(seed, STREAM_PROMPT);
    let first = config.first_recorded_generation();
    let mut log = LogWriter::create(&config.teacher_log_path(task, seed))?;
    log.line(&LogLine::Header(RunHeader {
        version: VERSION.to_string(),
        seed,
        task: task.label(),
        strategy: "hill_climb_teacher".into(),
        config: ExperimentConfig {
            name: "hill_climb_teacher".into(),
            task: task.clone(),
            strategy: StrategyConfig {
                kind: StrategyKind::HillClimb,
                hill_climb: config.teacher.clone(),
                ..StrategyConfig::default()
            },
            budget: EvalBudget::new(config.generations, config.population_size)?,
            seeds: vec![seed],
            output_dir: config.teacher_log_dir(),
            parallel_seeds: false,
            ..ExperimentConfig::default()
        },
    }))?;
    drive(problem.as_ref(), &mut teacher, config.generations, &config.codec, |r| {
        log.line(&LogLine::Generation(r.clone()))?;
        buffer.append(r.population.clone(), r.fitness.clone())?;
        if r.generation < first || r.generation + 1 >= config.generations {
            return Ok(());
        }
        for &block in &blocks {
            let prompt = render_prompt(&buffer, &config.prompt, &config.codec, block, &mut rng)?;
            let bins = config.codec.encode_vector(&r.next_mean[block.range()])?;
            out.push(FinetuneRecord {
                input: prompt.text,
                target: render_target(&bins),
                task: task.label(),
                seed,
                generation: r.generation,
            });
        }
        Ok(())
    })
}

/// All records of the configured grid, tasks outermost, then seeds.
pub fn finetune_records(config: &FinetuneConfig) -> Result<Vec<FinetuneRecord>> {
    config.validate()?;
    let mut records = Vec::new();
    for task in &config.tasks {
        for &seed in &config.seeds {
            teacher_records(config, task, seed, &mut records)?;
        }
    }
    Ok(records)
}

/// Writes the dataset, a `.meta.json` sidecar and the teacher logs.
pub fn export_finetune_dataset(config: &FinetuneConfig) -> Result<ExportSummary> {
    let records = finetune_records(config)?;
    if records.is_empty() {
        warn!(path = %config.output.display(), "fine-tune export produced no records");
    }
    if let Some(dir) = config.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(&config.output, &text).map_err(|e| Error::io(&config.output, e))?;
    let expected = config.expected_records()?;
    let meta = serde_json::json!({
        "version": VERSION,
        "records": records.len(),
        "expected_records": expected,
        "count_formula": "(generations - max(warmup, 1)) * seeds * sum_tasks(blocks)",
        "tasks": config.tasks.iter().map(TaskSpec::label).collect::<Vec<_>>(),
        "seeds": config.seeds,
        "generations": config.generations,
        "population_size": config.population_size,
        "teacher": config.teacher,
        "prompt": config.prompt,
        "codec": config.codec,
        "block_size": config.block_size,
        "query_rule": "query fitness = best - |best| * (1 - u), u ~ U(query_factor_range), rounded to fitness_decimals",
        "target_rule": "teacher mean after the prompt's last generation, encoded per block as `b1 b2 ...;`",
        "dataset_sha256": sha256_hex(text.as_bytes()),
    });
    let meta_path = config.output.with_extension("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&meta_path, e))?;
    Ok(ExportSummary {
        records: records.len(),
        expected_records: expected,
        dataset: config.output.clone(),
        teacher_logs: config.teacher_log_dir(),
    })
}

pub fn read_dataset(path: &Path) -> Result<Vec<FinetuneRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(Error::from)).collect()
}

/// Parses a prompt, trying the indicator grammar first. The text must
/// re-render to itself.
pub fn validate_prompt(text: &str) -> Result<ParsedPrompt> {
    let parsed = parse_prompt(text, true).or_else(|first| parse_prompt(text, false).map_err(|_| first))?;
    if parsed.to_text() != text {
        return Err(Error::invalid("prompt", "does not re-render to the same text"));
    }
    Ok(parsed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub records: usize,
    pub by_task: BTreeMap<String, usize>,
    pub mean_input_chars: f64,
    pub max_input_chars: usize,
    pub mean_rows: f64,
    pub mean_target_width: f64,
    /// Share of targets equal to the prompt's newest-best anchor.
    pub echo_rate: f64,
    /// Records whose input or target failed to parse.
    pub invalid: usize,
}

/// Summary statistics standing in for training curves: sizes, per-task
/// counts, and how often the target just repeats the best anchor.
pub fn dataset_stats(records: &[FinetuneRecord], spec: &DiscretizationSpec) -> DatasetStats {
    let mut by_task = BTreeMap::new();
    let (mut chars, mut max_chars, mut rows, mut width, mut echoes, mut invalid) = (0, 0, 0, 0, 0, 0);
    for r in records {
        *by_task.entry(r.task.clone()).or_insert(0) += 1;
        chars += r.input.len();
        max_chars = max_chars.max(r.input.len());
        let Ok(p) = validate_prompt(&r.input) else {
            invalid += 1;
            continue;
        };
        let Ok(t) = parse_proposal(&r.target, p.width(), spec) else {
            invalid += 1;
            continue;
        };
        rows += p.rows.len();
        width += t.bins.len();
        // the best anchor is the one on the lowest-labelled row
        let best = p.rows.iter().min_by(|a, b| {
            let fa: f64 = a.label.parse().unwrap_or(f64::INFINITY);
            let fb: f64 = b.label.parse().unwrap_or(f64::INFINITY);
            fa.total_cmp(&fb)
        });
        if best.is_some_and(|row| row.anchor == t.bins) {
            echoes += 1;
        }
    }
    let n = records.len().max(1) as f64;
    let valid = (records.len() - invalid).max(1) as f64;
    DatasetStats {
        records: records.len(),
        by_task,
        mean_input_chars: chars as f64 / n,
        max_input_chars: max_chars,
        mean_rows: rows as f64 / valid,
        mean_target_width: width as f64 / valid,
        echo_rate: echoes as f64 / valid,
        invalid,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stderr_hand_values() {
        assert_eq!(mean_stderr(&[2.5]), (2.5, 0.0));
        assert_eq!(mean_stderr(&[1.0, 3.0]).0, 2.0);
        // 1, 2, 6: mean 3, sample var 7, stderr sqrt(7/3)
        let (m, s) = mean_stderr(&[1.0, 2.0, 6.0]);
        assert_eq!(m, 3.0);
        assert!((s - (7.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn overrides_set_nested_fields_and_reject_unknown_ones() {
        let base = ExperimentConfig::default();
        let sets = vec![
            ("task.dims".to_string(), "5".to_string()),
            ("strategy.evollm.codec.resolution".to_string(), "50".to_string()),
            ("strategy.evollm.block_size".to_string(), "1".to_string()),
            ("strategy.kind".to_string(), "hill_climb".to_string()),
            ("strategy.evollm.prompt.query_factor_range".to_string(), "[0.4, 0.6]".to_string()),
        ];
        let c = apply_overrides(&base, &sets).unwrap();
        assert_eq!(c.task.dims, 5);
        assert_eq!(c.strategy.evollm.codec.resolution(), 50);
        assert_eq!(c.strategy.evollm.block_size, Some(1));
        assert_eq!(c.strategy.kind, StrategyKind::HillClimb);
        assert_eq!(c.strategy.evollm.prompt.query_factor_range, (0.4, 0.6));
        for bad in ["task.dimz", "strategy.evollm.prompt.nope", "budget.max_generations.x", "seeds.x"] {
            assert!(apply_overrides(&base, &[(bad.to_string(), "1".to_string())]).is_err(), "{bad}");
        }
        assert!(apply_overrides(&base, &[("task.name".into(), "ackley".into())]).is_err());
    }

    #[test]
    fn grid_sizes_and_labels() {
        let base = ExperimentConfig::default();
        assert_eq!(ablation_grid(&base, &[]).unwrap(), vec![base.clone()]);
        let res = Axis::parse("strategy.evollm.codec.resolution=50,100,1000,10000").unwrap();
        assert_eq!(ablation_grid(&base, &[res]).unwrap().len(), 4);
        let a = Axis::parse("strategy.evollm.prompt.uniqueness_filtering=true,false").unwrap();
        let b = Axis::parse("strategy.evollm.prompt.generation_selection=random,last,best").unwrap();
        let grid = ablation_grid(&base, &[a, b]).unwrap();
        assert_eq!(grid.len(), 6);
        assert_eq!(grid[1].name, "evollm@uniqueness_filtering=true+generation_selection=last");
        let dirs: std::collections::BTreeSet<_> = grid.iter().map(ExperimentConfig::run_dir).collect();
        assert_eq!(dirs.len(), 6);
        assert!(Axis::parse("nothing").is_err());
        assert!(ablation_grid(&base, &[Axis::parse("strategy.bogus=1").unwrap()]).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        let text = c.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
        assert!(ExperimentConfig::from_toml_str("seeds = []").is_err());
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn expected_record_count() {
        let c = FinetuneConfig::default();
        assert_eq!(c.expected_records().unwrap(), 260);
        let split = FinetuneConfig { block_size: Some(1), ..FinetuneConfig::default() };
        assert_eq!(split.expected_records().unwrap(), 520);
    }

    #[test]
    fn validate_prompt_accepts_both_grammars() {
        let with = "0.34: 413 543;388 557,0,413 543,1\n0.30: ";
        assert_eq!(validate_prompt(with).unwrap().width(), 2);
        let without = "0.34: 413;388,413\n";
        assert!(validate_prompt(without).is_ok());
        assert!(validate_prompt("0.34: 413 543;388\n").is_err());
    }
}
