//! Prompt construction from the archive and parsing of model completions.
//!
//! A discretized prompt is a block of rows followed by a query prefix:
//!
//! ```text
//! 6.03: 397 539;559 140,0,186 346,0,419 685,0,670 417,0,397 539,0
//! 0.34: 413 543;388 557,0,448 604,0,397 539,0,399 504,1,413 543,1
//! 0.25:
//! ```
//!
//! Each row is `<label>: <anchor>;<members>`: the label is the generation's
//! fitness, the anchor the best solution found up to that generation and the
//! members are comma-separated candidates, each followed by `,0` or `,1`
//! when the improvement indicator is enabled. The model is expected to
//! continue the last line with `<bins>;`.

use std::fmt::Write as _;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveBuffer, Evaluation};
use crate::codec::{Bin, DiscretizationSpec};
use crate::error::{Error, ParseFailure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationSelection {
    Random,
    Last,
    Best,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSelection {
    Random,
    BestWithin,
    BestUpTo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sorting {
    /// Worst first, best last.
    Improving,
    Random,
}

/// Which fitness labels a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Best fitness inside the generation.
    WithinGeneration,
    /// Best fitness over all generations up to and including it.
    UpToGeneration,
}

/// Context construction settings. Defaults: K=5 last generations, M=5
/// best-so-far members, improving order for both, indicator and query on,
/// no uniqueness filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub context_generations: usize,
    pub context_members: usize,
    pub generation_selection: GenerationSelection,
    pub candidate_selection: CandidateSelection,
    pub generation_sorting: Sorting,
    pub candidate_sorting: Sorting,
    pub improvement_indicator: bool,
    pub uniqueness_filtering: bool,
    pub improvement_query: bool,
    pub query_factor_range: (f64, f64),
    pub fitness_decimals: usize,
    pub label_mode: LabelMode,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            context_generations: 5,
            context_members: 5,
            generation_selection: GenerationSelection::Last,
            candidate_selection: CandidateSelection::BestUpTo,
            generation_sorting: Sorting::Improving,
            candidate_sorting: Sorting::Improving,
            improvement_indicator: true,
            uniqueness_filtering: false,
            improvement_query: true,
            query_factor_range: (0.5, 0.9),
            fitness_decimals: 2,
            label_mode: LabelMode::WithinGeneration,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_generations == 0 || self.context_members == 0 {
            return Err(Error::invalid("prompt config", "context_generations and context_members must be >= 1"));
        }
        let (lo, hi) = self.query_factor_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid("prompt config", format!("query_factor_range ({lo}, {hi}) needs 0 < low <= high")));
        }
        if self.fitness_decimals > 12 {
            return Err(Error::invalid("prompt config", "fitness_decimals above 12"));
        }
        Ok(())
    }
}

/// Contiguous slice of dimensions `[start, end)` handled by one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimBlock {
    pub start: usize,
    pub end: usize,
}

impl DimBlock {
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start < end, "empty dimension block {start}..{end}");
        Self { start, end }
    }

    pub fn full(dims: usize) -> Self {
        Self::new(0, dims)
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    /// Contiguous partition: block `j` covers `[j*size, min((j+1)*size, dims))`.
    pub fn partition(dims: usize, size: usize) -> Vec<DimBlock> {
        assert!(size > 0);
        (0..dims).step_by(size).map(|s| DimBlock::new(s, (s + size).min(dims))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub block: DimBlock,
    /// Present when the improvement query is enabled.
    pub query_fitness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedProposal {
    pub bins: Vec<Bin>,
    pub clamped: bool,
    pub raw_text: String,
}

pub fn format_fitness(value: f64, decimals: usize) -> String {
    format!("{value:.decimals$}")
}

fn join_bins(bins: &[Bin]) -> String {
    let mut s = String::with_capacity(bins.len() * 4);
    for (i, b) in bins.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{b}");
    }
    s
}

fn row_label(buffer: &ArchiveBuffer, k: usize, mode: LabelMode) -> Result<f64> {
    match mode {
        LabelMode::WithinGeneration => Ok(buffer.best_within(k)?.fitness),
        LabelMode::UpToGeneration => buffer.prefix_min(k),
    }
}

fn encode_slice(spec: &DiscretizationSpec, x: &[f64], block: DimBlock) -> Result<Vec<Bin>> {
    spec.encode_vector(&x[block.range()])
}

/// Members of generation `k` ordered best first for the deterministic
/// selection modes; `None` for random selection.
fn ranked_pool<'a>(
    buffer: &'a ArchiveBuffer,
    k: usize,
    config: &PromptConfig,
) -> Result<Option<Vec<Evaluation<'a>>>> {
    let m = config.context_members;
    match config.candidate_selection {
        CandidateSelection::BestUpTo => buffer.best_up_to(k, m).map(Some),
        CandidateSelection::BestWithin => buffer.top_within(k, m).map(Some),
        CandidateSelection::Random => Ok(None),
    }
}

/// Members of generation `k` ordered best first, before sorting is applied.
fn candidate_pool<'a, R: Rng + ?Sized>(
    buffer: &'a ArchiveBuffer,
    k: usize,
    config: &PromptConfig,
    rng: &mut R,
) -> Result<Vec<Evaluation<'a>>> {
    if let Some(pool) = ranked_pool(buffer, k, config)? {
        return Ok(pool);
    }
    let gen = buffer.generation(k)?;
    let n = gen.len();
    let picked = rand::seq::index::sample(rng, n, config.context_members.min(n));
    let mut members: Vec<Evaluation<'a>> = picked
        .into_iter()
        .map(|p| Evaluation {
            generation: k,
            position: p,
            candidate: &gen.candidates[p],
            fitness: gen.fitness[p],
            improved: gen.improved[p],
        })
        .collect();
    members.sort_by(|a, b| a.fitness.total_cmp(&b.fitness).then(a.position.cmp(&b.position)));
    Ok(members)
}

/// Up to M members for the row of generation `k`, in render order.
pub fn select_candidates<'a, R: Rng + ?Sized>(
    buffer: &'a ArchiveBuffer,
    k: usize,
    config: &PromptConfig,
    rng: &mut R,
) -> Result<Vec<Evaluation<'a>>> {
    let mut members = candidate_pool(buffer, k, config, rng)?;
    match config.candidate_sorting {
        Sorting::Improving => members.reverse(),
        Sorting::Random => members.shuffle(rng),
    }
    Ok(members)
}

/// Deterministic part of a row used for uniqueness filtering: the anchor and,
/// unless members are drawn at random, the member list.
fn row_key(
    buffer: &ArchiveBuffer,
    k: usize,
    config: &PromptConfig,
    spec: &DiscretizationSpec,
    block: DimBlock,
) -> Result<Vec<Bin>> {
    let anchor = buffer.best_up_to(k, 1)?[0].candidate;
    let mut key = encode_slice(spec, anchor, block)?;
    for e in ranked_pool(buffer, k, config)?.unwrap_or_default() {
        key.push(Bin::MAX);
        key.extend(encode_slice(spec, e.candidate, block)?);
    }
    Ok(key)
}

/// Up to K generation indices, in render order.
pub fn select_generations<R: Rng + ?Sized>(
    buffer: &ArchiveBuffer,
    config: &PromptConfig,
    spec: &DiscretizationSpec,
    block: DimBlock,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let g = buffer.len();
    let k_max = config.context_generations;
    // candidates in priority order
    let priority: Vec<usize> = match config.generation_selection {
        GenerationSelection::Last => (0..g).rev().collect(),
        GenerationSelection::Best => {
            let mut order: Vec<(f64, usize)> =
                (0..g).map(|k| buffer.best_within(k).map(|e| (e.fitness, k))).collect::<Result<_>>()?;
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            order.into_iter().map(|(_, k)| k).collect()
        }
        GenerationSelection::Random => {
            if config.uniqueness_filtering {
                let mut all: Vec<usize> = (0..g).collect();
                all.shuffle(rng);
                all
            } else {
                rand::seq::index::sample(rng, g, k_max.min(g)).into_vec()
            }
        }
    };
    let mut chosen = Vec::with_capacity(k_max);
    if config.uniqueness_filtering {
        let mut seen: Vec<Vec<Bin>> = Vec::new();
        for k in priority {
            if chosen.len() == k_max {
                break;
            }
            let key = row_key(buffer, k, config, spec, block)?;
            if !seen.contains(&key) {
                seen.push(key);
                chosen.push(k);
            }
        }
    } else {
        chosen.extend(priority.into_iter().take(k_max));
    }
    match config.generation_sorting {
        Sorting::Improving => {
            let mut labelled: Vec<(f64, usize)> = chosen
                .into_iter()
                .map(|k| row_label(buffer, k, config.label_mode).map(|l| (l, k)))
                .collect::<Result<_>>()?;
            // worst label first; equal labels keep chronological order
            labelled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            Ok(labelled.into_iter().map(|(_, k)| k).collect())
        }
        Sorting::Random => {
            chosen.shuffle(rng);
            Ok(chosen)
        }
    }
}

/// `best` moved towards better by `1 - factor` of its magnitude; for positive
/// values this is `best * factor`.
pub fn improvement_target(best: f64, factor: f64) -> f64 {
    best - best.abs() * (1.0 - factor)
}

fn round_to(value: f64, decimals: usize) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    (value * scale).round() / scale
}

/// Desired fitness for the next proposal, rounded to the label precision.
pub fn compute_query_fitness<R: Rng + ?Sized>(best: f64, config: &PromptConfig, rng: &mut R) -> f64 {
    let (lo, hi) = config.query_factor_range;
    let factor = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    query_fitness_with_factor(best, factor, config.fitness_decimals)
}

pub fn query_fitness_with_factor(best: f64, factor: f64, decimals: usize) -> f64 {
    round_to(improvement_target(best, factor), decimals)
}

/// Renders the query prompt for one dimension block.
pub fn render_prompt<R: Rng + ?Sized>(
    buffer: &ArchiveBuffer,
    config: &PromptConfig,
    spec: &DiscretizationSpec,
    block: DimBlock,
    rng: &mut R,
) -> Result<RenderedPrompt> {
    if block.end > buffer.dims() {
        return Err(Error::Shape(format!("block {}..{} exceeds {} dims", block.start, block.end, buffer.dims())));
    }
    let dec = config.fitness_decimals;
    let mut text = String::new();
    for k in select_generations(buffer, config, spec, block, rng)? {
        let label = row_label(buffer, k, config.label_mode)?;
        let anchor = buffer.best_up_to(k, 1)?[0].candidate;
        let _ = write!(text, "{}: {};", format_fitness(label, dec), join_bins(&encode_slice(spec, anchor, block)?));
        for (i, e) in select_candidates(buffer, k, config, rng)?.iter().enumerate() {
            if i > 0 {
                text.push(',');
            }
            text.push_str(&join_bins(&encode_slice(spec, e.candidate, block)?));
            if config.improvement_indicator {
                text.push_str(if e.improved { ",1" } else { ",0" });
            }
        }
        text.push('\n');
    }
    let query_fitness = if config.improvement_query {
        let best = buffer.best().map_or(f64::INFINITY, |e| e.fitness).min(buffer.incumbent());
        let q = compute_query_fitness(best, config, rng);
        let _ = write!(text, "{}: ", format_fitness(q, dec));
        Some(q)
    } else {
        None
    };
    Ok(RenderedPrompt { text, block, query_fitness })
}

/// Reads the first run of integers before `;` (or the end of the first line).
pub fn parse_proposal(
    completion: &str,
    block_width: usize,
    spec: &DiscretizationSpec,
) -> std::result::Result<ParsedProposal, ParseFailure> {
    let line = completion.trim_start().lines().next().unwrap_or("");
    let segment = line.split(';').next().unwrap_or("");
    let mut values = Vec::with_capacity(block_width);
    for token in segment.split_whitespace() {
        match token.parse::<i64>() {
            Ok(v) => values.push(v),
            Err(_) => return Err(ParseFailure::new(format!("non-integer token {token:?}"), completion)),
        }
    }
    if values.is_empty() {
        return Err(ParseFailure::new("no integers", completion));
    }
    if values.len() != block_width {
        return Err(ParseFailure::new(format!("expected {block_width} integers, found {}", values.len()), completion));
    }
    let mut clamped = false;
    let bins = values
        .into_iter()
        .map(|v| {
            let (b, c) = spec.clamp_bin(v);
            clamped |= c;
            b
        })
        .collect();
    Ok(ParsedProposal { bins, clamped, raw_text: completion.to_owned() })
}

/// One row of a parsed prompt. Labels keep their printed form so a parsed
/// prompt re-renders byte for byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRow {
    pub label: String,
    pub anchor: Vec<Bin>,
    pub members: Vec<(Vec<Bin>, Option<bool>)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub rows: Vec<PromptRow>,
    pub query: Option<String>,
}

impl ParsedPrompt {
    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, |r| r.anchor.len())
    }

    pub fn to_text(&self) -> String {
        let mut text = String::new();
        for row in &self.rows {
            let _ = write!(text, "{}: {};", row.label, join_bins(&row.anchor));
            for (i, (bins, flag)) in row.members.iter().enumerate() {
                if i > 0 {
                    text.push(',');
                }
                text.push_str(&join_bins(bins));
                if let Some(f) = flag {
                    text.push_str(if *f { ",1" } else { ",0" });
                }
            }
            text.push('\n');
        }
        if let Some(q) = &self.query {
            let _ = write!(text, "{q}: ");
        }
        text
    }
}

fn is_fixed_decimal(s: &str) -> bool {
    let digits = s.strip_prefix('-').unwrap_or(s);
    let mut parts = digits.splitn(2, '.');
    let int = parts.next().unwrap_or("");
    let frac = parts.next();
    !int.is_empty()
        && int.bytes().all(|b| b.is_ascii_digit())
        && frac.is_none_or(|f| !f.is_empty() && f.bytes().all(|b| b.is_ascii_digit()))
}

fn parse_bins(s: &str, width: Option<usize>) -> Option<Vec<Bin>> {
    if s.is_empty() || s.starts_with(' ') || s.ends_with(' ') || s.contains("  ") {
        return None;
    }
    let bins: Option<Vec<Bin>> = s
        .split(' ')
        .map(|t| if t.bytes().all(|b| b.is_ascii_digit()) { t.parse().ok() } else { None })
        .collect();
    bins.filter(|b| width.is_none_or(|w| b.len() == w))
}

/// Strict parser for the prompt grammar. `indicator` states whether members
/// carry improvement flags, which disambiguates width-1 rows.
pub fn parse_prompt(text: &str, indicator: bool) -> std::result::Result<ParsedPrompt, ParseFailure> {
    let fail = |why: String| ParseFailure::new(why, text);
    let mut rows = Vec::new();
    let mut rest = text;
    let mut width = None;
    let mut query = None;
    while !rest.is_empty() {
        let (line, tail, terminated) = match rest.find('\n') {
            Some(i) => (&rest[..i], &rest[i + 1..], true),
            None => (rest, "", false),
        };
        rest = tail;
        if !terminated {
            // the trailing query prefix
            let q = line
                .strip_suffix(": ")
                .filter(|q| is_fixed_decimal(q))
                .ok_or_else(|| fail(format!("malformed query line {line:?}")))?;
            query = Some(q.to_owned());
            break;
        }
        let (label, body) = line.split_once(": ").ok_or_else(|| fail(format!("row without label: {line:?}")))?;
        if !is_fixed_decimal(label) {
            return Err(fail(format!("bad label {label:?}")));
        }
        let (anchor, members) = body.split_once(';').ok_or_else(|| fail(format!("row without ';': {line:?}")))?;
        let anchor = parse_bins(anchor, width).ok_or_else(|| fail(format!("bad anchor in {line:?}")))?;
        width = Some(anchor.len());
        let segments: Vec<&str> = members.split(',').collect();
        let mut parsed = Vec::new();
        if indicator {
            if segments.len() % 2 != 0 {
                return Err(fail(format!("unpaired member flag in {line:?}")));
            }
            for pair in segments.chunks(2) {
                let bins = parse_bins(pair[0], width).ok_or_else(|| fail(format!("bad member in {line:?}")))?;
                let flag = match pair[1] {
                    "0" => false,
                    "1" => true,
                    other => return Err(fail(format!("bad flag {other:?} in {line:?}"))),
                };
                parsed.push((bins, Some(flag)));
            }
        } else {
            for seg in segments {
                let bins = parse_bins(seg, width).ok_or_else(|| fail(format!("bad member in {line:?}")))?;
                parsed.push((bins, None));
            }
        }
        rows.push(PromptRow { label: label.to_owned(), anchor, members: parsed });
    }
    if rows.is_empty() {
        return Err(fail("no rows".into()));
    }
    Ok(ParsedPrompt { rows, query })
}

/// Natural-language prompt listing raw floating-point solutions, used as the
/// text-based comparison baseline.
pub fn render_raw_text_prompt<R: Rng + ?Sized>(
    buffer: &ArchiveBuffer,
    config: &PromptConfig,
    rng: &mut R,
) -> Result<String> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let spec = DiscretizationSpec::default();
    let block = DimBlock::full(buffer.dims());
    let mut entries: Vec<Evaluation<'_>> = Vec::new();
    for k in select_generations(buffer, config, &spec, block, rng)? {
        entries.extend(select_candidates(buffer, k, config, rng)?);
    }
    if config.candidate_sorting == Sorting::Improving {
        entries.sort_by(|a, b| {
            b.fitness.total_cmp(&a.fitness).then(b.generation.cmp(&a.generation)).then(b.position.cmp(&a.position))
        });
    }
    let mut text = String::from(
        "You are minimizing an unknown function. Below are solutions evaluated so far with their \
         function values, listed from worst to best.\n",
    );
    for e in entries {
        let coords: Vec<String> = e.candidate.iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(text, "solution: [{}] value: {:.4}", coords.join(", "), e.fitness);
    }
    let _ = write!(
        text,
        "Propose a new solution of {} numbers with a lower value than all solutions above. \
         Reply with the solution only, formatted as [x1, x2, ...].\n",
        buffer.dims()
    );
    Ok(text)
}

/// Reads the first bracketed list of floats (or the first line) from a
/// text-baseline completion.
pub fn parse_raw_proposal(completion: &str, dims: usize) -> std::result::Result<Vec<f64>, ParseFailure> {
    let body = match (completion.find('['), completion.find(']')) {
        (Some(a), Some(b)) if a < b => &completion[a + 1..b],
        _ => completion.trim_start().lines().next().unwrap_or(""),
    };
    let values: std::result::Result<Vec<f64>, _> =
        body.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()).map(str::parse::<f64>).collect();
    match values {
        Ok(v) if v.len() == dims && v.iter().all(|x| x.is_finite()) => Ok(v),
        Ok(v) => Err(ParseFailure::new(format!("expected {dims} finite numbers, found {}", v.len()), completion)),
        Err(e) => Err(ParseFailure::new(format!("bad number: {e}"), completion)),
    }
}

/// Anchors of every row that looks like `<label>: <ints>;`, top to bottom.
/// Lenient on purpose: oracles read prompts they did not render.
pub fn scan_anchors(text: &str) -> Vec<Vec<i64>> {
    text.lines()
        .filter_map(|line| {
            let (_, body) = line.split_once(": ")?;
            let (anchor, _) = body.split_once(';')?;
            let v: Option<Vec<i64>> = anchor.split_whitespace().map(|t| t.parse().ok()).collect();
            v.filter(|v| !v.is_empty())
        })
        .collect()
}

/// Solutions listed in a text-baseline prompt, top to bottom.
pub fn scan_raw_solutions(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .filter_map(|line| {
            let rest = line.strip_prefix("solution: [")?;
            let (inner, _) = rest.split_once(']')?;
            inner.split(',').map(|t| t.trim().parse().ok()).collect()
        })
        .collect()
}
