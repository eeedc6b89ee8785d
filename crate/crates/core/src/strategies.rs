//! Ask/tell optimizers: the model-driven strategy and the classical
//! baselines it is compared against.
//!
//! Every strategy draws its initial mean, its samples and its prompt
//! randomness from separate ChaCha streams of one run seed, so two
//! strategies that sample the same way produce the same populations no
//! matter how much prompt randomness one of them consumes.

use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::archive::ArchiveBuffer;
use crate::codec::{Bin, DiscretizationSpec};
use crate::error::{Error, Result};
use crate::llm::{CompletionBackend, CompletionRequest};
use crate::prompt::{parse_proposal, parse_raw_proposal, render_prompt, render_raw_text_prompt, DimBlock, PromptConfig};
use crate::search::{
    check_population, sample_gaussian_population, sample_uniform_population, Phase, SearchBounds, SearchState,
};

pub const STREAM_INIT: u64 = 0;
pub const STREAM_SAMPLE: u64 = 1;
pub const STREAM_PROMPT: u64 = 2;

/// Independent random stream `id` of a run seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Uniform initial mean from the run seed's init stream.
pub fn initial_mean(bounds: &SearchBounds, seed: u64) -> Vec<f64> {
    bounds.sample_uniform(&mut stream(seed, STREAM_INIT))
}

/// What happened to one dimension block's model query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum QueryOutcome {
    Proposed { bins: Vec<Bin>, clamped: bool },
    ProposedRaw { values: Vec<f64> },
    Fallback { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockQuery {
    pub block: DimBlock,
    pub prompt: String,
    pub temperature: f64,
    pub outcome: QueryOutcome,
    pub latency: Option<Duration>,
}

impl BlockQuery {
    pub fn is_fallback(&self) -> bool {
        matches!(self.outcome, QueryOutcome::Fallback { .. })
    }
}

/// Side information from one tell.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TellReport {
    pub queries: Vec<BlockQuery>,
}

pub trait Strategy: Send {
    fn name(&self) -> &'static str;
    fn dims(&self) -> usize;
    /// Next population, shape (N, D), inside the bounds.
    fn ask(&mut self) -> Vec<Vec<f64>>;
    fn tell(&mut self, population: &[Vec<f64>], fitness: &[f64]) -> Result<TellReport>;
    fn mean(&self) -> &[f64];
    fn best(&self) -> Option<(&[f64], f64)>;
    fn generation(&self) -> usize;
    fn phase(&self) -> Phase {
        Phase::Llm
    }
    /// Whether the last ask had to clip any candidate to the bounds.
    fn last_ask_clipped(&self) -> bool {
        false
    }
    /// Share of model queries that fell back; `None` for strategies that
    /// never query a model.
    fn fallback_rate(&self) -> Option<f64> {
        None
    }
}

fn best_of(state: &SearchState) -> Option<(&[f64], f64)> {
    state.has_incumbent().then_some((state.best_solution.as_slice(), state.best_fitness))
}

/// How solutions are shown to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Discretized,
    /// Floating-point text baseline; always one query over all dimensions.
    RawText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvoLlmConfig {
    pub prompt: PromptConfig,
    pub codec: DiscretizationSpec,
    pub sigma: f64,
    pub warmup_generations: usize,
    /// Dimensions per query; `None` queries all dimensions at once.
    pub block_size: Option<usize>,
    pub population_size: usize,
    pub representation: Representation,
    pub temperature_range: (f64, f64),
}

impl Default for EvoLlmConfig {
    fn default() -> Self {
        Self {
            prompt: PromptConfig::default(),
            codec: DiscretizationSpec::default(),
            sigma: 0.2,
            warmup_generations: 4,
            block_size: None,
            population_size: 5,
            representation: Representation::Discretized,
            temperature_range: (0.3, 1.0),
        }
    }
}

/// Isotropic Gaussian ES whose mean update is proposed by a completion
/// backend reading the archive as text.
///
/// Warm-up generations sample uniformly from the bounds. From the tell that
/// closes the warm-up on, each tell renders one prompt per dimension block and
/// moves that block of the mean to the decoded proposal. A failed query puts
/// the block back on the best solution so the next ask samples around it.
/// A proposal equal to the incumbent's bins restores the incumbent's exact
/// coordinates instead of the bin centre.
pub struct EvoLlm {
    config: EvoLlmConfig,
    bounds: SearchBounds,
    blocks: Vec<DimBlock>,
    state: SearchState,
    buffer: ArchiveBuffer,
    backend: Arc<dyn CompletionBackend>,
    sample_rng: ChaCha8Rng,
    prompt_rng: ChaCha8Rng,
    clipped: bool,
    queries: usize,
    fallbacks: usize,
}

impl std::fmt::Debug for EvoLlm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EvoLlm").field("state", &self.state).field("blocks", &self.blocks).finish_non_exhaustive()
    }
}

impl EvoLlm {
    pub fn new(
        bounds: SearchBounds,
        config: EvoLlmConfig,
        backend: Arc<dyn CompletionBackend>,
        seed: u64,
    ) -> Result<Self> {
        config.prompt.validate()?;
        let dims = bounds.dims();
        if !(config.sigma > 0.0 && config.sigma.is_finite()) {
            return Err(Error::invalid("evollm config", "sigma must be positive"));
        }
        if config.population_size == 0 {
            return Err(Error::invalid("evollm config", "population_size must be positive"));
        }
        let (lo, hi) = config.temperature_range;
        if !(lo >= 0.0 && lo <= hi) {
            return Err(Error::invalid("evollm config", "temperature_range needs 0 <= low <= high"));
        }
        let size = config.block_size.unwrap_or(dims);
        if size == 0 || size > dims {
            return Err(Error::invalid("evollm config", format!("block_size {size} not in 1..={dims}")));
        }
        let blocks = match config.representation {
            Representation::Discretized => DimBlock::partition(dims, size),
            Representation::RawText => vec![DimBlock::full(dims)],
        };
        let state = SearchState::new(initial_mean(&bounds, seed), config.sigma, config.warmup_generations)?;
        Ok(Self {
            buffer: ArchiveBuffer::new(bounds.clone()),
            bounds,
            blocks,
            state,
            backend,
            sample_rng: stream(seed, STREAM_SAMPLE),
            prompt_rng: stream(seed, STREAM_PROMPT),
            clipped: false,
            queries: 0,
            fallbacks: 0,
            config,
        })
    }

    pub fn state(&self) -> &SearchState {
        &self.state
    }

    pub fn buffer(&self) -> &ArchiveBuffer {
        &self.buffer
    }

    pub fn blocks(&self) -> &[DimBlock] {
        &self.blocks
    }

    pub fn config(&self) -> &EvoLlmConfig {
        &self.config
    }

    pub fn query_count(&self) -> usize {
        self.queries
    }

    pub fn fallback_count(&self) -> usize {
        self.fallbacks
    }

    /// Share of model queries so far that ended in the fallback.
    pub fn fallback_rate(&self) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            self.fallbacks as f64 / self.queries as f64
        }
    }

    fn query_block(&self, block: DimBlock, seed: u64) -> BlockQuery {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = self.config.temperature_range;
        let temperature = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        let prompt = match self.config.representation {
            Representation::Discretized => {
                render_prompt(&self.buffer, &self.config.prompt, &self.config.codec, block, &mut rng).map(|p| p.text)
            }
            Representation::RawText => render_raw_text_prompt(&self.buffer, &self.config.prompt, &mut rng),
        };
        let prompt = match prompt {
            Ok(p) => p,
            Err(e) => {
                return BlockQuery {
                    block,
                    prompt: String::new(),
                    temperature,
                    outcome: QueryOutcome::Fallback { reason: format!("render: {e}") },
                    latency: None,
                }
            }
        };
        let request = CompletionRequest::for_proposal(prompt, block.width(), &self.config.codec, temperature);
        let (outcome, latency) = match self.backend.complete(&request) {
            Err(e) => (QueryOutcome::Fallback { reason: format!("backend: {e}") }, None),
            Ok(done) => {
                let outcome = match self.config.representation {
                    Representation::Discretized => match parse_proposal(&done.text, block.width(), &self.config.codec) {
                        Ok(p) => QueryOutcome::Proposed { bins: p.bins, clamped: p.clamped },
                        Err(e) => QueryOutcome::Fallback { reason: format!("parse: {}", e.reason) },
                    },
                    Representation::RawText => match parse_raw_proposal(&done.text, block.width()) {
                        Ok(values) => QueryOutcome::ProposedRaw { values },
                        Err(e) => QueryOutcome::Fallback { reason: format!("parse: {}", e.reason) },
                    },
                };
                (outcome, done.latency)
            }
        };
        BlockQuery { block, prompt: request.prompt, temperature, outcome, latency }
    }

    fn query_all(&mut self) -> Vec<BlockQuery> {
        let seeds: Vec<u64> = self.blocks.iter().map(|_| self.prompt_rng.next_u64()).collect();
        let jobs: Vec<(DimBlock, u64)> = self.blocks.iter().copied().zip(seeds).collect();
        if jobs.len() > 1 && self.backend.concurrent() {
            let this = &*self;
            std::thread::scope(|s| {
                let handles: Vec<_> = jobs.iter().map(|&(b, seed)| s.spawn(move || this.query_block(b, seed))).collect();
                handles.into_iter().map(|h| h.join().expect("block query panicked")).collect()
            })
        } else {
            jobs.iter().map(|&(b, seed)| self.query_block(b, seed)).collect()
        }
    }

    fn apply(&mut self, query: &BlockQuery) {
        let range = query.block.range();
        match &query.outcome {
            QueryOutcome::Proposed { bins, .. } => {
                let incumbent = &self.state.best_solution[range.clone()];
                let snap = self.config.codec.encode_vector(incumbent).is_ok_and(|b| &b == bins);
                if snap {
                    self.state.mean[range.clone()].copy_from_slice(incumbent);
                } else {
                    let decoded = self.config.codec.decode_vector(bins);
                    self.state.mean[range].copy_from_slice(&decoded);
                }
            }
            QueryOutcome::ProposedRaw { values } => {
                self.state.mean[range].copy_from_slice(values);
                self.bounds.clip(&mut self.state.mean);
            }
            QueryOutcome::Fallback { .. } => {
                let best = self.state.best_solution[range.clone()].to_vec();
                self.state.mean[range].copy_from_slice(&best);
            }
        }
    }
}

impl Strategy for EvoLlm {
    fn name(&self) -> &'static str {
        "evollm"
    }

    fn dims(&self) -> usize {
        self.bounds.dims()
    }

    fn ask(&mut self) -> Vec<Vec<f64>> {
        let n = self.config.population_size;
        if self.state.in_warmup() {
            self.clipped = false;
            sample_uniform_population(&self.bounds, n, &mut self.sample_rng)
        } else {
            let (pop, clipped) =
                sample_gaussian_population(&self.state.mean, self.state.sigma, &self.bounds, n, &mut self.sample_rng);
            self.clipped = clipped;
            pop
        }
    }

    fn tell(&mut self, population: &[Vec<f64>], fitness: &[f64]) -> Result<TellReport> {
        check_population(population, fitness, self.dims())?;
        self.buffer.append(population.to_vec(), fitness.to_vec())?;
        self.state.observe(population, fitness);
        let next_is_warmup = self.state.generation + 1 < self.state.warmup_generations();
        let mut report = TellReport::default();
        if next_is_warmup {
            self.state.mean.clone_from(&self.state.best_solution);
        } else {
            let queries = self.query_all();
            for q in &queries {
                self.apply(q);
            }
            self.queries += queries.len();
            self.fallbacks += queries.iter().filter(|q| q.is_fallback()).count();
            report.queries = queries;
        }
        self.state.advance();
        Ok(report)
    }

    fn mean(&self) -> &[f64] {
        &self.state.mean
    }

    fn best(&self) -> Option<(&[f64], f64)> {
        best_of(&self.state)
    }

    fn generation(&self) -> usize {
        self.state.generation
    }

    fn phase(&self) -> Phase {
        self.state.phase
    }

    fn last_ask_clipped(&self) -> bool {
        self.clipped
    }

    fn fallback_rate(&self) -> Option<f64> {
        Some(EvoLlm::fallback_rate(self))
    }
}

/// Uniform sampling over the bounds; keeps only the incumbent.
#[derive(Debug)]
pub struct RandomSearch {
    bounds: SearchBounds,
    state: SearchState,
    population_size: usize,
    sample_rng: ChaCha8Rng,
}

impl RandomSearch {
    pub fn new(bounds: SearchBounds, population_size: usize, seed: u64) -> Result<Self> {
        if population_size == 0 {
            return Err(Error::invalid("random search", "population_size must be positive"));
        }
        let state = SearchState::new(initial_mean(&bounds, seed), 0.0, 0)?;
        Ok(Self { bounds, state, population_size, sample_rng: stream(seed, STREAM_SAMPLE) })
    }
}

impl Strategy for RandomSearch {
    fn name(&self) -> &'static str {
        "random_search"
    }

    fn dims(&self) -> usize {
        self.bounds.dims()
    }

    fn ask(&mut self) -> Vec<Vec<f64>> {
        sample_uniform_population(&self.bounds, self.population_size, &mut self.sample_rng)
    }

    fn tell(&mut self, population: &[Vec<f64>], fitness: &[f64]) -> Result<TellReport> {
        check_population(population, fitness, self.dims())?;
        self.state.observe(population, fitness);
        self.state.advance();
        Ok(TellReport::default())
    }

    fn mean(&self) -> &[f64] {
        &self.state.mean
    }

    fn best(&self) -> Option<(&[f64], f64)> {
        best_of(&self.state)
    }

    fn generation(&self) -> usize {
        self.state.generation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HillClimbConfig {
    pub sigma: f64,
    /// Leading generations sampled uniformly, as in the model-driven warm-up.
    pub warmup_generations: usize,
}

impl Default for HillClimbConfig {
    fn default() -> Self {
        Self { sigma: 0.2, warmup_generations: 0 }
    }
}

/// Gaussian hill climbing: sample around the mean, move the mean to the best
/// candidate only on strict improvement of the incumbent.
#[derive(Debug)]
pub struct HillClimb {
    bounds: SearchBounds,
    state: SearchState,
    population_size: usize,
    sample_rng: ChaCha8Rng,
    clipped: bool,
}

impl HillClimb {
    pub fn new(bounds: SearchBounds, config: &HillClimbConfig, population_size: usize, seed: u64) -> Result<Self> {
        if population_size == 0 {
            return Err(Error::invalid("hill climbing", "population_size must be positive"));
        }
        let state = SearchState::new(initial_mean(&bounds, seed), config.sigma, config.warmup_generations)?;
        Ok(Self { bounds, state, population_size, sample_rng: stream(seed, STREAM_SAMPLE), clipped: false })
    }

    pub fn with_mean(mut self, mean: Vec<f64>) -> Self {
        assert_eq!(mean.len(), self.bounds.dims());
        self.state.best_solution.clone_from(&mean);
        self.state.mean = mean;
        self
    }

    pub fn state(&self) -> &SearchState {
        &self.state
    }
}

impl Strategy for HillClimb {
    fn name(&self) -> &'static str {
        "hill_climb"
    }

    fn dims(&self) -> usize {
        self.bounds.dims()
    }

    fn ask(&mut self) -> Vec<Vec<f64>> {
        if self.state.in_warmup() {
            self.clipped = false;
            sample_uniform_population(&self.bounds, self.population_size, &mut self.sample_rng)
        } else {
            let (pop, clipped) = sample_gaussian_population(
                &self.state.mean,
                self.state.sigma,
                &self.bounds,
                self.population_size,
                &mut self.sample_rng,
            );
            self.clipped = clipped;
            pop
        }
    }

    fn tell(&mut self, population: &[Vec<f64>], fitness: &[f64]) -> Result<TellReport> {
        check_population(population, fitness, self.dims())?;
        if self.state.observe(population, fitness) {
            self.state.mean.clone_from(&self.state.best_solution);
        }
        self.state.advance();
        Ok(TellReport::default())
    }

    fn mean(&self) -> &[f64] {
        &self.state.mean
    }

    fn best(&self) -> Option<(&[f64], f64)> {
        best_of(&self.state)
    }

    fn generation(&self) -> usize {
        self.state.generation
    }

    fn phase(&self) -> Phase {
        self.state.phase
    }

    fn last_ask_clipped(&self) -> bool {
        self.clipped
    }
}

/// Learning rates left unset take the usual SNES defaults:
/// `lr_mean = 1`, `lr_sigma = (3 + ln D) / (5 sqrt D)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnesConfig {
    pub lr_mean: Option<f64>,
    pub lr_sigma: Option<f64>,
    pub init_sigma: f64,
}

impl Default for SnesConfig {
    fn default() -> Self {
        Self { lr_mean: None, lr_sigma: None, init_sigma: 1.0 }
    }
}

impl SnesConfig {
    pub fn lr_mean(&self) -> f64 {
        self.lr_mean.unwrap_or(1.0)
    }

    pub fn lr_sigma(&self, dims: usize) -> f64 {
        self.lr_sigma.unwrap_or_else(|| {
            let d = dims as f64;
            (3.0 + d.ln()) / (5.0 * d.sqrt())
        })
    }
}

/// Zero-sum log-rank utilities. Entry `i` belongs to `fitness[i]`; the best
/// (lowest) fitness gets the largest utility and tied fitness values share
/// the average utility of their ranks.
pub fn snes_utilities(fitness: &[f64]) -> Vec<f64> {
    let n = fitness.len();
    if n == 0 {
        return Vec::new();
    }
    let half = (n as f64 / 2.0 + 1.0).ln();
    let raw: Vec<f64> = (1..=n).map(|rank| (half - (rank as f64).ln()).max(0.0)).collect();
    let total: f64 = raw.iter().sum();
    let by_rank: Vec<f64> = raw.iter().map(|r| r / total - 1.0 / n as f64).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && fitness[order[end]] == fitness[order[start]] {
            end += 1;
        }
        let shared = by_rank[start..end].iter().sum::<f64>() / (end - start) as f64;
        for &i in &order[start..end] {
            out[i] = shared;
        }
        start = end;
    }
    out
}

/// One separable natural-gradient step from standard-normal `samples`.
pub fn snes_update(
    mean: &mut [f64],
    scales: &mut [f64],
    samples: &[Vec<f64>],
    fitness: &[f64],
    lr_mean: f64,
    lr_sigma: f64,
) {
    let u = snes_utilities(fitness);
    for d in 0..mean.len() {
        let grad_mu: f64 = u.iter().zip(samples).map(|(u, s)| u * s[d]).sum();
        let grad_sigma: f64 = u.iter().zip(samples).map(|(u, s)| u * (s[d] * s[d] - 1.0)).sum();
        mean[d] += lr_mean * scales[d] * grad_mu;
        scales[d] *= (lr_sigma / 2.0 * grad_sigma).exp();
    }
}

/// Separable natural evolution strategy with per-dimension scales.
#[derive(Debug)]
pub struct Snes {
    bounds: SearchBounds,
    config: SnesConfig,
    mean: Vec<f64>,
    scales: Vec<f64>,
    best: Option<(Vec<f64>, f64)>,
    generation: usize,
    population_size: usize,
    samples: Vec<Vec<f64>>,
    sample_rng: ChaCha8Rng,
    clipped: bool,
}

impl Snes {
    pub fn new(bounds: SearchBounds, config: SnesConfig, population_size: usize, seed: u64) -> Result<Self> {
        if population_size < 2 {
            return Err(Error::invalid("snes", "population_size must be at least 2"));
        }
        if !(config.init_sigma > 0.0) || config.lr_mean() <= 0.0 || config.lr_sigma(bounds.dims()) <= 0.0 {
            return Err(Error::invalid("snes", "init_sigma and learning rates must be positive"));
        }
        let dims = bounds.dims();
        Ok(Self {
            mean: initial_mean(&bounds, seed),
            scales: vec![config.init_sigma; dims],
            bounds,
            config,
            best: None,
            generation: 0,
            population_size,
            samples: Vec::new(),
            sample_rng: stream(seed, STREAM_SAMPLE),
            clipped: false,
        })
    }

    pub fn with_mean(mut self, mean: Vec<f64>) -> Self {
        assert_eq!(mean.len(), self.bounds.dims());
        self.mean = mean;
        self
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }
}

impl Strategy for Snes {
    fn name(&self) -> &'static str {
        "snes"
    }

    fn dims(&self) -> usize {
        self.bounds.dims()
    }

    fn ask(&mut self) -> Vec<Vec<f64>> {
        let dims = self.dims();
        self.clipped = false;
        self.samples = (0..self.population_size)
            .map(|_| (0..dims).map(|_| self.sample_rng.sample(StandardNormal)).collect())
            .collect();
        self.samples
            .iter()
            .map(|s: &Vec<f64>| {
                let mut x: Vec<f64> = self.mean.iter().zip(&self.scales).zip(s).map(|((m, sd), e)| m + sd * e).collect();
                self.clipped |= self.bounds.clip(&mut x);
                x
            })
            .collect()
    }

    fn tell(&mut self, population: &[Vec<f64>], fitness: &[f64]) -> Result<TellReport> {
        check_population(population, fitness, self.dims())?;
        if population.len() != self.samples.len() {
            return Err(Error::Shape(format!(
                "told {} candidates but the last ask produced {}",
                population.len(),
                self.samples.len()
            )));
        }
        for (x, &f) in population.iter().zip(fitness) {
            if self.best.as_ref().is_none_or(|(_, b)| f < *b) {
                self.best = Some((x.clone(), f));
            }
        }
        let lr_sigma = self.config.lr_sigma(self.dims());
        snes_update(&mut self.mean, &mut self.scales, &self.samples, fitness, self.config.lr_mean(), lr_sigma);
        self.generation += 1;
        Ok(TellReport::default())
    }

    fn mean(&self) -> &[f64] {
        &self.mean
    }

    fn best(&self) -> Option<(&[f64], f64)> {
        self.best.as_ref().map(|(x, f)| (x.as_slice(), *f))
    }

    fn generation(&self) -> usize {
        self.generation
    }

    fn last_ask_clipped(&self) -> bool {
        self.clipped
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{EchoBestOracle, ReplayBackend};

    fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    fn drive(s: &mut dyn Strategy, gens: usize, f: fn(&[f64]) -> f64) -> Vec<f64> {
        let mut trace = Vec::new();
        for _ in 0..gens {
            let pop = s.ask();
            let fit: Vec<f64> = pop.iter().map(|x| f(x)).collect();
            s.tell(&pop, &fit).unwrap();
            trace.push(s.best().unwrap().1);
        }
        trace
    }

    fn bounds(d: usize) -> SearchBounds {
        SearchBounds::uniform(d, -3.0, 3.0).unwrap()
    }

    #[test]
    fn utilities_are_zero_sum_and_rank_ordered() {
        for n in 1..40 {
            let f: Vec<f64> = (0..n).map(|i| ((i * 7919) % 97) as f64).collect();
            let u = snes_utilities(&f);
            assert!(u.iter().sum::<f64>().abs() < 1e-12, "n={n}");
        }
        let u = snes_utilities(&[3.0, 1.0, 2.0, 4.0]);
        assert!(u[1] > u[2] && u[2] >= u[0] && u[0] >= u[3]);
    }

    #[test]
    fn antithetic_symmetric_fitness_keeps_mean() {
        let s = vec![vec![0.3, -1.2], vec![-0.3, 1.2], vec![1.5, 0.1], vec![-1.5, -0.1]];
        let f = vec![2.0, 2.0, 5.0, 5.0];
        let mut mean = vec![0.7, -0.4];
        let mut scales = vec![1.0, 0.5];
        snes_update(&mut mean, &mut scales, &s, &f, 1.0, 0.5);
        assert!((mean[0] - 0.7).abs() < 1e-15 && (mean[1] + 0.4).abs() < 1e-15);
    }

    #[test]
    fn random_search_incumbent_is_monotone_and_replays() {
        let mut a = RandomSearch::new(bounds(2), 10, 9).unwrap();
        let mut b = RandomSearch::new(bounds(2), 10, 9).unwrap();
        let ta = drive(&mut a, 20, sphere);
        assert_eq!(ta, drive(&mut b, 20, sphere));
        assert!(ta.windows(2).all(|w| w[1] <= w[0]));
        assert!(ta[19] < ta[0]);
    }

    #[test]
    fn hill_climb_keeps_mean_without_improvement() {
        let mut hc = HillClimb::new(bounds(2), &HillClimbConfig::default(), 4, 1).unwrap().with_mean(vec![0.0, 0.0]);
        let pop = hc.ask();
        hc.tell(&pop, &[1.0; 4]).unwrap();
        let m = hc.mean().to_vec();
        let pop = hc.ask();
        hc.tell(&pop, &[2.0; 4]).unwrap();
        assert_eq!(hc.mean(), m.as_slice());
    }

    #[test]
    fn every_strategy_asks_in_bounds() {
        let b = SearchBounds::uniform(3, -1.0, 1.0).unwrap();
        let backend: Arc<dyn CompletionBackend> = Arc::new(EchoBestOracle::new(1000));
        let mut all: Vec<Box<dyn Strategy>> = vec![
            Box::new(RandomSearch::new(b.clone(), 6, 2).unwrap()),
            Box::new(HillClimb::new(b.clone(), &HillClimbConfig { sigma: 2.0, warmup_generations: 0 }, 6, 2).unwrap()),
            Box::new(Snes::new(b.clone(), SnesConfig { init_sigma: 3.0, ..Default::default() }, 6, 2).unwrap()),
            Box::new(
                EvoLlm::new(
                    b.clone(),
                    EvoLlmConfig { sigma: 2.0, warmup_generations: 1, population_size: 6, ..Default::default() },
                    backend,
                    2,
                )
                .unwrap(),
            ),
        ];
        for s in &mut all {
            let trace = drive(s.as_mut(), 6, sphere);
            assert!(trace.windows(2).all(|w| w[1] <= w[0]), "{}", s.name());
            let pop = s.ask();
            assert_eq!(pop.len(), 6);
            assert!(pop.iter().all(|x| b.contains(x)), "{}", s.name());
        }
    }

    #[test]
    fn garbage_backend_falls_back_every_time() {
        let backend: Arc<dyn CompletionBackend> =
            Arc::new(ReplayBackend::new((0..50).map(|_| "no numbers here".to_string())));
        let cfg = EvoLlmConfig { block_size: Some(1), ..Default::default() };
        let mut s = EvoLlm::new(bounds(2), cfg, backend, 4).unwrap();
        drive(&mut s, 10, sphere);
        assert_eq!(s.query_count(), 2 * 7);
        assert_eq!(s.fallback_rate(), 1.0);
        // fallback recentres on the incumbent
        assert_eq!(s.mean(), s.best().unwrap().0);
    }

    #[test]
    fn block_size_one_issues_one_query_per_dimension() {
        let backend: Arc<dyn CompletionBackend> = Arc::new(EchoBestOracle::new(1000));
        let cfg = EvoLlmConfig { block_size: Some(1), warmup_generations: 1, ..Default::default() };
        let mut s = EvoLlm::new(bounds(2), cfg, backend, 4).unwrap();
        let pop = s.ask();
        let fit: Vec<f64> = pop.iter().map(|x| sphere(x)).collect();
        let report = s.tell(&pop, &fit).unwrap();
        assert_eq!(report.queries.len(), 2);
        assert_eq!(report.queries[0].block, DimBlock::new(0, 1));
        assert_eq!(report.queries[1].block, DimBlock::new(1, 2));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let backend: Arc<dyn CompletionBackend> = Arc::new(EchoBestOracle::new(1000));
        let bad_block = EvoLlmConfig { block_size: Some(3), ..Default::default() };
        assert!(EvoLlm::new(bounds(2), bad_block, backend.clone(), 0).is_err());
        let bad_sigma = EvoLlmConfig { sigma: 0.0, ..Default::default() };
        assert!(EvoLlm::new(bounds(2), bad_sigma, backend, 0).is_err());
        assert!(Snes::new(bounds(2), SnesConfig::default(), 1, 0).is_err());
    }
}
