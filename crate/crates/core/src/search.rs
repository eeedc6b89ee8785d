//! Search-space bounds, the isotropic search state, and population samplers
//! shared by every strategy.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box constraints `lower[d] <= x[d] <= upper[d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl SearchBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(Error::invalid("bounds", "at least one dimension is required"));
        }
        if lower.len() != upper.len() {
            return Err(Error::Shape(format!(
                "lower bound has {} dims, upper bound has {}",
                lower.len(),
                upper.len()
            )));
        }
        for (d, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid("bounds", format!("dimension {d}: need {lo} < {hi}")));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The same interval on every dimension.
    pub fn uniform(dims: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; dims], vec![upper; dims])
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dims()
            && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (lo, hi))| lo <= v && v <= hi)
    }

    /// Clamps `x` into the box in place; returns whether any coordinate moved.
    pub fn clip(&self, x: &mut [f64]) -> bool {
        let mut moved = false;
        for (v, (lo, hi)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            let c = v.clamp(*lo, *hi);
            if c != *v {
                moved = true;
                *v = c;
            }
        }
        moved
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| lo + rng.random::<f64>() * (hi - lo))
            .collect()
    }
}

/// Run-length and population size of one optimization run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBudget {
    pub max_generations: usize,
    pub population_size: usize,
}

impl Default for EvalBudget {
    fn default() -> Self {
        Self { max_generations: 20, population_size: 5 }
    }
}

impl EvalBudget {
    pub fn new(max_generations: usize, population_size: usize) -> Result<Self> {
        let budget = Self { max_generations, population_size };
        budget.validate()?;
        Ok(budget)
    }

    /// A zero-generation budget is accepted and yields a header-only run.
    pub fn validate(&self) -> Result<()> {
        if self.population_size == 0 {
            return Err(Error::invalid("budget", "population_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Llm,
}

/// Isotropic Gaussian search distribution plus the incumbent.
///
/// `best_fitness` starts at `+inf` and `best_solution` at the initial mean
/// until the first tell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub mean: Vec<f64>,
    pub sigma: f64,
    pub generation: usize,
    pub best_solution: Vec<f64>,
    pub best_fitness: f64,
    pub phase: Phase,
    warmup_generations: usize,
}

impl SearchState {
    pub fn new(mean: Vec<f64>, sigma: f64, warmup_generations: usize) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid("sigma", format!("{sigma} is not a finite non-negative scale")));
        }
        let phase = if warmup_generations > 0 { Phase::Warmup } else { Phase::Llm };
        Ok(Self {
            best_solution: mean.clone(),
            mean,
            sigma,
            generation: 0,
            best_fitness: f64::INFINITY,
            phase,
            warmup_generations,
        })
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    pub fn warmup_generations(&self) -> usize {
        self.warmup_generations
    }

    pub fn in_warmup(&self) -> bool {
        self.phase == Phase::Warmup
    }

    pub fn has_incumbent(&self) -> bool {
        self.best_fitness.is_finite()
    }

    /// Folds a told population into the incumbent. Returns true on strict
    /// improvement; ties keep the earlier solution.
    pub fn observe(&mut self, population: &[Vec<f64>], fitness: &[f64]) -> bool {
        let mut improved = false;
        for (x, &f) in population.iter().zip(fitness) {
            if f < self.best_fitness {
                self.best_fitness = f;
                self.best_solution.clone_from(x);
                improved = true;
            }
        }
        improved
    }

    /// Advances the generation counter and the phase.
    pub fn advance(&mut self) {
        self.generation += 1;
        self.phase = if self.generation < self.warmup_generations { Phase::Warmup } else { Phase::Llm };
    }
}

/// `n` points drawn uniformly from the box.
pub fn sample_uniform_population<R: Rng + ?Sized>(
    bounds: &SearchBounds,
    n: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    (0..n).map(|_| bounds.sample_uniform(rng)).collect()
}

/// `n` points `mean + sigma * eps`, `eps ~ N(0, I)`, clipped to the box.
/// The flag reports whether clipping changed any candidate.
pub fn sample_gaussian_population<R: Rng + ?Sized>(
    mean: &[f64],
    sigma: f64,
    bounds: &SearchBounds,
    n: usize,
    rng: &mut R,
) -> (Vec<Vec<f64>>, bool) {
    let mut clipped = false;
    let population = (0..n)
        .map(|_| {
            let mut x: Vec<f64> = mean
                .iter()
                .map(|m| {
                    let eps: f64 = rng.sample(StandardNormal);
                    m + sigma * eps
                })
                .collect();
            clipped |= bounds.clip(&mut x);
            x
        })
        .collect();
    (population, clipped)
}

pub(crate) fn check_population(population: &[Vec<f64>], fitness: &[f64], dims: usize) -> Result<()> {
    if population.len() != fitness.len() {
        return Err(Error::Shape(format!(
            "{} candidates but {} fitness values",
            population.len(),
            fitness.len()
        )));
    }
    if let Some((i, x)) = population.iter().enumerate().find(|(_, x)| x.len() != dims) {
        return Err(Error::Shape(format!("candidate {i} has {} dims, expected {dims}", x.len())));
    }
    if let Some((index, &value)) = fitness.iter().enumerate().find(|(_, f)| f.is_nan()) {
        return Err(Error::NonFinite { index, value });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn bounds_reject_inverted_interval() {
        assert!(SearchBounds::new(vec![1.0], vec![1.0]).is_err());
        assert!(SearchBounds::new(vec![0.0, 0.0], vec![1.0]).is_err());
        assert!(SearchBounds::uniform(3, -3.0, 3.0).is_ok());
    }

    #[test]
    fn zero_sigma_collapses_to_mean() {
        let bounds = SearchBounds::uniform(3, -3.0, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mean = vec![0.5, -1.0, 2.0];
        let (pop, clipped) = sample_gaussian_population(&mean, 0.0, &bounds, 7, &mut rng);
        assert!(!clipped);
        assert!(pop.iter().all(|x| *x == mean));
    }

    #[test]
    fn gaussian_population_mean_converges() {
        let bounds = SearchBounds::uniform(2, -3.0, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (pop, _) = sample_gaussian_population(&[0.0, 0.0], 0.2, &bounds, 100_000, &mut rng);
        for d in 0..2 {
            let m = pop.iter().map(|x| x[d]).sum::<f64>() / pop.len() as f64;
            assert!(m.abs() < 0.01, "dim {d} sample mean {m}");
        }
    }

    #[test]
    fn clipping_keeps_candidates_inside() {
        let bounds = SearchBounds::uniform(2, -1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (pop, clipped) = sample_gaussian_population(&[0.9, -0.9], 1.0, &bounds, 50, &mut rng);
        assert!(clipped);
        assert!(pop.iter().all(|x| bounds.contains(x)));
    }

    #[test]
    fn phase_tracks_warmup_counter() {
        let mut s = SearchState::new(vec![0.0], 0.2, 2).unwrap();
        assert!(s.in_warmup());
        s.advance();
        assert!(s.in_warmup());
        s.advance();
        assert_eq!(s.phase, Phase::Llm);
    }
}
