//! Append-only evaluation history that backs prompt construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::{check_population, SearchBounds};

/// One told population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub index: usize,
    pub candidates: Vec<Vec<f64>>,
    pub fitness: Vec<f64>,
    /// `fitness[i]` beat everything recorded before this generation.
    pub improved: Vec<bool>,
}

impl Generation {
    pub fn len(&self) -> usize {
        self.fitness.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fitness.is_empty()
    }
}

/// A borrowed view of a single evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation<'a> {
    pub generation: usize,
    pub position: usize,
    pub candidate: &'a [f64],
    pub fitness: f64,
    pub improved: bool,
}

/// Full generation history. Fitness is minimized; ties rank the earlier
/// generation, then the lower position, first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveBuffer {
    bounds: SearchBounds,
    generations: Vec<Generation>,
    /// Fitness known before recording started (`+inf` when none).
    incumbent: f64,
    /// `prefix_min[k]` = lowest fitness in generations `0..=k`.
    prefix_min: Vec<f64>,
}

impl ArchiveBuffer {
    pub fn new(bounds: SearchBounds) -> Self {
        Self::with_incumbent(bounds, f64::INFINITY)
    }

    /// A buffer whose improvement flags are also measured against a fitness
    /// obtained before the first recorded generation.
    pub fn with_incumbent(bounds: SearchBounds, incumbent: f64) -> Self {
        Self { bounds, generations: Vec::new(), incumbent, prefix_min: Vec::new() }
    }

    pub fn bounds(&self) -> &SearchBounds {
        &self.bounds
    }

    pub fn dims(&self) -> usize {
        self.bounds.dims()
    }

    pub fn incumbent(&self) -> f64 {
        self.incumbent
    }

    pub fn len(&self) -> usize {
        self.generations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generations.is_empty()
    }

    pub fn generations(&self) -> &[Generation] {
        &self.generations
    }

    pub fn generation(&self, k: usize) -> Result<&Generation> {
        self.generations.get(k).ok_or(Error::Index { index: k, len: self.len() })
    }

    pub fn evaluation_count(&self) -> usize {
        self.generations.iter().map(Generation::len).sum()
    }

    /// Lowest recorded fitness over generations `0..=k`.
    pub fn prefix_min(&self, k: usize) -> Result<f64> {
        self.prefix_min.get(k).copied().ok_or(Error::Index { index: k, len: self.len() })
    }

    /// The value a member of generation `k` must beat to be flagged.
    pub fn flag_reference(&self, k: usize) -> f64 {
        match k.checked_sub(1).and_then(|p| self.prefix_min.get(p)) {
            Some(&m) => m.min(self.incumbent),
            None => self.incumbent,
        }
    }

    /// Records a population and returns the new generation's index.
    pub fn append(&mut self, candidates: Vec<Vec<f64>>, fitness: Vec<f64>) -> Result<usize> {
        check_population(&candidates, &fitness, self.dims())?;
        if candidates.is_empty() {
            return Err(Error::Shape("cannot append an empty generation".into()));
        }
        let index = self.generations.len();
        let reference = self.flag_reference(index);
        let improved = fitness.iter().map(|&f| f < reference).collect();
        let gen_min = fitness.iter().copied().fold(f64::INFINITY, f64::min);
        let prev = self.prefix_min.last().copied().unwrap_or(f64::INFINITY);
        self.prefix_min.push(prev.min(gen_min));
        self.generations.push(Generation { index, candidates, fitness, improved });
        Ok(index)
    }

    fn view(&self, g: usize, p: usize) -> Evaluation<'_> {
        let gen = &self.generations[g];
        Evaluation {
            generation: g,
            position: p,
            candidate: &gen.candidates[p],
            fitness: gen.fitness[p],
            improved: gen.improved[p],
        }
    }

    /// The `m` best evaluations over generations `0..=k`, best first.
    pub fn best_up_to(&self, k: usize, m: usize) -> Result<Vec<Evaluation<'_>>> {
        self.generation(k)?;
        if m == 0 {
            return Err(Error::invalid("member count", "m must be at least 1"));
        }
        // (fitness, generation, position), kept sorted; scan order is the
        // tie-break order so a later equal value never displaces an earlier one.
        let mut top: Vec<(f64, usize, usize)> = Vec::with_capacity(m + 1);
        for gen in &self.generations[..=k] {
            for (p, &f) in gen.fitness.iter().enumerate() {
                if top.len() == m && f >= top[m - 1].0 {
                    continue;
                }
                let at = top.partition_point(|&(tf, _, _)| tf <= f);
                top.insert(at, (f, gen.index, p));
                top.truncate(m);
            }
        }
        Ok(top.into_iter().map(|(_, g, p)| self.view(g, p)).collect())
    }

    /// The best member of generation `k` alone (lowest position on ties).
    pub fn best_within(&self, k: usize) -> Result<Evaluation<'_>> {
        let gen = self.generation(k)?;
        let mut best = 0;
        for (p, &f) in gen.fitness.iter().enumerate().skip(1) {
            if f < gen.fitness[best] {
                best = p;
            }
        }
        Ok(self.view(k, best))
    }

    /// The `m` best members of generation `k` alone, best first.
    pub fn top_within(&self, k: usize, m: usize) -> Result<Vec<Evaluation<'_>>> {
        let gen = self.generation(k)?;
        let mut order: Vec<usize> = (0..gen.len()).collect();
        order.sort_by(|&a, &b| gen.fitness[a].total_cmp(&gen.fitness[b]).then(a.cmp(&b)));
        Ok(order.into_iter().take(m).map(|p| self.view(k, p)).collect())
    }

    /// Best evaluation in the whole buffer.
    pub fn best(&self) -> Option<Evaluation<'_>> {
        self.len().checked_sub(1).and_then(|k| self.best_up_to(k, 1).ok()).and_then(|v| v.into_iter().next())
    }

    /// Improvement flags recomputed from scratch, for consistency checks.
    pub fn recompute_flags(&self) -> Vec<Vec<bool>> {
        let mut reference = self.incumbent;
        self.generations
            .iter()
            .map(|gen| {
                let flags = gen.fitness.iter().map(|&f| f < reference).collect();
                reference = gen.fitness.iter().copied().fold(reference, f64::min);
                flags
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn buffer(dims: usize) -> ArchiveBuffer {
        ArchiveBuffer::new(SearchBounds::uniform(dims, -3.0, 3.0).unwrap())
    }

    fn points(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![i as f64 * 0.1, -(i as f64) * 0.1]).collect()
    }

    #[test]
    fn first_generation_is_flagged_against_infinity() {
        let mut b = buffer(2);
        let k = b.append(points(5), vec![3.0, 1.0, 2.0, 5.0, 4.0]).unwrap();
        assert_eq!(k, 0);
        let g = b.generation(0).unwrap();
        assert!(g.improved.iter().all(|&f| f));
        assert_eq!(b.best_within(0).unwrap().fitness, 1.0);
    }

    #[test]
    fn flags_compare_against_prior_prefix_minimum() {
        let mut b = buffer(2);
        b.append(points(1), vec![0.438]).unwrap();
        b.append(points(5), vec![0.35, 0.50, 0.34, 0.90, 0.61]).unwrap();
        assert_eq!(b.generation(1).unwrap().improved, vec![true, false, true, false, false]);
        b.append(points(2), vec![0.4, 0.9]).unwrap();
        assert_eq!(b.generation(2).unwrap().improved, vec![false, false]);
    }

    #[test]
    fn incumbent_participates_in_flags() {
        let mut b = ArchiveBuffer::with_incumbent(SearchBounds::uniform(2, -3.0, 3.0).unwrap(), 0.5);
        b.append(points(2), vec![0.5, 0.4]).unwrap();
        assert_eq!(b.generation(0).unwrap().improved, vec![false, true]);
    }

    #[test]
    fn shape_errors() {
        let mut b = buffer(2);
        assert!(matches!(b.append(vec![vec![0.0]], vec![1.0]), Err(Error::Shape(_))));
        assert!(matches!(b.append(points(2), vec![1.0]), Err(Error::Shape(_))));
        assert!(matches!(b.best_up_to(0, 1), Err(Error::Index { .. })));
        assert!(matches!(b.best_within(3), Err(Error::Index { .. })));
    }

    #[test]
    fn best_up_to_saturates_and_orders() {
        let mut b = buffer(2);
        b.append(points(3), vec![3.0, 1.0, 2.0]).unwrap();
        b.append(points(2), vec![0.5, 2.0]).unwrap();
        let all = b.best_up_to(1, 100).unwrap();
        let f: Vec<f64> = all.iter().map(|e| e.fitness).collect();
        assert_eq!(f, vec![0.5, 1.0, 2.0, 2.0, 3.0]);
        // the tie at 2.0 puts generation 0 first
        assert_eq!((all[2].generation, all[3].generation), (0, 1));
        assert_eq!(b.best_up_to(0, 1).unwrap()[0].fitness, 1.0);
    }

    #[test]
    fn best_within_tie_takes_lowest_position() {
        let mut b = buffer(2);
        b.append(points(3), vec![2.0, 1.0, 1.0]).unwrap();
        assert_eq!(b.best_within(0).unwrap().position, 1);
        b.append(points(1), vec![7.0]).unwrap();
        assert_eq!(b.best_within(1).unwrap().fitness, 7.0);
    }

    proptest! {
        #[test]
        fn history_invariants(gens in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 1..6), 1..20),
                              m in 1usize..8) {
            let mut b = buffer(2);
            for f in &gens {
                b.append(points(f.len()), f.clone()).unwrap();
            }
            let stored: Vec<Vec<bool>> = b.generations().iter().map(|g| g.improved.clone()).collect();
            prop_assert_eq!(stored, b.recompute_flags());
            let mut last = f64::INFINITY;
            for k in 0..b.len() {
                let pm = b.prefix_min(k).unwrap();
                prop_assert!(pm <= last);
                last = pm;
                prop_assert_eq!(b.best_up_to(k, 1).unwrap()[0].fitness, pm);

                // brute-force oracle for the top-m list
                let mut all: Vec<(f64, usize, usize)> = gens[..=k]
                    .iter()
                    .enumerate()
                    .flat_map(|(g, f)| f.iter().enumerate().map(move |(p, &v)| (v, g, p)))
                    .collect();
                all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                all.truncate(m);
                let got: Vec<(f64, usize, usize)> =
                    b.best_up_to(k, m).unwrap().iter().map(|e| (e.fitness, e.generation, e.position)).collect();
                prop_assert_eq!(got, all);
            }
        }
    }
}
