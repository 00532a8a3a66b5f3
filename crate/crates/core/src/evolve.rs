//! FLOP-constrained evolutionary search over group vectors.
//!
//! One iteration evaluates the population, keeps the top K by fitness,
//! produces C children by uniform per-slot crossover and M more by per-slot
//! mutation, and replaces the population with their union. Offspring that
//! break the FLOP budget are resampled a bounded number of times and then
//! fall back to a feasible parent. The reported optimum is the best
//! candidate ever evaluated, not just the best of the final population.

use std::collections::BTreeMap;

use rand::Rng;

use crate::arch::{GroupVector, NetworkConfig};
use crate::error::{Error, Result};
use crate::rng::NamedRng;

/// A genome with its FLOP count and measured fitness.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub genome: GroupVector,
    pub flops: f64,
    pub fitness: f64,
}

/// Search hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub population_size: usize,
    pub top_k: usize,
    pub num_crossover: usize,
    pub num_mutation: usize,
    pub max_iterations: usize,
    pub flop_budget: f64,
    pub mutation_prob: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            population_size: 50,
            top_k: 10,
            num_crossover: 25,
            num_mutation: 25,
            max_iterations: 20,
            flop_budget: f64::INFINITY,
            mutation_prob: 0.1,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size == 0 {
            return Err(Error::config("population_size must be positive"));
        }
        if self.num_crossover + self.num_mutation != self.population_size {
            return Err(Error::config(format!(
                "population replacement must satisfy crossovers + mutations == population \
                 ({} + {} != {})",
                self.num_crossover, self.num_mutation, self.population_size
            )));
        }
        if self.top_k > self.population_size {
            return Err(Error::config("top_k cannot exceed population_size"));
        }
        if self.top_k < 2 && self.num_crossover > 0 {
            return Err(Error::config("crossover needs top_k >= 2 parents"));
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return Err(Error::config("mutation_prob must be in [0, 1]"));
        }
        if self.flop_budget.is_nan() || self.flop_budget <= 0.0 {
            return Err(Error::config("flop_budget must be positive"));
        }
        Ok(())
    }
}

/// Per-slot admissible group counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpace {
    pub slot_candidates: Vec<Vec<usize>>,
}

impl SearchSpace {
    pub fn of_config(config: &NetworkConfig) -> Self {
        SearchSpace {
            slot_candidates: config.slots().iter().map(|s| s.candidates()).collect(),
        }
    }

    pub fn num_slots(&self) -> usize {
        self.slot_candidates.len()
    }

    fn random_genome(&self, rng: &mut NamedRng) -> GroupVector {
        GroupVector(
            self.slot_candidates
                .iter()
                .map(|c| c[rng.gen_range(0..c.len())])
                .collect(),
        )
    }

    /// The cheapest genome: every slot at its largest group count.
    pub fn cheapest_genome(&self) -> GroupVector {
        GroupVector(
            self.slot_candidates
                .iter()
                .map(|c| *c.last().expect("slots have at least group 1"))
                .collect(),
        )
    }

    pub fn contains(&self, genome: &GroupVector) -> bool {
        genome.len() == self.num_slots()
            && genome
                .0
                .iter()
                .zip(&self.slot_candidates)
                .all(|(g, c)| c.contains(g))
    }
}

/// Per-iteration log row. `best_*` refer to the best candidate seen so far
/// across the whole run, so the fitness column is monotone non-decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub best_genome: GroupVector,
    pub best_flops: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: Candidate,
    pub history: Vec<IterationStats>,
    /// Every distinct genome evaluated over the run.
    pub evaluated: Vec<Candidate>,
}

const FEASIBLE_DRAW_ATTEMPTS: usize = 10_000;
const DISTINCT_ATTEMPTS: usize = 100;
const OFFSPRING_ATTEMPTS: usize = 100;

fn draw_feasible(
    space: &SearchSpace,
    budget: f64,
    flops_of: &impl Fn(&GroupVector) -> f64,
    rng: &mut NamedRng,
) -> GroupVector {
    for _ in 0..FEASIBLE_DRAW_ATTEMPTS {
        let genome = space.random_genome(rng);
        if flops_of(&genome) <= budget {
            return genome;
        }
    }
    // The budget was verified feasible up front, so the cheapest genome fits.
    space.cheapest_genome()
}

fn check_budget_feasible(
    space: &SearchSpace,
    budget: f64,
    flops_of: &impl Fn(&GroupVector) -> f64,
) -> Result<()> {
    let cheapest = space.cheapest_genome();
    let f = flops_of(&cheapest);
    if f > budget {
        return Err(Error::config(format!(
            "FLOP budget {budget:.4e} is infeasible: the cheapest genome needs {f:.4e}"
        )));
    }
    Ok(())
}

/// Draws the initial population: uniform per-slot samples, rejected until
/// they fit the budget, distinct where the feasible space allows it.
pub fn sample_candidates(
    cfg: &SearchConfig,
    space: &SearchSpace,
    flops_of: &impl Fn(&GroupVector) -> f64,
    rng: &mut NamedRng,
) -> Result<Vec<GroupVector>> {
    cfg.validate()?;
    check_budget_feasible(space, cfg.flop_budget, flops_of)?;
    let mut seen: std::collections::BTreeSet<GroupVector> = Default::default();
    let mut out = Vec::with_capacity(cfg.population_size);
    for _ in 0..cfg.population_size {
        let mut genome = draw_feasible(space, cfg.flop_budget, flops_of, rng);
        let mut retries = DISTINCT_ATTEMPTS;
        while seen.contains(&genome) && retries > 0 {
            genome = draw_feasible(space, cfg.flop_budget, flops_of, rng);
            retries -= 1;
        }
        seen.insert(genome.clone());
        out.push(genome);
    }
    Ok(out)
}

/// Deterministic candidate ordering: fitness descending, then FLOPs
/// ascending, then genome lexicographic.
fn candidate_order(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.fitness
        .total_cmp(&a.fitness)
        .then(a.flops.total_cmp(&b.flops))
        .then(a.genome.cmp(&b.genome))
}

/// The K fittest candidates, ties broken by lower FLOPs then genome order.
pub fn select_topk(pop: &[Candidate], k: usize) -> Vec<Candidate> {
    assert!(k <= pop.len(), "top-{k} requested from population of {}", pop.len());
    let mut sorted: Vec<Candidate> = pop.to_vec();
    sorted.sort_by(candidate_order);
    sorted.truncate(k);
    sorted
}

/// Uniform per-slot crossover of two distinct parents per child. Over-budget
/// children are resampled; after bounded retries the fitter parent of the
/// last drawn pair is used instead.
pub fn crossover(
    parents: &[Candidate],
    count: usize,
    budget: f64,
    flops_of: &impl Fn(&GroupVector) -> f64,
    rng: &mut NamedRng,
) -> Vec<GroupVector> {
    assert!(parents.len() >= 2, "crossover needs at least two parents");
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut fallback: Option<GroupVector> = None;
        let mut produced = None;
        for _ in 0..OFFSPRING_ATTEMPTS {
            let i = rng.gen_range(0..parents.len());
            let mut j = rng.gen_range(0..parents.len() - 1);
            if j >= i {
                j += 1;
            }
            let (pa, pb) = (&parents[i], &parents[j]);
            let child = GroupVector(
                pa.genome
                    .0
                    .iter()
                    .zip(&pb.genome.0)
                    .map(|(&a, &b)| if rng.gen::<bool>() { a } else { b })
                    .collect(),
            );
            let fitter = if candidate_order(pa, pb).is_le() { pa } else { pb };
            fallback = Some(fitter.genome.clone());
            if flops_of(&child) <= budget {
                produced = Some(child);
                break;
            }
        }
        out.push(produced.unwrap_or_else(|| fallback.expect("at least one attempt ran")));
    }
    out
}

/// Copies a uniformly chosen input genome and redraws each slot with
/// probability `mutation_prob`. Infeasible results are resampled as in
/// crossover, falling back to the unmutated copy.
pub fn mutation(
    cands: &[GroupVector],
    count: usize,
    space: &SearchSpace,
    mutation_prob: f64,
    budget: f64,
    flops_of: &impl Fn(&GroupVector) -> f64,
    rng: &mut NamedRng,
) -> Vec<GroupVector> {
    assert!(!cands.is_empty(), "mutation needs a non-empty candidate list");
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut fallback: Option<GroupVector> = None;
        let mut produced = None;
        for _ in 0..OFFSPRING_ATTEMPTS {
            let src = &cands[rng.gen_range(0..cands.len())];
            let mut genome = src.clone();
            for (slot, g) in genome.0.iter_mut().enumerate() {
                if rng.gen::<f64>() < mutation_prob {
                    let c = &space.slot_candidates[slot];
                    *g = c[rng.gen_range(0..c.len())];
                }
            }
            fallback = Some(src.clone());
            if flops_of(&genome) <= budget {
                produced = Some(genome);
                break;
            }
        }
        out.push(produced.unwrap_or_else(|| fallback.expect("at least one attempt ran")));
    }
    out
}

/// Runs the whole search. `evaluate` receives a batch of genomes needing
/// fitness (already deduplicated against the run's cache) and returns one
/// fitness per genome, in order.
pub fn evolve(
    cfg: &SearchConfig,
    space: &SearchSpace,
    flops_of: impl Fn(&GroupVector) -> f64,
    mut evaluate: impl FnMut(&[GroupVector]) -> Result<Vec<f64>>,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    check_budget_feasible(space, cfg.flop_budget, &flops_of)?;
    let mut rng = NamedRng::new(cfg.seed, "search");

    let mut cache: BTreeMap<GroupVector, f64> = BTreeMap::new();
    let mut evaluated: Vec<Candidate> = Vec::new();
    let mut eval_population = |genomes: &[GroupVector],
                               cache: &mut BTreeMap<GroupVector, f64>,
                               evaluated: &mut Vec<Candidate>|
     -> Result<Vec<Candidate>> {
        let mut fresh: Vec<GroupVector> = Vec::new();
        for g in genomes {
            if !cache.contains_key(g) && !fresh.contains(g) {
                fresh.push(g.clone());
            }
        }
        if !fresh.is_empty() {
            let fits = evaluate(&fresh)?;
            assert_eq!(fits.len(), fresh.len(), "evaluator must return one fitness per genome");
            for (g, f) in fresh.into_iter().zip(fits) {
                let flops = flops_of(&g);
                evaluated.push(Candidate {
                    genome: g.clone(),
                    flops,
                    fitness: f,
                });
                cache.insert(g, f);
            }
        }
        Ok(genomes
            .iter()
            .map(|g| Candidate {
                genome: g.clone(),
                flops: flops_of(g),
                fitness: cache[g],
            })
            .collect())
    };

    let best_of = |cands: &[Candidate]| -> Candidate {
        cands
            .iter()
            .min_by(|a, b| candidate_order(a, b))
            .expect("non-empty")
            .clone()
    };

    let genomes = sample_candidates(cfg, space, &flops_of, &mut rng)?;
    let mut population = eval_population(&genomes, &mut cache, &mut evaluated)?;
    let mut best = best_of(&population);
    let mut history = vec![IterationStats {
        iteration: 0,
        best_fitness: best.fitness,
        mean_fitness: mean_fitness(&population),
        best_genome: best.genome.clone(),
        best_flops: best.flops,
    }];

    for iteration in 1..=cfg.max_iterations {
        let parents = select_topk(&population, cfg.top_k);
        let children = crossover(&parents, cfg.num_crossover, cfg.flop_budget, &flops_of, &mut rng);
        let mutants = mutation(
            &children,
            cfg.num_mutation,
            space,
            cfg.mutation_prob,
            cfg.flop_budget,
            &flops_of,
            &mut rng,
        );
        let next: Vec<GroupVector> = children.into_iter().chain(mutants).collect();
        population = eval_population(&next, &mut cache, &mut evaluated)?;
        debug_assert_eq!(population.len(), cfg.population_size);

        let iter_best = best_of(&population);
        if candidate_order(&iter_best, &best).is_lt() {
            best = iter_best;
        }
        history.push(IterationStats {
            iteration,
            best_fitness: best.fitness,
            mean_fitness: mean_fitness(&population),
            best_genome: best.genome.clone(),
            best_flops: best.flops,
        });
    }

    Ok(SearchOutcome {
        best,
        history,
        evaluated,
    })
}

fn mean_fitness(pop: &[Candidate]) -> f64 {
    pop.iter().map(|c| c.fitness).sum::<f64>() / pop.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    /// Three-slot toy space with a synthetic additive cost.
    fn toy_space() -> SearchSpace {
        SearchSpace {
            slot_candidates: vec![vec![1, 2, 3, 6], vec![1, 2, 4], vec![1, 2, 4]],
        }
    }

    fn toy_flops(g: &GroupVector) -> f64 {
        // strictly decreasing in every slot
        600.0 / g.0[0] as f64 + 400.0 / g.0[1] as f64 + 200.0 / g.0[2] as f64
    }

    fn enumerate_feasible(space: &SearchSpace, budget: f64) -> Vec<GroupVector> {
        let mut out = Vec::new();
        for &a in &space.slot_candidates[0] {
            for &b in &space.slot_candidates[1] {
                for &c in &space.slot_candidates[2] {
                    let g = GroupVector(vec![a, b, c]);
                    if toy_flops(&g) <= budget {
                        out.push(g);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn sampling_unconstrained_returns_population_size() {
        let cfg = SearchConfig {
            population_size: 20,
            num_crossover: 10,
            num_mutation: 10,
            ..SearchConfig::default()
        };
        let mut rng = NamedRng::new(1, "search");
        let got = sample_candidates(&cfg, &toy_space(), &toy_flops, &mut rng).unwrap();
        assert_eq!(got.len(), 20);
        assert!(got.iter().all(|g| toy_space().contains(g)));
    }

    #[test]
    fn degenerate_budget_returns_the_unique_feasible_genome() {
        let space = toy_space();
        let cheapest = space.cheapest_genome();
        let budget = toy_flops(&cheapest);
        let cfg = SearchConfig {
            population_size: 8,
            top_k: 4,
            num_crossover: 4,
            num_mutation: 4,
            flop_budget: budget,
            ..SearchConfig::default()
        };
        let mut rng = NamedRng::new(2, "search");
        let got = sample_candidates(&cfg, &space, &toy_flops, &mut rng).unwrap();
        assert!(got.iter().all(|g| g == &cheapest));
    }

    #[test]
    fn infeasible_budget_errors_before_search_work() {
        let cfg = SearchConfig {
            flop_budget: 1.0,
            ..SearchConfig::default()
        };
        let mut rng = NamedRng::new(3, "search");
        let err = sample_candidates(&cfg, &toy_space(), &toy_flops, &mut rng);
        assert!(matches!(err, Err(Error::Config(_))));
        let evolved = evolve(&cfg, &toy_space(), toy_flops, |_| unreachable!("must not evaluate"));
        assert!(evolved.is_err());
    }

    #[test]
    fn feasible_sampling_is_uniform_over_the_feasible_set() {
        let space = toy_space();
        // Budget admitting roughly 40% of the 36-genome space.
        let all: Vec<GroupVector> = enumerate_feasible(&space, f64::INFINITY);
        let mut costs: Vec<f64> = all.iter().map(toy_flops).collect();
        costs.sort_by(f64::total_cmp);
        let budget = costs[(costs.len() as f64 * 0.4) as usize];
        let feasible = enumerate_feasible(&space, budget);
        assert!(feasible.len() >= 10, "toy budget admits {}", feasible.len());

        let draws = 10_000usize;
        let cfg = SearchConfig {
            population_size: draws,
            num_crossover: draws / 2,
            num_mutation: draws - draws / 2,
            flop_budget: budget,
            ..SearchConfig::default()
        };
        let mut rng = NamedRng::new(4, "search");
        let got = sample_candidates(&cfg, &space, &toy_flops, &mut rng).unwrap();
        assert!(got.iter().all(|g| toy_flops(g) <= budget));

        let mut counts: BTreeMap<&GroupVector, usize> = feasible.iter().map(|g| (g, 0)).collect();
        for g in &got {
            *counts.get_mut(g).expect("sample outside feasible set") += 1;
        }
        let expected = draws as f64 / feasible.len() as f64;
        let chi2: f64 = counts
            .values()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        let dist = ChiSquared::new((feasible.len() - 1) as f64).unwrap();
        let critical = dist.inverse_cdf(0.99);
        assert!(
            chi2 < critical,
            "chi2 {chi2:.2} exceeds critical {critical:.2} (df {})",
            feasible.len() - 1
        );
    }

    fn cand(genome: Vec<usize>, flops: f64, fitness: f64) -> Candidate {
        Candidate {
            genome: GroupVector(genome),
            flops,
            fitness,
        }
    }

    #[test]
    fn topk_with_k_equal_population_is_a_reordering() {
        let pop = vec![
            cand(vec![1], 10.0, 0.3),
            cand(vec![2], 9.0, 0.9),
            cand(vec![4], 8.0, 0.5),
        ];
        let top = select_topk(&pop, 3);
        assert_eq!(top.len(), 3);
        assert_eq!(top[0].fitness, 0.9);
        assert_eq!(top[1].fitness, 0.5);
        assert_eq!(top[2].fitness, 0.3);
    }

    #[test]
    fn topk_tie_break_prefers_lower_flops_then_lex_genome() {
        let pop = vec![
            cand(vec![2, 1], 20.0, 0.7),
            cand(vec![1, 2], 10.0, 0.7),
            cand(vec![1, 1], 10.0, 0.7),
            cand(vec![9, 9], 5.0, 0.1),
        ];
        // Brute-force oracle: apply the documented tie-break by hand.
        let top = select_topk(&pop, 2);
        assert_eq!(top[0].genome.0, vec![1, 1]);
        assert_eq!(top[1].genome.0, vec![1, 2]);
    }

    #[test]
    #[should_panic(expected = "top-5 requested")]
    fn topk_larger_than_population_is_contract_violation() {
        let pop = vec![cand(vec![1], 1.0, 0.5)];
        let _ = select_topk(&pop, 5);
    }

    #[test]
    fn crossover_of_identical_parents_reproduces_them() {
        let parents = vec![cand(vec![2, 4, 1], 10.0, 0.5), cand(vec![2, 4, 1], 10.0, 0.5)];
        let mut rng = NamedRng::new(5, "search");
        let kids = crossover(&parents, 10, f64::INFINITY, &toy_flops, &mut rng);
        assert!(kids.iter().all(|k| k.0 == vec![2, 4, 1]));
    }

    #[test]
    fn crossover_children_stay_within_parent_slot_values() {
        let parents = vec![
            cand(vec![1, 2, 4], 10.0, 0.9),
            cand(vec![6, 1, 2], 9.0, 0.8),
            cand(vec![3, 4, 1], 8.0, 0.7),
        ];
        let mut rng = NamedRng::new(6, "search");
        let kids = crossover(&parents, 200, f64::INFINITY, &toy_flops, &mut rng);
        for k in kids {
            for (slot, g) in k.0.iter().enumerate() {
                assert!(
                    parents.iter().any(|p| p.genome.0[slot] == *g),
                    "slot {slot} value {g} not from any parent"
                );
            }
        }
    }

    #[test]
    fn crossover_respects_budget_even_when_a_parent_does_not() {
        // Parent A is over budget; every emitted child must still fit.
        let space = toy_space();
        let budget = 700.0;
        let over = cand(vec![1, 1, 1], toy_flops(&GroupVector(vec![1, 1, 1])), 0.9);
        assert!(over.flops > budget);
        let under = cand(vec![6, 4, 4], toy_flops(&GroupVector(vec![6, 4, 4])), 0.8);
        assert!(under.flops <= budget);
        let parents = vec![over, under];
        let mut rng = NamedRng::new(7, "search");
        for _ in 0..10 {
            let kids = crossover(&parents, 100, budget, &toy_flops, &mut rng);
            assert!(kids.iter().all(|k| toy_flops(k) <= budget));
        }
        let _ = space;
    }

    #[test]
    fn mutation_prob_zero_copies_and_one_redraws() {
        let space = toy_space();
        let src = vec![GroupVector(vec![2, 2, 2])];
        let mut rng = NamedRng::new(8, "search");
        let copies = mutation(&src, 20, &space, 0.0, f64::INFINITY, &toy_flops, &mut rng);
        assert!(copies.iter().all(|g| g.0 == vec![2, 2, 2]));

        let redraws = mutation(&src, 2000, &space, 1.0, f64::INFINITY, &toy_flops, &mut rng);
        // With p=1 every slot is redrawn uniformly; slot 0 must hit all four
        // candidates across 2000 trials.
        for &v in &space.slot_candidates[0] {
            assert!(redraws.iter().any(|g| g.0[0] == v));
        }
    }

    #[test]
    fn mutation_changed_slot_fraction_matches_analytic_expectation() {
        let space = toy_space();
        let src = vec![GroupVector(vec![1, 1, 1])];
        let p = 0.1f64;
        let trials = 10_000usize;
        let mut rng = NamedRng::new(9, "search");
        let out = mutation(&src, trials, &space, p, f64::INFINITY, &toy_flops, &mut rng);

        // Per slot, a change requires a redraw (prob p) landing on a
        // different value (prob 1 − 1/k).
        for slot in 0..3 {
            let k = space.slot_candidates[slot].len() as f64;
            let expect = p * (1.0 - 1.0 / k);
            let changed = out.iter().filter(|g| g.0[slot] != 1).count() as f64 / trials as f64;
            let sigma = (expect * (1.0 - expect) / trials as f64).sqrt();
            assert!(
                (changed - expect).abs() <= 3.0 * sigma,
                "slot {slot}: observed {changed:.4} vs expected {expect:.4} (3σ = {:.4})",
                3.0 * sigma
            );
        }
    }

    fn planted_cfg(seed: u64, iters: usize) -> SearchConfig {
        SearchConfig {
            population_size: 50,
            top_k: 10,
            num_crossover: 25,
            num_mutation: 25,
            max_iterations: iters,
            flop_budget: f64::INFINITY,
            mutation_prob: 0.1,
            seed,
        }
    }

    #[test]
    fn zero_iterations_returns_best_of_initial_sample() {
        let space = toy_space();
        let cfg = planted_cfg(10, 0);
        let mut seen: Vec<GroupVector> = Vec::new();
        let outcome = evolve(&cfg, &space, toy_flops, |gs| {
            seen.extend_from_slice(gs);
            Ok(gs.iter().map(|g| 1.0 / toy_flops(g)).collect())
        })
        .unwrap();
        assert_eq!(outcome.history.len(), 1);
        let best_seen = seen
            .iter()
            .map(|g| 1.0 / toy_flops(g))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(outcome.best.fitness, best_seen);
    }

    #[test]
    fn best_fitness_is_monotone_and_population_size_is_preserved() {
        let space = SearchSpace {
            slot_candidates: vec![vec![1, 2, 4, 8]; 6],
        };
        let hidden = GroupVector(vec![4, 1, 8, 2, 2, 4]);
        let cfg = planted_cfg(11, 12);
        let fitness = |g: &GroupVector| {
            let matches = g.0.iter().zip(&hidden.0).filter(|(a, b)| a == b).count();
            matches as f64 / 6.0
        };
        let outcome = evolve(&cfg, &space, |_| 1.0, |gs| Ok(gs.iter().map(fitness).collect())).unwrap();
        assert_eq!(outcome.history.len(), 13);
        for w in outcome.history.windows(2) {
            assert!(w[1].best_fitness >= w[0].best_fitness);
        }
        assert_eq!(outcome.best.fitness, 1.0, "hidden optimum not found");
        assert_eq!(outcome.best.genome, hidden);
    }

    #[test]
    fn identical_seed_and_fitness_give_identical_history() {
        let space = toy_space();
        let cfg = planted_cfg(12, 6);
        let run = || {
            evolve(&cfg, &space, toy_flops, |gs| {
                Ok(gs.iter().map(|g| 1.0 / toy_flops(g)).collect())
            })
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.history, b.history);
        assert_eq!(a.best, b.best);
        assert_eq!(a.evaluated, b.evaluated);
    }

    #[test]
    fn every_evaluated_genome_respects_the_budget() {
        let space = toy_space();
        let budget = 900.0;
        let cfg = SearchConfig {
            flop_budget: budget,
            max_iterations: 8,
            seed: 13,
            ..planted_cfg(13, 8)
        };
        let outcome = evolve(&cfg, &space, toy_flops, |gs| {
            Ok(gs.iter().map(|g| 1.0 / toy_flops(g)).collect())
        })
        .unwrap();
        assert!(outcome.evaluated.iter().all(|c| c.flops <= budget));
        assert!(outcome
            .evaluated
            .iter()
            .all(|c| space.contains(&c.genome)));
    }
}
