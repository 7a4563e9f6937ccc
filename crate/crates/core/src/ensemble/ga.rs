//! Generational GA over ensemble head structures.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::chromosome::{mutate, select_parents, uniform_crossover, Chromosome, MutationRates};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    pub population_size: usize,
    pub generations: usize,
    pub parents_per_generation: usize,
    pub layer_gene_mutation_rate: f64,
    pub neuron_gene_mutation_rate: f64,
    pub immigrant_probability: f64,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 20,
            generations: 30,
            parents_per_generation: 10,
            layer_gene_mutation_rate: 0.005,
            neuron_gene_mutation_rate: 0.001,
            immigrant_probability: 0.08,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size < 2 || self.generations == 0 {
            return Err(Error::Config(
                "GA needs a population of at least 2 and one generation".into(),
            ));
        }
        if self.parents_per_generation == 0 || self.parents_per_generation > self.population_size {
            return Err(Error::Config(
                "parents per generation must lie in 1..=population size".into(),
            ));
        }
        for (name, p) in [
            ("layer_gene_mutation_rate", self.layer_gene_mutation_rate),
            ("neuron_gene_mutation_rate", self.neuron_gene_mutation_rate),
            ("immigrant_probability", self.immigrant_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn rates(&self) -> MutationRates {
        MutationRates {
            layer_gene: self.layer_gene_mutation_rate,
            neuron_gene: self.neuron_gene_mutation_rate,
        }
    }
}

/// One line of the GA history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    /// 1-based.
    pub generation: usize,
    pub best_fitness: f64,
    pub best_chromosome: Chromosome,
    pub population_mean_fitness: f64,
}

#[derive(Debug, Clone)]
pub struct GaOutcome {
    pub best: Chromosome,
    pub best_fitness: f64,
    pub history: Vec<GenerationLog>,
}

/// Index of the fittest member, lowest index on ties.
fn best_index(fit: &[f64]) -> usize {
    fit.iter()
        .enumerate()
        .fold(0, |b, (i, f)| if *f > fit[b] { i } else { b })
}

/// Fitness of `pop`, whose first member occupies `first_slot`.
fn evaluate<FF>(
    pop: &[Chromosome],
    fitness_fn: &FF,
    seed: u64,
    generation: usize,
    first_slot: usize,
) -> Result<Vec<f64>>
where
    FF: Fn(&Chromosome, u64) -> Result<f64> + Sync,
{
    pop.par_iter()
        .enumerate()
        .map(|(i, c)| {
            let slot = (first_slot + i) as u64;
            let f = fitness_fn(c, derive_seed(seed, &[4, generation as u64, slot]))?;
            if !f.is_finite() || f < 0.0 {
                return Err(Error::Selection(format!("fitness of {c} is {f}")));
            }
            Ok(f)
        })
        .collect()
}

/// Runs the GA; `fitness_fn(chromosome, seed)` must be non-negative.
///
/// Each generation after the first keeps the previous best unmutated in
/// slot 0, fills the other slots with mutated crossover children of
/// roulette-selected parents, and is then evaluated. With
/// `immigrant_probability` its least fit member is then swapped for a fresh
/// random chromosome. Fitness values are computed once per chromosome
/// instance, so the elite carries its score forward.
pub fn run_ga<FF>(
    fitness_fn: FF,
    config: &GaConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<GaOutcome>
where
    FF: Fn(&Chromosome, u64) -> Result<f64> + Sync,
{
    config.validate()?;
    let seed = config.seed;
    let n = config.population_size;
    let mut pop: Vec<Chromosome> = (0..n)
        .map(|i| Chromosome::random(&mut rng_for(seed, &[0, i as u64])))
        .collect();
    let mut fit = evaluate(&pop, &fitness_fn, seed, 1, 0)?;
    let mut history = Vec::with_capacity(config.generations);

    for generation in 1..=config.generations {
        if generation > 1 {
            let g = generation as u64;
            let elite = best_index(&fit);
            let parents = select_parents(
                &pop,
                &fit,
                config.parents_per_generation,
                &mut rng_for(seed, &[2, g]),
            )?;
            let children: Vec<Chromosome> = (1..n)
                .map(|i| {
                    let mut rng = rng_for(seed, &[1, g, i as u64]);
                    let a = parents[rng.random_range(0..parents.len())];
                    let b = parents[rng.random_range(0..parents.len())];
                    mutate(
                        &uniform_crossover(&a, &b, &mut rng),
                        config.rates(),
                        &mut rng,
                        false,
                    )
                })
                .collect();
            let child_fit = evaluate(&children, &fitness_fn, seed, generation, 1)?;
            let elite_fit = fit[elite];
            pop = std::iter::once(pop[elite]).chain(children).collect();
            fit = std::iter::once(elite_fit).chain(child_fit).collect();

            let mut rng = rng_for(seed, &[3, g]);
            if rng.random_bool(config.immigrant_probability) {
                // slot 0 holds the elite, which is never the unique worst
                let worst = (1..n).fold(1, |w, i| if fit[i] < fit[w] { i } else { w });
                let immigrant = Chromosome::random(&mut rng);
                pop[worst] = immigrant;
                fit[worst] = evaluate(&[immigrant], &fitness_fn, seed, generation, n)?[0];
            }
        }
        let b = best_index(&fit);
        let entry = GenerationLog {
            generation,
            best_fitness: fit[b],
            best_chromosome: pop[b],
            population_mean_fitness: fit.iter().sum::<f64>() / n as f64,
        };
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(w, "{line}").map_err(|e| Error::io("<ga history>", e))?;
        }
        history.push(entry);
    }
    let last = history.last().expect("at least one generation");
    Ok(GaOutcome {
        best: last.best_chromosome,
        best_fitness: last.best_fitness,
        history,
    })
}
