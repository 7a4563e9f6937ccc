//! Frozen-base ensemble head and the genetic search over its structure.

mod chromosome;
mod ga;
mod head;

pub use chromosome::{
    decode_chromosome, fitness, mutate, select_parents, uniform_crossover, Chromosome,
    MutationRates, MAX_LAYERS, MAX_WIDTH, NUM_GENES,
};
pub use ga::{run_ga, GaConfig, GaOutcome, GenerationLog};
pub use head::{
    ensemble_forward, head_fitness, train_ensemble, train_head, BaseOutputs, EnsembleHead,
    EnsembleModel, ENSEMBLE_KIND,
};
