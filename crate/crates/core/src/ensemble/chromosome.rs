//! Nine-gene encoding of the ensemble head structure and its genetic
//! operators.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_GENES: usize = 9;
pub const MAX_LAYERS: u32 = 8;
pub const MAX_WIDTH: u32 = 756;

/// Gene 0 is the hidden layer count `L`; genes `1..=L` are layer widths and
/// the remaining genes are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct Chromosome {
    genes: [u32; NUM_GENES],
}

fn invalid(genes: &[u32], msg: impl Into<String>) -> Error {
    Error::InvalidChromosome {
        genes: genes.to_vec(),
        msg: msg.into(),
    }
}

/// Hidden layer widths encoded by `genes`, in order.
pub fn decode_chromosome(genes: &[u32]) -> Result<Vec<usize>> {
    if genes.len() != NUM_GENES {
        return Err(invalid(
            genes,
            format!("expected {NUM_GENES} genes, got {}", genes.len()),
        ));
    }
    let layers = genes[0];
    if !(1..=MAX_LAYERS).contains(&layers) {
        return Err(invalid(
            genes,
            format!("layer count {layers} outside 1..={MAX_LAYERS}"),
        ));
    }
    let l = layers as usize;
    for (pos, &g) in genes.iter().enumerate().skip(1) {
        if pos <= l && !(1..=MAX_WIDTH).contains(&g) {
            return Err(invalid(
                genes,
                format!("width gene {pos} = {g} outside 1..={MAX_WIDTH}"),
            ));
        }
        if pos > l && g != 0 {
            return Err(invalid(
                genes,
                format!("gene {pos} = {g} lies beyond the {l} active layers"),
            ));
        }
    }
    Ok(genes[1..=l].iter().map(|&g| g as usize).collect())
}

impl Chromosome {
    pub fn new(genes: [u32; NUM_GENES]) -> Result<Self> {
        decode_chromosome(&genes)?;
        Ok(Self { genes })
    }

    /// Chromosome with the given hidden widths.
    pub fn from_widths(widths: &[u32]) -> Result<Self> {
        let mut genes = [0; NUM_GENES];
        if widths.len() >= NUM_GENES {
            return Err(invalid(widths, "too many layers"));
        }
        genes[0] = widths.len() as u32;
        genes[1..=widths.len()].copy_from_slice(widths);
        Self::new(genes)
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let layers = rng.random_range(1..=MAX_LAYERS);
        let mut genes = [0; NUM_GENES];
        genes[0] = layers;
        for g in &mut genes[1..=layers as usize] {
            *g = rng.random_range(1..=MAX_WIDTH);
        }
        Self { genes }
    }

    pub fn genes(&self) -> &[u32; NUM_GENES] {
        &self.genes
    }

    pub fn layers(&self) -> usize {
        self.genes[0] as usize
    }

    pub fn widths(&self) -> Vec<usize> {
        self.genes[1..=self.layers()]
            .iter()
            .map(|&g| g as usize)
            .collect()
    }

    /// Changes the layer count, drawing widths for newly active positions
    /// and zeroing positions that fall away.
    pub fn resized<R: Rng + ?Sized>(&self, layers: u32, rng: &mut R) -> Result<Self> {
        let mut genes = self.genes;
        if !(1..=MAX_LAYERS).contains(&layers) {
            genes[0] = layers;
            return Err(invalid(
                &genes,
                format!("layer count {layers} outside 1..={MAX_LAYERS}"),
            ));
        }
        let old = self.genes[0];
        genes[0] = layers;
        for pos in 1..NUM_GENES as u32 {
            let g = &mut genes[pos as usize];
            if pos > layers {
                *g = 0;
            } else if pos > old {
                *g = rng.random_range(1..=MAX_WIDTH);
            }
        }
        Ok(Self { genes })
    }
}

impl TryFrom<Vec<u32>> for Chromosome {
    type Error = Error;

    fn try_from(genes: Vec<u32>) -> Result<Self> {
        let arr: [u32; NUM_GENES] = genes.as_slice().try_into().map_err(|_| {
            invalid(
                &genes,
                format!("expected {NUM_GENES} genes, got {}", genes.len()),
            )
        })?;
        Self::new(arr)
    }
}

impl From<Chromosome> for Vec<u32> {
    fn from(c: Chromosome) -> Self {
        c.genes.to_vec()
    }
}

/// Comma-separated layer count and widths, e.g. `2,64,32`.
impl fmt::Display for Chromosome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.genes[..=self.layers()]
            .iter()
            .map(u32::to_string)
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// Accepts `L,w1,..,wL` or all nine genes with trailing zeros.
impl FromStr for Chromosome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let genes = s
            .split(',')
            .map(|p| p.trim().parse::<u32>())
            .collect::<std::result::Result<Vec<u32>, _>>()
            .map_err(|e| Error::InvalidChromosome {
                genes: Vec::new(),
                msg: format!("cannot parse {s:?}: {e}"),
            })?;
        let mut padded = genes.clone();
        if padded.len() < NUM_GENES {
            if padded
                .first()
                .is_some_and(|&l| l as usize + 1 != padded.len())
            {
                return Err(invalid(
                    &genes,
                    "layer count does not match the number of widths",
                ));
            }
            padded.resize(NUM_GENES, 0);
        }
        Self::try_from(padded)
    }
}

/// `exp(acc / 2.5)` with the validation accuracy in percent.
pub fn fitness(val_top1_percent: f64) -> f64 {
    (val_top1_percent / 2.5).exp()
}

/// `n` roulette-wheel draws with replacement, `P(i) = f_i / sum(f)`.
pub fn select_parents<R: Rng + ?Sized>(
    population: &[Chromosome],
    fitnesses: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Vec<Chromosome>> {
    if population.len() != fitnesses.len() {
        return Err(Error::Argument(
            "population and fitness lists differ in length".into(),
        ));
    }
    if fitnesses.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::Selection(
            "fitness values must be finite and non-negative".into(),
        ));
    }
    let wheel = WeightedIndex::new(fitnesses)
        .map_err(|e| Error::Selection(format!("cannot build the roulette wheel: {e}")))?;
    Ok((0..n).map(|_| population[wheel.sample(rng)]).collect())
}

/// Picks the child's layer count from one parent, then fills each active
/// width from a random parent that has it.
pub fn uniform_crossover<R: Rng + ?Sized>(
    p1: &Chromosome,
    p2: &Chromosome,
    rng: &mut R,
) -> Chromosome {
    let layers = if rng.random_bool(0.5) {
        p1.genes[0]
    } else {
        p2.genes[0]
    };
    let mut genes = [0; NUM_GENES];
    genes[0] = layers;
    for pos in 1..=layers as usize {
        let (a, b) = (p1.genes[pos], p2.genes[pos]);
        genes[pos] = match (a, b) {
            (0, v) | (v, 0) => v,
            _ if rng.random_bool(0.5) => a,
            _ => b,
        };
    }
    Chromosome { genes }
}

/// Per-gene mutation probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MutationRates {
    pub layer_gene: f64,
    pub neuron_gene: f64,
}

/// Re-draws the layer gene, then each active width gene, independently.
/// The elite passes through untouched.
pub fn mutate<R: Rng + ?Sized>(
    c: &Chromosome,
    rates: MutationRates,
    rng: &mut R,
    is_elite: bool,
) -> Chromosome {
    if is_elite {
        return *c;
    }
    let mut out = *c;
    if rng.random_bool(rates.layer_gene) {
        let layers = rng.random_range(1..=MAX_LAYERS);
        out = out
            .resized(layers, rng)
            .expect("layer count drawn in range");
    }
    for pos in 1..=out.layers() {
        if rng.random_bool(rates.neuron_gene) {
            out.genes[pos] = rng.random_range(1..=MAX_WIDTH);
        }
    }
    out
}
