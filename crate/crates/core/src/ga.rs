//! Steady-state genetic search over PRFS coefficients.
//!
//! Every generation the two fittest individuals are recombined and mutated
//! into a single offspring that replaces the worst one. Only `p` and `q`
//! evolve; `ω` and `m` stay fixed. Fitness networks all start from the same
//! initialization seed, so a fitness value depends on the function alone and
//! is computed once per individual.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backward::{sample_prfs_with_shift, BackwardFnSpec};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::scalar::Real;
use crate::topology::{InitStats, NetworkState, NetworkTopology};
use crate::trainer::{evaluate, train, Mechanism, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub elite_count: usize,
    pub fitness_epochs: usize,
    /// Probability that a coefficient receives gaussian noise.
    pub mutation_rate: f64,
    pub mutation_sigma: f64,
    /// PRFS harmonics `k`.
    pub harmonics: usize,
    pub omega: f64,
    /// Vertical shift `m`, held fixed.
    pub shift: f64,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 10,
            generations: 20,
            elite_count: 2,
            fitness_epochs: 1,
            mutation_rate: 0.2,
            mutation_sigma: 0.1,
            harmonics: 4,
            omega: 0.01,
            shift: 1.0,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ga.{m}")));
        if self.population < 3 {
            return bad("population must be >= 3");
        }
        if self.elite_count < 2 || self.elite_count >= self.population {
            return bad("elite_count must be >= 2 and < population");
        }
        if self.fitness_epochs == 0 {
            return bad("fitness_epochs must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return bad("mutation_rate must be in [0, 1]");
        }
        if !(self.mutation_sigma >= 0.0 && self.mutation_sigma.is_finite()) {
            return bad("mutation_sigma must be finite and >= 0");
        }
        if self.harmonics == 0 {
            return bad("harmonics must be >= 1");
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return bad("omega must be > 0");
        }
        if !(self.shift >= 0.0 && self.shift.is_finite()) {
            return bad("shift must be finite and >= 0");
        }
        Ok(())
    }
}

fn prfs_parts<T: Real>(spec: &BackwardFnSpec<T>) -> Result<(T, &[T], &[T], T)> {
    match spec {
        BackwardFnSpec::Prfs { omega, p, q, m } => Ok((*omega, p, q, *m)),
        other => Err(Error::InvalidParameter(format!(
            "genetic operators need a prfs spec, got {}",
            other.family()
        ))),
    }
}

/// Uniform crossover: each coefficient position comes from either parent
/// with equal probability. The child is renormalized.
pub fn crossover<T: Real>(a: &BackwardFnSpec<T>, b: &BackwardFnSpec<T>, seed: u64) -> Result<BackwardFnSpec<T>> {
    let (omega, pa, qa, m) = prfs_parts(a)?;
    let (omega_b, pb, qb, _) = prfs_parts(b)?;
    if pa.len() != pb.len() || omega != omega_b {
        return Err(Error::InvalidParameter(
            "crossover parents must share k and omega".into(),
        ));
    }
    let mut rng = stream_rng(seed, Stream::Genetic, 0);
    let mut pick = |x: &[T], y: &[T]| -> Vec<T> {
        x.iter()
            .zip(y)
            .map(|(&u, &v)| if rng.random::<bool>() { u } else { v })
            .collect()
    };
    let p = pick(pa, pb);
    let q = pick(qa, qb);
    let mut child = BackwardFnSpec::Prfs { omega, p, q, m: m.abs() };
    if !child.normalize() {
        // both parents were degenerate at every position
        return Ok(a.clone());
    }
    Ok(child)
}

/// Adds `N(0, sigma)` noise to each coefficient with probability `rate`.
/// The result is renormalized when anything changed; otherwise the input is
/// returned unchanged.
pub fn mutate<T: Real>(spec: &BackwardFnSpec<T>, rate: f64, sigma: f64, seed: u64) -> Result<BackwardFnSpec<T>> {
    let (omega, p, q, m) = prfs_parts(spec)?;
    if !(0.0..=1.0).contains(&rate) || !(sigma >= 0.0) {
        return Err(Error::InvalidParameter("mutation needs rate in [0, 1] and sigma >= 0".into()));
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = stream_rng(seed, Stream::Genetic, 1);
    let mut changed = false;
    let mut jitter = |xs: &[T]| -> Vec<T> {
        xs.iter()
            .map(|&x| {
                if rng.random::<f64>() < rate {
                    changed = true;
                    x + T::lit(noise.sample(&mut rng))
                } else {
                    x
                }
            })
            .collect()
    };
    let p = jitter(p);
    let q = jitter(q);
    if !changed {
        return Ok(spec.clone());
    }
    let mut child = BackwardFnSpec::Prfs { omega, p, q, m: m.abs() };
    if !child.normalize() {
        return Ok(spec.clone());
    }
    Ok(child)
}

/// Population state after one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation<T> {
    pub generation: usize,
    /// Stable identifiers; offspring get fresh ids.
    pub ids: Vec<usize>,
    pub fitness: Vec<f64>,
    pub best_index: usize,
    pub best: BackwardFnSpec<T>,
}

impl<T> Generation<T> {
    pub fn best_fitness(&self) -> f64 {
        self.fitness[self.best_index]
    }

    pub fn median_fitness(&self) -> f64 {
        let mut f = self.fitness.clone();
        f.sort_by(f64::total_cmp);
        let n = f.len();
        if n % 2 == 1 {
            f[n / 2]
        } else {
            0.5 * (f[n / 2 - 1] + f[n / 2])
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaRecord<T> {
    /// Generation 0 is the random initial population.
    pub generations: Vec<Generation<T>>,
}

impl<T: Real> GaRecord<T> {
    pub fn best_fitness_trace(&self) -> Vec<f64> {
        self.generations.iter().map(Generation::best_fitness).collect()
    }

    /// `generation,individual_id,fitness`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["generation", "individual_id", "fitness"])?;
        for g in &self.generations {
            for (id, f) in g.ids.iter().zip(&g.fitness) {
                out.write_record([g.generation.to_string(), id.to_string(), format!("{f:.6}")])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// One `gen_NNN_best.toml` per generation.
    pub fn write_snapshots(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for g in &self.generations {
            let text = toml::to_string(&g.best).map_err(|e| Error::Config(e.to_string()))?;
            let header = format!(
                "# generation {} individual {} fitness {:.6}\n",
                g.generation,
                g.ids[g.best_index],
                g.best_fitness()
            );
            std::fs::write(dir.join(format!("gen_{:03}_best.toml", g.generation)), header + &text)?;
        }
        Ok(())
    }
}

/// Index of the fittest individual; ties go to the lowest index.
fn argmax(fitness: &[f64]) -> usize {
    let mut best = 0;
    for (i, &f) in fitness.iter().enumerate() {
        if f > fitness[best] {
            best = i;
        }
    }
    best
}

/// Indices ordered by descending fitness, ties by ascending index.
fn ranking(fitness: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..fitness.len()).collect();
    order.sort_by(|&a, &b| fitness[b].total_cmp(&fitness[a]).then(a.cmp(&b)));
    order
}

fn score<T: Real>(
    fitness: &mut impl FnMut(&BackwardFnSpec<T>) -> Result<f64>,
    spec: &BackwardFnSpec<T>,
    id: usize,
) -> f64 {
    match fitness(spec) {
        Ok(f) if f.is_finite() => f,
        Ok(f) => {
            log::warn!("individual {id}: non-finite fitness {f}, scored 0");
            0.0
        }
        Err(e) => {
            log::warn!("individual {id}: fitness evaluation failed ({e}), scored 0");
            0.0
        }
    }
}

/// Runs the search with a caller-supplied fitness function and returns the
/// best individual of the final generation.
pub fn evolve<T: Real>(
    cfg: &GaConfig,
    mut fitness: impl FnMut(&BackwardFnSpec<T>) -> Result<f64>,
) -> Result<(BackwardFnSpec<T>, GaRecord<T>)> {
    cfg.validate()?;
    let omega = T::lit(cfg.omega);
    let shift = T::lit(cfg.shift);
    let mut population: Vec<BackwardFnSpec<T>> = (0..cfg.population)
        .map(|i| {
            sample_prfs_with_shift(
                derive_seed(cfg.seed, Stream::Genetic, i as u64),
                cfg.harmonics,
                omega,
                shift,
            )
        })
        .collect::<Result<_>>()?;
    let mut ids: Vec<usize> = (0..cfg.population).collect();
    let mut scores: Vec<f64> = population
        .iter()
        .zip(&ids)
        .map(|(s, &id)| score(&mut fitness, s, id))
        .collect();
    let mut next_id = cfg.population;
    let snapshot = |generation: usize, pop: &[BackwardFnSpec<T>], ids: &[usize], scores: &[f64]| {
        let best_index = argmax(scores);
        Generation {
            generation,
            ids: ids.to_vec(),
            fitness: scores.to_vec(),
            best_index,
            best: pop[best_index].clone(),
        }
    };
    let mut record = GaRecord {
        generations: vec![snapshot(0, &population, &ids, &scores)],
    };

    for generation in 1..=cfg.generations {
        let order = ranking(&scores);
        let (a, b) = (order[0], order[1]);
        let op_seed = derive_seed(cfg.seed, Stream::Genetic, (1 << 20) + generation as u64);
        let child = crossover(&population[a], &population[b], op_seed)?;
        let child = mutate(&child, cfg.mutation_rate, cfg.mutation_sigma, op_seed)?;
        let child_score = score(&mut fitness, &child, next_id);
        // worst non-elite, ties to the highest index
        let worst = *order[cfg.elite_count..]
            .iter()
            .max_by(|&&x, &&y| scores[y].total_cmp(&scores[x]).then(x.cmp(&y)))
            .expect("population exceeds elite count");
        log::info!(
            "generation {generation}: offspring {next_id} fitness {child_score:.4} replaces {} ({:.4})",
            ids[worst],
            scores[worst]
        );
        population[worst] = child;
        scores[worst] = child_score;
        ids[worst] = next_id;
        next_id += 1;
        record.generations.push(snapshot(generation, &population, &ids, &scores));
    }
    let best = record.generations.last().unwrap().best.clone();
    Ok((best, record))
}

/// Fitness = test accuracy after `epochs` of aDFA training with `g` as the
/// backward function, always from the network initialized by `topology.seed`.
pub fn accuracy_fitness<'a, T: Real>(
    topology: &'a NetworkTopology,
    stats: &'a InitStats<T>,
    base: &'a TrainConfig<T>,
    epochs: usize,
    train_set: &'a Dataset<T>,
    test_set: &'a Dataset<T>,
) -> impl FnMut(&BackwardFnSpec<T>) -> Result<f64> + 'a {
    move |g| {
        let mut net = NetworkState::initialize(topology, stats)?;
        let cfg = TrainConfig {
            mechanism: Mechanism::Adfa,
            backward: Some(g.clone()),
            epochs,
            ..base.clone()
        };
        train(&mut net, train_set, None, &cfg)?;
        evaluate(&net, test_set, &cfg)
    }
}
