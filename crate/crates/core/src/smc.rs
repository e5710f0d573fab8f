//! Feynman-Kac / sequential Monte Carlo controller over the same grid,
//! tasks, proposal processes and RNE machinery as the replica-exchange
//! engine, so comparisons isolate the algorithmic difference only.
//!
//! Particles move backward along the annealing grid; each segment's
//! incremental weight is the target ratio times the proposal RNE evaluated
//! on the particle's own path, the same object the swap acceptance uses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::engine::Dynamics;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::logspace::logsumexp;
use crate::rng::{Purpose, RngFactory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleScheme {
    Systematic,
    /// Replace the lowest-weight fraction of particles by systematic draws
    /// from the replaced pool, splitting the pool's mass equally across the
    /// refills. Survivors keep their weights, every particle's expected
    /// post-resampling mass equals its weight, and the total is preserved
    /// exactly; a fraction of 1 coincides with full systematic resampling.
    Partial { fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleTrigger {
    /// Resample at every checkpoint.
    Always,
    /// Resample when the normalised effective sample size drops to the
    /// threshold or below.
    EssBelow(f64),
    /// Pure importance sampling, never resample.
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmcConfig {
    pub particles: usize,
    /// Check the trigger every this many level segments.
    pub resample_every: usize,
    pub scheme: ResampleScheme,
    pub trigger: ResampleTrigger,
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

impl SmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::InvalidConfig("need at least one particle".into()));
        }
        if self.resample_every == 0 {
            return Err(Error::InvalidConfig(
                "resample cadence must be positive".into(),
            ));
        }
        if let ResampleScheme::Partial { fraction } = self.scheme {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "partial resampling fraction must lie in (0, 1], got {fraction}"
                )));
            }
        }
        if let ResampleTrigger::EssBelow(th) = self.trigger {
            if !(th > 0.0 && th <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "ess threshold must lie in (0, 1], got {th}"
                )));
            }
        }
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Weighted particles at a common diffusion time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleSystem<S> {
    pub particles: Vec<S>,
    pub log_weights: Vec<f64>,
    /// Parent indices recorded at each resampling event.
    pub ancestry: Vec<Vec<usize>>,
    pub ess_history: Vec<f64>,
}

impl<S> ParticleSystem<S> {
    pub fn new(particles: Vec<S>) -> Self {
        let n = particles.len();
        ParticleSystem {
            particles,
            log_weights: vec![0.0; n],
            ancestry: Vec::new(),
            ess_history: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Normalised weights; errors when the total mass is zero.
    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        let total = logsumexp(&self.log_weights)?;
        if total == f64::NEG_INFINITY {
            return Err(Error::DegenerateWeights(
                "all particle weights are zero".into(),
            ));
        }
        Ok(self
            .log_weights
            .iter()
            .map(|lw| (lw - total).exp())
            .collect())
    }
}

/// Effective sample size `(sum w)^2 / sum w^2` computed in log domain.
/// Returns `(absolute, normalised)`.
pub fn ess(log_weights: &[f64]) -> Result<(f64, f64)> {
    let total = logsumexp(log_weights)?;
    if total == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights(
            "all particle weights are zero".into(),
        ));
    }
    let doubled: Vec<f64> = log_weights.iter().map(|w| 2.0 * w).collect();
    let sq = logsumexp(&doubled)?;
    let abs = (2.0 * total - sq).exp();
    Ok((abs, abs / log_weights.len() as f64))
}

/// Systematic offspring counts for normalised weights from a single uniform.
fn systematic_offspring(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let mut counts = vec![0usize; n];
    let mut cum = 0.0;
    let mut j = 0usize;
    for (i, w) in weights.iter().enumerate() {
        cum += w;
        while j < n && (j as f64 + u) / (n as f64) < cum {
            counts[i] += 1;
            j += 1;
        }
    }
    // guard against accumulated rounding in the final stratum
    while j < n {
        counts[n - 1] += 1;
        j += 1;
    }
    counts
}

/// Full systematic resampling: offspring from one uniform draw with
/// stratified positions, weights reset uniform at `total / n` so the total
/// mass is preserved exactly, ancestry recorded.
pub fn systematic_resample<S: Clone>(
    ps: &mut ParticleSystem<S>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let weights = ps.normalized_weights()?;
    let total = logsumexp(&ps.log_weights)?;
    let u: f64 = rng.gen();
    let counts = systematic_offspring(&weights, u);
    let mut parents = Vec::with_capacity(ps.len());
    for (i, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            parents.push(i);
        }
    }
    ps.particles = parents.iter().map(|&i| ps.particles[i].clone()).collect();
    ps.log_weights = vec![total - (ps.len() as f64).ln(); ps.len()];
    ps.ancestry.push(parents);
    Ok(())
}

/// Partial resampling: the `ceil(fraction * n)` lowest-weight particles are
/// replaced by systematic draws from that pool's weight distribution, each
/// refill carrying an equal share of the pool's mass. Survivors keep their
/// weights, so both strata retain their exact mass and the estimator stays
/// unbiased particle by particle.
pub fn partial_resample<S: Clone>(
    ps: &mut ParticleSystem<S>,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let n = ps.len();
    let n_replace = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    if n_replace == n {
        return systematic_resample(ps, rng);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        ps.log_weights[a]
            .partial_cmp(&ps.log_weights[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let pool: Vec<usize> = order[..n_replace].to_vec();
    let pool_logs: Vec<f64> = pool.iter().map(|&i| ps.log_weights[i]).collect();
    let pool_total = logsumexp(&pool_logs)?;
    if pool_total == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights(
            "resampling pool carries no mass".into(),
        ));
    }
    let pool_weights: Vec<f64> = pool_logs.iter().map(|lw| (lw - pool_total).exp()).collect();
    let u: f64 = rng.gen();
    let counts = systematic_offspring(&pool_weights, u);
    let mut draws = Vec::with_capacity(n_replace);
    for (k, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            draws.push(pool[k]);
        }
    }
    let refill_log_weight = pool_total - (n_replace as f64).ln();
    let mut parents: Vec<usize> = (0..n).collect();
    let mut slots = pool.clone();
    slots.sort_unstable();
    let new_particles: Vec<S> = draws.iter().map(|&i| ps.particles[i].clone()).collect();
    for (slot, (src, particle)) in slots
        .iter()
        .zip(draws.iter().zip(new_particles.into_iter()))
    {
        ps.particles[*slot] = particle;
        ps.log_weights[*slot] = refill_log_weight;
        parents[*slot] = *src;
    }
    ps.ancestry.push(parents);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SmcDiagnostics {
    /// Score/rate evaluations in the annealing region, `particles * M * K * J`.
    pub nfe: u64,
    pub completion_evals: u64,
    /// Normalised ESS recorded at every trigger checkpoint.
    pub ess_history: Vec<f64>,
    /// Segment indices (counted from the noise end) where resampling fired.
    pub resample_events: Vec<usize>,
    pub final_log_weights: Vec<f64>,
    pub wall_time_s: f64,
}

/// Run the SMC sweep from the noise end down to the data end, sharing the
/// grid, truncation, proposals and RNE machinery with the PT engine.
pub fn smc_run<D: Dynamics>(
    dynamics: &D,
    grid: &TimeGrid,
    config: &SmcConfig,
) -> Result<(ParticleSystem<D::State>, SmcDiagnostics)> {
    config.validate()?;
    let start = std::time::Instant::now();
    let factory = RngFactory::new(config.seed);
    let m = grid.num_pairs();
    let n = config.particles;

    let mut particles: Vec<D::State> = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = factory.stream(m as u64, i as u64, Purpose::Init);
        particles.push(dynamics.sample_top(grid, &mut rng)?);
    }
    let mut ps = ParticleSystem::new(particles);
    let mut diag = SmcDiagnostics::default();

    let pool = if config.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.workers)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?,
        )
    } else {
        None
    };

    let mut segments_done = 0usize;
    for pair in (1..=m).rev() {
        let times = grid.pair_times(pair);
        let step = |i: usize, state: &D::State| -> Result<(D::State, f64)> {
            let mut rng = factory.stream(pair as u64, i as u64, Purpose::SmcPropagate);
            let path = dynamics.smc_propagate(state, times, &mut rng)?;
            let dw = dynamics.segment_log_weight(&path, (pair - 1, pair), grid)?;
            Ok((path.first().clone(), dw))
        };
        let moved: Vec<Result<(D::State, f64)>> = match &pool {
            Some(p) => p.install(|| {
                ps.particles
                    .par_iter()
                    .enumerate()
                    .map(|(i, s)| step(i, s))
                    .collect()
            }),
            None => ps
                .particles
                .iter()
                .enumerate()
                .map(|(i, s)| step(i, s))
                .collect(),
        };
        for (i, r) in moved.into_iter().enumerate() {
            let (state, dw) = r?;
            ps.particles[i] = state;
            ps.log_weights[i] += dw;
        }
        diag.nfe += (n as u64) * (grid.substeps() as u64) * dynamics.models_per_eval();
        segments_done += 1;

        if segments_done % config.resample_every == 0 {
            let (_, norm) = ess(&ps.log_weights)?;
            diag.ess_history.push(norm);
            ps.ess_history.push(norm);
            let fire = match config.trigger {
                ResampleTrigger::Always => true,
                ResampleTrigger::EssBelow(th) => norm <= th,
                ResampleTrigger::Never => false,
            };
            if fire {
                let mut rng = factory.stream(pair as u64, 0, Purpose::SmcResample);
                match config.scheme {
                    ResampleScheme::Systematic => systematic_resample(&mut ps, &mut rng)?,
                    ResampleScheme::Partial { fraction } => {
                        partial_resample(&mut ps, fraction, &mut rng)?
                    }
                }
                diag.resample_events.push(segments_done);
            }
        }
    }

    // completion below the truncation time, no weighting
    let times = grid.completion_times();
    if times.len() > 1 {
        let complete = |i: usize, state: &D::State| -> Result<D::State> {
            let mut rng = factory.stream(0, i as u64, Purpose::Completion);
            dynamics.complete(state, times, &mut rng)
        };
        let done: Vec<Result<D::State>> = match &pool {
            Some(p) => p.install(|| {
                ps.particles
                    .par_iter()
                    .enumerate()
                    .map(|(i, s)| complete(i, s))
                    .collect()
            }),
            None => ps
                .particles
                .iter()
                .enumerate()
                .map(|(i, s)| complete(i, s))
                .collect(),
        };
        for (i, r) in done.into_iter().enumerate() {
            ps.particles[i] = r?;
        }
        diag.completion_evals +=
            (n as u64) * (times.len() as u64 - 1) * dynamics.models_per_eval();
    }

    diag.final_log_weights = ps.log_weights.clone();
    diag.wall_time_s = start.elapsed().as_secs_f64();
    Ok((ps, diag))
}
